use esacert::attention::{
    esa_attention, hard_attention_limit, hard_attention_surrogate, standard_attention, EsaBias, EsaConfig,
    RegionPartition, StdScope,
};
use esacert::numerics::{kl_divergence, population_std, softmax, Divergence, LogitMatrix, ProbColumn};
use proptest::prelude::*;

fn logits_strategy(rows: usize, cols: usize) -> impl Strategy<Value = LogitMatrix> {
    prop::collection::vec(-5.0f64..5.0, rows * cols).prop_map(move |v| LogitMatrix::new(rows, cols, v).unwrap())
}

fn distribution(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01f64..1.0, len).prop_map(|v| {
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect()
    })
}

// naive two-pass reference, no shared code with the crate
fn naive_kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).filter(|(pi, _)| **pi > 0.0).map(|(pi, qi)| pi * (pi / qi).ln()).sum()
}

proptest! {
    #[test]
    fn softmax_sums_to_one_and_is_shift_invariant(
        v in prop::collection::vec(-50.0f64..50.0, 1..40),
        c in -100.0f64..100.0,
    ) {
        let a = softmax(&v);
        let total: f64 = a.iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        prop_assert!(a.iter().all(|&x| x >= 0.0));
        let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
        let b = softmax(&shifted);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_survives_huge_logits(v in prop::collection::vec(-1e6f64..1e6, 1..20)) {
        let a = softmax(&v);
        prop_assert!(a.iter().all(|x| x.is_finite()));
        prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn kl_is_nonnegative_and_zero_on_self(p in distribution(12), q in distribution(12)) {
        let pc = ProbColumn::new(p.clone()).unwrap();
        let qc = ProbColumn::new(q.clone()).unwrap();
        let d = kl_divergence(&pc, &qc).unwrap().finite().unwrap();
        prop_assert!(d >= -1e-15);
        prop_assert!((d - naive_kl(&p, &q)).abs() < 1e-12);
        prop_assert_eq!(kl_divergence(&pc, &pc).unwrap(), Divergence::Finite(0.0));
    }

    #[test]
    fn kl_infinite_iff_support_escapes(p in distribution(6), hole in 0usize..6) {
        let mut q = vec![1.0 / 5.0; 6];
        q[hole] = 0.0;
        let pc = ProbColumn::new(p).unwrap();
        let qc = ProbColumn::new(q).unwrap();
        prop_assert!(kl_divergence(&pc, &qc).unwrap().is_infinite());
    }

    #[test]
    fn std_translation_and_homogeneity(
        v in prop::collection::vec(-10.0f64..10.0, 2..30),
        c in -100.0f64..100.0,
        k in -10.0f64..10.0,
    ) {
        let s = population_std(&v).unwrap();
        let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
        let scaled: Vec<f64> = v.iter().map(|x| x * k).collect();
        prop_assert!((population_std(&shifted).unwrap() - s).abs() < 1e-9);
        prop_assert!((population_std(&scaled).unwrap() - k.abs() * s).abs() < 1e-9);
    }

    #[test]
    fn zero_alpha_reproduces_standard(s in logits_strategy(10, 5)) {
        let p = RegionPartition::with_keys(
            RegionPartition::contiguous(3, 2, 5, 5).unwrap(),
            vec![0, 1, 2],
            vec![3, 4],
            vec![7, 8],
        ).unwrap();
        for scope in [StdScope::AllEntries, StdScope::PerColumn] {
            let cfg = EsaConfig::new(0.0, 0.0, scope).unwrap();
            let esa = esa_attention(&s, &p, &cfg).unwrap();
            let std = standard_attention(&s).unwrap();
            for j in 0..5 {
                for i in 0..10 {
                    prop_assert!((esa.get(i, j) - std.get(i, j)).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn esa_raises_edit_mass_monotonically(s in logits_strategy(8, 3), a1 in 0.0f64..2.0, extra in 0.0f64..2.0) {
        let p = RegionPartition::contiguous(3, 0, 5, 3).unwrap();
        let lo = esa_attention(&s, &p, &EsaConfig::new(a1, 0.0, StdScope::AllEntries).unwrap()).unwrap();
        let hi = esa_attention(&s, &p, &EsaConfig::new(a1 + extra, 0.0, StdScope::AllEntries).unwrap()).unwrap();
        for j in 0..3 {
            let m_lo = lo.column(j).unwrap().mass_on(p.edit());
            let m_hi = hi.column(j).unwrap().mass_on(p.edit());
            prop_assert!(m_hi >= m_lo - 1e-12);
        }
    }

    #[test]
    fn bias_matches_alpha_times_std(s in logits_strategy(6, 4), a in 0.0f64..3.0) {
        let p = RegionPartition::contiguous(2, 1, 3, 4).unwrap();
        let bias = EsaBias::compute(&s, &p, &EsaConfig::new(a, 0.0, StdScope::AllEntries).unwrap()).unwrap();
        let sd = population_std(s.values()).unwrap();
        for j in 0..4 {
            prop_assert!((bias.insert[j] - a * sd).abs() < 1e-12);
            prop_assert_eq!(bias.at(&p, 0, j), bias.insert[j]);
            prop_assert_eq!(bias.at(&p, 5, j), 0.0);
        }
    }

    #[test]
    fn surrogate_converges_to_limit(s in logits_strategy(7, 2)) {
        let p = RegionPartition::contiguous(3, 1, 3, 2).unwrap();
        let m = s.max() + 40.0;
        let hard = hard_attention_surrogate(&s, &p, m).unwrap();
        let limit = hard_attention_limit(&p).unwrap().to_map();
        for j in 0..2 {
            for i in 0..7 {
                prop_assert!((hard.get(i, j) - limit.get(i, j)).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn surrogate_rejects_small_m() {
    let s = LogitMatrix::from_rows(vec![vec![3.0], vec![1.0]]).unwrap();
    let p = RegionPartition::contiguous(1, 0, 1, 1).unwrap();
    assert!(hard_attention_surrogate(&s, &p, 2.0).is_err());
    assert!(hard_attention_surrogate(&s, &p, f64::INFINITY).is_err());
    assert!(hard_attention_surrogate(&s, &p, 3.0).is_ok());
}
