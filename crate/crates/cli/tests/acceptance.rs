//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use esacert::attention::{
    biased_column, esa_attention, standard_attention, EsaBias, EsaConfig, RegionPartition, StdScope,
};
use esacert::geometry::{parse_obj, rasterize_canvas, render_rotated, Mesh, Rotation};
use esacert::raster::{Raster, WHITE};
use esacert::theory::{
    sample_logits, sample_trial, softmax_jacobian, trial_seed, verify_statement_1, verify_statement_2, IdealSpec,
    LogitModel, BOUND_TOLERANCE,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEED: u64 = 20_240_601;
const QUERY_COUNTS: [usize; 3] = [8, 16, 64];
const EDIT_COUNTS: [usize; 3] = [2, 4, 8];
const ALPHAS: [f64; 3] = [0.1, 0.5, 1.0];
const M_GRID: [f64; 4] = [10.0, 20.0, 40.0, 80.0];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

/// Edit queries first, then `n_effect` effect queries, then other queries;
/// 4 object keys and 2 background keys; up to 2 restored other queries.
fn partition(n_queries: usize, n_edit: usize, n_effect: usize) -> RegionPartition {
    let base = RegionPartition::contiguous(n_edit, n_effect, n_queries - n_edit - n_effect, 6).unwrap();
    let restore: Vec<usize> = base.other().iter().rev().take(2).copied().collect();
    base.with_keys(vec![0, 1, 2, 3], vec![4, 5], restore).unwrap()
}

struct Trial {
    spec: IdealSpec,
    alpha: f64,
    seed: u64,
}

/// Statement-1 trial set. The ideal-map conditions with `rho >= 1/|edit|`
/// admit only `rho = 1/|edit|`, `epsilon = 0` and no effect queries, so the
/// feasible rho interval is a single point.
fn statement_1_trials(n: usize) -> Vec<Trial> {
    (0..n)
        .map(|t| {
            let nq = QUERY_COUNTS[t % 3];
            let ne = EDIT_COUNTS[(t / 3) % 3];
            let p = partition(nq, ne, 0);
            let lo = 1.0 / ne as f64;
            let hi = IdealSpec::max_feasible_rho(&p, 0.0);
            assert!((hi - lo).abs() < 1e-15);
            Trial { spec: IdealSpec::new(lo, 0.0, p).unwrap(), alpha: ALPHAS[(t / 9) % 3], seed: trial_seed(SEED, t as u64) }
        })
        .collect()
}

fn esa(alpha: f64) -> EsaConfig {
    EsaConfig::new(alpha, alpha, StdScope::AllEntries).unwrap()
}

fn criterion_1() -> Verdict {
    let start = Instant::now();
    let mut cases = 0;
    let mut violations = 0;
    let mut worst = f64::INFINITY;
    for t in statement_1_trials(1000) {
        let (s, ideal) = sample_trial(&t.spec, LogitModel::default(), t.seed).unwrap();
        let r = verify_statement_1(&ideal, &s, t.spec.partition(), &esa(t.alpha)).unwrap();
        let s1 = r.statement_1.unwrap();
        for (g, b) in s1.gap.iter().zip(&s1.lower_bound) {
            cases += 1;
            worst = worst.min(g - b);
            if *g < b - 1e-9 {
                violations += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    verdict(
        violations == 0 && secs < 30.0,
        format!("{violations}/{cases} trial-key cases below bound, min(gap - bound) = {worst:.3e}, {secs:.2}s"),
    )
}

fn criterion_2() -> Verdict {
    let mut cases = 0;
    let mut failures = 0;
    let mut worst: f64 = 0.0;
    let mut worst_exact: f64 = 0.0;
    for t in statement_1_trials(1000) {
        let (s, ideal) = sample_trial(&t.spec, LogitModel::default(), t.seed).unwrap();
        let r = verify_statement_1(&ideal, &s, t.spec.partition(), &esa(t.alpha)).unwrap();
        let s1 = r.statement_1.unwrap();
        for k in 0..s1.gap.len() {
            cases += 1;
            let claimed = s1.delta[k] * (s1.ideal_edit_mass[k] - 1.0);
            let err = (s1.gap[k] - claimed).abs();
            worst = worst.max(err);
            worst_exact = worst_exact.max(s1.identity_residual[k].abs());
            if err > 1e-10 {
                failures += 1;
            }
        }
    }
    verdict(
        failures == 0,
        format!(
            "{failures}/{cases} cases off gap = delta*(a - 1) by > 1e-10 (max {worst:.3e}); \
             gap = delta*a - ln(1 + p(e^delta - 1)) holds to {worst_exact:.1e}"
        ),
    )
}

fn criterion_3() -> Verdict {
    let mut trials = 0;
    let mut finite_limit = 0;
    let mut non_monotone = 0;
    let mut over_bound = 0;
    let mut cases = 0;
    for t in 0..1000u64 {
        let nq = QUERY_COUNTS[(t % 3) as usize];
        let mut ne = EDIT_COUNTS[((t / 3) % 3) as usize];
        if ne + 2 > nq {
            ne = nq - 2;
        }
        let p = partition(nq, ne, 1);
        let eps = 0.02;
        let rho = 0.5 * IdealSpec::max_feasible_rho(&p, eps);
        let spec = IdealSpec::exploratory(rho, eps, p.clone()).unwrap();
        let alpha = ALPHAS[((t / 9) % 3) as usize];
        let (s, ideal) = sample_trial(&spec, LogitModel::default(), trial_seed(SEED ^ 3, t)).unwrap();
        let r = verify_statement_2(&ideal, &s, &p, &esa(alpha), &M_GRID).unwrap().statement_2.unwrap();
        trials += 1;
        for k in 0..r.kl_esa.len() {
            cases += 1;
            if !r.kl_hard_limit[k].is_infinite() {
                finite_limit += 1;
            }
            if !r.kl_hard_surrogates[k].windows(2).all(|w| w[1] > w[0]) {
                non_monotone += 1;
            }
            if r.kl_esa[k] > r.upper_bound + BOUND_TOLERANCE {
                over_bound += 1;
            }
        }
    }
    verdict(
        finite_limit + non_monotone + over_bound == 0,
        format!(
            "{trials} trials / {cases} keys: {finite_limit} finite hard limits, \
             {non_monotone} non-increasing surrogate sequences, {over_bound} ESA divergences over bound"
        ),
    )
}

fn criterion_4() -> Verdict {
    let mut worst: f64 = 0.0;
    for t in 0..100u64 {
        let p = partition(16, 4, 2);
        let s = sample_logits(LogitModel { head_dim: 8, scale: 2.0 }, 16, 6, trial_seed(SEED ^ 4, t)).unwrap();
        for scope in [StdScope::AllEntries, StdScope::PerColumn] {
            let cfg = EsaConfig::new(0.0, 0.0, scope).unwrap();
            let a = esa_attention(&s, &p, &cfg).unwrap();
            let b = standard_attention(&s).unwrap();
            for j in 0..6 {
                for i in 0..16 {
                    worst = worst.max((a.get(i, j) - b.get(i, j)).abs());
                }
            }
        }
    }
    verdict(worst <= 1e-12, format!("max |A_esa - A| = {worst:.3e} over 100 instances"))
}

fn criterion_5() -> Verdict {
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for t in 0..20u64 {
        let s = sample_logits(LogitModel::default(), 8, 4, trial_seed(SEED ^ 5, t)).unwrap();
        let p = RegionPartition::contiguous(2, 1, 5, 4).unwrap().with_keys(vec![0, 1, 2], vec![3], vec![7]).unwrap();
        let bias = EsaBias::compute(&s, &p, &EsaConfig::default()).unwrap();
        for j in 0..4 {
            let col = s.column(j).unwrap();
            let b = bias.column(&p, j);
            let analytic = softmax_jacobian(&col, &b);
            let mut max_err: f64 = 0.0;
            let mut max_j: f64 = 0.0;
            for c in 0..8 {
                let mut up = col.clone();
                let mut dn = col.clone();
                up[c] += h;
                dn[c] -= h;
                let (fu, fd) = (biased_column(&up, &b), biased_column(&dn, &b));
                for r in 0..8 {
                    let numeric = (fu[r] - fd[r]) / (2.0 * h);
                    max_err = max_err.max((numeric - analytic[r][c]).abs());
                    max_j = max_j.max(analytic[r][c].abs());
                }
            }
            worst = worst.max(max_err / max_j);
        }
    }
    verdict(worst < 1e-6, format!("max normwise relative error {worst:.3e} over 20 instances x 4 keys"))
}

fn ellipsoid(r: [f64; 3], stacks: usize, slices: usize, tint: [f64; 3]) -> Mesh {
    use std::f64::consts::PI;
    let mut v = vec![[0.0, 0.0, r[2]]];
    for i in 1..stacks {
        let th = PI * i as f64 / stacks as f64;
        for j in 0..slices {
            let ph = 2.0 * PI * j as f64 / slices as f64;
            v.push([r[0] * th.sin() * ph.cos(), r[1] * th.sin() * ph.sin(), r[2] * th.cos()]);
        }
    }
    v.push([0.0, 0.0, -r[2]]);
    let last = v.len() - 1;
    let ring = |i: usize, j: usize| 1 + (i - 1) * slices + j % slices;
    let mut f = Vec::new();
    for j in 0..slices {
        f.push([0, ring(1, j), ring(1, j + 1)]);
        f.push([last, ring(stacks - 1, j + 1), ring(stacks - 1, j)]);
        for i in 1..stacks - 1 {
            f.push([ring(i, j), ring(i + 1, j), ring(i + 1, j + 1)]);
            f.push([ring(i, j), ring(i + 1, j + 1), ring(i, j + 1)]);
        }
    }
    let c = v.iter().map(|p| [0, 1, 2].map(|k| (tint[k] * (0.6 + 0.4 * p[k] / r[k])).clamp(0.0, 1.0))).collect();
    Mesh::new(v, Some(c), f).unwrap()
}

fn criterion_6() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED ^ 6);
    let target = (0.7f64 * 128.0).round() as usize;
    let mut bad = Vec::new();
    let (mut lo, mut hi) = (usize::MAX, 0);
    for n in 0..50 {
        let axes = [0, 1, 2].map(|_| rng.random_range(0.2..3.0));
        let tint = [0, 1, 2].map(|_| rng.random_range(0.2..1.0));
        let mesh = ellipsoid(axes, rng.random_range(6..16), rng.random_range(8..28), tint);
        let rot = Rotation::new(
            rng.random_range(-180.0..180.0),
            rng.random_range(-180.0..180.0),
            rng.random_range(-180.0..180.0),
        )
        .unwrap();
        let b = render_rotated(&mesh, &rot, 128).unwrap().bbox().unwrap();
        let (cx, cy) = b.center();
        lo = lo.min(b.max_dim());
        hi = hi.max(b.max_dim());
        if b.max_dim().abs_diff(target) > 1 || (cx - 64.0).abs() > 1.0 || (cy - 64.0).abs() > 1.0 {
            bad.push(n);
        }
    }
    verdict(
        bad.is_empty(),
        format!("bbox max dim in [{lo}, {hi}] (target {target} +/- 1), {} meshes out of tolerance {bad:?}", bad.len()),
    )
}

fn criterion_7() -> Verdict {
    let t = 64;
    let front = [[-0.8, -0.6, 0.0], [0.6, -0.5, 0.0], [-0.1, 0.9, 0.0]];
    let back = [[-0.6, 0.6, 1.0], [0.8, 0.5, 1.0], [0.1, -0.9, 1.0]];
    let mut violations = 0;
    let mut overlap = 0;
    for front_first in [true, false] {
        let (first, second) = if front_first { (front, back) } else { (back, front) };
        let mut verts = first.to_vec();
        verts.extend_from_slice(&second);
        let color = |tri: &[[f64; 3]; 3]| if tri[0][2] == 0.0 { [1.0, 0.0, 0.0] } else { [0.0, 0.0, 1.0] };
        let colors = [color(&first); 3].into_iter().chain([color(&second); 3]).collect();
        let mesh = Mesh::new(verts.clone(), Some(colors), vec![[0, 1, 2], [3, 4, 5]]).unwrap();
        let canvas = rasterize_canvas(&mesh, &Rotation::identity(), t, WHITE).unwrap();

        // independent projection of both triangles onto the 3T canvas
        let n = verts.len() as f64;
        let c = [0, 1, 2].map(|k| verts.iter().map(|v| v[k]).sum::<f64>() / n);
        let r = verts
            .iter()
            .map(|v| ((v[0] - c[0]).powi(2) + (v[1] - c[1]).powi(2) + (v[2] - c[2]).powi(2)).sqrt())
            .fold(0.0, f64::max);
        let k = t as f64 / r;
        let half = 1.5 * t as f64;
        let screen = |v: [f64; 3]| (half + k * (v[0] - c[0]), half - k * (v[1] - c[1]));
        let strictly_inside = |tri: &[[f64; 3]; 3], p: (f64, f64)| {
            let s = tri.map(screen);
            let e = |a: (f64, f64), b: (f64, f64)| (b.0 - a.0) * (p.1 - a.1) - (b.1 - a.1) * (p.0 - a.0);
            let w = [e(s[1], s[2]), e(s[2], s[0]), e(s[0], s[1])];
            w.iter().all(|x| *x > 0.0) || w.iter().all(|x| *x < 0.0)
        };
        for y in 0..3 * t {
            for x in 0..3 * t {
                let p = (x as f64 + 0.5, y as f64 + 0.5);
                if strictly_inside(&front, p) && strictly_inside(&back, p) {
                    overlap += 1;
                    if canvas.color(x, y) != [255, 0, 0] {
                        violations += 1;
                    }
                }
            }
        }
    }
    verdict(violations == 0 && overlap > 0, format!("{violations} violations over {overlap} overlap pixels (both face orders)"))
}

fn rotate_quarter_turns(r: &Raster, turns: usize) -> Vec<(usize, usize)> {
    let n = r.width();
    let mut pts = Vec::new();
    for y in 0..n {
        for x in 0..n {
            if r.is_set(x, y) {
                let (mut px, mut py) = (x, y);
                // counterclockwise on screen: (x, y) -> (y, n - 1 - x)
                for _ in 0..turns {
                    (px, py) = (py, n - 1 - px);
                }
                pts.push((px, py));
            }
        }
    }
    pts
}

fn registered_iou(a: &[(usize, usize)], b: &Raster) -> f64 {
    let min = |pts: &[(usize, usize)]| {
        (pts.iter().map(|p| p.0).min().unwrap(), pts.iter().map(|p| p.1).min().unwrap())
    };
    let bpts: Vec<(usize, usize)> =
        (0..b.height()).flat_map(|y| (0..b.width()).map(move |x| (x, y))).filter(|&(x, y)| b.is_set(x, y)).collect();
    let (ax, ay) = min(a);
    let (bx, by) = min(&bpts);
    let norm_a: std::collections::HashSet<(usize, usize)> = a.iter().map(|&(x, y)| (x - ax, y - ay)).collect();
    let norm_b: std::collections::HashSet<(usize, usize)> = bpts.iter().map(|&(x, y)| (x - bx, y - by)).collect();
    let inter = norm_a.intersection(&norm_b).count();
    let union = norm_a.union(&norm_b).count();
    inter as f64 / union as f64
}

fn criterion_8() -> Verdict {
    let mesh = parse_obj(include_str!("../fixtures/l_shape.obj")).unwrap();
    let base = render_rotated(&mesh, &Rotation::identity(), 128).unwrap();
    let mut parts = Vec::new();
    let mut pass = true;
    for (yaw, turns) in [(90.0, 1), (180.0, 2)] {
        let rotated_render = render_rotated(&mesh, &Rotation::new(yaw, 0.0, 0.0).unwrap(), 128).unwrap();
        let iou = registered_iou(&rotate_quarter_turns(&base, turns), &rotated_render);
        pass &= iou >= 0.98;
        parts.push(format!("yaw {yaw}: IoU {iou:.4}"));
    }
    verdict(pass, parts.join(", "))
}

fn run_binary(args: &[&str], out: &Path) -> std::io::Result<std::process::ExitStatus> {
    Command::new(env!("CARGO_BIN_EXE_esacert")).args(args).arg("--out").arg(out).output().map(|o| o.status)
}

fn criterion_9() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let mut mismatches = Vec::new();
    for (cmd, file) in [("verify", "verify_report.json"), ("sweep", "sweep.csv")] {
        let mut outputs = Vec::new();
        let runs: Vec<(String, Vec<&str>)> = vec![
            ("run1".into(), vec![]),
            ("run2".into(), vec![]),
            ("run3".into(), vec![]),
            ("w1".into(), vec!["--workers", "1"]),
            ("w4".into(), vec!["--workers", "4"]),
            ("w8".into(), vec!["--workers", "8"]),
        ];
        for (name, extra) in runs {
            let out = dir.path().join(format!("{cmd}_{name}"));
            let mut args = vec![cmd, "--seed", "7"];
            args.extend(extra);
            let status = run_binary(&args, &out).unwrap();
            if !status.success() {
                mismatches.push(format!("{cmd} {name} exited {status}"));
            }
            outputs.push((name, std::fs::read(out.join(file)).unwrap_or_default()));
        }
        for (name, bytes) in &outputs[1..] {
            if bytes != &outputs[0].1 || bytes.is_empty() {
                mismatches.push(format!("{cmd} {name}"));
            }
        }
    }
    verdict(mismatches.is_empty(), format!("verify and sweep x 3 runs and 1/4/8 workers; mismatches: {mismatches:?}"))
}

fn criterion_10() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let status = run_binary(&["sweep", "--alphas", "0.1,0.5,1.0", "--trials", "100"], dir.path()).unwrap();
    let mut reader = match csv::Reader::from_path(dir.path().join("sweep.csv")) {
        Ok(r) => r,
        Err(e) => return verdict(false, format!("no CSV: {e}")),
    };
    let header_ok = reader.headers().map(|h| h == vec!["alpha", "mean_gap", "mean_lower_bound", "violations"]).unwrap_or(false);
    let mut rows = Vec::new();
    for rec in reader.records() {
        let Ok(rec) = rec else { return verdict(false, "malformed record") };
        let alpha: Result<f64, _> = rec[0].parse();
        let gap: Result<f64, _> = rec[1].parse();
        let lb: Result<f64, _> = rec[2].parse();
        let v: Result<usize, _> = rec[3].parse();
        match (alpha, gap, lb, v) {
            (Ok(a), Ok(g), Ok(l), Ok(v)) if g.is_finite() && l.is_finite() => rows.push((a, g, l, v)),
            _ => return verdict(false, format!("unparseable row {rec:?}")),
        }
    }
    let alphas: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let violations: usize = rows.iter().map(|r| r.3).sum();
    verdict(
        status.success() && header_ok && rows.len() == 3 && alphas == ALPHAS && violations == 0,
        format!("{status}, {} rows, alphas {alphas:?}, {violations} violations", rows.len()),
    )
}

type Criterion = (&'static str, fn() -> Verdict);

fn main() {
    let criteria: [Criterion; 10] = [
        ("ESA divergence gap meets its lower bound", criterion_1),
        ("gap equals delta*(a - 1) per column", criterion_2),
        ("hard modulation diverges, ESA stays bounded", criterion_3),
        ("zero strength reproduces standard attention", criterion_4),
        ("softmax Jacobian matches finite differences", criterion_5),
        ("rendered object obeys the safety factor", criterion_6),
        ("depth test keeps the front triangle", criterion_7),
        ("in-plane rotation commutes with rendering", criterion_8),
        ("verify and sweep outputs are deterministic", criterion_9),
        ("alpha sweep emits a clean three-row table", criterion_10),
    ];
    let mut failed = 0;
    for (n, (name, run)) in criteria.iter().enumerate() {
        let v = run();
        if !v.pass {
            failed += 1;
        }
        println!("[{}] criterion {:>2}: {name}: {}", if v.pass { "PASS" } else { "FAIL" }, n + 1, v.detail);
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
