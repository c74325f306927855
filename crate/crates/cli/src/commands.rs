use std::fmt;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use esacert::attention::{
    esa_attention, hard_attention_limit, standard_attention, AttentionMap, RegionPartition,
};
use esacert::geometry::{apply_transform, parse_obj, ObjectSource, TransformSpec};
use esacert::imaging::{attention_heatmap, compose_incontext, heatmap_file_name, prepare_masked_scene};
use esacert::numerics::LogitMatrix;
use esacert::raster::{Raster, WHITE};
use esacert::theory::{
    sample_trial, sweep_alpha, trial_seed, verify_statement_1, verify_statement_2, IdealSpec, TheoremReport,
};
use esacert::Error;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{self, AttnmapConfig, SweepConfig, VerifyConfig};
use crate::{AttnmapArgs, ComposeArgs, Globals, SweepArgs, TransformArgs, VerifyArgs};

#[derive(Debug)]
pub struct RunError {
    pub code: u8,
    message: String,
}

impl RunError {
    pub const IO: u8 = 2;
    pub const USAGE: u8 = 3;
    pub const SHAPE: u8 = 4;
    pub const INTERNAL: u8 = 5;

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        Self { code: Self::IO, message: format!("{}: {e}", path.display()) }
    }

    pub fn spec(message: impl Into<String>) -> Self {
        Self { code: Self::USAGE, message: message.into() }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self::spec(message)
    }

    pub fn internal(message: impl Into<String>) -> Self {
        Self { code: Self::INTERNAL, message: message.into() }
    }
}

impl fmt::Display for RunError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for RunError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Io { .. } | Error::Image { .. } => Self::IO,
            Error::Domain(_)
            | Error::Hypothesis(_)
            | Error::Precondition(_)
            | Error::Parse { .. }
            | Error::DegenerateRender(_) => Self::USAGE,
            Error::Range { .. } | Error::Shape(_) => Self::SHAPE,
            Error::Internal(_) => Self::INTERNAL,
        };
        Self { code, message: e.to_string() }
    }
}

pub enum Outcome {
    Passed,
    Failed(String),
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), RunError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| RunError::internal(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| RunError::io(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, RunError> {
    let text = std::fs::read_to_string(path).map_err(|e| RunError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| RunError::spec(format!("{}: {e}", path.display())))
}

fn resolve_spec(
    partition: &RegionPartition,
    rho: Option<f64>,
    epsilon: f64,
    allow_violation: bool,
) -> Result<IdealSpec, RunError> {
    let rho = rho.unwrap_or(1.0 / partition.edit().len().max(1) as f64);
    let spec = if allow_violation {
        IdealSpec::exploratory(rho, epsilon, partition.clone())?
    } else {
        IdealSpec::new(rho, epsilon, partition.clone())?
    };
    Ok(spec)
}

#[derive(Serialize)]
struct VerifySummary {
    trials: usize,
    keys_per_trial: usize,
    hypothesis_holds: bool,
    statement_1_violations: usize,
    min_gap_minus_bound: f64,
    max_abs_identity_residual: f64,
    /// Trials where statement (2) applied (ideal map with auxiliary mass).
    statement_2_evaluated: usize,
    statement_2_violations: usize,
    passed: bool,
}

#[derive(Serialize)]
struct VerifyReport<'a> {
    seed: u64,
    config: &'a VerifyConfig,
    rho: f64,
    summary: VerifySummary,
    trials: Vec<TheoremReport>,
}

pub fn verify(g: &Globals, args: &VerifyArgs) -> Result<Outcome, RunError> {
    let mut cfg: VerifyConfig = config::load(g.config.as_deref())?;
    if let Some(t) = args.trials {
        cfg.trials = t;
    }
    if let Some(a) = args.alpha {
        cfg.esa.alpha_insert = a;
        cfg.esa.alpha_restore = a;
    }
    cfg.esa.validate()?;
    let partition = RegionPartition::new(cfg.partition.clone())?;
    let spec = resolve_spec(&partition, cfg.rho, cfg.epsilon, args.allow_hypothesis_violation)?;

    let trials = (0..cfg.trials)
        .into_par_iter()
        .map(|t| {
            let (logits, ideal) = sample_trial(&spec, cfg.model, trial_seed(g.seed, t as u64))?;
            let r1 = verify_statement_1(&ideal, &logits, &partition, &cfg.esa)?;
            match verify_statement_2(&ideal, &logits, &partition, &cfg.esa, &cfg.m_grid) {
                Ok(r2) => Ok(r1.merge(r2)),
                Err(Error::Precondition(_)) => Ok(r1),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<Vec<TheoremReport>, Error>>()?;

    let s1 = || trials.iter().filter_map(|r| r.statement_1.as_ref());
    let s2 = || trials.iter().filter_map(|r| r.statement_2.as_ref());
    let statement_1_violations = s1().flat_map(|s| &s.verdicts).filter(|ok| !**ok).count();
    let statement_2_violations = s2().flat_map(|s| &s.verdicts).filter(|ok| !**ok).count();
    let min_gap_minus_bound = s1()
        .flat_map(|s| s.gap.iter().zip(&s.lower_bound).map(|(g, b)| g - b))
        .fold(f64::INFINITY, f64::min);
    let max_abs_identity_residual = s1()
        .flat_map(|s| s.identity_residual.iter().map(|r| r.abs()))
        .fold(0.0, f64::max);
    let passed = trials.iter().all(TheoremReport::all_verdicts);
    let summary = VerifySummary {
        trials: trials.len(),
        keys_per_trial: partition.object_keys().len(),
        hypothesis_holds: spec.hypothesis_holds(),
        statement_1_violations,
        min_gap_minus_bound: if min_gap_minus_bound.is_finite() { min_gap_minus_bound } else { 0.0 },
        max_abs_identity_residual,
        statement_2_evaluated: s2().count(),
        statement_2_violations,
        passed,
    };
    let path = g.out.join("verify_report.json");
    let report = VerifyReport { seed: g.seed, config: &cfg, rho: spec.rho(), summary, trials };
    write_json(&path, &report)?;
    println!(
        "{} trials, {} statement-1 violations, {} statement-2 violations over {} evaluated trials -> {}",
        report.summary.trials,
        statement_1_violations,
        statement_2_violations,
        report.summary.statement_2_evaluated,
        path.display()
    );
    Ok(if passed {
        Outcome::Passed
    } else {
        Outcome::Failed(format!(
            "verification failed: {statement_1_violations} + {statement_2_violations} violations"
        ))
    })
}

pub fn sweep(g: &Globals, args: &SweepArgs) -> Result<Outcome, RunError> {
    let mut cfg: SweepConfig = config::load(g.config.as_deref())?;
    if let Some(a) = &args.alphas {
        cfg.alphas = a.clone();
    }
    if let Some(t) = args.trials {
        cfg.trials = t;
    }
    if cfg.alphas.is_empty() {
        return Err(RunError::spec("alpha list is empty"));
    }
    let partition = RegionPartition::new(cfg.partition.clone())?;
    let spec = resolve_spec(&partition, cfg.rho, cfg.epsilon, args.allow_hypothesis_violation)?;
    let rows = sweep_alpha(&spec, cfg.model, &cfg.alphas, cfg.trials, g.seed)?;

    let path = g.out.join("sweep.csv");
    let file = File::create(&path).map_err(|e| RunError::io(&path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    for row in &rows {
        w.serialize(row).map_err(|e| RunError::internal(e.to_string()))?;
    }
    w.flush().map_err(|e| RunError::io(&path, e))?;
    let violations: usize = rows.iter().map(|r| r.violations).sum();
    println!("{} rows, {violations} violations -> {}", rows.len(), path.display());
    Ok(if violations == 0 {
        Outcome::Passed
    } else {
        Outcome::Failed(format!("sweep found {violations} violations"))
    })
}

pub fn attnmap(g: &Globals, args: &AttnmapArgs) -> Result<Outcome, RunError> {
    let mut cfg: AttnmapConfig = config::load(g.config.as_deref())?;
    if args.logits.is_some() {
        cfg.logits = args.logits.clone();
    }
    if args.partition.is_some() {
        cfg.partition = args.partition.clone();
    }
    if args.layout.is_some() {
        cfg.layout = args.layout;
    }
    if !args.keys.is_empty() {
        cfg.keys = args.keys.clone();
    }
    let logits_path = cfg.logits.as_ref().ok_or_else(|| RunError::spec("attnmap needs --logits"))?;
    let partition_path = cfg.partition.as_ref().ok_or_else(|| RunError::spec("attnmap needs --partition"))?;
    let rows: Vec<Vec<f64>> = read_json(logits_path)?;
    let logits = LogitMatrix::from_rows(rows)?;
    let partition: RegionPartition = read_json(partition_path)?;
    partition.check_logits(&logits)?;
    let layout = match cfg.layout {
        Some(l) => l,
        None => (1, partition.n_queries()),
    };
    let keys = if cfg.keys.is_empty() { partition.object_keys().to_vec() } else { cfg.keys.clone() };
    let stem = cfg.stem.clone().unwrap_or_else(|| {
        logits_path.file_stem().map_or("attn".into(), |s| s.to_string_lossy().into_owned())
    });

    let maps: [(&str, AttentionMap); 3] = [
        ("standard", standard_attention(&logits)?),
        ("hard", hard_attention_limit(&partition)?.to_map()),
        ("esa", esa_attention(&logits, &partition, &cfg.esa)?),
    ];
    let edit_cells: Vec<usize> = partition.edit().to_vec();
    for &key in &keys {
        for (name, map) in &maps {
            let heat = attention_heatmap(map, key, layout)?;
            let path = g.out.join(heatmap_file_name(&stem, name, key));
            heat.render(cfg.cell)?.save_rgb(&path)?;
            println!("{} edit_mean={:.6}", path.display(), heat.mean_over(&edit_cells));
        }
    }
    Ok(Outcome::Passed)
}

#[derive(Serialize)]
struct Manifest<'a> {
    input: String,
    scene: Option<&'a Path>,
    scene_size: (usize, usize),
    spec: TransformSpec,
    placed_center: Option<(f64, f64)>,
    reference_mask_pixels: usize,
    target_mask_pixels: usize,
}

pub fn transform(g: &Globals, args: &TransformArgs) -> Result<Outcome, RunError> {
    let spec_path = g.config.as_ref().ok_or_else(|| RunError::spec("transform needs --config <spec.json>"))?;
    let spec: TransformSpec = read_json(spec_path)?;
    spec.validate()?;

    let scene = match (&args.scene, args.scene_size) {
        (Some(p), _) => Raster::load_rgb(p)?,
        (None, Some((w, h))) => Raster::new(w, h, WHITE)?,
        (None, None) => Raster::new(spec.target_resolution, spec.target_resolution, WHITE)?,
    };
    let (source, input) = match (&args.mesh, &args.source, &args.source_mask) {
        (Some(m), _, _) => {
            let text = std::fs::read_to_string(m).map_err(|e| RunError::io(m, e))?;
            let mesh = parse_obj(&text).map_err(|e| RunError::from(e).prefixed(m))?;
            (ObjectSource::Mesh(mesh), m.display().to_string())
        }
        (None, Some(img), Some(mask)) => {
            (ObjectSource::Raster(Raster::load_with_mask(img, mask)?), img.display().to_string())
        }
        _ => return Err(RunError::usage("transform needs --mesh or --source with --source-mask")),
    };

    let out = apply_transform(&source, &spec, &scene)?;
    out.reference.save_rgb(&g.out.join("reference.png"))?;
    out.reference.save_mask(&g.out.join("reference_mask.png"))?;
    out.target_mask.save_mask(&g.out.join("target_mask.png"))?;
    let manifest = Manifest {
        input,
        scene: args.scene.as_deref(),
        scene_size: scene.dims(),
        spec,
        placed_center: out.resolved_center,
        reference_mask_pixels: out.reference.mask_count(),
        target_mask_pixels: out.target_mask.mask_count(),
    };
    write_json(&g.out.join("manifest.json"), &manifest)?;
    println!("wrote reference.png, reference_mask.png, target_mask.png, manifest.json to {}", g.out.display());
    Ok(Outcome::Passed)
}

pub fn compose(g: &Globals, args: &ComposeArgs) -> Result<Outcome, RunError> {
    if g.config.is_some() {
        return Err(RunError::usage("compose takes no --config"));
    }
    let scene = Raster::load_rgb(&args.scene)?;
    let source = Raster::load_mask(&args.source_mask)?;
    let target = Raster::load_mask(&args.target_mask)?;
    let reference = Raster::load_rgb(&args.reference)?;
    let masked = prepare_masked_scene(&scene, &source, &target)?;
    let pair = compose_incontext(&reference, &masked, &target)?;
    let files: [(PathBuf, &Raster, bool); 3] = [
        (g.out.join("masked_scene.png"), &masked, false),
        (g.out.join("incontext.png"), pair.composite(), false),
        (g.out.join("pair_mask.png"), pair.pair_mask(), true),
    ];
    for (path, r, is_mask) in files {
        if is_mask {
            r.save_mask(&path)?;
        } else {
            r.save_rgb(&path)?;
        }
    }
    println!("wrote masked_scene.png, incontext.png, pair_mask.png to {}", g.out.display());
    Ok(Outcome::Passed)
}

impl RunError {
    fn prefixed(mut self, path: &Path) -> Self {
        self.message = format!("{}: {}", path.display(), self.message);
        self
    }
}
