//! Four-row component ablation: static prompts, meta-net fusion, gated
//! fusion, and gated fusion with the consistency loss. Every variant sees
//! the same dataset and the same run seeds.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{Config, Fusion};
use crate::data::Dataset;
use crate::error::{Result, ScingError};
use crate::eval::{evaluate, model_modality_gap, EvalOptions, Protocol};
use crate::trainer::run_pipeline;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Baseline,
    #[serde(rename = "metanet")]
    MetaNet,
    Svip,
    #[serde(rename = "svip+pdca")]
    SvipPdca,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Baseline, Variant::MetaNet, Variant::Svip, Variant::SvipPdca];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::MetaNet => "metanet",
            Variant::Svip => "svip",
            Variant::SvipPdca => "svip+pdca",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| ScingError::Config(format!("unknown ablation variant {s:?}")))
    }

    /// `base` with this variant's switches. The consistency weight of the
    /// full variant comes from `base`, or 1 when `base` has it at zero.
    pub fn apply(self, base: &Config) -> Config {
        let mut cfg = base.clone();
        let lambda = if base.losses.lambda > 0.0 { base.losses.lambda } else { 1.0 };
        let (fusion, lambda) = match self {
            Variant::Baseline => (Fusion::Static, 0.0),
            Variant::MetaNet => (Fusion::MetaNet, 0.0),
            Variant::Svip => (Fusion::Svip, 0.0),
            Variant::SvipPdca => (Fusion::Svip, lambda),
        };
        cfg.svip.fusion = fusion;
        cfg.losses.lambda = lambda;
        cfg
    }

    fn dir_name(self) -> &'static str {
        match self {
            Variant::SvipPdca => "svip_pdca",
            other => other.name(),
        }
    }
}

/// Published full-scale `(variant, mAP %, Rank-1 %)` on an occluded
/// benchmark, shown next to desk results for direction only.
pub const REPORTED: [(Variant, f64, f64); 4] = [
    (Variant::Baseline, 59.1, 65.7),
    (Variant::MetaNet, 58.0, 67.4),
    (Variant::Svip, 62.1, 69.6),
    (Variant::SvipPdca, 63.4, 71.1),
];

/// Metrics of one (variant, seed) run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub variant: String,
    pub seed: u64,
    pub rank1: f64,
    pub map: f64,
    /// Image-text gap of the stage-1 model.
    pub modality_gap: f64,
    pub mean_cos_first: f64,
    pub mean_cos_last: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub runs: usize,
    pub rank1_mean: f64,
    pub rank1_sd: f64,
    pub map_mean: f64,
    pub map_sd: f64,
    pub modality_gap_mean: f64,
    pub mean_cos_last_mean: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub runs: Vec<AblationRun>,
    pub rows: Vec<AblationRow>,
    pub seconds: f64,
}

impl AblationTable {
    pub fn row(&self, v: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == v.name())
    }

    pub fn runs_of(&self, v: Variant) -> impl Iterator<Item = &AblationRun> {
        self.runs.iter().filter(move |r| r.variant == v.name())
    }
}

/// Sample mean and standard deviation (`n - 1`); the deviation is 0 for a
/// single value.
pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn summarize(runs: &[AblationRun], variants: &[Variant]) -> Vec<AblationRow> {
    variants
        .iter()
        .filter_map(|v| {
            let mine: Vec<&AblationRun> = runs.iter().filter(|r| r.variant == v.name()).collect();
            if mine.is_empty() {
                return None;
            }
            let col = |f: fn(&AblationRun) -> f64| mine.iter().map(|r| f(r)).collect::<Vec<f64>>();
            let (rank1_mean, rank1_sd) = mean_sd(&col(|r| r.rank1));
            let (map_mean, map_sd) = mean_sd(&col(|r| r.map));
            Some(AblationRow {
                variant: v.name().to_string(),
                runs: mine.len(),
                rank1_mean,
                rank1_sd,
                map_mean,
                map_sd,
                modality_gap_mean: mean_sd(&col(|r| r.modality_gap)).0,
                mean_cos_last_mean: mean_sd(&col(|r| r.mean_cos_last)).0,
            })
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct AblationOptions {
    pub seeds: Vec<u64>,
    pub variants: Vec<Variant>,
    pub out_dir: PathBuf,
    /// Run the (variant, seed) jobs concurrently, one thread each.
    pub parallel: bool,
}

/// Trains and evaluates one variant under one seed.
pub fn run_variant(base: &Config, data: &Dataset, variant: Variant, seed: u64, out: &Path) -> Result<AblationRun> {
    let start = Instant::now();
    let mut cfg = variant.apply(base);
    cfg.run.seed = seed;
    cfg.run.out_dir = out.to_path_buf();
    cfg.run.checkpoint_every_epoch = false;
    let (s1, s2) = run_pipeline(&cfg, data)?;
    let gap = model_modality_gap(&s1.model, cfg.svip.fusion, data)?;
    let report = evaluate(
        &s2.checkpoint,
        data,
        EvalOptions {
            protocol: Protocol {
                exclude_same_camera: cfg.run.exclude_same_camera,
            },
            skip_gap: true,
            ..EvalOptions::default()
        },
    )?;
    report.save_json(&out.join("eval.json"))?;
    let metric = |k: &str| s1.checkpoint.meta.metrics.get(k).copied().unwrap_or(f64::NAN);
    let run = AblationRun {
        variant: variant.name().to_string(),
        seed,
        rank1: report.rank1,
        map: report.map,
        modality_gap: gap,
        mean_cos_first: metric("mean_cos_first"),
        mean_cos_last: metric("mean_cos_last"),
        seconds: start.elapsed().as_secs_f64(),
    };
    log::info!(
        "ablation {} seed {}: rank1 {:.4} mAP {:.4} gap {:.4}",
        run.variant,
        seed,
        run.rank1,
        run.map,
        run.modality_gap
    );
    Ok(run)
}

pub const RUNS_CSV: &str = "ablation_runs.csv";
pub const TABLE_CSV: &str = "ablation.csv";
pub const CHART_SVG: &str = "ablation.svg";

/// Runs every variant under every seed, then writes the per-run CSV, the
/// mean/sd table and a bar chart of mAP and Rank-1 into `opts.out_dir`.
pub fn run_ablation(base: &Config, data: &Dataset, opts: &AblationOptions) -> Result<AblationTable> {
    if opts.seeds.is_empty() || opts.variants.is_empty() {
        return Err(ScingError::Config("ablation needs at least one seed and one variant".into()));
    }
    let start = Instant::now();
    let jobs: Vec<(Variant, u64)> = opts
        .variants
        .iter()
        .flat_map(|v| opts.seeds.iter().map(move |s| (*v, *s)))
        .collect();
    let job = |(v, s): &(Variant, u64)| {
        let dir = opts.out_dir.join(v.dir_name()).join(format!("seed{s}"));
        let mut cfg = base.clone();
        if opts.parallel {
            cfg.run.threads = 1;
        }
        run_variant(&cfg, data, *v, *s, &dir)
    };
    let runs = if opts.parallel {
        jobs.par_iter().map(job).collect::<Result<Vec<_>>>()?
    } else {
        jobs.iter().map(job).collect::<Result<Vec<_>>>()?
    };
    let rows = summarize(&runs, &opts.variants);
    let table = AblationTable {
        runs,
        rows,
        seconds: start.elapsed().as_secs_f64(),
    };
    write_outputs(&table, &opts.out_dir)?;
    Ok(table)
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let err = |e: csv::Error| ScingError::Data(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    for r in rows {
        w.serialize(r).map_err(err)?;
    }
    w.flush().map_err(|e| ScingError::io(path, e))
}

pub fn write_outputs(table: &AblationTable, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| ScingError::io(dir, e))?;
    write_csv(&dir.join(RUNS_CSV), &table.runs)?;
    write_csv(&dir.join(TABLE_CSV), &table.rows)?;
    let groups: Vec<crate::plot::BarGroup> = table
        .rows
        .iter()
        .map(|r| crate::plot::BarGroup {
            label: r.variant.clone(),
            bars: vec![(100.0 * r.map_mean, 100.0 * r.map_sd), (100.0 * r.rank1_mean, 100.0 * r.rank1_sd)],
        })
        .collect();
    let svg = crate::plot::bar_chart("Ablation", &["mAP", "Rank-1"], &groups);
    std::fs::write(dir.join(CHART_SVG), svg).map_err(|e| ScingError::io(dir.join(CHART_SVG), e))
}

/// Reads a table written by [`write_outputs`].
pub fn read_table(path: &Path) -> Result<Vec<AblationRow>> {
    let err = |e: csv::Error| ScingError::Data(format!("{}: {e}", path.display()));
    if !path.exists() {
        return Err(ScingError::io(path, std::io::Error::from(std::io::ErrorKind::NotFound)));
    }
    csv::Reader::from_path(path)
        .map_err(err)?
        .deserialize()
        .map(|r| r.map_err(err))
        .collect()
}
