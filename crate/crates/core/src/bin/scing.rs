use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use scing::ablation::{run_ablation, AblationOptions, Variant};
use scing::checkpoint::{Checkpoint, Stage};
use scing::config::Config;
use scing::data::{generate_dataset, Dataset, GenerationParams};
use scing::error::{Result, ScingError};
use scing::eval::{evaluate, export_inference, write_embedding_projection, EvalOptions, Protocol};
use scing::plot::plot_files;
use scing::trainer::{model_from_checkpoint, run_stage1, run_stage2, STAGE1_CKPT};

#[derive(Parser)]
#[command(name = "scing", version, about = "Cross-modal prompt tuning for person re-identification")]
struct Cli {
    /// TOML configuration; built-in defaults when omitted.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic benchmark.
    GenerateData {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        occluded_fraction: Option<f64>,
    },
    /// Train one or both stages.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "all")]
        stage: StageArg,
        /// Continue from a per-epoch checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stage-1 checkpoint for `--stage 2`; defaults to `<out>/stage1.ckpt`.
        #[arg(long)]
        stage1: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Retrieval metrics of a checkpoint.
    Eval {
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        json: Option<PathBuf>,
        #[arg(long)]
        per_query_csv: Option<PathBuf>,
        /// Write a PCA projection of image and text embeddings.
        #[arg(long)]
        projection: Option<PathBuf>,
        /// Write the image-encoder-only inference checkpoint.
        #[arg(long)]
        export_inference: Option<PathBuf>,
        /// Keep same-identity, same-camera gallery entries.
        #[arg(long)]
        keep_same_camera: bool,
        /// Also report Rank-5 and Rank-10.
        #[arg(long)]
        cmc: bool,
    },
    /// Component ablation over several seeds.
    Ablate {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long, value_delimiter = ',', default_value = "baseline,metanet,svip,svip+pdca")]
        variants: Vec<String>,
        /// Run the variants concurrently.
        #[arg(long)]
        parallel: bool,
    },
    /// Charts from logs, projections or ablation tables.
    Plot {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, default_value = "plots")]
        out: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> Result<Config> {
    let mut cfg = match path {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Ok(v) = std::env::var("SCING_THREADS") {
        cfg.run.threads = v
            .parse()
            .map_err(|_| ScingError::Config(format!("SCING_THREADS={v:?} is not a thread count")))?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::GenerateData {
            out,
            seed,
            occluded_fraction,
        } => {
            if let Some(s) = seed {
                cfg.data.seed = s;
            }
            if let Some(f) = occluded_fraction {
                cfg.data.occluded_fraction = f;
            }
            let out = out.unwrap_or_else(|| cfg.data.dir.clone());
            let manifest = generate_dataset(&GenerationParams::from_config(&cfg), &out)?;
            println!("{}", manifest.summary());
        }
        Command::Train {
            data,
            out,
            stage,
            resume,
            stage1,
            seed,
        } => {
            if let Some(o) = out {
                cfg.run.out_dir = o;
            }
            if let Some(s) = seed {
                cfg.run.seed = s;
            }
            let data = Dataset::load(&data.unwrap_or_else(|| cfg.data.dir.clone()))?;
            let resume = resume.map(|p| Checkpoint::load(&p)).transpose()?;
            let resume_stage = resume.as_ref().map(|c| c.meta.stage);
            if matches!(stage, StageArg::One | StageArg::All) && resume_stage != Some(Stage::Stage2) {
                let s1 = run_stage1(&cfg, &data, resume.as_ref())?;
                println!("stage 1 checkpoint: {}", s1.checkpoint_path.display());
                if matches!(stage, StageArg::One) {
                    return Ok(());
                }
            }
            let s1_path = stage1.unwrap_or_else(|| cfg.run.out_dir.join(STAGE1_CKPT));
            let s1 = Checkpoint::load(&s1_path)?;
            let resume2 = resume.filter(|c| c.meta.stage == Stage::Stage2);
            let s2 = run_stage2(&cfg, &data, &s1, resume2.as_ref())?;
            println!("stage 2 checkpoint: {}", s2.checkpoint_path.display());
        }
        Command::Eval {
            checkpoint,
            data,
            json,
            per_query_csv,
            projection,
            export_inference: export,
            keep_same_camera,
            cmc,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let data = Dataset::load(&data.unwrap_or_else(|| ck.meta.config.data.dir.clone()))?;
            let report = evaluate(
                &ck,
                &data,
                EvalOptions {
                    protocol: Protocol {
                        exclude_same_camera: !keep_same_camera,
                    },
                    extended_cmc: cmc,
                    skip_gap: false,
                },
            )?;
            match &json {
                Some(p) => report.save_json(p)?,
                None => println!("{}", report.to_json()),
            }
            if json.is_some() {
                println!("rank1 {:.4} mAP {:.4}", report.rank1, report.map);
            }
            if let Some(p) = per_query_csv {
                report.save_per_query_csv(&p)?;
            }
            if let Some(p) = projection {
                if ck.meta.stage == Stage::Inference {
                    return Err(ScingError::Config(
                        "an inference export has no text side to project".into(),
                    ));
                }
                let model = model_from_checkpoint(&ck.meta.config, &ck)?;
                write_embedding_projection(&model, &data, &p)?;
            }
            if let Some(p) = export {
                let inf = export_inference(&ck);
                inf.save(&p)?;
                println!("inference export: {} ({} parameters)", p.display(), inf.param_count());
            }
        }
        Command::Ablate {
            data,
            out,
            seeds,
            variants,
            parallel,
        } => {
            let data = Dataset::load(&data.unwrap_or_else(|| cfg.data.dir.clone()))?;
            let variants = variants.iter().map(|v| Variant::parse(v)).collect::<Result<Vec<_>>>()?;
            let out_dir = out.unwrap_or_else(|| cfg.run.out_dir.join("ablation"));
            let table = run_ablation(
                &cfg,
                &data,
                &AblationOptions {
                    seeds,
                    variants,
                    out_dir: out_dir.clone(),
                    parallel,
                },
            )?;
            println!("{:<10} {:>16} {:>16} {:>8}", "variant", "rank1", "mAP", "gap");
            for r in &table.rows {
                println!(
                    "{:<10} {:>8.2} ± {:<5.2} {:>8.2} ± {:<5.2} {:>8.4}",
                    r.variant,
                    100.0 * r.rank1_mean,
                    100.0 * r.rank1_sd,
                    100.0 * r.map_mean,
                    100.0 * r.map_sd,
                    r.modality_gap_mean
                );
            }
            println!("written to {} in {:.0} s", out_dir.display(), table.seconds);
        }
        Command::Plot { inputs, out } => {
            for p in plot_files(&inputs, &out)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
