//! Command-line entry point.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::ExperimentConfig;
use crate::diagnostics::{donor_probe, gate_clamp_sweep, stratified_jaccard};
use crate::error::{config_err, Error, Result};
use crate::hashing::{BankVariant, TableMode};
use crate::inference::sample;
use crate::model::EngramModel;
use crate::tokens::{write_corpus, CorpusManifest, TokenGrid};
use crate::training::{count_params, solve_table_size, sweep_configs, train, write_curve_csv, SweepPoint, RHO_TARGETS};

pub const THREADS_ENV: &str = "ENGRAM_AR_THREADS";
pub const CHECKPOINT_DIR: &str = "checkpoint";

#[derive(Parser, Debug)]
#[command(name = "engram-ar", version, about = "Hash-keyed n-gram memory experiments on token grids")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Experiment config (JSON). The built-in toy config when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Root seed; overrides the config's.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; overrides the config's.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct CheckpointArg {
    /// Checkpoint directory. Defaults to `<out>/checkpoint`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the resolved config without running anything.
    ShowConfig {
        #[command(flatten)]
        common: Common,
    },
    /// Write the train and held-out corpus splits.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Parameter accounting for the configured model.
    Params {
        #[command(flatten)]
        common: Common,
        /// Size every table for this backbone ratio first.
        #[arg(long)]
        target_rho: Option<f64>,
    },
    /// Train a model and write a checkpoint plus its loss curve.
    Train {
        #[command(flatten)]
        common: Common,
        /// learned, frozen-noise, bucket-collapsed or randomized-at-probe.
        #[arg(long)]
        table_mode: Option<TableMode>,
        /// seq1d or spatial2d.
        #[arg(long)]
        banks: Option<BankVariant>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Sample grids from a checkpoint with classifier-free guidance.
    Sample {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        ckpt: CheckpointArg,
        #[arg(long)]
        gate_clamp: Option<f64>,
        #[arg(long)]
        cfg_max: Option<f64>,
        #[arg(long)]
        cfg_alpha: Option<f64>,
        #[arg(long, default_value_t = 1)]
        per_class: usize,
    },
    /// Donor probe on held-out references.
    ProbeDonor {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        ckpt: CheckpointArg,
    },
    /// Teacher-forced cross-entropy under each gate clamp.
    ProbeGateClamp {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        ckpt: CheckpointArg,
    },
    /// Similarity-stratified patch Jaccard over the training split.
    AnalyzeJaccard {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        noise_rate: Option<f64>,
    },
    /// Size, train and evaluate one model per backbone-ratio target.
    SweepRho {
        #[command(flatten)]
        common: Common,
        /// Training steps per target; 0 reports accounting only.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        targets: Option<Vec<f64>>,
    },
}

/// Parse `args` and run. Returns the process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let threads = match std::env::var(THREADS_ENV) {
        Ok(v) => match v.parse::<usize>() {
            Ok(n) if n > 0 => n,
            _ => {
                eprintln!("error: {THREADS_ENV} must be a positive integer, got {v:?}");
                return 2;
            }
        },
        Err(_) => 0,
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    match pool.install(|| execute(cli.command)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn resolve(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::toy(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.output_dir = o.clone();
    }
    Ok(cfg.resolve())
}

/// Validate, announce and persist the final config; returns the output dir.
fn begin(cfg: &ExperimentConfig) -> Result<PathBuf> {
    cfg.validate()?;
    println!("{}", cfg.to_json().trim_end());
    println!("seed: {}", cfg.seed);
    cfg.persist(&cfg.output_dir)?;
    Ok(cfg.output_dir.clone())
}

fn write_json<V: Serialize>(path: &Path, value: &V) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn checkpoint_dir(out: &Path, arg: &CheckpointArg) -> PathBuf {
    arg.checkpoint.clone().unwrap_or_else(|| out.join(CHECKPOINT_DIR))
}

fn load_model(dir: &Path) -> Result<EngramModel<f32>> {
    Ok(load_checkpoint::<f32>(dir)?.0)
}

fn corpus_manifest(cfg: &ExperimentConfig, kind: &str, start: u64, grids: &[TokenGrid]) -> CorpusManifest {
    CorpusManifest {
        kind: kind.into(),
        count: grids.len(),
        num_classes: cfg.corpus.num_classes,
        start_index: start,
        spec: Some(cfg.corpus.clone()),
        notes: serde_json::Value::Null,
    }
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::ShowConfig { common } => {
            let cfg = resolve(&common)?;
            cfg.validate()?;
            print!("{}", cfg.to_json());
            Ok(())
        }
        Command::GenData { common } => {
            let cfg = resolve(&common)?;
            let out = begin(&cfg)?;
            let train = cfg.train_split()?;
            let eval = cfg.eval_split()?;
            write_corpus(&out.join("data/train"), &corpus_manifest(&cfg, "train", 0, &train), &train)?;
            write_corpus(&out.join("data/eval"), &corpus_manifest(&cfg, "eval", cfg.eval_start, &eval), &eval)?;
            println!("wrote {} train and {} held-out grids", train.len(), eval.len());
            Ok(())
        }
        Command::Params { common, target_rho } => {
            let mut cfg = resolve(&common)?;
            if let Some(t) = target_rho {
                let template = cfg
                    .model
                    .engram
                    .first()
                    .ok_or_else(|| Error::Config("--target-rho needs at least one engram module".into()))?;
                let m = solve_table_size(t, &cfg.model.backbone, template, cfg.model.engram.len())?;
                for e in &mut cfg.model.engram {
                    e.table_size = m;
                }
            }
            let out = begin(&cfg)?;
            let report = count_params(&cfg.model.backbone, &cfg.model.engram);
            write_json(&out.join("params.json"), &report)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(())
        }
        Command::Train {
            common,
            table_mode,
            banks,
            steps,
        } => {
            let mut cfg = resolve(&common)?;
            if let Some(m) = table_mode {
                cfg.train.table_mode = m;
            }
            if let Some(b) = banks {
                cfg.train.banks_variant = b;
            }
            if let Some(s) = steps {
                cfg.train.total_steps = s;
            }
            cfg.train.apply_to(&mut cfg.model);
            let out = begin(&cfg)?;
            let corpus = cfg.train_split()?;
            let eval = cfg.eval_split()?;
            let outcome = train::<f32>(&corpus, &eval, &cfg.model, &cfg.train, &mut |p| {
                let val = p.val_ce.map_or(String::new(), |v| format!(" val_ce {v:.4}"));
                println!("step {} lr {:.3e} train_ce {:.4}{val}", p.step, p.lr, p.train_ce);
            })?;
            save_checkpoint(
                &out.join(CHECKPOINT_DIR),
                &outcome.model,
                cfg.train.total_steps,
                cfg.train.seed,
                Some(&outcome.optimizer),
                serde_json::json!({ "final_train_ce": outcome.final_train_ce }),
            )?;
            write_curve_csv(&out.join("loss.csv"), &outcome.curve)?;
            write_json(
                &out.join("train.json"),
                &serde_json::json!({
                    "steps": cfg.train.total_steps,
                    "table_mode": cfg.train.table_mode,
                    "banks": cfg.train.banks_variant,
                    "final_train_ce": outcome.final_train_ce,
                }),
            )?;
            println!("final train ce {:.6}", outcome.final_train_ce);
            Ok(())
        }
        Command::Sample {
            common,
            ckpt,
            gate_clamp,
            cfg_max,
            cfg_alpha,
            per_class,
        } => {
            let mut cfg = resolve(&common)?;
            if gate_clamp.is_some() {
                cfg.sampler.gate_clamp = gate_clamp;
            }
            if let Some(v) = cfg_max {
                cfg.sampler.cfg_max = v;
            }
            if let Some(v) = cfg_alpha {
                cfg.sampler.cfg_alpha = v;
            }
            let out = begin(&cfg)?;
            let model = load_model(&checkpoint_dir(&out, &ckpt))?;
            let classes = model.backbone().num_classes;
            let grids = (0..classes)
                .flat_map(|c| (0..per_class as u64).map(move |i| (c, i)))
                .map(|(c, i)| sample(&model, c, &cfg.sampler, i))
                .collect::<Result<Vec<_>>>()?;
            let manifest = CorpusManifest {
                kind: "samples".into(),
                count: grids.len(),
                num_classes: classes,
                start_index: 0,
                spec: None,
                notes: serde_json::to_value(&cfg.sampler)?,
            };
            write_corpus(&out.join("samples"), &manifest, &grids)?;
            println!("wrote {} samples", grids.len());
            Ok(())
        }
        Command::ProbeDonor { common, ckpt } => {
            let cfg = resolve(&common)?;
            let out = begin(&cfg)?;
            let model = load_model(&checkpoint_dir(&out, &ckpt))?;
            let eval = cfg.eval_split()?;
            let n = cfg.probe.references.min(eval.len());
            if n == 0 {
                return config_err("the donor probe needs at least one reference");
            }
            let report = donor_probe(&model, &eval[..n], &cfg.train_split()?, &cfg.probe.donor)?;
            fs::write(out.join("donor.csv"), report.to_csv())?;
            write_json(&out.join("donor.json"), &report)?;
            print!("{}", report.to_csv());
            Ok(())
        }
        Command::ProbeGateClamp { common, ckpt } => {
            let cfg = resolve(&common)?;
            let out = begin(&cfg)?;
            let model = load_model(&checkpoint_dir(&out, &ckpt))?;
            let report = gate_clamp_sweep(&model, &cfg.eval_split()?, &cfg.probe.clamps)?;
            fs::write(out.join("gate_clamp.csv"), report.to_csv())?;
            write_json(&out.join("gate_clamp.json"), &report)?;
            print!("{}", report.to_csv());
            Ok(())
        }
        Command::AnalyzeJaccard { common, noise_rate } => {
            let mut cfg = resolve(&common)?;
            if let Some(r) = noise_rate {
                cfg.corpus.noise_rate = r;
            }
            let out = begin(&cfg)?;
            let report = stratified_jaccard(&cfg.train_split()?, &cfg.probe.jaccard)?;
            fs::write(out.join("jaccard.csv"), report.to_csv())?;
            write_json(&out.join("jaccard.json"), &report)?;
            for row in &report.shapes {
                let top = row.top_bin().and_then(|c| c.mean);
                println!(
                    "{}x{} top-bin {} random {}",
                    row.shape.0,
                    row.shape.1,
                    top.map_or("-".into(), |v| format!("{v:.4}")),
                    row.random.mean.map_or("-".into(), |v| format!("{v:.4}")),
                );
            }
            Ok(())
        }
        Command::SweepRho { common, steps, targets } => {
            let mut cfg = resolve(&common)?;
            if let Some(s) = steps {
                cfg.train.total_steps = s;
            }
            let out = begin(&cfg)?;
            let targets = targets.unwrap_or_else(|| RHO_TARGETS.to_vec());
            let configs = sweep_configs(&targets, &cfg.model)?;
            let train_needed = cfg.train.total_steps > 0;
            let (corpus, eval) = if train_needed {
                (cfg.train_split()?, cfg.eval_split()?)
            } else {
                (Vec::new(), Vec::new())
            };
            let mut points = Vec::new();
            for (target, mc) in configs {
                let report = count_params(&mc.backbone, &mc.engram);
                let table_size = mc.engram[0].table_size;
                let dir = out.join(format!("rho_{target:.2}"));
                fs::create_dir_all(&dir)?;
                let final_ce = if train_needed {
                    let outcome = train::<f32>(&corpus, &eval, &mc, &cfg.train, &mut |_| {})?;
                    write_curve_csv(&dir.join("loss.csv"), &outcome.curve)?;
                    outcome.curve.last().and_then(|p| p.val_ce)
                } else {
                    None
                };
                let point = SweepPoint {
                    target_rho: target,
                    table_size,
                    report,
                    final_ce,
                };
                write_json(&dir.join("params.json"), &point)?;
                println!(
                    "target {:.2} table_size {} rho {:.4} final_ce {}",
                    target,
                    table_size,
                    point.report.rho,
                    final_ce.map_or("-".into(), |v| format!("{v:.4}"))
                );
                points.push(point);
            }
            let mut csv = String::from("target_rho,table_size,backbone_params,memory_params,glue_params,total,rho,final_ce\n");
            for p in &points {
                let r = &p.report;
                csv.push_str(&format!(
                    "{:.2},{},{},{},{},{},{:.6},{}\n",
                    p.target_rho,
                    p.table_size,
                    r.backbone_params,
                    r.memory_params,
                    r.engram_glue_params,
                    r.total,
                    r.rho,
                    p.final_ce.map_or(String::new(), |v| format!("{v:.6}"))
                ));
            }
            fs::write(out.join("sweep_rho.csv"), csv)?;
            write_json(&out.join("sweep_rho.json"), &points)?;
            Ok(())
        }
    }
}
