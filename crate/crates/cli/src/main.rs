use std::fmt::Write as _;
use std::fs;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use vdu_core::encoder::VocabConfig;
use vdu_core::ingest::{balanced_sample, compute_stats, convert_dataset, Manifest, DEFAULT_CAP, MANIFEST_FILE};
use vdu_core::metrics::{evaluate, read_predictions};
use vdu_core::model::{Model, ModelConfig};
use vdu_core::pipeline::{build_tokenizer, gradcheck, predict_held_out, pretrain_pairs};
use vdu_core::schema::Split;
use vdu_core::synth::{generate, GenSpec};
use vdu_core::tensor::{Scalar, SeededRng};
use vdu_core::trainer::{pretrain_lm, train, TrainConfig};
use vdu_core::{Error, ErrorClass, Result};

const GRADCHECK_TOLERANCE: f64 = 1e-4;
const TRAIN_LOG: &str = "train_log.jsonl";
const RUN_CONFIG: &str = "run.json";

#[derive(Debug, Parser)]
#[command(name = "vdu", version, about = "Instruction-tuned visual document understanding pipeline")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Args)]
struct Global {
    /// JSON run configuration; flags win over it, it wins over defaults
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    precision: Option<Precision>,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Write a synthetic corpus in the layout the `synthetic` adapter reads
    Generate {
        /// Generator settings (JSON); defaults when omitted
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Convert a source dataset into records plus a manifest
    Convert {
        #[arg(long)]
        adapter: String,
        #[arg(long)]
        src: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cap every held-in dataset; held-out datasets pass through
    Sample {
        #[arg(long, default_value = "data")]
        data: PathBuf,
        #[arg(long)]
        cap: Option<usize>,
        /// Manifest file or directory; defaults to sampled.json next to the input
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Corpus statistics as JSON
    Stats {
        #[arg(long, default_value = "data")]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the language model alone on copy and denoising pairs
    PretrainLm {
        #[arg(long, default_value = "data")]
        data: PathBuf,
        /// Model directory to start from instead of a fresh model
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Instruction tuning on the held-in part of a manifest
    Train {
        #[arg(long, default_value = "data")]
        data: PathBuf,
        /// Model directory to start from, usually the pretrain-lm output
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Train every parameter instead of only the bridging module
        #[arg(long)]
        unfreeze_all: bool,
    },
    /// Greedy answers for the held-out part of a manifest, as JSONL
    Predict {
        #[arg(long, default_value = "data")]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        max_len: Option<usize>,
    },
    /// Score predictions against the held-out gold answers
    Eval {
        #[arg(long, default_value = "data")]
        data: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
        /// Also write the report as JSON
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of the full loss in f64
    Gradcheck,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    /// Seeds model init, batch order, template draws and sampling.
    seed: u64,
    precision: Precision,
    cap: usize,
    max_len: usize,
    eps: f64,
    vocab: VocabConfig,
    model: ModelConfig,
    train: TrainConfig,
    pretrain: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            precision: Precision::F32,
            cap: DEFAULT_CAP,
            max_len: ModelConfig::default().max_decoder_len,
            eps: 1e-4,
            vocab: VocabConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            pretrain: TrainConfig::default(),
        }
    }
}

fn load_config(g: &Global) -> Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    if let Some(p) = g.precision {
        cfg.precision = p;
    }
    cfg.train.seed = cfg.seed;
    cfg.pretrain.seed = cfg.seed;
    Ok(cfg)
}

/// A directory stands for the manifest inside it.
fn manifest_file(p: &Path) -> PathBuf {
    if p.is_dir() || p.extension().is_none() {
        p.join(MANIFEST_FILE)
    } else {
        p.to_path_buf()
    }
}

fn load_manifest(p: &Path) -> Result<Manifest> {
    Manifest::load(&manifest_file(p))
}

fn held_in(m: &Manifest) -> Manifest {
    m.with_entries(m.entries.iter().filter(|e| e.split == Split::HeldIn).cloned().collect())
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn print_json<S: Serialize>(value: &S) -> Result<String> {
    let text = serde_json::to_string_pretty(value)?;
    println!("{text}");
    Ok(text)
}

/// A fresh model whose vocabulary comes from the held-in records, or a
/// saved one when `checkpoint` is set.
fn open_model<T: Scalar>(cfg: &RunConfig, manifest: &Manifest, checkpoint: Option<&Path>) -> Result<Model<T>> {
    if let Some(dir) = checkpoint {
        let model = Model::<T>::load(dir, cfg.seed)?;
        log::info!("loaded {} (model config {})", dir.display(), serde_json::to_string(&model.cfg)?);
        return Ok(model);
    }
    let records = held_in(manifest).load_records()?;
    let tok = build_tokenizer(&records, &manifest.templates, &cfg.vocab);
    log::info!("vocabulary of {} pieces from {} held-in records", tok.len(), records.len());
    Model::new(cfg.model.clone(), tok, cfg.seed)
}

fn save_run(dir: &Path, cfg: &RunConfig) -> Result<()> {
    write_file(&dir.join(RUN_CONFIG), &serde_json::to_string_pretty(cfg)?)
}

fn run_pretrain<T: Scalar>(cfg: &RunConfig, data: &Path, checkpoint: Option<&Path>, out: &Path) -> Result<()> {
    let manifest = load_manifest(data)?;
    let mut model = open_model::<T>(cfg, &manifest, checkpoint)?;
    let records = held_in(&manifest).load_records()?;
    let pairs = pretrain_pairs(&model, &records, &manifest.templates, &mut SeededRng::derive(cfg.seed, "pretrain-pairs"))?;
    log::info!("{} pretraining pairs", pairs.len());
    let report = pretrain_lm(&mut model, &pairs, &cfg.pretrain, |_| ControlFlow::Continue(()))?;
    model.save(out)?;
    report.write_jsonl(&out.join(TRAIN_LOG))?;
    save_run(out, cfg)?;
    println!("pretrained {} steps, final loss {:.4}", report.losses.len(), report.losses.last().copied().unwrap_or(f64::NAN));
    Ok(())
}

fn run_train<T: Scalar>(cfg: &RunConfig, data: &Path, checkpoint: Option<&Path>, out: &Path) -> Result<()> {
    let manifest = load_manifest(data)?;
    if checkpoint.is_none() {
        log::warn!("no checkpoint given: the language model stays at its random initialisation");
    }
    let mut model = open_model::<T>(cfg, &manifest, checkpoint)?;
    let pool = model.prepare_manifest(&held_in(&manifest))?;
    log::info!("training on {} held-in instances", pool.len());
    let report = train(&mut model, &pool, &manifest.templates, &cfg.train, |_| ControlFlow::Continue(()))?;
    model.save(out)?;
    report.write_jsonl(&out.join(TRAIN_LOG))?;
    save_run(out, cfg)?;
    println!("trained {} steps, final loss {:.4}", report.losses.len(), report.losses.last().copied().unwrap_or(f64::NAN));
    Ok(())
}

fn run_predict<T: Scalar>(cfg: &RunConfig, data: &Path, checkpoint: &Path, out: &Path) -> Result<()> {
    let manifest = load_manifest(data)?;
    let model = Model::<T>::load(checkpoint, cfg.seed)?;
    let preds = predict_held_out(&model, &manifest, cfg.seed, cfg.max_len)?;
    let mut text = String::new();
    for p in &preds {
        writeln!(text, "{}", serde_json::to_string(p)?).expect("writing to a String");
    }
    write_file(out, &text)?;
    println!("{} predictions written to {}", preds.len(), out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    let mut cfg = load_config(&cli.global)?;
    match &cli.cmd {
        Cmd::Sample { cap: Some(cap), .. } => cfg.cap = *cap,
        Cmd::Predict { max_len: Some(n), .. } => cfg.max_len = *n,
        Cmd::Train { unfreeze_all: true, .. } => cfg.train.unfreeze_all = true,
        _ => {}
    }
    log::info!("seed {}", cfg.seed);
    log::info!("effective config: {}", serde_json::to_string(&cfg)?);

    match cli.cmd {
        Cmd::Generate { spec, out } => {
            let mut spec: GenSpec = match spec {
                Some(p) => {
                    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
                    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
                }
                None => GenSpec::default(),
            };
            if let Some(seed) = cli.global.seed {
                spec.seed = seed;
            }
            log::info!("generator spec: {}", serde_json::to_string(&spec)?);
            print_json(&generate(&spec, &out)?)?;
        }
        Cmd::Convert { adapter, src, out } => {
            let m = convert_dataset(&adapter, &src, &out)?;
            print_json(&m.counts)?;
        }
        Cmd::Sample { data, out, .. } => {
            let input = manifest_file(&data);
            let m = Manifest::load(&input)?;
            let sampled = balanced_sample(&m, cfg.cap, &mut SeededRng::new(cfg.seed))?;
            let target = match out {
                Some(p) => manifest_file(&p),
                None => input.with_file_name("sampled.json"),
            };
            if let Some(dir) = target.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            sampled.save(&target)?;
            log::info!("sampled manifest written to {}", target.display());
            print_json(&sampled.counts)?;
        }
        Cmd::Stats { data, out } => {
            let text = print_json(&compute_stats(&load_manifest(&data)?)?)?;
            if let Some(p) = out {
                write_file(&p, &text)?;
            }
        }
        Cmd::PretrainLm { data, checkpoint, out } => match cfg.precision {
            Precision::F32 => run_pretrain::<f32>(&cfg, &data, checkpoint.as_deref(), &out)?,
            Precision::F64 => run_pretrain::<f64>(&cfg, &data, checkpoint.as_deref(), &out)?,
        },
        Cmd::Train { data, checkpoint, out, .. } => match cfg.precision {
            Precision::F32 => run_train::<f32>(&cfg, &data, checkpoint.as_deref(), &out)?,
            Precision::F64 => run_train::<f64>(&cfg, &data, checkpoint.as_deref(), &out)?,
        },
        Cmd::Predict { data, checkpoint, out, .. } => match cfg.precision {
            Precision::F32 => run_predict::<f32>(&cfg, &data, &checkpoint, &out)?,
            Precision::F64 => run_predict::<f64>(&cfg, &data, &checkpoint, &out)?,
        },
        Cmd::Eval { data, predictions, out } => {
            let m = load_manifest(&data)?;
            let report = evaluate(&m, &read_predictions(&predictions)?)?;
            print!("{}", report.render_table());
            if let Some(p) = out {
                write_file(&p, &serde_json::to_string_pretty(&report)?)?;
            }
        }
        Cmd::Gradcheck => {
            if cli.global.precision == Some(Precision::F32) {
                return Err(Error::Config("gradcheck runs in f64 only".into()));
            }
            let rep = gradcheck(&cfg.model, cfg.seed, cfg.eps)?;
            let worst = rep.worst.as_ref().map(|(name, i)| format!("{name}[{i}]"));
            print_json(&serde_json::json!({
                "max_rel_err": rep.max_rel_err,
                "worst": worst,
                "checked": rep.checked,
                "unread": rep.unread,
                "tolerance": GRADCHECK_TOLERANCE,
            }))?;
            if !(rep.max_rel_err < GRADCHECK_TOLERANCE) {
                return Ok(ExitCode::from(3));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn exit_code(class: ErrorClass) -> u8 {
    match class {
        ErrorClass::Usage => 1,
        ErrorClass::Data => 2,
        ErrorClass::Numeric => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("VDU_LOG", "info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.class()))
        }
    }
}
