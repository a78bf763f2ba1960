//! `tgp-sid`: synthesize corpora, pre-train, fine-tune, evaluate and
//! benchmark pooling from the command line.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 numerical
//! failure, 1 anything else.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use tgp_sid::config::{ModelSpec, RunConfig};
use tgp_sid::corpus::{self, FeatureSet, Manifest, Split, SynthSpec, Vocabulary};
use tgp_sid::encoder::Preset;
use tgp_sid::model::SpeakerModel;
use tgp_sid::pooling::{PoolingConfig, PoolingKind};
use tgp_sid::train::gradcheck::{self, GradCheckOptions};
use tgp_sid::train::loops::{self, Finetuner, PretrainData, Pretrainer};
use tgp_sid::train::Checkpoint;
use tgp_sid::Error;

const EXIT_FAILURE: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Parser)]
#[command(name = "tgp-sid", version, about = "Speaker identification with Temporal Gate Pooling")]
struct Cli {
    /// Log more (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic multi-speaker corpus and its manifest.
    Synth(SynthArgs),
    /// Masked-prediction pre-training of the encoder.
    Pretrain(PretrainArgs),
    /// Supervised speaker-classification training.
    Finetune(FinetuneArgs),
    /// Top-1 accuracy of a fine-tuned checkpoint.
    Eval(EvalArgs),
    /// Train and evaluate every pooling variant under one seed.
    Poolbench(PoolbenchArgs),
    /// Parameter counts per preset.
    Params(ParamsArgs),
    /// Finite-difference gradient checks at toy sizes.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 10)]
    speakers: usize,
    #[arg(long, default_value_t = 20)]
    utts: usize,
    /// Seconds per utterance.
    #[arg(long, default_value_t = 3.0)]
    duration: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20.0)]
    snr_db: f64,
    #[arg(long, default_value_t = 0.2)]
    test_fraction: f64,
    #[arg(long)]
    out: PathBuf,
}

/// Settings shared by the training commands; flags override the file.
#[derive(Args)]
struct RunArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Encoder preset: 256M, 512M, 768M, 256S or toy.
    #[arg(long)]
    preset: Option<String>,
    /// mean, mean-std, max, random, self-attention or tgp.
    #[arg(long)]
    pooling: Option<String>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PretrainArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    steps: Option<u64>,
    /// Warmup steps of the learning-rate schedule.
    #[arg(long)]
    warmup: Option<u64>,
    /// Continue from a pre-training checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Print the parameter count and exit.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args)]
struct FinetuneArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    epochs: Option<u64>,
    /// Pre-training checkpoint to initialize the encoder from.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    freeze_encoder: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Fine-tuned checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// train or test.
    #[arg(long, default_value = "test")]
    split: String,
}

#[derive(Args)]
struct PoolbenchArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    epochs: Option<u64>,
    /// Pre-training checkpoint shared by all variants.
    #[arg(long, conflicts_with = "fresh")]
    init: Option<PathBuf>,
    /// Use a freshly initialized encoder instead of a pre-trained one.
    #[arg(long)]
    fresh: bool,
}

#[derive(Args)]
struct ParamsArgs {
    /// Only this preset (default: all).
    #[arg(long)]
    preset: Option<String>,
    #[arg(long, default_value = "tgp")]
    pooling: String,
    /// Pooling heads (default: d / 64).
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long, default_value_t = 1251)]
    speakers: usize,
    /// Utterance length.
    #[arg(long, default_value_t = 15.0)]
    seconds: f64,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = gradcheck::DEFAULT_EPS)]
    eps: f64,
    /// Coordinates sampled per tensor.
    #[arg(long, default_value_t = 32)]
    coords: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fail above this relative error.
    #[arg(long, default_value_t = 1e-5)]
    tolerance: f64,
}

/// A usage problem detected by the CLI itself.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<Usage>().is_some() {
        return EXIT_USAGE;
    }
    match err.downcast_ref::<Error>() {
        Some(Error::Numerical(_)) => EXIT_NUMERICAL,
        Some(
            Error::Config(_)
            | Error::Json(_)
            | Error::Manifest { .. }
            | Error::DuplicatePath(_)
            | Error::Checkpoint(_)
            | Error::MissingParam(_)
            | Error::LabelOutOfRange { .. }
            | Error::UnsupportedChannels(_)
            | Error::UnsupportedEncoding(_)
            | Error::Empty(_),
        ) => EXIT_USAGE,
        _ => EXIT_FAILURE,
    }
}

fn parse_preset(name: &str) -> anyhow::Result<Preset> {
    Preset::from_name(name).ok_or_else(|| usage(format!("unknown preset `{name}` (256M, 512M, 768M, 256S, toy)")))
}

fn existing(path: &Path, what: &str) -> anyhow::Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(usage(format!("{what} {} does not exist", path.display())))
    }
}

fn load_checkpoint(path: &Path) -> anyhow::Result<Checkpoint> {
    existing(path, "checkpoint")?;
    Ok(Checkpoint::load(path)?)
}

impl RunArgs {
    fn resolve(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                existing(p, "config file")?;
                RunConfig::load(p)?
            }
            None => RunConfig::default(),
        };
        self.apply(&mut cfg)?;
        Ok(cfg)
    }

    fn apply(&self, cfg: &mut RunConfig) -> anyhow::Result<()> {
        if let Some(p) = &self.preset {
            cfg.model = ModelSpec::Preset(parse_preset(p)?);
            cfg.frontend.n_mels = cfg.encoder().n_mels;
        }
        if let Some(p) = &self.pooling {
            cfg.pooling.kind = PoolingKind::parse(p)?;
        }
        if let Some(h) = self.heads {
            cfg.pooling.heads = h;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(b) = self.batch_size {
            cfg.pretrain.batch_size = b;
            cfg.finetune.batch_size = b;
        }
        if let Some(lr) = self.lr {
            cfg.pretrain.schedule.peak_lr = lr;
            cfg.finetune.schedule.peak_lr = lr;
        }
        if let Some(m) = &self.manifest {
            cfg.paths.manifest = Some(m.clone());
        }
        if let Some(o) = &self.out {
            cfg.paths.out_dir = Some(o.clone());
        }
        cfg.validate()?;
        Ok(())
    }
}

fn manifest_of(cfg: &RunConfig) -> anyhow::Result<Manifest> {
    let path = cfg
        .paths
        .manifest
        .as_ref()
        .ok_or_else(|| usage("no manifest given (--manifest or paths.manifest)"))?;
    existing(path, "manifest")?;
    Ok(corpus::read_manifest(path)?)
}

fn out_dir_of(cfg: &RunConfig) -> anyhow::Result<PathBuf> {
    let dir = cfg
        .paths
        .out_dir
        .clone()
        .ok_or_else(|| usage("no output directory given (--out or paths.out_dir)"))?;
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn features(manifest: &Manifest, vocab: &Vocabulary, split: Split, cfg: &RunConfig) -> anyhow::Result<FeatureSet> {
    let set = FeatureSet::load(&manifest.split(split), vocab, &cfg.frontend)?;
    if set.skipped > 0 {
        log::warn!("{} {split:?} utterances could not be read", set.skipped);
    }
    Ok(set)
}

fn cmd_synth(a: SynthArgs) -> anyhow::Result<()> {
    let spec = SynthSpec {
        n_speakers: a.speakers,
        utts_per_speaker: a.utts,
        duration_s: a.duration,
        seed: a.seed,
        snr_db: a.snr_db,
        test_fraction: a.test_fraction,
        ..SynthSpec::default()
    };
    let manifest = corpus::synth_corpus(&spec, &a.out)?;
    println!("{}", manifest.display());
    Ok(())
}

fn cmd_pretrain(a: PretrainArgs) -> anyhow::Result<()> {
    let mut pre = match &a.resume {
        Some(path) => {
            let mut pre = Pretrainer::from_checkpoint(&load_checkpoint(path)?)?;
            a.run.apply(&mut pre.config)?;
            log::info!("resuming at step {}", pre.step);
            pre
        }
        None => {
            let cfg = a.run.resolve()?;
            if a.dry_run {
                let enc = cfg.encoder();
                let head = enc.hidden_size * tgp_sid::bestrq::CODEBOOK_SIZE;
                println!("encoder parameters: {}", enc.count_params());
                println!("prediction head parameters: {head}");
                println!("trainable total: {}", enc.count_params() + head);
                return Ok(());
            }
            Pretrainer::new(cfg)?
        }
    };
    if let Some(s) = a.steps {
        pre.config.pretrain.steps = s;
    }
    if let Some(w) = a.warmup {
        pre.config.pretrain.schedule.warmup_steps = w;
    }
    if a.dry_run {
        println!("encoder parameters: {}", pre.encoder.count_params());
        return Ok(());
    }
    if pre.step >= pre.config.pretrain.steps {
        bail!(usage(format!(
            "checkpoint is already at step {} of {}",
            pre.step, pre.config.pretrain.steps
        )));
    }
    pre.schedule()?;
    let manifest = manifest_of(&pre.config)?;
    let out = out_dir_of(&pre.config)?;
    let train = features(&manifest, &manifest.vocabulary(), Split::Train, &pre.config)?;
    let data = PretrainData::new(train, &pre.quantizer)?;
    let records = pre.run(&data, Some(&out))?;
    if let Some(last) = records.last() {
        println!(
            "step {} loss {:.4} masked accuracy {:.3}; checkpoint {}",
            last.step,
            last.loss,
            last.acc,
            out.join(loops::PRETRAIN_CHECKPOINT).display()
        );
    }
    Ok(())
}

fn cmd_finetune(a: FinetuneArgs) -> anyhow::Result<()> {
    let mut cfg = a.run.resolve()?;
    if let Some(e) = a.epochs {
        cfg.finetune.epochs = e;
    }
    if a.freeze_encoder {
        cfg.finetune.freeze_encoder = true;
    }
    if let Some(p) = &a.init {
        cfg.paths.init_checkpoint = Some(p.clone());
    }
    let init = cfg.paths.init_checkpoint.as_deref().map(load_checkpoint).transpose()?;
    let manifest = manifest_of(&cfg)?;
    let out = out_dir_of(&cfg)?;
    let vocab = manifest.vocabulary();
    let train = features(&manifest, &vocab, Split::Train, &cfg)?;
    let test = features(&manifest, &vocab, Split::Test, &cfg)?;
    let frames = train
        .frames
        .first()
        .ok_or_else(|| usage("the training split is empty"))?
        .num_frames();
    let mut ft = Finetuner::new(cfg, vocab, frames, init.as_ref())?;
    let report = ft.run(&train, Some(&test), Some(&out))?;
    if let Some(last) = report.evals.last() {
        println!(
            "epoch {} train accuracy {:.4} test accuracy {}; checkpoint {}",
            last.epoch,
            last.train_acc,
            last.test_acc.map_or("-".into(), |a| format!("{a:.4}")),
            out.join(loops::FINETUNE_CHECKPOINT).display()
        );
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> anyhow::Result<()> {
    let split = match a.split.as_str() {
        "train" => Split::Train,
        "test" => Split::Test,
        other => bail!(usage(format!("unknown split `{other}` (train or test)"))),
    };
    let ft = Finetuner::from_checkpoint(&load_checkpoint(&a.checkpoint)?)?;
    existing(&a.manifest, "manifest")?;
    let manifest = corpus::read_manifest(&a.manifest)?;
    let set = features(&manifest, &ft.vocab, split, &ft.config)?;
    let acc = ft.evaluate(&set)?;
    println!(
        "top-1 accuracy {acc:.4} ({}/{})",
        (acc * set.len() as f64).round() as usize,
        set.len()
    );
    Ok(())
}

fn cmd_poolbench(a: PoolbenchArgs) -> anyhow::Result<()> {
    let mut cfg = a.run.resolve()?;
    if let Some(e) = a.epochs {
        cfg.finetune.epochs = e;
    }
    if let Some(h) = a.run.heads {
        cfg.finetune.bench_heads = h;
    }
    if let Some(p) = &a.init {
        cfg.paths.init_checkpoint = Some(p.clone());
    }
    if a.fresh {
        cfg.paths.init_checkpoint = None;
    } else if cfg.paths.init_checkpoint.is_none() {
        bail!(usage("poolbench needs --init <pretrain checkpoint> or --fresh"));
    }
    let init = cfg.paths.init_checkpoint.as_deref().map(load_checkpoint).transpose()?;
    let manifest = manifest_of(&cfg)?;
    let out = out_dir_of(&cfg)?;
    let vocab = manifest.vocabulary();
    let train = features(&manifest, &vocab, Split::Train, &cfg)?;
    let test = features(&manifest, &vocab, Split::Test, &cfg)?;
    if init.is_none() {
        log::warn!("poolbench with a freshly initialized encoder");
    }
    let rows = loops::pool_bench(&cfg, &vocab, &train, &test, init.as_ref())?;
    let mut csv = String::from("pooling,accuracy\n");
    for r in &rows {
        csv.push_str(&format!("{},{:.6}\n", r.pooling, r.accuracy));
    }
    let path = out.join("poolbench.csv");
    fs::write(&path, &csv).with_context(|| format!("writing {}", path.display()))?;
    let run = serde_json::json!({
        "config": cfg,
        "encoder": if init.is_some() { "pretrained" } else { "fresh" },
        "rows": rows,
    });
    let path = out.join("poolbench.json");
    fs::write(&path, serde_json::to_string_pretty(&run)?).with_context(|| format!("writing {}", path.display()))?;
    print!("{csv}");
    Ok(())
}

fn cmd_params(a: ParamsArgs) -> anyhow::Result<()> {
    let presets = match &a.preset {
        Some(p) => vec![parse_preset(p)?],
        None => Preset::ALL.to_vec(),
    };
    let kind = PoolingKind::parse(&a.pooling)?;
    let frontend = tgp_sid::frontend::FrontendConfig::default().with_target_seconds(a.seconds);
    let frames = frontend.frames_for(16_000);
    println!("preset,encoder,pooling,classifier,total");
    for preset in presets {
        let enc = preset.config();
        let heads = if kind.has_heads() {
            a.heads.unwrap_or((enc.hidden_size / 64).max(1))
        } else {
            1
        };
        let model = SpeakerModel::new(enc, PoolingConfig::new(kind, heads), frames, a.speakers, 0.2, 30.0)?;
        println!(
            "{},{},{},{},{}",
            preset.name(),
            model.encoder.count_params(),
            model.pooling.count_params(),
            model.classifier.count_params(),
            model.count_params()
        );
    }
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> anyhow::Result<()> {
    let opts = GradCheckOptions {
        eps: a.eps,
        max_coords_per_tensor: a.coords,
        seed: a.seed,
    };
    let reports = gradcheck::suite(&opts)?;
    let mut worst = 0.0f64;
    for r in &reports {
        println!("{r}");
        worst = worst.max(r.max_rel_error);
    }
    println!("max relative error {worst:.3e}");
    if !(worst < a.tolerance) {
        return Err(Error::Numerical(format!("max relative error {worst:.3e} ≥ {:.1e}", a.tolerance)).into());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Finetune(a) => cmd_finetune(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Poolbench(a) => cmd_poolbench(a),
        Command::Params(a) => cmd_params(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
