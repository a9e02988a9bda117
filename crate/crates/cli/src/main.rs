use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};

use madd_core::ablation::{attention_count_cells, loss_agda_cells, run_ablation_grid, AblationTable};
use madd_core::checkpoint::{init_from, load_trainer, save_trainer, Checkpoint};
use madd_core::data::{load_image, split_by_video, synthesize, write_dataset, Dataset, DatasetManifest, Split, SynthConfig};
use madd_core::gradcheck::{run_gradcheck, Component, GradcheckOptions};
use madd_core::visualize::write_overlays;
use madd_core::{Error, TrainConfig, Trainer};

#[derive(Parser)]
#[command(name = "madd", version, about = "Multi-attentional deepfake detector")]
struct Cli {
    /// Relative output paths are resolved under this directory.
    #[arg(long, global = true, env = "MADD_OUTPUT_ROOT")]
    output_root: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoints, metrics.json and a val report.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a manifest split; prints JSON.
    Eval(EvalArgs),
    /// Write attention heatmap overlays for images.
    Visualize(VisualizeArgs),
    /// Finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
    /// Train and evaluate an ablation grid.
    Ablate(AblateArgs),
    /// Generate the synthetic four-cue dataset.
    Synth(SynthArgs),
    /// Print a preset configuration file.
    Config {
        #[arg(long, default_value = "desk")]
        preset: String,
    },
}

/// Overrides for individual configuration keys.
#[derive(Args, Default)]
struct Overrides {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long = "M")]
    num_attentions: Option<usize>,
    #[arg(long)]
    aux_loss: Option<String>,
    #[arg(long)]
    agda_mode: Option<String>,
    #[arg(long)]
    agda_sigma: Option<f64>,
    #[arg(long)]
    agda_resize: Option<f64>,
    #[arg(long)]
    agda_theta: Option<f64>,
    #[arg(long)]
    agda_prob: Option<f64>,
}

impl Overrides {
    fn apply(&self, mut cfg: TrainConfig) -> Result<TrainConfig, Error> {
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.lr {
            cfg.optimizer.lr = v;
        }
        if let Some(v) = self.num_attentions {
            cfg.num_attentions = v;
        }
        if let Some(v) = &self.aux_loss {
            cfg.aux_loss = v.parse()?;
        }
        if let Some(v) = &self.agda_mode {
            cfg.agda.mode = v.parse()?;
        }
        if let Some(v) = self.agda_sigma {
            cfg.agda.sigma = v;
        }
        if let Some(v) = self.agda_resize {
            cfg.agda.resize_factor = v;
        }
        if let Some(v) = self.agda_theta {
            cfg.agda.theta_d = v;
        }
        if let Some(v) = self.agda_prob {
            cfg.agda.apply_probability = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, default_value_t = 30)]
    frames_per_video: usize,
    /// The run configuration the checkpoint must agree with.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Also write per-frame scores as CSV.
    #[arg(long)]
    scores: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct VisualizeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(required = true)]
    images: Vec<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Defaults to the toy preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Scale one component's analytic gradient (harness self-test).
    #[arg(long)]
    corrupt: Option<String>,
    #[arg(long, default_value_t = 1e-3)]
    tolerance: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum Table {
    LossAgda,
    AttentionCount,
    Both,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "loss-agda")]
    table: Table,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 100)]
    videos: usize,
    #[arg(long, default_value_t = 10)]
    frames_per_video: usize,
    #[arg(long, default_value_t = 8)]
    cue_size: usize,
    #[arg(long, default_value_t = 0.2)]
    cue_amplitude: f64,
    #[arg(long, default_value_t = 0.02)]
    noise: f64,
    #[arg(long, default_value_t = 0.2)]
    val_fraction: f64,
    #[arg(long, default_value_t = 0.2)]
    test_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) | Error::ConfigConflict(_) | Error::Checkpoint(_) => 2,
            Error::Data(_) | Error::Io { .. } => 3,
            Error::Numeric(_) => 4,
            Error::Shape(_) | Error::Validation(_) => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn resolve(root: &Option<PathBuf>, p: &Path) -> PathBuf {
    match root {
        Some(r) if p.is_relative() => r.join(p),
        _ => p.to_path_buf(),
    }
}

fn create_dir(p: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(p).map_err(|e| Error::Data(format!("cannot create {}: {e}", p.display())))
}

fn write_file(p: &Path, text: &str) -> Result<(), Error> {
    std::fs::write(p, text).map_err(|e| Error::Data(format!("cannot write {}: {e}", p.display())))
}

fn parse_split(s: &str) -> Result<Split, Error> {
    s.parse().map_err(|_| Error::Config(format!("unknown split '{s}'")))
}

fn cmd_train(args: &TrainArgs, root: &Option<PathBuf>) -> CmdResult {
    let cfg = args.overrides.apply(TrainConfig::load(&args.config)?)?;
    let out = resolve(root, &args.out);
    create_dir(&out)?;
    let manifest = DatasetManifest::load(&args.data)?;
    let train = Dataset::from_manifest(&manifest, Split::Train, cfg.resolution)?;
    let val = Dataset::from_manifest(&manifest, Split::Val, cfg.resolution)?;
    info!("train frames {}, val frames {}", train.len(), val.len());
    let mut trainer = match &args.resume {
        Some(p) => {
            let ckpt = Checkpoint::load(p)?;
            let mut t = Trainer::new(cfg.clone())?;
            ckpt.restore(&mut t)?;
            t
        }
        None => {
            let mut t = Trainer::new(cfg.clone())?;
            if !cfg.init_from.is_empty() {
                let n = init_from(&mut t.model, Path::new(&cfg.init_from))?;
                info!("initialised {n} parameter arrays from {}", cfg.init_from);
            }
            t
        }
    };
    write_file(&out.join("config.toml"), &cfg.to_text())?;
    let metrics_path = out.join("metrics.json");
    let mut history = Vec::new();
    let val_ref = (!val.is_empty()).then_some(&val);
    trainer.fit(&train, val_ref, |t, rec| {
        info!(
            "epoch {} loss {:.4} ce {:.4} train acc {:.3}",
            rec.epoch, rec.mean_loss, rec.mean_ce, rec.train_accuracy
        );
        history.push(rec.clone());
        write_file(&metrics_path, &serde_json::to_string_pretty(&history).expect("records serialise"))?;
        // captured after the epoch closed, so a resume starts the next one
        let snapshot = Checkpoint::capture(t);
        snapshot.save(&out.join(format!("epoch_{:03}.ckpt", rec.epoch)))?;
        snapshot.save(&out.join("last.ckpt"))
    })?;
    if history.is_empty() {
        write_file(&metrics_path, "[]")?;
        save_trainer(&mut trainer, &out.join("last.ckpt"))?;
    }
    if val.is_empty() {
        warn!("val split is empty, no final report written");
    } else {
        let (report, _) = trainer.evaluate(&val)?;
        write_file(&out.join("report.json"), &report.to_json())?;
        println!("{}", report.to_json());
    }
    Ok(())
}

fn cmd_eval(args: &EvalArgs, root: &Option<PathBuf>) -> CmdResult {
    let mut trainer = load_trainer(&args.checkpoint)?;
    if let Some(p) = &args.config {
        let expected = TrainConfig::load(p)?;
        if expected.architecture() != trainer.cfg.architecture() {
            return Err(Error::ConfigConflict(format!(
                "checkpoint architecture {:?} does not match {} ({:?})",
                trainer.cfg.architecture(),
                p.display(),
                expected.architecture()
            ))
            .into());
        }
    }
    let manifest = DatasetManifest::load(&args.data)?;
    let split = parse_split(&args.split)?;
    let data = Dataset::from_manifest(&manifest, split, trainer.cfg.resolution)?;
    if data.is_empty() {
        return Err(Error::Data(format!("split {split} is empty")).into());
    }
    let hash = trainer.cfg.fingerprint();
    let bs = trainer.cfg.batch_size;
    let (report, rows) =
        madd_core::metrics::evaluate(&mut trainer.model, &data, args.frames_per_video, args.seed, bs, &hash)?;
    if let Some(p) = &args.scores {
        let mut text = String::from("id,video_id,label,p_fake\n");
        for r in &rows {
            text.push_str(&format!("{},{},{},{:?}\n", r.id, r.video_id, r.label, r.p_fake));
        }
        write_file(&resolve(root, p), &text)?;
    }
    println!("{}", report.to_json());
    Ok(())
}

fn cmd_visualize(args: &VisualizeArgs, root: &Option<PathBuf>) -> CmdResult {
    let mut trainer = load_trainer(&args.checkpoint)?;
    let res = trainer.cfg.resolution;
    let mut inputs = Vec::new();
    for p in &args.images {
        match load_image(p, res) {
            Ok(px) => {
                let id = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into());
                inputs.push((id, px));
            }
            Err(e) => warn!("skipping {}: {e}", p.display()),
        }
    }
    if inputs.is_empty() {
        return Err(Error::Data("no input image could be decoded".into()).into());
    }
    let files = write_overlays(&mut trainer.model, &inputs, res, &resolve(root, &args.out))?;
    for f in files {
        println!("{}", f.display());
    }
    Ok(())
}

fn cmd_gradcheck(args: &GradcheckArgs) -> CmdResult {
    let cfg = match &args.config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::toy(),
    };
    let corrupt = args.corrupt.as_deref().map(str::parse::<Component>).transpose()?;
    let opts = GradcheckOptions {
        seed: args.seed,
        corrupt,
        ..Default::default()
    };
    let report = run_gradcheck(&cfg, &Component::ALL, &opts)?;
    for r in &report.results {
        let verdict = if r.max_rel_error < args.tolerance { "pass" } else { "FAIL" };
        println!("{:<10} max_rel_err {:.3e}  {verdict}", r.component.name(), r.max_rel_error);
    }
    let failing = report.failing(args.tolerance);
    if failing.is_empty() {
        Ok(())
    } else {
        let names: Vec<&str> = failing.iter().map(|c| c.name()).collect();
        Err(Failure {
            code: 4,
            message: format!("gradient check failed for: {}", names.join(", ")),
        })
    }
}

fn cmd_ablate(args: &AblateArgs, root: &Option<PathBuf>) -> CmdResult {
    let base = args.overrides.apply(TrainConfig::load(&args.config)?)?;
    let manifest = DatasetManifest::load(&args.data)?;
    let train = Dataset::from_manifest(&manifest, Split::Train, base.resolution)?;
    let test = Dataset::from_manifest(&manifest, parse_split(&args.split)?, base.resolution)?;
    let cells = match args.table {
        Table::LossAgda => loss_agda_cells(base.num_attentions),
        Table::AttentionCount => attention_count_cells(),
        Table::Both => {
            let mut c = loss_agda_cells(base.num_attentions);
            c.extend(attention_count_cells());
            c
        }
    };
    let table: AblationTable = run_ablation_grid(&base, &cells, &args.seeds, &train, &test, |r| {
        match (&r.report, &r.error) {
            (Some(rep), _) => info!(
                "M={} {}/{} seed {}: acc {:.4} overlap {:?}",
                r.num_attentions, r.loss, r.agda, r.seed, rep.accuracy, r.overlap_cosine
            ),
            (_, Some(e)) => warn!("M={} {}/{} seed {} failed: {e}", r.num_attentions, r.loss, r.agda, r.seed),
            _ => {}
        }
    });
    let out = resolve(root, &args.out);
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_file(&out, &table.to_json())?;
    Ok(())
}

fn cmd_synth(args: &SynthArgs, root: &Option<PathBuf>) -> CmdResult {
    let cfg = SynthConfig {
        size: args.size,
        videos: args.videos,
        frames_per_video: args.frames_per_video,
        cue_size: args.cue_size,
        cue_amplitude: args.cue_amplitude,
        noise: args.noise,
        seed: args.seed,
    };
    let ds = synthesize(&cfg)?;
    let splits = split_by_video(&ds, args.val_fraction, args.test_fraction);
    let out = resolve(root, &args.out);
    write_dataset(&ds, &splits, &out)?;
    println!("{}", out.join("manifest.csv").display());
    Ok(())
}

fn run(cli: Cli) -> CmdResult {
    let root = &cli.output_root;
    match &cli.command {
        Command::Train(a) => cmd_train(a, root),
        Command::Eval(a) => cmd_eval(a, root),
        Command::Visualize(a) => cmd_visualize(a, root),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Ablate(a) => cmd_ablate(a, root),
        Command::Synth(a) => cmd_synth(a, root),
        Command::Config { preset } => {
            print!("{}", TrainConfig::preset(preset)?.to_text());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
