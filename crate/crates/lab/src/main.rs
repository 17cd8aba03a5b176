use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;
use textalign::cache::{load_cache, save_cache, EmbeddingCache};
use textalign::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use textalign::config::{ExperimentConfig, Overrides};
use textalign::dataset::{load_split, save_split, split_off, EVAL_SPLIT, TRAIN_SPLIT};
use textalign::error::{LabError, Result};
use textalign::experiments::{self, thread_budget};
use textalign::metrics::{write_metrics, RunHooks};
use textalign_core::analysis::ProbeConfig;
use textalign_core::backbone::BackboneConfig;
use textalign_core::data::{generate_shapes, DatasetSpec};
use textalign_core::gradcheck::{check_full_objective, ObjectiveCheck};
use textalign_core::schedule::ScheduleKind;
use textalign_core::text_targets::{caption_length_stats, fit_whitening, RawEmbeddingSet, WhitenedTargetSet};

#[derive(Parser)]
#[command(name = "textalign", version, about = "Caption-aligned training experiments for small vision transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic captioned-shapes dataset.
    GenData(GenDataArgs),
    /// Pseudo-encode captions into embedding caches.
    Embed(EmbedArgs),
    /// Train one model.
    Train(TrainArgs),
    /// Final accuracy over a grid of lambda values and seeds.
    SweepLambda(SweepArgs),
    /// Jump schedules at several switch-off epochs, with FFD to the final model.
    JumpStudy(JumpArgs),
    /// Paired runs with and without the alignment term under label noise.
    NoiseStudy(NoiseArgs),
    /// Representation analyses on checkpoints and caches.
    Analyze(AnalyzeArgs),
    /// Check gradients of the full objective against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 5000)]
    n_train: usize,
    #[arg(long, default_value_t = 1000)]
    n_eval: usize,
    #[arg(long, default_value_t = 4)]
    colors: usize,
    #[arg(long, default_value_t = 3)]
    shapes: usize,
    #[arg(long, default_value_t = 32)]
    image_size: usize,
    #[arg(long, default_value_t = 0.1)]
    pixel_noise: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EmbedArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 64)]
    d_txt: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Also write whitened targets (fit on the training split).
    #[arg(long)]
    whiten: bool,
    #[arg(long, default_value_t = 1e-6)]
    floor: f64,
    /// Output directory; defaults to the dataset directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone, Default)]
struct OverrideArgs {
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long, value_parser = parse_schedule)]
    schedule: Option<ScheduleKind>,
    #[arg(long)]
    jump_epoch: Option<usize>,
    /// Epochs the jump schedule takes to fall to zero.
    #[arg(long)]
    ramp: Option<usize>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    adaptive: Option<bool>,
    #[arg(long)]
    noise_rho: Option<f64>,
    #[arg(long)]
    fraction: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Plain classifier without the alignment term.
    #[arg(long)]
    baseline: bool,
    #[arg(long)]
    data: Option<PathBuf>,
}

impl OverrideArgs {
    fn overrides(&self, output_dir: Option<PathBuf>) -> Overrides {
        Overrides {
            lambda: self.lambda,
            schedule: self.schedule,
            jump_epoch: self.jump_epoch,
            ramp: self.ramp,
            adaptive: self.adaptive,
            noise_rho: self.noise_rho,
            fraction: self.fraction,
            seed: self.seed,
            epochs: self.epochs,
            baseline: self.baseline.then_some(true),
            data_dir: self.data.clone(),
            output_dir,
        }
    }
}

fn parse_schedule(s: &str) -> std::result::Result<ScheduleKind, String> {
    s.parse().map_err(|e: textalign_core::Error| e.to_string())
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    o: OverrideArgs,
    /// Output directory; defaults to the config's `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.2,0.3,0.4,0.5,0.6")]
    lambdas: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
    #[arg(long, value_enum, default_value_t = AdaptiveSel::On)]
    weighting: AdaptiveSel,
    #[command(flatten)]
    o: OverrideArgs,
    /// CSV destination; stdout if absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum AdaptiveSel {
    On,
    Off,
    Both,
}

#[derive(Args)]
struct JumpArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    jump_epochs: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
    #[command(flatten)]
    o: OverrideArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct NoiseArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0,0.4")]
    rhos: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    seeds: Vec<u64>,
    #[command(flatten)]
    o: OverrideArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
#[command(group = clap::ArgGroup::new("analysis").required(true).args(["cka", "ffd", "invert", "probe", "export"]))]
struct AnalyzeArgs {
    /// Pairwise CKA between checkpoints.
    #[arg(long, num_args = 2..)]
    cka: Vec<PathBuf>,
    /// Per-class FFD between two checkpoints.
    #[arg(long, num_args = 2)]
    ffd: Vec<PathBuf>,
    /// Invert the text head of a checkpoint for `--caption`.
    #[arg(long, requires = "caption")]
    invert: Option<PathBuf>,
    #[arg(long)]
    caption: Option<String>,
    /// Linear probe on an embedding cache.
    #[arg(long)]
    probe: Option<PathBuf>,
    /// Export embeddings of a checkpoint to `--out` as a raw cache.
    #[arg(long, requires = "out")]
    export: Option<PathBuf>,
    /// Dataset directory supplying images, labels and class names.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = EVAL_SPLIT)]
    split: String,
    /// Whitened cache whose statistics whiten the caption for `--invert`.
    #[arg(long)]
    stats: Option<PathBuf>,
    #[arg(long, default_value_t = 7)]
    text_seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 2)]
    depth: usize,
    #[arg(long, default_value_t = 8)]
    width: usize,
    #[arg(long, default_value_t = 2)]
    heads: usize,
    #[arg(long, default_value_t = 8)]
    image_size: usize,
    #[arg(long, default_value_t = 2)]
    patch_size: usize,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 16)]
    d_txt: usize,
    #[arg(long, default_value_t = 0.5)]
    lambda: f64,
    #[arg(long)]
    no_adaptive: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
}

fn write_text(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).map_err(|source| LabError::Io {
            path: p.to_path_buf(),
            source,
        }),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|source| LabError::Io {
        path: dir.to_path_buf(),
        source,
    })
}

fn load_experiment(config: &Path, o: &OverrideArgs, out: Option<PathBuf>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(config)?;
    cfg.apply(&o.overrides(out));
    Ok(cfg)
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let spec = DatasetSpec {
        n_samples: a.n_train + a.n_eval,
        image_size: a.image_size,
        n_colors: a.colors,
        n_shapes: a.shapes,
        pixel_noise_std: a.pixel_noise,
        seed: a.seed,
    };
    let all = generate_shapes(&spec)?;
    let (train, eval) = split_off(&all, a.n_train);
    save_split(&a.out, TRAIN_SPLIT, &train)?;
    if !eval.is_empty() {
        save_split(&a.out, EVAL_SPLIT, &eval)?;
    }
    let spec_path = a.out.join("spec.json");
    fs::write(&spec_path, serde_json::to_vec_pretty(&spec)?).map_err(|source| LabError::Io { path: spec_path, source })?;
    println!(
        "{}",
        json!({"train": train.len(), "eval": eval.len(), "classes": all.classes})
    );
    Ok(())
}

fn embed(a: EmbedArgs) -> Result<()> {
    let out = a.out.clone().unwrap_or_else(|| a.data.clone());
    create_dir(&out)?;
    let train = load_split(&a.data, TRAIN_SPLIT)?;
    let eval = load_split(&a.data, EVAL_SPLIT).ok();
    let all: Vec<_> = train.samples.iter().chain(eval.iter().flat_map(|e| &e.samples)).collect();
    let raw_all = RawEmbeddingSet::from_captions(all.iter().map(|s| (s.id.as_str(), s.caption.as_str())), a.d_txt, a.seed)?;
    save_cache(&EmbeddingCache::Raw(raw_all.clone()), out.join("captions_raw.ttec"))?;
    let stats = caption_length_stats(all.iter().map(|s| s.caption.as_str()));
    let mut report = json!({
        "raw": out.join("captions_raw.ttec"),
        "count": raw_all.len(),
        "d_txt": a.d_txt,
        "caption_tokens": {"mean": stats.mean, "min": stats.min, "max": stats.max},
    });
    if a.whiten {
        let raw_train = RawEmbeddingSet::from_captions(
            train.samples.iter().map(|s| (s.id.as_str(), s.caption.as_str())),
            a.d_txt,
            a.seed,
        )?;
        let stats = fit_whitening(&raw_train, a.floor)?;
        let whitened = WhitenedTargetSet::apply(&raw_all, stats)?;
        let path = out.join("captions_whitened.ttec");
        save_cache(&EmbeddingCache::Whitened(whitened), &path)?;
        report["whitened"] = json!(path);
    }
    println!("{report}");
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let cfg = load_experiment(&a.config, &a.o, a.out.clone())?;
    let out = cfg
        .output_dir
        .clone()
        .ok_or_else(|| LabError::Invalid("no output directory: pass --out or set output_dir".into()))?;
    create_dir(&out)?;
    cfg.save(out.join("config.json"))?;
    let data = cfg.prepare()?;
    let mut hooks = RunHooks::new().with_log(out.join("metrics.jsonl"))?;
    if !a.quiet {
        hooks = hooks.with_progress(format!("seed {}", cfg.train.seed));
    }
    let outcome = experiments::run(&cfg.train, &data, &mut hooks)?;
    write_metrics(out.join("metrics.jsonl"), &outcome.log)?;
    let epoch = outcome.log.last().map(|r| r.epoch);
    save_checkpoint(
        &Checkpoint::new(outcome.model, Some(cfg.train.clone()), epoch),
        out.join("checkpoint.ttck"),
    )?;
    let last = outcome.log.last();
    println!(
        "{}",
        json!({
            "steps": outcome.steps,
            "epochs": outcome.log.len(),
            "flipped_labels": outcome.flipped_labels,
            "train_accuracy": last.map(|r| r.train_accuracy),
            "eval_accuracy": last.and_then(|r| r.eval_accuracy),
        })
    );
    Ok(())
}

fn sweep_cmd(a: SweepArgs) -> Result<()> {
    let cfg = load_experiment(&a.config, &a.o, None)?;
    let data = cfg.prepare_for_sweep(&a.lambdas)?;
    let adaptive: &[bool] = match a.weighting {
        AdaptiveSel::On => &[true],
        AdaptiveSel::Off => &[false],
        AdaptiveSel::Both => &[true, false],
    };
    let rows = experiments::sweep_lambda(&cfg.train, &data, &a.lambdas, adaptive, &a.seeds, thread_budget())?;
    for r in rows.iter().filter(|r| r.error.is_some()) {
        eprintln!(
            "lambda {} adaptive {} seed {}: {}",
            r.lambda,
            r.adaptive,
            r.seed,
            r.error.as_deref().unwrap_or_default()
        );
    }
    write_text(a.out.as_deref(), &experiments::sweep_csv(&rows))
}

fn jump_cmd(a: JumpArgs) -> Result<()> {
    let cfg = load_experiment(&a.config, &a.o, Some(a.out.clone()))?;
    create_dir(&a.out)?;
    cfg.save(a.out.join("config.json"))?;
    let data = cfg.prepare()?;
    let study = experiments::jump_study(&cfg.train, &data, &a.jump_epochs, &a.seeds, thread_budget())?;
    write_text(Some(&a.out.join("jump_accuracy.csv")), &experiments::jump_accuracy_csv(&study))?;
    write_text(Some(&a.out.join("jump_ffd.csv")), &experiments::jump_ffd_csv(&study))?;
    write_text(Some(&a.out.join("jump_study.json")), &serde_json::to_string_pretty(&study)?)
}

fn noise_cmd(a: NoiseArgs) -> Result<()> {
    let cfg = load_experiment(&a.config, &a.o, None)?;
    let data = cfg.prepare_for_sweep(&[cfg.train.schedule.peak])?;
    let rows = experiments::noise_study(&cfg.train, &data, &a.rhos, &a.seeds, thread_budget())?;
    write_text(a.out.as_deref(), &experiments::noise_csv(&rows))
}

fn analyze(a: AnalyzeArgs) -> Result<()> {
    let data = match &a.data {
        Some(d) => Some(load_split(d, &a.split)?),
        None => None,
    };
    let need_data = || data.as_ref().ok_or_else(|| LabError::Invalid("this analysis needs --data".into()));
    let value = if !a.cka.is_empty() {
        let models: Vec<_> = a
            .cka
            .iter()
            .map(|p| Ok(load_checkpoint(p)?.model))
            .collect::<Result<_>>()?;
        json!({
            "checkpoints": a.cka,
            "split": a.split,
            "cka": experiments::cka_matrix(&models, need_data()?)?,
        })
    } else if !a.ffd.is_empty() {
        let ma = load_checkpoint(&a.ffd[0])?.model;
        let mb = load_checkpoint(&a.ffd[1])?.model;
        json!({
            "checkpoints": a.ffd,
            "probe_set": a.split,
            "ffd": experiments::ffd_between(&ma, &mb, need_data()?)?,
        })
    } else if let Some(ck) = &a.invert {
        let model = load_checkpoint(ck)?.model;
        let stats = match &a.stats {
            Some(p) => match load_cache(p)? {
                EmbeddingCache::Whitened(w) => Some(w.stats),
                EmbeddingCache::Raw(_) => return Err(LabError::Invalid("--stats needs a whitened cache".into())),
            },
            None => None,
        };
        let names = data.as_ref().map(|d| d.classes.as_slice());
        let caption = a.caption.as_deref().unwrap_or_default();
        json!(experiments::invert_caption(&model, caption, a.text_seed, stats.as_ref(), names)?)
    } else if let Some(cache) = &a.probe {
        let dir = a
            .data
            .as_ref()
            .ok_or_else(|| LabError::Invalid("--probe needs --data".into()))?;
        let rows = load_cache(cache)?;
        let train = load_split(dir, TRAIN_SPLIT)?;
        let test = load_split(dir, EVAL_SPLIT)?;
        json!(experiments::probe_embeddings(rows.rows(), &train, &test, &ProbeConfig::default())?)
    } else if let Some(ck) = &a.export {
        let model = load_checkpoint(ck)?.model;
        let out = a.out.as_deref().expect("clap requires --out");
        let set = experiments::export_embeddings(&model, need_data()?, out)?;
        println!("{}", json!({"exported": set.len(), "dim": set.dim(), "path": out}));
        return Ok(());
    } else {
        unreachable!("clap requires one analysis")
    };
    write_text(a.out.as_deref(), &format!("{}\n", serde_json::to_string_pretty(&value)?))
}

fn gradcheck(a: GradcheckArgs) -> Result<bool> {
    let spec = ObjectiveCheck {
        backbone: BackboneConfig {
            image_size: a.image_size,
            patch_size: a.patch_size,
            depth: a.depth,
            width: a.width,
            heads: a.heads,
            mlp_ratio: 2.0,
            channels: 3,
        },
        batch: a.batch,
        classes: a.classes,
        d_txt: a.d_txt,
        lambda: a.lambda,
        adaptive: !a.no_adaptive,
        smoothing: 0.1,
        seed: a.seed,
        eps: a.eps,
    };
    let out = check_full_objective(&spec)?;
    let pass = out.report.max_rel_error < a.tol;
    println!(
        "{}",
        json!({
            "max_rel_error": out.report.max_rel_error,
            "worst_parameter": out.report.worst.0,
            "worst_element": out.report.worst.1,
            "checked": out.report.checked,
            "alpha": out.alpha,
            "loss": out.loss,
            "tolerance": a.tol,
            "pass": pass,
        })
    );
    Ok(pass)
}

fn error_kind(e: &LabError) -> &'static str {
    match e {
        LabError::Core(_) => "core",
        LabError::Io { .. } => "io",
        LabError::BadMagic { .. } => "bad_magic",
        LabError::UnsupportedVersion { .. } => "unsupported_version",
        LabError::UnknownKind(_) => "unknown_kind",
        LabError::DimMismatch { .. } => "dim_mismatch",
        LabError::Truncated(_) => "truncated",
        LabError::Malformed(_) => "malformed",
        LabError::ShapeMismatch { .. } => "shape_mismatch",
        LabError::Json(_) => "json",
        LabError::Invalid(_) => "invalid",
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a).map(|_| true),
        Command::Embed(a) => embed(a).map(|_| true),
        Command::Train(a) => train_cmd(a).map(|_| true),
        Command::SweepLambda(a) => sweep_cmd(a).map(|_| true),
        Command::JumpStudy(a) => jump_cmd(a).map(|_| true),
        Command::NoiseStudy(a) => noise_cmd(a).map(|_| true),
        Command::Analyze(a) => analyze(a).map(|_| true),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("{}", json!({"error": error_kind(&e), "message": e.to_string()}));
            ExitCode::FAILURE
        }
    }
}
