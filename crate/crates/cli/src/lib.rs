//! Command-line front end: synthetic cohort generation, feature
//! extraction, training, evaluation and the ablation sweep.
//!
//! Exit codes: 0 on success, 2 for configuration/usage/parse problems,
//! 3 for numerical failures (divergence, non-finite values).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use gazefusion::ablate;
use gazefusion::checkpoint;
use gazefusion::eval::{evaluate, roc_curve};
use gazefusion::features::FeatureConfig;
use gazefusion::gaze::{
    generate_cohort, parse_scanpaths, serialize_scanpaths, Cohort, CohortConfig, ParseConfig,
    SubjectModalities,
};
use gazefusion::model::{ForwardCtx, HybridModel, ModelConfig};
use gazefusion::train::{
    build_examples, select_examples, split_subjects, train, SplitConfig, TrainConfig,
};
use gazefusion::{Error, Result, StreamKey};

#[derive(Parser)]
#[command(name = "gazefusion", version, about = "Gaze scanpath classification pipeline")]
struct Cli {
    /// TOML configuration file; omitted sections use built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed for every random stream.
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,

    /// Output directory (created if missing).
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Print progress to stderr.
    #[arg(long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort (scanpaths.csv, modalities.json).
    Synth,
    /// Extract engineered gaze features from a cohort directory.
    Features {
        /// Cohort directory (defaults to --out).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train the hybrid classifier on a cohort directory.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Evaluate a trained checkpoint on the held-out test split.
    Eval {
        #[arg(long)]
        data: Option<PathBuf>,
        /// Checkpoint file (defaults to <out>/checkpoint.txt).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the fusion-strategy × feature ablation sweep.
    Ablate {
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

fn default_threshold() -> f64 {
    0.5
}

/// Full run configuration. Every section falls back to defaults, so an
/// empty (or absent) file is valid.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub cohort: CohortConfig,
    pub features: FeatureConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub split: SplitConfig,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
}

impl Default for AppConfig {
    fn default() -> Self {
        AppConfig {
            cohort: CohortConfig::default(),
            features: FeatureConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            split: SplitConfig::default(),
            threshold: default_threshold(),
        }
    }
}

/// What `eval` needs to rebuild the model; stored inline in the
/// checkpoint header.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrainedHyper {
    model: ModelConfig,
    features: FeatureConfig,
    split: SplitConfig,
    threshold: f64,
}

fn load_config(path: Option<&Path>) -> Result<AppConfig> {
    match path {
        None => Ok(AppConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p)?;
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
        }
    }
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Overflow { .. } | Error::NonFinite(_) => 3,
        _ => 2,
    }
}

pub fn run() -> i32 {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    let config = load_config(cli.config.as_deref())?;
    fs::create_dir_all(&cli.out)?;
    match &cli.command {
        Command::Synth => cmd_synth(cli, &config),
        Command::Features { data } => cmd_features(cli, &config, data.as_deref()),
        Command::Train { data } => cmd_train(cli, &config, data.as_deref()),
        Command::Eval { data, checkpoint } => {
            cmd_eval(cli, data.as_deref(), checkpoint.as_deref())
        }
        Command::Ablate { data } => cmd_ablate(cli, &config, data.as_deref()),
    }
}

fn log(cli: &Cli, msg: &str) {
    if cli.verbose {
        eprintln!("{msg}");
    }
}

fn data_dir<'a>(cli: &'a Cli, data: Option<&'a Path>) -> &'a Path {
    data.unwrap_or(&cli.out)
}

/// Read a cohort previously written by `synth`. Subject labels are
/// recovered from the scanpath rows.
fn load_cohort(dir: &Path) -> Result<Cohort> {
    let outcome = parse_scanpaths(&dir.join("scanpaths.csv"), &ParseConfig::default())?;
    let modalities: BTreeMap<String, SubjectModalities> =
        serde_json::from_str(&fs::read_to_string(dir.join("modalities.json"))?)?;
    let mut subjects: Vec<(String, u8)> = Vec::new();
    for p in &outcome.paths {
        if !subjects.iter().any(|(s, _)| *s == p.subject_id) {
            subjects.push((p.subject_id.clone(), p.label));
        }
    }
    Ok(Cohort {
        scanpaths: outcome.paths,
        modalities,
        subjects,
    })
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents)?;
    Ok(())
}

fn cmd_synth(cli: &Cli, config: &AppConfig) -> Result<()> {
    let key = StreamKey::root(cli.seed).child("cohort");
    let cohort = generate_cohort(&config.cohort, &key)?;
    write(&cli.out.join("scanpaths.csv"), &serialize_scanpaths(&cohort.scanpaths))?;
    write(
        &cli.out.join("modalities.json"),
        &serde_json::to_string_pretty(&cohort.modalities)?,
    )?;
    let manifest = serde_json::json!({
        "seed": cli.seed,
        "subjects": cohort.subjects.len(),
        "scanpaths": cohort.scanpaths.len(),
        "cohort": config.cohort,
    });
    write(&cli.out.join("manifest.json"), &serde_json::to_string_pretty(&manifest)?)?;
    log(
        cli,
        &format!(
            "wrote {} scanpaths for {} subjects to {}",
            cohort.scanpaths.len(),
            cohort.subjects.len(),
            cli.out.display()
        ),
    );
    Ok(())
}

fn cmd_features(cli: &Cli, config: &AppConfig, data: Option<&Path>) -> Result<()> {
    let cohort = load_cohort(data_dir(cli, data))?;
    let names = config.features.feature_names();
    let mut csv = String::from("subject_id,stimulus_id,label");
    for n in &names {
        csv.push(',');
        csv.push_str(n);
    }
    csv.push('\n');
    for path in &cohort.scanpaths {
        let vals = gazefusion::features::assemble_features(path, &config.features)?;
        csv.push_str(&format!("{},{},{}", path.subject_id, path.stimulus_id, path.label));
        for v in vals {
            csv.push_str(&format!(",{v}"));
        }
        csv.push('\n');
    }
    write(&cli.out.join("features.csv"), &csv)?;
    let layout = serde_json::json!({
        "names": names,
        "len": config.features.feature_len(),
        "config": config.features,
    });
    write(
        &cli.out.join("features_layout.json"),
        &serde_json::to_string_pretty(&layout)?,
    )?;
    log(cli, &format!("wrote {} feature rows", cohort.scanpaths.len()));
    Ok(())
}

fn cmd_train(cli: &Cli, config: &AppConfig, data: Option<&Path>) -> Result<()> {
    let cohort = load_cohort(data_dir(cli, data))?;
    let mut model_config = config.model.clone();
    model_config.feature_dim = config.features.feature_len();

    let examples = build_examples(&cohort, Some(&config.features))?;
    let key = StreamKey::root(cli.seed);
    let split = split_subjects(&cohort.subjects, &config.split, &key.child("split"))?;
    let train_set = select_examples(&examples, &split.train);
    let val_set = select_examples(&examples, &split.val);

    let model = HybridModel::init(model_config.clone(), &mut key.child("init").rng())?;
    log(
        cli,
        &format!(
            "training on {} examples ({} val) for up to {} epochs",
            train_set.len(),
            val_set.len(),
            config.train.epochs
        ),
    );
    let outcome = train(&model, &train_set, &val_set, &config.train, &key.child("train"))?;
    log(
        cli,
        &format!(
            "best epoch {} (val loss {:.6}), {} epochs run",
            outcome.best_epoch,
            outcome.best_val_loss,
            outcome.history.len()
        ),
    );

    let hyper = TrainedHyper {
        model: model_config,
        features: config.features,
        split: config.split,
        threshold: config.threshold,
    };
    checkpoint::save(
        &cli.out.join("checkpoint.txt"),
        cli.seed,
        &serde_json::to_string(&hyper)?,
        &model.params(),
    )?;

    let mut history = String::from("epoch,train_loss,val_loss,val_acc\n");
    for r in &outcome.history {
        history.push_str(&format!("{},{},{},{}\n", r.epoch, r.train_loss, r.val_loss, r.val_acc));
    }
    write(&cli.out.join("history.csv"), &history)?;
    write(&cli.out.join("split.json"), &serde_json::to_string_pretty(&split)?)?;
    let resolved = serde_json::json!({
        "seed": cli.seed,
        "config": {
            "cohort": config.cohort,
            "features": config.features,
            "model": hyper.model,
            "train": config.train,
            "split": config.split,
            "threshold": config.threshold,
        },
        "best_epoch": outcome.best_epoch,
        "epochs_run": outcome.history.len(),
        "stopped_early": outcome.stopped_early,
    });
    write(
        &cli.out.join("resolved_config.json"),
        &serde_json::to_string_pretty(&resolved)?,
    )?;
    Ok(())
}

fn cmd_eval(cli: &Cli, data: Option<&Path>, ckpt: Option<&Path>) -> Result<()> {
    let ckpt_path = ckpt
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cli.out.join("checkpoint.txt"));
    let header = checkpoint::read_header(&ckpt_path)?;
    let hyper: TrainedHyper = serde_json::from_str(&header.hyper_json)?;

    let cohort = load_cohort(data_dir(cli, data))?;
    let examples = build_examples(&cohort, Some(&hyper.features))?;
    // the split is keyed on the training seed so eval always sees the
    // same held-out subjects the checkpoint never trained on
    let key = StreamKey::root(header.seed);
    let split = split_subjects(&cohort.subjects, &hyper.split, &key.child("split"))?;
    let test_set: Vec<_> = select_examples(&examples, &split.test)
        .into_iter()
        .cloned()
        .collect();

    let model = HybridModel::init(hyper.model.clone(), &mut key.child("init").rng())?;
    checkpoint::load(&ckpt_path, &model.params())?;

    let (report, scores) = evaluate(&model, &test_set, hyper.threshold)?;
    write(&cli.out.join("report.json"), &serde_json::to_string_pretty(&report)?)?;

    let labels: Vec<u8> = test_set.iter().map(|e| e.label).collect();
    if let Ok(roc) = roc_curve(&scores, &labels) {
        let mut csv = String::from("fpr,tpr\n");
        for (fpr, tpr) in roc.points {
            csv.push_str(&format!("{fpr},{tpr}\n"));
        }
        write(&cli.out.join("roc.csv"), &csv)?;
    }

    let mut ctx = ForwardCtx::inference();
    let mut explanations = Vec::new();
    for ex in &test_set {
        let out = model.forward(ex, &mut ctx)?;
        explanations.push(serde_json::json!({
            "subject_id": ex.subject_id,
            "label": ex.label,
            "prob": out.prob.item(),
            "fusion_weights": out.explanation,
        }));
    }
    write(
        &cli.out.join("explanations.json"),
        &serde_json::to_string_pretty(&explanations)?,
    )?;
    log(
        cli,
        &format!(
            "test accuracy {:.4} over {} examples",
            report.metrics.accuracy, report.n
        ),
    );
    Ok(())
}

fn cmd_ablate(cli: &Cli, config: &AppConfig, data: Option<&Path>) -> Result<()> {
    let cohort = load_cohort(data_dir(cli, data))?;
    let mut model_config = config.model.clone();
    model_config.feature_dim = 0; // per-arm dimension is filled in by the sweep
    let report = ablate::run_ablation(
        &cohort,
        &model_config,
        &config.features,
        &config.train,
        &config.split,
        &StreamKey::root(cli.seed).child("ablate"),
    )?;
    write(&cli.out.join("ablation.csv"), &ablate::to_csv(&report))?;
    write(&cli.out.join("ablation.txt"), &ablate::to_text(&report))?;
    log(cli, &ablate::to_text(&report));
    Ok(())
}
