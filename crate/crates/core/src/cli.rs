//! The `tfbs-moe` command-line driver.
//!
//! Every command except `rerun` writes one JSON run manifest next to its
//! outputs. `rerun <manifest>` replays the recorded
//! arguments and checks that every output is reproduced byte for byte.
//!
//! Exit codes: 0 success, 1 runtime or data error, 2 usage or validation
//! error.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::attribution::{self, ExportFormat, Method, DEFAULT_SHIFT_RADIUS};
use crate::error::{Error, Result};
use crate::expert::{ExpertHyperparams, ExpertModel};
use crate::model::{LoadedModel, SequenceModel};
use crate::seqdata::{
    encode_sequence, generate_synthetic_dataset, load_dataset, split_dataset, SyntheticSpec,
};
use crate::stats::{self, AnovaSummary, EvaluationReport, ModelReport};
use crate::trainer::{
    self, MoESearchSpace, SearchSpace, TrainConfig, TrainHistory, EXPERT_PATIENCE, MOE_PATIENCE,
};
use crate::{sha256_hex, TOOL_VERSION};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const COMPARE_SCHEMA_VERSION: u32 = 1;

#[derive(Parser, Debug)]
#[command(
    name = "tfbs-moe",
    version,
    about = "Mixture-of-experts TF binding site classifier"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a motif-planted corpus split into train/val/test files.
    GenData(GenDataArgs),
    /// Train one expert (optionally by random hyperparameter search).
    TrainExpert(TrainExpertArgs),
    /// Train the gate and classifier over stripped experts.
    TrainMoe(TrainMoeArgs),
    /// Paired bootstrap AUC evaluation of one or more models.
    Evaluate(EvaluateArgs),
    /// One-way ANOVA over the bootstrap AUCs of an evaluation report.
    Compare(CompareArgs),
    /// Attribution maps for one sequence or a file of sequences.
    Explain(ExplainArgs),
    /// Replay a run manifest and verify its outputs are reproduced.
    Rerun(RerunArgs),
}

#[derive(Args, Debug, Clone, Default)]
pub struct CommonArgs {
    /// Run seed (default 0, with a warning).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads for parallel trials (default 1).
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Flat JSON config file; command-line flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Manifest path (default derived from the outputs).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long)]
    pub motif: Option<String>,
    /// Total examples, split evenly between the classes.
    #[arg(long)]
    pub n: Option<usize>,
    /// Sequence length.
    #[arg(long = "len")]
    pub length: Option<usize>,
    #[arg(long)]
    pub mutation_rate: Option<f64>,
    /// Also plant the reverse complement.
    #[arg(long)]
    pub include_reverse: bool,
    #[arg(long)]
    pub train_frac: Option<f64>,
    #[arg(long)]
    pub val_frac: Option<f64>,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// File name prefix for the split files.
    #[arg(long, default_value = "")]
    pub prefix: String,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Args, Debug, Clone, Default)]
pub struct LoopArgs {
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Random-search trials; 0 trains once with the given settings.
    #[arg(long)]
    pub search_budget: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainExpertArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub val: PathBuf,
    /// Output model file; `<stem>.stripped.json`, `<stem>.history.csv` and
    /// `<stem>.manifest.json` are written next to it.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long)]
    pub num_filters: Option<usize>,
    #[arg(long)]
    pub motif_width: Option<usize>,
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub hidden_dim: Option<usize>,
    #[command(flatten)]
    pub training: LoopArgs,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Args, Debug)]
pub struct TrainMoeArgs {
    /// Stripped expert files.
    #[arg(long, num_args = 1.., required = true)]
    pub experts: Vec<PathBuf>,
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub val: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub name: Option<String>,
    #[command(flatten)]
    pub training: LoopArgs,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long, num_args = 1.., required = true)]
    pub models: Vec<PathBuf>,
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub trials: Option<usize>,
    /// Also write `<model>.roc.csv` per model into this directory.
    #[arg(long)]
    pub roc_dir: Option<PathBuf>,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Args, Debug)]
pub struct CompareArgs {
    #[arg(long)]
    pub report: PathBuf,
    /// JSON output (default `<report stem>.anova.json`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatChoice {
    Tsv,
    Svg,
    Both,
}

#[derive(Args, Debug)]
pub struct ExplainArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, conflicts_with = "input", required_unless_present = "input")]
    pub sequence: Option<String>,
    /// One sequence per line (first tab-separated field; `#` comments).
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub method: Option<Method>,
    /// ShiftSmooth radius.
    #[arg(long = "N")]
    pub shift_radius: Option<usize>,
    #[arg(long, value_enum, default_value = "both")]
    pub format: FormatChoice,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long)]
    pub jobs: Option<usize>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct RerunArgs {
    pub manifest: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub tool_version: String,
    pub command: String,
    /// Arguments after the program name, exactly as given.
    pub args: Vec<String>,
    pub seed: Option<u64>,
    /// Every resolved setting.
    pub config: Map<String, Value>,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
    pub results: Map<String, Value>,
    pub warnings: Vec<String>,
}

/// Flat JSON config with usage tracking.
struct ConfigFile {
    values: Map<String, Value>,
    path: Option<PathBuf>,
}

impl ConfigFile {
    fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self {
                values: Map::new(),
                path: None,
            });
        };
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value: Value = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        match value {
            Value::Object(values) => {
                if let Some((k, _)) = values.iter().find(|(_, v)| v.is_object() || v.is_array()) {
                    return Err(Error::Config(format!(
                        "{}: key {k:?} is not a scalar; config files are flat",
                        path.display()
                    )));
                }
                Ok(Self {
                    values,
                    path: Some(path.to_path_buf()),
                })
            }
            _ => Err(Error::Config(format!(
                "{}: config must be a JSON object",
                path.display()
            ))),
        }
    }

    fn get<T: DeserializeOwned>(&self, key: &str) -> Result<Option<T>> {
        match self.values.get(key) {
            None => Ok(None),
            Some(v) => serde_json::from_value(v.clone())
                .map(Some)
                .map_err(|e| Error::Config(format!("config key {key:?}: {e}"))),
        }
    }
}

/// State shared by every command while it runs.
struct Run {
    command: &'static str,
    args: Vec<String>,
    config: ConfigFile,
    snapshot: Map<String, Value>,
    used_keys: Vec<String>,
    seed: Option<u64>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    results: Map<String, Value>,
    warnings: Vec<String>,
}

impl Run {
    fn new(command: &'static str, args: &[String], config: Option<&Path>) -> Result<Self> {
        let config_file = ConfigFile::load(config)?;
        let mut inputs = Vec::new();
        if let Some(p) = &config_file.path {
            inputs.push(p.clone());
        }
        Ok(Self {
            command,
            args: args.to_vec(),
            config: config_file,
            snapshot: Map::new(),
            used_keys: Vec::new(),
            seed: None,
            inputs,
            outputs: Vec::new(),
            results: Map::new(),
            warnings: Vec::new(),
        })
    }

    /// Flag, then config file, then default; the result is recorded.
    fn resolve<T>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T>
    where
        T: Serialize + DeserializeOwned,
    {
        let value = self.resolve_opt(key, flag)?.unwrap_or(default);
        self.snapshot.insert(key.to_string(), json!(value));
        Ok(value)
    }

    fn resolve_opt<T>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>>
    where
        T: Serialize + DeserializeOwned,
    {
        self.used_keys.push(key.to_string());
        let value = match flag {
            Some(v) => Some(v),
            None => self.config.get(key)?,
        };
        if let Some(v) = &value {
            self.snapshot.insert(key.to_string(), json!(v));
        }
        Ok(value)
    }

    fn resolve_seed(&mut self, flag: Option<u64>) -> Result<u64> {
        let seed = match self.resolve_opt("seed", flag)? {
            Some(s) => s,
            None => {
                self.warn("no --seed given; using seed 0".into());
                0
            }
        };
        self.snapshot.insert("seed".into(), json!(seed));
        self.seed = Some(seed);
        Ok(seed)
    }

    fn resolve_jobs(&mut self, flag: Option<usize>) -> Result<usize> {
        let jobs = self.resolve("jobs", flag, 1usize)?;
        if jobs == 0 {
            return Err(Error::Config("--jobs must be at least 1".into()));
        }
        Ok(jobs)
    }

    fn warn(&mut self, message: String) {
        eprintln!("warning: {message}");
        self.warnings.push(message);
    }

    fn input(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
    }

    fn write(&mut self, path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, contents).map_err(|e| Error::io(path, e))?;
        self.output(path);
        Ok(())
    }

    fn output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    fn result(&mut self, key: &str, value: Value) {
        self.results.insert(key.to_string(), value);
    }

    fn finish(mut self, manifest_path: &Path) -> Result<RunManifest> {
        let unused: Vec<String> = self
            .config
            .values
            .keys()
            .filter(|k| !self.used_keys.contains(k))
            .cloned()
            .collect();
        for k in unused {
            self.warn(format!(
                "config key {k:?} does not apply to {}",
                self.command
            ));
        }
        let manifest = RunManifest {
            schema_version: MANIFEST_SCHEMA_VERSION,
            tool_version: TOOL_VERSION.to_string(),
            command: self.command.to_string(),
            args: self.args,
            seed: self.seed,
            config: self.snapshot,
            inputs: hash_all(&self.inputs)?,
            outputs: hash_all(&self.outputs)?,
            results: self.results,
            warnings: self.warnings,
        };
        write_json(manifest_path, &manifest)?;
        Ok(manifest)
    }
}

fn hash_all(paths: &[PathBuf]) -> Result<Vec<Artifact>> {
    paths
        .iter()
        .map(|p| {
            let bytes = fs::read(p).map_err(|e| Error::io(p, e))?;
            Ok(Artifact {
                path: p.to_string_lossy().into_owned(),
                sha256: sha256_hex(&bytes),
            })
        })
        .collect()
}

fn to_json_text<T: Serialize>(value: &T) -> String {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    text
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, to_json_text(value)).map_err(|e| Error::io(path, e))
}

/// `dir/stem.json` -> `dir/stem<suffix>`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "model".into())
}

fn loop_config(run: &mut Run, a: &LoopArgs, seed: u64, patience: usize) -> Result<TrainConfig> {
    let config = TrainConfig {
        learning_rate: run.resolve(
            "learning_rate",
            a.learning_rate,
            trainer::DEFAULT_LEARNING_RATE,
        )?,
        momentum: run.resolve("momentum", a.momentum, trainer::DEFAULT_MOMENTUM)?,
        max_epochs: run.resolve("max_epochs", a.max_epochs, trainer::DEFAULT_MAX_EPOCHS)?,
        patience: run.resolve("patience", a.patience, patience)?,
        batch_size: run.resolve("batch_size", a.batch_size, trainer::DEFAULT_BATCH_SIZE)?,
        seed,
    };
    config.validate()?;
    Ok(config)
}

fn history_json(h: &TrainHistory) -> Value {
    json!({
        "best_epoch": h.best_epoch,
        "best_val_auc": h.best_val_auc,
        "epochs_run": h.epochs.len(),
        "stop_reason": h.stop_reason,
    })
}

fn cmd_gen_data(a: &GenDataArgs, argv: &[String]) -> Result<()> {
    let mut run = Run::new("gen-data", argv, a.common.config.as_deref())?;
    let seed = run.resolve_seed(a.common.seed)?;
    let motif: String = run
        .resolve_opt("motif", a.motif.clone())?
        .ok_or_else(|| Error::Config("--motif is required".into()))?;
    let n = run.resolve("n", a.n, 2000usize)?;
    let length = run.resolve("len", a.length, 100usize)?;
    let mutation_rate = run.resolve("mutation_rate", a.mutation_rate, 0.1)?;
    let include_reverse =
        run.resolve("include_reverse", a.include_reverse.then_some(true), false)?;
    let train_frac = run.resolve("train_frac", a.train_frac, 0.7)?;
    let val_frac = run.resolve("val_frac", a.val_frac, 0.15)?;
    let spec = SyntheticSpec {
        motif: motif.to_ascii_uppercase(),
        include_reverse,
        length,
        n_positive: n / 2,
        n_negative: n - n / 2,
        mutation_rate,
    };
    let data = generate_synthetic_dataset(&spec, seed)?;
    let (train, val, test) = split_dataset(&data, train_frac, val_frac, seed)?;
    for (split, d) in [("train", &train), ("val", &val), ("test", &test)] {
        let path = a.out_dir.join(format!("{}{split}.tsv", a.prefix));
        run.write(&path, d.to_tsv())?;
        run.result(&format!("{split}_examples"), json!(d.len()));
        println!("wrote {} ({} examples)", path.display(), d.len());
    }
    run.result("planted_patterns", json!(spec.planted_patterns()));
    let manifest = a.common.manifest.clone().unwrap_or_else(|| {
        a.out_dir
            .join(format!("{}gen-data.manifest.json", a.prefix))
    });
    run.finish(&manifest)?;
    Ok(())
}

fn cmd_train_expert(a: &TrainExpertArgs, argv: &[String]) -> Result<()> {
    let mut run = Run::new("train-expert", argv, a.common.config.as_deref())?;
    let seed = run.resolve_seed(a.common.seed)?;
    let jobs = run.resolve_jobs(a.common.jobs)?;
    let defaults = ExpertHyperparams::default();
    let config = loop_config(&mut run, &a.training, seed, EXPERT_PATIENCE)?;
    let hp = ExpertHyperparams {
        num_filters: run.resolve("num_filters", a.num_filters, defaults.num_filters)?,
        motif_width: run.resolve("motif_width", a.motif_width, defaults.motif_width)?,
        embed_dim: run.resolve("embed_dim", a.embed_dim, defaults.embed_dim)?,
        hidden_dim: run.resolve("hidden_dim", a.hidden_dim, defaults.hidden_dim)?,
        learning_rate: config.learning_rate,
        momentum: config.momentum,
    };
    hp.validate()?;
    for note in hp.non_default_notes() {
        run.warn(note);
    }
    let budget = run.resolve("search_budget", a.training.search_budget, 0usize)?;
    let name = run.resolve("name", a.name.clone(), file_stem(&a.out))?;

    run.input(&a.train);
    run.input(&a.val);
    let train = load_dataset(&a.train)?;
    let val = load_dataset(&a.val)?;

    let (model, history) = if budget > 0 {
        let space = SearchSpace {
            budget,
            ..SearchSpace::default()
        };
        run.snapshot.insert("search_space".into(), json!(space));
        let outcome =
            trainer::hyperparameter_search(&space, &hp, &train, &val, &config, &name, jobs)?;
        let board = sibling(&a.out, ".leaderboard.json");
        run.write(&board, to_json_text(&outcome.leaderboard))?;
        run.result("best_trial", json!(outcome.best_trial));
        run.result(
            "best_trial_seed",
            json!(outcome.leaderboard[outcome.best_trial].seed),
        );
        (outcome.model, outcome.history)
    } else {
        trainer::train_expert(&train, &val, &hp, &config, &name)?
    };
    run.result("hyperparams", json!(model.hyperparams));
    run.result("history", history_json(&history));

    run.write(&a.out, model.to_json())?;
    let stripped = sibling(&a.out, ".stripped.json");
    run.write(&stripped, model.strip_head()?.to_json())?;
    run.write(&sibling(&a.out, ".history.csv"), history.to_csv())?;
    println!(
        "{name}: best validation AUC {:.6} at epoch {} ({} epochs)",
        history.best_val_auc,
        history.best_epoch,
        history.epochs.len()
    );
    let manifest = a
        .common
        .manifest
        .clone()
        .unwrap_or_else(|| sibling(&a.out, ".manifest.json"));
    run.finish(&manifest)?;
    Ok(())
}

/// Path of `target` as stored in a document living in `base_dir`.
fn reference_path(target: &Path, base_dir: &Path) -> Result<PathBuf> {
    let t = fs::canonicalize(target).map_err(|e| Error::io(target, e))?;
    let b = fs::canonicalize(base_dir).map_err(|e| Error::io(base_dir, e))?;
    Ok(match t.strip_prefix(&b) {
        Ok(rel) => rel.to_path_buf(),
        Err(_) => t,
    })
}

fn cmd_train_moe(a: &TrainMoeArgs, argv: &[String]) -> Result<()> {
    let mut run = Run::new("train-moe", argv, a.common.config.as_deref())?;
    let seed = run.resolve_seed(a.common.seed)?;
    let jobs = run.resolve_jobs(a.common.jobs)?;
    let config = loop_config(&mut run, &a.training, seed, MOE_PATIENCE)?;
    let budget = run.resolve("search_budget", a.training.search_budget, 0usize)?;
    let name = run.resolve("name", a.name.clone(), file_stem(&a.out))?;

    let experts = a
        .experts
        .iter()
        .map(|p| {
            run.input(p);
            ExpertModel::load(p)
        })
        .collect::<Result<Vec<_>>>()?;
    if let Some(e) = experts.iter().find(|e| e.has_head()) {
        return Err(Error::Model(format!(
            "expert {} still has its prediction head; pass the stripped file",
            e.name
        )));
    }
    run.input(&a.train);
    run.input(&a.val);
    let train = load_dataset(&a.train)?;
    let val = load_dataset(&a.val)?;

    let (model, history) = if budget > 0 {
        let space = MoESearchSpace {
            budget,
            ..MoESearchSpace::default()
        };
        run.snapshot.insert("search_space".into(), json!(space));
        let outcome = trainer::moe_search(&space, &experts, &train, &val, &config, &name, jobs)?;
        let board = sibling(&a.out, ".leaderboard.json");
        run.write(&board, to_json_text(&outcome.leaderboard))?;
        let best = &outcome.leaderboard[outcome.best_trial];
        run.result("best_trial", json!(outcome.best_trial));
        run.result("optimizer", json!(best.hyperparams));
        run.result("best_trial_seed", json!(best.seed));
        (outcome.model, outcome.history)
    } else {
        trainer::train_moe(experts, &train, &val, &config, &name)?
    };
    run.result("history", history_json(&history));

    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let base = a
        .out
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or_else(|| Path::new("."));
    let refs = a
        .experts
        .iter()
        .map(|p| reference_path(p, base))
        .collect::<Result<Vec<_>>>()?;
    model.save(&a.out, &refs)?;
    run.output(&a.out);
    run.write(&sibling(&a.out, ".history.csv"), history.to_csv())?;
    println!(
        "{name}: best validation AUC {:.6} at epoch {} ({} epochs)",
        history.best_val_auc,
        history.best_epoch,
        history.epochs.len()
    );
    let manifest = a
        .common
        .manifest
        .clone()
        .unwrap_or_else(|| sibling(&a.out, ".manifest.json"));
    run.finish(&manifest)?;
    Ok(())
}

fn cmd_evaluate(a: &EvaluateArgs, argv: &[String]) -> Result<()> {
    let mut run = Run::new("evaluate", argv, a.common.config.as_deref())?;
    let seed = run.resolve_seed(a.common.seed)?;
    let jobs = run.resolve_jobs(a.common.jobs)?;
    let trials = run.resolve("trials", a.trials, stats::DEFAULT_BOOTSTRAP_TRIALS)?;
    if trials < 2 {
        return Err(Error::Config(format!(
            "--trials must be at least 2, got {trials}"
        )));
    }
    let models = a
        .models
        .iter()
        .map(|p| {
            run.input(p);
            LoadedModel::load(p)
        })
        .collect::<Result<Vec<_>>>()?;
    run.input(&a.test);
    let test = load_dataset(&a.test)?;
    if !test.has_both_classes() {
        return Err(Error::Dataset(format!(
            "{}: test set needs both classes",
            a.test.display()
        )));
    }

    let dyn_models: Vec<&dyn SequenceModel> = models.iter().map(|m| m.as_dyn()).collect();
    let scores = dyn_models
        .iter()
        .map(|m| Ok((m.model_id().to_string(), m.score_all(test.sequences())?)))
        .collect::<Result<Vec<_>>>()?;
    let boot = stats::bootstrap_auc_from_scores(&scores, test.labels(), trials, seed, jobs)?;

    if let Some(dir) = &a.roc_dir {
        for (i, (name, s)) in scores.iter().enumerate() {
            let (curve, _) = stats::roc_auc(s, test.labels())?;
            let path = dir.join(format!("{i}_{}.roc.csv", sanitize(name)));
            run.write(&path, curve.to_csv())?;
        }
    }

    let mut reports = Vec::new();
    for ((path, b), (_, s)) in a.models.iter().zip(&boot).zip(&scores) {
        let (lo, hi) = stats::t_interval(&b.aucs);
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        reports.push(ModelReport {
            name: b.model.clone(),
            path: path.to_string_lossy().into_owned(),
            sha256: sha256_hex(&bytes),
            aucs: b.aucs.clone(),
            mean: b.mean,
            std: b.std,
            ci95: [lo, hi],
        });
        let full = stats::auc(s, test.labels())?;
        println!(
            "{}: test AUC {full:.6}; bootstrap mean {:.6} (std {:.6}, 95% CI [{lo:.6}, {hi:.6}])",
            b.model, b.mean, b.std
        );
    }
    let anova = if boot.len() >= 2 {
        let groups: Vec<Vec<f64>> = boot.iter().map(|b| b.aucs.clone()).collect();
        let names: Vec<String> = boot.iter().map(|b| b.model.clone()).collect();
        Some(AnovaSummary::from_result(
            &stats::one_way_anova(&groups)?,
            &names,
        ))
    } else {
        None
    };
    let test_bytes = fs::read(&a.test).map_err(|e| Error::io(&a.test, e))?;
    let report = EvaluationReport {
        schema_version: stats::REPORT_SCHEMA_VERSION,
        testset: a.test.to_string_lossy().into_owned(),
        testset_sha256: sha256_hex(&test_bytes),
        trials,
        seed,
        ci_method: stats::CI_METHOD.to_string(),
        models: reports,
        anova,
    };
    run.write(&a.out, to_json_text(&report))?;
    let manifest = a
        .common
        .manifest
        .clone()
        .unwrap_or_else(|| sibling(&a.out, ".manifest.json"));
    run.finish(&manifest)?;
    Ok(())
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || "_.-".contains(c) {
                c
            } else {
                '_'
            }
        })
        .collect()
}

#[derive(Debug, Deserialize)]
struct ReportGroups {
    models: Vec<ReportGroup>,
}

#[derive(Debug, Deserialize)]
struct ReportGroup {
    name: String,
    aucs: Vec<f64>,
}

#[derive(Debug, Serialize)]
struct CompareDocument {
    schema_version: u32,
    report: String,
    significance_level: f64,
    anova: AnovaSummary,
}

fn format_anova(a: &AnovaSummary) -> String {
    let mut out = String::new();
    let f = a.f_statistic.map_or("inf".to_string(), |f| format!("{f}"));
    out.push_str(&format!(
        "one-way ANOVA over {} groups\nF = {f}  df = ({}, {})  p = {}\n",
        a.groups.len(),
        a.df_between,
        a.df_within,
        a.p_value
    ));
    out.push_str(if a.significant {
        "significant at p < 0.05\n"
    } else {
        "not significant at p < 0.05\n"
    });
    out.push_str("model\tn\tmean\tstd\tci95_low\tci95_high\n");
    for g in &a.groups {
        let s = &g.summary;
        out.push_str(&format!(
            "{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\n",
            g.name, s.n, s.mean, s.std, s.ci_low, s.ci_high
        ));
    }
    out
}

fn cmd_compare(a: &CompareArgs, argv: &[String]) -> Result<()> {
    let mut run = Run::new("compare", argv, None)?;
    run.input(&a.report);
    let text = fs::read_to_string(&a.report).map_err(|e| Error::io(&a.report, e))?;
    let report: ReportGroups =
        serde_json::from_str(&text).map_err(|e| Error::json(&a.report, e))?;
    if report.models.len() < 2 {
        return Err(Error::Stats(format!(
            "{}: comparison needs at least 2 model groups, found {}",
            a.report.display(),
            report.models.len()
        )));
    }
    let groups: Vec<Vec<f64>> = report.models.iter().map(|m| m.aucs.clone()).collect();
    let names: Vec<String> = report.models.iter().map(|m| m.name.clone()).collect();
    let result = stats::one_way_anova(&groups)?;
    let summary = AnovaSummary::from_result(&result, &names);
    print!("{}", format_anova(&summary));
    if let Some(d) = summary.degenerate {
        run.warn(format!(
            "degenerate ANOVA: zero within-group variance ({})",
            serde_json::to_value(d)
                .expect("serializable")
                .as_str()
                .unwrap_or("")
        ));
    }
    run.result("f_statistic", json!(summary.f_statistic));
    run.result("p_value", json!(summary.p_value));
    run.result("significant", json!(summary.significant));
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| sibling(&a.report, ".anova.json"));
    let doc = CompareDocument {
        schema_version: COMPARE_SCHEMA_VERSION,
        report: a.report.to_string_lossy().into_owned(),
        significance_level: stats::SIGNIFICANCE_LEVEL,
        anova: summary,
    };
    run.write(&out, to_json_text(&doc))?;
    let manifest = a
        .manifest
        .clone()
        .unwrap_or_else(|| sibling(&out, ".manifest.json"));
    run.finish(&manifest)?;
    Ok(())
}

fn read_sequences(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let seqs: Vec<String> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| l.split('\t').next().unwrap_or("").to_ascii_uppercase())
        .collect();
    if seqs.is_empty() {
        return Err(Error::Dataset(format!("{}: no sequences", path.display())));
    }
    Ok(seqs)
}

fn cmd_explain(a: &ExplainArgs, argv: &[String]) -> Result<()> {
    let mut run = Run::new("explain", argv, a.config.as_deref())?;
    let jobs = run.resolve_jobs(a.jobs)?;
    let method = run.resolve("method", a.method, Method::ShiftSmooth)?;
    let radius = run.resolve("N", a.shift_radius, DEFAULT_SHIFT_RADIUS)?;
    let texts = match (&a.sequence, &a.input) {
        (Some(s), _) => vec![s.to_ascii_uppercase()],
        (None, Some(p)) => {
            run.input(p);
            read_sequences(p)?
        }
        (None, None) => return Err(Error::Config("give --sequence or --input".into())),
    };
    let seqs = texts
        .iter()
        .map(|t| encode_sequence(t))
        .collect::<Result<Vec<_>>>()?;
    run.input(&a.model);
    let model = LoadedModel::load(&a.model)?;
    let formats: &[ExportFormat] = match a.format {
        FormatChoice::Tsv => &[ExportFormat::Tsv],
        FormatChoice::Svg => &[ExportFormat::Svg],
        FormatChoice::Both => &[ExportFormat::Tsv, ExportFormat::Svg],
    };
    fs::create_dir_all(&a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;
    let mut first_stem = None;
    let mut scores = Vec::new();
    for (i, (seq, text)) in seqs.iter().zip(&texts).enumerate() {
        let map = attribution::explain(model.as_dyn(), seq, method, radius, jobs)?;
        let stem = if seqs.len() == 1 {
            map.artifact_stem()
        } else {
            format!("{}_{i}", map.artifact_stem())
        };
        first_stem.get_or_insert_with(|| map.artifact_stem());
        for &f in formats {
            let path = a.out_dir.join(format!("{stem}.{}", f.extension()));
            attribution::export_attribution(&map, text, &path, f)?;
            run.output(&path);
        }
        let y = crate::nn::sigmoid(map.class_score);
        println!("sequence {i}: y_hat = {y:.6}, S_c = {:.6}", map.class_score);
        scores.push(json!({"y_hat": y, "class_score": map.class_score}));
    }
    run.result("scores", Value::Array(scores));
    let manifest = a.manifest.clone().unwrap_or_else(|| {
        a.out_dir.join(format!(
            "{}.manifest.json",
            first_stem.expect("at least one sequence")
        ))
    });
    run.finish(&manifest)?;
    Ok(())
}

fn cmd_rerun(a: &RerunArgs) -> Result<()> {
    let text = fs::read_to_string(&a.manifest).map_err(|e| Error::io(&a.manifest, e))?;
    let old: RunManifest = serde_json::from_str(&text).map_err(|e| Error::json(&a.manifest, e))?;
    if old.schema_version != MANIFEST_SCHEMA_VERSION {
        return Err(Error::Config(format!(
            "unsupported manifest schema version {}",
            old.schema_version
        )));
    }
    if old.args.first().map(String::as_str) == Some("rerun") {
        return Err(Error::Config("a manifest cannot replay rerun".into()));
    }
    let mut argv = vec!["tfbs-moe".to_string()];
    argv.extend(old.args.iter().cloned());
    let cli = Cli::try_parse_from(&argv).map_err(|e| Error::Config(e.to_string()))?;
    dispatch(&cli.command, &old.args)?;

    let now = hash_all(
        &old.outputs
            .iter()
            .map(|o| PathBuf::from(&o.path))
            .collect::<Vec<_>>(),
    )?;
    let mismatched: Vec<&str> = old
        .outputs
        .iter()
        .zip(&now)
        .filter(|(a, b)| a.sha256 != b.sha256)
        .map(|(a, _)| a.path.as_str())
        .collect();
    if !mismatched.is_empty() {
        return Err(Error::Reproducibility(mismatched.join(", ")));
    }
    println!("reproduced {} artifacts", now.len());
    Ok(())
}

fn dispatch(command: &Command, args: &[String]) -> Result<()> {
    match command {
        Command::GenData(a) => cmd_gen_data(a, args),
        Command::TrainExpert(a) => cmd_train_expert(a, args),
        Command::TrainMoe(a) => cmd_train_moe(a, args),
        Command::Evaluate(a) => cmd_evaluate(a, args),
        Command::Compare(a) => cmd_compare(a, args),
        Command::Explain(a) => cmd_explain(a, args),
        Command::Rerun(a) => cmd_rerun(a),
    }
}

/// Maps an error to its exit code.
pub fn exit_code(err: &Error) -> i32 {
    if err.is_validation() {
        2
    } else {
        1
    }
}

/// Runs the CLI on `argv` (including the program name) and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<String>,
{
    let argv: Vec<String> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(&cli.command, argv.get(1..).unwrap_or_default()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn main() -> i32 {
    run(std::env::args())
}
