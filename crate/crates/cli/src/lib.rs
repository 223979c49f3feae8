//! Command implementations behind the `pmemn2n` binary.

pub mod chat;

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use pmemn2n::checkpoint::{Checkpoint, Fingerprints};
use pmemn2n::data::synth::{generate, GeneratorConfig};
use pmemn2n::data::{Corpus, Dataset, DatasetOptions, GlobalSource, Split};
use pmemn2n::encoding::DEFAULT_TIME_FEATURES;
use pmemn2n::eval::{
    ablation_grid, candidate_groups, global_memory_control, preference_scores, tendency_confusion,
    write_preference_csv, Manifest, Variant,
};
use pmemn2n::kb::MentionRule;
use pmemn2n::model::{Component, ModelConfig, ModelParameters};
use pmemn2n::training::{accuracy, predictions, resume, TrainConfig, TrainState, TrainingData};

/// A usage or input problem; exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// 2 for bad input (usage, data, fingerprints, missing files), 1 otherwise.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some()
            || cause.downcast_ref::<toml::de::Error>().is_some()
        {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<pmemn2n::Error>() {
            return match e {
                pmemn2n::Error::NonFinite { .. } => 1,
                pmemn2n::Error::Io(io) if io.kind() != std::io::ErrorKind::NotFound => 1,
                _ => 2,
            };
        }
        if let Some(io) = cause.downcast_ref::<std::io::Error>() {
            return if io.kind() == std::io::ErrorKind::NotFound {
                2
            } else {
                1
            };
        }
    }
    1
}

#[derive(Parser, Debug)]
#[command(
    name = "pmemn2n",
    version,
    about = "Personalized memory network for retrieval dialog"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic corpus described by a TOML config
    GenerateData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write a checkpoint plus a per-epoch CSV report
    Train(TrainArgs),
    /// Per-response accuracy of a checkpoint on one split
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// also report accuracy per task id
        #[arg(long)]
        per_task: bool,
        /// JSON report path
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Tendency matrix, preference scores, global-memory control or ablation grid
    Analyze {
        which: Analysis,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// output file (CSV); a manifest JSON is written next to it
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Interactive session: one user utterance per line, `:reset`,
    /// `:profile key=value`, EOF to quit
    Chat {
        #[arg(long)]
        checkpoint: PathBuf,
        /// profile attributes, `key=value` (repeatable or comma separated)
        #[arg(long = "profile", value_delimiter = ',')]
        profile: Vec<String>,
        /// corpus directory whose training dialogs feed the global memory
        #[arg(long)]
        data: Option<PathBuf>,
        /// print the top 5 candidates, attention peaks and bias terms
        #[arg(long)]
        debug: bool,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Analysis {
    Tendency,
    Preference,
    GlobalControl,
    Ablation,
}

/// Training flags. Unset flags fall back to `--config`, then to defaults.
#[derive(Args, Debug, Default)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// checkpoint to write
    #[arg(long)]
    pub out: PathBuf,
    /// CSV report (default: checkpoint path with `.csv`)
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// TOML file with defaults for the flags below
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// continue from this checkpoint
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// [default: 3]
    #[arg(long)]
    pub hops: Option<usize>,
    /// embedding dimension [default: 128]
    #[arg(long)]
    pub dim: Option<usize>,
    /// [default: 0.001]
    #[arg(long)]
    pub learning_rate: Option<f64>,
    /// [default: 0.9]
    #[arg(long)]
    pub momentum: Option<f64>,
    /// [default: 10]
    #[arg(long)]
    pub clip_threshold: Option<f64>,
    /// [default: 64]
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// [default: 100]
    #[arg(long)]
    pub max_epochs: Option<usize>,
    /// [default: 10]
    #[arg(long)]
    pub patience: Option<usize>,
    /// [default: 0]
    #[arg(long)]
    pub seed: Option<u64>,
    /// [default: 250]
    #[arg(long)]
    pub context_cap: Option<usize>,
    /// [default: 1000]
    #[arg(long)]
    pub global_cap: Option<usize>,
    /// [default: 1000]
    #[arg(long)]
    pub time_features: Option<usize>,
    /// components to switch off: profile, global, preference
    #[arg(long, value_delimiter = ',')]
    pub disable: Vec<String>,
    /// give the profile to the model as the first user utterance
    #[arg(long)]
    pub profile_as_utterance: bool,
    /// similar or random [default: similar]
    #[arg(long)]
    pub global_source: Option<String>,
    /// redraw training global memories every epoch
    #[arg(long)]
    pub resample_global: bool,
    /// count any entity of an item as a mention of it
    #[arg(long)]
    pub mention_any_entity: bool,
}

/// Keys accepted in a training config file; names match the flags.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
struct TrainFile {
    hops: Option<usize>,
    dim: Option<usize>,
    learning_rate: Option<f64>,
    momentum: Option<f64>,
    clip_threshold: Option<f64>,
    batch_size: Option<usize>,
    max_epochs: Option<usize>,
    patience: Option<usize>,
    seed: Option<u64>,
    context_cap: Option<usize>,
    global_cap: Option<usize>,
    time_features: Option<usize>,
    disable: Option<Vec<String>>,
    profile_as_utterance: Option<bool>,
    global_source: Option<String>,
    resample_global: Option<bool>,
    mention_any_entity: Option<bool>,
}

/// Fully resolved training settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub dataset: DatasetOptions,
    pub time_features: usize,
}

impl TrainArgs {
    pub fn resolve(&self) -> anyhow::Result<TrainSettings> {
        let file: TrainFile = match &self.config {
            Some(p) => {
                let text =
                    fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
            }
            None => TrainFile::default(),
        };
        let mut model = ModelConfig::default();
        let mut train = TrainConfig::default();
        let mut dataset = DatasetOptions::default();

        model.hops = self.hops.or(file.hops).unwrap_or(model.hops);
        model.embedding_dim = self.dim.or(file.dim).unwrap_or(model.embedding_dim);
        model.context_cap = self
            .context_cap
            .or(file.context_cap)
            .unwrap_or(model.context_cap);
        model.global_cap = self
            .global_cap
            .or(file.global_cap)
            .unwrap_or(model.global_cap);
        let disable = if self.disable.is_empty() {
            file.disable.unwrap_or_default()
        } else {
            self.disable.clone()
        };
        for name in disable.iter().filter(|s| !s.trim().is_empty()) {
            let c: Component = name
                .parse()
                .map_err(|e: pmemn2n::Error| usage(e.to_string()))?;
            model = model.disable(c);
        }

        train.learning_rate = self
            .learning_rate
            .or(file.learning_rate)
            .unwrap_or(train.learning_rate);
        train.momentum = self.momentum.or(file.momentum).unwrap_or(train.momentum);
        train.clip_threshold = self
            .clip_threshold
            .or(file.clip_threshold)
            .unwrap_or(train.clip_threshold);
        train.batch_size = self
            .batch_size
            .or(file.batch_size)
            .unwrap_or(train.batch_size);
        train.max_epochs = self
            .max_epochs
            .or(file.max_epochs)
            .unwrap_or(train.max_epochs);
        train.patience = self.patience.or(file.patience).unwrap_or(train.patience);
        train.seed = self.seed.or(file.seed).unwrap_or(train.seed);
        train.resample_global = self.resample_global || file.resample_global.unwrap_or(false);

        dataset.expand.context_cap = model.context_cap;
        dataset.global_cap = model.global_cap;
        dataset.seed = train.seed;
        dataset.expand.profile_as_utterance =
            self.profile_as_utterance || file.profile_as_utterance.unwrap_or(false);
        if self.mention_any_entity || file.mention_any_entity.unwrap_or(false) {
            dataset.expand.mention_rule = MentionRule::AnyEntityOfItem;
        }
        let source = match self.global_source.clone().or(file.global_source) {
            Some(s) => s
                .parse::<GlobalSource>()
                .map_err(|e| usage(e.to_string()))?,
            None => GlobalSource::Similar,
        };
        dataset.global_source = model.use_global_memory.then_some(source);

        model.validate().map_err(|e| usage(e.to_string()))?;
        train.validate().map_err(|e| usage(e.to_string()))?;
        Ok(TrainSettings {
            model,
            train,
            dataset,
            time_features: self
                .time_features
                .or(file.time_features)
                .unwrap_or(DEFAULT_TIME_FEATURES),
        })
    }
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenerateData { config, out } => generate_data(&config, &out),
        Command::Train(args) => train_command(&args),
        Command::Eval {
            checkpoint,
            data,
            split,
            per_task,
            report,
        } => eval_command(&checkpoint, &data, &split, per_task, report.as_deref()),
        Command::Analyze {
            which,
            checkpoint,
            data,
            out,
        } => analyze_command(which, &checkpoint, &data, out.as_deref()),
        Command::Chat {
            checkpoint,
            profile,
            data,
            debug,
        } => chat::run_chat(&checkpoint, &profile, data.as_deref(), debug),
    }
}

fn load_corpus(dir: &Path) -> anyhow::Result<Corpus> {
    if !dir.is_dir() {
        return Err(usage(format!(
            "corpus directory {} does not exist",
            dir.display()
        )));
    }
    Corpus::load_dir(dir).with_context(|| format!("loading corpus {}", dir.display()))
}

fn load_checkpoint(path: &Path) -> anyhow::Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

pub fn generate_data(config: &Path, out: &Path) -> anyhow::Result<()> {
    let text =
        fs::read_to_string(config).with_context(|| format!("reading {}", config.display()))?;
    let cfg = GeneratorConfig::from_toml(&text)?;
    eprintln!("generate-data seed={} tasks={:?}", cfg.seed, cfg.tasks);
    let corpus = generate(&cfg)?;
    corpus.save_dir(out)?;
    fs::write(out.join("generator.toml"), cfg.to_toml())?;
    println!(
        "wrote {} train / {} dev / {} test dialogs and {} candidates to {}",
        corpus.train.len(),
        corpus.dev.len(),
        corpus.test.len(),
        corpus.candidates.len(),
        out.display()
    );
    Ok(())
}

pub fn train_command(args: &TrainArgs) -> anyhow::Result<()> {
    let corpus = load_corpus(&args.data)?;
    let report_path = args
        .report
        .clone()
        .unwrap_or_else(|| args.out.with_extension("csv"));

    let (settings, vocab, state) = match &args.resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            ckpt.check_corpus(&corpus)?;
            let state = ckpt
                .state
                .clone()
                .ok_or_else(|| usage("checkpoint carries no training state to resume"))?;
            let mut settings = TrainSettings {
                model: ckpt.model_config.clone(),
                train: ckpt.train_config.clone(),
                dataset: ckpt.dataset_options.clone(),
                time_features: ckpt.vocab.time_feature_count(),
            };
            if let Some(n) = args.max_epochs {
                settings.train.max_epochs = n;
            }
            if let Some(n) = args.patience {
                settings.train.patience = n;
            }
            (settings, ckpt.vocab, state)
        }
        None => {
            let settings = args.resolve()?;
            let vocab = corpus.build_vocabulary(settings.time_features)?;
            let dims = pmemn2n::model::ModelDims {
                feature_dim: vocab.dim(),
                profile_dim: corpus.schema.dim(),
                kb_columns: corpus.kb.column_count(),
            };
            let params =
                ModelParameters::init(dims, settings.model.embedding_dim, settings.train.seed)?;
            let state = TrainState::new(params, settings.train.patience);
            (settings, vocab, state)
        }
    };
    eprintln!(
        "train seed={} model={} train={}",
        settings.train.seed,
        serde_json::to_string(&settings.model)?,
        serde_json::to_string(&settings.train)?
    );

    let dataset = Dataset::build(&corpus, vocab, settings.dataset.clone())?;
    state.params.check_dims(dataset.dims())?;
    let resample = settings
        .train
        .resample_global
        .then(|| pmemn2n::training::GlobalResample {
            pool: &dataset.pool,
            cap: settings.dataset.global_cap,
            source: settings.dataset.global_source.unwrap_or_default(),
            seed: settings.dataset.seed,
        });
    let data = TrainingData {
        train: &dataset.train,
        dev: &dataset.dev,
        candidates: &dataset.candidates,
        global_table: dataset.global_table(),
        resample,
    };
    let make_checkpoint = |state: &TrainState| {
        Checkpoint::new(
            settings.model.clone(),
            settings.train.clone(),
            settings.dataset.clone(),
            state.best_params.clone(),
            Some(state.clone()),
            dataset.vocab.clone(),
            dataset.schema.clone(),
            dataset.kb.clone(),
            dataset.candidates.texts().to_vec(),
        )
    };
    let (state, report) = resume(state, &settings.model, &settings.train, &data, |s| {
        make_checkpoint(s)?.save(&args.out)
    })?;
    make_checkpoint(&state)?.save(&args.out)?;
    report.write_csv(fs::File::create(&report_path)?)?;
    println!(
        "best dev accuracy {:.2} at epoch {} ({} epochs, stopped by {:?}); checkpoint {}",
        report.best_dev_accuracy * 100.0,
        report.best_epoch,
        report.history.len(),
        report.stop_reason,
        args.out.display()
    );
    Ok(())
}

/// Dataset for evaluating a checkpoint on a corpus.
fn dataset_for(ckpt: &Checkpoint, corpus: &Corpus) -> anyhow::Result<Dataset> {
    ckpt.check_corpus(corpus)?;
    let ds = Dataset::build(corpus, ckpt.vocab.clone(), ckpt.dataset_options.clone())?;
    ckpt.params.check_dims(ds.dims())?;
    Ok(ds)
}

pub fn eval_command(
    checkpoint: &Path,
    data: &Path,
    split: &str,
    per_task: bool,
    report: Option<&Path>,
) -> anyhow::Result<()> {
    let split: Split = split
        .parse()
        .map_err(|e: pmemn2n::Error| usage(e.to_string()))?;
    let ckpt = load_checkpoint(checkpoint)?;
    let corpus = load_corpus(data)?;
    let ds = dataset_for(&ckpt, &corpus)?;
    let instances = match split {
        Split::Train => ds.train.items(),
        Split::Dev => ds.dev.items(),
        Split::Test => ds.test.items(),
    };
    if instances.is_empty() {
        eprintln!("warning: the {} split is empty", split.suffix());
    }
    let preds = predictions(
        &ckpt.params,
        &ckpt.model_config,
        instances,
        &ds.candidates,
        ds.global_table(),
    )?;
    let overall = accuracy(&preds, instances);
    println!("accuracy: {:.2}", overall * 100.0);
    let mut by_task = serde_json::Map::new();
    if per_task {
        let tasks: BTreeSet<u8> = instances.iter().map(|i| i.task_id).collect();
        for t in tasks {
            let (p, i): (Vec<usize>, Vec<_>) = preds
                .iter()
                .zip(instances)
                .filter(|(_, i)| i.task_id == t)
                .map(|(p, i)| (*p, i.clone()))
                .unzip();
            let acc = accuracy(&p, &i);
            println!("task {t}: {:.2}", acc * 100.0);
            by_task.insert(format!("task{t}"), serde_json::json!(acc));
        }
    }
    if let Some(path) = report {
        let manifest = Manifest::new(
            "eval",
            ckpt.fingerprints.clone(),
            serde_json::json!({
                "split": split.suffix(),
                "instances": instances.len(),
                "accuracy": overall,
                "per_task": by_task,
            }),
        )
        .with_seed("train", ckpt.train_config.seed)
        .with_config("model", &ckpt.model_config)?;
        manifest.write(fs::File::create(path)?)?;
    }
    Ok(())
}

pub fn analyze_command(
    which: Analysis,
    checkpoint: &Path,
    data: &Path,
    out: Option<&Path>,
) -> anyhow::Result<()> {
    let ckpt = load_checkpoint(checkpoint)?;
    let corpus = load_corpus(data)?;
    ckpt.check_corpus(&corpus)?;
    let time_features = ckpt.vocab.time_feature_count();
    let mut csv: Vec<u8> = Vec::new();
    let results = match which {
        Analysis::Tendency => {
            let groups = candidate_groups(&corpus);
            if groups.is_empty() {
                bail!(usage("no candidate could be assigned to a profile group"));
            }
            let m = tendency_confusion(
                &ckpt.params,
                &ckpt.schema,
                &ckpt.vocab,
                &ckpt.candidates,
                &groups,
            )?;
            m.write_csv(&mut csv)?;
            serde_json::json!({ "matrix": m, "diagonal_margin": m.diagonal_margin() })
        }
        Analysis::Preference => {
            let scores = preference_scores(&ckpt.params, &ckpt.schema)?;
            write_preference_csv(&scores, ckpt.kb.columns(), &mut csv)?;
            serde_json::json!({ "columns": ckpt.kb.columns(), "scores": scores })
        }
        Analysis::GlobalControl => {
            let mut model = ckpt.model_config.clone();
            model.use_global_memory = true;
            let r = global_memory_control(
                &corpus,
                &model,
                &ckpt.train_config,
                &ckpt.dataset_options,
                time_features,
            )?;
            writeln!(csv, "memory,accuracy")?;
            writeln!(csv, "similar,{:.2}", r.similar * 100.0)?;
            writeln!(csv, "random,{:.2}", r.random * 100.0)?;
            serde_json::json!(r)
        }
        Analysis::Ablation => {
            let table = ablation_grid(
                &corpus,
                &Variant::ALL,
                &ckpt.model_config,
                &ckpt.train_config,
                &ckpt.dataset_options,
                time_features,
            )?;
            table.write_csv(&mut csv)?;
            serde_json::json!(table)
        }
    };
    std::io::stdout().write_all(&csv)?;
    if let Some(path) = out {
        fs::write(path, &csv)?;
        let manifest = Manifest::new(
            &format!("analyze {which:?}").to_lowercase(),
            Fingerprints::of_corpus(&corpus, time_features)?,
            results,
        )
        .with_seed("train", ckpt.train_config.seed)
        .with_seed("dataset", ckpt.dataset_options.seed)
        .with_config("model", &ckpt.model_config)?
        .with_config("train", &ckpt.train_config)?;
        manifest.write(fs::File::create(path.with_extension("json"))?)?;
    }
    Ok(())
}
