//! Experiment grid and analyses: ablations per task, tendency confusion
//! matrix, normalized preference scores and the similar-vs-random global
//! memory control.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{sha256_hex, Fingerprints};
use crate::data::{CandidateSet, Corpus, Dataset, DatasetOptions, DialogInstance, GlobalSource};
use crate::encoding::{embed_bag, ProfileSchema, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParameters};
use crate::numerics::{dot, l2_norm, matvec, relu, sigmoid};
use crate::training::{evaluate, train, TrainConfig, TrainReport, TrainingData};

/// Model rows of the ablation table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// plain memory network, profile given as the first user utterance
    Baseline,
    ProfileEmbedding,
    GlobalMemory,
    /// profile embedding and global memory
    Profile,
    Preference,
    /// every component
    Combined,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Baseline,
        Variant::ProfileEmbedding,
        Variant::GlobalMemory,
        Variant::Profile,
        Variant::Preference,
        Variant::Combined,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::ProfileEmbedding => "profile-embedding",
            Variant::GlobalMemory => "global-memory",
            Variant::Profile => "profile",
            Variant::Preference => "preference",
            Variant::Combined => "combined",
        }
    }

    pub fn model_config(self, base: &ModelConfig) -> ModelConfig {
        let (p, g, b) = match self {
            Variant::Baseline => (false, false, false),
            Variant::ProfileEmbedding => (true, false, false),
            Variant::GlobalMemory => (false, true, false),
            Variant::Profile => (true, true, false),
            Variant::Preference => (false, false, true),
            Variant::Combined => (true, true, true),
        };
        ModelConfig {
            use_profile_embedding: p,
            use_global_memory: g,
            use_preference: b,
            ..base.clone()
        }
    }

    /// Instance options for this variant on top of `base`.
    pub fn dataset_options(self, base: &DatasetOptions) -> DatasetOptions {
        let mut opts = base.clone();
        opts.expand.profile_as_utterance = self == Variant::Baseline;
        if self.model_config(&ModelConfig::default()).use_global_memory {
            opts.global_source.get_or_insert(GlobalSource::Similar);
        } else {
            opts.global_source = None;
        }
        opts
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown model variant {s:?}")))
    }
}

/// Trains one model on a dataset from a fixed initialization and returns the
/// best-dev parameters with the training report.
pub fn fit(
    dataset: &Dataset,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<(ModelParameters, TrainReport)> {
    let params = ModelParameters::init(dataset.dims(), model_cfg.embedding_dim, train_cfg.seed)?;
    let data = TrainingData {
        train: &dataset.train,
        dev: &dataset.dev,
        candidates: &dataset.candidates,
        global_table: dataset.global_table(),
        resample: None,
    };
    train(params, model_cfg, train_cfg, &data)
}

/// Test accuracy of `params` on `dataset`, optionally per task.
pub fn test_accuracy(
    params: &ModelParameters,
    model_cfg: &ModelConfig,
    dataset: &Dataset,
) -> Result<f64> {
    evaluate(
        params,
        model_cfg,
        dataset.test.items(),
        &dataset.candidates,
        dataset.global_table(),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub tasks: Vec<u8>,
    /// variant → task → test accuracy in [0, 1]
    pub rows: BTreeMap<Variant, BTreeMap<u8, f64>>,
}

impl AblationTable {
    /// Models as rows, tasks as columns, percentages with two decimals.
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        let header: Vec<String> = self.tasks.iter().map(|t| format!("task{t}")).collect();
        writeln!(w, "model,{}", header.join(","))?;
        for (variant, by_task) in &self.rows {
            let cells: Vec<String> = self
                .tasks
                .iter()
                .map(|t| {
                    by_task
                        .get(t)
                        .map(|a| format!("{:.2}", a * 100.0))
                        .unwrap_or_default()
                })
                .collect();
            writeln!(w, "{},{}", variant.name(), cells.join(","))?;
        }
        Ok(())
    }
}

/// Trains every variant on every task of the corpus from the same seed and
/// reports test accuracy.
pub fn ablation_grid(
    corpus: &Corpus,
    variants: &[Variant],
    base_model: &ModelConfig,
    train_cfg: &TrainConfig,
    base_options: &DatasetOptions,
    time_features: usize,
) -> Result<AblationTable> {
    let vocab = corpus.build_vocabulary(time_features)?;
    let tasks: Vec<u8> = corpus.tasks().into_iter().collect();
    let mut rows: BTreeMap<Variant, BTreeMap<u8, f64>> = BTreeMap::new();
    for &task in &tasks {
        let sub = corpus.restrict_to_task(task);
        for &variant in variants {
            let ds = Dataset::build(&sub, vocab.clone(), variant.dataset_options(base_options))?;
            let cfg = variant.model_config(base_model);
            let (params, _) = fit(&ds, &cfg, train_cfg)?;
            let acc = test_accuracy(&params, &cfg, &ds)?;
            log::info!("task {task} {}: {:.2}", variant.name(), acc * 100.0);
            rows.entry(variant).or_default().insert(task, acc);
        }
    }
    Ok(AblationTable { tasks, rows })
}

/// Profile label used for grouping: attribute values in schema order.
pub fn profile_label(schema: &ProfileSchema, profile: &crate::encoding::Profile) -> String {
    schema.values_in_order(profile).join(" ")
}

/// Groups candidates by the profile they are styled for, from the labels a
/// corpus carries or, failing that, from usage: a candidate belongs to a
/// profile when it is a gold response in at least two dialogs and every
/// such dialog has that profile. Responses carrying an API call or a KB
/// entity are never grouped.
pub fn candidate_groups(corpus: &Corpus) -> BTreeMap<String, String> {
    if !corpus.candidate_groups.is_empty() {
        return corpus.candidate_groups.clone();
    }
    let mut users: BTreeMap<&str, (BTreeSet<String>, usize)> = BTreeMap::new();
    for d in corpus.all_dialogs() {
        let label = profile_label(&corpus.schema, &d.profile);
        for (_, bot) in d.exchanges() {
            let e = users.entry(bot.trim()).or_default();
            e.0.insert(label.clone());
            e.1 += 1;
        }
    }
    users
        .into_iter()
        .filter(|(c, (labels, n))| {
            labels.len() == 1
                && *n >= 2
                && !c.starts_with("api_call")
                && crate::kb::candidate_entity(c, &corpus.kb).is_ok_and(|e| e.is_none())
        })
        .map(|(c, (labels, _))| (c.to_string(), labels.into_iter().next().expect("one label")))
        .collect()
}

/// Rows are profiles, columns the candidate groups with the same labels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub labels: Vec<String>,
    /// `values[g][h]`: mean tendency of profile `g` over group `h`; `None`
    /// when group `h` is empty
    pub values: Vec<Vec<Option<f64>>>,
}

impl ConfusionMatrix {
    /// Mean of the defined diagonal entries minus mean of the defined
    /// off-diagonal entries.
    pub fn diagonal_margin(&self) -> Option<f64> {
        let (mut diag, mut off) = (Vec::new(), Vec::new());
        for (g, row) in self.values.iter().enumerate() {
            for (h, v) in row.iter().enumerate() {
                if let Some(v) = v {
                    if g == h {
                        diag.push(*v);
                    } else {
                        off.push(*v);
                    }
                }
            }
        }
        let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
        match (diag.is_empty(), off.is_empty()) {
            (false, false) => Some(mean(&diag) - mean(&off)),
            _ => None,
        }
    }

    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "profile,{}", self.labels.join(","))?;
        for (label, row) in self.labels.iter().zip(&self.values) {
            let cells: Vec<String> = row
                .iter()
                .map(|v| {
                    v.map(|x| format!("{x:.6}"))
                        .unwrap_or_else(|| "missing".into())
                })
                .collect();
            writeln!(w, "{label},{}", cells.join(","))?;
        }
        Ok(())
    }
}

/// Entry `(g, h)` is the mean of `σ(p_g · r_i)` over the candidates of group `h`.
pub fn tendency_confusion(
    params: &ModelParameters,
    schema: &ProfileSchema,
    vocab: &Vocabulary,
    candidates: &[String],
    groups: &BTreeMap<String, String>,
) -> Result<ConfusionMatrix> {
    let profiles = schema.all_profiles();
    let labels: Vec<String> = profiles.iter().map(|p| profile_label(schema, p)).collect();
    let mut members: Vec<Vec<Vec<f64>>> = vec![Vec::new(); labels.len()];
    for text in candidates {
        if let Some(group) = groups.get(text) {
            if let Some(h) = labels.iter().position(|l| l == group) {
                let bag = crate::encoding::encode_candidate(text, vocab);
                members[h].push(embed_bag(&bag, &params.w)?);
            }
        }
    }
    let mut values = Vec::with_capacity(labels.len());
    for profile in &profiles {
        let p = matvec(&params.p, schema.encode(profile)?.as_slice())?;
        let row = members
            .iter()
            .map(|group| {
                if group.is_empty() {
                    None
                } else {
                    Some(
                        group.iter().map(|r| sigmoid(dot(&p, r))).sum::<f64>() / group.len() as f64,
                    )
                }
            })
            .collect();
        values.push(row);
    }
    Ok(ConfusionMatrix { labels, values })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreferenceScore {
    pub profile: String,
    /// `v / ‖v‖₂`, all zeros when `v = 0`
    pub scores: Vec<f64>,
    /// `v` was the zero vector
    pub degenerate: bool,
}

/// Normalized preference vector of every profile of the schema.
pub fn preference_scores(
    params: &ModelParameters,
    schema: &ProfileSchema,
) -> Result<Vec<PreferenceScore>> {
    schema
        .all_profiles()
        .iter()
        .map(|profile| {
            let v: Vec<f64> = matvec(&params.e, schema.encode(profile)?.as_slice())?
                .into_iter()
                .map(relu)
                .collect();
            let norm = l2_norm(&v);
            let degenerate = norm == 0.0;
            let scores = if degenerate {
                vec![0.0; v.len()]
            } else {
                v.iter().map(|x| x / norm).collect()
            };
            Ok(PreferenceScore {
                profile: profile_label(schema, profile),
                scores,
                degenerate,
            })
        })
        .collect()
}

pub fn write_preference_csv(
    scores: &[PreferenceScore],
    columns: &[String],
    mut w: impl Write,
) -> Result<()> {
    writeln!(w, "profile,{},degenerate", columns.join(","))?;
    for s in scores {
        let cells: Vec<String> = s.scores.iter().map(|x| format!("{x:.6}")).collect();
        writeln!(w, "{},{},{}", s.profile, cells.join(","), s.degenerate)?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalControl {
    pub similar: f64,
    pub random: f64,
}

/// Trains the same model twice, once with similar-user and once with
/// random-user global memory, and reports both test accuracies.
pub fn global_memory_control(
    corpus: &Corpus,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    options: &DatasetOptions,
    time_features: usize,
) -> Result<GlobalControl> {
    if !model_cfg.use_global_memory {
        return Err(Error::invalid(
            "global memory control needs a model with global memory",
        ));
    }
    let vocab = corpus.build_vocabulary(time_features)?;
    let mut opts = options.clone();
    opts.global_source = Some(GlobalSource::Similar);
    let mut ds = Dataset::build(corpus, vocab, opts)?;
    let (params, _) = fit(&ds, model_cfg, train_cfg)?;
    let similar = test_accuracy(&params, model_cfg, &ds)?;
    ds.refill_global(GlobalSource::Random);
    let (params, _) = fit(&ds, model_cfg, train_cfg)?;
    let random = test_accuracy(&params, model_cfg, &ds)?;
    Ok(GlobalControl { similar, random })
}

/// Accuracy over the instances whose gold response carries a KB entity of
/// one of `columns`.
pub fn accuracy_on_columns(
    predictions: &[usize],
    instances: &[DialogInstance],
    candidates: &CandidateSet,
    columns: &BTreeSet<usize>,
) -> Option<f64> {
    let mut total = 0;
    let mut correct = 0;
    for (p, inst) in predictions.iter().zip(instances) {
        if let Some((_, j)) = candidates.coords()[inst.true_index] {
            if columns.contains(&j) {
                total += 1;
                correct += usize::from(*p == inst.true_index);
            }
        }
    }
    (total > 0).then(|| correct as f64 / total as f64)
}

/// Seeds, configuration hashes and corpus fingerprints of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub seeds: BTreeMap<String, u64>,
    pub config_hashes: BTreeMap<String, String>,
    pub corpus: Fingerprints,
    pub results: serde_json::Value,
}

impl Manifest {
    pub fn new(command: &str, corpus: Fingerprints, results: serde_json::Value) -> Self {
        Manifest {
            command: command.to_string(),
            seeds: BTreeMap::new(),
            config_hashes: BTreeMap::new(),
            corpus,
            results,
        }
    }

    pub fn with_seed(mut self, name: &str, seed: u64) -> Self {
        self.seeds.insert(name.to_string(), seed);
        self
    }

    /// Records the SHA-256 of the config's JSON form.
    pub fn with_config<T: Serialize>(mut self, name: &str, config: &T) -> Result<Self> {
        let json = serde_json::to_vec(config)?;
        self.config_hashes
            .insert(name.to_string(), sha256_hex(&json));
        Ok(self)
    }

    pub fn write(&self, w: impl Write) -> Result<()> {
        serde_json::to_writer_pretty(w, self)?;
        Ok(())
    }
}
