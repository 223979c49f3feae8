use std::collections::{BTreeMap, BTreeSet};
use std::marker::PhantomData;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::{CandidateSet, Corpus, Dialog, Entry};
use crate::encoding::{
    encode_candidate, encode_memory_utterance, BagOfWords, Profile, ProfileOneHot, ProfileSchema,
    Speaker, Vocabulary,
};
use crate::error::{Error, Result};
use crate::kb::{mentioned_items, KnowledgeBase, MentionRule};
use crate::model::{ModelDims, DEFAULT_CONTEXT_CAP, DEFAULT_GLOBAL_CAP};
use crate::numerics::SeedRng;

/// One bot turn: everything needed to score the candidates.
#[derive(Clone, Debug, PartialEq)]
pub struct DialogInstance {
    pub dialog_id: usize,
    pub task_id: u8,
    /// index of the exchange within its dialog
    pub turn: usize,
    /// memory slots, oldest first, time features relative to the window
    pub context: Vec<BagOfWords>,
    pub query: BagOfWords,
    /// ids into the global-utterance table
    pub global: Vec<u32>,
    pub profile: Profile,
    pub profile_onehot: ProfileOneHot,
    /// KB items mentioned in the context window or the query
    pub mentioned: Vec<usize>,
    pub true_index: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpandOptions {
    pub context_cap: usize,
    /// prepend the profile values as the first user utterance
    pub profile_as_utterance: bool,
    pub mention_rule: MentionRule,
}

impl Default for ExpandOptions {
    fn default() -> Self {
        ExpandOptions {
            context_cap: DEFAULT_CONTEXT_CAP,
            profile_as_utterance: false,
            mention_rule: MentionRule::default(),
        }
    }
}

/// One instance per exchange. The context holds every earlier utterance and
/// KB fact line of the dialog, truncated to the most recent `context_cap`.
pub fn expand_instances(
    dialog: &Dialog,
    vocab: &Vocabulary,
    schema: &ProfileSchema,
    kb: &KnowledgeBase,
    candidates: &CandidateSet,
    options: &ExpandOptions,
) -> Result<Vec<DialogInstance>> {
    if options.context_cap == 0 {
        return Err(Error::invalid("context cap must be at least 1"));
    }
    let profile_onehot = schema.encode(&dialog.profile)?;
    let mut history: Vec<(String, Speaker)> = Vec::new();
    if options.profile_as_utterance {
        history.push((
            schema.values_in_order(&dialog.profile).join(" "),
            Speaker::User,
        ));
    }
    let mut out = Vec::new();
    let mut turn = 0;
    for entry in &dialog.entries {
        match entry {
            Entry::Fact(f) => history.push((f.to_line(), Speaker::User)),
            Entry::Exchange { user, bot } => {
                let true_index = candidates.index_of(bot).ok_or_else(|| {
                    Error::data(format!(
                        "response {bot:?} (dialog {}, turn {turn}) is not a candidate",
                        dialog.id
                    ))
                })?;
                let start = history.len().saturating_sub(options.context_cap);
                let window = &history[start..];
                let context = window
                    .iter()
                    .enumerate()
                    .map(|(t, (text, speaker))| encode_memory_utterance(text, t, *speaker, vocab))
                    .collect::<Result<Vec<_>>>()?;
                let mentioned = mentioned_items(
                    window
                        .iter()
                        .map(|(t, _)| t.as_str())
                        .chain([user.as_str()]),
                    kb,
                    options.mention_rule,
                );
                out.push(DialogInstance {
                    dialog_id: dialog.id,
                    task_id: dialog.task_id,
                    turn,
                    context,
                    query: encode_candidate(user, vocab),
                    global: Vec::new(),
                    profile: dialog.profile.clone(),
                    profile_onehot: profile_onehot.clone(),
                    mentioned: mentioned.into_iter().collect(),
                    true_index,
                });
                history.push((user.clone(), Speaker::User));
                history.push((bot.clone(), Speaker::Bot));
                turn += 1;
            }
        }
    }
    Ok(out)
}

/// Where global memory utterances come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GlobalSource {
    /// other training dialogs with exactly the same profile
    #[default]
    Similar,
    /// other training dialogs of any profile, same amount as `Similar` would give
    Random,
}

impl std::str::FromStr for GlobalSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "similar" => Ok(GlobalSource::Similar),
            "random" => Ok(GlobalSource::Random),
            other => Err(Error::invalid(format!("unknown global source {other:?}"))),
        }
    }
}

/// Which sides of the conversation feed the global pool.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GlobalSpeakers {
    #[default]
    Both,
    User,
    Bot,
}

impl GlobalSpeakers {
    fn admits(self, speaker: Speaker) -> bool {
        match self {
            GlobalSpeakers::Both => true,
            GlobalSpeakers::User => speaker == Speaker::User,
            GlobalSpeakers::Bot => speaker == Speaker::Bot,
        }
    }
}

/// Utterances of the training dialogs, encoded once. Time features are the
/// utterance position within its own dialog.
#[derive(Clone, Debug, Default)]
pub struct GlobalPool {
    table: Vec<BagOfWords>,
    owners: Vec<usize>,
    by_profile: BTreeMap<Profile, Vec<u32>>,
}

impl GlobalPool {
    pub fn from_dialogs(
        dialogs: &[Dialog],
        vocab: &Vocabulary,
        speakers: GlobalSpeakers,
    ) -> Result<Self> {
        let mut pool = GlobalPool::default();
        let last_time = vocab.time_feature_count() - 1;
        for d in dialogs {
            let mut pos = 0;
            for (user, bot) in d.exchanges() {
                for (text, speaker) in [(user, Speaker::User), (bot, Speaker::Bot)] {
                    if !speakers.admits(speaker) {
                        pos += 1;
                        continue;
                    }
                    let id = pool.table.len() as u32;
                    pool.table.push(encode_memory_utterance(
                        text,
                        pos.min(last_time),
                        speaker,
                        vocab,
                    )?);
                    pool.owners.push(d.id);
                    pool.by_profile
                        .entry(d.profile.clone())
                        .or_default()
                        .push(id);
                    pos += 1;
                }
            }
        }
        Ok(pool)
    }

    pub fn table(&self) -> &[BagOfWords] {
        &self.table
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    pub fn owner(&self, id: u32) -> usize {
        self.owners[id as usize]
    }

    /// Ids of utterances by users with `profile`, excluding `dialog_id`.
    pub fn similar_ids(&self, profile: &Profile, dialog_id: usize) -> Vec<u32> {
        self.by_profile
            .get(profile)
            .map(|ids| {
                ids.iter()
                    .copied()
                    .filter(|&i| self.owners[i as usize] != dialog_id)
                    .collect()
            })
            .unwrap_or_default()
    }
}

/// Global memory for one instance: at most `cap` ids, sampled without
/// replacement when the pool is larger, returned in table order.
pub fn build_global_memory(
    pool: &GlobalPool,
    profile: &Profile,
    dialog_id: usize,
    cap: usize,
    source: GlobalSource,
    rng: &mut SeedRng,
) -> Vec<u32> {
    let similar = pool.similar_ids(profile, dialog_id);
    let (eligible, n) = match source {
        GlobalSource::Similar => {
            let n = similar.len().min(cap);
            (similar, n)
        }
        GlobalSource::Random => {
            let others: Vec<u32> = (0..pool.len() as u32)
                .filter(|&i| pool.owner(i) != dialog_id)
                .collect();
            let n = similar.len().min(cap).min(others.len());
            (others, n)
        }
    };
    if n == eligible.len() {
        return eligible;
    }
    let mut picked: Vec<u32> = sample(rng, eligible.len(), n)
        .into_iter()
        .map(|i| eligible[i])
        .collect();
    picked.sort_unstable();
    picked
}

pub trait SplitTag {
    const NAME: &'static str;
    const LABEL: u64;
}

#[derive(Clone, Copy, Debug)]
pub struct Train;
#[derive(Clone, Copy, Debug)]
pub struct Dev;
#[derive(Clone, Copy, Debug)]
pub struct Test;

impl SplitTag for Train {
    const NAME: &'static str = "train";
    const LABEL: u64 = 1;
}
impl SplitTag for Dev {
    const NAME: &'static str = "dev";
    const LABEL: u64 = 2;
}
impl SplitTag for Test {
    const NAME: &'static str = "test";
    const LABEL: u64 = 3;
}

/// Instances of one split. The split is part of the type so that training
/// code cannot be handed test data; `reads` counts iterations.
#[derive(Debug)]
pub struct Instances<S> {
    items: Vec<DialogInstance>,
    reads: AtomicUsize,
    _split: PhantomData<S>,
}

impl<S> Clone for Instances<S> {
    fn clone(&self) -> Self {
        Instances {
            items: self.items.clone(),
            reads: AtomicUsize::new(self.reads.load(Ordering::Relaxed)),
            _split: PhantomData,
        }
    }
}

impl<S: SplitTag> Instances<S> {
    pub fn new(items: Vec<DialogInstance>) -> Self {
        Instances {
            items,
            reads: AtomicUsize::new(0),
            _split: PhantomData,
        }
    }

    pub fn name(&self) -> &'static str {
        S::NAME
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn items(&self) -> &[DialogInstance] {
        self.reads.fetch_add(1, Ordering::Relaxed);
        &self.items
    }

    pub fn iter(&self) -> std::slice::Iter<'_, DialogInstance> {
        self.items().iter()
    }

    /// How many times the instances were handed out.
    pub fn reads(&self) -> usize {
        self.reads.load(Ordering::Relaxed)
    }

    pub fn into_vec(self) -> Vec<DialogInstance> {
        self.items
    }

    /// Fills every instance's global memory from `pool`.
    pub fn fill_global(&mut self, pool: &GlobalPool, cap: usize, source: GlobalSource, seed: u64) {
        let base = SeedRng::new(seed).fork(S::LABEL);
        for (n, inst) in self.items.iter_mut().enumerate() {
            let mut rng = base.fork(n as u64);
            inst.global =
                build_global_memory(pool, &inst.profile, inst.dialog_id, cap, source, &mut rng);
        }
    }

    pub fn clear_global(&mut self) {
        for inst in &mut self.items {
            inst.global.clear();
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetOptions {
    pub expand: ExpandOptions,
    pub global_cap: usize,
    pub global_speakers: GlobalSpeakers,
    /// `None` leaves global memories empty
    pub global_source: Option<GlobalSource>,
    pub seed: u64,
}

impl Default for DatasetOptions {
    fn default() -> Self {
        DatasetOptions {
            expand: ExpandOptions::default(),
            global_cap: DEFAULT_GLOBAL_CAP,
            global_speakers: GlobalSpeakers::Both,
            global_source: Some(GlobalSource::Similar),
            seed: 0,
        }
    }
}

/// A corpus encoded against a vocabulary.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub vocab: Vocabulary,
    pub schema: ProfileSchema,
    pub kb: KnowledgeBase,
    pub candidates: CandidateSet,
    pub pool: GlobalPool,
    pub train: Instances<Train>,
    pub dev: Instances<Dev>,
    pub test: Instances<Test>,
    pub options: DatasetOptions,
}

impl Dataset {
    pub fn build(corpus: &Corpus, vocab: Vocabulary, options: DatasetOptions) -> Result<Self> {
        let candidates = CandidateSet::new(corpus.candidates.clone(), &vocab, &corpus.kb)?;
        let expand = |dialogs: &[Dialog]| -> Result<Vec<DialogInstance>> {
            let mut out = Vec::new();
            for d in dialogs {
                out.extend(expand_instances(
                    d,
                    &vocab,
                    &corpus.schema,
                    &corpus.kb,
                    &candidates,
                    &options.expand,
                )?);
            }
            Ok(out)
        };
        let mut train = Instances::<Train>::new(expand(&corpus.train)?);
        let mut dev = Instances::<Dev>::new(expand(&corpus.dev)?);
        let mut test = Instances::<Test>::new(expand(&corpus.test)?);
        let pool = if options.global_source.is_some() {
            GlobalPool::from_dialogs(&corpus.train, &vocab, options.global_speakers)?
        } else {
            GlobalPool::default()
        };
        if let Some(source) = options.global_source {
            train.fill_global(&pool, options.global_cap, source, options.seed);
            dev.fill_global(&pool, options.global_cap, source, options.seed);
            test.fill_global(&pool, options.global_cap, source, options.seed);
        }
        Ok(Dataset {
            vocab,
            schema: corpus.schema.clone(),
            kb: corpus.kb.clone(),
            candidates,
            pool,
            train,
            dev,
            test,
            options,
        })
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            feature_dim: self.vocab.dim(),
            profile_dim: self.schema.dim(),
            kb_columns: self.kb.column_count(),
        }
    }

    pub fn global_table(&self) -> &[BagOfWords] {
        self.pool.table()
    }

    /// Re-draws global memories from another source, e.g. for the
    /// random-user control.
    pub fn refill_global(&mut self, source: GlobalSource) {
        let (cap, seed) = (self.options.global_cap, self.options.seed);
        self.train.fill_global(&self.pool, cap, source, seed);
        self.dev.fill_global(&self.pool, cap, source, seed);
        self.test.fill_global(&self.pool, cap, source, seed);
        self.options.global_source = Some(source);
    }

    /// Test instances restricted to the given task ids.
    pub fn test_tasks(&self, tasks: &BTreeSet<u8>) -> Instances<Test> {
        Instances::new(
            self.test
                .items
                .iter()
                .filter(|i| tasks.contains(&i.task_id))
                .cloned()
                .collect(),
        )
    }
}
