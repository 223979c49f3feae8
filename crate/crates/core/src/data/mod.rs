//! Dialog corpora: the line format, corpus directories, per-turn instances,
//! similar-user global memory and the synthetic task generator.

mod candidates;
mod instances;
pub mod synth;

pub use candidates::{read_candidates, write_candidates, CandidateSet};
pub use instances::{
    build_global_memory, expand_instances, Dataset, DatasetOptions, Dev, DialogInstance,
    ExpandOptions, GlobalPool, GlobalSource, GlobalSpeakers, Instances, SplitTag, Test, Train,
};

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::encoding::{Profile, ProfileSchema, Vocabulary};
use crate::error::{Error, Result};
use crate::kb::{KbFact, KnowledgeBase};

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Entry {
    Exchange { user: String, bot: String },
    Fact(KbFact),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dialog {
    pub id: usize,
    pub task_id: u8,
    pub profile: Profile,
    pub entries: Vec<Entry>,
}

impl Dialog {
    pub fn exchanges(&self) -> impl Iterator<Item = (&str, &str)> {
        self.entries.iter().filter_map(|e| match e {
            Entry::Exchange { user, bot } => Some((user.as_str(), bot.as_str())),
            Entry::Fact(_) => None,
        })
    }

    pub fn turn_count(&self) -> usize {
        self.exchanges().count()
    }

    pub fn has_facts(&self) -> bool {
        self.entries.iter().any(|e| matches!(e, Entry::Fact(_)))
    }
}

/// Parses blank-line separated dialogs. Ids are assigned from `first_id` on.
///
/// ```text
/// 1 <attr_1> ... <attr_n>
/// <n> <user text>\t<bot text>
/// <n> <item> R_<column> <value>
/// ```
pub fn parse_dialogs(
    input: impl BufRead,
    schema: &ProfileSchema,
    task_id: u8,
    first_id: usize,
) -> Result<Vec<Dialog>> {
    let mut dialogs = Vec::new();
    let mut current: Option<(Dialog, usize)> = None;

    let close = |current: &mut Option<(Dialog, usize)>, dialogs: &mut Vec<Dialog>| {
        if let Some((dialog, start)) = current.take() {
            if dialog.turn_count() == 0 {
                return Err(Error::Parse {
                    line: start,
                    msg: "dialog has no exchanges".into(),
                });
            }
            dialogs.push(dialog);
        }
        Ok(())
    };

    for (n, line) in input.lines().enumerate() {
        let line_no = n + 1;
        let line = line?;
        let line = line.trim_end_matches(['\r', '\n']);
        if line.trim().is_empty() {
            close(&mut current, &mut dialogs)?;
            continue;
        }
        let (num, rest) = line.split_once(' ').ok_or_else(|| Error::Parse {
            line: line_no,
            msg: format!("expected `<n> <content>`, got {line:?}"),
        })?;
        let num: usize = num.parse().map_err(|_| Error::Parse {
            line: line_no,
            msg: format!("line does not start with a number: {line:?}"),
        })?;
        match current.as_mut() {
            None => {
                if num != 1 {
                    return Err(Error::Parse {
                        line: line_no,
                        msg: "dialog must start with a `1 <profile>` line".into(),
                    });
                }
                let values: Vec<&str> = rest.split_whitespace().collect();
                let profile = schema
                    .profile_from_values(&values)
                    .map_err(|e| Error::Parse {
                        line: line_no,
                        msg: e.to_string(),
                    })?;
                let dialog = Dialog {
                    id: first_id + dialogs.len(),
                    task_id,
                    profile,
                    entries: Vec::new(),
                };
                current = Some((dialog, line_no));
            }
            Some((dialog, _)) => {
                let entry = if let Some((user, bot)) = rest.split_once('\t') {
                    Entry::Exchange {
                        user: user.to_string(),
                        bot: bot.to_string(),
                    }
                } else {
                    Entry::Fact(KbFact::parse(rest).ok_or_else(|| Error::Parse {
                        line: line_no,
                        msg: format!("neither an exchange nor a KB fact: {rest:?}"),
                    })?)
                };
                dialog.entries.push(entry);
            }
        }
    }
    close(&mut current, &mut dialogs)?;
    Ok(dialogs)
}

pub fn write_dialogs(dialogs: &[Dialog], schema: &ProfileSchema, mut w: impl Write) -> Result<()> {
    for (k, dialog) in dialogs.iter().enumerate() {
        if k > 0 {
            writeln!(w)?;
        }
        writeln!(w, "1 {}", schema.values_in_order(&dialog.profile).join(" "))?;
        for (n, entry) in dialog.entries.iter().enumerate() {
            match entry {
                Entry::Exchange { user, bot } => writeln!(w, "{} {user}\t{bot}", n + 2)?,
                Entry::Fact(f) => writeln!(w, "{} {}", n + 2, f.to_line())?,
            }
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    /// bAbI file suffix.
    pub fn suffix(self) -> &'static str {
        match self {
            Split::Train => "trn",
            Split::Dev => "dev",
            Split::Test => "tst",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" | "trn" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" | "tst" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split {other:?}"))),
        }
    }
}

pub const SCHEMA_FILE: &str = "schema.txt";
pub const KB_FILE: &str = "kb.txt";
pub const CANDIDATES_FILE: &str = "candidates.txt";
pub const GROUPS_FILE: &str = "candidate-groups.tsv";

pub fn dialog_file_name(task: u8, split: Split) -> String {
    format!("task{task}-{}.txt", split.suffix())
}

/// Raw corpus: dialogs per split plus the shared resources.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub schema: ProfileSchema,
    pub kb: KnowledgeBase,
    pub candidates: Vec<String>,
    pub train: Vec<Dialog>,
    pub dev: Vec<Dialog>,
    pub test: Vec<Dialog>,
    /// candidate text → profile group label, when known
    pub candidate_groups: BTreeMap<String, String>,
}

impl Corpus {
    pub fn split(&self, split: Split) -> &[Dialog] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    pub fn all_dialogs(&self) -> impl Iterator<Item = &Dialog> {
        self.train.iter().chain(&self.dev).chain(&self.test)
    }

    /// The same resources with only the dialogs of `task`.
    pub fn restrict_to_task(&self, task: u8) -> Corpus {
        let keep = |ds: &[Dialog]| ds.iter().filter(|d| d.task_id == task).cloned().collect();
        Corpus {
            schema: self.schema.clone(),
            kb: self.kb.clone(),
            candidates: self.candidates.clone(),
            train: keep(&self.train),
            dev: keep(&self.dev),
            test: keep(&self.test),
            candidate_groups: self.candidate_groups.clone(),
        }
    }

    pub fn tasks(&self) -> BTreeSet<u8> {
        self.all_dialogs().map(|d| d.task_id).collect()
    }

    /// Checks that every gold response is a candidate.
    pub fn validate(&self) -> Result<()> {
        let known: BTreeSet<&str> = self.candidates.iter().map(String::as_str).collect();
        for d in self.all_dialogs() {
            for (_, bot) in d.exchanges() {
                if !known.contains(bot.trim()) {
                    return Err(Error::data(format!(
                        "gold response {bot:?} of dialog {} is not a candidate",
                        d.id
                    )));
                }
            }
        }
        Ok(())
    }

    /// Every token of every utterance, fact, candidate and profile value.
    pub fn build_vocabulary(&self, time_features: usize) -> Result<Vocabulary> {
        let mut texts: Vec<String> = Vec::new();
        for d in self.all_dialogs() {
            for e in &d.entries {
                match e {
                    Entry::Exchange { user, bot } => {
                        texts.push(user.clone());
                        texts.push(bot.clone());
                    }
                    Entry::Fact(f) => texts.push(f.to_line()),
                }
            }
        }
        texts.extend(self.candidates.iter().cloned());
        for (_, values) in self.schema.attributes() {
            texts.extend(values.iter().cloned());
        }
        for f in self.kb.facts() {
            texts.push(f.to_line());
        }
        Vocabulary::from_texts(texts.iter().map(String::as_str), time_features)
    }

    /// Writes the corpus in the directory layout read by [`Corpus::load_dir`].
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.schema
            .write_to(fs::File::create(dir.join(SCHEMA_FILE))?)?;
        self.kb.write_to(fs::File::create(dir.join(KB_FILE))?)?;
        write_candidates(
            &self.candidates,
            fs::File::create(dir.join(CANDIDATES_FILE))?,
        )?;
        for task in self.tasks() {
            for split in Split::ALL {
                let dialogs: Vec<Dialog> = self
                    .split(split)
                    .iter()
                    .filter(|d| d.task_id == task)
                    .cloned()
                    .collect();
                let f = fs::File::create(dir.join(dialog_file_name(task, split)))?;
                write_dialogs(&dialogs, &self.schema, std::io::BufWriter::new(f))?;
            }
        }
        if !self.candidate_groups.is_empty() {
            let mut f = fs::File::create(dir.join(GROUPS_FILE))?;
            for (cand, group) in &self.candidate_groups {
                writeln!(f, "{cand}\t{group}")?;
            }
        }
        Ok(())
    }

    /// Reads a corpus directory: `schema.txt`, a candidates file, an optional
    /// KB file and dialog files named `...task<k>...-{trn,dev,tst}.txt`.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let open = |p: &Path| -> Result<BufReader<fs::File>> {
            Ok(BufReader::new(fs::File::open(p).map_err(|e| {
                Error::Io(std::io::Error::new(
                    e.kind(),
                    format!("{}: {e}", p.display()),
                ))
            })?))
        };
        let schema = ProfileSchema::read_from(open(&dir.join(SCHEMA_FILE))?)?;

        let mut names: Vec<String> = fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .filter_map(|e| e.file_name().into_string().ok())
            .collect();
        names.sort();

        let cand_file = names
            .iter()
            .find(|n| n.as_str() == CANDIDATES_FILE)
            .or_else(|| names.iter().find(|n| n.contains("candidates")))
            .ok_or_else(|| Error::data(format!("no candidates file in {}", dir.display())))?;
        let candidates = read_candidates(open(&dir.join(cand_file))?)?;

        let kb_file = names.iter().find(|n| n.as_str() == KB_FILE).or_else(|| {
            names
                .iter()
                .find(|n| n.contains("kb") && n.ends_with(".txt"))
        });
        let kb = match kb_file {
            Some(f) => load_kb_unique_columns(open(&dir.join(f))?)?,
            None => KnowledgeBase::empty(Vec::new()),
        };

        let mut splits: BTreeMap<Split, Vec<Dialog>> = BTreeMap::new();
        let mut next_id = 0;
        for split in Split::ALL {
            let suffix = format!("-{}.txt", split.suffix());
            for name in names.iter().filter(|n| n.ends_with(&suffix)) {
                let task = task_number(name).ok_or_else(|| {
                    Error::data(format!("cannot read a task number from {name:?}"))
                })?;
                let dialogs = parse_dialogs(open(&dir.join(name))?, &schema, task, next_id)
                    .map_err(|e| Error::data(format!("{name}: {e}")))?;
                next_id += dialogs.len();
                splits.entry(split).or_default().extend(dialogs);
            }
        }

        let mut candidate_groups = BTreeMap::new();
        if names.iter().any(|n| n == GROUPS_FILE) {
            for line in open(&dir.join(GROUPS_FILE))?.lines() {
                let line = line?;
                if let Some((c, g)) = line.split_once('\t') {
                    candidate_groups.insert(c.to_string(), g.to_string());
                }
            }
        }

        let corpus = Corpus {
            schema,
            kb,
            candidates,
            train: splits.remove(&Split::Train).unwrap_or_default(),
            dev: splits.remove(&Split::Dev).unwrap_or_default(),
            test: splits.remove(&Split::Test).unwrap_or_default(),
            candidate_groups,
        };
        corpus.validate()?;
        Ok(corpus)
    }
}

fn task_number(name: &str) -> Option<u8> {
    let idx = name.find("task")?;
    name[idx + 4..]
        .chars()
        .next()
        .and_then(|c| c.to_digit(10))
        .map(|d| d as u8)
}

/// Loads a KB file keeping only columns whose values are globally unique.
/// bAbI KB files also carry shared-value columns (cuisine, price, ...) that
/// cannot be resolved back to a single item.
fn load_kb_unique_columns(r: impl BufRead) -> Result<KnowledgeBase> {
    let mut facts = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        facts.push(KbFact::parse(&line).ok_or_else(|| Error::Parse {
            line: n + 1,
            msg: format!("expected `<item> R_<column> <value>`, got {line:?}"),
        })?);
    }
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    for f in &facts {
        *seen.entry(f.value.to_lowercase()).or_default() += 1;
    }
    let shared: BTreeSet<String> = facts
        .iter()
        .filter(|f| seen[&f.value.to_lowercase()] > 1)
        .map(|f| f.column.clone())
        .collect();
    if !shared.is_empty() {
        log::warn!("dropping KB columns with shared values: {shared:?}");
    }
    let kept: Vec<KbFact> = facts
        .into_iter()
        .filter(|f| !shared.contains(&f.column))
        .collect();
    if kept.is_empty() {
        return Ok(KnowledgeBase::empty(Vec::new()));
    }
    KnowledgeBase::load(&kept)
}
