//! Interactive profile-conditioned retrieval session.

use std::io::{BufRead, IsTerminal, Write};
use std::path::Path;

use anyhow::Context;

use pmemn2n::checkpoint::Checkpoint;
use pmemn2n::data::{
    build_global_memory, CandidateSet, Corpus, DialogInstance, GlobalPool, GlobalSource,
};
use pmemn2n::encoding::{encode_candidate, encode_memory_utterance, Profile, Speaker};
use pmemn2n::kb::mentioned_items;
use pmemn2n::model::{predict, ForwardTrace, Prepared};
use pmemn2n::numerics::{l2_norm, SeedRng};

use crate::usage;

/// Model, candidates and conversation state of one chat.
pub struct ChatSession {
    ckpt: Checkpoint,
    candidates: CandidateSet,
    pool: GlobalPool,
    profile: Profile,
    global: Vec<u32>,
    history: Vec<(String, Speaker)>,
}

/// One answered turn.
pub struct Reply {
    pub index: usize,
    pub text: String,
    pub trace: ForwardTrace,
}

/// Parses `key=value` pairs into a profile valid under the schema.
pub fn parse_profile(ckpt: &Checkpoint, pairs: &[String]) -> anyhow::Result<Profile> {
    let profile = parse_profile_pairs(pairs)?;
    ckpt.schema
        .encode(&profile)
        .map_err(|e| usage(e.to_string()))?;
    Ok(profile)
}

impl ChatSession {
    /// `corpus` supplies the training dialogs for the global memory; without
    /// it the global memory is empty.
    pub fn new(
        ckpt: Checkpoint,
        profile: Profile,
        corpus: Option<&Corpus>,
    ) -> anyhow::Result<Self> {
        ckpt.schema
            .encode(&profile)
            .map_err(|e| usage(e.to_string()))?;
        let candidates = CandidateSet::new(ckpt.candidates.clone(), &ckpt.vocab, &ckpt.kb)?;
        let pool = match corpus {
            Some(c) if ckpt.model_config.use_global_memory => {
                ckpt.check_corpus(c)?;
                GlobalPool::from_dialogs(
                    &c.train,
                    &ckpt.vocab,
                    ckpt.dataset_options.global_speakers,
                )?
            }
            _ => GlobalPool::default(),
        };
        let mut session = ChatSession {
            ckpt,
            candidates,
            pool,
            profile,
            global: Vec::new(),
            history: Vec::new(),
        };
        session.refresh_global();
        session.reset();
        Ok(session)
    }

    pub fn checkpoint(&self) -> &Checkpoint {
        &self.ckpt
    }

    pub fn profile(&self) -> &Profile {
        &self.profile
    }

    pub fn history_len(&self) -> usize {
        self.history.len()
    }

    /// Clears the conversation.
    pub fn reset(&mut self) {
        self.history.clear();
        if self.ckpt.dataset_options.expand.profile_as_utterance {
            let text = self.ckpt.schema.values_in_order(&self.profile).join(" ");
            self.history.push((text, Speaker::User));
        }
    }

    /// Switches the profile for the following turns, keeping the conversation.
    pub fn set_profile(&mut self, pairs: &[String]) -> anyhow::Result<()> {
        let mut profile = self.profile.clone();
        profile.extend(parse_profile_pairs(pairs)?);
        self.ckpt
            .schema
            .encode(&profile)
            .map_err(|e| usage(e.to_string()))?;
        self.profile = profile;
        self.refresh_global();
        Ok(())
    }

    fn refresh_global(&mut self) {
        let opts = &self.ckpt.dataset_options;
        let mut rng = SeedRng::new(opts.seed);
        self.global = build_global_memory(
            &self.pool,
            &self.profile,
            usize::MAX,
            opts.global_cap,
            opts.global_source.unwrap_or(GlobalSource::Similar),
            &mut rng,
        );
    }

    /// Scores every candidate for `user`, then records both sides of the
    /// exchange in the context.
    pub fn respond(&mut self, user: &str) -> anyhow::Result<Reply> {
        let cap = self.ckpt.dataset_options.expand.context_cap;
        let start = self.history.len().saturating_sub(cap);
        let window = &self.history[start..];
        let vocab = &self.ckpt.vocab;
        let context = window
            .iter()
            .enumerate()
            .map(|(t, (text, speaker))| encode_memory_utterance(text, t, *speaker, vocab))
            .collect::<pmemn2n::Result<Vec<_>>>()?;
        let mentioned = mentioned_items(
            window.iter().map(|(t, _)| t.as_str()).chain([user]),
            &self.ckpt.kb,
            self.ckpt.dataset_options.expand.mention_rule,
        );
        let inst = DialogInstance {
            dialog_id: usize::MAX,
            task_id: 0,
            turn: 0,
            context,
            query: encode_candidate(user, vocab),
            global: self.global.clone(),
            profile: self.profile.clone(),
            profile_onehot: self.ckpt.schema.encode(&self.profile)?,
            mentioned: mentioned.into_iter().collect(),
            true_index: 0,
        };
        let prepared = Prepared::new(
            &self.ckpt.params,
            &self.ckpt.model_config,
            &self.candidates,
            self.pool.table(),
        )?;
        let trace = prepared.forward(&inst)?;
        let index = predict(&trace);
        let text = self.candidates.text(index).to_string();
        self.history.push((user.to_string(), Speaker::User));
        self.history.push((text.clone(), Speaker::Bot));
        Ok(Reply { index, text, trace })
    }

    /// Top five candidates, attention peaks, bias terms and preference.
    pub fn debug_report(&self, reply: &Reply) -> String {
        let t = &reply.trace;
        let mut out = String::new();
        let mut order: Vec<usize> = (0..t.logits.len()).collect();
        order.sort_by(|&a, &b| t.logits[b].total_cmp(&t.logits[a]).then(a.cmp(&b)));
        for &k in order.iter().take(5) {
            out += &format!(
                "  logit {:>9.4}  p {:.4}  bias {:.4}  {}\n",
                t.logits[k],
                t.probabilities[k],
                t.bias.get(k).copied().unwrap_or(0.0),
                self.candidates.text(k)
            );
        }
        let offset = self.history.len().saturating_sub(2);
        let start = offset.saturating_sub(self.ckpt.dataset_options.expand.context_cap);
        for (h, hop) in t.context_hops.iter().enumerate() {
            if let Some(slot) = peak(&hop.attention) {
                let text = self
                    .history
                    .get(start + slot)
                    .map(|(s, _)| s.as_str())
                    .unwrap_or("");
                out += &format!(
                    "  context hop {}: slot {slot} ({:.4}) {text}\n",
                    h + 1,
                    hop.attention[slot]
                );
            }
        }
        for (h, hop) in t.global_hops.iter().enumerate() {
            if let Some(slot) = peak(&hop.attention) {
                out += &format!(
                    "  global hop {}: slot {slot} ({:.4})\n",
                    h + 1,
                    hop.attention[slot]
                );
            }
        }
        for (k, b) in t.bias.iter().enumerate().filter(|(_, b)| **b != 0.0) {
            out += &format!("  bias {b:.4}  {}\n", self.candidates.text(k));
        }
        if !t.preference.is_empty() {
            let norm = l2_norm(&t.preference);
            let cols = self.ckpt.kb.columns();
            let fmt = |v: &[f64]| {
                cols.iter()
                    .zip(v)
                    .map(|(c, x)| format!("{c}={x:.4}"))
                    .collect::<Vec<_>>()
                    .join(" ")
            };
            let normalized: Vec<f64> = if norm == 0.0 {
                vec![0.0; t.preference.len()]
            } else {
                t.preference.iter().map(|x| x / norm).collect()
            };
            out += &format!("  preference {}\n", fmt(&t.preference));
            out += &format!("  preference (normalized) {}\n", fmt(&normalized));
        }
        out
    }
}

fn peak(weights: &[f64]) -> Option<usize> {
    (!weights.is_empty()).then(|| pmemn2n::model::argmax(weights))
}

fn parse_profile_pairs(pairs: &[String]) -> anyhow::Result<Profile> {
    let mut profile = Profile::new();
    for pair in pairs
        .iter()
        .flat_map(|p| p.split([',', ' ']))
        .filter(|p| !p.trim().is_empty())
    {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| usage(format!("profile entry {pair:?} is not key=value")))?;
        profile.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(profile)
}

/// Reads lines from `input` until EOF and writes one response per line.
pub fn repl(
    session: &mut ChatSession,
    input: impl BufRead,
    mut out: impl Write,
    debug: bool,
    prompt: bool,
) -> anyhow::Result<()> {
    let show_prompt = |out: &mut dyn Write| -> std::io::Result<()> {
        if prompt {
            write!(out, "> ")?;
            out.flush()?;
        }
        Ok(())
    };
    show_prompt(&mut out)?;
    for line in input.lines() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
        } else if line == ":reset" {
            session.reset();
            writeln!(out, "(context cleared)")?;
        } else if let Some(rest) = line.strip_prefix(":profile") {
            match session.set_profile(&[rest.trim().to_string()]) {
                Ok(()) => writeln!(
                    out,
                    "(profile {})",
                    session
                        .checkpoint()
                        .schema
                        .values_in_order(session.profile())
                        .join(" ")
                )?,
                Err(e) => writeln!(out, "error: {e}")?,
            }
        } else if line.starts_with(':') {
            writeln!(
                out,
                "error: unknown command {line:?} (use :reset or :profile key=value)"
            )?;
        } else {
            let reply = session.respond(line)?;
            writeln!(out, "{}", reply.text)?;
            if debug {
                write!(out, "{}", session.debug_report(&reply))?;
            }
        }
        show_prompt(&mut out)?;
    }
    Ok(())
}

pub fn run_chat(
    checkpoint: &Path,
    profile: &[String],
    data: Option<&Path>,
    debug: bool,
) -> anyhow::Result<()> {
    let ckpt = Checkpoint::load(checkpoint)
        .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let profile = parse_profile(&ckpt, profile)?;
    let corpus = match data {
        Some(dir) => Some(
            Corpus::load_dir(dir).with_context(|| format!("loading corpus {}", dir.display()))?,
        ),
        None => None,
    };
    eprintln!(
        "chat seed={} model={} profile={}",
        ckpt.dataset_options.seed,
        serde_json::to_string(&ckpt.model_config)?,
        ckpt.schema.values_in_order(&profile).join(" ")
    );
    let mut session = ChatSession::new(ckpt, profile, corpus.as_ref())?;
    let stdin = std::io::stdin();
    let prompt = stdin.is_terminal();
    repl(
        &mut session,
        stdin.lock(),
        std::io::stdout().lock(),
        debug,
        prompt,
    )
}
