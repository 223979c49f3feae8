//! Self-describing model snapshots: parameters, configuration, the resources
//! the parameters are bound to and, optionally, resumable training state.

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Corpus, DatasetOptions};
use crate::encoding::{ProfileSchema, Vocabulary};
use crate::error::{Error, Result};
use crate::kb::KnowledgeBase;
use crate::model::{ModelConfig, ModelDims, ModelParameters};
use crate::training::{TrainConfig, TrainState};

pub const FORMAT_VERSION: u32 = 1;

/// SHA-256 digests of the resources a model is tied to.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fingerprints {
    pub vocabulary: String,
    pub schema: String,
    pub kb: String,
    pub candidates: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn digest_with(write: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<String> {
    let mut buf = Vec::new();
    write(&mut buf)?;
    Ok(sha256_hex(&buf))
}

impl Fingerprints {
    pub fn compute(
        vocab: &Vocabulary,
        schema: &ProfileSchema,
        kb: &KnowledgeBase,
        candidates: &[String],
    ) -> Result<Self> {
        Ok(Fingerprints {
            vocabulary: digest_with(|b| vocab.write_to(b))?,
            schema: digest_with(|b| schema.write_to(b))?,
            kb: digest_with(|b| kb.write_to(b))?,
            candidates: sha256_hex(candidates.join("\n").as_bytes()),
        })
    }

    /// Fingerprints of a corpus's resources; the vocabulary is the one the
    /// corpus would build with `time_features`.
    pub fn of_corpus(corpus: &Corpus, time_features: usize) -> Result<Self> {
        let vocab = corpus.build_vocabulary(time_features)?;
        Fingerprints::compute(&vocab, &corpus.schema, &corpus.kb, &corpus.candidates)
    }
}

fn same(what: &'static str, expected: &str, found: &str) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::Fingerprint {
            what,
            expected: expected.to_string(),
            found: found.to_string(),
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub model_config: ModelConfig,
    pub train_config: TrainConfig,
    pub dataset_options: DatasetOptions,
    /// best-dev parameters
    pub params: ModelParameters,
    pub state: Option<TrainState>,
    pub vocab: Vocabulary,
    pub schema: ProfileSchema,
    pub kb: KnowledgeBase,
    pub candidates: Vec<String>,
    pub fingerprints: Fingerprints,
}

impl Checkpoint {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        model_config: ModelConfig,
        train_config: TrainConfig,
        dataset_options: DatasetOptions,
        params: ModelParameters,
        state: Option<TrainState>,
        vocab: Vocabulary,
        schema: ProfileSchema,
        kb: KnowledgeBase,
        candidates: Vec<String>,
    ) -> Result<Self> {
        let fingerprints = Fingerprints::compute(&vocab, &schema, &kb, &candidates)?;
        let ckpt = Checkpoint {
            format_version: FORMAT_VERSION,
            model_config,
            train_config,
            dataset_options,
            params,
            state,
            vocab,
            schema,
            kb,
            candidates,
            fingerprints,
        };
        ckpt.check_shapes()?;
        Ok(ckpt)
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            feature_dim: self.vocab.dim(),
            profile_dim: self.schema.dim(),
            kb_columns: self.kb.column_count(),
        }
    }

    fn check_shapes(&self) -> Result<()> {
        self.params.check_dims(self.dims())?;
        if self.params.dim() != self.model_config.embedding_dim {
            return Err(Error::invalid(
                "parameter dimension differs from the model config",
            ));
        }
        Ok(())
    }

    /// Writes JSON through a temporary file so a crash never leaves a
    /// truncated checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(fs::File::create(&tmp)?);
            serde_json::to_writer(&mut w, self)?;
            w.flush()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = fs::File::open(path).map_err(|e| {
            Error::Io(std::io::Error::new(
                e.kind(),
                format!("{}: {e}", path.display()),
            ))
        })?;
        let mut ckpt: Checkpoint = serde_json::from_reader(BufReader::new(f))?;
        if ckpt.format_version != FORMAT_VERSION {
            return Err(Error::data(format!(
                "checkpoint format {} is not supported (expected {FORMAT_VERSION})",
                ckpt.format_version
            )));
        }
        ckpt.vocab.reindex();
        ckpt.kb.reindex()?;
        let found = Fingerprints::compute(&ckpt.vocab, &ckpt.schema, &ckpt.kb, &ckpt.candidates)?;
        let stored = &ckpt.fingerprints;
        same("vocabulary", &stored.vocabulary, &found.vocabulary)?;
        same("schema", &stored.schema, &found.schema)?;
        same("kb", &stored.kb, &found.kb)?;
        same("candidates", &stored.candidates, &found.candidates)?;
        ckpt.check_shapes()?;
        Ok(ckpt)
    }

    /// Fails when the corpus's schema, KB or candidate list differ from the
    /// ones the checkpoint was trained with.
    pub fn check_corpus(&self, corpus: &Corpus) -> Result<()> {
        let schema = digest_with(|b| corpus.schema.write_to(b))?;
        let kb = digest_with(|b| corpus.kb.write_to(b))?;
        let candidates = sha256_hex(corpus.candidates.join("\n").as_bytes());
        same("schema", &self.fingerprints.schema, &schema)?;
        same("kb", &self.fingerprints.kb, &kb)?;
        same("candidates", &self.fingerprints.candidates, &candidates)?;
        Ok(())
    }
}
