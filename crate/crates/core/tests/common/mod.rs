#![allow(dead_code)]

use pmemn2n::data::{CandidateSet, DialogInstance};
use pmemn2n::encoding::{
    encode_candidate, encode_memory_utterance, BagOfWords, Profile, ProfileSchema, Speaker,
    Vocabulary,
};
use pmemn2n::kb::{mentioned_items, KbFact, KnowledgeBase, MentionRule};
use pmemn2n::model::{backward, forward, loss, ModelConfig, ModelDims, ModelParameters};
use pmemn2n::numerics::{Matrix, SeedRng};
use rand::seq::SliceRandom;
use rand::Rng;

/// Small hand-sized problem: 20 words, 3 KB columns, 5 candidates.
pub struct Fixture {
    pub vocab: Vocabulary,
    pub schema: ProfileSchema,
    pub kb: KnowledgeBase,
    pub candidates: CandidateSet,
    pub global_table: Vec<BagOfWords>,
    pub words: Vec<String>,
}

pub fn fixture() -> Fixture {
    let kb = KnowledgeBase::load(&[
        KbFact::new("it0", "c0", "it0_c0"),
        KbFact::new("it0", "c1", "it0_c1"),
        KbFact::new("it0", "c2", "it0_c2"),
        KbFact::new("it1", "c0", "it1_c0"),
        KbFact::new("it1", "c1", "it1_c1"),
        KbFact::new("it1", "c2", "it1_c2"),
    ])
    .unwrap();
    let mut words: Vec<String> = (0..12).map(|i| format!("w{i}")).collect();
    words.extend(["it0", "it1"].map(String::from));
    for i in 0..2 {
        for j in 0..3 {
            words.push(format!("it{i}_c{j}"));
        }
    }
    let vocab = Vocabulary::from_texts(words.iter().map(String::as_str), 10).unwrap();
    assert_eq!(vocab.base_size(), 20);
    let schema = ProfileSchema::new(vec![
        ("gender".into(), vec!["male".into(), "female".into()]),
        (
            "age".into(),
            vec!["young".into(), "middle".into(), "elderly".into()],
        ),
    ])
    .unwrap();
    let candidates = CandidateSet::new(
        vec![
            "w0 it0_c0".into(),
            "w1 it0_c1".into(),
            "w2 w3".into(),
            "w4 it1_c2".into(),
            "w5 w6 w6".into(),
        ],
        &vocab,
        &kb,
    )
    .unwrap();
    let global_table = (0..6)
        .map(|i| {
            encode_memory_utterance(
                &format!("w{} w{}", i, (i * 5 + 3) % 12),
                i,
                if i % 2 == 0 {
                    Speaker::User
                } else {
                    Speaker::Bot
                },
                &vocab,
            )
            .unwrap()
        })
        .collect();
    Fixture {
        vocab,
        schema,
        kb,
        candidates,
        global_table,
        words,
    }
}

impl Fixture {
    pub fn dims(&self) -> ModelDims {
        ModelDims {
            feature_dim: self.vocab.dim(),
            profile_dim: self.schema.dim(),
            kb_columns: self.kb.column_count(),
        }
    }

    pub fn params(&self, d: usize, seed: u64) -> ModelParameters {
        ModelParameters::init(self.dims(), d, seed).unwrap()
    }

    pub fn profile(&self, gender: &str, age: &str) -> Profile {
        self.schema.profile_from_values(&[gender, age]).unwrap()
    }

    /// Random instance with `n_ctx` context slots and `n_global` global ids.
    pub fn random_instance(&self, seed: u64, n_ctx: usize, n_global: usize) -> DialogInstance {
        let mut rng = SeedRng::new(seed);
        let utter = |rng: &mut SeedRng| {
            let n = rng.gen_range(1..4);
            (0..n)
                .map(|_| self.words.choose(rng).unwrap().clone())
                .collect::<Vec<_>>()
                .join(" ")
        };
        let texts: Vec<String> = (0..n_ctx).map(|_| utter(&mut rng)).collect();
        let query = format!("{} it0 it1", utter(&mut rng));
        let context = texts
            .iter()
            .enumerate()
            .map(|(t, s)| {
                let sp = if t % 2 == 0 {
                    Speaker::User
                } else {
                    Speaker::Bot
                };
                encode_memory_utterance(s, t, sp, &self.vocab).unwrap()
            })
            .collect();
        let mentioned = mentioned_items(
            texts.iter().map(String::as_str).chain([query.as_str()]),
            &self.kb,
            MentionRule::ItemName,
        );
        let mut global: Vec<u32> = (0..self.global_table.len() as u32).collect();
        global.shuffle(&mut rng);
        global.truncate(n_global);
        global.sort_unstable();
        let genders = ["male", "female"];
        let ages = ["young", "middle", "elderly"];
        let profile = self.profile(
            genders.choose(&mut rng).unwrap(),
            ages.choose(&mut rng).unwrap(),
        );
        DialogInstance {
            dialog_id: 0,
            task_id: 0,
            turn: 0,
            context,
            query: encode_candidate(&query, &self.vocab),
            global,
            profile_onehot: self.schema.encode(&profile).unwrap(),
            profile,
            mentioned: mentioned.into_iter().collect(),
            true_index: rng.gen_range(0..self.candidates.len()),
        }
    }
}

pub const FD_EPS: f64 = 1e-5;

/// Largest per-entry relative error between the analytic gradient and a
/// central finite difference of the loss, with the offending entry.
pub fn gradient_error(
    fx: &Fixture,
    params: &ModelParameters,
    config: &ModelConfig,
    inst: &DialogInstance,
) -> (f64, String) {
    let (_, grads) = backward(inst, params, config, &fx.candidates, &fx.global_table).unwrap();
    let eval = |p: &ModelParameters| {
        let trace = forward(inst, p, config, &fx.candidates, &fx.global_table).unwrap();
        loss(&trace, inst.true_index).unwrap()
    };
    let mut worst = (0.0, String::new());
    for m in 0..6 {
        let n = params.matrices()[m].data().len();
        for i in 0..n {
            let mut plus = params.clone();
            plus.matrices_mut()[m].data_mut()[i] += FD_EPS;
            let mut minus = params.clone();
            minus.matrices_mut()[m].data_mut()[i] -= FD_EPS;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_EPS);
            let analytic = grads.matrices()[m].data()[i];
            let denom = analytic.abs().max(numeric.abs()).max(1e-7);
            let rel = (analytic - numeric).abs() / denom;
            if rel > worst.0 {
                worst = (
                    rel,
                    format!(
                        "{}[{i}]: analytic {analytic}, numeric {numeric}",
                        ModelParameters::NAMES[m]
                    ),
                );
            }
        }
    }
    worst
}

/// Plain end-to-end memory network written from dense one-hot vectors:
/// `u ← u + R Σ softmax(u·A x_i) A x_i` for `hops` rounds, then `u · W y_k`.
pub fn plain_memn2n_logits(
    a: &Matrix,
    r: &Matrix,
    w: &Matrix,
    context: &[BagOfWords],
    query: &BagOfWords,
    candidates: &[BagOfWords],
    hops: usize,
) -> Vec<f64> {
    let d = a.rows();
    let v = a.cols();
    let dense = |bag: &BagOfWords| {
        let mut x = vec![0.0; v];
        for f in 0..v {
            x[f] = bag.count(f) as f64;
        }
        x
    };
    let project = |m: &Matrix, x: &[f64]| {
        let mut out = vec![0.0; m.rows()];
        for (row, o) in out.iter_mut().enumerate() {
            for (col, xc) in x.iter().enumerate() {
                if *xc != 0.0 {
                    *o += xc * m.get(row, col);
                }
            }
        }
        out
    };
    let inner = |x: &[f64], y: &[f64]| {
        let mut s = 0.0;
        for i in 0..x.len() {
            s += x[i] * y[i];
        }
        s
    };
    let memory: Vec<Vec<f64>> = context.iter().map(|b| project(a, &dense(b))).collect();
    let mut u = project(a, &dense(query));
    for _ in 0..hops {
        if memory.is_empty() {
            continue;
        }
        let scores: Vec<f64> = memory.iter().map(|m| inner(&u, m)).collect();
        let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
        let total: f64 = exps.iter().sum();
        let mut o = vec![0.0; d];
        for (e, m) in exps.iter().zip(&memory) {
            let alpha = e / total;
            for i in 0..d {
                o[i] += alpha * m[i];
            }
        }
        let ro = project(r, &o);
        for i in 0..d {
            u[i] += ro[i];
        }
    }
    candidates
        .iter()
        .map(|y| inner(&u, &project(w, &dense(y))))
        .collect()
}
