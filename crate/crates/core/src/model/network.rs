use std::collections::BTreeSet;

use crate::data::{CandidateSet, DialogInstance};
use crate::encoding::{embed_bag_into, BagOfWords};
use crate::error::{Error, Result};
use crate::kb::bias_from_coords;
use crate::numerics::{
    axpy, dot, matvec, matvec_transpose, relu, sigmoid, softmax_into, Matrix, Vector,
};

use super::{cross_entropy, Gradients, ModelConfig, ModelParameters};

/// Attention record of one hop over one memory.
#[derive(Clone, Debug, Default)]
pub struct HopTrace {
    /// query entering the hop
    pub query: Vector,
    /// attention over the memory slots (empty for an empty memory)
    pub attention: Vector,
    /// `Σ α_i m_i`
    pub read: Vector,
}

#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// `A Φ(c^u_t)`
    pub initial_query: Vector,
    /// embedded context slots, row per slot
    pub context_slots: Vec<Vector>,
    pub context_hops: Vec<HopTrace>,
    pub global_hops: Vec<HopTrace>,
    /// `q_{N+1}`
    pub final_query: Vector,
    /// `q^(g)` after the last hop (equals the initial query when global memory is off)
    pub global_query: Vector,
    /// `q⁺`
    pub combined_query: Vector,
    /// `p = P â` (zero when profile embedding is off)
    pub profile_embedding: Vector,
    /// `E â` before the ReLU
    pub preference_logits: Vector,
    /// `v = ReLU(E â)`
    pub preference: Vector,
    pub bias: Vector,
    /// `σ(p · r_i)`, all ones when profile embedding is off
    pub tendency: Vector,
    /// `q⁺ · r_i` before tendency scaling and bias
    pub raw_scores: Vector,
    pub logits: Vector,
    pub probabilities: Vector,
}

/// Parameters bound to a candidate set and global-utterance table, with the
/// candidate and global embeddings computed once. Rebuild after every update.
pub struct Prepared<'a> {
    params: &'a ModelParameters,
    config: &'a ModelConfig,
    candidates: &'a CandidateSet,
    global_table: &'a [BagOfWords],
    d: usize,
    candidate_embeddings: Vec<f64>,
    global_embeddings: Vec<f64>,
}

impl<'a> Prepared<'a> {
    pub fn new(
        params: &'a ModelParameters,
        config: &'a ModelConfig,
        candidates: &'a CandidateSet,
        global_table: &'a [BagOfWords],
    ) -> Result<Self> {
        config.validate()?;
        let d = params.dim();
        if d != config.embedding_dim {
            return Err(Error::invalid(format!(
                "parameters have dimension {d}, config says {}",
                config.embedding_dim
            )));
        }
        let feature_dim = params.a.cols();
        let embed_all = |bags: &[BagOfWords], m: &Matrix| -> Result<Vec<f64>> {
            let mut out = vec![0.0; bags.len() * d];
            for (bag, row) in bags.iter().zip(out.chunks_mut(d)) {
                if bag.max_feature().is_some_and(|f| f >= feature_dim) {
                    return Err(Error::invalid("bag feature outside the embedding"));
                }
                embed_bag_into(bag, m, row);
            }
            Ok(out)
        };
        let candidate_embeddings = embed_all(candidates.bags(), &params.w)?;
        let global_embeddings = if config.use_global_memory {
            embed_all(global_table, &params.a)?
        } else {
            Vec::new()
        };
        Ok(Prepared {
            params,
            config,
            candidates,
            global_table,
            d,
            candidate_embeddings,
            global_embeddings,
        })
    }

    pub fn params(&self) -> &ModelParameters {
        self.params
    }

    pub fn config(&self) -> &ModelConfig {
        self.config
    }

    pub fn candidates(&self) -> &CandidateSet {
        self.candidates
    }

    pub fn candidate_embedding(&self, k: usize) -> &[f64] {
        &self.candidate_embeddings[k * self.d..(k + 1) * self.d]
    }

    fn global_slot(&self, id: u32) -> &[f64] {
        let i = id as usize;
        &self.global_embeddings[i * self.d..(i + 1) * self.d]
    }

    fn check_instance(&self, inst: &DialogInstance) -> Result<()> {
        if self.candidates.is_empty() {
            return Err(Error::invalid("empty candidate set"));
        }
        let feature_dim = self.params.a.cols();
        let in_range = |b: &BagOfWords| b.max_feature().is_none_or(|f| f < feature_dim);
        if !in_range(&inst.query) || !inst.context.iter().all(in_range) {
            return Err(Error::invalid("instance bag outside the embedding"));
        }
        if inst.profile_onehot.len() != self.params.p.cols()
            && (self.config.use_profile_embedding || self.config.use_preference)
        {
            return Err(Error::invalid("profile vector does not match P"));
        }
        if self.config.use_global_memory
            && inst
                .global
                .iter()
                .any(|&g| g as usize >= self.global_table.len())
        {
            return Err(Error::invalid("global slot outside the utterance table"));
        }
        Ok(())
    }

    /// Response distribution for one instance.
    pub fn forward(&self, inst: &DialogInstance) -> Result<ForwardTrace> {
        self.check_instance(inst)?;
        let d = self.d;
        let cfg = self.config;
        let prm = self.params;

        let mut q0 = vec![0.0; d];
        embed_bag_into(&inst.query, &prm.a, &mut q0);

        let context_slots: Vec<Vector> = inst
            .context
            .iter()
            .map(|bag| {
                let mut m = vec![0.0; d];
                embed_bag_into(bag, &prm.a, &mut m);
                m
            })
            .collect();

        let profile = inst.profile_onehot.as_slice();
        let p = if cfg.use_profile_embedding {
            matvec(&prm.p, profile)?
        } else {
            vec![0.0; d]
        };

        let mut q = q0.clone();
        let mut qg = q0.clone();
        let mut context_hops = Vec::with_capacity(cfg.hops);
        let mut global_hops = Vec::new();
        let mut scratch = Vec::new();
        let mut logits_buf = Vec::new();
        for _ in 0..cfg.hops {
            let hop = attend(
                &q,
                context_slots.iter().map(Vec::as_slice),
                &mut logits_buf,
                &mut scratch,
            );
            let mut next = q.clone();
            if cfg.use_profile_embedding {
                for (x, pi) in next.iter_mut().zip(&p) {
                    *x += pi;
                }
            }
            if !hop.attention.is_empty() {
                let o = matvec(&prm.r, &hop.read)?;
                for (x, oi) in next.iter_mut().zip(&o) {
                    *x += oi;
                }
            }
            context_hops.push(hop);
            q = next;

            if cfg.use_global_memory {
                let hop = attend(
                    &qg,
                    inst.global.iter().map(|&g| self.global_slot(g)),
                    &mut logits_buf,
                    &mut scratch,
                );
                if !hop.attention.is_empty() {
                    let o = matvec(&prm.r_g, &hop.read)?;
                    for (x, oi) in qg.iter_mut().zip(&o) {
                        *x += oi;
                    }
                }
                global_hops.push(hop);
            }
        }

        let combined: Vector = if cfg.use_global_memory {
            q.iter().zip(&qg).map(|(a, b)| a + b).collect()
        } else {
            q.clone()
        };

        let k_cols = prm.e.rows();
        let (pref_logits, preference) = if cfg.use_preference {
            let pre = matvec(&prm.e, profile)?;
            let v = pre.iter().map(|&x| relu(x)).collect();
            (pre, v)
        } else {
            (vec![0.0; k_cols], vec![0.0; k_cols])
        };
        let bias = if cfg.use_preference {
            let mentioned: BTreeSet<usize> = inst.mentioned.iter().copied().collect();
            bias_from_coords(&preference, self.candidates.coords(), &mentioned)
        } else {
            vec![0.0; self.candidates.len()]
        };

        let c = self.candidates.len();
        let mut raw_scores = Vec::with_capacity(c);
        let mut tendency = Vec::with_capacity(c);
        let mut logits = Vec::with_capacity(c);
        for k in 0..c {
            let r = self.candidate_embedding(k);
            let raw = dot(&combined, r);
            let mut logit = raw;
            let t = if cfg.use_profile_embedding {
                let t = sigmoid(dot(&p, r));
                logit = t * raw;
                t
            } else {
                1.0
            };
            if cfg.use_preference {
                logit += bias[k];
            }
            raw_scores.push(raw);
            tendency.push(t);
            logits.push(logit);
        }
        let mut probabilities = Vec::with_capacity(c);
        softmax_into(&logits, &mut probabilities);

        Ok(ForwardTrace {
            initial_query: q0,
            context_slots,
            context_hops,
            global_hops,
            final_query: q,
            global_query: qg,
            combined_query: combined,
            profile_embedding: p,
            preference_logits: pref_logits,
            preference,
            bias,
            tendency,
            raw_scores,
            logits,
            probabilities,
        })
    }

    /// Adds `scale · ∂loss/∂θ` for one instance into `acc` and returns the loss.
    pub fn backward(
        &self,
        inst: &DialogInstance,
        trace: &ForwardTrace,
        acc: &mut Accumulator,
        scale: f64,
    ) -> Result<f64> {
        let loss = cross_entropy(&trace.logits, inst.true_index)?;
        let d = self.d;
        let cfg = self.config;
        let prm = self.params;
        let grads = &mut acc.grads;
        let profile = inst.profile_onehot.as_slice();

        let mut dlogit = trace.probabilities.clone();
        dlogit[inst.true_index] -= 1.0;
        dlogit.iter_mut().for_each(|x| *x *= scale);

        let q_plus = &trace.combined_query;
        let p = &trace.profile_embedding;
        let mut dq_plus = vec![0.0; d];
        let mut dp = vec![0.0; d];
        let mut dv = vec![0.0; prm.e.rows()];
        let mentioned: BTreeSet<usize> = inst.mentioned.iter().copied().collect();
        for (k, &g) in dlogit.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let r = self.candidate_embedding(k);
            let t = trace.tendency[k];
            let dr = &mut acc.candidate_grads[k * d..(k + 1) * d];
            // logit = t·(q⁺·r) + b,  t = σ(p·r)
            axpy(g * t, r, &mut dq_plus);
            axpy(g * t, q_plus, dr);
            if cfg.use_profile_embedding {
                let dt = g * trace.raw_scores[k] * t * (1.0 - t);
                axpy(dt, p, dr);
                axpy(dt, r, &mut dp);
            }
            if cfg.use_preference {
                if let Some((i, j)) = self.candidates.coords()[k] {
                    if mentioned.contains(&i) {
                        dv[j] += g;
                    }
                }
            }
        }

        let mut dq = dq_plus.clone();
        let mut dqg = if cfg.use_global_memory {
            dq_plus
        } else {
            vec![0.0; d]
        };
        let mut d_context = vec![0.0; trace.context_slots.len() * d];
        for h in (0..cfg.hops).rev() {
            if cfg.use_global_memory {
                let hop = &trace.global_hops[h];
                if !hop.attention.is_empty() {
                    let slots: Vec<&[f64]> =
                        inst.global.iter().map(|&g| self.global_slot(g)).collect();
                    let extra =
                        hop_backward(&dqg, &prm.r_g, hop, &slots, &mut grads.r_g, |i, s, v| {
                            let id = inst.global[i] as usize;
                            axpy(s, v, &mut acc.global_grads[id * d..(id + 1) * d]);
                        })?;
                    for (x, e) in dqg.iter_mut().zip(&extra) {
                        *x += e;
                    }
                }
            }
            if cfg.use_profile_embedding {
                for (x, y) in dp.iter_mut().zip(&dq) {
                    *x += y;
                }
            }
            let hop = &trace.context_hops[h];
            if !hop.attention.is_empty() {
                let slots: Vec<&[f64]> = trace.context_slots.iter().map(Vec::as_slice).collect();
                let extra = hop_backward(&dq, &prm.r, hop, &slots, &mut grads.r, |i, s, v| {
                    axpy(s, v, &mut d_context[i * d..(i + 1) * d]);
                })?;
                for (x, e) in dq.iter_mut().zip(&extra) {
                    *x += e;
                }
            }
        }
        if cfg.use_global_memory {
            for (x, y) in dq.iter_mut().zip(&dqg) {
                *x += y;
            }
        }

        for &(f, c) in inst.query.entries() {
            grads.a.add_to_column(f as usize, c as f64, &dq);
        }
        for (bag, dm) in inst.context.iter().zip(d_context.chunks(d)) {
            for &(f, c) in bag.entries() {
                grads.a.add_to_column(f as usize, c as f64, dm);
            }
        }
        if cfg.use_profile_embedding {
            grads.p.add_outer(1.0, &dp, profile);
        }
        if cfg.use_preference {
            let dpre: Vec<f64> = dv
                .iter()
                .zip(&trace.preference_logits)
                .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                .collect();
            grads.e.add_outer(1.0, &dpre, profile);
        }
        Ok(loss)
    }
}

/// Attention hop without the output transform.
fn attend<'s>(
    q: &[f64],
    slots: impl Iterator<Item = &'s [f64]> + Clone,
    logits: &mut Vec<f64>,
    scratch: &mut Vec<f64>,
) -> HopTrace {
    logits.clear();
    logits.extend(slots.clone().map(|m| dot(q, m)));
    let mut read = vec![0.0; q.len()];
    if logits.is_empty() {
        return HopTrace {
            query: q.to_vec(),
            attention: Vec::new(),
            read,
        };
    }
    softmax_into(logits, scratch);
    for (a, m) in scratch.iter().zip(slots) {
        axpy(*a, m, &mut read);
    }
    HopTrace {
        query: q.to_vec(),
        attention: scratch.clone(),
        read,
    }
}

/// Backpropagates `q_out = q_in + transform · Σ α_i m_i` (+ terms handled by
/// the caller). Accumulates into `d_transform`, reports `∂/∂m_i` through
/// `slot_grad(i, scale, vector)` and returns the extra `∂/∂q_in` coming
/// through the attention.
fn hop_backward(
    dq_out: &[f64],
    transform: &Matrix,
    hop: &HopTrace,
    slots: &[&[f64]],
    d_transform: &mut Matrix,
    mut slot_grad: impl FnMut(usize, f64, &[f64]),
) -> Result<Vector> {
    d_transform.add_outer(1.0, dq_out, &hop.read);
    let d_read = matvec_transpose(transform, dq_out)?;
    let d_alpha: Vec<f64> = slots.iter().map(|m| dot(&d_read, m)).collect();
    let mean: f64 = hop.attention.iter().zip(&d_alpha).map(|(a, g)| a * g).sum();
    let mut dq_in = vec![0.0; dq_out.len()];
    for (i, m) in slots.iter().enumerate() {
        let a = hop.attention[i];
        let dz = a * (d_alpha[i] - mean);
        slot_grad(i, a, &d_read);
        slot_grad(i, dz, &hop.query);
        axpy(dz, m, &mut dq_in);
    }
    Ok(dq_in)
}

/// Batch gradient buffer. Candidate and global-slot gradients are kept per
/// embedded row and scattered into `W`/`A` once in [`Accumulator::finish`].
pub struct Accumulator {
    grads: Gradients,
    candidate_grads: Vec<f64>,
    global_grads: Vec<f64>,
    d: usize,
}

impl Accumulator {
    pub fn new(prepared: &Prepared<'_>) -> Self {
        let d = prepared.d;
        Accumulator {
            grads: prepared.params.zeros_like(),
            candidate_grads: vec![0.0; prepared.candidates.len() * d],
            global_grads: vec![0.0; prepared.global_embeddings.len()],
            d,
        }
    }

    pub fn finish(mut self, prepared: &Prepared<'_>) -> Gradients {
        let d = self.d;
        for (bag, g) in prepared
            .candidates
            .bags()
            .iter()
            .zip(self.candidate_grads.chunks(d))
        {
            if g.iter().all(|&x| x == 0.0) {
                continue;
            }
            for &(f, c) in bag.entries() {
                self.grads.w.add_to_column(f as usize, c as f64, g);
            }
        }
        if !self.global_grads.is_empty() {
            for (bag, g) in prepared
                .global_table
                .iter()
                .zip(self.global_grads.chunks(d))
            {
                if g.iter().all(|&x| x == 0.0) {
                    continue;
                }
                for &(f, c) in bag.entries() {
                    self.grads.a.add_to_column(f as usize, c as f64, g);
                }
            }
        }
        self.grads
    }
}

/// One-shot forward pass.
pub fn forward(
    instance: &DialogInstance,
    params: &ModelParameters,
    config: &ModelConfig,
    candidates: &CandidateSet,
    global_table: &[BagOfWords],
) -> Result<ForwardTrace> {
    Prepared::new(params, config, candidates, global_table)?.forward(instance)
}

/// Analytic gradient of the instance loss with respect to all six matrices.
pub fn backward(
    instance: &DialogInstance,
    params: &ModelParameters,
    config: &ModelConfig,
    candidates: &CandidateSet,
    global_table: &[BagOfWords],
) -> Result<(f64, Gradients)> {
    let prepared = Prepared::new(params, config, candidates, global_table)?;
    let trace = prepared.forward(instance)?;
    let mut acc = Accumulator::new(&prepared);
    let loss = prepared.backward(instance, &trace, &mut acc, 1.0)?;
    Ok((loss, acc.finish(&prepared)))
}
