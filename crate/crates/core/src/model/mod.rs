//! Personalized memory network: context hops, profile embedding, global
//! memory and the KB-preference bias, with analytic gradients.

mod network;

pub use network::{backward, forward, Accumulator, ForwardTrace, HopTrace, Prepared};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    dot, log_sum_exp, sigmoid, softmax, xavier_init_with, Matrix, SeedRng, Vector,
};

pub const DEFAULT_HOPS: usize = 3;
pub const DEFAULT_DIM: usize = 128;
pub const DEFAULT_CONTEXT_CAP: usize = 250;
pub const DEFAULT_GLOBAL_CAP: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Profile,
    Global,
    Preference,
}

impl std::str::FromStr for Component {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "profile" => Ok(Component::Profile),
            "global" => Ok(Component::Global),
            "preference" => Ok(Component::Preference),
            other => Err(Error::invalid(format!(
                "unknown component {other:?} (expected profile, global or preference)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub embedding_dim: usize,
    pub hops: usize,
    pub use_profile_embedding: bool,
    pub use_global_memory: bool,
    pub use_preference: bool,
    pub context_cap: usize,
    pub global_cap: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embedding_dim: DEFAULT_DIM,
            hops: DEFAULT_HOPS,
            use_profile_embedding: true,
            use_global_memory: true,
            use_preference: true,
            context_cap: DEFAULT_CONTEXT_CAP,
            global_cap: DEFAULT_GLOBAL_CAP,
        }
    }
}

impl ModelConfig {
    /// Plain memory network: every personalization component off.
    pub fn baseline() -> Self {
        ModelConfig {
            use_profile_embedding: false,
            use_global_memory: false,
            use_preference: false,
            ..Default::default()
        }
    }

    pub fn with_components(mut self, components: &[Component]) -> Self {
        self.use_profile_embedding = components.contains(&Component::Profile);
        self.use_global_memory = components.contains(&Component::Global);
        self.use_preference = components.contains(&Component::Preference);
        self
    }

    pub fn disable(mut self, component: Component) -> Self {
        match component {
            Component::Profile => self.use_profile_embedding = false,
            Component::Global => self.use_global_memory = false,
            Component::Preference => self.use_preference = false,
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim == 0 || self.hops == 0 {
            return Err(Error::invalid("embedding_dim and hops must be at least 1"));
        }
        if self.context_cap == 0 || self.global_cap == 0 {
            return Err(Error::invalid("memory caps must be at least 1"));
        }
        Ok(())
    }
}

/// Sizes the parameters are bound to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    /// `V + T + 2`
    pub feature_dim: usize,
    /// `d^(p)`
    pub profile_dim: usize,
    /// `K`
    pub kb_columns: usize,
}

/// The six trainable matrices. Also used as the gradient container.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParameters {
    /// memory/query embedding, `d × (V+T+2)`
    pub a: Matrix,
    /// candidate embedding, `d × (V+T+2)`
    pub w: Matrix,
    /// context hop transform, `d × d`
    pub r: Matrix,
    /// global hop transform, `d × d`
    pub r_g: Matrix,
    /// profile transform, `d × d^(p)`
    pub p: Matrix,
    /// preference transform, `K × d^(p)`
    pub e: Matrix,
}

pub type Gradients = ModelParameters;

impl ModelParameters {
    pub const NAMES: [&'static str; 6] = ["A", "W", "R", "R_g", "P", "E"];

    /// Xavier-uniform initialization; each matrix draws from its own stream.
    pub fn init(dims: ModelDims, embedding_dim: usize, seed: u64) -> Result<Self> {
        let base = SeedRng::new(seed);
        let d = embedding_dim;
        let init = |label: u64, rows: usize, cols: usize| {
            xavier_init_with(rows, cols, &mut base.fork(label))
        };
        Ok(ModelParameters {
            a: init(0, d, dims.feature_dim)?,
            w: init(1, d, dims.feature_dim)?,
            r: init(2, d, d)?,
            r_g: init(3, d, d)?,
            p: init(4, d, dims.profile_dim.max(1))?,
            e: init(5, dims.kb_columns.max(1), dims.profile_dim.max(1))?,
        })
    }

    pub fn zeros_like(&self) -> Self {
        let z = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        ModelParameters {
            a: z(&self.a),
            w: z(&self.w),
            r: z(&self.r),
            r_g: z(&self.r_g),
            p: z(&self.p),
            e: z(&self.e),
        }
    }

    pub fn dim(&self) -> usize {
        self.a.rows()
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            feature_dim: self.a.cols(),
            profile_dim: self.p.cols(),
            kb_columns: self.e.rows(),
        }
    }

    pub fn matrices(&self) -> [&Matrix; 6] {
        [&self.a, &self.w, &self.r, &self.r_g, &self.p, &self.e]
    }

    pub fn matrices_mut(&mut self) -> [&mut Matrix; 6] {
        [
            &mut self.a,
            &mut self.w,
            &mut self.r,
            &mut self.r_g,
            &mut self.p,
            &mut self.e,
        ]
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.matrices().iter().map(|m| m.shape()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.matrices().iter().all(|m| m.is_finite())
    }

    pub fn check_dims(&self, dims: ModelDims) -> Result<()> {
        let have = self.dims();
        if have.feature_dim != dims.feature_dim
            || have.profile_dim != dims.profile_dim.max(1)
            || have.kb_columns != dims.kb_columns.max(1)
        {
            return Err(Error::invalid(format!(
                "parameters are shaped for {have:?}, data needs {dims:?}"
            )));
        }
        Ok(())
    }
}

/// Attention over the first `valid_count` slots and the transformed read-out
/// `o = transform · Σ α_i m_i`. Slots past `valid_count` are padding.
pub fn hop(
    q: &[f64],
    memory: &[Vector],
    transform: &Matrix,
    valid_count: usize,
) -> Result<(Vector, Vector)> {
    if valid_count == 0 {
        return Err(Error::invalid("hop over an empty memory"));
    }
    if valid_count > memory.len() {
        return Err(Error::invalid("valid_count exceeds the number of slots"));
    }
    if transform.shape() != (q.len(), q.len()) {
        return Err(Error::invalid("hop transform must be d×d"));
    }
    let logits: Vec<f64> = memory.iter().map(|m| dot(q, m)).collect();
    let mask: Vec<bool> = (0..memory.len()).map(|i| i < valid_count).collect();
    let alpha = softmax(&logits, Some(&mask))?;
    let mut read = vec![0.0; q.len()];
    for (a, m) in alpha.iter().zip(memory).take(valid_count) {
        crate::numerics::axpy(*a, m, &mut read);
    }
    let o = crate::numerics::matvec(transform, &read)?;
    Ok((alpha, o))
}

/// `σ(p · r_i)` for each candidate embedding.
pub fn tendency_weights(p: &[f64], candidate_embeddings: &[Vector]) -> Result<Vector> {
    candidate_embeddings
        .iter()
        .map(|r| {
            if r.len() != p.len() {
                Err(Error::invalid("tendency: dimension mismatch"))
            } else {
                Ok(sigmoid(dot(p, r)))
            }
        })
        .collect()
}

/// Index of the largest probability; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in values.iter().enumerate() {
        if x > values[best] {
            best = i;
        }
    }
    best
}

pub fn predict(trace: &ForwardTrace) -> usize {
    argmax(&trace.probabilities)
}

/// Cross-entropy `-log r̂[true_index]` from the stabilized log-softmax.
pub fn loss(trace: &ForwardTrace, true_index: usize) -> Result<f64> {
    cross_entropy(&trace.logits, true_index)
}

pub fn cross_entropy(logits: &[f64], true_index: usize) -> Result<f64> {
    if true_index >= logits.len() {
        return Err(Error::invalid(format!(
            "true index {true_index} out of range for {} candidates",
            logits.len()
        )));
    }
    Ok(log_sum_exp(logits) - logits[true_index])
}
