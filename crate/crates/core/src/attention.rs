//! Step extraction and the procedure-aware cross-attention decoder.
//!
//! Each query step attends only to the matching exemplar step. A decoder
//! layer is
//!
//! ```text
//! S' = MCA(LN(S), Z) + S
//! S  = MLP(LN(S')) + S'
//! ```
//!
//! with the MLP being two linear layers around a GELU.

use std::ops::Range;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tsa_diffcore::{resample_rows, Bound, Graph, NodeId, ParamStore, Tensor};

use crate::data::{frame_to_feature_index, FeatureSequence};
use crate::error::CoreError;
use crate::nn;

pub const PREFIX: &str = "dec";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderConfig {
    /// Number of decoder layers `R`.
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    /// Frames per resampled step.
    pub l_step: usize,
    pub mlp_ratio: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            layers: 3,
            heads: 8,
            d_model: 1024,
            l_step: 5,
            mlp_ratio: 4,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<(), CoreError> {
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(CoreError::HeadDivisibility {
                width: self.d_model,
                heads: self.heads,
            });
        }
        if self.layers == 0 || self.l_step == 0 || self.mlp_ratio == 0 {
            return Err(CoreError::InvalidConfig("layers, l_step and mlp_ratio must be positive".into()));
        }
        Ok(())
    }
}

/// Row ranges `[0, t1)`, `[t1, t2)`, …, `[t_L, T)` of the L+1 steps cut by
/// 1-based transitions `t_k` (the last frame of step k).
pub fn step_ranges(t: usize, transitions: &[usize]) -> Result<Vec<Range<usize>>, CoreError> {
    let degenerate = || CoreError::DegenerateStep {
        transitions: transitions.to_vec(),
        t,
    };
    let mut ranges = Vec::with_capacity(transitions.len() + 1);
    let mut start = 0;
    for &tk in transitions {
        if tk <= start || tk >= t {
            return Err(degenerate());
        }
        ranges.push(start..tk);
        start = tk;
    }
    ranges.push(start..t);
    Ok(ranges)
}

/// Splits a `T × D` matrix into its L+1 steps.
pub fn extract_steps(features: &Tensor, transitions: &[usize]) -> Result<Vec<Tensor>, CoreError> {
    let d = features.cols();
    step_ranges(features.rows(), transitions)?
        .into_iter()
        .map(|r| Ok(Tensor::matrix(r.len(), d, features.data()[r.start * d..r.end * d].to_vec())?))
        .collect()
}

/// Linear interpolation of a step to exactly `l_step` frames, endpoints
/// aligned.
pub fn resample_step(step: &Tensor, l_step: usize) -> Tensor {
    resample_rows(step, l_step)
}

/// Fixed sinusoidal encodings, `n × d`.
pub fn positional_encoding(n: usize, d: usize) -> Tensor {
    let mut out = vec![0.0; n * d];
    for pos in 0..n {
        for i in 0..d {
            let freq = 10000f64.powf(-((i / 2 * 2) as f64) / d as f64);
            let a = pos as f64 * freq;
            out[pos * d + i] = if i % 2 == 0 { a.sin() } else { a.cos() };
        }
    }
    Tensor::matrix(n, d, out).expect("shape")
}

/// Maps transitions from a timeline of `t_src` frames onto `t` feature
/// steps, then nudges them to be strictly increasing inside `1..t` so that
/// every step keeps at least one frame.
pub fn fit_transitions(transitions: &[usize], t_src: usize, t: usize) -> Result<Vec<usize>, CoreError> {
    let l = transitions.len();
    if t < l + 1 {
        return Err(CoreError::DegenerateStep {
            transitions: transitions.to_vec(),
            t,
        });
    }
    let mut out = transitions
        .iter()
        .map(|&f| frame_to_feature_index(f, t_src, t))
        .collect::<Result<Vec<_>, _>>()?;
    let mut floor = 0;
    for c in out.iter_mut() {
        *c = (*c).max(floor + 1);
        floor = *c;
    }
    let mut ceil = t;
    for c in out.iter_mut().rev() {
        *c = (*c).min(ceil - 1);
        ceil = *c;
    }
    Ok(out)
}

/// Query tokens: one per frame, each step resampled to `l_step` frames and
/// position-encoded.
pub fn query_tokens(features: &FeatureSequence, transitions: &[usize], l_step: usize) -> Result<Vec<Tensor>, CoreError> {
    let pe = positional_encoding(l_step, features.d);
    extract_steps(&features.frame_tokens(), transitions)?
        .iter()
        .map(|s| add(&resample_step(s, l_step), &pe))
        .collect()
}

/// Exemplar tokens: every patch of every resampled frame, `(l_step·P) × D`
/// frame-major, each token carrying the encoding of its frame.
pub fn exemplar_tokens(features: &FeatureSequence, transitions: &[usize], l_step: usize) -> Result<Vec<Tensor>, CoreError> {
    if features.p == 1 {
        return query_tokens(features, transitions, l_step);
    }
    let (p, d) = (features.p, features.d);
    let pe = positional_encoding(l_step, d);
    step_ranges(features.t, transitions)?
        .into_iter()
        .map(|r| {
            let tokens = features.patch_tokens(r.start, r.len());
            let mut out = vec![0.0; l_step * p * d];
            for patch in 0..p {
                let series: Vec<f64> = (0..r.len())
                    .flat_map(|f| tokens.row(f * p + patch).to_vec())
                    .collect();
                let series = resample_step(&Tensor::matrix(r.len(), d, series)?, l_step);
                for f in 0..l_step {
                    let dst = &mut out[(f * p + patch) * d..(f * p + patch + 1) * d];
                    for ((o, v), e) in dst.iter_mut().zip(series.row(f)).zip(pe.row(f)) {
                        *o = v + e;
                    }
                }
            }
            Ok(Tensor::matrix(l_step * p, d, out)?)
        })
        .collect()
}

fn add(a: &Tensor, b: &Tensor) -> Result<Tensor, CoreError> {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Ok(Tensor::new(a.shape().to_vec(), data)?)
}

pub fn init_params(store: &mut ParamStore, cfg: &DecoderConfig, rng: &mut ChaCha8Rng) -> Result<(), CoreError> {
    cfg.validate()?;
    let d = cfg.d_model;
    for r in 0..cfg.layers {
        let name = |s: &str| format!("{PREFIX}.{r}.{s}");
        nn::init_layer_norm(store, &name("ln1"), d);
        nn::init_linear(store, &name("wq"), d, d, rng);
        // Keys carry no bias.
        nn::init_weight(store, &name("wk"), d, d, rng);
        nn::init_linear(store, &name("wv"), d, d, rng);
        nn::init_linear(store, &name("wo"), d, d, rng);
        nn::init_layer_norm(store, &name("ln2"), d);
        nn::init_linear(store, &name("fc1"), d, cfg.mlp_ratio * d, rng);
        nn::init_linear(store, &name("fc2"), cfg.mlp_ratio * d, d, rng);
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct DecoderOutput {
    /// Procedure-aware embedding per step, query-shaped.
    pub steps: Vec<NodeId>,
    /// Attention node per step and layer; see [`Graph::attention_weights`].
    pub attention: Vec<Vec<NodeId>>,
}

/// Runs every query step through `R` cross-attention layers over the
/// matching exemplar step.
pub fn decoder_forward(
    g: &mut Graph,
    p: &Bound,
    cfg: &DecoderConfig,
    query: &[NodeId],
    exemplar: &[NodeId],
) -> Result<DecoderOutput, CoreError> {
    cfg.validate()?;
    if query.len() != exemplar.len() {
        return Err(CoreError::LengthMismatch(query.len(), exemplar.len()));
    }
    let mut out = DecoderOutput {
        steps: Vec::with_capacity(query.len()),
        attention: Vec::with_capacity(query.len()),
    };
    for (&q, &z) in query.iter().zip(exemplar) {
        for id in [q, z] {
            if g.value(id).cols() != cfg.d_model {
                return Err(tsa_diffcore::DiffError::ShapeMismatch {
                    op: "decoder_forward",
                    expected: vec![g.value(id).rows(), cfg.d_model],
                    got: g.value(id).shape().to_vec(),
                }
                .into());
            }
        }
        let mut s = q;
        let mut maps = Vec::with_capacity(cfg.layers);
        for r in 0..cfg.layers {
            let name = |n: &str| format!("{PREFIX}.{r}.{n}");
            let h = nn::layer_norm(g, p, &name("ln1"), s)?;
            let qh = nn::linear(g, p, &name("wq"), h)?;
            let kh = g.matmul(z, p.get(&name("wk.w"))?)?;
            let vh = nn::linear(g, p, &name("wv"), z)?;
            let a = g.attention(qh, kh, vh, cfg.heads)?;
            maps.push(a);
            let a = nn::linear(g, p, &name("wo"), a)?;
            let s1 = g.add(a, s)?;
            let h = nn::layer_norm(g, p, &name("ln2"), s1)?;
            let h = nn::linear(g, p, &name("fc1"), h)?;
            let h = g.gelu(h)?;
            let h = nn::linear(g, p, &name("fc2"), h)?;
            s = g.add(h, s1)?;
        }
        out.steps.push(s);
        out.attention.push(maps);
    }
    Ok(out)
}
