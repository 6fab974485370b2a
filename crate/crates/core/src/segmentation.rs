//! Procedure segmentation: the down-up block `b1`, the per-frame MLP `b2`,
//! windowed transition decoding and the framewise BCE objective.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tsa_diffcore::{Axis, Bound, Graph, NodeId, ParamStore, Tensor};

use crate::error::CoreError;
use crate::nn;

pub const PREFIX: &str = "seg";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegConfig {
    /// Number of step transitions `L`.
    pub transitions: usize,
    /// Output timeline length.
    pub t_out: usize,
    /// `(m, n)` per b1 sub-block: channel width and output length.
    pub blocks: Vec<(usize, usize)>,
    pub kernel: usize,
}

impl Default for SegConfig {
    fn default() -> Self {
        Self {
            transitions: 2,
            t_out: 96,
            blocks: vec![(1024, 12), (512, 24), (256, 48), (128, 96)],
            kernel: 3,
        }
    }
}

impl SegConfig {
    pub fn validate(&self, d_in: usize) -> Result<(), CoreError> {
        let bad = |m: String| Err(CoreError::InvalidConfig(m));
        if self.transitions == 0 {
            return bad("segmentation needs at least one transition".into());
        }
        if self.t_out < self.transitions {
            return bad(format!("t_out {} cannot host {} transitions", self.t_out, self.transitions));
        }
        if self.kernel % 2 == 0 {
            return bad("convolution kernel must be odd".into());
        }
        let Some(&(_, last_n)) = self.blocks.last() else {
            return bad("b1 needs at least one sub-block".into());
        };
        if last_n != self.t_out {
            return bad(format!("last sub-block length {last_n} differs from t_out {}", self.t_out));
        }
        if self.blocks.windows(2).any(|w| w[1].1 <= w[0].1) {
            return bad("sub-block lengths must strictly increase".into());
        }
        if self.blocks.windows(2).any(|w| w[1].0 >= w[0].0) {
            return bad("sub-block widths must strictly decrease".into());
        }
        if self.blocks.iter().any(|&(m, n)| m == 0 || n == 0) || self.blocks[0].0 > d_in {
            return bad(format!("sub-block widths must lie in 1..={d_in}"));
        }
        Ok(())
    }

    pub fn hidden(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.0)
    }
}

pub fn init_params(store: &mut ParamStore, cfg: &SegConfig, d_in: usize, rng: &mut ChaCha8Rng) -> Result<(), CoreError> {
    cfg.validate(d_in)?;
    let mut c_in = d_in;
    for (i, &(m, _)) in cfg.blocks.iter().enumerate() {
        nn::init_conv(store, &format!("{PREFIX}.b1.{i}.conv1"), c_in, 2 * m, cfg.kernel, rng);
        nn::init_conv(store, &format!("{PREFIX}.b1.{i}.conv2"), 2 * m, 2 * m, cfg.kernel, rng);
        c_in = m;
    }
    let h = cfg.hidden();
    nn::init_mlp3(store, &format!("{PREFIX}.b2"), [h, h, h, cfg.transitions], rng);
    // Start every frame near the prior of one transition per row.
    if cfg.t_out > 1 {
        let prior = (1.0 / (cfg.t_out as f64 - 1.0)).ln();
        store.insert(format!("{PREFIX}.b2.fc3.b"), Tensor::full(&[cfg.transitions], prior));
    }
    Ok(())
}

/// Per-frame transition probabilities, laid out `T_out × L` (frame-major).
pub fn seg_forward(g: &mut Graph, p: &Bound, cfg: &SegConfig, x: NodeId) -> Result<NodeId, CoreError> {
    cfg.validate(g.value(x).cols())?;
    let mut h = x;
    for (i, &(m, n)) in cfg.blocks.iter().enumerate() {
        h = nn::conv(g, p, &format!("{PREFIX}.b1.{i}.conv1"), h, cfg.kernel)?;
        h = g.relu(h)?;
        h = nn::conv(g, p, &format!("{PREFIX}.b1.{i}.conv2"), h, cfg.kernel)?;
        h = g.relu(h)?;
        h = g.max_pool(h, Axis::Cols, 2)?;
        h = g.resample(h, n)?;
        debug_assert_eq!(g.value(h).shape(), &[n, m]);
    }
    let logits = nn::mlp3(g, p, &format!("{PREFIX}.b2"), h)?;
    Ok(g.sigmoid(logits)?)
}

/// Probabilities `p̂_k` (`L × T_out`) and their decoded transitions `t̂_k`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionDistributions {
    pub probs: Tensor,
    pub decoded: Vec<usize>,
}

/// Transposes a frame-major `T_out × L` output to `L × T_out`.
pub fn to_rows(frame_major: &Tensor) -> Tensor {
    let (t, l) = (frame_major.rows(), frame_major.cols());
    let mut out = vec![0.0; t * l];
    for f in 0..t {
        for k in 0..l {
            out[k * t + f] = frame_major.get(f, k);
        }
    }
    Tensor::matrix(l, t, out).expect("shape")
}

/// Runs the segmenter without recording gradients.
pub fn segment(params: &ParamStore, cfg: &SegConfig, features: &Tensor) -> Result<TransitionDistributions, CoreError> {
    let mut g = Graph::no_grad();
    let p = params.bind(&mut g)?;
    let x = g.constant(features.clone())?;
    let probs = seg_forward(&mut g, &p, cfg, x)?;
    let probs = to_rows(g.value(probs));
    let decoded = decode_transitions(&probs);
    Ok(TransitionDistributions { probs, decoded })
}

/// Frames `t` (1-based) of window `k` (1-based) on a timeline of `t_out`
/// frames split among `l` transitions: `(t_out/l)(k−1) < t ≤ (t_out/l)k`.
pub fn window(k: usize, l: usize, t_out: usize) -> std::ops::RangeInclusive<usize> {
    let lo = t_out * (k - 1) / l + 1;
    let hi = t_out * k / l;
    lo..=hi
}

/// Windowed argmax per row of an `L × T_out` matrix, ties to the smallest
/// frame. Returns 1-based frames.
///
/// # Panics
/// If `T_out < L`, which leaves a window empty.
pub fn decode_transitions(probs: &Tensor) -> Vec<usize> {
    let (l, t) = (probs.rows(), probs.cols());
    assert!(t >= l, "timeline of {t} frames cannot host {l} transitions");
    (1..=l)
        .map(|k| {
            let row = probs.row(k - 1);
            let mut best = *window(k, l, t).start();
            for f in window(k, l, t) {
                if row[f - 1] > row[best - 1] {
                    best = f;
                }
            }
            best
        })
        .collect()
}

/// One-hot targets `p_k`, frame-major `T_out × L`.
pub fn seg_targets(gt: &[usize], t_out: usize) -> Result<Tensor, CoreError> {
    let l = gt.len();
    let mut target = Tensor::zeros(&[t_out, l]);
    for (k, &t) in gt.iter().enumerate() {
        if t < 1 || t > t_out {
            return Err(CoreError::OutOfRange {
                what: "transition",
                value: t,
                max: t_out,
            });
        }
        target.data_mut()[(t - 1) * l + k] = 1.0;
    }
    Ok(target)
}

/// Summed framewise BCE of frame-major probabilities against one-hot rows.
pub fn seg_loss(g: &mut Graph, probs: NodeId, gt: &[usize]) -> Result<NodeId, CoreError> {
    let t_out = g.value(probs).rows();
    if gt.len() != g.value(probs).cols() {
        return Err(CoreError::LengthMismatch(gt.len(), g.value(probs).cols()));
    }
    let target = seg_targets(gt, t_out)?;
    Ok(g.bce(probs, &target)?)
}
