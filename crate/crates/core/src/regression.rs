//! Contrastive regression head, score assembly and the joint objective.
//!
//! The head maps each procedure-aware step embedding to a relative score;
//! the prediction for the query is the exemplar's score plus the mean of
//! those per-step differences.

use rand_chacha::ChaCha8Rng;
use tsa_diffcore::{Bound, Graph, NodeId, ParamStore, Tensor};

use crate::error::CoreError;
use crate::nn;
use crate::segmentation::seg_loss;

pub const PREFIX: &str = "head";

/// Three-layer ReLU MLP `d_in → hidden → hidden → 1`, shared across steps.
pub fn init_params(store: &mut ParamStore, d_in: usize, hidden: usize, rng: &mut ChaCha8Rng) {
    nn::init_mlp3(store, PREFIX, [d_in, hidden, hidden, 1], rng);
}

/// Relative score of one step: mean-pool over frames, then the MLP. `1 × 1`.
pub fn step_score(g: &mut Graph, p: &Bound, s: NodeId) -> Result<NodeId, CoreError> {
    let expected = p.get(&format!("{PREFIX}.fc1.w")).map(|w| g.value(w).rows())?;
    if g.value(s).cols() != expected {
        return Err(tsa_diffcore::DiffError::ShapeMismatch {
            op: "step_score",
            expected: vec![g.value(s).rows(), expected],
            got: g.value(s).shape().to_vec(),
        }
        .into());
    }
    let pooled = g.mean_rows(s)?;
    Ok(nn::mlp3(g, p, PREFIX, pooled)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScorePrediction {
    pub per_step_relative: Vec<f64>,
    pub predicted_score: f64,
    pub exemplar_score: f64,
}

impl ScorePrediction {
    pub fn assemble(per_step_relative: Vec<f64>, exemplar_score: f64) -> Result<Self, CoreError> {
        if per_step_relative.is_empty() {
            return Err(CoreError::EmptyList);
        }
        let mean = per_step_relative.iter().sum::<f64>() / per_step_relative.len() as f64;
        Ok(Self {
            predicted_score: mean + exemplar_score,
            per_step_relative,
            exemplar_score,
        })
    }

    /// The mean relative score, i.e. the contribution on top of `y_Z`.
    pub fn relative(&self) -> f64 {
        self.predicted_score - self.exemplar_score
    }
}

/// Per-step scores and `ŷ_X = mean_l R(S_l) + y_Z` as graph nodes.
pub struct ScoreNodes {
    pub per_step: Vec<NodeId>,
    pub predicted: NodeId,
}

impl ScoreNodes {
    pub fn prediction(&self, g: &Graph, exemplar_score: f64) -> Result<ScorePrediction, CoreError> {
        ScorePrediction::assemble(self.per_step.iter().map(|&n| g.value(n).item()).collect(), exemplar_score)
    }
}

/// Adds the mean of `relative` (each `1 × 1`) to the constant `y_z`.
pub fn assemble_nodes(g: &mut Graph, relative: Vec<NodeId>, y_z: f64) -> Result<ScoreNodes, CoreError> {
    if relative.is_empty() {
        return Err(CoreError::EmptyList);
    }
    let stacked = g.concat_rows(&relative)?;
    let mean = g.mean_all(stacked)?;
    let yz = g.constant(Tensor::scalar(y_z))?;
    let predicted = g.add(mean, yz)?;
    Ok(ScoreNodes {
        per_step: relative,
        predicted,
    })
}

pub fn predict_score(g: &mut Graph, p: &Bound, embeddings: &[NodeId], y_z: f64) -> Result<ScoreNodes, CoreError> {
    let per_step = embeddings
        .iter()
        .map(|&s| step_score(g, p, s))
        .collect::<Result<Vec<_>, _>>()?;
    assemble_nodes(g, per_step, y_z)
}

pub struct JointLoss {
    pub total: NodeId,
    pub bce: Option<NodeId>,
    pub mse: NodeId,
}

/// `J = Σ_k BCE(p̂_k, p_k) + w·(ŷ_X − y_X)²`. Without probabilities only
/// the squared error remains.
pub fn joint_loss(
    g: &mut Graph,
    probs: Option<(NodeId, &[usize])>,
    predicted: NodeId,
    target: f64,
    mse_weight: f64,
) -> Result<JointLoss, CoreError> {
    let y = g.constant(Tensor::new(g.value(predicted).shape().to_vec(), vec![target])?)?;
    let mse = g.squared_error(predicted, y)?;
    let weighted = g.scale(mse, mse_weight)?;
    let bce = probs.map(|(p, gt)| seg_loss(g, p, gt)).transpose()?;
    let total = match bce {
        Some(b) => g.add(b, weighted)?,
        None => weighted,
    };
    Ok(JointLoss { total, bce, mse })
}
