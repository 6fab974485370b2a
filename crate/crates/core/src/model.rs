//! The three model variants and the forward pass of one query–exemplar
//! pair.
//!
//! * `FR` regresses the score difference from whole-video mean features.
//! * `FSR` adds the segmenter and regresses per step from step means.
//! * `TSA` adds the cross-attention decoder between matching steps.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tsa_diffcore::{Bound, Graph, NodeId, ParamStore, Tensor};

use crate::attention::{self, exemplar_tokens, fit_transitions, query_tokens, DecoderConfig};
use crate::data::{frame_to_feature_index, Sample};
use crate::error::CoreError;
use crate::lexicon::canonical_transitions;
use crate::regression::{self, assemble_nodes, predict_score, ScoreNodes};
use crate::segmentation::{self, decode_transitions, seg_forward, to_rows, SegConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    FR,
    FSR,
    TSA,
}

impl Variant {
    pub fn segments(self) -> bool {
        self != Variant::FR
    }
}

impl std::str::FromStr for Variant {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().replace(['+', '-', '_'], "").as_str() {
            "FR" => Ok(Self::FR),
            "FSR" => Ok(Self::FSR),
            "TSA" => Ok(Self::TSA),
            _ => Err(CoreError::InvalidConfig(format!("unknown variant {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Feature width `D`.
    pub d: usize,
    pub seg: SegConfig,
    pub decoder: DecoderConfig,
    pub head_hidden: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), CoreError> {
        if self.variant.segments() {
            self.seg.validate(self.d)?;
        }
        if self.decoder.d_model != self.d {
            return Err(CoreError::InvalidConfig(format!(
                "decoder width {} differs from feature width {}",
                self.decoder.d_model, self.d
            )));
        }
        self.decoder.validate()?;
        if self.head_hidden == 0 {
            return Err(CoreError::InvalidConfig("head_hidden must be positive".into()));
        }
        Ok(())
    }

    fn head_input(&self) -> usize {
        match self.variant {
            Variant::TSA => self.d,
            Variant::FR | Variant::FSR => 2 * self.d,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

/// Transitions in both timelines a pair forward needs.
#[derive(Clone, Debug, PartialEq)]
pub struct Cuts {
    /// On the segmenter's `T_out` timeline (targets and AIoU).
    pub seg: Vec<usize>,
    /// On the feature timeline, every step non-empty.
    pub features: Vec<usize>,
}

impl Cuts {
    /// Ground-truth canonical transitions of a sample.
    pub fn ground_truth(sample: &Sample, t_out: usize) -> Result<Self, CoreError> {
        let a = &sample.annotation;
        let canon = canonical_transitions(a)?;
        let seg = canon
            .iter()
            .map(|&f| frame_to_feature_index(f, a.frame_count, t_out))
            .collect::<Result<Vec<_>, _>>()?;
        let features = fit_transitions(&canon, a.frame_count, sample.features.t)?;
        Ok(Self { seg, features })
    }

    /// Cuts from transitions decoded on the `T_out` timeline.
    pub fn decoded(seg: Vec<usize>, t_out: usize, t: usize) -> Result<Self, CoreError> {
        let features = fit_transitions(&seg, t_out, t)?;
        Ok(Self { seg, features })
    }
}

/// How the query is cut into steps.
#[derive(Clone, Debug)]
pub enum QueryCuts {
    /// Decode the segmenter output inside this forward pass.
    Predicted,
    Given(Cuts),
}

pub struct PairOutput {
    /// Frame-major `T_out × L` transition probabilities, when the segmenter
    /// ran.
    pub probs: Option<NodeId>,
    /// Cuts applied to the query.
    pub query_cuts: Option<Cuts>,
    pub score: ScoreNodes,
    /// Attention nodes per step and layer (TSA only).
    pub attention: Vec<Vec<NodeId>>,
}

fn step_means(tokens: &Tensor, transitions: &[usize]) -> Result<Vec<Tensor>, CoreError> {
    attention::extract_steps(tokens, transitions)?
        .iter()
        .map(|s| {
            let n = s.rows() as f64;
            let means = (0..s.cols()).map(|c| (0..s.rows()).map(|r| s.get(r, c)).sum::<f64>() / n).collect();
            Ok(Tensor::matrix(1, s.cols(), means)?)
        })
        .collect()
}

fn mean_frame(tokens: &Tensor) -> Result<Tensor, CoreError> {
    Ok(step_means(tokens, &[])?.remove(0))
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, CoreError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        if config.variant.segments() {
            segmentation::init_params(&mut params, &config.seg, config.d, &mut rng)?;
        }
        if config.variant == Variant::TSA {
            attention::init_params(&mut params, &config.decoder, &mut rng)?;
        }
        regression::init_params(&mut params, config.head_input(), config.head_hidden, &mut rng);
        Ok(Self { config, params })
    }

    /// Attaches checkpointed parameters after checking names and shapes.
    pub fn with_params(config: ModelConfig, params: ParamStore) -> Result<Self, CoreError> {
        let fresh = Self::new(config, 0)?;
        let shapes = |s: &ParamStore| -> BTreeMap<String, Vec<usize>> {
            s.iter().map(|(k, t)| (k.clone(), t.shape().to_vec())).collect()
        };
        let (want, got) = (shapes(&fresh.params), shapes(&params));
        if want != got {
            let missing: Vec<_> = want.keys().filter(|k| got.get(*k) != want.get(*k)).take(3).collect();
            return Err(CoreError::IncompatibleCheckpoint(format!(
                "{} tensors expected, {} found; first mismatches {missing:?}",
                want.len(),
                got.len()
            )));
        }
        Ok(Self {
            config: fresh.config,
            params,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn t_out(&self) -> usize {
        self.config.seg.t_out
    }

    /// Decodes the query's transitions without recording gradients.
    pub fn predict_cuts(&self, sample: &Sample) -> Result<Cuts, CoreError> {
        let seg = segmentation::segment(&self.params, &self.config.seg, &sample.features.frame_tokens())?;
        Cuts::decoded(seg.decoded, self.t_out(), sample.features.t)
    }

    /// Forward pass of one pair into `g`. The exemplar is always cut with
    /// `exemplar_cuts`; the segmenter runs on the query when `run_seg` is
    /// set or the query cuts are to be predicted.
    pub fn pair_forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        query: &Sample,
        exemplar: &Sample,
        query_cuts: &QueryCuts,
        exemplar_cuts: &Cuts,
        run_seg: bool,
    ) -> Result<PairOutput, CoreError> {
        let cfg = &self.config;
        let y_z = exemplar.annotation.score;
        for s in [query, exemplar] {
            if s.features.d != cfg.d {
                return Err(tsa_diffcore::DiffError::ShapeMismatch {
                    op: "pair_forward",
                    expected: vec![s.features.t, cfg.d],
                    got: vec![s.features.t, s.features.d],
                }
                .into());
            }
        }
        let q_frames = query.features.frame_tokens();
        if cfg.variant == Variant::FR {
            let q = g.constant(mean_frame(&q_frames)?)?;
            let z = g.constant(mean_frame(&exemplar.features.frame_tokens())?)?;
            let x = g.concat_cols(&[q, z])?;
            let pooled = crate::nn::mlp3(g, p, regression::PREFIX, x)?;
            return Ok(PairOutput {
                probs: None,
                query_cuts: None,
                score: assemble_nodes(g, vec![pooled], y_z)?,
                attention: Vec::new(),
            });
        }

        let mut probs = None;
        let cuts = match query_cuts {
            QueryCuts::Given(c) if !run_seg => c.clone(),
            _ => {
                let x = g.constant(q_frames.clone())?;
                let pr = seg_forward(g, p, &cfg.seg, x)?;
                probs = Some(pr);
                match query_cuts {
                    QueryCuts::Given(c) => c.clone(),
                    QueryCuts::Predicted => {
                        let decoded = decode_transitions(&to_rows(g.value(pr)));
                        Cuts::decoded(decoded, cfg.seg.t_out, query.features.t)?
                    }
                }
            }
        };

        let (score, attention) = match cfg.variant {
            Variant::FSR => {
                let qs = step_means(&q_frames, &cuts.features)?;
                let zs = step_means(&exemplar.features.frame_tokens(), &exemplar_cuts.features)?;
                let mut rel = Vec::with_capacity(qs.len());
                for (q, z) in qs.into_iter().zip(zs) {
                    let q = g.constant(q)?;
                    let z = g.constant(z)?;
                    let x = g.concat_cols(&[q, z])?;
                    rel.push(crate::nn::mlp3(g, p, regression::PREFIX, x)?);
                }
                (assemble_nodes(g, rel, y_z)?, Vec::new())
            }
            _ => {
                let l_step = cfg.decoder.l_step;
                let q = query_tokens(&query.features, &cuts.features, l_step)?
                    .into_iter()
                    .map(|t| g.constant(t))
                    .collect::<Result<Vec<_>, _>>()?;
                let z = exemplar_tokens(&exemplar.features, &exemplar_cuts.features, l_step)?
                    .into_iter()
                    .map(|t| g.constant(t))
                    .collect::<Result<Vec<_>, _>>()?;
                let dec = attention::decoder_forward(g, p, &cfg.decoder, &q, &z)?;
                (predict_score(g, p, &dec.steps, y_z)?, dec.attention)
            }
        };
        Ok(PairOutput {
            probs,
            query_cuts: Some(cuts),
            score,
            attention,
        })
    }
}
