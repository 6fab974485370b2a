//! Finite-difference checks of the composite model functions, on small
//! configurations with every parameter fed in as a checked input.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tsa_diffcore::{gradient_check, Bound, DiffError, Graph, NodeId, ParamStore, Tensor};

use crate::attention::{self, DecoderConfig};
use crate::data::{FeatureSequence, ProcedureAnnotation, Sample};
use crate::model::{Cuts, Model, ModelConfig, QueryCuts, Variant};
use crate::regression::joint_loss;
use crate::segmentation::{self, SegConfig};

const D: usize = 8;

fn seg_config() -> SegConfig {
    SegConfig {
        transitions: 2,
        t_out: 12,
        blocks: vec![(6, 6), (4, 12)],
        kernel: 3,
    }
}

fn decoder_config() -> DecoderConfig {
    DecoderConfig {
        layers: 2,
        heads: 2,
        d_model: D,
        l_step: 3,
        mlp_ratio: 2,
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape")
}

/// Parameters perturbed away from their initial values (layer-norm gains
/// included) so no check runs at a special point.
fn jitter(store: &ParamStore, rng: &mut ChaCha8Rng) -> ParamStore {
    let mut out = ParamStore::new();
    for (name, t) in store.iter() {
        let mut t = t.clone();
        t.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.3..0.3));
        out.insert(name.clone(), t);
    }
    out
}

/// Names and values in a fixed order, plus a closure-friendly binder.
struct Packed {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl Packed {
    fn new(store: &ParamStore) -> Self {
        let (names, values) = store.iter().map(|(k, v)| (k.clone(), v.clone())).unzip();
        Self { names, values }
    }

    fn bind(&self, ids: &[NodeId]) -> Bound {
        Bound::from_ids(self.names.iter().cloned().zip(ids.iter().copied()).collect::<BTreeMap<_, _>>())
    }
}

fn to_diff(e: crate::CoreError) -> DiffError {
    match e {
        crate::CoreError::Diff(d) => d,
        other => DiffError::Invalid(other.to_string()),
    }
}

/// Worst relative error of the segmenter output w.r.t. its parameters and
/// input features at one random point.
pub fn check_seg_forward(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = seg_config();
    let mut store = ParamStore::new();
    segmentation::init_params(&mut store, &cfg, D, &mut rng).expect("valid config");
    let packed = Packed::new(&jitter(&store, &mut rng));
    let mut point = packed.values.clone();
    point.push(rand_tensor(&mut rng, &[9, D]));
    let n = packed.names.len();
    gradient_check(
        |g, ids| {
            let p = packed.bind(&ids[..n]);
            segmentation::seg_forward(g, &p, &cfg, ids[n]).map_err(to_diff)
        },
        &point,
        None,
    )
}

/// Worst relative error of the decoder output w.r.t. its parameters and
/// both token sets at one random point.
pub fn check_decoder_forward(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = decoder_config();
    let mut store = ParamStore::new();
    attention::init_params(&mut store, &cfg, &mut rng).expect("valid config");
    let packed = Packed::new(&jitter(&store, &mut rng));
    let mut point = packed.values.clone();
    for _ in 0..2 {
        point.push(rand_tensor(&mut rng, &[cfg.l_step, D]));
        point.push(rand_tensor(&mut rng, &[2 * cfg.l_step, D]));
    }
    let n = packed.names.len();
    gradient_check(
        |g, ids| {
            let p = packed.bind(&ids[..n]);
            let out = attention::decoder_forward(g, &p, &cfg, &[ids[n], ids[n + 2]], &[ids[n + 1], ids[n + 3]])
                .map_err(to_diff)?;
            g.concat_rows(&out.steps)
        },
        &point,
        None,
    )
}

fn random_sample(id: &str, rng: &mut ChaCha8Rng, t: usize, p: usize) -> Sample {
    let values = (0..t * p * D).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    Sample {
        features: FeatureSequence::new(id, t, D, p, values).expect("shape"),
        annotation: ProcedureAnnotation {
            video_id: id.into(),
            action_code: "107B".parse().expect("valid code"),
            difficulty: 0.0,
            score: rng.gen_range(0.0..10.0),
            judge_scores: None,
            frame_count: t,
            boundaries: vec![t / 3, 2 * t / 3 + 1],
        },
    }
}

/// Worst relative error of the full pair objective (segmentation BCE plus
/// squared score error through decoder and head) w.r.t. every parameter.
pub fn check_joint_loss(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = ModelConfig {
        variant: Variant::TSA,
        d: D,
        seg: seg_config(),
        decoder: decoder_config(),
        head_hidden: 6,
    };
    let model = Model::new(cfg, seed).expect("valid config");
    let packed = Packed::new(&jitter(&model.params, &mut rng));
    let query = random_sample("q", &mut rng, 12, 1);
    let exemplar = random_sample("z", &mut rng, 12, 2);
    let q_cuts = Cuts::ground_truth(&query, model.t_out()).expect("valid annotation");
    let z_cuts = Cuts::ground_truth(&exemplar, model.t_out()).expect("valid annotation");
    let target = query.annotation.score;
    gradient_check(
        |g: &mut Graph, ids: &[NodeId]| {
            let p = packed.bind(ids);
            let out = model
                .pair_forward(g, &p, &query, &exemplar, &QueryCuts::Given(q_cuts.clone()), &z_cuts, true)
                .map_err(to_diff)?;
            let probs = out.probs.map(|pr| (pr, q_cuts.seg.as_slice()));
            let loss = joint_loss(g, probs, out.score.predicted, target, 1.0).map_err(to_diff)?;
            Ok(loss.total)
        },
        &packed.values,
        None,
    )
}
