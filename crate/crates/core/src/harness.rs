//! Run configuration, pair sampling, training and evaluation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tsa_diffcore::{Adam, Graph, LeafKind, ParamStore, Tensor};

use crate::attention::DecoderConfig;
use crate::data::{self, ProcedureAnnotation, Sample, SynthConfig};
use crate::error::CoreError;
use crate::evaluation::{eligible_exemplars, mix_seed, select_exemplars, vote, DnMode, MetricReport};
use crate::lexicon::Lexicon;
use crate::model::{Cuts, Model, ModelConfig, QueryCuts, Variant};
use crate::regression::joint_loss;
use crate::segmentation::SegConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSpec {
    /// Generates `n_train + n_test` instances with one seed and splits them
    /// in generation order.
    Synthetic {
        #[serde(flatten)]
        synth: SynthConfig,
        n_train: usize,
        n_test: usize,
    },
    /// Annotation JSON plus a directory of `<video_id>.fdft` files, split
    /// 75/25 stratified by action code.
    Files {
        annotations: PathBuf,
        features_dir: PathBuf,
        #[serde(default = "default_train_fraction")]
        train_fraction: f64,
        #[serde(default)]
        split_seed: u64,
    },
}

fn default_train_fraction() -> f64 {
    0.75
}

impl DataSpec {
    /// Loads `(train, test)`. Relative paths resolve against `base`.
    pub fn load(&self, lexicon: &Lexicon, base: &Path) -> Result<(Vec<Sample>, Vec<Sample>), CoreError> {
        match self {
            DataSpec::Synthetic { synth, n_train, n_test } => {
                let cfg = SynthConfig {
                    n: n_train + n_test,
                    ..synth.clone()
                };
                let mut all = data::generate_synthetic(&cfg, lexicon)?;
                let test = all.split_off(*n_train);
                Ok((all, test))
            }
            DataSpec::Files {
                annotations,
                features_dir,
                train_fraction,
                split_seed,
            } => {
                let samples = data::load_dataset(base.join(annotations), base.join(features_dir), lexicon)?;
                Ok(data::split_stratified(samples, *train_fraction, *split_seed))
            }
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine from `lr` down to zero over all optimiser steps.
    #[default]
    Cosine,
}

impl LrSchedule {
    pub fn rate(self, lr: f64, step: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => lr,
            LrSchedule::Cosine => 0.5 * lr * (1.0 + (std::f64::consts::PI * step as f64 / total.max(1) as f64).cos()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub variant: Variant,
    pub dn_mode: DnMode,
    /// Cut queries with ground-truth transitions in training and evaluation.
    pub oracle_transitions: bool,
    /// Initial learning rate.
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Seeds parameter initialisation and pair sampling.
    pub seed: u64,
    pub m: usize,
    pub eval_seed: u64,
    /// Number of step transitions `L`.
    pub transitions: usize,
    pub l_step: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// `(m, n)` per segmentation sub-block; the last `n` is the output
    /// timeline length.
    pub seg_blocks: Vec<(usize, usize)>,
    pub head_hidden: usize,
    pub mse_weight: f64,
    pub data: DataSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            variant: Variant::TSA,
            dn_mode: DnMode::WithDn,
            oracle_transitions: false,
            lr: 1e-3,
            lr_schedule: LrSchedule::Cosine,
            weight_decay: 0.0,
            epochs: 50,
            batch_size: 8,
            seed: 0,
            m: 10,
            eval_seed: 0,
            transitions: 2,
            l_step: 5,
            layers: 3,
            heads: 8,
            mlp_ratio: 4,
            seg_blocks: vec![(24, 24), (16, 48)],
            head_hidden: 64,
            mse_weight: 1.0,
            data: DataSpec::Synthetic {
                synth: SynthConfig::default(),
                n_train: 600,
                n_test: 200,
            },
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), CoreError> {
        if self.m == 0 || self.epochs == 0 || self.batch_size == 0 {
            return Err(CoreError::InvalidConfig("m, epochs and batch_size must be at least 1".into()));
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(CoreError::InvalidConfig("lr and weight_decay must be non-negative".into()));
        }
        Ok(())
    }

    pub fn model_config(&self, d: usize) -> ModelConfig {
        ModelConfig {
            variant: self.variant,
            d,
            seg: SegConfig {
                transitions: self.transitions,
                t_out: self.seg_blocks.last().map_or(0, |b| b.1),
                blocks: self.seg_blocks.clone(),
                kernel: 3,
            },
            decoder: DecoderConfig {
                layers: self.layers,
                heads: self.heads,
                d_model: d,
                l_step: self.l_step,
                mlp_ratio: self.mlp_ratio,
            },
            head_hidden: self.head_hidden,
        }
    }

    pub fn from_json(json: &str) -> Result<Self, CoreError> {
        let cfg: Self = serde_json::from_str(json)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Pairs every training instance with one exemplar, in a shuffled order.
/// Deterministic per seed.
pub fn build_pairs(train: &[Sample], mode: DnMode, seed: u64) -> Result<Vec<(usize, usize)>, CoreError> {
    let refs: Vec<&ProcedureAnnotation> = train.iter().map(|s| &s.annotation).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_code: BTreeMap<(String, bool), Vec<usize>> = BTreeMap::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut rng);
    order
        .into_iter()
        .map(|q| {
            let key = match mode {
                DnMode::WithDn => (train[q].annotation.action_code.to_string(), true),
                DnMode::WithoutDn => (String::new(), false),
            };
            let pool = by_code
                .entry(key)
                .or_insert_with(|| eligible_exemplars(&refs, &train[q].annotation, mode).into_iter().chain([q]).collect());
            // The pool holds the query's whole group; redraw on self.
            let candidates = pool.iter().filter(|&&i| i != q && train[i].annotation.video_id != train[q].annotation.video_id).count();
            if candidates == 0 {
                return Err(CoreError::NoExemplarAvailable(train[q].annotation.video_id.clone()));
            }
            loop {
                let z = pool[rng.gen_range(0..pool.len())];
                if z != q && train[z].annotation.video_id != train[q].annotation.video_id {
                    return Ok((q, z));
                }
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_j: f64,
    pub mean_bce: f64,
    pub mean_mse: f64,
    pub wall_secs: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub checkpoint: Option<PathBuf>,
}

struct PairGrad {
    grads: BTreeMap<String, Tensor>,
    j: f64,
    bce: f64,
    mse: f64,
}

fn ground_truth_cuts(samples: &[Sample], t_out: usize) -> Result<Vec<Cuts>, CoreError> {
    samples.iter().map(|s| Cuts::ground_truth(s, t_out)).collect()
}

fn pair_gradient(
    model: &Model,
    cfg: &RunConfig,
    query: &Sample,
    exemplar: &Sample,
    q_cuts: &Cuts,
    z_cuts: &Cuts,
) -> Result<PairGrad, CoreError> {
    let mut g = Graph::new();
    let p = model.params.bind(&mut g)?;
    let query_cuts = if cfg.oracle_transitions {
        QueryCuts::Given(q_cuts.clone())
    } else {
        QueryCuts::Predicted
    };
    let out = model.pair_forward(&mut g, &p, query, exemplar, &query_cuts, z_cuts, true)?;
    let probs = out.probs.map(|pr| (pr, q_cuts.seg.as_slice()));
    let loss = joint_loss(&mut g, probs, out.score.predicted, query.annotation.score, cfg.mse_weight)?;
    let grads = g.backward(loss.total, &Tensor::scalar(1.0))?;
    Ok(PairGrad {
        grads: grads.named(&g, LeafKind::Param),
        j: g.value(loss.total).item(),
        bce: loss.bce.map_or(0.0, |b| g.value(b).item()),
        mse: g.value(loss.mse).item(),
    })
}

/// Trains a fresh model. `on_epoch` sees every epoch record as it lands.
pub fn train(
    cfg: &RunConfig,
    train_set: &[Sample],
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<(Model, TrainLog), CoreError> {
    cfg.validate()?;
    let first = train_set.first().ok_or(CoreError::EmptyList)?;
    let mut model = Model::new(cfg.model_config(first.features.d), cfg.seed)?;
    let gt = if cfg.variant.segments() {
        ground_truth_cuts(train_set, model.t_out())?
    } else {
        Vec::new()
    };
    let mut opt = Adam::new(cfg.lr);
    opt.weight_decay = cfg.weight_decay;
    let mut log = TrainLog::default();
    let total_steps = cfg.epochs * train_set.len().div_ceil(cfg.batch_size);
    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let pairs = build_pairs(train_set, cfg.dn_mode, mix_seed(cfg.seed, epoch as u64))?;
        let (mut sj, mut sb, mut sm) = (0.0, 0.0, 0.0);
        for batch in pairs.chunks(cfg.batch_size) {
            let results = batch
                .par_iter()
                .map(|&(q, z)| {
                    let (qc, zc) = match gt.is_empty() {
                        true => (None, None),
                        false => (Some(&gt[q]), Some(&gt[z])),
                    };
                    let empty = Cuts {
                        seg: Vec::new(),
                        features: Vec::new(),
                    };
                    pair_gradient(
                        &model,
                        cfg,
                        &train_set[q],
                        &train_set[z],
                        qc.unwrap_or(&empty),
                        zc.unwrap_or(&empty),
                    )
                })
                .collect::<Result<Vec<_>, _>>()?;
            let mut sum: BTreeMap<String, Tensor> = BTreeMap::new();
            for r in &results {
                sj += r.j;
                sb += r.bce;
                sm += r.mse;
                for (k, t) in &r.grads {
                    match sum.get_mut(k) {
                        Some(acc) => acc.data_mut().iter_mut().zip(t.data()).for_each(|(a, b)| *a += b),
                        None => {
                            sum.insert(k.clone(), t.clone());
                        }
                    }
                }
            }
            let inv = 1.0 / results.len() as f64;
            for t in sum.values_mut() {
                t.data_mut().iter_mut().for_each(|v| *v *= inv);
            }
            opt.lr = cfg.lr_schedule.rate(cfg.lr, opt.steps() as usize, total_steps);
            opt.step(&mut model.params, &sum);
        }
        let n = pairs.len() as f64;
        let rec = EpochLog {
            epoch,
            mean_j: sj / n,
            mean_bce: sb / n,
            mean_mse: sm / n,
            wall_secs: start.elapsed().as_secs_f64(),
        };
        if !rec.mean_j.is_finite() {
            return Err(tsa_diffcore::DiffError::NonFiniteValue(format!("epoch {epoch} loss")).into());
        }
        on_epoch(&rec);
        log.epochs.push(rec);
    }
    Ok((model, log))
}

/// Where the per-pair relative scores come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScoreSource {
    Model,
    /// `y_X − y_Z` from the labels; exercises the voting and metric
    /// plumbing with a perfect predictor.
    GroundTruth,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub report: MetricReport,
    pub predictions: Vec<f64>,
    /// Query transitions on the segmenter timeline, if any.
    pub decoded: Vec<Vec<usize>>,
}

/// Evaluation state reusable across exemplar seeds and `M`: segmenter
/// outputs for every instance are decoded once.
pub struct Evaluator<'a> {
    model: &'a Model,
    train: &'a [Sample],
    test: &'a [Sample],
    train_cuts: Vec<Option<Cuts>>,
    test_cuts: Vec<Option<Cuts>>,
    test_gt: Vec<Option<Cuts>>,
    y_range: (f64, f64),
    pub source: ScoreSource,
}

impl<'a> Evaluator<'a> {
    /// With `oracle` set, ground-truth transitions cut both sides.
    pub fn new(model: &'a Model, train: &'a [Sample], test: &'a [Sample], oracle: bool) -> Result<Self, CoreError> {
        if test.is_empty() {
            return Err(CoreError::EmptyList);
        }
        let segments = model.config.variant.segments();
        let cuts = |set: &[Sample], use_gt: bool| -> Result<Vec<Option<Cuts>>, CoreError> {
            set.par_iter()
                .map(|s| match (segments, use_gt) {
                    (false, _) => Ok(None),
                    (true, true) => Cuts::ground_truth(s, model.t_out()).map(Some),
                    (true, false) => model.predict_cuts(s).map(Some),
                })
                .collect()
        };
        let (lo, hi) = train
            .iter()
            .chain(test)
            .map(|s| s.annotation.score)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), y| (lo.min(y), hi.max(y)));
        Ok(Self {
            model,
            train,
            test,
            train_cuts: cuts(train, oracle)?,
            test_cuts: cuts(test, oracle)?,
            test_gt: cuts(test, true)?,
            y_range: (lo, hi),
            source: ScoreSource::Model,
        })
    }

    fn relative(&self, q: usize, z: usize) -> Result<f64, CoreError> {
        let (query, exemplar) = (&self.test[q], &self.train[z]);
        if self.source == ScoreSource::GroundTruth {
            return Ok(query.annotation.score - exemplar.annotation.score);
        }
        let mut g = Graph::no_grad();
        let p = self.model.params.bind(&mut g)?;
        let empty = Cuts {
            seg: Vec::new(),
            features: Vec::new(),
        };
        let qc = QueryCuts::Given(self.test_cuts[q].clone().unwrap_or_else(|| empty.clone()));
        let zc = self.train_cuts[z].as_ref().unwrap_or(&empty);
        let out = self.model.pair_forward(&mut g, &p, query, exemplar, &qc, zc, false)?;
        Ok(out.score.prediction(&g, exemplar.annotation.score)?.relative())
    }

    /// Votes over `m` exemplars per test instance.
    pub fn run(&self, m: usize, mode: DnMode, seed: u64) -> Result<Evaluation, CoreError> {
        if m == 0 {
            return Err(CoreError::InvalidConfig("m must be at least 1".into()));
        }
        let refs: Vec<&ProcedureAnnotation> = self.train.iter().map(|s| &s.annotation).collect();
        let predictions = (0..self.test.len())
            .into_par_iter()
            .map(|q| {
                let picks = select_exemplars(&refs, &self.test[q].annotation, m, mode, mix_seed(seed, q as u64))?;
                let pairs = picks
                    .into_iter()
                    .map(|z| Ok((self.relative(q, z)?, self.train[z].annotation.score)))
                    .collect::<Result<Vec<_>, CoreError>>()?;
                vote(&pairs)
            })
            .collect::<Result<Vec<_>, _>>()?;
        let y: Vec<f64> = self.test.iter().map(|s| s.annotation.score).collect();
        let decoded: Vec<Vec<usize>> = self.test_cuts.iter().flatten().map(|c| c.seg.clone()).collect();
        let gt: Vec<Vec<usize>> = self.test_gt.iter().flatten().map(|c| c.seg.clone()).collect();
        let transitions = (!decoded.is_empty()).then_some((decoded.as_slice(), gt.as_slice()));
        let report = MetricReport::compute(&y, &predictions, transitions, self.y_range)?;
        Ok(Evaluation {
            report,
            predictions,
            decoded,
        })
    }
}

pub fn evaluate(
    model: &Model,
    test: &[Sample],
    train: &[Sample],
    m: usize,
    mode: DnMode,
    seed: u64,
    oracle: bool,
) -> Result<Evaluation, CoreError> {
    Evaluator::new(model, train, test, oracle)?.run(m, mode, seed)
}

/// Files written by [`save_run`]: config, checkpoint and training log.
pub const CONFIG_FILE: &str = "run.json";
pub const CHECKPOINT_FILE: &str = "model.tsaw";
pub const LOG_FILE: &str = "train_log.json";

pub fn save_run(dir: &Path, cfg: &RunConfig, model: &Model, log: &mut TrainLog) -> Result<(), CoreError> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(CONFIG_FILE), serde_json::to_string_pretty(cfg)?)?;
    let ckpt = dir.join(CHECKPOINT_FILE);
    model.params.save(&ckpt)?;
    std::fs::write(dir.join("model_config.json"), serde_json::to_string_pretty(&model.config)?)?;
    log.checkpoint = Some(ckpt);
    std::fs::write(dir.join(LOG_FILE), serde_json::to_string_pretty(log)?)?;
    Ok(())
}

/// Loads a checkpoint and the model config stored next to it.
pub fn load_model(checkpoint: &Path) -> Result<Model, CoreError> {
    let dir = checkpoint.parent().unwrap_or(Path::new("."));
    let config: ModelConfig = serde_json::from_str(&std::fs::read_to_string(dir.join("model_config.json"))?)?;
    Model::with_params(config, ParamStore::load(checkpoint)?)
}
