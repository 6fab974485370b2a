//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails.

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tsa_core::checks::{check_decoder_forward, check_joint_loss, check_seg_forward};
use tsa_core::data::{Sample, SynthConfig};
use tsa_core::evaluation::{aiou, interval_iou, relative_l2, spearman, DnMode, AIOU_THRESHOLDS};
use tsa_core::harness::{train, DataSpec, Evaluator, RunConfig};
use tsa_core::lexicon::Lexicon;
use tsa_core::model::{Model, Variant};
use tsa_core::segmentation::decode_transitions;
use tsa_diffcore::{gradient_check, Axis, DiffError, Graph, NodeId, Tensor};

/// Spearman ρ of the first committed seed-0 TSA run.
const TSA_RHO_BASELINE: f64 = 0.9692;

struct Line {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

type Build = Box<dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId, DiffError>>;
type Point = Box<dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor>>;

fn kernels() -> Vec<(&'static str, Build, Point)> {
    fn shapes(spec: &'static [(&'static [usize], f64, f64)]) -> Point {
        Box::new(move |r| spec.iter().map(|(s, lo, hi)| rand_tensor(r, s, *lo, *hi)).collect())
    }
    let mut target = Tensor::zeros(&[2, 5]);
    target.data_mut()[2] = 1.0;
    target.data_mut()[6] = 1.0;
    vec![
        ("matmul", Box::new(|g, x| g.matmul(x[0], x[1])), shapes(&[(&[4, 3], -1.0, 1.0), (&[3, 5], -1.0, 1.0)])),
        ("add_bias", Box::new(|g, x| g.add_bias(x[0], x[1])), shapes(&[(&[3, 4], -1.0, 1.0), (&[4], -1.0, 1.0)])),
        (
            "conv1d",
            Box::new(|g, x| g.conv1d(x[0], x[1], x[2], 3)),
            shapes(&[(&[6, 3], -1.0, 1.0), (&[9, 4], -1.0, 1.0), (&[4], -1.0, 1.0)]),
        ),
        ("max_pool_cols", Box::new(|g, x| g.max_pool(x[0], Axis::Cols, 2)), shapes(&[(&[5, 6], -2.0, 2.0)])),
        ("max_pool_rows", Box::new(|g, x| g.max_pool(x[0], Axis::Rows, 3)), shapes(&[(&[6, 2], -2.0, 2.0)])),
        ("resample_up", Box::new(|g, x| g.resample(x[0], 11)), shapes(&[(&[4, 3], -1.0, 1.0)])),
        ("resample_down", Box::new(|g, x| g.resample(x[0], 5)), shapes(&[(&[13, 2], -1.0, 1.0)])),
        (
            "layer_norm",
            Box::new(|g, x| g.layer_norm(x[0], x[1], x[2])),
            shapes(&[(&[3, 6], -2.0, 2.0), (&[6], 0.5, 1.5), (&[6], -0.5, 0.5)]),
        ),
        ("relu", Box::new(|g, x| g.relu(x[0])), shapes(&[(&[4, 4], -2.0, 2.0)])),
        ("gelu", Box::new(|g, x| g.gelu(x[0])), shapes(&[(&[4, 4], -3.0, 3.0)])),
        ("sigmoid", Box::new(|g, x| g.sigmoid(x[0])), shapes(&[(&[4, 4], -4.0, 4.0)])),
        ("softmax_cols", Box::new(|g, x| g.softmax(x[0], Axis::Cols)), shapes(&[(&[3, 5], -2.0, 2.0)])),
        ("softmax_rows", Box::new(|g, x| g.softmax(x[0], Axis::Rows)), shapes(&[(&[5, 3], -2.0, 2.0)])),
        (
            "attention",
            Box::new(|g, x| g.attention(x[0], x[1], x[2], 2)),
            shapes(&[(&[3, 4], -1.0, 1.0), (&[5, 4], -1.0, 1.0), (&[5, 6], -1.0, 1.0)]),
        ),
        (
            "add_sub_mul_scale",
            Box::new(|g, x| {
                let a = g.add(x[0], x[1])?;
                let b = g.sub(a, x[1])?;
                let c = g.mul(b, x[1])?;
                g.scale(c, -1.5)
            }),
            shapes(&[(&[3, 3], -1.0, 1.0), (&[3, 3], -1.0, 1.0)]),
        ),
        (
            "reductions",
            Box::new(|g, x| {
                let m = g.mean_rows(x[0])?;
                let s = g.sum_all(m)?;
                let a = g.mean_all(x[0])?;
                g.add(s, a)
            }),
            shapes(&[(&[4, 3], -1.0, 1.0)]),
        ),
        (
            "slice_concat",
            Box::new(|g, x| {
                let a = g.slice_rows(x[0], 1, 2)?;
                let b = g.slice_rows(x[0], 0, 1)?;
                let rows = g.concat_rows(&[a, b])?;
                g.concat_cols(&[rows, x[1]])
            }),
            shapes(&[(&[4, 2], -1.0, 1.0), (&[3, 3], -1.0, 1.0)]),
        ),
        ("bce", Box::new(move |g, x| g.bce(x[0], &target)), shapes(&[(&[2, 5], 0.05, 0.95)])),
        (
            "squared_error",
            Box::new(|g, x| g.squared_error(x[0], x[1])),
            shapes(&[(&[3, 2], -2.0, 2.0), (&[3, 2], -2.0, 2.0)]),
        ),
    ]
}

fn gradient_suite() -> Line {
    let start = Instant::now();
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    for (name, build, point) in kernels() {
        for s in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(5000 + s);
            let e = gradient_check(&build, &point(&mut rng), None);
            let w = worst.entry(name).or_insert(0.0);
            *w = w.max(e);
        }
    }
    let composites: [(&str, fn(u64) -> f64); 3] = [
        ("seg_forward", check_seg_forward),
        ("decoder_forward", check_decoder_forward),
        ("joint_loss", check_joint_loss),
    ];
    for (name, f) in composites {
        worst.insert(name, (0..20).map(f).fold(0.0, f64::max));
    }
    let secs = start.elapsed().as_secs_f64();
    let (arg, max) = worst.iter().fold(("", 0.0), |acc, (k, &v)| if v > acc.1 { (k, v) } else { acc });
    Line {
        name: "gradient suite",
        pass: max <= 1e-4 && secs < 120.0,
        detail: format!("{} checks x 20 points, worst {max:.2e} ({arg}), {secs:.1}s", worst.len()),
    }
}

fn metric_oracles() -> Line {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut sp_err: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.gen_range(2..60);
        let mut perm: Vec<usize> = (1..=n).collect();
        perm.shuffle(&mut rng);
        let y: Vec<f64> = (1..=n).map(|v| v as f64 * 1.7 - 3.0).collect();
        let y_hat: Vec<f64> = perm.iter().map(|&v| (v as f64).powi(3)).collect();
        let d2: f64 = perm.iter().enumerate().map(|(i, &p)| ((i + 1) as f64 - p as f64).powi(2)).sum();
        let nf = n as f64;
        let oracle = 1.0 - 6.0 * d2 / (nf * (nf * nf - 1.0));
        sp_err = sp_err.max((spearman(&y, &y_hat).unwrap() - oracle).abs());
    }

    let cells = |t: &[usize]| -> Vec<bool> {
        let mut c = vec![false; 64];
        for w in t.windows(2) {
            for x in w[0]..w[1] {
                c[x] = true;
            }
        }
        c
    };
    let mut aiou_ok = true;
    let (mut preds, mut gts, mut ious) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..1000 {
        let p = vec![rng.gen_range(1..=24), rng.gen_range(25..=48)];
        let g = vec![rng.gen_range(1..=24), rng.gen_range(25..=48)];
        let (cp, cg) = (cells(&p), cells(&g));
        let inter = cp.iter().zip(&cg).filter(|(a, b)| **a && **b).count();
        let union = cp.iter().zip(&cg).filter(|(a, b)| **a || **b).count();
        let oracle = inter as f64 / union as f64;
        aiou_ok &= interval_iou(&p, &g) == oracle;
        ious.push(oracle);
        preds.push(p);
        gts.push(g);
    }
    for d in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let oracle = ious.iter().filter(|&&v| v >= d).count() as f64 / ious.len() as f64;
        aiou_ok &= aiou(&preds, &gts, d).unwrap() == oracle;
    }

    let mut rl2_err: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.gen_range(1..40);
        let (lo, range) = (rng.gen_range(-50.0..50.0), rng.gen_range(0.5..100.0));
        let y: Vec<f64> = (0..n).map(|_| lo + rng.gen_range(0.0..range)).collect();
        let dev: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let y_hat: Vec<f64> = y.iter().zip(&dev).map(|(a, d)| a + d).collect();
        let oracle = y.iter().zip(&y_hat).map(|(a, b)| (a - b).abs()).sum::<f64>() / (n as f64 * range);
        rl2_err = rl2_err.max((relative_l2(&y, &y_hat, lo + range, lo).unwrap() - oracle).abs());
    }
    Line {
        name: "metric oracles",
        pass: sp_err <= 1e-12 && aiou_ok && rl2_err <= 1e-12,
        detail: format!("spearman max err {sp_err:.1e}, aiou exact {aiou_ok}, relative_l2 max err {rl2_err:.1e}"),
    }
}

/// Parses the appendix table: each line holds two rows of six columns,
/// `\multicolumn{n}{..}{x}` spanning `n` of them.
fn table_rows() -> Vec<(String, Vec<String>)> {
    let text = include_str!("fixtures/lexicon_table.tex");
    let arg = |cell: &str| -> (usize, String) {
        let cell = cell.trim();
        if let Some(rest) = cell.strip_prefix("\\multicolumn{") {
            let span: usize = rest[..rest.find('}').unwrap()].parse().unwrap();
            let content = &cell[cell.rfind('{').unwrap() + 1..cell.rfind('}').unwrap()];
            return (span, content.to_string());
        }
        if cell.starts_with("\\multirow") {
            return (1, cell[cell.rfind('{').unwrap() + 1..cell.rfind('}').unwrap()].to_string());
        }
        (1, cell.to_string())
    };
    let mut rows = Vec::new();
    for line in text.lines() {
        let body = line.split("\\\\").next().unwrap();
        let mut current: Vec<String> = Vec::new();
        let mut width = 0;
        for cell in body.split('&') {
            let (span, content) = arg(cell);
            current.push(content);
            width += span;
            if width == 6 {
                let code = current.remove(0);
                let mut steps: Vec<String> = current.drain(..).collect();
                let last = steps.last_mut().unwrap();
                if last.is_empty() {
                    *last = "Entry".to_string();
                }
                rows.push((code, steps));
                width = 0;
            }
        }
    }
    rows
}

fn lexicon_fixture() -> Line {
    let rows = table_rows();
    let lex = Lexicon::builtin();
    let mismatches: Vec<&str> = rows
        .iter()
        .filter(|(code, steps)| {
            let parsed = lex.parse_dive_code(code).map(|s| s.names().iter().map(|n| n.to_string()).collect::<Vec<_>>());
            parsed.ok().as_ref() != Some(steps)
        })
        .map(|(c, _)| c.as_str())
        .collect();
    let mut dist: BTreeMap<usize, usize> = BTreeMap::new();
    for (code, _) in &rows {
        *dist.entry(lex.step_count(code).unwrap_or(0)).or_default() += 1;
    }
    let expected: BTreeMap<usize, usize> = [(3, 31), (4, 16), (5, 5)].into();
    Line {
        name: "lexicon fixture",
        pass: rows.len() == 52 && lex.len() == 52 && mismatches.is_empty() && dist == expected,
        detail: format!("{} table rows, mismatches {mismatches:?}, step counts {dist:?}", rows.len()),
    }
}

fn decoding() -> Line {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut disagreements = 0;
    let mut ties = 0;
    for case in 0..10_000 {
        let l = rng.gen_range(1..=4);
        let t = rng.gen_range(l..=60);
        let values: Vec<f64> = if case % 2 == 0 {
            (0..l * t).map(|_| rng.gen_range(0..4) as f64 / 4.0).collect()
        } else {
            (0..l * t).map(|_| rng.gen::<f64>()).collect()
        };
        let probs = Tensor::matrix(l, t, values).unwrap();
        let oracle: Vec<usize> = (1..=l)
            .map(|k| {
                let mut best: Option<(usize, f64)> = None;
                let mut tied = false;
                for f in 1..=t {
                    let inside = (f * l) as f64 > (t * (k - 1)) as f64 && (f * l) as f64 <= (t * k) as f64;
                    if !inside {
                        continue;
                    }
                    let v = probs.get(k - 1, f - 1);
                    match best {
                        Some((_, b)) if v == b => tied = true,
                        Some((_, b)) if v < b => {}
                        _ => {
                            best = Some((f, v));
                            tied = false;
                        }
                    }
                }
                ties += usize::from(tied);
                best.unwrap().0
            })
            .collect();
        if decode_transitions(&probs) != oracle {
            disagreements += 1;
        }
    }
    Line {
        name: "windowed decoding",
        pass: disagreements == 0,
        detail: format!("10000 matrices, {ties} rows with a tied maximum, {disagreements} disagreements"),
    }
}

fn run_config(variant: Variant, seed: u64) -> RunConfig {
    RunConfig {
        variant,
        seed,
        epochs: 50,
        m: 10,
        transitions: 2,
        l_step: 5,
        layers: 3,
        heads: 8,
        dn_mode: DnMode::WithDn,
        data: DataSpec::Synthetic {
            synth: SynthConfig {
                t: 48,
                d: 32,
                sigma: 0.1,
                seed,
                ..SynthConfig::default()
            },
            n_train: 600,
            n_test: 200,
        },
        ..RunConfig::default()
    }
}

fn dataset(cfg: &RunConfig) -> (Vec<Sample>, Vec<Sample>) {
    cfg.data.load(Lexicon::builtin(), std::path::Path::new(".")).unwrap()
}

struct Trained {
    model: Model,
    train: Vec<Sample>,
    test: Vec<Sample>,
    rho: f64,
    secs: f64,
    aiou: BTreeMap<String, f64>,
    rl2: f64,
}

fn train_and_eval(cfg: &RunConfig) -> Trained {
    let start = Instant::now();
    let (train_set, test_set) = dataset(cfg);
    let (model, _) = train(cfg, &train_set, |_| {}).unwrap();
    let ev = Evaluator::new(&model, &train_set, &test_set, cfg.oracle_transitions)
        .unwrap()
        .run(cfg.m, cfg.dn_mode, cfg.eval_seed)
        .unwrap();
    Trained {
        model,
        train: train_set,
        test: test_set,
        rho: ev.report.spearman_rho,
        secs: start.elapsed().as_secs_f64(),
        aiou: ev.report.aiou,
        rl2: ev.report.relative_l2,
    }
}

fn end_to_end(tsa: &Trained) -> Line {
    let a5 = tsa.aiou.get("0.5").copied().unwrap_or(0.0);
    Line {
        name: "synthetic end-to-end",
        pass: tsa.rho >= 0.85
            && a5 >= 0.90
            && tsa.rl2 <= 0.05
            && tsa.secs < 600.0
            && (tsa.rho - TSA_RHO_BASELINE).abs() <= 0.02,
        detail: format!(
            "rho {:.4} (baseline {TSA_RHO_BASELINE}), AIoU@0.5 {a5:.4}, R-l2 {:.4}, {:.0}s",
            tsa.rho, tsa.rl2, tsa.secs
        ),
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn ablation(tsa_seed0: f64) -> Line {
    let mut rhos: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    rhos.entry("TSA").or_default().push(tsa_seed0);
    for seed in 0..3 {
        for (name, v) in [("FR", Variant::FR), ("FSR", Variant::FSR), ("TSA", Variant::TSA)] {
            if seed == 0 && v == Variant::TSA {
                continue;
            }
            rhos.entry(name).or_default().push(train_and_eval(&run_config(v, seed)).rho);
        }
    }
    let m = |k: &str| median(rhos[k].clone());
    let (fr, fsr, tsa) = (m("FR"), m("FSR"), m("TSA"));
    Line {
        name: "ablation ordering",
        pass: tsa > fsr && fsr > fr,
        detail: format!(
            "median rho TSA {tsa:.4} > FSR {fsr:.4} > FR {fr:.4}; per seed TSA {:.4?} FSR {:.4?} FR {:.4?}",
            rhos["TSA"], rhos["FSR"], rhos["FR"]
        ),
    }
}

fn voting(tsa: &Trained) -> Line {
    let ev = Evaluator::new(&tsa.model, &tsa.train, &tsa.test, false).unwrap();
    let spread = |m: usize| -> f64 {
        let runs: Vec<Vec<f64>> = (0..10).map(|s| ev.run(m, DnMode::WithDn, s).unwrap().predictions).collect();
        let n = runs[0].len();
        (0..n)
            .map(|i| {
                let v: Vec<f64> = runs.iter().map(|r| r[i]).collect();
                let mean = v.iter().sum::<f64>() / v.len() as f64;
                (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
            })
            .sum::<f64>()
            / n as f64
    };
    let (s1, s10) = (spread(1), spread(10));
    Line {
        name: "voting trend",
        pass: s10 < s1,
        detail: format!("mean per-instance std over 10 exemplar seeds: M=1 {s1:.4}, M=10 {s10:.4}"),
    }
}

fn oracle_bound(tsa: &Trained) -> Line {
    let cfg = RunConfig {
        oracle_transitions: true,
        ..run_config(Variant::TSA, 0)
    };
    let dagger = train_and_eval(&cfg);
    let exact = AIOU_THRESHOLDS
        .iter()
        .all(|d| dagger.aiou.get(&d.to_string()) == Some(&1.0));
    Line {
        name: "oracle-transition bound",
        pass: dagger.rho >= tsa.rho - 0.01 && exact,
        detail: format!(
            "ground-truth cuts rho {:.4} vs predicted {:.4}, AIoU {:?}",
            dagger.rho, tsa.rho, dagger.aiou
        ),
    }
}

fn main() -> ExitCode {
    let mut lines = Vec::new();
    let mut emit = |line: Line| {
        println!("[{}] {}: {}", if line.pass { "PASS" } else { "FAIL" }, line.name, line.detail);
        lines.push(line.pass);
    };
    emit(gradient_suite());
    emit(metric_oracles());
    emit(lexicon_fixture());
    emit(decoding());
    let tsa = train_and_eval(&run_config(Variant::TSA, 0));
    emit(end_to_end(&tsa));
    emit(ablation(tsa.rho));
    emit(voting(&tsa));
    emit(oracle_bound(&tsa));
    let failed = lines.iter().filter(|p| !**p).count();
    println!("acceptance: {} passed, {failed} failed", lines.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
