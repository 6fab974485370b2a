//! Central finite-difference verification of [`Graph::backward`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::DiffError;
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

/// Outcome of a gradient check over every coordinate of every input.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |a − n| / max(1e-8, |a| + |n|)`.
    pub max_relative_error: f64,
    /// `max |a − n|`.
    pub max_absolute_error: f64,
    pub coordinates: usize,
}

impl GradCheckReport {
    fn failed() -> Self {
        Self {
            max_relative_error: f64::INFINITY,
            max_absolute_error: f64::INFINITY,
            coordinates: 0,
        }
    }
}

fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / (a.abs() + n.abs()).max(1e-8)
}

const SMALL_STEP: f64 = 1e-5;
const LADDER: [f64; 4] = [1e-2, 2.5e-3, 6.25e-4, 1.5625e-4];

/// One central difference plus the larger term magnitude of its two
/// evaluations.
type Central<'a> = dyn FnMut(f64) -> Option<(f64, f64)> + 'a;

/// Richardson-extrapolated central differences on [`LADDER`]. An extrapolant
/// is only trusted where it agrees with the small-step difference up to that
/// difference's rounding error, which rejects steps straddling a kink.
fn extrapolated(central: &mut Central, scale: f64) -> Option<f64> {
    let (small, f_mag) = central(SMALL_STEP * scale)?;
    let rounding = 4.0 * f64::EPSILON * f_mag.max(f64::MIN_POSITIVE) / (SMALL_STEP * scale);
    let d: Vec<Option<f64>> = LADDER.iter().map(|h| central(h * scale).map(|(v, _)| v)).collect();
    let r: Vec<Option<f64>> = d.windows(2).map(|w| Some((16.0 * w[1]? - w[0]?) / 15.0)).collect();
    let best = r
        .windows(2)
        .filter_map(|w| {
            let (v, err) = (w[0]?, (w[0]? - w[1]?).abs());
            ((v - small).abs() <= rounding && err <= rounding).then_some((v, err))
        })
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(v, _)| v);
    Some(best.unwrap_or(small))
}

/// Compares analytic and numeric gradients of `build` at `point`.
///
/// `build` receives a fresh graph plus one input node per tensor in `point`
/// and returns the node to differentiate. Non-scalar outputs are contracted
/// with a fixed pseudo-random weighting so every output coordinate is
/// exercised. The default numeric derivative is Richardson-extrapolated
/// (see [`extrapolated`]); `step` forces a plain central difference.
///
/// Never fails: a build error or non-finite value reports infinite error.
pub fn gradient_check_report<F>(build: F, point: &[Tensor], step: Option<f64>) -> GradCheckReport
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId, DiffError>,
{
    let eval = |inputs: &[Tensor]| -> Result<(Graph, Vec<NodeId>, NodeId), DiffError> {
        let mut g = Graph::new();
        let ids = inputs
            .iter()
            .enumerate()
            .map(|(i, t)| g.input(&format!("x{i}"), t.clone()))
            .collect::<Result<Vec<_>, _>>()?;
        let out = build(&mut g, &ids)?;
        Ok((g, ids, out))
    };

    let Ok((g, ids, out)) = eval(point) else {
        return GradCheckReport::failed();
    };
    let out_shape = g.value(out).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let n_out: usize = out_shape.iter().product();
    let weights: Vec<f64> = if n_out == 1 {
        vec![1.0]
    } else {
        (0..n_out).map(|_| rng.gen_range(-1.0..1.0)).collect()
    };
    let seed = Tensor::new(out_shape, weights.clone()).expect("seed shape");
    let Ok(grads) = g.backward(out, &seed) else {
        return GradCheckReport::failed();
    };

    // Weighted output and the magnitude of its terms.
    let objective = |inputs: &[Tensor]| -> Option<(f64, f64)> {
        let (g, _, out) = eval(inputs).ok()?;
        let terms = g.value(out).data().iter().zip(&weights).map(|(a, b)| a * b);
        let (v, mag) = terms.fold((0.0, 0.0), |(v, m), t| (v + t, m + t.abs()));
        v.is_finite().then_some((v, mag))
    };

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        max_absolute_error: 0.0,
        coordinates: 0,
    };
    let mut work: Vec<Tensor> = point.to_vec();
    for (which, &id) in ids.iter().enumerate() {
        let analytic = grads.get(&g, id);
        if !analytic.is_finite() {
            return GradCheckReport::failed();
        }
        for c in 0..point[which].len() {
            let x0 = point[which].data()[c];
            let mut central = |h: f64| -> Option<(f64, f64)> {
                work[which].data_mut()[c] = x0 + h;
                let plus = objective(&work);
                work[which].data_mut()[c] = x0 - h;
                let minus = objective(&work);
                work[which].data_mut()[c] = x0;
                let ((plus, m_plus), (minus, m_minus)) = (plus?, minus?);
                Some(((plus - minus) / (2.0 * h), m_plus.max(m_minus)))
            };
            let numeric = match step {
                Some(h) => central(h).map(|(v, _)| v),
                None => extrapolated(&mut central, 1.0 + x0.abs()),
            };
            let Some(numeric) = numeric else {
                return GradCheckReport::failed();
            };
            let a = analytic.data()[c];
            report.max_relative_error = report.max_relative_error.max(relative_error(a, numeric));
            report.max_absolute_error = report.max_absolute_error.max((a - numeric).abs());
            report.coordinates += 1;
        }
    }
    report
}

/// Maximum relative error between analytic and numeric gradients.
pub fn gradient_check<F>(build: F, point: &[Tensor], step: Option<f64>) -> f64
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId, DiffError>,
{
    gradient_check_report(build, point, step).max_relative_error
}
