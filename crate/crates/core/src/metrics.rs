//! Scoring: RMSE, KS distance on a grid, importance-region coverage and a
//! paired sign test.

use crate::error::{FilterError, Result};
use crate::model::StateVector;
use crate::region::ImportanceRegion;

/// `sqrt(mean_t ||e_t - x_t||²)`.
pub fn rmse(estimates: &[StateVector], truth: &[StateVector]) -> Result<f64> {
    if estimates.len() != truth.len() {
        return Err(FilterError::LengthMismatch(estimates.len(), truth.len()));
    }
    if estimates.is_empty() {
        return Err(FilterError::InvalidArgument("rmse of an empty sequence".into()));
    }
    let mut acc = 0.0;
    for (e, x) in estimates.iter().zip(truth) {
        if e.len() != x.len() {
            return Err(FilterError::LengthMismatch(e.len(), x.len()));
        }
        acc += (e - x).norm_squared();
    }
    Ok((acc / estimates.len() as f64).sqrt())
}

/// `max_g |a(g) - b(g)|` over the grid.
pub fn ks_distance<P>(cdf_a: impl Fn(&P) -> f64, cdf_b: impl Fn(&P) -> f64, grid: &[P]) -> f64 {
    grid.iter()
        .map(|g| (cdf_a(g) - cdf_b(g)).abs())
        .fold(0.0, f64::max)
        .min(1.0)
}

/// `n` evenly spaced points covering `[lo, hi]`.
pub fn linear_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.5 * (lo + hi)],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}

/// The 2001-point evaluation grid spanning the union of two supports.
pub fn union_grid(a: &[f64], b: &[f64]) -> Vec<f64> {
    let (lo, hi) = a
        .iter()
        .chain(b)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    linear_grid(lo, hi, 2001)
}

/// Composite Simpson rule with `n` (rounded up to even) intervals.
pub fn simpson(f: impl Fn(f64) -> f64, lo: f64, hi: f64, n: usize) -> f64 {
    let n = (n + n % 2).max(2);
    let h = (hi - lo) / n as f64;
    let mut s = f(lo) + f(hi);
    for i in 1..n {
        s += f(lo + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

/// Weighted 1-D step CDF `F(x) = Σ w_i [x > x_i]`.
#[derive(Debug, Clone)]
pub struct StepCdf {
    points: Vec<f64>,
    cumulative: Vec<f64>,
}

impl StepCdf {
    pub fn new(points: &[f64], weights: &[f64]) -> Result<Self> {
        if points.len() != weights.len() {
            return Err(FilterError::LengthMismatch(points.len(), weights.len()));
        }
        let mut order: Vec<usize> = (0..points.len()).collect();
        order.sort_by(|&a, &b| points[a].total_cmp(&points[b]));
        let total: f64 = weights.iter().sum();
        let mut acc = 0.0;
        let mut cumulative = Vec::with_capacity(points.len());
        for &i in &order {
            acc += weights[i] / total;
            cumulative.push(acc);
        }
        Ok(Self {
            points: order.iter().map(|&i| points[i]).collect(),
            cumulative,
        })
    }

    pub fn eval(&self, x: f64) -> f64 {
        let k = self.points.partition_point(|&p| p < x);
        if k == 0 {
            0.0
        } else {
            self.cumulative[k - 1].min(1.0)
        }
    }

    pub fn support(&self) -> &[f64] {
        &self.points
    }
}

/// Per-filter trace of one Monte Carlo run.
#[derive(Debug, Clone, Default)]
pub struct FilterTrace {
    pub filter: String,
    pub estimates: Vec<StateVector>,
    pub ir: Vec<Option<ImportanceRegion>>,
    pub pd: Vec<f64>,
    pub ess: Vec<f64>,
    pub ms: Vec<f64>,
    /// Set when a step failed; the vectors then hold the completed steps.
    pub error: Option<String>,
}

impl FilterTrace {
    pub fn new(filter: &str) -> Self {
        Self {
            filter: filter.to_string(),
            ..Default::default()
        }
    }

    pub fn failed(&self) -> bool {
        self.error.is_some()
    }
}

/// Truth plus every filter's trace for one run.
#[derive(Debug, Clone, Default)]
pub struct RunRecord {
    pub run: usize,
    pub seed: u64,
    pub truth: Vec<StateVector>,
    pub filters: Vec<FilterTrace>,
}

impl RunRecord {
    pub fn trace(&self, filter: &str) -> Option<&FilterTrace> {
        self.filters.iter().find(|f| f.filter == filter)
    }
}

/// Fraction of `(run, step)` pairs whose true state lies in the filter's IR.
/// Failed runs and steps without an IR are skipped; `NaN` if nothing counts.
pub fn ir_coverage(records: &[RunRecord], filter: &str) -> f64 {
    let mut inside = 0usize;
    let mut total = 0usize;
    for rec in records {
        let Some(trace) = rec.trace(filter) else { continue };
        if trace.failed() {
            continue;
        }
        for (ir, x) in trace.ir.iter().zip(&rec.truth) {
            if let Some(ir) = ir {
                total += 1;
                inside += usize::from(ir.contains(x.as_slice()));
            }
        }
    }
    if total == 0 {
        f64::NAN
    } else {
        inside as f64 / total as f64
    }
}

/// `P(X >= k)` for `X ~ Binomial(n, 1/2)`.
pub fn binomial_upper_tail(n: usize, k: usize) -> f64 {
    if k == 0 {
        return 1.0;
    }
    if k > n {
        return 0.0;
    }
    let ln2 = std::f64::consts::LN_2;
    let ln_choose = |i: usize| libm::lgamma(n as f64 + 1.0) - libm::lgamma(i as f64 + 1.0) - libm::lgamma((n - i) as f64 + 1.0);
    let logs: Vec<f64> = (k..=n).map(|i| ln_choose(i) - n as f64 * ln2).collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (max.exp() * logs.iter().map(|l| (l - max).exp()).sum::<f64>()).min(1.0)
}

/// One-sided sign test of `median(a - b) < 0`; ties are dropped and an
/// all-tie sample reports `p = 1`.
pub fn paired_sign_test(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(FilterError::LengthMismatch(a.len(), b.len()));
    }
    if a.len() < 10 {
        return Err(FilterError::InvalidArgument(format!("sign test needs >= 10 pairs, got {}", a.len())));
    }
    let below = a.iter().zip(b).filter(|(x, y)| x < y).count();
    let above = a.iter().zip(b).filter(|(x, y)| x > y).count();
    let n = below + above;
    if n == 0 {
        return Ok(1.0);
    }
    Ok(binomial_upper_tail(n, below))
}

/// Mean and sample standard deviation (`0` for a single value, `NaN` for none).
pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut r = vec![0.0; xs.len()];
    let mut k = 0;
    while k < order.len() {
        let mut end = k + 1;
        while end < order.len() && xs[order[end]] == xs[order[k]] {
            end += 1;
        }
        let avg = 0.5 * (k + end - 1) as f64 + 1.0;
        for &i in &order[k..end] {
            r[i] = avg;
        }
        k = end;
    }
    r
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(FilterError::LengthMismatch(x.len(), y.len()));
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let (mx, _) = mean_sd(&rx);
    let (my, _) = mean_sd(&ry);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    Ok(cov / (vx * vy).sqrt())
}
