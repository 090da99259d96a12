//! Resampling schemes over a normalized weight vector.
//!
//! Fixed-population schemes (systematic, multinomial, minimum variance,
//! residual) return exactly `N` parent indices, each carrying weight `1/N`.
//! Branching returns a random number of offspring and keeps in-band particles
//! with their original weight.

use std::fmt;
use std::str::FromStr;

use crate::error::{FilterError, Result};
use crate::rng::RandomStream;

const WEIGHT_SUM_TOL: f64 = 1e-12;

/// Neumaier-compensated sum.
pub fn compensated_sum<'a, I: IntoIterator<Item = &'a f64>>(xs: I) -> f64 {
    let mut sum = 0.0f64;
    let mut c = 0.0f64;
    for &x in xs {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            c += (sum - t) + x;
        } else {
            c += (x - t) + sum;
        }
        sum = t;
    }
    sum + c
}

/// Nonnegative weights summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights(Vec<f64>);

impl Weights {
    /// Accepts an already normalized vector (sum within 1e-12 of one).
    pub fn new(w: Vec<f64>) -> Result<Self> {
        check_entries(&w)?;
        let s = compensated_sum(&w);
        if (s - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(FilterError::InvalidWeights(format!("sum is {s}")));
        }
        Ok(Self(w))
    }

    /// Normalizes nonnegative raw weights with a positive total.
    pub fn normalize(mut raw: Vec<f64>) -> Result<Self> {
        check_entries(&raw)?;
        let s = compensated_sum(&raw);
        if !(s > 0.0 && s.is_finite()) {
            return Err(FilterError::InvalidWeights(format!("total mass is {s}")));
        }
        raw.iter_mut().for_each(|v| *v /= s);
        Ok(Self(raw))
    }

    /// Normalizes log-weights by shifting with their maximum first.
    pub fn from_log(log_w: &[f64]) -> Result<Self> {
        let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(FilterError::InvalidWeights("no finite log-weight".into()));
        }
        Self::normalize(log_w.iter().map(|&l| (l - max).exp()).collect())
    }

    pub fn uniform(n: usize) -> Self {
        assert!(n >= 1);
        Self(vec![1.0 / n as f64; n])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Kish effective sample size `1 / Σ w²`.
    pub fn ess(&self) -> f64 {
        1.0 / self.0.iter().map(|w| w * w).sum::<f64>()
    }
}

fn check_entries(w: &[f64]) -> Result<()> {
    if w.is_empty() {
        return Err(FilterError::InvalidWeights("empty".into()));
    }
    if let Some(bad) = w.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(FilterError::InvalidWeights(format!("entry {bad}")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ResamplingScheme {
    Systematic,
    Multinomial,
    MinimumVariance,
    Residual,
    /// Uniform branching band `(a, b)` applied to every particle.
    Branching { a: f64, b: f64 },
}

impl ResamplingScheme {
    pub const DEFAULT_BRANCHING: ResamplingScheme = ResamplingScheme::Branching { a: 0.25, b: 4.0 };
}

impl Default for ResamplingScheme {
    fn default() -> Self {
        ResamplingScheme::Systematic
    }
}

impl fmt::Display for ResamplingScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ResamplingScheme::Systematic => "systematic",
            ResamplingScheme::Multinomial => "multinomial",
            ResamplingScheme::MinimumVariance => "min_variance",
            ResamplingScheme::Residual => "residual",
            ResamplingScheme::Branching { .. } => "branching",
        };
        f.write_str(s)
    }
}

impl FromStr for ResamplingScheme {
    type Err = FilterError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "systematic" => Ok(ResamplingScheme::Systematic),
            "multinomial" => Ok(ResamplingScheme::Multinomial),
            "min_variance" | "minimum_variance" => Ok(ResamplingScheme::MinimumVariance),
            "residual" => Ok(ResamplingScheme::Residual),
            "branching" => Ok(ResamplingScheme::DEFAULT_BRANCHING),
            other => Err(FilterError::Config(format!("unknown resampling scheme '{other}'"))),
        }
    }
}

/// Parent indices plus the (unnormalized for branching) weight of each offspring.
#[derive(Debug, Clone, PartialEq)]
pub struct ResampleOutcome {
    pub indices: Vec<usize>,
    pub weights: Vec<f64>,
}

impl ResampleOutcome {
    fn equal_weight(indices: Vec<usize>) -> Self {
        let w = 1.0 / indices.len() as f64;
        let weights = vec![w; indices.len()];
        Self { indices, weights }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Offspring count per parent.
    pub fn counts(&self, n_parents: usize) -> Vec<usize> {
        let mut c = vec![0usize; n_parents];
        for &i in &self.indices {
            c[i] += 1;
        }
        c
    }
}

/// Cumulative sums of `values`.
fn cumulative(values: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    values
        .iter()
        .map(|v| {
            acc += v;
            acc
        })
        .collect()
}

/// Maps ascending positions in `[0, cum.last())` to the interval containing them.
///
/// Parent `j` owns `[cum[j-1], cum[j])`, so zero-mass parents own nothing.
/// Positions past the final cumulative value (rounding) go to the last parent
/// with positive mass.
fn select_sorted(cum: &[f64], values: &[f64], positions: impl Iterator<Item = f64>, out: &mut Vec<usize>) {
    let last_positive = values.iter().rposition(|&v| v > 0.0).unwrap_or(values.len() - 1);
    let mut j = 0usize;
    for u in positions {
        while j < cum.len() && cum[j] <= u {
            j += 1;
        }
        out.push(if j < cum.len() { j } else { last_positive });
    }
}

/// Integer part and remainder of `n * w_i`, snapping values within 1e-9 of an
/// integer so exactly representable allocations stay deterministic.
fn split_expected(w: &Weights, n: usize) -> (Vec<usize>, Vec<f64>) {
    let nf = n as f64;
    w.as_slice()
        .iter()
        .map(|&wi| {
            let mut e = nf * wi;
            let r = e.round();
            if (e - r).abs() < 1e-9 {
                e = r;
            }
            let fl = e.floor();
            (fl as usize, e - fl)
        })
        .unzip()
}

/// Parent indices for `n_out` strata `(u + k) / n_out`, `k = 0..n_out`.
pub fn systematic_indices(w: &Weights, n_out: usize, u: f64) -> Vec<usize> {
    let n = n_out as f64;
    let cum = cumulative(w.as_slice());
    let mut out = Vec::with_capacity(n_out);
    select_sorted(&cum, w.as_slice(), (0..n_out).map(|k| (u + k as f64) / n), &mut out);
    out
}

/// Systematic resampling to `n_out` offspring with a single uniform offset.
pub fn systematic_resample_n(w: &Weights, n_out: usize, rng: &mut RandomStream) -> ResampleOutcome {
    let u = rng.uniform();
    ResampleOutcome::equal_weight(systematic_indices(w, n_out, u))
}

pub fn systematic_resample(w: &Weights, rng: &mut RandomStream) -> ResampleOutcome {
    systematic_resample_n(w, w.len(), rng)
}

/// One independent uniform per offspring.
pub fn multinomial_resample(w: &Weights, rng: &mut RandomStream) -> ResampleOutcome {
    let n = w.len();
    let cum = cumulative(w.as_slice());
    let last_positive = w.as_slice().iter().rposition(|&v| v > 0.0).unwrap_or(n - 1);
    let indices = (0..n)
        .map(|_| {
            let u = rng.uniform();
            let j = cum.partition_point(|&c| c <= u);
            if j < n {
                j
            } else {
                last_positive
            }
        })
        .collect();
    ResampleOutcome::equal_weight(indices)
}

/// `⌊N w_i⌋` offspring each, plus a systematic pass over the fractional parts,
/// so every count is `⌊N w_i⌋` or `⌈N w_i⌉`.
pub fn minimum_variance_resample(w: &Weights, rng: &mut RandomStream) -> ResampleOutcome {
    minimum_variance_resample_n(w, w.len(), rng)
}

/// Minimum-variance resampling to `n` offspring.
pub fn minimum_variance_resample_n(w: &Weights, n: usize, rng: &mut RandomStream) -> ResampleOutcome {
    let (floors, fracs) = split_expected(w, n);
    let mut indices = Vec::with_capacity(n);
    for (i, &c) in floors.iter().enumerate() {
        indices.extend(std::iter::repeat(i).take(c));
    }
    let n_res = n - indices.len();
    if n_res > 0 {
        let total = compensated_sum(&fracs);
        let scale = n_res as f64 / total;
        let scaled: Vec<f64> = fracs.iter().map(|f| f * scale).collect();
        let cum = cumulative(&scaled);
        let u = rng.uniform();
        select_sorted(&cum, &scaled, (0..n_res).map(|k| u + k as f64), &mut indices);
    }
    indices.sort_unstable();
    ResampleOutcome::equal_weight(indices)
}

/// `⌊N w_i⌋` deterministic offspring; the rest drawn multinomially from the
/// normalized fractional parts, using sorted uniforms from the order-statistic
/// recursion.
pub fn residual_resample(w: &Weights, rng: &mut RandomStream) -> ResampleOutcome {
    let n = w.len();
    let (floors, fracs) = split_expected(w, n);
    let mut indices = Vec::with_capacity(n);
    let n_det: usize = floors.iter().sum();
    let n_res = n - n_det;
    if n_res > 0 {
        let total = compensated_sum(&fracs);
        let probs: Vec<f64> = fracs.iter().map(|f| f / total).collect();
        let cum = cumulative(&probs);
        // descending order statistics of n_res uniforms
        let mut sorted = Vec::with_capacity(n_res);
        let mut top = 1.0f64;
        for k in (1..=n_res).rev() {
            top *= rng.uniform_open().powf(1.0 / k as f64);
            sorted.push(top);
        }
        sorted.reverse();
        select_sorted(&cum, &probs, sorted.into_iter(), &mut indices);
    }
    for (i, &c) in floors.iter().enumerate() {
        indices.extend(std::iter::repeat(i).take(c));
    }
    indices.sort_unstable();
    ResampleOutcome::equal_weight(indices)
}

/// Branching: parents with `N w_i` outside `(a_i, b_i)` split into
/// `⌊N w_i⌋ + Bernoulli(frac)` offspring of weight `1/N`; the others are kept
/// once with weight `w_i`.
pub fn branching_resample(w: &Weights, bounds: &[(f64, f64)], rng: &mut RandomStream) -> Result<ResampleOutcome> {
    let n = w.len();
    if bounds.len() != n {
        return Err(FilterError::LengthMismatch(bounds.len(), n));
    }
    let nf = n as f64;
    for (index, &(a, b)) in bounds.iter().enumerate() {
        if !(0.0 < a && a < b && b < nf) {
            return Err(FilterError::InvalidBounds { index, a, b, n });
        }
    }
    let mut indices = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    for (i, (&wi, &(a, b))) in w.as_slice().iter().zip(bounds).enumerate() {
        let e = nf * wi;
        if e > a && e < b {
            indices.push(i);
            weights.push(wi);
        } else {
            let fl = e.floor();
            let extra = usize::from(rng.bernoulli(e - fl));
            let count = fl as usize + extra;
            indices.extend(std::iter::repeat(i).take(count));
            weights.extend(std::iter::repeat(1.0 / nf).take(count));
        }
    }
    Ok(ResampleOutcome { indices, weights })
}

pub fn resample(scheme: ResamplingScheme, w: &Weights, rng: &mut RandomStream) -> Result<ResampleOutcome> {
    Ok(match scheme {
        ResamplingScheme::Systematic => systematic_resample(w, rng),
        ResamplingScheme::Multinomial => multinomial_resample(w, rng),
        ResamplingScheme::MinimumVariance => minimum_variance_resample(w, rng),
        ResamplingScheme::Residual => residual_resample(w, rng),
        ResamplingScheme::Branching { a, b } => {
            let bounds = vec![(a, b); w.len()];
            branching_resample(w, &bounds, rng)?
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn w(v: &[f64]) -> Weights {
        Weights::new(v.to_vec()).unwrap()
    }

    fn random_weights(rng: &mut RandomStream, n: usize) -> Weights {
        // exponential draws give a flat Dirichlet
        Weights::normalize((0..n).map(|_| -rng.uniform_open().ln()).collect()).unwrap()
    }

    #[test]
    fn weights_validation() {
        assert!(Weights::new(vec![0.5, 0.6]).is_err());
        assert!(Weights::new(vec![1.5, -0.5]).is_err());
        assert!(Weights::new(vec![]).is_err());
        assert!(Weights::normalize(vec![0.0, 0.0]).is_err());
        let n = Weights::normalize(vec![1.0, 3.0]).unwrap();
        assert_eq!(n.as_slice(), &[0.25, 0.75]);
        let l = Weights::from_log(&[-1000.0, -1000.0 + 2f64.ln()]).unwrap();
        assert!((l.as_slice()[1] - 2.0 / 3.0).abs() < 1e-12);
        assert!((Weights::uniform(4).ess() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn systematic_degenerate_weight() {
        let mut rng = RandomStream::new(0, 0);
        let out = systematic_resample(&w(&[1.0, 0.0, 0.0]), &mut rng);
        assert_eq!(out.indices, vec![0, 0, 0]);
        assert!(out.weights.iter().all(|&x| x == 1.0 / 3.0));
    }

    #[test]
    fn systematic_two_strata() {
        assert_eq!(systematic_indices(&w(&[0.5, 0.5]), 2, 0.3), vec![0, 1]);
    }

    #[test]
    fn systematic_skips_zero_weights() {
        let wt = w(&[0.0, 0.5, 0.0, 0.5, 0.0]);
        for u in [0.0, 0.25, 0.5, 0.999_999] {
            let idx = systematic_indices(&wt, 5, u);
            assert!(idx.iter().all(|&i| i == 1 || i == 3), "{idx:?}");
        }
    }

    #[test]
    fn min_variance_integral_allocation() {
        let mut rng = RandomStream::new(0, 0);
        for _ in 0..20 {
            let out = minimum_variance_resample_n(&w(&[0.5, 0.25, 0.25]), 4, &mut rng);
            assert_eq!(out.counts(3), vec![2, 1, 1]);
        }
    }

    #[test]
    fn min_variance_two_outcomes() {
        let mut rng = RandomStream::new(5, 0);
        let reps = 100_000;
        let mut total = [0usize; 2];
        for _ in 0..reps {
            let c = minimum_variance_resample(&w(&[0.625, 0.375]), &mut rng).counts(2);
            assert!(c == vec![1, 1] || c == vec![2, 0], "{c:?}");
            total[0] += c[0];
            total[1] += c[1];
        }
        let mean0 = total[0] as f64 / reps as f64;
        let mean1 = total[1] as f64 / reps as f64;
        // count_0 - 1 is Bernoulli(0.25): sd of the mean is sqrt(0.1875/1e5)
        let tol = 3.0 * (0.1875f64 / reps as f64).sqrt();
        assert!((mean0 - 1.25).abs() < tol, "{mean0}");
        assert!((mean1 - 0.75).abs() < tol, "{mean1}");
    }

    #[test]
    fn min_variance_counts_are_tight() {
        let mut rng = RandomStream::new(6, 0);
        for trial in 0..10_000 {
            let n = 1 + trial % 37;
            let wt = random_weights(&mut rng, n);
            let c = minimum_variance_resample(&wt, &mut rng).counts(n);
            assert_eq!(c.iter().sum::<usize>(), n);
            for (ci, wi) in c.iter().zip(wt.as_slice()) {
                assert!((*ci as f64 - n as f64 * wi).abs() < 1.0);
            }
        }
    }

    #[test]
    fn residual_deterministic_cases() {
        let mut rng = RandomStream::new(0, 0);
        let out = residual_resample(&w(&[0.7, 0.3]), &mut rng);
        // 10 offspring need N = 10
        assert_eq!(out.counts(2).iter().sum::<usize>(), 2);
        let ten = Weights::new(vec![0.07, 0.03, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1, 0.1, 0.2]).unwrap();
        let c = residual_resample(&ten, &mut rng).counts(10);
        assert_eq!(c[2..], [1, 1, 1, 1, 1, 1, 1, 2]);
        let third = 1.0 / 3.0;
        let c = residual_resample(&w(&[third, third, third]), &mut rng).counts(3);
        assert_eq!(c, vec![1, 1, 1]);
    }

    #[test]
    fn residual_seven_three_over_ten() {
        // (0.7, 0.3) spread over 10 parents: 0.7 on parent 0 and 0.3 on parent 1
        let mut v = vec![0.0; 10];
        v[0] = 0.7;
        v[1] = 0.3;
        let mut rng = RandomStream::new(0, 0);
        let c = residual_resample(&w(&v), &mut rng).counts(10);
        assert_eq!(&c[..2], &[7, 3]);
    }

    #[test]
    fn branching_in_band_keeps_weight() {
        let mut rng = RandomStream::new(0, 0);
        // N = 8: N w_0 = 0.5 and N w_i = 15/14 for the rest, all inside (0.25, 4)
        let mut v = vec![0.9375 / 7.0; 8];
        v[0] = 0.0625;
        let wt = Weights::normalize(v).unwrap();
        let out = branching_resample(&wt, &[(0.25, 4.0); 8], &mut rng).unwrap();
        assert_eq!(out.indices, (0..8).collect::<Vec<_>>());
        assert_eq!(out.weights, wt.as_slice());
    }

    #[test]
    fn branching_out_of_band_integral() {
        let mut rng = RandomStream::new(0, 0);
        // N = 4, N w_0 = 3 outside (0.25, 2)
        let wt = w(&[0.75, 0.25, 0.0, 0.0]);
        let out = branching_resample(&wt, &[(0.25, 2.0); 4], &mut rng).unwrap();
        assert_eq!(out.counts(4)[0], 3);
        // N w_1 = 1 is in band
        assert_eq!(out.counts(4)[1], 1);
    }

    #[test]
    fn branching_rejects_bad_bounds() {
        let mut rng = RandomStream::new(0, 0);
        let wt = w(&[0.5, 0.5]);
        assert!(matches!(
            branching_resample(&wt, &[(0.25, 4.0), (0.25, 1.0)], &mut rng),
            Err(FilterError::InvalidBounds { index: 0, .. })
        ));
        assert!(branching_resample(&wt, &[(0.0, 1.0); 2], &mut rng).is_err());
        assert!(branching_resample(&wt, &[(0.5, 0.4); 2], &mut rng).is_err());
    }

    #[test]
    fn scheme_parsing() {
        assert_eq!("residual".parse::<ResamplingScheme>().unwrap(), ResamplingScheme::Residual);
        assert_eq!(
            "branching".parse::<ResamplingScheme>().unwrap(),
            ResamplingScheme::Branching { a: 0.25, b: 4.0 }
        );
        assert!("stratified".parse::<ResamplingScheme>().is_err());
        for s in ["systematic", "multinomial", "min_variance", "residual", "branching"] {
            assert_eq!(s.parse::<ResamplingScheme>().unwrap().to_string(), s);
        }
    }

    /// 3σ check of E[count_i] = N w_i with the binomial variance bound.
    fn unbiased(scheme: ResamplingScheme, n: usize, reps: usize, seed: u64) {
        let mut rng = RandomStream::new(seed, 0);
        let wt = random_weights(&mut rng, n);
        let mut mass = vec![0.0; n];
        for _ in 0..reps {
            let out = resample(scheme, &wt, &mut rng).unwrap();
            for (&i, &ow) in out.indices.iter().zip(&out.weights) {
                mass[i] += ow * n as f64;
            }
        }
        for (i, (&m, &wi)) in mass.iter().zip(wt.as_slice()).enumerate() {
            let e = n as f64 * wi;
            let sd = (e * (1.0 - wi) / reps as f64).sqrt();
            let mean = m / reps as f64;
            assert!((mean - e).abs() <= 3.0 * sd + 1e-9, "{scheme} parent {i}: {mean} vs {e}");
        }
    }

    #[test]
    fn systematic_unbiased() {
        unbiased(ResamplingScheme::Systematic, 100, 100_000, 21);
    }

    #[test]
    fn residual_unbiased() {
        unbiased(ResamplingScheme::Residual, 50, 100_000, 22);
    }

    #[test]
    fn branching_total_offspring() {
        let n = 100;
        let reps = 100_000;
        let mut rng = RandomStream::new(23, 0);
        let wt = random_weights(&mut rng, n);
        let (a, b) = (0.25, 4.0);
        let mut expected = 0.0;
        let mut var = 0.0;
        for &wi in wt.as_slice() {
            let e = n as f64 * wi;
            if e > a && e < b {
                expected += 1.0;
            } else {
                expected += e;
                let f = e - e.floor();
                var += f * (1.0 - f);
            }
        }
        let mut total = 0usize;
        for _ in 0..reps {
            total += resample(ResamplingScheme::Branching { a, b }, &wt, &mut rng).unwrap().len();
        }
        let mean = total as f64 / reps as f64;
        assert!((mean - expected).abs() <= 3.0 * (var / reps as f64).sqrt() + 1e-12, "{mean} vs {expected}");
    }

    #[test]
    fn multinomial_matches_listing_semantics() {
        let mut rng = RandomStream::new(24, 0);
        let out = multinomial_resample(&w(&[0.0, 1.0, 0.0]), &mut rng);
        assert_eq!(out.indices, vec![1, 1, 1]);
        unbiased(ResamplingScheme::Multinomial, 20, 50_000, 25);
    }

    proptest! {
        #[test]
        fn fixed_schemes_preserve_size_and_support(
            raw in prop::collection::vec(prop_oneof![Just(0.0), 0.0f64..10.0], 1..60),
            seed in any::<u64>(),
        ) {
            prop_assume!(raw.iter().any(|&v| v > 0.0));
            let wt = Weights::normalize(raw).unwrap();
            for scheme in [
                ResamplingScheme::Systematic,
                ResamplingScheme::Multinomial,
                ResamplingScheme::MinimumVariance,
                ResamplingScheme::Residual,
            ] {
                let mut a = RandomStream::new(seed, 1);
                let mut b = RandomStream::new(seed, 1);
                let out = resample(scheme, &wt, &mut a).unwrap();
                prop_assert_eq!(&out, &resample(scheme, &wt, &mut b).unwrap());
                prop_assert_eq!(out.len(), wt.len());
                let inv = 1.0 / wt.len() as f64;
                prop_assert!(out.weights.iter().all(|&x| x == inv));
                for &i in &out.indices {
                    prop_assert!(wt.as_slice()[i] > 0.0, "{} picked zero-weight parent {}", scheme, i);
                }
            }
        }
    }
}
