//! Importance regions (axis-aligned bounding boxes of particle clouds), the
//! particle density diagnostic, region amplification and uniform placement.

use nalgebra::DMatrix;

use crate::error::{FilterError, Result};
use crate::rng::RandomStream;

/// Per-dimension `[min, max]` bounds of a particle cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceRegion {
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl ImportanceRegion {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(FilterError::LengthMismatch(lo.len(), hi.len()));
        }
        if lo.is_empty() || lo.iter().zip(&hi).any(|(a, b)| !(a <= b)) {
            return Err(FilterError::InvalidArgument("region bounds must satisfy lo <= hi".into()));
        }
        Ok(Self { lo, hi })
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn lo(&self) -> &[f64] {
        &self.lo
    }

    pub fn hi(&self) -> &[f64] {
        &self.hi
    }

    pub fn row(&self, i: usize) -> (f64, f64) {
        (self.lo[i], self.hi[i])
    }

    pub fn width(&self, i: usize) -> f64 {
        self.hi[i] - self.lo[i]
    }

    pub fn center(&self, i: usize) -> f64 {
        0.5 * (self.lo[i] + self.hi[i])
    }

    pub fn volume(&self) -> f64 {
        (0..self.dim()).map(|i| self.width(i)).product()
    }

    /// Closed-box membership.
    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim() && x.iter().enumerate().all(|(i, &v)| self.lo[i] <= v && v <= self.hi[i])
    }

    pub fn contains_region(&self, other: &ImportanceRegion) -> bool {
        self.dim() == other.dim() && (0..self.dim()).all(|i| self.lo[i] <= other.lo[i] && other.hi[i] <= self.hi[i])
    }
}

/// Bounds of each row of the `d × N` particle matrix.
pub fn compute_ir(particles: &DMatrix<f64>) -> Result<ImportanceRegion> {
    if particles.ncols() == 0 || particles.nrows() == 0 {
        return Err(FilterError::EmptyParticles);
    }
    let (lo, hi) = particles
        .row_iter()
        .map(|row| {
            row.iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)))
        })
        .unzip();
    Ok(ImportanceRegion { lo, hi })
}

/// Region volume per particle.
pub fn compute_pd(ir: &ImportanceRegion, n: usize) -> f64 {
    assert!(n >= 1, "particle density needs at least one particle");
    ir.volume() / n as f64
}

/// Width given to zero-width rows during amplification.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MinWidth {
    /// `scale * (1 + |center|)`.
    Relative(f64),
    Absolute(f64),
}

impl Default for MinWidth {
    fn default() -> Self {
        MinWidth::Relative(1e-3)
    }
}

impl MinWidth {
    fn at(self, center: f64) -> f64 {
        match self {
            MinWidth::Relative(s) => s * (1.0 + center.abs()),
            MinWidth::Absolute(w) => w,
        }
    }
}

/// Expands every row about its center to `gamma` times its width.
pub fn amplify_ir(ir: &ImportanceRegion, gamma: f64, min_width: MinWidth) -> Result<ImportanceRegion> {
    if !(gamma >= 1.0) || !gamma.is_finite() {
        return Err(FilterError::InvalidGamma(gamma));
    }
    let mut lo = ir.lo.clone();
    let mut hi = ir.hi.clone();
    for i in 0..ir.dim() {
        let width = ir.width(i);
        if width == 0.0 {
            let half = 0.5 * min_width.at(ir.lo[i]);
            lo[i] -= half;
            hi[i] += half;
        } else if gamma != 1.0 {
            let grow = 0.5 * (gamma - 1.0) * width;
            lo[i] -= grow;
            hi[i] += grow;
        }
    }
    Ok(ImportanceRegion { lo, hi })
}

fn gcd(mut a: usize, mut b: usize) -> usize {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Generating vector of a rank-1 lattice with every component coprime to `m`,
/// so each coordinate visits all `m` strata exactly once.
fn lattice_generator(d: usize, m: usize) -> Vec<usize> {
    let mut z = vec![1usize];
    for k in 1..d {
        // additive recurrence on an irrational step spreads the generators
        let alpha = (k as f64 * (2.0f64.sqrt() + k as f64 * 3.0f64.sqrt())).fract();
        let mut c = ((alpha * m as f64) as usize).max(1) % m.max(1);
        if c == 0 {
            c = 1;
        }
        while gcd(c, m) != 1 {
            c = c % m + 1;
        }
        z.push(c);
    }
    z
}

/// Places `m` points uniformly inside `ir`.
///
/// One-dimensional regions use the midpoint grid `lo + (j - 1/2) width / m`.
/// Higher dimensions use a randomly shifted rank-1 lattice; each coordinate
/// still occupies every one of the `m` strata once.
pub fn uniform_placement(ir: &ImportanceRegion, m: usize, rng: &mut RandomStream) -> Result<DMatrix<f64>> {
    if m == 0 {
        return Err(FilterError::InvalidArgument("placement needs m >= 1".into()));
    }
    let d = ir.dim();
    if m > 1 && (0..d).any(|i| ir.width(i) == 0.0) {
        return Err(FilterError::ZeroWidthRegion { m });
    }
    let mf = m as f64;
    if d == 1 {
        let (lo, w) = (ir.lo[0], ir.width(0));
        return Ok(DMatrix::from_fn(1, m, |_, j| lo + (j as f64 + 0.5) * (w / mf)));
    }
    let z = lattice_generator(d, m);
    let shift: Vec<f64> = (0..d).map(|_| rng.uniform_open()).collect();
    Ok(DMatrix::from_fn(d, m, |k, j| {
        let stratum = ((j as u128 * z[k] as u128) % m as u128) as f64;
        ir.lo[k] + ir.width(k) * ((stratum + shift[k]) / mf)
    }))
}
