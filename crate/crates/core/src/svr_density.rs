//! Support-vector density estimation on a weighted particle cloud.
//!
//! The weighted empirical CDF `F(x) = Σ w_i θ(x ≻ x_i)` (strict, all
//! coordinates) is sampled at the particles themselves. A kernel expansion
//!
//! ```text
//! F_svr(x) = Σ β_i K(x, x_i),    p_svr(x) = Σ β_i k(x, x_i)
//! ```
//!
//! is then fitted by the quadratic program
//!
//! ```text
//! minimize    β' (G + λI) β          G_ij = k(x_i, x_j)
//! subject to  |F(x_i) - Σ_j β_j K(x_i, x_j)| <= ε_i   for every i
//!             β >= 0,  Σ β = 1
//! ```
//!
//! `K` is a product of Gaussian CDFs and `k` the matching product of Gaussian
//! densities, so `p_svr` is exactly the derivative of `F_svr` and integrates
//! to one whenever `β` lies on the simplex. The QP is solved with a dense
//! primal-dual interior-point method.

use std::f64::consts::FRAC_1_SQRT_2;

use nalgebra::{DMatrix, DVector};

use crate::error::{FilterError, Result};
use crate::resampling::{compensated_sum, Weights};

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z * FRAC_1_SQRT_2)
}

fn normal_pdf(z: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * z * z).exp()
}

/// Product Gaussian kernel pair: `k` is the density, `K` its CDF.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelPair {
    bandwidth: Vec<f64>,
}

impl KernelPair {
    pub fn gaussian(bandwidth: Vec<f64>) -> Result<Self> {
        if bandwidth.is_empty() || bandwidth.iter().any(|h| !(h.is_finite() && *h > 0.0)) {
            return Err(FilterError::InvalidArgument(format!("bandwidth must be positive, got {bandwidth:?}")));
        }
        Ok(Self { bandwidth })
    }

    /// Silverman's rule `h = 1.06 σ̂ n^{-1/5}` per dimension, with the weighted
    /// standard deviation and the Kish effective sample size as `n`.
    pub fn silverman(particles: &DMatrix<f64>, weights: &Weights) -> Self {
        let n_eff = weights.ess();
        let w = weights.as_slice();
        let bandwidth = particles
            .row_iter()
            .map(|row| {
                let mean: f64 = row.iter().zip(w).map(|(x, wi)| x * wi).sum();
                let var: f64 = row.iter().zip(w).map(|(x, wi)| wi * (x - mean).powi(2)).sum();
                let h = 1.06 * var.sqrt() * n_eff.powf(-0.2);
                if h > 0.0 && h.is_finite() {
                    h
                } else {
                    1e-3 * (1.0 + mean.abs())
                }
            })
            .collect();
        Self { bandwidth }
    }

    pub fn bandwidth(&self) -> &[f64] {
        &self.bandwidth
    }

    pub fn dim(&self) -> usize {
        self.bandwidth.len()
    }

    /// `k(x, c)`.
    pub fn density(&self, x: &[f64], c: &[f64]) -> f64 {
        self.bandwidth
            .iter()
            .zip(x.iter().zip(c))
            .map(|(h, (xi, ci))| normal_pdf((xi - ci) / h) / h)
            .product()
    }

    /// `K(x, c)`.
    pub fn cdf(&self, x: &[f64], c: &[f64]) -> f64 {
        self.bandwidth
            .iter()
            .zip(x.iter().zip(c))
            .map(|(h, (xi, ci))| normal_cdf((xi - ci) / h))
            .product()
    }
}

/// One `(x_i, F(x_i))` pair of the regression data set.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalCdfSample {
    pub point: DVector<f64>,
    pub cdf_value: f64,
}

/// `x ≻ c`: strictly greater in every coordinate.
fn dominates(x: &[f64], c: &[f64]) -> bool {
    x.iter().zip(c).all(|(a, b)| a > b)
}

/// Weighted empirical CDF with the strict all-coordinate comparator.
#[derive(Debug, Clone)]
pub struct EmpiricalCdf {
    points: DMatrix<f64>,
    weights: Vec<f64>,
}

impl EmpiricalCdf {
    pub fn new(points: DMatrix<f64>, weights: &Weights) -> Result<Self> {
        if points.ncols() != weights.len() {
            return Err(FilterError::LengthMismatch(points.ncols(), weights.len()));
        }
        Ok(Self {
            points,
            weights: weights.as_slice().to_vec(),
        })
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.points
            .column_iter()
            .zip(&self.weights)
            .filter(|(c, _)| dominates(x, c.as_slice()))
            .map(|(_, w)| w)
            .sum()
    }
}

/// `F(x_i)` at every particle.
pub fn empirical_cdf(particles: &DMatrix<f64>, weights: &Weights) -> Result<Vec<EmpiricalCdfSample>> {
    let n = particles.ncols();
    if n != weights.len() {
        return Err(FilterError::LengthMismatch(n, weights.len()));
    }
    let w = weights.as_slice();
    let values: Vec<f64> = if particles.nrows() == 1 {
        // sort once; ties contribute nothing to each other
        let xs = particles.row(0);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
        let mut out = vec![0.0; n];
        let mut below = 0.0;
        let mut k = 0;
        while k < n {
            let mut end = k;
            let mut tie_mass = 0.0;
            while end < n && xs[order[end]] == xs[order[k]] {
                tie_mass += w[order[end]];
                end += 1;
            }
            for &i in &order[k..end] {
                out[i] = below;
            }
            below += tie_mass;
            k = end;
        }
        out
    } else {
        let ecdf = EmpiricalCdf::new(particles.clone(), weights)?;
        particles.column_iter().map(|c| ecdf.eval(c.as_slice())).collect()
    };
    Ok(particles
        .column_iter()
        .zip(values)
        .map(|(c, v)| EmpiricalCdfSample {
            point: c.into_owned(),
            cdf_value: v.clamp(0.0, 1.0),
        })
        .collect())
}

/// Weighted support points handed to the fit.
#[derive(Debug, Clone)]
pub struct SupportSet {
    pub points: DMatrix<f64>,
    pub weights: Weights,
}

impl SupportSet {
    /// Merges bitwise-identical columns (summing their weights) and drops
    /// zero-weight columns.
    pub fn merged(points: &DMatrix<f64>, weights: &Weights) -> Result<Self> {
        let n = points.ncols();
        if n != weights.len() {
            return Err(FilterError::LengthMismatch(n, weights.len()));
        }
        let d = points.nrows();
        let w = weights.as_slice();
        let mut order: Vec<usize> = (0..n).filter(|&i| w[i] > 0.0).collect();
        let key = |i: usize| points.column(i).iter().map(|v| v.to_bits()).collect::<Vec<u64>>();
        order.sort_by(|&a, &b| {
            let (ca, cb) = (points.column(a), points.column(b));
            ca.iter()
                .zip(cb.iter())
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        let mut cols: Vec<usize> = Vec::with_capacity(order.len());
        let mut mass: Vec<f64> = Vec::with_capacity(order.len());
        for i in order {
            match cols.last() {
                Some(&j) if key(j) == key(i) => *mass.last_mut().unwrap() += w[i],
                _ => {
                    cols.push(i);
                    mass.push(w[i]);
                }
            }
        }
        let merged = DMatrix::from_fn(d, cols.len(), |r, c| points[(r, cols[c])]);
        Ok(Self {
            points: merged,
            weights: Weights::normalize(mass)?,
        })
    }

    pub fn len(&self) -> usize {
        self.points.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.points.ncols() == 0
    }

    /// Reduces to at most `max_points` columns by balanced recursive bisection
    /// along the widest coordinate; each cell is replaced by its weighted mean
    /// carrying the cell's total weight.
    pub fn compressed(&self, max_points: usize) -> Result<Self> {
        let n = self.len();
        if max_points == 0 {
            return Err(FilterError::InvalidArgument("max_points must be >= 1".into()));
        }
        if n <= max_points {
            return Ok(self.clone());
        }
        let d = self.points.nrows();
        let w = self.weights.as_slice();
        let mut cells: Vec<Vec<usize>> = Vec::with_capacity(max_points);
        let mut stack: Vec<(Vec<usize>, usize)> = vec![((0..n).collect(), max_points)];
        while let Some((mut idx, k)) = stack.pop() {
            if k <= 1 || idx.len() <= 1 {
                cells.push(idx);
                continue;
            }
            let dim = (0..d)
                .max_by(|&a, &b| {
                    let spread = |r: usize| {
                        let (lo, hi) = idx.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
                            let v = self.points[(r, i)];
                            (lo.min(v), hi.max(v))
                        });
                        hi - lo
                    };
                    spread(a).total_cmp(&spread(b))
                })
                .unwrap_or(0);
            idx.sort_by(|&a, &b| self.points[(dim, a)].total_cmp(&self.points[(dim, b)]).then(a.cmp(&b)));
            let k_left = k / 2;
            let cut = ((idx.len() * k_left + k / 2) / k).clamp(1, idx.len() - 1);
            let right = idx.split_off(cut);
            // right pushed first so cells come out in ascending order
            stack.push((right, k - k_left));
            stack.push((idx, k_left));
        }
        let mut mass = Vec::with_capacity(cells.len());
        let mut reps = DMatrix::zeros(d, cells.len());
        for (c, cell) in cells.iter().enumerate() {
            let m: f64 = cell.iter().map(|&i| w[i]).sum();
            for r in 0..d {
                reps[(r, c)] = cell.iter().map(|&i| w[i] * self.points[(r, i)]).sum::<f64>() / m;
            }
            mass.push(m);
        }
        Ok(Self {
            points: reps,
            weights: Weights::normalize(mass)?,
        })
    }
}

/// Per-point tube half-width as a multiple of `epsilon`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TubeShape {
    /// `ε` everywhere.
    Uniform,
    /// `ε sqrt(F (1 - F) + ε²)`: with `ε = N^{-1/2}` this is the sampling
    /// standard deviation of the empirical CDF, floored at `1/N` in the tails.
    Binomial,
}

impl TubeShape {
    pub fn half_width(self, epsilon: f64, f: f64) -> f64 {
        match self {
            TubeShape::Uniform => epsilon,
            TubeShape::Binomial => epsilon * ((f * (1.0 - f)).max(0.0) + epsilon * epsilon).sqrt(),
        }
    }
}

impl std::str::FromStr for TubeShape {
    type Err = FilterError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(TubeShape::Uniform),
            "binomial" => Ok(TubeShape::Binomial),
            other => Err(FilterError::InvalidArgument(format!("unknown tube shape {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSettings {
    /// Base tube half-width; `None` uses `N^{-1/2}` for `N` samples.
    pub epsilon: Option<f64>,
    pub tube: TubeShape,
    /// Ridge added to the Gram diagonal, relative to its largest entry.
    pub regularization: f64,
    /// Bound on the KKT residuals at return.
    pub tol_kkt: f64,
    pub max_iterations: usize,
    /// Times the tube is doubled before infeasibility is reported.
    pub max_retries: usize,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            epsilon: None,
            tube: TubeShape::Binomial,
            regularization: 1e-6,
            tol_kkt: 1e-8,
            max_iterations: 100,
            max_retries: 3,
        }
    }
}

impl QpSettings {
    pub fn validate(&self) -> Result<()> {
        let ok = self.epsilon.map_or(true, |e| e > 0.0)
            && self.regularization > 0.0
            && self.tol_kkt > 0.0
            && self.max_iterations > 0;
        if ok {
            Ok(())
        } else {
            Err(FilterError::InvalidArgument(format!("QP settings must be positive: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct FitDiagnostics {
    pub iterations: usize,
    /// Tube half-width the returned solution satisfies.
    pub epsilon: f64,
    pub retries: usize,
    /// `max_i |F(x_i) - F_svr(x_i)|`.
    pub max_residual: f64,
    /// Primal KKT residual: tube excess, simplex violation.
    pub kkt_residual: f64,
    pub dual_residual: f64,
}

/// Fitted `p_svr(x) = Σ β_i k(x, x_i)`.
#[derive(Debug, Clone)]
pub struct SvrDensityModel {
    support: DMatrix<f64>,
    beta: Vec<f64>,
    kernel: KernelPair,
    diagnostics: FitDiagnostics,
}

impl SvrDensityModel {
    /// Assembles a model from given coefficients (no fitting).
    pub fn from_parts(support: DMatrix<f64>, beta: Vec<f64>, kernel: KernelPair) -> Result<Self> {
        if support.ncols() != beta.len() {
            return Err(FilterError::LengthMismatch(support.ncols(), beta.len()));
        }
        if support.nrows() != kernel.dim() {
            return Err(FilterError::LengthMismatch(support.nrows(), kernel.dim()));
        }
        Ok(Self {
            support,
            beta,
            kernel,
            diagnostics: FitDiagnostics::default(),
        })
    }

    pub fn support(&self) -> &DMatrix<f64> {
        &self.support
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn kernel(&self) -> &KernelPair {
        &self.kernel
    }

    pub fn diagnostics(&self) -> &FitDiagnostics {
        &self.diagnostics
    }

    fn active(&self) -> impl Iterator<Item = (nalgebra::DVectorView<'_, f64>, f64)> {
        self.support
            .column_iter()
            .zip(self.beta.iter().copied())
            .filter(|(_, b)| *b > 0.0)
            .map(|(c, b)| (c.into(), b))
    }

    pub fn eval_density(&self, x: &[f64]) -> f64 {
        self.active().map(|(c, b)| b * self.kernel.density(x, c.as_slice())).sum()
    }

    pub fn eval_cdf(&self, x: &[f64]) -> f64 {
        self.active()
            .map(|(c, b)| b * self.kernel.cdf(x, c.as_slice()))
            .sum::<f64>()
            .clamp(0.0, 1.0)
    }

    /// Density at every column of `points`.
    pub fn eval_density_columns(&self, points: &DMatrix<f64>) -> Vec<f64> {
        if self.kernel.dim() == 1 {
            let h = self.kernel.bandwidth[0];
            let inv_h = 1.0 / h;
            let scale = INV_SQRT_2PI * inv_h;
            let active: Vec<(f64, f64)> = self.active().map(|(c, b)| (c[0], b * scale)).collect();
            return points
                .row(0)
                .iter()
                .map(|&x| {
                    active
                        .iter()
                        .map(|&(c, b)| {
                            let z = (x - c) * inv_h;
                            b * (-0.5 * z * z).exp()
                        })
                        .sum()
                })
                .collect();
        }
        points.column_iter().map(|c| self.eval_density(c.as_slice())).collect()
    }
}

/// Support-point CDF residuals `Σ_j β_j K(x_i, x_j) - F(x_i)`.
fn residuals(kmat: &DMatrix<f64>, beta: &DVector<f64>, f: &DVector<f64>) -> DVector<f64> {
    kmat * beta - f
}

struct Problem {
    /// Hessian of the objective: `2 (G + λI)`.
    hess: DMatrix<f64>,
    kmat: DMatrix<f64>,
    kt: DMatrix<f64>,
    f: DVector<f64>,
}

impl Problem {
    fn build(points: &DMatrix<f64>, f: DVector<f64>, kernel: &KernelPair, ridge: f64) -> Self {
        let n = points.ncols();
        let mut gram = DMatrix::zeros(n, n);
        let mut kmat = DMatrix::zeros(n, n);
        for j in 0..n {
            let cj = points.column(j);
            for i in 0..n {
                let ci = points.column(i);
                kmat[(i, j)] = kernel.cdf(ci.as_slice(), cj.as_slice());
                if i <= j {
                    let g = kernel.density(ci.as_slice(), cj.as_slice());
                    gram[(i, j)] = g;
                    gram[(j, i)] = g;
                }
            }
        }
        let diag_max = gram.diagonal().max();
        for i in 0..n {
            gram[(i, i)] += ridge * diag_max;
        }
        let kt = kmat.transpose();
        Self {
            hess: gram * 2.0,
            kmat,
            kt,
            f,
        }
    }
}

enum IpmOutcome {
    Solved { beta: DVector<f64>, iterations: usize, dual: f64 },
    Infeasible { iterations: usize },
}

/// Inequalities `C β <= d` stacked as upper tube, lower tube, nonnegativity.
struct Triple {
    up: DVector<f64>,
    lo: DVector<f64>,
    nn: DVector<f64>,
}

impl Triple {
    fn dot(&self, o: &Triple) -> f64 {
        self.up.dot(&o.up) + self.lo.dot(&o.lo) + self.nn.dot(&o.nn)
    }

    fn zip(&self, o: &Triple, f: impl Fn(f64, f64) -> f64 + Copy) -> Triple {
        Triple {
            up: self.up.zip_map(&o.up, f),
            lo: self.lo.zip_map(&o.lo, f),
            nn: self.nn.zip_map(&o.nn, f),
        }
    }

    fn amax(&self) -> f64 {
        self.up.amax().max(self.lo.amax()).max(self.nn.amax())
    }

    /// Largest `α <= 1` keeping `self + α step` positive.
    fn max_step(&self, step: &Triple) -> f64 {
        let mut alpha: f64 = 1.0;
        for (v, dv) in [(&self.up, &step.up), (&self.lo, &step.lo), (&self.nn, &step.nn)] {
            for (x, dx) in v.iter().zip(dv.iter()) {
                if *dx < 0.0 {
                    alpha = alpha.min(-x / dx);
                }
            }
        }
        alpha
    }
}

/// Mehrotra predictor-corrector interior-point method for
/// `min β'Hβ  s.t.  |Kβ - F| <= eps, β >= 0, Σβ = 1`.
fn solve_ipm(p: &Problem, eps: &DVector<f64>, qp: &QpSettings) -> IpmOutcome {
    let n = p.f.len();
    let m = (3 * n) as f64;
    let ones = DVector::from_element(n, 1.0);
    let d_up = &p.f + eps;
    let d_lo = eps - &p.f;

    let mut beta = DVector::from_element(n, 1.0 / n as f64);
    let mut y = 0.0;
    let kb = &p.kmat * &beta;
    let floor = eps.max().max(1.0 / n as f64);
    let mut s = Triple {
        up: (&d_up - &kb).map(|v| v.max(floor)),
        lo: (&d_lo + &kb).map(|v| v.max(floor)),
        nn: beta.clone(),
    };
    let mut z = Triple {
        up: DVector::from_element(n, 1.0),
        lo: DVector::from_element(n, 1.0),
        nn: DVector::from_element(n, 1.0),
    };

    for it in 1..=qp.max_iterations {
        let kb = &p.kmat * &beta;
        let hb = &p.hess * &beta;
        let r_d = &hb + &ones * y + &p.kt * (&z.up - &z.lo) - &z.nn;
        let r_e = beta.sum() - 1.0;
        let r = Triple {
            up: &kb + &s.up - &d_up,
            lo: -&kb + &s.lo - &d_lo,
            nn: -&beta + &s.nn,
        };
        let mu = s.dot(&z) / m;
        let scale = 1.0 + hb.amax();
        let dual = r_d.amax() / scale;
        if dual <= qp.tol_kkt && r_e.abs() <= qp.tol_kkt && r.amax() <= qp.tol_kkt && mu <= qp.tol_kkt {
            return IpmOutcome::Solved { beta, iterations: it - 1, dual };
        }
        if z.amax() > 1e14 || !mu.is_finite() {
            return IpmOutcome::Infeasible { iterations: it };
        }

        let w = z.zip(&s, |z, s| z / s);
        let mut mat = &p.kt * DMatrix::from_fn(n, n, |i, j| (w.up[i] + w.lo[i]) * p.kmat[(i, j)]);
        mat += &p.hess;
        for i in 0..n {
            mat[(i, i)] += w.nn[i];
        }
        let Some(chol) = robust_cholesky(mat) else {
            return IpmOutcome::Infeasible { iterations: it };
        };
        let m_inv_one = chol.solve(&ones);

        let direction = |rc: &Triple| -> (DVector<f64>, f64, Triple, Triple) {
            // Δz = W (CΔβ + r) - rc / s
            let t = Triple {
                up: w.up.component_mul(&r.up) - rc.up.component_div(&s.up),
                lo: w.lo.component_mul(&r.lo) - rc.lo.component_div(&s.lo),
                nn: w.nn.component_mul(&r.nn) - rc.nn.component_div(&s.nn),
            };
            let rhs = -&r_d - (&p.kt * (&t.up - &t.lo) - &t.nn);
            let a = chol.solve(&rhs);
            let dy = (a.sum() + r_e) / m_inv_one.sum();
            let db = a - &m_inv_one * dy;
            let kdb = &p.kmat * &db;
            let dz = Triple {
                up: w.up.component_mul(&(&kdb + &r.up)) - rc.up.component_div(&s.up),
                lo: w.lo.component_mul(&(-&kdb + &r.lo)) - rc.lo.component_div(&s.lo),
                nn: w.nn.component_mul(&(-&db + &r.nn)) - rc.nn.component_div(&s.nn),
            };
            // Δs = -(rc + S Δz) / z
            let ds = Triple {
                up: -(&rc.up + s.up.component_mul(&dz.up)).component_div(&z.up),
                lo: -(&rc.lo + s.lo.component_mul(&dz.lo)).component_div(&z.lo),
                nn: -(&rc.nn + s.nn.component_mul(&dz.nn)).component_div(&z.nn),
            };
            (db, dy, ds, dz)
        };

        let sz = s.zip(&z, |a, b| a * b);
        let (_, _, ds_aff, dz_aff) = direction(&sz);
        let alpha_aff = s.max_step(&ds_aff).min(z.max_step(&dz_aff));
        let s_aff = s.zip(&ds_aff, |a, b| a + alpha_aff * b);
        let z_aff = z.zip(&dz_aff, |a, b| a + alpha_aff * b);
        let sigma = (s_aff.dot(&z_aff) / m / mu).powi(3).min(1.0);
        let cross = ds_aff.zip(&dz_aff, |a, b| a * b);
        let rc = sz.zip(&cross, |a, b| a + b - sigma * mu);
        let (db, dy, ds, dz) = direction(&rc);
        let alpha = (0.99 * s.max_step(&ds).min(z.max_step(&dz))).min(1.0);

        beta.axpy(alpha, &db, 1.0);
        y += alpha * dy;
        s = s.zip(&ds, |a, b| a + alpha * b);
        z = z.zip(&dz, |a, b| a + alpha * b);
    }
    IpmOutcome::Infeasible {
        iterations: qp.max_iterations,
    }
}

/// Cholesky with a growing diagonal shift when the matrix is numerically
/// indefinite.
fn robust_cholesky(mut mat: DMatrix<f64>) -> Option<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    let n = mat.nrows();
    let base = mat.diagonal().amax().max(1.0);
    let mut shift = 0.0;
    for _ in 0..6 {
        if let Some(c) = mat.clone().cholesky() {
            return Some(c);
        }
        let next = if shift == 0.0 { 1e-14 * base } else { shift * 100.0 };
        for i in 0..n {
            mat[(i, i)] += next - shift;
        }
        shift = next;
    }
    None
}

/// Fits `β` to CDF samples. `ε` defaults to `N^{-1/2}` for `N` samples.
pub fn fit_beta(samples: &[EmpiricalCdfSample], kernel: &KernelPair, qp: &QpSettings) -> Result<SvrDensityModel> {
    qp.validate()?;
    if samples.is_empty() {
        return Err(FilterError::EmptyParticles);
    }
    let d = samples[0].point.len();
    if d != kernel.dim() {
        return Err(FilterError::LengthMismatch(d, kernel.dim()));
    }

    // drop repeated support points; identical points carry identical F
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.sort_by(|&a, &b| {
        samples[a]
            .point
            .iter()
            .zip(samples[b].point.iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    order.dedup_by(|a, b| samples[*a].point == samples[*b].point);
    let keep = order;
    let n = keep.len();
    let points = DMatrix::from_fn(d, n, |r, c| samples[keep[c]].point[r]);
    let f = DVector::from_fn(n, |i, _| samples[keep[i]].cdf_value);

    let mut epsilon = qp.epsilon.unwrap_or(1.0 / (samples.len() as f64).sqrt());
    let kernel = kernel.clone();
    if n == 1 {
        let k = kernel.cdf(points.column(0).as_slice(), points.column(0).as_slice());
        let resid = (f[0] - k).abs();
        return Ok(SvrDensityModel {
            support: points,
            beta: vec![1.0],
            kernel,
            diagnostics: FitDiagnostics {
                epsilon,
                max_residual: resid,
                ..Default::default()
            },
        });
    }

    let problem = Problem::build(&points, f, &kernel, qp.regularization);
    let mut iterations = 0;
    for retry in 0..=qp.max_retries {
        let eps = problem.f.map(|f| qp.tube.half_width(epsilon, f));
        // aim just inside the tube so the cleaned-up solution stays in it
        let inner = &eps * (1.0 - 1e-6);
        match solve_ipm(&problem, &inner, qp) {
            IpmOutcome::Solved { beta, iterations: it, dual } => {
                iterations += it;
                let b = beta.map(|v| v.max(0.0));
                let b = &b / compensated_sum(b.as_slice());
                let r = residuals(&problem.kmat, &b, &problem.f);
                let excess = r.zip_fold(&eps, 0.0f64, |acc, r, e| acc.max(r.abs() - e));
                let simplex = (compensated_sum(b.as_slice()) - 1.0).abs();
                return Ok(SvrDensityModel {
                    support: points,
                    beta: b.as_slice().to_vec(),
                    kernel,
                    diagnostics: FitDiagnostics {
                        iterations,
                        epsilon,
                        retries: retry,
                        max_residual: r.amax(),
                        kkt_residual: excess.max(simplex).max(dual),
                        dual_residual: dual,
                    },
                });
            }
            IpmOutcome::Infeasible { iterations: it } => {
                iterations += it;
                if retry < qp.max_retries {
                    epsilon *= 2.0;
                }
            }
        }
    }
    Err(FilterError::QpInfeasible { epsilon })
}

/// Merge, optional compression, empirical CDF, fit: the full pipeline on a
/// weighted cloud. `epsilon` defaults to `N^{-1/2}` for the Kish effective
/// size `N` of the original weights.
pub fn fit_particles(
    particles: &DMatrix<f64>,
    weights: &Weights,
    kernel: &KernelPair,
    qp: &QpSettings,
    max_support: Option<usize>,
) -> Result<SvrDensityModel> {
    let merged = SupportSet::merged(particles, weights)?;
    let support = match max_support {
        Some(m) => merged.compressed(m)?,
        None => merged,
    };
    let samples = empirical_cdf(&support.points, &support.weights)?;
    let mut qp = qp.clone();
    if qp.epsilon.is_none() {
        qp.epsilon = Some(1.0 / weights.ess().sqrt());
    }
    fit_beta(&samples, kernel, &qp)
}
