//! Distributions and dispersion statistics for Euclidean × sphere states:
//! Gaussian sampling, Fisher–von Mises–Langevin (FML) directional sampling,
//! per-block generalized variances, and versor (unit quaternion) algebra.
//!
//! Sampling functions mutate only the random stream passed to them; separate
//! streams may be drawn from concurrently.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal};
use thiserror::Error;

use crate::manifold::{Block, Layout, UNIT_NORM_TOL};

/// Errors raised by sampling, variance, and quaternion operations.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum StatsError {
    #[error("value is not finite")]
    NonFinite,
    #[error("direction norm {norm} deviates from 1 beyond tolerance")]
    NotUnit { norm: f64 },
    #[error("concentration must be positive and finite, got {kappa}")]
    BadConcentration { kappa: f64 },
    #[error("sphere dimension must be at least 2, got {dim}")]
    BadDimension { dim: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("covariance matrix is not symmetric")]
    NotSymmetric,
    #[error("covariance matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("need at least {need} ensemble members, got {got}")]
    TooFewMembers { need: usize, got: usize },
    #[error("expected {expected} block weights, got {got}")]
    WeightCount { expected: usize, got: usize },
}

// ─── versor algebra ──────────────────────────────────────────────────────────

/// Unit quaternion in the scalar-first Hamilton convention `[w, x, y, z]`.
///
/// `q` and `-q` encode the same rotation; sign handling is explicit via
/// [`Versor::canonicalized_against`]. All constructors and operations keep the
/// norm within 1e-12 of 1 by renormalizing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Versor {
    w: f64,
    x: f64,
    y: f64,
    z: f64,
}

impl Versor {
    pub const IDENTITY: Versor = Versor {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    /// Builds a versor from scalar-first components, renormalizing if the norm
    /// is within [`UNIT_NORM_TOL`] of 1 and failing otherwise.
    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Result<Versor, StatsError> {
        Versor::normalize_within(w, x, y, z, UNIT_NORM_TOL)
    }

    /// Builds a versor from components whose norm may deviate from 1 by up to
    /// `tol` (used by ingestion paths with looser guarantees).
    pub fn normalize_within(
        w: f64,
        x: f64,
        y: f64,
        z: f64,
        tol: f64,
    ) -> Result<Versor, StatsError> {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        if !n.is_finite() {
            return Err(StatsError::NonFinite);
        }
        if (n - 1.0).abs() > tol {
            return Err(StatsError::NotUnit { norm: n });
        }
        Ok(Versor {
            w: w / n,
            x: x / n,
            y: y / n,
            z: z / n,
        })
    }

    /// Reads a versor from 4 consecutive coordinates `[w, x, y, z]`.
    pub fn from_coords(c: &[f64]) -> Result<Versor, StatsError> {
        if c.len() != 4 {
            return Err(StatsError::DimMismatch {
                expected: 4,
                got: c.len(),
            });
        }
        Versor::new(c[0], c[1], c[2], c[3])
    }

    pub fn w(&self) -> f64 {
        self.w
    }
    pub fn x(&self) -> f64 {
        self.x
    }
    pub fn y(&self) -> f64 {
        self.y
    }
    pub fn z(&self) -> f64 {
        self.z
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    /// Writes the components into 4 consecutive coordinates `[w, x, y, z]`.
    pub fn write_coords(self, out: &mut [f64]) {
        out.copy_from_slice(&self.to_array());
    }

    /// Hamilton product `self * rhs` (apply `rhs` first, then `self` when the
    /// versors act as rotations), renormalized.
    #[allow(clippy::should_implement_trait)] // named method keeps call sites explicit
    pub fn mul(self, rhs: Versor) -> Versor {
        let (aw, ax, ay, az) = (self.w, self.x, self.y, self.z);
        let (bw, bx, by, bz) = (rhs.w, rhs.x, rhs.y, rhs.z);
        let w = aw * bw - ax * bx - ay * by - az * bz;
        let x = aw * bx + ax * bw + ay * bz - az * by;
        let y = aw * by - ax * bz + ay * bw + az * bx;
        let z = aw * bz + ax * by - ay * bx + az * bw;
        let n = (w * w + x * x + y * y + z * z).sqrt();
        Versor {
            w: w / n,
            x: x / n,
            y: y / n,
            z: z / n,
        }
    }

    /// Inverse of a unit quaternion: its conjugate.
    pub fn inv(self) -> Versor {
        Versor {
            w: self.w,
            x: -self.x,
            y: -self.y,
            z: -self.z,
        }
    }

    /// Scalar power `exp(t·log(q))`: scales the rotation angle by `t` about
    /// the same axis. For inputs within 1e-12 of ±identity the axis is
    /// undefined; +identity maps to identity, and -identity uses the x axis
    /// (never reached by in-distribution states).
    pub fn pow(self, t: f64) -> Versor {
        let vn = (self.x * self.x + self.y * self.y + self.z * self.z).sqrt();
        if vn < 1e-12 {
            if self.w >= 0.0 {
                return Versor::IDENTITY;
            }
            let half = t * std::f64::consts::PI;
            return Versor {
                w: half.cos(),
                x: half.sin(),
                y: 0.0,
                z: 0.0,
            };
        }
        let angle = vn.atan2(self.w);
        let (s, c) = (t * angle).sin_cos();
        let k = s / vn;
        let (w, x, y, z) = (c, k * self.x, k * self.y, k * self.z);
        let n = (w * w + x * x + y * y + z * z).sqrt();
        Versor {
            w: w / n,
            x: x / n,
            y: y / n,
            z: z / n,
        }
    }

    pub fn dot(self, rhs: Versor) -> f64 {
        self.w * rhs.w + self.x * rhs.x + self.y * rhs.y + self.z * rhs.z
    }

    /// Returns `self` if `self · reference >= 0`, else `-self`; both encode
    /// the same rotation.
    pub fn canonicalized_against(self, reference: Versor) -> Versor {
        if self.dot(reference) >= 0.0 {
            self
        } else {
            Versor {
                w: -self.w,
                x: -self.x,
                y: -self.y,
                z: -self.z,
            }
        }
    }

    /// Rotates a 3-vector by the sandwich product `q v q*`.
    pub fn rotate(self, v: [f64; 3]) -> [f64; 3] {
        let q = self;
        let p = Versor {
            w: 0.0,
            x: v[0],
            y: v[1],
            z: v[2],
        };
        // Unnormalized sandwich; the w component cancels analytically.
        let (aw, ax, ay, az) = (q.w, q.x, q.y, q.z);
        let (bw, bx, by, bz) = (p.w, p.x, p.y, p.z);
        let rw = aw * bw - ax * bx - ay * by - az * bz;
        let rx = aw * bx + ax * bw + ay * bz - az * by;
        let ry = aw * by - ax * bz + ay * bw + az * bx;
        let rz = aw * bz + ax * by - ay * bx + az * bw;
        let c = q.inv();
        let (cw, cx, cy, cz) = (c.w, c.x, c.y, c.z);
        [
            rw * cx + rx * cw + ry * cz - rz * cy,
            rw * cy - rx * cz + ry * cw + rz * cx,
            rw * cz + rx * cy - ry * cx + rz * cw,
        ]
    }
}

/// Flips the sign of the 4 coordinates in place when their dot with
/// `reference` is negative (slice version of sign canonicalization, for
/// quaternion blocks embedded in flat state vectors).
pub fn canonicalize_sign_coords(q: &mut [f64], reference: &[f64]) {
    let d: f64 = q.iter().zip(reference).map(|(a, b)| a * b).sum();
    if d < 0.0 {
        for e in q.iter_mut() {
            *e = -*e;
        }
    }
}

// ─── Gaussian sampling ───────────────────────────────────────────────────────

/// Gaussian sampler `N(mean, cov)` with a prefactored Cholesky scale.
///
/// An identically zero covariance is accepted as the degenerate case: samples
/// equal the mean and the stream is never touched.
#[derive(Debug, Clone)]
pub struct Gaussian {
    mean: DVector<f64>,
    scale: Option<DMatrix<f64>>, // lower Cholesky factor; None for zero covariance
}

impl Gaussian {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Gaussian, StatsError> {
        let n = mean.len();
        if cov.nrows() != n || cov.ncols() != n {
            return Err(StatsError::DimMismatch {
                expected: n,
                got: cov.nrows().max(cov.ncols()),
            });
        }
        if !mean.iter().all(|e| e.is_finite()) || !cov.iter().all(|e| e.is_finite()) {
            return Err(StatsError::NonFinite);
        }
        let magnitude = cov.iter().fold(0.0f64, |m, e| m.max(e.abs()));
        for i in 0..n {
            for j in (i + 1)..n {
                if (cov[(i, j)] - cov[(j, i)]).abs() > 1e-12 * (1.0 + magnitude) {
                    return Err(StatsError::NotSymmetric);
                }
            }
        }
        if magnitude == 0.0 {
            return Ok(Gaussian { mean, scale: None });
        }
        match cov.cholesky() {
            Some(chol) => Ok(Gaussian {
                mean,
                scale: Some(chol.unpack()),
            }),
            None => Err(StatsError::NotPositiveDefinite),
        }
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Draws `mean + L·z` with `z` standard normal.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        match &self.scale {
            None => self.mean.clone(),
            Some(l) => {
                let z = DVector::from_iterator(
                    self.dim(),
                    (0..self.dim()).map(|_| rng.sample::<f64, _>(StandardNormal)),
                );
                &self.mean + l * z
            }
        }
    }

    /// Draws into a coordinate slice (used for block sampling in flat state
    /// vectors). The slice length must equal the sampler dimension.
    pub fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        let s = self.sample(rng);
        out.copy_from_slice(s.as_slice());
    }

    /// True when the covariance is identically zero (samples never touch the
    /// random stream).
    pub fn is_degenerate(&self) -> bool {
        self.scale.is_none()
    }
}

/// One-shot Gaussian draw; prefer [`Gaussian`] when drawing repeatedly.
pub fn gaussian_sample<R: Rng + ?Sized>(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    rng: &mut R,
) -> Result<DVector<f64>, StatsError> {
    Ok(Gaussian::new(mean.clone(), cov.clone())?.sample(rng))
}

// ─── Fisher–von Mises–Langevin sampling ──────────────────────────────────────

/// Sampler for the FML distribution `∝ exp(κ·xᵀμ)` on `S^{d-1}`.
///
/// Uses the tangent-normal decomposition: the component along `μ` is drawn by
/// beta-envelope rejection, the orthogonal component uniformly on `S^{d-2}`,
/// and the result is rotated so the first axis aligns with `μ` via a
/// Householder reflection. Exact for any dimension `d >= 2` and any positive
/// concentration; no tuning parameters.
#[derive(Debug, Clone)]
pub struct Fml {
    mu: DVector<f64>,
    kappa: f64,
    b: f64,
    x0: f64,
    ln_accept_offset: f64,
    beta: Beta<f64>,
    /// Householder direction mapping e1 to mu, or None when mu ≈ e1.
    householder: Option<DVector<f64>>,
}

impl Fml {
    pub fn new(mu: DVector<f64>, kappa: f64) -> Result<Fml, StatsError> {
        let d = mu.len();
        if d < 2 {
            return Err(StatsError::BadDimension { dim: d });
        }
        if !mu.iter().all(|e| e.is_finite()) {
            return Err(StatsError::NonFinite);
        }
        let n = mu.norm();
        if (n - 1.0).abs() > UNIT_NORM_TOL {
            return Err(StatsError::NotUnit { norm: n });
        }
        if !(kappa.is_finite() && kappa > 0.0) {
            return Err(StatsError::BadConcentration { kappa });
        }
        let mu = mu / n;
        let dm1 = (d - 1) as f64;
        // Stable form of (-2κ + sqrt(4κ² + (d-1)²)) / (d-1).
        let b = dm1 / (2.0 * kappa + (4.0 * kappa * kappa + dm1 * dm1).sqrt());
        let x0 = (1.0 - b) / (1.0 + b);
        let ln_accept_offset = kappa * x0 + dm1 * (1.0 - x0 * x0).ln();
        let beta = Beta::new(dm1 / 2.0, dm1 / 2.0).expect("valid beta parameters");
        let mut e1_minus_mu = -mu.clone();
        e1_minus_mu[0] += 1.0;
        let hn = e1_minus_mu.norm();
        let householder = if hn < 1e-12 {
            None
        } else {
            Some(e1_minus_mu / hn)
        };
        Ok(Fml {
            mu,
            kappa,
            b,
            x0,
            ln_accept_offset,
            beta,
            householder,
        })
    }

    pub fn mean_direction(&self) -> &DVector<f64> {
        &self.mu
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// Draws one unit vector from the distribution.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let d = self.dim();
        let dm1 = (d - 1) as f64;
        // Component along mu by beta-envelope rejection.
        let w = loop {
            let z: f64 = self.beta.sample(rng);
            let u: f64 = rng.random();
            let t = (1.0 - (1.0 + self.b) * z) / (1.0 - (1.0 - self.b) * z);
            if self.kappa * t + dm1 * (1.0 - self.x0 * t).ln() - self.ln_accept_offset >= u.ln() {
                break t;
            }
        };
        // Uniform direction in the orthogonal complement (dimension d-1).
        let mut y = DVector::zeros(d);
        y[0] = w;
        let s = (1.0 - w * w).max(0.0).sqrt();
        if d == 2 {
            y[1] = if rng.random::<bool>() { s } else { -s };
        } else {
            let perp = loop {
                let g = DVector::from_iterator(
                    d - 1,
                    (0..d - 1).map(|_| rng.sample::<f64, _>(StandardNormal)),
                );
                let n = g.norm();
                if n > 1e-12 {
                    break g / n;
                }
            };
            for i in 1..d {
                y[i] = s * perp[i - 1];
            }
        }
        // Reflect the mu-aligned frame onto the ambient frame.
        let mut out = match &self.householder {
            None => y,
            Some(u) => {
                let proj = 2.0 * u.dot(&y);
                y - u * proj
            }
        };
        out /= out.norm();
        out
    }

    /// Draws into a coordinate slice of length `d`.
    pub fn sample_into<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        let s = self.sample(rng);
        out.copy_from_slice(s.as_slice());
    }
}

/// One-shot FML draw; prefer [`Fml`] when drawing repeatedly.
pub fn fml_sample<R: Rng + ?Sized>(
    mu: &DVector<f64>,
    kappa: f64,
    rng: &mut R,
) -> Result<DVector<f64>, StatsError> {
    Ok(Fml::new(mu.clone(), kappa)?.sample(rng))
}

// ─── generalized variances ───────────────────────────────────────────────────

fn block_euclid_variance(members: &[DVector<f64>], range: std::ops::Range<usize>) -> f64 {
    let n = members.len();
    let dim = range.len();
    let mut mean = vec![0.0f64; dim];
    for m in members {
        for (acc, v) in mean.iter_mut().zip(&m.as_slice()[range.clone()]) {
            *acc += v;
        }
    }
    let inv_n = 1.0 / n as f64;
    for acc in mean.iter_mut() {
        *acc *= inv_n;
    }
    let mut ss = 0.0;
    for m in members {
        for (mu, v) in mean.iter().zip(&m.as_slice()[range.clone()]) {
            let d = v - mu;
            ss += d * d;
        }
    }
    ss / (n - 1) as f64
}

fn block_sphere_variance(members: &[DVector<f64>], range: std::ops::Range<usize>) -> f64 {
    let n = members.len();
    let dim = range.len();
    let mut mean = vec![0.0f64; dim];
    for m in members {
        for (acc, v) in mean.iter_mut().zip(&m.as_slice()[range.clone()]) {
            *acc += v;
        }
    }
    let inv_n = 1.0 / n as f64;
    let norm_sq: f64 = mean.iter().map(|e| (e * inv_n) * (e * inv_n)).sum();
    (1.0 - norm_sq).clamp(0.0, 1.0)
}

/// Trace of the sample covariance: `(N-1)^{-1} Σ_i |x_i - x̄|²`. Needs `N >= 2`.
pub fn euclid_variance(members: &[DVector<f64>]) -> Result<f64, StatsError> {
    if members.len() < 2 {
        return Err(StatsError::TooFewMembers {
            need: 2,
            got: members.len(),
        });
    }
    let dim = members[0].len();
    for m in members {
        if m.len() != dim {
            return Err(StatsError::DimMismatch {
                expected: dim,
                got: m.len(),
            });
        }
    }
    Ok(block_euclid_variance(members, 0..dim))
}

/// Spherical variance `1 - |N^{-1} Σ_i x_i|²`, clamped to `[0, 1]`. Members
/// must be unit vectors; needs `N >= 1`.
pub fn sphere_variance(members: &[DVector<f64>]) -> Result<f64, StatsError> {
    if members.is_empty() {
        return Err(StatsError::TooFewMembers { need: 1, got: 0 });
    }
    let dim = members[0].len();
    for m in members {
        if m.len() != dim {
            return Err(StatsError::DimMismatch {
                expected: dim,
                got: m.len(),
            });
        }
        let n = m.norm();
        if (n - 1.0).abs() > UNIT_NORM_TOL {
            return Err(StatsError::NotUnit { norm: n });
        }
    }
    Ok(block_sphere_variance(members, 0..dim))
}

/// Product-space generalized variance: the sum over blocks of the trace
/// variance (Euclidean blocks) and the spherical variance (sphere blocks),
/// optionally weighted per block (weights default to 1).
pub fn product_variance(
    layout: &Layout,
    members: &[DVector<f64>],
    weights: Option<&[f64]>,
) -> Result<f64, StatsError> {
    if members.len() < 2 {
        return Err(StatsError::TooFewMembers {
            need: 2,
            got: members.len(),
        });
    }
    for m in members {
        if m.len() != layout.dim() {
            return Err(StatsError::DimMismatch {
                expected: layout.dim(),
                got: m.len(),
            });
        }
    }
    if let Some(w) = weights {
        if w.len() != layout.blocks().len() {
            return Err(StatsError::WeightCount {
                expected: layout.blocks().len(),
                got: w.len(),
            });
        }
    }
    let mut total = 0.0;
    for (i, (block, range)) in layout.iter().enumerate() {
        let v = match block {
            Block::Euclid(_) => block_euclid_variance(members, range),
            Block::Sphere(_) => block_sphere_variance(members, range),
        };
        total += weights.map_or(1.0, |w| w[i]) * v;
    }
    Ok(total)
}
