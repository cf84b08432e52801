//! Ensemble analysis on Euclidean × sphere product manifolds.
//!
//! The analysis step treats the update as an estimator parameterized by a gain
//! matrix `G`: each prior member is corrected by mapping the observation
//! residual (a tangent vector at the member's predicted observation) through
//! `G`, projecting onto the tangent space at the member, and applying the
//! exponential map. The gain is chosen to minimize the expected posterior
//! ensemble spread under resampled observation perturbations, by stochastic
//! gradient descent (Adam) started from the ensemble regression gain.
//!
//! Randomized functions draw from the stream in a fixed documented order, so
//! identical streams give bitwise-identical results.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use thiserror::Error;

use crate::manifold::{product_exp, product_log, product_proj, Block, Layout, ManifoldError};
use crate::stats::{canonicalize_sign_coords, product_variance, Fml, Gaussian, StatsError};

/// Errors raised by ensemble construction and analysis.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum FilterError {
    #[error(transparent)]
    Manifold(#[from] ManifoldError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error("need at least {need} ensemble members, got {got}")]
    TooFewMembers { need: usize, got: usize },
    #[error("expected {expected} members, got {got}")]
    MemberCount { expected: usize, got: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("noise specification does not match the observation layout: {0}")]
    NoiseMismatch(String),
    #[error("gain normal equations could not be solved, even after regularization")]
    GainSolveFailed,
    #[error("ensemble mean direction vanished on a sphere block")]
    DegenerateMean,
}

// ─── ensembles ───────────────────────────────────────────────────────────────

/// A set of equally plausible states on a common product manifold. Members are
/// validated (and sphere blocks renormalized) on construction.
#[derive(Debug, Clone)]
pub struct Ensemble {
    layout: Layout,
    members: Vec<DVector<f64>>,
}

impl Ensemble {
    pub fn new(layout: Layout, mut members: Vec<DVector<f64>>) -> Result<Ensemble, FilterError> {
        if members.is_empty() {
            return Err(FilterError::TooFewMembers { need: 1, got: 0 });
        }
        for m in members.iter_mut() {
            layout.normalize_point(m)?;
        }
        Ok(Ensemble { layout, members })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn members(&self) -> &[DVector<f64>] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn into_members(self) -> Vec<DVector<f64>> {
        self.members
    }

    /// Per-block center of the ensemble: coordinate mean on Euclidean blocks,
    /// normalized coordinate mean on sphere blocks.
    pub fn mean_estimate(&self) -> Result<DVector<f64>, FilterError> {
        let w = vec![1.0 / self.len() as f64; self.len()];
        weighted_mean_estimate(&self.layout, &self.members, &w)
    }

    /// Per-coordinate sample standard deviation over members (needs at least
    /// two members).
    pub fn coordinate_std(&self) -> Result<DVector<f64>, FilterError> {
        let n = self.len();
        if n < 2 {
            return Err(FilterError::TooFewMembers { need: 2, got: n });
        }
        let dim = self.layout.dim();
        let mut mean = DVector::zeros(dim);
        for m in &self.members {
            mean += m;
        }
        mean /= n as f64;
        let mut var = DVector::zeros(dim);
        for m in &self.members {
            for k in 0..dim {
                let d = m[k] - mean[k];
                var[k] += d * d;
            }
        }
        var /= (n - 1) as f64;
        Ok(var.map(f64::sqrt))
    }
}

/// Weighted per-block center: weighted coordinate mean on Euclidean blocks,
/// normalized weighted coordinate mean on sphere blocks. Weights need not be
/// normalized; they must be nonnegative with a positive sum.
pub fn weighted_mean_estimate(
    layout: &Layout,
    members: &[DVector<f64>],
    weights: &[f64],
) -> Result<DVector<f64>, FilterError> {
    if members.is_empty() {
        return Err(FilterError::TooFewMembers { need: 1, got: 0 });
    }
    if weights.len() != members.len() {
        return Err(FilterError::MemberCount {
            expected: members.len(),
            got: weights.len(),
        });
    }
    let total: f64 = weights.iter().sum();
    if !(total.is_finite() && total > 0.0) || weights.iter().any(|w| *w < 0.0) {
        return Err(FilterError::DegenerateMean);
    }
    for m in members {
        layout.check_point(m)?;
    }
    let dim = layout.dim();
    let mut mean = DVector::zeros(dim);
    for (m, w) in members.iter().zip(weights) {
        for k in 0..dim {
            mean[k] += w * m[k];
        }
    }
    mean /= total;
    for (block, range) in layout.iter() {
        if let Block::Sphere(_) = block {
            let norm: f64 = mean.as_slice()[range.clone()]
                .iter()
                .map(|e| e * e)
                .sum::<f64>()
                .sqrt();
            if norm < 1e-12 {
                return Err(FilterError::DegenerateMean);
            }
            for k in range {
                mean[k] /= norm;
            }
        }
    }
    Ok(mean)
}

// ─── measurement operators ───────────────────────────────────────────────────

/// Maps a state to its predicted observation, a point on the observation
/// product manifold.
pub trait MeasurementOp {
    fn obs_layout(&self) -> &Layout;
    fn apply(&self, state: &DVector<f64>) -> DVector<f64>;
}

/// A measurement operator defined by a closure.
pub struct ClosureOp<F: Fn(&DVector<f64>) -> DVector<f64>> {
    layout: Layout,
    f: F,
}

impl<F: Fn(&DVector<f64>) -> DVector<f64>> ClosureOp<F> {
    pub fn new(layout: Layout, f: F) -> Self {
        ClosureOp { layout, f }
    }
}

impl<F: Fn(&DVector<f64>) -> DVector<f64>> MeasurementOp for ClosureOp<F> {
    fn obs_layout(&self) -> &Layout {
        &self.layout
    }
    fn apply(&self, state: &DVector<f64>) -> DVector<f64> {
        (self.f)(state)
    }
}

// ─── observation noise ───────────────────────────────────────────────────────

/// Noise model for one observation block.
#[derive(Debug, Clone)]
pub enum BlockNoise {
    /// Additive Gaussian noise with the given covariance (Euclidean blocks).
    Gaussian(DMatrix<f64>),
    /// Directional noise with the given concentration (sphere blocks); larger
    /// concentration means tighter observations.
    Directional { kappa: f64 },
}

#[derive(Debug, Clone)]
enum PreparedNoise {
    Gaussian {
        /// Zero-mean sampler for perturbation draws.
        centered: Gaussian,
        /// Covariance inverse for log-likelihoods; None for zero covariance.
        inv: Option<DMatrix<f64>>,
    },
    Directional {
        kappa: f64,
    },
}

/// Per-block observation noise bound to an observation layout. Supports both
/// perturbation sampling (for ensemble updates) and log-likelihood evaluation
/// (for importance weighting).
#[derive(Debug, Clone)]
pub struct NoiseSpec {
    layout: Layout,
    prepared: Vec<PreparedNoise>,
}

impl NoiseSpec {
    pub fn new(layout: Layout, blocks: Vec<BlockNoise>) -> Result<NoiseSpec, FilterError> {
        if blocks.len() != layout.blocks().len() {
            return Err(FilterError::NoiseMismatch(format!(
                "{} noise blocks for {} layout blocks",
                blocks.len(),
                layout.blocks().len()
            )));
        }
        let mut prepared = Vec::with_capacity(blocks.len());
        for (noise, block) in blocks.iter().zip(layout.blocks()) {
            match (noise, block) {
                (BlockNoise::Gaussian(cov), Block::Euclid(d)) => {
                    if cov.nrows() != *d || cov.ncols() != *d {
                        return Err(FilterError::NoiseMismatch(format!(
                            "covariance is {}x{} for a block of dimension {d}",
                            cov.nrows(),
                            cov.ncols()
                        )));
                    }
                    let centered = Gaussian::new(DVector::zeros(*d), cov.clone())?;
                    let inv = if centered.is_degenerate() {
                        None
                    } else {
                        Some(
                            cov.clone()
                                .cholesky()
                                .expect("validated positive definite")
                                .inverse(),
                        )
                    };
                    prepared.push(PreparedNoise::Gaussian { centered, inv });
                }
                (BlockNoise::Directional { kappa }, Block::Sphere(_)) => {
                    if !(kappa.is_finite() && *kappa > 0.0) {
                        return Err(FilterError::Stats(StatsError::BadConcentration {
                            kappa: *kappa,
                        }));
                    }
                    prepared.push(PreparedNoise::Directional { kappa: *kappa });
                }
                (BlockNoise::Gaussian(_), Block::Sphere(_)) => {
                    return Err(FilterError::NoiseMismatch(
                        "Gaussian noise given for a sphere block".into(),
                    ));
                }
                (BlockNoise::Directional { .. }, Block::Euclid(_)) => {
                    return Err(FilterError::NoiseMismatch(
                        "directional noise given for a Euclidean block".into(),
                    ));
                }
            }
        }
        Ok(NoiseSpec { layout, prepared })
    }

    /// Noise for a position-attitude observation `[R^3, S^3]`: Gaussian
    /// position noise with covariance `pos_cov`, directional attitude noise
    /// with concentration `att_kappa`.
    pub fn pose(pos_cov: DMatrix<f64>, att_kappa: f64) -> Result<NoiseSpec, FilterError> {
        let layout = Layout::new(vec![Block::Euclid(3), Block::Sphere(4)]);
        NoiseSpec::new(
            layout,
            vec![
                BlockNoise::Gaussian(pos_cov),
                BlockNoise::Directional { kappa: att_kappa },
            ],
        )
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    /// Draws `n` perturbed copies of the observation `y`: Euclidean blocks get
    /// `y - eta` with `eta ~ N(0, cov)`, sphere blocks are redrawn from the
    /// directional distribution centered on the observed direction and
    /// sign-aligned with it. Draw order: members outer, blocks inner.
    pub fn perturbed_observations<R: Rng + ?Sized>(
        &self,
        y: &DVector<f64>,
        n: usize,
        rng: &mut R,
    ) -> Result<Vec<DVector<f64>>, FilterError> {
        self.layout.check_point(y)?;
        // Bind directional samplers to the observed directions once.
        let mut directional: Vec<Option<Fml>> = Vec::with_capacity(self.prepared.len());
        for (p, (_, range)) in self.prepared.iter().zip(self.layout.iter()) {
            directional.push(match p {
                PreparedNoise::Directional { kappa } => Some(Fml::new(
                    DVector::from_column_slice(&y.as_slice()[range]),
                    *kappa,
                )?),
                PreparedNoise::Gaussian { .. } => None,
            });
        }
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let mut member = y.clone();
            for (b, (p, (_, range))) in self.prepared.iter().zip(self.layout.iter()).enumerate() {
                match p {
                    PreparedNoise::Gaussian { centered, .. } => {
                        let eta = centered.sample(rng);
                        for (k, idx) in range.enumerate() {
                            member[idx] = y[idx] - eta[k];
                        }
                    }
                    PreparedNoise::Directional { .. } => {
                        let draw = directional[b].as_ref().expect("bound above").sample(rng);
                        let mslice = &mut member.as_mut_slice()[range.clone()];
                        mslice.copy_from_slice(draw.as_slice());
                        canonicalize_sign_coords(mslice, &y.as_slice()[range]);
                    }
                }
            }
            out.push(member);
        }
        Ok(out)
    }

    /// Log-density of the observation `y` given the predicted observation, up
    /// to an additive constant: `-d'C^{-1}d/2` summed over Euclidean blocks
    /// plus `kappa * <y, predicted>` over sphere blocks. A zero-covariance
    /// Euclidean block contributes 0 when the residual vanishes and negative
    /// infinity otherwise.
    pub fn log_likelihood(
        &self,
        y: &DVector<f64>,
        predicted: &DVector<f64>,
    ) -> Result<f64, FilterError> {
        self.layout.check_point(y)?;
        self.layout.check_point(predicted)?;
        let mut ll = 0.0;
        for (p, (_, range)) in self.prepared.iter().zip(self.layout.iter()) {
            match p {
                PreparedNoise::Gaussian { inv, .. } => {
                    let d = DVector::from_iterator(
                        range.len(),
                        range.clone().map(|i| y[i] - predicted[i]),
                    );
                    match inv {
                        Some(inv) => ll += -0.5 * d.dot(&(inv * &d)),
                        None => {
                            if d.amax() > 1e-12 {
                                ll += f64::NEG_INFINITY;
                            }
                        }
                    }
                }
                PreparedNoise::Directional { kappa } => {
                    let dot: f64 = range.map(|i| y[i] * predicted[i]).sum();
                    ll += kappa * dot;
                }
            }
        }
        Ok(ll)
    }
}

// ─── gain estimator and objective ────────────────────────────────────────────

struct EstimatorPass {
    /// Observation residual in tangent coordinates at each predicted
    /// observation.
    tangents: Vec<DVector<f64>>,
    /// Projected state-space correction at each prior member.
    corrections: Vec<DVector<f64>>,
    /// Posterior members.
    posteriors: Vec<DVector<f64>>,
}

fn apply_gain_pass(
    state_layout: &Layout,
    op: &dyn MeasurementOp,
    priors: &[DVector<f64>],
    obs_members: &[DVector<f64>],
    gain: &DMatrix<f64>,
) -> Result<EstimatorPass, FilterError> {
    let n = priors.len();
    if obs_members.len() != n {
        return Err(FilterError::MemberCount {
            expected: n,
            got: obs_members.len(),
        });
    }
    let obs_layout = op.obs_layout();
    if gain.nrows() != state_layout.dim() {
        return Err(FilterError::DimMismatch {
            expected: state_layout.dim(),
            got: gain.nrows(),
        });
    }
    if gain.ncols() != obs_layout.dim() {
        return Err(FilterError::DimMismatch {
            expected: obs_layout.dim(),
            got: gain.ncols(),
        });
    }
    let mut tangents = Vec::with_capacity(n);
    let mut corrections = Vec::with_capacity(n);
    let mut posteriors = Vec::with_capacity(n);
    for (prior, obs) in priors.iter().zip(obs_members) {
        let predicted = op.apply(prior);
        let t = product_log(obs_layout, &predicted, obs)?;
        let gt = gain * &t;
        let u = product_proj(state_layout, prior, &gt)?;
        let z = product_exp(state_layout, prior, &u)?;
        tangents.push(t);
        corrections.push(u);
        posteriors.push(z);
    }
    Ok(EstimatorPass {
        tangents,
        corrections,
        posteriors,
    })
}

/// Applies the gain-parameterized update to every prior member against its
/// paired perturbed observation: residual log map at the predicted
/// observation, gain multiply, tangent projection at the member, exponential
/// map.
pub fn estimator_apply(
    state_layout: &Layout,
    op: &dyn MeasurementOp,
    priors: &[DVector<f64>],
    obs_members: &[DVector<f64>],
    gain: &DMatrix<f64>,
) -> Result<Vec<DVector<f64>>, FilterError> {
    Ok(apply_gain_pass(state_layout, op, priors, obs_members, gain)?.posteriors)
}

/// Posterior ensemble spread produced by a gain for one set of perturbed
/// observations: the product-manifold generalized variance of the updated
/// members.
pub fn posterior_variance(
    state_layout: &Layout,
    op: &dyn MeasurementOp,
    priors: &[DVector<f64>],
    obs_members: &[DVector<f64>],
    gain: &DMatrix<f64>,
    weights: Option<&[f64]>,
) -> Result<f64, FilterError> {
    let pass = apply_gain_pass(state_layout, op, priors, obs_members, gain)?;
    Ok(product_variance(state_layout, &pass.posteriors, weights)?)
}

/// [`posterior_variance`] together with its exact gradient with respect to the
/// gain, computed by reverse accumulation through the exponential map, the
/// tangent projection, and the per-block variances.
///
/// The O(1e-16) renormalization of sphere exponentials is excluded from the
/// derivative; it is far below finite-difference resolution.
pub fn posterior_variance_grad(
    state_layout: &Layout,
    op: &dyn MeasurementOp,
    priors: &[DVector<f64>],
    obs_members: &[DVector<f64>],
    gain: &DMatrix<f64>,
    weights: Option<&[f64]>,
) -> Result<(f64, DMatrix<f64>), FilterError> {
    let n = priors.len();
    if n < 2 {
        return Err(FilterError::TooFewMembers { need: 2, got: n });
    }
    let pass = apply_gain_pass(state_layout, op, priors, obs_members, gain)?;
    let value = product_variance(state_layout, &pass.posteriors, weights)?;

    // Per-block centers of the posterior members: coordinate means (the
    // sphere-block mean is kept unnormalized, as the spread formula uses it).
    let n_blocks = state_layout.blocks().len();
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(n_blocks);
    for (_, range) in state_layout.iter() {
        let mut c = vec![0.0; range.len()];
        for z in &pass.posteriors {
            for (k, idx) in range.clone().enumerate() {
                c[k] += z[idx];
            }
        }
        for e in c.iter_mut() {
            *e /= n as f64;
        }
        centers.push(c);
    }

    let sd = state_layout.dim();
    let od = op.obs_layout().dim();
    let mut grad = DMatrix::zeros(sd, od);
    let two_over_nm1 = 2.0 / (n as f64 - 1.0);
    let mut a = DVector::zeros(sd);
    #[allow(clippy::needless_range_loop)] // i indexes four parallel member arrays
    for i in 0..n {
        a.fill(0.0);
        for (b, (block, range)) in state_layout.iter().enumerate() {
            let wgt = weights.map_or(1.0, |w| w[b]);
            match block {
                Block::Euclid(_) => {
                    // d(spread)/dz_i = 2 (z_i - mean) / (N - 1); the update is
                    // affine here so no further chain factors appear.
                    for (k, idx) in range.enumerate() {
                        a[idx] = wgt * two_over_nm1 * (pass.posteriors[i][idx] - centers[b][k]);
                    }
                }
                Block::Sphere(d) => {
                    let start = range.start;
                    // d(spread)/dz_i = -2 m / N with m the unnormalized mean.
                    let mut w = vec![0.0; d];
                    for k in 0..d {
                        w[k] = -wgt * 2.0 / n as f64 * centers[b][k];
                    }
                    // Transpose-Jacobian of the sphere exponential at
                    // (base x, tangent u).
                    let x = &priors[i].as_slice()[start..start + d];
                    let u = &pass.corrections[i].as_slice()[start..start + d];
                    let r = u.iter().map(|e| e * e).sum::<f64>().sqrt();
                    let mut jtw = vec![0.0; d];
                    if r < 1e-12 {
                        jtw.copy_from_slice(&w);
                    } else {
                        let (s, c) = r.sin_cos();
                        let sr = s / r;
                        let xw: f64 = x.iter().zip(&w).map(|(a, b)| a * b).sum();
                        let mut uw = 0.0;
                        for k in 0..d {
                            uw += (u[k] / r) * w[k];
                        }
                        let coef = -s * xw + c * uw - sr * uw;
                        for k in 0..d {
                            jtw[k] = sr * w[k] + coef * (u[k] / r);
                        }
                    }
                    // Tangent projection at the prior member.
                    let xj: f64 = x.iter().zip(&jtw).map(|(a, b)| a * b).sum();
                    for k in 0..d {
                        a[start + k] = jtw[k] - x[k] * xj;
                    }
                }
            }
        }
        let t = &pass.tangents[i];
        for r in 0..sd {
            if a[r] == 0.0 {
                continue;
            }
            for c in 0..od {
                grad[(r, c)] += a[r] * t[c];
            }
        }
    }
    Ok((value, grad))
}

/// One stochastic evaluation of the expected-spread objective: draws a fresh
/// set of perturbed observations and returns the resulting posterior spread.
#[allow(clippy::too_many_arguments)]
pub fn gain_objective<R: Rng + ?Sized>(
    state_layout: &Layout,
    op: &dyn MeasurementOp,
    priors: &[DVector<f64>],
    y: &DVector<f64>,
    noise: &NoiseSpec,
    gain: &DMatrix<f64>,
    weights: Option<&[f64]>,
    rng: &mut R,
) -> Result<f64, FilterError> {
    let obs = noise.perturbed_observations(y, priors.len(), rng)?;
    posterior_variance(state_layout, op, priors, &obs, gain, weights)
}

/// [`gain_objective`] together with its gradient for the drawn perturbation
/// set.
#[allow(clippy::too_many_arguments)]
pub fn gain_objective_grad<R: Rng + ?Sized>(
    state_layout: &Layout,
    op: &dyn MeasurementOp,
    priors: &[DVector<f64>],
    y: &DVector<f64>,
    noise: &NoiseSpec,
    gain: &DMatrix<f64>,
    weights: Option<&[f64]>,
    rng: &mut R,
) -> Result<(f64, DMatrix<f64>), FilterError> {
    let obs = noise.perturbed_observations(y, priors.len(), rng)?;
    posterior_variance_grad(state_layout, op, priors, &obs, gain, weights)
}

// ─── ensemble regression gain ────────────────────────────────────────────────

const GAIN_RIDGE: f64 = 1e-10;

/// Ensemble regression gain on embedded coordinates:
/// `Cov[X, h(X)] (Cov[h(X), h(X)] + Cov[Y, Y])^{-1}`, with all covariances
/// taken as N-1-normalized sample covariances and `Cov[Y, Y]` estimated from
/// the perturbed-observation members. If the innovation covariance is not
/// numerically positive definite, a ridge of 1e-10 is added once; the returned
/// flag reports whether that was needed.
pub fn naive_gain(
    state_layout: &Layout,
    op: &dyn MeasurementOp,
    priors: &[DVector<f64>],
    obs_members: &[DVector<f64>],
) -> Result<(DMatrix<f64>, bool), FilterError> {
    let n = priors.len();
    if n < 2 {
        return Err(FilterError::TooFewMembers { need: 2, got: n });
    }
    if obs_members.len() != n {
        return Err(FilterError::MemberCount {
            expected: n,
            got: obs_members.len(),
        });
    }
    let sd = state_layout.dim();
    let od = op.obs_layout().dim();
    let scale = 1.0 / ((n - 1) as f64).sqrt();

    let predicted: Vec<DVector<f64>> = priors.iter().map(|p| op.apply(p)).collect();
    let anomalies = |vs: &[DVector<f64>], dim: usize| -> Result<DMatrix<f64>, FilterError> {
        let mut mean = DVector::zeros(dim);
        for v in vs {
            if v.len() != dim {
                return Err(FilterError::DimMismatch {
                    expected: dim,
                    got: v.len(),
                });
            }
            mean += v;
        }
        mean /= n as f64;
        let mut m = DMatrix::zeros(dim, n);
        for (j, v) in vs.iter().enumerate() {
            for i in 0..dim {
                m[(i, j)] = (v[i] - mean[i]) * scale;
            }
        }
        Ok(m)
    };

    let ax = anomalies(priors, sd)?;
    let ah = anomalies(&predicted, od)?;
    let ay = anomalies(obs_members, od)?;
    let cross = &ax * ah.transpose();
    let innovation = &ah * ah.transpose() + &ay * ay.transpose();

    let solve = |s: &DMatrix<f64>| -> Option<DMatrix<f64>> {
        s.clone()
            .cholesky()
            .map(|ch| ch.solve(&cross.transpose()).transpose())
    };
    if let Some(k) = solve(&innovation) {
        return Ok((k, false));
    }
    let ridged = &innovation + DMatrix::identity(od, od) * GAIN_RIDGE;
    match solve(&ridged) {
        Some(k) => Ok((k, true)),
        None => Err(FilterError::GainSolveFailed),
    }
}

// ─── Adam optimizer ──────────────────────────────────────────────────────────

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.95;
pub const ADAM_EPSILON: f64 = 1e-8;

/// Adam moment accumulators for gain optimization. Deliberately plain:
/// exponential moving averages without bias correction, seeded so the first
/// stochastic gradient fixes the step scale but performs no update.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: DMatrix<f64>,
    v: DMatrix<f64>,
}

impl AdamState {
    /// Initializes from the first stochastic gradient: zero first moment, and
    /// second moment equal to the elementwise square of that gradient.
    pub fn init(first_grad: &DMatrix<f64>) -> AdamState {
        AdamState {
            m: DMatrix::zeros(first_grad.nrows(), first_grad.ncols()),
            v: first_grad.component_mul(first_grad),
        }
    }

    /// One descent step on `gain` with learning rate `alpha`: updates both
    /// moving averages, then subtracts `alpha * m / sqrt(v + eps)`
    /// elementwise.
    pub fn step(&mut self, gain: &mut DMatrix<f64>, grad: &DMatrix<f64>, alpha: f64) {
        for i in 0..grad.nrows() {
            for j in 0..grad.ncols() {
                let g = grad[(i, j)];
                let m = ADAM_BETA1 * self.m[(i, j)] + (1.0 - ADAM_BETA1) * g;
                let v = ADAM_BETA2 * self.v[(i, j)] + (1.0 - ADAM_BETA2) * g * g;
                self.m[(i, j)] = m;
                self.v[(i, j)] = v;
                gain[(i, j)] -= alpha * m / (v + ADAM_EPSILON).sqrt();
            }
        }
    }
}

/// Minimizes the expected posterior spread over gains by Adam with one fresh
/// perturbation draw per step. `steps` counts objective evaluations: 0 returns
/// the initial gain without touching the stream, 1 evaluates once (seeding the
/// moment accumulators) and still returns the initial gain, and each further
/// step performs an update.
#[allow(clippy::too_many_arguments)]
pub fn adam_optimize<R: Rng + ?Sized>(
    state_layout: &Layout,
    op: &dyn MeasurementOp,
    priors: &[DVector<f64>],
    y: &DVector<f64>,
    noise: &NoiseSpec,
    initial_gain: DMatrix<f64>,
    steps: usize,
    alpha: f64,
    weights: Option<&[f64]>,
    rng: &mut R,
) -> Result<DMatrix<f64>, FilterError> {
    let mut gain = initial_gain;
    if steps == 0 {
        return Ok(gain);
    }
    let (_, d0) = gain_objective_grad(state_layout, op, priors, y, noise, &gain, weights, rng)?;
    let mut adam = AdamState::init(&d0);
    for _ in 1..steps {
        let (_, d) = gain_objective_grad(state_layout, op, priors, y, noise, &gain, weights, rng)?;
        adam.step(&mut gain, &d, alpha);
    }
    Ok(gain)
}

// ─── full analysis step ──────────────────────────────────────────────────────

/// Diagnostics from one analysis step.
#[derive(Debug, Clone)]
pub struct AnalysisReport {
    /// The gain actually applied to produce the posterior.
    pub gain: DMatrix<f64>,
    /// The ensemble regression gain used as the optimizer start.
    pub start_gain: DMatrix<f64>,
    /// Whether the regression solve needed ridge regularization.
    pub regularized: bool,
}

/// One full ensemble analysis: estimate the regression gain from a fresh
/// perturbation draw, refine it by Adam (`steps` draws), then apply the final
/// gain with one more fresh draw. Stream consumption is exactly `steps + 2`
/// perturbation sets, in that order.
#[allow(clippy::too_many_arguments)]
pub fn endkf_analysis<R: Rng + ?Sized>(
    prior: &Ensemble,
    op: &dyn MeasurementOp,
    y: &DVector<f64>,
    noise: &NoiseSpec,
    steps: usize,
    alpha: f64,
    weights: Option<&[f64]>,
    rng: &mut R,
) -> Result<(Ensemble, AnalysisReport), FilterError> {
    let n = prior.len();
    if n < 2 {
        return Err(FilterError::TooFewMembers { need: 2, got: n });
    }
    let obs0 = noise.perturbed_observations(y, n, rng)?;
    let (start_gain, regularized) = naive_gain(prior.layout(), op, prior.members(), &obs0)?;
    let gain = adam_optimize(
        prior.layout(),
        op,
        prior.members(),
        y,
        noise,
        start_gain.clone(),
        steps,
        alpha,
        weights,
        rng,
    )?;
    let obs_final = noise.perturbed_observations(y, n, rng)?;
    let posteriors = estimator_apply(prior.layout(), op, prior.members(), &obs_final, &gain)?;
    let posterior = Ensemble::new(prior.layout().clone(), posteriors)?;
    Ok((
        posterior,
        AnalysisReport {
            gain,
            start_gain,
            regularized,
        },
    ))
}

// ─── bootstrap particle filter ───────────────────────────────────────────────

/// Diagnostics from one particle filter step.
#[derive(Debug, Clone, PartialEq)]
pub struct BpfReport {
    /// Effective sample size after reweighting, before any resampling.
    pub ess: f64,
    /// Whether systematic resampling ran this step.
    pub resampled: bool,
    /// Whether all posterior weights vanished and were reset to uniform.
    pub weights_reset: bool,
}

/// One bootstrap particle filter step: propagate every particle through the
/// supplied transition sampler, reweight by observation log-likelihood
/// (computed in log space with max subtraction), and resample systematically
/// when the effective sample size drops below half the particle count.
///
/// If every reweighted particle has non-finite log-weight the weights are
/// reset to uniform and reported, rather than failing the run.
pub fn bpf_step<R, F>(
    particles: &mut [DVector<f64>],
    weights: &mut [f64],
    mut propagate: F,
    op: &dyn MeasurementOp,
    y: &DVector<f64>,
    noise: &NoiseSpec,
    rng: &mut R,
) -> Result<BpfReport, FilterError>
where
    R: Rng + ?Sized,
    F: FnMut(&DVector<f64>, &mut R) -> Result<DVector<f64>, FilterError>,
{
    let n = particles.len();
    if n == 0 {
        return Err(FilterError::TooFewMembers { need: 1, got: 0 });
    }
    if weights.len() != n {
        return Err(FilterError::MemberCount {
            expected: n,
            got: weights.len(),
        });
    }
    for p in particles.iter_mut() {
        *p = propagate(p, rng)?;
    }
    let mut log_w = Vec::with_capacity(n);
    for (p, w) in particles.iter().zip(weights.iter()) {
        let ll = noise.log_likelihood(y, &op.apply(p))?;
        log_w.push(w.ln() + ll);
    }
    let max_lw = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut weights_reset = false;
    if max_lw.is_finite() {
        let mut total = 0.0;
        for (w, lw) in weights.iter_mut().zip(&log_w) {
            *w = (lw - max_lw).exp();
            total += *w;
        }
        for w in weights.iter_mut() {
            *w /= total;
        }
    } else {
        weights_reset = true;
        for w in weights.iter_mut() {
            *w = 1.0 / n as f64;
        }
    }
    let ess = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();
    let mut resampled = false;
    if ess < n as f64 / 2.0 {
        systematic_resample(particles, weights, rng);
        resampled = true;
    }
    Ok(BpfReport {
        ess,
        resampled,
        weights_reset,
    })
}

/// Systematic resampling: one uniform draw `u` places the comb
/// `(u + j) / N`, and each tooth selects the particle whose cumulative weight
/// interval contains it. Weights become uniform.
fn systematic_resample<R: Rng + ?Sized>(
    particles: &mut [DVector<f64>],
    weights: &mut [f64],
    rng: &mut R,
) {
    let n = particles.len();
    let u: f64 = rng.random();
    let mut selected = Vec::with_capacity(n);
    let mut cumulative = weights[0];
    let mut i = 0;
    for j in 0..n {
        let position = (u + j as f64) / n as f64;
        while position > cumulative && i < n - 1 {
            i += 1;
            cumulative += weights[i];
        }
        selected.push(particles[i].clone());
    }
    for (dst, src) in particles.iter_mut().zip(selected) {
        *dst = src;
    }
    for w in weights.iter_mut() {
        *w = 1.0 / n as f64;
    }
}
