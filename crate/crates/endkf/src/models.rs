//! Pose-tracking state models on Euclidean × sphere product manifolds.
//!
//! The state stacks velocity, position, a per-frame rotation increment
//! (angular velocity as a versor), and attitude; an extended variant appends
//! constant position and attitude measurement biases. Propagation follows a
//! constant-velocity, constant-turn random walk; measurements observe position
//! and attitude (optionally bias-corrupted).

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use thiserror::Error;

use crate::filter::{ClosureOp, Ensemble, FilterError, MeasurementOp};
use crate::manifold::{Block, Layout, ManifoldError};
use crate::stats::{canonicalize_sign_coords, Fml, Gaussian, StatsError, Versor};

/// Errors raised by propagation, synthesis, and initialization.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error(transparent)]
    Manifold(#[from] ManifoldError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error("state layout must be the pose or pose-with-bias layout")]
    UnsupportedLayout,
    #[error("invalid model parameter: {0}")]
    BadParameter(String),
}

// ─── layouts and coordinate ranges ───────────────────────────────────────────

/// Velocity coordinates (Euclidean, cm/frame).
pub const VEL: Range<usize> = 0..3;
/// Position coordinates (Euclidean, cm).
pub const POS: Range<usize> = 3..6;
/// Per-frame rotation increment as a versor `[w, x, y, z]`.
pub const ANGVEL: Range<usize> = 6..10;
/// Attitude versor `[w, x, y, z]`.
pub const ATT: Range<usize> = 10..14;
/// Position measurement bias (Euclidean, cm); bias layout only.
pub const POS_BIAS: Range<usize> = 14..17;
/// Attitude measurement bias versor; bias layout only.
pub const ATT_BIAS: Range<usize> = 17..21;

pub const POSE_DIM: usize = 14;
pub const POSE_BIAS_DIM: usize = 21;

/// Observed position coordinates within an observation vector.
pub const OBS_POS: Range<usize> = 0..3;
/// Observed attitude versor within an observation vector.
pub const OBS_ATT: Range<usize> = 3..7;
pub const OBS_DIM: usize = 7;

/// State layout `[velocity, position, rotation increment, attitude]`.
pub fn pose_layout() -> Layout {
    Layout::new(vec![
        Block::Euclid(3),
        Block::Euclid(3),
        Block::Sphere(4),
        Block::Sphere(4),
    ])
}

/// State layout with appended measurement biases
/// `[velocity, position, rotation increment, attitude, position bias, attitude bias]`.
pub fn pose_bias_layout() -> Layout {
    Layout::new(vec![
        Block::Euclid(3),
        Block::Euclid(3),
        Block::Sphere(4),
        Block::Sphere(4),
        Block::Euclid(3),
        Block::Sphere(4),
    ])
}

/// Observation layout `[position, attitude]`.
pub fn obs_layout() -> Layout {
    Layout::new(vec![Block::Euclid(3), Block::Sphere(4)])
}

fn versor_at(state: &DVector<f64>, range: Range<usize>) -> Result<Versor, StatsError> {
    Versor::from_coords(&state.as_slice()[range])
}

// ─── process noise and propagation ───────────────────────────────────────────

/// Per-block process noise for one unit time step. Covariances apply to the
/// Euclidean blocks; concentrations to the sphere blocks, with
/// `f64::INFINITY` meaning an exact (noise-free) block. Bias blocks default to
/// exactly constant.
#[derive(Debug, Clone)]
pub struct ProcessNoise {
    pub vel_cov: DMatrix<f64>,
    pub pos_cov: DMatrix<f64>,
    pub angvel_kappa: f64,
    pub att_kappa: f64,
    pub pos_bias_cov: DMatrix<f64>,
    pub att_bias_kappa: f64,
}

impl ProcessNoise {
    pub fn new(
        vel_cov: DMatrix<f64>,
        pos_cov: DMatrix<f64>,
        angvel_kappa: f64,
        att_kappa: f64,
    ) -> ProcessNoise {
        ProcessNoise {
            vel_cov,
            pos_cov,
            angvel_kappa,
            att_kappa,
            pos_bias_cov: DMatrix::zeros(3, 3),
            att_bias_kappa: f64::INFINITY,
        }
    }

    pub fn with_bias(mut self, pos_bias_cov: DMatrix<f64>, att_bias_kappa: f64) -> ProcessNoise {
        self.pos_bias_cov = pos_bias_cov;
        self.att_bias_kappa = att_bias_kappa;
        self
    }
}

fn check_kappa(kappa: f64, what: &str) -> Result<(), ModelError> {
    if kappa.is_nan() || kappa <= 0.0 {
        return Err(ModelError::BadParameter(format!(
            "{what} concentration must be positive (possibly infinite), got {kappa}"
        )));
    }
    Ok(())
}

/// Constant-velocity, constant-turn transition sampler over one time step of
/// length `dt`:
///
/// * velocity and both biases follow random walks (`N(v, dt·Q)`; directional
///   blocks redrawn about their previous value with concentration `κ/dt`),
/// * position advances by the old velocity plus noise,
/// * attitude advances by the old rotation increment raised to the `dt` power,
///   then is redrawn about that mean.
///
/// All directional draws are sign-aligned with their mean. Blocks with zero
/// covariance or infinite concentration are exact and consume no randomness;
/// with every block exact the step is the deterministic skeleton.
#[derive(Debug, Clone)]
pub struct PropagationModel {
    layout: Layout,
    dt: f64,
    vel_noise: Gaussian,
    pos_noise: Gaussian,
    angvel_kappa: Option<f64>,
    att_kappa: Option<f64>,
    pos_bias_noise: Option<Gaussian>,
    att_bias_kappa: Option<f64>,
    has_bias: bool,
}

impl PropagationModel {
    /// Builds the sampler for either pose layout. `noise` covariances are per
    /// unit time and get scaled by `dt`; concentrations are divided by `dt`.
    pub fn new(
        layout: Layout,
        noise: &ProcessNoise,
        dt: f64,
    ) -> Result<PropagationModel, ModelError> {
        let has_bias = match layout.dim() {
            POSE_DIM => false,
            POSE_BIAS_DIM => true,
            _ => return Err(ModelError::UnsupportedLayout),
        };
        if !(dt.is_finite() && dt > 0.0) {
            return Err(ModelError::BadParameter(format!(
                "time step must be positive, got {dt}"
            )));
        }
        check_kappa(noise.angvel_kappa, "rotation increment")?;
        check_kappa(noise.att_kappa, "attitude")?;
        check_kappa(noise.att_bias_kappa, "attitude bias")?;
        let scaled = |cov: &DMatrix<f64>| Gaussian::new(DVector::zeros(3), cov * dt);
        let effective = |kappa: f64| {
            if kappa.is_infinite() {
                None
            } else {
                Some(kappa / dt)
            }
        };
        Ok(PropagationModel {
            dt,
            vel_noise: scaled(&noise.vel_cov)?,
            pos_noise: scaled(&noise.pos_cov)?,
            angvel_kappa: effective(noise.angvel_kappa),
            att_kappa: effective(noise.att_kappa),
            pos_bias_noise: if has_bias {
                Some(scaled(&noise.pos_bias_cov)?)
            } else {
                None
            },
            att_bias_kappa: if has_bias {
                effective(noise.att_bias_kappa)
            } else {
                None
            },
            has_bias,
            layout,
        })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// Advances one state by one step. Draw order: velocity, position,
    /// rotation increment, attitude, then (bias layout) position bias and
    /// attitude bias.
    pub fn propagate<R: Rng + ?Sized>(
        &self,
        state: &DVector<f64>,
        rng: &mut R,
    ) -> Result<DVector<f64>, ModelError> {
        self.layout.check_point(state)?;
        let mut out = state.clone();

        // Velocity random walk.
        if !self.vel_noise.is_degenerate() {
            let eta = self.vel_noise.sample(rng);
            for (k, idx) in VEL.enumerate() {
                out[idx] = state[idx] + eta[k];
            }
        }
        // Position advanced by the old velocity.
        let pos_eta = if self.pos_noise.is_degenerate() {
            None
        } else {
            Some(self.pos_noise.sample(rng))
        };
        for (k, idx) in POS.enumerate() {
            out[idx] = state[idx]
                + self.dt * state[VEL.start + k]
                + pos_eta.as_ref().map_or(0.0, |e| e[k]);
        }
        // Rotation increment redrawn about its previous value.
        self.sphere_step(&mut out, state, ANGVEL, None, self.angvel_kappa, rng)?;
        // Attitude advanced by the old increment, then redrawn.
        let spin = versor_at(state, ANGVEL)?.pow(self.dt);
        let att_mean = spin.mul(versor_at(state, ATT)?);
        self.sphere_step(&mut out, state, ATT, Some(att_mean), self.att_kappa, rng)?;

        if self.has_bias {
            if let Some(noise) = &self.pos_bias_noise {
                if !noise.is_degenerate() {
                    let eta = noise.sample(rng);
                    for (k, idx) in POS_BIAS.enumerate() {
                        out[idx] = state[idx] + eta[k];
                    }
                }
            }
            self.sphere_step(&mut out, state, ATT_BIAS, None, self.att_bias_kappa, rng)?;
        }
        Ok(out)
    }

    /// Writes one sphere block of the successor state: the mean is either the
    /// supplied versor or the previous block value, optionally redrawn with
    /// the given concentration and sign-aligned with the mean.
    fn sphere_step<R: Rng + ?Sized>(
        &self,
        out: &mut DVector<f64>,
        state: &DVector<f64>,
        range: Range<usize>,
        mean: Option<Versor>,
        kappa: Option<f64>,
        rng: &mut R,
    ) -> Result<(), ModelError> {
        let mut mean_coords = [0.0; 4];
        match mean {
            Some(v) => v.write_coords(&mut mean_coords),
            None => mean_coords.copy_from_slice(&state.as_slice()[range.clone()]),
        }
        match kappa {
            None => out.as_mut_slice()[range].copy_from_slice(&mean_coords),
            Some(kappa) => {
                let draw = Fml::new(DVector::from_column_slice(&mean_coords), kappa)?.sample(rng);
                let slice = &mut out.as_mut_slice()[range];
                slice.copy_from_slice(draw.as_slice());
                canonicalize_sign_coords(slice, &mean_coords);
            }
        }
        Ok(())
    }

    /// Advances every member of an ensemble (member order preserved; draws are
    /// member-major).
    pub fn propagate_ensemble<R: Rng + ?Sized>(
        &self,
        ensemble: &Ensemble,
        rng: &mut R,
    ) -> Result<Ensemble, ModelError> {
        let mut members = Vec::with_capacity(ensemble.len());
        for m in ensemble.members() {
            members.push(self.propagate(m, rng)?);
        }
        Ok(Ensemble::new(self.layout.clone(), members)?)
    }
}

// ─── measurement operators ───────────────────────────────────────────────────

/// Observes position and attitude directly. Works on either pose layout, as
/// the observed blocks sit at fixed coordinate ranges.
pub fn h_pos_att() -> impl MeasurementOp {
    ClosureOp::new(obs_layout(), |state: &DVector<f64>| {
        let mut y = DVector::zeros(OBS_DIM);
        for (k, idx) in POS.enumerate() {
            y[k] = state[idx];
        }
        for (k, idx) in ATT.enumerate() {
            y[OBS_ATT.start + k] = state[idx];
        }
        y
    })
}

/// Observes position shifted by the position bias and attitude rotated by the
/// attitude bias (bias versor applied on the left), sign-aligned with the
/// member's own attitude. Requires the bias layout.
pub fn h_pos_att_bias() -> impl MeasurementOp {
    ClosureOp::new(obs_layout(), |state: &DVector<f64>| {
        let mut y = DVector::zeros(OBS_DIM);
        for k in 0..3 {
            y[k] = state[POS.start + k] + state[POS_BIAS.start + k];
        }
        let att = Versor::from_coords(&state.as_slice()[ATT]).expect("valid attitude");
        let bias = Versor::from_coords(&state.as_slice()[ATT_BIAS]).expect("valid attitude bias");
        let observed = bias.mul(att).canonicalized_against(att);
        observed.write_coords(&mut y.as_mut_slice()[OBS_ATT]);
        y
    })
}

// ─── truth and measurement synthesis ─────────────────────────────────────────

/// Parameters of the deterministic reference trajectory: constant velocity and
/// constant rotation increment from a given start pose.
#[derive(Debug, Clone)]
pub struct TruthParams {
    pub vel: [f64; 3],
    pub pos0: [f64; 3],
    pub angvel: Versor,
    pub att0: Versor,
    pub frames: usize,
}

impl Default for TruthParams {
    /// The default twin-experiment trajectory: 100 frames from the origin at
    /// 0.1 cm/frame per axis, turning about a fixed tilted axis by about 14°
    /// per frame.
    fn default() -> TruthParams {
        let w = (47.0f64 / 50.0).sqrt();
        let c = (1.0f64 / 50.0).sqrt();
        TruthParams {
            vel: [0.1, 0.1, 0.1],
            pos0: [0.0, 0.0, 0.0],
            angvel: Versor::new(w, c, c, c).expect("unit by construction"),
            att0: Versor::IDENTITY,
            frames: 100,
        }
    }
}

/// Closed-form trajectory: `pos_k = pos0 + k·vel`,
/// `att_k = angvel^k · att0`, with velocity and rotation increment constant.
/// Returns one pose state per frame.
pub fn synth_truth(params: &TruthParams) -> Vec<DVector<f64>> {
    let mut frames = Vec::with_capacity(params.frames);
    for k in 0..params.frames {
        let mut state = DVector::zeros(POSE_DIM);
        for i in 0..3 {
            state[VEL.start + i] = params.vel[i];
            state[POS.start + i] = params.pos0[i] + k as f64 * params.vel[i];
        }
        params
            .angvel
            .write_coords(&mut state.as_mut_slice()[ANGVEL]);
        let att = params.angvel.pow(k as f64).mul(params.att0);
        att.write_coords(&mut state.as_mut_slice()[ATT]);
        frames.push(state);
    }
    frames
}

/// Draws one position-attitude observation per truth frame: position plus
/// Gaussian noise, attitude redrawn about the true attitude with the given
/// concentration and sign-aligned with it. Draw order is frame-major
/// (position before attitude).
pub fn synth_measurements<R: Rng + ?Sized>(
    truth: &[DVector<f64>],
    pos_cov: &DMatrix<f64>,
    att_kappa: f64,
    rng: &mut R,
) -> Result<Vec<DVector<f64>>, ModelError> {
    bias_injected_measurements(truth, pos_cov, att_kappa, &[0.0; 3], &Versor::IDENTITY, rng)
}

/// [`synth_measurements`] with constant measurement biases injected: the
/// position bias adds to the true position, and the attitude bias rotates the
/// true attitude (left multiplication) before noise is applied.
pub fn bias_injected_measurements<R: Rng + ?Sized>(
    truth: &[DVector<f64>],
    pos_cov: &DMatrix<f64>,
    att_kappa: f64,
    pos_bias: &[f64; 3],
    att_bias: &Versor,
    rng: &mut R,
) -> Result<Vec<DVector<f64>>, ModelError> {
    if !(att_kappa.is_finite() && att_kappa > 0.0) {
        return Err(ModelError::BadParameter(format!(
            "attitude measurement concentration must be positive and finite, got {att_kappa}"
        )));
    }
    let pos_noise = Gaussian::new(DVector::zeros(3), pos_cov.clone())?;
    let mut out = Vec::with_capacity(truth.len());
    for state in truth {
        if state.len() < POSE_DIM {
            return Err(ModelError::UnsupportedLayout);
        }
        let mut y = DVector::zeros(OBS_DIM);
        let eta = pos_noise.sample(rng);
        for k in 0..3 {
            y[k] = state[POS.start + k] + pos_bias[k] + eta[k];
        }
        let att = versor_at(state, ATT)?;
        let mean = att_bias.mul(att).canonicalized_against(att);
        let mean_coords = DVector::from_column_slice(&mean.to_array());
        let draw = Fml::new(mean_coords.clone(), att_kappa)?.sample(rng);
        let slice = &mut y.as_mut_slice()[OBS_ATT];
        slice.copy_from_slice(draw.as_slice());
        canonicalize_sign_coords(slice, mean_coords.as_slice());
        out.push(y);
    }
    Ok(out)
}

// ─── initialization ──────────────────────────────────────────────────────────

/// Initial ensemble dispersion around the measurement-derived first estimate.
/// Concentrations may be `f64::INFINITY` for exact blocks; bias spreads are
/// used only with the bias layout.
#[derive(Debug, Clone)]
pub struct InitSpread {
    pub pos_cov: DMatrix<f64>,
    pub vel_cov: DMatrix<f64>,
    pub att_kappa: f64,
    pub angvel_kappa: f64,
    pub pos_bias_cov: DMatrix<f64>,
    pub att_bias_kappa: f64,
}

impl InitSpread {
    /// Spread derived from the observation noise: position like one
    /// observation, velocity like a difference of two, attitude like one
    /// observation, and rotation increment like a composition of two. The
    /// bias spreads matter beyond dispersion: the data constrain only the
    /// composition of a pose block with its offset, so the prior ratio
    /// between the two spreads decides how the composition splits. The
    /// position offset gets a prior as wide as one observation (offsets up to
    /// the noise scale are plausible), while the attitude offset gets a much
    /// tighter prior (a few degrees) so the attitude estimate does not
    /// inherit the split's uncertainty floor.
    pub fn from_observation_noise(pos_cov: &DMatrix<f64>, att_kappa: f64) -> InitSpread {
        InitSpread {
            pos_cov: pos_cov.clone(),
            vel_cov: pos_cov * 2.0,
            att_kappa,
            angvel_kappa: att_kappa / 2.0,
            pos_bias_cov: pos_cov.clone(),
            att_bias_kappa: att_kappa * 4.0,
        }
    }
}

/// Builds the frame-0 ensemble from the first two observations: position and
/// attitude from the first, velocity from the difference, and the rotation
/// increment from the attitude change; bias blocks start at zero/identity.
/// Members are drawn around that estimate with the given spread. Draw order is
/// member-major with blocks in layout order.
pub fn init_from_measurements<R: Rng + ?Sized>(
    layout: &Layout,
    y0: &DVector<f64>,
    y1: &DVector<f64>,
    spread: &InitSpread,
    n: usize,
    rng: &mut R,
) -> Result<Ensemble, ModelError> {
    let has_bias = match layout.dim() {
        POSE_DIM => false,
        POSE_BIAS_DIM => true,
        _ => return Err(ModelError::UnsupportedLayout),
    };
    obs_layout().check_point(y0)?;
    obs_layout().check_point(y1)?;

    let att0 = Versor::from_coords(&y0.as_slice()[OBS_ATT])?;
    let att1 = Versor::from_coords(&y1.as_slice()[OBS_ATT])?;
    let angvel0 = att1.mul(att0.inv());

    let mut mean = DVector::zeros(layout.dim());
    for k in 0..3 {
        mean[VEL.start + k] = y1[k] - y0[k];
        mean[POS.start + k] = y0[k];
    }
    angvel0.write_coords(&mut mean.as_mut_slice()[ANGVEL]);
    att0.write_coords(&mut mean.as_mut_slice()[ATT]);
    if has_bias {
        Versor::IDENTITY.write_coords(&mut mean.as_mut_slice()[ATT_BIAS]);
    }
    init_around_state(layout, &mean, spread, n, rng)
}

/// Draws the frame-0 ensemble around an explicitly supplied state — for
/// example a calibrated starting pose known independently of the measurement
/// stream. The bias blocks of the supplied state act as the prior center
/// (normally zero offset and identity rotation). Draw order is member-major
/// with blocks in layout order.
pub fn init_around_state<R: Rng + ?Sized>(
    layout: &Layout,
    mean: &DVector<f64>,
    spread: &InitSpread,
    n: usize,
    rng: &mut R,
) -> Result<Ensemble, ModelError> {
    let has_bias = match layout.dim() {
        POSE_DIM => false,
        POSE_BIAS_DIM => true,
        _ => return Err(ModelError::UnsupportedLayout),
    };
    if n == 0 {
        return Err(ModelError::BadParameter(
            "ensemble size must be positive".into(),
        ));
    }
    layout.check_point(mean)?;
    check_kappa(spread.att_kappa, "attitude spread")?;
    check_kappa(spread.angvel_kappa, "rotation increment spread")?;
    check_kappa(spread.att_bias_kappa, "attitude bias spread")?;

    let vel_noise = Gaussian::new(DVector::zeros(3), spread.vel_cov.clone())?;
    let pos_noise = Gaussian::new(DVector::zeros(3), spread.pos_cov.clone())?;
    let bias_noise = if has_bias {
        Some(Gaussian::new(
            DVector::zeros(3),
            spread.pos_bias_cov.clone(),
        )?)
    } else {
        None
    };

    let sphere_draw =
        |mean_slice: &[f64], kappa: f64, out: &mut [f64], rng: &mut R| -> Result<(), ModelError> {
            if kappa.is_infinite() {
                out.copy_from_slice(mean_slice);
            } else {
                let draw = Fml::new(DVector::from_column_slice(mean_slice), kappa)?.sample(rng);
                out.copy_from_slice(draw.as_slice());
                canonicalize_sign_coords(out, mean_slice);
            }
            Ok(())
        };

    let mut members = Vec::with_capacity(n);
    for _ in 0..n {
        let mut m = mean.clone();
        if !vel_noise.is_degenerate() {
            let eta = vel_noise.sample(rng);
            for (k, idx) in VEL.enumerate() {
                m[idx] = mean[idx] + eta[k];
            }
        }
        if !pos_noise.is_degenerate() {
            let eta = pos_noise.sample(rng);
            for (k, idx) in POS.enumerate() {
                m[idx] = mean[idx] + eta[k];
            }
        }
        {
            // Split borrows: copy the mean block before writing the member.
            let mean_block: [f64; 4] = mean.as_slice()[ANGVEL].try_into().expect("range of 4");
            sphere_draw(
                &mean_block,
                spread.angvel_kappa,
                &mut m.as_mut_slice()[ANGVEL],
                rng,
            )?;
            let mean_block: [f64; 4] = mean.as_slice()[ATT].try_into().expect("range of 4");
            sphere_draw(
                &mean_block,
                spread.att_kappa,
                &mut m.as_mut_slice()[ATT],
                rng,
            )?;
        }
        if has_bias {
            if let Some(noise) = &bias_noise {
                if !noise.is_degenerate() {
                    let eta = noise.sample(rng);
                    for (k, idx) in POS_BIAS.enumerate() {
                        m[idx] = mean[idx] + eta[k];
                    }
                }
            }
            let mean_block: [f64; 4] = mean.as_slice()[ATT_BIAS].try_into().expect("range of 4");
            sphere_draw(
                &mean_block,
                spread.att_bias_kappa,
                &mut m.as_mut_slice()[ATT_BIAS],
                rng,
            )?;
        }
        members.push(m);
    }
    Ok(Ensemble::new(layout.clone(), members)?)
}
