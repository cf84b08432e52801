//! Exponential, logarithmic, and tangent-projection maps for Euclidean space,
//! the unit sphere, and products of the two.
//!
//! Points of a product space are stored as flat coordinate vectors in the
//! ambient embedding: Euclidean blocks verbatim, unit spheres `S^{n-1}`
//! embedded in `R^n`. A [`Layout`] describes the block structure of such a
//! vector, and the `product_*` maps apply the corresponding per-block map to
//! each slice.
//!
//! All maps are pure functions; nothing here holds interior mutability, so
//! every type is freely shareable across threads.

use std::ops::Range;

use nalgebra::DVector;
use thiserror::Error;

/// Sphere points whose norm deviates from 1 by more than this are rejected;
/// smaller deviations are transparently renormalized where a map needs an
/// exactly-unit base.
pub const UNIT_NORM_TOL: f64 = 1e-9;

/// Tangency residual `|x·v|` above which a claimed tangent vector at a sphere
/// point `x` is rejected. Residuals at or below it are projected away.
pub const TANGENCY_TOL: f64 = 1e-6;

/// Tangent norms below this are treated as zero in [`sphere_exp`]: the map
/// returns its base point.
pub const ZERO_TANGENT_TOL: f64 = 1e-12;

/// [`sphere_log`] returns the zero vector when the points' inner product
/// exceeds `1 - COINCIDENT_DOT_TOL` (the points coincide up to rounding).
pub const COINCIDENT_DOT_TOL: f64 = 1e-12;

/// [`sphere_log`] fails when the points' inner product falls below
/// `-1 + ANTIPODAL_DOT_TOL`: the geodesic direction is undefined there, and an
/// arbitrary choice would silently corrupt downstream gain estimates.
pub const ANTIPODAL_DOT_TOL: f64 = 1e-9;

/// Errors raised by the manifold maps.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ManifoldError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("coordinates contain a non-finite value")]
    NonFinite,
    #[error("sphere point norm {norm} deviates from 1 beyond tolerance")]
    NotUnit { norm: f64 },
    #[error("vector is not tangent at the base point (normal residual {residual:e})")]
    NotTangent { residual: f64 },
    #[error("logarithm undefined for antipodal sphere points (inner product {dot})")]
    AntipodalLog { dot: f64 },
}

/// One factor of a product state space: a Euclidean block `R^dim` or a unit
/// sphere `S^{dim-1}` embedded in `R^dim`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Block {
    Euclid(usize),
    Sphere(usize),
}

impl Block {
    /// Ambient (embedding) dimension of the block.
    pub fn dim(self) -> usize {
        match self {
            Block::Euclid(d) | Block::Sphere(d) => d,
        }
    }

    pub fn is_sphere(self) -> bool {
        matches!(self, Block::Sphere(_))
    }
}

/// Ordered block structure of a product space, with precomputed offsets into
/// the flat ambient coordinate vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    blocks: Vec<Block>,
    offsets: Vec<usize>,
    dim: usize,
}

impl Layout {
    /// Builds a layout from an ordered block list.
    ///
    /// Panics if a Euclidean block has dimension 0 or a sphere block has
    /// ambient dimension < 2 (`S^0` is not supported): layouts are static
    /// configuration, so malformed ones are programmer errors.
    pub fn new(blocks: Vec<Block>) -> Self {
        let mut offsets = Vec::with_capacity(blocks.len());
        let mut dim = 0;
        for b in &blocks {
            match *b {
                Block::Euclid(d) => assert!(d >= 1, "Euclidean block must have dimension >= 1"),
                Block::Sphere(d) => {
                    assert!(d >= 2, "sphere block must have ambient dimension >= 2")
                }
            }
            offsets.push(dim);
            dim += b.dim();
        }
        Layout {
            blocks,
            offsets,
            dim,
        }
    }

    /// Total ambient dimension of the flat coordinate vector.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    /// Coordinate range of block `i` within the flat vector.
    pub fn block_range(&self, i: usize) -> Range<usize> {
        let start = self.offsets[i];
        start..start + self.blocks[i].dim()
    }

    /// Iterates `(block, coordinate range)` pairs in stacking order.
    pub fn iter(&self) -> impl Iterator<Item = (Block, Range<usize>)> + '_ {
        self.blocks
            .iter()
            .enumerate()
            .map(|(i, b)| (*b, self.block_range(i)))
    }

    pub fn check_dim(&self, v: &DVector<f64>) -> Result<(), ManifoldError> {
        if v.len() != self.dim {
            return Err(ManifoldError::DimMismatch {
                expected: self.dim,
                got: v.len(),
            });
        }
        Ok(())
    }

    /// Validates a flat point against this layout: finite everywhere, sphere
    /// blocks unit to [`UNIT_NORM_TOL`]. Sphere blocks are renormalized in
    /// place so later maps see exactly-unit bases.
    pub fn normalize_point(&self, x: &mut DVector<f64>) -> Result<(), ManifoldError> {
        self.check_dim(x)?;
        if !x.iter().all(|e| e.is_finite()) {
            return Err(ManifoldError::NonFinite);
        }
        for (block, range) in self.iter() {
            if block.is_sphere() {
                let mut b = x.rows_range_mut(range);
                let norm = b.norm();
                if (norm - 1.0).abs() > UNIT_NORM_TOL {
                    return Err(ManifoldError::NotUnit { norm });
                }
                b /= norm;
            }
        }
        Ok(())
    }

    /// Validates a flat point without mutating it.
    pub fn check_point(&self, x: &DVector<f64>) -> Result<(), ManifoldError> {
        self.check_dim(x)?;
        if !x.iter().all(|e| e.is_finite()) {
            return Err(ManifoldError::NonFinite);
        }
        for (block, range) in self.iter() {
            if block.is_sphere() {
                check_unit(&x.as_slice()[range])?;
            }
        }
        Ok(())
    }
}

// ─── slice kernels ──────────────────────────────────────────────────────────
//
// The per-block maps operate on plain f64 slices so the product maps can run
// over sub-ranges of a flat vector without intermediate allocations.

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn check_unit(x: &[f64]) -> Result<f64, ManifoldError> {
    let n = norm(x);
    if !n.is_finite() {
        return Err(ManifoldError::NonFinite);
    }
    if (n - 1.0).abs() > UNIT_NORM_TOL {
        return Err(ManifoldError::NotUnit { norm: n });
    }
    Ok(n)
}

fn check_same_len(a: &[f64], b: &[f64]) -> Result<(), ManifoldError> {
    if a.len() != b.len() {
        return Err(ManifoldError::DimMismatch {
            expected: a.len(),
            got: b.len(),
        });
    }
    Ok(())
}

pub(crate) fn euclid_exp_slice(x: &[f64], v: &[f64], out: &mut [f64]) {
    for ((o, a), b) in out.iter_mut().zip(x).zip(v) {
        *o = a + b;
    }
}

pub(crate) fn euclid_log_slice(x1: &[f64], x2: &[f64], out: &mut [f64]) {
    for ((o, a), b) in out.iter_mut().zip(x2).zip(x1) {
        *o = a - b;
    }
}

/// Geodesic shooting on the unit sphere: `cos(|v|)·x + sin(|v|)·v/|v|`.
///
/// The base must be unit to [`UNIT_NORM_TOL`]; tangency is enforced by
/// projecting `v` (rejecting normal residuals above [`TANGENCY_TOL`]). The
/// output is renormalized, and tangents shorter than [`ZERO_TANGENT_TOL`]
/// return the base point.
pub(crate) fn sphere_exp_slice(x: &[f64], v: &[f64], out: &mut [f64]) -> Result<(), ManifoldError> {
    check_same_len(x, v)?;
    let base_norm = check_unit(x)?;
    if !v.iter().all(|e| e.is_finite()) {
        return Err(ManifoldError::NonFinite);
    }
    let normal = dot(x, v) / (base_norm * base_norm);
    if normal.abs() > TANGENCY_TOL {
        return Err(ManifoldError::NotTangent {
            residual: normal.abs(),
        });
    }
    // Project the (near-)tangent exactly onto the tangent space at x.
    let mut angle_sq = 0.0;
    for (o, (xi, vi)) in out.iter_mut().zip(x.iter().zip(v)) {
        let t = vi - normal * xi;
        *o = t;
        angle_sq += t * t;
    }
    let angle = angle_sq.sqrt();
    if angle < ZERO_TANGENT_TOL {
        // Return the base point verbatim so a zero correction is exactly the
        // identity update.
        out.copy_from_slice(x);
        return Ok(());
    }
    let (c, s) = (angle.cos(), angle.sin() / angle);
    for (o, xi) in out.iter_mut().zip(x) {
        *o = c * xi + s * *o;
    }
    let n = norm(out);
    for o in out.iter_mut() {
        *o /= n;
    }
    Ok(())
}

/// Inverse of geodesic shooting: `acos(x1·x2) · P_{x1}(x2 - x1) / |P_{x1}(x2 - x1)|`.
///
/// The inner product is clamped to `[-1, 1]` before `acos`. Coincident inputs
/// (inner product above `1 - COINCIDENT_DOT_TOL`) give the zero vector;
/// antipodal inputs fail with [`ManifoldError::AntipodalLog`].
pub(crate) fn sphere_log_slice(
    x1: &[f64],
    x2: &[f64],
    out: &mut [f64],
) -> Result<(), ManifoldError> {
    check_same_len(x1, x2)?;
    check_unit(x1)?;
    check_unit(x2)?;
    let d = dot(x1, x2).clamp(-1.0, 1.0);
    if d > 1.0 - COINCIDENT_DOT_TOL {
        out.fill(0.0);
        return Ok(());
    }
    if d < -1.0 + ANTIPODAL_DOT_TOL {
        return Err(ManifoldError::AntipodalLog { dot: d });
    }
    let theta = d.acos();
    // P_{x1}(x2 - x1) = x2 - d·x1
    let mut nrm_sq = 0.0;
    for (o, (a, b)) in out.iter_mut().zip(x1.iter().zip(x2)) {
        let t = b - d * a;
        *o = t;
        nrm_sq += t * t;
    }
    let nrm = nrm_sq.sqrt();
    if nrm < ZERO_TANGENT_TOL {
        // Numerically coincident despite the dot test; treat as zero tangent.
        out.fill(0.0);
        return Ok(());
    }
    let scale = theta / nrm;
    for o in out.iter_mut() {
        *o *= scale;
    }
    Ok(())
}

/// Removes the component normal to the sphere at `x`: `w - x(xᵀw)`.
pub(crate) fn sphere_proj_slice(
    x: &[f64],
    w: &[f64],
    out: &mut [f64],
) -> Result<(), ManifoldError> {
    check_same_len(x, w)?;
    check_unit(x)?;
    let d = dot(x, w);
    for (o, (xi, wi)) in out.iter_mut().zip(x.iter().zip(w)) {
        *o = wi - d * xi;
    }
    Ok(())
}

// ─── single-block maps ──────────────────────────────────────────────────────

/// Euclidean exponential map: vector addition.
pub fn euclid_exp(x: &DVector<f64>, v: &DVector<f64>) -> Result<DVector<f64>, ManifoldError> {
    check_same_len(x.as_slice(), v.as_slice())?;
    Ok(x + v)
}

/// Euclidean logarithm map: vector subtraction, based at `x1`.
pub fn euclid_log(x1: &DVector<f64>, x2: &DVector<f64>) -> Result<DVector<f64>, ManifoldError> {
    check_same_len(x1.as_slice(), x2.as_slice())?;
    Ok(x2 - x1)
}

/// Euclidean tangent projection: the identity map.
pub fn euclid_proj(x: &DVector<f64>, w: &DVector<f64>) -> Result<DVector<f64>, ManifoldError> {
    check_same_len(x.as_slice(), w.as_slice())?;
    Ok(w.clone())
}

/// Sphere exponential map. See [`sphere_exp_slice`] for the contract.
pub fn sphere_exp(x: &DVector<f64>, v: &DVector<f64>) -> Result<DVector<f64>, ManifoldError> {
    let mut out = DVector::zeros(x.len());
    sphere_exp_slice(x.as_slice(), v.as_slice(), out.as_mut_slice())?;
    Ok(out)
}

/// Sphere logarithm map. See [`sphere_log_slice`] for the contract.
pub fn sphere_log(x1: &DVector<f64>, x2: &DVector<f64>) -> Result<DVector<f64>, ManifoldError> {
    let mut out = DVector::zeros(x1.len());
    sphere_log_slice(x1.as_slice(), x2.as_slice(), out.as_mut_slice())?;
    Ok(out)
}

/// Sphere tangent projection `w - x(xᵀw)`.
pub fn sphere_proj(x: &DVector<f64>, w: &DVector<f64>) -> Result<DVector<f64>, ManifoldError> {
    let mut out = DVector::zeros(x.len());
    sphere_proj_slice(x.as_slice(), w.as_slice(), out.as_mut_slice())?;
    Ok(out)
}

// ─── product maps ───────────────────────────────────────────────────────────

/// Block-wise exponential map on a product space.
pub fn product_exp(
    layout: &Layout,
    x: &DVector<f64>,
    v: &DVector<f64>,
) -> Result<DVector<f64>, ManifoldError> {
    layout.check_dim(x)?;
    layout.check_dim(v)?;
    let mut out = DVector::zeros(layout.dim());
    for (block, range) in layout.iter() {
        let (xs, vs) = (&x.as_slice()[range.clone()], &v.as_slice()[range.clone()]);
        let os = &mut out.as_mut_slice()[range];
        match block {
            Block::Euclid(_) => euclid_exp_slice(xs, vs, os),
            Block::Sphere(_) => sphere_exp_slice(xs, vs, os)?,
        }
    }
    Ok(out)
}

/// Block-wise logarithm map on a product space, based at `x`.
pub fn product_log(
    layout: &Layout,
    x: &DVector<f64>,
    y: &DVector<f64>,
) -> Result<DVector<f64>, ManifoldError> {
    layout.check_dim(x)?;
    layout.check_dim(y)?;
    let mut out = DVector::zeros(layout.dim());
    for (block, range) in layout.iter() {
        let (xs, ys) = (&x.as_slice()[range.clone()], &y.as_slice()[range.clone()]);
        let os = &mut out.as_mut_slice()[range];
        match block {
            Block::Euclid(_) => euclid_log_slice(xs, ys, os),
            Block::Sphere(_) => sphere_log_slice(xs, ys, os)?,
        }
    }
    Ok(out)
}

/// Block-wise tangent projection on a product space at base `x`.
pub fn product_proj(
    layout: &Layout,
    x: &DVector<f64>,
    w: &DVector<f64>,
) -> Result<DVector<f64>, ManifoldError> {
    layout.check_dim(x)?;
    layout.check_dim(w)?;
    let mut out = DVector::zeros(layout.dim());
    for (block, range) in layout.iter() {
        let (xs, ws) = (&x.as_slice()[range.clone()], &w.as_slice()[range.clone()]);
        let os = &mut out.as_mut_slice()[range];
        match block {
            Block::Euclid(_) => os.copy_from_slice(ws),
            Block::Sphere(_) => sphere_proj_slice(xs, ws, os)?,
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn dv(v: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(v)
    }

    fn unit(v: &[f64]) -> DVector<f64> {
        let d = dv(v);
        let n = d.norm();
        d / n
    }

    #[test]
    fn euclid_exp_is_vector_addition() {
        assert_eq!(
            euclid_exp(&dv(&[1.0, 2.0, 3.0]), &dv(&[0.0, 0.0, 0.0])).unwrap(),
            dv(&[1.0, 2.0, 3.0])
        );
        assert_eq!(
            euclid_exp(&dv(&[0.0, 0.0, 0.0]), &dv(&[0.1, 0.1, 0.1])).unwrap(),
            dv(&[0.1, 0.1, 0.1])
        );
        assert_eq!(
            euclid_exp(&dv(&[1.0, -1.0]), &dv(&[-1.0, 1.0])).unwrap(),
            dv(&[0.0, 0.0])
        );
    }

    #[test]
    fn euclid_log_is_vector_subtraction() {
        assert_eq!(
            euclid_log(&dv(&[5.0, 5.0, 5.0]), &dv(&[5.0, 5.0, 5.0])).unwrap(),
            dv(&[0.0; 3])
        );
        assert_eq!(
            euclid_log(&dv(&[0.0, 0.0]), &dv(&[3.0, 4.0])).unwrap(),
            dv(&[3.0, 4.0])
        );
    }

    #[test]
    fn euclid_round_trip_is_exact_to_1e12() {
        let x1 = dv(&[0.3, -1.7, 2.9]);
        let x2 = dv(&[-5.1, 0.02, 113.0]);
        let back = euclid_exp(&x1, &euclid_log(&x1, &x2).unwrap()).unwrap();
        assert!((back - &x2).norm() < 1e-12);
    }

    #[test]
    fn euclid_proj_is_identity() {
        let w = dv(&[1.0, -2.0, 0.5]);
        let p = euclid_proj(&dv(&[0.0; 3]), &w).unwrap();
        assert_eq!(p, w);
        let p2 = euclid_proj(&dv(&[0.0; 3]), &p).unwrap();
        assert_eq!(p2, p);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        assert!(matches!(
            euclid_exp(&dv(&[1.0, 2.0]), &dv(&[1.0])),
            Err(ManifoldError::DimMismatch { .. })
        ));
        assert!(matches!(
            sphere_log(&unit(&[1.0, 0.0, 0.0]), &unit(&[1.0, 0.0])),
            Err(ManifoldError::DimMismatch { .. })
        ));
    }

    #[test]
    fn sphere_exp_quarter_turn_lands_on_e2() {
        let x = dv(&[1.0, 0.0, 0.0]);
        let v = dv(&[0.0, PI / 2.0, 0.0]);
        let y = sphere_exp(&x, &v).unwrap();
        assert_abs_diff_eq!(y.as_slice(), [0.0, 1.0, 0.0].as_slice(), epsilon = 1e-12);
    }

    #[test]
    fn sphere_exp_zero_tangent_returns_base() {
        let x = dv(&[1.0, 0.0, 0.0]);
        let y = sphere_exp(&x, &dv(&[0.0; 3])).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn sphere_exp_half_turn_reaches_antipode() {
        let x = dv(&[1.0, 0.0, 0.0]);
        let v = dv(&[0.0, PI, 0.0]);
        let y = sphere_exp(&x, &v).unwrap();
        assert_abs_diff_eq!(y.as_slice(), [-1.0, 0.0, 0.0].as_slice(), epsilon = 1e-12);
    }

    #[test]
    fn sphere_exp_output_is_unit_to_1e12() {
        let x = unit(&[0.2, -0.4, 0.7, 0.5]);
        for scale in [1e-9, 0.1, 1.0, 3.0] {
            let w = dv(&[0.3, 0.11, -0.2, 0.9]);
            let v = sphere_proj(&x, &w).unwrap() * scale;
            let y = sphere_exp(&x, &v).unwrap();
            assert!((y.norm() - 1.0).abs() < 1e-12, "norm off at scale {scale}");
        }
    }

    #[test]
    fn sphere_exp_rejects_non_tangent_input() {
        let x = dv(&[1.0, 0.0, 0.0]);
        let v = dv(&[0.5, 0.5, 0.0]); // strong normal component
        assert!(matches!(
            sphere_exp(&x, &v),
            Err(ManifoldError::NotTangent { .. })
        ));
    }

    #[test]
    fn sphere_exp_projects_small_tangency_residual() {
        let x = dv(&[1.0, 0.0, 0.0]);
        let v = dv(&[1e-7, 0.3, 0.0]); // residual below TANGENCY_TOL
        let y = sphere_exp(&x, &v).unwrap();
        let expected = sphere_exp(&x, &dv(&[0.0, 0.3, 0.0])).unwrap();
        assert!((y - expected).norm() < 1e-7);
    }

    #[test]
    fn sphere_log_between_axes_is_quarter_turn_tangent() {
        let x1 = dv(&[1.0, 0.0, 0.0]);
        let x2 = dv(&[0.0, 1.0, 0.0]);
        let v = sphere_log(&x1, &x2).unwrap();
        assert_abs_diff_eq!(
            v.as_slice(),
            [0.0, PI / 2.0, 0.0].as_slice(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn sphere_log_of_identical_points_is_zero() {
        let x = unit(&[0.6, 0.8, 0.0]);
        let v = sphere_log(&x, &x).unwrap();
        assert_eq!(v, dv(&[0.0; 3]));
    }

    #[test]
    fn sphere_log_rejects_antipodal_points() {
        let x = unit(&[0.0, 0.0, 1.0]);
        let y = -&x;
        assert!(matches!(
            sphere_log(&x, &y),
            Err(ManifoldError::AntipodalLog { .. })
        ));
    }

    #[test]
    fn sphere_proj_examples() {
        let e1 = dv(&[1.0, 0.0, 0.0, 0.0]);
        let e2 = dv(&[0.0, 1.0, 0.0, 0.0]);
        assert_eq!(sphere_proj(&e1, &e1).unwrap(), dv(&[0.0; 4]));
        assert_eq!(sphere_proj(&e1, &e2).unwrap(), e2);
        assert_eq!(
            sphere_proj(&e1, &dv(&[1.0, 1.0, 0.0, 0.0])).unwrap(),
            dv(&[0.0, 1.0, 0.0, 0.0])
        );
    }

    #[test]
    fn layout_offsets_and_dims() {
        let layout = Layout::new(vec![
            Block::Euclid(3),
            Block::Euclid(3),
            Block::Sphere(4),
            Block::Sphere(4),
        ]);
        assert_eq!(layout.dim(), 14);
        assert_eq!(layout.block_range(0), 0..3);
        assert_eq!(layout.block_range(2), 6..10);
        assert_eq!(layout.block_range(3), 10..14);
    }

    fn pose_like_layout() -> Layout {
        Layout::new(vec![
            Block::Euclid(3),
            Block::Euclid(3),
            Block::Sphere(4),
            Block::Sphere(4),
        ])
    }

    fn pose_like_point(seed: &[f64; 14]) -> DVector<f64> {
        let layout = pose_like_layout();
        let mut x = dv(seed);
        for (block, range) in layout.iter() {
            if block.is_sphere() {
                let n = norm(&x.as_slice()[range.clone()]);
                for e in &mut x.as_mut_slice()[range] {
                    *e /= n;
                }
            }
        }
        layout.normalize_point(&mut x).unwrap();
        x
    }

    #[test]
    fn product_exp_zero_tangent_is_identity() {
        let layout = pose_like_layout();
        let x = pose_like_point(&[
            0.1, 0.2, 0.3, 1.0, 2.0, 3.0, 0.5, 0.5, 0.5, 0.5, 1.0, 0.0, 0.0, 0.0,
        ]);
        let y = product_exp(&layout, &x, &DVector::zeros(14)).unwrap();
        assert!((y - &x).norm() < 1e-15);
    }

    #[test]
    fn product_maps_on_pure_euclid_layout_reduce_to_euclid_maps() {
        let layout = Layout::new(vec![Block::Euclid(2)]);
        let x = dv(&[1.0, 2.0]);
        let v = dv(&[0.5, -0.5]);
        assert_eq!(
            product_exp(&layout, &x, &v).unwrap(),
            euclid_exp(&x, &v).unwrap()
        );
        let y = dv(&[4.0, 4.0]);
        assert_eq!(
            product_log(&layout, &x, &y).unwrap(),
            euclid_log(&x, &y).unwrap()
        );
        assert_eq!(product_proj(&layout, &x, &v).unwrap(), v);
    }

    #[test]
    fn product_round_trip_on_pose_pairs_below_1e9() {
        let layout = pose_like_layout();
        let x = pose_like_point(&[
            0.1, -0.2, 0.3, 4.0, 5.0, -6.0, 0.9, 0.1, -0.3, 0.2, 0.7, 0.7, 0.1, -0.05,
        ]);
        let y = pose_like_point(&[
            -0.4, 0.0, 1.3, 3.0, -5.0, 2.0, 0.2, 0.8, 0.5, -0.1, -0.3, 0.6, 0.6, 0.4,
        ]);
        let v = product_log(&layout, &x, &y).unwrap();
        let back = product_exp(&layout, &x, &v).unwrap();
        assert!((back - &y).norm() < 1e-9);
    }

    #[test]
    fn product_maps_commute_with_block_extraction() {
        let layout = pose_like_layout();
        let x = pose_like_point(&[
            0.1, -0.2, 0.3, 4.0, 5.0, -6.0, 0.9, 0.1, -0.3, 0.2, 0.7, 0.7, 0.1, -0.05,
        ]);
        let mut w = DVector::zeros(14);
        for (i, e) in w.iter_mut().enumerate() {
            *e = 0.01 * (i as f64) - 0.05;
        }
        let u = product_proj(&layout, &x, &w).unwrap();
        let z = product_exp(&layout, &x, &u).unwrap();
        for (block, range) in layout.iter() {
            let xb = dv(&x.as_slice()[range.clone()]);
            let wb = dv(&w.as_slice()[range.clone()]);
            let (ub, zb) = match block {
                Block::Euclid(_) => {
                    let ub = euclid_proj(&xb, &wb).unwrap();
                    let zb = euclid_exp(&xb, &ub).unwrap();
                    (ub, zb)
                }
                Block::Sphere(_) => {
                    let ub = sphere_proj(&xb, &wb).unwrap();
                    let zb = sphere_exp(&xb, &ub).unwrap();
                    (ub, zb)
                }
            };
            assert!((dv(&u.as_slice()[range.clone()]) - ub).norm() < 1e-15);
            assert!((dv(&z.as_slice()[range]) - zb).norm() < 1e-15);
        }
    }

    #[test]
    fn normalize_point_rejects_far_from_unit_sphere_blocks() {
        let layout = Layout::new(vec![Block::Sphere(3)]);
        let mut x = dv(&[0.5, 0.5, 0.5]);
        assert!(matches!(
            layout.normalize_point(&mut x),
            Err(ManifoldError::NotUnit { .. })
        ));
    }

    proptest! {
        #[test]
        fn prop_sphere_round_trip(raw_x in proptest::array::uniform4(-1.0f64..1.0),
                                  raw_w in proptest::array::uniform4(-1.0f64..1.0),
                                  scale in 0.0f64..2.8) {
            let xn = dv(&raw_x).norm();
            prop_assume!(xn > 1e-3);
            let x = unit(&raw_x);
            let w = dv(&raw_w);
            let t = sphere_proj(&x, &w).unwrap();
            prop_assume!(t.norm() > 1e-6);
            let v = &t * (scale / t.norm());
            let y = sphere_exp(&x, &v).unwrap();
            // exp then log round trip (angle stays below pi via `scale`)
            let v_back = sphere_log(&x, &y).unwrap();
            prop_assert!((v_back - &v).norm() < 1e-9);
        }

        #[test]
        fn prop_sphere_proj_idempotent_and_orthogonal(raw_x in proptest::array::uniform4(-1.0f64..1.0),
                                                      raw_w in proptest::array::uniform4(-10.0f64..10.0)) {
            prop_assume!(dv(&raw_x).norm() > 1e-3);
            let x = unit(&raw_x);
            let w = dv(&raw_w);
            let p = sphere_proj(&x, &w).unwrap();
            let pp = sphere_proj(&x, &p).unwrap();
            prop_assert!((pp - &p).norm() < 1e-12);
            prop_assert!(x.dot(&p).abs() < 1e-12);
        }

        #[test]
        fn prop_sphere_exp_unit_output(raw_x in proptest::array::uniform3(-1.0f64..1.0),
                                       raw_w in proptest::array::uniform3(-5.0f64..5.0)) {
            prop_assume!(dv(&raw_x).norm() > 1e-3);
            let x = unit(&raw_x);
            let v = sphere_proj(&x, &dv(&raw_w)).unwrap();
            let y = sphere_exp(&x, &v).unwrap();
            prop_assert!((y.norm() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn prop_euclid_round_trip(a in proptest::array::uniform3(-100.0f64..100.0),
                                  b in proptest::array::uniform3(-100.0f64..100.0)) {
            let (x1, x2) = (dv(&a), dv(&b));
            let back = euclid_exp(&x1, &euclid_log(&x1, &x2).unwrap()).unwrap();
            prop_assert!((back - &x2).norm() < 1e-12);
        }
    }
}
