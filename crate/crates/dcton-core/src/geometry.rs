//! Thin-plate-spline warping and homography-regularized transform geometry.
//!
//! Coordinates are normalized to [-1, 1] in both axes with x rightward and
//! y downward; pixel (i, j) of an H x W image sits at
//! `((2j+1)/W - 1, (2i+1)/H - 1)`. Warp fields follow the backward-warping
//! convention: the field value at a destination pixel is the source
//! location to sample.

use nalgebra::{DMatrix, Matrix3};

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::{Scalar, Tensor};

/// Radial TPS kernel on a squared distance: `U = d2 * ln(d2)` (a constant
/// rescale of the classical r^2 log r, which spans the same interpolant).
fn tps_kernel(d2: f64) -> f64 {
    if d2 < 1e-12 {
        0.0
    } else {
        d2 * d2.ln()
    }
}

/// Derivative of [`tps_kernel`] with respect to the squared distance.
fn tps_kernel_d(d2: f64) -> f64 {
    if d2 < 1e-12 {
        0.0
    } else {
        d2.ln() + 1.0
    }
}

fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (a[0] - b[0], a[1] - b[1]);
    dx * dx + dy * dy
}

// ── Control grids ───────────────────────────────────────────────────────

/// A rows x cols lattice of 2-D control points in normalized coordinates,
/// stored row-major.
#[derive(Debug, Clone)]
pub struct ControlGrid {
    rows: usize,
    cols: usize,
    points: Vec<[f64; 2]>,
}

impl ControlGrid {
    /// Evenly spaced lattice spanning [-1, 1] x [-1, 1].
    pub fn regular(rows: usize, cols: usize) -> Result<Self> {
        if rows < 2 || cols < 2 {
            return Err(Error::InvalidArgument(format!(
                "control grid must be at least 2x2, got {rows}x{cols}"
            )));
        }
        let mut points = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                points.push([
                    2.0 * c as f64 / (cols - 1) as f64 - 1.0,
                    2.0 * r as f64 / (rows - 1) as f64 - 1.0,
                ]);
            }
        }
        Ok(ControlGrid { rows, cols, points })
    }

    /// Grid with explicit point positions (row-major, `rows * cols` long).
    pub fn from_points(rows: usize, cols: usize, points: Vec<[f64; 2]>) -> Result<Self> {
        if rows < 2 || cols < 2 {
            return Err(Error::InvalidArgument(format!(
                "control grid must be at least 2x2, got {rows}x{cols}"
            )));
        }
        if points.len() != rows * cols {
            return Err(Error::InvalidArgument(format!(
                "expected {} control points, got {}",
                rows * cols,
                points.len()
            )));
        }
        if points.iter().any(|p| !p[0].is_finite() || !p[1].is_finite()) {
            return Err(Error::InvalidArgument("control points must be finite".into()));
        }
        Ok(ControlGrid { rows, cols, points })
    }

    /// Copy of this grid with per-point displacements added.
    pub fn with_offsets(&self, offsets: &[[f64; 2]]) -> Result<Self> {
        if offsets.len() != self.points.len() {
            return Err(Error::InvalidArgument(format!(
                "expected {} offsets, got {}",
                self.points.len(),
                offsets.len()
            )));
        }
        let points = self
            .points
            .iter()
            .zip(offsets)
            .map(|(p, o)| [p[0] + o[0], p[1] + o[1]])
            .collect();
        ControlGrid::from_points(self.rows, self.cols, points)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }
}

// ── Warp fields ─────────────────────────────────────────────────────────

/// Dense per-pixel sampling positions in normalized coordinates; entry
/// `(y, x)` holds the source `[x, y]` for that destination pixel.
#[derive(Debug, Clone)]
pub struct WarpField {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl WarpField {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * 2 {
            return Err(Error::InvalidArgument(format!(
                "warp field for {height}x{width} needs {} values, got {}",
                height * width * 2,
                data.len()
            )));
        }
        Ok(WarpField { height, width, data })
    }

    /// Field that samples every pixel from itself.
    pub fn identity(height: usize, width: usize) -> Self {
        let mut data = Vec::with_capacity(height * width * 2);
        for y in 0..height {
            for x in 0..width {
                data.push((2 * x + 1) as f64 / width as f64 - 1.0);
                data.push((2 * y + 1) as f64 / height as f64 - 1.0);
            }
        }
        WarpField { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn at(&self, y: usize, x: usize) -> [f64; 2] {
        let i = (y * self.width + x) * 2;
        [self.data[i], self.data[i + 1]]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Grid tensor of shape (1, H, W, 2) for the sampling kernels.
    pub fn to_grid_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_vec(
            &[1, self.height, self.width, 2],
            self.data.iter().map(|&v| T::from_f64(v)).collect(),
        )
    }
}

// ── TPS fit and evaluation ──────────────────────────────────────────────

/// Solved TPS system: sites, LU factors of the (symmetric) system matrix,
/// and the (K+3) x 2 parameter block [w_1..w_K, a0, ax, ay] per axis.
pub(crate) struct TpsFit {
    sites: Vec<[f64; 2]>,
    lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    params: DMatrix<f64>,
}

/// Fit the interpolating TPS with `f(sites[k]) = values[k]` by solving
/// `[[K, P], [P^T, 0]] [w; a] = [v; 0]`.
pub(crate) fn tps_fit(sites: &[[f64; 2]], values: &[[f64; 2]]) -> Result<TpsFit> {
    let k = sites.len();
    if k < 4 {
        return Err(Error::InvalidArgument(format!("TPS needs at least 4 control points, got {k}")));
    }
    if values.len() != k {
        return Err(Error::InvalidArgument(format!(
            "site/value count mismatch: {k} vs {}",
            values.len()
        )));
    }
    let n = k + 3;
    let mut a = DMatrix::<f64>::zeros(n, n);
    for i in 0..k {
        for j in 0..k {
            a[(i, j)] = tps_kernel(dist2(sites[i], sites[j]));
        }
        a[(i, k)] = 1.0;
        a[(i, k + 1)] = sites[i][0];
        a[(i, k + 2)] = sites[i][1];
        a[(k, i)] = 1.0;
        a[(k + 1, i)] = sites[i][0];
        a[(k + 2, i)] = sites[i][1];
    }
    let mut b = DMatrix::<f64>::zeros(n, 2);
    for i in 0..k {
        b[(i, 0)] = values[i][0];
        b[(i, 1)] = values[i][1];
    }
    let lu = a.lu();
    let params = lu.solve(&b).ok_or_else(|| {
        Error::SingularSystem("TPS system is singular (collinear or duplicate control points)".into())
    })?;
    if params.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularSystem("TPS solve produced non-finite parameters".into()));
    }
    Ok(TpsFit { sites: sites.to_vec(), lu, params })
}

impl TpsFit {
    pub(crate) fn eval(&self, p: [f64; 2]) -> [f64; 2] {
        let k = self.sites.len();
        let mut out = [0.0; 2];
        for c in 0..2 {
            let mut acc = self.params[(k, c)]
                + self.params[(k + 1, c)] * p[0]
                + self.params[(k + 2, c)] * p[1];
            for (j, s) in self.sites.iter().enumerate() {
                acc += self.params[(j, c)] * tps_kernel(dist2(p, *s));
            }
            out[c] = acc;
        }
        out
    }

    /// Evaluate at every pixel center of an H x W raster.
    pub(crate) fn eval_grid(&self, height: usize, width: usize) -> Vec<f64> {
        let mut data = Vec::with_capacity(height * width * 2);
        for y in 0..height {
            let py = (2 * y + 1) as f64 / height as f64 - 1.0;
            for x in 0..width {
                let px = (2 * x + 1) as f64 / width as f64 - 1.0;
                let v = self.eval([px, py]);
                data.push(v[0]);
                data.push(v[1]);
            }
        }
        data
    }

    /// Gradient of a loss with respect to the fit's sites, given the loss
    /// gradient over an evaluated H x W field. Uses the adjoint of the
    /// linear solve (`dA = -A^{-T} dW W^T`, with A symmetric) plus the
    /// kernel terms through both the evaluation and system matrices.
    pub(crate) fn backward_sites(&self, height: usize, width: usize, dfield: &[f64]) -> Vec<f64> {
        let k = self.sites.len();
        let n = k + 3;
        let m = height * width;
        debug_assert_eq!(dfield.len(), m * 2);
        let mut dsites = vec![0.0f64; k * 2];
        // dparams[j][c] = sum_m G[m][j] * dfield[m][c]; and the direct site
        // gradient through G's kernel columns.
        let mut dparams = DMatrix::<f64>::zeros(n, 2);
        let y_of = |idx: usize| (2 * (idx / width) + 1) as f64 / height as f64 - 1.0;
        let x_of = |idx: usize| (2 * (idx % width) + 1) as f64 / width as f64 - 1.0;
        for mi in 0..m {
            let p = [x_of(mi), y_of(mi)];
            let (dx_, dy_) = (dfield[mi * 2], dfield[mi * 2 + 1]);
            dparams[(k, 0)] += dx_;
            dparams[(k, 1)] += dy_;
            dparams[(k + 1, 0)] += dx_ * p[0];
            dparams[(k + 1, 1)] += dy_ * p[0];
            dparams[(k + 2, 0)] += dx_ * p[1];
            dparams[(k + 2, 1)] += dy_ * p[1];
            for (j, s) in self.sites.iter().enumerate() {
                let d2 = dist2(p, *s);
                dparams[(j, 0)] += dx_ * tps_kernel(d2);
                dparams[(j, 1)] += dy_ * tps_kernel(d2);
                // dG[m][j] routed into site j.
                let dg = dx_ * self.params[(j, 0)] + dy_ * self.params[(j, 1)];
                let kd = tps_kernel_d(d2);
                dsites[j * 2] += dg * kd * 2.0 * (s[0] - p[0]);
                dsites[j * 2 + 1] += dg * kd * 2.0 * (s[1] - p[1]);
            }
        }
        // Z = A^{-1} dparams; dA = -Z W^T.
        let z = match self.lu.solve(&dparams) {
            Some(z) => z,
            None => return dsites, // unreachable: fit already solved
        };
        let da = -&z * self.params.transpose();
        for i in 0..k {
            for j in 0..k {
                if i == j {
                    continue;
                }
                let d2 = dist2(self.sites[i], self.sites[j]);
                let kd = tps_kernel_d(d2);
                // Entry (i, j) and its mirror both vary with site i.
                let g = (da[(i, j)] + da[(j, i)]) * kd * 2.0;
                dsites[i * 2] += g * (self.sites[i][0] - self.sites[j][0]);
                dsites[i * 2 + 1] += g * (self.sites[i][1] - self.sites[j][1]);
            }
            dsites[i * 2] += da[(i, k + 1)] + da[(k + 1, i)];
            dsites[i * 2 + 1] += da[(i, k + 2)] + da[(k + 2, i)];
        }
        dsites
    }
}

/// Solve for the dense backward warp that carries `src` control points onto
/// `dst`: the field satisfies `field(dst[k]) = src[k]` and interpolates
/// smoothly elsewhere.
pub fn solve_tps(src: &ControlGrid, dst: &ControlGrid, height: usize, width: usize) -> Result<WarpField> {
    if src.rows() != dst.rows() || src.cols() != dst.cols() {
        return Err(Error::InvalidArgument(format!(
            "grid shape mismatch: {}x{} vs {}x{}",
            src.rows(),
            src.cols(),
            dst.rows(),
            dst.cols()
        )));
    }
    if height == 0 || width == 0 {
        return Err(Error::InvalidArgument("warp field must be non-empty".into()));
    }
    let fit = tps_fit(dst.points(), src.points())?;
    WarpField::new(height, width, fit.eval_grid(height, width))
}

/// Bilinearly sample a (C, H, W) image at the warp field's positions;
/// out-of-bounds taps read `padding`.
pub fn apply_warp<T: Scalar>(image: &Tensor<T>, field: &WarpField, padding: T) -> Result<Tensor<T>> {
    if image.shape().len() != 3 {
        return Err(Error::InvalidArgument(format!(
            "apply_warp expects a (C, H, W) image, got shape {:?}",
            image.shape()
        )));
    }
    let (c, h, w) = (image.dim(0), image.dim(1), image.dim(2));
    let img4 = image.reshaped(&[1, c, h, w]);
    let grid = field.to_grid_tensor::<T>();
    let out = kernels::grid_sample_forward(&img4, &grid, padding);
    Ok(out.reshaped(&[c, field.height(), field.width()]))
}

// ── Homography-regularized transform stacks ─────────────────────────────

/// Control points in homogeneous form: a 3 x K matrix with rows x, y, 1.
#[derive(Debug, Clone)]
pub struct TransformMatrix {
    m: DMatrix<f64>,
}

impl TransformMatrix {
    pub fn from_grid(grid: &ControlGrid) -> Self {
        Self::from_points(grid.points())
    }

    pub fn from_points(points: &[[f64; 2]]) -> Self {
        let k = points.len();
        let mut m = DMatrix::<f64>::zeros(3, k);
        for (j, p) in points.iter().enumerate() {
            m[(0, j)] = p[0];
            m[(1, j)] = p[1];
            m[(2, j)] = 1.0;
        }
        TransformMatrix { m }
    }

    pub fn cols(&self) -> usize {
        self.m.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.m
    }
}

/// A 3x3 projective map between transform stacks.
#[derive(Debug, Clone)]
pub struct Homography {
    m: Matrix3<f64>,
}

impl Homography {
    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.m
    }

    /// Scale so the bottom-right entry is 1 (when it is not tiny). The
    /// least-squares estimate below is scale-meaningful, so normalization
    /// is presentation-only and not applied inside the residual.
    pub fn normalized(&self) -> Homography {
        let s = self.m[(2, 2)];
        if s.abs() > 1e-8 {
            Homography { m: self.m / s }
        } else {
            self.clone()
        }
    }

    pub fn frobenius_distance(&self, other: &Homography) -> f64 {
        (self.m - other.m).norm()
    }
}

/// Least-squares H minimizing `||H * prev - curr||_F` via the pseudoinverse
/// of `prev` (unique when `prev` has rank 3).
pub fn estimate_homography(prev: &TransformMatrix, curr: &TransformMatrix) -> Result<Homography> {
    if prev.cols() != curr.cols() {
        return Err(Error::InvalidArgument(format!(
            "transform stacks differ in control-point count: {} vs {}",
            prev.cols(),
            curr.cols()
        )));
    }
    if prev.cols() < 3 {
        return Err(Error::InvalidArgument("need at least 3 control points".into()));
    }
    let svd = prev.m.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smax > 0.0) || smin < 1e-10 * smax {
        return Err(Error::SingularSystem(
            "previous transform stack is rank-deficient; homography is not identifiable".into(),
        ));
    }
    let pinv = svd
        .pseudo_inverse(1e-12 * smax)
        .map_err(|e| Error::SingularSystem(format!("pseudoinverse failed: {e}")))?;
    let h = &curr.m * pinv;
    let mut m = Matrix3::<f64>::zeros();
    for r in 0..3 {
        for c in 0..3 {
            m[(r, c)] = h[(r, c)];
        }
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularSystem("homography estimate is non-finite".into()));
    }
    Ok(Homography { m })
}

/// Squared Frobenius residual of the best homography between consecutive
/// transform stacks: `R = ||H* prev - curr||_F^2`.
pub fn regularization_term(prev: &TransformMatrix, curr: &TransformMatrix) -> Result<f64> {
    Ok(regularization_parts(prev, curr)?.0)
}

/// Residual value plus the residual matrix `H* prev - curr`, used by the
/// training graph: at the argmin the gradient w.r.t. `curr` is `-2 R`.
pub(crate) fn regularization_parts(
    prev: &TransformMatrix,
    curr: &TransformMatrix,
) -> Result<(f64, DMatrix<f64>)> {
    let h = estimate_homography(prev, curr)?;
    let mut hd = DMatrix::<f64>::zeros(3, 3);
    for r in 0..3 {
        for c in 0..3 {
            hd[(r, c)] = h.m[(r, c)];
        }
    }
    let resid = &hd * &prev.m - &curr.m;
    let rb = resid.iter().map(|v| v * v).sum();
    Ok((rb, resid))
}
