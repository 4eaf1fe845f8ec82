//! Linearized dynamics around the minimizer and the optimal-step scan.
//!
//! Near the solution the stacked (parameter, gradient-estimate) iterates
//! evolve by a fixed matrix `Gamma(alpha)`. Its spectrum carries `N`
//! eigenvalues pinned at 1 by a conserved tracking quantity; the remaining
//! modes set the convergence rate, and the step minimizing their largest
//! modulus is the optimal one. A reduced model over (mean error, parameter
//! mismatch, gradient mismatch) describes the same non-stationary modes.

use crate::linalg;
use crate::netgraph::Topology;
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SpectralError {
    #[error("mean Hessian is numerically singular")]
    SingularMeanHessian,
    #[error("{0} local Hessians supplied for {1} nodes")]
    HessianCount(usize, usize),
    #[error("left/right eigenvector product {0:e} is too close to zero")]
    DegenerateEigenvectors(f64),
    #[error("scan grid must lie strictly inside (0, 1)")]
    BadGrid,
    #[error(transparent)]
    Linalg(#[from] linalg::LinalgError),
}

/// Linear model `Gamma(alpha) = Gamma0 + alpha * slope` of the stacked
/// (parameter, gradient-estimate) dynamics.
pub struct GammaModel {
    pub gamma0: DMatrix<f64>,
    pub slope: DMatrix<f64>,
    pub node_count: usize,
    pub dim: usize,
}

impl GammaModel {
    pub fn at(&self, alpha: f64) -> DMatrix<f64> {
        &self.gamma0 + &self.slope * alpha
    }

    pub fn size(&self) -> usize {
        2 * self.node_count * self.dim
    }
}

fn invert_spd(m: &DMatrix<f64>) -> Result<DMatrix<f64>, SpectralError> {
    let (smax, smin) = linalg::singular_extremes(m)?;
    if smin <= 0.0 || smax / smin > 1e14 {
        return Err(SpectralError::SingularMeanHessian);
    }
    m.clone()
        .lu()
        .try_inverse()
        .ok_or(SpectralError::SingularMeanHessian)
}

/// Assembles the block model from the local Hessians at the minimizer and
/// their mean.
pub fn build_gamma(
    topo: &Topology,
    local_hessians: &[DMatrix<f64>],
    h_star: &DMatrix<f64>,
) -> Result<GammaModel, SpectralError> {
    let n = topo.node_count();
    if local_hessians.len() != n {
        return Err(SpectralError::HessianCount(local_hessians.len(), n));
    }
    let dim = h_star.nrows();
    let h_star_inv = invert_spd(h_star)?;
    let w = topo.weights();
    let size = n * dim;

    let w_big = linalg::kron(w, &DMatrix::identity(dim, dim));
    // blockdiag of the local Hessians
    let mut hess_block = DMatrix::zeros(size, size);
    for i in 0..n {
        hess_block
            .view_mut((i * dim, i * dim), (dim, dim))
            .copy_from(&local_hessians[i]);
    }
    let w_hess = &w_big * &hess_block;
    let coupling = &w_hess * (&w_big - DMatrix::identity(size, size));
    let h_inv_block = linalg::kron(&DMatrix::identity(n, n), &h_star_inv);

    let mut gamma0 = DMatrix::zeros(2 * size, 2 * size);
    gamma0.view_mut((0, 0), (size, size)).copy_from(&w_big);
    gamma0.view_mut((size, 0), (size, size)).copy_from(&coupling);
    gamma0.view_mut((size, size), (size, size)).copy_from(&w_big);

    let mut slope = DMatrix::zeros(2 * size, 2 * size);
    slope
        .view_mut((0, size), (size, size))
        .copy_from(&(-&h_inv_block));
    slope
        .view_mut((size, size), (size, size))
        .copy_from(&(-(&w_hess * &h_inv_block)));

    Ok(GammaModel {
        gamma0,
        slope,
        node_count: n,
        dim,
    })
}

/// Largest eigenvalue modulus after removing the `n_deflate` eigenvalues
/// closest to 1. Returns `(radius, separation)` where `separation` is the
/// distance-to-1 gap between the removed cluster and the first kept mode.
pub fn deflated_radius(eigs: &[Complex64], n_deflate: usize) -> (f64, f64) {
    let one = Complex64::new(1.0, 0.0);
    let mut order: Vec<usize> = (0..eigs.len()).collect();
    order.sort_by(|&i, &j| {
        (eigs[i] - one)
            .norm()
            .partial_cmp(&(eigs[j] - one).norm())
            .unwrap()
    });
    let kept = &order[n_deflate..];
    let radius = kept.iter().map(|&i| eigs[i].norm()).fold(0.0f64, f64::max);
    let separation = if n_deflate == 0 || kept.is_empty() {
        f64::INFINITY
    } else {
        (eigs[kept[0]] - one).norm() - (eigs[order[n_deflate - 1]] - one).norm()
    };
    (radius, separation)
}

/// Both roots of `mu^2 - mu0 (2 - alpha s) mu + mu0 (mu0 - alpha s) = 0`,
/// ordered (larger modulus, smaller modulus). The larger root is computed by
/// the sign-stable formula and the other by the product of the roots.
pub fn theorem2_roots(mu0: Complex64, s: f64, alpha: f64) -> (Complex64, Complex64) {
    let half_b = mu0 * (2.0 - alpha * s) * 0.5;
    let c = mu0 * (mu0 - alpha * s);
    let disc = half_b * half_b - c;
    let mut sq = disc.sqrt();
    if (half_b.conj() * sq).re < 0.0 {
        sq = -sq;
    }
    let r1 = half_b + sq;
    let r2 = if r1.norm() > 1e-300 {
        c / r1
    } else {
        half_b - sq
    };
    if r1.norm() >= r2.norm() {
        (r1, r2)
    } else {
        (r2, r1)
    }
}

/// One scan sample.
#[derive(Debug, Clone)]
pub struct ScanPoint {
    pub alpha: f64,
    pub deflated_radius: f64,
    pub predicted_root_up: f64,
    pub predicted_root_down: f64,
}

/// Result of the optimal-step scan.
#[derive(Debug, Clone)]
pub struct ScanResult {
    pub alpha_opt: f64,
    pub radius_at_opt: f64,
    pub curve: Vec<ScanPoint>,
    /// Smallest deflation separation seen along the grid.
    pub min_separation: f64,
    /// Set when the stationary cluster came within 1e-6 of the kept modes.
    pub deflation_ambiguous: bool,
}

/// Scans `Gamma(alpha)` over a grid in (0, 1), deflating the `N` stationary
/// modes, and refines the grid minimizer by golden section.
pub fn scan_alpha_opt(
    model: &GammaModel,
    grid: &[f64],
    lambda2: Complex64,
    s: f64,
) -> Result<ScanResult, SpectralError> {
    if grid.is_empty() || grid.iter().any(|&a| a <= 0.0 || a >= 1.0) {
        return Err(SpectralError::BadGrid);
    }
    let n_deflate = model.dim;
    let radius_at = |alpha: f64| -> (f64, f64) {
        let eigs = linalg::dense_eigenvalues(&model.at(alpha));
        deflated_radius(&eigs, n_deflate)
    };

    let mut curve = Vec::with_capacity(grid.len());
    let mut min_separation = f64::INFINITY;
    let mut best = (f64::INFINITY, 0.0);
    for &alpha in grid {
        let (radius, sep) = radius_at(alpha);
        min_separation = min_separation.min(sep);
        let (up, down) = theorem2_roots(lambda2, s, alpha);
        curve.push(ScanPoint {
            alpha,
            deflated_radius: radius,
            predicted_root_up: up.norm(),
            predicted_root_down: down.norm(),
        });
        if radius < best.0 {
            best = (radius, alpha);
        }
    }

    // golden-section refinement inside the bracketing grid cells
    let pos = grid.iter().position(|&a| a == best.1).unwrap();
    let mut lo = if pos > 0 { grid[pos - 1] } else { grid[0] };
    let mut hi = if pos + 1 < grid.len() {
        grid[pos + 1]
    } else {
        grid[grid.len() - 1]
    };
    let phi_ratio = 0.5 * (5.0f64.sqrt() - 1.0);
    let mut c = hi - phi_ratio * (hi - lo);
    let mut d = lo + phi_ratio * (hi - lo);
    let mut fc = radius_at(c).0;
    let mut fd = radius_at(d).0;
    while hi - lo > 1e-6 {
        if fc <= fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - phi_ratio * (hi - lo);
            fc = radius_at(c).0;
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + phi_ratio * (hi - lo);
            fd = radius_at(d).0;
        }
    }
    let refined = 0.5 * (lo + hi);
    let (refined_radius, _) = radius_at(refined);
    let (alpha_opt, radius_at_opt) = if refined_radius < best.0 {
        (refined, refined_radius)
    } else {
        (best.1, best.0)
    };

    Ok(ScanResult {
        alpha_opt,
        radius_at_opt,
        curve,
        min_separation,
        deflation_ambiguous: min_separation < 1e-6,
    })
}

/// Deviation report of the predicted eigenvalue trajectories.
#[derive(Debug, Clone)]
pub struct Theorem2Report {
    pub deviations: Vec<(f64, f64)>,
    /// Set when two actual eigenvalues were equidistant from a prediction.
    pub matching_ambiguous: bool,
}

/// Matches the two predicted roots against the nearest actual eigenvalues of
/// `Gamma(alpha)` for each step size and reports the worst deviation.
pub fn verify_theorem2(
    model: &GammaModel,
    lambda2: Complex64,
    s: f64,
    alphas: &[f64],
) -> Theorem2Report {
    let mut deviations = Vec::with_capacity(alphas.len());
    let mut ambiguous = false;
    for &alpha in alphas {
        let eigs = linalg::dense_eigenvalues(&model.at(alpha));
        let (up, down) = theorem2_roots(lambda2, s, alpha);
        let mut worst = 0.0f64;
        for pred in [up, down] {
            let mut dists: Vec<f64> = eigs.iter().map(|e| (e - pred).norm()).collect();
            dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
            if dists.len() > 1 && (dists[1] - dists[0]).abs() < 1e-12 {
                ambiguous = true;
            }
            worst = worst.max(dists[0]);
        }
        deviations.push((alpha, worst));
    }
    Theorem2Report {
        deviations,
        matching_ambiguous: ambiguous,
    }
}

/// Weighted curvature-mismatch matrix
/// `R = sum_i (v^i u^i / v^T u) H^i H_star^{-1}` from real eigenvectors.
pub fn rmatrix(
    local_hessians: &[DMatrix<f64>],
    h_star: &DMatrix<f64>,
    u: &DVector<f64>,
    v: &DVector<f64>,
) -> Result<DMatrix<f64>, SpectralError> {
    let dot = v.dot(u);
    if dot.abs() < 1e-12 {
        return Err(SpectralError::DegenerateEigenvectors(dot.abs()));
    }
    let weights = DVector::from_iterator(
        u.len(),
        u.iter().zip(v.iter()).map(|(a, b)| a * b / dot),
    );
    rmatrix_weighted(local_hessians, h_star, &weights)
}

/// Same weighted sum with the per-node eigenvector products supplied
/// directly; used with the weights of a complex eigenvalue pair.
pub fn rmatrix_weighted(
    local_hessians: &[DMatrix<f64>],
    h_star: &DMatrix<f64>,
    weights: &DVector<f64>,
) -> Result<DMatrix<f64>, SpectralError> {
    let h_star_inv = invert_spd(h_star)?;
    let dim = h_star.nrows();
    let mut r = DMatrix::zeros(dim, dim);
    for (i, h) in local_hessians.iter().enumerate() {
        r += h * &h_star_inv * weights[i];
    }
    Ok(r)
}

/// First-order change of a generalized eigenvalue of `(A, B)` under a
/// perturbation of `A`: `y^T A~ x / (y^T B x)`.
pub fn geig_perturbation(
    a_tilde: &DMatrix<f64>,
    b: &DMatrix<f64>,
    x: &DVector<f64>,
    y: &DVector<f64>,
) -> Result<f64, SpectralError> {
    let denom = y.dot(&(b * x));
    if denom.abs() < 1e-12 {
        return Err(SpectralError::DegenerateEigenvectors(denom.abs()));
    }
    Ok(y.dot(&(a_tilde * x)) / denom)
}

/// Reduced local-rate model over (mean error, parameter mismatch, gradient
/// mismatch); the dynamics matrix is `theta - alpha * upsilon_unit`.
pub struct LocalRateModel {
    pub theta: DMatrix<f64>,
    pub upsilon_unit: DMatrix<f64>,
    pub node_count: usize,
    pub dim: usize,
}

impl LocalRateModel {
    pub fn at(&self, alpha: f64) -> DMatrix<f64> {
        &self.theta - &self.upsilon_unit * alpha
    }

    /// Spectral radius of the model at `alpha`; the theoretical local rate.
    pub fn rate(&self, alpha: f64) -> f64 {
        linalg::dense_eigenvalues(&self.at(alpha))
            .iter()
            .map(|z| z.norm())
            .fold(0.0f64, f64::max)
    }
}

/// Assembles the reduced model from the same data as [`build_gamma`].
pub fn build_local_rate_model(
    topo: &Topology,
    local_hessians: &[DMatrix<f64>],
    h_star: &DMatrix<f64>,
) -> Result<LocalRateModel, SpectralError> {
    let n = topo.node_count();
    if local_hessians.len() != n {
        return Err(SpectralError::HessianCount(local_hessians.len(), n));
    }
    let dim = h_star.nrows();
    let h_star_inv = invert_spd(h_star)?;
    let size = n * dim;
    let total = dim + 2 * size;

    let w = topo.weights();
    let mut w_tilde = w.clone();
    w_tilde.add_scalar_mut(-1.0 / n as f64);
    let wt_big = linalg::kron(&w_tilde, &DMatrix::identity(dim, dim));
    let mut hess_block = DMatrix::zeros(size, size);
    for i in 0..n {
        hess_block
            .view_mut((i * dim, i * dim), (dim, dim))
            .copy_from(&local_hessians[i]);
    }
    let h_inv_block = linalg::kron(&DMatrix::identity(n, n), &h_star_inv);
    let avg_big = linalg::kron(
        &DMatrix::from_element(n, n, 1.0 / n as f64),
        &DMatrix::identity(dim, dim),
    );
    let proj = DMatrix::identity(size, size) - &avg_big;

    // theta blocks
    let mut theta = DMatrix::zeros(total, total);
    theta
        .view_mut((0, 0), (dim, dim))
        .copy_from(&DMatrix::identity(dim, dim));
    theta
        .view_mut((dim, dim), (size, size))
        .copy_from(&wt_big);
    let coupling = &wt_big * &hess_block * (&wt_big - DMatrix::identity(size, size));
    theta
        .view_mut((dim + size, dim), (size, size))
        .copy_from(&coupling);
    theta
        .view_mut((dim + size, dim + size), (size, size))
        .copy_from(&wt_big);

    // upsilon blocks at unit step
    let mut upsilon = DMatrix::zeros(total, total);
    upsilon
        .view_mut((0, 0), (dim, dim))
        .copy_from(&DMatrix::identity(dim, dim));
    // row 1: mean-error coupling to the parameter mismatch
    let mut a_hess = DMatrix::zeros(dim, size);
    for i in 0..n {
        let block = &h_star_inv * &local_hessians[i] / n as f64;
        a_hess.view_mut((0, i * dim), (dim, dim)).copy_from(&block);
    }
    upsilon.view_mut((0, dim), (dim, size)).copy_from(&a_hess);
    // row 2: a uniform step through the mean-zero projector annihilates the
    // consensus column, so only the mismatch couplings remain
    let avg_hess = &avg_big * &hess_block;
    let block_22 = &proj * &h_inv_block * &avg_hess;
    upsilon
        .view_mut((dim, dim), (size, size))
        .copy_from(&block_22);
    let block_23 = &proj * &h_inv_block;
    upsilon
        .view_mut((dim, dim + size), (size, size))
        .copy_from(&block_23);
    // row 3: the gradient mismatch loses curvature-weighted step terms, so
    // the couplings enter the subtracted block positively
    let wt_hess = &wt_big * &hess_block;
    let ones_stack = linalg::kron(
        &DMatrix::from_element(n, 1, 1.0),
        &DMatrix::identity(dim, dim),
    );
    let block_31 = &wt_hess * &ones_stack;
    upsilon
        .view_mut((dim + size, 0), (size, dim))
        .copy_from(&block_31);
    let block_32 = &wt_hess * &h_inv_block * &avg_hess;
    upsilon
        .view_mut((dim + size, dim), (size, size))
        .copy_from(&block_32);
    let block_33 = &wt_hess * &h_inv_block;
    upsilon
        .view_mut((dim + size, dim + size), (size, size))
        .copy_from(&block_33);

    Ok(LocalRateModel {
        theta,
        upsilon_unit: upsilon,
        node_count: n,
        dim,
    })
}
