//! Step-size selection.
//!
//! Three mechanisms with increasing information requirements:
//!
//! 1. [`offline_alpha`]: network-only criterion. The step is chosen so that
//!    the eigenvalue moving up from the second network eigenvalue meets the
//!    Newton mode `1 - alpha`; for a real second eigenvalue this reduces to
//!    `alpha = 1 - sqrt(lambda2)`.
//! 2. [`adaptive_alpha`] with the [`RTracker`]: each node tracks the weighted
//!    curvature-mismatch matrix `R` by dynamic consensus, summarizes it by the
//!    midpoint of its extreme singular values, and re-solves the criterion
//!    with that scalar every round.
//! 3. [`schedule_alpha`] over [`StabilityConstants`]: a certified schedule
//!    that maintains an upper bound `chi` on the pair (mean-gradient norm,
//!    weighted mismatch norm) and picks the step minimizing the bound's next
//!    value subject to not increasing it.

use crate::consensus::DynamicTracker;
use crate::dnewton::{floor_hessian, EngineState};
use crate::linalg;
use crate::netgraph::{NetError, SpectralParams, Topology};
use crate::objectives::ObjectiveSet;
use crate::spectral::theorem2_roots;
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StepsizeError {
    #[error("second eigenvalue modulus {0} is not inside the unit disk")]
    Lambda2OutOfRange(f64),
    #[error("criterion residual does not change sign on (0, 1)")]
    NoRoot,
    #[error("R matrix is near-singular (condition estimate {0:.3e})")]
    NearSingularR(f64),
    #[error("midpoint scalar must be positive, got {0}")]
    BadS(f64),
    #[error("{0} must be positive, got {1}")]
    BadParam(&'static str, f64),
    #[error("weight matrix has clustered eigenvalues (min gap {0:.3e}); treated as defective")]
    DefectiveTopology(f64),
    #[error("Lyapunov solve failed: {0}")]
    Lyapunov(String),
    #[error(transparent)]
    Linalg(#[from] linalg::LinalgError),
    #[error(transparent)]
    Net(#[from] NetError),
}

/// Largest-modulus root of the step-size criterion at `alpha`, minus the
/// Newton mode `1 - alpha`.
fn criterion_residual(lambda2: Complex64, s: f64, alpha: f64) -> f64 {
    let (up, _) = theorem2_roots(lambda2, s, alpha);
    up.norm() - (1.0 - alpha)
}

fn solve_criterion(lambda2: Complex64, s: f64) -> Result<f64, StepsizeError> {
    let modulus = lambda2.norm();
    if modulus >= 1.0 {
        return Err(StepsizeError::Lambda2OutOfRange(modulus));
    }
    if modulus < 1e-12 {
        // the criterion degenerates: every mode is killed in one mixing
        // round and the pure Newton step remains
        return Ok(1.0);
    }
    const SCAN: usize = 2048;
    let mut lo = 0.0f64;
    let mut r_lo = criterion_residual(lambda2, s, lo);
    let mut hi = None;
    for k in 1..=SCAN {
        let a = k as f64 / SCAN as f64;
        let r = criterion_residual(lambda2, s, a);
        if r_lo <= 0.0 && r > 0.0 {
            hi = Some(a);
            break;
        }
        lo = a;
        r_lo = r;
    }
    let mut hi = hi.ok_or(StepsizeError::NoRoot)?;
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if criterion_residual(lambda2, s, mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let alpha = 0.5 * (lo + hi);
    if criterion_residual(lambda2, s, alpha).abs() > 1e-12 {
        return Err(StepsizeError::NoRoot);
    }
    Ok(alpha)
}

/// Offline criterion with the curvature scalar fixed at `s = 1`.
///
/// For a real nonnegative second eigenvalue the closed form
/// `1 - sqrt(lambda2)` is returned directly.
pub fn offline_alpha(lambda2: Complex64) -> Result<f64, StepsizeError> {
    let modulus = lambda2.norm();
    if modulus >= 1.0 {
        return Err(StepsizeError::Lambda2OutOfRange(modulus));
    }
    if modulus < 1e-12 {
        return Ok(1.0);
    }
    if lambda2.im == 0.0 && lambda2.re >= 0.0 {
        return Ok(1.0 - lambda2.re.sqrt());
    }
    solve_criterion(lambda2, 1.0)
}

/// Criterion with a node's current curvature scalar.
pub fn adaptive_alpha(lambda2: Complex64, s: f64) -> Result<f64, StepsizeError> {
    if !(s > 0.0) || !s.is_finite() {
        return Err(StepsizeError::BadS(s));
    }
    let modulus = lambda2.norm();
    if modulus >= 1.0 {
        return Err(StepsizeError::Lambda2OutOfRange(modulus));
    }
    if modulus < 1e-12 {
        return Ok(1.0);
    }
    solve_criterion(lambda2, s)
}

/// Midpoint of the extreme singular values of `R`.
pub fn s_estimate(r: &DMatrix<f64>) -> Result<f64, StepsizeError> {
    if r.iter().any(|v| !v.is_finite()) {
        return Err(StepsizeError::NearSingularR(f64::INFINITY));
    }
    let (smax, smin) = linalg::singular_extremes(r)?;
    if smin <= 0.0 || smax / smin > 1e12 {
        return Err(StepsizeError::NearSingularR(if smin > 0.0 {
            smax / smin
        } else {
            f64::INFINITY
        }));
    }
    Ok(0.5 * (smax + smin))
}

/// Distributed tracker of the curvature-mismatch matrix `R`.
///
/// Every node runs dynamic consensus on the inputs
/// `I * (v^i u^i / v^T u) * hess f^i(x_k^i) * B(H_k^i)^{-1}`, initialized at
/// the identity. The scaling by the node count makes the network average of
/// the inputs equal the target matrix, so the per-node estimates converge to
/// it and the average of the estimates matches the average input exactly at
/// every round.
pub struct RTracker {
    tracker: DynamicTracker<DMatrix<f64>>,
    scaled_weights: DVector<f64>,
}

impl RTracker {
    /// Tracker at round 1: estimates are the identity, inputs are taken at
    /// the initial state.
    pub fn init(
        topo: &Topology,
        sp: &SpectralParams,
        state: &EngineState,
        beta: f64,
    ) -> Result<Self, StepsizeError> {
        let n = topo.node_count();
        let dim = state.xs[0].len();
        let scaled_weights = sp.node_weights()? * n as f64;
        let inputs = r_inputs(state, beta, &scaled_weights)?;
        let estimates = vec![DMatrix::identity(dim, dim); n];
        Ok(Self {
            tracker: DynamicTracker::with_estimates(estimates, inputs),
            scaled_weights,
        })
    }

    /// One dynamic-consensus round driven by the freshly updated state.
    pub fn step(
        &mut self,
        topo: &Topology,
        state: &EngineState,
        beta: f64,
    ) -> Result<(), StepsizeError> {
        let inputs = r_inputs(state, beta, &self.scaled_weights)?;
        self.tracker
            .step(topo, inputs)
            .map_err(|e| StepsizeError::Lyapunov(e.to_string()))?;
        Ok(())
    }

    pub fn estimates(&self) -> &[DMatrix<f64>] {
        &self.tracker.estimates
    }

    pub fn last_inputs(&self) -> &[DMatrix<f64>] {
        &self.tracker.last_inputs
    }
}

/// Per-node tracker inputs at the current state. The raw Hessian estimate may
/// be indefinite far from convergence, so its floored version supplies the
/// inverse.
fn r_inputs(
    state: &EngineState,
    beta: f64,
    scaled_weights: &DVector<f64>,
) -> Result<Vec<DMatrix<f64>>, StepsizeError> {
    let n = state.xs.len();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let floored = floor_hessian(&state.hs[i], beta)
            .map_err(|e| StepsizeError::Lyapunov(e.to_string()))?;
        out.push(&state.hessians[i] * floored.inverse() * scaled_weights[i]);
    }
    Ok(out)
}

/// The constant bundle behind the certified schedule.
///
/// `e` is the operator norm of `P^{-1}` as displayed in the source analysis;
/// the certificate recursion instead contracts with `e_dec = 1 / ||P||`,
/// which is the largest constant for which
/// `theta^T (P - I) theta <= (1 - e_dec) theta^T P theta` holds for every
/// nonnegative mismatch triple.
pub struct StabilityConstants {
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
    pub tau: f64,
    pub sigma_c: f64,
    pub eta: f64,
    pub upsilon: f64,
    /// Modulus of the second eigenvalue.
    pub lambda2: f64,
    pub mu: DVector<f64>,
    pub nu: DVector<f64>,
    pub psi: DVector<f64>,
    pub omega: DMatrix<f64>,
    pub phi: DMatrix<f64>,
    pub psi_mat: DMatrix<f64>,
    pub p: DMatrix<f64>,
    pub p_inv: DMatrix<f64>,
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
    pub e: f64,
    pub e_dec: f64,
    pub h: f64,
    /// Similarity transform of the weight matrix; rows are left eigenvectors.
    t: DMatrix<Complex64>,
    f_grid: Vec<f64>,
    g_grid: Vec<f64>,
}

/// Grid resolution of the schedule search.
pub const SCHEDULE_GRID: usize = 1000;

impl StabilityConstants {
    /// `f(alpha) = || Psi^T P (2 Phi + alpha Psi) P^{-1} ||`.
    pub fn f_of_alpha(&self, alpha: f64) -> f64 {
        let m = self.psi_mat.transpose()
            * &self.p
            * (&self.phi * 2.0 + &self.psi_mat * alpha)
            * &self.p_inv;
        linalg::operator_norm(&m)
    }

    /// `g(alpha) = 2 | psi^T P (Phi + alpha Psi) P^{-1} (Phi + alpha Psi)^T P psi |`.
    pub fn g_of_alpha(&self, alpha: f64) -> f64 {
        let m = (&self.phi + &self.psi_mat * alpha).transpose() * &self.p * &self.psi;
        2.0 * (m.dot(&(&self.p_inv * &m))).abs()
    }

    fn f_cached(&self, idx: usize) -> f64 {
        self.f_grid[idx]
    }

    fn g_cached(&self, idx: usize) -> f64 {
        self.g_grid[idx]
    }

    /// Mismatch triple `(||T x~||, ||T g~||, ||T h~||_F)` of stacked
    /// deviations, with `T` acting blockwise.
    pub fn theta(
        &self,
        x_tilde: &[DVector<f64>],
        g_tilde: &[DVector<f64>],
        h_tilde: &[DMatrix<f64>],
    ) -> [f64; 3] {
        [
            self.t_block_norm_vec(x_tilde),
            self.t_block_norm_vec(g_tilde),
            self.t_block_norm_mat(h_tilde),
        ]
    }

    fn t_block_norm_vec(&self, stack: &[DVector<f64>]) -> f64 {
        let n = stack.len();
        let dim = stack[0].len();
        let mut total = 0.0;
        for a in 0..n {
            for k in 0..dim {
                let mut acc = Complex64::new(0.0, 0.0);
                for j in 0..n {
                    acc += self.t[(a, j)] * stack[j][k];
                }
                total += acc.norm_sqr();
            }
        }
        total.sqrt()
    }

    fn t_block_norm_mat(&self, stack: &[DMatrix<f64>]) -> f64 {
        let n = stack.len();
        let (r, c) = stack[0].shape();
        let mut total = 0.0;
        for a in 0..n {
            for p in 0..r {
                for q in 0..c {
                    let mut acc = Complex64::new(0.0, 0.0);
                    for j in 0..n {
                        acc += self.t[(a, j)] * stack[j][(p, q)];
                    }
                    total += acc.norm_sqr();
                }
            }
        }
        total.sqrt()
    }

    /// `sqrt(theta^T P theta)`.
    pub fn p_norm(&self, theta: [f64; 3]) -> f64 {
        let th = DVector::from_row_slice(&theta);
        th.dot(&(&self.p * &th)).max(0.0).sqrt()
    }

    /// Residual of the discrete Lyapunov identity `Phi^T P Phi = P - I`.
    pub fn lyapunov_residual(&self) -> f64 {
        let lhs = self.phi.transpose() * &self.p * &self.phi;
        let rhs = &self.p - DMatrix::identity(3, 3);
        linalg::operator_norm(&(lhs - rhs))
    }
}

/// Assembles the constant bundle for a topology and regularity constants.
///
/// `gamma` bounds the local Hessian norms, `delta` their Lipschitz modulus
/// (zero for quadratics), and `beta` the inverse of the global Hessian.
pub fn compute_constants(
    topo: &Topology,
    beta: f64,
    gamma: f64,
    delta: f64,
) -> Result<StabilityConstants, StepsizeError> {
    if !(beta > 0.0) {
        return Err(StepsizeError::BadParam("beta", beta));
    }
    if gamma < 0.0 {
        return Err(StepsizeError::BadParam("gamma", gamma));
    }
    if delta < 0.0 {
        return Err(StepsizeError::BadParam("delta", delta));
    }
    let n = topo.node_count();
    let w = topo.weights();

    // similarity transform from the eigendecomposition
    let (t, t_inv, lambda2) = if topo.is_symmetric() {
        let (lam, vecs) = linalg::jacobi_eigen(w)?;
        let mut perron = 0;
        for k in 0..n {
            if (lam[k] - 1.0).abs() < (lam[perron] - 1.0).abs() {
                perron = k;
            }
        }
        let l2 = (0..n)
            .filter(|&k| k != perron)
            .map(|k| lam[k].abs())
            .fold(0.0f64, f64::max);
        let t = vecs.transpose().map(|x| Complex64::new(x, 0.0));
        let t_inv = vecs.map(|x| Complex64::new(x, 0.0));
        (t, t_inv, l2)
    } else if let Some(shifts) = topo.circulant_shifts() {
        // circulant: the unitary Fourier basis diagonalizes it exactly, even
        // with repeated eigenvalues
        let root = 2.0 * std::f64::consts::PI / n as f64;
        let scale = 1.0 / (n as f64).sqrt();
        let fourier = DMatrix::<Complex64>::from_fn(n, n, |j, k| {
            Complex64::from_polar(scale, root * (j * k) as f64)
        });
        let t = fourier.adjoint();
        let eig_of = |k: usize| -> Complex64 {
            let mut acc = Complex64::new(0.0, 0.0);
            for (m, &c) in shifts.iter().enumerate() {
                acc += c * Complex64::from_polar(1.0, root * (k * m) as f64);
            }
            acc
        };
        let l2 = (1..n).map(|k| eig_of(k).norm()).fold(0.0f64, f64::max);
        (t, fourier, l2)
    } else {
        let eigs = linalg::dense_eigenvalues(w);
        let mut min_gap = f64::INFINITY;
        for i in 0..n {
            for j in (i + 1)..n {
                min_gap = min_gap.min((eigs[i] - eigs[j]).norm());
            }
        }
        if min_gap < 1e-8 {
            return Err(StepsizeError::DefectiveTopology(min_gap));
        }
        let mut s = DMatrix::<Complex64>::zeros(n, n);
        for (k, &lam) in eigs.iter().enumerate() {
            let vec = linalg::complex_eigenvector(w, lam)?;
            s.set_column(k, &vec);
        }
        let t = s
            .clone()
            .lu()
            .try_inverse()
            .ok_or_else(|| StepsizeError::Lyapunov("eigenvector matrix not invertible".into()))?;
        let mut perron = 0;
        for k in 0..n {
            if (eigs[k] - Complex64::new(1.0, 0.0)).norm()
                < (eigs[perron] - Complex64::new(1.0, 0.0)).norm()
            {
                perron = k;
            }
        }
        let l2 = (0..n)
            .filter(|&k| k != perron)
            .map(|k| eigs[k].norm())
            .fold(0.0f64, f64::max);
        (t, s, l2)
    };
    if lambda2 >= 1.0 - 1e-12 {
        return Err(StepsizeError::Lambda2OutOfRange(lambda2));
    }

    let tau = linalg::complex_operator_norm(&t);
    let sigma_c = linalg::complex_operator_norm(&t_inv);
    let eta = linalg::operator_norm(&(DMatrix::identity(n, n) - w));
    let upsilon = linalg::operator_norm(&(-topo.deflated()));

    let mu = DVector::from_row_slice(&[sigma_c * gamma, sigma_c, 0.0]);
    let nu = DVector::from_row_slice(&[
        sigma_c * beta * delta * (beta * gamma + 1.0),
        0.0,
        sigma_c * beta,
    ]);
    let psi = DVector::from_row_slice(&[
        beta * tau,
        beta * gamma * tau * upsilon,
        beta * delta * tau * upsilon,
    ]);
    let s2 = sigma_c * sigma_c / 2.0;
    let omega = DMatrix::from_row_slice(
        3,
        3,
        &[
            beta * gamma * delta * (beta * gamma + 2.0),
            beta * delta,
            beta * gamma,
            beta * delta,
            beta * beta * delta,
            beta,
            beta * gamma,
            beta,
            0.0,
        ],
    ) * s2;
    let phi = DMatrix::from_row_slice(
        3,
        3,
        &[
            lambda2,
            0.0,
            0.0,
            gamma * tau * eta * upsilon,
            lambda2,
            0.0,
            delta * tau * eta * upsilon,
            0.0,
            lambda2,
        ],
    );
    let psi_mat = DMatrix::from_row_slice(
        3,
        3,
        &[
            beta * gamma * tau,
            beta * tau,
            0.0,
            beta * gamma * gamma * tau * upsilon,
            beta * gamma * tau * upsilon,
            0.0,
            beta * gamma * delta * tau * upsilon,
            beta * delta * tau * upsilon,
            0.0,
        ],
    );

    // discrete Lyapunov equation solved by vectorization
    let phik = linalg::kron(&phi.transpose(), &phi.transpose());
    let lhs = DMatrix::identity(9, 9) - phik;
    let rhs = DVector::from_iterator(9, DMatrix::identity(3, 3).iter().copied());
    let vec_p = lhs
        .lu()
        .solve(&rhs)
        .ok_or_else(|| StepsizeError::Lyapunov("singular vectorized system".into()))?;
    let mut p = DMatrix::from_iterator(3, 3, vec_p.iter().copied());
    p = (&p + p.transpose()) * 0.5;
    let p_inv = p
        .clone()
        .lu()
        .try_inverse()
        .ok_or_else(|| StepsizeError::Lyapunov("P not invertible".into()))?;

    let (p_eigs, p_vecs) = linalg::jacobi_eigen_sorted(&p)?;
    let p_max = p_eigs[0];
    let p_min = p_eigs[2];
    if p_min <= 0.0 {
        return Err(StepsizeError::Lyapunov(format!(
            "P not positive definite (min eigenvalue {p_min})"
        )));
    }
    // P^{-1/2} for the quadratic-form constant d
    let inv_sqrt = DVector::from_iterator(3, p_eigs.iter().map(|&l| 1.0 / l.sqrt()));
    let p_inv_sqrt = &p_vecs * DMatrix::from_diagonal(&inv_sqrt) * p_vecs.transpose();
    let congruence = &p_inv_sqrt * &omega * &p_inv_sqrt;
    let sym = (&congruence + congruence.transpose()) * 0.5;
    let (cg_eigs, _) = linalg::jacobi_eigen_sorted(&sym)?;
    let d = cg_eigs[0].max(0.0);

    let a = mu.dot(&(&p_inv * &mu));
    let b = beta * beta * delta / 2.0;
    let c = nu.dot(&(&p_inv * &nu));
    let e = 1.0 / p_min;
    let e_dec = 1.0 / p_max;
    let h = psi.dot(&(&p * &psi));

    let mut constants = StabilityConstants {
        beta,
        gamma,
        delta,
        tau,
        sigma_c,
        eta,
        upsilon,
        lambda2,
        mu,
        nu,
        psi,
        omega,
        phi,
        psi_mat,
        p,
        p_inv,
        a,
        b,
        c,
        d,
        e,
        e_dec,
        h,
        t,
        f_grid: Vec::new(),
        g_grid: Vec::new(),
    };
    let mut f_grid = Vec::with_capacity(SCHEDULE_GRID + 1);
    let mut g_grid = Vec::with_capacity(SCHEDULE_GRID + 1);
    for k in 0..=SCHEDULE_GRID {
        let alpha = k as f64 / SCHEDULE_GRID as f64;
        f_grid.push(constants.f_of_alpha(alpha));
        g_grid.push(constants.g_of_alpha(alpha));
    }
    constants.f_grid = f_grid;
    constants.g_grid = g_grid;
    Ok(constants)
}

/// One application of the certificate map. Returns the next bound pair and
/// whether the second component's radicand had to be clamped at zero.
pub fn f_map(constants: &StabilityConstants, chi: [f64; 2], alpha: f64) -> ([f64; 2], bool) {
    f_map_inner(
        constants,
        chi,
        alpha,
        constants.f_of_alpha(alpha),
        constants.g_of_alpha(alpha),
    )
}

fn f_map_inner(
    constants: &StabilityConstants,
    chi: [f64; 2],
    alpha: f64,
    f_alpha: f64,
    g_alpha: f64,
) -> ([f64; 2], bool) {
    let [x1, x2] = chi;
    let y1 = (1.0 - alpha) * x1
        + alpha * constants.a * x2
        + alpha * alpha * constants.b * x1 * x1
        + alpha * constants.c * x1 * x2
        + alpha * constants.d * x2 * x2;
    let radicand = (1.0 - constants.e_dec + alpha * f_alpha) * x2 * x2
        + alpha * g_alpha * x2 * x1
        + alpha * alpha * constants.h * x1 * x1;
    let clamped = radicand < 0.0;
    let y2 = radicand.max(0.0).sqrt();
    ([y1, y2], clamped)
}

/// Feasibility of a candidate step: the mapped bound must not exceed the
/// current one componentwise. A zero mismatch bound waives its own
/// constraint, since there is nothing left for a consensus round to shrink.
fn feasible(chi: [f64; 2], y: [f64; 2]) -> bool {
    y[0] <= chi[0] && (chi[1] == 0.0 || y[1] <= chi[1])
}

fn objective(chi: [f64; 2], y: [f64; 2]) -> f64 {
    if chi[1] == 0.0 {
        y[0].abs()
    } else {
        y[0].hypot(y[1])
    }
}

/// Constrained minimizer of the certificate map: grid search at resolution
/// `1/SCHEDULE_GRID` refined by golden section to 1e-6. Returns 0 when no
/// positive step is feasible, which is always allowed.
pub fn schedule_alpha(constants: &StabilityConstants, chi: [f64; 2]) -> f64 {
    let mut best_alpha = 0.0;
    let (y0, _) = f_map_inner(
        constants,
        chi,
        0.0,
        constants.f_cached(0),
        constants.g_cached(0),
    );
    let mut best_obj = objective(chi, y0);
    for k in 1..=SCHEDULE_GRID {
        let alpha = k as f64 / SCHEDULE_GRID as f64;
        let (y, _) = f_map_inner(
            constants,
            chi,
            alpha,
            constants.f_cached(k),
            constants.g_cached(k),
        );
        if feasible(chi, y) {
            let obj = objective(chi, y);
            if obj < best_obj {
                best_obj = obj;
                best_alpha = alpha;
            }
        }
    }

    // golden-section refinement around the best grid point
    let step = 1.0 / SCHEDULE_GRID as f64;
    let mut lo = (best_alpha - step).max(0.0);
    let mut hi = (best_alpha + step).min(1.0);
    let eval = |alpha: f64| -> f64 {
        let (y, _) = f_map(constants, chi, alpha);
        if feasible(chi, y) {
            objective(chi, y)
        } else {
            f64::INFINITY
        }
    };
    let phi_ratio = 0.5 * (5.0f64.sqrt() - 1.0);
    let mut c = hi - phi_ratio * (hi - lo);
    let mut d = lo + phi_ratio * (hi - lo);
    let mut fc = eval(c);
    let mut fd = eval(d);
    while hi - lo > 1e-6 {
        if fc <= fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - phi_ratio * (hi - lo);
            fc = eval(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + phi_ratio * (hi - lo);
            fd = eval(d);
        }
    }
    let refined = 0.5 * (lo + hi);
    let obj_refined = eval(refined);
    if obj_refined < best_obj {
        refined
    } else {
        best_alpha
    }
}

/// Runs the Proposed variant under the certified schedule and returns the
/// outcome together with the constants used.
#[allow(clippy::too_many_arguments)]
pub fn global_run(
    topo: &Topology,
    objs: &ObjectiveSet,
    beta: f64,
    gamma: f64,
    delta: f64,
    x_init: &[DVector<f64>],
    x_star: &DVector<f64>,
    rounds: usize,
) -> Result<(crate::dnewton::RunOutcome, StabilityConstants), crate::dnewton::DnewtonError> {
    let constants = compute_constants(topo, beta, gamma, delta)?;
    let cfg = crate::dnewton::RunConfig::new(
        crate::dnewton::AlgorithmVariant::Proposed,
        topo,
        objs,
        beta,
        rounds,
        x_init,
        x_star,
        crate::dnewton::StepMode::Global(&constants),
    );
    let outcome = crate::dnewton::run(&cfg)?;
    Ok((outcome, constants))
}

/// Samples Hessians over a box to propose `(beta, gamma, delta)`.
///
/// The values are reported for the operator to inspect; they are never fed
/// into a run implicitly.
pub fn propose_constants(
    objs: &ObjectiveSet,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
    samples: usize,
    seed: u64,
) -> Result<(f64, f64, f64), StepsizeError> {
    let mut rng = crate::rng::PortableRng::new(seed, 101);
    let dim = objs.dimension();
    let draw = |rng: &mut crate::rng::PortableRng| {
        DVector::from_iterator(
            dim,
            (0..dim).map(|k| lo[k] + (hi[k] - lo[k]) * rng.uniform_oc()),
        )
    };
    let mut gamma: f64 = 0.0;
    let mut delta: f64 = 0.0;
    let mut beta: f64 = 0.0;
    let mut prev: Option<(DVector<f64>, Vec<DMatrix<f64>>)> = None;
    for _ in 0..samples {
        let x = draw(&mut rng);
        let hessians: Vec<DMatrix<f64>> =
            (0..objs.node_count()).map(|i| objs.local(i).hessian(&x)).collect();
        for h in &hessians {
            gamma = gamma.max(linalg::operator_norm(h));
        }
        let (_, _, global_h) = objs.global_aggregate(&x);
        let (_, smin) = linalg::singular_extremes(&global_h)?;
        if smin > 0.0 {
            beta = beta.max(1.0 / smin);
        }
        if let Some((px, phs)) = &prev {
            let dist = (&x - px).norm();
            if dist > 1e-9 {
                for (h, ph) in hessians.iter().zip(phs) {
                    let diff = h - ph;
                    let frob = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
                    delta = delta.max(frob / dist);
                }
            }
        }
        prev = Some((x, hessians));
    }
    Ok((beta, gamma, delta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netgraph::spectral_params;

    #[test]
    fn offline_closed_form() {
        let a = offline_alpha(Complex64::new(0.81, 0.0)).unwrap();
        assert!((a - 0.1).abs() < 1e-15, "alpha {a}");
    }

    #[test]
    fn offline_reported_ring_value() {
        // real eigenvalue 0.9838 gives 1 - sqrt(0.9838)
        let a = offline_alpha(Complex64::new(0.9838, 0.0)).unwrap();
        assert!((a - 8.13e-3).abs() < 5e-5, "alpha {a}");
        // substitute back: the moving-up root must meet 1 - alpha
        let (up, _) = theorem2_roots(Complex64::new(0.9838, 0.0), 1.0, a);
        assert!((up.norm() - (1.0 - a)).abs() <= 1e-12);
    }

    #[test]
    fn offline_degenerate_lambda2() {
        assert_eq!(offline_alpha(Complex64::new(0.0, 0.0)).unwrap(), 1.0);
        assert!(offline_alpha(Complex64::new(1.0, 0.0)).is_err());
    }

    #[test]
    fn adaptive_reduces_to_offline_at_unit_s() {
        for k in 1..100 {
            let l2 = Complex64::new(k as f64 / 100.0, 0.0);
            let off = offline_alpha(l2).unwrap();
            let ad = adaptive_alpha(l2, 1.0).unwrap();
            assert!((off - ad).abs() < 1e-10, "lambda2 {l2}: {off} vs {ad}");
        }
    }

    #[test]
    fn adaptive_complex_residual() {
        let topo = Topology::build_ring(30, 0.7, 0.15, 0.15).unwrap();
        let sp = spectral_params(&topo).unwrap();
        for s in [0.7, 1.0, 1.4] {
            let a = adaptive_alpha(sp.lambda2, s).unwrap();
            assert!(a > 0.0 && a < 1.0);
            let (up, _) = theorem2_roots(sp.lambda2, s, a);
            assert!((up.norm() - (1.0 - a)).abs() <= 1e-12, "s {s}");
        }
    }

    #[test]
    fn adaptive_near_boundary_s() {
        // s close to 1/lambda2 keeps a root inside (0, 1)
        let l2 = Complex64::new(0.9, 0.0);
        let s = 1.0 / 0.9 - 1e-3;
        let a = adaptive_alpha(l2, s).unwrap();
        assert!(a > 0.0 && a < 1.0);
        let (up, _) = theorem2_roots(l2, s, a);
        assert!((up.norm() - (1.0 - a)).abs() <= 1e-12);
    }

    #[test]
    fn s_estimate_cases() {
        assert!((s_estimate(&DMatrix::identity(3, 3)).unwrap() - 1.0).abs() < 1e-14);
        let r = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 0.5]));
        assert!((s_estimate(&r).unwrap() - 1.25).abs() < 1e-12);
        let sing = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.0]));
        assert!(matches!(
            s_estimate(&sing),
            Err(StepsizeError::NearSingularR(_))
        ));
    }

    #[test]
    fn s_estimate_matches_decomposition_on_spd() {
        let mut rng = crate::rng::PortableRng::new(3, 71);
        for _ in 0..10 {
            let m = DMatrix::from_fn(3, 3, |_, _| rng.uniform_symmetric());
            let spd = &m * m.transpose() + DMatrix::identity(3, 3) * 0.5;
            let (lam, _) = linalg::jacobi_eigen_sorted(&spd).unwrap();
            let expected = 0.5 * (lam[0] + lam[2]);
            assert!((s_estimate(&spd).unwrap() - expected).abs() < 1e-10);
        }
    }

    #[test]
    fn lyapunov_scalar_case() {
        // symmetric 4-ring has lambda2 = 1/2 exactly; with gamma = delta = 0
        // the equation decouples into p - p/4 = 1
        let topo = Topology::symmetric_ring(4, 0.5, 0.25).unwrap();
        let c = compute_constants(&topo, 1.0, 0.0, 0.0).unwrap();
        assert!((c.lambda2 - 0.5).abs() < 1e-12);
        let expected = DMatrix::identity(3, 3) * (4.0 / 3.0);
        assert!((&c.p - expected).amax() < 1e-12);
        assert!((c.e - 0.75).abs() < 1e-12);
        assert!((c.e_dec - 0.75).abs() < 1e-12);
        assert!(c.lyapunov_residual() <= 1e-10);
    }

    #[test]
    fn delta_zero_degenerate_constants() {
        let topo = Topology::build_ring(12, 0.7, 0.15, 0.15).unwrap();
        let (beta, gamma) = (1.5, 2.0);
        let c = compute_constants(&topo, beta, gamma, 0.0).unwrap();
        assert_eq!(c.b, 0.0);
        assert!((c.nu[0]).abs() < 1e-15);
        assert!((c.nu[1]).abs() < 1e-15);
        assert!((c.nu[2] - c.sigma_c * beta).abs() < 1e-12);
        // delta factors kill the upper-left block of Omega
        assert!(c.omega[(0, 0)].abs() < 1e-15);
        assert!(c.omega[(0, 1)].abs() < 1e-15);
        assert!(c.omega[(1, 1)].abs() < 1e-15);
        assert!(c.lyapunov_residual() <= 1e-10);
        assert!(c.e <= 1.0 + 1e-12);
        // P is at least the identity
        let (p_eigs, _) = linalg::jacobi_eigen_sorted(&c.p).unwrap();
        assert!(p_eigs[2] >= 1.0 - 1e-10);
    }

    #[test]
    fn paper_ring_constants_residual() {
        let topo = Topology::build_ring(30, 0.7, 0.15, 0.15).unwrap();
        let c = compute_constants(&topo, 0.1, 3000.0, 300.0).unwrap();
        assert!(c.lyapunov_residual() <= 1e-10, "{}", c.lyapunov_residual());
        assert!(c.e <= 1.0 + 1e-12);
        assert!(c.e_dec > 0.0 && c.e_dec <= c.e);
        // circulant eigenvector matrices are unitary up to rounding
        assert!((c.tau - 1.0).abs() < 1e-6, "tau {}", c.tau);
        assert!((c.sigma_c - 1.0).abs() < 1e-6, "sigma_c {}", c.sigma_c);
        assert!((c.upsilon - c.lambda2).abs() < 1e-8);
    }

    #[test]
    fn f_map_structure() {
        let topo = Topology::symmetric_ring(6, 0.5, 0.25).unwrap();
        let c = compute_constants(&topo, 1.2, 1.0, 0.0).unwrap();
        // alpha = 0: first component unchanged, second contracts
        let ([y1, y2], clamped) = f_map(&c, [0.3, 0.7], 0.0);
        assert_eq!(y1, 0.3);
        assert!(!clamped);
        assert!((y2 - 0.7 * (1.0 - c.e_dec).sqrt()).abs() < 1e-12);
        assert!(y2 < 0.7);
        // fixed point at the origin
        let ([z1, z2], _) = f_map(&c, [0.0, 0.0], 0.5);
        assert_eq!(z1, 0.0);
        assert_eq!(z2, 0.0);
    }

    #[test]
    fn f_map_monotone_in_chi() {
        let topo = Topology::symmetric_ring(6, 0.5, 0.25).unwrap();
        let c = compute_constants(&topo, 1.2, 1.0, 0.1).unwrap();
        for &alpha in &[0.0, 0.2, 0.7, 1.0] {
            let mut prev = [-1.0, -1.0];
            for step in 0..5 {
                let t = step as f64 * 0.2;
                let (y, _) = f_map(&c, [t, 2.0 * t], alpha);
                assert!(y[0] >= prev[0] - 1e-12 && y[1] >= prev[1] - 1e-12);
                prev = y;
            }
        }
    }

    #[test]
    fn schedule_zero_gradient_chi_matches_grid_oracle() {
        let topo = Topology::symmetric_ring(6, 0.5, 0.25).unwrap();
        let c = compute_constants(&topo, 1.2, 1.0, 0.0).unwrap();
        let chi = [0.0, 0.5];
        let got = schedule_alpha(&c, chi);
        // dense oracle at resolution 1e-5
        let mut best = (f64::INFINITY, 0.0);
        for k in 0..=100_000 {
            let alpha = k as f64 / 100_000.0;
            let (y, _) = f_map(&c, chi, alpha);
            if feasible(chi, y) {
                let obj = objective(chi, y);
                if obj < best.0 {
                    best = (obj, alpha);
                }
            }
        }
        let (y_got, _) = f_map(&c, chi, got);
        assert!(feasible(chi, y_got));
        assert!(
            objective(chi, y_got) <= best.0 + 1e-10,
            "solver {} vs oracle {}",
            objective(chi, y_got),
            best.0
        );
        // with x1 = 0 any positive step makes y1 positive: only 0 is feasible
        assert_eq!(got, 0.0);
        assert_eq!(best.1, 0.0);
    }

    #[test]
    fn schedule_zero_mismatch_chi() {
        let topo = Topology::symmetric_ring(6, 0.5, 0.25).unwrap();
        // delta = 0 gives b = 0: the gradient bound contracts fastest at 1
        let c = compute_constants(&topo, 1.2, 1.0, 0.0).unwrap();
        assert_eq!(c.b, 0.0);
        let alpha = schedule_alpha(&c, [1e-3, 0.0]);
        assert!((alpha - 1.0).abs() < 1e-9, "alpha {alpha}");

        // small positive b keeps the minimizer at 1 while b * t < 1
        let c2 = compute_constants(&topo, 1.2, 1.0, 0.05).unwrap();
        assert!(c2.b > 0.0);
        let t = 1e-3;
        assert!(c2.b * t < 0.5);
        let alpha2 = schedule_alpha(&c2, [t, 0.0]);
        assert!((alpha2 - 1.0).abs() < 1e-9, "alpha {alpha2}");
    }

    #[test]
    fn schedule_large_mismatch_returns_zero() {
        let topo = Topology::symmetric_ring(6, 0.5, 0.25).unwrap();
        let c = compute_constants(&topo, 1.2, 1.0, 0.0).unwrap();
        let alpha = schedule_alpha(&c, [1e-6, 1e3]);
        assert_eq!(alpha, 0.0);
    }

    #[test]
    fn proposed_constants_sampler() {
        let inst = crate::objectives::LocalizationInstance::generate(
            8,
            DVector::from_vec(vec![0.0, 0.0]),
            0.01,
            2,
        );
        let objs = inst.objective_set();
        let lo = DVector::from_vec(vec![-1.0, -1.0]);
        let hi = DVector::from_vec(vec![1.0, 1.0]);
        let (beta, gamma, delta) = propose_constants(&objs, &lo, &hi, 50, 7).unwrap();
        assert!(beta > 0.0 && gamma > 0.0 && delta > 0.0);
    }
}
