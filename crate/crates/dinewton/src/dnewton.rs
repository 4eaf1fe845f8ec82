//! The distributed Newton-type algorithms and the synchronous round engine.
//!
//! Four variants share the same gradient/Hessian tracking layer and differ in
//! the parameter update:
//!
//! ```text
//! Proposed   x_i <- sum_j w[i][j] x_j - alpha_i B(H_i)^{-1} g_i
//! AlgA       x_i <- x_i             - alpha_i B(H_i)^{-1} g_i
//! AlgB       x_i <- (1 - alpha_i) sum_j w[i][j] x_j + alpha_i B(H_i)^{-1} l_i
//! VZCPS      x_i <- (1 - alpha_i) x_i               + alpha_i B(H_i)^{-1} l_i
//! ```
//!
//! where `g_i`, `H_i`, `l_i` are dynamic-consensus estimates of the average
//! gradient, Hessian, and `l(x) = hess(x) x - grad(x)` signals, and `B` floors
//! the Hessian spectrum at `1/beta` to keep the Newton direction well defined.
//!
//! Within a round all parameter updates read round-k data; the tracking
//! updates then consume both the new and the old iterates.

use crate::consensus::{self, DynamicTracker};
use crate::linalg;
use crate::netgraph::{SpectralParams, Topology};
use crate::objectives::ObjectiveSet;
use crate::stepsize::{self, StabilityConstants};
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Iterate norm beyond which a run is declared divergent.
pub const DEFAULT_DIVERGENCE_THRESHOLD: f64 = 1e12;
/// Consensus-residual level reported as "not reaching consensus".
pub const DEFAULT_CONSENSUS_FLOOR: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum DnewtonError {
    #[error("beta must be positive, got {0}")]
    BadBeta(f64),
    #[error(transparent)]
    Linalg(#[from] linalg::LinalgError),
    #[error(transparent)]
    Consensus(#[from] consensus::ConsensusError),
    #[error(transparent)]
    Stepsize(#[from] stepsize::StepsizeError),
    #[error("the globally scheduled step size is defined only for the Proposed variant")]
    GlobalRequiresProposed,
    #[error("step mode needs spectral parameters of the topology")]
    MissingSpectralParams,
    #[error("{0} initial states supplied for {1} nodes")]
    BadInitCount(usize, usize),
}

/// Which parameter update the engine runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlgorithmVariant {
    Proposed,
    AlgA,
    AlgB,
    Vzcps,
}

impl AlgorithmVariant {
    pub fn uses_ell_tracker(self) -> bool {
        matches!(self, AlgorithmVariant::AlgB | AlgorithmVariant::Vzcps)
    }

    pub fn name(self) -> &'static str {
        match self {
            AlgorithmVariant::Proposed => "proposed",
            AlgorithmVariant::AlgA => "alg-a",
            AlgorithmVariant::AlgB => "alg-b",
            AlgorithmVariant::Vzcps => "vzcps",
        }
    }
}

/// Spectral floor of a symmetric matrix: eigenvalues below `1/beta` are
/// raised to `1/beta`, eigenvectors are kept.
#[derive(Debug, Clone)]
pub struct FlooredHessian {
    eigvecs: DMatrix<f64>,
    eigvals: DVector<f64>,
    floored: bool,
}

impl FlooredHessian {
    /// Whether any eigenvalue was raised.
    pub fn floored(&self) -> bool {
        self.floored
    }

    /// `B(H)^{-1} rhs` through the spectral factors.
    pub fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        let mut coeffs = self.eigvecs.transpose() * rhs;
        for i in 0..coeffs.len() {
            coeffs[i] /= self.eigvals[i];
        }
        &self.eigvecs * coeffs
    }

    /// Dense `B(H)`.
    pub fn matrix(&self) -> DMatrix<f64> {
        &self.eigvecs * DMatrix::from_diagonal(&self.eigvals) * self.eigvecs.transpose()
    }

    /// Dense `B(H)^{-1}`.
    pub fn inverse(&self) -> DMatrix<f64> {
        let inv = DVector::from_iterator(self.eigvals.len(), self.eigvals.iter().map(|l| 1.0 / l));
        &self.eigvecs * DMatrix::from_diagonal(&inv) * self.eigvecs.transpose()
    }

    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eigvals
    }
}

/// Applies the floor map `B` to a symmetric matrix.
pub fn floor_hessian(h: &DMatrix<f64>, beta: f64) -> Result<FlooredHessian, DnewtonError> {
    if beta <= 0.0 {
        return Err(DnewtonError::BadBeta(beta));
    }
    let (lam, vecs) = linalg::jacobi_eigen(h)?;
    let floor = 1.0 / beta;
    let mut floored = false;
    let eigvals = DVector::from_iterator(
        lam.len(),
        lam.iter().map(|&l| {
            if l < floor {
                floored = true;
                floor
            } else {
                l
            }
        }),
    );
    Ok(FlooredHessian {
        eigvecs: vecs,
        eigvals,
        floored,
    })
}

/// Per-round, per-node record of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub round: usize,
    pub node: usize,
    /// Distance to the reference minimizer.
    pub err: f64,
    /// Distance to the current network mean of the iterates.
    pub consensus_residual: f64,
    /// Norm of the node's gradient-average estimate.
    pub grad_residual: f64,
    pub alpha: f64,
    pub floored: bool,
    pub diverged: bool,
}

/// Row-per-(round, node) record of a whole run.
#[derive(Debug, Clone, Default)]
pub struct Trace {
    pub rows: Vec<TraceRow>,
    pub node_count: usize,
}

impl Trace {
    pub const CSV_HEADER: &'static str =
        "k,i,err,consensus_residual,grad_residual,alpha,floored,diverged";

    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(self.rows.len() * 64 + 64);
        out.push_str(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.round,
                r.node,
                r.err,
                r.consensus_residual,
                r.grad_residual,
                r.alpha,
                u8::from(r.floored),
                u8::from(r.diverged)
            ));
        }
        out
    }

    /// `max_i err` per round, in round order.
    pub fn max_err_series(&self) -> Vec<(usize, f64)> {
        let mut out: Vec<(usize, f64)> = Vec::new();
        for r in &self.rows {
            match out.last_mut() {
                Some((k, v)) if *k == r.round => *v = v.max(r.err),
                _ => out.push((r.round, r.err)),
            }
        }
        out
    }

    /// `max_i consensus_residual` per round.
    pub fn max_consensus_series(&self) -> Vec<(usize, f64)> {
        let mut out: Vec<(usize, f64)> = Vec::new();
        for r in &self.rows {
            match out.last_mut() {
                Some((k, v)) if *k == r.round => *v = v.max(r.consensus_residual),
                _ => out.push((r.round, r.consensus_residual)),
            }
        }
        out
    }
}

/// Step-size selection used by the engine.
#[derive(Clone, Copy)]
pub enum StepMode<'a> {
    /// One value shared by all nodes and rounds.
    Fixed(f64),
    /// Network-only criterion evaluated once from the second eigenvalue.
    Offline(&'a SpectralParams),
    /// Per-node, per-round estimate from the distributed R tracker.
    Adaptive(&'a SpectralParams),
    /// Certified schedule; a single time-varying step common to all nodes.
    Global(&'a StabilityConstants),
}

impl StepMode<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            StepMode::Fixed(_) => "fixed",
            StepMode::Offline(_) => "offline",
            StepMode::Adaptive(_) => "adaptive",
            StepMode::Global(_) => "global",
        }
    }
}

/// Full network state at one round.
pub struct EngineState {
    pub xs: Vec<DVector<f64>>,
    /// Gradient-average estimates.
    pub gs: Vec<DVector<f64>>,
    /// Hessian-average estimates.
    pub hs: Vec<DMatrix<f64>>,
    /// `l`-average estimates (AlgB / VZCPS).
    pub ls: Option<DynamicTracker<DVector<f64>>>,
    /// Last local gradients `grad f^i(x_k^i)`.
    pub grads: Vec<DVector<f64>>,
    /// Last local Hessians `hess f^i(x_k^i)`.
    pub hessians: Vec<DMatrix<f64>>,
    g_tracker_inputs: Vec<DVector<f64>>,
    h_tracker_inputs: Vec<DMatrix<f64>>,
}

impl EngineState {
    /// Initial state: `x_1 = x_init`, `g_1 = grad f(x_1)`, `H_1 = hess f(x_1)`,
    /// and for the `l`-tracking variants `l_1 = l(x_1)`.
    pub fn init(
        objs: &ObjectiveSet,
        x_init: &[DVector<f64>],
        variant: AlgorithmVariant,
    ) -> Self {
        let grads: Vec<DVector<f64>> = x_init
            .iter()
            .enumerate()
            .map(|(i, x)| objs.local(i).gradient(x))
            .collect();
        let hessians: Vec<DMatrix<f64>> = x_init
            .iter()
            .enumerate()
            .map(|(i, x)| objs.local(i).hessian(x))
            .collect();
        let ls = variant.uses_ell_tracker().then(|| {
            let ells: Vec<DVector<f64>> = x_init
                .iter()
                .enumerate()
                .map(|(i, x)| objs.local(i).ell(x))
                .collect();
            DynamicTracker::new(ells)
        });
        Self {
            xs: x_init.to_vec(),
            gs: grads.clone(),
            hs: hessians.clone(),
            ls,
            g_tracker_inputs: grads.clone(),
            h_tracker_inputs: hessians.clone(),
            grads,
            hessians,
        }
    }

    /// State with explicitly chosen tracker values; used to probe fixed
    /// points.
    pub fn with_raw(
        objs: &ObjectiveSet,
        xs: Vec<DVector<f64>>,
        gs: Vec<DVector<f64>>,
        hs: Vec<DMatrix<f64>>,
    ) -> Self {
        let grads: Vec<DVector<f64>> = xs
            .iter()
            .enumerate()
            .map(|(i, x)| objs.local(i).gradient(x))
            .collect();
        let hessians: Vec<DMatrix<f64>> = xs
            .iter()
            .enumerate()
            .map(|(i, x)| objs.local(i).hessian(x))
            .collect();
        Self {
            xs,
            gs,
            hs,
            ls: None,
            g_tracker_inputs: grads.clone(),
            h_tracker_inputs: hessians.clone(),
            grads,
            hessians,
        }
    }

    pub fn mean_x(&self) -> DVector<f64> {
        let mut acc = self.xs[0].clone();
        for x in &self.xs[1..] {
            acc += x;
        }
        acc / self.xs.len() as f64
    }
}

/// One synchronous round of the selected variant with given per-node steps.
///
/// Returns the per-node flooring flags of the Hessian estimates used in the
/// parameter update.
pub fn step_once(
    variant: AlgorithmVariant,
    topo: &Topology,
    objs: &ObjectiveSet,
    beta: f64,
    alphas: &[f64],
    state: &mut EngineState,
) -> Result<Vec<bool>, DnewtonError> {
    let n = topo.node_count();
    let w = topo.weights();

    let floors: Vec<FlooredHessian> = state
        .hs
        .iter()
        .map(|h| floor_hessian(h, beta))
        .collect::<Result<_, _>>()?;
    let flags: Vec<bool> = floors.iter().map(|f| f.floored()).collect();

    // parameter phase: all reads from round-k buffers
    let mut new_xs = Vec::with_capacity(n);
    for i in 0..n {
        let x_new = match variant {
            AlgorithmVariant::Proposed | AlgorithmVariant::AlgB => {
                let mut mix = DVector::zeros(state.xs[0].len());
                for j in 0..n {
                    let wij = w[(i, j)];
                    if wij != 0.0 {
                        mix.axpy(wij, &state.xs[j], 1.0);
                    }
                }
                match variant {
                    AlgorithmVariant::Proposed => {
                        let dir = floors[i].solve(&state.gs[i]);
                        mix - dir * alphas[i]
                    }
                    _ => {
                        let ls = state.ls.as_ref().expect("AlgB carries the l tracker");
                        let dir = floors[i].solve(&ls.estimates[i]);
                        mix * (1.0 - alphas[i]) + dir * alphas[i]
                    }
                }
            }
            AlgorithmVariant::AlgA => {
                let dir = floors[i].solve(&state.gs[i]);
                &state.xs[i] - dir * alphas[i]
            }
            AlgorithmVariant::Vzcps => {
                let ls = state.ls.as_ref().expect("VZCPS carries the l tracker");
                let dir = floors[i].solve(&ls.estimates[i]);
                &state.xs[i] * (1.0 - alphas[i]) + dir * alphas[i]
            }
        };
        new_xs.push(x_new);
    }

    // tracking phase: gradients and Hessians at the new iterates
    let new_grads: Vec<DVector<f64>> = new_xs
        .iter()
        .enumerate()
        .map(|(i, x)| objs.local(i).gradient(x))
        .collect();
    let new_hessians: Vec<DMatrix<f64>> = new_xs
        .iter()
        .enumerate()
        .map(|(i, x)| objs.local(i).hessian(x))
        .collect();

    state.gs = consensus::dynamic_step_estimate(
        topo,
        &state.gs,
        &new_grads,
        &state.g_tracker_inputs,
    )?;
    state.hs = consensus::dynamic_step_estimate(
        topo,
        &state.hs,
        &new_hessians,
        &state.h_tracker_inputs,
    )?;
    if let Some(ls) = state.ls.as_mut() {
        let new_ells: Vec<DVector<f64>> = new_xs
            .iter()
            .zip(new_hessians.iter().zip(&new_grads))
            .map(|(x, (h, g))| h * x - g)
            .collect();
        ls.step(topo, new_ells)?;
    }

    state.g_tracker_inputs = new_grads.clone();
    state.h_tracker_inputs = new_hessians.clone();
    state.grads = new_grads;
    state.hessians = new_hessians;
    state.xs = new_xs;
    Ok(flags)
}

/// Everything needed to run one experiment.
pub struct RunConfig<'a> {
    pub variant: AlgorithmVariant,
    pub topology: &'a Topology,
    pub objectives: &'a ObjectiveSet,
    pub beta: f64,
    pub rounds: usize,
    pub x_init: &'a [DVector<f64>],
    /// Reference minimizer for the error metric.
    pub x_star: &'a DVector<f64>,
    pub mode: StepMode<'a>,
    pub divergence_threshold: f64,
}

impl<'a> RunConfig<'a> {
    pub fn new(
        variant: AlgorithmVariant,
        topology: &'a Topology,
        objectives: &'a ObjectiveSet,
        beta: f64,
        rounds: usize,
        x_init: &'a [DVector<f64>],
        x_star: &'a DVector<f64>,
        mode: StepMode<'a>,
    ) -> Self {
        Self {
            variant,
            topology,
            objectives,
            beta,
            rounds,
            x_init,
            x_star,
            mode,
            divergence_threshold: DEFAULT_DIVERGENCE_THRESHOLD,
        }
    }
}

/// Result of a run, with the trace and the conservation diagnostics.
pub struct RunOutcome {
    pub trace: Trace,
    /// Round at which the divergence guard fired, if any.
    pub diverged_at: Option<usize>,
    /// Worst deviation of `mean_i g_k^i` from `mean_i grad f^i(x_k^i)`.
    pub lemma1_gradient_dev: f64,
    /// Worst deviation of `mean_i H_k^i` from `mean_i hess f^i(x_k^i)`.
    pub lemma1_hessian_dev: f64,
    pub flooring_activated: bool,
    pub final_states: Vec<DVector<f64>>,
    /// Scheduler certificate per round (global mode): the maintained bound.
    pub chi_history: Vec<[f64; 2]>,
    /// Measured certified quantities per round (global mode).
    pub zeta_history: Vec<[f64; 2]>,
    /// Rounds where the schedule returned a pure consensus step.
    pub consensus_only_rounds: usize,
    /// First round where a certified quantity exceeded its bound, if any.
    pub certificate_violation: Option<usize>,
}

fn mean_dev_vec(est: &[DVector<f64>], raw: &[DVector<f64>]) -> f64 {
    let n = est.len() as f64;
    let mut a = est[0].clone();
    for e in &est[1..] {
        a += e;
    }
    let mut b = raw[0].clone();
    for r in &raw[1..] {
        b += r;
    }
    (a / n - b / n).norm()
}

fn mean_dev_mat(est: &[DMatrix<f64>], raw: &[DMatrix<f64>]) -> f64 {
    let n = est.len() as f64;
    let mut a = est[0].clone();
    for e in &est[1..] {
        a += e;
    }
    let mut b = raw[0].clone();
    for r in &raw[1..] {
        b += r;
    }
    ((a - b) / n).norm()
}

/// Runs `rounds` synchronous rounds of the selected variant and step mode.
pub fn run(cfg: &RunConfig) -> Result<RunOutcome, DnewtonError> {
    let n = cfg.topology.node_count();
    if cfg.x_init.len() != n {
        return Err(DnewtonError::BadInitCount(cfg.x_init.len(), n));
    }
    if cfg.beta <= 0.0 {
        return Err(DnewtonError::BadBeta(cfg.beta));
    }
    if matches!(cfg.mode, StepMode::Global(_)) && cfg.variant != AlgorithmVariant::Proposed {
        return Err(DnewtonError::GlobalRequiresProposed);
    }

    let mut state = EngineState::init(cfg.objectives, cfg.x_init, cfg.variant);

    // adaptive mode: the R tracker and its per-node weights
    let mut r_tracker = match cfg.mode {
        StepMode::Adaptive(sp) => Some(stepsize::RTracker::init(
            cfg.topology,
            sp,
            &state,
            cfg.beta,
        )?),
        _ => None,
    };
    let mut prev_alphas = vec![0.0; n];
    let offline_value = match cfg.mode {
        StepMode::Offline(sp) => Some(stepsize::offline_alpha(sp.lambda2)?),
        _ => None,
    };

    // global mode: certificate state
    let mut chi = [0.0f64; 2];
    let mut chi_history = Vec::new();
    let mut zeta_history = Vec::new();
    let mut consensus_only_rounds = 0usize;
    let mut certificate_violation = None;
    if let StepMode::Global(constants) = cfg.mode {
        chi = measure_zeta(constants, cfg.objectives, &state);
        chi_history.push(chi);
        zeta_history.push(chi);
    }

    let mut trace = Trace {
        rows: Vec::with_capacity(cfg.rounds * n),
        node_count: n,
    };
    let mut lemma1_g: f64 = 0.0;
    let mut lemma1_h: f64 = 0.0;
    let mut flooring_activated = false;
    let mut diverged_at = None;

    let mut floor_flags = vec![false; n];
    for k in 1..=cfg.rounds {
        // step sizes for this round
        let alphas: Vec<f64> = match cfg.mode {
            StepMode::Fixed(a) => vec![a; n],
            StepMode::Offline(_) => vec![offline_value.unwrap(); n],
            StepMode::Adaptive(sp) => {
                let tracker = r_tracker.as_ref().unwrap();
                (0..n)
                    .map(|i| {
                        match stepsize::s_estimate(&tracker.estimates()[i])
                            .and_then(|s| stepsize::adaptive_alpha(sp.lambda2, s))
                        {
                            Ok(a) => a,
                            // near-singular transient: keep the previous step
                            Err(_) => prev_alphas[i],
                        }
                    })
                    .collect()
            }
            StepMode::Global(constants) => {
                let a = stepsize::schedule_alpha(constants, chi);
                if a == 0.0 {
                    consensus_only_rounds += 1;
                }
                vec![a; n]
            }
        };
        prev_alphas.clone_from(&alphas);

        // conservation diagnostics (exact consequences of column stochasticity)
        lemma1_g = lemma1_g.max(mean_dev_vec(&state.gs, &state.grads));
        lemma1_h = lemma1_h.max(mean_dev_mat(&state.hs, &state.hessians));

        // record the state at round k together with the step chosen at k
        let mean_x = state.mean_x();
        let divergent_now = state
            .xs
            .iter()
            .any(|x| !x.norm().is_finite() || x.norm() > cfg.divergence_threshold);
        for i in 0..n {
            trace.rows.push(TraceRow {
                round: k,
                node: i,
                err: (&state.xs[i] - cfg.x_star).norm(),
                consensus_residual: (&state.xs[i] - &mean_x).norm(),
                grad_residual: state.gs[i].norm(),
                alpha: alphas[i],
                floored: floor_flags[i],
                diverged: divergent_now,
            });
        }
        if divergent_now {
            diverged_at = Some(k);
            break;
        }
        if k == cfg.rounds {
            break;
        }

        floor_flags = step_once(
            cfg.variant,
            cfg.topology,
            cfg.objectives,
            cfg.beta,
            &alphas,
            &mut state,
        )?;
        flooring_activated |= floor_flags.iter().any(|&f| f);

        if let Some(tracker) = r_tracker.as_mut() {
            tracker.step(cfg.topology, &state, cfg.beta)?;
        }

        if let StepMode::Global(constants) = cfg.mode {
            let alpha = alphas[0];
            let (next_chi, _clamped) = stepsize::f_map(constants, chi, alpha);
            chi = next_chi;
            let zeta = measure_zeta(constants, cfg.objectives, &state);
            chi_history.push(chi);
            zeta_history.push(zeta);
            let tol = 1e-8 * (1.0 + chi[0].abs() + chi[1].abs());
            if (zeta[0] > chi[0] + tol || zeta[1] > chi[1] + tol)
                && certificate_violation.is_none()
            {
                certificate_violation = Some(k + 1);
            }
        }
    }

    Ok(RunOutcome {
        trace,
        diverged_at,
        lemma1_gradient_dev: lemma1_g,
        lemma1_hessian_dev: lemma1_h,
        flooring_activated,
        final_states: state.xs,
        chi_history,
        zeta_history,
        consensus_only_rounds,
        certificate_violation,
    })
}

/// Measured certified pair: block norm of the mean-gradient stack and the
/// weighted mismatch norm.
fn measure_zeta(
    constants: &StabilityConstants,
    objs: &ObjectiveSet,
    state: &EngineState,
) -> [f64; 2] {
    let n = state.xs.len();
    let mean_x = state.mean_x();
    let (_, grad_mean, _) = objs.global_aggregate(&mean_x);
    let g_bar_norm = (n as f64).sqrt() * grad_mean.norm();

    // mismatch stacks
    let mean_g = {
        let mut acc = state.gs[0].clone();
        for g in &state.gs[1..] {
            acc += g;
        }
        acc / n as f64
    };
    let mean_h = {
        let mut acc = state.hs[0].clone();
        for h in &state.hs[1..] {
            acc += h;
        }
        acc / n as f64
    };
    let x_tilde: Vec<DVector<f64>> = state.xs.iter().map(|x| x - &mean_x).collect();
    let g_tilde: Vec<DVector<f64>> = state.gs.iter().map(|g| g - &mean_g).collect();
    let h_tilde: Vec<DMatrix<f64>> = state.hs.iter().map(|h| h - &mean_h).collect();
    let theta = constants.theta(&x_tilde, &g_tilde, &h_tilde);
    [g_bar_norm, constants.p_norm(theta)]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netgraph::spectral_params;
    use crate::objectives::{centralized_newton, LocalObjective, Quadratic};
    use crate::rng::PortableRng;

    fn quadratic_set(centers: &[DVector<f64>], q: DMatrix<f64>) -> ObjectiveSet {
        let locals: Vec<Box<dyn LocalObjective>> = centers
            .iter()
            .map(|c| Box::new(Quadratic::from_center(q.clone(), c)) as Box<dyn LocalObjective>)
            .collect();
        ObjectiveSet::new(locals).unwrap()
    }

    #[test]
    fn floor_hessian_diagonal_case() {
        let h = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, -1.0]));
        let f = floor_hessian(&h, 1.0).unwrap();
        let out = f.matrix();
        assert!((out - DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 1.0]))).amax() < 1e-12);
        assert!(f.floored());
    }

    #[test]
    fn floor_hessian_identity_when_already_positive() {
        let h = DMatrix::from_row_slice(2, 2, &[3.0, 0.5, 0.5, 2.0]);
        let f = floor_hessian(&h, 1.0).unwrap();
        assert!(!f.floored());
        assert!((f.matrix() - &h).amax() < 1e-12);
    }

    #[test]
    fn floor_hessian_preserves_eigenvectors() {
        // rotation by 0.7 radians applied to diag(0.1, 5)
        let (c, s) = (0.7f64.cos(), 0.7f64.sin());
        let q = DMatrix::from_row_slice(2, 2, &[c, -s, s, c]);
        let h = &q * DMatrix::from_diagonal(&DVector::from_vec(vec![0.1, 5.0])) * q.transpose();
        let f = floor_hessian(&h, 1.0).unwrap();
        let out = f.matrix();
        let (lam, vecs) = linalg::jacobi_eigen_sorted(&out).unwrap();
        assert!((lam[0] - 5.0).abs() < 1e-10);
        assert!((lam[1] - 1.0).abs() < 1e-10);
        // the eigenvector of the untouched eigenvalue is preserved
        let v5: DVector<f64> = vecs.column(0).into();
        let hv = &h * &v5;
        assert!((hv - &v5 * 5.0).norm() < 1e-10);
    }

    #[test]
    fn floor_hessian_rejects_asymmetric() {
        let h = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.2, 1.0]);
        assert!(floor_hessian(&h, 1.0).is_err());
    }

    #[test]
    fn single_node_proposed_is_damped_newton() {
        // degenerate network W = [1] is not allowed by Topology (I >= 3), so
        // emulate it with a consensus start on the complete graph of equal
        // objectives, which keeps all nodes identical to the scalar recursion
        let topo = Topology::complete(3).unwrap();
        let q = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 3.0]);
        let center = DVector::from_vec(vec![1.0, -2.0]);
        let centers = vec![center.clone(); 3];
        let objs = quadratic_set(&centers, q);
        let x0 = vec![DVector::from_vec(vec![5.0, 5.0]); 3];
        let cfg = RunConfig::new(
            AlgorithmVariant::Proposed,
            &topo,
            &objs,
            1.0,
            3,
            &x0,
            &center,
            StepMode::Fixed(1.0),
        );
        let out = run(&cfg).unwrap();
        // alpha = 1 on a quadratic converges in a single step
        let row = &out.trace.rows[3]; // round 2, node 0
        assert_eq!(row.round, 2);
        assert!(row.err < 1e-12, "err {}", row.err);
        assert!(!out.flooring_activated);
    }

    #[test]
    fn identical_quadratics_contract_at_one_minus_alpha() {
        let topo = Topology::build_ring(10, 0.7, 0.15, 0.15).unwrap();
        let center = DVector::from_vec(vec![2.0, 1.0]);
        let centers = vec![center.clone(); 10];
        let objs = quadratic_set(&centers, DMatrix::identity(2, 2));
        let x0 = vec![DVector::from_vec(vec![6.0, -3.0]); 10];
        // consensus start and identical objectives reduce to the scalar mean
        // recursion; the decay ratio is exactly 1 - alpha. Round counts keep
        // the errors above the floating-point floor.
        for (alpha, rounds) in [(0.01, 400usize), (0.3, 60), (0.9, 25)] {
            let cfg = RunConfig::new(
                AlgorithmVariant::Proposed,
                &topo,
                &objs,
                2.0,
                rounds,
                &x0,
                &center,
                StepMode::Fixed(alpha),
            );
            let out = run(&cfg).unwrap();
            let series = out.trace.max_err_series();
            for w in series.windows(2).skip(rounds / 2) {
                let ratio = w[1].1 / w[0].1;
                assert!(
                    (ratio - (1.0 - alpha)).abs() < 1e-6,
                    "alpha {alpha}: ratio {ratio} vs {}",
                    1.0 - alpha
                );
            }
        }
    }

    #[test]
    fn alg_a_equals_proposed_on_identical_consensus_start() {
        let topo = Topology::build_ring(8, 0.7, 0.15, 0.15).unwrap();
        let center = DVector::from_vec(vec![0.5, 0.5]);
        let objs = quadratic_set(&vec![center.clone(); 8], DMatrix::identity(2, 2));
        let x0 = vec![DVector::from_vec(vec![3.0, 3.0]); 8];
        let mk = |variant| {
            let cfg = RunConfig::new(
                variant,
                &topo,
                &objs,
                2.0,
                50,
                &x0,
                &center,
                StepMode::Fixed(0.2),
            );
            run(&cfg).unwrap()
        };
        let a = mk(AlgorithmVariant::Proposed);
        let b = mk(AlgorithmVariant::AlgA);
        for (ra, rb) in a.trace.rows.iter().zip(&b.trace.rows) {
            assert!((ra.err - rb.err).abs() < 1e-12);
        }
    }

    #[test]
    fn vzcps_single_node_equivalent_is_damped_newton() {
        // identical quadratics + consensus start: VZCPS reduces to the damped
        // Newton recursion when the floor is inactive
        let topo = Topology::complete(3).unwrap();
        let q = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.5]);
        let center = DVector::from_vec(vec![-1.0, 2.0]);
        let objs = quadratic_set(&vec![center.clone(); 3], q.clone());
        let alpha = 0.4;
        let x0 = vec![DVector::from_vec(vec![4.0, 4.0]); 3];
        let cfg = RunConfig::new(
            AlgorithmVariant::Vzcps,
            &topo,
            &objs,
            5.0,
            30,
            &x0,
            &center,
            StepMode::Fixed(alpha),
        );
        let out = run(&cfg).unwrap();
        // expected scalar recursion: e_{k+1} = (1 - alpha) e_k
        let series = out.trace.max_err_series();
        for w in series.windows(2).take(20) {
            let ratio = w[1].1 / w[0].1;
            assert!((ratio - (1.0 - alpha)).abs() < 1e-9, "ratio {ratio}");
        }

        // one-step convergence at alpha = 1
        let cfg1 = RunConfig::new(
            AlgorithmVariant::Vzcps,
            &topo,
            &objs,
            5.0,
            3,
            &x0,
            &center,
            StepMode::Fixed(1.0),
        );
        let out1 = run(&cfg1).unwrap();
        assert!(out1.trace.rows[3].err < 1e-12);
    }

    #[test]
    fn lemma1_conservation_all_variants() {
        let topo = Topology::build_ring(12, 0.7, 0.15, 0.15).unwrap();
        let inst = crate::objectives::LocalizationInstance::generate(
            12,
            DVector::from_vec(vec![0.0, 0.0]),
            0.01,
            3,
        );
        let objs = inst.objective_set();
        let x0 = inst.initial_states();
        let x_star = centralized_newton(&objs, &inst.x_true, 1e-11, 100).unwrap();
        for variant in [
            AlgorithmVariant::Proposed,
            AlgorithmVariant::AlgA,
            AlgorithmVariant::AlgB,
            AlgorithmVariant::Vzcps,
        ] {
            let cfg = RunConfig::new(
                variant,
                &topo,
                &objs,
                0.1,
                200,
                &x0,
                &x_star,
                StepMode::Fixed(0.02),
            );
            let out = run(&cfg).unwrap();
            assert!(
                out.lemma1_gradient_dev < 1e-10,
                "{variant:?}: gradient dev {}",
                out.lemma1_gradient_dev
            );
            assert!(
                out.lemma1_hessian_dev < 1e-10,
                "{variant:?}: hessian dev {}",
                out.lemma1_hessian_dev
            );
        }
    }

    #[test]
    fn consensus_fixed_point_is_invariant() {
        let topo = Topology::build_ring(10, 0.7, 0.15, 0.15).unwrap();
        let inst = crate::objectives::LocalizationInstance::generate(
            10,
            DVector::from_vec(vec![0.0, 0.0]),
            0.01,
            8,
        );
        let objs = inst.objective_set();
        let x_star = centralized_newton(&objs, &inst.x_true, 1e-12, 100).unwrap();
        let (_, _, h_star) = objs.global_aggregate(&x_star);
        // exact consensus fixed point: all x at x_star, zero gradient stack,
        // all Hessian estimates at the network mean
        let xs = vec![x_star.clone(); 10];
        let gs = vec![DVector::zeros(2); 10];
        let hs = vec![h_star; 10];
        let mut state = EngineState::with_raw(&objs, xs, gs, hs);
        step_once(
            AlgorithmVariant::Proposed,
            &topo,
            &objs,
            0.1,
            &vec![0.01; 10],
            &mut state,
        )
        .unwrap();
        for i in 0..10 {
            assert!((&state.xs[i] - &x_star).norm() < 1e-10);
            assert!(state.gs[i].norm() < 1e-10);
        }
    }

    #[test]
    fn flooring_never_activates_on_safe_quadratics() {
        let topo = Topology::symmetric_ring(6, 0.5, 0.25).unwrap();
        let mut rng = PortableRng::new(10, 67);
        let centers: Vec<DVector<f64>> = (0..6)
            .map(|_| DVector::from_vec(vec![rng.uniform_symmetric(), rng.uniform_symmetric()]))
            .collect();
        // eigenvalues of every local Hessian are >= 1, beta = 2 floors at 0.5
        let objs = quadratic_set(&centers, DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 1.0]));
        let x_star = centralized_newton(&objs, &centers[0], 1e-12, 50).unwrap();
        let x0: Vec<DVector<f64>> = centers.iter().cloned().collect();
        let cfg = RunConfig::new(
            AlgorithmVariant::Proposed,
            &topo,
            &objs,
            2.0,
            300,
            &x0,
            &x_star,
            StepMode::Fixed(0.05),
        );
        let out = run(&cfg).unwrap();
        assert!(!out.flooring_activated);
        for row in &out.trace.rows {
            assert!(!row.floored);
        }
    }

    #[test]
    fn permutation_equivariance() {
        let n = 8;
        let topo = Topology::build_ring(n, 0.7, 0.15, 0.15).unwrap();
        let inst = crate::objectives::LocalizationInstance::generate(
            n,
            DVector::from_vec(vec![0.0, 0.0]),
            0.01,
            12,
        );
        let objs = inst.objective_set();
        let x0 = inst.initial_states();
        let x_star = centralized_newton(&objs, &inst.x_true, 1e-11, 100).unwrap();

        // relabel nodes by a cyclic shift: node i becomes sigma(i) = i + 3
        let shift = 3usize;
        let sigma = |i: usize| (i + shift) % n;
        let mut w_perm = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                w_perm[(sigma(i), sigma(j))] = topo.weights()[(i, j)];
            }
        }
        let topo_perm = Topology::from_weights(w_perm).unwrap();
        let mut locals: Vec<Option<Box<dyn LocalObjective>>> = (0..n).map(|_| None).collect();
        for i in 0..n {
            locals[sigma(i)] = Some(Box::new(inst.objective(i)) as Box<dyn LocalObjective>);
        }
        let objs_perm =
            ObjectiveSet::new(locals.into_iter().map(Option::unwrap).collect()).unwrap();
        let mut x0_perm = vec![DVector::zeros(2); n];
        for i in 0..n {
            x0_perm[sigma(i)] = x0[i].clone();
        }

        let run_of = |topology: &Topology, objectives: &ObjectiveSet, init: &[DVector<f64>]| {
            let cfg = RunConfig::new(
                AlgorithmVariant::Proposed,
                topology,
                objectives,
                0.1,
                80,
                init,
                &x_star,
                StepMode::Fixed(0.02),
            );
            run(&cfg).unwrap()
        };
        let base = run_of(&topo, &objs, &x0);
        let perm = run_of(&topo_perm, &objs_perm, &x0_perm);
        for i in 0..n {
            let a = &base.final_states[i];
            let b = &perm.final_states[sigma(i)];
            assert!((a - b).norm() < 1e-10, "node {i} mismatch");
        }
    }

    #[test]
    fn divergence_guard_fires() {
        // AlgB far from the origin destabilizes; force it quickly with a
        // large fixed step on a hostile instance
        let topo = Topology::build_ring(10, 0.7, 0.15, 0.15).unwrap();
        let inst = crate::objectives::LocalizationInstance::generate(
            10,
            DVector::from_vec(vec![2000.0, 2000.0]),
            0.01,
            1,
        );
        let objs = inst.objective_set();
        let x0 = inst.initial_states();
        let x_star = inst.x_true.clone();
        let cfg = RunConfig::new(
            AlgorithmVariant::AlgB,
            &topo,
            &objs,
            0.1,
            4000,
            &x0,
            &x_star,
            StepMode::Fixed(0.05),
        );
        let out = run(&cfg).unwrap();
        assert!(out.diverged_at.is_some(), "expected the guard to fire");
        let last = out.trace.rows.last().unwrap();
        assert!(last.diverged);
        assert!(out.trace.rows.len() < 4000 * 10);
    }

    #[test]
    fn global_mode_rejected_for_other_variants() {
        let topo = Topology::complete(3).unwrap();
        let objs = quadratic_set(
            &vec![DVector::from_vec(vec![0.0, 0.0]); 3],
            DMatrix::identity(2, 2),
        );
        let constants =
            stepsize::compute_constants(&topo, 1.5, 1.0, 0.0).unwrap();
        let x0 = vec![DVector::zeros(2); 3];
        let xs = DVector::zeros(2);
        let cfg = RunConfig::new(
            AlgorithmVariant::Vzcps,
            &topo,
            &objs,
            1.5,
            5,
            &x0,
            &xs,
            StepMode::Global(&constants),
        );
        assert!(matches!(
            run(&cfg),
            Err(DnewtonError::GlobalRequiresProposed)
        ));
    }

    #[test]
    fn trace_csv_shape() {
        let topo = Topology::complete(3).unwrap();
        let center = DVector::from_vec(vec![1.0, 1.0]);
        let objs = quadratic_set(&vec![center.clone(); 3], DMatrix::identity(2, 2));
        let x0 = vec![DVector::zeros(2); 3];
        let cfg = RunConfig::new(
            AlgorithmVariant::Proposed,
            &topo,
            &objs,
            2.0,
            4,
            &x0,
            &center,
            StepMode::Fixed(0.5),
        );
        let out = run(&cfg).unwrap();
        assert_eq!(out.trace.rows.len(), 4 * 3);
        let csv = out.trace.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), Trace::CSV_HEADER);
        assert_eq!(csv.lines().count(), 1 + 12);
    }

    #[test]
    fn proposed_beats_vzcps_on_localization() {
        // the gap shows in the slow-consensus regime: the 30-node ring with
        // a step near the radius-minimizing value
        let topo = Topology::build_ring(30, 0.7, 0.15, 0.15).unwrap();
        let inst = crate::objectives::LocalizationInstance::generate(
            30,
            DVector::from_vec(vec![0.0, 0.0]),
            0.01,
            4,
        );
        let objs = inst.objective_set();
        let x0 = inst.initial_states();
        let x_star = centralized_newton(&objs, &inst.x_true, 1e-11, 100).unwrap();
        let alpha = 6.2e-3;
        let rounds = 4000;
        let reach = |variant| {
            let cfg = RunConfig::new(
                variant,
                &topo,
                &objs,
                0.1,
                rounds,
                &x0,
                &x_star,
                StepMode::Fixed(alpha),
            );
            let out = run(&cfg).unwrap();
            out.trace
                .max_err_series()
                .iter()
                .find(|(_, e)| *e < 1e-6)
                .map(|(k, _)| *k)
                .unwrap_or(usize::MAX)
        };
        let k_prop = reach(AlgorithmVariant::Proposed);
        let k_vz = reach(AlgorithmVariant::Vzcps);
        assert!(
            k_prop < k_vz,
            "proposed at {k_prop} not faster than vzcps at {k_vz}"
        );
        assert!(k_prop != usize::MAX && k_vz != usize::MAX);
    }
}
