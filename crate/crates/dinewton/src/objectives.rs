//! Local objective functions and the centralized reference solver.
//!
//! Every node owns a [`LocalObjective`] exposing value, gradient, and Hessian.
//! The global objective is the average `f(x) = (1/I) sum_i f^i(x)`; its
//! minimizer, computed by [`centralized_newton`], is the ground truth against
//! which all distributed runs are measured.

use crate::linalg;
use crate::rng::{PortableRng, STREAM_ANCHORS, STREAM_INIT, STREAM_NOISE};
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("objective dimensions disagree: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("objective set is empty")]
    Empty,
    #[error("Newton iteration did not reach tolerance {tol:e} in {iters} iterations (gradient norm {grad_norm:e})")]
    NonConvergence {
        iters: usize,
        tol: f64,
        grad_norm: f64,
    },
    #[error("Hessian is numerically singular (condition estimate {0:.3e})")]
    SingularHessian(f64),
    #[error("instance file is malformed: {0}")]
    BadFile(String),
}

/// Evaluation contract for one node's private objective.
pub trait LocalObjective: Send + Sync {
    fn dimension(&self) -> usize;
    fn value(&self, x: &DVector<f64>) -> f64;
    fn gradient(&self, x: &DVector<f64>) -> DVector<f64>;
    fn hessian(&self, x: &DVector<f64>) -> DMatrix<f64>;

    /// `l(x) = hessian(x) x - gradient(x)`, the signal tracked by the
    /// algorithm variants that avoid consensus on the parameters.
    fn ell(&self, x: &DVector<f64>) -> DVector<f64> {
        self.hessian(x) * x - self.gradient(x)
    }
}

/// Quadratic objective `f(x) = x^T Q x / 2 + c^T x`.
#[derive(Debug, Clone)]
pub struct Quadratic {
    pub q: DMatrix<f64>,
    pub c: DVector<f64>,
}

impl Quadratic {
    pub fn new(q: DMatrix<f64>, c: DVector<f64>) -> Self {
        assert_eq!(q.nrows(), q.ncols());
        assert_eq!(q.nrows(), c.len());
        Self { q, c }
    }

    /// `f(x) = (x - center)^T Q (x - center) / 2` up to a constant.
    pub fn from_center(q: DMatrix<f64>, center: &DVector<f64>) -> Self {
        let c = -(&q * center);
        Self::new(q, c)
    }
}

impl LocalObjective for Quadratic {
    fn dimension(&self) -> usize {
        self.c.len()
    }

    fn value(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.q * x)) + self.c.dot(x)
    }

    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.q * x + &self.c
    }

    fn hessian(&self, _x: &DVector<f64>) -> DMatrix<f64> {
        self.q.clone()
    }
}

/// Squared-distance ranging objective of one sensor:
/// `f(x) = (||x - a||^2 - z)^2`.
#[derive(Debug, Clone)]
pub struct RangingObjective {
    pub anchor: DVector<f64>,
    pub measurement: f64,
}

impl LocalObjective for RangingObjective {
    fn dimension(&self) -> usize {
        self.anchor.len()
    }

    fn value(&self, x: &DVector<f64>) -> f64 {
        let d = x - &self.anchor;
        let r = d.norm_squared() - self.measurement;
        r * r
    }

    fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
        let d = x - &self.anchor;
        let r = d.norm_squared() - self.measurement;
        d * (4.0 * r)
    }

    fn hessian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let d = x - &self.anchor;
        let r = d.norm_squared() - self.measurement;
        let n = d.len();
        let mut h = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                h[(i, j)] = 8.0 * d[i] * d[j];
            }
            h[(i, i)] += 4.0 * r;
        }
        h
    }
}

/// Collection of the per-node objectives.
pub struct ObjectiveSet {
    locals: Vec<Box<dyn LocalObjective>>,
    dimension: usize,
}

impl ObjectiveSet {
    pub fn new(locals: Vec<Box<dyn LocalObjective>>) -> Result<Self, ObjectiveError> {
        let dimension = locals.first().ok_or(ObjectiveError::Empty)?.dimension();
        for l in &locals {
            if l.dimension() != dimension {
                return Err(ObjectiveError::DimensionMismatch(dimension, l.dimension()));
            }
        }
        Ok(Self { locals, dimension })
    }

    pub fn node_count(&self) -> usize {
        self.locals.len()
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn local(&self, i: usize) -> &dyn LocalObjective {
        self.locals[i].as_ref()
    }

    /// Global `(f, grad f, hess f)` at `x`, averaged over the nodes.
    pub fn global_aggregate(&self, x: &DVector<f64>) -> (f64, DVector<f64>, DMatrix<f64>) {
        let n = self.dimension;
        let mut value = 0.0;
        let mut grad = DVector::zeros(n);
        let mut hess = DMatrix::zeros(n, n);
        for l in &self.locals {
            value += l.value(x);
            grad += l.gradient(x);
            hess += l.hessian(x);
        }
        let inv = 1.0 / self.locals.len() as f64;
        (value * inv, grad * inv, hess * inv)
    }
}

/// Undamped Newton iteration on the global objective; the ground-truth
/// reference for every distributed run.
pub fn centralized_newton(
    objs: &ObjectiveSet,
    x0: &DVector<f64>,
    tol: f64,
    max_iter: usize,
) -> Result<DVector<f64>, ObjectiveError> {
    let mut x = x0.clone();
    for _ in 0..max_iter {
        let (_, grad, hess) = objs.global_aggregate(&x);
        if grad.norm() <= tol {
            return Ok(x);
        }
        let (smax, smin) = linalg::singular_extremes(&hess)
            .map_err(|_| ObjectiveError::SingularHessian(f64::INFINITY))?;
        if smin <= 0.0 || smax / smin > 1e14 {
            return Err(ObjectiveError::SingularHessian(if smin > 0.0 {
                smax / smin
            } else {
                f64::INFINITY
            }));
        }
        let step = hess
            .lu()
            .solve(&grad)
            .ok_or(ObjectiveError::SingularHessian(f64::INFINITY))?;
        x -= step;
    }
    let (_, grad, _) = objs.global_aggregate(&x);
    if grad.norm() <= tol {
        Ok(x)
    } else {
        Err(ObjectiveError::NonConvergence {
            iters: max_iter,
            tol,
            grad_norm: grad.norm(),
        })
    }
}

/// A reproducible target-localization problem.
///
/// Anchors are drawn from `N(x_true, 100 I)` on one RNG substream and the
/// measurement noise `N(0, sigma^2)` on another, so regenerating from
/// `(node_count, x_true, sigma2, seed)` is bit-exact.
#[derive(Debug, Clone)]
pub struct LocalizationInstance {
    pub node_count: usize,
    pub anchors: Vec<DVector<f64>>,
    pub measurements: Vec<f64>,
    pub sigma2: f64,
    pub x_true: DVector<f64>,
    pub seed: u64,
}

impl LocalizationInstance {
    pub fn generate(node_count: usize, x_true: DVector<f64>, sigma2: f64, seed: u64) -> Self {
        let dim = x_true.len();
        let mut anchor_rng = PortableRng::new(seed, STREAM_ANCHORS);
        let mut noise_rng = PortableRng::new(seed, STREAM_NOISE);
        let anchors: Vec<DVector<f64>> = (0..node_count)
            .map(|_| {
                DVector::from_iterator(
                    dim,
                    (0..dim).map(|k| x_true[k] + 10.0 * anchor_rng.standard_normal()),
                )
            })
            .collect();
        let measurements = anchors
            .iter()
            .map(|a| {
                let d = &x_true - a;
                d.norm_squared() + sigma2.sqrt() * noise_rng.standard_normal()
            })
            .collect();
        Self {
            node_count,
            anchors,
            measurements,
            sigma2,
            x_true,
            seed,
        }
    }

    pub fn dimension(&self) -> usize {
        self.x_true.len()
    }

    pub fn objective(&self, i: usize) -> RangingObjective {
        RangingObjective {
            anchor: self.anchors[i].clone(),
            measurement: self.measurements[i],
        }
    }

    pub fn objective_set(&self) -> ObjectiveSet {
        let locals: Vec<Box<dyn LocalObjective>> = (0..self.node_count)
            .map(|i| Box::new(self.objective(i)) as Box<dyn LocalObjective>)
            .collect();
        ObjectiveSet::new(locals).expect("instance objectives share the dimension")
    }

    /// Per-node initial iterates, `x_init^i ~ N(x_true, I)`, drawn from a
    /// dedicated substream of the instance seed.
    pub fn initial_states(&self) -> Vec<DVector<f64>> {
        let dim = self.dimension();
        let mut rng = PortableRng::new(self.seed, STREAM_INIT);
        (0..self.node_count)
            .map(|_| {
                DVector::from_iterator(
                    dim,
                    (0..dim).map(|k| self.x_true[k] + rng.standard_normal()),
                )
            })
            .collect()
    }

    /// Plain-text dump: header `I N sigma2 seed x_true...`, then one line per
    /// node with the anchor coordinates and the measurement.
    pub fn serialize_text(&self) -> String {
        let mut out = String::new();
        let xt: Vec<String> = self.x_true.iter().map(|v| format!("{v}")).collect();
        out.push_str(&format!(
            "{} {} {} {} {}\n",
            self.node_count,
            self.dimension(),
            self.sigma2,
            self.seed,
            xt.join(" ")
        ));
        for (a, z) in self.anchors.iter().zip(&self.measurements) {
            let coords: Vec<String> = a.iter().map(|v| format!("{v}")).collect();
            out.push_str(&format!("{} {}\n", coords.join(" "), z));
        }
        out
    }

    pub fn parse_text(text: &str) -> Result<Self, ObjectiveError> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| ObjectiveError::BadFile("empty file".into()))?;
        let toks: Vec<&str> = header.split_whitespace().collect();
        if toks.len() < 5 {
            return Err(ObjectiveError::BadFile(format!("short header: {header:?}")));
        }
        let parse_f = |t: &str| {
            t.parse::<f64>()
                .map_err(|_| ObjectiveError::BadFile(format!("bad number {t:?}")))
        };
        let node_count: usize = toks[0]
            .parse()
            .map_err(|_| ObjectiveError::BadFile("bad node count".into()))?;
        let dim: usize = toks[1]
            .parse()
            .map_err(|_| ObjectiveError::BadFile("bad dimension".into()))?;
        let sigma2 = parse_f(toks[2])?;
        let seed: u64 = toks[3]
            .parse()
            .map_err(|_| ObjectiveError::BadFile("bad seed".into()))?;
        if toks.len() != 4 + dim {
            return Err(ObjectiveError::BadFile(format!(
                "header has {} fields, expected {}",
                toks.len(),
                4 + dim
            )));
        }
        let x_true = DVector::from_iterator(
            dim,
            toks[4..].iter().map(|t| t.parse::<f64>().unwrap_or(f64::NAN)),
        );
        if x_true.iter().any(|v| !v.is_finite()) {
            return Err(ObjectiveError::BadFile("bad x_true".into()));
        }
        let mut anchors = Vec::with_capacity(node_count);
        let mut measurements = Vec::with_capacity(node_count);
        for i in 0..node_count {
            let line = lines
                .next()
                .ok_or_else(|| ObjectiveError::BadFile(format!("missing node line {i}")))?;
            let toks: Vec<&str> = line.split_whitespace().collect();
            if toks.len() != dim + 1 {
                return Err(ObjectiveError::BadFile(format!(
                    "node line {i} has {} fields, expected {}",
                    toks.len(),
                    dim + 1
                )));
            }
            let a = DVector::from_iterator(
                dim,
                toks[..dim].iter().map(|t| t.parse::<f64>().unwrap_or(f64::NAN)),
            );
            if a.iter().any(|v| !v.is_finite()) {
                return Err(ObjectiveError::BadFile(format!("bad anchor on line {i}")));
            }
            anchors.push(a);
            measurements.push(parse_f(toks[dim])?);
        }
        Ok(Self {
            node_count,
            anchors,
            measurements,
            sigma2,
            x_true,
            seed,
        })
    }
}

/// Finite-difference reference derivatives, kept independent of the analytic
/// implementations they are used to verify.
pub mod finite_diff {
    use nalgebra::{DMatrix, DVector};

    /// Central-difference gradient of a scalar function.
    pub fn gradient<F: Fn(&DVector<f64>) -> f64>(f: F, x: &DVector<f64>, h: f64) -> DVector<f64> {
        let n = x.len();
        DVector::from_fn(n, |i, _| {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            (f(&xp) - f(&xm)) / (2.0 * h)
        })
    }

    /// Central-difference Jacobian of a vector function; for a gradient input
    /// this is the Hessian.
    pub fn jacobian<F: Fn(&DVector<f64>) -> DVector<f64>>(
        f: F,
        x: &DVector<f64>,
        h: f64,
    ) -> DMatrix<f64> {
        let n = x.len();
        let m = f(x).len();
        let mut out = DMatrix::zeros(m, n);
        for j in 0..n {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += h;
            xm[j] -= h;
            let col = (f(&xp) - f(&xm)) / (2.0 * h);
            out.set_column(j, &col);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn instance() -> LocalizationInstance {
        LocalizationInstance::generate(30, DVector::from_vec(vec![0.0, 0.0]), 0.01, 42)
    }

    #[test]
    fn gradient_vanishes_at_anchor() {
        let inst = instance();
        let obj = inst.objective(3);
        let g = obj.gradient(&obj.anchor);
        assert!(g.norm() < 1e-14);
        let h = obj.hessian(&obj.anchor);
        let expected = DMatrix::identity(2, 2) * (-4.0 * obj.measurement);
        assert!((h - expected).amax() < 1e-12);
    }

    #[test]
    fn zero_residual_point() {
        let obj = RangingObjective {
            anchor: DVector::from_vec(vec![0.0, 0.0]),
            measurement: 1.0,
        };
        let x = DVector::from_vec(vec![1.0, 0.0]);
        assert!(obj.value(&x).abs() < 1e-15);
        assert!(obj.gradient(&x).norm() < 1e-15);
        let h = obj.hessian(&x);
        let expected = DMatrix::from_row_slice(2, 2, &[8.0, 0.0, 0.0, 0.0]);
        assert!((h - expected).amax() < 1e-12);
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let inst = instance();
        let mut rng = PortableRng::new(7, 31);
        let mut checked = 0;
        for trial in 0..100 {
            let i = trial % inst.node_count;
            let obj = inst.objective(i);
            let x = DVector::from_vec(vec![
                20.0 * rng.uniform_symmetric(),
                20.0 * rng.uniform_symmetric(),
            ]);
            let g = obj.gradient(&x);
            let g_fd = finite_diff::gradient(|y| obj.value(y), &x, 1e-5);
            let g_scale = g.norm().max(1.0);
            assert!(
                (&g - &g_fd).norm() / g_scale < 1e-5,
                "gradient mismatch at trial {trial}"
            );
            let h = obj.hessian(&x);
            let h_fd = finite_diff::jacobian(|y| obj.gradient(y), &x, 1e-6);
            let h_scale = linalg::operator_norm(&h).max(1.0);
            assert!(
                linalg::operator_norm(&(&h - &h_fd)) / h_scale < 1e-4,
                "hessian mismatch at trial {trial}"
            );
            assert!(linalg::symmetry_error(&h) < 1e-12);
            checked += 1;
        }
        assert_eq!(checked, 100);
    }

    #[test]
    fn ell_of_quadratic_is_constant() {
        let q = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 3.0]);
        let c = DVector::from_vec(vec![1.0, -2.0]);
        let obj = Quadratic::new(q, c.clone());
        for x in [
            DVector::from_vec(vec![0.0, 0.0]),
            DVector::from_vec(vec![5.0, -1.0]),
        ] {
            assert!((obj.ell(&x) + &c).norm() < 1e-12);
        }
    }

    #[test]
    fn ell_of_localization_at_anchor() {
        let inst = instance();
        let obj = inst.objective(5);
        let l = obj.ell(&obj.anchor);
        let expected = &obj.anchor * (-4.0 * obj.measurement);
        assert!((l - expected).norm() < 1e-10);
    }

    #[test]
    fn ell_matches_direct_composition() {
        let inst = instance();
        let mut rng = PortableRng::new(9, 33);
        for i in 0..inst.node_count {
            let obj = inst.objective(i);
            let x = DVector::from_vec(vec![
                rng.uniform_symmetric() * 8.0,
                rng.uniform_symmetric() * 8.0,
            ]);
            let direct = obj.hessian(&x) * &x - obj.gradient(&x);
            assert!((obj.ell(&x) - direct).norm() < 1e-12);
        }
    }

    #[test]
    fn aggregate_of_identical_quadratics() {
        let c = DVector::from_vec(vec![3.0, -1.0]);
        let locals: Vec<Box<dyn LocalObjective>> = (0..7)
            .map(|_| {
                Box::new(Quadratic::from_center(DMatrix::identity(2, 2), &c))
                    as Box<dyn LocalObjective>
            })
            .collect();
        let set = ObjectiveSet::new(locals).unwrap();
        let x = DVector::from_vec(vec![5.0, 5.0]);
        let (_, g, _) = set.global_aggregate(&x);
        assert!((g - (&x - &c)).norm() < 1e-12);
    }

    #[test]
    fn noiseless_instance_has_zero_gradient_at_truth() {
        let inst = LocalizationInstance::generate(12, DVector::from_vec(vec![2.0, -3.0]), 0.0, 5);
        let set = inst.objective_set();
        let (_, g, _) = set.global_aggregate(&inst.x_true);
        assert!(g.norm() < 1e-10);
    }

    #[test]
    fn newton_exact_on_quadratic() {
        let q = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 2.0]);
        let center = DVector::from_vec(vec![1.0, 2.0]);
        let set = ObjectiveSet::new(vec![
            Box::new(Quadratic::from_center(q, &center)) as Box<dyn LocalObjective>
        ])
        .unwrap();
        let x = centralized_newton(&set, &DVector::from_vec(vec![-10.0, 7.0]), 1e-12, 1).unwrap();
        assert!((x - center).norm() < 1e-10);
    }

    #[test]
    fn newton_quartic_contracts_by_two_thirds() {
        // f(x) = x^4 in one dimension contracts by 2/3 per undamped step
        struct Quartic;
        impl LocalObjective for Quartic {
            fn dimension(&self) -> usize {
                1
            }
            fn value(&self, x: &DVector<f64>) -> f64 {
                x[0].powi(4)
            }
            fn gradient(&self, x: &DVector<f64>) -> DVector<f64> {
                DVector::from_vec(vec![4.0 * x[0].powi(3)])
            }
            fn hessian(&self, x: &DVector<f64>) -> DMatrix<f64> {
                DMatrix::from_vec(1, 1, vec![12.0 * x[0] * x[0]])
            }
        }
        let set = ObjectiveSet::new(vec![Box::new(Quartic) as Box<dyn LocalObjective>]).unwrap();
        let mut x = DVector::from_vec(vec![1.0]);
        for _ in 0..5 {
            let (_, g, h) = set.global_aggregate(&x);
            let step = h.lu().solve(&g).unwrap();
            let xn = &x - step;
            assert!((xn[0] - 2.0 / 3.0 * x[0]).abs() < 1e-12);
            x = xn;
        }
    }

    #[test]
    fn newton_matches_grid_scan_on_localization() {
        let inst = instance();
        let set = inst.objective_set();
        let mean_anchor = inst
            .anchors
            .iter()
            .fold(DVector::zeros(2), |acc, a| acc + a)
            / inst.node_count as f64;
        let x_star = centralized_newton(&set, &mean_anchor, 1e-10, 100).unwrap();
        let (_, g, _) = set.global_aggregate(&x_star);
        assert!(g.norm() <= 1e-10);
        assert!((&x_star - &inst.x_true).norm() < 0.5, "x_star near truth");

        // brute-force scan on a 1e-3 grid around the truth
        let res = 1e-3;
        let half = 0.05;
        let steps = (2.0 * half / res) as i64 + 1;
        let mut best = (f64::INFINITY, DVector::zeros(2));
        for ix in 0..steps {
            for iy in 0..steps {
                let x = DVector::from_vec(vec![
                    inst.x_true[0] - half + ix as f64 * res,
                    inst.x_true[1] - half + iy as f64 * res,
                ]);
                let (v, _, _) = set.global_aggregate(&x);
                if v < best.0 {
                    best = (v, x);
                }
            }
        }
        assert!(
            (&best.1 - &x_star).norm() <= res * 1.5,
            "grid argmin {:?} vs newton {:?}",
            best.1.as_slice(),
            x_star.as_slice()
        );
    }

    #[test]
    fn hessian_lipschitz_estimate_is_stable() {
        let inst = instance();
        let mut rng = PortableRng::new(21, 37);
        let mut estimate = |samples: usize| {
            let mut worst: f64 = 0.0;
            for _ in 0..samples {
                let i = (rng.uniform_oc() * inst.node_count as f64) as usize % inst.node_count;
                let obj = inst.objective(i);
                let x = DVector::from_vec(vec![
                    5.0 * rng.uniform_symmetric(),
                    5.0 * rng.uniform_symmetric(),
                ]);
                let y = DVector::from_vec(vec![
                    5.0 * rng.uniform_symmetric(),
                    5.0 * rng.uniform_symmetric(),
                ]);
                let dh = obj.hessian(&x) - obj.hessian(&y);
                let dist = (&x - &y).norm();
                if dist > 1e-9 {
                    let frob = dh.iter().map(|v| v * v).sum::<f64>().sqrt();
                    worst = worst.max(frob / dist);
                }
            }
            worst
        };
        let d100 = estimate(100);
        let d1000 = estimate(1000);
        assert!(d100 > 0.0);
        // the ratio estimate grows slowly with sampling; it must stay bounded
        assert!(d1000 <= 1.5 * d100, "d100 {d100} vs d1000 {d1000}");
    }

    #[test]
    fn instance_serialization_roundtrip() {
        let inst = instance();
        let text = inst.serialize_text();
        let back = LocalizationInstance::parse_text(&text).unwrap();
        assert_eq!(back.node_count, inst.node_count);
        assert_eq!(back.seed, inst.seed);
        for i in 0..inst.node_count {
            assert!((&back.anchors[i] - &inst.anchors[i]).norm() < 1e-14);
            assert!((back.measurements[i] - inst.measurements[i]).abs() < 1e-14);
        }
        assert!(LocalizationInstance::parse_text("1 2 0.01").is_err());
    }

    #[test]
    fn instance_regeneration_is_bit_exact() {
        let a = instance();
        let b = instance();
        for i in 0..a.node_count {
            assert_eq!(a.anchors[i].as_slice(), b.anchors[i].as_slice());
            assert_eq!(a.measurements[i].to_bits(), b.measurements[i].to_bits());
        }
        assert_eq!(
            a.initial_states()[0].as_slice(),
            b.initial_states()[0].as_slice()
        );
    }
}
