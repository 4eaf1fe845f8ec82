//! Communication topologies and their spectral quantities.
//!
//! A [`Topology`] wraps a doubly stochastic, primitive weight matrix `W`.
//! [`spectral_params`] is the centralized oracle for the second eigenvalue and
//! its left/right eigenvectors; [`power_estimate_lambda2`] is the distributed
//! estimator that only uses neighbor exchanges plus globally computed norms.

use crate::linalg;
use crate::rng::{PortableRng, STREAM_POWER};
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use thiserror::Error;

/// Validation tolerance for row/column sums.
pub const STOCHASTIC_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("node count {0} is too small; need at least 3")]
    TooFewNodes(usize),
    #[error("ring weights sum to {0}, expected 1 within {STOCHASTIC_TOL:e}")]
    RingWeightSum(f64),
    #[error("ring weight is negative: {0}")]
    NegativeRingWeight(f64),
    #[error("row {0} sums to {1}, expected 1 within {STOCHASTIC_TOL:e}")]
    RowSum(usize, f64),
    #[error("column {0} sums to {1}, expected 1 within {STOCHASTIC_TOL:e}")]
    ColSum(usize, f64),
    #[error("negative weight {2} at row {0}, column {1}")]
    NegativeWeight(usize, usize, f64),
    #[error("weight matrix is not primitive: no power up to {0} is entrywise positive")]
    NotPrimitive(usize),
    #[error("matrix file is malformed: {0}")]
    BadFile(String),
    #[error("operation requires a symmetric (undirected) topology; max asymmetry {0:.3e}")]
    NotSymmetric(f64),
    #[error("need at least 2 rounds, got {0}")]
    TooFewRounds(usize),
    #[error("eigen-iteration did not converge within {0} iterations")]
    NoConvergence(usize),
    #[error(transparent)]
    Linalg(#[from] linalg::LinalgError),
}

/// A fixed communication network: `w[(i, j)]` is the gain on the link from
/// node `j` to node `i`; `w[(i, j)] = 0` exactly when `j` does not transmit
/// to `i`.
#[derive(Debug, Clone)]
pub struct Topology {
    node_count: usize,
    weights: DMatrix<f64>,
    out_neighbors: Vec<Vec<usize>>,
}

impl Topology {
    /// Validates and wraps a weight matrix.
    pub fn from_weights(weights: DMatrix<f64>) -> Result<Self, NetError> {
        let n = weights.nrows();
        if n < 3 {
            return Err(NetError::TooFewNodes(n));
        }
        assert_eq!(n, weights.ncols(), "weight matrix must be square");
        for i in 0..n {
            for j in 0..n {
                if weights[(i, j)] < 0.0 {
                    return Err(NetError::NegativeWeight(i, j, weights[(i, j)]));
                }
            }
        }
        for i in 0..n {
            let rs: f64 = weights.row(i).iter().sum();
            if (rs - 1.0).abs() > STOCHASTIC_TOL {
                return Err(NetError::RowSum(i, rs));
            }
        }
        for j in 0..n {
            let cs: f64 = weights.column(j).iter().sum();
            if (cs - 1.0).abs() > STOCHASTIC_TOL {
                return Err(NetError::ColSum(j, cs));
            }
        }
        check_primitive(&weights)?;
        let out_neighbors = (0..n)
            .map(|j| (0..n).filter(|&i| weights[(i, j)] > 0.0).collect())
            .collect();
        Ok(Self {
            node_count: n,
            weights,
            out_neighbors,
        })
    }

    /// Directed circulant ring: each node keeps `self_w`, receives `off1`
    /// from its predecessor and `off2` from the node two steps ahead.
    ///
    /// At `I = 3` the two off-diagonal positions coincide and their weights
    /// accumulate on the single cell; double stochasticity is preserved.
    pub fn build_ring(i: usize, self_w: f64, off1: f64, off2: f64) -> Result<Self, NetError> {
        if i < 3 {
            return Err(NetError::TooFewNodes(i));
        }
        for &w in &[self_w, off1, off2] {
            if w < 0.0 {
                return Err(NetError::NegativeRingWeight(w));
            }
        }
        let sum = self_w + off1 + off2;
        if (sum - 1.0).abs() > STOCHASTIC_TOL {
            return Err(NetError::RingWeightSum(sum));
        }
        let mut w = DMatrix::zeros(i, i);
        for r in 0..i {
            w[(r, r)] += self_w;
            w[(r, (r + i - 1) % i)] += off1;
            w[(r, (r + 2) % i)] += off2;
        }
        Self::from_weights(w)
    }

    /// Undirected ring where each node keeps `self_w` and exchanges
    /// `neighbor_w` with both adjacent nodes.
    pub fn symmetric_ring(i: usize, self_w: f64, neighbor_w: f64) -> Result<Self, NetError> {
        if i < 3 {
            return Err(NetError::TooFewNodes(i));
        }
        let sum = self_w + 2.0 * neighbor_w;
        if (sum - 1.0).abs() > STOCHASTIC_TOL {
            return Err(NetError::RingWeightSum(sum));
        }
        let mut w = DMatrix::zeros(i, i);
        for r in 0..i {
            w[(r, r)] += self_w;
            w[(r, (r + 1) % i)] += neighbor_w;
            w[(r, (r + i - 1) % i)] += neighbor_w;
        }
        Self::from_weights(w)
    }

    /// Complete averaging network, `W = (1/I) 11^T`.
    pub fn complete(i: usize) -> Result<Self, NetError> {
        Self::from_weights(DMatrix::from_element(i, i, 1.0 / i as f64))
    }

    /// Symmetric doubly stochastic matrix from an undirected edge list using
    /// Metropolis weights.
    pub fn metropolis(i: usize, edges: &[(usize, usize)]) -> Result<Self, NetError> {
        let mut deg = vec![0usize; i];
        for &(a, b) in edges {
            deg[a] += 1;
            deg[b] += 1;
        }
        let mut w = DMatrix::zeros(i, i);
        for &(a, b) in edges {
            let weight = 1.0 / (1 + deg[a].max(deg[b])) as f64;
            w[(a, b)] += weight;
            w[(b, a)] += weight;
        }
        for r in 0..i {
            let off: f64 = w.row(r).iter().sum();
            w[(r, r)] = 1.0 - off;
        }
        Self::from_weights(w)
    }

    /// Parses the plain-text matrix format: first line the node count `I`,
    /// then `I` rows of `I` whitespace-separated decimals.
    pub fn parse_matrix(text: &str) -> Result<Self, NetError> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let first = lines
            .next()
            .ok_or_else(|| NetError::BadFile("empty file".into()))?;
        let n: usize = first
            .trim()
            .parse()
            .map_err(|_| NetError::BadFile(format!("bad node count line: {first:?}")))?;
        let mut w = DMatrix::zeros(n, n);
        for i in 0..n {
            let line = lines
                .next()
                .ok_or_else(|| NetError::BadFile(format!("missing row {i}")))?;
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|t| {
                    t.parse::<f64>()
                        .map_err(|_| NetError::BadFile(format!("bad entry {t:?} in row {i}")))
                })
                .collect::<Result<_, _>>()?;
            if vals.len() != n {
                return Err(NetError::BadFile(format!(
                    "row {i} has {} entries, expected {n}",
                    vals.len()
                )));
            }
            for (j, v) in vals.into_iter().enumerate() {
                w[(i, j)] = v;
            }
        }
        Self::from_weights(w)
    }

    /// Reads the plain-text matrix format from a file.
    pub fn load_matrix_file(path: &std::path::Path) -> Result<Self, NetError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| NetError::BadFile(format!("{}: {e}", path.display())))?;
        Self::parse_matrix(&text)
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    pub fn out_neighbors(&self, node: usize) -> &[usize] {
        &self.out_neighbors[node]
    }

    pub fn symmetry_error(&self) -> f64 {
        linalg::symmetry_error(&self.weights)
    }

    pub fn is_symmetric(&self) -> bool {
        self.symmetry_error() <= 1e-12
    }

    /// `W - (1/I) 11^T`; its spectral radius equals the modulus of the second
    /// eigenvalue.
    pub fn deflated(&self) -> DMatrix<f64> {
        let n = self.node_count;
        let mut v = self.weights.clone();
        v.add_scalar_mut(-1.0 / n as f64);
        v
    }

    /// First-row coefficients `c` when the matrix is circulant
    /// (`w[(i, j)] = c[(j - i) mod I]`), else `None`.
    pub fn circulant_shifts(&self) -> Option<Vec<f64>> {
        let n = self.node_count;
        let c: Vec<f64> = (0..n).map(|m| self.weights[(0, m)]).collect();
        for i in 0..n {
            for j in 0..n {
                if (self.weights[(i, j)] - c[(j + n - i) % n]).abs() > 1e-15 {
                    return None;
                }
            }
        }
        Some(c)
    }
}

fn check_primitive(w: &DMatrix<f64>) -> Result<(), NetError> {
    let n = w.nrows();
    let limit = n * n;
    let mut pattern: Vec<Vec<bool>> = (0..n)
        .map(|i| (0..n).map(|j| w[(i, j)] > 0.0).collect())
        .collect();
    let mut power = 1usize;
    // squaring the positivity pattern; once some power is all-positive every
    // larger power is too (each row of W has a positive entry)
    loop {
        if pattern.iter().all(|row| row.iter().all(|&b| b)) {
            return Ok(());
        }
        if power > limit {
            return Err(NetError::NotPrimitive(limit));
        }
        let mut next = vec![vec![false; n]; n];
        for i in 0..n {
            for k in 0..n {
                if pattern[i][k] {
                    for j in 0..n {
                        if pattern[k][j] {
                            next[i][j] = true;
                        }
                    }
                }
            }
        }
        pattern = next;
        power *= 2;
    }
}

/// Second eigenvalue of `W` with left and right eigenvector data.
///
/// For a real second eigenvalue `u` and `v` are unit eigenvectors with
/// `v^T u > 0`. For a complex conjugate pair they are unit real vectors
/// spanning the dominant invariant subspaces of the deflated `W` and `W^T`,
/// while `node_weights` carries the entrywise eigenvector products
/// `v^i u^i / (v^T u)` evaluated on the complex pair itself, where the
/// arbitrary phases cancel.
#[derive(Debug, Clone)]
pub struct SpectralParams {
    pub lambda2: Complex64,
    pub lambda2_modulus: f64,
    pub u: DVector<f64>,
    pub v: DVector<f64>,
    weights: DVector<f64>,
}

impl SpectralParams {
    /// Per-node weights `v^i u^i / (v^T u)`; they sum to 1.
    pub fn node_weights(&self) -> Result<DVector<f64>, NetError> {
        Ok(self.weights.clone())
    }
}

fn weights_from_pair(
    u: &DVector<Complex64>,
    v: &DVector<Complex64>,
) -> Result<DVector<f64>, NetError> {
    // transpose product, not conjugated: scaling either vector by a complex
    // phase cancels between numerator and denominator
    let dot: Complex64 = u.iter().zip(v.iter()).map(|(a, b)| a * b).sum();
    if dot.norm() < 1e-12 {
        return Err(NetError::NoConvergence(0));
    }
    Ok(DVector::from_iterator(
        u.len(),
        u.iter().zip(v.iter()).map(|(a, b)| (a * b / dot).re),
    ))
}

/// Centralized computation of [`SpectralParams`].
///
/// Symmetric topologies go through the Jacobi eigendecomposition; directed
/// ones use power iteration on the deflated matrix with a 2x2 Rayleigh block
/// to resolve complex pairs.
pub fn spectral_params(topo: &Topology) -> Result<SpectralParams, NetError> {
    let n = topo.node_count();
    if topo.is_symmetric() {
        let (lam, vecs) = linalg::jacobi_eigen(topo.weights())?;
        // drop the Perron eigenvalue (the one closest to 1), keep max modulus
        let mut perron = 0;
        for k in 0..n {
            if (lam[k] - 1.0).abs() < (lam[perron] - 1.0).abs() {
                perron = k;
            }
        }
        let mut best: Option<usize> = None;
        for k in 0..n {
            if k == perron {
                continue;
            }
            if best.map_or(true, |b| lam[k].abs() > lam[b].abs()) {
                best = Some(k);
            }
        }
        let k = best.expect("n >= 3 guarantees a second eigenvalue");
        let mut u: DVector<f64> = vecs.column(k).into();
        canonical_sign(&mut u);
        let uc = u.map(|x| Complex64::new(x, 0.0));
        let weights = weights_from_pair(&uc, &uc)?;
        return Ok(SpectralParams {
            lambda2: Complex64::new(lam[k], 0.0),
            lambda2_modulus: lam[k].abs(),
            u: u.clone(),
            v: u,
            weights,
        });
    }

    let deflated = topo.deflated();
    let right = dominant_of_deflated(&deflated)?;
    let left = dominant_of_deflated(&deflated.transpose())?;
    let weights = weights_from_pair(&right.eigenvector, &left.eigenvector)?;
    let mut u = right.representative;
    let mut v = left.representative;
    canonical_sign(&mut u);
    if v.dot(&u) < 0.0 {
        v = -v;
    }
    Ok(SpectralParams {
        lambda2: right.lambda,
        lambda2_modulus: right.lambda.norm(),
        u,
        v,
        weights,
    })
}

fn canonical_sign(x: &mut DVector<f64>) {
    let mut imax = 0;
    for i in 0..x.len() {
        if x[i].abs() > x[imax].abs() {
            imax = i;
        }
    }
    if x[imax] < 0.0 {
        *x = -&*x;
    }
}

struct DominantPair {
    lambda: Complex64,
    /// Unit real vector in the dominant invariant subspace.
    representative: DVector<f64>,
    /// Complex eigenvector (real for a real eigenvalue).
    eigenvector: DVector<Complex64>,
}

/// Dominant eigenvalue of the deflated matrix by power iteration, resolving
/// complex pairs through the 2x2 Rayleigh block on consecutive iterates.
fn dominant_of_deflated(v_mat: &DMatrix<f64>) -> Result<DominantPair, NetError> {
    let n = v_mat.nrows();
    let mut rng = PortableRng::new(0x5EED, STREAM_POWER);
    let mut x = DVector::from_fn(n, |_, _| rng.uniform_symmetric());
    let nx = x.norm();
    if nx == 0.0 {
        x[0] = 1.0;
    } else {
        x /= nx;
    }
    const MAX_ITERS: usize = 50_000;
    const TOL: f64 = 1e-13;
    let mut prev = x.clone();
    for iter in 0..MAX_ITERS {
        let y = v_mat * &x;
        let ny = y.norm();
        if ny < 1e-250 {
            // deflated matrix annihilates the iterate: second eigenvalue 0
            return Ok(DominantPair {
                lambda: Complex64::new(0.0, 0.0),
                representative: x.clone(),
                eigenvector: x.map(|t| Complex64::new(t, 0.0)),
            });
        }
        let ynorm = &y / ny;

        // Rayleigh block on the span of the last two iterates
        let q1 = x.clone();
        let mut q2 = &prev - &q1 * q1.dot(&prev);
        let q2n = q2.norm();
        if q2n < 1e-12 {
            // effectively one-dimensional: real dominant eigenvalue
            let lam = x.dot(&y);
            if (&y - &x * lam).norm() <= TOL.max(1e-11) {
                return Ok(DominantPair {
                    lambda: Complex64::new(lam, 0.0),
                    representative: x.clone(),
                    eigenvector: x.map(|t| Complex64::new(t, 0.0)),
                });
            }
        } else {
            q2 /= q2n;
            let vq1 = v_mat * &q1;
            let vq2 = v_mat * &q2;
            let s11 = q1.dot(&vq1);
            let s12 = q1.dot(&vq2);
            let s21 = q2.dot(&vq1);
            let s22 = q2.dot(&vq2);
            // residual of the 2-dimensional invariant subspace
            let r1 = (&vq1 - &q1 * s11 - &q2 * s21).norm();
            let r2 = (&vq2 - &q1 * s12 - &q2 * s22).norm();
            if r1.max(r2) <= 1e-11 && iter > 2 {
                let tr = s11 + s22;
                let det = s11 * s22 - s12 * s21;
                let disc = tr * tr / 4.0 - det;
                if disc < 0.0 {
                    let lam = Complex64::new(tr / 2.0, (-disc).sqrt());
                    // complex eigenvector of the 2x2 block lifted back
                    let (a, b) = if s21.abs() >= s12.abs() {
                        (lam - s22, Complex64::new(s21, 0.0))
                    } else {
                        (Complex64::new(s12, 0.0), lam - s11)
                    };
                    let mut vec = DVector::from_fn(n, |i, _| a * q1[i] + b * q2[i]);
                    let norm = vec.norm();
                    if norm > 1e-300 {
                        vec /= Complex64::new(norm, 0.0);
                    }
                    return Ok(DominantPair {
                        lambda: lam,
                        representative: ynorm,
                        eigenvector: vec,
                    });
                }
                let r = disc.sqrt();
                let l1 = tr / 2.0 + r;
                let l2 = tr / 2.0 - r;
                let l = if l1.abs() >= l2.abs() { l1 } else { l2 };
                let (a, b) = if s21.abs() >= s12.abs() {
                    (l - s22, s21)
                } else {
                    (s12, l - s11)
                };
                let mut w = &q1 * a + &q2 * b;
                let wn = w.norm();
                if wn > 1e-14 {
                    w /= wn;
                } else {
                    w = ynorm;
                }
                return Ok(DominantPair {
                    lambda: Complex64::new(l, 0.0),
                    representative: w.clone(),
                    eigenvector: w.map(|t| Complex64::new(t, 0.0)),
                });
            }
        }
        prev = x;
        x = ynorm;
    }
    Err(NetError::NoConvergence(MAX_ITERS))
}

/// Result of the distributed second-eigenvalue estimation.
#[derive(Debug, Clone)]
pub struct PowerEstimate {
    /// Common estimate of the second eigenvalue modulus.
    pub lambda2: f64,
    /// Per-node copies of the estimate. Every node agrees because the norms
    /// are evaluated on the global iterate by the simulator.
    pub per_node: Vec<f64>,
    /// Final normalized iterate, an eigenvector estimate.
    pub eigenvector: DVector<f64>,
}

/// Distributed ratio-of-norms estimator of the second eigenvalue, for
/// undirected topologies.
///
/// Two recursions run in parallel: the main iterate mixes through `W` and
/// subtracts the per-node average tracker, and the tracker itself mixes
/// through `W`. The start vector is drawn locally at each node and then
/// centered: the tracker conserves the mean component and would otherwise
/// feed it back every round, producing a linearly growing bias.
pub fn power_estimate_lambda2(
    topo: &Topology,
    seed: u64,
    rounds: usize,
) -> Result<PowerEstimate, NetError> {
    let asym = topo.symmetry_error();
    if asym > 1e-12 {
        return Err(NetError::NotSymmetric(asym));
    }
    if rounds < 2 {
        return Err(NetError::TooFewRounds(rounds));
    }
    let n = topo.node_count();
    let w = topo.weights();
    let mut rng = PortableRng::new(seed, STREAM_POWER);
    let mut u_hat = DVector::from_fn(n, |_, _| rng.uniform_symmetric());
    let mean = u_hat.sum() / n as f64;
    u_hat.add_scalar_mut(-mean);
    if u_hat.norm() < 1e-12 {
        u_hat[0] = 1.0;
        u_hat[n - 1] = -1.0;
    }
    let mut tracker = u_hat.clone();

    let mut estimate = 0.0;
    let mut prev_norm = u_hat.norm();
    // decay of the iterate relative to the start, in log scale
    let mut log_decay = 0.0f64;
    for _ in 1..rounds {
        let next = w * &u_hat - &tracker;
        tracker = w * &tracker;
        let cur_norm = next.norm();
        if cur_norm < 1e-13 * prev_norm || cur_norm < 1e-250 {
            // one-step collapse: the deflated matrix annihilates the iterate
            return Ok(PowerEstimate {
                lambda2: 0.0,
                per_node: vec![0.0; n],
                eigenvector: u_hat,
            });
        }
        estimate = cur_norm / prev_norm;
        log_decay += estimate.ln();
        prev_norm = cur_norm;
        u_hat = next;
        // keep the magnitude in floating range without changing the ratio
        if prev_norm < 1e-100 || prev_norm > 1e100 {
            u_hat /= prev_norm;
            tracker /= prev_norm;
            prev_norm = 1.0;
        }
        // once the signal has contracted twelve orders the rounding residue
        // of the tracker subtraction starts to dominate the ratio; keep the
        // last clean estimate
        if log_decay < -12.0 * std::f64::consts::LN_10 {
            break;
        }
    }
    let eigenvector = &u_hat / u_hat.norm();
    Ok(PowerEstimate {
        lambda2: estimate,
        per_node: vec![estimate; n],
        eigenvector,
    })
}
