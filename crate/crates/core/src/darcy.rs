//! Synthetic steady-state Darcy flow: `-div(a grad u) = 1` on the unit
//! square with zero Dirichlet boundary, solved by finite differences.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::Sample;
use crate::error::{invalid, AmqError, Result};
use crate::graph::{build_knn_graph, MeshGraph};
use crate::tensor::Matrix;

pub const COEFF_LOW: f64 = 3.0;
pub const COEFF_HIGH: f64 = 12.0;
pub const SOLVER_TOLERANCE: f64 = 1e-8;

/// Smoothing kernel width as a fraction of the grid size.
const SMOOTHING_SIGMA: f64 = 0.06;

/// One solved instance on an `n x n` node grid (boundary included),
/// stored row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DarcySample {
    pub n: usize,
    pub coefficient: Vec<f64>,
    pub solution: Vec<f64>,
    pub seed: u64,
}

pub fn generate_darcy_sample(n: usize, seed: u64) -> Result<DarcySample> {
    if n < 8 {
        return invalid(format!("grid size {n} is below 8"));
    }
    let coefficient = random_coefficient(n, seed);
    let solution = solve_darcy(&coefficient, n)?;
    Ok(DarcySample { n, coefficient, solution, seed })
}

/// Piecewise-constant field from thresholding Gaussian-smoothed white noise.
pub fn random_coefficient(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise: Vec<f64> = (0..n * n).map(|_| StandardNormal.sample(&mut rng)).collect();
    let sigma = (SMOOTHING_SIGMA * n as f64).max(0.5);
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|t| (-(t * t) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let blur = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut dst = vec![0.0; n * n];
        for r in 0..n {
            for c in 0..n {
                let mut acc = 0.0;
                for (t, w) in (-radius..=radius).zip(&kernel) {
                    let (rr, cc) = if horizontal { (r as isize, c as isize + t) } else { (r as isize + t, c as isize) };
                    let rr = rr.clamp(0, n as isize - 1) as usize;
                    let cc = cc.clamp(0, n as isize - 1) as usize;
                    acc += w * src[rr * n + cc];
                }
                dst[r * n + c] = acc;
            }
        }
        dst
    };
    let smooth = blur(&blur(&noise, true), false);
    smooth.iter().map(|&v| if v >= 0.0 { COEFF_HIGH } else { COEFF_LOW }).collect()
}

/// Five-point operator with harmonic-mean face coefficients, acting on
/// interior unknowns; boundary values are zero.
struct DarcyOperator {
    n: usize,
    inv_h2: f64,
    coef: Vec<f64>,
}

impl DarcyOperator {
    fn new(coef: &[f64], n: usize) -> Self {
        let h = 1.0 / (n - 1) as f64;
        Self { n, inv_h2: 1.0 / (h * h), coef: coef.to_vec() }
    }

    fn face(&self, p: usize, q: usize) -> f64 {
        let (a, b) = (self.coef[p], self.coef[q]);
        2.0 * a * b / (a + b)
    }

    fn is_interior(&self, p: usize) -> bool {
        let (r, c) = (p / self.n, p % self.n);
        r > 0 && c > 0 && r < self.n - 1 && c < self.n - 1
    }

    fn neighbours(&self, p: usize) -> [usize; 4] {
        [p - self.n, p + self.n, p - 1, p + 1]
    }

    fn diagonal(&self, p: usize) -> f64 {
        self.neighbours(p).iter().map(|&q| self.face(p, q)).sum::<f64>() * self.inv_h2
    }

    /// `y = A x` on interior nodes; `y` is zero on the boundary.
    fn apply(&self, x: &[f64], y: &mut [f64]) {
        for p in 0..self.n * self.n {
            y[p] = if self.is_interior(p) {
                let mut acc = 0.0;
                for q in self.neighbours(p) {
                    let xq = if self.is_interior(q) { x[q] } else { 0.0 };
                    acc += self.face(p, q) * (x[p] - xq);
                }
                acc * self.inv_h2
            } else {
                0.0
            };
        }
    }
}

/// Max-norm of `A u - 1` over interior nodes.
pub fn darcy_residual(coef: &[f64], u: &[f64], n: usize) -> f64 {
    let op = DarcyOperator::new(coef, n);
    let mut au = vec![0.0; n * n];
    op.apply(u, &mut au);
    (0..n * n).filter(|&p| op.is_interior(p)).map(|p| (au[p] - 1.0).abs()).fold(0.0, f64::max)
}

/// Solves the discrete problem by Jacobi-preconditioned conjugate
/// gradients to `SOLVER_TOLERANCE` in the max-norm residual.
pub fn solve_darcy(coef: &[f64], n: usize) -> Result<Vec<f64>> {
    if n < 3 || coef.len() != n * n {
        return invalid(format!("{} coefficients for a {n}x{n} grid", coef.len()));
    }
    if let Some(a) = coef.iter().find(|a| !(a.is_finite() && **a > 0.0)) {
        return invalid(format!("coefficient {a} is not positive"));
    }
    let op = DarcyOperator::new(coef, n);
    let interior: Vec<bool> = (0..n * n).map(|p| op.is_interior(p)).collect();
    let inv_diag: Vec<f64> =
        (0..n * n).map(|p| if interior[p] { 1.0 / op.diagonal(p) } else { 0.0 }).collect();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();

    let mut u = vec![0.0; n * n];
    let mut r: Vec<f64> = interior.iter().map(|&i| if i { 1.0 } else { 0.0 }).collect();
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(a, b)| a * b).collect();
    let mut p = z.clone();
    let mut ap = vec![0.0; n * n];
    let mut rz = dot(&r, &z);
    let max_iter = 20 * n * n;
    for _ in 0..max_iter {
        op.apply(&p, &mut ap);
        let alpha = rz / dot(&p, &ap);
        for k in 0..n * n {
            u[k] += alpha * p[k];
            r[k] -= alpha * ap[k];
        }
        let restart = r.iter().fold(0.0f64, |m, v| m.max(v.abs())) <= 0.1 * SOLVER_TOLERANCE;
        if restart {
            // the recursive residual drifts; confirm against the true one
            if darcy_residual(coef, &u, n) <= SOLVER_TOLERANCE {
                return Ok(u);
            }
            op.apply(&u, &mut ap);
            for k in 0..n * n {
                r[k] = if interior[k] { 1.0 - ap[k] } else { 0.0 };
            }
        }
        for k in 0..n * n {
            z[k] = r[k] * inv_diag[k];
        }
        let rz_new = dot(&r, &z);
        let beta = if restart { 0.0 } else { rz_new / rz };
        rz = rz_new;
        for k in 0..n * n {
            p[k] = z[k] + beta * p[k];
        }
    }
    Err(AmqError::NoConvergence { iterations: max_iter, residual: darcy_residual(coef, &u, n) })
}

/// Subsamples every `stride`-th grid node in both directions and connects
/// the result as a k-nearest-neighbour graph with self-loops. Node
/// features are the coefficient, targets the solution.
pub fn grid_to_graph(sample: &DarcySample, stride: usize, k: usize) -> Result<Sample> {
    if stride == 0 {
        return invalid("stride must be at least 1");
    }
    let n = sample.n;
    let h = 1.0 / (n - 1) as f64;
    let sites: Vec<usize> = (0..n).step_by(stride).collect();
    let m = sites.len() * sites.len();
    let (mut pos, mut feat, mut targ) = (Vec::with_capacity(2 * m), Vec::with_capacity(m), Vec::with_capacity(m));
    for &r in &sites {
        for &c in &sites {
            pos.extend([c as f64 * h, r as f64 * h]);
            feat.push(sample.coefficient[r * n + c]);
            targ.push(sample.solution[r * n + c]);
        }
    }
    let positions = Matrix::from_vec(m, 2, pos)?;
    let edges = build_knn_graph(&positions, k, true)?;
    let graph = MeshGraph::new(positions, Matrix::column(&feat), edges, None)?;
    Ok(Sample { graph, targets: Matrix::column(&targ), seed: sample.seed })
}
