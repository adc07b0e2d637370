//! Primal active-set method for convex quadratics with lower bounds on a
//! subset of the variables:
//!
//! ```text
//! min ½ xᵀ H x + cᵀ x   subject to   x_i ≥ lower  for i in bounded
//! ```

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// KKT residuals, each scaled by `max(1, ‖H‖_max·‖x‖_∞ + ‖c‖_∞)`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct KktResiduals {
    pub stationarity: f64,
    pub feasibility: f64,
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.stationarity.max(self.feasibility).max(self.complementarity)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub x: DVector<f64>,
    /// Multipliers of the bound constraints, index-aligned with `bounded`.
    pub multipliers: Vec<f64>,
    pub active: Vec<bool>,
    pub iterations: usize,
    pub kkt: KktResiduals,
}

fn solve_free(h: &DMatrix<f64>, rhs: &DVector<f64>, free: &[usize]) -> Result<DVector<f64>> {
    let n = free.len();
    if n == 0 {
        return Ok(DVector::zeros(0));
    }
    let mut sub = DMatrix::zeros(n, n);
    for (a, &i) in free.iter().enumerate() {
        for (b, &j) in free.iter().enumerate() {
            sub[(a, b)] = h[(i, j)];
        }
    }
    let max_diag = (0..n).map(|i| sub[(i, i)].abs()).fold(0.0, f64::max);
    let ridge = 1e-12 * max_diag.max(1e-300);
    for i in 0..n {
        sub[(i, i)] += ridge;
    }
    let chol = sub
        .cholesky()
        .ok_or_else(|| Error::Numeric("normal matrix is not positive definite".into()))?;
    let r = DVector::from_iterator(n, free.iter().map(|&i| rhs[i]));
    Ok(chol.solve(&r))
}

/// Gradient `H x + c`.
fn gradient(h: &DMatrix<f64>, c: &DVector<f64>, x: &DVector<f64>) -> DVector<f64> {
    h * x + c
}

pub fn kkt_residuals(
    h: &DMatrix<f64>,
    c: &DVector<f64>,
    x: &DVector<f64>,
    bounded: &[usize],
    lower: f64,
) -> KktResiduals {
    let g = gradient(h, c, x);
    let scale = (h.amax() * x.amax() + c.amax()).max(1.0);
    let mut is_bounded = vec![false; x.len()];
    for &i in bounded {
        is_bounded[i] = true;
    }
    let (mut st, mut fe, mut co) = (0.0f64, 0.0f64, 0.0f64);
    for i in 0..x.len() {
        if is_bounded[i] {
            // the multiplier of x_i ≥ lower is g_i
            st = st.max((-g[i]).max(0.0));
            fe = fe.max(lower - x[i]);
            co = co.max((g[i] * (x[i] - lower)).abs());
        } else {
            st = st.max(g[i].abs());
        }
    }
    KktResiduals {
        stationarity: st / scale,
        feasibility: fe.max(0.0) / scale,
        complementarity: co / (scale * x.amax().max(1.0)),
    }
}

/// Minimizes the bounded quadratic. Starts from the unconstrained minimizer
/// clamped onto the bounds, then adds blocking bounds and releases bounds
/// with negative multipliers one at a time.
pub fn solve_bounded(
    h: &DMatrix<f64>,
    c: &DVector<f64>,
    bounded: &[usize],
    lower: f64,
    max_iterations: usize,
) -> Result<QpSolution> {
    let n = c.len();
    if h.nrows() != n || h.ncols() != n {
        return Err(Error::InvalidInput("quadratic and linear terms differ in size".into()));
    }
    let mut fixed = vec![false; n];
    let mut is_bounded = vec![false; n];
    for &i in bounded {
        is_bounded[i] = true;
    }
    let all: Vec<usize> = (0..n).collect();
    let mut x = solve_free(h, &(-c), &all)?;
    for &i in bounded {
        if x[i] < lower {
            x[i] = lower;
            fixed[i] = true;
        }
    }
    let tol = 1e-12 * (h.amax() * x.amax() + c.amax()).max(1.0);
    let mut iterations = 0;
    loop {
        iterations += 1;
        if iterations > max_iterations {
            return Err(Error::Numeric(format!(
                "active set did not converge in {max_iterations} iterations"
            )));
        }
        let free: Vec<usize> = (0..n).filter(|&i| !fixed[i]).collect();
        // H_FF x_F = −(c_F + H_FW x_W)
        let mut rhs = -c.clone();
        for j in (0..n).filter(|&j| fixed[j]) {
            for &i in &free {
                rhs[i] -= h[(i, j)] * x[j];
            }
        }
        let xf = solve_free(h, &rhs, &free)?;
        let mut alpha = 1.0;
        let mut blocking = None;
        for (a, &i) in free.iter().enumerate() {
            if is_bounded[i] && xf[a] < lower {
                let step = (x[i] - lower) / (x[i] - xf[a]);
                if step < alpha {
                    alpha = step;
                    blocking = Some(i);
                }
            }
        }
        for (a, &i) in free.iter().enumerate() {
            x[i] += alpha * (xf[a] - x[i]);
        }
        if let Some(i) = blocking {
            x[i] = lower;
            fixed[i] = true;
            continue;
        }
        let g = gradient(h, c, &x);
        let release = (0..n)
            .filter(|&i| fixed[i] && g[i] < -tol)
            .min_by(|&a, &b| g[a].total_cmp(&g[b]));
        match release {
            Some(i) => fixed[i] = false,
            None => break,
        }
    }
    let g = gradient(h, c, &x);
    Ok(QpSolution {
        multipliers: bounded
            .iter()
            .map(|&i| if fixed[i] { g[i].max(0.0) } else { 0.0 })
            .collect(),
        active: bounded.iter().map(|&i| fixed[i]).collect(),
        kkt: kkt_residuals(h, c, &x, bounded, lower),
        iterations,
        x,
    })
}
