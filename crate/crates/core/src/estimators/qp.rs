//! Dense convex QP `min 1/2 x'Hx + g'x  s.t.  Ax <= b` by a primal-dual
//! Mehrotra predictor-corrector interior point method.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct QpProblem {
    pub h: DMatrix<f64>,
    pub g: DVector<f64>,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QpDiagnostics {
    pub iterations: usize,
    /// `max(0, max(Ax - b))`.
    pub primal_residual: f64,
    /// `||Hx + g + A'l||_inf / (1 + ||g||_inf)`.
    pub dual_residual: f64,
    /// `max |l_i (Ax - b)_i|`.
    pub complementarity: f64,
    /// `max(0, -min l)`.
    pub dual_infeasibility: f64,
}

impl QpDiagnostics {
    pub fn max_residual(&self) -> f64 {
        self.primal_residual
            .max(self.dual_residual)
            .max(self.complementarity)
            .max(self.dual_infeasibility)
    }
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub lambda: DVector<f64>,
    pub objective: f64,
    pub diagnostics: QpDiagnostics,
}

#[derive(Debug, Clone, Copy)]
pub struct QpOptions {
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for QpOptions {
    fn default() -> Self {
        Self {
            tolerance: 1e-9,
            max_iterations: 200,
        }
    }
}

impl QpProblem {
    pub fn n_vars(&self) -> usize {
        self.g.len()
    }

    pub fn n_constraints(&self) -> usize {
        self.b.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.g.len();
        if self.h.nrows() != n || self.h.ncols() != n {
            return Err(Error::dim("QP Hessian", n, self.h.nrows()));
        }
        if self.a.ncols() != n && self.a.nrows() > 0 {
            return Err(Error::dim("QP constraint columns", n, self.a.ncols()));
        }
        if self.a.nrows() != self.b.len() {
            return Err(Error::dim("QP constraint rows", self.a.nrows(), self.b.len()));
        }
        let asym = (&self.h - self.h.transpose()).amax();
        if asym > 1e-10 * self.h.amax().max(1.0) {
            return Err(Error::Numerical(format!("QP Hessian is not symmetric (deviation {asym:.3e})")));
        }
        Ok(())
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.h * x)) + self.g.dot(x)
    }

    /// KKT residuals of `(x, lambda)` on this problem.
    pub fn diagnostics(&self, x: &DVector<f64>, lambda: &DVector<f64>, iterations: usize) -> QpDiagnostics {
        let slack = &self.a * x - &self.b;
        let stat = &self.h * x + &self.g + self.a.tr_mul(lambda);
        let gnorm = self.g.amax();
        QpDiagnostics {
            iterations,
            primal_residual: slack.iter().fold(0.0f64, |m, v| m.max(*v)),
            dual_residual: stat.amax() / (1.0 + gnorm),
            complementarity: lambda
                .iter()
                .zip(slack.iter())
                .fold(0.0f64, |m, (l, s)| m.max((l * s).abs())),
            dual_infeasibility: lambda.iter().fold(0.0f64, |m, l| m.max(-l)),
        }
    }
}

fn factor(mut m: DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    let n = m.nrows();
    let diag_max = (0..n).map(|i| m[(i, i)].abs()).fold(0.0f64, f64::max).max(1e-300);
    let mut shift = 0.0;
    for _ in 0..12 {
        if let Some(c) = m.clone().cholesky() {
            return Ok(c);
        }
        let next = if shift == 0.0 { 1e-14 * diag_max } else { shift * 100.0 };
        for i in 0..n {
            m[(i, i)] += next - shift;
        }
        shift = next;
    }
    Err(Error::Numerical("interior point normal matrix could not be factored".into()))
}

fn max_step(v: &DVector<f64>, dv: &DVector<f64>) -> f64 {
    v.iter()
        .zip(dv.iter())
        .filter(|(_, d)| **d < 0.0)
        .map(|(x, d)| -x / d)
        .fold(1.0f64, f64::min)
}

/// Solves the QP; the KKT residuals in the returned diagnostics refer to the
/// original (unscaled) problem.
pub fn solve_qp(p: &QpProblem, opts: &QpOptions) -> Result<QpSolution> {
    p.validate()?;
    let n = p.n_vars();
    let m = p.n_constraints();

    // Internal scaling: unit-norm constraint rows, O(1) objective.
    let row_scale = DVector::from_iterator(
        m,
        (0..m).map(|i| {
            let r = p.a.row(i).amax();
            if r > 0.0 {
                1.0 / r
            } else {
                1.0
            }
        }),
    );
    let obj_scale = p.h.amax().max(p.g.amax()).max(1e-300);
    let h = &p.h / obj_scale;
    let g = &p.g / obj_scale;
    let mut a = p.a.clone();
    for i in 0..m {
        a.row_mut(i).scale_mut(row_scale[i]);
    }
    let b = p.b.component_mul(&row_scale);
    let to_original = |lam: &DVector<f64>| lam.component_mul(&row_scale) * obj_scale;

    if m == 0 {
        let c = factor(h.clone())?;
        let x = c.solve(&(-&g));
        let lambda = DVector::zeros(0);
        let diagnostics = p.diagnostics(&x, &lambda, 1);
        if diagnostics.dual_residual > opts.tolerance.max(1e-8) {
            return Err(Error::QpUnbounded("objective is unbounded below without constraints".into()));
        }
        return Ok(QpSolution {
            objective: p.objective(&x),
            x,
            lambda,
            diagnostics,
        });
    }

    let mut x = DVector::zeros(n);
    let mut s = (&b - &a * &x).map(|v| v.abs().max(1.0));
    let mut lam = DVector::from_element(m, 1.0);
    let mut last = None;

    for it in 0..opts.max_iterations {
        let lam_o = to_original(&lam);
        let diag = p.diagnostics(&x, &lam_o, it);
        if diag.max_residual() <= opts.tolerance {
            return Ok(QpSolution {
                objective: p.objective(&x),
                x,
                lambda: lam_o,
                diagnostics: diag,
            });
        }
        if x.amax() > 1e12 {
            return Err(Error::QpUnbounded(format!("iterates diverged after {it} iterations")));
        }
        if lam.amax() > 1e14 && diag.primal_residual > opts.tolerance {
            return Err(Error::QpInfeasible(format!(
                "dual iterates diverged with primal residual {:.3e}",
                diag.primal_residual
            )));
        }
        last = Some(diag);

        let r_d = &h * &x + &g + a.tr_mul(&lam);
        let r_p = &a * &x + &s - &b;
        let mu = s.dot(&lam) / m as f64;
        let d = lam.component_div(&s);

        let mut ad = a.clone();
        for i in 0..m {
            ad.row_mut(i).scale_mut(d[i]);
        }
        let normal = &h + a.tr_mul(&ad);
        let chol = factor(normal)?;

        let solve = |r_c: &DVector<f64>| {
            let rhs_inner = d.component_mul(&r_p) - r_c.component_div(&s);
            let rhs = -&r_d - a.tr_mul(&rhs_inner);
            let dx = chol.solve(&rhs);
            let dlam = d.component_mul(&(&a * &dx + &r_p)) - r_c.component_div(&s);
            let ds = -(r_c + s.component_mul(&dlam)).component_div(&lam);
            (dx, dlam, ds)
        };

        // Predictor.
        let r_c = s.component_mul(&lam);
        let (_, dlam_a, ds_a) = solve(&r_c);
        let alpha_p = max_step(&s, &ds_a);
        let alpha_d = max_step(&lam, &dlam_a);
        let mu_aff = (&s + &ds_a * alpha_p).dot(&(&lam + &dlam_a * alpha_d)) / m as f64;
        let sigma = (mu_aff / mu).powi(3).clamp(0.0, 1.0);

        // Corrector.
        let r_c = s.component_mul(&lam) + ds_a.component_mul(&dlam_a) - DVector::from_element(m, sigma * mu);
        let (dx, dlam, ds) = solve(&r_c);
        let common = (0.99 * max_step(&s, &ds).min(max_step(&lam, &dlam))).min(1.0);
        x += &dx * common;
        s += &ds * common;
        lam += &dlam * common;
        s.iter_mut().for_each(|v| *v = v.max(1e-300));
        lam.iter_mut().for_each(|v| *v = v.max(1e-300));
    }
    let diag = last.unwrap_or_else(|| p.diagnostics(&x, &to_original(&lam), opts.max_iterations));
    Err(Error::QpNotConverged {
        iterations: opts.max_iterations,
        primal: diag.primal_residual,
        dual: diag.dual_residual,
        complementarity: diag.complementarity,
    })
}
