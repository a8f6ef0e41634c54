//! Finite feature spaces spanned by RKHS representers.
//!
//! Every estimator here minimizes a weighted fit of linear functionals of the
//! coefficient field plus its squared RKHS norm, with optional constraints on
//! point or derivative evaluations at nodal points. The optimum lies in the
//! span of the representers of those functionals, so the problem is solved
//! over that span: a Gram matrix, the functional values of each feature, and
//! the feature values at the sample points.

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernels::{CoefficientKernel, OperatorKernel};

/// A point or derivative evaluation functional `c_j(x)` or `dc_j/dp_l (x)`;
/// `j` and `l` are positions in the kernel outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalFeature {
    pub point: Vec<f64>,
    pub j: usize,
    pub l: Option<usize>,
    /// Nodal index when the point is a nodal point.
    pub node: Option<usize>,
}

/// Inner product of two evaluation representers.
fn pair(kernel: &CoefficientKernel, a: &EvalFeature, b: &EvalFeature, buf: &mut [f64]) -> f64 {
    let m = kernel.n_outputs();
    match (a.l, b.l) {
        (None, None) => kernel.block_into(&a.point, &b.point, buf),
        (None, Some(lb)) => kernel.dblock_into(&a.point, &b.point, lb, buf),
        (Some(la), None) => {
            kernel.dblock_into(&b.point, &a.point, la, buf);
            return buf[b.j * m + a.j];
        }
        (Some(la), Some(lb)) => kernel.d2block_into(&a.point, &b.point, la, lb, buf),
    }
    buf[a.j * m + b.j]
}

/// Values of the representer of `f` at `x`, written as an `m`-vector.
fn representer_at(kernel: &CoefficientKernel, f: &EvalFeature, x: &[f64], buf: &mut [f64], out: &mut [f64]) {
    let m = kernel.n_outputs();
    match f.l {
        None => kernel.block_into(x, &f.point, buf),
        Some(l) => kernel.dblock_into(x, &f.point, l, buf),
    }
    for a in 0..m {
        out[a] = buf[a * m + f.j];
    }
}

#[derive(Debug, Clone)]
pub struct FeatureSpace {
    pub outputs: Vec<usize>,
    /// Number of leading fit-representer features (zero in centers mode).
    pub n_fit: usize,
    /// Evaluation features: centers (centers mode) followed by constraint features.
    pub evals: Vec<EvalFeature>,
    /// Number of leading `evals` that are plain centers, not constrained.
    pub n_centers: usize,
    pub gram: DMatrix<f64>,
    /// Fit functional values, `rows x F`.
    pub fit_eval: DMatrix<f64>,
    /// Constraint functional values, `Q x F`.
    pub cons_eval: DMatrix<f64>,
    /// Field values at samples, `(N m) x F`, sample-major.
    pub sample_eval: DMatrix<f64>,
    /// Fit weights on the field at samples, `rows x (N m)`.
    pub v_out: DMatrix<f64>,
}

impl FeatureSpace {
    pub fn n_features(&self) -> usize {
        self.gram.nrows()
    }

    pub fn n_constraints(&self) -> usize {
        self.evals.len() - self.n_centers
    }

    /// Fit functionals `L_r(c) = sum_k v_out[r, k m + a] c_a(p_k)` represented
    /// exactly by their representers, plus constraint evaluation features.
    pub fn representer(
        kernel: &CoefficientKernel,
        samples: &[Vec<f64>],
        v_out: DMatrix<f64>,
        constraints: Vec<EvalFeature>,
    ) -> Result<Self> {
        let m = kernel.n_outputs();
        let n = samples.len();
        if v_out.ncols() != n * m {
            return Err(Error::dim("fit weight columns", n * m, v_out.ncols()));
        }
        let r = v_out.nrows();
        // V K, built one sample column block at a time.
        let blocks: Vec<DMatrix<f64>> = (0..n)
            .into_par_iter()
            .map(|kp| {
                let mut kcol = DMatrix::zeros(n * m, m);
                let mut buf = vec![0.0; m * m];
                for (k, pk) in samples.iter().enumerate() {
                    kernel.block_into(pk, &samples[kp], &mut buf);
                    for a in 0..m {
                        for b in 0..m {
                            kcol[(k * m + a, b)] = buf[a * m + b];
                        }
                    }
                }
                &v_out * kcol
            })
            .collect();
        let mut vk = DMatrix::zeros(r, n * m);
        for (kp, blk) in blocks.iter().enumerate() {
            vk.columns_mut(kp * m, m).copy_from(blk);
        }
        let g_ff = &vk * v_out.transpose();
        let c = constraint_samples(kernel, samples, &constraints);
        let g_fq = &v_out * &c;
        let g_qq = eval_gram(kernel, &constraints);
        let q = constraints.len();
        let f = r + q;
        let mut gram = DMatrix::zeros(f, f);
        gram.view_mut((0, 0), (r, r)).copy_from(&g_ff);
        gram.view_mut((0, r), (r, q)).copy_from(&g_fq);
        gram.view_mut((r, 0), (q, r)).copy_from(&g_fq.transpose());
        gram.view_mut((r, r), (q, q)).copy_from(&g_qq);
        symmetrize(&mut gram);
        let mut sample_eval = DMatrix::zeros(n * m, f);
        sample_eval.view_mut((0, 0), (n * m, r)).copy_from(&vk.transpose());
        sample_eval.view_mut((0, r), (n * m, q)).copy_from(&c);
        let fit_eval = gram.rows(0, r).into_owned();
        let cons_eval = gram.rows(r, q).into_owned();
        Ok(Self {
            outputs: kernel.outputs().to_vec(),
            n_fit: r,
            evals: constraints,
            n_centers: 0,
            gram,
            fit_eval,
            cons_eval,
            sample_eval,
            v_out,
        })
    }

    /// Point-evaluation features at explicit sample centers, plus constraint
    /// features. The fit is expressed through the field values at samples.
    pub fn centers(
        kernel: &CoefficientKernel,
        samples: &[Vec<f64>],
        center_indices: &[usize],
        v_out: DMatrix<f64>,
        constraints: Vec<EvalFeature>,
    ) -> Result<Self> {
        let m = kernel.n_outputs();
        let n = samples.len();
        if v_out.ncols() != n * m {
            return Err(Error::dim("fit weight columns", n * m, v_out.ncols()));
        }
        let mut evals = Vec::with_capacity(center_indices.len() * m + constraints.len());
        for &k in center_indices {
            if k >= n {
                return Err(Error::Config(format!("center index {k} out of range")));
            }
            for j in 0..m {
                evals.push(EvalFeature {
                    point: samples[k].clone(),
                    j,
                    l: None,
                    node: None,
                });
            }
        }
        let n_centers = evals.len();
        evals.extend(constraints);
        let gram = {
            let mut g = eval_gram(kernel, &evals);
            symmetrize(&mut g);
            g
        };
        let sample_eval = constraint_samples(kernel, samples, &evals);
        let fit_eval = &v_out * &sample_eval;
        let cons_eval = gram.rows(n_centers, evals.len() - n_centers).into_owned();
        Ok(Self {
            outputs: kernel.outputs().to_vec(),
            n_fit: 0,
            evals,
            n_centers,
            gram,
            fit_eval,
            cons_eval,
            sample_eval,
            v_out,
        })
    }

    /// Whitens the Gram matrix: `theta = T z` with `||c||^2 = ||z||^2`.
    pub fn whiten(&self, rel_tol: f64) -> Result<Whitened> {
        let eig = SymmetricEigen::new(self.gram.clone());
        let lmax = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(*v));
        if !(lmax > 0.0) {
            return Err(Error::Degenerate("feature Gram matrix is zero".into()));
        }
        let keep: Vec<usize> = (0..eig.eigenvalues.len())
            .filter(|&i| eig.eigenvalues[i] > rel_tol * lmax)
            .collect();
        let f = self.n_features();
        let mut t = DMatrix::zeros(f, keep.len());
        for (c, &i) in keep.iter().enumerate() {
            let s = 1.0 / eig.eigenvalues[i].sqrt();
            t.set_column(c, &(eig.eigenvectors.column(i) * s));
        }
        Ok(Whitened {
            b_fit: &self.fit_eval * &t,
            b_cons: &self.cons_eval * &t,
            s_z: &self.sample_eval * &t,
            t,
            min_kept: keep.iter().map(|&i| eig.eigenvalues[i]).fold(f64::INFINITY, f64::min),
            max_eigenvalue: lmax,
        })
    }
}

/// Feature space mapped to whitened coordinates `z`.
#[derive(Debug, Clone)]
pub struct Whitened {
    /// `F x F'`, `theta = t z`.
    pub t: DMatrix<f64>,
    pub b_fit: DMatrix<f64>,
    pub b_cons: DMatrix<f64>,
    pub s_z: DMatrix<f64>,
    pub min_kept: f64,
    pub max_eigenvalue: f64,
}

impl Whitened {
    pub fn dim(&self) -> usize {
        self.t.ncols()
    }
}

fn symmetrize(g: &mut DMatrix<f64>) {
    let n = g.nrows();
    for i in 0..n {
        for j in i + 1..n {
            let v = 0.5 * (g[(i, j)] + g[(j, i)]);
            g[(i, j)] = v;
            g[(j, i)] = v;
        }
    }
}

/// Gram matrix of evaluation representers.
pub fn eval_gram(kernel: &CoefficientKernel, evals: &[EvalFeature]) -> DMatrix<f64> {
    let m = kernel.n_outputs();
    let q = evals.len();
    let rows: Vec<Vec<f64>> = (0..q)
        .into_par_iter()
        .map(|i| {
            let mut buf = vec![0.0; m * m];
            (0..q).map(|j| pair(kernel, &evals[i], &evals[j], &mut buf)).collect()
        })
        .collect();
    DMatrix::from_fn(q, q, |i, j| rows[i][j])
}

/// Representer values at every sample, `(N m) x Q`.
pub fn constraint_samples(kernel: &CoefficientKernel, samples: &[Vec<f64>], evals: &[EvalFeature]) -> DMatrix<f64> {
    let m = kernel.n_outputs();
    let n = samples.len();
    let cols: Vec<Vec<f64>> = evals
        .par_iter()
        .map(|f| {
            let mut buf = vec![0.0; m * m];
            let mut col = vec![0.0; n * m];
            for (k, x) in samples.iter().enumerate() {
                representer_at(kernel, f, x, &mut buf, &mut col[k * m..(k + 1) * m]);
            }
            col
        })
        .collect();
    DMatrix::from_fn(n * m, evals.len(), |i, q| cols[q][i])
}
