//! Kernel estimators of the LPV coefficient field.
//!
//! * [`base_estimate`]: weighted fit plus RKHS-norm regularization.
//! * [`order_select_qp`]: adds an epigraph penalty on the scaled maximum of
//!   each coefficient over the nodal points.
//! * [`sched_select_qp`]: adds an epigraph penalty on the scaled maximum of
//!   each partial derivative `dc_j/dp_l`, `j <= l`, over the nodal points.
//! * [`reweight_loop`]: repeats a stage with the equation-error covariance of
//!   the previous iterate as weighting until the weighted cost stops falling.

pub mod features;
pub mod qp;

use std::io::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::freq_model::{FreqLpvOperator, NoiseCovariance, RealSystem};
use crate::kernels::{CoefficientKernel, OperatorKernel};
use crate::simulator::{integrate_ode, SampledDataset};

pub use features::{EvalFeature, FeatureSpace, Whitened};
pub use qp::{solve_qp, QpDiagnostics, QpOptions, QpProblem, QpSolution};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    Identity,
    #[default]
    Iterative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NodalSpec {
    pub count: usize,
    /// Seconds between nodal points.
    pub spacing: f64,
    /// Seconds after the window start of the first nodal point.
    pub offset: f64,
}

impl Default for NodalSpec {
    fn default() -> Self {
        Self {
            count: 50,
            spacing: 1.0,
            offset: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorConfig {
    pub gamma_reg: f64,
    pub gamma_ord: f64,
    pub gamma_sch: f64,
    pub weight_mode: WeightMode,
    pub max_reweight_iters: usize,
    /// Keep every k-th sample as an explicit center; 1 uses exact fit
    /// representers.
    pub center_decimation: usize,
    pub f_max: f64,
    /// Overrides `max_t |p_j(t)|` per coefficient.
    pub p_max: Option<Vec<f64>>,
    /// Overrides the coefficient maxima used by the scheduling stage.
    pub c_max: Option<Vec<f64>>,
    pub qp_tolerance: f64,
    pub nodal: NodalSpec,
    /// Relative eigenvalue cutoff of the feature Gram matrix.
    pub gram_rel_tol: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            gamma_reg: 1e-3,
            gamma_ord: 1.0,
            gamma_sch: 1.0,
            weight_mode: WeightMode::Iterative,
            max_reweight_iters: 10,
            center_decimation: 1,
            f_max: 1.0,
            p_max: None,
            c_max: None,
            qp_tolerance: 1e-9,
            nodal: NodalSpec::default(),
            gram_rel_tol: 1e-10,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("gamma_reg", self.gamma_reg),
            ("gamma_ord", self.gamma_ord),
            ("gamma_sch", self.gamma_sch),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and nonnegative, got {v}")));
            }
        }
        if self.center_decimation == 0 {
            return Err(Error::Config("center_decimation must be at least 1".into()));
        }
        if !(self.f_max > 0.0) {
            return Err(Error::Config("f_max must be positive".into()));
        }
        if !(self.qp_tolerance > 0.0) {
            return Err(Error::Config("qp_tolerance must be positive".into()));
        }
        if !(self.gram_rel_tol > 0.0 && self.gram_rel_tol < 1.0) {
            return Err(Error::Config("gram_rel_tol must be in (0, 1)".into()));
        }
        Ok(())
    }

    fn qp_options(&self) -> QpOptions {
        QpOptions {
            tolerance: self.qp_tolerance,
            ..QpOptions::default()
        }
    }
}

/// Nodal times and the scheduling values there.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodalGrid {
    pub times: Vec<f64>,
    pub points: Vec<Vec<f64>>,
}

impl NodalGrid {
    pub fn from_times(ds: &SampledDataset, times: Vec<f64>) -> Result<Self> {
        if times.is_empty() {
            return Err(Error::Config("nodal grid needs at least one point".into()));
        }
        let (a, b) = (ds.grid.start_time, ds.grid.time(ds.len() - 1));
        if let Some(t) = times.iter().find(|t| **t < a - 1e-9 || **t > b + 1e-9) {
            return Err(Error::Config(format!("nodal time {t} outside the data window [{a}, {b}]")));
        }
        let points = times.iter().map(|&t| ds.p_at(t)).collect();
        Ok(Self { times, points })
    }

    pub fn uniform(ds: &SampledDataset, spec: &NodalSpec) -> Result<Self> {
        let times = (0..spec.count)
            .map(|s| ds.grid.start_time + spec.offset + s as f64 * spec.spacing)
            .collect();
        Self::from_times(ds, times)
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageKind {
    Base,
    Order,
    Sched,
}

/// One epigraph score: `j` alone (order) or the pair `(j, l)` (scheduling),
/// as coefficient indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub j: usize,
    pub l: Option<usize>,
    /// Slack value at the optimum.
    pub value: f64,
    /// `max_s |scaled functional|` over the nodal points.
    pub max_scaled: f64,
    pub scale: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct ObjectiveTerms {
    pub fit: f64,
    pub reg: f64,
    pub sparsity: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstantTerm {
    pub index: usize,
    pub value: f64,
}

/// Fitted coefficient field in representer form.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RepresenterSolution {
    pub stage: StageKind,
    pub n_x: usize,
    pub kernel: CoefficientKernel,
    pub centers: Vec<Vec<f64>>,
    /// Per center, `n_x` wide (zero outside the kernel outputs).
    pub alphas: Vec<Vec<f64>>,
    pub deriv_centers: Vec<Vec<f64>>,
    /// `[l][s]` for each kernel output position `l`, `n_x` wide.
    pub alpha_primes: Vec<Vec<Vec<f64>>>,
    pub constants: Vec<ConstantTerm>,
    pub gamma: Vec<f64>,
    pub scores: Vec<Score>,
    pub objective: ObjectiveTerms,
    pub qp: Option<QpDiagnostics>,
    /// Coefficients at the dataset samples, `N x n_x`.
    pub coefficient_samples: Vec<Vec<f64>>,
    /// `max_t |c_j(p_L(t))|` over the samples.
    pub coefficient_max: Vec<f64>,
    /// Constrained functional values at the nodal points, unscaled, in the
    /// order of the constraint features.
    pub constraint_values: Vec<f64>,
    pub feature_dim: usize,
}

impl RepresenterSolution {
    pub fn score(&self, j: usize, l: Option<usize>) -> Option<f64> {
        self.scores.iter().find(|s| s.j == j && s.l == l).map(|s| s.value)
    }

    pub fn save(&self, path: &Path, config: &serde_json::Value) -> Result<()> {
        let mut v = serde_json::to_value(self)?;
        v["config"] = config.clone();
        std::fs::write(path, serde_json::to_string_pretty(&v)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let de = &mut serde_json::Deserializer::from_str(&text);
        serde_path_to_error::deserialize(de)
            .map_err(|e| Error::Config(format!("{}: {} at {}", path.display(), e.inner(), e.path())))
    }
}

/// Writes a matrix as row-major little-endian f64 after an 8-byte header of
/// `rows` and `cols` as little-endian u32.
pub fn write_gram_binary(path: &Path, g: &DMatrix<f64>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(&(g.nrows() as u32).to_le_bytes())?;
    f.write_all(&(g.ncols() as u32).to_le_bytes())?;
    for i in 0..g.nrows() {
        for j in 0..g.ncols() {
            f.write_all(&g[(i, j)].to_le_bytes())?;
        }
    }
    f.flush()?;
    Ok(())
}

pub fn read_gram_binary(path: &Path) -> Result<DMatrix<f64>> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 8 {
        return Err(Error::Config(format!("{}: truncated header", path.display())));
    }
    let rows = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if bytes.len() != 8 + rows * cols * 8 {
        return Err(Error::dim("gram payload bytes", 8 + rows * cols * 8, bytes.len()));
    }
    let mut g = DMatrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            let o = 8 + (i * cols + j) * 8;
            g[(i, j)] = f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        }
    }
    Ok(g)
}

/// An epigraph group: one slack bounding `|scale * value_q|` for each member.
#[derive(Debug, Clone)]
struct Group {
    j: usize,
    l: Option<usize>,
    scale: f64,
    members: Vec<usize>,
}

/// A prepared stage: the feature space is independent of the weighting, so
/// it is built once and re-solved for each weighting.
pub struct Stage<'a> {
    kind: StageKind,
    op: &'a FreqLpvOperator,
    samples: &'a [Vec<f64>],
    kernel: CoefficientKernel,
    constants: Vec<usize>,
    rs: RealSystem,
    space: FeatureSpace,
    wh: Whitened,
    p_extra: DMatrix<f64>,
    groups: Vec<Group>,
    gamma_sparse: f64,
    cfg: EstimatorConfig,
}

/// Result of solving a stage once.
#[derive(Debug, Clone)]
pub struct StageFit {
    pub z: DVector<f64>,
    pub extra: DVector<f64>,
    pub slacks: Vec<f64>,
    pub objective: ObjectiveTerms,
    pub qp: Option<QpDiagnostics>,
}

fn select_outputs(rs: &RealSystem, outputs: &[usize]) -> DMatrix<f64> {
    let (n, nx, m) = (rs.n_samples, rs.n_x, outputs.len());
    DMatrix::from_fn(rs.n_rows(), n * m, |r, c| rs.a_c[(r, (c / m) * nx + outputs[c % m])])
}

impl<'a> Stage<'a> {
    #[allow(clippy::too_many_arguments)]
    fn new(
        kind: StageKind,
        ds: &'a SampledDataset,
        op: &'a FreqLpvOperator,
        kernel: &CoefficientKernel,
        constants: &[usize],
        constraints: Vec<EvalFeature>,
        groups: Vec<Group>,
        gamma_sparse: f64,
        cfg: &EstimatorConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let nx = op.n_x();
        if kernel.input_dim() != nx {
            return Err(Error::dim("kernel input dimension", nx, kernel.input_dim()));
        }
        if ds.len() != op.n_samples() {
            return Err(Error::dim("dataset samples", op.n_samples(), ds.len()));
        }
        let outputs = kernel.outputs().to_vec();
        if let Some(c) = constants.iter().find(|c| **c >= nx || outputs.contains(c)) {
            return Err(Error::Config(format!(
                "constant coefficient {c} is out of range or already a kernel output"
            )));
        }
        let rs = op.real_system(&vec![1.0; op.band.len()])?;
        let v_out = select_outputs(&rs, &outputs);
        let samples = &ds.p_large;
        let space = if cfg.center_decimation > 1 {
            let centers: Vec<usize> = (0..samples.len()).step_by(cfg.center_decimation).collect();
            FeatureSpace::centers(kernel, samples, &centers, v_out, constraints)?
        } else {
            FeatureSpace::representer(kernel, samples, v_out, constraints)?
        };
        let wh = space.whiten(cfg.gram_rel_tol)?;
        let n = samples.len();
        let ng = op.n_gamma + 1;
        let mut p_extra = DMatrix::zeros(rs.n_rows(), ng + constants.len());
        p_extra.columns_mut(0, ng).copy_from(&rs.a_g);
        for (i, &jc) in constants.iter().enumerate() {
            for r in 0..rs.n_rows() {
                p_extra[(r, ng + i)] = (0..n).map(|k| rs.a_c[(r, k * nx + jc)]).sum();
            }
        }
        log::debug!(
            "{kind:?} stage: {} fit rows, {} features, {} after whitening, {} constraints",
            rs.n_rows(),
            space.n_features(),
            wh.dim(),
            space.n_constraints()
        );
        Ok(Self {
            kind,
            op,
            samples,
            kernel: kernel.clone(),
            constants: constants.to_vec(),
            rs,
            space,
            wh,
            p_extra,
            groups,
            gamma_sparse,
            cfg: cfg.clone(),
        })
    }

    pub fn feature_space(&self) -> &FeatureSpace {
        &self.space
    }

    pub fn whitened(&self) -> &Whitened {
        &self.wh
    }

    fn row_weights(&self, bin_variance: &[f64]) -> Result<DVector<f64>> {
        if bin_variance.len() != self.op.band.len() {
            return Err(Error::dim("bin variances", self.op.band.len(), bin_variance.len()));
        }
        Ok(DVector::from_iterator(
            self.rs.n_rows(),
            self.rs.rows.iter().map(|r| r.weight / bin_variance[r.band_index]),
        ))
    }

    /// Solves the stage for the given per-bin variances.
    pub fn solve(&self, bin_variance: &[f64]) -> Result<StageFit> {
        self.solve_inner(bin_variance, true)
    }

    /// Solves the stage without its sparsity constraints.
    pub fn solve_unconstrained(&self, bin_variance: &[f64]) -> Result<StageFit> {
        self.solve_inner(bin_variance, false)
    }

    fn solve_inner(&self, bin_variance: &[f64], constrained: bool) -> Result<StageFit> {
        let w = self.row_weights(bin_variance)?;
        let sw = w.map(f64::sqrt);
        let scale_rows = |m: &DMatrix<f64>| {
            let mut out = m.clone();
            for r in 0..out.nrows() {
                out.row_mut(r).scale_mut(sw[r]);
            }
            out
        };
        let bw = scale_rows(&self.wh.b_fit);
        let pw = scale_rows(&self.p_extra);
        let dw = self.rs.d.component_mul(&sw);
        let nz = self.wh.dim();
        let ne = pw.ncols();
        let nv = nz + ne;
        let mut hmat = DMatrix::zeros(nv, nv);
        hmat.view_mut((0, 0), (nz, nz)).copy_from(&bw.tr_mul(&bw));
        let bp = bw.tr_mul(&pw);
        hmat.view_mut((0, nz), (nz, ne)).copy_from(&bp);
        hmat.view_mut((nz, 0), (ne, nz)).copy_from(&bp.transpose());
        hmat.view_mut((nz, nz), (ne, ne)).copy_from(&pw.tr_mul(&pw));
        for i in 0..nz {
            hmat[(i, i)] += self.cfg.gamma_reg;
        }
        let mut rhs = DVector::zeros(nv);
        rhs.rows_mut(0, nz).copy_from(&bw.tr_mul(&dw));
        rhs.rows_mut(nz, ne).copy_from(&pw.tr_mul(&dw));
        let cost0 = dw.norm_squared().max(1e-300);

        let (x, slacks, qp) = if self.groups.is_empty() || !constrained {
            let chol = hmat.clone().cholesky().ok_or_else(|| Error::Singular {
                min_eigenvalue: hmat.clone().symmetric_eigenvalues().min(),
            })?;
            (chol.solve(&rhs), Vec::new(), None)
        } else {
            let ng = self.groups.len();
            let ntot = nv + ng;
            let mut h = DMatrix::zeros(ntot, ntot);
            h.view_mut((0, 0), (nv, nv)).copy_from(&(&hmat * (2.0 / cost0)));
            let mut g = DVector::zeros(ntot);
            g.rows_mut(0, nv).copy_from(&(&rhs * (-2.0 / cost0)));
            for i in 0..ng {
                g[nv + i] = self.gamma_sparse / cost0;
            }
            let n_rows: usize = self.groups.iter().map(|gr| 2 * gr.members.len()).sum();
            let mut a = DMatrix::zeros(n_rows, ntot);
            let mut r = 0;
            for (gi, gr) in self.groups.iter().enumerate() {
                for &q in &gr.members {
                    let row = self.wh.b_cons.row(q) * gr.scale;
                    a.view_mut((r, 0), (1, nz)).copy_from(&row);
                    a[(r, nv + gi)] = -1.0;
                    a.view_mut((r + 1, 0), (1, nz)).copy_from(&(-row));
                    a[(r + 1, nv + gi)] = -1.0;
                    r += 2;
                }
            }
            let p = QpProblem {
                h,
                g,
                a,
                b: DVector::zeros(n_rows),
            };
            let sol = solve_qp(&p, &self.cfg.qp_options())?;
            let slacks = sol.x.rows(nv, ng).iter().copied().collect();
            (sol.x.rows(0, nv).into_owned(), slacks, Some(sol.diagnostics))
        };
        let z = x.rows(0, nz).into_owned();
        let extra = x.rows(nz, ne).into_owned();
        let resid = &bw * &z + &pw * &extra - &dw;
        let fit = resid.norm_squared();
        let reg = self.cfg.gamma_reg * z.norm_squared();
        let sparsity = self.gamma_sparse * slacks.iter().sum::<f64>();
        let slacks = if constrained { slacks } else { vec![0.0; self.groups.len()] };
        Ok(StageFit {
            z,
            extra,
            slacks,
            objective: ObjectiveTerms {
                fit,
                reg,
                sparsity,
                total: fit + reg + sparsity,
            },
            qp,
        })
    }

    /// Coefficient samples `N x n_x` of a fit.
    pub fn coefficient_samples(&self, fit: &StageFit) -> Vec<Vec<f64>> {
        let m = self.space.outputs.len();
        let nx = self.op.n_x();
        let vals = &self.wh.s_z * &fit.z;
        let ng = self.op.n_gamma + 1;
        (0..self.samples.len())
            .map(|k| {
                let mut row = vec![0.0; nx];
                for (a, &j) in self.space.outputs.iter().enumerate() {
                    row[j] = vals[k * m + a];
                }
                for (i, &jc) in self.constants.iter().enumerate() {
                    row[jc] = fit.extra[ng + i];
                }
                row
            })
            .collect()
    }

    /// `sum |e|^2 / w` on the band for a fit.
    pub fn weighted_cost(&self, fit: &StageFit, bin_variance: &[f64]) -> Result<f64> {
        let c = self.coefficient_samples(fit);
        let gamma: Vec<f64> = fit.extra.rows(0, self.op.n_gamma + 1).iter().copied().collect();
        let e = self.op.equation_error(&c, &gamma)?;
        Ok(FreqLpvOperator::weighted_cost(&e, bin_variance))
    }

    /// Converts a fit into representer form.
    pub fn solution(&self, fit: &StageFit) -> RepresenterSolution {
        let nx = self.op.n_x();
        let outputs = &self.space.outputs;
        let m = outputs.len();
        let theta = &self.wh.t * &fit.z;
        let widen = |v: &[f64]| {
            let mut row = vec![0.0; nx];
            for (a, &j) in outputs.iter().enumerate() {
                row[j] = v[a];
            }
            row
        };
        let n = self.samples.len();
        let mut centers = Vec::new();
        let mut alphas = Vec::new();
        if self.space.n_fit > 0 {
            let th = theta.rows(0, self.space.n_fit);
            let alpha = self.space.v_out.tr_mul(&th);
            for k in 0..n {
                centers.push(self.samples[k].clone());
                alphas.push(widen(&alpha.as_slice()[k * m..(k + 1) * m]));
            }
        }
        let off = self.space.n_fit;
        let nodal_count = self
            .space
            .evals
            .iter()
            .filter_map(|f| f.node)
            .max()
            .map_or(0, |s| s + 1);
        let mut nodal_points = vec![None; nodal_count];
        let mut nodal_alpha = vec![vec![0.0; m]; nodal_count];
        let mut deriv_alpha = vec![vec![vec![0.0; nx]; nodal_count]; m];
        let mut has_point_nodes = false;
        let mut center_alpha: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
        for (i, f) in self.space.evals.iter().enumerate() {
            let th = theta[off + i];
            if i < self.space.n_centers {
                if f.j == 0 {
                    center_alpha.push((f.point.clone(), vec![0.0; m]));
                }
                center_alpha.last_mut().unwrap().1[f.j] = th;
                continue;
            }
            let s = f.node.expect("constraint features carry a nodal index");
            nodal_points[s] = Some(f.point.clone());
            match f.l {
                None => {
                    has_point_nodes = true;
                    nodal_alpha[s][f.j] = th;
                }
                Some(l) => deriv_alpha[l][s][outputs[f.j]] = th,
            }
        }
        for (p, a) in center_alpha {
            centers.push(p);
            alphas.push(widen(&a));
        }
        if has_point_nodes {
            for (s, p) in nodal_points.iter().enumerate() {
                if let Some(p) = p {
                    centers.push(p.clone());
                    alphas.push(widen(&nodal_alpha[s]));
                }
            }
        }
        let has_deriv = self.space.evals.iter().any(|f| f.l.is_some());
        let (deriv_centers, alpha_primes) = if has_deriv {
            (
                nodal_points.iter().map(|p| p.clone().unwrap_or_default()).collect(),
                deriv_alpha,
            )
        } else {
            (Vec::new(), Vec::new())
        };
        let ng = self.op.n_gamma + 1;
        let constants = self
            .constants
            .iter()
            .enumerate()
            .map(|(i, &index)| ConstantTerm {
                index,
                value: fit.extra[ng + i],
            })
            .collect();
        let cons_vals = &self.wh.b_cons * &fit.z;
        let scores = self
            .groups
            .iter()
            .zip(&fit.slacks)
            .map(|(g, &value)| Score {
                j: g.j,
                l: g.l,
                value,
                max_scaled: g.members.iter().map(|&q| (g.scale * cons_vals[q]).abs()).fold(0.0, f64::max),
                scale: g.scale,
            })
            .collect();
        let coefficient_samples = self.coefficient_samples(fit);
        let coefficient_max = (0..nx)
            .map(|j| coefficient_samples.iter().map(|r| r[j].abs()).fold(0.0, f64::max))
            .collect();
        RepresenterSolution {
            stage: self.kind,
            n_x: nx,
            kernel: self.kernel.clone(),
            centers,
            alphas,
            deriv_centers,
            alpha_primes,
            constants,
            gamma: fit.extra.rows(0, ng).iter().copied().collect(),
            scores,
            objective: fit.objective,
            qp: fit.qp.clone(),
            coefficient_samples,
            coefficient_max,
            constraint_values: cons_vals.iter().copied().collect(),
            feature_dim: self.wh.dim(),
        }
    }
}

fn p_max(ds: &SampledDataset, cfg: &EstimatorConfig) -> Result<Vec<f64>> {
    let pm = match &cfg.p_max {
        Some(v) if v.len() != ds.n_x() => return Err(Error::dim("p_max override", ds.n_x(), v.len())),
        Some(v) => v.clone(),
        None => ds.p_max(),
    };
    if let Some(j) = pm.iter().position(|v| !(*v > 0.0 && v.is_finite())) {
        return Err(Error::Degenerate(format!("scheduling variable p{} is identically zero", j + 1)));
    }
    Ok(pm)
}

/// Which estimator a stage runs.
#[derive(Debug, Clone, PartialEq)]
pub enum Selection {
    /// Unconstrained weighted fit; listed coefficients are free constants.
    Base { constants: Vec<usize> },
    Order,
    /// `c_max` per coefficient index (length `n_x`); `None` derives it from a
    /// base estimate with the same kernel.
    Sched { c_max: Option<Vec<f64>> },
}

/// Builds the stage for a selection.
pub fn prepare_stage<'a>(
    selection: &Selection,
    ds: &'a SampledDataset,
    op: &'a FreqLpvOperator,
    kernel: &CoefficientKernel,
    nodal: &NodalGrid,
    cfg: &EstimatorConfig,
    noise: Option<&NoiseCovariance>,
) -> Result<Stage<'a>> {
    let outputs = kernel.outputs().to_vec();
    match selection {
        Selection::Base { constants } => Stage::new(StageKind::Base, ds, op, kernel, constants, Vec::new(), Vec::new(), 0.0, cfg),
        Selection::Order => {
            let pm = p_max(ds, cfg)?;
            let mut evals = Vec::new();
            let mut groups: Vec<Group> = outputs
                .iter()
                .map(|&j| Group {
                    j,
                    l: None,
                    scale: pm[j] / cfg.f_max,
                    members: Vec::new(),
                })
                .collect();
            for (s, p) in nodal.points.iter().enumerate() {
                for (a, group) in groups.iter_mut().enumerate() {
                    group.members.push(evals.len());
                    evals.push(EvalFeature {
                        point: p.clone(),
                        j: a,
                        l: None,
                        node: Some(s),
                    });
                }
            }
            Stage::new(StageKind::Order, ds, op, kernel, &[], evals, groups, cfg.gamma_ord, cfg)
        }
        Selection::Sched { c_max } => {
            if outputs.is_empty() {
                return Err(Error::Config("scheduling selection needs at least one retained input".into()));
            }
            let pm = p_max(ds, cfg)?;
            let cm = match c_max.clone().or_else(|| cfg.c_max.clone()) {
                Some(v) if v.len() != ds.n_x() => return Err(Error::dim("c_max", ds.n_x(), v.len())),
                Some(v) => v,
                None => {
                    let (base, _) = reweight_loop(&Selection::Base { constants: Vec::new() }, ds, op, kernel, nodal, cfg, noise)?;
                    base.coefficient_max
                }
            };
            if let Some(&j) = outputs.iter().find(|&&j| !(cm[j] > 0.0 && cm[j].is_finite())) {
                return Err(Error::Config(format!("c_max for coefficient {j} must be positive")));
            }
            let mut evals = Vec::new();
            let mut groups = Vec::new();
            for (ja, &j) in outputs.iter().enumerate() {
                for (la, &l) in outputs.iter().enumerate().skip(ja) {
                    groups.push(Group {
                        j,
                        l: Some(l),
                        scale: pm[l] / cm[j],
                        members: Vec::new(),
                    });
                    let g = groups.last_mut().unwrap();
                    for (s, p) in nodal.points.iter().enumerate() {
                        g.members.push(evals.len());
                        evals.push(EvalFeature {
                            point: p.clone(),
                            j: ja,
                            l: Some(la),
                            node: Some(s),
                        });
                    }
                }
            }
            Stage::new(StageKind::Sched, ds, op, kernel, &[], evals, groups, cfg.gamma_sch, cfg)
        }
    }
}

/// Weighted estimate with no sparsity penalty. `bin_variance` of `None`
/// selects `W = I`.
pub fn base_estimate(
    ds: &SampledDataset,
    op: &FreqLpvOperator,
    kernel: &CoefficientKernel,
    constants: &[usize],
    cfg: &EstimatorConfig,
    bin_variance: Option<&[f64]>,
) -> Result<RepresenterSolution> {
    let stage = Stage::new(StageKind::Base, ds, op, kernel, constants, Vec::new(), Vec::new(), 0.0, cfg)?;
    solve_once(&stage, bin_variance)
}

fn solve_once(stage: &Stage<'_>, bin_variance: Option<&[f64]>) -> Result<RepresenterSolution> {
    let unit = vec![1.0; stage.op.band.len()];
    let fit = stage.solve(bin_variance.unwrap_or(&unit))?;
    Ok(stage.solution(&fit))
}

/// Model-order selection for one weighting.
pub fn order_select_qp(
    ds: &SampledDataset,
    op: &FreqLpvOperator,
    kernel: &CoefficientKernel,
    nodal: &NodalGrid,
    cfg: &EstimatorConfig,
    bin_variance: Option<&[f64]>,
) -> Result<RepresenterSolution> {
    let stage = prepare_stage(&Selection::Order, ds, op, kernel, nodal, cfg, None)?;
    solve_once(&stage, bin_variance)
}

/// Scheduling selection for one weighting.
pub fn sched_select_qp(
    ds: &SampledDataset,
    op: &FreqLpvOperator,
    kernel: &CoefficientKernel,
    nodal: &NodalGrid,
    cfg: &EstimatorConfig,
    c_max: Option<Vec<f64>>,
    bin_variance: Option<&[f64]>,
) -> Result<RepresenterSolution> {
    let stage = prepare_stage(&Selection::Sched { c_max }, ds, op, kernel, nodal, cfg, None)?;
    solve_once(&stage, bin_variance)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LoopReport {
    /// Weighted cost of the scalar-identity solution.
    pub initial_cost: f64,
    /// `J_WLS` of each accepted reweighted solution.
    pub j_history: Vec<f64>,
    /// `J_WLS` of the rejected final attempt, if the loop stopped on it.
    pub rejected: Option<f64>,
    /// Number of solves performed.
    pub solves: usize,
    pub noise_free: bool,
    pub exit_reason: String,
    /// `max_t |y_sim(t) - y~(t)|` of an LPV re-simulation.
    pub kappa_y: f64,
    /// Variances used by the returned solution.
    pub bin_variance: Vec<f64>,
}

/// Runs a stage under the iterative weighting.
pub fn reweight_loop(
    selection: &Selection,
    ds: &SampledDataset,
    op: &FreqLpvOperator,
    kernel: &CoefficientKernel,
    nodal: &NodalGrid,
    cfg: &EstimatorConfig,
    noise: Option<&NoiseCovariance>,
) -> Result<(RepresenterSolution, LoopReport)> {
    let stage = prepare_stage(selection, ds, op, kernel, nodal, cfg, noise)?;
    run_loop(&stage, ds, cfg, noise)
}

/// Runs the reweighting loop on a prepared stage.
pub fn run_loop(
    stage: &Stage<'_>,
    ds: &SampledDataset,
    cfg: &EstimatorConfig,
    noise: Option<&NoiseCovariance>,
) -> Result<(RepresenterSolution, LoopReport)> {
    let op = stage.op;
    let noise = noise.unwrap_or(&ds.noise);
    let unit = vec![1.0; op.band.len()];
    let iterative = cfg.weight_mode == WeightMode::Iterative && !noise.is_zero();
    let mut solves = 0;
    let w0 = if iterative {
        let base = stage.solve_unconstrained(&unit)?;
        solves += 1;
        let var = op.equation_error_covariance(&stage.coefficient_samples(&base), noise)?;
        let mean = var.iter().sum::<f64>() / var.len() as f64;
        if mean > 0.0 {
            vec![mean; op.band.len()]
        } else {
            unit.clone()
        }
    } else {
        unit.clone()
    };
    let mut best = stage.solve(&w0)?;
    let initial_cost = stage.weighted_cost(&best, &w0)?;
    let mut report = LoopReport {
        initial_cost,
        j_history: Vec::new(),
        rejected: None,
        solves: solves + 1,
        noise_free: false,
        exit_reason: String::new(),
        kappa_y: 0.0,
        bin_variance: w0.clone(),
    };
    if cfg.weight_mode == WeightMode::Identity {
        report.exit_reason = "identity weighting".into();
    } else if noise.is_zero() {
        log::info!("noise covariance is zero; keeping the identity weighting");
        report.noise_free = true;
        report.j_history.push(initial_cost);
        report.exit_reason = "noise-free data: identity weighting kept".into();
    } else {
        report.exit_reason = format!("reached {} reweighting iterations", cfg.max_reweight_iters);
        let mut current = stage.coefficient_samples(&best);
        for it in 0..cfg.max_reweight_iters {
            let var = op.equation_error_covariance(&current, noise)?;
            let vmax = var.iter().fold(0.0f64, |m, v| m.max(*v));
            if !(vmax > 0.0) {
                report.exit_reason = "equation-error covariance vanished on the band".into();
                break;
            }
            let var: Vec<f64> = var.iter().map(|v| v.max(1e-12 * vmax)).collect();
            let fit = stage.solve(&var)?;
            report.solves += 1;
            let j = stage.weighted_cost(&fit, &var)?;
            log::debug!("reweight iteration {}: J = {j:.6e}", it + 1);
            if let Some(&prev) = report.j_history.last() {
                if j >= prev * (1.0 - 1e-9) {
                    report.rejected = Some(j);
                    report.exit_reason = format!("J stopped decreasing at iteration {}", it + 1);
                    break;
                }
            }
            report.j_history.push(j);
            current = stage.coefficient_samples(&fit);
            report.bin_variance = var;
            best = fit;
        }
    }
    let sol = stage.solution(&best);
    report.kappa_y = resimulate_lpv(op, &sol.coefficient_samples)?
        .iter()
        .zip(&ds.y_small)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok((sol, report))
}

fn interp(series: &[f64], s: f64) -> f64 {
    let n = series.len();
    let s = s.clamp(0.0, (n - 1) as f64);
    let k = (s.floor() as usize).min(n - 2);
    let w = s - k as f64;
    series[k] + w * (series[k + 1] - series[k])
}

/// Simulates the LPV model with the given coefficient samples (linearly
/// interpolated in time), driven by the measured small input and started
/// from the measured output derivatives at the window start.
pub fn resimulate_lpv(op: &FreqLpvOperator, c_samples: &[Vec<f64>]) -> Result<Vec<f64>> {
    let n_a = op.n_a;
    let nx = op.n_x();
    let grid = op.grid;
    let cols: Vec<Vec<f64>> = (0..nx).map(|j| c_samples.iter().map(|r| r[j]).collect()).collect();
    let x0: Vec<f64> = (0..=n_a).map(|n| op.omega_blocks[n][0]).collect();
    let traj = integrate_ode(&x0, &grid, 4, |t, x, dx| {
        let s = (t - grid.start_time) / grid.sample_period;
        dx[..n_a].copy_from_slice(&x[1..]);
        let mut acc = 0.0;
        for n in 0..=n_a {
            acc += interp(&cols[n], s) * x[n];
        }
        for m in 0..=op.n_b {
            acc += interp(&cols[n_a + 1 + m], s) * interp(&op.omega_blocks[n_a + 1 + m], s);
        }
        dx[n_a] = acc;
    })?;
    Ok(traj.iter().map(|x| x[0]).collect())
}

/// Coefficient field values at query points, `n_x` wide.
pub fn eval_coefficients(sol: &RepresenterSolution, queries: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let k = &sol.kernel;
    let outputs = k.outputs();
    let m = outputs.len();
    let mut buf = vec![0.0; m * m];
    queries
        .iter()
        .map(|x| {
            if x.len() != sol.n_x {
                return Err(Error::dim("query point", sol.n_x, x.len()));
            }
            let mut c = vec![0.0; m];
            for (p, alpha) in sol.centers.iter().zip(&sol.alphas) {
                k.block_into(x, p, &mut buf);
                for a in 0..m {
                    for b in 0..m {
                        c[a] += buf[a * m + b] * alpha[outputs[b]];
                    }
                }
            }
            for (l, per_node) in sol.alpha_primes.iter().enumerate() {
                for (p, alpha) in sol.deriv_centers.iter().zip(per_node) {
                    k.dblock_into(x, p, l, &mut buf);
                    for a in 0..m {
                        for b in 0..m {
                            c[a] += buf[a * m + b] * alpha[outputs[b]];
                        }
                    }
                }
            }
            let mut row = vec![0.0; sol.n_x];
            for (a, &j) in outputs.iter().enumerate() {
                row[j] = c[a];
            }
            for t in &sol.constants {
                row[t.index] = t.value;
            }
            Ok(row)
        })
        .collect()
}

/// Jacobian of the coefficient field at a point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sensitivity {
    /// Row-major `n_x x n_x`, entry `(j, l) = dc_j/dp_l`, symmetrized.
    pub matrix: Vec<f64>,
    /// `max |S - S^T|` before symmetrization.
    pub asymmetry: f64,
}

impl Sensitivity {
    pub fn get(&self, n_x: usize, j: usize, l: usize) -> f64 {
        self.matrix[j * n_x + l]
    }
}

pub fn eval_sensitivity(sol: &RepresenterSolution, queries: &[Vec<f64>]) -> Result<Vec<Sensitivity>> {
    let k = &sol.kernel;
    let outputs = k.outputs();
    let m = outputs.len();
    let nx = sol.n_x;
    let mut buf = vec![0.0; m * m];
    queries
        .iter()
        .map(|x| {
            if x.len() != nx {
                return Err(Error::dim("query point", nx, x.len()));
            }
            // jac[a][b] = d c_a / d x_b over kernel outputs
            let mut jac = vec![0.0; m * m];
            for b in 0..m {
                for (p, alpha) in sol.centers.iter().zip(&sol.alphas) {
                    k.dblock_into(x, p, b, &mut buf);
                    for a in 0..m {
                        for c in 0..m {
                            jac[a * m + b] -= buf[a * m + c] * alpha[outputs[c]];
                        }
                    }
                }
                for (l, per_node) in sol.alpha_primes.iter().enumerate() {
                    for (p, alpha) in sol.deriv_centers.iter().zip(per_node) {
                        k.d2block_into(x, p, b, l, &mut buf);
                        for a in 0..m {
                            for c in 0..m {
                                jac[a * m + b] += buf[a * m + c] * alpha[outputs[c]];
                            }
                        }
                    }
                }
            }
            let mut asymmetry = 0.0f64;
            let mut matrix = vec![0.0; nx * nx];
            for a in 0..m {
                for b in 0..m {
                    asymmetry = asymmetry.max((jac[a * m + b] - jac[b * m + a]).abs());
                    matrix[outputs[a] * nx + outputs[b]] = 0.5 * (jac[a * m + b] + jac[b * m + a]);
                }
            }
            Ok(Sensitivity { matrix, asymmetry })
        })
        .collect()
}
