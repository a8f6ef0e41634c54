//! ARD squared-exponential kernel and the curl-free matrix-valued kernel built
//! from its Hessian.
//!
//! With `g(r) = s^2 exp(-sum r_i^2 / (2 sigma_i^2))` and `r = x - x'`, the
//! curl-free block is `K(x, x') = -Hess g(r)`, i.e.
//! `K_ij = (delta_ij / sigma_i^2 - q_i q_j) g` with `q_i = r_i / sigma_i^2`,
//! which is positive definite at zero lag. The derivative blocks are
//!
//! * `dblock(x, x', l)     = d/dx'_l K(x, x')`          (third derivatives of g)
//! * `d2block(x, x', a, l) = d^2/(dx_a dx'_l) K(x, x')` (fourth derivatives of g)
//!
//! These are the inner products between point-evaluation and
//! derivative-evaluation representers of the RKHS, which is all the
//! estimators need.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest supported number of kernel coordinates.
pub const MAX_DIMS: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArdSeParams {
    pub lengthscales: Vec<f64>,
    #[serde(default = "one")]
    pub signal_variance: f64,
}

fn one() -> f64 {
    1.0
}

impl ArdSeParams {
    pub fn new(lengthscales: Vec<f64>) -> Result<Self> {
        let p = Self {
            lengthscales,
            signal_variance: 1.0,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.lengthscales.is_empty() || self.lengthscales.len() > MAX_DIMS {
            return Err(Error::Config(format!(
                "kernel needs between 1 and {MAX_DIMS} lengthscales, got {}",
                self.lengthscales.len()
            )));
        }
        if let Some(bad) = self
            .lengthscales
            .iter()
            .find(|s| !(s.is_finite() && **s > 0.0))
        {
            return Err(Error::Config(format!("lengthscale {bad} is not positive and finite")));
        }
        if !(self.signal_variance.is_finite() && self.signal_variance > 0.0) {
            return Err(Error::Config("signal variance must be positive".into()));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.lengthscales.len()
    }
}

/// Scalar ARD-SE kernel value.
pub fn k_scalar(x: &[f64], x_prime: &[f64], params: &ArdSeParams) -> Result<f64> {
    let n = params.dim();
    if x.len() != n {
        return Err(Error::dim("k_scalar x", n, x.len()));
    }
    if x_prime.len() != n {
        return Err(Error::dim("k_scalar x'", n, x_prime.len()));
    }
    let e: f64 = x
        .iter()
        .zip(x_prime)
        .zip(&params.lengthscales)
        .map(|((a, b), s)| (a - b).powi(2) / (2.0 * s * s))
        .sum();
    Ok(params.signal_variance * (-e).exp())
}

/// Matrix-valued kernel over a subset of coordinates of the scheduling space.
///
/// Outputs are coefficient functions `c_j` for `j in outputs()`; derivative
/// indices are positions into `outputs()`. Points are full-length vectors.
pub trait OperatorKernel: Send + Sync {
    fn input_dim(&self) -> usize;
    fn outputs(&self) -> &[usize];

    /// Writes the `m x m` block, row-major, `m = outputs().len()`.
    fn block_into(&self, x: &[f64], y: &[f64], out: &mut [f64]);
    /// Writes `d/dy_l` of the block.
    fn dblock_into(&self, x: &[f64], y: &[f64], l: usize, out: &mut [f64]);
    /// Writes `d^2/(dx_a dy_l)` of the block.
    fn d2block_into(&self, x: &[f64], y: &[f64], a: usize, l: usize, out: &mut [f64]);

    fn n_outputs(&self) -> usize {
        self.outputs().len()
    }

    fn block(&self, x: &[f64], y: &[f64]) -> DMatrix<f64> {
        let m = self.n_outputs();
        let mut buf = vec![0.0; m * m];
        self.block_into(x, y, &mut buf);
        DMatrix::from_row_slice(m, m, &buf)
    }

    fn dblock(&self, x: &[f64], y: &[f64], l: usize) -> DMatrix<f64> {
        let m = self.n_outputs();
        let mut buf = vec![0.0; m * m];
        self.dblock_into(x, y, l, &mut buf);
        DMatrix::from_row_slice(m, m, &buf)
    }

    fn d2block(&self, x: &[f64], y: &[f64], a: usize, l: usize) -> DMatrix<f64> {
        let m = self.n_outputs();
        let mut buf = vec![0.0; m * m];
        self.d2block_into(x, y, a, l, &mut buf);
        DMatrix::from_row_slice(m, m, &buf)
    }
}

/// Scaled lags for a coordinate subset: `q_i = (x_i - y_i) / sigma_i^2`,
/// `d_i = 1 / sigma_i^2`, and the SE value over that subset.
struct Lag {
    q: [f64; MAX_DIMS],
    d: [f64; MAX_DIMS],
    g: f64,
}

fn lag(x: &[f64], y: &[f64], dims: &[usize], params: &ArdSeParams) -> Lag {
    let mut q = [0.0; MAX_DIMS];
    let mut d = [0.0; MAX_DIMS];
    let mut e = 0.0;
    for (p, &c) in dims.iter().enumerate() {
        let s2 = params.lengthscales[c] * params.lengthscales[c];
        let r = x[c] - y[c];
        q[p] = r / s2;
        d[p] = 1.0 / s2;
        e += r * r / (2.0 * s2);
    }
    Lag {
        q,
        d,
        g: params.signal_variance * (-e).exp(),
    }
}

#[inline]
fn kd(i: usize, j: usize, d: &[f64]) -> f64 {
    if i == j {
        d[i]
    } else {
        0.0
    }
}

/// `-d^2 g / (dr_i dr_j)`.
#[inline]
fn hess_neg(lg: &Lag, i: usize, j: usize) -> f64 {
    (kd(i, j, &lg.d) - lg.q[i] * lg.q[j]) * lg.g
}

/// `d^3 g / (dr_i dr_j dr_l)`.
#[inline]
fn third(lg: &Lag, i: usize, j: usize, l: usize) -> f64 {
    let (q, d) = (&lg.q, &lg.d);
    (kd(i, l, d) * q[j] + kd(j, l, d) * q[i] + kd(i, j, d) * q[l] - q[i] * q[j] * q[l]) * lg.g
}

/// `d^4 g / (dr_i dr_j dr_l dr_a)`.
#[inline]
fn fourth(lg: &Lag, i: usize, j: usize, l: usize, a: usize) -> f64 {
    let (q, d) = (&lg.q, &lg.d);
    let pairs = kd(i, l, d) * kd(j, a, d) + kd(j, l, d) * kd(i, a, d) + kd(i, j, d) * kd(l, a, d);
    let mixed = kd(i, a, d) * q[j] * q[l]
        + kd(j, a, d) * q[i] * q[l]
        + kd(l, a, d) * q[i] * q[j]
        + kd(i, l, d) * q[j] * q[a]
        + kd(j, l, d) * q[i] * q[a]
        + kd(i, j, d) * q[l] * q[a];
    (pairs - mixed + q[i] * q[j] * q[l] * q[a]) * lg.g
}

/// Curl-free kernel `-Hess k_sigma` restricted to `active_dims`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurlFreeKernel {
    pub scalar: ArdSeParams,
    pub active_dims: Vec<usize>,
}

impl CurlFreeKernel {
    /// Kernel over all coordinates.
    pub fn new(scalar: ArdSeParams) -> Result<Self> {
        let all = (0..scalar.dim()).collect();
        Self::with_active_dims(scalar, all)
    }

    pub fn with_active_dims(scalar: ArdSeParams, mut active_dims: Vec<usize>) -> Result<Self> {
        scalar.validate()?;
        active_dims.sort_unstable();
        active_dims.dedup();
        if active_dims.is_empty() {
            return Err(Error::Config("curl-free kernel needs at least one active dimension".into()));
        }
        if let Some(&bad) = active_dims.iter().find(|&&d| d >= scalar.dim()) {
            return Err(Error::Config(format!(
                "active dimension {bad} out of range for {} lengthscales",
                scalar.dim()
            )));
        }
        Ok(Self {
            scalar,
            active_dims,
        })
    }

    /// Same lengthscales with a smaller active set.
    pub fn restricted(&self, active_dims: Vec<usize>) -> Result<Self> {
        Self::with_active_dims(self.scalar.clone(), active_dims)
    }

    fn position(&self, coord: usize) -> Result<usize> {
        self.active_dims
            .iter()
            .position(|&d| d == coord)
            .ok_or_else(|| {
                Error::Config(format!(
                    "index {coord} is not an active dimension {:?}",
                    self.active_dims
                ))
            })
    }

    fn check_points(&self, x: &[f64], y: &[f64]) -> Result<()> {
        let n = self.scalar.dim();
        if x.len() != n {
            return Err(Error::dim("kernel point x", n, x.len()));
        }
        if y.len() != n {
            return Err(Error::dim("kernel point x'", n, y.len()));
        }
        Ok(())
    }
}

impl OperatorKernel for CurlFreeKernel {
    fn input_dim(&self) -> usize {
        self.scalar.dim()
    }

    fn outputs(&self) -> &[usize] {
        &self.active_dims
    }

    fn block_into(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        let m = self.active_dims.len();
        let lg = lag(x, y, &self.active_dims, &self.scalar);
        for i in 0..m {
            for j in i..m {
                let v = hess_neg(&lg, i, j);
                out[i * m + j] = v;
                out[j * m + i] = v;
            }
        }
    }

    fn dblock_into(&self, x: &[f64], y: &[f64], l: usize, out: &mut [f64]) {
        let m = self.active_dims.len();
        let lg = lag(x, y, &self.active_dims, &self.scalar);
        for i in 0..m {
            for j in i..m {
                let v = third(&lg, i, j, l);
                out[i * m + j] = v;
                out[j * m + i] = v;
            }
        }
    }

    fn d2block_into(&self, x: &[f64], y: &[f64], a: usize, l: usize, out: &mut [f64]) {
        let m = self.active_dims.len();
        let lg = lag(x, y, &self.active_dims, &self.scalar);
        for i in 0..m {
            for j in i..m {
                let v = fourth(&lg, i, j, l, a);
                out[i * m + j] = v;
                out[j * m + i] = v;
            }
        }
    }
}

/// `K_curl(x, x')` over the active dimensions.
pub fn k_curl_block(x: &[f64], x_prime: &[f64], kernel: &CurlFreeKernel) -> Result<DMatrix<f64>> {
    kernel.check_points(x, x_prime)?;
    Ok(kernel.block(x, x_prime))
}

/// `d K_curl(x, x') / dx'_l`, `l` a coordinate index.
pub fn k_curl_dblock(
    x: &[f64],
    x_prime: &[f64],
    l: usize,
    kernel: &CurlFreeKernel,
) -> Result<DMatrix<f64>> {
    kernel.check_points(x, x_prime)?;
    let lp = kernel.position(l)?;
    Ok(kernel.dblock(x, x_prime, lp))
}

/// `d^2 K_curl(x, x') / (dx_a dx'_l)`, `a` and `l` coordinate indices.
pub fn k_curl_d2block(
    x: &[f64],
    x_prime: &[f64],
    a: usize,
    l: usize,
    kernel: &CurlFreeKernel,
) -> Result<DMatrix<f64>> {
    kernel.check_points(x, x_prime)?;
    let ap = kernel.position(a)?;
    let lp = kernel.position(l)?;
    Ok(kernel.d2block(x, x_prime, ap, lp))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    CurlFreeSe,
    ScalarSe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelBlock {
    pub dims: Vec<usize>,
    pub kind: BlockKind,
}

/// Ordered list of disjoint coordinate blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockDiagKernelSpec {
    pub blocks: Vec<KernelBlock>,
}

/// Block-diagonal kernel: curl-free blocks on coordinate groups and scalar SE
/// blocks on single coordinates. Entries across blocks are zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockDiagKernel {
    pub scalar: ArdSeParams,
    pub spec: BlockDiagKernelSpec,
    outputs: Vec<usize>,
    /// Per block: positions of its coordinates within `outputs`.
    positions: Vec<Vec<usize>>,
}

pub fn build_block_diag(spec: &BlockDiagKernelSpec, scalar: &ArdSeParams) -> Result<BlockDiagKernel> {
    scalar.validate()?;
    let mut outputs: Vec<usize> = Vec::new();
    for b in &spec.blocks {
        if b.dims.is_empty() {
            return Err(Error::Config("kernel block with no dimensions".into()));
        }
        if b.kind == BlockKind::ScalarSe && b.dims.len() != 1 {
            return Err(Error::Config(format!(
                "scalar_se block must cover exactly one dimension, got {:?}",
                b.dims
            )));
        }
        for &d in &b.dims {
            if d >= scalar.dim() {
                return Err(Error::Config(format!("block dimension {d} out of range")));
            }
            if outputs.contains(&d) {
                return Err(Error::Config(format!("kernel blocks overlap at dimension {d}")));
            }
            outputs.push(d);
        }
    }
    outputs.sort_unstable();
    let positions = spec
        .blocks
        .iter()
        .map(|b| {
            let mut dims = b.dims.clone();
            dims.sort_unstable();
            dims.iter()
                .map(|d| outputs.iter().position(|o| o == d).unwrap())
                .collect()
        })
        .collect();
    Ok(BlockDiagKernel {
        scalar: scalar.clone(),
        spec: spec.clone(),
        outputs,
        positions,
    })
}

impl BlockDiagKernel {
    fn fill(&self, out: &mut [f64], mut f: impl FnMut(&KernelBlock, &[usize], &[usize], &mut [f64])) {
        out.iter_mut().for_each(|v| *v = 0.0);
        let m = self.outputs.len();
        let mut local = [0.0; MAX_DIMS * MAX_DIMS];
        for (b, pos) in self.spec.blocks.iter().zip(&self.positions) {
            let dims: Vec<usize> = pos.iter().map(|&p| self.outputs[p]).collect();
            let bm = pos.len();
            f(b, &dims, pos, &mut local[..bm * bm]);
            for (li, &pi) in pos.iter().enumerate() {
                for (lj, &pj) in pos.iter().enumerate() {
                    out[pi * m + pj] = local[li * bm + lj];
                }
            }
        }
    }

    /// Block index and local position of output position `p`.
    fn locate(&self, p: usize) -> (usize, usize) {
        for (bi, pos) in self.positions.iter().enumerate() {
            if let Some(lp) = pos.iter().position(|&q| q == p) {
                return (bi, lp);
            }
        }
        unreachable!("output position {p} not covered by any block")
    }
}

impl OperatorKernel for BlockDiagKernel {
    fn input_dim(&self) -> usize {
        self.scalar.dim()
    }

    fn outputs(&self) -> &[usize] {
        &self.outputs
    }

    fn block_into(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        let scalar = &self.scalar;
        self.fill(out, |b, dims, _, local| {
            let lg = lag(x, y, dims, scalar);
            let bm = dims.len();
            for i in 0..bm {
                for j in 0..bm {
                    local[i * bm + j] = match b.kind {
                        BlockKind::CurlFreeSe => hess_neg(&lg, i, j),
                        BlockKind::ScalarSe => lg.g,
                    };
                }
            }
        });
    }

    fn dblock_into(&self, x: &[f64], y: &[f64], l: usize, out: &mut [f64]) {
        let (lb, ll) = self.locate(l);
        let scalar = &self.scalar;
        let mut bi = 0;
        self.fill(out, |b, dims, _, local| {
            let bm = dims.len();
            let this = bi;
            bi += 1;
            if this != lb {
                local.iter_mut().for_each(|v| *v = 0.0);
                return;
            }
            let lg = lag(x, y, dims, scalar);
            for i in 0..bm {
                for j in 0..bm {
                    local[i * bm + j] = match b.kind {
                        BlockKind::CurlFreeSe => third(&lg, i, j, ll),
                        // d/dy g(x - y) = q g
                        BlockKind::ScalarSe => lg.q[0] * lg.g,
                    };
                }
            }
        });
    }

    fn d2block_into(&self, x: &[f64], y: &[f64], a: usize, l: usize, out: &mut [f64]) {
        let (ab, al) = self.locate(a);
        let (lb, ll) = self.locate(l);
        let scalar = &self.scalar;
        let mut bi = 0;
        self.fill(out, |b, dims, _, local| {
            let bm = dims.len();
            let this = bi;
            bi += 1;
            if this != lb || this != ab {
                local.iter_mut().for_each(|v| *v = 0.0);
                return;
            }
            let lg = lag(x, y, dims, scalar);
            for i in 0..bm {
                for j in 0..bm {
                    local[i * bm + j] = match b.kind {
                        BlockKind::CurlFreeSe => fourth(&lg, i, j, ll, al),
                        // d^2/(dx dy) g(x - y) = (d - q^2) g
                        BlockKind::ScalarSe => (lg.d[0] - lg.q[0] * lg.q[0]) * lg.g,
                    };
                }
            }
        });
    }
}

/// Kernel configuration as read from JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelConfig {
    pub lengthscales: Vec<f64>,
    #[serde(default = "one")]
    pub signal_variance: f64,
    #[serde(default)]
    pub active_dims: Option<Vec<usize>>,
    #[serde(default)]
    pub blocks: Option<Vec<KernelBlock>>,
}

impl KernelConfig {
    pub fn params(&self) -> ArdSeParams {
        ArdSeParams {
            lengthscales: self.lengthscales.clone(),
            signal_variance: self.signal_variance,
        }
    }

    pub fn build(&self) -> Result<CoefficientKernel> {
        let params = self.params();
        match &self.blocks {
            Some(blocks) => Ok(CoefficientKernel::BlockDiag(build_block_diag(
                &BlockDiagKernelSpec {
                    blocks: blocks.clone(),
                },
                &params,
            )?)),
            None => {
                let dims = self
                    .active_dims
                    .clone()
                    .unwrap_or_else(|| (0..params.dim()).collect());
                Ok(CoefficientKernel::CurlFree(CurlFreeKernel::with_active_dims(
                    params, dims,
                )?))
            }
        }
    }
}

/// The kernels an estimator can be configured with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum CoefficientKernel {
    CurlFree(CurlFreeKernel),
    BlockDiag(BlockDiagKernel),
}

impl CoefficientKernel {
    fn inner(&self) -> &dyn OperatorKernel {
        match self {
            CoefficientKernel::CurlFree(k) => k,
            CoefficientKernel::BlockDiag(k) => k,
        }
    }
}

impl OperatorKernel for CoefficientKernel {
    fn input_dim(&self) -> usize {
        self.inner().input_dim()
    }
    fn outputs(&self) -> &[usize] {
        self.inner().outputs()
    }
    fn block_into(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        self.inner().block_into(x, y, out)
    }
    fn dblock_into(&self, x: &[f64], y: &[f64], l: usize, out: &mut [f64]) {
        self.inner().dblock_into(x, y, l, out)
    }
    fn d2block_into(&self, x: &[f64], y: &[f64], a: usize, l: usize, out: &mut [f64]) {
        self.inner().d2block_into(x, y, a, l, out)
    }
}

/// Gram matrix `[K(x_i, x_j)]` over a point set, `(n m) x (n m)` with blocks
/// ordered by point.
pub fn gram<K: OperatorKernel + ?Sized>(kernel: &K, points: &[Vec<f64>]) -> DMatrix<f64> {
    let m = kernel.n_outputs();
    let n = points.len();
    let mut g = DMatrix::zeros(n * m, n * m);
    let mut buf = vec![0.0; m * m];
    for (i, x) in points.iter().enumerate() {
        for (j, y) in points.iter().enumerate() {
            kernel.block_into(x, y, &mut buf);
            for a in 0..m {
                for b in 0..m {
                    g[(i * m + a, j * m + b)] = buf[a * m + b];
                }
            }
        }
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_point(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()
    }

    fn rand_kernel(rng: &mut ChaCha8Rng, n: usize) -> CurlFreeKernel {
        let ls = (0..n).map(|_| rng.random_range(0.5..3.0)).collect();
        CurlFreeKernel::new(ArdSeParams::new(ls).unwrap()).unwrap()
    }

    #[test]
    fn scalar_kernel_values() {
        let p = ArdSeParams::new(vec![1.0]).unwrap();
        assert_abs_diff_eq!(k_scalar(&[0.3], &[0.3], &p).unwrap(), 1.0);
        assert_abs_diff_eq!(k_scalar(&[0.0], &[1.0], &p).unwrap(), (-0.5f64).exp(), epsilon = 1e-15);
        assert!(k_scalar(&[0.0, 1.0], &[1.0], &p).is_err());
    }

    #[test]
    fn scalar_kernel_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = ArdSeParams::new(vec![0.7, 2.0, 1.3]).unwrap();
        for _ in 0..20 {
            let (x, y) = (rand_point(&mut rng, 3), rand_point(&mut rng, 3));
            let v = k_scalar(&x, &y, &p).unwrap();
            assert_eq!(v, k_scalar(&y, &x, &p).unwrap());
            assert!(v > 0.0 && v <= 1.0);
        }
    }

    #[test]
    fn params_validation() {
        assert!(ArdSeParams::new(vec![1.0, 0.0]).is_err());
        assert!(ArdSeParams::new(vec![f64::INFINITY]).is_err());
        assert!(ArdSeParams::new(vec![]).is_err());
    }

    #[test]
    fn zero_lag_block_is_inverse_squared_lengthscales() {
        let k = CurlFreeKernel::new(ArdSeParams::new(vec![7.0, 2.0, 0.5]).unwrap()).unwrap();
        let x = [0.1, -0.4, 2.0];
        let b = k_curl_block(&x, &x, &k).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 / k.scalar.lengthscales[i].powi(2) } else { 0.0 };
                assert_abs_diff_eq!(b[(i, j)], want, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn one_dimensional_limits() {
        let k = CurlFreeKernel::new(ArdSeParams::new(vec![1.0]).unwrap()).unwrap();
        assert_abs_diff_eq!(k_curl_block(&[0.0], &[0.0], &k).unwrap()[(0, 0)], 1.0);
        assert!(k_curl_block(&[0.0], &[50.0], &k).unwrap()[(0, 0)].abs() < 1e-300);
        assert_abs_diff_eq!(k_curl_d2block(&[0.0], &[0.0], 0, 0, &k).unwrap()[(0, 0)], 3.0, epsilon = 1e-14);
    }

    #[test]
    fn derivative_blocks_at_zero_lag_and_antisymmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let k = rand_kernel(&mut rng, 3);
        let x = rand_point(&mut rng, 3);
        for l in 0..3 {
            assert!(k_curl_dblock(&x, &x, l, &k).unwrap().amax() < 1e-15);
        }
        let y = rand_point(&mut rng, 3);
        let mirror: Vec<f64> = x.iter().zip(&y).map(|(a, b)| 2.0 * a - b).collect();
        // lag x - y versus lag x - mirror = -(x - y)
        for l in 0..3 {
            let a = k_curl_dblock(&x, &y, l, &k).unwrap();
            let b = k_curl_dblock(&x, &mirror, l, &k).unwrap();
            assert!((a + b).amax() < 1e-14);
        }
    }

    #[test]
    fn inactive_index_is_rejected() {
        let k = CurlFreeKernel::with_active_dims(ArdSeParams::new(vec![1.0; 4]).unwrap(), vec![0, 2])
            .unwrap();
        let x = [0.0; 4];
        assert!(k_curl_dblock(&x, &x, 1, &k).is_err());
        assert!(k_curl_d2block(&x, &x, 0, 3, &k).is_err());
        assert_eq!(k_curl_block(&x, &x, &k).unwrap().nrows(), 2);
    }

    #[test]
    fn stationarity_swap_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let k = rand_kernel(&mut rng, 3);
        for _ in 0..10 {
            let (x, y) = (rand_point(&mut rng, 3), rand_point(&mut rng, 3));
            assert!((k.block(&x, &y) - k.block(&y, &x).transpose()).amax() < 1e-15);
            for a in 0..3 {
                for l in 0..3 {
                    // <d_a rep(x), d_l rep(y)> = <d_l rep(y), d_a rep(x)>
                    let lhs = k.d2block(&x, &y, a, l);
                    let rhs = k.d2block(&y, &x, l, a).transpose();
                    assert!((lhs - rhs).amax() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn gram_is_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let k = rand_kernel(&mut rng, 3);
        let pts: Vec<Vec<f64>> = (0..5).map(|_| rand_point(&mut rng, 3)).collect();
        let g = gram(&k, &pts);
        let min = g.symmetric_eigenvalues().min();
        assert!(min >= -1e-9, "min eigenvalue {min}");
    }

    #[test]
    fn block_diag_zero_pattern_and_single_block() {
        let params = ArdSeParams::new(vec![1.0, 2.0, 1.5]).unwrap();
        let spec = BlockDiagKernelSpec {
            blocks: vec![
                KernelBlock { dims: vec![0, 1], kind: BlockKind::CurlFreeSe },
                KernelBlock { dims: vec![2], kind: BlockKind::ScalarSe },
            ],
        };
        let k = build_block_diag(&spec, &params).unwrap();
        let b = k.block(&[0.1, 0.5, -0.3], &[0.7, -0.2, 0.4]);
        for (i, j) in [(0, 2), (1, 2), (2, 0), (2, 1)] {
            assert_eq!(b[(i, j)], 0.0);
        }
        assert_abs_diff_eq!(
            b[(2, 2)],
            k_scalar(&[-0.3], &[0.4], &ArdSeParams::new(vec![1.5]).unwrap()).unwrap(),
            epsilon = 1e-15
        );

        let whole = build_block_diag(
            &BlockDiagKernelSpec {
                blocks: vec![KernelBlock { dims: vec![0, 1, 2], kind: BlockKind::CurlFreeSe }],
            },
            &params,
        )
        .unwrap();
        let full = CurlFreeKernel::new(params.clone()).unwrap();
        let (x, y) = ([0.3, 0.1, -0.8], [-0.5, 0.9, 0.2]);
        assert!((whole.block(&x, &y) - full.block(&x, &y)).amax() < 1e-16);
        assert!((whole.d2block(&x, &y, 1, 2) - full.d2block(&x, &y, 1, 2)).amax() < 1e-16);
    }

    #[test]
    fn block_diag_rejects_overlap() {
        let params = ArdSeParams::new(vec![1.0; 3]).unwrap();
        let spec = BlockDiagKernelSpec {
            blocks: vec![
                KernelBlock { dims: vec![0, 1], kind: BlockKind::CurlFreeSe },
                KernelBlock { dims: vec![1], kind: BlockKind::ScalarSe },
            ],
        };
        assert!(build_block_diag(&spec, &params).is_err());
    }

    #[test]
    fn block_diag_gram_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let params = ArdSeParams::new(vec![1.0, 2.0, 1.5]).unwrap();
        let spec = BlockDiagKernelSpec {
            blocks: vec![
                KernelBlock { dims: vec![0, 1], kind: BlockKind::CurlFreeSe },
                KernelBlock { dims: vec![2], kind: BlockKind::ScalarSe },
            ],
        };
        let k = build_block_diag(&spec, &params).unwrap();
        let pts: Vec<Vec<f64>> = (0..5).map(|_| rand_point(&mut rng, 3)).collect();
        assert!(gram(&k, &pts).symmetric_eigenvalues().min() >= -1e-9);
    }

    #[test]
    fn kernel_config_json() {
        let cfg: KernelConfig =
            serde_json::from_str(r#"{"lengthscales":[7,2,7],"active_dims":[0,2]}"#).unwrap();
        let k = cfg.build().unwrap();
        assert_eq!(k.outputs(), &[0, 2]);
        let cfg: KernelConfig = serde_json::from_str(
            r#"{"lengthscales":[7,2,7],"blocks":[{"dims":[0,1],"kind":"curl_free_se"},{"dims":[2],"kind":"scalar_se"}]}"#,
        )
        .unwrap();
        assert!(matches!(cfg.build().unwrap(), CoefficientKernel::BlockDiag(_)));
    }
}
