//! Frequency-domain LPV equation error.
//!
//! For coefficient samples `c_j(k) = c_j(p_L(t_k))` and transient parameters
//! `gamma`, the equation error on a selected band of bins is
//!
//! `e = -psi_{n_a+1} . Y + sum_j F (c_j . omega_j) + Psi gamma`
//!
//! where `omega_j` are the time-domain derivatives `y~^(n)` (`j <= n_a`) and
//! `u~^(m)` (`j > n_a`), computed spectrally.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signals::{dft, psi_basis, spectral_derivative, BasisKind, FrequencyBasis, TimeGrid};
use crate::simulator::SampledDataset;

pub use crate::simulator::NoiseCovariance;

/// How the band of bins entering the fit is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BandSpec {
    /// `|f| <= max_hz`.
    MaxHz { max_hz: f64 },
    /// Every bin.
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OperatorConfig {
    /// Basis of the transient columns.
    pub psi_kind: BasisKind,
    /// Basis of the output-side `psi_{n_a+1}`.
    pub output_psi_kind: BasisKind,
    /// Transient degree; `None` selects `max(n_a + 1, n_b) + 2`.
    pub n_gamma: Option<usize>,
    /// `None` selects twice the highest excited frequency.
    pub band: Option<BandSpec>,
}

impl Default for OperatorConfig {
    fn default() -> Self {
        Self {
            psi_kind: BasisKind::Legendre,
            output_psi_kind: BasisKind::Monomial,
            n_gamma: None,
            band: None,
        }
    }
}

pub fn default_n_gamma(n_a: usize, n_b: usize) -> usize {
    (n_a + 1).max(n_b) + 2
}

pub fn min_n_gamma(n_a: usize, n_b: usize) -> usize {
    (n_a + 1).max(n_b).saturating_sub(1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Part {
    Re,
    Im,
}

/// Assembled frequency-domain model for one dataset.
#[derive(Debug, Clone)]
pub struct FreqLpvOperator {
    pub grid: TimeGrid,
    pub n_a: usize,
    pub n_b: usize,
    pub n_gamma: usize,
    /// Selected bins, ascending.
    pub band: Vec<i64>,
    /// Position of each selected bin in the full ascending bin list.
    pub band_positions: Vec<usize>,
    /// Angular frequency of each selected bin.
    pub band_omegas: Vec<f64>,
    /// Diagonals of `Omega_j`, `j = 0..n_x`, as time series.
    pub omega_blocks: Vec<Vec<f64>>,
    /// `psi_{n_a+1}` on the band.
    pub psi_out: Vec<Complex64>,
    /// Transient basis on the band, `|band| x (n_gamma + 1)`.
    pub psi: DMatrix<Complex64>,
    pub psi_basis: FrequencyBasis,
    /// DFT of the measured small output on the band.
    pub y_band: Vec<Complex64>,
    /// Rows of the unitary DFT matrix for the band, `|band| x N`.
    pub dft_rows: DMatrix<Complex64>,
}

impl FreqLpvOperator {
    pub fn build(ds: &SampledDataset, cfg: &OperatorConfig, default_band_hz: f64) -> Result<Self> {
        let band = cfg.band.unwrap_or(BandSpec::MaxHz {
            max_hz: default_band_hz,
        });
        build_operator(ds, ds.n_a, ds.n_b, cfg, band)
    }

    pub fn n_x(&self) -> usize {
        self.n_a + self.n_b + 2
    }

    pub fn n_samples(&self) -> usize {
        self.grid.n_samples
    }

    /// `e` on the band for coefficient samples (`N` rows of `n_x`).
    pub fn equation_error(&self, c_samples: &[Vec<f64>], gamma: &[f64]) -> Result<Vec<Complex64>> {
        self.check_coefficients(c_samples)?;
        if gamma.len() != self.n_gamma + 1 {
            return Err(Error::dim("transient parameters", self.n_gamma + 1, gamma.len()));
        }
        let n = self.n_samples();
        let nx = self.n_x();
        // r(k) = sum_j c_j(k) omega_j(k)
        let r: Vec<f64> = (0..n)
            .map(|k| (0..nx).map(|j| c_samples[k][j] * self.omega_blocks[j][k]).sum())
            .collect();
        let mut e = Vec::with_capacity(self.band.len());
        for (b, _) in self.band.iter().enumerate() {
            let mut acc = -self.psi_out[b] * self.y_band[b];
            for (k, rk) in r.iter().enumerate() {
                acc += self.dft_rows[(b, k)] * rk;
            }
            for (g, gv) in gamma.iter().enumerate() {
                acc += self.psi[(b, g)] * gv;
            }
            e.push(acc);
        }
        Ok(e)
    }

    fn check_coefficients(&self, c_samples: &[Vec<f64>]) -> Result<()> {
        if c_samples.len() != self.n_samples() {
            return Err(Error::dim("coefficient samples", self.n_samples(), c_samples.len()));
        }
        if let Some(r) = c_samples.iter().find(|r| r.len() != self.n_x()) {
            return Err(Error::dim("coefficient columns", self.n_x(), r.len()));
        }
        Ok(())
    }

    /// Diagonal of `cov{e}` on the band for the given coefficients.
    pub fn equation_error_covariance(&self, c_samples: &[Vec<f64>], noise: &NoiseCovariance) -> Result<Vec<f64>> {
        self.check_coefficients(c_samples)?;
        let n = self.n_samples();
        noise.validate(n)?;
        let nx = self.n_x();
        let n_a = self.n_a;
        let bins = self.grid.bins();
        let omegas = self.grid.omegas();
        let mono = FrequencyBasis {
            kind: BasisKind::Monomial,
            max_degree: n_a.max(self.n_b),
            omega_max: 1.0,
        };
        // Monomial psi_n over all bins, for the derivative orders in Omega.
        let psi_all: Vec<Vec<Complex64>> = (0..=n_a.max(self.n_b)).map(|d| psi_basis(&mono, &omegas, d)).collect();
        // Unitary DFT of each coefficient time series.
        let c_hat: Vec<Vec<Complex64>> = (0..nx)
            .map(|j| {
                let col: Vec<f64> = c_samples.iter().map(|r| r[j]).collect();
                dft(&col, &self.grid).map(|s| s.bins)
            })
            .collect::<Result<_>>()?;
        let scale = 1.0 / (n as f64).sqrt();
        let min_bin = self.grid.min_bin();
        let n_i = n as i64;
        let wrap = |d: i64| -> usize { ((d - min_bin).rem_euclid(n_i)) as usize };
        let has_u = noise.c_u.iter().any(|v| *v != 0.0);
        let has_uy = noise.c_uy.iter().any(|v| v.norm() != 0.0);
        let mut out = Vec::with_capacity(self.band.len());
        for (b, &xi) in self.band.iter().enumerate() {
            let mut var = 0.0;
            for (q, &xq) in bins.iter().enumerate() {
                let pos = wrap(xi - xq);
                let mut a = Complex64::new(0.0, 0.0);
                for d in 0..=n_a {
                    a += c_hat[d][pos] * psi_all[d][q];
                }
                a *= scale;
                if xq == xi {
                    a -= self.psi_out[b];
                }
                var += a.norm_sqr() * noise.c_y[q];
                if has_u || has_uy {
                    let mut bb = Complex64::new(0.0, 0.0);
                    for m in 0..=self.n_b {
                        bb += c_hat[n_a + 1 + m][pos] * psi_all[m][q];
                    }
                    bb *= scale;
                    var += bb.norm_sqr() * noise.c_u[q];
                    var += 2.0 * (a * noise.c_uy[q] * bb.conj()).re;
                }
            }
            out.push(var.max(0.0));
        }
        Ok(out)
    }

    /// `sum |e|^2 / w` over the band.
    pub fn weighted_cost(e: &[Complex64], w: &[f64]) -> f64 {
        e.iter().zip(w).map(|(e, w)| e.norm_sqr() / w).sum()
    }

    /// Real least-squares form of `sum_b |e_b|^2 / w_b` over the band.
    ///
    /// Conjugate pairs `(xi, -xi)` are folded onto `xi > 0` with doubled
    /// weight; unpaired bins keep both parts with unit multiplicity.
    pub fn real_system(&self, bin_variance: &[f64]) -> Result<RealSystem> {
        if bin_variance.len() != self.band.len() {
            return Err(Error::dim("bin weights", self.band.len(), bin_variance.len()));
        }
        if bin_variance.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::Numerical("bin variances must be positive and finite".into()));
        }
        let mut rows = Vec::new();
        for (b, &xi) in self.band.iter().enumerate() {
            let paired = xi != 0 && self.band.binary_search(&(-xi)).is_ok();
            if paired && xi < 0 {
                continue;
            }
            let mult = if paired { 2.0 } else { 1.0 };
            for part in [Part::Re, Part::Im] {
                if xi == 0 && part == Part::Im && !self.dc_has_imaginary() {
                    continue;
                }
                rows.push(RowSpec {
                    band_index: b,
                    xi,
                    part,
                    weight: mult / bin_variance[b],
                });
            }
        }
        let n = self.n_samples();
        let nx = self.n_x();
        let ng = self.n_gamma + 1;
        let mut a_c = DMatrix::zeros(rows.len(), n * nx);
        let mut a_g = DMatrix::zeros(rows.len(), ng);
        let mut d = DVector::zeros(rows.len());
        let take = |z: Complex64, p: Part| match p {
            Part::Re => z.re,
            Part::Im => z.im,
        };
        for (r, row) in rows.iter().enumerate() {
            let b = row.band_index;
            for k in 0..n {
                let f = self.dft_rows[(b, k)];
                for j in 0..nx {
                    a_c[(r, k * nx + j)] = take(f * self.omega_blocks[j][k], row.part);
                }
            }
            for g in 0..ng {
                a_g[(r, g)] = take(self.psi[(b, g)], row.part);
            }
            d[r] = take(self.psi_out[b] * self.y_band[b], row.part);
        }
        let weights = DVector::from_iterator(rows.len(), rows.iter().map(|r| r.weight));
        Ok(RealSystem {
            rows,
            a_c,
            a_g,
            d,
            weights,
            n_samples: n,
            n_x: nx,
        })
    }

    fn dc_has_imaginary(&self) -> bool {
        // Only non-real data can make the DC error complex.
        match self.band.binary_search(&0) {
            Ok(b) => self.y_band[b].im.abs() > 0.0 || (0..self.psi.ncols()).any(|g| self.psi[(b, g)].im != 0.0),
            Err(_) => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RowSpec {
    pub band_index: usize,
    pub xi: i64,
    pub part: Part,
    pub weight: f64,
}

/// `sum_r weight_r (a_c c + a_g gamma - d)_r^2`, with `c` stacked sample-major
/// (`c[k * n_x + j] = c_j(t_k)`).
#[derive(Debug, Clone)]
pub struct RealSystem {
    pub rows: Vec<RowSpec>,
    pub a_c: DMatrix<f64>,
    pub a_g: DMatrix<f64>,
    pub d: DVector<f64>,
    pub weights: DVector<f64>,
    pub n_samples: usize,
    pub n_x: usize,
}

impl RealSystem {
    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn cost(&self, c_samples: &[Vec<f64>], gamma: &[f64]) -> f64 {
        let c = DVector::from_iterator(
            self.n_samples * self.n_x,
            c_samples.iter().flat_map(|r| r.iter().copied()),
        );
        let g = DVector::from_column_slice(gamma);
        let r = &self.a_c * c + &self.a_g * g - &self.d;
        r.iter().zip(self.weights.iter()).map(|(r, w)| w * r * r).sum()
    }
}

/// Assembles the operator on an explicit band.
pub fn build_operator(
    ds: &SampledDataset,
    n_a: usize,
    n_b: usize,
    cfg: &OperatorConfig,
    band: BandSpec,
) -> Result<FreqLpvOperator> {
    ds.validate()?;
    if n_a != ds.n_a || n_b != ds.n_b {
        return Err(Error::Config(format!(
            "operator orders ({n_a}, {n_b}) differ from the dataset's ({}, {})",
            ds.n_a, ds.n_b
        )));
    }
    let grid = ds.grid;
    let n_gamma = cfg.n_gamma.unwrap_or_else(|| default_n_gamma(n_a, n_b));
    let floor = min_n_gamma(n_a, n_b);
    if n_gamma < floor {
        return Err(Error::Config(format!(
            "transient degree {n_gamma} is below the minimum {floor} for n_a = {n_a}, n_b = {n_b}"
        )));
    }
    let all_bins = grid.bins();
    let selected: Vec<(usize, i64)> = match band {
        BandSpec::Full => all_bins.iter().copied().enumerate().collect(),
        BandSpec::MaxHz { max_hz } => all_bins
            .iter()
            .copied()
            .enumerate()
            .filter(|(_, xi)| (grid.omega(*xi) / (2.0 * PI)).abs() <= max_hz * (1.0 + 1e-12))
            .collect(),
    };
    if selected.is_empty() {
        return Err(Error::Config("frequency band selects no bins".into()));
    }
    let band_bins: Vec<i64> = selected.iter().map(|s| s.1).collect();
    let band_positions: Vec<usize> = selected.iter().map(|s| s.0).collect();
    let band_omegas: Vec<f64> = band_bins.iter().map(|&xi| grid.omega(xi)).collect();
    let omega_max = band_omegas.iter().fold(0.0f64, |m, w| m.max(w.abs()));
    let omega_max = if omega_max > 0.0 { omega_max } else { 1.0 };

    let mut omega_blocks = Vec::with_capacity(n_a + n_b + 2);
    for n in 0..=n_a {
        omega_blocks.push(spectral_derivative(&ds.y_small, &grid, n as u32)?);
    }
    for m in 0..=n_b {
        omega_blocks.push(spectral_derivative(&ds.u_small, &grid, m as u32)?);
    }

    let out_basis = FrequencyBasis {
        kind: cfg.output_psi_kind,
        max_degree: n_a + 1,
        omega_max,
    };
    let psi_out = psi_basis(&out_basis, &band_omegas, n_a + 1);
    let psi_b = FrequencyBasis {
        kind: cfg.psi_kind,
        max_degree: n_gamma,
        omega_max,
    };
    let mut psi = DMatrix::zeros(band_bins.len(), n_gamma + 1);
    for g in 0..=n_gamma {
        for (b, v) in psi_basis(&psi_b, &band_omegas, g).into_iter().enumerate() {
            psi[(b, g)] = v;
        }
    }
    let y_full = dft(&ds.y_small, &grid)?;
    let y_band = band_positions.iter().map(|&p| y_full.bins[p]).collect();
    let n = grid.n_samples;
    let scale = 1.0 / (n as f64).sqrt();
    let dft_rows = DMatrix::from_fn(band_bins.len(), n, |b, k| {
        let arg = -2.0 * PI * (band_bins[b] as f64) * (k as f64) / n as f64;
        Complex64::from_polar(scale, arg)
    });
    Ok(FreqLpvOperator {
        grid,
        n_a,
        n_b,
        n_gamma,
        band: band_bins,
        band_positions,
        band_omegas,
        omega_blocks,
        psi_out,
        psi,
        psi_basis: psi_b,
        y_band,
        dft_rows,
    })
}

/// Rewrites `(A x - b)^H W^{-1} (A x - b)` with real `x` as `|| M x - v ||^2`.
///
/// `W` must be Hermitian positive definite; it is factored as `L L^H` and the
/// whitened system `L^{-1} (A x - b)` is split into real and imaginary rows.
pub fn realify(
    a: &DMatrix<Complex64>,
    b: &DVector<Complex64>,
    w: &DMatrix<Complex64>,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let m = a.nrows();
    if b.len() != m {
        return Err(Error::dim("realify rhs", m, b.len()));
    }
    if w.nrows() != m || w.ncols() != m {
        return Err(Error::dim("realify weight", m, w.nrows()));
    }
    let herm = (w - w.adjoint()).iter().fold(0.0f64, |acc, z| acc.max(z.norm()));
    let scale = w.iter().fold(0.0f64, |acc, z| acc.max(z.norm())).max(1.0);
    if herm > 1e-12 * scale {
        return Err(Error::Config(format!("weight matrix is not Hermitian (deviation {herm:.3e})")));
    }
    let chol = w
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Numerical("weight matrix is not positive definite".into()))?;
    let l = chol.l();
    let wa = l
        .solve_lower_triangular(a)
        .ok_or_else(|| Error::Numerical("singular weight factor".into()))?;
    let wb = l
        .solve_lower_triangular(b)
        .ok_or_else(|| Error::Numerical("singular weight factor".into()))?;
    let n = a.ncols();
    let mut ma = DMatrix::zeros(2 * m, n);
    let mut vb = DVector::zeros(2 * m);
    for i in 0..m {
        for j in 0..n {
            ma[(i, j)] = wa[(i, j)].re;
            ma[(m + i, j)] = wa[(i, j)].im;
        }
        vb[i] = wb[i].re;
        vb[m + i] = wb[i].im;
    }
    Ok((ma, vb))
}
