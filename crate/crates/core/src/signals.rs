//! Time and frequency primitives: uniform grids, the unitary DFT over the
//! symmetric bin set, multisine excitation, and the `psi` frequency bases.
//!
//! Bins are always stored in ascending order of the bin index
//! `xi in {-floor(N/2), ..., ceil(N/2) - 1}`, negative frequencies first.

use std::f64::consts::PI;
use std::path::Path;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniform sampling grid `t_k = start_time + k * sample_period`, `k = 0..n_samples`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeGrid {
    pub n_samples: usize,
    pub sample_period: f64,
    pub start_time: f64,
}

impl TimeGrid {
    pub fn new(n_samples: usize, sample_period: f64, start_time: f64) -> Result<Self> {
        if n_samples < 2 {
            return Err(Error::Config(format!(
                "time grid needs at least 2 samples, got {n_samples}"
            )));
        }
        if !(sample_period > 0.0 && sample_period.is_finite()) {
            return Err(Error::Config(format!(
                "sample period must be positive and finite, got {sample_period}"
            )));
        }
        Ok(Self {
            n_samples,
            sample_period,
            start_time,
        })
    }

    pub fn time(&self, k: usize) -> f64 {
        self.start_time + k as f64 * self.sample_period
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.n_samples).map(|k| self.time(k)).collect()
    }

    pub fn sample_rate(&self) -> f64 {
        1.0 / self.sample_period
    }

    /// Record length `N * Ts`, which is also the period of the DFT basis.
    pub fn duration(&self) -> f64 {
        self.n_samples as f64 * self.sample_period
    }

    pub fn end_time(&self) -> f64 {
        self.time(self.n_samples - 1)
    }

    pub fn bin_spacing_hz(&self) -> f64 {
        1.0 / self.duration()
    }

    pub fn nyquist_hz(&self) -> f64 {
        0.5 * self.sample_rate()
    }

    /// Smallest bin index, `-floor(N/2)`.
    pub fn min_bin(&self) -> i64 {
        -((self.n_samples / 2) as i64)
    }

    /// Bin indices in storage order.
    pub fn bins(&self) -> Vec<i64> {
        let lo = self.min_bin();
        (0..self.n_samples as i64).map(|i| lo + i).collect()
    }

    /// Angular frequency of bin `xi`, `2 pi xi / (N Ts)`.
    pub fn omega(&self, xi: i64) -> f64 {
        2.0 * PI * xi as f64 / self.duration()
    }

    pub fn omegas(&self) -> Vec<f64> {
        self.bins().into_iter().map(|xi| self.omega(xi)).collect()
    }

    /// Storage position of bin `xi`.
    pub fn bin_position(&self, xi: i64) -> Option<usize> {
        let pos = xi - self.min_bin();
        (0..self.n_samples as i64).contains(&pos).then_some(pos as usize)
    }
}

/// DFT of a length-N record, bins in ascending `xi` order.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub grid: TimeGrid,
    pub bins: Vec<Complex64>,
}

impl Spectrum {
    pub fn new(grid: TimeGrid, bins: Vec<Complex64>) -> Result<Self> {
        if bins.len() != grid.n_samples {
            return Err(Error::dim("spectrum bins", grid.n_samples, bins.len()));
        }
        Ok(Self { grid, bins })
    }

    pub fn len(&self) -> usize {
        self.bins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bins.is_empty()
    }

    pub fn xi(&self) -> Vec<i64> {
        self.grid.bins()
    }

    pub fn angular_frequencies(&self) -> Vec<f64> {
        self.grid.omegas()
    }

    pub fn at(&self, xi: i64) -> Option<Complex64> {
        self.grid.bin_position(xi).map(|p| self.bins[p])
    }

    /// Largest `|X(-xi) - conj(X(xi))|` over bins that have a mirror partner.
    pub fn conjugate_asymmetry(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for xi in self.grid.bins() {
            if let (Some(a), Some(b)) = (self.at(xi), self.at(-xi)) {
                worst = worst.max((b - a.conj()).norm());
            }
        }
        worst
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["xi", "omega", "real", "imag"])?;
        for ((xi, om), b) in self.xi().iter().zip(self.angular_frequencies()).zip(&self.bins) {
            w.write_record([
                xi.to_string(),
                format!("{om:.17e}"),
                format!("{:.17e}", b.re),
                format!("{:.17e}", b.im),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// `F x` with `F(xi, k) = N^(-1/2) exp(-j 2 pi xi k / N)`; `k` counts from the
/// first sample, so the grid's absolute start time does not enter the phase.
pub fn dft(x: &[f64], grid: &TimeGrid) -> Result<Spectrum> {
    let buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    dft_complex(&buf, grid)
}

pub fn dft_complex(x: &[Complex64], grid: &TimeGrid) -> Result<Spectrum> {
    let n = grid.n_samples;
    if x.len() != n {
        return Err(Error::dim("dft input", n, x.len()));
    }
    let mut buf = x.to_vec();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let scale = 1.0 / (n as f64).sqrt();
    let bins = grid
        .bins()
        .into_iter()
        .map(|xi| buf[xi.rem_euclid(n as i64) as usize] * scale)
        .collect();
    Ok(Spectrum { grid: *grid, bins })
}

/// `F^H s`.
pub fn idft(s: &Spectrum) -> Vec<Complex64> {
    let n = s.grid.n_samples;
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for (xi, b) in s.grid.bins().into_iter().zip(&s.bins) {
        buf[xi.rem_euclid(n as i64) as usize] = *b;
    }
    FftPlanner::new().plan_fft_inverse(n).process(&mut buf);
    let scale = 1.0 / (n as f64).sqrt();
    buf.iter_mut().for_each(|v| *v *= scale);
    buf
}

/// `F^H s` for a conjugate-symmetric spectrum; errors if the imaginary part
/// exceeds `1e-10` relative to the signal's max-norm.
pub fn idft_real(s: &Spectrum) -> Result<Vec<f64>> {
    let z = idft(s);
    let peak = z.iter().fold(1.0_f64, |m, v| m.max(v.re.abs()));
    let imag = z.iter().fold(0.0_f64, |m, v| m.max(v.im.abs()));
    if imag > 1e-10 * peak {
        return Err(Error::Numerical(format!(
            "inverse DFT is not real (max imaginary part {imag:.3e})"
        )));
    }
    Ok(z.into_iter().map(|v| v.re).collect())
}

/// Explicit DFT matrix, rows in bin order. Only meant for small `n`.
pub fn dft_matrix(grid: &TimeGrid) -> nalgebra::DMatrix<Complex64> {
    let n = grid.n_samples;
    let scale = 1.0 / (n as f64).sqrt();
    let bins = grid.bins();
    nalgebra::DMatrix::from_fn(n, n, |r, k| {
        let phase = -2.0 * PI * bins[r] as f64 * k as f64 / n as f64;
        Complex64::from_polar(scale, phase)
    })
}

/// `n`-th time derivative of a periodic record computed in the frequency domain.
/// The unpaired Nyquist bin of even-length records drops out for odd orders.
pub fn spectral_derivative(x: &[f64], grid: &TimeGrid, order: u32) -> Result<Vec<f64>> {
    if order == 0 {
        if x.len() != grid.n_samples {
            return Err(Error::dim("spectral derivative input", grid.n_samples, x.len()));
        }
        return Ok(x.to_vec());
    }
    let mut s = dft(x, grid)?;
    let omegas = grid.omegas();
    for (b, w) in s.bins.iter_mut().zip(omegas) {
        *b *= Complex64::new(0.0, w).powu(order);
    }
    Ok(idft(&s).into_iter().map(|v| v.re).collect())
}

/// Multisine excitation: cosines at integer multiples of a fundamental.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultisineSpec {
    pub fundamental_hz: f64,
    pub harmonic_indices: Vec<u32>,
    pub target_rms: f64,
    pub phase_seed: u64,
}

impl MultisineSpec {
    /// Harmonics `1..=count` of `fundamental_hz`.
    pub fn consecutive(fundamental_hz: f64, count: u32, target_rms: f64, phase_seed: u64) -> Self {
        Self {
            fundamental_hz,
            harmonic_indices: (1..=count).collect(),
            target_rms,
            phase_seed,
        }
    }

    pub fn max_frequency_hz(&self) -> f64 {
        self.harmonic_indices.iter().copied().max().unwrap_or(0) as f64 * self.fundamental_hz
    }

    fn validate(&self, grid: &TimeGrid) -> Result<()> {
        if !(self.target_rms > 0.0) {
            return Err(Error::Config("multisine target RMS must be positive".into()));
        }
        if self.harmonic_indices.is_empty() {
            return Err(Error::Config("multisine needs at least one harmonic".into()));
        }
        for &h in &self.harmonic_indices {
            let f = h as f64 * self.fundamental_hz;
            if h == 0 || f >= grid.nyquist_hz() {
                return Err(Error::Config(format!(
                    "harmonic {h} at {f} Hz is not strictly between DC and Nyquist ({} Hz)",
                    grid.nyquist_hz()
                )));
            }
            let bin = f * grid.duration();
            if (bin - bin.round()).abs() > 1e-9 * bin.max(1.0) {
                return Err(Error::Config(format!(
                    "harmonic {h} at {f} Hz is off the DFT grid (bin {bin})"
                )));
            }
        }
        Ok(())
    }
}

/// A calibrated multisine that can be evaluated (with derivatives) at any time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Multisine {
    pub amplitude: f64,
    pub frequencies_hz: Vec<f64>,
    pub phases: Vec<f64>,
}

impl Multisine {
    /// Draws phases from `spec.phase_seed` and scales the amplitude so the RMS
    /// over `grid` equals `spec.target_rms`.
    pub fn calibrated(spec: &MultisineSpec, grid: &TimeGrid) -> Result<Self> {
        spec.validate(grid)?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.phase_seed);
        let phases: Vec<f64> = spec
            .harmonic_indices
            .iter()
            .map(|_| rng.random_range(0.0..2.0 * PI))
            .collect();
        let frequencies_hz = spec
            .harmonic_indices
            .iter()
            .map(|&h| h as f64 * spec.fundamental_hz)
            .collect();
        let mut ms = Self {
            amplitude: 1.0,
            frequencies_hz,
            phases,
        };
        let raw = ms.sample(grid, 0);
        let rms = (raw.iter().map(|v| v * v).sum::<f64>() / raw.len() as f64).sqrt();
        if rms == 0.0 {
            return Err(Error::Config("multisine has zero power on this grid".into()));
        }
        ms.amplitude = spec.target_rms / rms;
        Ok(ms)
    }

    /// Same shape with the amplitude multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            amplitude: self.amplitude * factor,
            ..self.clone()
        }
    }

    /// `order`-th time derivative at `t`.
    pub fn derivative(&self, t: f64, order: u32) -> f64 {
        let mut acc = 0.0;
        for (&f, &ph) in self.frequencies_hz.iter().zip(&self.phases) {
            let w = 2.0 * PI * f;
            // d^m/dt^m cos(w t + ph) = w^m cos(w t + ph + m pi / 2)
            acc += w.powi(order as i32) * (w * t + ph + order as f64 * 0.5 * PI).cos();
        }
        self.amplitude * acc
    }

    pub fn value(&self, t: f64) -> f64 {
        self.derivative(t, 0)
    }

    pub fn sample(&self, grid: &TimeGrid, order: u32) -> Vec<f64> {
        grid.times().into_iter().map(|t| self.derivative(t, order)).collect()
    }
}

/// Synthesizes the multisine on `grid`; RMS equals `spec.target_rms`.
pub fn synth_multisine(spec: &MultisineSpec, grid: &TimeGrid) -> Result<Vec<f64>> {
    Ok(Multisine::calibrated(spec, grid)?.sample(grid, 0))
}

pub fn rms(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BasisKind {
    Monomial,
    #[default]
    Legendre,
}

/// Polynomial basis in `j omega` used for derivative and transient columns.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrequencyBasis {
    pub kind: BasisKind,
    pub max_degree: usize,
    /// Scaling frequency for the Legendre kind.
    pub omega_max: f64,
}

/// Legendre polynomial `P_n(x)` by the three-term recurrence.
pub fn legendre(n: usize, x: f64) -> f64 {
    match n {
        0 => 1.0,
        1 => x,
        _ => {
            let (mut p0, mut p1) = (1.0, x);
            for k in 1..n {
                let kf = k as f64;
                let p2 = ((2.0 * kf + 1.0) * x * p1 - kf * p0) / (kf + 1.0);
                p0 = p1;
                p1 = p2;
            }
            p1
        }
    }
}

/// `psi_n` evaluated at each angular frequency.
///
/// Monomial: `(j w)^n`. Legendre: `P_n(w / w_M)`, multiplied by `j` for odd `n`
/// so the basis keeps the conjugate symmetry of `(j w)^n`.
pub fn psi_basis(basis: &FrequencyBasis, omegas: &[f64], n: usize) -> Vec<Complex64> {
    match basis.kind {
        BasisKind::Monomial => omegas
            .iter()
            .map(|&w| Complex64::new(0.0, w).powu(n as u32))
            .collect(),
        BasisKind::Legendre => omegas
            .iter()
            .map(|&w| {
                let p = legendre(n, w / basis.omega_max);
                if n % 2 == 1 {
                    Complex64::new(0.0, p)
                } else {
                    Complex64::new(p, 0.0)
                }
            })
            .collect(),
    }
}

/// Writes a time column followed by named value columns.
pub fn write_signals_csv(
    path: &Path,
    grid: &TimeGrid,
    names: &[&str],
    columns: &[&[f64]],
) -> Result<()> {
    if names.len() != columns.len() {
        return Err(Error::dim("signal csv columns", names.len(), columns.len()));
    }
    for c in columns {
        if c.len() != grid.n_samples {
            return Err(Error::dim("signal csv rows", grid.n_samples, c.len()));
        }
    }
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["t".to_string()];
    header.extend(names.iter().map(|s| s.to_string()));
    w.write_record(&header)?;
    for k in 0..grid.n_samples {
        let mut row = vec![format!("{:.17e}", grid.time(k))];
        row.extend(columns.iter().map(|c| format!("{:.17e}", c[k])));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a CSV written by [`write_signals_csv`]: returns header names (without
/// the time column), the time column and the value columns.
pub fn read_signals_csv(path: &Path) -> Result<(Vec<String>, Vec<f64>, Vec<Vec<f64>>)> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header.len() < 2 {
        return Err(Error::Config(format!(
            "{}: expected a time column and at least one value column",
            path.display()
        )));
    }
    let mut time = Vec::new();
    let mut cols = vec![Vec::new(); header.len() - 1];
    for rec in r.records() {
        let rec = rec?;
        let parse = |s: &str| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| Error::Config(format!("{}: bad number {s:?}: {e}", path.display())))
        };
        time.push(parse(&rec[0])?);
        for (i, c) in cols.iter_mut().enumerate() {
            c.push(parse(&rec[i + 1])?);
        }
    }
    Ok((header[1..].to_vec(), time, cols))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    fn grid(n: usize) -> TimeGrid {
        TimeGrid::new(n, 0.05, 0.0).unwrap()
    }

    #[test]
    fn grid_rejects_bad_input() {
        assert!(TimeGrid::new(1, 0.1, 0.0).is_err());
        assert!(TimeGrid::new(4, 0.0, 0.0).is_err());
        assert!(TimeGrid::new(4, -1.0, 0.0).is_err());
    }

    #[test]
    fn bin_set_matches_definition() {
        assert_eq!(grid(4).bins(), vec![-2, -1, 0, 1]);
        assert_eq!(grid(5).bins(), vec![-2, -1, 0, 1, 2]);
    }

    #[test]
    fn dc_signal_has_single_bin() {
        let g = grid(4);
        let s = dft(&[1.0; 4], &g).unwrap();
        for (xi, b) in s.xi().iter().zip(&s.bins) {
            let want = if *xi == 0 { 2.0 } else { 0.0 };
            assert_abs_diff_eq!(b.re, want, epsilon = 1e-14);
            assert_abs_diff_eq!(b.im, 0.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn dft_rejects_wrong_length() {
        assert!(matches!(dft(&[1.0; 3], &grid(4)), Err(Error::Dimension { .. })));
    }

    #[test]
    fn on_grid_cosine_has_two_bins() {
        let g = grid(64);
        let xi0 = 5;
        let f0 = xi0 as f64 / g.duration();
        let x: Vec<f64> = g.times().iter().map(|t| (2.0 * PI * f0 * t).cos()).collect();
        let s = dft(&x, &g).unwrap();
        let expected = (64.0_f64).sqrt() / 2.0;
        for (xi, b) in s.xi().iter().zip(&s.bins) {
            if xi.abs() == xi0 {
                assert_abs_diff_eq!(b.re, expected, epsilon = 1e-12);
                assert_abs_diff_eq!(b.im, 0.0, epsilon = 1e-12);
            } else {
                assert!(b.norm() < 1e-12, "bin {xi} = {b}");
            }
        }
    }

    #[test]
    fn fast_transform_matches_matrix_definition() {
        let g = TimeGrid::new(12, 0.3, 7.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let f = dft_matrix(&g);
        let xv = nalgebra::DVector::from_iterator(12, x.iter().map(|&v| Complex64::new(v, 0.0)));
        let want = &f * xv;
        let got = dft(&x, &g).unwrap();
        for (a, b) in want.iter().zip(&got.bins) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn impulse_at_dc_inverts_to_constant() {
        let g = grid(8);
        let mut bins = vec![Complex64::new(0.0, 0.0); 8];
        bins[g.bin_position(0).unwrap()] = Complex64::new(1.0, 0.0);
        let x = idft_real(&Spectrum::new(g, bins).unwrap()).unwrap();
        for v in x {
            assert_abs_diff_eq!(v, 1.0 / 8.0_f64.sqrt(), epsilon = 1e-15);
        }
    }

    #[test]
    fn complex_roundtrip() {
        let g = grid(33);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let bins: Vec<Complex64> = (0..33)
            .map(|_| Complex64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        let s = Spectrum::new(g, bins.clone()).unwrap();
        let back = dft_complex(&idft(&s), &g).unwrap();
        for (a, b) in bins.iter().zip(&back.bins) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn idft_real_rejects_asymmetric_spectrum() {
        let g = grid(8);
        let mut bins = vec![Complex64::new(0.0, 0.0); 8];
        bins[g.bin_position(1).unwrap()] = Complex64::new(1.0, 0.0);
        assert!(idft_real(&Spectrum::new(g, bins).unwrap()).is_err());
    }

    #[test]
    fn single_harmonic_multisine_has_expected_amplitude() {
        let g = TimeGrid::new(1000, 0.05, 0.0).unwrap();
        let spec = MultisineSpec {
            fundamental_hz: 0.02,
            harmonic_indices: vec![3],
            target_rms: 0.5,
            phase_seed: 1,
        };
        let ms = Multisine::calibrated(&spec, &g).unwrap();
        assert_abs_diff_eq!(ms.amplitude, 0.5 * 2.0_f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn multisine_rejects_bad_harmonics() {
        let g = TimeGrid::new(1000, 0.05, 0.0).unwrap();
        let mut spec = MultisineSpec::consecutive(0.02, 20, 1e-3, 0);
        spec.harmonic_indices.push(600); // 12 Hz > 10 Hz Nyquist
        assert!(matches!(synth_multisine(&spec, &g), Err(Error::Config(_))));
        let off = MultisineSpec::consecutive(0.013, 3, 1e-3, 0);
        assert!(matches!(synth_multisine(&off, &g), Err(Error::Config(_))));
    }

    #[test]
    fn multisine_is_seed_deterministic() {
        let g = TimeGrid::new(1000, 0.05, 0.0).unwrap();
        let a = synth_multisine(&MultisineSpec::consecutive(0.02, 20, 1e-3, 4), &g).unwrap();
        let b = synth_multisine(&MultisineSpec::consecutive(0.02, 20, 1e-3, 4), &g).unwrap();
        let c = synth_multisine(&MultisineSpec::consecutive(0.02, 20, 1e-3, 5), &g).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!((rms(&c) - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn multisine_derivatives_are_consistent() {
        let ms = Multisine::calibrated(
            &MultisineSpec::consecutive(0.02, 20, 1.0, 2),
            &TimeGrid::new(1000, 0.05, 0.0).unwrap(),
        )
        .unwrap();
        let h = 1e-5;
        for &t in &[0.3, 11.0, 47.9] {
            for m in 0..3 {
                let fd = (ms.derivative(t + h, m) - ms.derivative(t - h, m)) / (2.0 * h);
                let an = ms.derivative(t, m + 1);
                assert!((fd - an).abs() < 1e-6 * (1.0 + an.abs()));
            }
        }
    }

    #[test]
    fn legendre_values() {
        assert_abs_diff_eq!(legendre(2, 0.0), -0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(legendre(3, 0.5), -0.4375, epsilon = 1e-15);
        for n in 0..10 {
            assert_abs_diff_eq!(legendre(n, 1.0), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn psi_basis_branches() {
        let mono = FrequencyBasis {
            kind: BasisKind::Monomial,
            max_degree: 3,
            omega_max: 1.0,
        };
        let w = [-2.0, 0.0, 1.5];
        assert!(psi_basis(&mono, &w, 0).iter().all(|v| *v == Complex64::new(1.0, 0.0)));
        let p2 = psi_basis(&mono, &w, 2);
        assert_abs_diff_eq!(p2[0].re, -4.0, epsilon = 1e-15);

        let leg = FrequencyBasis {
            kind: BasisKind::Legendre,
            max_degree: 3,
            omega_max: 2.0,
        };
        let p1 = psi_basis(&leg, &[2.0], 1);
        assert_abs_diff_eq!(p1[0].im, 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(p1[0].re, 0.0, epsilon = 1e-15);
        let p2 = psi_basis(&leg, &[0.0], 2);
        assert_abs_diff_eq!(p2[0].re, -0.5, epsilon = 1e-15);
    }

    #[test]
    fn csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sig.csv");
        let g = grid(5);
        let a = [1.0, 2.0, 3.0, 4.0, 5.0];
        let b = [0.1, 0.2, 0.3, 0.4, 0.5];
        write_signals_csv(&path, &g, &["a", "b"], &[&a, &b]).unwrap();
        let (names, t, cols) = read_signals_csv(&path).unwrap();
        assert_eq!(names, vec!["a", "b"]);
        assert_eq!(t, g.times());
        assert_eq!(cols[0], a);
        assert_eq!(cols[1], b);
    }
}
