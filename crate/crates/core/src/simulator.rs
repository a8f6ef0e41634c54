//! Synthetic data generation: RK4 integration of the nonlinear ODE around a
//! large operating trajectory, small-signal extraction and measurement noise.

use std::f64::consts::PI;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signals::{read_signals_csv, rms, write_signals_csv, Multisine, MultisineSpec, TimeGrid};

pub type RhsFn = dyn Fn(&[f64]) -> f64 + Send + Sync;
/// Writes `grad f(p)` into the output slice.
pub type GradFn = dyn Fn(&[f64], &mut [f64]) + Send + Sync;
/// Writes the row-major Hessian of `f` at `p` into the output slice.
pub type HessFn = dyn Fn(&[f64], &mut [f64]) + Send + Sync;

/// `y^(n_a+1) = f(y, .., y^(n_a), u, .., u^(n_b))`.
#[derive(Clone)]
pub struct NlSystemDef {
    pub name: String,
    pub n_a: usize,
    pub n_b: usize,
    rhs: Arc<RhsFn>,
    grad: Option<Arc<GradFn>>,
    hess: Option<Arc<HessFn>>,
}

impl fmt::Debug for NlSystemDef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("NlSystemDef")
            .field("name", &self.name)
            .field("n_a", &self.n_a)
            .field("n_b", &self.n_b)
            .field("has_gradient", &self.grad.is_some())
            .field("has_hessian", &self.hess.is_some())
            .finish()
    }
}

impl NlSystemDef {
    pub fn new(
        name: impl Into<String>,
        n_a: usize,
        n_b: usize,
        rhs: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            n_a,
            n_b,
            rhs: Arc::new(rhs),
            grad: None,
            hess: None,
        }
    }

    pub fn with_gradient(mut self, grad: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.grad = Some(Arc::new(grad));
        self
    }

    pub fn with_hessian(mut self, hess: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.hess = Some(Arc::new(hess));
        self
    }

    pub fn n_x(&self) -> usize {
        self.n_a + self.n_b + 2
    }

    pub fn eval(&self, p: &[f64]) -> f64 {
        (self.rhs)(p)
    }

    pub fn has_gradient(&self) -> bool {
        self.grad.is_some()
    }

    pub fn gradient(&self, p: &[f64]) -> Result<Vec<f64>> {
        let g = self.grad.as_ref().ok_or_else(|| {
            Error::UnsupportedOracle(format!("system '{}' has no gradient", self.name))
        })?;
        if p.len() != self.n_x() {
            return Err(Error::dim("gradient point", self.n_x(), p.len()));
        }
        let mut out = vec![0.0; self.n_x()];
        g(p, &mut out);
        Ok(out)
    }

    /// Row-major `n_x x n_x` Hessian.
    pub fn hessian(&self, p: &[f64]) -> Result<Vec<f64>> {
        let h = self.hess.as_ref().ok_or_else(|| {
            Error::UnsupportedOracle(format!("system '{}' has no Hessian", self.name))
        })?;
        if p.len() != self.n_x() {
            return Err(Error::dim("Hessian point", self.n_x(), p.len()));
        }
        let n = self.n_x();
        let mut out = vec![0.0; n * n];
        h(p, &mut out);
        Ok(out)
    }
}

/// `y'' = -y + (1 - y^2) y' / 2 + 2 u + sin(2 u) + u'' / 5`, posed with
/// `n_a = 1`, `n_b = 3` so that `u'` and `u'''` are spurious candidates.
pub fn vdp_sparse() -> NlSystemDef {
    NlSystemDef::new("vdp-sparse", 1, 3, |p| {
        let (y, yd, u, udd) = (p[0], p[1], p[2], p[4]);
        -y + 0.5 * (1.0 - y * y) * yd + 2.0 * u + (2.0 * u).sin() + 0.2 * udd
    })
    .with_gradient(|p, g| {
        let (y, yd, u) = (p[0], p[1], p[2]);
        g[0] = -1.0 - y * yd;
        g[1] = 0.5 * (1.0 - y * y);
        g[2] = 2.0 + 2.0 * (2.0 * u).cos();
        g[3] = 0.0;
        g[4] = 0.2;
        g[5] = 0.0;
    })
    .with_hessian(|p, h| {
        let (y, yd, u) = (p[0], p[1], p[2]);
        h.iter_mut().for_each(|v| *v = 0.0);
        h[0] = -yd;
        h[1] = -y;
        h[6] = -y;
        h[2 * 6 + 2] = -4.0 * (2.0 * u).sin();
    })
}

/// `y^(n_a+1) = sum a_n y^(n) + sum b_m u^(m)`.
pub fn linear_system(a: Vec<f64>, b: Vec<f64>) -> Result<NlSystemDef> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Config("linear system needs at least one a and one b coefficient".into()));
    }
    let (n_a, n_b) = (a.len() - 1, b.len() - 1);
    let coef: Vec<f64> = a.iter().chain(&b).copied().collect();
    let c1 = coef.clone();
    let n = coef.len();
    Ok(NlSystemDef::new("linear", n_a, n_b, move |p| {
        p.iter().zip(&coef).map(|(x, c)| x * c).sum()
    })
    .with_gradient(move |_, g| g.copy_from_slice(&c1))
    .with_hessian(move |_, h| h[..n * n].iter_mut().for_each(|v| *v = 0.0)))
}

/// Built-in systems selectable from configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "id", deny_unknown_fields)]
pub enum SystemSpec {
    #[serde(rename = "vdp-sparse")]
    VdpSparse,
    #[serde(rename = "linear")]
    Linear { a: Vec<f64>, b: Vec<f64> },
}

impl Default for SystemSpec {
    fn default() -> Self {
        SystemSpec::VdpSparse
    }
}

impl SystemSpec {
    pub fn build(&self) -> Result<NlSystemDef> {
        match self {
            SystemSpec::VdpSparse => Ok(vdp_sparse()),
            SystemSpec::Linear { a, b } => linear_system(a.clone(), b.clone()),
        }
    }
}

/// A time signal with analytic derivatives.
pub trait Signal: Send + Sync {
    fn derivative(&self, t: f64, order: usize) -> f64;

    fn value(&self, t: f64) -> f64 {
        self.derivative(t, 0)
    }
}

impl Signal for Multisine {
    fn derivative(&self, t: f64, order: usize) -> f64 {
        Multisine::derivative(self, t, order as u32)
    }
}

/// `sum_i w_i s_i(t)`.
pub struct Combination<'a> {
    pub terms: Vec<(f64, &'a dyn Signal)>,
}

impl Signal for Combination<'_> {
    fn derivative(&self, t: f64, order: usize) -> f64 {
        self.terms.iter().map(|(w, s)| w * s.derivative(t, order)).sum()
    }
}

/// The large input `u_L`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LargeInputDef {
    /// `amplitude sin(angular_frequency t + phase)`.
    Sine {
        amplitude: f64,
        angular_frequency: f64,
        phase: f64,
    },
    Constant { value: f64 },
}

impl Default for LargeInputDef {
    fn default() -> Self {
        LargeInputDef::Sine {
            amplitude: 1.0,
            angular_frequency: 1.0,
            phase: PI / 4.0,
        }
    }
}

impl Signal for LargeInputDef {
    fn derivative(&self, t: f64, order: usize) -> f64 {
        match *self {
            LargeInputDef::Sine {
                amplitude,
                angular_frequency: w,
                phase,
            } => amplitude * w.powi(order as i32) * (w * t + phase + order as f64 * 0.5 * PI).sin(),
            LargeInputDef::Constant { value } => {
                if order == 0 {
                    value
                } else {
                    0.0
                }
            }
        }
    }
}

/// Fixed-step classical RK4 from `x0` at `grid.start_time`, recording the
/// state at every grid time. `f(t, x, dx)` writes the derivative.
pub fn integrate_ode<F>(x0: &[f64], grid: &TimeGrid, substeps: usize, mut f: F) -> Result<Vec<Vec<f64>>>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    if substeps == 0 {
        return Err(Error::Config("integrator substeps must be positive".into()));
    }
    let n = x0.len();
    let h = grid.sample_period / substeps as f64;
    let mut x = x0.to_vec();
    let (mut k1, mut k2, mut k3, mut k4, mut tmp) =
        (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    let mut out = Vec::with_capacity(grid.n_samples);
    out.push(x.clone());
    for k in 1..grid.n_samples {
        let t0 = grid.time(k - 1);
        for s in 0..substeps {
            let t = t0 + s as f64 * h;
            f(t, &x, &mut k1);
            for i in 0..n {
                tmp[i] = x[i] + 0.5 * h * k1[i];
            }
            f(t + 0.5 * h, &tmp, &mut k2);
            for i in 0..n {
                tmp[i] = x[i] + 0.5 * h * k2[i];
            }
            f(t + 0.5 * h, &tmp, &mut k3);
            for i in 0..n {
                tmp[i] = x[i] + h * k3[i];
            }
            f(t + h, &tmp, &mut k4);
            for i in 0..n {
                x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { time: grid.time(k) });
        }
        out.push(x.clone());
    }
    Ok(out)
}

fn fill_input(p: &mut [f64], n_a: usize, input: &dyn Signal, t: f64) {
    for (m, slot) in p[n_a + 1..].iter_mut().enumerate() {
        *slot = input.derivative(t, m);
    }
}

/// Integrates the companion form of `system` driven by `input`; returns
/// `(y, .., y^(n_a))` at every grid time.
pub fn integrate(
    system: &NlSystemDef,
    input: &dyn Signal,
    grid: &TimeGrid,
    substeps: usize,
    initial_state: Option<&[f64]>,
) -> Result<Vec<Vec<f64>>> {
    let ns = system.n_a + 1;
    let x0 = match initial_state {
        Some(x) if x.len() != ns => return Err(Error::dim("initial state", ns, x.len())),
        Some(x) => x.to_vec(),
        None => vec![0.0; ns],
    };
    let mut p = vec![0.0; system.n_x()];
    integrate_ode(&x0, grid, substeps, |t, x, dx| {
        p[..ns].copy_from_slice(x);
        fill_input(&mut p, system.n_a, input, t);
        dx[..ns - 1].copy_from_slice(&x[1..]);
        dx[ns - 1] = system.eval(&p);
    })
}

/// Simulates the nominal trajectory together with the exact first-order
/// response to `small` (linearization along the nominal run). Returns
/// `(nominal states, linearized output)`.
pub fn linearized_reference(
    system: &NlSystemDef,
    large: &dyn Signal,
    small: &dyn Signal,
    grid: &TimeGrid,
    substeps: usize,
) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    if !system.has_gradient() {
        return Err(Error::UnsupportedOracle(format!(
            "system '{}' has no gradient for the linearized reference",
            system.name
        )));
    }
    let ns = system.n_a + 1;
    let nx = system.n_x();
    let mut p = vec![0.0; nx];
    let mut g = vec![0.0; nx];
    let grad = system.grad.clone().unwrap();
    let traj = integrate_ode(&vec![0.0; 2 * ns], grid, substeps, |t, x, dx| {
        p[..ns].copy_from_slice(&x[..ns]);
        fill_input(&mut p, system.n_a, large, t);
        grad(&p, &mut g);
        dx[..ns - 1].copy_from_slice(&x[1..ns]);
        dx[ns - 1] = system.eval(&p);
        let z = &x[ns..];
        dx[ns..2 * ns - 1].copy_from_slice(&z[1..]);
        let mut acc = 0.0;
        for n in 0..ns {
            acc += g[n] * z[n];
        }
        for m in 0..=system.n_b {
            acc += g[ns + m] * small.derivative(t, m);
        }
        dx[2 * ns - 1] = acc;
    })?;
    let nominal = traj.iter().map(|x| x[..ns].to_vec()).collect();
    let lin = traj.iter().map(|x| x[ns]).collect();
    Ok((nominal, lin))
}

/// Evaluates `grad f` along each row of `p_large`.
pub fn true_lpv_coefficients(system: &NlSystemDef, p_large: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    p_large.iter().map(|p| system.gradient(p)).collect()
}

/// Evaluates the Hessian of `f` along each row of `p_large`.
pub fn true_sensitivities(system: &NlSystemDef, p_large: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    p_large.iter().map(|p| system.hessian(p)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Extraction {
    /// `y(u_L + u~) - y(u_L)`.
    TwoExperiment,
    /// `(y(u_L + u~) - y(u_L - u~)) / 2`.
    #[default]
    Symmetric,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    None,
    /// Flat spectrum.
    White,
    /// White noise through a second-order resonator.
    #[default]
    FilteredWhite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NoiseTarget {
    #[default]
    Output,
    Input,
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub resonance_hz: f64,
    /// Relative damping of the resonator poles.
    pub damping: f64,
    pub snr_db: f64,
    pub applies_to: NoiseTarget,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            kind: NoiseKind::FilteredWhite,
            resonance_hz: 0.174,
            damping: 0.1,
            snr_db: 25.0,
            applies_to: NoiseTarget::Output,
        }
    }
}

impl NoiseSpec {
    pub fn none() -> Self {
        Self {
            kind: NoiseKind::None,
            ..Self::default()
        }
    }

    pub fn validate(&self, grid: &TimeGrid) -> Result<()> {
        if self.kind == NoiseKind::None {
            return Ok(());
        }
        if !self.snr_db.is_finite() {
            return Err(Error::Config("snr_db must be finite; use kind \"none\" for noise-free data".into()));
        }
        if self.kind == NoiseKind::FilteredWhite {
            if !(self.resonance_hz > 0.0 && self.resonance_hz < grid.nyquist_hz()) {
                return Err(Error::Config(format!(
                    "resonance {} Hz must lie strictly between 0 and Nyquist {} Hz",
                    self.resonance_hz,
                    grid.nyquist_hz()
                )));
            }
            if !(self.damping > 0.0 && self.damping < 1.0) {
                return Err(Error::Config("resonator damping must be in (0, 1)".into()));
            }
        }
        Ok(())
    }

    /// Denominator coefficients `[a1, a2]` of `1 / (1 - a1 z^-1 - a2 z^-2)`.
    fn resonator(&self, sample_period: f64) -> [f64; 2] {
        let theta = 2.0 * PI * self.resonance_hz * sample_period;
        let r = (-self.damping * theta).exp();
        [2.0 * r * theta.cos(), -r * r]
    }

    /// Filter frequency response `|H|^2` at each bin of `grid`, ascending.
    pub fn filter_gain(&self, grid: &TimeGrid) -> Vec<f64> {
        match self.kind {
            NoiseKind::FilteredWhite => {
                let [a1, a2] = self.resonator(grid.sample_period);
                grid.omegas()
                    .into_iter()
                    .map(|w| {
                        let z1 = Complex64::from_polar(1.0, -w * grid.sample_period);
                        let d = Complex64::new(1.0, 0.0) - a1 * z1 - a2 * z1 * z1;
                        1.0 / d.norm_sqr()
                    })
                    .collect()
            }
            _ => vec![1.0; grid.n_samples],
        }
    }
}

/// Adds noise to `signal` so that the SNR over the whole record equals
/// `spec.snr_db`. Returns the noisy signal and the per-bin noise variance of
/// the unitary DFT, in ascending bin order.
pub fn add_noise(signal: &[f64], spec: &NoiseSpec, grid: &TimeGrid, seed: u64) -> Result<(Vec<f64>, Vec<f64>)> {
    if signal.len() != grid.n_samples {
        return Err(Error::dim("noisy signal", grid.n_samples, signal.len()));
    }
    spec.validate(grid)?;
    if spec.kind == NoiseKind::None {
        return Ok((signal.to_vec(), vec![0.0; grid.n_samples]));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = grid.n_samples;
    let raw: Vec<f64> = match spec.kind {
        NoiseKind::White => (0..n).map(|_| StandardNormal.sample(&mut rng)).collect(),
        _ => {
            let [a1, a2] = spec.resonator(grid.sample_period);
            let r = (-a2).sqrt();
            let burn_in = ((20.0 / (1.0 - r)).ceil() as usize).max(100);
            let (mut v1, mut v2) = (0.0, 0.0);
            let mut out = Vec::with_capacity(n);
            for k in 0..burn_in + n {
                let w: f64 = StandardNormal.sample(&mut rng);
                let v = w + a1 * v1 + a2 * v2;
                v2 = v1;
                v1 = v;
                if k >= burn_in {
                    out.push(v);
                }
            }
            out
        }
    };
    let signal_rms = rms(signal);
    let noise_rms = rms(&raw);
    let target = signal_rms * 10f64.powf(-spec.snr_db / 20.0);
    let scale = if noise_rms > 0.0 { target / noise_rms } else { 0.0 };
    let noisy = signal.iter().zip(&raw).map(|(s, v)| s + scale * v).collect();
    let gain = spec.filter_gain(grid);
    let mean_gain = gain.iter().sum::<f64>() / n as f64;
    let psd = gain.iter().map(|g| target * target * g / mean_gain).collect();
    Ok((noisy, psd))
}

/// Per-bin noise covariances of the DFT of the measured small signals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseCovariance {
    pub c_u: Vec<f64>,
    pub c_y: Vec<f64>,
    pub c_uy: Vec<Complex64>,
}

impl NoiseCovariance {
    pub fn zeros(n: usize) -> Self {
        Self {
            c_u: vec![0.0; n],
            c_y: vec![0.0; n],
            c_uy: vec![Complex64::new(0.0, 0.0); n],
        }
    }

    pub fn output_only(c_y: Vec<f64>) -> Self {
        let n = c_y.len();
        Self {
            c_u: vec![0.0; n],
            c_y,
            c_uy: vec![Complex64::new(0.0, 0.0); n],
        }
    }

    pub fn len(&self) -> usize {
        self.c_y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.c_y.is_empty()
    }

    pub fn is_zero(&self) -> bool {
        self.c_u.iter().chain(&self.c_y).all(|v| *v == 0.0) && self.c_uy.iter().all(|v| v.norm() == 0.0)
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.c_u.len() != n || self.c_y.len() != n || self.c_uy.len() != n {
            return Err(Error::dim("noise covariance bins", n, self.c_y.len()));
        }
        if self.c_u.iter().chain(&self.c_y).any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config("noise variances must be finite and nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MultisineConfig {
    pub fundamental_hz: f64,
    pub harmonics: Vec<u32>,
    pub phase_seed: u64,
}

impl Default for MultisineConfig {
    fn default() -> Self {
        Self {
            fundamental_hz: 0.02,
            harmonics: (1..=20).collect(),
            phase_seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Full simulation span, starting from rest.
    pub grid: TimeGrid,
    /// `[t_begin, t_end)` in seconds.
    pub estimation_window: [f64; 2],
    pub epsilon_rms: f64,
    pub multisine: MultisineConfig,
    pub large_input: LargeInputDef,
    pub extraction: Extraction,
    pub integrator_substeps: usize,
    pub noise: NoiseSpec,
    /// Seed of the noise realization.
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            grid: TimeGrid {
                n_samples: 2000,
                sample_period: 0.05,
                start_time: 0.0,
            },
            estimation_window: [50.0, 100.0],
            epsilon_rms: 1e-3,
            multisine: MultisineConfig::default(),
            large_input: LargeInputDef::default(),
            extraction: Extraction::Symmetric,
            integrator_substeps: 4,
            noise: NoiseSpec::default(),
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    /// Same span and window sampled at `rate_hz`.
    pub fn with_sample_rate(mut self, rate_hz: f64) -> Self {
        let span = self.grid.duration();
        self.grid.sample_period = 1.0 / rate_hz;
        self.grid.n_samples = (span * rate_hz).round() as usize;
        self
    }

    /// Index range of the estimation window within `grid`.
    pub fn window_range(&self) -> Result<std::ops::Range<usize>> {
        let g = &self.grid;
        let [a, b] = self.estimation_window;
        let first = ((a - g.start_time) / g.sample_period).round();
        let last = ((b - g.start_time) / g.sample_period).round();
        if !(a < b) || first < 0.0 || last > g.n_samples as f64 || ((a - g.start_time) / g.sample_period - first).abs() > 1e-6 {
            return Err(Error::Config(format!(
                "estimation window [{a}, {b}) must lie on the simulation grid [{}, {})",
                g.start_time,
                g.end_time()
            )));
        }
        Ok(first as usize..last as usize)
    }

    pub fn window_grid(&self) -> Result<TimeGrid> {
        let r = self.window_range()?;
        TimeGrid::new(r.len(), self.grid.sample_period, self.grid.time(r.start))
    }

    /// The calibrated multisine of RMS `epsilon_rms` over the window.
    pub fn small_input(&self) -> Result<Multisine> {
        let spec = MultisineSpec {
            fundamental_hz: self.multisine.fundamental_hz,
            harmonic_indices: self.multisine.harmonics.clone(),
            target_rms: self.epsilon_rms,
            phase_seed: self.multisine.phase_seed,
        };
        Multisine::calibrated(&spec, &self.window_grid()?)
    }

    pub fn validate(&self) -> Result<()> {
        TimeGrid::new(self.grid.n_samples, self.grid.sample_period, self.grid.start_time)?;
        self.window_range()?;
        if !(self.epsilon_rms > 0.0 && self.epsilon_rms.is_finite()) {
            return Err(Error::Config("epsilon_rms must be positive".into()));
        }
        if self.integrator_substeps == 0 {
            return Err(Error::Config("integrator_substeps must be positive".into()));
        }
        self.noise.validate(&self.grid)
    }
}

/// The estimation dataset: small signals and the noise-free scheduling
/// trajectory on the estimation window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampledDataset {
    pub grid: TimeGrid,
    pub n_a: usize,
    pub n_b: usize,
    pub u_small: Vec<f64>,
    pub y_small: Vec<f64>,
    /// Rows `[y_L, .., y_L^(n_a), u_L, .., u_L^(n_b)]` per sample.
    pub p_large: Vec<Vec<f64>>,
    pub noise: NoiseCovariance,
    pub seed: u64,
    pub realized_snr_db: Option<f64>,
    pub config: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    grid: TimeGrid,
    n_a: usize,
    n_b: usize,
    seed: u64,
    realized_snr_db: Option<f64>,
    noise: NoiseCovariance,
    config: serde_json::Value,
}

impl SampledDataset {
    pub fn n_x(&self) -> usize {
        self.n_a + self.n_b + 2
    }

    pub fn len(&self) -> usize {
        self.grid.n_samples
    }

    pub fn is_empty(&self) -> bool {
        self.grid.n_samples == 0
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.grid.n_samples;
        if self.u_small.len() != n {
            return Err(Error::dim("u_small", n, self.u_small.len()));
        }
        if self.y_small.len() != n {
            return Err(Error::dim("y_small", n, self.y_small.len()));
        }
        if self.p_large.len() != n {
            return Err(Error::dim("p_large rows", n, self.p_large.len()));
        }
        if let Some(r) = self.p_large.iter().find(|r| r.len() != self.n_x()) {
            return Err(Error::dim("p_large columns", self.n_x(), r.len()));
        }
        self.noise.validate(n)
    }

    pub fn p_column(&self, j: usize) -> Vec<f64> {
        self.p_large.iter().map(|r| r[j]).collect()
    }

    /// `max_t |p_j(t)|` for each column.
    pub fn p_max(&self) -> Vec<f64> {
        (0..self.n_x())
            .map(|j| self.p_large.iter().map(|r| r[j].abs()).fold(0.0, f64::max))
            .collect()
    }

    /// Linear interpolation of the scheduling trajectory at time `t`, clamped
    /// to the window.
    pub fn p_at(&self, t: f64) -> Vec<f64> {
        let s = ((t - self.grid.start_time) / self.grid.sample_period).clamp(0.0, (self.len() - 1) as f64);
        let k = (s.floor() as usize).min(self.len().saturating_sub(2));
        let w = s - k as f64;
        if self.len() == 1 {
            return self.p_large[0].clone();
        }
        self.p_large[k]
            .iter()
            .zip(&self.p_large[k + 1])
            .map(|(a, b)| a + w * (b - a))
            .collect()
    }

    pub fn column_names(&self) -> Vec<String> {
        let mut names = vec!["u_small".to_string(), "y_small".to_string()];
        names.extend((1..=self.n_x()).map(|j| format!("p{j}")));
        names
    }

    fn sidecar_path(csv_path: &Path) -> PathBuf {
        csv_path.with_extension("json")
    }

    /// Writes `<path>` (CSV) and a JSON sidecar with the same stem.
    pub fn save(&self, csv_path: &Path) -> Result<()> {
        self.validate()?;
        let names = self.column_names();
        let pcols: Vec<Vec<f64>> = (0..self.n_x()).map(|j| self.p_column(j)).collect();
        let mut cols: Vec<&[f64]> = vec![&self.u_small, &self.y_small];
        cols.extend(pcols.iter().map(|c| c.as_slice()));
        let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();
        write_signals_csv(csv_path, &self.grid, &name_refs, &cols)?;
        let side = Sidecar {
            grid: self.grid,
            n_a: self.n_a,
            n_b: self.n_b,
            seed: self.seed,
            realized_snr_db: self.realized_snr_db,
            noise: self.noise.clone(),
            config: self.config.clone(),
        };
        std::fs::write(Self::sidecar_path(csv_path), serde_json::to_string_pretty(&side)?)?;
        Ok(())
    }

    pub fn load(csv_path: &Path) -> Result<Self> {
        let side_path = Self::sidecar_path(csv_path);
        let text = std::fs::read_to_string(&side_path)?;
        let de = &mut serde_json::Deserializer::from_str(&text);
        let side: Sidecar = serde_path_to_error::deserialize(de).map_err(|e| {
            Error::Config(format!("{}: {} at {}", side_path.display(), e.inner(), e.path()))
        })?;
        let (names, _time, cols) = read_signals_csv(csv_path)?;
        let nx = side.n_a + side.n_b + 2;
        if cols.len() != nx + 2 {
            return Err(Error::dim("dataset csv columns", nx + 2, cols.len()));
        }
        if names[0] != "u_small" || names[1] != "y_small" {
            return Err(Error::Config(format!(
                "{}: expected columns u_small, y_small first",
                csv_path.display()
            )));
        }
        let n = cols[0].len();
        let p_large = (0..n).map(|k| (0..nx).map(|j| cols[j + 2][k]).collect()).collect();
        let ds = Self {
            grid: side.grid,
            n_a: side.n_a,
            n_b: side.n_b,
            u_small: cols[0].clone(),
            y_small: cols[1].clone(),
            p_large,
            noise: side.noise,
            seed: side.seed,
            realized_snr_db: side.realized_snr_db,
            config: side.config,
        };
        ds.validate()?;
        Ok(ds)
    }
}

/// Noise-free small-signal response on the estimation window, before noise.
#[derive(Debug, Clone)]
pub struct CleanExperiment {
    pub window: TimeGrid,
    pub u_small: Vec<f64>,
    pub y_small: Vec<f64>,
    pub p_large: Vec<Vec<f64>>,
}

/// Runs the nominal and perturbed simulations and extracts the small output.
pub fn simulate_clean(
    system: &NlSystemDef,
    large: &dyn Signal,
    small: &dyn Signal,
    cfg: &ExperimentConfig,
) -> Result<CleanExperiment> {
    let range = cfg.window_range()?;
    let window = cfg.window_grid()?;
    let grid = &cfg.grid;
    let sub = cfg.integrator_substeps;
    let plus = Combination {
        terms: vec![(1.0, large), (1.0, small)],
    };
    let minus = Combination {
        terms: vec![(1.0, large), (-1.0, small)],
    };
    let (nominal, (y_plus, y_minus)) = rayon::join(
        || integrate(system, large, grid, sub, None),
        || {
            rayon::join(
                || integrate(system, &plus, grid, sub, None),
                || match cfg.extraction {
                    Extraction::Symmetric => integrate(system, &minus, grid, sub, None).map(Some),
                    Extraction::TwoExperiment => Ok(None),
                },
            )
        },
    );
    let (nominal, y_plus, y_minus) = (nominal?, y_plus?, y_minus?);
    let y_small = range
        .clone()
        .map(|k| match &y_minus {
            Some(ym) => 0.5 * (y_plus[k][0] - ym[k][0]),
            None => y_plus[k][0] - nominal[k][0],
        })
        .collect();
    let u_small = window.times().iter().map(|&t| small.value(t)).collect();
    let p_large = range
        .map(|k| {
            let t = grid.time(k);
            let mut p = nominal[k].clone();
            p.extend((0..=system.n_b).map(|m| large.derivative(t, m)));
            p
        })
        .collect();
    Ok(CleanExperiment {
        window,
        u_small,
        y_small,
        p_large,
    })
}

/// Adds the configured measurement noise to a clean experiment.
pub fn apply_noise(clean: &CleanExperiment, system: &NlSystemDef, cfg: &ExperimentConfig) -> Result<SampledDataset> {
    let n = clean.window.n_samples;
    let noise = &cfg.noise;
    let mut cov = NoiseCovariance::zeros(n);
    let (mut u, mut y) = (clean.u_small.clone(), clean.y_small.clone());
    let mut realized = None;
    if noise.kind != NoiseKind::None {
        if matches!(noise.applies_to, NoiseTarget::Output | NoiseTarget::Both) {
            let (noisy, psd) = add_noise(&clean.y_small, noise, &clean.window, cfg.seed)?;
            let err: Vec<f64> = noisy.iter().zip(&clean.y_small).map(|(a, b)| a - b).collect();
            realized = Some(20.0 * (rms(&clean.y_small) / rms(&err)).log10());
            y = noisy;
            cov.c_y = psd;
        }
        if matches!(noise.applies_to, NoiseTarget::Input | NoiseTarget::Both) {
            let seed = cfg.seed ^ 0x5bd1_e995_9e37_79b9;
            let (noisy, psd) = add_noise(&clean.u_small, noise, &clean.window, seed)?;
            u = noisy;
            cov.c_u = psd;
        }
    }
    Ok(SampledDataset {
        grid: clean.window,
        n_a: system.n_a,
        n_b: system.n_b,
        u_small: u,
        y_small: y,
        p_large: clean.p_large.clone(),
        noise: cov,
        seed: cfg.seed,
        realized_snr_db: realized,
        config: serde_json::to_value(cfg)?,
    })
}

/// Full experiment: simulation, extraction, noise and cropping.
pub fn run_experiment(
    system: &NlSystemDef,
    large: &dyn Signal,
    small: &dyn Signal,
    cfg: &ExperimentConfig,
) -> Result<SampledDataset> {
    cfg.validate()?;
    let clean = simulate_clean(system, large, small, cfg)?;
    apply_noise(&clean, system, cfg)
}
