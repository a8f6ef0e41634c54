#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sparse_lpv::estimators::qp::QpProblem;
use sparse_lpv::pipeline::RunConfig;
use sparse_lpv::simulator::{NoiseSpec, SystemSpec};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random strictly convex QP with `n` variables and `m` inequality rows.
pub fn random_qp(rng: &mut ChaCha8Rng, n: usize, m: usize) -> QpProblem {
    let l = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    let h = &l * l.transpose() + DMatrix::identity(n, n) * 0.1;
    let g = DVector::from_fn(n, |_, _| rng.random_range(-2.0..2.0));
    let a = DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
    let b = DVector::from_fn(m, |_, _| rng.random_range(-0.5..1.0));
    QpProblem { h, g, a, b }
}

/// Optimal objective by enumerating every active set; `None` if infeasible.
pub fn brute_force_qp(p: &QpProblem) -> Option<(DVector<f64>, f64)> {
    let n = p.g.len();
    let m = p.b.len();
    let mut best: Option<(DVector<f64>, f64)> = None;
    for mask in 0u32..(1 << m) {
        let act: Vec<usize> = (0..m).filter(|i| mask & (1 << i) != 0).collect();
        let k = act.len();
        let mut kkt = DMatrix::zeros(n + k, n + k);
        let mut rhs = DVector::zeros(n + k);
        kkt.view_mut((0, 0), (n, n)).copy_from(&p.h);
        for (r, &i) in act.iter().enumerate() {
            for c in 0..n {
                kkt[(n + r, c)] = p.a[(i, c)];
                kkt[(c, n + r)] = p.a[(i, c)];
            }
            rhs[n + r] = p.b[i];
        }
        for c in 0..n {
            rhs[c] = -p.g[c];
        }
        let Some(sol) = kkt.clone().lu().solve(&rhs) else { continue };
        if (&kkt * &sol - &rhs).amax() > 1e-9 {
            continue;
        }
        let x = sol.rows(0, n).into_owned();
        let feasible = (&p.a * &x - &p.b).iter().all(|v| *v <= 1e-9);
        let duals_ok = (0..k).all(|r| sol[n + r] >= -1e-9);
        if feasible && duals_ok {
            let f = p.objective(&x);
            if best.as_ref().is_none_or(|(_, bf)| f < *bf) {
                best = Some((x, f));
            }
        }
    }
    best
}

/// Relative max-norm difference.
pub fn rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax() / b.amax().max(1e-12)
}

/// Small vdp-sparse configuration: 5 Hz over the default window.
pub fn small_vdp_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.experiment = cfg.experiment.clone().with_sample_rate(5.0);
    cfg.estimator.nodal.count = 20;
    cfg.estimator.nodal.spacing = 2.5;
    cfg
}

/// Small LTI configuration with known constant coefficients.
pub fn small_linear_config(noise: bool) -> RunConfig {
    let mut cfg = small_vdp_config();
    cfg.system = SystemSpec::Linear {
        a: vec![-1.0, -0.6],
        b: vec![1.5, 0.3],
    };
    cfg.kernel.lengthscales = vec![5.0; 4];
    if !noise {
        cfg.experiment.noise = NoiseSpec::none();
    }
    cfg
}
