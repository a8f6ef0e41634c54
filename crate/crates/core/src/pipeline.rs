//! End-to-end runs: simulation, order selection, scheduling selection,
//! structure detection and reduced-model refit, plus Monte Carlo fan-out.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{reweight_loop, LoopReport, NodalGrid, RepresenterSolution, Selection};
use crate::estimators::EstimatorConfig;
use crate::freq_model::{BandSpec, FreqLpvOperator, OperatorConfig};
use crate::kernels::{BlockKind, CoefficientKernel, KernelBlock, KernelConfig};
use crate::simulator::{run_experiment, true_lpv_coefficients, ExperimentConfig, SampledDataset, SystemSpec};
use crate::structure::{build_support, decide_order, detect_groups, HessianSupport, OrderScores, StructureReport};
use crate::structure::DEFAULT_TAU_REL;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StructureConfig {
    pub tau_rel_order: f64,
    pub tau_rel_sched: f64,
}

impl Default for StructureConfig {
    fn default() -> Self {
        Self {
            tau_rel_order: DEFAULT_TAU_REL,
            tau_rel_sched: DEFAULT_TAU_REL,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MonteCarloConfig {
    pub n_runs: usize,
    pub base_seed: u64,
}

impl Default for MonteCarloConfig {
    fn default() -> Self {
        Self {
            n_runs: 50,
            base_seed: 0,
        }
    }
}

fn default_kernel() -> KernelConfig {
    KernelConfig {
        lengthscales: vec![7.0, 2.0, 7.0, 7.0, 7.0, 7.0],
        signal_variance: 1.0,
        active_dims: None,
        blocks: None,
    }
}

/// Complete configuration of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub system: SystemSpec,
    pub experiment: ExperimentConfig,
    pub kernel: KernelConfig,
    pub operator: OperatorConfig,
    pub estimator: EstimatorConfig,
    pub structure: StructureConfig,
    pub monte_carlo: MonteCarloConfig,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            system: SystemSpec::default(),
            experiment: ExperimentConfig::default(),
            kernel: default_kernel(),
            operator: OperatorConfig {
                band: Some(BandSpec::Full),
                ..OperatorConfig::default()
            },
            estimator: EstimatorConfig::default(),
            structure: StructureConfig::default(),
            monte_carlo: MonteCarloConfig::default(),
            output_dir: PathBuf::from("out"),
        }
    }
}

/// Sets `path` (dot separated) in a JSON tree; the value is parsed as JSON
/// and falls back to a plain string.
pub fn set_dotted(root: &mut serde_json::Value, path: &str, raw: &str) -> Result<()> {
    let value = serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    let mut node = root;
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("malformed override path '{path}'")));
    }
    for (i, key) in keys.iter().enumerate() {
        let last = i + 1 == keys.len();
        node = match node {
            serde_json::Value::Object(map) => {
                if last {
                    map.insert(key.to_string(), value);
                    return Ok(());
                }
                map.entry(key.to_string()).or_insert_with(|| serde_json::json!({}))
            }
            serde_json::Value::Array(items) => {
                let idx: usize = key
                    .parse()
                    .map_err(|_| Error::Config(format!("'{key}' in '{path}' is not an array index")))?;
                let len = items.len();
                let slot = items
                    .get_mut(idx)
                    .ok_or_else(|| Error::Config(format!("index {idx} in '{path}' out of range (length {len})")))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            serde_json::Value::Null if !last => {
                *node = serde_json::json!({});
                let serde_json::Value::Object(map) = node else { unreachable!() };
                map.entry(key.to_string()).or_insert_with(|| serde_json::json!({}))
            }
            _ => return Err(Error::Config(format!("'{path}' descends into a scalar at '{key}'"))),
        };
    }
    Ok(())
}

/// First key path present in `input` but absent from `canonical`.
fn first_unknown_key(input: &serde_json::Value, canonical: &serde_json::Value, prefix: &str) -> Option<String> {
    use serde_json::Value;
    let join = |k: &str| if prefix.is_empty() { k.to_string() } else { format!("{prefix}.{k}") };
    match (input, canonical) {
        (Value::Object(a), Value::Object(b)) => a.iter().find_map(|(k, v)| match b.get(k) {
            Some(w) => first_unknown_key(v, w, &join(k)),
            None => Some(join(k)),
        }),
        (Value::Array(a), Value::Array(b)) => a
            .iter()
            .zip(b)
            .enumerate()
            .find_map(|(i, (v, w))| first_unknown_key(v, w, &join(&i.to_string()))),
        _ => None,
    }
}

impl RunConfig {
    pub fn from_json_str(text: &str, origin: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de)
            .map_err(|e| Error::Config(format!("{origin}: {} at '{}'", e.inner(), e.path())))?;
        let input: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("{origin}: {e}")))?;
        if let Some(path) = first_unknown_key(&input, &cfg.to_value(), "") {
            return Err(Error::Config(format!("{origin}: unknown field at '{path}'")));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json_str(&text, &path.display().to_string())
    }

    pub fn to_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("configuration serializes")
    }

    /// Applies `key=value` style overrides by dotted path.
    pub fn with_overrides(&self, overrides: &[(String, String)]) -> Result<Self> {
        let mut v = self.to_value();
        for (k, raw) in overrides {
            set_dotted(&mut v, k, raw)?;
        }
        Self::from_json_str(&v.to_string(), "overrides")
    }

    pub fn validate(&self) -> Result<()> {
        self.experiment.validate()?;
        self.estimator.validate()?;
        let sys = self.system.build()?;
        if self.kernel.lengthscales.len() != sys.n_x() {
            return Err(Error::Config(format!(
                "kernel.lengthscales has {} entries, the system has {} scheduling variables",
                self.kernel.lengthscales.len(),
                sys.n_x()
            )));
        }
        self.kernel.params().validate()?;
        for (name, t) in [
            ("structure.tau_rel_order", self.structure.tau_rel_order),
            ("structure.tau_rel_sched", self.structure.tau_rel_sched),
        ] {
            if !(0.0..1.0).contains(&t) {
                return Err(Error::Config(format!("{name} must be in [0, 1), got {t}")));
            }
        }
        if self.monte_carlo.n_runs == 0 {
            return Err(Error::Config("monte_carlo.n_runs must be at least 1".into()));
        }
        Ok(())
    }

    /// Twice the highest excited frequency.
    pub fn default_band_hz(&self) -> f64 {
        let top = self.experiment.multisine.harmonics.iter().copied().max().unwrap_or(1);
        2.0 * top as f64 * self.experiment.multisine.fundamental_hz
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.experiment.seed = seed;
        c
    }
}

/// Coefficient labels `a0 .. a{n_a}, b0 .. b{n_b}`.
pub fn coefficient_names(n_a: usize, n_b: usize) -> Vec<String> {
    (0..=n_a)
        .map(|n| format!("a{n}"))
        .chain((0..=n_b).map(|m| format!("b{m}")))
        .collect()
}

pub fn simulate(cfg: &RunConfig) -> Result<SampledDataset> {
    let system = cfg.system.build()?;
    let small = cfg.experiment.small_input()?;
    run_experiment(&system, &cfg.experiment.large_input, &small, &cfg.experiment)
}

pub fn build_operator(cfg: &RunConfig, ds: &SampledDataset) -> Result<FreqLpvOperator> {
    FreqLpvOperator::build(ds, &cfg.operator, cfg.default_band_hz())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageReport {
    pub solution: RepresenterSolution,
    pub weighting: LoopReport,
}

fn run_stage(
    selection: &Selection,
    cfg: &RunConfig,
    ds: &SampledDataset,
    op: &FreqLpvOperator,
    kernel: &CoefficientKernel,
    nodal: &NodalGrid,
) -> Result<StageReport> {
    let start = Instant::now();
    let (solution, weighting) = reweight_loop(selection, ds, op, kernel, nodal, &cfg.estimator, None)?;
    log::info!(
        "{:?} stage: {} solves, {} ({:.1} s)",
        solution.stage,
        weighting.solves,
        weighting.exit_reason,
        start.elapsed().as_secs_f64()
    );
    Ok(StageReport { solution, weighting })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OrderReport {
    pub names: Vec<String>,
    pub stage: StageReport,
    pub order: OrderScores,
    pub coefficient_max: Vec<f64>,
}

pub fn run_order(cfg: &RunConfig, ds: &SampledDataset, op: &FreqLpvOperator) -> Result<OrderReport> {
    let kernel = cfg.kernel.build()?;
    let nodal = NodalGrid::uniform(ds, &cfg.estimator.nodal)?;
    let stage = run_stage(&Selection::Order, cfg, ds, op, &kernel, &nodal)?;
    let mut scores = vec![0.0; ds.n_x()];
    for s in &stage.solution.scores {
        scores[s.j] = s.value.max(0.0);
    }
    let order = decide_order(&scores, cfg.structure.tau_rel_order)?;
    Ok(OrderReport {
        names: coefficient_names(ds.n_a, ds.n_b),
        coefficient_max: stage.solution.coefficient_max.clone(),
        stage,
        order,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SchedReport {
    pub retained: Vec<usize>,
    /// Coefficient maxima of the base estimate used for normalization.
    pub c_max: Vec<f64>,
    pub n_tau: usize,
    pub stage: StageReport,
    pub support: HessianSupport,
}

fn restricted_kernel(cfg: &RunConfig, dims: &[usize]) -> Result<CoefficientKernel> {
    KernelConfig {
        active_dims: Some(dims.to_vec()),
        blocks: None,
        ..cfg.kernel.clone()
    }
    .build()
}

pub fn run_sched(cfg: &RunConfig, ds: &SampledDataset, op: &FreqLpvOperator, retained: &[usize]) -> Result<SchedReport> {
    if retained.is_empty() {
        return Err(Error::Config("scheduling selection needs at least one retained input".into()));
    }
    let kernel = restricted_kernel(cfg, retained)?;
    let nodal = NodalGrid::uniform(ds, &cfg.estimator.nodal)?;
    let c_max = match &cfg.estimator.c_max {
        Some(v) => v.clone(),
        None => {
            let base = run_stage(&Selection::Base { constants: Vec::new() }, cfg, ds, op, &kernel, &nodal)?;
            base.solution.coefficient_max
        }
    };
    let stage = run_stage(
        &Selection::Sched {
            c_max: Some(c_max.clone()),
        },
        cfg,
        ds,
        op,
        &kernel,
        &nodal,
    )?;
    let upper: Vec<(usize, usize, f64)> = stage
        .solution
        .scores
        .iter()
        .map(|s| (s.j, s.l.expect("scheduling scores carry a pair"), s.value.max(0.0)))
        .collect();
    let support = build_support(retained, &upper, cfg.structure.tau_rel_sched)?;
    Ok(SchedReport {
        retained: support.inputs.clone(),
        c_max,
        n_tau: upper.len(),
        stage,
        support,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RefitReport {
    pub names: Vec<String>,
    pub structure: StructureReport,
    pub stage: StageReport,
    pub times: Vec<f64>,
    /// `N x n_x` along the trajectory.
    pub coefficients: Vec<Vec<f64>>,
    pub truth: Option<Vec<Vec<f64>>>,
    pub rms_error: Option<Vec<f64>>,
}

impl RefitReport {
    pub fn constant(&self, index: usize) -> Option<f64> {
        self.stage.solution.constants.iter().find(|c| c.index == index).map(|c| c.value)
    }
}

/// Kernel of the reduced model: a curl-free block per multi-input group and
/// a scalar block per single-input nonlinear group. Linear terms become
/// constant coefficients.
pub fn refit_kernel(cfg: &RunConfig, structure: &StructureReport) -> Result<(CoefficientKernel, Vec<usize>)> {
    let blocks: Vec<KernelBlock> = structure
        .groups
        .iter()
        .filter(|g| !(g.len() == 1 && structure.linear_terms.contains(&g[0])))
        .map(|g| KernelBlock {
            dims: g.clone(),
            kind: if g.len() > 1 {
                BlockKind::CurlFreeSe
            } else {
                BlockKind::ScalarSe
            },
        })
        .collect();
    if blocks.is_empty() {
        return Err(Error::Config("refit needs at least one nonlinear group".into()));
    }
    let kernel = KernelConfig {
        active_dims: None,
        blocks: Some(blocks),
        ..cfg.kernel.clone()
    }
    .build()?;
    Ok((kernel, structure.linear_terms.clone()))
}

pub fn run_refit(cfg: &RunConfig, ds: &SampledDataset, op: &FreqLpvOperator, structure: &StructureReport) -> Result<RefitReport> {
    let (kernel, constants) = refit_kernel(cfg, structure)?;
    let nodal = NodalGrid::uniform(ds, &cfg.estimator.nodal)?;
    let stage = run_stage(&Selection::Base { constants }, cfg, ds, op, &kernel, &nodal)?;
    let coefficients = stage.solution.coefficient_samples.clone();
    let system = cfg.system.build()?;
    let truth = if system.has_gradient() {
        Some(true_lpv_coefficients(&system, &ds.p_large)?)
    } else {
        None
    };
    let rms_error = truth.as_ref().map(|t| {
        (0..ds.n_x())
            .map(|j| {
                let ss: f64 = coefficients.iter().zip(t).map(|(a, b)| (a[j] - b[j]).powi(2)).sum();
                (ss / ds.len() as f64).sqrt()
            })
            .collect()
    });
    Ok(RefitReport {
        names: coefficient_names(ds.n_a, ds.n_b),
        structure: structure.clone(),
        stage,
        times: ds.grid.times(),
        coefficients,
        truth,
        rms_error,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub realized_snr_db: Option<f64>,
    pub order: OrderReport,
    pub sched: SchedReport,
    pub structure: StructureReport,
    pub refit: RefitReport,
}

/// Runs every stage on one freshly simulated dataset.
pub fn run_all(cfg: &RunConfig) -> Result<(SampledDataset, RunReport)> {
    let ds = simulate(cfg)?;
    let report = run_all_on(cfg, &ds)?;
    Ok((ds, report))
}

pub fn run_all_on(cfg: &RunConfig, ds: &SampledDataset) -> Result<RunReport> {
    let op = build_operator(cfg, ds)?;
    let order = run_order(cfg, ds, &op)?;
    let sched = run_sched(cfg, ds, &op, &order.order.retained_indices())?;
    let structure = detect_groups(&sched.support);
    let refit = run_refit(cfg, ds, &op, &structure)?;
    Ok(RunReport {
        seed: ds.seed,
        realized_snr_db: ds.realized_snr_db,
        order,
        sched,
        structure,
        refit,
    })
}

/// Compact per-run record of a Monte Carlo sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct McRun {
    pub seed: u64,
    pub error: Option<String>,
    pub order_scores: Vec<f64>,
    pub coefficient_max: Vec<f64>,
    pub retained: Vec<usize>,
    /// `(j, l, score)` of the scheduling stage, `j <= l`.
    pub sched_scores: Vec<(usize, usize, f64)>,
    pub support_edges: Vec<(usize, usize)>,
    pub structure: Option<StructureReport>,
    pub refit_rms: Option<Vec<f64>>,
    pub refit_constants: Vec<(usize, f64)>,
    pub reweight_iterations: Vec<usize>,
    pub j_histories: Vec<Vec<f64>>,
}

impl McRun {
    fn from_report(r: &RunReport) -> Self {
        let stages = [&r.order.stage, &r.sched.stage, &r.refit.stage];
        Self {
            seed: r.seed,
            error: None,
            order_scores: r.order.order.scores.clone(),
            coefficient_max: r.order.coefficient_max.clone(),
            retained: r.order.order.retained_indices(),
            sched_scores: r
                .sched
                .stage
                .solution
                .scores
                .iter()
                .map(|s| (s.j, s.l.unwrap_or(s.j), s.value))
                .collect(),
            support_edges: r.sched.support.edges(),
            structure: Some(r.structure.clone()),
            refit_rms: r.refit.rms_error.clone(),
            refit_constants: r.refit.stage.solution.constants.iter().map(|c| (c.index, c.value)).collect(),
            reweight_iterations: stages.iter().map(|s| s.weighting.j_history.len()).collect(),
            j_histories: stages.iter().map(|s| s.weighting.j_history.clone()).collect(),
        }
    }

    fn failed(seed: u64, err: &Error) -> Self {
        Self {
            seed,
            error: Some(err.to_string()),
            order_scores: Vec::new(),
            coefficient_max: Vec::new(),
            retained: Vec::new(),
            sched_scores: Vec::new(),
            support_edges: Vec::new(),
            structure: None,
            refit_rms: None,
            refit_constants: Vec::new(),
            reweight_iterations: Vec::new(),
            j_histories: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CoefficientSummary {
    pub name: String,
    pub max_mean: f64,
    pub max_std: f64,
    pub retained_rate: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct McSummary {
    pub n_runs: usize,
    pub n_failed: usize,
    pub coefficients: Vec<CoefficientSummary>,
    /// Decomposition strings with their recurrence rate, most frequent first.
    pub decompositions: Vec<(String, f64)>,
    pub runs: Vec<McRun>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let s = if v.len() > 1 {
        (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (m, s)
}

pub fn summarize(cfg: &RunConfig, runs: Vec<McRun>) -> Result<McSummary> {
    let sys = cfg.system.build()?;
    let names = coefficient_names(sys.n_a, sys.n_b);
    let ok: Vec<&McRun> = runs.iter().filter(|r| r.error.is_none()).collect();
    let coefficients = names
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let maxima: Vec<f64> = ok.iter().map(|r| r.coefficient_max[j]).collect();
            let (max_mean, max_std) = mean_std(&maxima);
            let kept = ok.iter().filter(|r| r.retained.contains(&j)).count();
            CoefficientSummary {
                name: name.clone(),
                max_mean,
                max_std,
                retained_rate: if ok.is_empty() { f64::NAN } else { kept as f64 / ok.len() as f64 },
            }
        })
        .collect();
    let mut counts: Vec<(String, usize)> = Vec::new();
    for r in &ok {
        let d = r.structure.as_ref().map(|s| s.decomposition.clone()).unwrap_or_default();
        match counts.iter_mut().find(|(k, _)| *k == d) {
            Some(e) => e.1 += 1,
            None => counts.push((d, 1)),
        }
    }
    counts.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let total = ok.len().max(1) as f64;
    Ok(McSummary {
        n_runs: runs.len(),
        n_failed: runs.len() - ok.len(),
        coefficients,
        decompositions: counts.into_iter().map(|(k, c)| (k, c as f64 / total)).collect(),
        runs,
    })
}

/// Runs `n_runs` independent noise realizations with seeds
/// `base_seed, base_seed + 1, ...`; results are in seed order.
pub fn monte_carlo(cfg: &RunConfig, workers: Option<usize>) -> Result<McSummary> {
    cfg.validate()?;
    let seeds: Vec<u64> = (0..cfg.monte_carlo.n_runs as u64).map(|i| cfg.monte_carlo.base_seed + i).collect();
    let one = |seed: u64| {
        let start = Instant::now();
        let run = match run_all(&cfg.with_seed(seed)) {
            Ok((_, r)) => McRun::from_report(&r),
            Err(e) => {
                log::warn!("run with seed {seed} failed: {e}");
                McRun::failed(seed, &e)
            }
        };
        log::info!("seed {seed} done in {:.1} s", start.elapsed().as_secs_f64());
        run
    };
    let runs: Vec<McRun> = match workers {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| Error::Config(format!("cannot build worker pool: {e}")))?;
            pool.install(|| seeds.par_iter().map(|&s| one(s)).collect())
        }
        None => seeds.par_iter().map(|&s| one(s)).collect(),
    };
    summarize(cfg, runs)
}
