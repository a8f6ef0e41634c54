//! On-disk outputs of the pipeline stages. Every JSON file embeds the run
//! configuration under `config`; CSV files hold plot-ready data.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::pipeline::{McSummary, OrderReport, RefitReport, RunConfig, SchedReport};
use crate::signals::write_signals_csv;
use crate::simulator::SampledDataset;
use crate::structure::{input_name, StructureReport};

pub const DATASET_CSV: &str = "dataset.csv";
pub const ORDER_JSON: &str = "order.json";
pub const ORDER_CSV: &str = "order_scores.csv";
pub const SCHED_JSON: &str = "sched.json";
pub const TAU_CSV: &str = "tau_matrix.csv";
pub const STRUCTURE_JSON: &str = "structure.json";
pub const REFIT_JSON: &str = "refit.json";
pub const REFIT_CSV: &str = "refit_coefficients.csv";
pub const MC_JSON: &str = "mc.json";
pub const MC_RUNS_CSV: &str = "mc_runs.csv";
pub const MC_SUMMARY_CSV: &str = "mc_summary.csv";
pub const MC_STRUCTURES_CSV: &str = "mc_structures.csv";

/// Writes `value` as pretty JSON with the configuration echoed in.
pub fn write_json<T: Serialize>(path: &Path, value: &T, cfg: &RunConfig) -> Result<()> {
    let mut v = serde_json::to_value(value)?;
    match &mut v {
        serde_json::Value::Object(map) => {
            map.insert("config".into(), cfg.to_value());
        }
        _ => {
            v = serde_json::json!({ "value": v, "config": cfg.to_value() });
        }
    }
    std::fs::write(path, serde_json::to_string_pretty(&v)? + "\n")?;
    Ok(())
}

/// Reads a JSON output; the embedded configuration is ignored.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de)
        .map_err(|e| Error::Config(format!("{}: {} at '{}'", path.display(), e.inner(), e.path())))
}

fn fmt(x: f64) -> String {
    format!("{x:.17e}")
}

pub fn dataset_path(dir: &Path) -> PathBuf {
    dir.join(DATASET_CSV)
}

pub fn load_dataset(dir: &Path) -> Result<SampledDataset> {
    let path = dataset_path(dir);
    if !path.exists() {
        return Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("dataset {} not found; run `simulate` first", path.display()),
        )));
    }
    SampledDataset::load(&path)
}

pub fn write_order(dir: &Path, cfg: &RunConfig, r: &OrderReport) -> Result<()> {
    write_json(&dir.join(ORDER_JSON), r, cfg)?;
    let mut w = csv::Writer::from_path(dir.join(ORDER_CSV))?;
    w.write_record(["coefficient", "input", "score", "scale", "coefficient_max", "retained"])?;
    for (j, name) in r.names.iter().enumerate() {
        let scale = r
            .stage
            .solution
            .scores
            .iter()
            .find(|s| s.j == j)
            .map_or(f64::NAN, |s| s.scale);
        w.write_record([
            name.clone(),
            input_name(j),
            fmt(r.order.scores[j]),
            fmt(scale),
            fmt(r.coefficient_max[j]),
            r.order.retained[j].to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_sched(dir: &Path, cfg: &RunConfig, r: &SchedReport) -> Result<()> {
    write_json(&dir.join(SCHED_JSON), r, cfg)?;
    let mut w = csv::Writer::from_path(dir.join(TAU_CSV))?;
    let s = &r.support;
    let mut header = vec!["input".to_string()];
    header.extend(s.inputs.iter().map(|&j| input_name(j)));
    w.write_record(&header)?;
    for (a, &j) in s.inputs.iter().enumerate() {
        let mut row = vec![input_name(j)];
        row.extend(s.scores[a].iter().map(|&x| fmt(x)));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_structure(dir: &Path, cfg: &RunConfig, r: &StructureReport) -> Result<()> {
    write_json(&dir.join(STRUCTURE_JSON), r, cfg)
}

pub fn write_refit(dir: &Path, cfg: &RunConfig, ds: &SampledDataset, r: &RefitReport) -> Result<()> {
    write_json(&dir.join(REFIT_JSON), r, cfg)?;
    let n_x = r.names.len();
    let col = |rows: &[Vec<f64>], j: usize| rows.iter().map(|row| row[j]).collect::<Vec<f64>>();
    let mut names: Vec<String> = r.names.iter().map(|n| format!("{n}_hat")).collect();
    let mut cols: Vec<Vec<f64>> = (0..n_x).map(|j| col(&r.coefficients, j)).collect();
    if let Some(truth) = &r.truth {
        names.extend(r.names.iter().map(|n| format!("{n}_true")));
        cols.extend((0..n_x).map(|j| col(truth, j)));
    }
    let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let col_refs: Vec<&[f64]> = cols.iter().map(Vec::as_slice).collect();
    write_signals_csv(&dir.join(REFIT_CSV), &ds.grid, &name_refs, &col_refs)
}

pub fn write_mc(dir: &Path, cfg: &RunConfig, s: &McSummary) -> Result<()> {
    write_json(&dir.join(MC_JSON), s, cfg)?;
    let names: Vec<String> = s.coefficients.iter().map(|c| c.name.clone()).collect();

    let mut w = csv::Writer::from_path(dir.join(MC_RUNS_CSV))?;
    let mut header = vec!["seed".to_string(), "error".to_string()];
    header.extend(names.iter().map(|n| format!("score_{n}")));
    header.extend(names.iter().map(|n| format!("max_{n}")));
    header.extend(names.iter().map(|n| format!("refit_rms_{n}")));
    header.extend(["retained", "support", "decomposition"].map(String::from));
    w.write_record(&header)?;
    for run in &s.runs {
        let mut row = vec![run.seed.to_string(), run.error.clone().unwrap_or_default()];
        let padded = |v: &[f64]| -> Vec<String> {
            (0..names.len()).map(|j| v.get(j).map_or(String::new(), |&x| fmt(x))).collect()
        };
        row.extend(padded(&run.order_scores));
        row.extend(padded(&run.coefficient_max));
        row.extend(padded(run.refit_rms.as_deref().unwrap_or(&[])));
        row.push(run.retained.iter().map(|&j| input_name(j)).collect::<Vec<_>>().join(" "));
        row.push(
            run.support_edges
                .iter()
                .map(|&(a, b)| format!("({},{})", a + 1, b + 1))
                .collect::<Vec<_>>()
                .join(" "),
        );
        row.push(run.structure.as_ref().map(|x| x.decomposition.clone()).unwrap_or_default());
        w.write_record(&row)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join(MC_SUMMARY_CSV))?;
    w.write_record(["coefficient", "max_mean", "max_std", "retained_rate"])?;
    for c in &s.coefficients {
        w.write_record([c.name.clone(), fmt(c.max_mean), fmt(c.max_std), fmt(c.retained_rate)])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join(MC_STRUCTURES_CSV))?;
    w.write_record(["decomposition", "rate"])?;
    for (d, rate) in &s.decompositions {
        w.write_record([d.clone(), fmt(*rate)])?;
    }
    w.flush()?;
    Ok(())
}
