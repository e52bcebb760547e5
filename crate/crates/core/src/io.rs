//! CSV and JSON input/output.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diagnostics::{PosteriorSummary, ACF_LAGS};
use crate::error::{Error, Result};
use crate::evidence::EvidenceResult;
use crate::sim::{MipCurves, ReplicateResult};
use crate::trajectory::{TrajectoryRow, TrajectorySummary};
use crate::types::{validate_dataset, RawTable, SamplerConfig, Validated};

fn is_missing(s: &str) -> bool {
    let t = s.trim();
    t.is_empty() || t.eq_ignore_ascii_case("na") || t.eq_ignore_ascii_case("nan")
}

/// Read a headed, comma-separated table. Empty, `NA` and `NaN` cells become
/// `None`.
pub fn read_table<R: Read>(reader: R) -> Result<RawTable> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        rows.push(
            rec.iter()
                .map(|c| if is_missing(c) { None } else { Some(c.to_string()) })
                .collect(),
        );
    }
    Ok(RawTable { header, rows })
}

pub fn read_table_path(path: &Path) -> Result<RawTable> {
    read_table(File::open(path)?)
}

/// Read a CSV file and split off `response`, dropping incomplete rows.
pub fn load_dataset(path: &Path, response: &str) -> Result<Validated> {
    validate_dataset(&read_table_path(path)?, response)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    Ok(BufWriter::new(File::create(path)?))
}

/// Shortest round-tripping decimal form.
fn num(v: f64) -> String {
    format!("{v:?}")
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_reader(File::open(path)?)?)
}

fn acf_headers() -> Vec<String> {
    ACF_LAGS.iter().map(|l| format!("acf_{l}")).collect()
}

/// One row per predictor.
pub fn write_summary_csv<W: Write>(w: W, s: &PosteriorSummary) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut head = vec!["predictor", "mip", "beta_hat", "ci_low", "ci_high", "median_model"]
        .into_iter()
        .map(String::from)
        .collect::<Vec<_>>();
    head.extend(acf_headers());
    out.write_record(&head)?;
    for j in 0..s.names.len() {
        let mut rec = vec![
            s.names[j].clone(),
            num(s.mip[j]),
            num(s.beta_hat[j]),
            num(s.ci_low[j]),
            num(s.ci_high[j]),
            (s.median_probability_model[j] as u8).to_string(),
        ];
        rec.extend(s.autocorr[j].iter().map(|v| num(*v)));
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

/// Per-predictor fields of a summary CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub predictor: String,
    pub mip: f64,
    pub beta_hat: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub median_model: bool,
    pub autocorr: Vec<f64>,
}

fn parse_f64(v: &str, row: usize, column: &str) -> Result<f64> {
    v.trim().parse().map_err(|_| Error::Parse {
        row,
        column: column.to_string(),
        value: v.to_string(),
    })
}

pub fn read_summary_csv<R: Read>(r: R) -> Result<Vec<SummaryRow>> {
    let mut rdr = csv::Reader::from_reader(r);
    let head: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = i + 1;
        let f = |k: usize| parse_f64(&rec[k], row, &head[k]);
        rows.push(SummaryRow {
            predictor: rec[0].to_string(),
            mip: f(1)?,
            beta_hat: f(2)?,
            ci_low: f(3)?,
            ci_high: f(4)?,
            median_model: &rec[5] == "1",
            autocorr: (6..rec.len()).map(f).collect::<Result<_>>()?,
        });
    }
    Ok(rows)
}

pub fn summary_rows(s: &PosteriorSummary) -> Vec<SummaryRow> {
    (0..s.names.len())
        .map(|j| SummaryRow {
            predictor: s.names[j].clone(),
            mip: s.mip[j],
            beta_hat: s.beta_hat[j],
            ci_low: s.ci_low[j],
            ci_high: s.ci_high[j],
            median_model: s.median_probability_model[j],
            autocorr: s.autocorr[j].clone(),
        })
        .collect()
}

pub fn write_summary_files(dir: &Path, stem: &str, s: &PosteriorSummary) -> Result<()> {
    let mut w = create(&dir.join(format!("{stem}.csv")))?;
    write_summary_csv(&mut w, s)?;
    w.flush()?;
    write_json(&dir.join(format!("{stem}.json")), s)
}

pub fn write_density_csv(path: &Path, grid: &[f64], density: &[f64]) -> Result<()> {
    let mut out = csv::Writer::from_writer(create(path)?);
    out.write_record(["residual", "density"])?;
    for (e, d) in grid.iter().zip(density) {
        out.write_record([num(*e), num(*d)])?;
    }
    out.flush()?;
    Ok(())
}

/// Wide per-replicate table: scalar metrics followed by per-predictor MIP,
/// estimate and interval columns.
pub fn write_replicates_csv(path: &Path, results: &[ReplicateResult], names: &[String]) -> Result<()> {
    let mut out = csv::Writer::from_writer(create(path)?);
    let mut head: Vec<String> = [
        "baseline",
        "n",
        "replicate",
        "oos_mse",
        "beta_mse",
        "median_model_correct",
        "intercept_hat",
        "mean_clusters",
        "diverged",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    for prefix in ["mip", "beta_hat", "ci_low", "ci_high"] {
        head.extend(names.iter().map(|n| format!("{prefix}_{n}")));
    }
    out.write_record(&head)?;
    for r in results {
        let mut rec = vec![
            r.baseline.name().to_string(),
            r.n.to_string(),
            r.replicate.to_string(),
            num(r.oos_mse),
            num(r.beta_mse),
            (r.median_model_correct as u8).to_string(),
            num(r.intercept_hat),
            num(r.mean_clusters),
            r.diverged.clone().unwrap_or_default(),
        ];
        for v in [&r.mip, &r.beta_hat, &r.ci_low, &r.ci_high] {
            rec.extend(v.iter().map(|x| num(*x)));
        }
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

/// One row per (baseline, predictor), one column per sample size.
pub fn write_mip_curves_csv(path: &Path, curves: &MipCurves, names: &[String]) -> Result<()> {
    let mut out = csv::Writer::from_writer(create(path)?);
    let mut head = vec!["baseline".to_string(), "predictor".to_string()];
    head.extend(curves.ns.iter().map(|n| format!("n_{n}")));
    out.write_record(&head)?;
    for row in &curves.rows {
        let mut rec = vec![
            row.baseline.name().to_string(),
            names.get(row.predictor).cloned().unwrap_or_else(|| row.predictor.to_string()),
        ];
        rec.extend(row.mean_mip.iter().map(|v| num(*v)));
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_trajectory_csv(path: &Path, rows: &[TrajectoryRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(create(path)?);
    out.write_record(["n", "replicate", "log_bf", "r2_model1", "r2_model2"])?;
    for r in rows {
        out.write_record([
            r.n.to_string(),
            r.replicate.to_string(),
            num(r.log_bf),
            num(r.r2_model1),
            num(r.r2_model2),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_trajectory_summary_csv(path: &Path, rows: &[TrajectorySummary]) -> Result<()> {
    let mut out = csv::Writer::from_writer(create(path)?);
    out.write_record([
        "n",
        "median_log_bf",
        "q25_log_bf",
        "q75_log_bf",
        "mean_r2_model1",
        "mean_r2_model2",
        "r2_limit",
    ])?;
    for r in rows {
        out.write_record([
            r.n.to_string(),
            num(r.median),
            num(r.q25),
            num(r.q75),
            num(r.mean_r2_model1),
            num(r.mean_r2_model2),
            r.r2_limit.map(num).unwrap_or_default(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_evidence_csv(path: &Path, rows: &[EvidenceResult]) -> Result<()> {
    let mut out = csv::Writer::from_writer(create(path)?);
    out.write_record([
        "allocation",
        "model1",
        "model2",
        "log_cond_marginal_1",
        "log_cond_marginal_2",
        "r2_tilde_1",
        "r2_tilde_2",
        "log_bf_conditional",
        "log_bf_unconditional",
    ])?;
    for r in rows {
        out.write_record([
            r.allocation.clone(),
            r.model1.clone(),
            r.model2.clone(),
            num(r.log_cond_marginal[0]),
            num(r.log_cond_marginal[1]),
            num(r.r2_tilde[0]),
            num(r.r2_tilde[1]),
            num(r.log_bf_conditional),
            r.log_bf_unconditional.map(num).unwrap_or_default(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Everything needed to rerun a command: its inputs, configuration and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub spec: serde_json::Value,
    pub config: Option<SamplerConfig>,
    pub prediction_rule: Option<String>,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64, spec: serde_json::Value) -> Self {
        Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            spec,
            config: None,
            prediction_rule: None,
            outputs: Vec::new(),
        }
    }
}
