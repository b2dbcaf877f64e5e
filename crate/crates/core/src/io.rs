//! Long-format ingestion, quality filtering, gridding/normalization and the
//! CSV/JSON artifacts written by the command-line tool.
//!
//! Input CSV header: `subject_id,hour,measure,value` (or `timestamp` in place
//! of `hour`, binned to its clock hour). Empty `value` fields are missing.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use chrono::{DateTime, NaiveDateTime, Timelike};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::decomposer::{Decomposition, Variant};
use crate::error::{Error, Result};
use crate::postprocess::EffectCurves;
use crate::smoothing::Boundary;
use crate::tensor::{Dims, MaskedTensor, Tensor3};
use crate::tuning::CvReport;

pub const HOURS_PER_DAY: usize = 24;
pub const DEFAULT_GRID_START_HOUR: u32 = 12;

/// Canonical ABPM measure order.
pub const ABPM_MEASURES: [&str; 3] = ["SBP", "DBP", "HR"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongRecord {
    pub subject_id: String,
    /// Clock hour, 0-23.
    pub hour: u32,
    pub measure: String,
    pub value: Option<f64>,
}

/// Per-measure z-scoring parameters and the grid origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizationInfo {
    pub measures: Vec<String>,
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
    pub grid_start_hour: u32,
}

impl NormalizationInfo {
    /// Clock hour of grid position `t`.
    pub fn hour_at(&self, t: usize) -> u32 {
        (self.grid_start_hour + t as u32) % HOURS_PER_DAY as u32
    }

    pub fn position_of(&self, hour: u32) -> usize {
        ((hour + HOURS_PER_DAY as u32 - self.grid_start_hour % 24) % 24) as usize
    }
}

fn parse_hour(field: &str) -> std::result::Result<u32, String> {
    let h: u32 = field
        .trim()
        .parse()
        .map_err(|_| format!("invalid hour `{field}`"))?;
    if h >= 24 {
        return Err(format!("hour {h} outside 0-23"));
    }
    Ok(h)
}

fn parse_timestamp_hour(field: &str) -> std::result::Result<u32, String> {
    let s = field.trim();
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Ok(dt.hour());
    }
    for fmt in [
        "%Y-%m-%d %H:%M:%S",
        "%Y-%m-%dT%H:%M:%S",
        "%Y-%m-%d %H:%M",
        "%Y-%m-%dT%H:%M",
    ] {
        if let Ok(dt) = NaiveDateTime::parse_from_str(s, fmt) {
            return Ok(dt.hour());
        }
    }
    Err(format!("unrecognized timestamp `{field}`"))
}

/// Parses long-format CSV. Errors carry the 1-based line number.
pub fn read_long_csv<R: Read>(reader: R) -> Result<Vec<LongRecord>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers().map_err(|e| Error::Parse {
        line: 1,
        message: e.to_string(),
    })?;
    let find = |name: &str| headers.iter().position(|h| h.eq_ignore_ascii_case(name));
    let missing_col = |name: &str| Error::Parse {
        line: 1,
        message: format!("missing `{name}` column"),
    };
    let subject = find("subject_id").ok_or_else(|| missing_col("subject_id"))?;
    let measure = find("measure").ok_or_else(|| missing_col("measure"))?;
    let value = find("value").ok_or_else(|| missing_col("value"))?;
    let hour = find("hour");
    let timestamp = find("timestamp");
    if hour.is_none() && timestamp.is_none() {
        return Err(missing_col("hour"));
    }

    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let bad = |message: String| Error::Parse { line, message };
        let field = |k: usize| rec.get(k).unwrap_or("");
        let clock = match (hour, timestamp) {
            (Some(h), _) if !field(h).is_empty() => parse_hour(field(h)).map_err(bad)?,
            (_, Some(ts)) => parse_timestamp_hour(field(ts)).map_err(bad)?,
            _ => return Err(bad("empty hour".into())),
        };
        let raw = field(value);
        let v = if raw.is_empty() {
            None
        } else {
            let v = raw
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| bad(format!("invalid value `{raw}`")))?;
            Some(v)
        };
        let subject_id = field(subject).to_string();
        if subject_id.is_empty() {
            return Err(bad("empty subject_id".into()));
        }
        let m = field(measure).to_string();
        if m.is_empty() {
            return Err(bad("empty measure".into()));
        }
        out.push(LongRecord {
            subject_id,
            hour: clock,
            measure: m,
            value: v,
        });
    }
    Ok(out)
}

pub fn read_long_csv_path(path: &Path) -> Result<Vec<LongRecord>> {
    read_long_csv(fs::File::open(path)?)
}

pub fn write_long_csv<W: Write>(writer: W, records: &[LongRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["subject_id", "hour", "measure", "value"])?;
    for r in records {
        let v = r.value.map(|v| v.to_string()).unwrap_or_default();
        w.write_record([r.subject_id.as_str(), &r.hour.to_string(), &r.measure, &v])?;
    }
    w.flush()?;
    Ok(())
}

/// A reading set to missing by [`quality_filter`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Rejection {
    /// Position in the input record list.
    pub index: usize,
    pub subject_id: String,
    pub hour: u32,
    pub measure: String,
    pub value: f64,
    pub reason: String,
}

/// Plausibility range `[low, high]` for a measure; values strictly outside
/// are rejected.
pub fn physiological_bounds(measure: &str) -> Option<(f64, f64)> {
    match measure {
        "SBP" => Some((50.0, 240.0)),
        "DBP" => Some((40.0, 140.0)),
        "HR" => Some((27.0, 220.0)),
        _ => None,
    }
}

/// Sets implausible SBP/DBP/HR readings to missing and logs each one.
pub fn quality_filter(records: &[LongRecord]) -> Result<(Vec<LongRecord>, Vec<Rejection>)> {
    let mut kept = Vec::with_capacity(records.len());
    let mut log = Vec::new();
    for (index, r) in records.iter().enumerate() {
        let (low, high) = physiological_bounds(&r.measure).ok_or_else(|| {
            Error::InvalidParameter(format!(
                "no physiological bounds for measure `{}`",
                r.measure
            ))
        })?;
        let mut rec = r.clone();
        if let Some(v) = r.value {
            let reason = if !v.is_finite() {
                Some(format!("{} not finite", r.measure))
            } else if v > high {
                Some(format!("{} above {high}", r.measure))
            } else if v < low {
                Some(format!("{} below {low}", r.measure))
            } else {
                None
            };
            if let Some(reason) = reason {
                rec.value = None;
                log.push(Rejection {
                    index,
                    subject_id: r.subject_id.clone(),
                    hour: r.hour,
                    measure: r.measure.clone(),
                    value: v,
                    reason,
                });
            }
        }
        kept.push(rec);
    }
    Ok((kept, log))
}

/// Gridded, normalized data ready for fitting.
#[derive(Debug, Clone)]
pub struct GriddedData {
    /// Z-scored values; masked cells hold 0.
    pub tensor: MaskedTensor,
    pub normalization: NormalizationInfo,
    pub subjects: Vec<String>,
    pub warnings: Vec<String>,
}

fn measure_order(labels: BTreeSet<&str>) -> Vec<String> {
    let mut out: Vec<String> = ABPM_MEASURES
        .iter()
        .filter(|m| labels.contains(**m))
        .map(|m| m.to_string())
        .collect();
    out.extend(
        labels
            .iter()
            .filter(|m| !ABPM_MEASURES.contains(m))
            .map(|m| m.to_string()),
    );
    out
}

/// Averages readings into subject-hour-measure cells on a 24-hour grid that
/// starts at `grid_start_hour`, then z-scores each measure over its observed
/// cells.
///
/// Subjects are sorted by id and measures follow SBP, DBP, HR, then the rest
/// alphabetically, so the result does not depend on input row order.
pub fn gridify(records: &[LongRecord], grid_start_hour: u32) -> Result<GriddedData> {
    if grid_start_hour >= 24 {
        return Err(Error::InvalidParameter(format!(
            "grid start hour {grid_start_hour} outside 0-23"
        )));
    }
    let mut warnings = Vec::new();
    let all_subjects: BTreeSet<&str> = records.iter().map(|r| r.subject_id.as_str()).collect();
    let observed: Vec<&LongRecord> = records.iter().filter(|r| r.value.is_some()).collect();
    let subjects: Vec<String> = {
        let with_data: BTreeSet<&str> = observed.iter().map(|r| r.subject_id.as_str()).collect();
        for s in all_subjects.difference(&with_data) {
            warnings.push(format!("subject `{s}` has no observations and was dropped"));
        }
        with_data.into_iter().map(str::to_string).collect()
    };
    if subjects.is_empty() {
        return Err(Error::EmptyData);
    }
    let measures = measure_order(observed.iter().map(|r| r.measure.as_str()).collect());
    let subject_pos: BTreeMap<&str, usize> = subjects
        .iter()
        .enumerate()
        .map(|(k, s)| (s.as_str(), k))
        .collect();
    let measure_pos: BTreeMap<&str, usize> = measures
        .iter()
        .enumerate()
        .map(|(k, s)| (s.as_str(), k))
        .collect();

    let mut info = NormalizationInfo {
        measures: measures.clone(),
        means: vec![0.0; measures.len()],
        sds: vec![1.0; measures.len()],
        grid_start_hour,
    };
    let dims = Dims::new(HOURS_PER_DAY, measures.len(), subjects.len());
    let mut cells: Vec<Vec<f64>> = vec![Vec::new(); dims.len()];
    for r in &observed {
        let t = info.position_of(r.hour);
        let idx = dims.index(
            t,
            measure_pos[r.measure.as_str()],
            subject_pos[r.subject_id.as_str()],
        );
        cells[idx].push(r.value.expect("filtered to observed"));
    }
    let mut values = Tensor3::zeros(dims);
    let mut mask = vec![false; dims.len()];
    for (idx, cell) in cells.iter_mut().enumerate() {
        if cell.is_empty() {
            continue;
        }
        cell.sort_by(f64::total_cmp);
        values.as_mut_slice()[idx] = cell.iter().sum::<f64>() / cell.len() as f64;
        mask[idx] = true;
    }

    for (j, name) in measures.iter().enumerate() {
        let mut obs = Vec::new();
        for i in 0..dims.n {
            for t in 0..dims.a {
                let idx = dims.index(t, j, i);
                if mask[idx] {
                    obs.push(values.as_slice()[idx]);
                }
            }
        }
        let n = obs.len() as f64;
        let mean = obs.iter().sum::<f64>() / n;
        let var = obs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
        let sd = var.sqrt();
        if !(sd > 0.0) || !sd.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "measure `{name}` has zero spread; cannot normalize"
            )));
        }
        info.means[j] = mean;
        info.sds[j] = sd;
    }
    let mut z = values;
    for (idx, v) in z.as_mut_slice().iter_mut().enumerate() {
        if mask[idx] {
            let (_, j, _) = dims.coords(idx);
            *v = (*v - info.means[j]) / info.sds[j];
        }
    }
    Ok(GriddedData {
        tensor: MaskedTensor::new(z, mask)?,
        normalization: info,
        subjects,
        warnings,
    })
}

/// Maps z-scored values back to original units.
pub fn denormalize(t: &Tensor3, info: &NormalizationInfo) -> Result<Tensor3> {
    let d = t.dims();
    if d.b != info.means.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} measures vs {} normalization entries",
            d.b,
            info.means.len()
        )));
    }
    Ok(Tensor3::from_fn(d, |tt, j, i| {
        t.get(tt, j, i) * info.sds[j] + info.means[j]
    }))
}

fn write_table(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

fn fmt(v: f64) -> String {
    // Shortest representation that round-trips exactly.
    format!("{v:?}")
}

/// Fit metadata written next to the factor CSVs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub lambda: f64,
    pub r1: usize,
    pub r2: usize,
    pub boundary: Boundary,
    pub variant: Variant,
    pub objective_trace: Vec<f64>,
    pub outer_objective_trace: Vec<f64>,
    pub explained_variance: f64,
    pub converged: bool,
    pub outer_iterations: usize,
    pub inner_iterations: usize,
    pub warnings: Vec<String>,
    pub subjects: Vec<String>,
    pub normalization: NormalizationInfo,
}

impl FitSummary {
    pub fn new(
        dec: &Decomposition,
        explained_variance: f64,
        subjects: Vec<String>,
        normalization: NormalizationInfo,
    ) -> Self {
        Self {
            lambda: dec.lambda,
            r1: dec.ranks.0,
            r2: dec.ranks.1,
            boundary: dec.boundary,
            variant: dec.variant,
            objective_trace: dec.objective_trace.clone(),
            outer_objective_trace: dec.outer_objective_trace.clone(),
            explained_variance,
            converged: dec.converged,
            outer_iterations: dec.outer_iterations,
            inner_iterations: dec.inner_iterations,
            warnings: dec.warnings.clone(),
            subjects,
            normalization,
        }
    }
}

pub fn score_labels(r1: usize, r2: usize) -> Vec<String> {
    let mut out = Vec::with_capacity(r1 * r2);
    for k in 1..=r1 {
        for l in 1..=r2 {
            out.push(format!("g_{k}{l}"));
        }
    }
    out
}

/// `L.csv`: hour, L1..Lr1.
pub fn write_l_csv(path: &Path, l: &DMatrix<f64>, info: &NormalizationInfo) -> Result<()> {
    let mut header = vec!["hour".to_string()];
    header.extend((1..=l.ncols()).map(|k| format!("L{k}")));
    let rows: Vec<Vec<String>> = (0..l.nrows())
        .map(|t| {
            let mut row = vec![info.hour_at(t).to_string()];
            row.extend(l.row(t).iter().map(|&v| fmt(v)));
            row
        })
        .collect();
    write_table(path, &header, &rows)
}

/// `R.csv`: measure, R1..Rr2.
pub fn write_r_csv(path: &Path, r: &DMatrix<f64>, info: &NormalizationInfo) -> Result<()> {
    let mut header = vec!["measure".to_string()];
    header.extend((1..=r.ncols()).map(|k| format!("R{k}")));
    let rows: Vec<Vec<String>> = (0..r.nrows())
        .map(|j| {
            let mut row = vec![info.measures[j].clone()];
            row.extend(r.row(j).iter().map(|&v| fmt(v)));
            row
        })
        .collect();
    write_table(path, &header, &rows)
}

/// `scores.csv`: subject_id, g_11, g_12, ..., one row per subject.
pub fn write_scores_csv(path: &Path, cores: &[DMatrix<f64>], subjects: &[String]) -> Result<()> {
    let (r1, r2) = cores.first().map_or((0, 0), |g| g.shape());
    let mut header = vec!["subject_id".to_string()];
    header.extend(score_labels(r1, r2));
    let rows: Vec<Vec<String>> = cores
        .iter()
        .zip(subjects)
        .map(|(g, s)| {
            let mut row = vec![s.clone()];
            for k in 0..r1 {
                for l in 0..r2 {
                    row.push(fmt(g[(k, l)]));
                }
            }
            row
        })
        .collect();
    write_table(path, &header, &rows)
}

/// `imputed.csv`: long format in original units with an `observed` flag.
pub fn write_imputed_csv(
    path: &Path,
    imputed: &Tensor3,
    mask: &[bool],
    info: &NormalizationInfo,
    subjects: &[String],
) -> Result<()> {
    let orig = denormalize(imputed, info)?;
    let d = imputed.dims();
    let header: Vec<String> = ["subject_id", "hour", "measure", "value", "observed"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let mut rows = Vec::with_capacity(d.len());
    for (i, s) in subjects.iter().enumerate() {
        for t in 0..d.a {
            for j in 0..d.b {
                let idx = d.index(t, j, i);
                rows.push(vec![
                    s.clone(),
                    info.hour_at(t).to_string(),
                    info.measures[j].clone(),
                    fmt(orig.as_slice()[idx]),
                    (mask[idx] as u8).to_string(),
                ]);
            }
        }
    }
    write_table(path, &header, &rows)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

/// Reads a JSON file, reporting the line of any syntax or schema error.
pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        line: e.line() as u64,
        message: format!("{}: {e}", path.display()),
    })
}

/// Writes `L.csv`, `R.csv`, `scores.csv`, `fit.json`.
pub fn save_fit(dir: &Path, dec: &Decomposition, summary: &FitSummary) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_l_csv(&dir.join("L.csv"), &dec.l_factor, &summary.normalization)?;
    write_r_csv(&dir.join("R.csv"), &dec.r_factor, &summary.normalization)?;
    write_scores_csv(&dir.join("scores.csv"), &dec.cores, &summary.subjects)?;
    write_json(&dir.join("fit.json"), summary)
}

fn read_numeric_table(path: &Path) -> Result<(Vec<String>, DMatrix<f64>)> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut labels = Vec::new();
    let mut values: Vec<Vec<f64>> = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        labels.push(rec.get(0).unwrap_or("").to_string());
        let row = rec
            .iter()
            .skip(1)
            .map(|f| {
                f.parse::<f64>().map_err(|_| Error::Parse {
                    line,
                    message: format!("{}: invalid number `{f}`", path.display()),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        values.push(row);
    }
    let m = crate::serde_matrix::from_rows(&values).map_err(|message| Error::Parse {
        line: 0,
        message: format!("{}: {message}", path.display()),
    })?;
    Ok((labels, m))
}

/// Loads a fit written by [`save_fit`].
pub fn load_fit(dir: &Path) -> Result<(Decomposition, FitSummary)> {
    let summary: FitSummary = read_json(&dir.join("fit.json"))?;
    let (_, l) = read_numeric_table(&dir.join("L.csv"))?;
    let (_, r) = read_numeric_table(&dir.join("R.csv"))?;
    let (_, scores) = read_numeric_table(&dir.join("scores.csv"))?;
    let (r1, r2) = (summary.r1, summary.r2);
    if l.ncols() != r1 || r.ncols() != r2 || scores.ncols() != r1 * r2 {
        return Err(Error::ShapeMismatch(
            "saved fit files disagree on ranks".into(),
        ));
    }
    let cores = scores
        .row_iter()
        .map(|row| DMatrix::from_fn(r1, r2, |k, l| row[k * r2 + l]))
        .collect();
    let dec = Decomposition {
        l_factor: l,
        r_factor: r,
        cores,
        lambda: summary.lambda,
        ranks: (r1, r2),
        variant: summary.variant,
        boundary: summary.boundary,
        objective_trace: summary.objective_trace.clone(),
        outer_objective_trace: summary.outer_objective_trace.clone(),
        converged: summary.converged,
        outer_iterations: summary.outer_iterations,
        inner_iterations: summary.inner_iterations,
        warnings: summary.warnings.clone(),
    };
    Ok((dec, summary))
}

/// `cv_report.csv`: one row per evaluated grid point.
pub fn write_cv_report_csv(path: &Path, report: &CvReport) -> Result<()> {
    let header: Vec<String> = [
        "r1",
        "r2",
        "lambda",
        "stage",
        "cv_error",
        "valid_folds",
        "inner_iterations",
        "warm_from",
        "selected",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let rows: Vec<Vec<String>> = report
        .entries
        .iter()
        .enumerate()
        .map(|(k, e)| {
            vec![
                e.r1.to_string(),
                e.r2.to_string(),
                fmt(e.lambda),
                e.stage.as_str().to_string(),
                fmt(e.error),
                e.valid_folds.to_string(),
                e.inner_iterations.to_string(),
                e.warm_from.map(|w| w.to_string()).unwrap_or_default(),
                ((k == report.selected) as u8).to_string(),
            ]
        })
        .collect();
    write_table(path, &header, &rows)
}

/// `effect_curves.csv`: component, hour, measure, mean, plus_1sd, minus_1sd.
pub fn write_effect_curves_csv(
    path: &Path,
    curves: &[EffectCurves],
    info: &NormalizationInfo,
) -> Result<()> {
    let header: Vec<String> = [
        "component",
        "hour",
        "measure",
        "mean",
        "plus_1sd",
        "minus_1sd",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let mut rows = Vec::new();
    for c in curves {
        for p in &c.points {
            rows.push(vec![
                (c.component + 1).to_string(),
                info.hour_at(p.time).to_string(),
                info.measures[p.measure].clone(),
                fmt(p.mean),
                fmt(p.plus_1sd),
                fmt(p.minus_1sd),
            ]);
        }
    }
    write_table(path, &header, &rows)
}

/// `component_curves.csv`: hour, then one column per temporal component.
pub fn write_component_curves_csv(
    path: &Path,
    l: &DMatrix<f64>,
    info: &NormalizationInfo,
) -> Result<()> {
    write_l_csv(path, l, info)
}

/// `variance_profile.csv`: mode, component, share.
pub fn write_variance_profile_csv(
    path: &Path,
    profile: &crate::postprocess::VarianceProfile,
) -> Result<()> {
    let header: Vec<String> = ["mode", "component", "share"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let mut rows = Vec::new();
    for (mode, shares) in [("L", &profile.mode1), ("R", &profile.mode2)] {
        for (k, s) in shares.iter().enumerate() {
            rows.push(vec![mode.to_string(), (k + 1).to_string(), fmt(*s)]);
        }
    }
    rows.push(vec!["total".into(), String::new(), fmt(profile.total)]);
    write_table(path, &header, &rows)
}
