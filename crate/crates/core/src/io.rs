//! File formats: CSV for data, labels and results, JSON for fitted artifacts,
//! and flat `key=value` text for sweep configs.
//!
//! Every CSV that carries a meta-label vector starts with a `# C=<c> K=<k>`
//! comment and lays columns out in `m = y*K + z` order. Numbers are written
//! in shortest round-trip form so files re-read to the same bits.

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::calibrate::CalibrationFitConfig;
use crate::error::{Error, Result};
use crate::harness::{MethodKind, PriorRecord, SourcePriorEstimate, SummaryRow, SweepConfig};
use crate::metrics::{GroupAccuracyReport, SweepRecord};
use crate::prob::{JointPrior, LogitsMatrix, Matrix, MetaLabelSpace, PosteriorMatrix};
use crate::synthdata::LabeledDataset;
use crate::train::TrainConfig;

/// Shortest decimal that parses back to the same `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

fn parse_f64(s: &str, what: &str) -> Result<f64> {
    s.trim()
        .parse()
        .map_err(|_| Error::Parse(format!("{what}: '{s}' is not a number")))
}

fn parse_usize(s: &str, what: &str) -> Result<usize> {
    s.trim()
        .parse()
        .map_err(|_| Error::Parse(format!("{what}: '{s}' is not a nonnegative integer")))
}

fn parse_u64(s: &str, what: &str) -> Result<u64> {
    s.trim()
        .parse()
        .map_err(|_| Error::Parse(format!("{what}: '{s}' is not a nonnegative integer")))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Parse(format!("csv: {e}"))
}

pub fn space_comment(space: MetaLabelSpace) -> String {
    format!("# C={} K={}", space.num_classes(), space.num_groups())
}

/// Parses a `# C=<c> K=<k>` line.
pub fn parse_space_comment(line: &str) -> Result<MetaLabelSpace> {
    let body = line
        .trim()
        .strip_prefix('#')
        .ok_or_else(|| Error::Parse(format!("expected '# C=<c> K=<k>', found '{line}'")))?;
    let (mut c, mut k) = (None, None);
    for token in body.split_whitespace() {
        match token.split_once('=') {
            Some(("C", v)) => c = Some(parse_usize(v, "C")?),
            Some(("K", v)) => k = Some(parse_usize(v, "K")?),
            _ => {}
        }
    }
    match (c, k) {
        (Some(c), Some(k)) => MetaLabelSpace::new(c, k),
        _ => Err(Error::Parse(format!("header comment '{line}' lacks C and K"))),
    }
}

/// Column names for a meta-label vector, `y0z0, y0z1, ...`.
pub fn meta_label_columns(space: MetaLabelSpace) -> Vec<String> {
    (0..space.size())
        .map(|m| {
            let (y, z) = space.decode(m);
            format!("y{y}z{z}")
        })
        .collect()
}

/// Splits off the optional header comment and returns the declared space and the CSV body.
fn split_comment(text: &str) -> Result<(Option<MetaLabelSpace>, &str)> {
    let trimmed = text.trim_start_matches('\u{feff}');
    if trimmed.starts_with('#') {
        let (first, rest) = trimmed.split_once('\n').unwrap_or((trimmed, ""));
        Ok((Some(parse_space_comment(first)?), rest))
    } else {
        Ok((None, trimmed))
    }
}

fn csv_rows(body: &str) -> Result<(Vec<String>, Vec<csv::StringRecord>)> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(body.as_bytes());
    let header = reader
        .headers()
        .map_err(csv_err)?
        .iter()
        .map(str::to_string)
        .collect();
    let rows = reader
        .records()
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(csv_err)?;
    Ok((header, rows))
}

fn resolve_space(
    declared: Option<MetaLabelSpace>,
    expected: Option<MetaLabelSpace>,
) -> Result<Option<MetaLabelSpace>> {
    match (declared, expected) {
        (Some(d), Some(e)) if d != e => Err(Error::InvalidInput(format!(
            "file declares C={} K={}, expected C={} K={}",
            d.num_classes(),
            d.num_groups(),
            e.num_classes(),
            e.num_groups()
        ))),
        (d, e) => Ok(d.or(e)),
    }
}

fn csv_writer<W: Write>(w: W) -> csv::Writer<W> {
    csv::WriterBuilder::new().from_writer(w)
}

fn write_comment<W: Write>(w: &mut W, space: MetaLabelSpace) -> Result<()> {
    writeln!(w, "{}", space_comment(space))?;
    Ok(())
}

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path)
        .map_err(|e| Error::Io(e).context(format!("reading {}", path.display())))
}

pub fn read_all<R: Read>(mut r: R) -> Result<String> {
    let mut s = String::new();
    r.read_to_string(&mut s)?;
    Ok(s)
}

// ---- datasets ----

pub fn write_dataset<W: Write>(mut w: W, data: &LabeledDataset) -> Result<()> {
    write_comment(&mut w, data.space)?;
    let d = data.features.cols();
    let mut out = csv_writer(w);
    let mut header: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
    header.extend(["y".to_string(), "z".to_string()]);
    out.write_record(&header).map_err(csv_err)?;
    for (i, row) in data.features.iter_rows().enumerate() {
        let mut rec: Vec<String> = row.iter().map(|v| fmt_f64(*v)).collect();
        rec.push(data.y[i].to_string());
        rec.push(data.z[i].to_string());
        out.write_record(&rec).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

/// Reads `x0..x{D-1},y,z`. Without a header comment the space is `expected`,
/// or else the smallest one covering the observed labels.
pub fn read_dataset(text: &str, expected: Option<MetaLabelSpace>) -> Result<LabeledDataset> {
    let (declared, body) = split_comment(text)?;
    let space = resolve_space(declared, expected)?;
    let (header, rows) = csv_rows(body)?;
    let n_cols = header.len();
    if n_cols < 2 || header[n_cols - 2] != "y" || header[n_cols - 1] != "z" {
        return Err(Error::Parse(format!(
            "dataset header must end with y,z, found '{}'",
            header.join(",")
        )));
    }
    let d = n_cols - 2;
    let mut data = Vec::with_capacity(rows.len() * d);
    let (mut y, mut z) = (Vec::new(), Vec::new());
    for (i, rec) in rows.iter().enumerate() {
        if rec.len() != n_cols {
            return Err(Error::InvalidInput(format!(
                "dataset row {i}: expected {n_cols} columns, found {}",
                rec.len()
            )));
        }
        for j in 0..d {
            data.push(parse_f64(&rec[j], &format!("row {i} x{j}"))?);
        }
        y.push(parse_usize(&rec[d], &format!("row {i} y"))?);
        z.push(parse_usize(&rec[d + 1], &format!("row {i} z"))?);
    }
    let space = match space {
        Some(s) => s,
        None => MetaLabelSpace::new(
            y.iter().max().map_or(2, |m| (m + 1).max(2)),
            z.iter().max().map_or(1, |m| m + 1),
        )?,
    };
    LabeledDataset::new(space, Matrix::new(y.len(), d, data)?, y, z)
}

/// Feature matrix only; a trailing `y,z` pair is ignored when present.
pub fn read_features(text: &str) -> Result<Matrix> {
    let (_, body) = split_comment(text)?;
    let (header, rows) = csv_rows(body)?;
    let mut d = header.len();
    if d >= 2 && header[d - 2] == "y" && header[d - 1] == "z" {
        d -= 2;
    }
    let mut data = Vec::with_capacity(rows.len() * d);
    for (i, rec) in rows.iter().enumerate() {
        if rec.len() != header.len() {
            return Err(Error::InvalidInput(format!(
                "feature row {i}: expected {} columns, found {}",
                header.len(),
                rec.len()
            )));
        }
        for j in 0..d {
            data.push(parse_f64(&rec[j], &format!("row {i} column {j}"))?);
        }
    }
    Matrix::new(rows.len(), d, data)
}

// ---- meta-label vectors and matrices ----

pub fn write_prior<W: Write>(mut w: W, prior: &JointPrior) -> Result<()> {
    write_comment(&mut w, prior.space())?;
    let mut out = csv_writer(w);
    out.write_record(meta_label_columns(prior.space()))
        .map_err(csv_err)?;
    out.write_record(prior.probs().iter().map(|p| fmt_f64(*p)))
        .map_err(csv_err)?;
    out.flush()?;
    Ok(())
}

fn read_meta_matrix(text: &str, expected: Option<MetaLabelSpace>, what: &str) -> Result<(MetaLabelSpace, Matrix)> {
    let (declared, body) = split_comment(text)?;
    let space = resolve_space(declared, expected)?.ok_or_else(|| {
        Error::InvalidInput(format!(
            "{what} file has no '# C=<c> K=<k>' line and no space was given"
        ))
    })?;
    let (header, rows) = csv_rows(body)?;
    let m = space.size();
    if header.len() != m {
        return Err(Error::InvalidInput(format!(
            "{what}: expected {m} columns for C={} K={}, found {}",
            space.num_classes(),
            space.num_groups(),
            header.len()
        )));
    }
    let mut data = Vec::with_capacity(rows.len() * m);
    for (i, rec) in rows.iter().enumerate() {
        if rec.len() != m {
            return Err(Error::InvalidInput(format!(
                "{what} row {i}: expected {m} columns, found {}",
                rec.len()
            )));
        }
        for v in rec.iter() {
            data.push(parse_f64(v, &format!("{what} row {i}"))?);
        }
    }
    Ok((space, Matrix::new(rows.len(), m, data)?))
}

pub fn read_prior(text: &str, expected: Option<MetaLabelSpace>) -> Result<JointPrior> {
    let (space, values) = read_meta_matrix(text, expected, "prior")?;
    if values.rows() != 1 {
        return Err(Error::InvalidInput(format!(
            "prior: expected 1 row, found {}",
            values.rows()
        )));
    }
    JointPrior::new(space, values.row(0).to_vec())
}

pub fn write_meta_matrix<W: Write>(mut w: W, space: MetaLabelSpace, values: &Matrix) -> Result<()> {
    write_comment(&mut w, space)?;
    let mut out = csv_writer(w);
    out.write_record(meta_label_columns(space)).map_err(csv_err)?;
    for row in values.iter_rows() {
        out.write_record(row.iter().map(|v| fmt_f64(*v)))
            .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_logits<W: Write>(w: W, logits: &LogitsMatrix) -> Result<()> {
    write_meta_matrix(w, logits.space(), logits.as_matrix())
}

pub fn read_logits(text: &str, expected: Option<MetaLabelSpace>) -> Result<LogitsMatrix> {
    let (space, values) = read_meta_matrix(text, expected, "logits")?;
    LogitsMatrix::new(space, values)
}

pub fn write_posterior<W: Write>(w: W, posterior: &PosteriorMatrix) -> Result<()> {
    write_meta_matrix(w, posterior.space(), posterior.as_matrix())
}

pub fn read_posterior(text: &str, expected: Option<MetaLabelSpace>) -> Result<PosteriorMatrix> {
    let (space, values) = read_meta_matrix(text, expected, "posterior")?;
    PosteriorMatrix::new(space, values)
}

// ---- sweep results ----

pub fn write_sweep_records<W: Write>(w: W, records: &[SweepRecord]) -> Result<()> {
    let mut out = csv_writer(w);
    out.write_record(["lambda", "method", "seed", "auc"])
        .map_err(csv_err)?;
    for r in records {
        out.write_record([
            fmt_f64(r.lambda),
            r.method.to_string(),
            r.seed.to_string(),
            fmt_f64(r.auc),
        ])
        .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_sweep_records(text: &str) -> Result<Vec<SweepRecord>> {
    let (header, rows) = csv_rows(text)?;
    if header != ["lambda", "method", "seed", "auc"] {
        return Err(Error::Parse(format!(
            "sweep header must be lambda,method,seed,auc, found '{}'",
            header.join(",")
        )));
    }
    rows.iter()
        .enumerate()
        .map(|(i, rec)| {
            Ok(SweepRecord {
                lambda: parse_f64(&rec[0], &format!("row {i} lambda"))?,
                method: rec[1].parse()?,
                seed: parse_u64(&rec[2], &format!("row {i} seed"))?,
                auc: parse_f64(&rec[3], &format!("row {i} auc"))?,
                target_prior_estimate: None,
            })
        })
        .collect()
}

pub fn write_summary<W: Write>(w: W, rows: &[SummaryRow]) -> Result<()> {
    let mut out = csv_writer(w);
    out.write_record(["lambda", "method", "mean_auc", "sem", "n"])
        .map_err(csv_err)?;
    for r in rows {
        out.write_record([
            fmt_f64(r.lambda),
            r.method.to_string(),
            fmt_f64(r.mean_auc),
            fmt_f64(r.sem),
            r.n.to_string(),
        ])
        .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_prior_records<W: Write>(
    mut w: W,
    space: MetaLabelSpace,
    rows: &[PriorRecord],
) -> Result<()> {
    write_comment(&mut w, space)?;
    let mut out = csv_writer(w);
    let mut header: Vec<String> = ["lambda", "method", "seed", "batch"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend(meta_label_columns(space));
    out.write_record(&header).map_err(csv_err)?;
    for r in rows {
        let mut rec = vec![
            fmt_f64(r.lambda),
            r.method.to_string(),
            r.seed.to_string(),
            r.batch.to_string(),
        ];
        rec.extend(r.prior.probs().iter().map(|p| fmt_f64(*p)));
        out.write_record(&rec).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

/// `metric,value` rows; undefined per-group accuracies are left empty.
pub fn write_eval<W: Write>(
    w: W,
    space: MetaLabelSpace,
    auc: Option<f64>,
    groups: &GroupAccuracyReport,
) -> Result<()> {
    let mut out = csv_writer(w);
    out.write_record(["metric", "value"]).map_err(csv_err)?;
    if let Some(auc) = auc {
        out.write_record(["auc".to_string(), fmt_f64(auc)])
            .map_err(csv_err)?;
    }
    for (name, v) in [
        ("worst_group_accuracy", groups.worst),
        ("average_group_accuracy", groups.average),
        ("accuracy", groups.example_weighted),
    ] {
        out.write_record([name.to_string(), fmt_f64(v)])
            .map_err(csv_err)?;
    }
    for (col, (acc, count)) in meta_label_columns(space)
        .iter()
        .zip(groups.per_group.iter().zip(&groups.counts))
    {
        out.write_record([format!("accuracy_{col}"), acc.map(fmt_f64).unwrap_or_default()])
            .map_err(csv_err)?;
        out.write_record([format!("count_{col}"), count.to_string()])
            .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

/// Reads `metric,value` rows back into pairs; empty values become `None`.
pub fn read_eval(text: &str) -> Result<Vec<(String, Option<f64>)>> {
    let (_, rows) = csv_rows(text)?;
    rows.iter()
        .map(|rec| {
            let value = match rec.get(1).unwrap_or("") {
                "" => None,
                v => Some(parse_f64(v, &rec[0])?),
            };
            Ok((rec[0].to_string(), value))
        })
        .collect()
}

// ---- JSON artifacts ----

pub fn write_json<W: Write, T: Serialize>(mut w: W, value: &T) -> Result<()> {
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| Error::Parse(e.to_string()))?;
    writeln!(w)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(text: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| Error::Parse(format!("json: {e}")))
}

// ---- sweep config ----

const CONFIG_KEYS: &[&str] = &[
    "lambdas",
    "source_lambda",
    "adaptation_batch_sizes",
    "n_train",
    "n_test_per_target",
    "replicates",
    "calibration_enabled",
    "methods",
    "base_seed",
    "logit_scale",
    "source_prior",
    "dirichlet_alpha",
    "em_tolerance",
    "em_max_iterations",
    "record_priors",
    "train.learning_rate",
    "train.batch_size",
    "train.max_epochs",
    "train.ema_decay",
    "train.patience",
    "train.l2",
    "train.validation_fraction",
    "calibration.learning_rate",
    "calibration.max_epochs",
    "calibration.ema_decay",
    "calibration.patience",
    "calibration.holdout_fraction",
    "calibration.batch_size",
];

fn parse_list<T>(v: &str, f: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(f)
        .collect()
}

fn parse_bool(v: &str, key: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Parse(format!("{key}: '{v}' is not a boolean"))),
    }
}

fn source_prior_name(s: SourcePriorEstimate) -> &'static str {
    match s {
        SourcePriorEstimate::Count => "count",
        SourcePriorEstimate::ClassifierAverage => "classifier_average",
    }
}

/// Parses `key=value` lines over the defaults. Blank lines and `#` comments are
/// skipped; every unknown key is reported at once.
pub fn parse_sweep_config(text: &str) -> Result<SweepConfig> {
    let mut cfg = SweepConfig::default();
    let mut unknown = BTreeSet::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split_once('#').map_or(raw, |(a, _)| a).trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("line {}: expected key=value", lineno + 1)))?;
        let (key, v) = (key.trim(), value.trim());
        let ctx = |e: Error| e.context(format!("config line {}", lineno + 1));
        let apply = |cfg: &mut SweepConfig| -> Result<()> {
            let t: &mut TrainConfig = &mut cfg.train;
            let c: &mut CalibrationFitConfig = &mut cfg.calibration;
            match key {
                "lambdas" => cfg.lambdas = parse_list(v, |s| parse_f64(s, key))?,
                "source_lambda" => cfg.source_lambda = parse_f64(v, key)?,
                "adaptation_batch_sizes" => {
                    cfg.adaptation_batch_sizes = parse_list(v, |s| parse_usize(s, key))?
                }
                "n_train" => cfg.n_train = parse_usize(v, key)?,
                "n_test_per_target" => cfg.n_test_per_target = parse_usize(v, key)?,
                "replicates" => cfg.replicates = parse_usize(v, key)?,
                "calibration_enabled" => cfg.calibration_enabled = parse_bool(v, key)?,
                "methods" => cfg.methods = parse_list(v, MethodKind::parse)?,
                "base_seed" => cfg.base_seed = parse_u64(v, key)?,
                "logit_scale" => cfg.logit_scale = parse_f64(v, key)?,
                "source_prior" => {
                    cfg.source_prior = match v {
                        "count" => SourcePriorEstimate::Count,
                        "classifier_average" => SourcePriorEstimate::ClassifierAverage,
                        _ => return Err(Error::Parse(format!("source_prior: unknown value '{v}'"))),
                    }
                }
                "dirichlet_alpha" => cfg.dirichlet_alpha = parse_f64(v, key)?,
                "em_tolerance" => cfg.em_tolerance = parse_f64(v, key)?,
                "em_max_iterations" => cfg.em_max_iterations = parse_usize(v, key)?,
                "record_priors" => cfg.record_priors = parse_bool(v, key)?,
                "train.learning_rate" => t.learning_rate = parse_f64(v, key)?,
                "train.batch_size" => t.batch_size = parse_usize(v, key)?,
                "train.max_epochs" => t.max_epochs = parse_usize(v, key)?,
                "train.ema_decay" => t.ema_decay = parse_f64(v, key)?,
                "train.patience" => t.patience = parse_usize(v, key)?,
                "train.l2" => t.l2 = parse_f64(v, key)?,
                "train.validation_fraction" => t.validation_fraction = parse_f64(v, key)?,
                "calibration.learning_rate" => c.learning_rate = parse_f64(v, key)?,
                "calibration.max_epochs" => c.max_epochs = parse_usize(v, key)?,
                "calibration.ema_decay" => c.ema_decay = parse_f64(v, key)?,
                "calibration.patience" => c.patience = parse_usize(v, key)?,
                "calibration.holdout_fraction" => c.holdout_fraction = parse_f64(v, key)?,
                "calibration.batch_size" => c.batch_size = parse_usize(v, key)?,
                _ => unreachable!(),
            }
            Ok(())
        };
        if CONFIG_KEYS.contains(&key) {
            apply(&mut cfg).map_err(ctx)?;
        } else {
            unknown.insert(key.to_string());
        }
    }
    if !unknown.is_empty() {
        return Err(Error::Parse(format!(
            "unknown config keys: {}",
            unknown.into_iter().collect::<Vec<_>>().join(", ")
        )));
    }
    Ok(cfg)
}

/// Canonical text form; parsing it yields the same config.
pub fn format_sweep_config(cfg: &SweepConfig) -> String {
    let join_f = |v: &[f64]| v.iter().map(|x| fmt_f64(*x)).collect::<Vec<_>>().join(",");
    let join_u = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
    let t = &cfg.train;
    let c = &cfg.calibration;
    let lines = [
        ("lambdas", join_f(&cfg.lambdas)),
        ("source_lambda", fmt_f64(cfg.source_lambda)),
        ("adaptation_batch_sizes", join_u(&cfg.adaptation_batch_sizes)),
        ("n_train", cfg.n_train.to_string()),
        ("n_test_per_target", cfg.n_test_per_target.to_string()),
        ("replicates", cfg.replicates.to_string()),
        ("calibration_enabled", cfg.calibration_enabled.to_string()),
        (
            "methods",
            cfg.methods.iter().map(|m| m.name()).collect::<Vec<_>>().join(","),
        ),
        ("base_seed", cfg.base_seed.to_string()),
        ("logit_scale", fmt_f64(cfg.logit_scale)),
        ("source_prior", source_prior_name(cfg.source_prior).to_string()),
        ("dirichlet_alpha", fmt_f64(cfg.dirichlet_alpha)),
        ("em_tolerance", fmt_f64(cfg.em_tolerance)),
        ("em_max_iterations", cfg.em_max_iterations.to_string()),
        ("record_priors", cfg.record_priors.to_string()),
        ("train.learning_rate", fmt_f64(t.learning_rate)),
        ("train.batch_size", t.batch_size.to_string()),
        ("train.max_epochs", t.max_epochs.to_string()),
        ("train.ema_decay", fmt_f64(t.ema_decay)),
        ("train.patience", t.patience.to_string()),
        ("train.l2", fmt_f64(t.l2)),
        ("train.validation_fraction", fmt_f64(t.validation_fraction)),
        ("calibration.learning_rate", fmt_f64(c.learning_rate)),
        ("calibration.max_epochs", c.max_epochs.to_string()),
        ("calibration.ema_decay", fmt_f64(c.ema_decay)),
        ("calibration.patience", c.patience.to_string()),
        ("calibration.holdout_fraction", fmt_f64(c.holdout_fraction)),
        ("calibration.batch_size", c.batch_size.to_string()),
    ];
    debug_assert_eq!(lines.len(), CONFIG_KEYS.len());
    lines
        .iter()
        .map(|(k, v)| format!("{k}={v}\n"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::Method;

    fn s22() -> MetaLabelSpace {
        MetaLabelSpace::new(2, 2).unwrap()
    }

    fn to_string(f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> String {
        let mut buf = Vec::new();
        f(&mut buf).unwrap();
        String::from_utf8(buf).unwrap()
    }

    #[test]
    fn float_formatting_round_trips() {
        for v in [0.1, 1.0 / 3.0, 1e-12, -2.5e300, 0.0, 123456789.125] {
            assert_eq!(fmt_f64(v).parse::<f64>().unwrap().to_bits(), v.to_bits());
        }
    }

    #[test]
    fn space_comment_round_trip() {
        let s = MetaLabelSpace::new(3, 2).unwrap();
        assert_eq!(parse_space_comment(&space_comment(s)).unwrap(), s);
        assert!(parse_space_comment("# C=2").is_err());
        assert!(parse_space_comment("C=2 K=2").is_err());
    }

    #[test]
    fn dataset_round_trip() {
        let features = Matrix::from_rows(&[vec![0.1, -2.0], vec![1.0 / 3.0, 4e-9]]).unwrap();
        let data = LabeledDataset::new(s22(), features, vec![0, 1], vec![1, 0]).unwrap();
        let text = to_string(|b| write_dataset(b, &data));
        assert!(text.starts_with("# C=2 K=2\nx0,x1,y,z\n"));
        let back = read_dataset(&text, None).unwrap();
        assert_eq!(back.features, data.features);
        assert_eq!((back.y, back.z), (data.y.clone(), data.z.clone()));

        // the comment line is optional
        let bare = text.split_once('\n').unwrap().1;
        assert_eq!(read_dataset(bare, None).unwrap().space, s22());
        assert_eq!(read_features(&text).unwrap(), data.features);
    }

    #[test]
    fn prior_and_logits_round_trip() {
        let p = JointPrior::new(s22(), vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        let text = to_string(|b| write_prior(b, &p));
        assert_eq!(read_prior(&text, Some(s22())).unwrap(), p);

        let l = LogitsMatrix::from_rows(s22(), &[vec![0.5, -1.0, 2.0, 0.0]]).unwrap();
        let text = to_string(|b| write_logits(b, &l));
        assert_eq!(read_logits(&text, None).unwrap(), l);
    }

    #[test]
    fn wrong_column_count_reports_both() {
        let text = "# C=2 K=2\ny0z0,y0z1,y1z0\n1,2,3\n";
        let err = read_logits(text, None).unwrap_err().to_string();
        assert!(err.contains("expected 4") && err.contains("found 3"), "{err}");
        let mismatch = read_logits(text, Some(MetaLabelSpace::new(3, 1).unwrap())).unwrap_err();
        assert!(mismatch.to_string().contains("expected C=3 K=1"));
    }

    #[test]
    fn sweep_records_round_trip() {
        let recs = vec![SweepRecord {
            lambda: 0.05,
            method: Method::Ttlsa(64),
            seed: 3,
            auc: 0.912_345_678_901_234_5,
            target_prior_estimate: None,
        }];
        let text = to_string(|b| write_sweep_records(b, &recs));
        assert_eq!(text.lines().next().unwrap(), "lambda,method,seed,auc");
        assert_eq!(read_sweep_records(&text).unwrap(), recs);
    }

    #[test]
    fn config_round_trip_and_unknown_keys() {
        let cfg = SweepConfig {
            lambdas: vec![0.0, 0.5],
            methods: vec![MethodKind::La, MethodKind::Ttlsa],
            logit_scale: 3.0,
            ..SweepConfig::default()
        };
        let text = format_sweep_config(&cfg);
        assert_eq!(parse_sweep_config(&text).unwrap(), cfg);

        let err = parse_sweep_config("n_train=10\nfoo=1\nbar=2 # comment\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("bar, foo"), "{err}");

        let empty = parse_sweep_config("methods=\n").unwrap();
        assert!(empty.methods.is_empty());
        assert!(empty.validate().is_err());
    }

    #[test]
    fn eval_csv_has_empty_undefined_groups() {
        let report = crate::metrics::group_accuracy(&[1, 1], &[1, 1], &[0, 1], s22()).unwrap();
        let text = to_string(|b| write_eval(b, s22(), None, &report));
        let rows = read_eval(&text).unwrap();
        let get = |k: &str| rows.iter().find(|(n, _)| n == k).unwrap().1;
        assert_eq!(get("worst_group_accuracy"), Some(1.0));
        assert_eq!(get("accuracy_y0z0"), None);
        assert_eq!(get("count_y1z1"), Some(1.0));
    }
}
