//! File formats: pose-log readers (CSV and 4×4-matrix logs), experiment
//! result and diagnostic-trace writers, and TOML config loading.
//!
//! All positions are handled in centimeters internally; readers honor an
//! optional leading `# units=m` or `# units=cm` comment (default `cm`) and
//! convert on ingest. Writers format floats with Rust's `Display`, which
//! round-trips `f64` exactly, so identical results produce identical bytes.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use thiserror::Error;

use crate::harness::{ExperimentConfig, ExperimentResults, HarnessError, RunRecord, Variant};
use crate::models::{POSE_BIAS_DIM, POSE_DIM};
use crate::stats::{StatsError, Versor};

/// Errors raised while reading or writing experiment files.
#[derive(Debug, Error)]
pub enum IoError {
    #[error("failed to access {path}: {source}")]
    File {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },
    #[error("invalid config {path}: {message}")]
    Config { path: String, message: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

fn file_err(path: &Path, source: std::io::Error) -> IoError {
    IoError::File {
        path: path.display().to_string(),
        source,
    }
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> IoError {
    IoError::Parse {
        path: path.display().to_string(),
        line,
        message: message.into(),
    }
}

// ─── pose logs ───────────────────────────────────────────────────────────────

/// A parsed pose log: frame indices plus 7-dimensional observation vectors
/// `[px, py, pz, qw, qx, qy, qz]` with positions in centimeters and unit
/// attitude versors.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseLog {
    pub frames: Vec<usize>,
    pub measurements: Vec<DVector<f64>>,
}

const POSE_HEADER: &str = "frame,px,py,pz,qw,qx,qy,qz";
/// Largest tolerated deviation of a logged quaternion norm from one.
const QUAT_NORM_TOL: f64 = 1e-3;
/// Largest tolerated Frobenius deviation of `RᵀR` from the identity.
const ROTATION_TOL: f64 = 1e-3;

/// Parses the leading comment block for a `units=` declaration and returns
/// the factor that converts logged positions to centimeters.
fn units_scale(lines: &[&str], path: &Path) -> Result<f64, IoError> {
    for (idx, raw) in lines.iter().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let Some(comment) = line.strip_prefix('#') else {
            break;
        };
        let comment = comment.trim();
        if let Some(units) = comment.strip_prefix("units=") {
            return match units.trim() {
                "cm" => Ok(1.0),
                "m" => Ok(100.0),
                other => Err(parse_err(
                    path,
                    idx + 1,
                    format!("unsupported units '{other}'"),
                )),
            };
        }
    }
    Ok(1.0)
}

fn parse_float(field: &str, path: &Path, line: usize) -> Result<f64, IoError> {
    field.trim().parse::<f64>().map_err(|_| {
        parse_err(
            path,
            line,
            format!("expected a number, got '{}'", field.trim()),
        )
    })
}

/// Reads a CSV pose log with header `frame,px,py,pz,qw,qx,qy,qz`. Frames must
/// be strictly increasing; quaternions must have unit norm within `1e-3` and
/// are renormalized. Comment lines start with `#`; a leading `# units=m|cm`
/// selects the position unit (default centimeters).
pub fn read_pose_log(path: &Path) -> Result<PoseLog, IoError> {
    let text = fs::read_to_string(path).map_err(|e| file_err(path, e))?;
    let lines: Vec<&str> = text.lines().collect();
    let scale = units_scale(&lines, path)?;

    let mut frames = Vec::new();
    let mut measurements = Vec::new();
    let mut header_seen = false;
    for (idx, raw) in lines.iter().enumerate() {
        let line = raw.trim();
        let lineno = idx + 1;
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if !header_seen {
            let normalized: Vec<&str> = line.split(',').map(str::trim).collect();
            if normalized.join(",") != POSE_HEADER {
                return Err(parse_err(
                    path,
                    lineno,
                    format!("expected header '{POSE_HEADER}'"),
                ));
            }
            header_seen = true;
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 8 {
            return Err(parse_err(
                path,
                lineno,
                format!("expected 8 fields, got {}", fields.len()),
            ));
        }
        let frame: usize = fields[0].trim().parse().map_err(|_| {
            parse_err(
                path,
                lineno,
                format!("bad frame index '{}'", fields[0].trim()),
            )
        })?;
        if let Some(prev) = frames.last() {
            if frame <= *prev {
                return Err(parse_err(
                    path,
                    lineno,
                    format!("frame indices must be strictly increasing ({prev} then {frame})"),
                ));
            }
        }
        let mut vals = [0.0; 7];
        for (k, f) in fields[1..].iter().enumerate() {
            vals[k] = parse_float(f, path, lineno)?;
        }
        let q = Versor::normalize_within(vals[3], vals[4], vals[5], vals[6], QUAT_NORM_TOL)
            .map_err(|e| parse_err(path, lineno, e.to_string()))?;
        let mut y = DVector::zeros(7);
        for k in 0..3 {
            y[k] = vals[k] * scale;
        }
        q.write_coords(&mut y.as_mut_slice()[3..7]);
        frames.push(frame);
        measurements.push(y);
    }
    if !header_seen {
        return Err(parse_err(
            path,
            lines.len(),
            format!("missing header '{POSE_HEADER}'"),
        ));
    }
    Ok(PoseLog {
        frames,
        measurements,
    })
}

/// Converts a row-major rotation matrix to a versor using the numerically
/// stable branch on the largest of the trace and the diagonal entries.
fn rotation_to_versor(m: &[f64; 16]) -> Result<Versor, StatsError> {
    let (m00, m01, m02) = (m[0], m[1], m[2]);
    let (m10, m11, m12) = (m[4], m[5], m[6]);
    let (m20, m21, m22) = (m[8], m[9], m[10]);
    let tr = m00 + m11 + m22;
    let (w, x, y, z) = if tr >= m00 && tr >= m11 && tr >= m22 {
        let r = (1.0 + tr).sqrt();
        let s = 0.5 / r;
        (0.5 * r, (m21 - m12) * s, (m02 - m20) * s, (m10 - m01) * s)
    } else if m00 >= m11 && m00 >= m22 {
        let r = (1.0 + m00 - m11 - m22).sqrt();
        let s = 0.5 / r;
        ((m21 - m12) * s, 0.5 * r, (m01 + m10) * s, (m02 + m20) * s)
    } else if m11 >= m22 {
        let r = (1.0 - m00 + m11 - m22).sqrt();
        let s = 0.5 / r;
        ((m02 - m20) * s, (m01 + m10) * s, 0.5 * r, (m12 + m21) * s)
    } else {
        let r = (1.0 - m00 - m11 + m22).sqrt();
        let s = 0.5 / r;
        ((m10 - m01) * s, (m02 + m20) * s, (m12 + m21) * s, 0.5 * r)
    };
    Versor::normalize_within(w, x, y, z, 1e-2)
}

fn check_rotation(m: &[f64; 16], path: &Path, lineno: usize) -> Result<(), IoError> {
    let r = [[m[0], m[1], m[2]], [m[4], m[5], m[6]], [m[8], m[9], m[10]]];
    let mut frob = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            let mut dot = 0.0;
            for row in &r {
                dot += row[i] * row[j];
            }
            let target = if i == j { 1.0 } else { 0.0 };
            frob += (dot - target) * (dot - target);
        }
    }
    if frob.sqrt() > ROTATION_TOL {
        return Err(parse_err(
            path,
            lineno,
            format!(
                "rotation block is not orthonormal (deviation {:.3e})",
                frob.sqrt()
            ),
        ));
    }
    let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
        - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
        + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
    if det <= 0.0 {
        return Err(parse_err(
            path,
            lineno,
            "rotation block is a reflection (determinant <= 0)",
        ));
    }
    for (k, expected) in [(12, 0.0), (13, 0.0), (14, 0.0), (15, 1.0)] {
        if (m[k] - expected).abs() > ROTATION_TOL {
            return Err(parse_err(path, lineno, "bottom row must be 0 0 0 1"));
        }
    }
    Ok(())
}

/// Reads a pose log stored as one 4×4 homogeneous transform per line: sixteen
/// whitespace-separated reals, row-major. The rotation block must be
/// orthonormal (Frobenius deviation at most `1e-3`) with positive
/// determinant; the bottom row must be `0 0 0 1`. Frames are numbered by
/// matrix order; reconstructed versors start with a nonnegative scalar part
/// and stay sign-continuous between frames. The same `# units=` comment
/// convention as the CSV format applies.
pub fn read_mat4_log(path: &Path) -> Result<PoseLog, IoError> {
    let text = fs::read_to_string(path).map_err(|e| file_err(path, e))?;
    let lines: Vec<&str> = text.lines().collect();
    let scale = units_scale(&lines, path)?;

    let mut frames = Vec::new();
    let mut measurements: Vec<DVector<f64>> = Vec::new();
    let mut previous: Option<Versor> = None;
    for (idx, raw) in lines.iter().enumerate() {
        let line = raw.trim();
        let lineno = idx + 1;
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 16 {
            return Err(parse_err(
                path,
                lineno,
                format!("expected 16 matrix entries, got {}", fields.len()),
            ));
        }
        let mut m = [0.0; 16];
        for (k, f) in fields.iter().enumerate() {
            m[k] = parse_float(f, path, lineno)?;
        }
        check_rotation(&m, path, lineno)?;
        let mut q = rotation_to_versor(&m).map_err(|e| parse_err(path, lineno, e.to_string()))?;
        q = match &previous {
            Some(p) => q.canonicalized_against(*p),
            None => {
                if q.w() < 0.0 {
                    q.canonicalized_against(Versor::IDENTITY)
                } else {
                    q
                }
            }
        };
        previous = Some(q);
        let mut y = DVector::zeros(7);
        y[0] = m[3] * scale;
        y[1] = m[7] * scale;
        y[2] = m[11] * scale;
        q.write_coords(&mut y.as_mut_slice()[3..7]);
        frames.push(measurements.len());
        measurements.push(y);
    }
    Ok(PoseLog {
        frames,
        measurements,
    })
}

/// Writes states as a CSV pose log (centimeter units), taking the position
/// and attitude coordinates from the given ranges. Frames are numbered by
/// index. The output reads back with [`read_pose_log`] bit-exactly.
pub fn write_pose_log(
    path: &Path,
    states: &[DVector<f64>],
    pos: std::ops::Range<usize>,
    att: std::ops::Range<usize>,
) -> Result<(), IoError> {
    let mut out = String::from("# units=cm\n");
    out.push_str(POSE_HEADER);
    out.push('\n');
    for (frame, s) in states.iter().enumerate() {
        out.push_str(&frame.to_string());
        for k in pos.clone().chain(att.clone()) {
            out.push(',');
            out.push_str(&s[k].to_string());
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| file_err(path, e))
}

// ─── coordinate names ────────────────────────────────────────────────────────

const POSE_COORDS: [&str; POSE_DIM] = [
    "vel_x", "vel_y", "vel_z", "pos_x", "pos_y", "pos_z", "angvel_w", "angvel_x", "angvel_y",
    "angvel_z", "att_w", "att_x", "att_y", "att_z",
];
const BIAS_COORDS: [&str; POSE_BIAS_DIM - POSE_DIM] = [
    "pos_bias_x",
    "pos_bias_y",
    "pos_bias_z",
    "att_bias_w",
    "att_bias_x",
    "att_bias_y",
    "att_bias_z",
];

/// Human-readable names for each state coordinate of the pose layouts.
pub fn coordinate_names(dim: usize) -> Option<Vec<&'static str>> {
    match dim {
        POSE_DIM => Some(POSE_COORDS.to_vec()),
        POSE_BIAS_DIM => Some(
            POSE_COORDS
                .iter()
                .chain(BIAS_COORDS.iter())
                .copied()
                .collect(),
        ),
        _ => None,
    }
}

// ─── results and traces ──────────────────────────────────────────────────────

fn push_record<W: std::io::Write>(
    writer: &mut csv::Writer<W>,
    fields: &[&dyn Display],
) -> Result<(), IoError> {
    let rendered: Vec<String> = fields.iter().map(|f| f.to_string()).collect();
    writer.write_record(&rendered)?;
    Ok(())
}

/// Writes the aggregate comparison table: one row per variant, ensemble size,
/// and metric, with columns `variant, ensemble_size, metric, value,
/// improvement_pct`. Improvement is relative to the measurement-only rows —
/// `(base - value) / base` for RMSE metrics and the same ratio on `1 - cosine`
/// for directional metrics — and zero for the baseline itself (or when no
/// baseline was run). Variants with no successful runs produce NaN values.
pub fn write_results(path: &Path, results: &ExperimentResults) -> Result<(), IoError> {
    let base = results.baseline().and_then(|v| v.summary(&results.truth));
    let mut writer = csv::Writer::from_path(path)?;
    push_record(
        &mut writer,
        &[
            &"variant",
            &"ensemble_size",
            &"metric",
            &"value",
            &"improvement_pct",
        ],
    )?;
    for v in &results.variants {
        let summary = v.summary(&results.truth);
        let metrics: [(&str, Option<f64>, bool); 4] = match &summary {
            Some(s) => [
                ("pos_rmse", Some(s.pos_rmse.mean), false),
                ("vel_rmse", Some(s.vel_rmse.mean), false),
                ("att_cos", Some(s.att_cos.mean), true),
                ("angvel_cos", Some(s.angvel_cos.mean), true),
            ],
            None => [
                ("pos_rmse", None, false),
                ("vel_rmse", None, false),
                ("att_cos", None, true),
                ("angvel_cos", None, true),
            ],
        };
        for (name, value, directional) in metrics {
            let value = value.unwrap_or(f64::NAN);
            let improvement = match (&base, v.variant) {
                (Some(b), var) if var != Variant::MeasurementOnly && value.is_finite() => {
                    let (base_val, this_val) = if directional {
                        let b_val = match name {
                            "att_cos" => b.att_cos.mean,
                            _ => b.angvel_cos.mean,
                        };
                        (1.0 - b_val, 1.0 - value)
                    } else {
                        let b_val = match name {
                            "pos_rmse" => b.pos_rmse.mean,
                            _ => b.vel_rmse.mean,
                        };
                        (b_val, value)
                    };
                    if base_val.abs() > 0.0 {
                        100.0 * (base_val - this_val) / base_val
                    } else {
                        0.0
                    }
                }
                _ => 0.0,
            };
            push_record(
                &mut writer,
                &[
                    &v.variant.label(),
                    &v.ensemble_size,
                    &name,
                    &value,
                    &improvement,
                ],
            )?;
        }
    }
    writer.flush().map_err(|e| file_err(path, e))?;
    Ok(())
}

/// The reference trajectory padded with the injected bias values so bias-block
/// estimates have a truth to be compared against.
fn extended_truth(results: &ExperimentResults, dim: usize) -> Vec<DVector<f64>> {
    results
        .truth
        .iter()
        .map(|t| {
            let mut ext = DVector::zeros(dim);
            ext.rows_mut(0, t.len()).copy_from(t);
            if dim > t.len() {
                let bias = results.config.bias.as_ref();
                let pos = bias.map_or([0.0; 3], |b| b.pos);
                let att = results.config.bias_versor().unwrap_or(Versor::IDENTITY);
                for k in 0..3 {
                    ext[t.len() + k] = pos[k];
                }
                att.write_coords(&mut ext.as_mut_slice()[t.len() + 3..t.len() + 7]);
            }
            ext
        })
        .collect()
}

/// Writes one calibration-trace CSV per variant and ensemble size into `dir`
/// and returns the created paths. Each row holds one frame and coordinate:
/// the ensemble-predicted three-sigma band (averaged over runs), the realized
/// three-sigma spread of the estimation errors across runs, and each
/// successful run's signed error.
pub fn write_traces(dir: &Path, results: &ExperimentResults) -> Result<Vec<PathBuf>, IoError> {
    let mut written = Vec::new();
    for v in &results.variants {
        let ok: Vec<(usize, &RunRecord)> = v
            .records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.failed.is_none())
            .collect();
        let Some((_, first)) = ok.first() else {
            continue;
        };
        let dim = first.mean_est[0].len();
        let frames = first.mean_est.len();
        let names = coordinate_names(dim).unwrap_or_else(|| (0..dim).map(|_| "coord").collect());
        let truth = extended_truth(results, dim);
        let path = dir.join(format!(
            "traces_{}_n{}.csv",
            v.variant.label(),
            v.ensemble_size
        ));
        let mut writer = csv::Writer::from_path(&path)?;
        let mut header: Vec<String> = vec![
            "frame".into(),
            "coordinate".into(),
            "predicted_3sigma".into(),
            "actual_3sigma_error".into(),
        ];
        for (run, _) in &ok {
            header.push(format!("err_run{run}"));
        }
        writer.write_record(&header)?;
        #[allow(clippy::needless_range_loop)] // frame indexes truth and every run in parallel
        for frame in 0..frames {
            for coord in 0..dim {
                let errors: Vec<f64> = ok
                    .iter()
                    .map(|(_, r)| r.mean_est[frame][coord] - truth[frame][coord])
                    .collect();
                let predicted = 3.0 * ok.iter().map(|(_, r)| r.ens_std[frame][coord]).sum::<f64>()
                    / ok.len() as f64;
                let mean_err = errors.iter().sum::<f64>() / errors.len() as f64;
                let actual = if errors.len() < 2 {
                    0.0
                } else {
                    let var = errors
                        .iter()
                        .map(|e| (e - mean_err) * (e - mean_err))
                        .sum::<f64>()
                        / (errors.len() - 1) as f64;
                    3.0 * var.sqrt()
                };
                let mut row: Vec<String> = vec![
                    frame.to_string(),
                    names[coord].to_string(),
                    predicted.to_string(),
                    actual.to_string(),
                ];
                for e in &errors {
                    row.push(e.to_string());
                }
                writer.write_record(&row)?;
            }
        }
        writer.flush().map_err(|e| file_err(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

/// Writes one filtering run as CSV: the frame index, then the posterior mean
/// of every state coordinate, then its ensemble spread.
pub fn write_filtered(path: &Path, record: &RunRecord) -> Result<(), IoError> {
    if let Some(reason) = &record.failed {
        return Err(IoError::Config {
            path: path.display().to_string(),
            message: format!("cannot write a failed run: {reason}"),
        });
    }
    let dim = record.mean_est.first().map_or(0, |m| m.len());
    let names = coordinate_names(dim).unwrap_or_else(|| (0..dim).map(|_| "coord").collect());
    let mut writer = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = vec!["frame".into()];
    header.extend(names.iter().map(|n| format!("mean_{n}")));
    header.extend(names.iter().map(|n| format!("std_{n}")));
    writer.write_record(&header)?;
    for (frame, (mean, std)) in record.mean_est.iter().zip(&record.ens_std).enumerate() {
        let mut row: Vec<String> = vec![frame.to_string()];
        row.extend(mean.iter().map(|v| v.to_string()));
        row.extend(std.iter().map(|v| v.to_string()));
        writer.write_record(&row)?;
    }
    writer.flush().map_err(|e| file_err(path, e))?;
    Ok(())
}

// ─── config ──────────────────────────────────────────────────────────────────

/// Loads and validates an experiment config from a TOML file.
pub fn load_config(path: &Path) -> Result<ExperimentConfig, IoError> {
    let text = fs::read_to_string(path).map_err(|e| file_err(path, e))?;
    let config: ExperimentConfig = toml::from_str(&text).map_err(|e| IoError::Config {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    config.validate().map_err(|e| IoError::Config {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    Ok(config)
}
