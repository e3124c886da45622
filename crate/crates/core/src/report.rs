//! CSV, JSON summary and plot-data output of a sweep.

use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::chain::JointType;
use crate::compensator::SchemeConfig;
use crate::se3::Pose;
use crate::trajectory::SweepRow;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("cannot write {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("csv output: {0}")]
    Csv(#[from] csv::Error),
    #[error("nothing to report")]
    Empty,
}

/// Fixed 17-significant-digit float text.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

const POSE_FIELDS: [&str; 6] = ["x", "y", "z", "rx", "ry", "rz"];

fn pose_cells(p: Option<&Pose>) -> Vec<String> {
    match p {
        Some(p) => p.position().iter().chain(p.orientation().iter()).map(|&v| fmt_f64(v)).collect(),
        None => vec![fmt_f64(f64::NAN); 6],
    }
}

/// Column names; `layout` lists the actuator joint types of each chain.
pub fn csv_header(layout: &[Vec<JointType>]) -> Vec<String> {
    let mut h = vec!["phi".to_string()];
    for prefix in ["target", "loaded", "adjusted"] {
        h.extend(POSE_FIELDS.iter().map(|f| format!("{prefix}_{f}")));
    }
    for prefix in ["delta_rho", "tau"] {
        for (c, joints) in layout.iter().enumerate() {
            h.extend((0..joints.len()).map(|j| format!("{prefix}_{c}_{j}")));
        }
    }
    h.extend(["uncompensated_error", "residual", "iterations", "status"].map(String::from));
    h
}

fn padded(values: &[f64], n: usize) -> Vec<String> {
    (0..n).map(|i| fmt_f64(values.get(i).copied().unwrap_or(f64::NAN))).collect()
}

pub fn write_csv<W: std::io::Write>(rows: &[SweepRow], layout: &[Vec<JointType>], out: W) -> Result<(), ReportError> {
    let n: usize = layout.iter().map(Vec::len).sum();
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    w.write_record(csv_header(layout))?;
    for r in rows {
        let mut rec = vec![fmt_f64(r.phi)];
        rec.extend(pose_cells(Some(&r.target)));
        rec.extend(pose_cells(r.uncompensated_loaded.as_ref()));
        rec.extend(pose_cells(r.adjusted_target.as_ref()));
        rec.extend(padded(&r.delta_rho, n));
        rec.extend(padded(&r.tau, n));
        rec.push(fmt_f64(r.uncompensated_error));
        rec.push(fmt_f64(r.residual));
        rec.push(r.iterations.to_string());
        rec.push(r.status.label());
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| ReportError::Csv(e.into()))?;
    Ok(())
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct IterationStats {
    pub min: usize,
    pub max: usize,
    pub mean: f64,
}

/// Largest actuator coordinate change and load over converged rows, for one
/// joint type: m and N for prismatic joints, rad and N m for revolute ones.
#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct ActuatorStats {
    pub count: usize,
    pub max_abs_delta_rho: f64,
    pub max_abs_tau: f64,
}

#[derive(Clone, Debug, Serialize, PartialEq)]
pub struct Summary {
    pub points: usize,
    pub converged: usize,
    pub failed: usize,
    pub scheme: String,
    pub alpha: f64,
    pub tol_m: f64,
    pub max_uncompensated_error: f64,
    pub mean_uncompensated_error: f64,
    pub max_residual: f64,
    pub prismatic_actuators: ActuatorStats,
    pub revolute_actuators: ActuatorStats,
    pub iterations: IterationStats,
}

fn max_of(it: impl Iterator<Item = f64>) -> f64 {
    it.fold(f64::NAN, f64::max)
}

fn actuator_stats(ok: &[&SweepRow], kinds: &[JointType], kind: JointType) -> ActuatorStats {
    let cols: Vec<usize> = (0..kinds.len()).filter(|&j| kinds[j] == kind).collect();
    let max_abs = |v: &[f64]| cols.iter().filter_map(|&j| v.get(j)).fold(0.0f64, |m, x| m.max(x.abs()));
    ActuatorStats {
        count: cols.len(),
        max_abs_delta_rho: ok.iter().map(|r| max_abs(&r.delta_rho)).fold(0.0, f64::max),
        max_abs_tau: ok.iter().map(|r| max_abs(&r.tau)).fold(0.0, f64::max),
    }
}

pub fn summarize(rows: &[SweepRow], layout: &[Vec<JointType>], scheme: &SchemeConfig) -> Summary {
    let ok: Vec<&SweepRow> = rows.iter().filter(|r| r.status.is_ok()).collect();
    let kinds: Vec<JointType> = layout.iter().flatten().copied().collect();
    let errors: Vec<f64> = rows.iter().map(|r| r.uncompensated_error).filter(|e| e.is_finite()).collect();
    let iters: Vec<usize> = ok.iter().map(|r| r.iterations).collect();
    Summary {
        points: rows.len(),
        converged: ok.len(),
        failed: rows.len() - ok.len(),
        scheme: scheme.scheme.label().into(),
        alpha: scheme.alpha,
        tol_m: scheme.tol,
        max_uncompensated_error: max_of(errors.iter().copied()),
        mean_uncompensated_error: if errors.is_empty() { f64::NAN } else { errors.iter().sum::<f64>() / errors.len() as f64 },
        max_residual: max_of(rows.iter().map(|r| r.residual).filter(|r| r.is_finite())),
        prismatic_actuators: actuator_stats(&ok, &kinds, JointType::Prismatic),
        revolute_actuators: actuator_stats(&ok, &kinds, JointType::Revolute),
        iterations: IterationStats {
            min: iters.iter().copied().min().unwrap_or(0),
            max: iters.iter().copied().max().unwrap_or(0),
            mean: if iters.is_empty() { 0.0 } else { iters.iter().sum::<usize>() as f64 / iters.len() as f64 },
        },
    }
}

/// The five plot paths: target, chain-error shift, load shift, combined,
/// adjusted.
pub const CURVES: [&str; 5] = [
    "curve_1_target",
    "curve_2_chain_errors",
    "curve_3_load",
    "curve_4_combined",
    "curve_5_adjusted",
];

fn curve_pose(r: &SweepRow, k: usize) -> Option<&Pose> {
    match k {
        0 => Some(&r.target),
        1 => r.eps_shifted.as_ref(),
        2 => r.load_shifted.as_ref(),
        3 => r.uncompensated_loaded.as_ref(),
        _ => r.adjusted_target.as_ref(),
    }
}

pub fn write_curve<W: std::io::Write>(rows: &[SweepRow], k: usize, out: W) -> Result<(), ReportError> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    let mut header = vec!["phi".to_string()];
    header.extend(POSE_FIELDS.iter().map(|s| s.to_string()));
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![fmt_f64(r.phi)];
        rec.extend(pose_cells(curve_pose(r, k)));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| ReportError::Csv(e.into()))?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct ReportFiles {
    pub csv: PathBuf,
    pub summary: PathBuf,
    pub curves: Vec<PathBuf>,
}

fn create(path: &Path) -> Result<std::fs::File, ReportError> {
    std::fs::File::create(path).map_err(|source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes the sweep CSV, `summary` JSON and, if `curves`, one file per plot
/// path into `dir`.
pub fn emit_report(
    rows: &[SweepRow],
    layout: &[Vec<JointType>],
    scheme: &SchemeConfig,
    dir: &Path,
    csv_name: &str,
    summary_name: &str,
    curves: bool,
) -> Result<ReportFiles, ReportError> {
    if rows.is_empty() {
        return Err(ReportError::Empty);
    }
    std::fs::create_dir_all(dir).map_err(|source| ReportError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let csv_path = dir.join(csv_name);
    write_csv(rows, layout, create(&csv_path)?)?;
    let summary_path = dir.join(summary_name);
    let text = serde_json::to_string_pretty(&summarize(rows, layout, scheme)).expect("summary serializes") + "\n";
    std::fs::write(&summary_path, text).map_err(|source| ReportError::Io {
        path: summary_path.clone(),
        source,
    })?;
    let mut curve_paths = Vec::new();
    if curves {
        for (k, name) in CURVES.iter().enumerate() {
            let p = dir.join(format!("{name}.csv"));
            write_curve(rows, k, create(&p)?)?;
            curve_paths.push(p);
        }
    }
    Ok(ReportFiles {
        csv: csv_path,
        summary: summary_path,
        curves: curve_paths,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::RowStatus;
    use nalgebra::Vector3;

    fn row(phi: f64, err: f64) -> SweepRow {
        let t = Pose::new(Vector3::new(0.1, -1.0 / 3.0, 2e-17), Vector3::new(1e-5, 0.0, -0.3)).unwrap();
        SweepRow {
            phi,
            target: t,
            eps_shifted: Some(t),
            load_shifted: Some(t),
            uncompensated_loaded: Some(t),
            adjusted_target: None,
            delta_rho: vec![1e-4, -std::f64::consts::PI],
            tau: vec![215.0, -0.1],
            uncompensated_error: err,
            residual: 3e-10,
            iterations: 7,
            status: RowStatus::Converged,
        }
    }

    fn layout() -> Vec<Vec<JointType>> {
        vec![vec![JointType::Prismatic, JointType::Revolute]]
    }

    #[test]
    fn one_row_gives_header_plus_line() {
        let mut buf = Vec::new();
        write_csv(&[row(0.0, 1e-4)], &layout(), &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.lines().next().unwrap().ends_with("uncompensated_error,residual,iterations,status"));
    }

    #[test]
    fn floats_round_trip_exactly() {
        let r = row(1.234567890123456789, 2.0 / 3.0);
        let mut buf = Vec::new();
        write_csv(&[r.clone()], &layout(), &mut buf).unwrap();
        let mut rd = csv::Reader::from_reader(buf.as_slice());
        let rec = rd.records().next().unwrap().unwrap();
        let v: Vec<f64> = rec.iter().take(7).map(|s| s.parse().unwrap()).collect();
        assert_eq!(v[0].to_bits(), r.phi.to_bits());
        assert_eq!(v[2].to_bits(), r.target.position().y.to_bits());
        assert_eq!(v[3].to_bits(), r.target.position().z.to_bits());
        assert_eq!(v[6].to_bits(), r.target.orientation().z.to_bits());
        let e: f64 = rec[rec.len() - 4].parse().unwrap();
        assert_eq!(e.to_bits(), (2.0f64 / 3.0).to_bits());
    }

    #[test]
    fn summary_max_is_the_row_max() {
        let rows = vec![row(0.0, 1e-4), row(1.0, 7e-4), row(2.0, 3e-4)];
        let s = summarize(&rows, &layout(), &SchemeConfig::default());
        assert_eq!(s.max_uncompensated_error, 7e-4);
        assert_eq!(s.prismatic_actuators.max_abs_tau, 215.0);
        assert_eq!(s.revolute_actuators.max_abs_delta_rho, std::f64::consts::PI);
        assert_eq!(s.points, 3);
        assert_eq!(s.iterations.max, 7);
    }
}
