//! Diagnostics: MSD, disagreement, steady-state averages, test error,
//! scaling fits and CSV emission.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use thiserror::Error;

use crate::risks::Sample;
use crate::topology::PerronVector;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("record has no rows to form a steady-state window")]
    EmptyWindow,
    #[error("window fraction must lie in (0, 1], got {0}")]
    InvalidWindow(f64),
    #[error(
        "transient not settled: window mean {window_mean:e} differs from last-half mean {half_mean:e} by more than 5%"
    )]
    TransientNotSettled { window_mean: f64, half_mean: f64 },
    #[error("log-log fit needs positive values, got {0}")]
    NonPositiveValue(f64),
    #[error("log-log fit needs at least 3 points, got {0}")]
    TooFewPoints(usize),
    #[error("records have different lengths")]
    RaggedRecords,
}

/// Weighted centroid `w_c = sum_k p_k w_k` and disagreement
/// `sum_k ||w_k - w_c||^2`.
pub fn centroid_and_disagreement(iterates: &[DVector<f64>], p: &PerronVector) -> (DVector<f64>, f64) {
    let dim = iterates.first().map_or(0, |w| w.len());
    let mut centroid = DVector::zeros(dim);
    for (k, w) in iterates.iter().enumerate() {
        centroid.axpy(p[k], w, 1.0);
    }
    let disagreement = iterates.iter().map(|w| (w - &centroid).norm_squared()).sum();
    (centroid, disagreement)
}

/// One row of a run trace.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub iter: usize,
    /// `(1/N) sum_k ||w_k - target||^2`.
    pub msd_network: f64,
    /// `||w_c - target||^2`.
    pub msd_centroid: f64,
    pub disagreement: f64,
    /// Mean over agents of the test error, on iterations where it is measured.
    pub test_error: Option<f64>,
}

/// Per-iteration trace of a single run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub run_id: String,
    pub seed: u64,
    pub fingerprint: u64,
    pub rows: Vec<MetricRow>,
}

/// Fraction of samples with `sign(h^T w) != gamma`; `h^T w = 0` counts as
/// an error.
pub fn test_error(w: &DVector<f64>, test_set: &[Sample]) -> f64 {
    if test_set.is_empty() {
        return f64::NAN;
    }
    let wrong = test_set.iter().filter(|s| s.gamma * s.h.dot(w) <= 0.0).count();
    wrong as f64 / test_set.len() as f64
}

/// Repetition-averaged network MSD over the last `window_fraction` of the
/// trace, gated by a stationarity check: the window mean must lie within 5%
/// of the mean over the last half of the window.
pub fn steady_state_msd(records: &[RunRecord], window_fraction: f64) -> Result<f64, MetricsError> {
    if !(window_fraction > 0.0 && window_fraction <= 1.0) {
        return Err(MetricsError::InvalidWindow(window_fraction));
    }
    let len = records.first().map_or(0, |r| r.rows.len());
    if len == 0 {
        return Err(MetricsError::EmptyWindow);
    }
    if records.iter().any(|r| r.rows.len() != len) {
        return Err(MetricsError::RaggedRecords);
    }
    let window = ((len as f64 * window_fraction).round() as usize).clamp(1, len);
    let mut curve = vec![0.0; window];
    for r in records {
        for (c, row) in curve.iter_mut().zip(&r.rows[len - window..]) {
            *c += row.msd_network;
        }
    }
    let reps = records.len() as f64;
    curve.iter_mut().for_each(|c| *c /= reps);
    let window_mean = curve.iter().sum::<f64>() / window as f64;
    let half = &curve[window / 2..];
    let half_mean = half.iter().sum::<f64>() / half.len() as f64;
    if (window_mean - half_mean).abs() > 0.05 * half_mean.abs() {
        return Err(MetricsError::TransientNotSettled { window_mean, half_mean });
    }
    Ok(window_mean)
}

/// Least-squares line through `(ln x, ln y)`; returns `(slope, intercept)`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> Result<(f64, f64), MetricsError> {
    let n = xs.len().min(ys.len());
    if n < 3 {
        return Err(MetricsError::TooFewPoints(n));
    }
    if let Some(bad) = xs.iter().chain(ys).find(|v| !(**v > 0.0 && v.is_finite())) {
        return Err(MetricsError::NonPositiveValue(*bad));
    }
    let lx: Vec<f64> = xs[..n].iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys[..n].iter().map(|y| y.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n as f64;
    let my = ly.iter().sum::<f64>() / n as f64;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    Ok((slope, my - slope * mx))
}

/// Mean and 95% normal-approximation half-width `1.96 sd / sqrt(n)`.
pub fn mean_and_ci(samples: &[f64]) -> (f64, f64) {
    let n = samples.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, 1.96 * var.sqrt() / (n as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub value: f64,
    pub mean: f64,
    pub ci_half_width: f64,
    pub repetitions: usize,
}

/// Sweep results along one axis with a fitted log-log trend.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepSummary {
    pub axis: String,
    pub points: Vec<SweepPoint>,
    pub slope: f64,
    pub intercept: f64,
}

impl SweepSummary {
    /// Builds a summary from per-point repetition samples. The trend is only
    /// fitted when at least three points have positive means; otherwise
    /// slope and intercept are NaN.
    pub fn from_samples(axis: &str, values: &[f64], samples: &[Vec<f64>]) -> Self {
        let points: Vec<SweepPoint> = values
            .iter()
            .zip(samples)
            .map(|(value, s)| {
                let (mean, ci_half_width) = mean_and_ci(s);
                SweepPoint { value: *value, mean, ci_half_width, repetitions: s.len() }
            })
            .collect();
        let xs: Vec<f64> = points.iter().map(|p| p.value).collect();
        let ys: Vec<f64> = points.iter().map(|p| p.mean).collect();
        let (slope, intercept) = loglog_slope(&xs, &ys).unwrap_or((f64::NAN, f64::NAN));
        Self { axis: axis.to_string(), points, slope, intercept }
    }
}

fn fmt_value(x: f64) -> String {
    format!("{x:.16e}")
}

/// Writes `run_<id>.csv` into `dir` and returns its path.
pub fn write_run_csv(dir: &Path, record: &RunRecord) -> io::Result<PathBuf> {
    let path = dir.join(format!("run_{}.csv", record.run_id));
    let mut out = io::BufWriter::new(fs::File::create(&path)?);
    writeln!(out, "iter,msd_network,msd_centroid,disagreement,test_error")?;
    for row in &record.rows {
        writeln!(
            out,
            "{},{},{},{},{}",
            row.iter,
            fmt_value(row.msd_network),
            fmt_value(row.msd_centroid),
            fmt_value(row.disagreement),
            row.test_error.map(fmt_value).unwrap_or_default()
        )?;
    }
    out.flush()?;
    Ok(path)
}

/// Writes (or overwrites) `sweep.csv` in `dir` with the given summaries.
pub fn write_sweep_csv(dir: &Path, summaries: &[SweepSummary]) -> io::Result<PathBuf> {
    let path = dir.join("sweep.csv");
    let mut out = io::BufWriter::new(fs::File::create(&path)?);
    writeln!(out, "axis,value,mean,ci_half_width")?;
    for s in summaries {
        for p in &s.points {
            writeln!(
                out,
                "{},{},{},{}",
                s.axis,
                fmt_value(p.value),
                fmt_value(p.mean),
                fmt_value(p.ci_half_width)
            )?;
        }
    }
    out.flush()?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    fn record(msd: &[f64]) -> RunRecord {
        RunRecord {
            run_id: "r".into(),
            seed: 0,
            fingerprint: 0,
            rows: msd
                .iter()
                .enumerate()
                .map(|(i, m)| MetricRow {
                    iter: i,
                    msd_network: *m,
                    msd_centroid: *m,
                    disagreement: 0.0,
                    test_error: None,
                })
                .collect(),
        }
    }

    #[test]
    fn equal_iterates_have_no_disagreement() {
        let ws = vec![v(&[1.0, 2.0]); 3];
        let (c, d) = centroid_and_disagreement(&ws, &PerronVector::uniform(3));
        assert_eq!(d, 0.0);
        assert!((c - v(&[1.0, 2.0])).amax() < 1e-15);
    }

    #[test]
    fn symmetric_pair_disagreement() {
        let ws = vec![v(&[1.0, 0.0]), v(&[-1.0, 0.0])];
        let (c, d) = centroid_and_disagreement(&ws, &PerronVector::uniform(2));
        assert_eq!(c, v(&[0.0, 0.0]));
        assert_eq!(d, 2.0);
    }

    #[test]
    fn zero_weight_vector_is_all_ties() {
        let set = vec![
            Sample { gamma: 1.0, h: v(&[1.0, 0.0]) },
            Sample { gamma: -1.0, h: v(&[-1.0, 0.0]) },
        ];
        assert_eq!(test_error(&v(&[0.0, 0.0]), &set), 1.0);
        assert_eq!(test_error(&v(&[1.0, 0.0]), &set), 0.0);
    }

    #[test]
    fn empty_record_has_no_window() {
        assert_eq!(steady_state_msd(&[record(&[])], 0.2), Err(MetricsError::EmptyWindow));
    }

    #[test]
    fn decaying_record_is_rejected() {
        let msd: Vec<f64> = (0..100).map(|i| (-0.2 * i as f64).exp()).collect();
        assert!(matches!(
            steady_state_msd(&[record(&msd)], 0.5),
            Err(MetricsError::TransientNotSettled { .. })
        ));
    }

    #[test]
    fn steady_state_idempotent_under_prepended_windows() {
        let window = [1.0, 1.2, 0.9, 1.1, 1.0];
        let base: Vec<f64> = window.iter().cycle().take(25).copied().collect();
        let longer: Vec<f64> = window.iter().cycle().take(50).copied().collect();
        let a = steady_state_msd(&[record(&base)], 0.2).unwrap();
        let b = steady_state_msd(&[record(&longer)], 0.2).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn slopes_of_powers() {
        let xs = [1.0, 2.0, 4.0, 8.0];
        let (s1, _) = loglog_slope(&xs, &xs).unwrap();
        let sq: Vec<f64> = xs.iter().map(|x| x * x).collect();
        let (s2, _) = loglog_slope(&xs, &sq).unwrap();
        assert!((s1 - 1.0).abs() < 1e-12);
        assert!((s2 - 2.0).abs() < 1e-12);
        assert_eq!(loglog_slope(&xs, &[1.0, 0.0, 1.0, 1.0]), Err(MetricsError::NonPositiveValue(0.0)));
    }

    #[test]
    fn ci_of_constant_is_zero() {
        assert_eq!(mean_and_ci(&[2.0, 2.0, 2.0]), (2.0, 0.0));
    }
}
