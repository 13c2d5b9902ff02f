//! Prediction scores and the Geweke convergence diagnostic.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Dataset;
use crate::tensor::DenseTensor;

fn check_pair(truth: &[DenseTensor], pred: &[DenseTensor]) -> Result<()> {
    if truth.len() != pred.len() || truth.is_empty() {
        return Err(Error::Dimension(format!("{} truth tensors vs {} predictions", truth.len(), pred.len())));
    }
    for (t, p) in truth.iter().zip(pred) {
        if t.shape() != p.shape() {
            return Err(Error::Dimension(format!("shape {:?} vs {:?}", t.shape(), p.shape())));
        }
    }
    Ok(())
}

/// `‖truth - pred‖_F / ‖truth‖_F` over the concatenated set.
pub fn rpe(truth: &[DenseTensor], pred: &[DenseTensor]) -> Result<f64> {
    check_pair(truth, pred)?;
    let mut num = 0.0;
    let mut den = 0.0;
    for (t, p) in truth.iter().zip(pred) {
        for (&a, &b) in t.data().iter().zip(p.data()) {
            num += (a - b) * (a - b);
            den += a * a;
        }
    }
    if den == 0.0 {
        return Err(Error::Argument("relative error undefined for an all-zero truth".into()));
    }
    Ok((num / den).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoxelRpe {
    /// Mean over voxels with nonzero truth.
    pub mean: f64,
    /// Per-voxel RPE across subjects; `None` where the truth is zero.
    pub per_voxel: Vec<Option<f64>>,
    pub skipped: usize,
}

/// RPE of each voxel across subjects, averaged over voxels.
pub fn rpe_per_voxel(truth: &[DenseTensor], pred: &[DenseTensor]) -> Result<VoxelRpe> {
    check_pair(truth, pred)?;
    let nv = truth[0].len();
    let per_voxel: Vec<Option<f64>> = (0..nv)
        .map(|v| {
            let (mut num, mut den) = (0.0, 0.0);
            for (t, p) in truth.iter().zip(pred) {
                let (a, b) = (t.data()[v], p.data()[v]);
                num += (a - b) * (a - b);
                den += a * a;
            }
            (den > 0.0).then(|| (num / den).sqrt())
        })
        .collect();
    let used: Vec<f64> = per_voxel.iter().flatten().copied().collect();
    if used.is_empty() {
        return Err(Error::Argument("relative error undefined: truth is zero at every voxel".into()));
    }
    Ok(VoxelRpe {
        mean: used.iter().sum::<f64>() / used.len() as f64,
        skipped: nv - used.len(),
        per_voxel,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PearsonMode {
    /// Correlation across subjects at each voxel, averaged over voxels.
    PerVoxelAvg,
    /// One correlation over all (subject, voxel) pairs.
    Pooled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pearson {
    pub value: f64,
    /// Per-voxel correlations (empty when pooled); `None` where skipped.
    pub per_voxel: Vec<Option<f64>>,
    /// Voxels with zero variance in either argument.
    pub skipped: usize,
}

/// Sample correlation; `None` for fewer than two pairs or zero variance.
pub fn correlation(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len();
    if n < 2 || n != b.len() {
        return None;
    }
    let ma = a.iter().sum::<f64>() / n as f64;
    let mb = b.iter().sum::<f64>() / n as f64;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return None;
    }
    Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

pub fn pearson(truth: &[DenseTensor], pred: &[DenseTensor], mode: PearsonMode) -> Result<Pearson> {
    check_pair(truth, pred)?;
    match mode {
        PearsonMode::Pooled => {
            let a: Vec<f64> = truth.iter().flat_map(|t| t.data().iter().copied()).collect();
            let b: Vec<f64> = pred.iter().flat_map(|t| t.data().iter().copied()).collect();
            let value = correlation(&a, &b)
                .ok_or_else(|| Error::Argument("pooled correlation needs two pairs with nonzero variance".into()))?;
            Ok(Pearson { value, per_voxel: Vec::new(), skipped: 0 })
        }
        PearsonMode::PerVoxelAvg => {
            let nv = truth[0].len();
            let per_voxel: Vec<Option<f64>> = (0..nv)
                .map(|v| {
                    let a: Vec<f64> = truth.iter().map(|t| t.data()[v]).collect();
                    let b: Vec<f64> = pred.iter().map(|t| t.data()[v]).collect();
                    correlation(&a, &b)
                })
                .collect();
            let used: Vec<f64> = per_voxel.iter().flatten().copied().collect();
            if used.is_empty() {
                return Err(Error::Argument("no voxel has nonzero variance in both arguments".into()));
            }
            let skipped = nv - used.len();
            if skipped > 0 {
                log::info!("{skipped} zero-variance voxels skipped in per-voxel correlation");
            }
            Ok(Pearson { value: used.iter().sum::<f64>() / used.len() as f64, per_voxel, skipped })
        }
    }
}

/// Spectral density at frequency zero, from Bartlett-weighted
/// autocovariances up to lag `⌊√n⌋`.
pub fn spectral_variance0(x: &[f64]) -> f64 {
    let n = x.len();
    if n == 0 {
        return 0.0;
    }
    let mean = x.iter().sum::<f64>() / n as f64;
    let lags = ((n as f64).sqrt().floor() as usize).min(n - 1);
    let acov = |k: usize| -> f64 { (0..n - k).map(|i| (x[i] - mean) * (x[i + k] - mean)).sum::<f64>() / n as f64 };
    let mut s = acov(0);
    for k in 1..=lags {
        s += 2.0 * (1.0 - k as f64 / (lags + 1) as f64) * acov(k);
    }
    s.max(0.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Geweke {
    pub z: f64,
    /// Both windows have zero spectral variance; `z` is reported as 0.
    pub degenerate: bool,
}

/// Geweke z comparing the first `first` and last `last` fractions of a trace.
pub fn geweke_z(trace: &[f64], first: f64, last: f64) -> Result<Geweke> {
    let n = trace.len();
    if n < 20 {
        return Err(Error::Argument(format!("Geweke diagnostic needs at least 20 draws, got {n}")));
    }
    if !(first > 0.0 && last > 0.0 && first + last <= 1.0) {
        return Err(Error::Argument(format!("window fractions {first} and {last} are invalid")));
    }
    let n1 = ((first * n as f64).floor() as usize).max(2);
    let n2 = ((last * n as f64).floor() as usize).max(2);
    let a = &trace[..n1];
    let b = &trace[n - n2..];
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let se2 = spectral_variance0(a) / n1 as f64 + spectral_variance0(b) / n2 as f64;
    if se2 <= 0.0 || !se2.is_finite() {
        return Ok(Geweke { z: 0.0, degenerate: true });
    }
    Ok(Geweke { z: (mean(a) - mean(b)) / se2.sqrt(), degenerate: false })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GewekeSummary {
    pub count: usize,
    pub degenerate: usize,
    pub mean: f64,
    pub sd: f64,
    pub median_abs: f64,
    pub max_abs: f64,
    /// Fraction of traces with |z| < 1.96.
    pub within: f64,
}

pub fn geweke_summary(zs: &[Geweke]) -> Result<GewekeSummary> {
    if zs.is_empty() {
        return Err(Error::Argument("no traces to summarise".into()));
    }
    let n = zs.len() as f64;
    let mean = zs.iter().map(|g| g.z).sum::<f64>() / n;
    let sd = if zs.len() > 1 {
        (zs.iter().map(|g| (g.z - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    let mut abs: Vec<f64> = zs.iter().map(|g| g.z.abs()).collect();
    abs.sort_by(f64::total_cmp);
    let m = abs.len();
    let median_abs = if m % 2 == 1 { abs[m / 2] } else { 0.5 * (abs[m / 2 - 1] + abs[m / 2]) };
    Ok(GewekeSummary {
        count: m,
        degenerate: zs.iter().filter(|g| g.degenerate).count(),
        mean,
        sd,
        median_abs,
        max_abs: abs[m - 1],
        within: abs.iter().filter(|&&a| a < 1.96).count() as f64 / n,
    })
}

/// Geweke z of every stored product trace, with the standard 10%/50% windows.
pub fn chain_geweke(traces: &[Vec<f64>]) -> Result<Vec<Geweke>> {
    traces.iter().map(|t| geweke_z(t, 0.1, 0.5)).collect()
}

/// Training-mean image for every test subject: the intercept-only baseline.
pub fn intercept_only_prediction(data: &Dataset) -> Result<Vec<DenseTensor>> {
    let nv = data.n_voxels();
    let mut sum = vec![0.0; nv];
    let mut count = vec![0usize; nv];
    for &n in &data.train {
        for v in 0..nv {
            if data.mask_on(n, v) {
                sum[v] += data.y[n].data()[v];
                count[v] += 1;
            }
        }
    }
    let mean: Vec<f64> = sum.iter().zip(&count).map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 }).collect();
    let t = DenseTensor::from_vec(&data.shape, mean)?;
    Ok(vec![t; data.test.len()])
}

/// Scores of one set of predictions. Correlations are `None` where they are
/// undefined, e.g. for a predictor that is constant across subjects.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub rpe: f64,
    pub pearson_voxel: Option<f64>,
    pub pearson_pooled: Option<f64>,
    pub skipped_voxels: usize,
}

pub fn score(truth: &[DenseTensor], pred: &[DenseTensor]) -> Result<Scores> {
    let pv = pearson(truth, pred, PearsonMode::PerVoxelAvg).ok();
    Ok(Scores {
        rpe: rpe(truth, pred)?,
        pearson_voxel: pv.as_ref().map(|p| p.value),
        pearson_pooled: pearson(truth, pred, PearsonMode::Pooled).ok().map(|p| p.value),
        skipped_voxels: pv.map_or(truth[0].len(), |p| p.skipped),
    })
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(body.as_bytes())?;
    Ok(())
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(String::new, |v| format!("{v:.17e}"))
}

/// `voxel,rpe,pearson` rows.
pub fn write_voxel_metrics_csv(path: &Path, rpe: &VoxelRpe, pearson: &Pearson) -> Result<()> {
    let mut s = String::from("voxel,rpe,pearson\n");
    for v in 0..rpe.per_voxel.len() {
        let _ = writeln!(s, "{v},{},{}", opt(rpe.per_voxel[v]), opt(pearson.per_voxel.get(v).copied().flatten()));
    }
    write_file(path, &s)
}

/// `iteration,value` rows of one trace.
pub fn write_trace_csv(path: &Path, iterations: &[usize], trace: &[f64]) -> Result<()> {
    if iterations.len() != trace.len() {
        return Err(Error::Dimension("iteration and trace lengths differ".into()));
    }
    let mut s = String::from("iteration,value\n");
    for (t, x) in iterations.iter().zip(trace) {
        let _ = writeln!(s, "{t},{x:.17e}");
    }
    write_file(path, &s)
}

/// `voxel,z,degenerate` rows followed by nothing else.
pub fn write_geweke_csv(path: &Path, voxels: &[usize], zs: &[Geweke]) -> Result<()> {
    let mut s = String::from("voxel,z,degenerate\n");
    for (v, g) in voxels.iter().zip(zs) {
        let _ = writeln!(s, "{v},{:.6},{}", g.z, g.degenerate);
    }
    write_file(path, &s)
}

/// One-row table: `mean (sd)` of z across voxels plus tail counts.
pub fn geweke_table(label: &str, s: &GewekeSummary) -> String {
    format!(
        "scenario,z mean (sd),median |z|,max |z|,share |z|<1.96,traces\n{label},{:.3} ({:.3}),{:.3},{:.3},{:.3},{}\n",
        s.mean, s.sd, s.median_abs, s.max_abs, s.within, s.count
    )
}
