//! Kriging prediction for held-out subjects, with the GP atoms integrated
//! out. Each retained state gives a Gaussian prediction per voxel; the
//! posterior predictive is their equal-weight mixture.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::linalg::cholesky_jittered;
use crate::model::{build_group_mask, Dataset, ModelConfig, ModelState, PatchTable};
use crate::sampler::Chain;
use crate::tensor::{squared_distance, DenseTensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictOptions {
    /// Use at most this many retained states, evenly thinned.
    pub max_states: usize,
    /// Central credible level of the intervals.
    pub level: f64,
}

impl Default for PredictOptions {
    fn default() -> Self {
        Self { max_states: 500, level: 0.95 }
    }
}

/// Gaussian conditional of the test outputs at one voxel given the training
/// residuals, with test outputs noiseless:
/// mean `Θ²φ₁ K̃_{*T} C^{-1} r`, covariance `Θ²φ₁ K̃_{**} - (Θ²φ₁)² K̃_{*T} C^{-1} K̃_{T*}`,
/// `C = Θ²φ₁ K̃_{TT} + σ² I`. The caller adds the test mean `m_*`.
pub fn krige_voxel(
    kt_tt: &DMatrix<f64>,
    kt_st: &DMatrix<f64>,
    kt_ss: &DMatrix<f64>,
    phi1: f64,
    theta: f64,
    sigma2: f64,
    resid: &DVector<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let s = theta * theta * phi1;
    let n_s = kt_st.nrows();
    if s == 0.0 || kt_tt.nrows() == 0 {
        return Ok((DVector::zeros(n_s), kt_ss * s));
    }
    let mut c = kt_tt * s;
    for i in 0..c.nrows() {
        c[(i, i)] += sigma2;
    }
    let f = cholesky_jittered(c)?;
    let k_st = kt_st * s;
    let mean = &k_st * f.solve(resid);
    let mut sol = k_st.transpose();
    f.chol.solve_mut(&mut sol);
    let cov = kt_ss * s - &k_st * sol;
    Ok((mean, cov))
}

/// Per-state predictive means and variances, laid out `[(subject, voxel), state]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictiveDraws {
    pub shape: Vec<usize>,
    pub subjects: Vec<usize>,
    pub n_states: usize,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// Cells whose kriging system failed and fell back to the linear-term mean.
    pub fallbacks: usize,
}

impl PredictiveDraws {
    /// Assemble from per-state `(means, variances)` tensors, one per subject.
    pub fn from_states(subjects: &[usize], states: &[(Vec<DenseTensor>, Vec<DenseTensor>)]) -> Result<Self> {
        let first = states.first().ok_or_else(|| Error::State("no predictions to summarise".into()))?;
        let shape = first.0.first().ok_or_else(|| Error::State("no subjects".into()))?.shape().to_vec();
        let nv: usize = shape.iter().product();
        let k = states.len();
        let cells = subjects.len() * nv;
        let mut mean = vec![0.0; cells * k];
        let mut var = vec![0.0; cells * k];
        for (s, (m, v)) in states.iter().enumerate() {
            if m.len() != subjects.len() || v.len() != subjects.len() {
                return Err(Error::Dimension("prediction subject count mismatch".into()));
            }
            for i in 0..subjects.len() {
                for c in 0..nv {
                    mean[(i * nv + c) * k + s] = m[i].data()[c];
                    var[(i * nv + c) * k + s] = v[i].data()[c];
                }
            }
        }
        Ok(Self { shape, subjects: subjects.to_vec(), n_states: k, mean, var, fallbacks: 0 })
    }
}

/// Pointwise mixture summaries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub subjects: Vec<usize>,
    pub mean: Vec<DenseTensor>,
    pub variance: Vec<DenseTensor>,
    pub lower: Vec<DenseTensor>,
    pub upper: Vec<DenseTensor>,
    pub level: f64,
    pub states_used: usize,
    pub fallbacks: usize,
}

#[inline]
fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

fn mixture_cdf(x: f64, means: &[f64], vars: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (&m, &v) in means.iter().zip(vars) {
        acc += if v > 0.0 {
            normal_cdf((x - m) / v.sqrt())
        } else if x >= m {
            1.0
        } else {
            0.0
        };
    }
    acc / means.len() as f64
}

/// The `q`-quantile of an equal-weight normal mixture, by bisection.
pub fn mixture_quantile(q: f64, means: &[f64], vars: &[f64]) -> f64 {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (&m, &v) in means.iter().zip(vars) {
        let s = v.max(0.0).sqrt();
        lo = lo.min(m - 10.0 * s);
        hi = hi.max(m + 10.0 * s);
    }
    if lo == hi {
        return lo;
    }
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if mixture_cdf(mid, means, vars) < q {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-12 * (1.0 + mid.abs()) {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// Mixture mean, variance and central interval of every cell.
pub fn posterior_predictive_summary(draws: &PredictiveDraws, level: f64) -> Result<Prediction> {
    if draws.n_states == 0 {
        return Err(Error::State("no retained states to summarise".into()));
    }
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::Argument(format!("credible level must lie in (0, 1), got {level}")));
    }
    let k = draws.n_states;
    let nv: usize = draws.shape.iter().product();
    let cells = draws.subjects.len() * nv;
    let tail = (1.0 - level) / 2.0;
    let summary: Vec<[f64; 4]> = (0..cells)
        .into_par_iter()
        .map(|c| {
            let m = &draws.mean[c * k..(c + 1) * k];
            let v = &draws.var[c * k..(c + 1) * k];
            let mean = m.iter().sum::<f64>() / k as f64;
            let second = m.iter().zip(v).map(|(a, b)| b + a * a).sum::<f64>() / k as f64;
            let var = (second - mean * mean).max(0.0);
            [mean, var, mixture_quantile(tail, m, v), mixture_quantile(1.0 - tail, m, v)]
        })
        .collect();
    let pick = |j: usize| -> Vec<DenseTensor> {
        (0..draws.subjects.len())
            .map(|i| {
                DenseTensor::from_vec(&draws.shape, (0..nv).map(|c| summary[i * nv + c][j]).collect()).expect("shape")
            })
            .collect()
    };
    Ok(Prediction {
        subjects: draws.subjects.clone(),
        mean: pick(0),
        variance: pick(1),
        lower: pick(2),
        upper: pick(3),
        level,
        states_used: k,
        fallbacks: draws.fallbacks,
    })
}

fn thinned<'a>(states: &'a [ModelState], max: usize) -> Vec<&'a ModelState> {
    let n = states.len();
    if max == 0 || n <= max {
        return states.iter().collect();
    }
    (0..max).map(|i| &states[i * n / max]).collect()
}

/// Kriging predictions for `subjects` from every (thinned) retained state.
pub fn kriging_draws(
    chain: &Chain,
    data: &Dataset,
    config: &ModelConfig,
    subjects: &[usize],
    max_states: usize,
) -> Result<PredictiveDraws> {
    if chain.states.is_empty() {
        return Err(Error::State("chain has no retained states".into()));
    }
    data.validate()?;
    if let Some(&s) = subjects.iter().find(|&&s| s >= data.n_subjects()) {
        return Err(Error::Argument(format!("subject {s} out of range")));
    }
    let masks = build_group_mask(data, config.tau_mask)?;
    if masks.group_voxels != chain.group_voxels || chain.train != data.train {
        return Err(Error::Validation("chain was fitted with a different group mask or training split".into()));
    }
    let states = thinned(&chain.states, max_states);
    let k = states.len();
    let table = PatchTable::new(&data.shape, config.patch)?;
    let nv = data.n_voxels();
    let ns = subjects.len();
    let comps: Vec<(DenseTensor, DenseTensor, Vec<DenseTensor>)> = states
        .iter()
        .map(|s| (s.gamma.factor.compose(), s.theta.factor.compose(), s.delta.iter().map(|b| b.factor.compose()).collect()))
        .collect();
    let linear_mean = |st: usize, n: usize, v: usize| -> f64 {
        let (g, _, d) = &comps[st];
        g.data()[v] + d.iter().enumerate().map(|(s, t)| t.data()[v] * data.z[n][s]).sum::<f64>()
    };

    // Per voxel: (per subject, per state) mean and variance, plus fallbacks.
    let per_voxel: Vec<(Vec<f64>, Vec<f64>, usize)> = (0..nv)
        .into_par_iter()
        .map(|v| {
            let mut mean = vec![0.0; ns * k];
            let mut var = vec![0.0; ns * k];
            let mut fallbacks = 0;
            let observed: Vec<usize> = data.train.iter().copied().filter(|&n| data.mask_on(n, v)).collect();
            let active: Vec<usize> = (0..ns).filter(|&i| data.mask_on(subjects[i], v)).collect();
            if !masks.in_group(v) || observed.is_empty() {
                for &i in &active {
                    let n = subjects[i];
                    for st in 0..k {
                        mean[i * k + st] = linear_mean(st, n, v) + comps[st].1.data()[v] * data.x[n].data()[v];
                    }
                }
                return (mean, var, fallbacks);
            }
            if active.is_empty() {
                return (mean, var, fallbacks);
            }
            let tp: Vec<Vec<f64>> = observed.iter().map(|&n| table.values(&data.x[n], v)).collect();
            let sp: Vec<Vec<f64>> = active.iter().map(|&i| table.values(&data.x[subjects[i]], v)).collect();
            let d_tt = DMatrix::from_fn(tp.len(), tp.len(), |a, b| squared_distance(&tp[a], &tp[b]));
            let d_st = DMatrix::from_fn(sp.len(), tp.len(), |a, b| squared_distance(&sp[a], &tp[b]));
            let d_ss = DMatrix::from_fn(sp.len(), sp.len(), |a, b| squared_distance(&sp[a], &sp[b]));
            for (st, state) in states.iter().enumerate() {
                let phi2 = state.phi2;
                let kern = |d: &DMatrix<f64>| d.map(|x| (-phi2 * x).exp());
                let resid = DVector::from_iterator(
                    observed.len(),
                    observed.iter().map(|&n| data.y[n].data()[v] - linear_mean(st, n, v)),
                );
                let theta = comps[st].1.data()[v];
                let res = krige_voxel(&kern(&d_tt), &kern(&d_st), &kern(&d_ss), state.phi1, theta, state.sigma2, &resid);
                for (a, &i) in active.iter().enumerate() {
                    let m0 = linear_mean(st, subjects[i], v);
                    match &res {
                        Ok((m, c)) => {
                            mean[i * k + st] = m0 + m[a];
                            var[i * k + st] = c[(a, a)].max(0.0);
                        }
                        Err(_) => {
                            mean[i * k + st] = m0;
                            fallbacks += 1;
                        }
                    }
                }
            }
            (mean, var, fallbacks)
        })
        .collect();

    let mut mean = vec![0.0; ns * nv * k];
    let mut var = vec![0.0; ns * nv * k];
    let mut fallbacks = 0;
    for (v, (m, s2, f)) in per_voxel.into_iter().enumerate() {
        fallbacks += f;
        for i in 0..ns {
            let dst = (i * nv + v) * k;
            mean[dst..dst + k].copy_from_slice(&m[i * k..(i + 1) * k]);
            var[dst..dst + k].copy_from_slice(&s2[i * k..(i + 1) * k]);
        }
    }
    if fallbacks > 0 {
        log::warn!("{fallbacks} kriging systems failed; those cells use the linear-term mean");
    }
    Ok(PredictiveDraws { shape: data.shape.clone(), subjects: subjects.to_vec(), n_states: k, mean, var, fallbacks })
}

/// Kriging prediction of the dataset's test subjects.
pub fn kriging_predict(chain: &Chain, data: &Dataset, config: &ModelConfig, opts: &PredictOptions) -> Result<Prediction> {
    let draws = kriging_draws(chain, data, config, &data.test, opts.max_states)?;
    posterior_predictive_summary(&draws, opts.level)
}

/// Fraction of cells whose truth lies inside the interval.
pub fn interval_coverage(pred: &Prediction, truth: &[DenseTensor]) -> f64 {
    let mut hit = 0usize;
    let mut total = 0usize;
    for ((lo, hi), t) in pred.lower.iter().zip(&pred.upper).zip(truth) {
        for ((&l, &h), &y) in lo.data().iter().zip(hi.data()).zip(t.data()) {
            total += 1;
            hit += (l <= y && y <= h) as usize;
        }
    }
    hit as f64 / total.max(1) as f64
}
