//! One test per acceptance criterion. Each prints a single PASS/FAIL line
//! before asserting; `--nocapture` adds per-run detail.

use std::io::Write as _;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use btotvc::metrics::{chain_geweke, geweke_summary, intercept_only_prediction, rpe, rpe_per_voxel};
use btotvc::model::{build_group_mask, Dataset, ModelConfig, ModelState, Prior};
use btotvc::predict::{krige_voxel, kriging_draws, kriging_predict, PredictOptions};
use btotvc::sampler::conditionals::{
    atom_posterior, draw_lambda, draw_tau, draw_w, lambda_params, mh_alpha, phi1_params, sigma2_params,
};
use btotvc::sampler::{run_chain, Chain, Sampler, Target, Workspace};
use btotvc::select::rank_sweep;
use btotvc::simgen::{simulate, SimSpec};
use btotvc::tensor::DenseTensor;

/// Written to the stdout handle directly so the line survives the harness's
/// output capture of passing tests.
fn verdict(id: u32, name: &str, pass: bool, detail: &str) -> bool {
    let line = format!("criterion {id} {}: {name}: {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stdout().lock().write_all(line.as_bytes());
    pass
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

// ---------------------------------------------------------------------------
// Oracles shared by criteria 1-3.

/// Zero-padded patch of side `h` around `(i, j)` of a 2-D image stored with
/// the first mode fastest.
fn patch2(x: &[f64], p: [usize; 2], i: usize, j: usize, h: usize) -> Vec<f64> {
    let half = (h / 2) as isize;
    let mut out = Vec::new();
    for dj in -half..=half {
        for di in -half..=half {
            let (a, b) = (i as isize + di, j as isize + dj);
            let inside = a >= 0 && b >= 0 && (a as usize) < p[0] && (b as usize) < p[1];
            out.push(if inside { x[a as usize + p[0] * b as usize] } else { 0.0 });
        }
    }
    out
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Kernel correlation matrix between two lists of patches.
fn corr(a: &[Vec<f64>], b: &[Vec<f64>], phi2: f64) -> DMatrix<f64> {
    DMatrix::from_fn(a.len(), b.len(), |i, j| (-phi2 * sq_dist(&a[i], &b[j])).exp())
}

/// Rank-one 2-D block value at voxel `v`.
fn rank1(m: &[Vec<Vec<f64>>], p0: usize, v: usize) -> f64 {
    m[0][0][v % p0] * m[1][0][v / p0]
}

/// Linear predictor of every training cell, computed from scratch.
fn fitted(state: &ModelState, data: &Dataset, group: &[Option<usize>]) -> Vec<Vec<f64>> {
    let p0 = data.shape[0];
    let nv = data.n_voxels();
    data.train
        .iter()
        .enumerate()
        .map(|(i, &n)| {
            (0..nv)
                .map(|v| {
                    let g = rank1(state.gamma.factor.margins(), p0, v);
                    let t = rank1(state.theta.factor.margins(), p0, v);
                    let a = group[v].map_or(data.x[n].data()[v], |k| state.atoms[k][i]);
                    let d: f64 = state
                        .delta
                        .iter()
                        .enumerate()
                        .map(|(s, b)| rank1(b.factor.margins(), p0, v) * data.z[n][s])
                        .sum();
                    g + t * a + d
                })
                .collect()
        })
        .collect()
}

fn group_of(data: &Dataset, tau_mask: f64) -> Vec<Option<usize>> {
    let n = data.n_subjects() as f64;
    let mut k = 0;
    (0..data.n_voxels())
        .map(|v| {
            let c = (0..data.n_subjects()).filter(|&s| data.masks[s].data()[v] != 0.0).count() as f64;
            (c > 0.0 && c >= tau_mask * n).then(|| {
                k += 1;
                k - 1
            })
        })
        .collect()
}

fn ar1_dense(alpha: f64, p: usize) -> DMatrix<f64> {
    DMatrix::from_fn(p, p, |i, j| (-alpha * (i as f64 - j as f64).abs()).exp())
}

/// Normalised trapezoid weights of an unnormalised log density on a
/// uniform grid in `ln x` over `[lo, hi]`.
struct Grid {
    x: Vec<f64>,
    w: Vec<f64>,
}

impl Grid {
    fn new(logf: impl Fn(f64) -> f64, lo: f64, hi: f64, n: usize) -> Self {
        let (a, b) = (lo.ln(), hi.ln());
        let x: Vec<f64> = (0..n).map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp()).collect();
        let lw: Vec<f64> = x
            .iter()
            .enumerate()
            .map(|(i, &t)| logf(t) + t.ln() + if i == 0 || i == n - 1 { 0.5f64.ln() } else { 0.0 })
            .collect();
        let m = lw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut w: Vec<f64> = lw.iter().map(|l| (l - m).exp()).collect();
        let s: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= s);
        Self { x, w }
    }

    fn mean(&self) -> f64 {
        self.x.iter().zip(&self.w).map(|(x, w)| x * w).sum()
    }

    fn var(&self) -> f64 {
        let m = self.mean();
        self.x.iter().zip(&self.w).map(|(x, w)| (x - m).powi(2) * w).sum()
    }

    /// Kolmogorov-Smirnov distance of a sample from the grid distribution.
    fn ks(&self, draws: &mut [f64]) -> f64 {
        draws.sort_by(f64::total_cmp);
        let mut cdf = Vec::with_capacity(self.w.len());
        let mut acc = 0.0;
        for i in 0..self.w.len() {
            // Midpoint-split trapezoid mass, so the CDF at node i includes half its weight.
            cdf.push(acc + 0.5 * self.w[i]);
            acc += self.w[i];
        }
        let at = |t: f64| -> f64 {
            match self.x.binary_search_by(|g| g.total_cmp(&t)) {
                Ok(i) => cdf[i],
                Err(0) => 0.0,
                Err(i) if i >= self.x.len() => 1.0,
                Err(i) => {
                    let f = (t.ln() - self.x[i - 1].ln()) / (self.x[i].ln() - self.x[i - 1].ln());
                    cdf[i - 1] + f * (cdf[i] - cdf[i - 1])
                }
            }
        };
        let n = draws.len() as f64;
        draws
            .iter()
            .enumerate()
            .map(|(i, &t)| {
                let f = at(t);
                (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
            })
            .fold(0.0, f64::max)
    }
}

/// |sample mean - target| in units of the Monte Carlo standard error.
fn mc_z(draws: &[f64], target: f64) -> f64 {
    let n = draws.len() as f64;
    let m = draws.iter().sum::<f64>() / n;
    let v = draws.iter().map(|d| (d - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m - target).abs() / (v / n).sqrt()
}

// ---------------------------------------------------------------------------
// Criterion 1.

/// D = 2, p = (3, 2), five training subjects, one covariate, one masked cell.
fn tiny_problem(seed: u64) -> (Dataset, ModelConfig, ModelState) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = [3usize, 2];
    let n = 5;
    let x: Vec<DenseTensor> =
        (0..n).map(|_| DenseTensor::from_vec(&shape, (0..6).map(|_| normal(&mut rng)).collect()).unwrap()).collect();
    let y: Vec<DenseTensor> =
        (0..n).map(|_| DenseTensor::from_vec(&shape, (0..6).map(|_| normal(&mut rng)).collect()).unwrap()).collect();
    let z: Vec<Vec<f64>> = (0..n).map(|_| vec![normal(&mut rng)]).collect();
    let mut masks = vec![DenseTensor::filled(&shape, 1.0); n];
    masks[2].data_mut()[4] = 0.0;
    let data = Dataset::new(x, y, Some(z), Some(masks), (0..n).collect(), vec![]).unwrap();
    let config = ModelConfig { rank: 1, patch: 3, covariates: 1, ..Default::default() };
    let ws = Workspace::new(&config, &data).unwrap();
    let mut state = ModelState::init(&config, &data, &ws.masks, &mut rng);
    for b in std::iter::once(&mut state.gamma).chain(std::iter::once(&mut state.theta)).chain(state.delta.iter_mut()) {
        for d in 0..2 {
            for v in b.factor.margin_mut(d, 0) {
                *v = normal(&mut rng);
            }
            b.w[d][0] = 0.5 + rng.random::<f64>();
            b.lambda[d][0] = 0.5 + rng.random::<f64>();
            b.alpha[d][0] = 0.2 + rng.random::<f64>();
        }
        b.tau = 0.5 + rng.random::<f64>();
    }
    for a in state.atoms.iter_mut().flatten() {
        *a = normal(&mut rng);
    }
    state.phi1 = 0.7;
    state.phi2 = 0.4;
    state.sigma2 = 0.3;
    (data, config, state)
}

fn block_of(state: &mut ModelState, t: Target) -> &mut btotvc::model::CpBlock {
    match t {
        Target::Gamma => &mut state.gamma,
        Target::Theta => &mut state.theta,
        Target::Delta(s) => &mut state.delta[s],
    }
}

/// Steps 1, 6, 11: each margin element against the Gaussian full conditional
/// of the whole margin vector, with the design read off the fitted values.
fn margin_errors(data: &Dataset, config: &ModelConfig, state: &ModelState) -> f64 {
    let group = group_of(data, config.tau_mask);
    let mut worst: f64 = 0.0;
    for target in [Target::Gamma, Target::Delta(0), Target::Theta] {
        for d in 0..2 {
            let mut s = state.clone();
            let b = block_of(&mut s, target);
            let x = b.factor.margin(d, 0).to_vec();
            let (tau_w, alpha) = (b.tau * b.w[d][0], b.alpha[d][0]);
            let p = x.len();
            let at = |vals: &[f64]| {
                let mut s2 = state.clone();
                block_of(&mut s2, target).factor.margin_mut(d, 0).copy_from_slice(vals);
                fitted(&s2, data, &group)
            };
            let mu0 = at(&vec![0.0; p]);
            let cols: Vec<Vec<Vec<f64>>> = (0..p)
                .map(|j| {
                    let mut e = vec![0.0; p];
                    e[j] = 1.0;
                    let mu = at(&e);
                    mu.iter().zip(&mu0).map(|(a, b)| a.iter().zip(b).map(|(x, y)| x - y).collect()).collect()
                })
                .collect();
            let mut prec = ar1_dense(alpha, p).try_inverse().unwrap() / tau_w;
            let mut rhs: DVector<f64> = DVector::zeros(p);
            for (i, &n) in data.train.iter().enumerate() {
                for v in 0..data.n_voxels() {
                    if data.masks[n].data()[v] == 0.0 {
                        continue;
                    }
                    let r = data.y[n].data()[v] - mu0[i][v];
                    for j in 0..p {
                        rhs[j] += cols[j][i][v] * r / state.sigma2;
                        for k in 0..p {
                            prec[(j, k)] += cols[j][i][v] * cols[k][i][v] / state.sigma2;
                        }
                    }
                }
            }
            let mut sampler = Sampler::with_state(config.clone(), data, 1, state.clone()).unwrap();
            let got = sampler.margin_conditionals(target, d, 0);
            for j in 0..p {
                let off: f64 = (0..p).filter(|&k| k != j).map(|k| prec[(j, k)] * x[k]).sum();
                let mean = (rhs[j] - off) / prec[(j, j)];
                let var = 1.0 / prec[(j, j)];
                worst = worst.max((got[j].0 - mean).abs() / mean.abs().max(1.0));
                worst = worst.max((got[j].1 - var).abs() / var.max(1.0));
            }
        }
    }
    worst
}

#[test]
fn criterion_1_conjugacy_oracles() {
    const DRAWS: usize = 20_000;
    let (data, config, state) = tiny_problem(11);
    let priors = config.priors.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut closed: Vec<(String, f64)> = Vec::new();
    let mut sampled: Vec<(String, f64)> = Vec::new();

    closed.push(("margins (gamma, delta, theta)".into(), margin_errors(&data, &config, &state)));

    let blocks = [("gamma", &state.gamma), ("delta", &state.delta[0]), ("theta", &state.theta)];
    for (name, b) in blocks {
        // w and lambda of margin (0, 0).
        let x = b.factor.margin(0, 0);
        let p = x.len();
        let q = {
            let xv = DVector::from_column_slice(x);
            (xv.transpose() * ar1_dense(b.alpha[0][0], p).try_inverse().unwrap() * &xv)[(0, 0)]
        };
        let (tau, lam) = (b.tau, b.lambda[0][0]);
        let grid = Grid::new(|w| -lam * w / 2.0 - p as f64 / 2.0 * w.ln() - q / (2.0 * tau * w), 1e-8, 1e4, 200_001);
        let draws: Vec<f64> = (0..DRAWS).map(|_| draw_w(x, tau, b.alpha[0][0], lam, &mut rng).unwrap()).collect();
        sampled.push((format!("w ({name})"), mc_z(&draws, grid.mean())));

        let w = b.w[0][0];
        let (shape, rate) = lambda_params(priors.lambda, p, w);
        let printed = (priors.lambda.a + p as f64) / (priors.lambda.b + p as f64 * w / 2.0);
        closed.push((format!("lambda mean ({name})"), (shape / rate - printed).abs()));
        let draws: Vec<f64> = (0..DRAWS).map(|_| draw_lambda(priors.lambda, p, w, &mut rng).unwrap()).collect();
        sampled.push((format!("lambda ({name})"), mc_z(&draws, printed)));

        // tau given every margin of the block.
        let terms: Vec<(f64, f64)> = (0..2)
            .map(|d| {
                let xd = DVector::from_column_slice(b.factor.margin(d, 0));
                let pd = xd.len();
                let qd = (xd.transpose() * ar1_dense(b.alpha[d][0], pd).try_inverse().unwrap() * &xd)[(0, 0)];
                (pd as f64, qd / b.w[d][0])
            })
            .collect();
        let Prior { a, b: rate_b } = priors.tau;
        let grid = Grid::new(
            |t| (a - 1.0) * t.ln() - rate_b * t - terms.iter().map(|(pd, qd)| pd / 2.0 * t.ln() + qd / (2.0 * t)).sum::<f64>(),
            1e-8,
            1e4,
            200_001,
        );
        let draws: Vec<f64> =
            (0..DRAWS).map(|_| draw_tau(b.factor.margins(), &b.w, &b.alpha, priors.tau, &mut rng).unwrap()).collect();
        sampled.push((format!("tau ({name})"), mc_z(&draws, grid.mean())));
    }

    // phi1: quadrature of the printed posterior with the correlation matrix.
    let group = group_of(&data, config.tau_mask);
    let p = [data.shape[0], data.shape[1]];
    let train_patches = |v: usize| -> Vec<Vec<f64>> {
        data.train.iter().map(|&n| patch2(data.x[n].data(), p, v % p[0], v / p[0], config.patch)).collect()
    };
    let mut quad = 0.0;
    let mut voxels = 0;
    for v in 0..data.n_voxels() {
        if let Some(k) = group[v] {
            let kt = corr(&train_patches(v), &train_patches(v), state.phi2);
            let m = DVector::from_column_slice(&state.atoms[k]);
            quad += (m.transpose() * kt.try_inverse().unwrap() * &m)[(0, 0)];
            voxels += 1;
        }
    }
    let nt = data.train.len() as f64;
    let Prior { a: a1, b: b1 } = priors.phi1;
    let grid = Grid::new(
        |f| -(a1 + 1.0) * f.ln() - b1 / f - voxels as f64 * nt / 2.0 * f.ln() - quad / (2.0 * f),
        1e-6,
        1e4,
        400_001,
    );
    let (sh, sc) = phi1_params(quad, data.train.len(), voxels, priors.phi1);
    closed.push(("phi1 mean".into(), (sc / (sh - 1.0) - grid.mean()).abs() / grid.mean()));
    let mut sampler = Sampler::with_state(config.clone(), &data, 5, state.clone()).unwrap();
    let draws: Vec<f64> = (0..DRAWS)
        .map(|_| {
            sampler.update_phi1(&mut rng).unwrap();
            sampler.state().phi1
        })
        .collect();
    sampled.push(("phi1 (sampler)".into(), mc_z(&draws, grid.mean())));

    // Atoms: precision-form Gaussian posterior at every group voxel.
    let fit0 = {
        let mut s = state.clone();
        for t in s.theta.factor.margin_mut(0, 0) {
            *t = 0.0;
        }
        fitted(&s, &data, &group)
    };
    let theta_at = |v: usize| rank1(state.theta.factor.margins(), p[0], v);
    let mut atom_err: f64 = 0.0;
    let mut oracle_means = Vec::new();
    for v in 0..data.n_voxels() {
        let Some(k) = group[v] else { continue };
        let kmat = corr(&train_patches(v), &train_patches(v), state.phi2) * state.phi1;
        let th = theta_at(v);
        let obs: Vec<bool> = data.train.iter().map(|&n| data.masks[n].data()[v] != 0.0).collect();
        let yv: Vec<f64> = data.train.iter().enumerate().map(|(i, &n)| data.y[n].data()[v] - fit0[i][v]).collect();
        let mut prec = kmat.clone().try_inverse().unwrap();
        let mut rhs = DVector::zeros(yv.len());
        for i in 0..yv.len() {
            if obs[i] {
                prec[(i, i)] += th * th / state.sigma2;
                rhs[i] = th * yv[i] / state.sigma2;
            }
        }
        let cov = prec.try_inverse().unwrap();
        let mean = &cov * rhs;
        let (m, c) = atom_posterior(&kmat, th, state.sigma2, &yv, &obs).unwrap();
        atom_err = atom_err.max((m - &mean).amax()).max((c - &cov).amax());
        oracle_means.push((k, mean, cov));
    }
    closed.push(("atoms mean/cov".into(), atom_err));
    // The sampler's draws at the voxel with a masked cell.
    let hole = group[4].unwrap();
    let (_, mean, cov) = oracle_means.iter().find(|(k, _, _)| *k == hole).unwrap();
    let mut sampler = Sampler::with_state(config.clone(), &data, 5, state.clone()).unwrap();
    let mut per_subject = vec![Vec::with_capacity(DRAWS); data.train.len()];
    for it in 0..DRAWS {
        sampler.update_atoms(it).unwrap();
        for (i, col) in per_subject.iter_mut().enumerate() {
            col.push(sampler.state().atoms[hole][i]);
        }
        sampler.refresh_residual();
    }
    let z_atoms = per_subject.iter().enumerate().map(|(i, d)| mc_z(d, mean[i])).fold(0.0, f64::max);
    sampled.push(("atoms (sampler, masked voxel)".into(), z_atoms));
    let var_ok = per_subject.iter().enumerate().all(|(i, d)| {
        let m = d.iter().sum::<f64>() / d.len() as f64;
        let v = d.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (d.len() - 1) as f64;
        (v - cov[(i, i)]).abs() < 0.05 * cov[(i, i)]
    });

    // sigma2: closed form and the sampler's draws.
    let all = fitted(&state, &data, &group);
    let (mut ss, mut count) = (0.0, 0usize);
    for (i, &n) in data.train.iter().enumerate() {
        for v in 0..data.n_voxels() {
            if data.masks[n].data()[v] != 0.0 {
                ss += (data.y[n].data()[v] - all[i][v]).powi(2);
                count += 1;
            }
        }
    }
    let Prior { a: ae, b: be } = priors.noise;
    let grid = Grid::new(|s| -(ae + 1.0) * s.ln() - be / s - count as f64 / 2.0 * s.ln() - ss / (2.0 * s), 1e-6, 1e4, 400_001);
    let (sh, sc) = sigma2_params(ss, count, priors.noise);
    closed.push(("sigma2 mean".into(), (sc / (sh - 1.0) - grid.mean()).abs() / grid.mean()));
    closed.push(("sigma2 var".into(), (sc * sc / ((sh - 1.0).powi(2) * (sh - 2.0)) - grid.var()).abs() / grid.var()));
    let mut sampler = Sampler::with_state(config.clone(), &data, 5, state.clone()).unwrap();
    sampler.refresh_residual();
    let draws: Vec<f64> = (0..DRAWS)
        .map(|_| {
            sampler.update_sigma2(&mut rng).unwrap();
            sampler.state().sigma2
        })
        .collect();
    sampled.push(("sigma2 (sampler)".into(), mc_z(&draws, grid.mean())));

    for (name, e) in &closed {
        println!("  closed form  {name:<32} error {e:.2e}");
    }
    for (name, z) in &sampled {
        println!("  sampled      {name:<32} |z| {z:.2}");
    }
    let worst_closed = closed.iter().map(|c| c.1).fold(0.0, f64::max);
    let worst_z = sampled.iter().map(|c| c.1).fold(0.0, f64::max);
    let pass = worst_closed < 1e-8 && worst_z < 3.0 && var_ok;
    verdict(
        1,
        "conjugacy oracle suite",
        pass,
        &format!("max closed-form error {worst_closed:.2e} (tol 1e-8), max |z| {worst_z:.2} (tol 3 SE), atom variances within 5%: {var_ok}"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// Criterion 2.

#[test]
fn criterion_2_mh_target_fidelity() {
    const KEEP: usize = 10_000;
    const THIN: usize = 10;
    let mut rng = ChaCha8Rng::seed_from_u64(2);

    // alpha with its margin zeroed: the target reduces to the prior tilt.
    let prior = Prior { a: 2.0, b: 1.0 };
    let p = 3usize;
    let zeros = vec![0.0; p];
    let proposal_var = ModelConfig::default().alpha_proposal_var;
    let mut alpha = 1.0;
    let mut alpha_draws = Vec::with_capacity(KEEP);
    for t in 0..(KEEP + 100) * THIN {
        alpha = mh_alpha(alpha, &zeros, 1.0, prior, proposal_var, &mut rng).0;
        if t >= 100 * THIN && t % THIN == 0 {
            alpha_draws.push(alpha);
        }
    }
    let target = |a: f64| {
        (prior.a - 1.0) * a.ln() - 0.5 * (p as f64 - 1.0) * (-(-2.0 * a).exp_m1()).ln() - prior.b * a
    };
    let ks_alpha = Grid::new(target, 1e-10, 60.0, 400_001).ks(&mut alpha_draws);

    // phi2 at a single voxel with three subjects and fixed atoms.
    let x: Vec<DenseTensor> = [0.1, 0.6, -0.4].iter().map(|&v| DenseTensor::filled(&[1, 1], v)).collect();
    let y = x.clone();
    let data = Dataset::new(x.clone(), y, None, None, vec![0, 1, 2], vec![]).unwrap();
    let config = ModelConfig { rank: 1, patch: 1, ..Default::default() };
    let ws = Workspace::new(&config, &data).unwrap();
    let mut state = ModelState::init(&config, &data, &ws.masks, &mut rng);
    let atoms = [0.3, -0.5, 0.9];
    state.atoms = vec![atoms.to_vec()];
    state.phi1 = 1.0;
    let mut sampler = Sampler::with_state(config.clone(), &data, 3, state).unwrap();
    let mut phi2_draws = Vec::with_capacity(KEEP);
    for t in 0..(KEEP + 100) * THIN {
        sampler.update_phi2(&mut rng).unwrap();
        if t >= 100 * THIN && t % THIN == 0 {
            phi2_draws.push(sampler.state().phi2);
        }
    }
    let xs: Vec<f64> = x.iter().map(|t| t.data()[0]).collect();
    let m = DVector::from_column_slice(&atoms);
    let phi2_target = |f: f64| {
        let k = DMatrix::from_fn(3, 3, |i, j| (-f * (xs[i] - xs[j]).powi(2)).exp());
        let det = k.determinant();
        match k.try_inverse() {
            Some(inv) if det > 0.0 => -0.5 * (m.transpose() * inv * &m)[(0, 0)] - 0.5 * det.ln(),
            _ => f64::NEG_INFINITY,
        }
    };
    let ks_phi2 = Grid::new(phi2_target, 1e-4, config.phi2_max, 200_001).ks(&mut phi2_draws);
    let pass = ks_alpha < 0.05 && ks_phi2 < 0.05;
    verdict(
        2,
        "MH target fidelity",
        pass,
        &format!("KS alpha {ks_alpha:.4}, KS phi2 {ks_phi2:.4} at {KEEP} draws (tol 0.05)"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// Criterion 3.

#[test]
fn criterion_3_kriging_exactness() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let shape = [3usize, 2];
    let n = 9;
    let tensor = |rng: &mut ChaCha8Rng| DenseTensor::from_vec(&shape, (0..6).map(|_| normal(rng)).collect()).unwrap();
    let x: Vec<DenseTensor> = (0..n).map(|_| tensor(&mut rng)).collect();
    let y: Vec<DenseTensor> = (0..n).map(|_| tensor(&mut rng)).collect();
    let z: Vec<Vec<f64>> = (0..n).map(|_| vec![normal(&mut rng)]).collect();
    let mut masks = vec![DenseTensor::filled(&shape, 1.0); n];
    masks[1].data_mut()[2] = 0.0;
    let data = Dataset::new(x, y, Some(z), Some(masks), (0..6).collect(), vec![6, 7, 8]).unwrap();
    let config = ModelConfig { rank: 1, covariates: 1, ..Default::default() };
    let (_, _, mut state) = tiny_problem(4);
    let ws = Workspace::new(&config, &data).unwrap();
    state.atoms = ws.masks.group_voxels.iter().map(|_| (0..6).map(|_| normal(&mut rng)).collect()).collect();
    let mut chain = Chain::new(&data.shape, &data.train, &ws.masks.group_voxels, vec![], 0, 1);
    chain.record(&state, 0.0, &ws.product(&state), false);
    let draws = kriging_draws(&chain, &data, &config, &data.test, 0).unwrap();

    let p = [3usize, 2];
    let mut worst: f64 = 0.0;
    let mut cov_err: f64 = 0.0;
    for v in 0..6 {
        let (i0, j0) = (v % 3, v / 3);
        let obs: Vec<usize> = data.train.iter().copied().filter(|&t| data.masks[t].data()[v] != 0.0).collect();
        let tp: Vec<Vec<f64>> = obs.iter().map(|&t| patch2(data.x[t].data(), p, i0, j0, 3)).collect();
        let sp: Vec<Vec<f64>> = data.test.iter().map(|&t| patch2(data.x[t].data(), p, i0, j0, 3)).collect();
        let th = rank1(state.theta.factor.margins(), 3, v);
        let s = th * th * state.phi1;
        let lin = |t: usize| {
            rank1(state.gamma.factor.margins(), 3, v) + rank1(state.delta[0].factor.margins(), 3, v) * data.z[t][0]
        };
        // Joint covariance of (training outcomes, noiseless test outcomes).
        let all: Vec<Vec<f64>> = tp.iter().chain(&sp).cloned().collect();
        let no = obs.len();
        let mut joint = corr(&all, &all, state.phi2) * s;
        for i in 0..no {
            joint[(i, i)] += state.sigma2;
        }
        let stt = joint.view((0, 0), (no, no)).into_owned();
        let sst = joint.view((no, 0), (3, no)).into_owned();
        let sss = joint.view((no, no), (3, 3)).into_owned();
        let inv = stt.clone().try_inverse().unwrap();
        let r = DVector::from_iterator(no, obs.iter().map(|&t| data.y[t].data()[v] - lin(t)));
        let mean = &sst * &inv * &r;
        let cov = &sss - &sst * &inv * sst.transpose();
        for (a, &t) in data.test.iter().enumerate() {
            let cell = (a * 6 + v) * draws.n_states;
            worst = worst.max((draws.mean[cell] - (lin(t) + mean[a])).abs());
            worst = worst.max((draws.var[cell] - cov[(a, a)]).abs());
        }
        let kt = corr(&tp, &tp, state.phi2);
        let kst = corr(&sp, &tp, state.phi2);
        let kss = corr(&sp, &sp, state.phi2);
        let (m2, c2) = krige_voxel(&kt, &kst, &kss, state.phi1, th, state.sigma2, &r).unwrap();
        cov_err = cov_err.max((m2 - &mean).amax()).max((c2 - &cov).amax());
    }
    let pass = worst < 1e-10 && cov_err < 1e-10;
    verdict(
        3,
        "kriging exactness",
        pass,
        &format!("pipeline mean/variance error {worst:.2e}, joint covariance error {cov_err:.2e} (tol 1e-10)"),
    );
    assert!(pass);
}

// ---------------------------------------------------------------------------
// Criteria 4, 5 and 8 share the desk-scale runs.

fn iterations() -> usize {
    match std::env::var("BTOTVC_ACCEPTANCE_ITERATIONS") {
        Ok(s) => {
            let n = s.parse().expect("iteration override must be an integer");
            let note = format!("note: desk-scale runs shortened to {n} iterations by BTOTVC_ACCEPTANCE_ITERATIONS\n");
            let _ = std::io::stdout().lock().write_all(note.as_bytes());
            n
        }
        Err(_) => 10_000,
    }
}

struct DeskRun {
    code: &'static str,
    band: (f64, f64),
    rpe: f64,
    baseline: f64,
    median_abs_z: f64,
    coef_rpe: f64,
    minutes: f64,
}

#[test]
fn criteria_4_5_8_desk_scale() {
    let iters = iterations();
    let cases = [("1.a.i", (0.40, 0.65)), ("2.a.ii", (0.25, 0.50)), ("4.b.ii", (0.25, 0.45)), ("3.a.i", (0.55, 0.75))];
    let mut runs = Vec::new();
    for (code, band) in cases {
        let sim = simulate(&SimSpec { seed: 1, ..SimSpec::from_code(code).unwrap() }).unwrap();
        let data = &sim.dataset;
        let config = ModelConfig { iterations: iters, ..Default::default() };
        let chain = run_chain(&config, data, 1).unwrap();
        let minutes = chain.timings.iter().sum::<f64>() / 60.0;
        let pred = kriging_predict(&chain, data, &config, &PredictOptions::default()).unwrap();
        let truth: Vec<DenseTensor> = data.test.iter().map(|&n| data.y[n].clone()).collect();
        let signal: Vec<DenseTensor> = data.test.iter().map(|&n| sim.signal[n].clone()).collect();
        let rpe_model = rpe(&truth, &pred.mean).unwrap();
        let baseline = rpe(&truth, &intercept_only_prediction(data).unwrap()).unwrap();
        let geweke = geweke_summary(&chain_geweke(&chain.traces).unwrap()).unwrap();
        let effect: Vec<DenseTensor> = chain.train.iter().map(|&n| sim.effect[n].clone()).collect();
        let estimate: Vec<DenseTensor> = (0..chain.train.len()).map(|i| chain.mean_product(i)).collect();
        let coef_rpe = rpe_per_voxel(&effect, &estimate).unwrap().mean;
        println!(
            "  {code}: RPE {rpe_model:.3} (vs noiseless {:.3}), intercept-only {baseline:.3}, median |z| {:.2}, \
             coefficient RPE {coef_rpe:.3}, phi2 acceptance {:.2}, {minutes:.1} min",
            rpe(&signal, &pred.mean).unwrap(),
            geweke.median_abs,
            chain.acceptance.phi2.rate()
        );
        runs.push(DeskRun { code, band, rpe: rpe_model, baseline, median_abs_z: geweke.median_abs, coef_rpe, minutes });
    }

    let c4 = runs.iter().all(|r| r.rpe >= r.band.0 && r.rpe <= r.band.1 && r.rpe < 0.9 && r.rpe < r.baseline);
    let detail4: Vec<String> = runs
        .iter()
        .map(|r| format!("{} {:.3} in [{:.2}, {:.2}] base {:.3} ({:.0} min)", r.code, r.rpe, r.band.0, r.band.1, r.baseline, r.minutes))
        .collect();
    verdict(4, "desk-scale prediction RPE", c4, &detail4.join("; "));

    let c5 = runs.iter().all(|r| r.median_abs_z < 1.96);
    let detail5: Vec<String> = runs.iter().map(|r| format!("{} {:.2}", r.code, r.median_abs_z)).collect();
    verdict(5, "median |Geweke z| < 1.96", c5, &detail5.join("; "));

    let s4 = runs.iter().find(|r| r.code == "4.b.ii").unwrap();
    let c8 = s4.coef_rpe < 0.5;
    verdict(8, "coefficient estimation", c8, &format!("scenario 4.b.ii per-voxel RPE {:.3} (tol < 0.5)", s4.coef_rpe));

    assert!(c4 && c5 && c8);
}

// ---------------------------------------------------------------------------
// Criterion 6.

#[test]
fn criterion_6_rank_selection() {
    let iters = match std::env::var("BTOTVC_RANK_ITERATIONS") {
        Ok(s) => s.parse().unwrap(),
        Err(_) => 1_000,
    };
    let mut hits = 0;
    let mut picks = Vec::new();
    for rep in 0..10u64 {
        let spec = SimSpec {
            shape: vec![6, 6, 6],
            n_train: 40,
            n_test: 0,
            seed: 100 + rep,
            intercept: true,
            ..SimSpec::from_code("4.a.i").unwrap()
        };
        let data = simulate(&spec).unwrap().dataset;
        let config = ModelConfig { iterations: iters, ..Default::default() };
        let report = rank_sweep(&data, &config, &[1, 2, 3, 4], rep).unwrap();
        let dics: Vec<String> = report.rows.iter().map(|r| format!("{:.1}", r.dic.dic)).collect();
        println!("  replicate {rep}: DIC [{}] -> rank {}", dics.join(", "), report.best);
        hits += (report.best == 2) as usize;
        picks.push(report.best);
    }
    let pass = hits >= 8;
    verdict(6, "rank selection", pass, &format!("rank 2 chosen in {hits}/10 replicates (need 8) at {iters} iterations, picks {picks:?}"));
    assert!(pass);
}

// ---------------------------------------------------------------------------
// Criterion 7.

#[test]
fn criterion_7_determinism_and_mask_invariance() {
    let spec = SimSpec { shape: vec![5, 5, 5], n_train: 12, n_test: 2, seed: 7, ..SimSpec::from_code("1.a.i").unwrap() };
    let mut data = simulate(&spec).unwrap().dataset;
    let cells = [(0usize, 3usize), (4, 60), (7, 124), (11, 0)];
    for &(n, v) in &cells {
        data.masks[n].data_mut()[v] = 0.0;
    }
    let config = ModelConfig { rank: 2, iterations: 30, ..Default::default() };
    let run = |d: &Dataset, threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| run_chain(&config, d, 13).unwrap())
    };
    let one = run(&data, 1);
    let four = run(&data, 4);
    let same_workers = one.states == four.states && one.traces == four.traces && one.deviance == four.deviance;
    let mut perturbed = data.clone();
    for &(n, v) in &cells {
        perturbed.y[n].data_mut()[v] += 1e3;
    }
    let masked = run(&perturbed, 2);
    let same_mask = one.states == masked.states && one.traces == masked.traces && one.deviance == masked.deviance;
    let groups_match = build_group_mask(&data, config.tau_mask).unwrap() == build_group_mask(&perturbed, config.tau_mask).unwrap();
    let pass = same_workers && same_mask && groups_match;
    verdict(
        7,
        "determinism and mask invariance",
        pass,
        &format!("1 vs 4 workers bit-identical: {same_workers}; masked-outcome perturbation bit-identical: {same_mask}"),
    );
    assert!(pass);
}
