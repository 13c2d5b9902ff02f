//! The Gibbs / Metropolis-Hastings sampler.
//!
//! One iteration updates, in order: the margins and prior hierarchy of Γ,
//! each D_s and Θ; the GP variance φ₁ and lengthscale φ₂; the GP atoms at
//! every group-mask voxel (in parallel, one random substream per voxel);
//! and the noise variance σ_e². Only training subjects enter the sampler.

mod chain;
pub mod conditionals;

use std::borrow::Cow;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub use chain::{Acceptance, Adaptation, Chain, Checkpoint, Counter};
use conditionals::*;

use crate::dist::{sample_exponential, sample_inv_gamma, standard_normal};
use crate::error::{Error, Result};
use crate::linalg::{cholesky_jittered, Factor};
use crate::model::{build_group_mask, CpBlock, Dataset, MaskSet, ModelConfig, ModelState, PatchTable};
use crate::rng::{RngStream, StreamKind, StreamLabel};
use crate::tensor::{mode_index, squared_distance, DenseTensor};

/// Acceptance rate the φ₂ proposal is tuned towards during burn-in.
pub const TARGET_ACCEPTANCE: f64 = 0.44;
/// Below this `τ·w` the local scale is redrawn from its prior.
pub const DEGENERATE_SCALE: f64 = 1e-300;
/// Kernel matrices are cached across iterations while they fit in this many bytes.
pub const KERNEL_CACHE_BYTES: usize = 1 << 30;

/// Which CP block a margin update acts on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Target {
    Gamma,
    Delta(usize),
    Theta,
}

/// Training data rearranged for the sweeps: subject-major flat arrays over
/// training subjects, with masked cells zeroed.
pub struct Workspace {
    pub shape: Vec<usize>,
    pub n_voxels: usize,
    pub train: Vec<usize>,
    pub masks: MaskSet,
    y: Vec<f64>,
    mask: Vec<f64>,
    /// Centre input values X_n(v).
    xc: Vec<f64>,
    z: Vec<Vec<f64>>,
    observed: usize,
    patches: PatchTable,
}

impl Workspace {
    pub fn new(config: &ModelConfig, data: &Dataset) -> Result<Self> {
        data.validate()?;
        let masks = build_group_mask(data, config.tau_mask)?;
        let nv = data.n_voxels();
        let nt = data.train.len();
        let mut y = vec![0.0; nt * nv];
        let mut mask = vec![0.0; nt * nv];
        let mut xc = vec![0.0; nt * nv];
        for (i, &n) in data.train.iter().enumerate() {
            for v in 0..nv {
                xc[i * nv + v] = data.x[n].data()[v];
                if data.mask_on(n, v) {
                    mask[i * nv + v] = 1.0;
                    y[i * nv + v] = data.y[n].data()[v];
                }
            }
        }
        let observed = mask.iter().filter(|&&m| m != 0.0).count();
        let z = data.train.iter().map(|&n| data.z[n].clone()).collect();
        Ok(Self {
            shape: data.shape.clone(),
            n_voxels: nv,
            train: data.train.clone(),
            masks,
            y,
            mask,
            xc,
            z,
            observed,
            patches: PatchTable::new(&data.shape, config.patch)?,
        })
    }

    pub fn n_train(&self) -> usize {
        self.train.len()
    }

    pub fn observed(&self) -> usize {
        self.observed
    }

    /// Training patches at voxel `v`, one row per training subject.
    pub fn patches_at(&self, v: usize) -> Vec<Vec<f64>> {
        let nv = self.n_voxels;
        (0..self.n_train())
            .map(|i| {
                let x = &self.xc[i * nv..(i + 1) * nv];
                self.patches.sources_of(v).iter().map(|s| s.map_or(0.0, |o| x[o])).collect()
            })
            .collect()
    }

    fn d2_at(&self, v: usize) -> DMatrix<f64> {
        let p = self.patches_at(v);
        let n = p.len();
        let mut d = DMatrix::zeros(n, n);
        for j in 0..n {
            for i in 0..j {
                let s = squared_distance(&p[i], &p[j]);
                d[(i, j)] = s;
                d[(j, i)] = s;
            }
        }
        d
    }

    /// Θ-weight of training subject `i` at voxel `v`: the GP atom inside the
    /// group mask, the input value elsewhere.
    #[inline]
    fn linear_weight(&self, state: &ModelState, i: usize, v: usize) -> f64 {
        match self.masks.group_index[v] {
            Some(k) => state.atoms[k][i],
            None => self.xc[i * self.n_voxels + v],
        }
    }

    /// Θ(v)·A_n(v) for every training subject and voxel.
    pub fn product(&self, state: &ModelState) -> Vec<f64> {
        self.product_dense(&state.theta.factor.compose(), &state.atoms)
    }

    fn product_dense(&self, theta: &DenseTensor, atoms: &[Vec<f64>]) -> Vec<f64> {
        let nv = self.n_voxels;
        let mut out = vec![0.0; self.n_train() * nv];
        for i in 0..self.n_train() {
            for v in 0..nv {
                let weight = match self.masks.group_index[v] {
                    Some(k) => atoms[k][i],
                    None => self.xc[i * nv + v],
                };
                out[i * nv + v] = theta.data()[v] * weight;
            }
        }
        out
    }

    /// Masked residuals `Y - Γ - Θ·A - Σ D_s z_s`, and the Θ·A products.
    pub fn residual(&self, state: &ModelState) -> (Vec<f64>, Vec<f64>) {
        let delta: Vec<_> = state.delta.iter().map(|b| b.factor.compose()).collect();
        self.residual_dense(&state.gamma.factor.compose(), &state.theta.factor.compose(), &delta, &state.atoms)
    }

    /// As [`Workspace::residual`], from composed coefficient tensors.
    pub fn residual_dense(
        &self,
        gamma: &DenseTensor,
        theta: &DenseTensor,
        delta: &[DenseTensor],
        atoms: &[Vec<f64>],
    ) -> (Vec<f64>, Vec<f64>) {
        let nv = self.n_voxels;
        let product = self.product_dense(theta, atoms);
        let mut e = vec![0.0; product.len()];
        for i in 0..self.n_train() {
            for v in 0..nv {
                let idx = i * nv + v;
                if self.mask[idx] == 0.0 {
                    continue;
                }
                let mut fit = gamma.data()[v] + product[idx];
                for (s, d) in delta.iter().enumerate() {
                    fit += d.data()[v] * self.z[i][s];
                }
                e[idx] = self.y[idx] - fit;
            }
        }
        (e, product)
    }

    /// `Σ_n Σ_v [(R/σ_e)² + 2 log σ_e + log 2π]` over observed cells.
    pub fn deviance(&self, residual: &[f64], sigma2: f64) -> f64 {
        let ss: f64 = residual.iter().map(|r| r * r).sum();
        ss / sigma2 + self.observed as f64 * (sigma2.ln() + (2.0 * std::f64::consts::PI).ln())
    }
}

/// Per-voxel correlation matrix and its factor at the current φ₂.
struct VoxelGp {
    kt: DMatrix<f64>,
    factor: Factor,
}

struct GpCache {
    enabled: bool,
    d2: Vec<DMatrix<f64>>,
    phi2: f64,
    current: Vec<VoxelGp>,
}

impl GpCache {
    fn new(ws: &Workspace) -> Self {
        let k = ws.masks.group_voxels.len();
        let nt = ws.n_train();
        let enabled = k * nt * nt * 8 * 3 <= KERNEL_CACHE_BYTES;
        let d2 = if enabled { ws.masks.group_voxels.par_iter().map(|&v| ws.d2_at(v)).collect() } else { Vec::new() };
        Self { enabled, d2, phi2: f64::NAN, current: Vec::new() }
    }

    fn d2<'a>(&'a self, ws: &Workspace, k: usize) -> Cow<'a, DMatrix<f64>> {
        if self.enabled {
            Cow::Borrowed(&self.d2[k])
        } else {
            Cow::Owned(ws.d2_at(ws.masks.group_voxels[k]))
        }
    }

    fn build(&self, ws: &Workspace, k: usize, phi2: f64) -> Result<VoxelGp> {
        let kt = self.d2(ws, k).map(|d| (-phi2 * d).exp());
        let factor = cholesky_jittered(kt.clone())?;
        Ok(VoxelGp { kt, factor })
    }

    fn ensure(&mut self, ws: &Workspace, phi2: f64) -> Result<()> {
        if !self.enabled || self.phi2 == phi2 {
            return Ok(());
        }
        let built: Result<Vec<VoxelGp>> =
            (0..ws.masks.group_voxels.len()).into_par_iter().map(|k| self.build(ws, k, phi2)).collect();
        self.current = built?;
        self.phi2 = phi2;
        Ok(())
    }

    fn invalidate(&mut self) {
        self.phi2 = f64::NAN;
        self.current.clear();
    }

    fn with_current<T>(&self, ws: &Workspace, k: usize, phi2: f64, f: impl FnOnce(&VoxelGp) -> T) -> Result<T> {
        if self.enabled {
            debug_assert_eq!(self.phi2, phi2);
            Ok(f(&self.current[k]))
        } else {
            Ok(f(&self.build(ws, k, phi2)?))
        }
    }
}

enum Weights<'a> {
    One,
    Covariate(usize),
    Full(&'a [f64]),
}

/// The sampler: owns the current state, the chain being built and the
/// bookkeeping needed to resume.
pub struct Sampler {
    config: ModelConfig,
    seed: u64,
    ws: Workspace,
    state: ModelState,
    iteration: usize,
    adaptation: Adaptation,
    chain: Chain,
    cache: GpCache,
    resid: Vec<f64>,
}

impl Sampler {
    pub fn new(config: ModelConfig, data: &Dataset, seed: u64) -> Result<Self> {
        config.validate()?;
        let ws = Workspace::new(&config, data)?;
        let master = RngStream::new(seed);
        let mut rng = master.substream(StreamLabel::new(StreamKind::Init, 0, 0)).rng();
        let state = ModelState::init(&config, data, &ws.masks, &mut rng);
        Self::assemble(config, ws, seed, state, 0, None, None)
    }

    /// Start from a caller-supplied state instead of the default initialisation.
    pub fn with_state(config: ModelConfig, data: &Dataset, seed: u64, state: ModelState) -> Result<Self> {
        config.validate()?;
        let ws = Workspace::new(&config, data)?;
        Self::assemble(config, ws, seed, state, 0, None, None)
    }

    pub fn resume(cp: Checkpoint, data: &Dataset) -> Result<Self> {
        cp.config.validate()?;
        let ws = Workspace::new(&cp.config, data)?;
        if cp.chain.train != ws.train || cp.chain.group_voxels != ws.masks.group_voxels {
            return Err(Error::Validation("checkpoint does not match this dataset's split or group mask".into()));
        }
        Self::assemble(cp.config, ws, cp.seed, cp.state, cp.iteration, Some(cp.adaptation), Some(cp.chain))
    }

    fn assemble(
        config: ModelConfig,
        ws: Workspace,
        seed: u64,
        state: ModelState,
        iteration: usize,
        adaptation: Option<Adaptation>,
        chain: Option<Chain>,
    ) -> Result<Self> {
        let s = ws.z.first().map_or(0, Vec::len);
        if config.covariates != 0 && config.covariates != s {
            return Err(Error::Validation(format!(
                "config declares {} covariates, dataset has {s}",
                config.covariates
            )));
        }
        check_state_shape(&state, &config, &ws, s)?;
        state.validate()?;
        if config.trace_subject >= ws.n_train() {
            return Err(Error::Config(format!(
                "trace_subject {} out of range for {} training subjects",
                config.trace_subject,
                ws.n_train()
            )));
        }
        let trace_voxels = config.trace_voxels.clone().unwrap_or_else(|| ws.masks.group_voxels.clone());
        if let Some(&v) = trace_voxels.iter().find(|&&v| v >= ws.n_voxels) {
            return Err(Error::Config(format!("trace voxel {v} out of range")));
        }
        let chain = chain.unwrap_or_else(|| {
            Chain::new(&ws.shape, &ws.train, &ws.masks.group_voxels, trace_voxels, config.trace_subject, s)
        });
        let adaptation = adaptation.unwrap_or(Adaptation { log_var: config.phi2_proposal_var.ln(), steps: 0 });
        let cache = GpCache::new(&ws);
        let resid = ws.residual(&state).0;
        Ok(Self { config, seed, ws, state, iteration, adaptation, chain, cache, resid })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn state(&self) -> &ModelState {
        &self.state
    }

    pub fn state_mut(&mut self) -> &mut ModelState {
        self.cache.invalidate();
        &mut self.state
    }

    pub fn workspace(&self) -> &Workspace {
        &self.ws
    }

    pub fn chain(&self) -> &Chain {
        &self.chain
    }

    pub fn into_chain(self) -> Chain {
        self.chain
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn adaptation(&self) -> Adaptation {
        self.adaptation
    }

    pub fn phi2_proposal_var(&self) -> f64 {
        self.adaptation.log_var.exp()
    }

    pub fn is_done(&self) -> bool {
        self.iteration >= self.config.iterations
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            seed: self.seed,
            iteration: self.iteration,
            state: self.state.clone(),
            adaptation: self.adaptation,
            chain: self.chain.clone(),
        }
    }

    /// Run to `config.iterations`.
    pub fn run(&mut self) -> Result<()> {
        self.run_until(self.config.iterations)
    }

    pub fn run_until(&mut self, iteration: usize) -> Result<()> {
        let stop = iteration.min(self.config.iterations);
        while self.iteration < stop {
            self.step()?;
        }
        Ok(())
    }

    /// One full sweep. On error the state is rolled back to the start of the
    /// sweep, so [`Sampler::checkpoint`] stays resumable.
    pub fn step(&mut self) -> Result<()> {
        let t = self.iteration;
        let start = Instant::now();
        let backup = self.state.clone();
        let adaptation = self.adaptation;
        let acceptance = self.chain.acceptance.clone();
        let failures = self.chain.atom_failures;
        match self.sweep(t) {
            Ok(()) => {}
            Err(e) => {
                self.state = backup;
                self.adaptation = adaptation;
                self.chain.acceptance = acceptance;
                self.chain.atom_failures = failures;
                self.cache.invalidate();
                self.resid = self.ws.residual(&self.state).0;
                return Err(match e {
                    Error::Numerical { .. } => e,
                    other => Error::Numerical { iteration: t, message: other.to_string() },
                });
            }
        }
        let (resid, product) = self.ws.residual(&self.state);
        self.resid = resid;
        if self.config.is_retained(t) {
            let dev = self.ws.deviance(&self.resid, self.state.sigma2);
            self.chain.record(&self.state, dev, &product, self.config.store_atoms);
        }
        self.chain.phi2_proposal_var.push(self.phi2_proposal_var());
        self.chain.timings.push(start.elapsed().as_secs_f64());
        self.iteration += 1;
        Ok(())
    }

    fn sweep(&mut self, t: usize) -> Result<()> {
        let master = RngStream::new(self.seed);
        let mut rng = master.substream(StreamLabel::sweep(t as u64)).rng();
        self.resid = self.ws.residual(&self.state).0;
        self.update_block(Target::Gamma, &mut rng)?;
        for s in 0..self.state.delta.len() {
            self.update_block(Target::Delta(s), &mut rng)?;
        }
        self.update_block(Target::Theta, &mut rng)?;
        check_finite(&self.resid, t, "residual after margin updates")?;
        if !self.ws.masks.group_voxels.is_empty() {
            self.update_phi1(&mut rng)?;
            let accepted = self.update_phi2(&mut rng)?;
            if t < self.config.burnin_iterations() {
                self.adapt(accepted);
            }
            self.update_atoms(t)?;
        }
        self.resid = self.ws.residual(&self.state).0;
        self.update_sigma2(&mut rng)?;
        self.state.validate().map_err(|e| Error::Numerical { iteration: t, message: e.to_string() })
    }

    fn adapt(&mut self, accepted: bool) {
        let a = &mut self.adaptation;
        a.steps += 1;
        let gain = 1.0 / (a.steps as f64).sqrt();
        a.log_var += gain * ((accepted as u8 as f64) - TARGET_ACCEPTANCE);
    }

    fn block(&self, target: Target) -> &CpBlock {
        match target {
            Target::Gamma => &self.state.gamma,
            Target::Delta(s) => &self.state.delta[s],
            Target::Theta => &self.state.theta,
        }
    }

    fn block_mut(&mut self, target: Target) -> &mut CpBlock {
        match target {
            Target::Gamma => &mut self.state.gamma,
            Target::Delta(s) => &mut self.state.delta[s],
            Target::Theta => &mut self.state.theta,
        }
    }

    /// Per-voxel `Σ_n mask · weight²`.
    fn weight_energy(&self, weights: &Weights) -> Vec<f64> {
        let nv = self.ws.n_voxels;
        let mut q = vec![0.0; nv];
        for i in 0..self.ws.n_train() {
            for v in 0..nv {
                let idx = i * nv + v;
                let m = self.ws.mask[idx];
                if m != 0.0 {
                    let w = self.weight(weights, i, idx);
                    q[v] += w * w;
                }
            }
        }
        q
    }

    #[inline]
    fn weight(&self, weights: &Weights, i: usize, idx: usize) -> f64 {
        match weights {
            Weights::One => 1.0,
            Weights::Covariate(s) => self.ws.z[i][*s],
            Weights::Full(a) => a[idx],
        }
    }

    fn theta_weights(&self) -> Vec<f64> {
        let nv = self.ws.n_voxels;
        let mut a = vec![0.0; self.ws.n_train() * nv];
        for i in 0..self.ws.n_train() {
            for v in 0..nv {
                a[i * nv + v] = self.ws.linear_weight(&self.state, i, v);
            }
        }
        a
    }

    /// Likelihood precision `m_j` and linear term `n_j` of every element of
    /// margin `(d, r)`, given the current residual.
    fn margin_stats(&self, target: Target, d: usize, r: usize, weights: &Weights, energy: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let shape = &self.ws.shape;
        let nv = self.ws.n_voxels;
        let f = &self.block(target).factor;
        let comp = f.component(r);
        let part = f.partial_outer(r, d);
        let mut proj = vec![0.0; nv];
        for i in 0..self.ws.n_train() {
            for v in 0..nv {
                let idx = i * nv + v;
                let e = self.resid[idx];
                if e != 0.0 {
                    proj[v] += self.weight(weights, i, idx) * e;
                }
            }
        }
        let inv_s2 = 1.0 / self.state.sigma2;
        let p = shape[d];
        let mut m = vec![0.0; p];
        let mut n = vec![0.0; p];
        for v in 0..nv {
            let j = mode_index(v, shape, d);
            let t = part.data()[v];
            let pv = proj[v] + comp.data()[v] * energy[v];
            m[j] += t * t * energy[v] * inv_s2;
            n[j] += t * pv * inv_s2;
        }
        (m, n)
    }

    fn weights_for(&self, target: Target) -> (Option<Vec<f64>>, usize) {
        match target {
            Target::Gamma => (None, 0),
            Target::Delta(s) => (None, s + 1),
            Target::Theta => (Some(self.theta_weights()), 0),
        }
    }

    /// Conditional (mean, variance) of every element of margin `(d, r)` at
    /// the current state, each given its current neighbours.
    pub fn margin_conditionals(&mut self, target: Target, d: usize, r: usize) -> Vec<(f64, f64)> {
        self.resid = self.ws.residual(&self.state).0;
        let (full, cov) = self.weights_for(target);
        let weights = make_weights(&full, cov);
        let energy = self.weight_energy(&weights);
        let (m, n) = self.margin_stats(target, d, r, &weights, &energy);
        let b = self.block(target);
        let x = b.factor.margin(d, r);
        let tau_w = b.tau * b.w[d][r];
        (0..x.len()).map(|j| margin_conditional(x, j, m[j], n[j], tau_w, b.alpha[d][r])).collect()
    }

    /// Margins, local scales, rates, global scale and decays of one block.
    pub fn update_block<R: Rng + ?Sized>(&mut self, target: Target, rng: &mut R) -> Result<()> {
        let (full, cov) = self.weights_for(target);
        let weights = make_weights(&full, cov);
        let energy = self.weight_energy(&weights);
        let shape = self.ws.shape.clone();
        let rank = self.config.rank;
        let nv = self.ws.n_voxels;
        for d in 0..shape.len() {
            for r in 0..rank {
                {
                    let b = self.block_mut(target);
                    if b.tau * b.w[d][r] < DEGENERATE_SCALE {
                        b.w[d][r] = sample_exponential(b.lambda[d][r] / 2.0, rng)?;
                    }
                }
                let (m, n) = self.margin_stats(target, d, r, &weights, &energy);
                let old = self.block(target).factor.component(r);
                {
                    let b = self.block_mut(target);
                    let tau_w = b.tau * b.w[d][r];
                    let alpha = b.alpha[d][r];
                    draw_margin(b.factor.margin_mut(d, r), &m, &n, tau_w, alpha, rng);
                }
                let new = self.block(target).factor.component(r);
                for i in 0..self.ws.n_train() {
                    for v in 0..nv {
                        let idx = i * nv + v;
                        if self.ws.mask[idx] != 0.0 {
                            let w = self.weight(&weights, i, idx);
                            self.resid[idx] -= w * (new.data()[v] - old.data()[v]);
                        }
                    }
                }
            }
        }
        let priors = self.config.priors.clone();
        let alpha_var = self.config.alpha_proposal_var;
        let b = self.block_mut(target);
        for d in 0..shape.len() {
            for r in 0..rank {
                let x = b.factor.margin(d, r);
                b.w[d][r] = draw_w(x, b.tau, b.alpha[d][r], b.lambda[d][r], rng)?;
                b.lambda[d][r] = draw_lambda(priors.lambda, x.len(), b.w[d][r], rng)?;
            }
        }
        b.tau = draw_tau(b.factor.margins(), &b.w, &b.alpha, priors.tau, rng)?;
        let mut counter = Counter::default();
        for d in 0..shape.len() {
            for r in 0..rank {
                let x = b.factor.margin(d, r);
                let (a, acc) =
                    mh_alpha(b.alpha[d][r], x, b.tau * b.w[d][r], priors.alpha, alpha_var, rng);
                b.alpha[d][r] = a;
                counter.record(acc);
            }
        }
        let c = match target {
            Target::Gamma => &mut self.chain.acceptance.gamma_alpha,
            Target::Delta(s) => &mut self.chain.acceptance.delta_alpha[s],
            Target::Theta => &mut self.chain.acceptance.theta_alpha,
        };
        c.accepted += counter.accepted;
        c.proposed += counter.proposed;
        Ok(())
    }

    fn atom_vector(&self, k: usize) -> DVector<f64> {
        DVector::from_column_slice(&self.state.atoms[k])
    }

    /// `M_v^T K̃_v^{-1} M_v` and `log det K̃_v` at the current φ₂ for every group voxel.
    fn current_gp_terms(&mut self) -> Result<Vec<(f64, f64)>> {
        let phi2 = self.state.phi2;
        self.cache.ensure(&self.ws, phi2)?;
        let this = &*self;
        (0..this.ws.masks.group_voxels.len())
            .into_par_iter()
            .map(|k| {
                let m = this.atom_vector(k);
                this.cache.with_current(&this.ws, k, phi2, |g| (g.factor.quad_form(&m), g.factor.log_det()))
            })
            .collect()
    }

    pub fn update_phi1<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        let terms = self.current_gp_terms()?;
        let quad: f64 = terms.iter().map(|t| t.0).sum();
        let (shape, scale) = phi1_params(quad, self.ws.n_train(), terms.len(), self.config.priors.phi1);
        self.state.phi1 = sample_inv_gamma(shape, scale, rng)?;
        Ok(())
    }

    /// Log-normal random-walk step on φ₂ against the GP likelihood of all
    /// atoms, with a uniform prior on `(0, phi2_max]`.
    pub fn update_phi2<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<bool> {
        let sd = self.phi2_proposal_var().sqrt();
        let xi = standard_normal(rng);
        let u: f64 = rng.random();
        let current = self.state.phi2;
        let proposal = current * (sd * xi).exp();
        let mut accepted = false;
        if proposal <= self.config.phi2_max && proposal > 0.0 && proposal.is_finite() {
            let phi1 = self.state.phi1;
            let cur_terms = self.current_gp_terms()?;
            let this = &*self;
            let built: Vec<Option<(VoxelGp, f64, f64)>> = (0..this.ws.masks.group_voxels.len())
                .into_par_iter()
                .map(|k| {
                    this.cache.build(&this.ws, k, proposal).ok().map(|g| {
                        let m = this.atom_vector(k);
                        let q = g.factor.quad_form(&m);
                        let ld = g.factor.log_det();
                        (g, q, ld)
                    })
                })
                .collect();
            if built.iter().all(Option::is_some) {
                let lik = |terms: &mut dyn Iterator<Item = (f64, f64)>| -> f64 {
                    terms.map(|(q, ld)| -0.5 * q / phi1 - 0.5 * ld).sum()
                };
                let l_cur = lik(&mut cur_terms.iter().copied());
                let l_new = lik(&mut built.iter().map(|b| {
                    let b = b.as_ref().expect("checked");
                    (b.1, b.2)
                }));
                let log_ratio = l_new - l_cur + proposal.ln() - current.ln();
                if log_ratio.is_finite() && (log_ratio >= 0.0 || u.ln() < log_ratio) {
                    accepted = true;
                    self.state.phi2 = proposal;
                    if self.cache.enabled {
                        self.cache.current = built.into_iter().map(|b| b.expect("checked").0).collect();
                        self.cache.phi2 = proposal;
                    }
                }
            }
        }
        self.chain.acceptance.phi2.record(accepted);
        Ok(accepted)
    }

    /// Draw the atoms of every group voxel; voxel `v` uses the substream
    /// keyed by `(iteration, v)`.
    pub fn update_atoms(&mut self, iteration: usize) -> Result<()> {
        let phi2 = self.state.phi2;
        self.cache.ensure(&self.ws, phi2)?;
        let theta = self.state.theta.factor.compose();
        let master = RngStream::new(self.seed);
        let nv = self.ws.n_voxels;
        let nt = self.ws.n_train();
        let this = &*self;
        let draws: Vec<Result<Vec<f64>>> = this
            .ws
            .masks
            .group_voxels
            .par_iter()
            .enumerate()
            .map(|(k, &v)| {
                let mut rng: ChaCha8Rng = master.substream(StreamLabel::atom(iteration as u64, v as u64)).rng();
                let th = theta.data()[v];
                let old = &this.state.atoms[k];
                let observed: Vec<bool> = (0..nt).map(|i| this.ws.mask[i * nv + v] != 0.0).collect();
                let y: Vec<f64> = (0..nt).map(|i| this.resid[i * nv + v] + th * old[i]).collect();
                this.cache
                    .with_current(&this.ws, k, phi2, |g| {
                        draw_atoms(&g.kt, &g.factor, this.state.phi1, th, this.state.sigma2, &y, &observed, &mut rng)
                    })
                    .and_then(|r| r)
            })
            .collect();
        let mut failures = 0u64;
        for (k, d) in draws.into_iter().enumerate() {
            match d {
                Ok(a) => self.state.atoms[k] = a,
                Err(e) => {
                    failures += 1;
                    log::debug!("atom update at voxel {} kept previous value: {e}", self.ws.masks.group_voxels[k]);
                }
            }
        }
        if failures > 0 {
            log::warn!("iteration {iteration}: {failures} atom updates failed and kept their previous values");
        }
        self.chain.atom_failures += failures;
        Ok(())
    }

    pub fn update_sigma2<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        let ss: f64 = self.resid.iter().map(|r| r * r).sum();
        self.state.sigma2 = draw_sigma2(ss, self.ws.observed, self.config.priors.noise, rng)?;
        Ok(())
    }

    /// Recompute the residual from the current state (after direct edits).
    pub fn refresh_residual(&mut self) {
        self.resid = self.ws.residual(&self.state).0;
    }

    pub fn residual(&self) -> &[f64] {
        &self.resid
    }
}

fn make_weights(full: &Option<Vec<f64>>, covariate: usize) -> Weights<'_> {
    match (full, covariate) {
        (Some(a), _) => Weights::Full(a),
        (None, 0) => Weights::One,
        (None, s) => Weights::Covariate(s - 1),
    }
}

fn check_finite(xs: &[f64], iteration: usize, what: &str) -> Result<()> {
    match xs.iter().position(|x| !x.is_finite()) {
        Some(k) => Err(Error::Numerical { iteration, message: format!("non-finite {what} at cell {k}") }),
        None => Ok(()),
    }
}

fn check_state_shape(state: &ModelState, config: &ModelConfig, ws: &Workspace, s: usize) -> Result<()> {
    let ok_block = |b: &CpBlock| {
        b.factor.shape() == ws.shape.as_slice()
            && b.factor.rank() == config.rank
            && b.w.len() == ws.shape.len()
            && [&b.w, &b.lambda, &b.alpha].iter().all(|m| m.len() == ws.shape.len() && m.iter().all(|r| r.len() == config.rank))
    };
    if !ok_block(&state.gamma) || !ok_block(&state.theta) || state.delta.len() != s || !state.delta.iter().all(ok_block) {
        return Err(Error::State("state blocks do not match the configured rank, shape or covariate count".into()));
    }
    if state.atoms.len() != ws.masks.group_voxels.len() || state.atoms.iter().any(|a| a.len() != ws.n_train()) {
        return Err(Error::State(format!(
            "state has {} atom vectors, expected {} of length {}",
            state.atoms.len(),
            ws.masks.group_voxels.len(),
            ws.n_train()
        )));
    }
    Ok(())
}

/// Fit a chain from the default initialisation.
pub fn run_chain(config: &ModelConfig, data: &Dataset, seed: u64) -> Result<Chain> {
    let mut s = Sampler::new(config.clone(), data, seed)?;
    s.run()?;
    Ok(s.into_chain())
}
