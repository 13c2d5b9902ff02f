//! Model configuration, parameter state, prior covariances, GP kernels and
//! the subject / group mask machinery.

use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dist::standard_normal;
use crate::error::{Error, Result};
use crate::tensor::{patch_offsets, patch_sources, unravel, voxel_count, CpFactor, DenseTensor};

/// Two positive hyperparameters `(a, b)`. For Gamma priors `b` is a rate,
/// for inverse-gamma priors it is a scale.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prior {
    pub a: f64,
    pub b: f64,
}

impl Prior {
    pub const fn new(a: f64, b: f64) -> Self {
        Self { a, b }
    }

    fn check(&self, name: &str) -> Result<()> {
        if self.a > 0.0 && self.b > 0.0 && self.a.is_finite() && self.b.is_finite() {
            Ok(())
        } else {
            Err(Error::Config(format!("{name} prior needs a, b > 0, got ({}, {})", self.a, self.b)))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyperpriors {
    /// Global scales τ ~ Ga(a, b).
    pub tau: Prior,
    /// Rates λ ~ Ga(a, b).
    pub lambda: Prior,
    /// AR(1) decay α ~ Ga(a, b).
    pub alpha: Prior,
    /// GP variance φ₁ ~ Inv-Ga(a, b).
    pub phi1: Prior,
    /// Noise variance σ_e² ~ Inv-Ga(a, b).
    pub noise: Prior,
}

impl Default for Hyperpriors {
    fn default() -> Self {
        Self {
            tau: Prior::new(1.0, 1.0),
            lambda: Prior::new(1.0, 1.0),
            alpha: Prior::new(1.0, 1.0),
            phi1: Prior::new(1.0, 1.0),
            noise: Prior::new(0.01, 0.01),
        }
    }
}

/// Everything that controls a fit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// CP rank shared by Γ, Θ and every D_s.
    pub rank: usize,
    /// Patch edge length h (odd).
    pub patch: usize,
    pub priors: Hyperpriors,
    pub iterations: usize,
    /// Fraction of iterations discarded as burn-in.
    pub burnin: f64,
    pub thin: usize,
    /// Variance of the log-normal random walk for every α.
    pub alpha_proposal_var: f64,
    /// Starting variance of the log-normal random walk for φ₂ (adapted during burn-in).
    pub phi2_proposal_var: f64,
    /// Upper end of the uniform prior on φ₂.
    pub phi2_max: f64,
    pub tau_mask: f64,
    /// Number of covariates S; must match the dataset.
    pub covariates: usize,
    /// Standard deviation of the initial margin draws.
    pub init_margin_sd: f64,
    /// Training subject (position within the training split) whose Θ·M traces are kept.
    pub trace_subject: usize,
    /// Voxels (flat offsets) to trace; `None` traces every group-mask voxel.
    pub trace_voxels: Option<Vec<usize>>,
    /// Keep the GP atoms in every retained snapshot.
    pub store_atoms: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            rank: 3,
            patch: 3,
            priors: Hyperpriors::default(),
            iterations: 10_000,
            burnin: 0.5,
            thin: 1,
            alpha_proposal_var: 0.25,
            phi2_proposal_var: 0.25,
            phi2_max: 100.0,
            tau_mask: 0.8,
            covariates: 0,
            init_margin_sd: 0.1,
            trace_subject: 0,
            trace_voxels: None,
            store_atoms: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.rank == 0 {
            return bad("rank must be at least 1".into());
        }
        if self.patch == 0 || self.patch % 2 == 0 {
            return bad(format!("patch size must be a positive odd integer, got {}", self.patch));
        }
        let p = &self.priors;
        p.tau.check("tau")?;
        p.lambda.check("lambda")?;
        p.alpha.check("alpha")?;
        p.phi1.check("phi1")?;
        p.noise.check("noise")?;
        if self.iterations == 0 {
            return bad("iterations must be positive".into());
        }
        if !(0.0..1.0).contains(&self.burnin) {
            return bad(format!("burn-in fraction must lie in [0, 1), got {}", self.burnin));
        }
        if self.thin == 0 {
            return bad("thin must be positive".into());
        }
        for (name, v) in [
            ("alpha_proposal_var", self.alpha_proposal_var),
            ("phi2_proposal_var", self.phi2_proposal_var),
            ("phi2_max", self.phi2_max),
            ("init_margin_sd", self.init_margin_sd),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        if !(self.tau_mask > 0.0 && self.tau_mask <= 1.0) {
            return bad(format!("tau_mask must lie in (0, 1], got {}", self.tau_mask));
        }
        Ok(())
    }

    pub fn burnin_iterations(&self) -> usize {
        (self.iterations as f64 * self.burnin).floor() as usize
    }

    /// Whether 0-based iteration `t` is kept.
    pub fn is_retained(&self, t: usize) -> bool {
        let b = self.burnin_iterations();
        t >= b && (t - b + 1) % self.thin == 0
    }

    pub fn retained_count(&self) -> usize {
        (self.iterations - self.burnin_iterations()) / self.thin
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let c: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }
}

/// A CP coefficient tensor together with its prior hierarchy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CpBlock {
    pub factor: CpFactor,
    /// Per-margin scales w[d][r].
    pub w: Vec<Vec<f64>>,
    /// Rates λ[d][r] of the exponential prior on w.
    pub lambda: Vec<Vec<f64>>,
    /// AR(1) decays α[d][r].
    pub alpha: Vec<Vec<f64>>,
    /// Global scale τ.
    pub tau: f64,
}

impl CpBlock {
    pub fn init<R: Rng + ?Sized>(shape: &[usize], rank: usize, margin_sd: f64, rng: &mut R) -> Self {
        let factor = CpFactor::from_fn(shape, rank, |_, _, _| margin_sd * standard_normal(rng));
        let ones = vec![vec![1.0; rank]; shape.len()];
        Self { factor, w: ones.clone(), lambda: ones.clone(), alpha: ones, tau: 1.0 }
    }

    fn check(&self, name: &str) -> Result<()> {
        let all = self.w.iter().chain(&self.lambda).chain(&self.alpha).flatten();
        if all.chain(std::iter::once(&self.tau)).any(|&x| !(x > 0.0 && x.is_finite())) {
            return Err(Error::State(format!("{name}: scale, rate or decay not positive and finite")));
        }
        if self.factor.margins().iter().flatten().flatten().any(|x| !x.is_finite()) {
            return Err(Error::State(format!("{name}: non-finite margin")));
        }
        Ok(())
    }
}

/// All sampled quantities at one iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub gamma: CpBlock,
    pub theta: CpBlock,
    pub delta: Vec<CpBlock>,
    pub phi1: f64,
    pub phi2: f64,
    pub sigma2: f64,
    /// GP atoms, one vector over training subjects per group-mask voxel
    /// (in [`MaskSet::group_voxels`] order). May be empty in stored snapshots.
    pub atoms: Vec<Vec<f64>>,
}

impl ModelState {
    /// Starting state: small random margins, unit scales, atoms at the
    /// centre input value.
    pub fn init<R: Rng + ?Sized>(
        config: &ModelConfig,
        data: &Dataset,
        masks: &MaskSet,
        rng: &mut R,
    ) -> Self {
        let shape = &data.shape;
        let sd = config.init_margin_sd;
        let gamma = CpBlock::init(shape, config.rank, sd, rng);
        let delta = (0..data.n_covariates()).map(|_| CpBlock::init(shape, config.rank, sd, rng)).collect();
        let theta = CpBlock::init(shape, config.rank, sd, rng);
        let atoms = masks
            .group_voxels
            .iter()
            .map(|&v| data.train.iter().map(|&n| data.x[n].data()[v]).collect())
            .collect();
        Self { gamma, theta, delta, phi1: 1.0, phi2: 1.0, sigma2: 1.0, atoms }
    }

    pub fn validate(&self) -> Result<()> {
        self.gamma.check("gamma")?;
        self.theta.check("theta")?;
        for (s, b) in self.delta.iter().enumerate() {
            b.check(&format!("delta[{s}]"))?;
        }
        for (name, v) in [("phi1", self.phi1), ("phi2", self.phi2), ("sigma2", self.sigma2)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::State(format!("{name} = {v} is not positive and finite")));
            }
        }
        if self.atoms.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::State("non-finite GP atom".into()));
        }
        Ok(())
    }

    /// The state without its GP atoms.
    pub fn without_atoms(&self) -> Self {
        Self {
            gamma: self.gamma.clone(),
            theta: self.theta.clone(),
            delta: self.delta.clone(),
            phi1: self.phi1,
            phi2: self.phi2,
            sigma2: self.sigma2,
            atoms: Vec::new(),
        }
    }
}

#[inline]
fn check_ar1(w: f64, alpha: f64, p: usize) -> Result<()> {
    if !(w > 0.0 && w.is_finite()) || !(alpha > 0.0) || alpha.is_nan() || p == 0 {
        return Err(Error::Argument(format!("AR(1) covariance needs w, alpha > 0 and p >= 1, got w={w}, alpha={alpha}, p={p}")));
    }
    Ok(())
}

/// `w * exp(-alpha |k1 - k2|)` as a dense `p x p` matrix.
pub fn ar1_cov(w: f64, alpha: f64, p: usize) -> Result<DMatrix<f64>> {
    check_ar1(w, alpha, p)?;
    Ok(DMatrix::from_fn(p, p, |i, j| w * (-alpha * i.abs_diff(j) as f64).exp()))
}

/// The tridiagonal inverse of [`ar1_cov`].
pub fn ar1_precision(w: f64, alpha: f64, p: usize) -> Result<DMatrix<f64>> {
    check_ar1(w, alpha, p)?;
    let rho = (-alpha).exp();
    let c = 1.0 / (w * one_minus_rho2(alpha));
    let mut m = DMatrix::zeros(p, p);
    for i in 0..p {
        let interior = i > 0 && i + 1 < p;
        m[(i, i)] = if p == 1 { 1.0 / w } else if interior { c * (1.0 + rho * rho) } else { c };
        if i + 1 < p {
            m[(i, i + 1)] = -c * rho;
            m[(i + 1, i)] = -c * rho;
        }
    }
    Ok(m)
}

/// `1 - exp(-2 alpha)` without cancellation for small alpha.
#[inline]
pub fn one_minus_rho2(alpha: f64) -> f64 {
    -(-2.0 * alpha).exp_m1()
}

/// The unscaled part of `x^T Λ(α)^{-1} x` before division by `1 - ρ²`:
/// end terms, interior terms weighted `1 + ρ²`, and the cross term `-2ρ Σ x_j x_{j+1}`.
pub fn ar1_c_numerator(x: &[f64], alpha: f64) -> f64 {
    let p = x.len();
    if p == 1 {
        return x[0] * x[0];
    }
    let rho = (-alpha).exp();
    let ends = x[0] * x[0] + x[p - 1] * x[p - 1];
    let interior: f64 = x[1..p - 1].iter().map(|v| v * v).sum();
    let cross: f64 = x.windows(2).map(|w| w[0] * w[1]).sum();
    ends + (1.0 + rho * rho) * interior - 2.0 * rho * cross
}

/// `x^T Λ(α)^{-1} x` for the unit-scale AR(1) correlation Λ, in O(p).
pub fn ar1_quad(x: &[f64], alpha: f64) -> f64 {
    if x.len() == 1 {
        return x[0] * x[0];
    }
    ar1_c_numerator(x, alpha) / one_minus_rho2(alpha)
}

/// `log det Λ(α) = (p - 1) log(1 - ρ²)`.
pub fn ar1_log_det(alpha: f64, p: usize) -> f64 {
    (p.saturating_sub(1)) as f64 * one_minus_rho2(alpha).ln()
}

/// Pairwise squared Euclidean distances between equal-length patches.
pub fn squared_distance_matrix(patches: &[&[f64]]) -> Result<DMatrix<f64>> {
    let n = patches.len();
    if let Some(first) = patches.first() {
        if patches.iter().any(|p| p.len() != first.len()) {
            return Err(Error::Dimension("patches differ in length".into()));
        }
    }
    let mut d = DMatrix::zeros(n, n);
    for j in 0..n {
        for i in 0..j {
            let v = crate::tensor::squared_distance(patches[i], patches[j]);
            d[(i, j)] = v;
            d[(j, i)] = v;
        }
    }
    Ok(d)
}

/// `phi1 * exp(-phi2 * d2)` entrywise; the diagonal is exactly `phi1`.
pub fn kernel_from_distances(d2: &DMatrix<f64>, phi1: f64, phi2: f64) -> Result<DMatrix<f64>> {
    if !(phi1 > 0.0 && phi2 > 0.0) {
        return Err(Error::Argument(format!("kernel needs phi1, phi2 > 0, got {phi1}, {phi2}")));
    }
    let mut k = d2.map(|d| phi1 * (-phi2 * d).exp());
    for i in 0..k.nrows().min(k.ncols()) {
        if d2[(i, i)] == 0.0 {
            k[(i, i)] = phi1;
        }
    }
    Ok(k)
}

/// Squared-exponential kernel over patches: `K(i,j) = phi1 exp(-phi2 ||P_i - P_j||²)`.
pub fn gp_kernel_matrix(patches: &[&[f64]], phi1: f64, phi2: f64) -> Result<DMatrix<f64>> {
    kernel_from_distances(&squared_distance_matrix(patches)?, phi1, phi2)
}

/// Paired inputs and outputs for N subjects plus covariates, masks and split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub shape: Vec<usize>,
    pub x: Vec<DenseTensor>,
    pub y: Vec<DenseTensor>,
    /// Covariates, one row of length S per subject.
    pub z: Vec<Vec<f64>>,
    pub covariate_names: Vec<String>,
    /// Subject masks with entries in {0, 1}.
    pub masks: Vec<DenseTensor>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Mask of the voxels where `x` is nonzero.
pub fn mask_from_input(x: &DenseTensor) -> DenseTensor {
    DenseTensor::from_vec(x.shape(), x.data().iter().map(|&v| if v != 0.0 { 1.0 } else { 0.0 }).collect())
        .expect("same shape")
}

impl Dataset {
    /// Build and validate. Missing masks are derived from the nonzero inputs;
    /// missing covariates mean S = 0.
    pub fn new(
        x: Vec<DenseTensor>,
        y: Vec<DenseTensor>,
        z: Option<Vec<Vec<f64>>>,
        masks: Option<Vec<DenseTensor>>,
        train: Vec<usize>,
        test: Vec<usize>,
    ) -> Result<Self> {
        let shape = x.first().ok_or_else(|| Error::Validation("dataset has no subjects".into()))?.shape().to_vec();
        let n = x.len();
        let masks = masks.unwrap_or_else(|| x.iter().map(mask_from_input).collect());
        let z = z.unwrap_or_else(|| vec![Vec::new(); n]);
        let s = z.first().map_or(0, Vec::len);
        let d = Self {
            shape,
            x,
            y,
            z,
            covariate_names: (1..=s).map(|i| format!("z{i}")).collect(),
            masks,
            train,
            test,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn n_subjects(&self) -> usize {
        self.x.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.z.first().map_or(0, Vec::len)
    }

    pub fn n_voxels(&self) -> usize {
        voxel_count(&self.shape)
    }

    #[inline]
    pub fn mask_on(&self, n: usize, v: usize) -> bool {
        self.masks[n].data()[v] != 0.0
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        let n = self.x.len();
        if n == 0 {
            return bad("dataset has no subjects".into());
        }
        if self.y.len() != n || self.masks.len() != n || self.z.len() != n {
            return bad(format!(
                "subject counts disagree: X {n}, Y {}, masks {}, Z {}",
                self.y.len(),
                self.masks.len(),
                self.z.len()
            ));
        }
        for (role, set) in [("X", &self.x), ("Y", &self.y), ("mask", &self.masks)] {
            for (i, t) in set.iter().enumerate() {
                if t.shape() != self.shape.as_slice() {
                    return bad(format!("{role} of subject {i} has shape {:?}, expected {:?}", t.shape(), self.shape));
                }
                if let Some(k) = t.data().iter().position(|v| !v.is_finite()) {
                    return bad(format!("{role} of subject {i} has a non-finite value at offset {k}"));
                }
            }
        }
        for (i, m) in self.masks.iter().enumerate() {
            if m.data().iter().any(|&v| v != 0.0 && v != 1.0) {
                return bad(format!("mask of subject {i} has entries outside {{0, 1}}"));
            }
        }
        let s = self.n_covariates();
        if self.z.iter().any(|r| r.len() != s || r.iter().any(|v| !v.is_finite())) {
            return bad("covariate rows differ in length or contain non-finite values".into());
        }
        if self.covariate_names.len() != s {
            return bad(format!("{} covariate names for {s} covariates", self.covariate_names.len()));
        }
        let mut seen = vec![false; n];
        for &i in self.train.iter().chain(&self.test) {
            if i >= n {
                return bad(format!("split index {i} out of range for {n} subjects"));
            }
            if seen[i] {
                return bad(format!("subject {i} appears twice in the split"));
            }
            seen[i] = true;
        }
        if let Some(i) = seen.iter().position(|&b| !b) {
            return bad(format!("subject {i} is in neither the training nor the test split"));
        }
        if self.train.is_empty() {
            return bad("training split is empty".into());
        }
        Ok(())
    }
}

/// Subject masks reduced to the group mask S₀ and its fringe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSet {
    pub group: DenseTensor,
    /// Flat offsets of S₀, ascending.
    pub group_voxels: Vec<usize>,
    /// Position of each voxel within `group_voxels`.
    pub group_index: Vec<Option<usize>>,
    /// Voxels in the union of subject masks but outside S₀.
    pub fringe: Vec<usize>,
    pub union: Vec<bool>,
}

impl MaskSet {
    pub fn in_group(&self, v: usize) -> bool {
        self.group_index[v].is_some()
    }
}

/// S₀ holds the voxels that are on in at least a fraction `tau_mask` of all
/// subjects' masks.
pub fn build_group_mask(data: &Dataset, tau_mask: f64) -> Result<MaskSet> {
    if !(tau_mask > 0.0 && tau_mask <= 1.0) {
        return Err(Error::Argument(format!("tau_mask must lie in (0, 1], got {tau_mask}")));
    }
    let v_count = data.n_voxels();
    let n = data.n_subjects() as f64;
    let mut counts = vec![0usize; v_count];
    for m in &data.masks {
        for (c, &b) in counts.iter_mut().zip(m.data()) {
            if b != 0.0 {
                *c += 1;
            }
        }
    }
    let threshold = tau_mask * n - 1e-9 * n.max(1.0);
    let group_flags: Vec<bool> = counts.iter().map(|&c| c > 0 && c as f64 >= threshold).collect();
    let union: Vec<bool> = counts.iter().map(|&c| c > 0).collect();
    let mut group_index = vec![None; v_count];
    let mut group_voxels = Vec::new();
    for v in (0..v_count).filter(|&v| group_flags[v]) {
        group_index[v] = Some(group_voxels.len());
        group_voxels.push(v);
    }
    let fringe = (0..v_count).filter(|&v| union[v] && !group_flags[v]).collect();
    if group_voxels.is_empty() {
        log::warn!("group mask is empty at tau_mask = {tau_mask}; every voxel uses the linear map");
    }
    let group = DenseTensor::from_vec(&data.shape, group_flags.iter().map(|&b| b as u8 as f64).collect())?;
    Ok(MaskSet { group, group_voxels, group_index, fringe, union })
}

/// Source offsets of the zero-padded patch around every voxel.
#[derive(Clone, Debug)]
pub struct PatchTable {
    pub h: usize,
    sources: Vec<Vec<Option<usize>>>,
}

impl PatchTable {
    pub fn new(shape: &[usize], h: usize) -> Result<Self> {
        let offsets = patch_offsets(shape.len(), h)?;
        let sources = (0..voxel_count(shape))
            .map(|v| patch_sources(shape, &unravel(v, shape), &offsets))
            .collect();
        Ok(Self { h, sources })
    }

    pub fn patch_len(&self) -> usize {
        self.sources.first().map_or(0, Vec::len)
    }

    /// Flat source offsets of the patch around voxel `v`; `None` is padding.
    pub fn sources_of(&self, v: usize) -> &[Option<usize>] {
        &self.sources[v]
    }

    /// Patch values of `x` around flat voxel `v`.
    pub fn values(&self, x: &DenseTensor, v: usize) -> Vec<f64> {
        self.sources[v].iter().map(|s| s.map_or(0.0, |o| x.data()[o])).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn ar1_examples() {
        let m = ar1_cov(2.0, 2f64.ln(), 3).unwrap();
        assert!((m[(0, 0)] - 2.0).abs() < 1e-15);
        assert!((m[(0, 1)] - 1.0).abs() < 1e-15);
        assert!((m[(0, 2)] - 0.5).abs() < 1e-15);
        let big = ar1_cov(1.0, 800.0, 4).unwrap();
        assert_eq!(big, DMatrix::identity(4, 4));
        assert!(ar1_cov(0.0, 1.0, 3).is_err());
        assert!(ar1_cov(1.0, -1.0, 3).is_err());
    }

    proptest! {
        #[test]
        fn ar1_inverse_is_tridiagonal(w in 0.05f64..5.0, alpha in 0.01f64..5.0, p in 1usize..=6) {
            let c = ar1_cov(w, alpha, p).unwrap();
            let inv = c.clone().try_inverse().unwrap();
            for i in 0..p {
                for j in 0..p {
                    if i.abs_diff(j) > 1 {
                        prop_assert!(inv[(i, j)].abs() < 1e-8 * inv.amax());
                    }
                }
            }
            let prec = ar1_precision(w, alpha, p).unwrap();
            prop_assert!((&inv - &prec).amax() < 1e-8 * inv.amax());
        }

        #[test]
        fn ar1_is_positive_definite(alpha in 0.001f64..10.0, p in 1usize..=6) {
            let eig = ar1_cov(1.0, alpha, p).unwrap().symmetric_eigenvalues();
            prop_assert!(eig.min() > 0.0);
        }

        #[test]
        fn ar1_quad_matches_dense(x in proptest::collection::vec(-3.0f64..3.0, 1..7), alpha in 0.01f64..4.0) {
            let p = x.len();
            let inv = ar1_cov(1.0, alpha, p).unwrap().try_inverse().unwrap();
            let xv = nalgebra::DVector::from_vec(x.clone());
            let dense = (xv.transpose() * inv * &xv)[(0, 0)];
            prop_assert!((dense - ar1_quad(&x, alpha)).abs() < 1e-8 * (1.0 + dense.abs()));
            let det = ar1_cov(1.0, alpha, p).unwrap().determinant().ln();
            prop_assert!((det - ar1_log_det(alpha, p)).abs() < 1e-8);
        }

        #[test]
        fn kernel_ignores_consistent_permutation(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<Vec<f64>> = (0..4).map(|_| (0..6).map(|_| standard_normal(&mut rng)).collect()).collect();
            let perm = [3usize, 0, 5, 1, 4, 2];
            let permuted: Vec<Vec<f64>> = pts.iter().map(|p| perm.iter().map(|&k| p[k]).collect()).collect();
            let a = gp_kernel_matrix(&pts.iter().map(Vec::as_slice).collect::<Vec<_>>(), 1.3, 0.4).unwrap();
            let b = gp_kernel_matrix(&permuted.iter().map(Vec::as_slice).collect::<Vec<_>>(), 1.3, 0.4).unwrap();
            prop_assert!((a - b).amax() < 1e-14);
        }
    }

    #[test]
    fn kernel_examples() {
        let a = [0.0, 1.0];
        let b = [1.0, 1.0];
        let k = gp_kernel_matrix(&[&a, &a, &b], 2.5, 1.0).unwrap();
        assert_eq!(k[(0, 0)], 2.5);
        assert_eq!(k[(0, 1)], 2.5);
        let k1 = gp_kernel_matrix(&[&a, &b], 1.0, 1.0).unwrap();
        assert!((k1[(0, 1)] - (-1.0f64).exp()).abs() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<Vec<f64>> = (0..5).map(|_| (0..27).map(|_| standard_normal(&mut rng)).collect()).collect();
        let refs: Vec<&[f64]> = pts.iter().map(Vec::as_slice).collect();
        let k = gp_kernel_matrix(&refs, 0.7, 0.05).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                let d: f64 = pts[i].iter().zip(&pts[j]).map(|(u, v)| (u - v).powi(2)).sum();
                assert!((k[(i, j)] - 0.7 * (-0.05 * d).exp()).abs() < 1e-12);
            }
        }
    }

    fn dataset_with_masks(masks: Vec<Vec<f64>>, shape: &[usize]) -> Dataset {
        let n = masks.len();
        let x: Vec<DenseTensor> = masks.iter().map(|m| DenseTensor::from_vec(shape, m.clone()).unwrap()).collect();
        let y = x.clone();
        Dataset::new(x, y, None, None, (0..n).collect(), vec![]).unwrap()
    }

    #[test]
    fn group_mask_examples() {
        let full = dataset_with_masks(vec![vec![1.0; 4]; 10], &[2, 2]);
        let m = build_group_mask(&full, 0.8).unwrap();
        assert_eq!(m.group_voxels, vec![0, 1, 2, 3]);
        assert!(m.fringe.is_empty());

        let masks: Vec<Vec<f64>> = (0..10).map(|i| vec![1.0, if i < 7 { 1.0 } else { 0.0 }, 1.0, 0.0]).collect();
        let d = dataset_with_masks(masks.clone(), &[2, 2]);
        let m = build_group_mask(&d, 0.8).unwrap();
        assert_eq!(m.group_voxels, vec![0, 2]);
        assert_eq!(m.fringe, vec![1]);
        assert!(!m.union[3]);

        let m = build_group_mask(&d, 1.0).unwrap();
        let intersection: Vec<usize> = (0..4).filter(|&v| masks.iter().all(|r| r[v] == 1.0)).collect();
        assert_eq!(m.group_voxels, intersection);
        let m = build_group_mask(&d, 0.7).unwrap();
        assert_eq!(m.group_voxels, vec![0, 1, 2]);
    }

    #[test]
    fn dataset_validation() {
        let x = vec![DenseTensor::filled(&[2, 2], 1.0); 3];
        assert!(Dataset::new(x.clone(), x.clone(), None, None, vec![0, 1], vec![2]).is_ok());
        assert!(matches!(Dataset::new(x.clone(), x.clone(), None, None, vec![0, 1], vec![1]), Err(Error::Validation(_))));
        assert!(matches!(Dataset::new(x.clone(), x.clone(), None, None, vec![0], vec![1]), Err(Error::Validation(_))));
        let mut bad = x.clone();
        bad[1].data_mut()[0] = f64::NAN;
        assert!(matches!(Dataset::new(bad, x.clone(), None, None, vec![0, 1], vec![2]), Err(Error::Validation(_))));
    }

    #[test]
    fn config_round_trips_through_toml() {
        let c = ModelConfig { rank: 2, tau_mask: 0.9, ..Default::default() };
        let back = ModelConfig::from_toml_str(&c.to_toml_string()).unwrap();
        assert_eq!(c, back);
        let partial = ModelConfig::from_toml_str("rank = 4\n[priors.noise]\na = 2.0\nb = 3.0\n").unwrap();
        assert_eq!(partial.rank, 4);
        assert_eq!(partial.priors.noise, Prior::new(2.0, 3.0));
        assert_eq!(partial.iterations, 10_000);
        assert!(ModelConfig::from_toml_str("burnin = 1.0").is_err());
        assert!(ModelConfig::from_toml_str("bogus = 1").is_err());
    }

    #[test]
    fn retained_count_matches_rule() {
        let c = ModelConfig { iterations: 10, burnin: 0.5, thin: 1, ..Default::default() };
        assert_eq!((0..10).filter(|&t| c.is_retained(t)).count(), 5);
        let c = ModelConfig { iterations: 11, burnin: 0.5, thin: 2, ..Default::default() };
        assert_eq!((0..11).filter(|&t| c.is_retained(t)).count(), c.retained_count());
    }
}
