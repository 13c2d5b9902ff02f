//! Full conditionals and Metropolis-Hastings kernels, written as pure
//! functions of sufficient statistics so each can be checked in isolation.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::dist::{sample_gamma, sample_gig, sample_inv_gamma, standard_normal, GigParams};
use crate::error::{Error, Result};
use crate::linalg::{cholesky_jittered, Factor};
use crate::model::{ar1_c_numerator, ar1_quad, one_minus_rho2, Prior};

/// Floor applied to a GIG `chi` that comes out nonpositive.
pub const CHI_FLOOR: f64 = 1e-12;

/// Conditional mean and variance of margin element `j` given its neighbours.
///
/// `m` and `n` are the likelihood precision and linear terms of element `j`;
/// `tau_w` is the product of the global and local prior scales.
pub fn margin_conditional(x: &[f64], j: usize, m: f64, n: f64, tau_w: f64, alpha: f64) -> (f64, f64) {
    let p = x.len();
    if p == 1 {
        let den = m * tau_w + 1.0;
        return (n * tau_w / den, tau_w / den);
    }
    let rho = (-alpha).exp();
    let s = tau_w * one_minus_rho2(alpha);
    if j == 0 || j == p - 1 {
        let nb = if j == 0 { x[1] } else { x[p - 2] };
        let den = m * s + 1.0;
        ((n * s + rho * nb) / den, s / den)
    } else {
        let den = m * s + 1.0 + rho * rho;
        ((n * s + rho * (x[j - 1] + x[j + 1])) / den, s / den)
    }
}

/// Sweep `x` element by element, each draw conditioning on the latest neighbours.
pub fn draw_margin<R: Rng + ?Sized>(x: &mut [f64], m: &[f64], n: &[f64], tau_w: f64, alpha: f64, rng: &mut R) {
    for j in 0..x.len() {
        let (mean, var) = margin_conditional(x, j, m[j], n[j], tau_w, alpha);
        x[j] = mean + var.sqrt() * standard_normal(rng);
    }
}

/// The statistic `c` of the local scale update: the AR(1) quadratic form
/// numerator divided by `tau`.
pub fn w_statistic(x: &[f64], tau: f64, alpha: f64) -> f64 {
    ar1_c_numerator(x, alpha) / tau
}

/// GIG parameters of `w | -`: `(1 - p/2, c / (1 - e^{-2α}), λ)`.
pub fn w_params(x: &[f64], tau: f64, alpha: f64, lambda: f64) -> GigParams {
    let p = x.len();
    let c = w_statistic(x, tau, alpha);
    let mut chi = if p == 1 { c } else { c / one_minus_rho2(alpha) };
    if !(chi > 0.0) {
        log::warn!("local scale chi = {chi:e} clamped to {CHI_FLOOR:e}");
        chi = CHI_FLOOR;
    }
    GigParams { mu: 1.0 - p as f64 / 2.0, chi, psi: lambda }
}

pub fn draw_w<R: Rng + ?Sized>(x: &[f64], tau: f64, alpha: f64, lambda: f64, rng: &mut R) -> Result<f64> {
    sample_gig(w_params(x, tau, alpha, lambda), rng)
}

/// Shape and rate of `λ | w`: `Ga(a + p, b + p w / 2)`.
pub fn lambda_params(prior: Prior, p: usize, w: f64) -> (f64, f64) {
    (prior.a + p as f64, prior.b + p as f64 * w / 2.0)
}

pub fn draw_lambda<R: Rng + ?Sized>(prior: Prior, p: usize, w: f64, rng: &mut R) -> Result<f64> {
    let (shape, rate) = lambda_params(prior, p, w);
    sample_gamma(shape, rate, rng)
}

/// GIG parameters of `τ | -` from every margin of one CP block:
/// `(a - R Σp/2, Σ x^T (wΛ)^{-1} x, 2b)`.
pub fn tau_params(margins: &[Vec<Vec<f64>>], w: &[Vec<f64>], alpha: &[Vec<f64>], prior: Prior) -> GigParams {
    let mut chi = 0.0;
    let mut count = 0usize;
    for (d, per_rank) in margins.iter().enumerate() {
        for (r, x) in per_rank.iter().enumerate() {
            chi += ar1_quad(x, alpha[d][r]) / w[d][r];
            count += x.len();
        }
    }
    GigParams { mu: prior.a - count as f64 / 2.0, chi, psi: 2.0 * prior.b }
}

pub fn draw_tau<R: Rng + ?Sized>(
    margins: &[Vec<Vec<f64>>],
    w: &[Vec<f64>],
    alpha: &[Vec<f64>],
    prior: Prior,
    rng: &mut R,
) -> Result<f64> {
    sample_gig(tau_params(margins, w, alpha, prior), rng)
}

/// Unnormalised log density of `α | -`:
/// `α^{a-1} (1 - e^{-2α})^{-(p-1)/2} exp(-(x^T (τwΛ)^{-1} x + 2bα)/2)`.
pub fn alpha_log_target(alpha: f64, x: &[f64], tau_w: f64, prior: Prior) -> f64 {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return f64::NEG_INFINITY;
    }
    let p = x.len() as f64;
    (prior.a - 1.0) * alpha.ln() - 0.5 * (p - 1.0) * one_minus_rho2(alpha).ln()
        - 0.5 * ar1_quad(x, alpha) / tau_w
        - prior.b * alpha
}

/// One log-normal random-walk step on a positive scalar. The proposal
/// asymmetry enters as the ratio `new / current`.
pub fn lognormal_mh<R: Rng + ?Sized>(
    current: f64,
    log_target: impl Fn(f64) -> f64,
    proposal_sd: f64,
    rng: &mut R,
) -> (f64, bool) {
    let xi = standard_normal(rng);
    let u: f64 = rng.random();
    let proposal = current * (proposal_sd * xi).exp();
    let log_ratio = log_target(proposal) - log_target(current) + proposal.ln() - current.ln();
    if log_ratio.is_nan() {
        return (current, false);
    }
    if log_ratio >= 0.0 || u.ln() < log_ratio {
        (proposal, true)
    } else {
        (current, false)
    }
}

pub fn mh_alpha<R: Rng + ?Sized>(
    alpha: f64,
    x: &[f64],
    tau_w: f64,
    prior: Prior,
    proposal_var: f64,
    rng: &mut R,
) -> (f64, bool) {
    lognormal_mh(alpha, |a| alpha_log_target(a, x, tau_w, prior), proposal_var.sqrt(), rng)
}

/// Shape and scale of `φ₁ | -` given `Σ_v M_v^T K̃_v^{-1} M_v` over `voxels`
/// group-mask voxels with `n` atoms each.
pub fn phi1_params(quad_sum: f64, n: usize, voxels: usize, prior: Prior) -> (f64, f64) {
    (prior.a + (n * voxels) as f64 / 2.0, prior.b + 0.5 * quad_sum)
}

/// Shape and scale of `σ_e² | -` given the residual sum of squares over `count` observed cells.
pub fn sigma2_params(sum_sq: f64, count: usize, prior: Prior) -> (f64, f64) {
    (prior.a + count as f64 / 2.0, prior.b + 0.5 * sum_sq)
}

pub fn draw_sigma2<R: Rng + ?Sized>(sum_sq: f64, count: usize, prior: Prior, rng: &mut R) -> Result<f64> {
    let (shape, scale) = sigma2_params(sum_sq, count, prior);
    sample_inv_gamma(shape, scale, rng)
}

/// Log density of N(m; 0, φ₁ K̃) up to `-n/2 log 2π`, from the factor of K̃.
pub fn gp_log_likelihood(factor: &Factor, m: &DVector<f64>, phi1: f64) -> f64 {
    let n = m.len() as f64;
    -0.5 * factor.quad_form(m) / phi1 - 0.5 * (n * phi1.ln() + factor.log_det())
}

/// Posterior moments of the atoms at one voxel, written in observation
/// space: with `C = Θ² K_oo + σ² I`,
/// mean `Θ K_{·o} C^{-1} y_o`, covariance `K - Θ² K_{·o} C^{-1} K_{o·}`.
/// `observed` selects the subjects whose outcome enters the likelihood.
pub fn atom_posterior(
    kernel: &DMatrix<f64>,
    theta: f64,
    sigma2: f64,
    y: &[f64],
    observed: &[bool],
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = kernel.nrows();
    let o: Vec<usize> = (0..n).filter(|&i| observed[i]).collect();
    if o.is_empty() || theta == 0.0 {
        return Ok((DVector::zeros(n), kernel.clone()));
    }
    let k_no = DMatrix::from_fn(n, o.len(), |i, j| kernel[(i, o[j])]);
    let c = DMatrix::from_fn(o.len(), o.len(), |i, j| {
        theta * theta * kernel[(o[i], o[j])] + if i == j { sigma2 } else { 0.0 }
    });
    let f = cholesky_jittered(c)?;
    let yo = DVector::from_iterator(o.len(), o.iter().map(|&i| y[i]));
    let mean = &k_no * f.solve(&yo) * theta;
    let mut sol = k_no.transpose();
    f.chol.solve_mut(&mut sol);
    let cov = kernel - (&k_no * sol) * (theta * theta);
    Ok((mean, cov))
}

/// One posterior draw of the atoms at a voxel by conditioning a prior draw
/// on the observations (Matheron's rule). `prior_factor` is the Cholesky
/// factor of the correlation matrix `kt`; the covariance is `phi1 * kt`.
#[allow(clippy::too_many_arguments)]
pub fn draw_atoms<R: Rng + ?Sized>(
    kt: &DMatrix<f64>,
    prior_factor: &Factor,
    phi1: f64,
    theta: f64,
    sigma2: f64,
    y: &[f64],
    observed: &[bool],
    rng: &mut R,
) -> Result<Vec<f64>> {
    let n = kt.nrows();
    let z = DVector::from_fn(n, |_, _| standard_normal(rng));
    let f = prior_factor.lower_mul(&z) * phi1.sqrt();
    let o: Vec<usize> = (0..n).filter(|&i| observed[i]).collect();
    if o.is_empty() || theta == 0.0 {
        return Ok(f.as_slice().to_vec());
    }
    let sd = sigma2.sqrt();
    let t2p = theta * theta * phi1;
    let c = DMatrix::from_fn(o.len(), o.len(), |i, j| t2p * kt[(o[i], o[j])] + if i == j { sigma2 } else { 0.0 });
    let cf = cholesky_jittered(c)?;
    let r = DVector::from_iterator(
        o.len(),
        o.iter().map(|&i| y[i] - theta * f[i] - sd * standard_normal(rng)),
    );
    let u = cf.solve(&r);
    let mut out = f;
    let scale = theta * phi1;
    for (jj, &j) in o.iter().enumerate() {
        let uj = scale * u[jj];
        let col = kt.column(j);
        for i in 0..n {
            out[i] += col[i] * uj;
        }
    }
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::LinearAlgebra("non-finite atom draw".into()));
    }
    Ok(out.as_slice().to_vec())
}
