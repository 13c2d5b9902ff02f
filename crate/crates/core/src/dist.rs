//! Distribution samplers used by the Gibbs and Metropolis-Hastings updates.
//!
//! Gamma, normal and exponential draws come from `rand_distr`. The
//! generalized inverse Gaussian sampler follows Hörmann & Leydold (2014):
//! ratio-of-uniforms with or without mode shift, and a piecewise constant /
//! exponential hat for the region where the log-concave part is small.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Exp, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::cholesky_jittered;

/// Parameters of the GIG density `x^(mu-1) exp(-(chi/x + psi x)/2)` on `x > 0`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GigParams {
    pub mu: f64,
    pub chi: f64,
    pub psi: f64,
}

impl GigParams {
    pub fn new(mu: f64, chi: f64, psi: f64) -> Result<Self> {
        let p = Self { mu, chi, psi };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let Self { mu, chi, psi } = *self;
        let finite = mu.is_finite() && chi.is_finite() && psi.is_finite();
        let ok = finite
            && chi >= 0.0
            && psi >= 0.0
            && ((chi > 0.0 && psi > 0.0) || (chi > 0.0 && psi == 0.0 && mu < 0.0) || (chi == 0.0 && psi > 0.0 && mu > 0.0));
        if ok {
            Ok(())
        } else {
            Err(Error::Distribution(format!("inadmissible GIG parameters mu={mu}, chi={chi}, psi={psi}")))
        }
    }

    /// Unnormalised log density.
    pub fn log_kernel(&self, x: f64) -> f64 {
        (self.mu - 1.0) * x.ln() - 0.5 * (self.chi / x + self.psi * x)
    }
}

/// Gamma draw with shape and *rate*.
pub fn sample_gamma<R: Rng + ?Sized>(shape: f64, rate: f64, rng: &mut R) -> Result<f64> {
    let g = Gamma::new(shape, 1.0 / rate)
        .map_err(|e| Error::Distribution(format!("Gamma(shape={shape}, rate={rate}): {e}")))?;
    Ok(g.sample(rng))
}

/// Inverse-gamma draw with shape and *scale* (density ∝ x^(-shape-1) e^(-scale/x)).
pub fn sample_inv_gamma<R: Rng + ?Sized>(shape: f64, scale: f64, rng: &mut R) -> Result<f64> {
    Ok(1.0 / sample_gamma(shape, scale, rng)?)
}

pub fn sample_exponential<R: Rng + ?Sized>(rate: f64, rng: &mut R) -> Result<f64> {
    let e = Exp::new(rate).map_err(|e| Error::Distribution(format!("Exp(rate={rate}): {e}")))?;
    Ok(e.sample(rng))
}

#[inline]
pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn gig_mode(lambda: f64, omega: f64) -> f64 {
    if lambda >= 1.0 {
        (((lambda - 1.0).powi(2) + omega * omega).sqrt() + (lambda - 1.0)) / omega
    } else {
        omega / (((1.0 - lambda).powi(2) + omega * omega).sqrt() + (1.0 - lambda))
    }
}

/// Draw from GIG(mu, chi, psi).
pub fn sample_gig<R: Rng + ?Sized>(p: GigParams, rng: &mut R) -> Result<f64> {
    p.validate()?;
    let GigParams { mu, chi, psi } = p;
    if chi == 0.0 {
        return sample_gamma(mu, psi / 2.0, rng);
    }
    if psi == 0.0 {
        return sample_inv_gamma(-mu, chi / 2.0, rng);
    }
    // Standardise: X = alpha * Y with Y ~ GIG(|mu|, omega, omega); negative
    // orders use the reciprocal symmetry.
    let lambda = mu.abs();
    let alpha = (chi / psi).sqrt();
    let omega = (chi * psi).sqrt();
    let y = if lambda > 2.0 || omega > 3.0 {
        rou_shift(lambda, omega, rng)
    } else if lambda >= 1.0 - 2.25 * omega * omega || omega > 0.2 {
        rou_noshift(lambda, omega, rng)
    } else {
        concave_hat(lambda, omega, rng)
    };
    Ok(if mu < 0.0 { alpha / y } else { alpha * y })
}

fn rou_noshift<R: Rng + ?Sized>(lambda: f64, omega: f64, rng: &mut R) -> f64 {
    let t = 0.5 * (lambda - 1.0);
    let s = 0.25 * omega;
    let xm = gig_mode(lambda, omega);
    let nc = t * xm.ln() - s * (xm + 1.0 / xm);
    let ym = ((lambda + 1.0) + ((lambda + 1.0).powi(2) + omega * omega).sqrt()) / omega;
    let um = (0.5 * (lambda + 1.0) * ym.ln() - s * (ym + 1.0 / ym) - nc).exp();
    loop {
        let u = um * rng.random::<f64>();
        let v: f64 = rng.random();
        let x = u / v;
        if x > 0.0 && x.is_finite() && v.ln() <= t * x.ln() - s * (x + 1.0 / x) - nc {
            return x;
        }
    }
}

fn concave_hat<R: Rng + ?Sized>(lambda: f64, omega: f64, rng: &mut R) -> f64 {
    let xm = gig_mode(lambda, omega);
    let x0 = omega / (1.0 - lambda);
    let k0 = ((lambda - 1.0) * xm.ln() - 0.5 * omega * (xm + 1.0 / xm)).exp();
    let a0 = k0 * x0;
    let (k1, a1, k2, a2);
    if x0 >= 2.0 / omega {
        k1 = 0.0;
        a1 = 0.0;
        k2 = x0.powf(lambda - 1.0);
        a2 = k2 * 2.0 * (-omega * x0 / 2.0).exp() / omega;
    } else {
        k1 = (-omega).exp();
        a1 = if lambda == 0.0 {
            k1 * (2.0 / (omega * omega)).ln()
        } else {
            k1 / lambda * ((2.0 / omega).powf(lambda) - x0.powf(lambda))
        };
        k2 = (2.0 / omega).powf(lambda - 1.0);
        a2 = k2 * 2.0 * (-1.0f64).exp() / omega;
    }
    let total = a0 + a1 + a2;
    loop {
        let mut v = total * rng.random::<f64>();
        let (x, hx);
        if v <= a0 {
            x = x0 * v / a0;
            hx = k0;
        } else {
            v -= a0;
            if v <= a1 {
                if lambda == 0.0 {
                    x = omega * (omega.exp() * v).exp();
                    hx = k1 / x;
                } else {
                    x = (x0.powf(lambda) + lambda / k1 * v).powf(1.0 / lambda);
                    hx = k1 * x.powf(lambda - 1.0);
                }
            } else {
                v -= a1;
                let a = x0.max(2.0 / omega);
                x = -2.0 / omega * ((-omega / 2.0 * a).exp() - omega / (2.0 * k2) * v).ln();
                hx = k2 * (-omega / 2.0 * x).exp();
            }
        }
        let u = rng.random::<f64>() * hx;
        if x > 0.0 && x.is_finite() && u.ln() <= (lambda - 1.0) * x.ln() - omega / 2.0 * (x + 1.0 / x) {
            return x;
        }
    }
}

fn rou_shift<R: Rng + ?Sized>(lambda: f64, omega: f64, rng: &mut R) -> f64 {
    let t = 0.5 * (lambda - 1.0);
    let s = 0.25 * omega;
    let xm = gig_mode(lambda, omega);
    let nc = t * xm.ln() - s * (xm + 1.0 / xm);
    // roots of the cubic locating the extremes of (x - xm) sqrt(f(x))
    let a = -(2.0 * (lambda + 1.0) / omega + xm);
    let b = 2.0 * (lambda - 1.0) * xm / omega - 1.0;
    let c = xm;
    let p = b - a * a / 3.0;
    let q = (2.0 * a * a * a) / 27.0 - (a * b) / 3.0 + c;
    let fi = (-q / (2.0 * (-(p * p * p) / 27.0).sqrt())).clamp(-1.0, 1.0).acos();
    let fak = 2.0 * (-p / 3.0).sqrt();
    let y1 = fak * (fi / 3.0).cos() - a / 3.0;
    let y2 = fak * (fi / 3.0 + 4.0 / 3.0 * std::f64::consts::PI).cos() - a / 3.0;
    let uplus = (y1 - xm) * (t * y1.ln() - s * (y1 + 1.0 / y1) - nc).exp();
    let uminus = (y2 - xm) * (t * y2.ln() - s * (y2 + 1.0 / y2) - nc).exp();
    loop {
        let u = uminus + rng.random::<f64>() * (uplus - uminus);
        let v: f64 = rng.random();
        let x = u / v + xm;
        if x > 0.0 && x.is_finite() && v.ln() <= t * x.ln() - s * (x + 1.0 / x) - nc {
            return x;
        }
    }
}

/// Draw from N(mean, cov). A zero covariance returns the mean exactly; a
/// near-singular one is factorised with diagonal jitter.
pub fn mvn_sample<R: Rng + ?Sized>(mean: &DVector<f64>, cov: &DMatrix<f64>, rng: &mut R) -> Result<DVector<f64>> {
    let n = mean.len();
    if cov.nrows() != n || cov.ncols() != n {
        return Err(Error::Dimension(format!("mean has length {n}, covariance is {}x{}", cov.nrows(), cov.ncols())));
    }
    if cov.iter().all(|&x| x == 0.0) {
        return Ok(mean.clone());
    }
    let sym_err = (cov - cov.transpose()).amax();
    if sym_err > 1e-10 * cov.amax() {
        return Err(Error::LinearAlgebra(format!("covariance is not symmetric (max asymmetry {sym_err:.3e})")));
    }
    let f = cholesky_jittered(cov.clone())?;
    let z = DVector::from_fn(n, |_, _| standard_normal(rng));
    Ok(mean + f.lower_mul(&z))
}
