//! Synthetic datasets: four input strategies, two coefficient
//! constructions and the outcome scenarios of the simulation study.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dist::standard_normal;
use crate::error::{Error, Result};
use crate::linalg::cholesky_jittered;
use crate::model::{Dataset, PatchTable};
use crate::rng::{RngStream, StreamKind, StreamLabel};
use crate::tensor::{strides, voxel_count, CpFactor, DenseTensor};

/// Decomposition low-pass filter of the 8-tap least-asymmetric Daubechies
/// wavelet (four vanishing moments).
pub const LA8_LOWPASS: [f64; 8] = [
    -0.075_765_714_789_273_33,
    -0.029_635_527_645_998_51,
    0.497_618_667_632_015_45,
    0.803_738_751_805_916_1,
    0.297_857_795_605_277_36,
    -0.099_219_543_576_847_22,
    -0.012_603_967_262_037_833,
    0.032_223_100_604_042_7,
];

/// Wavelet decomposition depth of input strategy (c).
pub const WAVELET_LEVELS: usize = 3;
/// Value inside the pyramid of construction (ii).
pub const PYRAMID_VALUE: f64 = 3.0;
/// Marginal variance and decay of the input GP of strategy (d).
pub const INPUT_GP_VARIANCE: f64 = 0.01;
pub const INPUT_GP_DECAY: f64 = 15.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputStrategy {
    /// i.i.d. N(0, 1) voxels.
    A,
    /// i.i.d. U(0, 1) voxels.
    B,
    /// Inverse wavelet transform of N(0, 1) coefficients.
    C,
    /// Squared-exponential GP over voxel coordinates.
    D,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Construction {
    /// Low-rank CP with N(0, 1) margins.
    I,
    /// Tetrahedral "pyramid" blocks of value 3.
    Ii,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scenario {
    /// GP map over 3^D input patches.
    #[serde(rename = "1")]
    PatchGp,
    /// GP map over the single input voxel.
    #[serde(rename = "2")]
    VoxelGp,
    /// `log(1 + x²)`.
    #[serde(rename = "3")]
    LogSquare,
    /// `sin` of the 3^D patch sum.
    #[serde(rename = "3alt")]
    SinPatchSum,
    /// Identity.
    #[serde(rename = "4")]
    Linear,
}

macro_rules! str_enum {
    ($t:ty, $($v:path => $s:expr),+ $(,)?) => {
        impl fmt::Display for $t {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($v => $s),+ })
            }
        }
        impl FromStr for $t {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s.to_ascii_lowercase().as_str() {
                    $($s => Ok($v),)+
                    _ => Err(Error::Argument(format!("unknown {} '{s}'", stringify!($t)))),
                }
            }
        }
    };
}

str_enum!(InputStrategy, InputStrategy::A => "a", InputStrategy::B => "b", InputStrategy::C => "c", InputStrategy::D => "d");
str_enum!(Construction, Construction::I => "i", Construction::Ii => "ii");
str_enum!(Scenario, Scenario::PatchGp => "1", Scenario::VoxelGp => "2", Scenario::LogSquare => "3", Scenario::SinPatchSum => "3alt", Scenario::Linear => "4");

/// Everything that determines a synthetic dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimSpec {
    pub scenario: Scenario,
    pub strategy: InputStrategy,
    pub construction: Construction,
    pub shape: Vec<usize>,
    pub n_train: usize,
    pub n_test: usize,
    /// Residual standard deviation.
    pub sigma: f64,
    pub seed: u64,
    /// CP rank of construction (i).
    pub true_rank: usize,
    /// Draw a CP intercept Γ as well; otherwise Γ = 0.
    pub intercept: bool,
}

impl Default for SimSpec {
    fn default() -> Self {
        Self {
            scenario: Scenario::PatchGp,
            strategy: InputStrategy::A,
            construction: Construction::I,
            shape: vec![8, 8, 8],
            n_train: 100,
            n_test: 20,
            sigma: 0.1,
            seed: 1,
            true_rank: 2,
            intercept: false,
        }
    }
}

impl SimSpec {
    /// Parse a `scenario.strategy.construction` code such as `1.a.i`.
    pub fn from_code(code: &str) -> Result<Self> {
        let parts: Vec<&str> = code.split('.').collect();
        if parts.len() != 3 {
            return Err(Error::Argument(format!("scenario code '{code}' is not of the form 1.a.i")));
        }
        Ok(Self {
            scenario: parts[0].parse()?,
            strategy: parts[1].parse()?,
            construction: parts[2].parse()?,
            ..Default::default()
        })
    }

    pub fn code(&self) -> String {
        format!("{}.{}.{}", self.scenario, self.strategy, self.construction)
    }
}

/// Values the generator chose and recorded alongside the spec.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimManifest {
    pub spec: SimSpec,
    /// Patch edge length of the outcome map.
    pub map_patch: usize,
    /// GP variance and decay of scenarios 1 and 2.
    pub map_phi1: Option<f64>,
    pub map_phi2: Option<f64>,
    /// Empirical variance of all input voxels.
    pub input_variance: f64,
}

/// Generated data with its ground truth.
#[derive(Clone, Debug)]
pub struct SimData {
    pub dataset: Dataset,
    pub gamma: DenseTensor,
    pub theta: DenseTensor,
    /// Θ(v)·M_n(v) for every subject.
    pub effect: Vec<DenseTensor>,
    /// Noiseless outcomes Γ + Θ·M.
    pub signal: Vec<DenseTensor>,
    pub manifest: SimManifest,
}

fn stream(seed: u64, tag: u64, index: u64) -> RngStream {
    RngStream::new(seed).substream(StreamLabel::new(StreamKind::Simulate, tag, index))
}

const TAG_INPUT: u64 = 1;
const TAG_COEF: u64 = 2;
const TAG_MAP: u64 = 3;
const TAG_NOISE: u64 = 4;

/// `n` input images of the given strategy. Subject `i` uses its own substream.
pub fn gen_inputs(strategy: InputStrategy, shape: &[usize], n: usize, seed: u64) -> Result<Vec<DenseTensor>> {
    if strategy == InputStrategy::C {
        let f = 1 << WAVELET_LEVELS;
        if shape.iter().any(|&p| p % f != 0) {
            return Err(Error::Argument(format!("wavelet inputs need every extent divisible by {f}, got {shape:?}")));
        }
    }
    let axis_factors = if strategy == InputStrategy::D {
        Some(shape.iter().map(|&p| coordinate_gp_factor(p)).collect::<Result<Vec<_>>>()?)
    } else {
        None
    };
    let v = voxel_count(shape);
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream(seed, TAG_INPUT, i as u64).rng();
            let data: Vec<f64> = match strategy {
                InputStrategy::A | InputStrategy::C | InputStrategy::D => {
                    (0..v).map(|_| standard_normal(&mut rng)).collect()
                }
                InputStrategy::B => (0..v).map(|_| rng.random::<f64>()).collect(),
            };
            let t = DenseTensor::from_vec(shape, data)?;
            match strategy {
                InputStrategy::C => wavelet_inverse(&t, WAVELET_LEVELS),
                InputStrategy::D => {
                    let factors = axis_factors.as_ref().expect("built above");
                    let mut out = t;
                    for (d, l) in factors.iter().enumerate() {
                        out = apply_along_mode(&out, d, |x| (l * DVector::from_column_slice(x)).as_slice().to_vec());
                    }
                    Ok(out.scaled(INPUT_GP_VARIANCE.sqrt()))
                }
                _ => Ok(t),
            }
        })
        .collect()
}

/// Cholesky factor of the per-axis correlation `exp(-15 (c_i - c_j)²)` with
/// coordinates `i / (p - 1)`.
fn coordinate_gp_factor(p: usize) -> Result<DMatrix<f64>> {
    let c = |i: usize| if p > 1 { i as f64 / (p - 1) as f64 } else { 0.0 };
    let k = DMatrix::from_fn(p, p, |i, j| (-INPUT_GP_DECAY * (c(i) - c(j)).powi(2)).exp());
    Ok(cholesky_jittered(k)?.l())
}

/// Apply a length-preserving map to every mode-`d` fibre of `t`.
pub fn apply_along_mode(t: &DenseTensor, d: usize, f: impl Fn(&[f64]) -> Vec<f64>) -> DenseTensor {
    apply_along_mode_sub(t, d, t.shape(), f)
}

/// As [`apply_along_mode`], restricted to the leading sub-block `extent`.
fn apply_along_mode_sub(t: &DenseTensor, d: usize, extent: &[usize], f: impl Fn(&[f64]) -> Vec<f64>) -> DenseTensor {
    let shape = t.shape().to_vec();
    let st = strides(&shape);
    let mut out = t.clone();
    let mut others: Vec<usize> = extent.to_vec();
    others[d] = 1;
    let n_fibres = voxel_count(&others);
    let mut fibre = vec![0.0; extent[d]];
    for k in 0..n_fibres {
        let idx = crate::tensor::unravel(k, &others);
        let base: usize = idx.iter().zip(&st).map(|(i, s)| i * s).sum();
        for (j, x) in fibre.iter_mut().enumerate() {
            *x = t.data()[base + j * st[d]];
        }
        let g = f(&fibre);
        for (j, x) in g.into_iter().enumerate() {
            out.data_mut()[base + j * st[d]] = x;
        }
    }
    out
}

fn highpass() -> [f64; 8] {
    let h = LA8_LOWPASS;
    let l = h.len();
    std::array::from_fn(|k| if k % 2 == 0 { h[l - 1 - k] } else { -h[l - 1 - k] })
}

/// One level of the periodic orthonormal DWT: approximation then detail.
fn dwt1(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    let half = n / 2;
    let g = highpass();
    let mut out = vec![0.0; n];
    for k in 0..half {
        let (mut a, mut d) = (0.0, 0.0);
        for (m, (&hm, &gm)) in LA8_LOWPASS.iter().zip(&g).enumerate() {
            let xv = x[(2 * k + m) % n];
            a += hm * xv;
            d += gm * xv;
        }
        out[k] = a;
        out[half + k] = d;
    }
    out
}

/// Inverse of [`dwt1`] (its transpose).
fn idwt1(c: &[f64]) -> Vec<f64> {
    let n = c.len();
    let half = n / 2;
    let g = highpass();
    let mut x = vec![0.0; n];
    for k in 0..half {
        for (m, (&hm, &gm)) in LA8_LOWPASS.iter().zip(&g).enumerate() {
            x[(2 * k + m) % n] += hm * c[k] + gm * c[half + k];
        }
    }
    x
}

/// Separable multilevel forward DWT; the coarsest approximation ends up in
/// the leading `p / 2^levels` corner.
pub fn wavelet_forward(x: &DenseTensor, levels: usize) -> Result<DenseTensor> {
    check_wavelet_shape(x.shape(), levels)?;
    let mut out = x.clone();
    for l in 0..levels {
        let extent: Vec<usize> = x.shape().iter().map(|&p| p >> l).collect();
        for d in 0..x.ndim() {
            out = apply_along_mode_sub(&out, d, &extent, dwt1);
        }
    }
    Ok(out)
}

pub fn wavelet_inverse(c: &DenseTensor, levels: usize) -> Result<DenseTensor> {
    check_wavelet_shape(c.shape(), levels)?;
    let mut out = c.clone();
    for l in (0..levels).rev() {
        let extent: Vec<usize> = c.shape().iter().map(|&p| p >> l).collect();
        for d in (0..c.ndim()).rev() {
            out = apply_along_mode_sub(&out, d, &extent, idwt1);
        }
    }
    Ok(out)
}

fn check_wavelet_shape(shape: &[usize], levels: usize) -> Result<()> {
    let f = 1usize << levels;
    if shape.iter().any(|&p| p % f != 0) {
        return Err(Error::Argument(format!("{levels}-level wavelet transform needs extents divisible by {f}, got {shape:?}")));
    }
    Ok(())
}

/// Number of voxels in a tetrahedral pyramid of base side `b`.
pub fn tetrahedral_number(b: usize) -> usize {
    b * (b + 1) * (b + 2) / 6
}

/// One pyramid of side `b` with its right-angle corner at `origin`, growing
/// along `dir` (±1 per axis): layer `k` is a right triangle of side `b - k`
/// shifted by `round(k / 3)` in the first two axes so the apex sits over
/// the base centroid.
fn paint_pyramid(t: &mut DenseTensor, origin: [isize; 3], dir: [isize; 3], b: usize) {
    for k in 0..b {
        let s = b - k;
        let shift = ((k as f64) / 3.0).round() as isize;
        for i in 0..s {
            for j in 0..s - i {
                let idx = [
                    origin[0] + dir[0] * (shift + i as isize),
                    origin[1] + dir[1] * (shift + j as isize),
                    origin[2] + dir[2] * k as isize,
                ];
                let idx: Vec<usize> = idx.iter().map(|&x| x as usize).collect();
                t.set(&idx, PYRAMID_VALUE);
            }
        }
    }
}

/// Coefficient construction (ii): one pyramid of base side ⌈p/2⌉ standing on
/// the bottom face, or two mirrored pyramids in opposite octants when the
/// largest extent is at least 16.
pub fn pyramid_tensor(shape: &[usize]) -> Result<DenseTensor> {
    if shape.len() != 3 {
        return Err(Error::Argument(format!("pyramid coefficients need a 3-D shape, got {shape:?}")));
    }
    let pmin = *shape.iter().min().expect("3 modes");
    let pmax = *shape.iter().max().expect("3 modes");
    let mut t = DenseTensor::zeros(shape);
    if pmax < 16 {
        let b = pmin.div_ceil(2);
        let x0 = ((shape[0] - b) / 2) as isize;
        let y0 = ((shape[1] - b) / 2) as isize;
        paint_pyramid(&mut t, [x0, y0, 0], [1, 1, 1], b);
    } else {
        let b = pmin / 2;
        paint_pyramid(&mut t, [0, 0, 0], [1, 1, 1], b);
        let far = [shape[0] as isize - 1, shape[1] as isize - 1, shape[2] as isize - 1];
        paint_pyramid(&mut t, far, [-1, -1, -1], b);
    }
    Ok(t)
}

/// Θ and Γ for a construction. Γ is zero unless `intercept` is set, in which
/// case it is an independent CP tensor of the same rank.
pub fn gen_coefficients(
    construction: Construction,
    shape: &[usize],
    rank: usize,
    intercept: bool,
    seed: u64,
) -> Result<(DenseTensor, DenseTensor)> {
    if rank == 0 {
        return Err(Error::Argument("coefficient rank must be positive".into()));
    }
    let mut rng = stream(seed, TAG_COEF, 0).rng();
    let theta = match construction {
        Construction::I => CpFactor::from_fn(shape, rank, |_, _, _| standard_normal(&mut rng)).compose(),
        Construction::Ii => pyramid_tensor(shape)?,
    };
    let mut rng = stream(seed, TAG_COEF, 1).rng();
    let gamma = if intercept {
        CpFactor::from_fn(shape, rank, |_, _, _| standard_normal(&mut rng)).compose()
    } else {
        DenseTensor::zeros(shape)
    };
    Ok((gamma, theta))
}

/// Empirical variance of every voxel of every input.
pub fn input_variance(inputs: &[DenseTensor]) -> f64 {
    let n: usize = inputs.iter().map(DenseTensor::len).sum();
    let mean = inputs.iter().flat_map(|t| t.data()).sum::<f64>() / n as f64;
    inputs.iter().flat_map(|t| t.data()).map(|x| (x - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0).max(1.0)
}

/// GP decay used by the generator for a patch of `q` voxels: typical squared
/// patch distances are `2 q s²`, so `φ₂ = 1 / (2 q s²)` puts typical
/// correlations near `e^{-1}`.
pub fn generator_phi2(q: usize, variance: f64) -> f64 {
    1.0 / (2.0 * q as f64 * variance.max(f64::MIN_POSITIVE))
}

/// Per-voxel GP draws `M_v ~ N(0, φ₁ exp(-φ₂ ||ΔP||²))` over the patches of
/// all subjects. Identical patches get identical values.
pub fn gp_map(inputs: &[DenseTensor], h: usize, phi1: f64, phi2: f64, seed: u64) -> Result<Vec<DenseTensor>> {
    let shape = inputs.first().ok_or_else(|| Error::Argument("no inputs".into()))?.shape().to_vec();
    let table = PatchTable::new(&shape, h)?;
    let nv = voxel_count(&shape);
    let per_voxel: Vec<Vec<f64>> = (0..nv)
        .into_par_iter()
        .map(|v| -> Result<Vec<f64>> {
            let patches: Vec<Vec<f64>> = inputs.iter().map(|x| table.values(x, v)).collect();
            let mut unique: Vec<usize> = Vec::new();
            let mut slot = Vec::with_capacity(patches.len());
            let mut seen: HashMap<Vec<u64>, usize> = HashMap::new();
            for (i, p) in patches.iter().enumerate() {
                let key: Vec<u64> = p.iter().map(|x| x.to_bits()).collect();
                let u = *seen.entry(key).or_insert_with(|| {
                    unique.push(i);
                    unique.len() - 1
                });
                slot.push(u);
            }
            let refs: Vec<&[f64]> = unique.iter().map(|&i| patches[i].as_slice()).collect();
            let k = crate::model::gp_kernel_matrix(&refs, phi1, phi2)?;
            let l = cholesky_jittered(k)?;
            let mut rng = stream(seed, TAG_MAP, v as u64).rng();
            let z = DVector::from_fn(unique.len(), |_, _| standard_normal(&mut rng));
            let m = l.lower_mul(&z);
            Ok(slot.iter().map(|&u| m[u]).collect())
        })
        .collect::<Result<_>>()?;
    Ok((0..inputs.len())
        .map(|n| DenseTensor::from_vec(&shape, (0..nv).map(|v| per_voxel[v][n]).collect()).expect("shape"))
        .collect())
}

/// The map `M` of a scenario applied to every subject. Returns the map
/// values and the `(patch, φ₁, φ₂)` used.
pub fn scenario_map(
    scenario: Scenario,
    inputs: &[DenseTensor],
    seed: u64,
) -> Result<(Vec<DenseTensor>, usize, Option<(f64, f64)>)> {
    let shape = inputs.first().ok_or_else(|| Error::Argument("no inputs".into()))?.shape().to_vec();
    match scenario {
        Scenario::PatchGp | Scenario::VoxelGp => {
            let h: usize = if scenario == Scenario::PatchGp { 3 } else { 1 };
            let q = h.pow(shape.len() as u32);
            let phi2 = generator_phi2(q, input_variance(inputs));
            Ok((gp_map(inputs, h, 1.0, phi2, seed)?, h, Some((1.0, phi2))))
        }
        Scenario::LogSquare => Ok((inputs.iter().map(|x| map_values(x, |v| (1.0 + v * v).ln())).collect(), 1, None)),
        Scenario::Linear => Ok((inputs.to_vec(), 1, None)),
        Scenario::SinPatchSum => {
            let table = PatchTable::new(&shape, 3)?;
            let nv = voxel_count(&shape);
            let maps = inputs
                .iter()
                .map(|x| {
                    let data = (0..nv).map(|v| table.values(x, v).iter().sum::<f64>().sin()).collect();
                    DenseTensor::from_vec(&shape, data).expect("shape")
                })
                .collect();
            Ok((maps, 3, None))
        }
    }
}

fn map_values(x: &DenseTensor, mut f: impl FnMut(f64) -> f64) -> DenseTensor {
    DenseTensor::from_vec(x.shape(), x.data().iter().map(|&v| f(v)).collect()).expect("shape")
}

/// Outcomes `Y_n = Γ + Θ ⊙ M_n + σ ε_n` with the effect and signal tensors.
pub fn gen_outcomes(
    maps: &[DenseTensor],
    gamma: &DenseTensor,
    theta: &DenseTensor,
    sigma: f64,
    seed: u64,
) -> Result<(Vec<DenseTensor>, Vec<DenseTensor>, Vec<DenseTensor>)> {
    if !(sigma >= 0.0) {
        return Err(Error::Argument(format!("noise sd must be nonnegative, got {sigma}")));
    }
    let mut ys = Vec::with_capacity(maps.len());
    let mut effects = Vec::with_capacity(maps.len());
    let mut signals = Vec::with_capacity(maps.len());
    for (n, m) in maps.iter().enumerate() {
        let effect = theta.hadamard(m)?;
        let signal = gamma.add(&effect)?;
        let mut rng = stream(seed, TAG_NOISE, n as u64).rng();
        let y = if sigma == 0.0 {
            signal.clone()
        } else {
            map_values(&signal, |s| s + sigma * standard_normal(&mut rng))
        };
        ys.push(y);
        effects.push(effect);
        signals.push(signal);
    }
    Ok((ys, effects, signals))
}

/// Generate a full dataset. The first `n_train` subjects form the training split.
pub fn simulate(spec: &SimSpec) -> Result<SimData> {
    if spec.n_train == 0 {
        return Err(Error::Argument("n_train must be positive".into()));
    }
    let n = spec.n_train + spec.n_test;
    let x = gen_inputs(spec.strategy, &spec.shape, n, spec.seed)?;
    let (gamma, theta) = gen_coefficients(spec.construction, &spec.shape, spec.true_rank, spec.intercept, spec.seed)?;
    let (maps, map_patch, phi) = scenario_map(spec.scenario, &x, spec.seed)?;
    let (y, effect, signal) = gen_outcomes(&maps, &gamma, &theta, spec.sigma, spec.seed)?;
    let manifest = SimManifest {
        spec: spec.clone(),
        map_patch,
        map_phi1: phi.map(|p| p.0),
        map_phi2: phi.map(|p| p.1),
        input_variance: input_variance(&x),
    };
    let dataset = Dataset::new(x, y, None, None, (0..spec.n_train).collect(), (spec.n_train..n).collect())?;
    Ok(SimData { dataset, gamma, theta, effect, signal, manifest })
}
