//! Dense tensors, CP (PARAFAC) factors and voxel-centred patches.
//!
//! Storage is flat with mode 1 varying fastest: the element at 1-based index
//! `(i_1, .., i_D)` lives at `i_1 + sum_{d>=2} (p_1 * .. * p_{d-1}) (i_d - 1)`
//! minus one. Everything in this module uses 0-based indices except
//! [`vec_offset`], which takes the 1-based form.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A D-way array of `f64` with mode-1-fastest layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(Error::Argument("tensor shape must have at least one mode".into()));
    }
    if shape.iter().any(|&p| p == 0) {
        return Err(Error::Argument(format!("tensor shape {shape:?} has a zero extent")));
    }
    Ok(shape.iter().product())
}

/// Number of voxels for a shape.
pub fn voxel_count(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Strides for the mode-1-fastest layout.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = Vec::with_capacity(shape.len());
    let mut acc = 1;
    for &p in shape {
        s.push(acc);
        acc *= p;
    }
    s
}

/// Flat offset for a 1-based multi-index.
pub fn vec_offset(index: &[usize], shape: &[usize]) -> Result<usize> {
    if index.len() != shape.len() {
        return Err(Error::Dimension(format!(
            "index has {} modes, shape has {}",
            index.len(),
            shape.len()
        )));
    }
    let mut offset = 0;
    let mut stride = 1;
    for (d, (&i, &p)) in index.iter().zip(shape).enumerate() {
        if i == 0 || i > p {
            return Err(Error::Range(format!("index {i} out of 1..={p} in mode {}", d + 1)));
        }
        offset += stride * (i - 1);
        stride *= p;
    }
    Ok(offset)
}

/// 0-based multi-index of a flat offset.
pub fn unravel(mut offset: usize, shape: &[usize]) -> Vec<usize> {
    let mut idx = Vec::with_capacity(shape.len());
    for &p in shape {
        idx.push(offset % p);
        offset /= p;
    }
    idx
}

/// 0-based index along `mode` of the voxel at `offset`.
#[inline]
pub fn mode_index(offset: usize, shape: &[usize], mode: usize) -> usize {
    let stride: usize = shape[..mode].iter().product();
    (offset / stride) % shape[mode]
}

/// Flat offsets of all voxels whose index along `mode` equals `j` (0-based).
pub fn slice_offsets(shape: &[usize], mode: usize, j: usize) -> impl Iterator<Item = usize> + '_ {
    let inner: usize = shape[..mode].iter().product();
    let outer: usize = shape[mode + 1..].iter().product();
    let block = inner * shape[mode];
    (0..outer).flat_map(move |o| {
        let base = o * block + j * inner;
        base..base + inner
    })
}

impl DenseTensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = check_shape(shape).expect("invalid tensor shape");
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n = check_shape(shape)?;
        if data.len() != n {
            return Err(Error::Dimension(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(&[usize]) -> f64) -> Self {
        let n = check_shape(shape).expect("invalid tensor shape");
        let data = (0..n).map(|o| f(&unravel(o, shape))).collect();
        Self { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Flat offset of a 0-based multi-index.
    pub fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut o = 0;
        let mut stride = 1;
        for (&i, &p) in idx.iter().zip(&self.shape) {
            debug_assert!(i < p);
            o += stride * i;
            stride *= p;
        }
        o
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], value: f64) {
        let o = self.offset(idx);
        self.data[o] = value;
    }

    fn same_shape(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!(
                "shapes {:?} and {:?} differ",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    /// Full inner product `<A, B>`.
    pub fn inner(&self, other: &Self) -> Result<f64> {
        self.same_shape(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|x| c * x).collect() }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Self { shape: self.shape.clone(), data })
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Self { shape: self.shape.clone(), data })
    }

    pub fn hadamard(&self, other: &Self) -> Result<Self> {
        self.same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a * b).collect();
        Ok(Self { shape: self.shape.clone(), data })
    }

    pub fn frobenius_norm(&self) -> f64 {
        frobenius_norm(self)
    }
}

/// Sum over the slice `i_mode == j` of `A * B` elementwise (0-based `mode`, `j`).
pub fn slice_inner_product(a: &DenseTensor, b: &DenseTensor, mode: usize, j: usize) -> Result<f64> {
    a.same_shape(b)?;
    if mode >= a.ndim() {
        return Err(Error::Range(format!("mode {mode} out of range for {}-way tensor", a.ndim())));
    }
    if j >= a.shape[mode] {
        return Err(Error::Range(format!("slice index {j} out of 0..{}", a.shape[mode])));
    }
    Ok(slice_offsets(&a.shape, mode, j).map(|o| a.data[o] * b.data[o]).sum())
}

/// Square root of the sum of squares.
pub fn frobenius_norm(a: &DenseTensor) -> f64 {
    a.data.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Outer product `m_1 ∘ m_2 ∘ .. ∘ m_D` in mode-1-fastest layout.
pub fn outer(margins: &[&[f64]]) -> Vec<f64> {
    let mut out = vec![1.0];
    for m in margins {
        let mut next = Vec::with_capacity(out.len() * m.len());
        for &c in m.iter() {
            next.extend(out.iter().map(|&x| x * c));
        }
        out = next;
    }
    out
}

/// Rank-R CP factor: `margins[d][r]` is the mode-`d` margin of component `r`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CpFactor {
    shape: Vec<usize>,
    rank: usize,
    margins: Vec<Vec<Vec<f64>>>,
}

impl CpFactor {
    pub fn new(shape: &[usize], margins: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        check_shape(shape)?;
        if margins.len() != shape.len() {
            return Err(Error::Dimension(format!(
                "{} margin modes for a {}-way shape",
                margins.len(),
                shape.len()
            )));
        }
        let rank = margins[0].len();
        if rank == 0 {
            return Err(Error::Argument("CP rank must be positive".into()));
        }
        for (d, per_rank) in margins.iter().enumerate() {
            if per_rank.len() != rank {
                return Err(Error::Dimension(format!("mode {d} has {} components, expected {rank}", per_rank.len())));
            }
            for m in per_rank {
                if m.len() != shape[d] {
                    return Err(Error::Dimension(format!(
                        "margin of mode {d} has length {}, expected {}",
                        m.len(),
                        shape[d]
                    )));
                }
            }
        }
        Ok(Self { shape: shape.to_vec(), rank, margins })
    }

    pub fn zeros(shape: &[usize], rank: usize) -> Self {
        let margins = shape.iter().map(|&p| vec![vec![0.0; p]; rank]).collect();
        Self::new(shape, margins).expect("valid CP shape")
    }

    pub fn from_fn(shape: &[usize], rank: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let margins = shape
            .iter()
            .enumerate()
            .map(|(d, &p)| (0..rank).map(|r| (0..p).map(|i| f(d, r, i)).collect()).collect())
            .collect();
        Self::new(shape, margins).expect("valid CP shape")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn margin(&self, mode: usize, r: usize) -> &[f64] {
        &self.margins[mode][r]
    }

    pub fn margin_mut(&mut self, mode: usize, r: usize) -> &mut [f64] {
        &mut self.margins[mode][r]
    }

    pub fn margins(&self) -> &[Vec<Vec<f64>>] {
        &self.margins
    }

    /// The rank-one tensor of component `r`.
    pub fn component(&self, r: usize) -> DenseTensor {
        let ms: Vec<&[f64]> = (0..self.ndim()).map(|d| self.margin(d, r)).collect();
        DenseTensor { shape: self.shape.clone(), data: outer(&ms) }
    }

    /// Component `r` with the mode-`skip` margin replaced by ones.
    pub fn partial_outer(&self, r: usize, skip: usize) -> DenseTensor {
        let ones = vec![1.0; self.shape[skip]];
        let ms: Vec<&[f64]> = (0..self.ndim())
            .map(|d| if d == skip { ones.as_slice() } else { self.margin(d, r) })
            .collect();
        DenseTensor { shape: self.shape.clone(), data: outer(&ms) }
    }

    /// `sum_r outer(margins[..][r])`.
    pub fn compose(&self) -> DenseTensor {
        let mut out = DenseTensor::zeros(&self.shape);
        for r in 0..self.rank {
            let c = self.component(r);
            for (o, x) in out.data.iter_mut().zip(c.data) {
                *o += x;
            }
        }
        out
    }
}

/// Free-function form of [`CpFactor::compose`].
pub fn cp_compose(f: &CpFactor) -> DenseTensor {
    f.compose()
}

/// An `h^D` cube of input values centred at a voxel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Patch {
    pub center: Vec<usize>,
    pub size: usize,
    pub values: Vec<f64>,
}

impl Patch {
    /// Position of the centre voxel within `values`.
    pub fn center_position(&self) -> usize {
        let half = self.size / 2;
        let mut pos = 0;
        let mut stride = 1;
        for _ in &self.center {
            pos += half * stride;
            stride *= self.size;
        }
        pos
    }

    pub fn center_value(&self) -> f64 {
        self.values[self.center_position()]
    }

    pub fn squared_distance(&self, other: &Patch) -> f64 {
        squared_distance(&self.values, &other.values)
    }
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check_patch_size(h: usize) -> Result<()> {
    if h == 0 || h % 2 == 0 {
        return Err(Error::Argument(format!("patch size must be a positive odd integer, got {h}")));
    }
    Ok(())
}

/// Relative offsets `-(h-1)/2 ..= (h-1)/2` in every mode, mode 1 fastest.
pub fn patch_offsets(ndim: usize, h: usize) -> Result<Vec<Vec<isize>>> {
    check_patch_size(h)?;
    let half = (h / 2) as isize;
    let count = h.pow(ndim as u32);
    Ok((0..count)
        .map(|k| unravel(k, &vec![h; ndim]).into_iter().map(|i| i as isize - half).collect())
        .collect())
}

/// Flat source offsets of the patch around `center`; `None` marks zero padding.
pub fn patch_sources(shape: &[usize], center: &[usize], offsets: &[Vec<isize>]) -> Vec<Option<usize>> {
    offsets
        .iter()
        .map(|rel| {
            let mut o = 0usize;
            let mut stride = 1usize;
            for ((&c, &r), &p) in center.iter().zip(rel).zip(shape) {
                let i = c as isize + r;
                if i < 0 || i >= p as isize {
                    return None;
                }
                o += stride * i as usize;
                stride *= p;
            }
            Some(o)
        })
        .collect()
}

/// Extract the zero-padded `h^D` patch of `x` centred at `center` (0-based).
pub fn extract_patch(x: &DenseTensor, center: &[usize], h: usize) -> Result<Patch> {
    check_patch_size(h)?;
    if center.len() != x.ndim() {
        return Err(Error::Dimension(format!("centre has {} modes, tensor has {}", center.len(), x.ndim())));
    }
    if center.iter().zip(x.shape()).any(|(&c, &p)| c >= p) {
        return Err(Error::Range(format!("centre {center:?} outside shape {:?}", x.shape())));
    }
    let offsets = patch_offsets(x.ndim(), h)?;
    let values = patch_sources(x.shape(), center, &offsets)
        .into_iter()
        .map(|s| s.map_or(0.0, |o| x.data[o]))
        .collect();
    Ok(Patch { center: center.to_vec(), size: h, values })
}
