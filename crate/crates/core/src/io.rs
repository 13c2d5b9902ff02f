//! On-disk formats.
//!
//! A dataset is a directory with `manifest.json` and one flat file of
//! little-endian f64 values per subject per tensor role. A chain file is
//! `MAGIC | version u32 | length u64 | JSON checkpoint | SHA-256 of all
//! preceding bytes`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::Dataset;
use crate::sampler::Checkpoint;
use crate::simgen::{SimData, SimManifest};
use crate::tensor::DenseTensor;

pub const DATASET_FORMAT_VERSION: u32 = 1;
pub const CHAIN_FORMAT_VERSION: u32 = 1;
pub const CHAIN_MAGIC: &[u8; 8] = b"BTVCHAIN";
const DIGEST_LEN: usize = 32;
const HEADER_LEN: usize = 8 + 4 + 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetFiles {
    pub x: Vec<String>,
    pub y: Vec<String>,
    /// All covariates, subject major, `subjects × covariates` values.
    pub z: Option<String>,
    pub masks: Option<Vec<String>>,
}

/// Ground-truth files written alongside simulated data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthFiles {
    pub gamma: String,
    pub theta: String,
    pub effect: Vec<String>,
    pub signal: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub byte_order: String,
    pub element_type: String,
    pub shape: Vec<usize>,
    pub subjects: usize,
    pub covariate_names: Vec<String>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub files: DatasetFiles,
    #[serde(default)]
    pub generation: Option<SimManifest>,
    #[serde(default)]
    pub truth: Option<TruthFiles>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.format_version != DATASET_FORMAT_VERSION {
            return Err(Error::Version { found: self.format_version, expected: DATASET_FORMAT_VERSION });
        }
        if self.byte_order != "little" || self.element_type != "f64" {
            return Err(Error::Validation(format!(
                "unsupported payload encoding {} {}; expected little f64",
                self.byte_order, self.element_type
            )));
        }
        let n = self.subjects;
        let count = |name: &str, len: usize| {
            if len == n {
                Ok(())
            } else {
                Err(Error::Validation(format!("manifest lists {len} {name} files for {n} subjects")))
            }
        };
        count("X", self.files.x.len())?;
        count("Y", self.files.y.len())?;
        if let Some(m) = &self.files.masks {
            count("mask", m.len())?;
        }
        Ok(())
    }
}

pub fn write_f64s(path: &Path, values: &[f64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Read exactly `expected` values, with distinct errors for a missing file,
/// a size mismatch and non-finite entries.
pub fn read_f64s(path: &Path, expected: usize) -> Result<Vec<f64>> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let bytes = fs::read(path)?;
    if bytes.len() != expected * 8 {
        return Err(Error::Validation(format!(
            "{} holds {} bytes, expected {} ({} f64 values)",
            path.display(),
            bytes.len(),
            expected * 8,
            expected
        )));
    }
    let values: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Validation(format!("{} has a non-finite value at element {i}", path.display())));
    }
    Ok(values)
}

fn tensor_files(role: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{role}_{i:05}.f64")).collect()
}

fn write_tensors(dir: &Path, names: &[String], ts: &[DenseTensor]) -> Result<()> {
    for (name, t) in names.iter().zip(ts) {
        write_f64s(&dir.join(name), t.data())?;
    }
    Ok(())
}

fn read_tensors(dir: &Path, names: &[String], shape: &[usize]) -> Result<Vec<DenseTensor>> {
    let nv: usize = shape.iter().product();
    names.iter().map(|name| DenseTensor::from_vec(shape, read_f64s(&dir.join(name), nv)?)).collect()
}

fn write_manifest(dir: &Path, m: &DatasetManifest) -> Result<()> {
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(m)?)?;
    Ok(())
}

fn base_manifest(data: &Dataset) -> DatasetManifest {
    let n = data.n_subjects();
    DatasetManifest {
        format_version: DATASET_FORMAT_VERSION,
        byte_order: "little".into(),
        element_type: "f64".into(),
        shape: data.shape.clone(),
        subjects: n,
        covariate_names: data.covariate_names.clone(),
        train: data.train.clone(),
        test: data.test.clone(),
        files: DatasetFiles {
            x: tensor_files("x", n),
            y: tensor_files("y", n),
            z: (data.n_covariates() > 0).then(|| "z.f64".to_string()),
            masks: Some(tensor_files("mask", n)),
        },
        generation: None,
        truth: None,
    }
}

fn write_payload(dir: &Path, data: &Dataset, m: &DatasetManifest) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_tensors(dir, &m.files.x, &data.x)?;
    write_tensors(dir, &m.files.y, &data.y)?;
    if let Some(masks) = &m.files.masks {
        write_tensors(dir, masks, &data.masks)?;
    }
    if let Some(z) = &m.files.z {
        let flat: Vec<f64> = data.z.iter().flatten().copied().collect();
        write_f64s(&dir.join(z), &flat)?;
    }
    Ok(())
}

pub fn save_dataset(dir: &Path, data: &Dataset) -> Result<DatasetManifest> {
    data.validate()?;
    let m = base_manifest(data);
    write_payload(dir, data, &m)?;
    write_manifest(dir, &m)?;
    Ok(m)
}

/// Save a simulated dataset together with its generation record and truth.
pub fn save_simulation(dir: &Path, sim: &SimData) -> Result<DatasetManifest> {
    let data = &sim.dataset;
    data.validate()?;
    let n = data.n_subjects();
    let mut m = base_manifest(data);
    m.generation = Some(sim.manifest.clone());
    m.truth = Some(TruthFiles {
        gamma: "truth_gamma.f64".into(),
        theta: "truth_theta.f64".into(),
        effect: tensor_files("truth_effect", n),
        signal: tensor_files("truth_signal", n),
    });
    write_payload(dir, data, &m)?;
    let t = m.truth.as_ref().expect("set above");
    write_f64s(&dir.join(&t.gamma), sim.gamma.data())?;
    write_f64s(&dir.join(&t.theta), sim.theta.data())?;
    write_tensors(dir, &t.effect, &sim.effect)?;
    write_tensors(dir, &t.signal, &sim.signal)?;
    write_manifest(dir, &m)?;
    Ok(m)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join("manifest.json");
    if !path.is_file() {
        return Err(Error::MissingFile(path));
    }
    let m: DatasetManifest = serde_json::from_str(&fs::read_to_string(&path)?)?;
    m.validate()?;
    Ok(m)
}

/// Load and fully validate a dataset directory.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let m = read_manifest(dir)?;
    let x = read_tensors(dir, &m.files.x, &m.shape)?;
    let y = read_tensors(dir, &m.files.y, &m.shape)?;
    let masks = m.files.masks.as_ref().map(|f| read_tensors(dir, f, &m.shape)).transpose()?;
    let s = m.covariate_names.len();
    let z = match &m.files.z {
        Some(f) => {
            let flat = read_f64s(&dir.join(f), m.subjects * s)?;
            Some(flat.chunks(s.max(1)).map(<[f64]>::to_vec).take(m.subjects).collect())
        }
        None if s == 0 => None,
        None => return Err(Error::Validation(format!("manifest names {s} covariates but no covariate file"))),
    };
    let mut data = Dataset::new(x, y, z, masks, m.train.clone(), m.test.clone())?;
    data.covariate_names = m.covariate_names.clone();
    Ok(data)
}

/// Ground truth of a simulated dataset, if it was saved with one.
#[derive(Clone, Debug, PartialEq)]
pub struct Truth {
    pub gamma: DenseTensor,
    pub theta: DenseTensor,
    pub effect: Vec<DenseTensor>,
    pub signal: Vec<DenseTensor>,
}

pub fn load_truth(dir: &Path) -> Result<Option<Truth>> {
    let m = read_manifest(dir)?;
    let Some(t) = &m.truth else { return Ok(None) };
    let nv: usize = m.shape.iter().product();
    Ok(Some(Truth {
        gamma: DenseTensor::from_vec(&m.shape, read_f64s(&dir.join(&t.gamma), nv)?)?,
        theta: DenseTensor::from_vec(&m.shape, read_f64s(&dir.join(&t.theta), nv)?)?,
        effect: read_tensors(dir, &t.effect, &m.shape)?,
        signal: read_tensors(dir, &t.signal, &m.shape)?,
    }))
}

/// Encode a checkpoint in the chain file format.
pub fn encode_chain(cp: &Checkpoint) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(cp)?;
    let mut out = Vec::with_capacity(HEADER_LEN + json.len() + DIGEST_LEN);
    out.extend_from_slice(CHAIN_MAGIC);
    out.extend_from_slice(&CHAIN_FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

pub fn decode_chain(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < HEADER_LEN + DIGEST_LEN || &bytes[..8] != CHAIN_MAGIC {
        return Err(Error::Integrity("not a chain file (bad magic or too short)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHAIN_FORMAT_VERSION {
        return Err(Error::Version { found: version, expected: CHAIN_FORMAT_VERSION });
    }
    let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    if bytes.len() != HEADER_LEN + len + DIGEST_LEN {
        return Err(Error::Integrity(format!(
            "file is {} bytes but its header declares {}",
            bytes.len(),
            HEADER_LEN + len + DIGEST_LEN
        )));
    }
    let (body, digest) = bytes.split_at(HEADER_LEN + len);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Integrity("checksum mismatch".into()));
    }
    let cp: Checkpoint = serde_json::from_slice(&body[HEADER_LEN..])?;
    cp.state.validate()?;
    Ok(cp)
}

/// Write atomically via a temporary sibling file.
pub fn save_chain(path: &Path, cp: &Checkpoint) -> Result<()> {
    let bytes = encode_chain(cp)?;
    let tmp: PathBuf = path.with_extension("partial");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Load a chain file. An empty chain loads but is logged.
pub fn load_chain(path: &Path) -> Result<Checkpoint> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let cp = decode_chain(&fs::read(path)?)?;
    if cp.chain.is_empty() {
        log::warn!("{} holds an empty chain (iteration {})", path.display(), cp.iteration);
    }
    Ok(cp)
}
