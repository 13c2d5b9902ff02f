use serde::{Deserialize, Serialize};

use crate::model::{ModelConfig, ModelState};
use crate::tensor::DenseTensor;

/// Accepted / proposed counts of one Metropolis-Hastings target.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Counter {
    pub accepted: u64,
    pub proposed: u64,
}

impl Counter {
    pub fn record(&mut self, accepted: bool) {
        self.proposed += 1;
        self.accepted += accepted as u64;
    }

    pub fn rate(&self) -> f64 {
        if self.proposed == 0 {
            0.0
        } else {
            self.accepted as f64 / self.proposed as f64
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Acceptance {
    pub gamma_alpha: Counter,
    pub theta_alpha: Counter,
    pub delta_alpha: Vec<Counter>,
    pub phi2: Counter,
}

/// Retained draws and running summaries of one MCMC run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Chain {
    pub shape: Vec<usize>,
    /// Training subjects, in the order the atoms and products use.
    pub train: Vec<usize>,
    /// Group-mask voxels, in atom order.
    pub group_voxels: Vec<usize>,
    pub states: Vec<ModelState>,
    /// Deviance of each retained state.
    pub deviance: Vec<f64>,
    /// Flat offsets of the traced voxels.
    pub trace_voxels: Vec<usize>,
    /// Training-split position of the traced subject.
    pub trace_subject: usize,
    /// `traces[k][i]` is Θ(v)·M at traced voxel `k` in retained draw `i`.
    pub traces: Vec<Vec<f64>>,
    pub acceptance: Acceptance,
    /// Proposal variance of φ₂ in force at each iteration.
    pub phi2_proposal_var: Vec<f64>,
    /// Wall-clock seconds per iteration.
    pub timings: Vec<f64>,
    /// Atom updates that failed and kept the previous value.
    pub atom_failures: u64,
    pub retained: usize,
    sum_gamma: DenseTensor,
    sum_theta: DenseTensor,
    sum_delta: Vec<DenseTensor>,
    sum_sigma: f64,
    sum_atoms: Vec<Vec<f64>>,
    /// Σ over retained draws of Θ(v)·A_n(v), training subject major.
    sum_product: Vec<f64>,
    sum_product_sq: Vec<f64>,
}

impl Chain {
    pub fn new(shape: &[usize], train: &[usize], group_voxels: &[usize], trace_voxels: Vec<usize>, trace_subject: usize, covariates: usize) -> Self {
        let v: usize = shape.iter().product();
        let nt = train.len();
        Self {
            shape: shape.to_vec(),
            train: train.to_vec(),
            group_voxels: group_voxels.to_vec(),
            states: Vec::new(),
            deviance: Vec::new(),
            traces: vec![Vec::new(); trace_voxels.len()],
            trace_voxels,
            trace_subject,
            acceptance: Acceptance { delta_alpha: vec![Counter::default(); covariates], ..Default::default() },
            phi2_proposal_var: Vec::new(),
            timings: Vec::new(),
            atom_failures: 0,
            retained: 0,
            sum_gamma: DenseTensor::zeros(shape),
            sum_theta: DenseTensor::zeros(shape),
            sum_delta: vec![DenseTensor::zeros(shape); covariates],
            sum_sigma: 0.0,
            sum_atoms: vec![vec![0.0; nt]; group_voxels.len()],
            sum_product: vec![0.0; nt * v],
            sum_product_sq: vec![0.0; nt * v],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.retained == 0
    }

    /// Fold one retained draw into the chain. `product[n * V + v]` is
    /// Θ(v)·A_n(v) for training subject `n`.
    pub fn record(&mut self, state: &ModelState, deviance: f64, product: &[f64], store_atoms: bool) {
        add_into(&mut self.sum_gamma, &state.gamma.factor.compose());
        add_into(&mut self.sum_theta, &state.theta.factor.compose());
        for (acc, b) in self.sum_delta.iter_mut().zip(&state.delta) {
            add_into(acc, &b.factor.compose());
        }
        self.sum_sigma += state.sigma2.sqrt();
        for (acc, a) in self.sum_atoms.iter_mut().zip(&state.atoms) {
            for (s, x) in acc.iter_mut().zip(a) {
                *s += x;
            }
        }
        for ((s, q), &x) in self.sum_product.iter_mut().zip(self.sum_product_sq.iter_mut()).zip(product) {
            *s += x;
            *q += x * x;
        }
        let v: usize = self.shape.iter().product();
        let base = self.trace_subject * v;
        for (k, &vox) in self.trace_voxels.iter().enumerate() {
            self.traces[k].push(product[base + vox]);
        }
        self.deviance.push(deviance);
        self.states.push(if store_atoms { state.clone() } else { state.without_atoms() });
        self.retained += 1;
    }

    fn mean_of(&self, t: &DenseTensor) -> DenseTensor {
        t.scaled(1.0 / self.retained.max(1) as f64)
    }

    pub fn mean_gamma(&self) -> DenseTensor {
        self.mean_of(&self.sum_gamma)
    }

    pub fn mean_theta(&self) -> DenseTensor {
        self.mean_of(&self.sum_theta)
    }

    pub fn mean_delta(&self) -> Vec<DenseTensor> {
        self.sum_delta.iter().map(|t| self.mean_of(t)).collect()
    }

    pub fn mean_sigma(&self) -> f64 {
        self.sum_sigma / self.retained.max(1) as f64
    }

    pub fn mean_atoms(&self) -> Vec<Vec<f64>> {
        let c = 1.0 / self.retained.max(1) as f64;
        self.sum_atoms.iter().map(|a| a.iter().map(|x| x * c).collect()).collect()
    }

    /// Posterior mean of Θ(v)·A_n(v) for training subject position `n`.
    pub fn mean_product(&self, n: usize) -> DenseTensor {
        let v: usize = self.shape.iter().product();
        let c = 1.0 / self.retained.max(1) as f64;
        DenseTensor::from_vec(&self.shape, self.sum_product[n * v..(n + 1) * v].iter().map(|x| x * c).collect())
            .expect("shape matches")
    }

    /// Posterior variance of Θ(v)·A_n(v).
    pub fn var_product(&self, n: usize) -> DenseTensor {
        let v: usize = self.shape.iter().product();
        let k = self.retained.max(1) as f64;
        let data = (n * v..(n + 1) * v)
            .map(|i| {
                let m = self.sum_product[i] / k;
                (self.sum_product_sq[i] / k - m * m).max(0.0)
            })
            .collect();
        DenseTensor::from_vec(&self.shape, data).expect("shape matches")
    }
}

fn add_into(acc: &mut DenseTensor, x: &DenseTensor) {
    for (a, b) in acc.data_mut().iter_mut().zip(x.data()) {
        *a += b;
    }
}

/// State of the φ₂ proposal adaptation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adaptation {
    pub log_var: f64,
    pub steps: u64,
}

/// Everything needed to continue a run bit-for-bit: the random streams are
/// keyed by (seed, iteration), so no generator state is stored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub seed: u64,
    /// Number of completed iterations.
    pub iteration: usize,
    pub state: ModelState,
    pub adaptation: Adaptation,
    pub chain: Chain,
}
