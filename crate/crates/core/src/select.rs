//! Deviance information criterion and rank selection.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Dataset, ModelConfig};
use crate::sampler::{run_chain, Chain, Workspace};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dic {
    /// Posterior mean deviance.
    pub mean_deviance: f64,
    /// Deviance at the posterior mean of the parameters.
    pub deviance_at_mean: f64,
    pub p_d: f64,
    pub dic: f64,
}

/// `D̄ + p_D` with `p_D = D̄ - D(Ψ̄)`. The plug-in uses posterior-mean
/// coefficient tensors, atoms and noise standard deviation.
pub fn compute_dic(chain: &Chain, data: &Dataset, config: &ModelConfig) -> Result<Dic> {
    if chain.is_empty() {
        return Err(Error::State("chain has no retained states".into()));
    }
    let ws = Workspace::new(config, data)?;
    if ws.masks.group_voxels != chain.group_voxels || ws.train != chain.train {
        return Err(Error::Validation("chain was fitted with a different group mask or training split".into()));
    }
    let mean_deviance = chain.deviance.iter().sum::<f64>() / chain.deviance.len() as f64;
    let (resid, _) =
        ws.residual_dense(&chain.mean_gamma(), &chain.mean_theta(), &chain.mean_delta(), &chain.mean_atoms());
    let sigma = chain.mean_sigma();
    let deviance_at_mean = ws.deviance(&resid, sigma * sigma);
    let p_d = mean_deviance - deviance_at_mean;
    Ok(Dic { mean_deviance, deviance_at_mean, p_d, dic: mean_deviance + p_d })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankRow {
    pub rank: usize,
    #[serde(flatten)]
    pub dic: Dic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankReport {
    pub rows: Vec<RankRow>,
    pub best: usize,
}

/// The rank with the smallest DIC; ties go to the smaller rank.
pub fn best_rank(rows: &[RankRow]) -> Option<usize> {
    let mut best: Option<&RankRow> = None;
    for r in rows {
        best = match best {
            Some(b) if r.dic.dic > b.dic.dic || (r.dic.dic == b.dic.dic && r.rank > b.rank) => Some(b),
            _ => Some(r),
        };
    }
    best.map(|r| r.rank)
}

/// Fit one chain per rank with the same seed and report DIC for each.
pub fn rank_sweep(data: &Dataset, config: &ModelConfig, ranks: &[usize], seed: u64) -> Result<RankReport> {
    if ranks.is_empty() {
        return Err(Error::Argument("rank list is empty".into()));
    }
    let mut rows = Vec::with_capacity(ranks.len());
    for &rank in ranks {
        let cfg = ModelConfig { rank, ..config.clone() };
        let chain = run_chain(&cfg, data, seed)?;
        let dic = compute_dic(&chain, data, &cfg)?;
        log::info!("rank {rank}: DIC {:.3} (p_D {:.3})", dic.dic, dic.p_d);
        rows.push(RankRow { rank, dic });
    }
    let best = best_rank(&rows).expect("nonempty");
    Ok(RankReport { rows, best })
}

impl RankReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("rank,dic,mean_deviance,deviance_at_mean,p_d,selected\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{:.6},{:.6},{:.6},{:.6},{}",
                r.rank,
                r.dic.dic,
                r.dic.mean_deviance,
                r.dic.deviance_at_mean,
                r.dic.p_d,
                r.rank == self.best
            );
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}
