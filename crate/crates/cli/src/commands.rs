use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use btotvc::io::{load_chain, load_dataset, load_truth, save_chain, save_simulation, write_f64s};
use btotvc::metrics::{
    chain_geweke, geweke_summary, geweke_table, intercept_only_prediction, pearson, rpe_per_voxel, score,
    write_geweke_csv, write_trace_csv, write_voxel_metrics_csv, Pearson, PearsonMode, Scores,
};
use btotvc::model::{Dataset, ModelConfig};
use btotvc::predict::{interval_coverage, kriging_predict, PredictOptions};
use btotvc::sampler::Sampler;
use btotvc::select::rank_sweep;
use btotvc::simgen::{simulate, SimSpec};
use btotvc::tensor::DenseTensor;

use crate::{Command, ModelFlags};

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Simulate { code, shape, n_train, n_test, sigma, seed, true_rank, intercept, out } => {
            let spec = SimSpec {
                shape,
                n_train,
                n_test,
                sigma,
                seed,
                true_rank,
                intercept,
                ..SimSpec::from_code(&code)?
            };
            let sim = simulate(&spec)?;
            save_simulation(&out, &sim)?;
            println!("wrote {} ({} subjects) to {}", spec.code(), sim.dataset.n_subjects(), out.display());
            Ok(())
        }
        Command::Fit { data, model, out, checkpoint_every, resume } => fit(&data, &model, &out, checkpoint_every, resume),
        Command::Predict { data, chain, out, max_states, level } => predict(&data, &chain, &out, max_states, level),
        Command::SelectRank { data, ranks, model, out } => {
            let dataset = load_dataset(&data)?;
            let config = model_config(&model, &dataset)?;
            let report = rank_sweep(&dataset, &config, &ranks, model.seed)?;
            report.write_csv(&out)?;
            print!("{}", report.to_csv());
            println!("selected rank {}", report.best);
            Ok(())
        }
        Command::Diagnose { chain, out } => diagnose(&chain, &out),
        Command::Report { inputs, out } => report(&inputs, out.as_deref()),
    }
}

/// Configuration from an optional TOML file with flag overrides.
pub fn model_config(flags: &ModelFlags, data: &Dataset) -> Result<ModelConfig> {
    let mut c = match &flags.config {
        Some(p) => ModelConfig::load(p)?,
        None => ModelConfig::default(),
    };
    if let Some(v) = flags.iters {
        c.iterations = v;
    }
    if let Some(b) = flags.burnin {
        if b < 0.0 {
            bail!(btotvc::Error::Argument(format!("burn-in must be nonnegative, got {b}")));
        }
        c.burnin = if b < 1.0 { b } else { b / c.iterations as f64 };
    }
    if let Some(v) = flags.rank {
        c.rank = v;
    }
    if let Some(v) = flags.patch {
        c.patch = v;
    }
    if let Some(v) = flags.tau_mask {
        c.tau_mask = v;
    }
    if let Some(v) = flags.thin {
        c.thin = v;
    }
    c.covariates = data.n_covariates();
    c.validate()?;
    Ok(c)
}

fn fit(data: &Path, flags: &ModelFlags, out: &Path, every: Option<usize>, resume: Option<PathBuf>) -> Result<()> {
    let dataset = load_dataset(data)?;
    let mut sampler = match resume {
        Some(path) => {
            let cp = load_chain(&path)?;
            log::info!("resuming from iteration {} of {}", cp.iteration, cp.config.iterations);
            Sampler::resume(cp, &dataset)?
        }
        None => Sampler::new(model_config(flags, &dataset)?, &dataset, flags.seed)?,
    };
    let total = sampler.config().iterations;
    let step = every.filter(|&k| k > 0).unwrap_or(total);
    while !sampler.is_done() {
        let target = (sampler.iteration() + step).min(total);
        sampler.run_until(target)?;
        save_chain(out, &sampler.checkpoint())?;
        log::info!("iteration {target}/{total}, chain written to {}", out.display());
    }
    let chain = sampler.chain();
    let secs: f64 = chain.timings.iter().sum();
    println!(
        "{} iterations in {:.1}s, {} retained, phi2 acceptance {:.3}",
        total,
        secs,
        chain.retained,
        chain.acceptance.phi2.rate()
    );
    Ok(())
}

/// Everything `predict` writes to `metrics.json`.
#[derive(Debug, Serialize, Deserialize)]
pub struct MetricsFile {
    pub label: String,
    pub model: Scores,
    pub intercept_only: Scores,
    /// Scores against the noiseless outcomes, when the dataset carries truth.
    pub model_vs_signal: Option<Scores>,
    /// Per-voxel RPE of the posterior mean Θ·M on training subjects.
    pub coefficient_rpe: Option<f64>,
    /// Share of observed test outcomes inside the intervals. The intervals
    /// are for the noiseless outcome, so this understates calibration.
    pub coverage: f64,
    /// Share of noiseless test outcomes inside the intervals, with truth.
    pub coverage_signal: Option<f64>,
    pub level: f64,
    pub states_used: usize,
}

fn write_tensors(dir: &Path, role: &str, subjects: &[usize], ts: &[DenseTensor]) -> Result<()> {
    for (n, t) in subjects.iter().zip(ts) {
        write_f64s(&dir.join(format!("{role}_{n:05}.f64")), t.data())?;
    }
    Ok(())
}

fn predict(data: &Path, chain: &Path, out: &Path, max_states: usize, level: f64) -> Result<()> {
    let dataset = load_dataset(data)?;
    if dataset.test.is_empty() {
        bail!(btotvc::Error::Validation("dataset has no test subjects".into()));
    }
    let cp = load_chain(chain)?;
    let pred = kriging_predict(&cp.chain, &dataset, &cp.config, &PredictOptions { max_states, level })?;
    fs::create_dir_all(out)?;
    write_tensors(out, "mean", &pred.subjects, &pred.mean)?;
    write_tensors(out, "variance", &pred.subjects, &pred.variance)?;
    write_tensors(out, "lower", &pred.subjects, &pred.lower)?;
    write_tensors(out, "upper", &pred.subjects, &pred.upper)?;

    let y: Vec<DenseTensor> = dataset.test.iter().map(|&n| dataset.y[n].clone()).collect();
    let model = score(&y, &pred.mean)?;
    let baseline = score(&y, &intercept_only_prediction(&dataset)?)?;
    let no_corr = Pearson { value: f64::NAN, per_voxel: Vec::new(), skipped: 0 };
    write_voxel_metrics_csv(
        &out.join("voxel_metrics.csv"),
        &rpe_per_voxel(&y, &pred.mean)?,
        &pearson(&y, &pred.mean, PearsonMode::PerVoxelAvg).unwrap_or(no_corr),
    )?;
    let manifest = btotvc::io::read_manifest(data)?;
    let truth = load_truth(data)?;
    let (model_vs_signal, coefficient_rpe, coverage_signal) = match &truth {
        Some(t) => {
            let sig: Vec<DenseTensor> = dataset.test.iter().map(|&n| t.signal[n].clone()).collect();
            let eff: Vec<DenseTensor> = cp.chain.train.iter().map(|&n| t.effect[n].clone()).collect();
            let est: Vec<DenseTensor> = (0..cp.chain.train.len()).map(|i| cp.chain.mean_product(i)).collect();
            (
                score(&sig, &pred.mean).ok(),
                rpe_per_voxel(&eff, &est).ok().map(|r| r.mean),
                Some(interval_coverage(&pred, &sig)),
            )
        }
        None => (None, None, None),
    };
    let label = manifest.generation.as_ref().map_or_else(
        || data.file_name().map_or_else(|| "data".into(), |s| s.to_string_lossy().into_owned()),
        |g| g.spec.code(),
    );
    let m = MetricsFile {
        label,
        model,
        intercept_only: baseline,
        model_vs_signal,
        coefficient_rpe,
        coverage: interval_coverage(&pred, &y),
        coverage_signal,
        level,
        states_used: pred.states_used,
    };
    fs::write(out.join("metrics.json"), serde_json::to_string_pretty(&m)?)?;
    let mut csv = String::from("method,rpe,pearson_voxel,pearson_pooled\n");
    for (name, s) in [("btotvc", &m.model), ("intercept_only", &m.intercept_only)] {
        let _ = writeln!(csv, "{name},{:.6},{},{}", s.rpe, fmt_opt(s.pearson_voxel), fmt_opt(s.pearson_pooled));
    }
    fs::write(out.join("metrics.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "NA".into(), |v| format!("{v:.6}"))
}

fn diagnose(chain: &Path, out: &Path) -> Result<()> {
    let cp = load_chain(chain)?;
    let c = &cp.chain;
    fs::create_dir_all(out.join("traces"))?;
    let burn = cp.config.burnin_iterations();
    let iterations: Vec<usize> = (burn..cp.config.iterations).filter(|&t| cp.config.is_retained(t)).take(c.retained).collect();
    for (v, trace) in c.trace_voxels.iter().zip(&c.traces) {
        write_trace_csv(&out.join("traces").join(format!("voxel_{v:06}.csv")), &iterations, trace)?;
    }
    let mut summary = String::new();
    if c.retained >= 20 && !c.traces.is_empty() {
        let zs = chain_geweke(&c.traces)?;
        write_geweke_csv(&out.join("geweke.csv"), &c.trace_voxels, &zs)?;
        let s = geweke_summary(&zs)?;
        summary = geweke_table("chain", &s);
        fs::write(out.join("geweke_table.csv"), &summary)?;
    } else {
        log::warn!("chain has {} retained draws; Geweke needs at least 20", c.retained);
    }
    fs::write(out.join("acceptance.json"), serde_json::to_string_pretty(&c.acceptance)?)?;
    print!("{summary}");
    let a = &c.acceptance;
    println!(
        "acceptance: gamma alpha {:.3}, theta alpha {:.3}, phi2 {:.3}; atom failures {}",
        a.gamma_alpha.rate(),
        a.theta_alpha.rate(),
        a.phi2.rate(),
        c.atom_failures
    );
    Ok(())
}

/// Mean and SD of the defined values; NA when none are.
fn mean_sd(xs: &[Option<f64>]) -> String {
    let xs: Vec<f64> = xs.iter().flatten().copied().collect();
    if xs.is_empty() {
        return "NA".into();
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let sd = if xs.len() > 1 { (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
    format!("{m:.3} ({sd:.3})")
}

fn report(inputs: &[PathBuf], out: Option<&Path>) -> Result<()> {
    if inputs.is_empty() {
        bail!(btotvc::Error::Argument("no metrics files given".into()));
    }
    let mut groups: BTreeMap<String, Vec<MetricsFile>> = BTreeMap::new();
    for p in inputs {
        let path = if p.is_dir() { p.join("metrics.json") } else { p.clone() };
        if !path.is_file() {
            bail!(btotvc::Error::MissingFile(path));
        }
        let m: MetricsFile = serde_json::from_str(&fs::read_to_string(&path)?)
            .map_err(btotvc::Error::from)
            .with_context(|| format!("reading {}", path.display()))?;
        groups.entry(m.label.clone()).or_default().push(m);
    }
    let mut s = String::from("scenario,method,runs,rpe mean (sd),correlation mean (sd)\n");
    for (label, runs) in &groups {
        for (method, pick) in [
            ("btotvc", (|m: &MetricsFile| m.model.clone()) as fn(&MetricsFile) -> Scores),
            ("intercept_only", |m: &MetricsFile| m.intercept_only.clone()),
        ] {
            let r = mean_sd(&runs.iter().map(|m| Some(pick(m).rpe)).collect::<Vec<_>>());
            let c = mean_sd(&runs.iter().map(|m| pick(m).pearson_voxel).collect::<Vec<_>>());
            let _ = writeln!(s, "{label},{method},{},{r},{c}", runs.len());
        }
    }
    if let Some(o) = out {
        fs::write(o, &s)?;
    }
    print!("{s}");
    Ok(())
}
