use btotvc::model::{Dataset, ModelConfig};
use btotvc::sampler::{run_chain, Sampler};
use btotvc::simgen::{simulate, SimSpec};
use btotvc::tensor::DenseTensor;

fn toy(shape: &[usize], n_train: usize, code: &str, seed: u64) -> Dataset {
    let spec = SimSpec { shape: shape.to_vec(), n_train, n_test: 2, seed, ..SimSpec::from_code(code).unwrap() };
    simulate(&spec).unwrap().dataset
}

fn small_config(iterations: usize) -> ModelConfig {
    ModelConfig { rank: 2, iterations, ..Default::default() }
}

#[test]
fn ten_iterations_keep_five_states() {
    let data = toy(&[3, 3, 3], 6, "4.a.i", 1);
    let chain = run_chain(&small_config(10), &data, 7).unwrap();
    assert_eq!(chain.states.len(), 5);
    assert_eq!(chain.deviance.len(), 5);
    assert_eq!(chain.timings.len(), 10);
    assert_eq!(chain.traces.len(), 27);
    assert!(chain.traces.iter().all(|t| t.len() == 5));
    let a = &chain.acceptance;
    for c in [a.gamma_alpha, a.theta_alpha, a.phi2] {
        assert!((0.0..=1.0).contains(&c.rate()));
    }
    assert_eq!(a.phi2.proposed, 10);
}

#[test]
fn same_seed_same_chain() {
    let data = toy(&[3, 3, 3], 6, "1.a.i", 2);
    let a = run_chain(&small_config(12), &data, 3).unwrap();
    let b = run_chain(&small_config(12), &data, 3).unwrap();
    assert_eq!(a.states, b.states);
    assert_eq!(a.traces, b.traces);
    assert_eq!(a.deviance, b.deviance);
    let c = run_chain(&small_config(12), &data, 4).unwrap();
    assert_ne!(a.states, c.states);
}

#[test]
fn worker_count_does_not_change_the_chain() {
    let data = toy(&[4, 4, 4], 8, "1.a.i", 5);
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| run_chain(&small_config(8), &data, 11).unwrap())
    };
    let one = run(1);
    let four = run(4);
    assert_eq!(one.states, four.states);
    assert_eq!(one.traces, four.traces);
}

#[test]
fn masked_outcomes_are_ignored() {
    let mut data = toy(&[3, 3, 3], 6, "4.a.i", 6);
    // Knock out a few cells and make sure the outcome there is irrelevant.
    for (n, v) in [(0usize, 4usize), (2, 13), (3, 26), (5, 0)] {
        data.masks[n].data_mut()[v] = 0.0;
    }
    let a = run_chain(&small_config(10), &data, 5).unwrap();
    for (n, v) in [(0usize, 4usize), (2, 13), (3, 26), (5, 0)] {
        data.y[n].data_mut()[v] += 123.0;
    }
    let b = run_chain(&small_config(10), &data, 5).unwrap();
    assert_eq!(a.states, b.states);
    assert_eq!(a.deviance, b.deviance);
    assert_eq!(a.traces, b.traces);
}

#[test]
fn resume_matches_uninterrupted_run() {
    let data = toy(&[3, 3, 3], 6, "1.a.i", 8);
    let config = small_config(14);
    let whole = run_chain(&config, &data, 21).unwrap();
    let mut first = Sampler::new(config, &data, 21).unwrap();
    first.run_until(6).unwrap();
    let cp = first.checkpoint();
    drop(first);
    let mut second = Sampler::resume(cp, &data).unwrap();
    second.run().unwrap();
    let resumed = second.into_chain();
    assert_eq!(whole.states, resumed.states);
    assert_eq!(whole.traces, resumed.traces);
    assert_eq!(whole.deviance, resumed.deviance);
    assert_eq!(whole.acceptance, resumed.acceptance);
}

#[test]
fn fringe_voxels_use_the_input_value() {
    // Voxel 0 is zero in most subjects, so it falls outside the group mask.
    let mut data = toy(&[3, 3, 3], 10, "4.a.i", 9);
    for n in 0..8 {
        data.x[n].data_mut()[0] = 0.0;
    }
    data.masks = data.x.iter().map(btotvc::model::mask_from_input).collect();
    let s = Sampler::new(small_config(2), &data, 1).unwrap();
    let ws = s.workspace();
    assert!(ws.masks.fringe.contains(&0));
    assert_eq!(s.state().atoms.len(), 26);
    let product = ws.product(s.state());
    let theta0 = s.state().theta.factor.compose().data()[0];
    let nv = 27;
    for i in 0..data.train.len() {
        let x0 = data.x[data.train[i]].data()[0];
        assert_eq!(product[i * nv], theta0 * x0);
    }
}

#[test]
fn phi2_adaptation_freezes_after_burnin() {
    let data = toy(&[3, 3, 3], 6, "1.a.i", 4);
    let chain = run_chain(&small_config(20), &data, 2).unwrap();
    let post = &chain.phi2_proposal_var[10..];
    assert!(post.iter().all(|&v| v == post[0]));
    assert!(chain.phi2_proposal_var[..10].windows(2).any(|w| w[0] != w[1]));
}

#[test]
fn empty_group_mask_runs_all_linear() {
    let data = toy(&[3, 3, 3], 6, "4.a.i", 3);
    let mut d = data.clone();
    for m in d.masks.iter_mut().take(3) {
        *m = DenseTensor::zeros(&[3, 3, 3]);
    }
    let config = ModelConfig { tau_mask: 1.0, ..small_config(4) };
    let chain = run_chain(&config, &d, 1).unwrap();
    assert!(chain.group_voxels.is_empty());
    assert_eq!(chain.states.len(), 2);
}
