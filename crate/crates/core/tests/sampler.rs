use std::collections::HashMap;

use darkmatter::dsl::{compile_source, CompiledGraph, DataArray};
use darkmatter::mcmc::{
    effective_sample_size, full_conditional_logdensity, run_chains, split_rhat, summarize, McmcRun,
    SamplerConfig, Transform,
};
use darkmatter::sky::{model_bindings, simulate_sky, SimConfig};
use darkmatter::{Halo, DARKMATTER_MODEL};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

// mu ~ N(0, var 100), y | mu ~ N(mu, 1), y = 5.
const POST_PREC: f64 = 0.01 + 1.0;
const POST_MEAN: f64 = 5.0 / POST_PREC;
const POST_VAR: f64 = 1.0 / POST_PREC;

fn conjugate() -> CompiledGraph {
    compile_source(
        "model { mu ~ dnorm(0, 0.01); y ~ dnorm(mu, 1) }",
        &HashMap::new(),
        &HashMap::from([("y".to_string(), DataArray::scalar(5.0))]),
    )
    .unwrap()
}

fn pooled(run: &McmcRun, col: usize) -> Vec<f64> {
    run.chains
        .iter()
        .flat_map(|c| c.draws.iter().map(move |d| d[col]))
        .collect()
}

// Two-sample KS statistic.
fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    d
}

// 0.1% two-sided critical value, c(α) = sqrt(-ln(α/2)/2).
fn ks_critical(n: usize, m: usize) -> f64 {
    let c = (-(0.001f64 / 2.0).ln() / 2.0).sqrt();
    c * ((n + m) as f64 / (n as f64 * m as f64)).sqrt()
}

fn conjugate_config(seed: u64) -> SamplerConfig {
    // 4 chains x 2,500 retained = 10,000 draws; thinning keeps them
    // close to independent, which the KS comparison assumes.
    SamplerConfig {
        iterations: 1000 + 2500 * 8,
        burn_in: 1000,
        thin: 8,
        n_chains: 4,
        seed,
        ..Default::default()
    }
}

#[test]
fn oracle_constants() {
    assert!((POST_MEAN - 4.9505).abs() < 5e-5);
    assert!((POST_VAR - 0.9901).abs() < 5e-5);
}

#[test]
fn conjugate_normal_posterior_mean() {
    let g = conjugate();
    let run = run_chains(&g, &conjugate_config(11)).unwrap();
    let draws = pooled(&run, 0);
    assert_eq!(draws.len(), 10_000);
    let chains: Vec<Vec<f64>> = run.chains.iter().map(|c| c.draws.iter().map(|d| d[0]).collect()).collect();
    let ess = effective_sample_size(&chains);
    let mean = draws.iter().sum::<f64>() / draws.len() as f64;
    let mcse = POST_VAR.sqrt() / ess.sqrt();
    assert!((mean - POST_MEAN).abs() < 3.0 * mcse, "mean {mean}, mcse {mcse}");
}

#[test]
fn conjugate_normal_ks_in_most_seeds() {
    let g = conjugate();
    let analytic = Normal::new(POST_MEAN, POST_VAR.sqrt()).unwrap();
    let passes = (0..10u64)
        .filter(|&seed| {
            let draws = pooled(&run_chains(&g, &conjugate_config(100 + seed)).unwrap(), 0);
            let mut rng = ChaCha8Rng::seed_from_u64(9000 + seed);
            let reference: Vec<f64> = (0..10_000).map(|_| analytic.sample(&mut rng)).collect();
            ks_statistic(&draws, &reference) < ks_critical(draws.len(), reference.len())
        })
        .count();
    assert!(passes >= 9, "KS passed in {passes}/10 seeds");
}

#[test]
fn acceptance_rates_after_adaptation() {
    let run = run_chains(&conjugate(), &conjugate_config(5)).unwrap();
    for c in &run.chains {
        assert!((0.2..=0.7).contains(&c.acceptance[0]), "rate {}", c.acceptance[0]);
    }
}

#[test]
fn uniform_mean() {
    let g = compile_source("model { x ~ dunif(0, 4200) }", &HashMap::new(), &HashMap::new()).unwrap();
    let config = SamplerConfig {
        iterations: 11_000,
        burn_in: 1000,
        thin: 4,
        n_chains: 4,
        seed: 2,
        ..Default::default()
    };
    let run = run_chains(&g, &config).unwrap();
    let chains: Vec<Vec<f64>> = run.chains.iter().map(|c| c.draws.iter().map(|d| d[0]).collect()).collect();
    let draws: Vec<f64> = chains.concat();
    assert!(draws.iter().all(|&x| (0.0..=4200.0).contains(&x)));
    let mean = draws.iter().sum::<f64>() / draws.len() as f64;
    let mcse = (4200.0 / 12f64.sqrt()) / effective_sample_size(&chains).sqrt();
    assert!((mean - 2100.0).abs() < 3.0 * mcse, "mean {mean}, mcse {mcse}");
}

#[test]
fn same_seed_same_draws_different_seed_different_draws() {
    let g = conjugate();
    let config = SamplerConfig { iterations: 600, burn_in: 100, n_chains: 3, seed: 77, ..Default::default() };
    let a = run_chains(&g, &config).unwrap();
    let b = run_chains(&g, &config).unwrap();
    let bits = |r: &McmcRun| -> Vec<u64> { pooled(r, 0).iter().map(|x| x.to_bits()).collect() };
    assert_eq!(bits(&a), bits(&b));
    let c = run_chains(&g, &SamplerConfig { seed: 78, ..config.clone() }).unwrap();
    assert_ne!(bits(&a), bits(&c));
    assert_ne!(a.chains[0].draws, a.chains[1].draws);
}

#[test]
fn positive_support_is_respected() {
    let g = compile_source(
        "model { s ~ dgamma(2, 1); y ~ dnorm(0, s) }",
        &HashMap::new(),
        &HashMap::from([("y".to_string(), DataArray::scalar(0.3))]),
    )
    .unwrap();
    let run = run_chains(&g, &SamplerConfig { seed: 4, ..Default::default() }).unwrap();
    assert!(pooled(&run, 0).iter().all(|&s| s > 0.0));
}

#[test]
fn iid_normal_rhat_and_mean() {
    let n = 5000;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let chains: Vec<Vec<Vec<f64>>> = (0..4)
        .map(|_| (0..n).map(|_| vec![StandardNormal.sample(&mut rng)]).collect())
        .collect();
    let s = summarize(&["z".to_string()], &chains).unwrap();
    let node = &s.nodes[0];
    assert!(node.rhat.unwrap() < 1.01);
    assert!(node.mean.abs() < 4.0 / (4.0 * n as f64).sqrt());
    assert!(node.ess <= (4 * n) as f64);
    assert!(node.ess > 0.5 * (4 * n) as f64);
    assert!(node.q2_5 <= node.q50 && node.q50 <= node.q97_5);
}

#[test]
fn diverging_chains_are_flagged() {
    let chains = vec![vec![0.0; 500], vec![1.0; 500]];
    assert!(split_rhat(&chains).unwrap() > 1.1);
}

fn halo_graph(galaxies: usize, num_halos: usize, seed: u64) -> CompiledGraph {
    let config = SimConfig::new(vec![Halo::new(1200.0, 3000.0, 400.0), Halo::new(3100.0, 900.0, 250.0)], seed)
        .with_galaxies(galaxies);
    let sky = simulate_sky(&config, 1).unwrap();
    let (constants, data) = model_bindings(&sky, num_halos);
    compile_source(DARKMATTER_MODEL, &constants, &data).unwrap()
}

// Unconstrained log joint: log joint plus the Jacobian of every transform.
fn unconstrained_log_joint(g: &CompiledGraph, assignment: &[f64]) -> f64 {
    let jac: f64 = g
        .unobserved()
        .iter()
        .zip(assignment)
        .map(|(&id, &x)| {
            let t = Transform::for_support(g.node(id).support().unwrap());
            t.log_jacobian(t.unconstrain(x))
        })
        .sum();
    g.log_joint(assignment).unwrap() + jac
}

#[test]
fn full_conditional_differences_match_log_joint() {
    let g = halo_graph(20, 2, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let k = g.unobserved().len();
    assert_eq!(k, 6);
    let random_assignment = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        g.unobserved()
            .iter()
            .map(|&id| {
                if g.node(id).name().starts_with("mass") {
                    rng.random_range(1.0..1500.0)
                } else {
                    rng.random_range(1.0..4199.0)
                }
            })
            .collect()
    };
    for _ in 0..50 {
        let base = random_assignment(&mut rng);
        let slot = rng.random_range(0..k);
        let id = g.unobserved()[slot];
        let t = Transform::for_support(g.node(id).support().unwrap());
        let other = random_assignment(&mut rng)[slot];
        let (a, b) = (base[slot], other);

        let fc_a = full_conditional_logdensity(&g, id, t.unconstrain(a), &base).unwrap();
        let fc_b = full_conditional_logdensity(&g, id, t.unconstrain(b), &base).unwrap();
        let mut with_b = base.clone();
        with_b[slot] = b;
        let delta_joint = unconstrained_log_joint(&g, &base) - unconstrained_log_joint(&g, &with_b);
        assert!(
            ((fc_a - fc_b) - delta_joint).abs() < 1e-10,
            "{}: {} vs {}",
            g.node(id).name(),
            fc_a - fc_b,
            delta_joint
        );
        // Without the Jacobian terms the same identity holds for the plain joint.
        let delta_plain = g.log_joint(&base).unwrap() - g.log_joint(&with_b).unwrap();
        let jac = t.log_jacobian(t.unconstrain(a)) - t.log_jacobian(t.unconstrain(b));
        assert!(((fc_a - fc_b - jac) - delta_plain).abs() < 1e-10);
    }
}

#[test]
fn halo_model_draws_stay_in_support() {
    let g = halo_graph(60, 2, 8);
    let config = SamplerConfig { iterations: 400, burn_in: 200, n_chains: 2, seed: 1, ..Default::default() };
    let run = run_chains(&g, &config).unwrap();
    for (j, name) in run.names.iter().enumerate() {
        for x in pooled(&run, j) {
            if name.starts_with("mass") {
                assert!(x > 0.0);
            } else {
                assert!((0.0..=4200.0).contains(&x));
            }
        }
    }
}
