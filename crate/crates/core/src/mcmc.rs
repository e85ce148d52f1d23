//! Single-site adaptive Metropolis-within-Gibbs over a [`CompiledGraph`].
//!
//! Every unobserved node is updated in turn by a Gaussian random walk in an
//! unconstrained space: identity for normal nodes, log for gamma nodes and a
//! scaled logit for uniform nodes. The acceptance ratio uses the node's full
//! conditional, i.e. its own density, the densities of the stochastic nodes
//! it reaches through deterministic nodes, and the log-Jacobian of the
//! transform.
//!
//! During burn-in each proposal scale is nudged by `exp(±0.05)` every
//! `adapt_interval` sweeps toward `target_accept`; afterwards scales are
//! frozen so the retained draws come from a fixed Markov kernel.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal, StandardNormal};
use serde::{Serialize, Serializer};
use thiserror::Error;

use crate::dsl::{CompiledGraph, DistKind, DslError, NodeId, Support};
use crate::sky::format_real;

const ADAPT_FACTOR: f64 = 0.05;
// Prior draws mapping further out than this in unconstrained space (e.g. the
// underflowing draws of a vague gamma) are replaced by a U(-2, 2) start.
const MAX_INIT_ABS: f64 = 30.0;
const INIT_ATTEMPTS: usize = 100;

#[derive(Debug, Error)]
pub enum McmcError {
    #[error("invalid sampler config: {0}")]
    Config(String),
    #[error("model has no unobserved stochastic nodes to sample")]
    NothingToSample,
    #[error(transparent)]
    Dsl(#[from] DslError),
    #[error("could not find a starting point with finite log density: {0}")]
    Init(String),
    #[error("no draws to summarize")]
    EmptyDraws,
    #[error("{path}: {source}")]
    Io {
        path: std::path::PathBuf,
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    /// Total sweeps per chain, burn-in included.
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub n_chains: usize,
    pub seed: u64,
    pub target_accept: f64,
    pub adapt_interval: usize,
    /// Constrained starting values in `graph.unobserved()` order, shared by
    /// all chains. Prior draws are used when `None`.
    pub initial: Option<Vec<f64>>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            burn_in: 1000,
            thin: 1,
            n_chains: 4,
            seed: 0,
            target_accept: 0.44,
            adapt_interval: 50,
            initial: None,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), McmcError> {
        let bad = |m: &str| Err(McmcError::Config(m.to_string()));
        if self.iterations == 0 || self.thin == 0 || self.n_chains == 0 || self.adapt_interval == 0 {
            return bad("iterations, thin, n_chains and adapt_interval must be positive");
        }
        if self.burn_in >= self.iterations {
            return bad("burn_in must be smaller than iterations");
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return bad("target_accept must lie in (0, 1)");
        }
        Ok(())
    }

    /// Retained draws per chain.
    pub fn retained(&self) -> usize {
        (self.iterations - self.burn_in).div_ceil(self.thin)
    }
}

/// Map between a node's support and the real line.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Transform {
    Identity,
    Log,
    Logit { lo: f64, hi: f64 },
}

// ln(1 + e^x) without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl Transform {
    pub fn for_support(support: Support) -> Self {
        match support {
            Support::Real => Transform::Identity,
            Support::Positive => Transform::Log,
            Support::Interval(lo, hi) => Transform::Logit { lo, hi },
        }
    }

    pub fn constrain(self, u: f64) -> f64 {
        match self {
            Transform::Identity => u,
            Transform::Log => u.exp(),
            Transform::Logit { lo, hi } => {
                let s = if u >= 0.0 {
                    1.0 / (1.0 + (-u).exp())
                } else {
                    let e = u.exp();
                    e / (1.0 + e)
                };
                lo + (hi - lo) * s
            }
        }
    }

    pub fn unconstrain(self, x: f64) -> f64 {
        match self {
            Transform::Identity => x,
            Transform::Log => x.ln(),
            Transform::Logit { lo, hi } => ((x - lo) / (hi - x)).ln(),
        }
    }

    /// `ln |dx/du|`.
    pub fn log_jacobian(self, u: f64) -> f64 {
        match self {
            Transform::Identity => 0.0,
            Transform::Log => u,
            Transform::Logit { lo, hi } => (hi - lo).ln() - softplus(u) - softplus(-u),
        }
    }
}

fn transform_of(graph: &CompiledGraph, id: NodeId) -> Transform {
    graph
        .node(id)
        .support()
        .map_or(Transform::Identity, Transform::for_support)
}

// Sets `id` to `x`, recomputes its deterministic dependents and returns the
// node's density plus its stochastic dependents' densities.
fn blanket_logdensity(graph: &CompiledGraph, id: NodeId, x: f64, values: &mut [f64]) -> Result<f64, DslError> {
    let deps = graph.dependents(id)?;
    values[id.0] = x;
    for &d in &deps.deterministic {
        graph.evaluate(d, values);
    }
    let mut lp = graph.log_density(id, values);
    for &s in &deps.stochastic {
        if lp == f64::NEG_INFINITY {
            break;
        }
        lp += graph.log_density(s, values);
    }
    Ok(lp)
}

/// Full conditional of `node` at unconstrained value `proposed`, with every
/// other unobserved node held at `assignment` (constrained values in
/// `graph.unobserved()` order). Includes the transform's log-Jacobian, so
/// differences match differences of the unconstrained log joint.
pub fn full_conditional_logdensity(
    graph: &CompiledGraph,
    node: NodeId,
    proposed: f64,
    assignment: &[f64],
) -> Result<f64, McmcError> {
    if node.0 >= graph.len() {
        return Err(DslError::NotUnobserved(format!("#{}", node.0)).into());
    }
    graph.dependents(node)?;
    let mut values = Vec::with_capacity(graph.len());
    graph.fill_values(assignment, &mut values)?;
    let t = transform_of(graph, node);
    let lp = blanket_logdensity(graph, node, t.constrain(proposed), &mut values)?;
    Ok(lp + t.log_jacobian(proposed))
}

/// State of one chain between sweeps.
#[derive(Debug, Clone)]
pub struct ChainState {
    /// Unconstrained values, one per unobserved node.
    pub assignment: Vec<f64>,
    pub proposal_scales: Vec<f64>,
    /// Accepted proposals per node since the chain started.
    pub accept_counts: Vec<u64>,
    pub sweeps: u64,
    window_accepts: Vec<u64>,
    transforms: Vec<Transform>,
    values: Vec<f64>,
    saved: Vec<f64>,
    rng: ChaCha8Rng,
}

impl ChainState {
    /// Seeds stream `chain` of `config.seed` and draws (or loads) a start.
    pub fn new(graph: &CompiledGraph, config: &SamplerConfig, chain: usize) -> Result<Self, McmcError> {
        config.validate()?;
        let k = graph.unobserved().len();
        if k == 0 {
            return Err(McmcError::NothingToSample);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(chain as u64);
        let transforms: Vec<Transform> = graph.unobserved().iter().map(|&id| transform_of(graph, id)).collect();

        let mut values = Vec::with_capacity(graph.len());
        let constrained = match &config.initial {
            Some(init) => {
                graph.fill_values(init, &mut values)?;
                let lp = graph.log_joint_values(&values);
                if !lp.is_finite() {
                    return Err(McmcError::Init(format!("initial values have log density {lp}")));
                }
                init.clone()
            }
            None => (0..INIT_ATTEMPTS)
                .find_map(|_| {
                    let draw = prior_draw(graph, &transforms, &mut rng);
                    graph.fill_values(&draw, &mut values).ok()?;
                    graph.log_joint_values(&values).is_finite().then_some(draw)
                })
                .ok_or_else(|| McmcError::Init(format!("{INIT_ATTEMPTS} prior draws all failed")))?,
        };
        graph.fill_values(&constrained, &mut values)?;
        let assignment = constrained
            .iter()
            .zip(&transforms)
            .map(|(&x, t)| t.unconstrain(x))
            .collect();

        Ok(Self {
            assignment,
            proposal_scales: vec![1.0; k],
            accept_counts: vec![0; k],
            sweeps: 0,
            window_accepts: vec![0; k],
            transforms,
            values,
            saved: Vec::new(),
            rng,
        })
    }

    /// Current values in constrained space.
    pub fn constrained(&self, graph: &CompiledGraph) -> Vec<f64> {
        graph.unobserved().iter().map(|id| self.values[id.0]).collect()
    }

    /// One Metropolis update of every unobserved node in graph order.
    /// With `adapt`, proposal scales are tuned every `adapt_interval` sweeps.
    pub fn sweep(&mut self, graph: &CompiledGraph, config: &SamplerConfig, adapt: bool) {
        for (slot, &id) in graph.unobserved().iter().enumerate() {
            if self.update(graph, slot, id) {
                self.accept_counts[slot] += 1;
                self.window_accepts[slot] += 1;
            }
        }
        self.sweeps += 1;
        if self.sweeps % config.adapt_interval as u64 == 0 {
            if adapt {
                for (scale, acc) in self.proposal_scales.iter_mut().zip(&self.window_accepts) {
                    let rate = *acc as f64 / config.adapt_interval as f64;
                    *scale *= if rate > config.target_accept {
                        ADAPT_FACTOR.exp()
                    } else {
                        (-ADAPT_FACTOR).exp()
                    };
                }
            }
            self.window_accepts.iter_mut().for_each(|a| *a = 0);
        }
    }

    fn update(&mut self, graph: &CompiledGraph, slot: usize, id: NodeId) -> bool {
        let t = self.transforms[slot];
        let u = self.assignment[slot];
        let deps = graph.dependents(id).expect("unobserved node");

        let x_old = self.values[id.0];
        let mut current = graph.log_density(id, &self.values);
        for &s in &deps.stochastic {
            current += graph.log_density(s, &self.values);
        }
        current += t.log_jacobian(u);

        let z: f64 = StandardNormal.sample(&mut self.rng);
        let u_new = u + self.proposal_scales[slot] * z;
        self.saved.clear();
        self.saved.extend(deps.deterministic.iter().map(|d| self.values[d.0]));
        let proposed = blanket_logdensity(graph, id, t.constrain(u_new), &mut self.values)
            .expect("unobserved node")
            + t.log_jacobian(u_new);

        let log_u: f64 = self.rng.random::<f64>().ln();
        if proposed.is_finite() && log_u < proposed - current {
            self.assignment[slot] = u_new;
            true
        } else {
            self.values[id.0] = x_old;
            for (d, &v) in deps.deterministic.iter().zip(&self.saved) {
                self.values[d.0] = v;
            }
            false
        }
    }
}

fn prior_draw(graph: &CompiledGraph, transforms: &[Transform], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut values = graph.blank_values();
    let mut out = Vec::with_capacity(transforms.len());
    for (i, node) in graph.nodes().iter().enumerate() {
        let id = NodeId(i);
        if !node.is_stochastic() {
            graph.evaluate(id, &mut values);
            continue;
        }
        if node.is_observed() {
            continue;
        }
        let slot = out.len();
        let t = transforms[slot];
        let drawn = graph.dist_params(id, &values).and_then(|(kind, a, b)| match kind {
            DistKind::Normal => Normal::new(a, 1.0 / b.sqrt()).ok().map(|d| d.sample(rng)),
            DistKind::Gamma => Gamma::new(a, 1.0 / b).ok().map(|d| d.sample(rng)),
            DistKind::Uniform => (a < b).then(|| rng.random_range(a..b)),
        });
        let usable = drawn.filter(|&x| {
            let u = t.unconstrain(x);
            u.is_finite() && u.abs() <= MAX_INIT_ABS && node.support().is_none_or(|s| s.contains(x))
        });
        let x = usable.unwrap_or_else(|| match t {
            Transform::Identity => graph
                .dist_params(id, &values)
                .map_or(0.0, |(_, mean, _)| if mean.is_finite() { mean } else { 0.0 })
                + rng.random_range(-2.0..2.0),
            _ => t.constrain(rng.random_range(-2.0..2.0)),
        });
        values[i] = x;
        out.push(x);
    }
    out
}

/// Retained draws of one chain in constrained space.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainDraws {
    pub chain: usize,
    /// 1-based sweep number of each retained draw.
    pub iterations: Vec<usize>,
    /// One row per retained draw, columns in `graph.unobserved()` order.
    pub draws: Vec<Vec<f64>>,
    /// Post-burn-in acceptance rate per node.
    pub acceptance: Vec<f64>,
    pub final_scales: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct McmcRun {
    pub names: Vec<String>,
    pub chains: Vec<ChainDraws>,
}

impl McmcRun {
    pub fn draws_by_chain(&self) -> Vec<Vec<Vec<f64>>> {
        self.chains.iter().map(|c| c.draws.clone()).collect()
    }
}

fn run_chain(graph: &CompiledGraph, config: &SamplerConfig, chain: usize) -> Result<ChainDraws, McmcError> {
    let mut state = ChainState::new(graph, config, chain)?;
    let supports: Vec<Option<Support>> = graph.unobserved().iter().map(|&id| graph.node(id).support()).collect();
    let mut out = ChainDraws {
        chain,
        iterations: Vec::with_capacity(config.retained()),
        draws: Vec::with_capacity(config.retained()),
        acceptance: Vec::new(),
        final_scales: Vec::new(),
    };
    for _ in 0..config.burn_in {
        state.sweep(graph, config, true);
    }
    let accepted_at_burn_in = state.accept_counts.clone();
    for s in config.burn_in..config.iterations {
        state.sweep(graph, config, false);
        if (s - config.burn_in) % config.thin == 0 {
            let draw = state.constrained(graph);
            for (x, sup) in draw.iter().zip(&supports) {
                assert!(
                    sup.is_none_or(|s| s.contains(*x)),
                    "draw {x} outside support {sup:?}"
                );
            }
            out.iterations.push(s + 1);
            out.draws.push(draw);
        }
    }
    let post = (config.iterations - config.burn_in) as f64;
    out.acceptance = state
        .accept_counts
        .iter()
        .zip(&accepted_at_burn_in)
        .map(|(a, b)| (a - b) as f64 / post)
        .collect();
    out.final_scales = state.proposal_scales;
    Ok(out)
}

/// Runs `config.n_chains` independent chains on scoped threads. Output is
/// independent of thread scheduling.
pub fn run_chains(graph: &CompiledGraph, config: &SamplerConfig) -> Result<McmcRun, McmcError> {
    config.validate()?;
    if graph.unobserved().is_empty() {
        return Err(McmcError::NothingToSample);
    }
    let results: Vec<Result<ChainDraws, McmcError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..config.n_chains)
            .map(|c| scope.spawn(move || run_chain(graph, config, c)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("sampler thread panicked"))
            .collect()
    });
    Ok(McmcRun {
        names: graph
            .unobserved()
            .iter()
            .map(|&id| graph.node(id).name().to_string())
            .collect(),
        chains: results.into_iter().collect::<Result<_, _>>()?,
    })
}

fn serialize_rhat<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
    match v {
        None => s.serialize_none(),
        Some(x) if x.is_infinite() => s.serialize_str("inf"),
        Some(x) => s.serialize_f64(*x),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NodeSummary {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub q2_5: f64,
    pub q50: f64,
    pub q97_5: f64,
    pub ess: f64,
    /// Split-R̂; `None` with fewer than 4 draws per chain or no variation at
    /// all, `+inf` when chains are internally constant but disagree.
    #[serde(serialize_with = "serialize_rhat")]
    pub rhat: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PosteriorSummary {
    pub chains: usize,
    pub draws: usize,
    pub nodes: Vec<NodeSummary>,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (xs.len() - 1) as f64
}

// Linear interpolation between order statistics.
fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Split-R̂ over chains truncated to a common length.
pub fn split_rhat(chains: &[Vec<f64>]) -> Option<f64> {
    let len = chains.iter().map(Vec::len).min()?;
    let n = len / 2;
    if n < 2 {
        return None;
    }
    let halves: Vec<&[f64]> = chains
        .iter()
        .flat_map(|c| [&c[..n], &c[len - n..len]])
        .collect();
    let means: Vec<f64> = halves.iter().map(|h| mean(h)).collect();
    let w = mean(&halves.iter().map(|h| variance(h)).collect::<Vec<_>>());
    let b = n as f64 * variance(&means);
    if w == 0.0 {
        return if b == 0.0 { None } else { Some(f64::INFINITY) };
    }
    let var_plus = (n as f64 - 1.0) / n as f64 * w + b / n as f64;
    Some((var_plus / w).sqrt())
}

/// Effective sample size from overlapping batch means (batch size ⌊√n⌋),
/// summed over chains and capped at the number of draws.
pub fn effective_sample_size(chains: &[Vec<f64>]) -> f64 {
    let total: usize = chains.iter().map(Vec::len).sum();
    let mut ess = 0.0;
    for c in chains {
        let n = c.len();
        let var = variance(c);
        let b = (n as f64).sqrt().floor() as usize;
        if n < 4 || var == 0.0 || b < 1 {
            ess += n as f64;
            continue;
        }
        let m = mean(c);
        let mut window: f64 = c[..b].iter().sum();
        let mut ss = 0.0;
        for k in 0..=(n - b) {
            if k > 0 {
                window += c[k + b - 1] - c[k - 1];
            }
            let d = window / b as f64 - m;
            ss += d * d;
        }
        let sigma2 = n as f64 * b as f64 / ((n - b) as f64 * (n - b + 1) as f64) * ss;
        ess += if sigma2 > 0.0 { n as f64 * var / sigma2 } else { n as f64 };
    }
    ess.min(total as f64)
}

/// Per-node summary of draws laid out as `chains[chain][draw][node]`.
pub fn summarize(names: &[String], chains: &[Vec<Vec<f64>>]) -> Result<PosteriorSummary, McmcError> {
    let draws: usize = chains.iter().map(Vec::len).sum();
    if draws == 0 {
        return Err(McmcError::EmptyDraws);
    }
    let nodes = names
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let per_chain: Vec<Vec<f64>> = chains
                .iter()
                .filter(|c| !c.is_empty())
                .map(|c| c.iter().map(|row| row[j]).collect())
                .collect();
            let mut pooled: Vec<f64> = per_chain.iter().flatten().copied().collect();
            pooled.sort_by(f64::total_cmp);
            NodeSummary {
                name: name.clone(),
                mean: mean(&pooled),
                sd: variance(&pooled).sqrt(),
                q2_5: quantile(&pooled, 0.025),
                q50: quantile(&pooled, 0.5),
                q97_5: quantile(&pooled, 0.975),
                ess: effective_sample_size(&per_chain),
                rhat: split_rhat(&per_chain),
            }
        })
        .collect();
    Ok(PosteriorSummary {
        chains: chains.len(),
        draws,
        nodes,
    })
}

/// Column groups `[loc[h,1], loc[h,2], mass[h]]` of a halo model, if every
/// one of them is present among `names`.
pub fn halo_groups(names: &[String]) -> Option<Vec<[usize; 3]>> {
    let find = |n: String| names.iter().position(|x| *x == n);
    let mut groups = Vec::new();
    for h in 1.. {
        let group = [
            find(format!("loc[{h},1]")),
            find(format!("loc[{h},2]")),
            find(format!("mass[{h}]")),
        ];
        match group {
            [Some(x), Some(y), Some(m)] => groups.push([x, y, m]),
            [None, None, None] => break,
            _ => return None,
        }
    }
    (!groups.is_empty()).then_some(groups)
}

/// Copy of the draws with halos relabelled in each draw by increasing x, so
/// that marginal summaries are identifiable. Draws without recognizable halo
/// groups are returned unchanged.
pub fn sort_halo_labels(names: &[String], chains: &[Vec<Vec<f64>>]) -> Vec<Vec<Vec<f64>>> {
    let mut out = chains.to_vec();
    let Some(groups) = halo_groups(names) else {
        return out;
    };
    for row in out.iter_mut().flatten() {
        let mut halos: Vec<[f64; 3]> = groups.iter().map(|g| g.map(|j| row[j])).collect();
        halos.sort_by(|a, b| a[0].total_cmp(&b[0]));
        for (g, h) in groups.iter().zip(&halos) {
            for k in 0..3 {
                row[g[k]] = h[k];
            }
        }
    }
    out
}

/// Writes `chain,iteration,<names>...` with one row per retained draw.
pub fn write_draws_csv(run: &McmcRun, path: impl AsRef<Path>) -> Result<(), McmcError> {
    let path = path.as_ref();
    let mut body = String::from("chain,iteration");
    for n in &run.names {
        body.push(',');
        // Node names contain commas (`loc[1,2]`), so they are quoted.
        let _ = write!(body, "\"{n}\"");
    }
    body.push('\n');
    for c in &run.chains {
        for (it, row) in c.iterations.iter().zip(&c.draws) {
            let _ = write!(body, "{},{}", c.chain + 1, it);
            for &x in row {
                body.push(',');
                body.push_str(&format_real(x));
            }
            body.push('\n');
        }
    }
    std::fs::write(path, body).map_err(|source| McmcError::Io {
        path: path.to_path_buf(),
        source,
    })
}
