//! CMA-ES minimizer and the halo fitting driver built on it.
//!
//! The optimizer follows the standard (μ/μ_w, λ) scheme with Hansen's
//! default constants for dimension n:
//!
//! ```text
//! λ = 4 + ⌊3 ln n⌋           μ = ⌊λ/2⌋
//! w_i ∝ ln((λ+1)/2) − ln i   μ_eff = 1 / Σ w_i²
//! c_σ = (μ_eff + 2) / (n + μ_eff + 5)
//! d_σ = 1 + 2 max(0, √((μ_eff − 1)/(n + 1)) − 1) + c_σ
//! c_c = (4 + μ_eff/n) / (n + 4 + 2 μ_eff/n)
//! c_1 = 2 / ((n + 1.3)² + μ_eff)
//! c_μ = min(1 − c_1, 2 (μ_eff − 2 + 1/μ_eff) / ((n + 2)² + μ_eff))
//! ```
//!
//! The covariance is eigendecomposed every generation. Objective values of
//! `+inf` rank last; NaN aborts the run.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::ser::{SerializeStruct, Serializer};
use serde::Serialize;
use thiserror::Error;

use crate::lensing::{log_posterior, Halo, LensModelParams, Sky};
use crate::mcmc::Transform;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CmaesError {
    #[error("invalid CMA-ES config: {0}")]
    Config(String),
    #[error("objective returned NaN at {x:?}")]
    NanObjective { x: Vec<f64> },
    #[error("num_halos must be between 1 and 3, got {0}")]
    HaloCount(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CmaesConfig {
    /// Population size; `4 + ⌊3 ln n⌋` when `None`.
    pub lambda: Option<usize>,
    pub sigma0: f64,
    /// Evaluation budget per restart.
    pub max_evals: usize,
    /// Stop when the best values of recent generations and the current
    /// population all lie within this range.
    pub f_tol: f64,
    /// Stop when every coordinate's step size falls below this.
    pub x_tol: f64,
    pub seed: u64,
    pub restarts: usize,
}

impl Default for CmaesConfig {
    fn default() -> Self {
        Self {
            lambda: None,
            sigma0: 0.5,
            max_evals: 20_000,
            f_tol: 1e-12,
            x_tol: 1e-11,
            seed: 0,
            restarts: 1,
        }
    }
}

impl CmaesConfig {
    /// Defaults for fitting `num_halos` halos: 5 restarts for two or more
    /// halos, 3 for one.
    pub fn for_halos(num_halos: usize, seed: u64) -> Self {
        Self {
            seed,
            restarts: if num_halos >= 2 { 5 } else { 3 },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), CmaesError> {
        let bad = |m: &str| Err(CmaesError::Config(m.to_string()));
        if self.lambda.is_some_and(|l| l < 2) {
            return bad("lambda must be at least 2");
        }
        if !(self.sigma0 > 0.0 && self.sigma0.is_finite()) {
            return bad("sigma0 must be positive");
        }
        if self.max_evals == 0 || self.restarts == 0 {
            return bad("max_evals and restarts must be positive");
        }
        if !(self.f_tol >= 0.0 && self.x_tol >= 0.0) {
            return bad("tolerances must be non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    FTol,
    XTol,
    MaxEvals,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CmaesResult {
    pub x_best: Vec<f64>,
    pub f_best: f64,
    pub evaluations: usize,
    pub converged: bool,
    pub stop: StopReason,
    pub generations: usize,
}

/// Optimizer state after one generation, passed to observers.
#[derive(Debug)]
pub struct Generation<'a> {
    pub restart: usize,
    pub index: usize,
    pub evaluations: usize,
    /// Best value seen so far in this restart.
    pub f_best: f64,
    pub sigma: f64,
    pub mean: &'a DVector<f64>,
    pub covariance: &'a DMatrix<f64>,
    /// Candidates of this generation, in sampling order.
    pub candidates: &'a [DVector<f64>],
}

struct Params {
    lambda: usize,
    weights: Vec<f64>,
    mueff: f64,
    cc: f64,
    cs: f64,
    c1: f64,
    cmu: f64,
    damps: f64,
    chi_n: f64,
}

impl Params {
    fn new(n: usize, lambda: Option<usize>) -> Self {
        let nf = n as f64;
        let lambda = lambda.unwrap_or(4 + (3.0 * nf.ln()).floor() as usize);
        let mu = (lambda / 2).max(1);
        let raw: Vec<f64> = (1..=mu)
            .map(|i| ((lambda as f64 + 1.0) / 2.0).ln() - (i as f64).ln())
            .collect();
        let total: f64 = raw.iter().sum();
        let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
        let mueff = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();
        let cc = (4.0 + mueff / nf) / (nf + 4.0 + 2.0 * mueff / nf);
        let cs = (mueff + 2.0) / (nf + mueff + 5.0);
        let c1 = 2.0 / ((nf + 1.3).powi(2) + mueff);
        let cmu = (1.0 - c1).min(2.0 * (mueff - 2.0 + 1.0 / mueff) / ((nf + 2.0).powi(2) + mueff));
        let damps = 1.0 + 2.0 * (((mueff - 1.0) / (nf + 1.0)).sqrt() - 1.0).max(0.0) + cs;
        let chi_n = nf.sqrt() * (1.0 - 1.0 / (4.0 * nf) + 1.0 / (21.0 * nf * nf));
        Self {
            lambda,
            weights,
            mueff,
            cc,
            cs,
            c1,
            cmu,
            damps,
            chi_n,
        }
    }
}

/// Minimizes `objective` from `x0`, running `config.restarts` independent
/// restarts (restart `r` draws from stream `r` of `config.seed`) and
/// returning the best. Evaluations are summed over restarts.
pub fn cmaes_minimize<F>(objective: F, x0: &[f64], config: &CmaesConfig) -> Result<CmaesResult, CmaesError>
where
    F: FnMut(&[f64]) -> f64,
{
    cmaes_minimize_observed(objective, x0, config, |_| {})
}

/// [`cmaes_minimize`] with a callback after every generation.
pub fn cmaes_minimize_observed<F, O>(
    mut objective: F,
    x0: &[f64],
    config: &CmaesConfig,
    mut observer: O,
) -> Result<CmaesResult, CmaesError>
where
    F: FnMut(&[f64]) -> f64,
    O: FnMut(&Generation<'_>),
{
    config.validate()?;
    let mut best: Option<CmaesResult> = None;
    let mut evaluations = 0;
    for r in 0..config.restarts {
        let run = run_restart(&mut objective, x0, config, r, &mut observer)?;
        evaluations += run.evaluations;
        if best.as_ref().is_none_or(|b| run.f_best < b.f_best) {
            best = Some(run);
        }
    }
    let mut best = best.expect("at least one restart");
    best.evaluations = evaluations;
    Ok(best)
}

/// A single restart `r`, exactly as [`cmaes_minimize`] runs it.
pub fn run_restart<F, O>(
    objective: &mut F,
    x0: &[f64],
    config: &CmaesConfig,
    restart: usize,
    observer: &mut O,
) -> Result<CmaesResult, CmaesError>
where
    F: FnMut(&[f64]) -> f64,
    O: FnMut(&Generation<'_>),
{
    config.validate()?;
    let n = x0.len();
    if n == 0 {
        return Err(CmaesError::Config("dimension must be at least 1".into()));
    }
    let p = Params::new(n, config.lambda);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(restart as u64);

    let mut mean = DVector::from_column_slice(x0);
    let mut sigma = config.sigma0;
    let mut cov = DMatrix::<f64>::identity(n, n);
    let mut ps = DVector::<f64>::zeros(n);
    let mut pc = DVector::<f64>::zeros(n);

    let mut x_best = x0.to_vec();
    let mut f_best = f64::INFINITY;
    let mut evaluations = 0;
    let history_len = 10 + (30.0 * n as f64 / p.lambda as f64).ceil() as usize;
    let mut history: Vec<f64> = Vec::new();

    for generation in 0.. {
        let eig = SymmetricEigen::new(cov.clone());
        let d = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
        let b = eig.eigenvectors;

        let mut candidates = Vec::with_capacity(p.lambda);
        let mut steps = Vec::with_capacity(p.lambda);
        let mut values = Vec::with_capacity(p.lambda);
        for _ in 0..p.lambda {
            if evaluations >= config.max_evals {
                break;
            }
            let z = DVector::<f64>::from_fn(n, |_, _| rng.sample(StandardNormal));
            let y = &b * d.component_mul(&z);
            let x = &mean + sigma * &y;
            let f = objective(x.as_slice());
            evaluations += 1;
            if f.is_nan() {
                return Err(CmaesError::NanObjective { x: x.as_slice().to_vec() });
            }
            if f < f_best {
                f_best = f;
                x_best = x.as_slice().to_vec();
            }
            candidates.push(x);
            steps.push(y);
            values.push(f);
        }
        if candidates.len() < p.lambda {
            return Ok(CmaesResult {
                x_best,
                f_best,
                evaluations,
                converged: false,
                stop: StopReason::MaxEvals,
                generations: generation,
            });
        }

        let mut order: Vec<usize> = (0..p.lambda).collect();
        order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));

        let mut y_w = DVector::<f64>::zeros(n);
        for (w, &i) in p.weights.iter().zip(&order) {
            y_w += *w * &steps[i];
        }
        mean += sigma * &y_w;

        let inv_sqrt = &b * DMatrix::from_diagonal(&d.map(|v| if v > 0.0 { 1.0 / v } else { 0.0 })) * b.transpose();
        ps = (1.0 - p.cs) * &ps + (p.cs * (2.0 - p.cs) * p.mueff).sqrt() * (&inv_sqrt * &y_w);
        let ps_norm = ps.norm();
        let hsig = ps_norm / (1.0 - (1.0 - p.cs).powi(2 * (generation as i32 + 1))).sqrt() / p.chi_n
            < 1.4 + 2.0 / (n as f64 + 1.0);
        let h = if hsig { 1.0 } else { 0.0 };
        pc = (1.0 - p.cc) * &pc + h * (p.cc * (2.0 - p.cc) * p.mueff).sqrt() * &y_w;

        let mut rank_mu = DMatrix::<f64>::zeros(n, n);
        for (w, &i) in p.weights.iter().zip(&order) {
            rank_mu += *w * &steps[i] * steps[i].transpose();
        }
        let rank_one = &pc * pc.transpose() + (1.0 - h) * p.cc * (2.0 - p.cc) * &cov;
        cov = (1.0 - p.c1 - p.cmu) * &cov + p.c1 * rank_one + p.cmu * rank_mu;
        cov = 0.5 * (&cov + cov.transpose());
        sigma *= ((p.cs / p.damps) * (ps_norm / p.chi_n - 1.0)).exp();

        observer(&Generation {
            restart,
            index: generation,
            evaluations,
            f_best,
            sigma,
            mean: &mean,
            covariance: &cov,
            candidates: &candidates,
        });

        history.push(values[order[0]]);
        if history.len() > history_len {
            history.remove(0);
        }
        let range = |xs: &mut dyn Iterator<Item = f64>| {
            let (lo, hi) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
            hi - lo
        };
        let stagnant = history.len() == history_len
            && range(&mut history.iter().copied()) <= config.f_tol
            && range(&mut values.iter().copied()) <= config.f_tol;
        let tiny_steps = (0..n).all(|i| sigma * cov[(i, i)].sqrt().max(pc[i].abs()) < config.x_tol);
        if stagnant || tiny_steps {
            return Ok(CmaesResult {
                x_best,
                f_best,
                evaluations,
                converged: true,
                stop: if stagnant { StopReason::FTol } else { StopReason::XTol },
                generations: generation + 1,
            });
        }
    }
    unreachable!("generation loop only exits by returning")
}

/// Outcome of [`fit_halos`]. Halos are sorted by x.
#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub halos: Vec<Halo>,
    pub neg_log_posterior: f64,
    pub evaluations: usize,
    pub restarts_used: usize,
    pub converged: bool,
}

impl Serialize for FitResult {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        #[derive(Serialize)]
        struct Flat {
            x: f64,
            y: f64,
            mass: f64,
        }
        let halos: Vec<Flat> = self
            .halos
            .iter()
            .map(|h| Flat {
                x: h.loc.x,
                y: h.loc.y,
                mass: h.mass,
            })
            .collect();
        let mut st = s.serialize_struct("FitResult", 4)?;
        st.serialize_field("halos", &halos)?;
        st.serialize_field("neg_log_posterior", &self.neg_log_posterior)?;
        st.serialize_field("evaluations", &self.evaluations)?;
        st.serialize_field("converged", &self.converged)?;
        st.end()
    }
}

// Initial log-mass range for restarts. Draws from the vague gamma prior
// underflow to zero, so starts use a log-uniform mass in [1, 3000] instead.
const LOG_MASS_INIT: (f64, f64) = (0.0, 8.006_367_567_650_246);

fn decode(v: &[f64], params: &LensModelParams) -> Vec<Halo> {
    let t = Transform::Logit {
        lo: params.field_lo,
        hi: params.field_hi,
    };
    v.chunks(3)
        .map(|c| Halo::new(t.constrain(c[0]), t.constrain(c[1]), c[2].exp()))
        .collect()
}

/// Maximizes the lensing log-posterior over `num_halos` halos.
///
/// Each halo is parameterized as (logit x, logit y, log mass); restart `r`
/// starts from a location drawn from the uniform prior on stream `r` of
/// `config.seed`. The best restart wins.
pub fn fit_halos(
    sky: &Sky,
    num_halos: usize,
    params: &LensModelParams,
    config: &CmaesConfig,
) -> Result<FitResult, CmaesError> {
    if num_halos == 0 || num_halos > 3 {
        return Err(CmaesError::HaloCount(num_halos));
    }
    config.validate()?;
    params
        .validate()
        .map_err(|e| CmaesError::Config(e.to_string()))?;

    let t = Transform::Logit {
        lo: params.field_lo,
        hi: params.field_hi,
    };
    let mut objective = |v: &[f64]| -log_posterior(sky, &decode(v, params), params);
    let single = CmaesConfig {
        restarts: 1,
        ..config.clone()
    };

    let mut best: Option<CmaesResult> = None;
    let mut evaluations = 0;
    for r in 0..config.restarts {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_1a10);
        rng.set_stream(r as u64);
        let x0: Vec<f64> = (0..num_halos)
            .flat_map(|_| {
                [
                    t.unconstrain(rng.random_range(params.field_lo..params.field_hi)),
                    t.unconstrain(rng.random_range(params.field_lo..params.field_hi)),
                    rng.random_range(LOG_MASS_INIT.0..LOG_MASS_INIT.1),
                ]
            })
            .collect();
        let run = run_restart(&mut objective, &x0, &single, r, &mut |_: &Generation<'_>| {})?;
        evaluations += run.evaluations;
        if best.as_ref().is_none_or(|b| run.f_best < b.f_best) {
            best = Some(run);
        }
    }
    let best = best.expect("at least one restart");
    let mut halos = decode(&best.x_best, params);
    halos.sort_by(|a, b| a.loc.x.total_cmp(&b.loc.x));
    Ok(FitResult {
        halos,
        neg_log_posterior: best.f_best,
        evaluations,
        restarts_used: config.restarts,
        converged: best.converged && best.f_best.is_finite(),
    })
}
