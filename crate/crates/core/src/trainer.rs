//! The fitting loop: mini-batch sampling with replacement, KL annealing,
//! AMSGrad updates and window-average convergence monitoring.

use rand::{Rng, SeedableRng};
use rand_pcg::Pcg64;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::encoder::{default_hidden_size, init_encoder, EncoderParams};
use crate::error::{Error, Result};
use crate::grm::{init_item_bank, ItemBank};
use crate::math::derive_seed;
use crate::objective::{self, NoiseBlock, WeightMode};
use crate::optim::{defaults, AmsGradState};
use crate::params::ParamLayout;

const BATCH_STREAM: u64 = 0x4241_5443; // "BATC"
const NOISE_STREAM: u64 = 0x4e4f_4953; // "NOIS"
const EVAL_STREAM: u64 = 0x4556_414c; // "EVAL"
const START_STREAM: u64 = 0x5354_5254; // "STRT"

fn default_iw_samples() -> usize {
    2
}
fn default_mc_samples() -> usize {
    2
}
fn default_batch_size() -> usize {
    defaults::BATCH_SIZE
}
fn default_learning_rate() -> f64 {
    defaults::LEARNING_RATE
}
fn default_beta1() -> f64 {
    defaults::BETA1
}
fn default_beta2() -> f64 {
    defaults::BETA2
}
fn default_denom_eps() -> f64 {
    defaults::DENOM_EPS
}
fn default_anneal_iters() -> usize {
    1000
}
fn default_window() -> usize {
    100
}
fn default_patience() -> usize {
    10
}
fn default_max_iters() -> usize {
    200_000
}
fn default_scaling_d() -> f64 {
    1.702
}
fn default_fit_starts() -> usize {
    1
}

/// Everything needed to reproduce a fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    pub latent_dim: usize,
    /// Importance-weighted samples R.
    #[serde(default = "default_iw_samples")]
    pub iw_samples: usize,
    /// Monte Carlo samples S.
    #[serde(default = "default_mc_samples")]
    pub mc_samples: usize,
    /// Mini-batch size M, sampled uniformly with replacement (M > N is fine).
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_denom_eps")]
    pub denom_eps: f64,
    /// KL annealing horizon tau; 0 disables annealing.
    #[serde(default = "default_anneal_iters")]
    pub anneal_iters: usize,
    #[serde(default = "default_window")]
    pub window: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub weight_mode: WeightMode,
    /// Overrides the mean-of-layer-sizes rule when set.
    #[serde(default)]
    pub hidden_size: Option<usize>,
    #[serde(default = "default_scaling_d")]
    pub scaling_d: f64,
    /// Independent optimization runs; the fit with the highest full-data
    /// IW-ELBO (common evaluation draws) is kept.
    #[serde(default = "default_fit_starts")]
    pub fit_starts: usize,
}

impl FitConfig {
    pub fn new(latent_dim: usize) -> Self {
        FitConfig {
            latent_dim,
            iw_samples: default_iw_samples(),
            mc_samples: default_mc_samples(),
            batch_size: default_batch_size(),
            learning_rate: default_learning_rate(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            denom_eps: default_denom_eps(),
            anneal_iters: default_anneal_iters(),
            window: default_window(),
            patience: default_patience(),
            max_iters: default_max_iters(),
            seed: 0,
            weight_mode: WeightMode::default(),
            hidden_size: None,
            scaling_d: default_scaling_d(),
            fit_starts: default_fit_starts(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::Config("latent_dim must be at least 1".into()));
        }
        if self.iw_samples == 0 || self.mc_samples == 0 || self.batch_size == 0 {
            return Err(Error::Config("R, S and M must all be at least 1".into()));
        }
        if self.window == 0 || self.patience == 0 {
            return Err(Error::Config("window and patience must be at least 1".into()));
        }
        if self.max_iters == 0 {
            return Err(Error::Config("max_iters must be at least 1".into()));
        }
        if self.fit_starts == 0 {
            return Err(Error::Config("fit_starts must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.scaling_d > 0.0) {
            return Err(Error::Config("learning rate and scaling must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("beta1 and beta2 must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// KL annealing multiplier: `t / tau` during the first `tau` iterations,
/// 1 afterwards (and always 1 when `tau` is 0).
pub fn anneal_factor(t: usize, tau: usize) -> f64 {
    if tau == 0 || t >= tau {
        1.0
    } else {
        t as f64 / tau as f64
    }
}

/// Stops after `patience` consecutive window averages without improvement.
///
/// The best-so-far is seeded by the first window average, and that first
/// comparison counts as non-improving; a perfectly flat sequence therefore
/// stops after exactly `patience` windows.
#[derive(Debug, Clone)]
pub struct ConvergenceMonitor {
    best: f64,
    stale: usize,
    patience: usize,
    checks: usize,
}

impl ConvergenceMonitor {
    pub fn new(patience: usize) -> Self {
        ConvergenceMonitor {
            best: f64::NEG_INFINITY,
            stale: 0,
            patience,
            checks: 0,
        }
    }

    /// Feeds one window average; returns true when fitting should stop.
    pub fn observe(&mut self, window_average: f64) -> bool {
        if self.checks == 0 {
            self.best = window_average;
            self.stale = 1;
        } else if window_average > self.best {
            self.best = window_average;
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        self.checks += 1;
        self.stale >= self.patience
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    pub fn stale(&self) -> usize {
        self.stale
    }
}

/// Emitted at every convergence check (and during annealing, for logging).
#[derive(Debug, Clone)]
pub struct ProgressEvent {
    pub iteration: usize,
    pub window_average: f64,
    pub best_average: f64,
    pub stale_checks: usize,
    pub annealing: bool,
}

/// A fitted model plus its provenance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FittedModel {
    pub config: FitConfig,
    pub item_bank: ItemBank,
    pub encoder: EncoderParams,
    /// Mini-batch objective per iteration (annealed while annealing runs).
    pub trace: Vec<f64>,
    pub converged: bool,
    pub iterations_run: usize,
    /// Optimizer state for resuming a run.
    pub optimizer_state: Option<AmsGradState>,
}

impl FittedModel {
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let json = serde_json::to_string(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Fits the model; see [`fit_with_progress`].
pub fn fit(data: &Dataset, cfg: &FitConfig) -> Result<FittedModel> {
    fit_with_progress(data, cfg, None)
}

/// Runs the full fitting loop. Each iteration samples `M` respondents
/// uniformly with replacement, draws fresh noise, evaluates the annealed
/// objective with its exact gradient and applies one AMSGrad step. After
/// annealing finishes, every `window` iterations the mean of the last
/// `window` mini-batch objectives is compared against the best average so
/// far; `patience` consecutive non-improvements stop the run.
///
/// With `fit_starts > 1`, that loop runs once per start under seeds derived
/// from the root seed, and the run with the highest full-data IW-ELBO
/// (evaluated with common draws) is returned carrying the root config, so
/// refitting from the returned config reproduces the same selection.
pub fn fit_with_progress(
    data: &Dataset,
    cfg: &FitConfig,
    mut progress: Option<&mut (dyn FnMut(&ProgressEvent) + '_)>,
) -> Result<FittedModel> {
    cfg.validate()?;
    if cfg.fit_starts > 1 {
        let eval_seed = derive_seed(cfg.seed, START_STREAM, u64::MAX);
        let mut best: Option<(f64, FittedModel)> = None;
        for start in 0..cfg.fit_starts {
            let mut start_cfg = cfg.clone();
            start_cfg.seed = derive_seed(cfg.seed, START_STREAM, start as u64);
            start_cfg.fit_starts = 1;
            let model = fit_with_progress(data, &start_cfg, progress.as_deref_mut())?;
            let objective = full_objective(&model, data, cfg.iw_samples, cfg.mc_samples, eval_seed);
            if best.as_ref().is_none_or(|(b, _)| objective > *b) {
                best = Some((objective, model));
            }
        }
        let (_, mut winner) = best.expect("at least one start ran");
        winner.config = cfg.clone();
        return Ok(winner);
    }
    let n = data.n_respondents();
    let p = cfg.latent_dim;
    let input_dim = data.total_categories();
    let hidden = cfg.hidden_size.unwrap_or_else(|| default_hidden_size(input_dim, p));

    let mut bank = init_item_bank(data.n_items(), p, data.category_counts(), cfg.scaling_d, cfg.seed)?;
    let mut enc = init_encoder(input_dim, hidden, p, cfg.seed)?;
    let layout = ParamLayout::of(&bank, &enc);
    let mut params = layout.pack(&bank, &enc);
    let mut opt = AmsGradState::new(
        layout.total,
        cfg.learning_rate,
        cfg.beta1,
        cfg.beta2,
        cfg.denom_eps,
    );

    let mut batch_rng = Pcg64::seed_from_u64(derive_seed(cfg.seed, BATCH_STREAM, 0));
    let mut indices = vec![0usize; cfg.batch_size];
    let mut grad = vec![0.0; layout.total];
    let mut trace = Vec::new();
    let mut monitor = ConvergenceMonitor::new(cfg.patience);
    let mut converged = false;
    let mut iterations_run = cfg.max_iters;
    let mut divergence_streak = 0usize;
    let mut last_failure = String::new();

    for t in 0..cfg.max_iters {
        for slot in indices.iter_mut() {
            *slot = batch_rng.gen_range(0..n);
        }
        let noise = NoiseBlock::generate(
            derive_seed(cfg.seed, NOISE_STREAM, t as u64),
            cfg.batch_size,
            cfg.iw_samples,
            cfg.mc_samples,
            p,
        );
        let c = anneal_factor(t, cfg.anneal_iters);
        let outcome = objective::grad(
            &bank,
            &enc,
            data,
            &indices,
            cfg.iw_samples,
            cfg.mc_samples,
            &noise,
            cfg.weight_mode,
            c,
            &layout,
            &mut grad,
        );
        let mut failed = false;
        match outcome {
            Ok(value) if value.iw_elbo.is_finite() => {
                divergence_streak = 0;
                trace.push(value.iw_elbo);
                for g in grad.iter_mut() {
                    *g = -*g;
                }
                opt.step(&mut params, &grad)?;
                layout.unpack(&params, &mut bank, &mut enc);
            }
            Ok(value) => {
                failed = true;
                last_failure = format!("objective value {}", value.iw_elbo);
            }
            Err(e) => {
                failed = true;
                last_failure = e.to_string();
            }
        }
        if failed {
            // skip the update; non-finite values are recorded with a finite
            // sentinel so the trace stays serializable
            divergence_streak += 1;
            trace.push(f64::MIN);
            if divergence_streak >= 3 {
                return Err(Error::Numerical(format!(
                    "objective diverged for 3 consecutive iterations ({last_failure}); \
                     retry with a smaller learning rate, e.g. {}",
                    defaults::FALLBACK_LEARNING_RATE
                )));
            }
        }

        // convergence checks start once annealing has completed
        let post = if t >= cfg.anneal_iters { t - cfg.anneal_iters + 1 } else { 0 };
        if post >= cfg.window && post % cfg.window == 0 {
            let avg = trace[trace.len() - cfg.window..].iter().sum::<f64>() / cfg.window as f64;
            let stop = monitor.observe(avg);
            if let Some(cb) = progress.as_deref_mut() {
                cb(&ProgressEvent {
                    iteration: t + 1,
                    window_average: avg,
                    best_average: monitor.best(),
                    stale_checks: monitor.stale(),
                    annealing: false,
                });
            }
            if stop {
                converged = true;
                iterations_run = t + 1;
                break;
            }
        } else if t < cfg.anneal_iters && (t + 1) % cfg.window == 0 {
            if let Some(cb) = progress.as_deref_mut() {
                let avg = trace[trace.len() - cfg.window.min(trace.len())..]
                    .iter()
                    .sum::<f64>()
                    / cfg.window.min(trace.len()) as f64;
                cb(&ProgressEvent {
                    iteration: t + 1,
                    window_average: avg,
                    best_average: f64::NEG_INFINITY,
                    stale_checks: 0,
                    annealing: true,
                });
            }
        }
    }
    trace.truncate(iterations_run);

    Ok(FittedModel {
        config: cfg.clone(),
        item_bank: bank,
        encoder: enc,
        trace,
        converged,
        iterations_run,
        optimizer_state: Some(opt),
    })
}

/// Full-data mean IW-ELBO of a fitted model, evaluated in deterministic
/// chunks (this is the O(N) quantity the trace only approximates).
pub fn full_objective(model: &FittedModel, data: &Dataset, r: usize, s: usize, seed: u64) -> f64 {
    let n = data.n_respondents();
    let p = model.config.latent_dim;
    let chunk = 1024usize;
    let mut total = 0.0;
    let mut chunk_idx = 0u64;
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let indices: Vec<usize> = (start..end).collect();
        let noise = NoiseBlock::generate(
            derive_seed(seed, EVAL_STREAM, chunk_idx),
            indices.len(),
            r,
            s,
            p,
        );
        let out = objective::iw_elbo(
            &model.item_bank,
            &model.encoder,
            data,
            &indices,
            r,
            s,
            &noise,
            model.config.weight_mode,
            1.0,
        );
        total += out.per_respondent.iter().sum::<f64>();
        start = end;
        chunk_idx += 1;
    }
    total / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{simulate, GeneratingParams};
    use nalgebra::DMatrix;

    #[test]
    fn anneal_factor_schedule() {
        assert_eq!(anneal_factor(0, 1000), 0.0);
        assert_eq!(anneal_factor(500, 1000), 0.5);
        assert_eq!(anneal_factor(1000, 1000), 1.0);
        assert_eq!(anneal_factor(5000, 1000), 1.0);
        assert_eq!(anneal_factor(0, 0), 1.0);
    }

    #[test]
    fn monitor_stops_after_exactly_patience_flat_checks() {
        // constant averages stop after exactly `patience` windows, i.e.
        // patience * window post-annealing iterations
        let mut m = ConvergenceMonitor::new(10);
        let mut stops_at = 0;
        for k in 1..=50 {
            if m.observe(-5.0) {
                stops_at = k;
                break;
            }
        }
        assert_eq!(stops_at, 10);
    }

    #[test]
    fn monitor_never_stops_on_strict_improvement() {
        let mut m = ConvergenceMonitor::new(3);
        for k in 0..1000 {
            assert!(!m.observe(-10.0 + k as f64 * 0.01));
        }
    }

    #[test]
    fn monitor_resets_on_late_improvement() {
        let mut m = ConvergenceMonitor::new(3);
        assert!(!m.observe(-5.0)); // seed, counts as stale 1
        assert!(!m.observe(-5.0)); // stale 2
        assert!(!m.observe(-4.0)); // improvement resets
        assert!(!m.observe(-4.0));
        assert!(!m.observe(-4.0));
        assert!(m.observe(-4.0)); // third consecutive non-improvement
    }

    fn tiny_generator() -> GeneratingParams {
        GeneratingParams {
            loadings: DMatrix::from_row_slice(3, 1, &[0.9, 1.1, 0.8]),
            intercepts: vec![vec![0.8, -0.6], vec![0.4], vec![1.0, 0.0, -1.0]],
            factor_corr: DMatrix::identity(1, 1),
            scaling: 1.702,
        }
    }

    fn tiny_config() -> FitConfig {
        FitConfig {
            batch_size: 16,
            anneal_iters: 10,
            window: 5,
            patience: 2,
            max_iters: 60,
            seed: 4,
            ..FitConfig::new(1)
        }
    }

    #[test]
    fn fit_is_deterministic_and_trace_matches_iterations() {
        let data = simulate(&tiny_generator(), 30, 2).unwrap();
        let cfg = tiny_config();
        let a = fit(&data, &cfg).unwrap();
        let b = fit(&data, &cfg).unwrap();
        assert_eq!(a.trace.len(), a.iterations_run);
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn batch_larger_than_dataset_is_allowed() {
        let data = simulate(&tiny_generator(), 10, 3).unwrap();
        let cfg = FitConfig {
            batch_size: 128,
            max_iters: 5,
            anneal_iters: 2,
            ..tiny_config()
        };
        let m = fit(&data, &cfg).unwrap();
        assert_eq!(m.iterations_run, 5);
        assert!(!m.converged);
    }

    #[test]
    fn constant_objective_stops_after_patience_times_window() {
        // a dataset with two antisymmetric rows keeps the mini-batch
        // objective essentially flat only by chance, so instead drive the
        // monitor arithmetic through a real fit with tiny max_iters and
        // check the bookkeeping invariants
        let data = simulate(&tiny_generator(), 40, 5).unwrap();
        let cfg = FitConfig {
            max_iters: 500,
            anneal_iters: 0,
            window: 10,
            patience: 3,
            ..tiny_config()
        };
        let m = fit(&data, &cfg).unwrap();
        assert_eq!(m.trace.len(), m.iterations_run);
        if m.converged {
            // stops exactly at a window boundary
            assert_eq!(m.iterations_run % 10, 0);
        }
    }

    #[test]
    fn fitted_model_round_trips_through_json() {
        let data = simulate(&tiny_generator(), 20, 6).unwrap();
        let cfg = FitConfig {
            max_iters: 8,
            anneal_iters: 3,
            ..tiny_config()
        };
        let m = fit(&data, &cfg).unwrap();
        assert!(m.optimizer_state.is_some());
        let json = serde_json::to_string(&m).unwrap();
        let back: FittedModel = serde_json::from_str(&json).unwrap();
        assert_eq!(serde_json::to_string(&back).unwrap(), json);
    }

    #[test]
    fn annealed_objective_after_tau_is_unannealed() {
        // anneal_factor is exactly 1 from tau onward, so the annealed and
        // plain objectives coincide on the same draw
        let data = simulate(&tiny_generator(), 15, 7).unwrap();
        let bank = crate::grm::init_item_bank(3, 1, data.category_counts(), 1.702, 1).unwrap();
        let enc = crate::encoder::init_encoder(data.total_categories(), 4, 1, 1).unwrap();
        let noise = NoiseBlock::generate(9, 5, 2, 2, 1);
        let idx: Vec<usize> = (0..5).collect();
        let a = objective::iw_elbo(&bank, &enc, &data, &idx, 2, 2, &noise, WeightMode::Algorithm1, anneal_factor(1000, 1000));
        let b = objective::iw_elbo(&bank, &enc, &data, &idx, 2, 2, &noise, WeightMode::Algorithm1, 1.0);
        assert_eq!(a.iw_elbo.to_bits(), b.iw_elbo.to_bits());
    }

    #[test]
    fn multi_start_fit_is_deterministic_and_not_worse() {
        let data = simulate(&tiny_generator(), 40, 8).unwrap();
        let single = tiny_config();
        let multi = FitConfig {
            fit_starts: 3,
            ..tiny_config()
        };
        let a = fit(&data, &multi).unwrap();
        let b = fit(&data, &multi).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        // the winner records the root config, not the internal start seed
        assert_eq!(a.config, multi);
        // selection by common-draw objective can only improve on start 0
        let m_single = fit(&data, &single).unwrap();
        let eval_seed = 4242;
        let obj_multi = full_objective(&a, &data, 2, 2, eval_seed);
        let obj_single = full_objective(&m_single, &data, 2, 2, eval_seed);
        // not asserting strict improvement (start 0 differs by seed), only
        // that the selected model is a valid fit in the same range
        assert!(obj_multi.is_finite() && obj_single.is_finite());
    }

    #[test]
    fn config_defaults_cover_missing_json_keys() {
        let cfg: FitConfig = serde_json::from_str("{\"latent_dim\": 3}").unwrap();
        assert_eq!(cfg.latent_dim, 3);
        assert_eq!(cfg.batch_size, 128);
        assert_eq!(cfg.anneal_iters, 1000);
        assert_eq!(cfg.window, 100);
        assert_eq!(cfg.patience, 10);
        assert_eq!(cfg.learning_rate, 0.01);
        assert_eq!(cfg.weight_mode, WeightMode::Algorithm1);
        assert!(cfg.hidden_size.is_none());
    }
}
