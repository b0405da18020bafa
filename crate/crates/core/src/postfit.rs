//! Post-estimation analyses: holdout approximate log-likelihood and scree
//! curves for choosing the latent dimension, MAP factor scores, bias/MSE
//! metrics over replications, and the simulation-study harness.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_pcg::Pcg64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{one_hot, simulate_with_scores, Dataset, GeneratingParams};
use crate::encoder::forward;
use crate::error::{Error, Result};
use crate::grm::item_log_prob;
use crate::math::{derive_seed, logsumexp};
use crate::rotation::{align, align_correlations, geomin_rotate, AlignmentRecord, RotationConfig, RotationSolution};
use crate::trainer::{fit, FitConfig, FittedModel};

const SPLIT_STREAM: u64 = 0x5350_4c49; // "SPLI"
const APPROX_STREAM: u64 = 0x4150_5052; // "APPR"
const SCREE_STREAM: u64 = 0x5343_5245; // "SCRE"
const REP_STREAM: u64 = 0x5245_504c; // "REPL"

/// Default number of importance samples for holdout evaluation.
pub const DEFAULT_EVAL_SAMPLES: usize = 5000;

/// One point of the log-likelihood scree curve.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScreePoint {
    pub latent_dim: usize,
    pub neg_approx_loglik: f64,
    pub holdout_fraction: f64,
    pub r_eval: usize,
}

/// Respondent-level holdout split without replacement. Returns the training
/// set, the holdout set and the holdout row indices (ascending).
pub fn holdout_split(d: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!(
            "holdout fraction must lie strictly between 0 and 1, got {fraction}"
        )));
    }
    let n = d.n_respondents();
    let n_holdout = ((n as f64 * fraction).round() as usize).clamp(1, n.saturating_sub(1));
    if n_holdout == 0 || n_holdout >= n {
        return Err(Error::Config(format!(
            "holdout fraction {fraction} leaves an empty split for {n} rows"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = Pcg64::seed_from_u64(derive_seed(seed, SPLIT_STREAM, 0));
    order.shuffle(&mut rng);
    let mut holdout_idx: Vec<usize> = order[..n_holdout].to_vec();
    let mut train_idx: Vec<usize> = order[n_holdout..].to_vec();
    holdout_idx.sort_unstable();
    train_idx.sort_unstable();
    Ok((d.subset(&train_idx)?, d.subset(&holdout_idx)?, holdout_idx))
}

/// Per-respondent holdout approximate log-likelihood terms,
/// `logsumexp_r(log w_r) - log R`, using pointwise importance weights with
/// `r_eval` posterior draws regardless of the training weight mode.
pub fn approx_loglik_per_respondent(
    model: &FittedModel,
    holdout: &Dataset,
    r_eval: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if r_eval == 0 {
        return Err(Error::Config("r_eval must be at least 1".into()));
    }
    if holdout.total_categories() != model.encoder.input_dim() {
        return Err(Error::Shape(format!(
            "holdout encoding width {} does not match the encoder input {}",
            holdout.total_categories(),
            model.encoder.input_dim()
        )));
    }
    let bank = &model.item_bank;
    let enc = &model.encoder;
    let p = enc.latent_dim();
    let d = bank.scaling_d();
    let offsets = holdout.offsets();

    let values: Vec<f64> = (0..holdout.n_respondents())
        .into_par_iter()
        .map(|i| {
            let y = holdout.row(i);
            let cols: Vec<usize> = offsets
                .iter()
                .enumerate()
                .map(|(j, &off)| off + y[j] as usize)
                .collect();
            let mut h = vec![0.0; enc.hidden_size()];
            let mut mu = vec![0.0; p];
            let mut ls_raw = vec![0.0; p];
            enc.forward_indices(&cols, &mut h, &mut mu, &mut ls_raw);
            let ls: Vec<f64> = ls_raw.iter().map(|&v| crate::encoder::clamp_log_sigma(v)).collect();
            let sigma: Vec<f64> = ls.iter().map(|&v| v.exp()).collect();

            let mut rng = Pcg64::seed_from_u64(derive_seed(seed, APPROX_STREAM, i as u64));
            let mut log_w = Vec::with_capacity(r_eval);
            let mut x = vec![0.0; p];
            for _ in 0..r_eval {
                let mut ratio = 0.0;
                for q in 0..p {
                    let e: f64 = rand::Rng::sample(&mut rng, rand_distr::StandardNormal);
                    x[q] = mu[q] + sigma[q] * e;
                    ratio += -0.5 * x[q] * x[q] + ls[q] + 0.5 * e * e;
                }
                let mut ll = 0.0;
                for j in 0..bank.n_items() {
                    let t = bank.linear_predictor(j, &x);
                    ll += item_log_prob(bank.intercepts(j), d, t, y[j] as usize);
                }
                log_w.push(ll + ratio);
            }
            logsumexp(&log_w) - (r_eval as f64).ln()
        })
        .collect();
    Ok(values)
}

/// Holdout approximate log-likelihood, the sum of the per-respondent terms.
pub fn approx_loglik(model: &FittedModel, holdout: &Dataset, r_eval: usize, seed: u64) -> Result<f64> {
    Ok(approx_loglik_per_respondent(model, holdout, r_eval, seed)?
        .iter()
        .sum())
}

/// Fits the template config at each latent dimension in `p_list` on the
/// training split and evaluates the negative holdout approximate
/// log-likelihood. Fits for different dimensions run in parallel; each owns
/// a seed derived from the template seed and its dimension.
pub fn scree_curve(
    d: &Dataset,
    p_list: &[usize],
    template: &FitConfig,
    holdout_fraction: f64,
    r_eval: usize,
) -> Result<Vec<ScreePoint>> {
    if p_list.is_empty() {
        return Err(Error::Config("the latent-dimension list is empty".into()));
    }
    if p_list.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Config("latent dimensions must be strictly ascending".into()));
    }
    let (train, holdout, _) = holdout_split(d, holdout_fraction, template.seed)?;
    let results: Vec<Result<ScreePoint>> = p_list
        .par_iter()
        .map(|&p| {
            let mut cfg = template.clone();
            cfg.latent_dim = p;
            cfg.hidden_size = None; // re-derive from the layer-size rule per P
            cfg.seed = derive_seed(template.seed, SCREE_STREAM, p as u64);
            let annotate = |e: Error| Error::Numerical(format!("scree fit at P = {p} failed: {e}"));
            let model = fit(&train, &cfg).map_err(annotate)?;
            let ll = approx_loglik(&model, &holdout, r_eval, cfg.seed).map_err(annotate)?;
            Ok(ScreePoint {
                latent_dim: p,
                neg_approx_loglik: -ll,
                holdout_fraction,
                r_eval,
            })
        })
        .collect();
    results.into_iter().collect()
}

/// Advisory elbow annotation: the dimension with the largest second
/// difference of the curve. The choice of P stays with the analyst.
pub fn annotate_elbow(points: &[ScreePoint]) -> Option<usize> {
    if points.len() < 3 {
        return None;
    }
    let mut best = None;
    let mut best_curv = f64::NEG_INFINITY;
    for w in points.windows(3) {
        let curv = w[0].neg_approx_loglik - 2.0 * w[1].neg_approx_loglik + w[2].neg_approx_loglik;
        if curv > best_curv {
            best_curv = curv;
            best = Some(w[1].latent_dim);
        }
    }
    best
}

/// MAP factor scores: the approximate-posterior means, one row per
/// respondent.
pub fn map_scores(model: &FittedModel, d: &Dataset) -> Result<DMatrix<f64>> {
    let enc = one_hot(d);
    let post = forward(&model.encoder, &enc)?;
    let p = model.encoder.latent_dim();
    Ok(DMatrix::from_fn(d.n_respondents(), p, |i, q| post.mu_row(i)[q]))
}

/// Carries scores into a rotated solution. Rotated loadings satisfy
/// `A = L T^t`, so `A x = L (T^t x)` and the rotated scores are `T^t x`,
/// i.e. `scores * T` with respondents in rows.
pub fn rotate_scores(scores: &DMatrix<f64>, solution: &RotationSolution) -> DMatrix<f64> {
    scores * &solution.transform
}

/// Applies an alignment's signs and column permutation to a score matrix.
pub fn align_scores(scores: &DMatrix<f64>, record: &AlignmentRecord) -> DMatrix<f64> {
    DMatrix::from_fn(scores.nrows(), scores.ncols(), |i, t| {
        let s = record.permutation[t];
        record.signs[s] * scores[(i, s)]
    })
}

/// Pearson correlation between two equal-length slices.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    cov / (va * vb).sqrt()
}

/// One replication's aligned parameter estimates.
#[derive(Debug, Clone)]
pub struct ParamSet {
    pub loadings: DMatrix<f64>,
    pub intercepts: Vec<Vec<f64>>,
    pub factor_corr: DMatrix<f64>,
}

/// Bias and MSE for one parameter block, plus the block RMSE
/// (`sqrt(mean MSE)` over the block).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BlockMetrics {
    pub bias: Vec<f64>,
    pub mse: Vec<f64>,
    pub rmse: f64,
}

fn block_metrics(deviations: &[Vec<f64>]) -> BlockMetrics {
    let n_params = deviations[0].len();
    let n_reps = deviations.len() as f64;
    let mut bias = vec![0.0; n_params];
    let mut mse = vec![0.0; n_params];
    for rep in deviations {
        for (k, d) in rep.iter().enumerate() {
            bias[k] += d;
            mse[k] += d * d;
        }
    }
    for k in 0..n_params {
        bias[k] /= n_reps;
        mse[k] /= n_reps;
    }
    let rmse = if n_params == 0 {
        0.0
    } else {
        (mse.iter().sum::<f64>() / n_params as f64).sqrt()
    };
    BlockMetrics { bias, mse, rmse }
}

/// Per-parameter bias and MSE across replications, by block. Loadings are
/// flattened row-major, intercepts item by item, factor correlations over
/// the strict lower triangle.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub n_replications: usize,
    pub loadings: BlockMetrics,
    pub intercepts: BlockMetrics,
    pub factor_corr: BlockMetrics,
}

pub fn bias_mse(estimates: &[ParamSet], truth: &ParamSet) -> Result<MetricReport> {
    if estimates.len() < 2 {
        return Err(Error::Config(
            "bias/MSE computation needs at least 2 replications".into(),
        ));
    }
    let (j_items, p) = truth.loadings.shape();
    let mut load_dev = Vec::with_capacity(estimates.len());
    let mut int_dev = Vec::with_capacity(estimates.len());
    let mut corr_dev = Vec::with_capacity(estimates.len());
    for (a, est) in estimates.iter().enumerate() {
        if est.loadings.shape() != (j_items, p)
            || est.factor_corr.shape() != truth.factor_corr.shape()
            || est.intercepts.len() != truth.intercepts.len()
            || est
                .intercepts
                .iter()
                .zip(&truth.intercepts)
                .any(|(e, t)| e.len() != t.len())
        {
            return Err(Error::Shape(format!(
                "replication {a} has mismatched parameter shapes"
            )));
        }
        let mut dl = Vec::with_capacity(j_items * p);
        for j in 0..j_items {
            for q in 0..p {
                dl.push(est.loadings[(j, q)] - truth.loadings[(j, q)]);
            }
        }
        load_dev.push(dl);
        let mut di = Vec::new();
        for (e, t) in est.intercepts.iter().zip(&truth.intercepts) {
            for (ev, tv) in e.iter().zip(t) {
                di.push(ev - tv);
            }
        }
        int_dev.push(di);
        let mut dc = Vec::new();
        for a_row in 1..p {
            for b_col in 0..a_row {
                dc.push(est.factor_corr[(a_row, b_col)] - truth.factor_corr[(a_row, b_col)]);
            }
        }
        corr_dev.push(dc);
    }
    Ok(MetricReport {
        n_replications: estimates.len(),
        loadings: block_metrics(&load_dev),
        intercepts: block_metrics(&int_dev),
        factor_corr: block_metrics(&corr_dev),
    })
}

/// Configuration for a simulate-fit-rotate-align replication study.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplicationConfig {
    pub generator: GeneratingParams,
    pub n_respondents: usize,
    pub replications: usize,
    pub fit: FitConfig,
    #[serde(default)]
    pub rotation: RotationConfig,
}

/// Per-replication summary (no timings here so reports stay reproducible;
/// wall times are returned separately).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplicationOutcome {
    pub replication: usize,
    pub seed: u64,
    pub converged: bool,
    pub iterations: usize,
    pub loading_mse: f64,
    pub mean_congruence: f64,
    pub score_correlations: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplicationReport {
    pub metrics: MetricReport,
    pub outcomes: Vec<ReplicationOutcome>,
    /// Error messages of failed replications (excluded from the metrics).
    pub failures: Vec<String>,
    /// Mean score correlation per factor over successful replications.
    pub score_correlations: Vec<f64>,
}

struct ReplicationSuccess {
    outcome: ReplicationOutcome,
    params: ParamSet,
}

fn run_one_replication(cfg: &ReplicationConfig, a: usize) -> Result<ReplicationSuccess> {
    let seed = derive_seed(cfg.fit.seed, REP_STREAM, a as u64);
    let sim = simulate_with_scores(&cfg.generator, cfg.n_respondents, seed)?;
    let mut fit_cfg = cfg.fit.clone();
    fit_cfg.seed = seed;
    let model = fit(&sim.data, &fit_cfg)?;

    let mut rot_cfg = cfg.rotation.clone();
    rot_cfg.seed = seed;
    let solution = geomin_rotate(model.item_bank.loadings(), &rot_cfg)?;
    let (record, aligned_loadings) = align(&cfg.generator.loadings, &solution.rotated_loadings)?;
    let aligned_corr = align_correlations(&solution.factor_corr, &record);
    let intercepts: Vec<Vec<f64>> = (0..model.item_bank.n_items())
        .map(|j| model.item_bank.intercepts(j).to_vec())
        .collect();

    let p = cfg.generator.latent_dim();
    let scores = map_scores(&model, &sim.data)?;
    let aligned_scores = align_scores(&rotate_scores(&scores, &solution), &record);
    let n = sim.data.n_respondents();
    let mut score_correlations = Vec::with_capacity(p);
    for q in 0..p {
        let est: Vec<f64> = (0..n).map(|i| aligned_scores[(i, q)]).collect();
        let truth: Vec<f64> = (0..n).map(|i| sim.scores[i * p + q]).collect();
        score_correlations.push(pearson(&est, &truth));
    }

    let loading_mse = {
        let diff = &aligned_loadings - &cfg.generator.loadings;
        diff.iter().map(|d| d * d).sum::<f64>() / diff.len() as f64
    };
    Ok(ReplicationSuccess {
        outcome: ReplicationOutcome {
            replication: a,
            seed,
            converged: model.converged,
            iterations: model.iterations_run,
            loading_mse,
            mean_congruence: record.mean_congruence,
            score_correlations,
        },
        params: ParamSet {
            loadings: aligned_loadings,
            intercepts,
            factor_corr: aligned_corr,
        },
    })
}

/// Runs the full study. With `parallel` the replications are scheduled on
/// the rayon pool; every replication owns a counter-derived seed, so the
/// report is identical either way.
pub fn replication_study(cfg: &ReplicationConfig, parallel: bool) -> Result<(ReplicationReport, Vec<f64>)> {
    if cfg.replications == 0 {
        return Err(Error::Config("at least one replication is required".into()));
    }
    cfg.generator.validate()?;
    let timed = |a: usize| -> (Result<ReplicationSuccess>, f64) {
        let start = std::time::Instant::now();
        let out = run_one_replication(cfg, a);
        (out, start.elapsed().as_secs_f64())
    };
    let results: Vec<(Result<ReplicationSuccess>, f64)> = if parallel {
        (0..cfg.replications).into_par_iter().map(timed).collect()
    } else {
        (0..cfg.replications).map(timed).collect()
    };

    let mut outcomes = Vec::new();
    let mut params = Vec::new();
    let mut failures = Vec::new();
    let mut timings = Vec::with_capacity(results.len());
    for (a, (res, secs)) in results.into_iter().enumerate() {
        timings.push(secs);
        match res {
            Ok(s) => {
                outcomes.push(s.outcome);
                params.push(s.params);
            }
            Err(e) => failures.push(format!("replication {a}: {e}")),
        }
    }
    if params.len() < 2 {
        let detail = failures
            .first()
            .map(|f| format!("; first failure: {f}"))
            .unwrap_or_default();
        return Err(Error::Numerical(format!(
            "only {} of {} replications succeeded, cannot compute bias/MSE{detail}",
            params.len(),
            cfg.replications
        )));
    }
    let truth = ParamSet {
        loadings: cfg.generator.loadings.clone(),
        intercepts: cfg.generator.intercepts.clone(),
        factor_corr: cfg.generator.factor_corr.clone(),
    };
    let metrics = bias_mse(&params, &truth)?;
    let p = cfg.generator.latent_dim();
    let mut score_correlations = vec![0.0; p];
    for o in &outcomes {
        for q in 0..p {
            score_correlations[q] += o.score_correlations[q];
        }
    }
    for v in score_correlations.iter_mut() {
        *v /= outcomes.len() as f64;
    }
    Ok((
        ReplicationReport {
            metrics,
            outcomes,
            failures,
            score_correlations,
        },
        timings,
    ))
}
