//! Command implementations. Every command loads inputs, runs the library,
//! writes outputs atomically and finishes with a manifest.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use ifa_core::data::{simulate_with_scores, Dataset, GeneratingParams};
use ifa_core::postfit::{
    annotate_elbow, map_scores, replication_study, rotate_scores, scree_curve,
    ReplicationConfig,
};
use ifa_core::rotation::{
    align, geomin_rotate, invert_negative_columns, RotationConfig, RotationSolution,
    CONGRUENCE_EQUIVALENCE_THRESHOLD,
};
use ifa_core::trainer::{fit_with_progress, FitConfig, FittedModel, ProgressEvent};
use ifa_core::{Error, Result};

use crate::manifest::{write_atomic, RunManifest};
use crate::{
    CompareArgs, DataFlags, FitArgs, FitFlags, ReplicateArgs, RotateArgs, RotationFlags,
    ScoreArgs, ScreeArgs, SimulateArgs,
};

impl FitFlags {
    /// Builds the effective config: file first, then flag overrides.
    /// `require_latent_dim` is false for commands that set P themselves.
    fn build(&self, require_latent_dim: bool) -> Result<FitConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)?;
                serde_json::from_str::<FitConfig>(&text)?
            }
            None => match (self.latent_dim, require_latent_dim) {
                (Some(p), _) => FitConfig::new(p),
                (None, false) => FitConfig::new(1),
                (None, true) => {
                    return Err(Error::Config(
                        "--latent-dim is required (or provide it via --config)".into(),
                    ))
                }
            },
        };
        if let Some(p) = self.latent_dim {
            cfg.latent_dim = p;
        }
        if let Some(r) = self.iw_samples {
            cfg.iw_samples = r;
        }
        if let Some(s) = self.mc_samples {
            cfg.mc_samples = s;
        }
        if let Some(m) = self.batch_size {
            cfg.batch_size = m;
        }
        if let Some(lr) = self.learning_rate {
            cfg.learning_rate = lr;
        }
        if let Some(tau) = self.anneal_iters {
            cfg.anneal_iters = tau;
        }
        if let Some(w) = self.window {
            cfg.window = w;
        }
        if let Some(p) = self.patience {
            cfg.patience = p;
        }
        if let Some(m) = self.max_iters {
            cfg.max_iters = m;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(mode) = &self.weight_mode {
            cfg.weight_mode = mode.parse()?;
        }
        if let Some(h) = self.hidden_size {
            cfg.hidden_size = Some(h);
        }
        if let Some(d) = self.scaling_d {
            cfg.scaling_d = d;
        }
        if let Some(k) = self.fit_starts {
            cfg.fit_starts = k;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl RotationFlags {
    fn build(&self, seed: u64) -> RotationConfig {
        RotationConfig {
            epsilon: self.geomin_epsilon,
            n_starts: self.starts,
            tol: self.rotation_tol,
            max_iter: self.rotation_max_iter,
            seed,
        }
    }
}

impl DataFlags {
    fn load(&self) -> Result<Dataset> {
        match &self.categories {
            None => Dataset::load_csv(&self.data, self.delimiter),
            Some(spec) => {
                let probe = Dataset::load_csv(&self.data, self.delimiter)?;
                let counts = parse_categories(spec, probe.n_items())?;
                Dataset::load_csv_with_counts(&self.data, self.delimiter, counts)
            }
        }
    }
}

fn parse_categories(spec: &str, n_items: usize) -> Result<Vec<usize>> {
    let parts: Vec<&str> = spec.split(',').map(str::trim).collect();
    let parsed: Result<Vec<usize>> = parts
        .iter()
        .map(|p| {
            p.parse::<usize>()
                .map_err(|_| Error::Config(format!("invalid category count {p:?}")))
        })
        .collect();
    let parsed = parsed?;
    if parsed.len() == 1 {
        Ok(vec![parsed[0]; n_items])
    } else {
        Ok(parsed)
    }
}

fn ensure_out_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, serde_json::to_string(value)?.as_bytes())
}

fn write_matrix_csv(path: &Path, m: &DMatrix<f64>, col_prefix: &str) -> Result<()> {
    let mut text = String::new();
    for q in 0..m.ncols() {
        if q > 0 {
            text.push(',');
        }
        let _ = write!(text, "{col_prefix}{}", q + 1);
    }
    text.push('\n');
    for j in 0..m.nrows() {
        for q in 0..m.ncols() {
            if q > 0 {
                text.push(',');
            }
            let _ = write!(text, "{}", m[(j, q)]);
        }
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}

fn stderr_progress(label: &'static str) -> impl FnMut(&ProgressEvent) {
    move |e: &ProgressEvent| {
        if e.annealing {
            eprintln!(
                "[{label}] iter {:>7}  window avg {:>12.4}  (annealing)",
                e.iteration, e.window_average
            );
        } else {
            eprintln!(
                "[{label}] iter {:>7}  window avg {:>12.4}  best {:>12.4}  stale {}",
                e.iteration, e.window_average, e.best_average, e.stale_checks
            );
        }
    }
}

pub fn cmd_fit(args: FitArgs) -> Result<()> {
    let total = Instant::now();
    ensure_out_dir(&args.out_dir)?;
    let mut manifest = RunManifest::new("fit");
    manifest.record_input(&args.data.data)?;

    let data = args.data.load()?;
    let cfg = args.fit.build(true)?;
    manifest.config = serde_json::to_value(&cfg)?;
    manifest.seeds.insert("root".into(), cfg.seed);

    let fit_start = Instant::now();
    let mut progress = stderr_progress("fit");
    let model = fit_with_progress(&data, &cfg, Some(&mut progress))?;
    manifest
        .timings_seconds
        .insert("fit".into(), fit_start.elapsed().as_secs_f64());
    eprintln!(
        "[fit] finished after {} iterations (converged: {})",
        model.iterations_run, model.converged
    );

    let model_path = args.out_dir.join("model.json");
    write_json(&model_path, &model)?;
    manifest.record_output(&model_path);

    let trace_path = args.out_dir.join("trace.csv");
    let mut text = String::from("iteration,iw_elbo\n");
    for (i, v) in model.trace.iter().enumerate() {
        let _ = writeln!(text, "{},{v}", i + 1);
    }
    write_atomic(&trace_path, text.as_bytes())?;
    manifest.record_output(&trace_path);

    if args.dump_log_weights {
        let weights_path = args.out_dir.join("log_weights.csv");
        dump_log_weights(&model, &data, &weights_path)?;
        manifest.record_output(&weights_path);
    }

    manifest
        .timings_seconds
        .insert("total".into(), total.elapsed().as_secs_f64());
    manifest.write(&args.out_dir)?;
    Ok(())
}

/// One deterministic full-data evaluation pass; rows are
/// (respondent, r, s, log_weight).
fn dump_log_weights(model: &FittedModel, data: &Dataset, path: &Path) -> Result<()> {
    use ifa_core::math::derive_seed;
    use ifa_core::objective::{iw_elbo, NoiseBlock};

    let cfg = &model.config;
    let (r, s) = (cfg.iw_samples, cfg.mc_samples);
    let mut text = String::from("respondent,r,s,log_weight\n");
    let chunk = 1024usize;
    let n = data.n_respondents();
    let mut start = 0;
    let mut chunk_idx = 0u64;
    while start < n {
        let end = (start + chunk).min(n);
        let indices: Vec<usize> = (start..end).collect();
        let noise = NoiseBlock::generate(
            derive_seed(cfg.seed, 0x4457_4754, chunk_idx),
            indices.len(),
            r,
            s,
            cfg.latent_dim,
        );
        let out = iw_elbo(
            &model.item_bank,
            &model.encoder,
            data,
            &indices,
            r,
            s,
            &noise,
            cfg.weight_mode,
            1.0,
        );
        for (pos, &i) in indices.iter().enumerate() {
            for rr in 0..r {
                for ss in 0..s {
                    let w = out.log_weights[(pos * r + rr) * s + ss];
                    let _ = writeln!(text, "{i},{rr},{ss},{w}");
                }
            }
        }
        start = end;
        chunk_idx += 1;
    }
    write_atomic(path, text.as_bytes())
}

#[derive(Serialize, Deserialize)]
struct SimulationTruth {
    seed: u64,
    n_respondents: usize,
    generating_params: GeneratingParams,
}

fn resolve_generator(
    template: Option<&str>,
    params: Option<&PathBuf>,
    j_items: usize,
    manifest: &mut RunManifest,
) -> Result<GeneratingParams> {
    match (template, params) {
        (Some(_), Some(_)) => Err(Error::Config(
            "--template and --params are mutually exclusive".into(),
        )),
        (Some("five-factor"), None) => Ok(ifa_core::templates::five_factor()),
        (Some("binary"), None) => Ok(ifa_core::templates::binary_ten_factor(j_items)),
        (Some(other), None) => Err(Error::Config(format!(
            "unknown template {other:?}; expected \"five-factor\" or \"binary\""
        ))),
        (None, Some(path)) => {
            manifest.record_input(path)?;
            let text = std::fs::read_to_string(path)?;
            let gp: GeneratingParams = serde_json::from_str(&text)?;
            gp.validate()?;
            Ok(gp)
        }
        (None, None) => Err(Error::Config(
            "one of --template or --params is required".into(),
        )),
    }
}

pub fn cmd_simulate(args: SimulateArgs) -> Result<()> {
    let total = Instant::now();
    ensure_out_dir(&args.out_dir)?;
    let mut manifest = RunManifest::new("simulate");
    let gp = resolve_generator(args.template.as_deref(), args.params.as_ref(), args.j_items, &mut manifest)?;
    manifest.seeds.insert("root".into(), args.seed);
    manifest.config = serde_json::json!({
        "n": args.n,
        "template": args.template,
        "with_scores": args.with_scores,
    });

    let sim = simulate_with_scores(&gp, args.n, args.seed)?;
    let data_path = args.out_dir.join("data.csv");
    // write through a temp name then rename, matching the atomic contract
    let tmp = args.out_dir.join("data.csv.partial");
    sim.data.write_csv(&tmp, args.delimiter)?;
    std::fs::rename(&tmp, &data_path)?;
    manifest.record_output(&data_path);

    let truth_path = args.out_dir.join("truth.json");
    write_json(
        &truth_path,
        &SimulationTruth {
            seed: args.seed,
            n_respondents: args.n,
            generating_params: gp.clone(),
        },
    )?;
    manifest.record_output(&truth_path);

    if args.with_scores {
        let p = gp.latent_dim();
        let scores = DMatrix::from_fn(args.n, p, |i, q| sim.scores[i * p + q]);
        let scores_path = args.out_dir.join("scores.csv");
        write_matrix_csv(&scores_path, &scores, "f")?;
        manifest.record_output(&scores_path);
    }

    manifest
        .timings_seconds
        .insert("total".into(), total.elapsed().as_secs_f64());
    manifest.write(&args.out_dir)?;
    Ok(())
}

pub fn cmd_scree(args: ScreeArgs) -> Result<()> {
    let total = Instant::now();
    ensure_out_dir(&args.out_dir)?;
    let mut manifest = RunManifest::new("scree");
    manifest.record_input(&args.data.data)?;

    let p_list: Vec<usize> = match (&args.p_list, args.p_min, args.p_max) {
        (Some(list), None, None) => {
            let parsed: Result<Vec<usize>> = list
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse::<usize>()
                        .map_err(|_| Error::Config(format!("invalid latent dimension {s:?}")))
                })
                .collect();
            parsed?
        }
        (None, Some(lo), Some(hi)) if lo <= hi => (lo..=hi).collect(),
        _ => {
            return Err(Error::Config(
                "provide either --p-list or both --p-min and --p-max (with p-min <= p-max)".into(),
            ))
        }
    };

    let data = args.data.load()?;
    let template = args.fit.build(false)?;
    manifest.config = serde_json::json!({
        "fit": serde_json::to_value(&template)?,
        "p_list": p_list,
        "holdout_fraction": args.holdout_fraction,
        "eval_samples": args.eval_samples,
    });
    manifest.seeds.insert("root".into(), template.seed);

    let scree_start = Instant::now();
    let points = scree_curve(&data, &p_list, &template, args.holdout_fraction, args.eval_samples)?;
    manifest
        .timings_seconds
        .insert("scree".into(), scree_start.elapsed().as_secs_f64());

    let mut text = String::from("p,neg_approx_loglik\n");
    for pt in &points {
        let _ = writeln!(text, "{},{}", pt.latent_dim, pt.neg_approx_loglik);
    }
    let scree_path = args.out_dir.join("scree.csv");
    write_atomic(&scree_path, text.as_bytes())?;
    manifest.record_output(&scree_path);

    if let Some(elbow) = annotate_elbow(&points) {
        eprintln!(
            "[scree] largest second difference at P = {elbow}; inspect the curve before choosing"
        );
    }

    manifest
        .timings_seconds
        .insert("total".into(), total.elapsed().as_secs_f64());
    manifest.write(&args.out_dir)?;
    Ok(())
}

pub fn cmd_score(args: ScoreArgs) -> Result<()> {
    let total = Instant::now();
    ensure_out_dir(&args.out_dir)?;
    let mut manifest = RunManifest::new("score");
    manifest.record_input(&args.model)?;
    manifest.record_input(&args.data.data)?;

    let model = FittedModel::load(&args.model)?;
    let data = args.data.load()?;
    let mut scores = map_scores(&model, &data)?;
    if let Some(rotation_path) = &args.rotation {
        manifest.record_input(rotation_path)?;
        let text = std::fs::read_to_string(rotation_path)?;
        let solution: RotationSolution = serde_json::from_str(&text)?;
        scores = rotate_scores(&scores, &solution);
    }
    manifest.config = serde_json::json!({
        "model": args.model.display().to_string(),
        "rotated": args.rotation.is_some(),
    });

    let scores_path = args.out_dir.join("scores.csv");
    write_matrix_csv(&scores_path, &scores, "f")?;
    manifest.record_output(&scores_path);
    manifest
        .timings_seconds
        .insert("total".into(), total.elapsed().as_secs_f64());
    manifest.write(&args.out_dir)?;
    Ok(())
}

pub fn cmd_rotate(args: RotateArgs) -> Result<()> {
    let total = Instant::now();
    ensure_out_dir(&args.out_dir)?;
    let mut manifest = RunManifest::new("rotate");
    manifest.record_input(&args.model)?;
    let model = FittedModel::load(&args.model)?;
    let cfg = args.rotation.build(args.seed);
    manifest.config = serde_json::to_value(&cfg)?;
    manifest.seeds.insert("root".into(), args.seed);

    let solution = geomin_rotate(model.item_bank.loadings(), &cfg)?;

    let rotation_path = args.out_dir.join("rotation.json");
    write_json(&rotation_path, &solution)?;
    manifest.record_output(&rotation_path);
    let loadings_path = args.out_dir.join("rotated_loadings.csv");
    write_matrix_csv(&loadings_path, &solution.rotated_loadings, "f")?;
    manifest.record_output(&loadings_path);
    let corr_path = args.out_dir.join("factor_corr.csv");
    write_matrix_csv(&corr_path, &solution.factor_corr, "f")?;
    manifest.record_output(&corr_path);

    manifest
        .timings_seconds
        .insert("total".into(), total.elapsed().as_secs_f64());
    manifest.write(&args.out_dir)?;
    Ok(())
}

#[derive(Serialize)]
struct ComparisonReport {
    congruence_per_factor: Vec<f64>,
    mean_congruence: f64,
    threshold: f64,
    equivalent: bool,
    permutation: Vec<usize>,
    signs: Vec<f64>,
    mse: f64,
}

pub fn cmd_compare(args: CompareArgs) -> Result<()> {
    let total = Instant::now();
    ensure_out_dir(&args.out_dir)?;
    let mut manifest = RunManifest::new("compare");
    manifest.record_input(&args.model_a)?;
    manifest.record_input(&args.model_b)?;

    let model_a = FittedModel::load(&args.model_a)?;
    let model_b = FittedModel::load(&args.model_b)?;
    let cfg = args.rotation.build(args.seed);
    manifest.config = serde_json::to_value(&cfg)?;
    manifest.seeds.insert("root".into(), args.seed);

    let sol_a = geomin_rotate(model_a.item_bank.loadings(), &cfg)?;
    let sol_b = geomin_rotate(model_b.item_bank.loadings(), &cfg)?;
    let mut reference = sol_a.rotated_loadings.clone();
    invert_negative_columns(&mut reference);
    let (record, aligned) = align(&reference, &sol_b.rotated_loadings)?;

    let report = ComparisonReport {
        congruence_per_factor: record.congruence.clone(),
        mean_congruence: record.mean_congruence,
        threshold: CONGRUENCE_EQUIVALENCE_THRESHOLD,
        equivalent: record.is_equivalent(),
        permutation: record.permutation.clone(),
        signs: record.signs.clone(),
        mse: record.mse,
    };
    eprintln!(
        "[compare] mean congruence {:.4} -> {}",
        report.mean_congruence,
        if report.equivalent { "equivalent" } else { "not equivalent" }
    );

    let report_path = args.out_dir.join("compare.json");
    write_json(&report_path, &report)?;
    manifest.record_output(&report_path);
    let aligned_path = args.out_dir.join("aligned_loadings.csv");
    write_matrix_csv(&aligned_path, &aligned, "f")?;
    manifest.record_output(&aligned_path);
    let reference_path = args.out_dir.join("reference_loadings.csv");
    write_matrix_csv(&reference_path, &reference, "f")?;
    manifest.record_output(&reference_path);

    manifest
        .timings_seconds
        .insert("total".into(), total.elapsed().as_secs_f64());
    manifest.write(&args.out_dir)?;
    Ok(())
}

pub fn cmd_replicate(args: ReplicateArgs) -> Result<()> {
    let total = Instant::now();
    ensure_out_dir(&args.out_dir)?;
    let mut manifest = RunManifest::new("replicate");
    let generator = resolve_generator(args.template.as_deref(), args.params.as_ref(), args.j_items, &mut manifest)?;

    let mut fit = args.fit.build(false)?;
    if args.fit.latent_dim.is_none() && args.fit.config.is_none() {
        fit.latent_dim = generator.latent_dim();
    }
    let rotation = args.rotation.build(fit.seed);
    let cfg = ReplicationConfig {
        generator,
        n_respondents: args.n,
        replications: args.replications,
        fit,
        rotation,
    };
    manifest.config = serde_json::to_value(&cfg)?;
    manifest.seeds.insert("root".into(), cfg.fit.seed);

    let parallel = args.jobs != Some(1);
    let run_start = Instant::now();
    let (report, timings) = replication_study(&cfg, parallel)?;
    manifest
        .timings_seconds
        .insert("replications".into(), run_start.elapsed().as_secs_f64());
    for (a, secs) in timings.iter().enumerate() {
        manifest
            .timings_seconds
            .insert(format!("replication_{a}"), *secs);
    }
    if !report.failures.is_empty() {
        eprintln!(
            "[replicate] warning: {} replication(s) failed and were excluded",
            report.failures.len()
        );
        for f in &report.failures {
            eprintln!("[replicate]   {f}");
        }
    }
    eprintln!(
        "[replicate] loadings RMSE {:.4}, intercepts RMSE {:.4}, factor corr RMSE {:.4}",
        report.metrics.loadings.rmse, report.metrics.intercepts.rmse, report.metrics.factor_corr.rmse
    );

    let report_path = args.out_dir.join("report.json");
    write_json(&report_path, &report)?;
    manifest.record_output(&report_path);

    manifest
        .timings_seconds
        .insert("total".into(), total.elapsed().as_secs_f64());
    manifest.write(&args.out_dir)?;
    Ok(())
}
