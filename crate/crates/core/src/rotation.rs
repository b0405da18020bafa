//! Geomin oblique rotation by gradient projection, plus the machinery for
//! comparing factor solutions: sign inversion, column permutation matching,
//! and Tucker congruence coefficients.
//!
//! Rotation searches over oblique transforms `T` with unit-length columns.
//! The rotated loadings are `L = A T^{-t}` (so `A = L T^t` reconstructs the
//! input) and the factor correlation matrix is `Phi = T^t T`. The Geomin
//! criterion
//!
//! ```text
//! Q(L) = sum_j ( prod_p (l_jp^2 + eps) )^(1/P)
//! ```
//!
//! is minimized over `T` with a projected-gradient line search; the best of
//! several random starts is returned.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_pcg::Pcg64;
use serde::{Deserialize, Serialize};

use crate::data::matrix_rows;
use crate::error::{Error, Result};
use crate::math::derive_seed;

const ROTATION_STREAM: u64 = 0x524f_5441; // "ROTA"

/// Tucker congruence above which two solutions are treated as equivalent.
pub const CONGRUENCE_EQUIVALENCE_THRESHOLD: f64 = 0.98;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RotationConfig {
    /// Geomin smoothing constant.
    pub epsilon: f64,
    pub n_starts: usize,
    /// Convergence tolerance on the projected gradient norm.
    pub tol: f64,
    pub max_iter: usize,
    pub seed: u64,
}

impl Default for RotationConfig {
    fn default() -> Self {
        RotationConfig {
            epsilon: 0.01,
            n_starts: 30,
            tol: 1e-5,
            max_iter: 500,
            seed: 0,
        }
    }
}

/// A rotated solution: `rotated_loadings * transform^t` reconstructs the
/// unrotated loadings, and `factor_corr = transform^t * transform`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RotationSolution {
    #[serde(with = "matrix_rows")]
    pub rotated_loadings: DMatrix<f64>,
    #[serde(with = "matrix_rows")]
    pub factor_corr: DMatrix<f64>,
    #[serde(with = "matrix_rows")]
    pub transform: DMatrix<f64>,
    pub criterion_value: f64,
    pub converged: bool,
    /// Which start won (0 is the identity start).
    pub start_index: usize,
    /// Criterion value after every accepted gradient-projection step.
    pub criterion_trace: Vec<f64>,
}

/// Criterion value and its gradient w.r.t. the rotated loadings.
pub fn geomin_criterion(l: &DMatrix<f64>, epsilon: f64) -> (f64, DMatrix<f64>) {
    let (j_items, p) = l.shape();
    let mut f = 0.0;
    let mut grad = DMatrix::zeros(j_items, p);
    for j in 0..j_items {
        let mut log_prod = 0.0;
        for q in 0..p {
            log_prod += (l[(j, q)] * l[(j, q)] + epsilon).ln();
        }
        let pro = (log_prod / p as f64).exp();
        f += pro;
        for q in 0..p {
            grad[(j, q)] = (2.0 / p as f64) * l[(j, q)] / (l[(j, q)] * l[(j, q)] + epsilon) * pro;
        }
    }
    (f, grad)
}

fn normalize_columns(x: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let mut t = x.clone();
    for mut col in t.column_iter_mut() {
        let norm = col.norm();
        if norm < 1e-12 {
            return None;
        }
        col /= norm;
    }
    Some(t)
}

struct GpRun {
    f: f64,
    t: DMatrix<f64>,
    l: DMatrix<f64>,
    converged: bool,
    trace: Vec<f64>,
}

/// One gradient-projection run from starting transform `t0` (unit columns).
fn gp_oblique(a: &DMatrix<f64>, t0: DMatrix<f64>, cfg: &RotationConfig) -> Option<GpRun> {
    let p = a.ncols();
    let mut t = t0;
    let mut t_inv = t.clone().try_inverse()?;
    let mut l = a * t_inv.transpose();
    let (mut f, mut gq) = geomin_criterion(&l, cfg.epsilon);
    let mut grad = -(l.transpose() * &gq * &t_inv).transpose();
    let mut trace = vec![f];
    let mut al = 1.0;

    for _ in 0..cfg.max_iter {
        // project the gradient onto the oblique manifold's tangent space
        let mut gp = grad.clone();
        for q in 0..p {
            let d: f64 = t.column(q).dot(&grad.column(q));
            let tc = t.column(q).clone_owned();
            let mut col = gp.column_mut(q);
            col.axpy(-d, &tc, 1.0);
        }
        let s = gp.norm();
        if s < cfg.tol {
            return Some(GpRun {
                f,
                t,
                l,
                converged: true,
                trace,
            });
        }
        al *= 2.0;
        let mut accepted = false;
        for _ in 0..30 {
            let x = &t - al * &gp;
            let Some(tt) = normalize_columns(&x) else {
                al *= 0.5;
                continue;
            };
            let Some(tt_inv) = tt.clone().try_inverse() else {
                al *= 0.5;
                continue;
            };
            let lt = a * tt_inv.transpose();
            let (ft, gqt) = geomin_criterion(&lt, cfg.epsilon);
            if f - ft > 0.5 * s * s * al {
                t = tt;
                t_inv = tt_inv;
                l = lt;
                f = ft;
                gq = gqt;
                grad = -(l.transpose() * &gq * &t_inv).transpose();
                trace.push(f);
                accepted = true;
                break;
            }
            al *= 0.5;
        }
        if !accepted {
            // no step improves the criterion at machine precision
            return Some(GpRun {
                f,
                t,
                l,
                converged: false,
                trace,
            });
        }
    }
    Some(GpRun {
        f,
        t,
        l,
        converged: false,
        trace,
    })
}

/// Geomin oblique rotation, best of `cfg.n_starts` starts (identity first).
///
/// With a single factor there is nothing to rotate: the identity solution
/// is returned directly.
pub fn geomin_rotate(loadings: &DMatrix<f64>, cfg: &RotationConfig) -> Result<RotationSolution> {
    let (j_items, p) = loadings.shape();
    if p == 0 || j_items == 0 {
        return Err(Error::Shape("empty loadings matrix".into()));
    }
    if p == 1 {
        let (f, _) = geomin_criterion(loadings, cfg.epsilon);
        return Ok(RotationSolution {
            rotated_loadings: loadings.clone(),
            factor_corr: DMatrix::identity(1, 1),
            transform: DMatrix::identity(1, 1),
            criterion_value: f,
            converged: true,
            start_index: 0,
            criterion_trace: vec![f],
        });
    }
    if j_items <= p {
        return Err(Error::Shape(format!(
            "rotation needs more items than factors (J = {j_items}, P = {p})"
        )));
    }

    let n_starts = cfg.n_starts.max(1);
    let mut best: Option<(usize, GpRun)> = None;
    for start in 0..n_starts {
        let t0 = if start == 0 {
            DMatrix::identity(p, p)
        } else {
            let mut rng = Pcg64::seed_from_u64(derive_seed(cfg.seed, ROTATION_STREAM, start as u64));
            let raw = DMatrix::from_fn(p, p, |_, _| {
                rng.sample::<f64, _>(rand_distr::StandardNormal)
            });
            match normalize_columns(&raw) {
                Some(t) => t,
                None => continue,
            }
        };
        let Some(run) = gp_oblique(loadings, t0, cfg) else {
            continue;
        };
        let better = match &best {
            None => true,
            Some((_, b)) => {
                (run.converged && !b.converged) || (run.converged == b.converged && run.f < b.f)
            }
        };
        if better {
            best = Some((start, run));
        }
    }
    let (start_index, run) =
        best.ok_or_else(|| Error::Numerical("every rotation start was degenerate".into()))?;
    let solution = RotationSolution {
        factor_corr: run.t.transpose() * &run.t,
        rotated_loadings: run.l,
        transform: run.t,
        criterion_value: run.f,
        converged: run.converged,
        start_index,
        criterion_trace: run.trace,
    };
    if !solution.converged {
        return Err(Error::RotationNonConvergence {
            criterion: solution.criterion_value,
            best: Box::new(solution),
        });
    }
    Ok(solution)
}

/// How a comparison matrix was mapped onto a reference: per-column signs
/// (by the negative-column-sum rule), the column permutation minimizing the
/// element-wise MSE, and the resulting congruence per factor.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlignmentRecord {
    /// `permutation[p]` is the comparison column placed at position `p`.
    pub permutation: Vec<usize>,
    /// Sign applied to each comparison column (indexed pre-permutation).
    pub signs: Vec<f64>,
    pub mse: f64,
    pub congruence: Vec<f64>,
    pub mean_congruence: f64,
}

impl AlignmentRecord {
    pub fn is_equivalent(&self) -> bool {
        self.mean_congruence > CONGRUENCE_EQUIVALENCE_THRESHOLD
    }
}

/// Tucker's congruence coefficient between two loading columns.
pub fn tucker_congruence(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape("congruence inputs differ in length".into()));
    }
    let (mut num, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        num += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Validation(
            "congruence is undefined for a zero vector".into(),
        ));
    }
    Ok(num / (na * nb).sqrt())
}

/// Flips every column whose loading sum is negative, in place; returns the
/// signs applied.
pub fn invert_negative_columns(m: &mut DMatrix<f64>) -> Vec<f64> {
    let mut signs = vec![1.0; m.ncols()];
    for (q, mut col) in m.column_iter_mut().enumerate() {
        if col.sum() < 0.0 {
            signs[q] = -1.0;
            col.neg_mut();
        }
    }
    signs
}

fn for_each_permutation(n: usize, mut visit: impl FnMut(&[usize])) {
    // Heap's algorithm
    let mut perm: Vec<usize> = (0..n).collect();
    let mut c = vec![0usize; n];
    visit(&perm);
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            visit(&perm);
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
}

/// Aligns `comparison` to `reference`: flips comparison columns with
/// negative sums, then picks the column permutation minimizing the
/// element-wise MSE. Returns the record and the aligned matrix.
pub fn align(reference: &DMatrix<f64>, comparison: &DMatrix<f64>) -> Result<(AlignmentRecord, DMatrix<f64>)> {
    if reference.shape() != comparison.shape() {
        return Err(Error::Shape(format!(
            "cannot align {:?} against {:?}",
            comparison.shape(),
            reference.shape()
        )));
    }
    let (j_items, p) = reference.shape();
    if p > 10 {
        return Err(Error::Config(
            "exhaustive permutation alignment supports at most 10 factors".into(),
        ));
    }
    let mut signed = comparison.clone();
    let signs = invert_negative_columns(&mut signed);

    // cost[target][source] = column MSE after signing
    let mut cost = vec![vec![0.0; p]; p];
    for t in 0..p {
        for s in 0..p {
            let mut acc = 0.0;
            for j in 0..j_items {
                let d = reference[(j, t)] - signed[(j, s)];
                acc += d * d;
            }
            cost[t][s] = acc / j_items as f64;
        }
    }
    let mut best_perm: Vec<usize> = (0..p).collect();
    let mut best_cost = f64::INFINITY;
    for_each_permutation(p, |perm| {
        let c: f64 = (0..p).map(|t| cost[t][perm[t]]).sum();
        if c < best_cost {
            best_cost = c;
            best_perm = perm.to_vec();
        }
    });

    let aligned = DMatrix::from_fn(j_items, p, |j, t| signed[(j, best_perm[t])]);
    let mut congruence = Vec::with_capacity(p);
    for t in 0..p {
        let a: Vec<f64> = (0..j_items).map(|j| reference[(j, t)]).collect();
        let b: Vec<f64> = (0..j_items).map(|j| aligned[(j, t)]).collect();
        congruence.push(tucker_congruence(&a, &b)?);
    }
    let mean_congruence = congruence.iter().sum::<f64>() / p as f64;
    Ok((
        AlignmentRecord {
            permutation: best_perm,
            signs,
            mse: best_cost / p as f64,
            congruence,
            mean_congruence,
        },
        aligned,
    ))
}

/// Applies an alignment's signs and permutation to both rows and columns of
/// a factor correlation matrix.
pub fn align_correlations(phi: &DMatrix<f64>, record: &AlignmentRecord) -> DMatrix<f64> {
    let p = phi.nrows();
    DMatrix::from_fn(p, p, |a, b| {
        let (sa, sb) = (record.permutation[a], record.permutation[b]);
        record.signs[sa] * record.signs[sb] * phi[(sa, sb)]
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn simple_structure(j_per_factor: usize, p: usize) -> DMatrix<f64> {
        let magnitudes = [0.8, 1.1, 0.7, 1.3, 0.9, 1.0, 0.6, 1.2, 0.85, 1.05];
        DMatrix::from_fn(j_per_factor * p, p, |j, q| {
            if j / j_per_factor == q {
                magnitudes[j % magnitudes.len()]
            } else {
                0.0
            }
        })
    }

    #[test]
    fn single_factor_is_identity_rotation() {
        let a = DMatrix::from_row_slice(4, 1, &[0.5, 0.7, 0.9, 0.4]);
        let sol = geomin_rotate(&a, &RotationConfig::default()).unwrap();
        assert_eq!(sol.factor_corr, DMatrix::identity(1, 1));
        assert_eq!(sol.rotated_loadings, a);
    }

    #[test]
    fn perfect_simple_structure_is_near_stationary_and_preserved() {
        let a = simple_structure(5, 2);
        // projected criterion gradient at the identity transform is ~ 0
        let (_, gq) = geomin_criterion(&a, 0.01);
        let grad = -(a.transpose() * &gq).transpose();
        let mut gp = grad.clone();
        let t = DMatrix::<f64>::identity(2, 2);
        for q in 0..2 {
            let d: f64 = t.column(q).dot(&grad.column(q));
            let tc = t.column(q).clone_owned();
            let mut col = gp.column_mut(q);
            col.axpy(-d, &tc, 1.0);
        }
        assert!(gp.norm() < 1e-8, "projected gradient {}", gp.norm());

        let cfg = RotationConfig {
            seed: 3,
            ..RotationConfig::default()
        };
        let sol = geomin_rotate(&a, &cfg).unwrap();
        let (_, aligned) = align(&a, &sol.rotated_loadings).unwrap();
        let (rec, _) = align(&a, &aligned).unwrap();
        assert!(rec.mean_congruence >= 0.999, "congruence {}", rec.mean_congruence);
    }

    #[test]
    fn rotation_reconstructs_input_through_transform() {
        let a = simple_structure(6, 3) + DMatrix::from_fn(18, 3, |j, q| 0.05 * ((j * 3 + q) as f64).sin());
        let cfg = RotationConfig {
            n_starts: 10,
            seed: 5,
            ..RotationConfig::default()
        };
        let sol = geomin_rotate(&a, &cfg).unwrap();
        let back = &sol.rotated_loadings * sol.transform.transpose();
        assert!((back - &a).amax() < 1e-8);
        // factor correlation is symmetric with unit diagonal
        for q in 0..3 {
            assert!((sol.factor_corr[(q, q)] - 1.0).abs() < 1e-10);
            for r in 0..3 {
                assert!((sol.factor_corr[(q, r)] - sol.factor_corr[(r, q)]).abs() < 1e-12);
            }
        }
        // the criterion trace never increases
        for w in sol.criterion_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-12);
        }
        // best of the starts
        assert!(sol.criterion_value <= sol.criterion_trace[0]);
    }

    #[test]
    fn align_recovers_swap_and_sign() {
        let a = simple_structure(4, 3);
        // comparison: swap columns 0 and 2, negate column 1
        let mut comp = DMatrix::zeros(12, 3);
        comp.set_column(0, &a.column(2));
        comp.set_column(1, &(-a.column(1)));
        comp.set_column(2, &a.column(0));
        let (rec, aligned) = align(&a, &comp).unwrap();
        assert_eq!(rec.permutation, vec![2, 1, 0]);
        assert_eq!(rec.signs, vec![1.0, -1.0, 1.0]);
        assert!(rec.mse < 1e-24);
        assert!((aligned - &a).amax() < 1e-12);
        assert!(rec.congruence.iter().all(|&c| (c - 1.0).abs() < 1e-12));
    }

    #[test]
    fn align_identity_and_idempotence() {
        let a = simple_structure(4, 3);
        let (rec, aligned) = align(&a, &a).unwrap();
        assert_eq!(rec.permutation, vec![0, 1, 2]);
        assert_eq!(rec.signs, vec![1.0; 3]);
        assert_eq!(rec.mse, 0.0);
        let (rec2, _) = align(&a, &aligned).unwrap();
        assert_eq!(rec2.permutation, vec![0, 1, 2]);
        assert_eq!(rec2.signs, vec![1.0; 3]);
    }

    #[test]
    fn align_under_small_noise() {
        let a = simple_structure(5, 4);
        let mut rng = Pcg64::seed_from_u64(17);
        let noisy = DMatrix::from_fn(20, 4, |j, q| {
            a[(j, q)] + 0.01 * rng.sample::<f64, _>(rand_distr::StandardNormal)
        });
        let (rec, _) = align(&a, &noisy).unwrap();
        assert_eq!(rec.permutation, vec![0, 1, 2, 3]);
        assert!(rec.mse < 5e-4, "mse {}", rec.mse);
        assert!(rec.mean_congruence > 0.99);
    }

    #[test]
    fn tucker_congruence_limits() {
        let a = vec![0.4, -0.2, 0.9];
        let b: Vec<f64> = a.iter().map(|v| -v).collect();
        assert!((tucker_congruence(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        assert!((tucker_congruence(&a, &b).unwrap() + 1.0).abs() < 1e-15);
        assert!(tucker_congruence(&[0.0, 0.0], &[1.0, 2.0]).is_err());
        // scale invariance
        let c: Vec<f64> = a.iter().map(|v| 3.0 * v).collect();
        assert!((tucker_congruence(&a, &c).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn align_correlations_applies_signs_and_permutation_symmetrically() {
        let phi = DMatrix::from_row_slice(3, 3, &[1.0, 0.3, 0.1, 0.3, 1.0, -0.2, 0.1, -0.2, 1.0]);
        let identity = AlignmentRecord {
            permutation: vec![0, 1, 2],
            signs: vec![1.0; 3],
            mse: 0.0,
            congruence: vec![1.0; 3],
            mean_congruence: 1.0,
        };
        assert_eq!(align_correlations(&phi, &identity), phi);

        let swapped = AlignmentRecord {
            permutation: vec![1, 0, 2],
            signs: vec![1.0; 3],
            ..identity.clone()
        };
        let out = align_correlations(&phi, &swapped);
        assert_eq!(out[(0, 1)], phi[(1, 0)]);
        assert_eq!(out[(0, 2)], phi[(1, 2)]);
        assert_eq!(out[(1, 2)], phi[(0, 2)]);

        let flipped = AlignmentRecord {
            permutation: vec![0, 1, 2],
            signs: vec![1.0, -1.0, 1.0],
            ..identity
        };
        let out = align_correlations(&phi, &flipped);
        assert_eq!(out[(1, 1)], 1.0);
        assert_eq!(out[(0, 1)], -phi[(0, 1)]);
        assert_eq!(out[(1, 2)], -phi[(1, 2)]);
        // symmetry and unit diagonal survive
        for a in 0..3 {
            assert_eq!(out[(a, a)], 1.0);
            for b in 0..3 {
                assert_eq!(out[(a, b)], out[(b, a)]);
            }
        }
    }

    use rand::SeedableRng;
    use rand_pcg::Pcg64;

    #[test]
    fn random_loadings_rotation_is_internally_consistent() {
        let mut rng = Pcg64::seed_from_u64(23);
        let a = simple_structure(10, 5)
            + DMatrix::from_fn(50, 5, |_, _| 0.1 * rng.sample::<f64, _>(rand_distr::StandardNormal));
        let cfg = RotationConfig {
            n_starts: 8,
            seed: 11,
            ..RotationConfig::default()
        };
        let sol = geomin_rotate(&a, &cfg).unwrap();
        assert!(sol.converged);
        let back = &sol.rotated_loadings * sol.transform.transpose();
        assert!((back - &a).amax() < 1e-8);
        // criterion is the smallest among a rerun of the same starts
        let rerun = geomin_rotate(&a, &cfg).unwrap();
        assert_eq!(rerun.criterion_value, sol.criterion_value);
        assert_eq!(rerun.start_index, sol.start_index);
    }
}
