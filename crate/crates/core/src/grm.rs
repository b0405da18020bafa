//! Graded response model: boundary/category probabilities and the
//! conditional log-likelihood of a response pattern given factor scores.
//!
//! Item `j` with `C_j` categories has loadings `beta_j` (length P) and
//! strictly decreasing intercepts `alpha_{j,1} > ... > alpha_{j,C_j-1}`.
//! The boundary probabilities are
//! `Pr(y >= k | x) = sigmoid(D * (alpha_{j,k} + beta_j' x))`, with
//! `Pr(y >= 0) = 1` and `Pr(y >= C_j) = 0`; category probabilities are
//! consecutive boundary differences, strictly positive because the
//! intercepts are ordered.
//!
//! Ordering is enforced by an unconstrained reparameterization: the first
//! intercept is free and each later one subtracts the exponential of a free
//! increment, so every raw vector maps to a valid ordered vector.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_pcg::Pcg64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{derive_seed, log_sigmoid_deriv, log_sigmoid_diff, logit, sigmoid, softplus};

const LOADING_STREAM: u64 = 0x4c4f_4144; // "LOAD"

/// Item parameters for all J items.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ItemBankFile", into = "ItemBankFile")]
pub struct ItemBank {
    loadings: DMatrix<f64>,
    raw_intercepts: Vec<Vec<f64>>,
    constrained: Vec<Vec<f64>>,
    scaling_d: f64,
    category_counts: Vec<usize>,
}

/// On-disk form: ordered intercepts and row-major loadings.
#[derive(Serialize, Deserialize)]
struct ItemBankFile {
    loadings: Vec<Vec<f64>>,
    intercepts: Vec<Vec<f64>>,
    scaling_d: f64,
    category_counts: Vec<usize>,
}

impl From<ItemBank> for ItemBankFile {
    fn from(b: ItemBank) -> Self {
        ItemBankFile {
            loadings: (0..b.loadings.nrows())
                .map(|j| (0..b.loadings.ncols()).map(|p| b.loadings[(j, p)]).collect())
                .collect(),
            intercepts: b.constrained,
            scaling_d: b.scaling_d,
            category_counts: b.category_counts,
        }
    }
}

impl TryFrom<ItemBankFile> for ItemBank {
    type Error = Error;

    fn try_from(f: ItemBankFile) -> Result<Self> {
        let j = f.loadings.len();
        let p = f.loadings.first().map_or(0, Vec::len);
        if f.loadings.iter().any(|r| r.len() != p) {
            return Err(Error::Shape("ragged loadings matrix".into()));
        }
        let loadings = DMatrix::from_fn(j, p, |r, c| f.loadings[r][c]);
        ItemBank::from_constrained(loadings, f.intercepts, f.scaling_d)
    }
}

impl ItemBank {
    /// Builds a bank from raw (unconstrained) intercept parameters.
    pub fn new(loadings: DMatrix<f64>, raw_intercepts: Vec<Vec<f64>>, scaling_d: f64) -> Result<Self> {
        if raw_intercepts.len() != loadings.nrows() {
            return Err(Error::Shape(format!(
                "{} intercept vectors for {} items",
                raw_intercepts.len(),
                loadings.nrows()
            )));
        }
        if scaling_d <= 0.0 {
            return Err(Error::Validation("scaling constant must be positive".into()));
        }
        if raw_intercepts.iter().any(Vec::is_empty) {
            return Err(Error::Validation("every item needs at least one intercept".into()));
        }
        let category_counts = raw_intercepts.iter().map(|r| r.len() + 1).collect();
        let constrained = raw_intercepts.iter().map(|r| constrain_intercepts(r)).collect();
        Ok(ItemBank {
            loadings,
            raw_intercepts,
            constrained,
            scaling_d,
            category_counts,
        })
    }

    /// Builds a bank from ordered intercepts, inverting the transform.
    pub fn from_constrained(loadings: DMatrix<f64>, intercepts: Vec<Vec<f64>>, scaling_d: f64) -> Result<Self> {
        let raw: Result<Vec<Vec<f64>>> = intercepts.iter().map(|a| unconstrain_intercepts(a)).collect();
        Self::new(loadings, raw?, scaling_d)
    }

    pub fn n_items(&self) -> usize {
        self.loadings.nrows()
    }

    pub fn latent_dim(&self) -> usize {
        self.loadings.ncols()
    }

    pub fn category_counts(&self) -> &[usize] {
        &self.category_counts
    }

    pub fn scaling_d(&self) -> f64 {
        self.scaling_d
    }

    pub fn loadings(&self) -> &DMatrix<f64> {
        &self.loadings
    }

    pub fn loadings_mut(&mut self) -> &mut DMatrix<f64> {
        &mut self.loadings
    }

    /// Ordered intercepts of item `j`.
    pub fn intercepts(&self, j: usize) -> &[f64] {
        &self.constrained[j]
    }

    pub fn raw_intercepts(&self) -> &[Vec<f64>] {
        &self.raw_intercepts
    }

    pub fn raw_intercepts_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.raw_intercepts
    }

    /// Recomputes the ordered-intercept cache after raw parameters changed.
    pub fn refresh(&mut self) {
        for (cache, raw) in self.constrained.iter_mut().zip(&self.raw_intercepts) {
            constrain_into(raw, cache);
        }
    }

    /// Linear predictor `beta_j . x`.
    #[inline]
    pub fn linear_predictor(&self, j: usize, x: &[f64]) -> f64 {
        let mut t = 0.0;
        for p in 0..self.loadings.ncols() {
            t += self.loadings[(j, p)] * x[p];
        }
        t
    }
}

/// Maps a raw vector to strictly decreasing intercepts: the first entry is
/// free and entry k subtracts `exp(raw[k])` from its predecessor.
pub fn constrain_intercepts(raw: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; raw.len()];
    constrain_into(raw, &mut out);
    out
}

fn constrain_into(raw: &[f64], out: &mut [f64]) {
    out[0] = raw[0];
    for k in 1..raw.len() {
        out[k] = out[k - 1] - raw[k].exp();
    }
}

/// Inverse of [`constrain_intercepts`]; errors unless strictly decreasing.
pub fn unconstrain_intercepts(ordered: &[f64]) -> Result<Vec<f64>> {
    if ordered.is_empty() {
        return Err(Error::Validation("empty intercept vector".into()));
    }
    let mut raw = Vec::with_capacity(ordered.len());
    raw.push(ordered[0]);
    for k in 1..ordered.len() {
        let gap = ordered[k - 1] - ordered[k];
        if !(gap > 0.0) {
            return Err(Error::Validation(
                "intercepts must be strictly decreasing".into(),
            ));
        }
        raw.push(gap.ln());
    }
    Ok(raw)
}

/// Chain rule through the intercept transform: converts a gradient w.r.t.
/// the ordered intercepts into one w.r.t. the raw parameters.
pub fn chain_raw_intercepts(raw: &[f64], d_constrained: &[f64], d_raw: &mut [f64]) {
    // d alpha_k / d base = 1; d alpha_k / d raw_m = -exp(raw_m) for k >= m
    let k = raw.len();
    let mut suffix = 0.0;
    for m in (1..k).rev() {
        suffix += d_constrained[m];
        d_raw[m] += -raw[m].exp() * suffix;
    }
    d_raw[0] += suffix + d_constrained[0];
}

/// Boundary response probabilities for one item: entry 0 is 1, entry `C_j`
/// is 0, and interior entry k is `sigmoid(D * (alpha_k + t))` with
/// `t = beta_j . x`.
pub fn boundary_probs(bank: &ItemBank, j: usize, x: &[f64]) -> Vec<f64> {
    let t = bank.linear_predictor(j, x);
    boundary_probs_from(bank.intercepts(j), bank.scaling_d(), t)
}

pub fn boundary_probs_from(alpha: &[f64], d: f64, t: f64) -> Vec<f64> {
    let c = alpha.len() + 1;
    let mut out = Vec::with_capacity(c + 1);
    out.push(1.0);
    for &a in alpha {
        out.push(sigmoid(d * (a + t)));
    }
    out.push(0.0);
    out
}

/// Category probabilities (consecutive boundary differences), a `C_j`-simplex.
pub fn category_probs(bank: &ItemBank, j: usize, x: &[f64]) -> Vec<f64> {
    let t = bank.linear_predictor(j, x);
    category_probs_from(bank.intercepts(j), bank.scaling_d(), t)
}

pub fn category_probs_from(alpha: &[f64], d: f64, t: f64) -> Vec<f64> {
    let b = boundary_probs_from(alpha, d, t);
    (0..alpha.len() + 1).map(|k| b[k] - b[k + 1]).collect()
}

/// Log probability of response `y` on one item, computed in log space.
#[inline]
pub fn item_log_prob(alpha: &[f64], d: f64, t: f64, y: usize) -> f64 {
    let c = alpha.len() + 1;
    if y == 0 {
        // 1 - sigmoid(l_1) = sigmoid(-l_1)
        -softplus(d * (alpha[0] + t))
    } else if y == c - 1 {
        -softplus(-d * (alpha[c - 2] + t))
    } else {
        let a = d * (alpha[y - 1] + t);
        let b = d * (alpha[y] + t);
        log_sigmoid_diff(a, b)
    }
}

/// Log probability plus its partials w.r.t. the linear predictor and the
/// (at most two) ordered intercepts that bound category `y`.
pub(crate) struct ItemBackward {
    pub log_prob: f64,
    /// d log pi / d t
    pub dt: f64,
    /// (ordered-intercept index, d log pi / d alpha_idx)
    pub dalpha: [(usize, f64); 2],
    pub n_dalpha: usize,
}

#[inline]
pub(crate) fn item_log_prob_backward(alpha: &[f64], d: f64, t: f64, y: usize) -> ItemBackward {
    let c = alpha.len() + 1;
    if y == 0 {
        let l = d * (alpha[0] + t);
        let g = -d * sigmoid(l);
        ItemBackward {
            log_prob: -softplus(l),
            dt: g,
            dalpha: [(0, g), (0, 0.0)],
            n_dalpha: 1,
        }
    } else if y == c - 1 {
        let l = d * (alpha[c - 2] + t);
        let g = d * sigmoid(-l);
        ItemBackward {
            log_prob: -softplus(-l),
            dt: g,
            dalpha: [(c - 2, g), (0, 0.0)],
            n_dalpha: 1,
        }
    } else {
        let a = d * (alpha[y - 1] + t);
        let b = d * (alpha[y] + t);
        let log_pi = log_sigmoid_diff(a, b);
        // d log pi / d a = sigmoid'(a) / pi, kept in log space until the end
        let ra = (log_sigmoid_deriv(a) - log_pi).exp();
        let rb = (log_sigmoid_deriv(b) - log_pi).exp();
        ItemBackward {
            log_prob: log_pi,
            dt: d * (ra - rb),
            dalpha: [(y - 1, d * ra), (y, -d * rb)],
            n_dalpha: 2,
        }
    }
}

/// Conditional log-likelihood of a full response pattern given scores `x`.
pub fn cond_log_lik(bank: &ItemBank, x: &[f64], y: &[u8]) -> f64 {
    let d = bank.scaling_d();
    let mut ll = 0.0;
    for j in 0..bank.n_items() {
        let t = bank.linear_predictor(j, x);
        ll += item_log_prob(bank.intercepts(j), d, t, y[j] as usize);
    }
    ll
}

/// Starting values: Xavier-uniform loadings with bound `sqrt(6 / (J + P))`
/// and intercepts placed at logistic quantiles so that
/// `Pr(y >= k | x = 0) = 1 - k / C_j`.
pub fn init_item_bank(
    j_items: usize,
    p: usize,
    category_counts: &[usize],
    scaling_d: f64,
    seed: u64,
) -> Result<ItemBank> {
    if j_items == 0 || p == 0 {
        return Err(Error::Config("J and P must be at least 1".into()));
    }
    if category_counts.len() != j_items {
        return Err(Error::Shape("category_counts length must equal J".into()));
    }
    let bound = (6.0 / (j_items + p) as f64).sqrt();
    let mut rng = Pcg64::seed_from_u64(derive_seed(seed, LOADING_STREAM, 0));
    let mut loadings = DMatrix::zeros(j_items, p);
    for j in 0..j_items {
        for q in 0..p {
            loadings[(j, q)] = rng.gen_range(-bound..bound);
        }
    }
    let mut intercepts = Vec::with_capacity(j_items);
    for &c in category_counts {
        if c < 2 {
            return Err(Error::Validation("every item needs at least 2 categories".into()));
        }
        let alpha: Vec<f64> = (1..c)
            .map(|k| logit(1.0 - k as f64 / c as f64) / scaling_d)
            .collect();
        intercepts.push(alpha);
    }
    ItemBank::from_constrained(loadings, intercepts, scaling_d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn single_intercept_passes_through() {
        assert_eq!(constrain_intercepts(&[0.0]), vec![0.0]);
        assert_eq!(constrain_intercepts(&[1.7]), vec![1.7]);
    }

    #[test]
    fn constrain_hand_value() {
        // (1.0, 0.0) -> (1.0, 1.0 - e^0) = (1.0, 0.0)
        let a = constrain_intercepts(&[1.0, 0.0]);
        assert!((a[0] - 1.0).abs() < 1e-15);
        assert!(a[1].abs() < 1e-15);
    }

    #[test]
    fn constrained_output_strictly_decreasing_for_random_raw() {
        let mut rng = Pcg64::seed_from_u64(1);
        for _ in 0..200 {
            let len = rng.gen_range(1..6);
            let raw: Vec<f64> = (0..len).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let a = constrain_intercepts(&raw);
            for k in 1..a.len() {
                assert!(a[k] < a[k - 1]);
            }
        }
    }

    #[test]
    fn constrain_unconstrain_round_trip() {
        let mut rng = Pcg64::seed_from_u64(2);
        for _ in 0..200 {
            let len = rng.gen_range(1..6);
            let raw: Vec<f64> = (0..len).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let back = unconstrain_intercepts(&constrain_intercepts(&raw)).unwrap();
            for (r, b) in raw.iter().zip(&back) {
                assert!((r - b).abs() < 1e-12);
            }
        }
        assert!(unconstrain_intercepts(&[0.0, 0.0]).is_err());
        assert!(unconstrain_intercepts(&[-1.0, 0.5]).is_err());
    }

    fn toy_bank() -> ItemBank {
        let loadings = DMatrix::from_row_slice(2, 2, &[0.8, -0.2, 0.0, 1.1]);
        ItemBank::from_constrained(loadings, vec![vec![1.0, 0.0, -1.0], vec![0.5]], 1.702).unwrap()
    }

    #[test]
    fn boundary_probs_hand_values() {
        let bank = ItemBank::from_constrained(
            DMatrix::from_row_slice(1, 1, &[0.0]),
            vec![vec![1.0]],
            1.702,
        )
        .unwrap();
        let b = boundary_probs(&bank, 0, &[0.0]);
        assert_eq!(b[0], 1.0);
        assert_eq!(b[2], 0.0);
        // 1 / (1 + exp(-1.702))
        assert!((b[1] - 0.8457957659328212).abs() < 1e-12);
    }

    #[test]
    fn boundary_probs_zero_parameters_give_half() {
        let bank = ItemBank::from_constrained(
            DMatrix::zeros(1, 1),
            vec![vec![0.0]],
            1.702,
        )
        .unwrap();
        let b = boundary_probs(&bank, 0, &[0.0]);
        assert!((b[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn boundary_probs_non_increasing_and_category_probs_simplex() {
        let bank = toy_bank();
        let mut rng = Pcg64::seed_from_u64(3);
        for _ in 0..100 {
            let x = [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)];
            for j in 0..bank.n_items() {
                let b = boundary_probs(&bank, j, &x);
                for k in 1..b.len() {
                    assert!(b[k] <= b[k - 1]);
                }
                let pi = category_probs(&bank, j, &x);
                assert!(pi.iter().all(|&p| p > 0.0));
                let s: f64 = pi.iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn two_categories_reduce_to_m2pl() {
        // C_j = 2: category probabilities are (1 - p, p) with
        // p = sigmoid(D (alpha + beta' x))
        let bank = ItemBank::from_constrained(
            DMatrix::from_row_slice(1, 2, &[0.9, -0.4]),
            vec![vec![0.3]],
            1.702,
        )
        .unwrap();
        let x = [0.7, -1.2];
        let t = bank.linear_predictor(0, &x);
        let p = sigmoid(1.702 * (0.3 + t));
        let pi = category_probs(&bank, 0, &x);
        assert!((pi[0] - (1.0 - p)).abs() < 1e-12);
        assert!((pi[1] - p).abs() < 1e-12);

        // and with D = 1 this is the plain 2PL likelihood
        let bank1 = ItemBank::from_constrained(
            DMatrix::from_row_slice(1, 2, &[0.9, -0.4]),
            vec![vec![0.3]],
            1.0,
        )
        .unwrap();
        let p1 = sigmoid(0.3 + t);
        assert!((cond_log_lik(&bank1, &x, &[1]) - p1.ln()).abs() < 1e-12);
        assert!((cond_log_lik(&bank1, &x, &[0]) - (1.0 - p1).ln()).abs() < 1e-12);
    }

    #[test]
    fn cond_log_lik_equals_sum_of_category_log_probs() {
        let bank = toy_bank();
        let x = [0.4, -0.9];
        let y = [2u8, 1u8];
        let direct: f64 = (0..2)
            .map(|j| category_probs(&bank, j, &x)[y[j] as usize].ln())
            .sum();
        assert!((cond_log_lik(&bank, &x, &y) - direct).abs() < 1e-12);
    }

    #[test]
    fn cond_log_lik_single_binary_item_is_log_half() {
        let bank = ItemBank::from_constrained(
            DMatrix::zeros(1, 1),
            vec![vec![0.0]],
            1.702,
        )
        .unwrap();
        for y in [0u8, 1u8] {
            assert!((cond_log_lik(&bank, &[0.0], &[y]) - 0.5f64.ln()).abs() < 1e-15);
        }
    }

    #[test]
    fn cond_log_lik_finite_at_extreme_logits() {
        let bank = ItemBank::from_constrained(
            DMatrix::from_row_slice(1, 1, &[50.0]),
            vec![vec![1.0, 0.0, -1.0]],
            1.702,
        )
        .unwrap();
        for y in 0..4u8 {
            for x in [-1.0, 1.0] {
                let ll = cond_log_lik(&bank, &[x], &[y]);
                assert!(ll.is_finite(), "y={y} x={x} -> {ll}");
            }
        }
    }

    #[test]
    fn analytic_partials_match_finite_differences() {
        // partials of cond_log_lik w.r.t. loadings, raw intercepts and x
        let mut rng = Pcg64::seed_from_u64(4);
        let h = 1e-5;
        for _ in 0..25 {
            let loadings = DMatrix::from_fn(3, 2, |_, _| rng.gen_range(-1.0..1.0));
            let raws = vec![
                (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>(),
                (0..1).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>(),
                (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>(),
            ];
            let bank = ItemBank::new(loadings.clone(), raws.clone(), 1.702).unwrap();
            let x = [rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5)];
            let y = [
                rng.gen_range(0..4u8),
                rng.gen_range(0..2u8),
                rng.gen_range(0..3u8),
            ];

            // analytic gradient via the item backward kernel
            let d = bank.scaling_d();
            let mut d_load = DMatrix::zeros(3, 2);
            let mut d_x = [0.0; 2];
            let mut d_raw: Vec<Vec<f64>> = raws.iter().map(|r| vec![0.0; r.len()]).collect();
            for j in 0..3 {
                let t = bank.linear_predictor(j, &x);
                let bw = item_log_prob_backward(bank.intercepts(j), d, t, y[j] as usize);
                let mut d_alpha = vec![0.0; bank.intercepts(j).len()];
                for &(idx, g) in bw.dalpha.iter().take(bw.n_dalpha) {
                    d_alpha[idx] += g;
                }
                chain_raw_intercepts(&raws[j], &d_alpha, &mut d_raw[j]);
                for p in 0..2 {
                    d_load[(j, p)] += bw.dt * x[p];
                    d_x[p] += bw.dt * bank.loadings()[(j, p)];
                }
            }

            let rel = |a: f64, f: f64| (a - f).abs() / a.abs().max(f.abs()).max(1e-6);

            // finite differences on each raw coordinate
            for j in 0..3 {
                for m in 0..raws[j].len() {
                    let mut plus = raws.clone();
                    plus[j][m] += h;
                    let mut minus = raws.clone();
                    minus[j][m] -= h;
                    let bp = ItemBank::new(loadings.clone(), plus, 1.702).unwrap();
                    let bm = ItemBank::new(loadings.clone(), minus, 1.702).unwrap();
                    let fd = (cond_log_lik(&bp, &x, &y) - cond_log_lik(&bm, &x, &y)) / (2.0 * h);
                    assert!(rel(d_raw[j][m], fd) < 1e-6, "raw[{j}][{m}]: {} vs {fd}", d_raw[j][m]);
                }
                for p in 0..2 {
                    let mut lp = loadings.clone();
                    lp[(j, p)] += h;
                    let mut lm = loadings.clone();
                    lm[(j, p)] -= h;
                    let bp = ItemBank::new(lp, raws.clone(), 1.702).unwrap();
                    let bm = ItemBank::new(lm, raws.clone(), 1.702).unwrap();
                    let fd = (cond_log_lik(&bp, &x, &y) - cond_log_lik(&bm, &x, &y)) / (2.0 * h);
                    assert!(rel(d_load[(j, p)], fd) < 1e-6);
                }
            }
            for p in 0..2 {
                let mut xp = x;
                xp[p] += h;
                let mut xm = x;
                xm[p] -= h;
                let fd = (cond_log_lik(&bank, &xp, &y) - cond_log_lik(&bank, &xm, &y)) / (2.0 * h);
                assert!(rel(d_x[p], fd) < 1e-6);
            }
        }
    }

    #[test]
    fn init_loadings_respect_xavier_bound() {
        let bank = init_item_bank(50, 5, &[5; 50], 1.702, 9).unwrap();
        let bound = (6.0f64 / 55.0).sqrt();
        assert!((bound - 0.3302891295379082).abs() < 1e-15);
        for j in 0..50 {
            for p in 0..5 {
                assert!(bank.loadings()[(j, p)].abs() < bound);
            }
        }
        // not all zero
        assert!(bank.loadings().amax() > 1e-3);
    }

    #[test]
    fn init_intercepts_are_logistic_quantiles() {
        let bank = init_item_bank(1, 1, &[5], 1.702, 0).unwrap();
        let a = bank.intercepts(0);
        let expected = [
            0.8145090253348359,
            0.23822861815990848,
            -0.2382286181599085,
            -0.8145090253348359,
        ];
        for (got, want) in a.iter().zip(expected) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
        for k in 1..a.len() {
            assert!(a[k] < a[k - 1]);
        }
    }

    #[test]
    fn item_bank_json_round_trip() {
        let bank = toy_bank();
        let json = serde_json::to_string(&bank).unwrap();
        // on-disk schema names ordered intercepts, not raw parameters
        assert!(json.contains("\"intercepts\""));
        let back: ItemBank = serde_json::from_str(&json).unwrap();
        assert!((back.loadings() - bank.loadings()).amax() < 1e-14);
        for j in 0..bank.n_items() {
            for (a, b) in bank.intercepts(j).iter().zip(back.intercepts(j)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
