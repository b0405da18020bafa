//! The amortized inference model: a single-hidden-layer feedforward network
//! mapping a one-hot response pattern to the mean and log-standard-deviation
//! of a Gaussian approximate posterior over factor scores.
//!
//! Hidden activation is ELU, the output activation is the identity, and the
//! raw log-standard-deviation output is clamped to [-10, 10] before
//! exponentiation so the posterior cannot collapse or blow up.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_pcg::Pcg64;
use serde::{Deserialize, Serialize};

use crate::data::EncodedMatrix;
use crate::error::{Error, Result};
use crate::math::derive_seed;

const ENCODER_STREAM: u64 = 0x454e_434f; // "ENCO"

/// Clamp bounds for the raw log-sigma network output.
pub const LOG_SIGMA_CLAMP: f64 = 10.0;

/// Exponential linear unit.
#[inline]
pub fn elu(z: f64) -> f64 {
    if z >= 0.0 {
        z
    } else {
        z.exp() - 1.0
    }
}

/// Derivative of the ELU: 1 for z >= 0, exp(z) otherwise.
#[inline]
pub fn elu_deriv(z: f64) -> f64 {
    if z >= 0.0 {
        1.0
    } else {
        z.exp()
    }
}

/// Inference network weights. The output layer has exactly `2 P` rows:
/// means first, then log-standard-deviations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "EncoderFile", into = "EncoderFile")]
pub struct EncoderParams {
    /// H x input_dim
    w1: DMatrix<f64>,
    b1: DVector<f64>,
    /// 2P x H
    w2: DMatrix<f64>,
    b2: DVector<f64>,
    hidden_size: usize,
    latent_dim: usize,
}

#[derive(Serialize, Deserialize)]
struct EncoderFile {
    w1: Vec<Vec<f64>>,
    b1: Vec<f64>,
    w2: Vec<Vec<f64>>,
    b2: Vec<f64>,
    hidden_size: usize,
    latent_dim: usize,
}

impl From<EncoderParams> for EncoderFile {
    fn from(e: EncoderParams) -> Self {
        let rows = |m: &DMatrix<f64>| -> Vec<Vec<f64>> {
            (0..m.nrows())
                .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
                .collect()
        };
        EncoderFile {
            w1: rows(&e.w1),
            b1: e.b1.iter().copied().collect(),
            w2: rows(&e.w2),
            b2: e.b2.iter().copied().collect(),
            hidden_size: e.hidden_size,
            latent_dim: e.latent_dim,
        }
    }
}

impl TryFrom<EncoderFile> for EncoderParams {
    type Error = Error;

    fn try_from(f: EncoderFile) -> Result<Self> {
        let mat = |rows: &Vec<Vec<f64>>, name: &str| -> Result<DMatrix<f64>> {
            let nr = rows.len();
            let nc = rows.first().map_or(0, Vec::len);
            if rows.iter().any(|r| r.len() != nc) {
                return Err(Error::Shape(format!("ragged {name} matrix")));
            }
            Ok(DMatrix::from_fn(nr, nc, |i, j| rows[i][j]))
        };
        let w1 = mat(&f.w1, "w1")?;
        let w2 = mat(&f.w2, "w2")?;
        EncoderParams::new(
            w1,
            DVector::from_vec(f.b1),
            w2,
            DVector::from_vec(f.b2),
        )
    }
}

impl EncoderParams {
    pub fn new(w1: DMatrix<f64>, b1: DVector<f64>, w2: DMatrix<f64>, b2: DVector<f64>) -> Result<Self> {
        let hidden_size = w1.nrows();
        if b1.len() != hidden_size || w2.ncols() != hidden_size {
            return Err(Error::Shape("hidden layer dimensions disagree".into()));
        }
        if w2.nrows() != b2.len() || w2.nrows() % 2 != 0 || w2.nrows() == 0 {
            return Err(Error::Shape("output layer must have 2 * latent_dim rows".into()));
        }
        Ok(EncoderParams {
            latent_dim: w2.nrows() / 2,
            hidden_size,
            w1,
            b1,
            w2,
            b2,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.w1.ncols()
    }

    pub fn hidden_size(&self) -> usize {
        self.hidden_size
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn w1(&self) -> &DMatrix<f64> {
        &self.w1
    }

    pub fn b1(&self) -> &DVector<f64> {
        &self.b1
    }

    pub fn w2(&self) -> &DMatrix<f64> {
        &self.w2
    }

    pub fn b2(&self) -> &DVector<f64> {
        &self.b2
    }

    pub(crate) fn parts_mut(
        &mut self,
    ) -> (&mut DMatrix<f64>, &mut DVector<f64>, &mut DMatrix<f64>, &mut DVector<f64>) {
        (&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2)
    }

    /// Forward pass for one respondent given the indices of the active
    /// one-hot columns. `h_out` receives the hidden pre-activation in place
    /// and is then overwritten with the activation; `mu`/`log_sigma_raw`
    /// receive the unclamped outputs.
    pub(crate) fn forward_indices(
        &self,
        cols: &[usize],
        h_out: &mut [f64],
        mu: &mut [f64],
        log_sigma_raw: &mut [f64],
    ) {
        let h_len = self.hidden_size;
        h_out.copy_from_slice(self.b1.as_slice());
        for &c in cols {
            let col = self.w1.column(c);
            let col = col.as_slice();
            for k in 0..h_len {
                h_out[k] += col[k];
            }
        }
        for v in h_out.iter_mut() {
            *v = elu(*v);
        }
        let p = self.latent_dim;
        let b2 = self.b2.as_slice();
        mu.copy_from_slice(&b2[..p]);
        log_sigma_raw.copy_from_slice(&b2[p..]);
        for k in 0..h_len {
            let hk = h_out[k];
            if hk == 0.0 {
                continue;
            }
            let col = self.w2.column(k);
            let col = col.as_slice();
            for q in 0..p {
                mu[q] += col[q] * hk;
            }
            for q in 0..p {
                log_sigma_raw[q] += col[p + q] * hk;
            }
        }
    }
}

/// Clamps a raw log-sigma output to the stability window.
#[inline]
pub fn clamp_log_sigma(raw: f64) -> f64 {
    raw.clamp(-LOG_SIGMA_CLAMP, LOG_SIGMA_CLAMP)
}

/// Approximate-posterior parameters for a batch of respondents.
#[derive(Debug, Clone)]
pub struct PosteriorParams {
    /// batch x P, row-major
    pub mu: Vec<f64>,
    /// batch x P, row-major; already clamped
    pub log_sigma: Vec<f64>,
    pub batch: usize,
    pub latent_dim: usize,
}

impl PosteriorParams {
    pub fn mu_row(&self, i: usize) -> &[f64] {
        &self.mu[i * self.latent_dim..(i + 1) * self.latent_dim]
    }

    pub fn log_sigma_row(&self, i: usize) -> &[f64] {
        &self.log_sigma[i * self.latent_dim..(i + 1) * self.latent_dim]
    }
}

/// Batch forward pass over one-hot encoded rows.
pub fn forward(params: &EncoderParams, rows: &EncodedMatrix) -> Result<PosteriorParams> {
    if rows.n_cols() != params.input_dim() {
        return Err(Error::Shape(format!(
            "encoded rows have {} columns but the encoder expects {}",
            rows.n_cols(),
            params.input_dim()
        )));
    }
    let p = params.latent_dim();
    let batch = rows.n_rows();
    let mut mu = vec![0.0; batch * p];
    let mut log_sigma = vec![0.0; batch * p];
    let mut h = vec![0.0; params.hidden_size()];
    let mut cols = Vec::with_capacity(rows.offsets().len());
    for i in 0..batch {
        cols.clear();
        let row = rows.row(i);
        for (j, &off) in rows.offsets().iter().enumerate() {
            let end = rows
                .offsets()
                .get(j + 1)
                .copied()
                .unwrap_or_else(|| rows.n_cols());
            let block = &row[off..end];
            let active = block.iter().position(|&v| v == 1.0).ok_or_else(|| {
                Error::Validation(format!("row {i} item {j} has no active one-hot entry"))
            })?;
            cols.push(off + active);
        }
        let out = &mut mu[i * p..(i + 1) * p];
        let ls = &mut log_sigma[i * p..(i + 1) * p];
        params.forward_indices(&cols, &mut h, out, ls);
        for v in ls.iter_mut() {
            *v = clamp_log_sigma(*v);
        }
    }
    Ok(PosteriorParams {
        mu,
        log_sigma,
        batch,
        latent_dim: p,
    })
}

/// Hidden size rule: the mean of the input width and `2 P`, rounded.
pub fn default_hidden_size(input_dim: usize, latent_dim: usize) -> usize {
    ((input_dim + 2 * latent_dim) as f64 / 2.0).round() as usize
}

/// Kaiming-style uniform initialization: weights and biases of each layer
/// drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub fn init_encoder(input_dim: usize, hidden_size: usize, latent_dim: usize, seed: u64) -> Result<EncoderParams> {
    if input_dim == 0 || hidden_size == 0 || latent_dim == 0 {
        return Err(Error::Config("encoder sizes must be positive".into()));
    }
    let mut rng = Pcg64::seed_from_u64(derive_seed(seed, ENCODER_STREAM, 0));
    let bound1 = 1.0 / (input_dim as f64).sqrt();
    let w1 = DMatrix::from_fn(hidden_size, input_dim, |_, _| rng.gen_range(-bound1..bound1));
    let b1 = DVector::from_fn(hidden_size, |_, _| rng.gen_range(-bound1..bound1));
    let bound2 = 1.0 / (hidden_size as f64).sqrt();
    let w2 = DMatrix::from_fn(2 * latent_dim, hidden_size, |_, _| rng.gen_range(-bound2..bound2));
    let b2 = DVector::from_fn(2 * latent_dim, |_, _| rng.gen_range(-bound2..bound2));
    EncoderParams::new(w1, b1, w2, b2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{one_hot, Dataset};

    #[test]
    fn elu_branches() {
        assert_eq!(elu(0.0), 0.0);
        assert_eq!(elu(1.5), 1.5);
        // asymptote: exp(-40) is below half an ulp of 1, so the closest
        // representable value of elu(-40) is exactly -1
        let v = elu(-40.0);
        assert!(v >= -1.0 && v < -1.0 + 1e-15);
        let w = elu(-30.0);
        assert!(w > -1.0 && w < -1.0 + 1e-13);
        assert!((elu(-1.0) - ((-1.0f64).exp() - 1.0)).abs() < 1e-15);
        assert_eq!(elu_deriv(2.0), 1.0);
        assert!((elu_deriv(-1.0) - (-1.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn forward_zero_weights_gives_standard_posterior() {
        let p = EncoderParams::new(
            DMatrix::zeros(3, 4),
            DVector::zeros(3),
            DMatrix::zeros(4, 3),
            DVector::zeros(4),
        )
        .unwrap();
        let d = Dataset::from_rows(vec![vec![1, 0]], Some(vec![2, 2])).unwrap();
        let enc = one_hot(&d);
        let out = forward(&p, &enc).unwrap();
        assert_eq!(out.mu_row(0), &[0.0, 0.0]);
        assert_eq!(out.log_sigma_row(0), &[0.0, 0.0]);
    }

    #[test]
    fn forward_hand_computed_single_unit() {
        // row = (1, 0); W1 = ((2, 0)); b1 = (-1); W2 = ((1), (0)); b2 = 0
        // h = elu(2 * 1 - 1) = 1, mu = 1, log sigma = 0
        let p = EncoderParams::new(
            DMatrix::from_row_slice(1, 2, &[2.0, 0.0]),
            DVector::from_vec(vec![-1.0]),
            DMatrix::from_row_slice(2, 1, &[1.0, 0.0]),
            DVector::zeros(2),
        )
        .unwrap();
        let d = Dataset::from_rows(vec![vec![0]], Some(vec![2])).unwrap();
        let enc = one_hot(&d);
        let out = forward(&p, &enc).unwrap();
        assert!((out.mu_row(0)[0] - 1.0).abs() < 1e-15);
        assert!(out.log_sigma_row(0)[0].abs() < 1e-15);
    }

    #[test]
    fn forward_is_deterministic_and_row_equivariant() {
        let p = init_encoder(7, 4, 2, 7).unwrap();
        let d = Dataset::from_rows(
            vec![vec![0, 1, 2], vec![1, 0, 1], vec![0, 1, 2]],
            Some(vec![2, 2, 3]),
        )
        .unwrap();
        let out = forward(&p, &one_hot(&d)).unwrap();
        // identical rows produce identical posteriors
        assert_eq!(out.mu_row(0), out.mu_row(2));
        assert_eq!(out.log_sigma_row(0), out.log_sigma_row(2));
        // permuting rows permutes outputs
        let perm = Dataset::from_rows(
            vec![vec![1, 0, 1], vec![0, 1, 2], vec![0, 1, 2]],
            Some(vec![2, 2, 3]),
        )
        .unwrap();
        let out_p = forward(&p, &one_hot(&perm)).unwrap();
        assert_eq!(out.mu_row(1), out_p.mu_row(0));
        assert_eq!(out.mu_row(0), out_p.mu_row(1));
    }

    #[test]
    fn forward_rejects_width_mismatch() {
        let p = init_encoder(5, 3, 2, 1).unwrap();
        let d = Dataset::from_rows(vec![vec![0, 1]], Some(vec![2, 2])).unwrap();
        assert!(matches!(forward(&p, &one_hot(&d)), Err(Error::Shape(_))));
    }

    #[test]
    fn init_respects_fan_in_bound_and_seed() {
        let bound = 1.0 / 250.0f64.sqrt();
        assert!((bound - 0.06324555320336758).abs() < 1e-15);
        let a = init_encoder(250, 130, 5, 3).unwrap();
        let b = init_encoder(250, 130, 5, 3).unwrap();
        assert_eq!(a, b);
        let c = init_encoder(250, 130, 5, 4).unwrap();
        assert_ne!(a, c);
        for v in a.w1().iter().chain(a.b1().iter()) {
            assert!(v.abs() < bound);
        }
        let bound2 = 1.0 / 130.0f64.sqrt();
        for v in a.w2().iter().chain(a.b2().iter()) {
            assert!(v.abs() < bound2);
        }
    }

    #[test]
    fn hidden_size_rule() {
        assert_eq!(default_hidden_size(250, 5), 130);
        assert_eq!(default_hidden_size(100, 10), 60);
        for p in 1..6 {
            assert_eq!(default_hidden_size(2 * p, p), 2 * p);
        }
    }

    #[test]
    fn encoder_json_round_trip() {
        let a = init_encoder(8, 5, 2, 11).unwrap();
        let json = serde_json::to_string(&a).unwrap();
        let b: EncoderParams = serde_json::from_str(&json).unwrap();
        assert_eq!(a, b);
    }
}
