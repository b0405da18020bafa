//! Graded response datasets: CSV loading, validation, one-hot encoding and
//! synthetic data generation.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_pcg::Pcg64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::derive_seed;

const SIM_STREAM: u64 = 0x5349_4d55; // "SIMU"

/// Serde adaptor storing a `DMatrix<f64>` as nested row-major arrays.
pub mod matrix_rows {
    use nalgebra::DMatrix;
    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, ser: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = (0..m.nrows())
            .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
            .collect();
        serde::Serialize::serialize(&rows, ser)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(de: D) -> Result<DMatrix<f64>, D::Error> {
        let rows: Vec<Vec<f64>> = Deserialize::deserialize(de)?;
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != ncols) {
            return Err(D::Error::custom("ragged matrix rows"));
        }
        Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
    }
}

/// An `N x J` matrix of integer category codes with per-item category counts.
///
/// Cell (i, j) holds a code in `0..category_counts[j]`; there are no missing
/// cells.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    responses: Vec<u8>,
    n_respondents: usize,
    n_items: usize,
    category_counts: Vec<usize>,
}

impl Dataset {
    /// Builds a dataset from row vectors, inferring `category_counts[j]` as
    /// `1 + max code in column j` unless `counts` overrides it.
    pub fn from_rows(rows: Vec<Vec<u8>>, counts: Option<Vec<usize>>) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(Error::Shape("dataset has no rows".into()));
        }
        let j = rows[0].len();
        if j == 0 {
            return Err(Error::Shape("dataset has no columns".into()));
        }
        for (i, r) in rows.iter().enumerate() {
            if r.len() != j {
                return Err(Error::Shape(format!(
                    "row {} has {} cells, expected {}",
                    i + 1,
                    r.len(),
                    j
                )));
            }
        }
        let category_counts = match counts {
            Some(c) => {
                if c.len() != j {
                    return Err(Error::Shape(format!(
                        "category count override has length {}, expected {}",
                        c.len(),
                        j
                    )));
                }
                c
            }
            None => (0..j)
                .map(|col| 1 + rows.iter().map(|r| r[col] as usize).max().unwrap())
                .collect(),
        };
        let mut flat = Vec::with_capacity(n * j);
        for r in rows {
            flat.extend_from_slice(&r);
        }
        let d = Dataset {
            responses: flat,
            n_respondents: n,
            n_items: j,
            category_counts,
        };
        d.validate()?;
        Ok(d)
    }

    fn validate(&self) -> Result<()> {
        for (j, &c) in self.category_counts.iter().enumerate() {
            if c < 2 {
                return Err(Error::Validation(format!(
                    "item {} has {} observed categor{}; at least 2 are required",
                    j + 1,
                    c,
                    if c == 1 { "y" } else { "ies" }
                )));
            }
            if c > 256 {
                return Err(Error::Validation(format!(
                    "item {} has {} categories; at most 256 are supported",
                    j + 1,
                    c
                )));
            }
        }
        for i in 0..self.n_respondents {
            for j in 0..self.n_items {
                let y = self.response(i, j) as usize;
                if y >= self.category_counts[j] {
                    return Err(Error::Validation(format!(
                        "cell ({}, {}) has code {} but item {} has {} categories",
                        i + 1,
                        j + 1,
                        y,
                        j + 1,
                        self.category_counts[j]
                    )));
                }
            }
        }
        Ok(())
    }

    #[inline]
    pub fn response(&self, i: usize, j: usize) -> u8 {
        self.responses[i * self.n_items + j]
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[u8] {
        &self.responses[i * self.n_items..(i + 1) * self.n_items]
    }

    pub fn n_respondents(&self) -> usize {
        self.n_respondents
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn category_counts(&self) -> &[usize] {
        &self.category_counts
    }

    /// Total number of one-hot columns, sum of the category counts.
    pub fn total_categories(&self) -> usize {
        self.category_counts.iter().sum()
    }

    /// Column offset of each item's one-hot block.
    pub fn offsets(&self) -> Vec<usize> {
        let mut offs = Vec::with_capacity(self.n_items);
        let mut acc = 0;
        for &c in &self.category_counts {
            offs.push(acc);
            acc += c;
        }
        offs
    }

    /// New dataset holding the given rows, keeping the category counts of
    /// the parent so holdout splits cannot truncate an item's categories.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::Shape("subset selects no rows".into()));
        }
        let mut flat = Vec::with_capacity(indices.len() * self.n_items);
        for &i in indices {
            if i >= self.n_respondents {
                return Err(Error::Shape(format!(
                    "subset index {} out of range for {} rows",
                    i, self.n_respondents
                )));
            }
            flat.extend_from_slice(self.row(i));
        }
        Ok(Dataset {
            responses: flat,
            n_respondents: indices.len(),
            n_items: self.n_items,
            category_counts: self.category_counts.clone(),
        })
    }

    /// Loads a delimiter-separated file of integer codes. A first line that
    /// does not parse as integers is treated as a header and skipped.
    pub fn load_csv(path: &Path, delimiter: char) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::from_reader(BufReader::new(file), delimiter, None)
    }

    /// Same as [`Dataset::load_csv`] with explicit category counts.
    pub fn load_csv_with_counts(path: &Path, delimiter: char, counts: Vec<usize>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::from_reader(BufReader::new(file), delimiter, Some(counts))
    }

    pub fn from_reader<R: BufRead>(reader: R, delimiter: char, counts: Option<Vec<usize>>) -> Result<Self> {
        let mut rows: Vec<Vec<u8>> = Vec::new();
        let mut header_skipped = false;
        for (line_idx, line) in reader.lines().enumerate() {
            let line = line?;
            let trimmed = line.trim_end_matches('\r');
            if trimmed.trim().is_empty() {
                continue;
            }
            let mut row = Vec::new();
            let mut failed: Option<(usize, String)> = None;
            for (col_idx, cell) in trimmed.split(delimiter).enumerate() {
                let cell = cell.trim();
                match cell.parse::<u32>() {
                    Ok(v) if v <= 255 => row.push(v as u8),
                    Ok(_) => {
                        return Err(Error::Validation(format!(
                            "cell at row {}, column {} exceeds 255",
                            line_idx + 1,
                            col_idx + 1
                        )))
                    }
                    Err(_) => {
                        failed = Some((col_idx + 1, cell.to_string()));
                        break;
                    }
                }
            }
            if let Some((col, value)) = failed {
                // a non-numeric first line is a header
                if line_idx == 0 && !header_skipped {
                    header_skipped = true;
                    continue;
                }
                return Err(Error::Parse {
                    row: line_idx + 1,
                    col,
                    value,
                });
            }
            rows.push(row);
        }
        Self::from_rows(rows, counts)
    }

    /// Writes the responses as delimiter-separated integer codes.
    pub fn write_csv(&self, path: &Path, delimiter: char) -> Result<()> {
        use std::fmt::Write as _;
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        let mut line = String::new();
        for i in 0..self.n_respondents {
            line.clear();
            for (j, &y) in self.row(i).iter().enumerate() {
                if j > 0 {
                    line.push(delimiter);
                }
                let _ = write!(line, "{y}");
            }
            line.push('\n');
            out.write_all(line.as_bytes())?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Dense one-hot encoding of a [`Dataset`]: row i has a single 1 in each
/// item's block, at `offsets[j] + y[i][j]`.
#[derive(Debug, Clone)]
pub struct EncodedMatrix {
    rows: Vec<f64>,
    n_rows: usize,
    n_cols: usize,
    offsets: Vec<usize>,
}

impl EncodedMatrix {
    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.n_cols..(i + 1) * self.n_cols]
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }
}

/// One-hot encodes every response row.
pub fn one_hot(d: &Dataset) -> EncodedMatrix {
    let n_cols = d.total_categories();
    let offsets = d.offsets();
    let mut rows = vec![0.0; d.n_respondents() * n_cols];
    for i in 0..d.n_respondents() {
        let base = i * n_cols;
        for (j, &off) in offsets.iter().enumerate() {
            rows[base + off + d.response(i, j) as usize] = 1.0;
        }
    }
    EncodedMatrix {
        rows,
        n_rows: d.n_respondents(),
        n_cols,
        offsets,
    }
}

/// Data-generating parameters for the graded response model.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratingParams {
    /// J x P loadings, row per item.
    #[serde(with = "matrix_rows")]
    pub loadings: DMatrix<f64>,
    /// Per item, strictly decreasing intercepts (length `C_j - 1`).
    pub intercepts: Vec<Vec<f64>>,
    /// P x P factor correlation matrix.
    #[serde(with = "matrix_rows")]
    pub factor_corr: DMatrix<f64>,
    /// Logistic scaling constant, typically 1.702.
    pub scaling: f64,
}

impl GeneratingParams {
    pub fn n_items(&self) -> usize {
        self.loadings.nrows()
    }

    pub fn latent_dim(&self) -> usize {
        self.loadings.ncols()
    }

    pub fn category_counts(&self) -> Vec<usize> {
        self.intercepts.iter().map(|a| a.len() + 1).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.latent_dim();
        if self.intercepts.len() != self.n_items() {
            return Err(Error::Shape(format!(
                "{} intercept vectors for {} items",
                self.intercepts.len(),
                self.n_items()
            )));
        }
        if self.scaling <= 0.0 {
            return Err(Error::Validation("scaling constant must be positive".into()));
        }
        for (j, a) in self.intercepts.iter().enumerate() {
            if a.is_empty() {
                return Err(Error::Validation(format!("item {} has no intercepts", j + 1)));
            }
            for k in 1..a.len() {
                if !(a[k] < a[k - 1]) {
                    return Err(Error::Validation(format!(
                        "item {} intercepts are not strictly decreasing",
                        j + 1
                    )));
                }
            }
        }
        if self.factor_corr.nrows() != p || self.factor_corr.ncols() != p {
            return Err(Error::Shape("factor correlation matrix has wrong size".into()));
        }
        for i in 0..p {
            if (self.factor_corr[(i, i)] - 1.0).abs() > 1e-10 {
                return Err(Error::Validation("factor correlation diagonal must be 1".into()));
            }
            for j in 0..p {
                if (self.factor_corr[(i, j)] - self.factor_corr[(j, i)]).abs() > 1e-10 {
                    return Err(Error::Validation("factor correlation matrix must be symmetric".into()));
                }
            }
        }
        Ok(())
    }
}

/// Simulated factor scores plus the responses they generated.
pub struct Simulated {
    pub data: Dataset,
    /// N x P matrix of true factor scores, row-major.
    pub scores: Vec<f64>,
}

/// Draws `n` respondents from the generating model. Same seed, same output.
pub fn simulate(gp: &GeneratingParams, n: usize, seed: u64) -> Result<Dataset> {
    Ok(simulate_with_scores(gp, n, seed)?.data)
}

/// As [`simulate`], also returning the latent factor scores.
pub fn simulate_with_scores(gp: &GeneratingParams, n: usize, seed: u64) -> Result<Simulated> {
    gp.validate()?;
    let p = gp.latent_dim();
    let j_items = gp.n_items();
    let chol = Cholesky::new(gp.factor_corr.clone()).ok_or_else(|| {
        Error::Validation("factor correlation matrix is not positive definite".into())
    })?;
    let l = chol.l();

    let mut rng = Pcg64::seed_from_u64(derive_seed(seed, SIM_STREAM, 0));
    let counts = gp.category_counts();
    let mut rows: Vec<Vec<u8>> = Vec::with_capacity(n);
    let mut scores = Vec::with_capacity(n * p);
    let mut z = DVector::zeros(p);
    for _ in 0..n {
        for zi in z.iter_mut() {
            *zi = rng.sample::<f64, _>(rand_distr::StandardNormal);
        }
        let x = &l * &z;
        scores.extend(x.iter());
        let mut row = Vec::with_capacity(j_items);
        for j in 0..j_items {
            let mut t = 0.0;
            for q in 0..p {
                t += gp.loadings[(j, q)] * x[q];
            }
            let probs = crate::grm::category_probs_from(&gp.intercepts[j], gp.scaling, t);
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut code = counts[j] - 1;
            for (k, &pk) in probs.iter().enumerate() {
                acc += pk;
                if u < acc {
                    code = k;
                    break;
                }
            }
            row.push(code as u8);
        }
        rows.push(row);
    }
    let data = Dataset::from_rows(rows, Some(counts))?;
    Ok(Simulated { data, scores })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::sigmoid;
    use std::io::Cursor;

    fn read(text: &str) -> Result<Dataset> {
        Dataset::from_reader(Cursor::new(text.as_bytes()), ',', None)
    }

    #[test]
    fn minimal_two_by_two() {
        let d = read("0,1\n1,0\n").unwrap();
        assert_eq!(d.n_respondents(), 2);
        assert_eq!(d.n_items(), 2);
        assert_eq!(d.category_counts(), &[2, 2]);
    }

    #[test]
    fn non_integer_cell_is_a_parse_error_naming_the_cell() {
        let err = read("0,1\n1,2.5\n").unwrap_err();
        match err {
            Error::Parse { row, col, value } => {
                assert_eq!(row, 2);
                assert_eq!(col, 2);
                assert_eq!(value, "2.5");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn ragged_rows_are_a_shape_error() {
        assert!(matches!(read("0,1\n1\n"), Err(Error::Shape(_))));
    }

    #[test]
    fn single_category_column_is_rejected() {
        assert!(matches!(read("0,1\n0,0\n"), Err(Error::Validation(_))));
    }

    #[test]
    fn header_line_is_skipped() {
        let d = read("item1,item2\n0,1\n1,0\n").unwrap();
        assert_eq!(d.n_respondents(), 2);
    }

    #[test]
    fn count_override_extends_inferred_range() {
        let d = Dataset::from_reader(Cursor::new(b"0,1\n1,0\n" as &[u8]), ',', Some(vec![3, 5])).unwrap();
        assert_eq!(d.category_counts(), &[3, 5]);
        // override below the observed maximum is invalid
        let e = Dataset::from_reader(Cursor::new(b"0,2\n1,0\n" as &[u8]), ',', Some(vec![2, 2]));
        assert!(matches!(e, Err(Error::Validation(_))));
    }

    #[test]
    fn one_hot_places_single_one_per_block() {
        let d = Dataset::from_rows(vec![vec![1]], Some(vec![3])).unwrap();
        let e = one_hot(&d);
        assert_eq!(e.row(0), &[0.0, 1.0, 0.0]);

        let d = Dataset::from_rows(vec![vec![0, 2]], Some(vec![2, 3])).unwrap();
        let e = one_hot(&d);
        assert_eq!(e.row(0), &[1.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(e.offsets(), &[0, 2]);
    }

    #[test]
    fn one_hot_dimension_matches_hidden_size_rule() {
        // 50 five-category items: 250 columns, so mean(250, 2*5) = 130
        let rows = vec![vec![4u8; 50], vec![0u8; 50]];
        let d = Dataset::from_rows(rows, None).unwrap();
        let e = one_hot(&d);
        assert_eq!(e.n_cols(), 250);
        assert_eq!(crate::encoder::default_hidden_size(e.n_cols(), 5), 130);
    }

    #[test]
    fn one_hot_round_trips_to_responses() {
        let gp = small_generator();
        let d = simulate(&gp, 40, 11).unwrap();
        let e = one_hot(&d);
        for i in 0..d.n_respondents() {
            let row = e.row(i);
            for (j, &off) in e.offsets().iter().enumerate() {
                let c = d.category_counts()[j];
                let block = &row[off..off + c];
                assert!((block.iter().sum::<f64>() - 1.0).abs() < 1e-15);
                let argmax = block
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0;
                assert_eq!(argmax, d.response(i, j) as usize);
            }
        }
    }

    fn small_generator() -> GeneratingParams {
        GeneratingParams {
            loadings: DMatrix::from_row_slice(4, 2, &[0.9, 0.0, 0.7, 0.0, 0.0, 0.8, 0.0, 1.1]),
            intercepts: vec![
                vec![1.0, -0.5],
                vec![0.5],
                vec![1.2, 0.0, -1.2],
                vec![0.3],
            ],
            factor_corr: DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 1.0]),
            scaling: 1.702,
        }
    }

    #[test]
    fn simulate_is_deterministic_per_seed() {
        let gp = small_generator();
        let a = simulate(&gp, 50, 42).unwrap();
        let b = simulate(&gp, 50, 42).unwrap();
        assert_eq!(a, b);
        let c = simulate(&gp, 50, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn simulate_output_satisfies_dataset_invariants() {
        let gp = small_generator();
        let d = simulate(&gp, 200, 7).unwrap();
        assert_eq!(d.category_counts(), &[3, 2, 4, 2]);
        for i in 0..d.n_respondents() {
            for j in 0..d.n_items() {
                assert!((d.response(i, j) as usize) < d.category_counts()[j]);
            }
        }
    }

    #[test]
    fn simulate_rejects_non_positive_definite_correlations() {
        let mut gp = small_generator();
        gp.factor_corr = DMatrix::from_row_slice(2, 2, &[1.0, 1.2, 1.2, 1.0]);
        assert!(simulate(&gp, 10, 1).is_err());
    }

    #[test]
    fn zero_loadings_binary_item_hits_half_probability() {
        // alpha = 0 makes Pr(y >= 1 | x) = 0.5 regardless of x
        let gp = GeneratingParams {
            loadings: DMatrix::zeros(2, 1),
            intercepts: vec![vec![0.0], vec![0.0]],
            factor_corr: DMatrix::identity(1, 1),
            scaling: 1.702,
        };
        let d = simulate(&gp, 100_000, 5).unwrap();
        for j in 0..2 {
            let ones = (0..d.n_respondents()).filter(|&i| d.response(i, j) == 1).count();
            let freq = ones as f64 / d.n_respondents() as f64;
            assert!((freq - 0.5).abs() < 0.01, "item {j} frequency {freq}");
        }
    }

    // chi-square critical values at alpha = 0.001 for df = 1..=6
    const CHI2_CRIT_001: [f64; 6] = [10.828, 13.816, 16.266, 18.467, 20.515, 22.458];

    #[test]
    fn zero_loadings_frequencies_match_boundary_differences() {
        let gp = GeneratingParams {
            loadings: DMatrix::zeros(3, 2),
            intercepts: vec![
                vec![1.0, -0.5],
                vec![0.8, 0.1, -0.9],
                vec![0.25],
            ],
            factor_corr: DMatrix::identity(2, 2),
            scaling: 1.702,
        };
        let n = 100_000;
        let d = simulate(&gp, n, 99).unwrap();
        for (j, alpha) in gp.intercepts.iter().enumerate() {
            let c = alpha.len() + 1;
            // analytic category probabilities at x = 0
            let mut expected = Vec::with_capacity(c);
            for k in 0..c {
                let upper = if k == 0 { 1.0 } else { sigmoid(gp.scaling * alpha[k - 1]) };
                let lower = if k == c - 1 { 0.0 } else { sigmoid(gp.scaling * alpha[k]) };
                expected.push(upper - lower);
            }
            let mut observed = vec![0usize; c];
            for i in 0..n {
                observed[d.response(i, j) as usize] += 1;
            }
            let chi2: f64 = (0..c)
                .map(|k| {
                    let e = expected[k] * n as f64;
                    let o = observed[k] as f64;
                    (o - e) * (o - e) / e
                })
                .sum();
            assert!(
                chi2 < CHI2_CRIT_001[c - 2],
                "item {j}: chi2 {chi2} exceeds critical value"
            );
        }
    }

    #[test]
    fn csv_round_trip() {
        let gp = small_generator();
        let d = simulate(&gp, 25, 3).unwrap();
        let dir = std::env::temp_dir().join(format!("ifa-data-test-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("roundtrip.csv");
        d.write_csv(&path, ',').unwrap();
        let back = Dataset::load_csv_with_counts(&path, ',', d.category_counts().to_vec()).unwrap();
        assert_eq!(d, back);
        std::fs::remove_dir_all(&dir).ok();
    }
}
