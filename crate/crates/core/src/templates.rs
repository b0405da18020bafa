//! Built-in data-generating templates for the simulation studies.

use nalgebra::DMatrix;

use crate::data::GeneratingParams;

/// Primary loadings cycled over the ten items of each factor.
const PRIMARY_LOADINGS: [f64; 10] = [0.7, 0.9, 0.6, 1.1, 0.8, 1.0, 0.5, 1.05, 0.75, 0.95];

/// Base intercepts for a five-category item, strictly decreasing.
const BASE_INTERCEPTS: [f64; 4] = [1.4, 0.55, -0.25, -1.1];

/// Per-item shift applied to the whole intercept vector.
const INTERCEPT_SHIFTS: [f64; 10] = [0.0, 0.25, -0.2, 0.1, -0.3, 0.35, -0.1, 0.2, -0.25, 0.05];

/// Factor correlations of the five-factor questionnaire design.
const FACTOR_CORR_5: [f64; 25] = [
    1.00, -0.18, 0.16, 0.11, 0.17, //
    -0.18, 1.00, -0.01, -0.11, -0.08, //
    0.16, -0.01, 1.00, 0.06, 0.08, //
    0.11, -0.11, 0.06, 1.00, -0.01, //
    0.17, -0.08, 0.08, -0.01, 1.00,
];

/// The five-factor benchmark design: P = 5 correlated factors, J = 50
/// five-category items, ten items per factor with zero cross loadings
/// (perfect simple structure).
pub fn five_factor() -> GeneratingParams {
    let loadings = DMatrix::from_fn(50, 5, |j, q| {
        if j / 10 == q {
            PRIMARY_LOADINGS[j % 10]
        } else {
            0.0
        }
    });
    let intercepts = (0..50)
        .map(|j| {
            let shift = INTERCEPT_SHIFTS[j % 10];
            BASE_INTERCEPTS.iter().map(|b| b + shift).collect()
        })
        .collect();
    GeneratingParams {
        loadings,
        intercepts,
        factor_corr: DMatrix::from_row_slice(5, 5, &FACTOR_CORR_5),
        scaling: 1.702,
    }
}

/// The binary double-asymptotic design: P = 10 factors as two copies of the
/// five-factor block (block-diagonal correlations), `j_items` two-category
/// items repeating the 50-item pattern, one intercept per item picked by
/// cycling through the four five-category intercepts.
pub fn binary_ten_factor(j_items: usize) -> GeneratingParams {
    assert!(j_items >= 100 && j_items % 50 == 0, "J must be a multiple of 50, at least 100");
    let loadings = DMatrix::from_fn(j_items, 10, |j, q| {
        let base_item = j % 50;
        let block = (j / 50) % 2; // factors 0-4 for even blocks, 5-9 for odd
        if base_item / 10 + 5 * block == q {
            PRIMARY_LOADINGS[base_item % 10]
        } else {
            0.0
        }
    });
    let intercepts = (0..j_items)
        .map(|j| {
            let shift = INTERCEPT_SHIFTS[j % 10];
            vec![BASE_INTERCEPTS[j % 4] + shift]
        })
        .collect();
    let mut corr = DMatrix::identity(10, 10);
    for a in 0..5 {
        for b in 0..5 {
            corr[(a, b)] = FACTOR_CORR_5[a * 5 + b];
            corr[(a + 5, b + 5)] = FACTOR_CORR_5[a * 5 + b];
        }
    }
    GeneratingParams {
        loadings,
        intercepts,
        factor_corr: corr,
        scaling: 1.702,
    }
}
