//! Multi-output ridge regression: thin-SVD closed form on standardized
//! inputs, k-fold cross-validated penalty.

use nalgebra::{DMatrix, DVector, SVD};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum RidgeError {
    #[error("need at least {needed} rows, got {got}")]
    TooFewRows { needed: usize, got: usize },
    #[error("lambda must be positive, got {0}")]
    BadLambda(f64),
    #[error("X has {x} rows but Y has {y}")]
    RowMismatch { x: usize, y: usize },
    #[error("model expects {expected} columns, got {got}")]
    ColumnMismatch { expected: usize, got: usize },
    #[error("SVD did not converge")]
    SvdFailed,
    #[error("empty lambda grid")]
    EmptyGrid,
    #[error("need k >= 2 folds, got {0}")]
    BadFolds(usize),
}

/// Nine log-spaced penalties from 1e-4 to 1e4.
pub fn default_grid() -> Vec<f64> {
    (0..9).map(|i| 10f64.powi(i - 4)).collect()
}

/// Per-column mean and std of a training design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    /// Population std; constant columns store 1.
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &DMatrix<f64>) -> Result<Self, RidgeError> {
        let n = x.nrows();
        if n < 2 {
            return Err(RidgeError::TooFewRows { needed: 2, got: n });
        }
        let mut mean = Vec::with_capacity(x.ncols());
        let mut std = Vec::with_capacity(x.ncols());
        for col in x.column_iter() {
            let m = col.sum() / n as f64;
            let v = col.iter().map(|a| (a - m).powi(2)).sum::<f64>() / n as f64;
            let s = v.sqrt();
            mean.push(m);
            std.push(if s > 1e-12 * (1.0 + m.abs()) { s } else { 1.0 });
        }
        Ok(Self { mean, std })
    }

    pub fn apply(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>, RidgeError> {
        self.check(x.ncols())?;
        Ok(DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| {
            (x[(i, j)] - self.mean[j]) / self.std[j]
        }))
    }

    pub fn invert(&self, z: &DMatrix<f64>) -> Result<DMatrix<f64>, RidgeError> {
        self.check(z.ncols())?;
        Ok(DMatrix::from_fn(z.nrows(), z.ncols(), |i, j| {
            z[(i, j)] * self.std[j] + self.mean[j]
        }))
    }

    fn check(&self, cols: usize) -> Result<(), RidgeError> {
        if cols != self.mean.len() {
            return Err(RidgeError::ColumnMismatch {
                expected: self.mean.len(),
                got: cols,
            });
        }
        Ok(())
    }
}

/// Thin SVD of a standardized design, reusable across penalties.
pub struct SvdPath {
    u: DMatrix<f64>,
    s: DVector<f64>,
    v_t: DMatrix<f64>,
}

impl SvdPath {
    pub fn new(x: &DMatrix<f64>) -> Result<Self, RidgeError> {
        let svd = SVD::try_new(x.clone(), true, true, f64::EPSILON, 0).ok_or(RidgeError::SvdFailed)?;
        Ok(Self {
            u: svd.u.ok_or(RidgeError::SvdFailed)?,
            s: svd.singular_values,
            v_t: svd.v_t.ok_or(RidgeError::SvdFailed)?,
        })
    }

    /// `V diag(s / (s² + λ)) Uᵀ Y` for centered `y`.
    pub fn solve(&self, y: &DMatrix<f64>, lambda: f64) -> Result<DMatrix<f64>, RidgeError> {
        if lambda.is_nan() || lambda <= 0.0 {
            return Err(RidgeError::BadLambda(lambda));
        }
        if y.nrows() != self.u.nrows() {
            return Err(RidgeError::RowMismatch {
                x: self.u.nrows(),
                y: y.nrows(),
            });
        }
        let mut uty = self.u.transpose() * y;
        for (k, mut row) in uty.row_iter_mut().enumerate() {
            let s = self.s[k];
            row *= s / (s * s + lambda);
        }
        Ok(self.v_t.transpose() * uty)
    }
}

/// Column means and the centered copy of `y`.
pub fn center(y: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let n = y.nrows() as f64;
    let means: Vec<f64> = y.column_iter().map(|c| c.sum() / n).collect();
    let centered = DMatrix::from_fn(y.nrows(), y.ncols(), |i, j| y[(i, j)] - means[j]);
    (means, centered)
}

/// Fit on an already standardized design. Returns `(W, intercept)`.
pub fn ridge_fit(
    x_std: &DMatrix<f64>,
    y: &DMatrix<f64>,
    lambda: f64,
) -> Result<(DMatrix<f64>, Vec<f64>), RidgeError> {
    if x_std.nrows() < 2 {
        return Err(RidgeError::TooFewRows {
            needed: 2,
            got: x_std.nrows(),
        });
    }
    let (intercept, yc) = center(y);
    let w = SvdPath::new(x_std)?.solve(&yc, lambda)?;
    Ok((w, intercept))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RidgeModel {
    /// `p` rows of `q` weights, in standardized-input space.
    pub weights: Vec<Vec<f64>>,
    pub intercept: Vec<f64>,
    pub lambda: f64,
    pub stats: Standardizer,
    /// Seed of the cross-validation fold split, if one was run.
    #[serde(default)]
    pub seed: Option<u64>,
}

impl RidgeModel {
    /// Standardizes `x`, then fits.
    pub fn fit(x: &DMatrix<f64>, y: &DMatrix<f64>, lambda: f64) -> Result<Self, RidgeError> {
        if x.nrows() != y.nrows() {
            return Err(RidgeError::RowMismatch {
                x: x.nrows(),
                y: y.nrows(),
            });
        }
        let stats = Standardizer::fit(x)?;
        let (w, intercept) = ridge_fit(&stats.apply(x)?, y, lambda)?;
        Ok(Self::from_parts(w, intercept, lambda, stats))
    }

    pub fn from_parts(w: DMatrix<f64>, intercept: Vec<f64>, lambda: f64, stats: Standardizer) -> Self {
        Self {
            weights: w.row_iter().map(|r| r.iter().copied().collect()).collect(),
            intercept,
            lambda,
            stats,
            seed: None,
        }
    }

    pub fn inputs(&self) -> usize {
        self.weights.len()
    }

    pub fn outputs(&self) -> usize {
        self.intercept.len()
    }

    pub fn weight_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.inputs(), self.outputs(), |i, j| self.weights[i][j])
    }

    pub fn predict(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>, RidgeError> {
        let mut y = self.stats.apply(x)? * self.weight_matrix();
        for mut row in y.row_iter_mut() {
            for (v, b) in row.iter_mut().zip(&self.intercept) {
                *v += b;
            }
        }
        Ok(y)
    }

    pub fn predict_row(&self, x: &[f64]) -> Result<Vec<f64>, RidgeError> {
        let m = DMatrix::from_row_slice(1, x.len(), x);
        Ok(self.predict(&m)?.row(0).iter().copied().collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub lambda: f64,
    pub grid: Vec<f64>,
    /// Mean held-out MSE per grid value.
    pub mse: Vec<f64>,
}

/// Fold labels `0..k` from a seeded shuffle: row `perm[i]` goes to fold `i % k`.
pub fn fold_labels(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut labels = vec![0; n];
    for (i, &row) in perm.iter().enumerate() {
        labels[row] = i % k;
    }
    labels
}

pub fn cv_select_lambda(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    grid: &[f64],
    k: usize,
    seed: u64,
) -> Result<CvResult, RidgeError> {
    if k < 2 {
        return Err(RidgeError::BadFolds(k));
    }
    if x.nrows() < k {
        return Err(RidgeError::TooFewRows {
            needed: k,
            got: x.nrows(),
        });
    }
    let folds = fold_labels(x.nrows(), k, seed);
    Ok(cv_with_folds(x, &[y], grid, &folds)?.remove(0))
}

/// Cross-validates several target blocks against one design, sharing each
/// fold's factorization. Ties in MSE go to the smaller penalty.
pub fn cv_with_folds(
    x: &DMatrix<f64>,
    ys: &[&DMatrix<f64>],
    grid: &[f64],
    folds: &[usize],
) -> Result<Vec<CvResult>, RidgeError> {
    if grid.is_empty() {
        return Err(RidgeError::EmptyGrid);
    }
    if let Some(&bad) = grid.iter().find(|l| l.is_nan() || **l <= 0.0) {
        return Err(RidgeError::BadLambda(bad));
    }
    for y in ys {
        if y.nrows() != x.nrows() {
            return Err(RidgeError::RowMismatch {
                x: x.nrows(),
                y: y.nrows(),
            });
        }
    }
    let k = folds.iter().copied().max().map_or(0, |m| m + 1);
    if k < 2 {
        return Err(RidgeError::BadFolds(k));
    }
    let mut sse = vec![vec![0.0; grid.len()]; ys.len()];
    let mut count = vec![0usize; ys.len()];
    for fold in 0..k {
        let train: Vec<usize> = (0..x.nrows()).filter(|&i| folds[i] != fold).collect();
        let test: Vec<usize> = (0..x.nrows()).filter(|&i| folds[i] == fold).collect();
        if test.is_empty() {
            continue;
        }
        let xtr = x.select_rows(&train);
        let stats = Standardizer::fit(&xtr)?;
        let path = SvdPath::new(&stats.apply(&xtr)?)?;
        let xte = stats.apply(&x.select_rows(&test))?;
        for (t, y) in ys.iter().enumerate() {
            let (mean, yc) = center(&y.select_rows(&train));
            let yte = y.select_rows(&test);
            for (g, &lambda) in grid.iter().enumerate() {
                let pred = &xte * path.solve(&yc, lambda)?;
                let mut e = 0.0;
                for i in 0..yte.nrows() {
                    for j in 0..yte.ncols() {
                        e += (yte[(i, j)] - mean[j] - pred[(i, j)]).powi(2);
                    }
                }
                sse[t][g] += e;
            }
            count[t] += yte.len();
        }
    }
    Ok(sse
        .into_iter()
        .zip(count)
        .map(|(s, c)| {
            let mse: Vec<f64> = s.iter().map(|v| v / c as f64).collect();
            // ties (to rounding) go to the smaller lambda
            let mut order: Vec<usize> = (0..grid.len()).collect();
            order.sort_by(|&a, &b| grid[a].total_cmp(&grid[b]));
            let mut best = order[0];
            for &g in &order[1..] {
                if mse[g] < mse[best] * (1.0 - 1e-12) {
                    best = g;
                }
            }
            CvResult {
                lambda: grid[best],
                grid: grid.to_vec(),
                mse,
            }
        })
        .collect())
}

/// Mean over columns of `1 - SSE/SST`; columns with no variance are skipped.
pub fn r2_score(y_true: &DMatrix<f64>, y_pred: &DMatrix<f64>) -> f64 {
    assert_eq!(y_true.shape(), y_pred.shape());
    let n = y_true.nrows() as f64;
    let mut total = 0.0;
    let mut used = 0usize;
    for j in 0..y_true.ncols() {
        let col = y_true.column(j);
        let m = col.sum() / n;
        let sst: f64 = col.iter().map(|v| (v - m).powi(2)).sum();
        if sst <= 1e-12 * n {
            continue;
        }
        let sse: f64 = col
            .iter()
            .zip(y_pred.column(j).iter())
            .map(|(a, b)| (a - b).powi(2))
            .sum();
        total += 1.0 - sse / sst;
        used += 1;
    }
    if used == 0 {
        1.0
    } else {
        total / used as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    /// Independent route: Gaussian elimination on the normal equations.
    fn normal_equation(x: &DMatrix<f64>, y: &DMatrix<f64>, lambda: f64) -> DMatrix<f64> {
        let p = x.ncols();
        let mut a = vec![vec![0.0; p]; p];
        let mut b = vec![vec![0.0; y.ncols()]; p];
        for i in 0..p {
            for j in 0..p {
                a[i][j] = (0..x.nrows()).map(|r| x[(r, i)] * x[(r, j)]).sum();
            }
            a[i][i] += lambda;
            for q in 0..y.ncols() {
                b[i][q] = (0..x.nrows()).map(|r| x[(r, i)] * y[(r, q)]).sum();
            }
        }
        for c in 0..p {
            let piv = (c..p).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
            a.swap(c, piv);
            b.swap(c, piv);
            for r in 0..p {
                if r != c {
                    let f = a[r][c] / a[c][c];
                    for k in c..p {
                        a[r][k] -= f * a[c][k];
                    }
                    for q in 0..y.ncols() {
                        b[r][q] -= f * b[c][q];
                    }
                }
            }
        }
        DMatrix::from_fn(p, y.ncols(), |i, q| b[i][q] / a[i][i])
    }

    fn rel_frob(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).norm() / b.norm().max(1e-300)
    }

    #[test]
    fn matches_normal_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(40, 8, &mut rng);
        let y = random(40, 3, &mut rng);
        let (w, _) = ridge_fit(&x, &y, 0.5).unwrap();
        let (_, yc) = center(&y);
        assert!(rel_frob(&w, &normal_equation(&x, &yc, 0.5)) < 1e-8);
    }

    #[test]
    fn identity_design() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = DMatrix::<f64>::identity(6, 6);
        let y = random(6, 2, &mut rng);
        let (_, yc) = center(&y);
        let (w, b) = ridge_fit(&x, &y, 1e-12).unwrap();
        assert!((&w - &yc).abs().max() < 1e-8);
        let (w1, _) = ridge_fit(&x, &y, 1.0).unwrap();
        assert!((&w1 - &yc / 2.0).abs().max() < 1e-12);
        assert_eq!(b.len(), 2);
    }

    #[test]
    fn shrinkage_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(30, 5, &mut rng);
        let y = random(30, 2, &mut rng);
        let small = ridge_fit(&x, &y, 1e-3).unwrap().0.norm();
        let huge = ridge_fit(&x, &y, 1e12).unwrap().0.norm();
        assert!(huge < 1e-6 * small);
        assert_eq!(ridge_fit(&x, &y, 0.0), Err(RidgeError::BadLambda(0.0)));
    }

    #[test]
    fn standardizer_rules() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut x = random(20, 4, &mut rng);
        x.column_mut(2).fill(3.5);
        let st = Standardizer::fit(&x).unwrap();
        let z = st.apply(&x).unwrap();
        assert!(z.column(2).iter().all(|&v| v == 0.0));
        assert_eq!(st.std[2], 1.0);
        // standardizing again is a no-op
        let again = Standardizer::fit(&z).unwrap().apply(&z).unwrap();
        assert!((&again - &z).abs().max() < 1e-12);
        let held = random(5, 4, &mut rng);
        let back = st.invert(&st.apply(&held).unwrap()).unwrap();
        assert!((&back - &held).abs().max() < 1e-12);
        assert!(Standardizer::fit(&random(1, 4, &mut rng)).is_err());
    }

    #[test]
    fn prediction_rules() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(12, 12, &mut rng);
        let y = random(12, 3, &mut rng);
        let m = RidgeModel::fit(&x, &y, 1e-10).unwrap();
        assert!((m.predict(&x).unwrap() - &y).abs().max() < 1e-6);
        let mean_row = m.predict_row(&m.stats.mean.clone()).unwrap();
        for (a, b) in mean_row.iter().zip(&m.intercept) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(
            m.predict(&random(2, 5, &mut rng)),
            Err(RidgeError::ColumnMismatch { expected: 12, got: 5 })
        );
    }

    #[test]
    fn cv_picks_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random(80, 6, &mut rng);
        let w = random(6, 2, &mut rng);
        let y = &x * &w;
        let grid = default_grid();
        assert_eq!(cv_select_lambda(&x, &y, &grid, 5, 1).unwrap().lambda, 1e-4);
        let noise = random(80, 2, &mut rng);
        assert_eq!(cv_select_lambda(&x, &noise, &grid, 5, 1).unwrap().lambda, 1e4);
        assert_eq!(
            cv_select_lambda(&x, &y, &grid, 5, 1),
            cv_select_lambda(&x, &y, &grid, 5, 1)
        );
        assert!(cv_select_lambda(&random(3, 2, &mut rng), &random(3, 1, &mut rng), &grid, 5, 0).is_err());
    }

    #[test]
    fn cv_invariant_to_row_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(60, 5, &mut rng);
        let y = &x * random(5, 1, &mut rng) + random(60, 1, &mut rng) * 0.8;
        let folds = fold_labels(60, 5, 9);
        let a = cv_with_folds(&x, &[&y], &default_grid(), &folds).unwrap();
        let mut perm: Vec<usize> = (0..60).collect();
        perm.shuffle(&mut rng);
        let pf: Vec<usize> = perm.iter().map(|&i| folds[i]).collect();
        let b = cv_with_folds(&x.select_rows(&perm), &[&y.select_rows(&perm)], &default_grid(), &pf).unwrap();
        assert_eq!(a[0].lambda, b[0].lambda);
        for (m1, m2) in a[0].mse.iter().zip(&b[0].mse) {
            assert!((m1 - m2).abs() < 1e-10 * m1);
        }
    }

    #[test]
    fn json_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = RidgeModel::fit(&random(10, 3, &mut rng), &random(10, 2, &mut rng), 0.1).unwrap();
        let back: RidgeModel = serde_json::from_str(&serde_json::to_string(&m).unwrap()).unwrap();
        assert_eq!(back, m);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]

            #[test]
            fn shrinkage_is_monotone(seed in any::<u64>(), l1 in 1e-4f64..1e3, f in 1.01f64..100.0) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let x = random(25, 6, &mut rng);
                let y = random(25, 2, &mut rng);
                let a = ridge_fit(&x, &y, l1).unwrap().0.norm();
                let b = ridge_fit(&x, &y, l1 * f).unwrap().0.norm();
                prop_assert!(a >= b);
            }

            #[test]
            fn svd_path_agrees_with_normal_equations(
                seed in any::<u64>(),
                n in 2usize..100,
                p in 1usize..64,
                q in 1usize..16,
                lambda in 1e-3f64..10.0,
            ) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let x = random(n, p, &mut rng);
                let y = random(n, q, &mut rng);
                let (w, _) = ridge_fit(&x, &y, lambda).unwrap();
                let (_, yc) = center(&y);
                prop_assert!(rel_frob(&w, &normal_equation(&x, &yc, lambda)) < 1e-8);
            }
        }
    }
}
