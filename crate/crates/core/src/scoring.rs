//! Attention logits, softmax and n-softmax, head averaging and observation-window trimming.
//!
//! n-softmax adds a constant `n` to the softmax denominator over the kept keys:
//!
//! ```text
//! A_i = exp(O_i) / (n + sum_{j in kept} exp(O_j))
//! ```
//!
//! Rows are evaluated after subtracting the row maximum `m` over the kept set, with `n`
//! rescaled to `n * exp(-m)` so the value equals the unshifted formula in exact arithmetic.

use crate::error::{Error, Result};
use crate::matrix::{dot, Matrix};

/// Pre-softmax scores `q_i . k_j / sqrt(d)`; rows are queries, columns keys.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits(Matrix);

impl Logits {
    pub fn new(m: Matrix) -> Result<Self> {
        if !m.is_finite() {
            return Err(Error::NonFiniteLogits);
        }
        Ok(Self(m))
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        Self::new(Matrix::from_rows(rows)?)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    pub fn rows(&self) -> usize {
        self.0.rows()
    }

    pub fn cols(&self) -> usize {
        self.0.cols()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        self.0.row(r)
    }

    /// Restricts to a subset of key columns, e.g. the keys still present in a pruned cache.
    pub fn select_cols(&self, cols: &[usize]) -> Logits {
        let rows: Vec<usize> = (0..self.rows()).collect();
        Logits(self.0.gather(&rows, cols))
    }

    /// The last `n` query rows.
    pub fn last_rows(&self, n: usize) -> Logits {
        let r0 = self.rows().saturating_sub(n);
        Logits(self.0.slice(r0, self.rows(), 0, self.cols()))
    }
}

/// Attention weights in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights(Matrix);

impl Weights {
    pub fn new(m: Matrix) -> Result<Self> {
        if m.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::DimensionMismatch {
                what: "weights outside [0, 1]",
                expected: 0,
                found: m.data().iter().filter(|v| !(0.0..=1.0).contains(*v)).count(),
            });
        }
        Ok(Self(m))
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        Self::new(Matrix::from_rows(rows)?)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    pub fn rows(&self) -> usize {
        self.0.rows()
    }

    pub fn cols(&self) -> usize {
        self.0.cols()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        self.0.row(r)
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.0.get(r, c)
    }

    pub fn column_sums(&self) -> Vec<f64> {
        self.0.column_sums()
    }
}

/// Which key columns survive in each row of an n-softmax.
#[derive(Debug, Clone, Copy)]
pub enum Kept<'a> {
    All,
    /// The same column set for every row.
    Shared(&'a [usize]),
    /// One column set per row.
    PerRow(&'a [Vec<usize>]),
}

/// `O = Q K^T / sqrt(d)` with queries `O_q x d` and keys `L x d`.
pub fn attention_logits(queries: &Matrix, keys: &Matrix) -> Result<Logits> {
    let d = queries.cols();
    if d == 0 {
        return Err(Error::ZeroHeadDim);
    }
    if keys.cols() != d {
        return Err(Error::DimensionMismatch {
            what: "query/key width",
            expected: d,
            found: keys.cols(),
        });
    }
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = Matrix::zeros(queries.rows(), keys.rows());
    for (i, q) in queries.iter_rows().enumerate() {
        let row = out.row_mut(i);
        for (j, k) in keys.iter_rows().enumerate() {
            row[j] = dot(q, k) * scale;
        }
    }
    Logits::new(out)
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(logits: &Logits) -> Weights {
    // n = 0 over all columns only fails on empty rows, which are skipped
    n_softmax_rows(logits, Kept::All, 0.0).expect("plain softmax is total")
}

/// Row-wise n-softmax; entries outside the kept set are zero.
pub fn n_softmax_rows(logits: &Logits, kept: Kept<'_>, n: f64) -> Result<Weights> {
    if !(n >= 0.0 && n.is_finite()) {
        return Err(Error::InvalidSmoothing(n));
    }
    if let Kept::PerRow(sets) = kept {
        if sets.len() != logits.rows() {
            return Err(Error::DimensionMismatch {
                what: "kept sets per row",
                expected: logits.rows(),
                found: sets.len(),
            });
        }
    }
    let all: Vec<usize> = match kept {
        Kept::All => (0..logits.cols()).collect(),
        _ => Vec::new(),
    };
    let mut out = Matrix::zeros(logits.rows(), logits.cols());
    for r in 0..logits.rows() {
        let cols: &[usize] = match kept {
            // an empty row has nothing to normalise
            Kept::All if all.is_empty() => continue,
            Kept::All => &all,
            Kept::Shared(c) => c,
            Kept::PerRow(sets) => &sets[r],
        };
        n_softmax_into(logits.row(r), cols, n, out.row_mut(r), r)?;
    }
    Ok(Weights(out))
}

/// n-softmax of a single row over `kept`, written into `dst` (zeros elsewhere).
pub fn n_softmax_row(row: &[f64], kept: &[usize], n: f64) -> Result<Vec<f64>> {
    if !(n >= 0.0 && n.is_finite()) {
        return Err(Error::InvalidSmoothing(n));
    }
    let mut dst = vec![0.0; row.len()];
    n_softmax_into(row, kept, n, &mut dst, 0)?;
    Ok(dst)
}

fn n_softmax_into(row: &[f64], kept: &[usize], n: f64, dst: &mut [f64], r: usize) -> Result<()> {
    if let Some(&bad) = kept.iter().find(|&&j| j >= row.len()) {
        return Err(Error::IndexOutOfRange {
            index: bad,
            len: row.len(),
        });
    }
    if kept.is_empty() {
        if n == 0.0 {
            return Err(Error::EmptyKeptSet { row: r });
        }
        return Ok(());
    }
    let max = kept.iter().map(|&j| row[j]).fold(f64::NEG_INFINITY, f64::max);
    let mut denom: f64 = kept.iter().map(|&j| (row[j] - max).exp()).sum();
    if n > 0.0 {
        denom += n * (-max).exp();
    }
    for &j in kept {
        dst[j] = (row[j] - max).exp() / denom;
    }
    Ok(())
}

/// Element-wise mean over a stack of congruent weight matrices.
pub fn head_average(heads: &[Weights]) -> Result<Weights> {
    let first = heads.first().ok_or(Error::NoHeads)?;
    let (rows, cols) = (first.rows(), first.cols());
    let mut acc = Matrix::zeros(rows, cols);
    for h in heads {
        if h.rows() != rows || h.cols() != cols {
            return Err(Error::DimensionMismatch {
                what: "head shape",
                expected: rows * cols,
                found: h.rows() * h.cols(),
            });
        }
        for r in 0..rows {
            for (a, v) in acc.row_mut(r).iter_mut().zip(h.row(r)) {
                *a += v;
            }
        }
    }
    let scale = 1.0 / heads.len() as f64;
    for r in 0..rows {
        for a in acc.row_mut(r) {
            *a *= scale;
        }
    }
    Ok(Weights(acc))
}

/// Last `min(obs, rows)` query rows and the first `cols - recent` key columns.
pub fn trim_observation(weights: &Weights, obs: usize, recent: usize) -> Result<Weights> {
    let (rows, cols) = (weights.rows(), weights.cols());
    if recent >= cols {
        return Err(Error::RecentWindowTooLarge { recent, len: cols });
    }
    let r0 = rows.saturating_sub(obs);
    Ok(Weights(weights.0.slice(r0, rows, 0, cols - recent)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn logits_unit_dot() {
        let q = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        let k = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        let q1 = Matrix::from_rows(&[[1.0]]).unwrap();
        let k1 = Matrix::from_rows(&[[1.0]]).unwrap();
        assert_eq!(attention_logits(&q1, &k1).unwrap().row(0), &[1.0]);
        let two = attention_logits(&q, &k).unwrap();
        assert!((two.row(0)[0] - 1.0 / 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn logits_scaled_by_sqrt_d() {
        let q = Matrix::from_rows(&[[2.0, 0.0, 0.0, 0.0]]).unwrap();
        let k = Matrix::from_rows(&[[2.0, 0.0, 0.0, 0.0]]).unwrap();
        assert_eq!(attention_logits(&q, &k).unwrap().row(0), &[2.0]);
    }

    #[test]
    fn logits_match_elementwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q: Vec<Vec<f64>> = (0..3).map(|_| (0..2).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let k: Vec<Vec<f64>> = (0..5).map(|_| (0..2).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let got = attention_logits(&Matrix::from_rows(&q).unwrap(), &Matrix::from_rows(&k).unwrap()).unwrap();
        for i in 0..3 {
            for j in 0..5 {
                let mut acc = 0.0;
                for t in 0..2 {
                    acc += q[i][t] * k[j][t];
                }
                assert!((got.row(i)[j] - acc / 2f64.sqrt()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn logits_dimension_errors() {
        let q = Matrix::zeros(2, 3);
        assert!(matches!(
            attention_logits(&q, &Matrix::zeros(4, 2)),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(matches!(
            attention_logits(&Matrix::zeros(2, 0), &Matrix::zeros(4, 0)),
            Err(Error::ZeroHeadDim)
        ));
    }

    #[test]
    fn softmax_examples() {
        let w = softmax_rows(&Logits::from_rows(&[[0.0, 0.0]]).unwrap());
        assert!(close(w.row(0), &[0.5, 0.5], 1e-15));
        let w = softmax_rows(&Logits::from_rows(&[[2f64.ln(), 0.0]]).unwrap());
        assert!(close(w.row(0), &[2.0 / 3.0, 1.0 / 3.0], 1e-15));
        // reference values from a 50-digit evaluation
        let w = softmax_rows(&Logits::from_rows(&[[1.0, 2.0, 3.0]]).unwrap());
        assert!(close(w.row(0), &[0.09003057, 0.24472847, 0.66524096], 1e-8));
    }

    #[test]
    fn softmax_empty_rows() {
        let w = softmax_rows(&Logits::new(Matrix::zeros(2, 0)).unwrap());
        assert_eq!(w.rows(), 2);
        assert_eq!(w.cols(), 0);
    }

    #[test]
    fn softmax_survives_large_logits() {
        let w = softmax_rows(&Logits::from_rows(&[[1000.0, 1000.0, -1000.0]]).unwrap());
        assert!(close(w.row(0), &[0.5, 0.5, 0.0], 1e-15));
    }

    #[test]
    fn n_softmax_examples() {
        assert!(close(&n_softmax_row(&[0.0], &[0], 1.0).unwrap(), &[0.5], 1e-15));
        assert!(close(&n_softmax_row(&[0.0, 0.0], &[0, 1], 0.0).unwrap(), &[0.5, 0.5], 1e-15));
        assert!(close(&n_softmax_row(&[0.0, 0.0], &[0, 1], 2.0).unwrap(), &[0.25, 0.25], 1e-15));
    }

    #[test]
    fn n_softmax_empty_kept() {
        assert!(matches!(
            n_softmax_row(&[1.0, 2.0], &[], 0.0),
            Err(Error::EmptyKeptSet { .. })
        ));
        assert_eq!(n_softmax_row(&[1.0, 2.0], &[], 1.0).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn n_softmax_rejects_bad_input() {
        assert!(matches!(n_softmax_row(&[1.0], &[3], 1.0), Err(Error::IndexOutOfRange { .. })));
        assert!(matches!(n_softmax_row(&[1.0], &[0], -1.0), Err(Error::InvalidSmoothing(_))));
        let l = Logits::from_rows(&[[0.0], [1.0]]).unwrap();
        let sets = vec![vec![0]];
        assert!(n_softmax_rows(&l, Kept::PerRow(&sets), 1.0).is_err());
    }

    #[test]
    fn n_softmax_large_logits_match_formula() {
        // exp(700) is finite, so compare the stabilised value against the literal formula
        let row = [700.0, 699.0];
        let got = n_softmax_row(&row, &[0, 1], 1.0).unwrap();
        let den = 1.0 + 700f64.exp() + 699f64.exp();
        assert!((got[0] - 700f64.exp() / den).abs() < 1e-15);
        // beyond exp range the stabilised form stays finite
        let got = n_softmax_row(&[5000.0, 5000.0], &[0, 1], 1.0).unwrap();
        assert!(close(&got, &[0.5, 0.5], 1e-15));
    }

    #[test]
    fn per_row_and_shared_kept_sets() {
        let l = Logits::from_rows(&[[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]]).unwrap();
        let shared = n_softmax_rows(&l, Kept::Shared(&[0, 2]), 0.0).unwrap();
        assert!(close(shared.row(1), &[0.5, 0.0, 0.5], 1e-15));
        let sets = vec![vec![1], vec![0, 1, 2]];
        let per = n_softmax_rows(&l, Kept::PerRow(&sets), 0.0).unwrap();
        assert!(close(per.row(0), &[0.0, 1.0, 0.0], 1e-15));
        assert!(close(per.row(1), &[1.0 / 3.0; 3], 1e-15));
    }

    #[test]
    fn head_average_examples() {
        let h = Weights::from_rows(&[[0.2, 0.8]]).unwrap();
        assert_eq!(head_average(&[h.clone(), h.clone()]).unwrap(), h);
        let a = Weights::from_rows(&[[0.0, 1.0]]).unwrap();
        let b = Weights::from_rows(&[[1.0, 0.0]]).unwrap();
        assert_eq!(head_average(&[a, b]).unwrap().row(0), &[0.5, 0.5]);
    }

    #[test]
    fn head_average_matches_accumulation_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let stack: Vec<Vec<Vec<f64>>> = (0..4)
            .map(|_| (0..2).map(|_| (0..3).map(|_| rng.random::<f64>()).collect()).collect())
            .collect();
        let heads: Vec<Weights> = stack.iter().map(|h| Weights::from_rows(h).unwrap()).collect();
        let avg = head_average(&heads).unwrap();
        for r in 0..2 {
            for c in 0..3 {
                let mut s = 0.0;
                for h in &stack {
                    s += h[r][c];
                }
                assert!((avg.get(r, c) - s / 4.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn head_average_errors() {
        assert!(matches!(head_average(&[]), Err(Error::NoHeads)));
        let a = Weights::from_rows(&[[0.5, 0.5]]).unwrap();
        let b = Weights::from_rows(&[[1.0]]).unwrap();
        assert!(head_average(&[a, b]).is_err());
    }

    #[test]
    fn trim_examples() {
        let w = Weights::new(Matrix::from_vec(3, 4, (0..12).map(|v| v as f64 / 12.0).collect()).unwrap()).unwrap();
        let t = trim_observation(&w, 2, 1).unwrap();
        assert_eq!((t.rows(), t.cols()), (2, 3));
        assert_eq!(t.row(0), &w.row(1)[..3]);
        assert_eq!(t.row(1), &w.row(2)[..3]);
        let all = trim_observation(&w, 10, 0).unwrap();
        assert_eq!(all, w);
        assert!(matches!(
            trim_observation(&w, 2, 4),
            Err(Error::RecentWindowTooLarge { recent: 4, len: 4 })
        ));
    }

    proptest! {
        #[test]
        fn softmax_translation_invariant(
            row in proptest::collection::vec(-20.0f64..20.0, 1..32),
            c in -50.0f64..50.0,
        ) {
            let a = softmax_rows(&Logits::from_rows(&[row.clone()]).unwrap());
            let shifted: Vec<f64> = row.iter().map(|v| v + c).collect();
            let b = softmax_rows(&Logits::from_rows(&[shifted]).unwrap());
            prop_assert!(close(a.row(0), b.row(0), 1e-12));
        }

        #[test]
        fn softmax_is_monotone(row in proptest::collection::vec(-20.0f64..20.0, 2..32)) {
            let w = softmax_rows(&Logits::from_rows(&[row.clone()]).unwrap());
            for i in 0..row.len() {
                for j in 0..row.len() {
                    if row[i] > row[j] {
                        prop_assert!(w.row(0)[i] >= w.row(0)[j]);
                    }
                }
            }
        }

        #[test]
        fn n_softmax_non_increasing_in_n(
            row in proptest::collection::vec(-10.0f64..10.0, 1..24),
            n1 in 0.0f64..5.0,
            dn in 0.0f64..5.0,
        ) {
            let kept: Vec<usize> = (0..row.len()).step_by(2).collect();
            let a = n_softmax_row(&row, &kept, n1).unwrap();
            let b = n_softmax_row(&row, &kept, n1 + dn).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!(y <= x);
            }
            let sum: f64 = b.iter().sum();
            if n1 + dn > 0.0 {
                prop_assert!(sum < 1.0);
            }
        }

        #[test]
        fn pruned_mass_as_n_recovers_full_weights(
            row in proptest::collection::vec(-30.0f64..30.0, 2..40),
            seed in 0usize..1000,
        ) {
            let kept: Vec<usize> = (0..row.len()).filter(|i| (i * 7 + seed) % 3 != 0).collect();
            prop_assume!(!kept.is_empty() && kept.len() < row.len());
            let n: f64 = (0..row.len()).filter(|i| !kept.contains(i)).map(|i| row[i].exp()).sum();
            let full = softmax_rows(&Logits::from_rows(&[row.clone()]).unwrap());
            let got = n_softmax_row(&row, &kept, n).unwrap();
            for &i in &kept {
                prop_assert!((got[i] - full.row(0)[i]).abs() < 1e-9);
            }
        }

        #[test]
        fn pruning_sharpens_kept_weights(
            row in proptest::collection::vec(-10.0f64..10.0, 2..40),
            drop in 1usize..5,
        ) {
            let kept: Vec<usize> = (drop.min(row.len() - 1)..row.len()).collect();
            let full = softmax_rows(&Logits::from_rows(&[row.clone()]).unwrap());
            let sub = n_softmax_row(&row, &kept, 0.0).unwrap();
            for &i in &kept {
                prop_assert!(sub[i] >= full.row(0)[i]);
            }
        }
    }
}
