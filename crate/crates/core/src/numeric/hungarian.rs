//! Minimum-cost rectangular assignment (shortest augmenting paths with
//! row/column potentials, O(A²·B)).

use super::mat::Mat;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `cols[row]` is the column assigned to `row`.
    pub cols: Vec<usize>,
    pub cost: f64,
}

impl Assignment {
    /// Inverse map: for each column, the row assigned to it, if any.
    pub fn rows_by_col(&self, n_cols: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; n_cols];
        for (r, &c) in self.cols.iter().enumerate() {
            out[c] = Some(r);
        }
        out
    }
}

/// Assigns every row of `cost` (A × B, A ≤ B) to a distinct column so the
/// summed cost is minimal.
pub fn hungarian_assign(cost: &Mat) -> Result<Assignment> {
    let (a, b) = cost.shape();
    if a > b {
        return Err(Error::InvalidInput(format!(
            "assignment needs rows <= cols, got {a}x{b}"
        )));
    }
    if let Some(idx) = cost.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "non-finite cost at ({}, {})",
            idx / b,
            idx % b
        )));
    }
    if a == 0 {
        return Ok(Assignment {
            cols: Vec::new(),
            cost: 0.0,
        });
    }

    // 1-based arrays; index 0 of `col_row` is the virtual source row.
    let mut u = vec![0.0f64; a + 1];
    let mut v = vec![0.0f64; b + 1];
    let mut col_row = vec![0usize; b + 1];
    let mut way = vec![0usize; b + 1];
    for row in 1..=a {
        col_row[0] = row;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; b + 1];
        let mut used = vec![false; b + 1];
        loop {
            used[j0] = true;
            let i0 = col_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=b {
                if used[j] {
                    continue;
                }
                let cur = cost.get(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=b {
                if used[j] {
                    u[col_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if col_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            col_row[j0] = col_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut cols = vec![0usize; a];
    for j in 1..=b {
        if col_row[j] != 0 {
            cols[col_row[j] - 1] = j - 1;
        }
    }
    let total = cols.iter().enumerate().map(|(r, &c)| cost.get(r, c)).sum();
    Ok(Assignment { cols, cost: total })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Exhaustive minimum over all injective row→column maps.
    pub(crate) fn brute_force_min(cost: &Mat) -> f64 {
        fn rec(cost: &Mat, row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
            if row == cost.rows() {
                *best = best.min(acc);
                return;
            }
            for c in 0..cost.cols() {
                if !used[c] {
                    used[c] = true;
                    rec(cost, row + 1, used, acc + cost.get(row, c), best);
                    used[c] = false;
                }
            }
        }
        let mut best = f64::INFINITY;
        rec(cost, 0, &mut vec![false; cost.cols()], 0.0, &mut best);
        best
    }

    #[test]
    fn single_cell() {
        let a = hungarian_assign(&Mat::from_rows(&[&[0.0]])).unwrap();
        assert_eq!(a.cols, vec![0]);
        assert_eq!(a.cost, 0.0);
    }

    #[test]
    fn two_by_two() {
        let a = hungarian_assign(&Mat::from_rows(&[&[1.0, 2.0], &[2.0, 1.0]])).unwrap();
        assert_eq!(a.cols, vec![0, 1]);
        assert_eq!(a.cost, 2.0);
    }

    #[test]
    fn rejects_non_finite_and_tall() {
        assert!(hungarian_assign(&Mat::from_rows(&[&[f64::NAN, 1.0]])).is_err());
        assert!(hungarian_assign(&Mat::from_rows(&[&[1.0], &[2.0]])).is_err());
    }

    #[test]
    fn matches_permutation_oracle_on_random_square_and_rectangular() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for trial in 0..300 {
            let a = rng.random_range(1..=6);
            let b = if trial % 2 == 0 {
                a
            } else {
                rng.random_range(a..=7)
            };
            let cost = Mat::from_fn(a, b, |_, _| rng.random_range(-5.0..5.0));
            let got = hungarian_assign(&cost).unwrap();
            let mut seen = got.cols.clone();
            seen.sort();
            seen.dedup();
            assert_eq!(seen.len(), a, "assignment must be injective");
            let sum: f64 = got
                .cols
                .iter()
                .enumerate()
                .map(|(r, &c)| cost.get(r, c))
                .sum();
            assert!((sum - got.cost).abs() < 1e-12);
            assert!(
                (got.cost - brute_force_min(&cost)).abs() < 1e-9,
                "trial {trial}"
            );
        }
    }

    #[test]
    fn handles_ties() {
        let cost = Mat::filled(4, 5, 1.0);
        let got = hungarian_assign(&cost).unwrap();
        assert_eq!(got.cost, 4.0);
    }
}
