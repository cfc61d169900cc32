use crate::error::{Error, Result};

/// Bilateral exposure matrix; `a[i * n + j]` is the exposure of `i` to `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExposureMatrix {
    pub n: usize,
    pub a: Vec<f64>,
    pub row_marginals: Vec<f64>,
    pub col_marginals: Vec<f64>,
}

impl ExposureMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.a[i * self.n + j]
    }

    pub fn row_sum(&self, i: usize) -> f64 {
        self.a[i * self.n..(i + 1) * self.n].iter().sum()
    }

    pub fn col_sum(&self, j: usize) -> f64 {
        (0..self.n).map(|i| self.a[i * self.n + j]).sum()
    }

    /// Largest relative marginal violation over rows and columns (zero targets count
    /// the absolute sum).
    pub fn residual(&self) -> f64 {
        let rel = |sum: f64, target: f64| {
            if target > 0.0 {
                (sum - target).abs() / target
            } else {
                sum.abs()
            }
        };
        let rows = (0..self.n).map(|i| rel(self.row_sum(i), self.row_marginals[i]));
        let cols = (0..self.n).map(|j| rel(self.col_sum(j), self.col_marginals[j]));
        rows.chain(cols).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RasOutcome {
    pub matrix: ExposureMatrix,
    pub iterations: usize,
    pub residual: f64,
    /// Residual after each completed sweep.
    pub history: Vec<f64>,
}

/// Maximum-entropy exposure matrix with zero diagonal matching the given marginals,
/// by iterative proportional fitting (alternating row and column scaling).
///
/// Starts from `a[i][j] = r_i c_j / sum(r)` off the diagonal. Converged when every
/// row and column sum is within `tol` (relative) of its target.
pub fn ras_reconstruct(
    rows: &[f64],
    cols: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<RasOutcome> {
    let n = rows.len();
    if cols.len() != n {
        return Err(Error::InvalidArgument(format!(
            "{} row marginals vs {} column marginals",
            n,
            cols.len()
        )));
    }
    if n < 2 {
        return Err(Error::InvalidArgument(
            "RAS needs at least 2 nodes; a single node has no off-diagonal cell".into(),
        ));
    }
    if let Some(v) = rows
        .iter()
        .chain(cols)
        .find(|v| !(v.is_finite() && **v >= 0.0))
    {
        return Err(Error::InvalidArgument(format!(
            "marginal {v} is negative or non-finite"
        )));
    }
    let total_r: f64 = rows.iter().sum();
    let total_c: f64 = cols.iter().sum();
    if total_r == 0.0 && total_c == 0.0 {
        let matrix = ExposureMatrix {
            n,
            a: vec![0.0; n * n],
            row_marginals: rows.to_vec(),
            col_marginals: cols.to_vec(),
        };
        return Ok(RasOutcome {
            matrix,
            iterations: 0,
            residual: 0.0,
            history: vec![],
        });
    }
    if (total_r - total_c).abs() / total_r.max(total_c) > 1e-6 {
        return Err(Error::InvalidArgument(format!(
            "marginal totals differ: rows {total_r}, columns {total_c}; rescale columns first"
        )));
    }

    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                a[i * n + j] = rows[i] * cols[j] / total_r;
            }
        }
    }
    let mut matrix = ExposureMatrix {
        n,
        a,
        row_marginals: rows.to_vec(),
        col_marginals: cols.to_vec(),
    };
    let mut history = Vec::new();
    let mut residual = matrix.residual();
    if residual <= tol {
        return Ok(RasOutcome {
            matrix,
            iterations: 0,
            residual,
            history,
        });
    }
    let mut col_sums = vec![0.0; n];
    for iter in 1..=max_iter {
        let a = &mut matrix.a;
        for i in 0..n {
            let row = &mut a[i * n..(i + 1) * n];
            let s: f64 = row.iter().sum();
            if rows[i] == 0.0 {
                row.iter_mut().for_each(|v| *v = 0.0);
            } else if s > 0.0 {
                let f = rows[i] / s;
                row.iter_mut().for_each(|v| *v *= f);
            }
        }
        col_sums.iter_mut().for_each(|s| *s = 0.0);
        for i in 0..n {
            for (s, v) in col_sums.iter_mut().zip(&a[i * n..(i + 1) * n]) {
                *s += v;
            }
        }
        let factors: Vec<f64> = (0..n)
            .map(|j| {
                if cols[j] == 0.0 {
                    0.0
                } else if col_sums[j] > 0.0 {
                    cols[j] / col_sums[j]
                } else {
                    1.0
                }
            })
            .collect();
        for i in 0..n {
            for (v, f) in a[i * n..(i + 1) * n].iter_mut().zip(&factors) {
                *v *= f;
            }
            a[i * n + i] = 0.0;
        }
        residual = matrix.residual();
        history.push(residual);
        if residual <= tol {
            return Ok(RasOutcome {
                matrix,
                iterations: iter,
                residual,
                history,
            });
        }
    }
    Err(Error::NonConvergence {
        iterations: max_iter,
        residual,
    })
}

/// Rescales column marginals so their total equals the row total.
///
/// Returns the rescaled columns and the factor applied.
pub fn balance_columns(rows: &[f64], cols: &[f64]) -> (Vec<f64>, f64) {
    let tr: f64 = rows.iter().sum();
    let tc: f64 = cols.iter().sum();
    if tc == 0.0 || tr == tc {
        return (cols.to_vec(), 1.0);
    }
    let f = tr / tc;
    if ((tr - tc) / tr.max(tc)).abs() > 1e-6 {
        log::warn!(
            "interbank totals differ (assets {tr}, liabilities {tc}); rescaling liabilities by {f}"
        );
    }
    (cols.iter().map(|c| c * f).collect(), f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn two_nodes_forced_solution() {
        let out = ras_reconstruct(&[10.0, 20.0], &[20.0, 10.0], 1e-8, 10_000).unwrap();
        assert_eq!(out.matrix.a, vec![0.0, 10.0, 20.0, 0.0]);
    }

    /// Independent IPF written directly from the fixed-point definition with full
    /// matrix recomputation at each half-step.
    fn reference_ipf(rows: &[f64], cols: &[f64], tol: f64) -> Vec<Vec<f64>> {
        let n = rows.len();
        let mut m: Vec<Vec<f64>> = (0..n)
            .map(|i| (0..n).map(|j| if i == j { 0.0 } else { 1.0 }).collect())
            .collect();
        for _ in 0..100_000 {
            for i in 0..n {
                let s: f64 = m[i].iter().sum();
                if s > 0.0 {
                    for v in m[i].iter_mut() {
                        *v *= rows[i] / s;
                    }
                }
            }
            for j in 0..n {
                let s: f64 = (0..n).map(|i| m[i][j]).sum();
                if s > 0.0 {
                    for row in m.iter_mut() {
                        row[j] *= cols[j] / s;
                    }
                }
            }
            let worst = (0..n)
                .map(|i| (m[i].iter().sum::<f64>() - rows[i]).abs())
                .fold(0.0, f64::max);
            if worst < tol {
                break;
            }
        }
        m
    }

    #[test]
    fn three_unit_nodes_give_halves() {
        let ones = [1.0, 1.0, 1.0];
        let out = ras_reconstruct(&ones, &ones, 1e-12, 10_000).unwrap();
        let oracle = reference_ipf(&ones, &ones, 1e-13);
        for i in 0..3 {
            for j in 0..3 {
                let v = out.matrix.get(i, j);
                assert!((v - oracle[i][j]).abs() < 1e-10);
                assert!((v - out.matrix.get(j, i)).abs() < 1e-12);
                let expected = if i == j { 0.0 } else { 0.5 };
                assert!((v - expected).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn ras_matches_reference_ipf_on_asymmetric_case() {
        let rows = [3.0, 1.0, 4.0, 2.0];
        let cols = [2.5, 2.5, 1.0, 4.0];
        let out = ras_reconstruct(&rows, &cols, 1e-12, 10_000).unwrap();
        // The ME solution does not depend on the positive starting point.
        let oracle = reference_ipf(&rows, &cols, 1e-13);
        for i in 0..4 {
            for j in 0..4 {
                assert!((out.matrix.get(i, j) - oracle[i][j]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn zero_marginals_annihilate() {
        // The solution sits on the boundary (a[2][1] -> 0), so convergence is sublinear.
        let out = ras_reconstruct(&[5.0, 0.0, 5.0], &[5.0, 5.0, 0.0], 1e-4, 10_000).unwrap();
        let m = &out.matrix;
        assert!((0..3).all(|j| m.get(1, j) == 0.0));
        assert!((0..3).all(|i| m.get(i, 2) == 0.0));
        assert!(out.residual <= 1e-4);
    }

    #[test]
    fn single_node_is_an_error() {
        assert!(ras_reconstruct(&[1.0], &[1.0], 1e-8, 100).is_err());
    }

    #[test]
    fn infeasible_concentration_does_not_converge() {
        // Node 0 needs 9 of exposure to others, but the others can only absorb 2.
        let err = ras_reconstruct(&[9.0, 1.0, 1.0], &[9.0, 1.0, 1.0], 1e-8, 200).unwrap_err();
        assert!(matches!(
            err,
            Error::NonConvergence {
                iterations: 200,
                ..
            }
        ));
    }

    #[test]
    fn mismatched_totals_are_rejected() {
        let rows = [2.0, 2.0, 2.0];
        assert!(ras_reconstruct(&rows, &[1.0, 1.0, 1.0], 1e-8, 100).is_err());
        let (cols, f) = balance_columns(&rows, &[1.0, 1.0, 1.0]);
        assert_eq!(f, 2.0);
        assert!(ras_reconstruct(&rows, &cols, 1e-8, 1000).is_ok());
    }

    /// Marginals of a random strictly positive off-diagonal matrix, so a strictly
    /// interior solution exists.
    fn feasible_marginals() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (3usize..12).prop_flat_map(|n| {
            prop::collection::vec(0.1f64..10.0, n * n).prop_map(move |cells| {
                let mut rows = vec![0.0; n];
                let mut cols = vec![0.0; n];
                for i in 0..n {
                    for j in 0..n {
                        if i != j {
                            rows[i] += cells[i * n + j];
                            cols[j] += cells[i * n + j];
                        }
                    }
                }
                (rows, cols)
            })
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn residual_never_increases((rows, cols) in feasible_marginals()) {
            let out = ras_reconstruct(&rows, &cols, 1e-10, 10_000).unwrap();
            for w in out.history.windows(2) {
                prop_assert!(w[1] <= w[0] * (1.0 + 1e-9) + 1e-15, "{:?}", w);
            }
        }

        #[test]
        fn scaling_marginals_scales_matrix((rows, cols) in feasible_marginals(), c in 0.01f64..1e4) {
            let base = ras_reconstruct(&rows, &cols, 1e-10, 10_000).unwrap();
            let r2: Vec<f64> = rows.iter().map(|v| v * c).collect();
            let c2: Vec<f64> = cols.iter().map(|v| v * c).collect();
            let scaled = ras_reconstruct(&r2, &c2, 1e-10, 10_000).unwrap();
            for (a, b) in base.matrix.a.iter().zip(&scaled.matrix.a) {
                prop_assert!((a * c - b).abs() <= 1e-10 * (a * c).abs().max(1e-12));
            }
        }
    }
}
