//! Minimum-cost assignment for rectangular problems with `rows <= cols`.
//!
//! Implements the shortest-augmenting-path formulation with dual potentials
//! (the Jonker-Volgenant scheme): rows are inserted one at a time and each
//! insertion grows the matching along a cheapest alternating path. Runs in
//! `O(rows^2 * cols)` and is fully deterministic: rows are processed in
//! ascending order and column scans use strict improvement, so the lowest
//! candidate column wins ties.

use crate::tensor::Tensor;
use crate::{Error, Result};

/// Cost matrix for an assignment problem; `rows` are the items to place,
/// `cols` the slots. Reuses [`Tensor`], which already guarantees finite
/// entries at construction.
pub type CostMatrix = Tensor;

/// Returns the column assigned to each row, minimising total cost.
///
/// Errors with [`Error::Infeasible`] when `rows > cols` and with
/// [`Error::NonFinite`] if the matrix contains NaN or infinities.
pub fn solve(cost: &CostMatrix) -> Result<Vec<usize>> {
    let (rows, cols) = cost.shape();
    if rows > cols {
        return Err(Error::Infeasible(format!(
            "{rows} rows cannot be injectively assigned to {cols} columns"
        )));
    }
    cost.validate_finite("assignment cost matrix")?;
    if rows == 0 {
        return Ok(Vec::new());
    }

    // 1-indexed with a sentinel column 0; p[j] is the row matched to column j.
    let n = rows;
    let m = cols;
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];

    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            let row = cost.row_slice(i0 - 1);
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = row[j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        // Walk the alternating path back, flipping matched edges.
        while j0 != 0 {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        }
    }

    let mut assign = vec![usize::MAX; n];
    for j in 1..=m {
        if p[j] != 0 {
            assign[p[j] - 1] = j - 1;
        }
    }
    debug_assert!(assign.iter().all(|&c| c < m));
    Ok(assign)
}

/// Total cost of an assignment vector under `cost`.
#[must_use]
pub fn assignment_total(cost: &CostMatrix, assign: &[usize]) -> f64 {
    assign
        .iter()
        .enumerate()
        .map(|(r, &c)| cost.at(r, c))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::selftest::{brute_force_assignment, random_cost};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    #[test]
    fn known_square_instance() {
        let cost = Tensor::new(
            3,
            3,
            vec![4.0, 1.0, 3.0, 2.0, 0.0, 5.0, 3.0, 2.0, 2.0],
        )
        .unwrap();
        let assign = solve(&cost).unwrap();
        assert_eq!(assign, vec![1, 0, 2]);
        assert_eq!(assignment_total(&cost, &assign), 5.0);
    }

    #[test]
    fn rectangular_skips_expensive_columns() {
        let cost = Tensor::new(2, 4, vec![9.0, 9.0, 1.0, 9.0, 9.0, 9.0, 9.0, 2.0]).unwrap();
        let assign = solve(&cost).unwrap();
        assert_eq!(assign, vec![2, 3]);
    }

    #[test]
    fn more_rows_than_cols_is_infeasible() {
        let cost = Tensor::zeros(3, 2);
        assert!(matches!(solve(&cost), Err(Error::Infeasible(_))));
    }

    #[test]
    fn empty_problem_yields_empty_assignment() {
        assert_eq!(solve(&Tensor::zeros(0, 4)).unwrap(), Vec::<usize>::new());
    }

    #[test]
    fn assignment_is_injective_on_random_instances() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        for _ in 0..50 {
            let cost = random_cost(5, 8, &mut rng);
            let assign = solve(&cost).unwrap();
            let mut seen = std::collections::HashSet::new();
            for &c in &assign {
                assert!(seen.insert(c), "column {c} used twice");
            }
        }
    }

    #[test]
    fn matches_brute_force_on_a_batch() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        for case in 0..100 {
            let rows = 1 + (case % 5);
            let cols = rows + (case % 4);
            let cost = random_cost(rows, cols, &mut rng);
            let assign = solve(&cost).unwrap();
            let (_, best) = brute_force_assignment(&cost);
            let total = assignment_total(&cost, &assign);
            assert!(
                (total - best).abs() < 1e-12,
                "case {case}: total {total} vs brute force {best}"
            );
        }
    }

    proptest! {
        #[test]
        fn optimal_on_arbitrary_small_matrices(
            rows in 1usize..5,
            extra in 0usize..4,
            seed in 0u64..1_000_000,
        ) {
            let cols = rows + extra;
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let cost = random_cost(rows, cols, &mut rng);
            let assign = solve(&cost).unwrap();
            let (_, best) = brute_force_assignment(&cost);
            let total = assignment_total(&cost, &assign);
            prop_assert!((total - best).abs() < 1e-9);
        }
    }
}
