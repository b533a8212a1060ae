//! Independent oracles for the numeric core.
//!
//! Everything here deliberately avoids the code paths it checks: gradients
//! are approximated by central finite differences, assignments by exhaustive
//! enumeration. The `fedprompt selftest` subcommand runs the suites; the
//! acceptance tests run them with pinned sizes and seeds.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::tensor::Tensor;

mod suites;
pub use suites::{assignment_suite, gradcheck_suite, hungarian_suite, topk_suite};

/// Central finite-difference gradient of `eval` at `params`.
///
/// Returns one tensor of partial derivatives per parameter, in order. `eval`
/// must be a pure function of the parameter values.
pub fn fd_gradient(
    eval: &impl Fn(&[Tensor]) -> f64,
    params: &[Tensor],
    eps: f64,
) -> Vec<Tensor> {
    let mut work: Vec<Tensor> = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut grad = Tensor::zeros(params[p].rows(), params[p].cols());
        for idx in 0..params[p].len() {
            let orig = work[p].data()[idx];
            work[p].data_mut()[idx] = orig + eps;
            let plus = eval(&work);
            work[p].data_mut()[idx] = orig - eps;
            let minus = eval(&work);
            work[p].data_mut()[idx] = orig;
            grad.data_mut()[idx] = (plus - minus) / (2.0 * eps);
        }
        out.push(grad);
    }
    out
}

/// `|a - b| / max(|a|, |b|, 1e-6)`, so near-zero pairs compare absolutely.
#[must_use]
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Worst [`rel_err`] over all entries of two same-shaped tensors.
#[must_use]
pub fn max_rel_err(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape(), "max_rel_err shape mismatch");
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| rel_err(x, y))
        .fold(0.0, f64::max)
}

/// Minimum-cost injective row-to-column assignment by exhaustive enumeration.
///
/// Enumerates rows in order and candidate columns in ascending order, keeping
/// the first optimum found, so the result is the lexicographically smallest
/// minimiser. Only usable for small instances; cost grows as `cols!/(cols-rows)!`.
#[must_use]
pub fn brute_force_assignment(cost: &Tensor) -> (Vec<usize>, f64) {
    let (rows, cols) = cost.shape();
    assert!(rows <= cols, "brute force needs rows <= cols");
    let mut best: Option<(Vec<usize>, f64)> = None;
    let mut current = vec![usize::MAX; rows];
    let mut used = vec![false; cols];
    recurse(cost, 0, 0.0, &mut current, &mut used, &mut best);
    best.expect("at least one assignment exists when rows <= cols")
}

fn recurse(
    cost: &Tensor,
    row: usize,
    acc: f64,
    current: &mut Vec<usize>,
    used: &mut Vec<bool>,
    best: &mut Option<(Vec<usize>, f64)>,
) {
    if row == cost.rows() {
        if best.as_ref().is_none_or(|(_, b)| acc < *b) {
            *best = Some((current.clone(), acc));
        }
        return;
    }
    for col in 0..cost.cols() {
        if used[col] {
            continue;
        }
        used[col] = true;
        current[row] = col;
        recurse(cost, row + 1, acc + cost.at(row, col), current, used, best);
        used[col] = false;
    }
    current[row] = usize::MAX;
}

/// Uniform random cost matrix with entries in `[0, 1)`.
#[must_use]
pub fn random_cost(rows: usize, cols: usize, rng: &mut ChaCha12Rng) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.random::<f64>())
}

/// One oracle suite's outcome.
#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub name: &'static str,
    pub cases: usize,
    pub failures: usize,
    /// Worst observed discrepancy, in the suite's own units.
    pub worst: f64,
    pub detail: String,
}

impl SuiteReport {
    #[must_use]
    pub fn passed(&self) -> bool {
        self.failures == 0
    }

    #[must_use]
    pub fn line(&self) -> String {
        format!(
            "{}: {} ({}/{} cases, worst {:.3e}{})",
            self.name,
            if self.passed() { "ok" } else { "FAILED" },
            self.cases - self.failures,
            self.cases,
            self.worst,
            if self.detail.is_empty() {
                String::new()
            } else {
                format!(", {}", self.detail)
            },
        )
    }
}

/// Deterministic RNG for a named suite.
#[must_use]
pub fn suite_rng(seed: u64, salt: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fd_gradient_of_quadratic() {
        let p = Tensor::row(vec![3.0, -2.0]).unwrap();
        let eval = |ps: &[Tensor]| ps[0].data().iter().map(|v| v * v).sum::<f64>();
        let g = fd_gradient(&eval, &[p], 1e-5);
        assert!((g[0].at(0, 0) - 6.0).abs() < 1e-8);
        assert!((g[0].at(0, 1) + 4.0).abs() < 1e-8);
    }

    #[test]
    fn brute_force_on_known_matrix() {
        // Row 0 prefers col 1, row 1 prefers col 1 too; optimum splits them.
        let cost = Tensor::new(2, 3, vec![4.0, 1.0, 3.0, 2.0, 0.0, 5.0]).unwrap();
        let (assign, total) = brute_force_assignment(&cost);
        assert_eq!(assign, vec![1, 0]);
        assert_eq!(total, 3.0);
    }

    #[test]
    fn brute_force_prefers_lexicographic_on_ties() {
        let cost = Tensor::new(2, 2, vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        let (assign, total) = brute_force_assignment(&cost);
        assert_eq!(assign, vec![0, 1]);
        assert_eq!(total, 2.0);
    }
}
