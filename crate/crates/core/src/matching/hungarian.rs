//! Minimum-cost assignment between object tokens (rows) and segments
//! (columns).
//!
//! Among optimal assignments the lexicographically smallest is returned,
//! comparing per-token choices in token order with "unmatched" ordered after
//! every segment. Costs within [`tie_tolerance`] of the optimum count as
//! ties. Both solvers apply the same rule, so they agree on the assignment
//! and not only on its cost.

use crate::error::{Error, Result};
use crate::numcore::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    /// `(token, segment)` pairs in token order.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched: Vec<usize>,
    pub cost: f64,
}

impl Assignment {
    fn from_choice(cost: &Tensor, choice: &[Option<usize>]) -> Self {
        let mut pairs = Vec::new();
        let mut unmatched = Vec::new();
        for (k, c) in choice.iter().enumerate() {
            match c {
                Some(s) => pairs.push((k, *s)),
                None => unmatched.push(k),
            }
        }
        let total = pairs.iter().map(|&(k, s)| cost.at2(k, s)).sum();
        Assignment {
            pairs,
            unmatched,
            cost: total,
        }
    }

    /// Token assigned to segment `s`, if any.
    pub fn token_for(&self, s: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.1 == s).map(|p| p.0)
    }

    pub fn segment_for(&self, k: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.0 == k).map(|p| p.1)
    }
}

/// Absolute slack under which two assignment costs are treated as equal.
pub fn tie_tolerance(optimum: f64) -> f64 {
    1e-9 * optimum.abs().max(1.0)
}

fn check(cost: &Tensor) -> Result<()> {
    if cost.rank() != 2 {
        return Err(Error::shape("hungarian", cost.shape(), &[]));
    }
    if !cost.is_finite() {
        return Err(Error::NonFinite("assignment cost matrix".into()));
    }
    Ok(())
}

/// Optimal cost of matching `min(rows, cols)` pairs within the given
/// sub-matrix, by the shortest augmenting path method with potentials.
fn optimal_cost(cost: &Tensor, rows: &[usize], cols: &[usize]) -> f64 {
    if rows.is_empty() || cols.is_empty() {
        return 0.0;
    }
    let transpose = rows.len() > cols.len();
    let (r, c) = if transpose { (cols, rows) } else { (rows, cols) };
    let a = |i: usize, j: usize| if transpose { cost.at2(c[j], r[i]) } else { cost.at2(r[i], c[j]) };
    let (n, m) = (r.len(), c.len());
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = a(i0 - 1, j - 1) - u[i0] - v[j];
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
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    (1..=m).filter(|&j| p[j] != 0).map(|j| a(p[j] - 1, j - 1)).sum()
}

/// Minimum-cost assignment of `min(M, S)` pairs for an `M×S` cost matrix.
pub fn hungarian(cost: &Tensor) -> Result<Assignment> {
    check(cost)?;
    let (m, s) = (cost.rows(), cost.cols());
    let all_rows: Vec<usize> = (0..m).collect();
    let all_cols: Vec<usize> = (0..s).collect();
    let optimum = optimal_cost(cost, &all_rows, &all_cols);
    let tol = tie_tolerance(optimum);

    // Fix tokens one at a time to the smallest choice that keeps the optimum reachable.
    let mut choice = Vec::with_capacity(m);
    let mut free_cols = all_cols;
    let mut spent = 0.0;
    for k in 0..m {
        let rest: Vec<usize> = (k + 1..m).collect();
        let mut picked = None;
        for (idx, &col) in free_cols.iter().enumerate() {
            let mut remaining = free_cols.clone();
            remaining.remove(idx);
            if m >= s && rest.len() < remaining.len() {
                continue;
            }
            let total = spent + cost.at2(k, col) + optimal_cost(cost, &rest, &remaining);
            if total <= optimum + tol {
                picked = Some((idx, col));
                break;
            }
        }
        match picked {
            Some((idx, col)) => {
                spent += cost.at2(k, col);
                free_cols.remove(idx);
                choice.push(Some(col));
            }
            None => choice.push(None),
        }
    }
    Ok(Assignment::from_choice(cost, &choice))
}

/// Largest smaller side accepted by [`brute_force_assignment`].
pub const BRUTE_FORCE_MIN_SIDE: usize = 8;
/// Largest larger side accepted by [`brute_force_assignment`].
pub const BRUTE_FORCE_MAX_SIDE: usize = 12;

/// Exhaustive search over all injections, with the same tie rule as
/// [`hungarian`].
pub fn brute_force_assignment(cost: &Tensor) -> Result<Assignment> {
    check(cost)?;
    let (m, s) = (cost.rows(), cost.cols());
    if m.min(s) > BRUTE_FORCE_MIN_SIDE {
        return Err(Error::OracleTooLarge {
            size: m.min(s),
            limit: BRUTE_FORCE_MIN_SIDE,
        });
    }
    if m.max(s) > BRUTE_FORCE_MAX_SIDE {
        return Err(Error::OracleTooLarge {
            size: m.max(s),
            limit: BRUTE_FORCE_MAX_SIDE,
        });
    }
    let target = m.min(s);
    let mut best = f64::INFINITY;
    enumerate(cost, target, &mut |_, c| best = best.min(c));
    let tol = tie_tolerance(best);
    let mut first: Option<Vec<Option<usize>>> = None;
    enumerate(cost, target, &mut |choice, c| {
        if first.is_none() && c <= best + tol {
            first = Some(choice.to_vec());
        }
    });
    Ok(Assignment::from_choice(cost, &first.expect("at least one injection")))
}

/// Visits every per-token choice vector with exactly `target` pairs, in
/// lexicographic order (segments before "unmatched").
fn enumerate(cost: &Tensor, target: usize, visit: &mut impl FnMut(&[Option<usize>], f64)) {
    #[allow(clippy::too_many_arguments)]
    fn rec(
        cost: &Tensor,
        k: usize,
        target: usize,
        used: &mut Vec<bool>,
        choice: &mut Vec<Option<usize>>,
        pairs: usize,
        acc: f64,
        visit: &mut impl FnMut(&[Option<usize>], f64),
    ) {
        let m = cost.rows();
        if k == m {
            if pairs == target {
                visit(choice, acc);
            }
            return;
        }
        if pairs + (m - k) < target {
            return;
        }
        for s in 0..cost.cols() {
            if used[s] || pairs == target {
                continue;
            }
            used[s] = true;
            choice.push(Some(s));
            rec(cost, k + 1, target, used, choice, pairs + 1, acc + cost.at2(k, s), visit);
            choice.pop();
            used[s] = false;
        }
        choice.push(None);
        rec(cost, k + 1, target, used, choice, pairs, acc, visit);
        choice.pop();
    }
    let mut used = vec![false; cost.cols()];
    rec(cost, 0, target, &mut used, &mut Vec::new(), 0, 0.0, visit);
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn random(m: usize, s: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::new(vec![m, s], (0..m * s).map(|_| rng.random_range(0.0..10.0)).collect()).unwrap()
    }

    #[test]
    fn small_examples() {
        let a = hungarian(&t(&[&[1.0, 2.0], &[2.0, 1.0]])).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(a.cost, 2.0);
        let a = hungarian(&t(&[&[4.0, 1.0], &[2.0, 3.0]])).unwrap();
        assert_eq!(a.pairs, vec![(0, 1), (1, 0)]);
        assert_eq!(a.cost, 3.0);
        assert_eq!(brute_force_assignment(&t(&[&[4.0, 1.0], &[2.0, 3.0]])).unwrap(), a);
    }

    #[test]
    fn brute_force_examples() {
        let a = brute_force_assignment(&t(&[&[7.5]])).unwrap();
        assert_eq!(a.pairs, vec![(0, 0)]);
        let id = t(&[&[0.0, 1.0, 1.0], &[1.0, 0.0, 1.0], &[1.0, 1.0, 0.0]]);
        let a = brute_force_assignment(&id).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1), (2, 2)]);
        assert_eq!(a.cost, 0.0);
        assert!(matches!(
            brute_force_assignment(&Tensor::zeros(&[9, 9])),
            Err(Error::OracleTooLarge { .. })
        ));
    }

    #[test]
    fn rectangular_and_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = random(5, 3, &mut rng);
        let (h, b) = (hungarian(&c).unwrap(), brute_force_assignment(&c).unwrap());
        assert_eq!(h.pairs.len(), 3);
        assert_eq!(h.unmatched.len(), 2);
        assert!((h.cost - b.cost).abs() < 1e-12);
        assert_eq!(h, b);

        let wide = random(2, 5, &mut rng);
        let h = hungarian(&wide).unwrap();
        assert_eq!(h.pairs.len(), 2);
        assert!(h.unmatched.is_empty());
        assert_eq!(h, brute_force_assignment(&wide).unwrap());

        // all-equal costs: every assignment ties, the first in order wins
        let flat = Tensor::full(&[4, 2], 1.0);
        let h = hungarian(&flat).unwrap();
        assert_eq!(h.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(h, brute_force_assignment(&flat).unwrap());
    }

    #[test]
    fn agrees_with_brute_force_on_random_square_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..500 {
            let c = random(7, 7, &mut rng);
            let (h, b) = (hungarian(&c).unwrap(), brute_force_assignment(&c).unwrap());
            assert!((h.cost - b.cost).abs() <= 1e-9);
            assert_eq!(h.pairs, b.pairs);
        }
    }

    #[test]
    fn integer_costs_with_many_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let (m, s) = (rng.random_range(1..=6), rng.random_range(1..=6));
            let c = Tensor::new(vec![m, s], (0..m * s).map(|_| rng.random_range(0..3) as f64).collect()).unwrap();
            assert_eq!(hungarian(&c).unwrap(), brute_force_assignment(&c).unwrap());
        }
    }

    #[test]
    fn rejects_non_finite() {
        assert!(matches!(hungarian(&t(&[&[1.0, f64::NAN]])), Err(Error::NonFinite(_))));
        assert!(brute_force_assignment(&t(&[&[f64::INFINITY]])).is_err());
    }
}
