//! Dense linear assignment by shortest augmenting paths with dual potentials
//! (Jonker-Volgenant / Kuhn-Munkres family), `O(n³)`.

use nalgebra::DMatrix;

/// Minimum-cost perfect matching of a square cost matrix. Returns the column
/// assigned to each row.
pub fn solve(costs: &DMatrix<f64>) -> Vec<usize> {
    let n = costs.nrows();
    assert_eq!(n, costs.ncols(), "assignment requires a square cost matrix");
    if n == 0 {
        return Vec::new();
    }

    // 1-based with a virtual column 0, as in the classic formulation.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![0.0f64; n + 1];
    let mut used = vec![false; n + 1];

    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        minv.fill(f64::INFINITY);
        used.fill(false);

        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = costs[(i0 - 1, j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
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

    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        assignment[p[j] - 1] = j - 1;
    }
    assignment
}

pub fn assignment_cost(costs: &DMatrix<f64>, assignment: &[usize]) -> f64 {
    assignment.iter().enumerate().map(|(i, &j)| costs[(i, j)]).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::CounterRng;
    use rand::Rng;

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for perm in permutations(n - 1) {
            for pos in 0..=perm.len() {
                let mut p = perm.clone();
                p.insert(pos, n - 1);
                out.push(p);
            }
        }
        out
    }

    #[test]
    fn small_known_case() {
        let c = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 3.0, 2.0, 0.0, 5.0, 3.0, 2.0, 2.0]);
        let a = solve(&c);
        assert_eq!(assignment_cost(&c, &a), 5.0);
    }

    #[test]
    fn matches_brute_force() {
        let mut rng = CounterRng::new(21, 0);
        for n in 1..=7 {
            let all = permutations(n);
            for _ in 0..30 {
                let c = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..3.0));
                let best = all.iter().map(|p| assignment_cost(&c, p)).fold(f64::INFINITY, f64::min);
                let got = solve(&c);
                let mut seen = got.clone();
                seen.sort();
                assert_eq!(seen, (0..n).collect::<Vec<_>>());
                assert!((assignment_cost(&c, &got) - best).abs() < 1e-12);
            }
        }
    }
}
