use crate::numcore::Tensor;
use crate::{Error, Result};

pub const MAX_ASSIGNMENT_SIZE: usize = 512;

/// Minimum-cost perfect matching on a dense `n × n` row-major cost matrix
/// (shortest augmenting paths with potentials, O(n³)).
/// Returns `assignment[row] = column` and the total cost.
pub fn hungarian(cost: &[f64], n: usize) -> (Vec<usize>, f64) {
    assert_eq!(cost.len(), n * n, "cost matrix must be n × n");
    if n == 0 {
        return (Vec::new(), 0.0);
    }
    // 1-based arrays; column 0 is the virtual source
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
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
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        assignment[owner[j] - 1] = j - 1;
    }
    let total = assignment
        .iter()
        .enumerate()
        .map(|(i, &j)| cost[i * n + j])
        .sum();
    (assignment, total)
}

pub(crate) fn sq_cost_matrix(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, n) = (a.rows(), b.rows());
    let mut c = Vec::with_capacity(m * n);
    for i in 0..m {
        let ai = a.row(i);
        for j in 0..n {
            c.push(ai.iter().zip(b.row(j)).map(|(x, y)| (x - y) * (x - y)).sum());
        }
    }
    c
}

/// Exact `W₂` between two empirical measures of equal size:
/// `√(min_σ (1/m) Σ ‖a_i − b_σ(i)‖²)`.
pub fn w2_exact(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.rank() != 2 || b.rank() != 2 || a.cols() != b.cols() {
        return Err(Error::invalid(format!(
            "ensembles of shape {:?} and {:?} are not comparable",
            a.shape(),
            b.shape()
        )));
    }
    let m = a.rows();
    if m != b.rows() {
        return Err(Error::Dimension {
            expected: m,
            got: b.rows(),
        });
    }
    if m == 0 || m > MAX_ASSIGNMENT_SIZE {
        return Err(Error::invalid(format!(
            "exact W2 needs 1 ≤ m ≤ {MAX_ASSIGNMENT_SIZE} particles, got {m}"
        )));
    }
    let (_, total) = hungarian(&sq_cost_matrix(a, b), m);
    Ok((total.max(0.0) / m as f64).sqrt())
}
