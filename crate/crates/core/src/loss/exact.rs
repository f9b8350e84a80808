//! Exact unregularized transport for small atomizable instances.

use crate::density::DensityMap;
use crate::error::{Error, Result};
use crate::loss::ot::{ground_cost, normalize};

/// Largest support per side.
pub const MAX_SUPPORT: usize = 32;
/// Largest number of unit atoms per side.
pub const MAX_ATOMS: usize = 512;

/// Minimum-cost perfect assignment on a square row-major cost matrix.
///
/// Shortest augmenting paths with row/column potentials, `O(n^3)`.
/// Returns `assignment[row] = col`.
pub fn hungarian(n: usize, cost: &[f64]) -> Vec<usize> {
    assert_eq!(cost.len(), n * n, "cost matrix must be n x n");
    // 1-based with a virtual row/column 0.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut col0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[col0] = true;
            let i0 = owner[col0];
            let mut delta = f64::INFINITY;
            let mut col1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = col0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    col1 = j;
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
            col0 = col1;
            if owner[col0] == 0 {
                break;
            }
        }
        loop {
            let prev = way[col0];
            owner[col0] = owner[prev];
            col0 = prev;
            if col0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        assignment[owner[j] - 1] = j - 1;
    }
    assignment
}

/// Smallest atom count `N` such that every normalized mass on both sides is
/// a multiple of `1 / N`.
fn atom_count(a: &[f64], b: &[f64]) -> Option<usize> {
    (1..=MAX_ATOMS).find(|&n| {
        a.iter().chain(b).all(|&m| {
            let k = m * n as f64;
            k.round() >= 1.0 && (k - k.round()).abs() <= 1e-9 * n as f64
        })
    })
}

/// Exact transport cost between `pred / |pred|` and `gt / |gt|` under the
/// same ground cost as [`crate::loss::ot_loss`].
pub fn exact_ot_oracle(pred: &DensityMap, gt: &DensityMap) -> Result<f64> {
    if (pred.h(), pred.w()) != (gt.h(), gt.w()) {
        return Err(Error::Shape("maps differ in size".into()));
    }
    let (rows, a, _) = normalize(pred, "prediction")?;
    let (cols, b, _) = normalize(gt, "ground-truth")?;
    if rows.len() > MAX_SUPPORT || cols.len() > MAX_SUPPORT {
        return Err(Error::Unsupported(format!(
            "supports of {} and {} pixels exceed {MAX_SUPPORT}",
            rows.len(),
            cols.len()
        )));
    }
    let n = atom_count(&a, &b).ok_or_else(|| {
        Error::Unsupported(format!("masses do not reduce to at most {MAX_ATOMS} equal atoms"))
    })?;
    let expand = |idx: &[usize], mass: &[f64]| -> Vec<usize> {
        idx.iter()
            .zip(mass)
            .flat_map(|(&k, &m)| std::iter::repeat(k).take((m * n as f64).round() as usize))
            .collect()
    };
    let src = expand(&rows, &a);
    let dst = expand(&cols, &b);
    if src.len() != n || dst.len() != n {
        return Err(Error::Unsupported("atomized masses do not balance".into()));
    }
    let (h, w) = (pred.h(), pred.w());
    let cost: Vec<f64> = src
        .iter()
        .flat_map(|&i| dst.iter().map(move |&j| ground_cost(h, w, i, j)))
        .collect();
    let assignment = hungarian(n, &cost);
    let total: f64 = assignment.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
    Ok(total / n as f64)
}
