use crate::error::{check_len, Error, Result};

/// Solves `(g + ridge·I) x = y` for a symmetric `g`.
///
/// Cholesky is tried first; if the shifted matrix is not numerically positive
/// definite the system is solved by Gaussian elimination with partial pivoting.
pub fn solve_ridge(g: &[Vec<f64>], y: &[f64], ridge: f64) -> Result<Vec<f64>> {
    let n = y.len();
    check_len("ridge system rows", n, g.len())?;
    for row in g {
        check_len("ridge system columns", n, row.len())?;
    }
    if !(ridge >= 0.0) {
        return Err(Error::InvalidArgument(format!("ridge must be >= 0, got {ridge}")));
    }
    if g.iter().flatten().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("ridge system"));
    }
    let mut a: Vec<Vec<f64>> = g.to_vec();
    for (i, row) in a.iter_mut().enumerate() {
        row[i] += ridge;
    }
    match cholesky_solve(&a, y) {
        Some(x) => Ok(x),
        None => gauss_solve(a, y.to_vec()),
    }
}

fn cholesky_solve(a: &[Vec<f64>], y: &[f64]) -> Option<Vec<f64>> {
    let n = y.len();
    let scale = (0..n).map(|i| a[i][i].abs()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let mut l = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i][j];
            for k in 0..j {
                s -= l[i][k] * l[j][k];
            }
            if i == j {
                if s <= 1e-14 * scale {
                    return None;
                }
                l[i][i] = s.sqrt();
            } else {
                l[i][j] = s / l[j][j];
            }
        }
    }
    let mut z = vec![0.0; n];
    for i in 0..n {
        let s: f64 = (0..i).map(|k| l[i][k] * z[k]).sum();
        z[i] = (y[i] - s) / l[i][i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| l[k][i] * x[k]).sum();
        x[i] = (z[i] - s) / l[i][i];
    }
    Some(x)
}

fn gauss_solve(mut a: Vec<Vec<f64>>, mut y: Vec<f64>) -> Result<Vec<f64>> {
    let n = y.len();
    let scale = a.iter().flatten().map(|v| v.abs()).fold(0.0, f64::max);
    let tol = 1e-12 * scale.max(f64::MIN_POSITIVE);
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        if a[pivot][col].abs() <= tol {
            return Err(Error::SingularMatrix);
        }
        a.swap(col, pivot);
        y.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            if f != 0.0 {
                for k in col..n {
                    a[row][k] -= f * a[col][k];
                }
                y[row] -= f * y[col];
            }
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| a[i][k] * x[k]).sum();
        x[i] = (y[i] - s) / a[i][i];
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn residual(g: &[Vec<f64>], y: &[f64], ridge: f64, x: &[f64]) -> f64 {
        let mut r2 = 0.0;
        for i in 0..y.len() {
            let ax: f64 = (0..y.len()).map(|j| g[i][j] * x[j]).sum::<f64>() + ridge * x[i];
            r2 += (ax - y[i]).powi(2);
        }
        r2.sqrt()
    }

    #[test]
    fn identity() {
        let g = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert_eq!(solve_ridge(&g, &[2.0, -1.0], 0.0).unwrap(), vec![2.0, -1.0]);
    }

    #[test]
    fn diagonal() {
        let g = vec![vec![2.0, 0.0], vec![0.0, 4.0]];
        let x = solve_ridge(&g, &[2.0, 4.0], 0.0).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-15 && (x[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn rank_deficient_with_ridge() {
        // closed form: x_i = 1 / (2 + ridge)
        let g = vec![vec![1.0, 1.0], vec![1.0, 1.0]];
        let x = solve_ridge(&g, &[1.0, 1.0], 1e-6).unwrap();
        let expected = 1.0 / (2.0 + 1e-6);
        assert!((x[0] - expected).abs() < 1e-9 && (x[1] - expected).abs() < 1e-9);
        assert!((x[0] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn singular_without_ridge() {
        let g = vec![vec![1.0, 1.0], vec![1.0, 1.0]];
        assert!(matches!(solve_ridge(&g, &[1.0, 1.0], 0.0), Err(Error::SingularMatrix)));
    }

    #[test]
    fn indefinite_falls_back_to_elimination() {
        let g = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
        let x = solve_ridge(&g, &[3.0, 5.0], 0.0).unwrap();
        assert!((x[0] - 5.0).abs() < 1e-12 && (x[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn negative_ridge_rejected() {
        let g = vec![vec![1.0]];
        assert!(solve_ridge(&g, &[1.0], -1.0).is_err());
    }

    #[test]
    fn residual_bound_on_random_spd() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for n in 1..8 {
            let b: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect();
            let g: Vec<Vec<f64>> = (0..n)
                .map(|i| (0..n).map(|j| (0..n).map(|k| b[i][k] * b[j][k]).sum()).collect())
                .collect();
            let y: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let x = solve_ridge(&g, &y, 1e-6).unwrap();
            let ynorm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(residual(&g, &y, 1e-6, &x) <= 1e-8 * (ynorm + 1.0));
        }
    }
}
