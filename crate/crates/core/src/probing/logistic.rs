//! L2-regularized logistic regression fitted by iteratively reweighted least
//! squares (Newton's method on the penalized log-likelihood).

/// Result of one IRLS run. `coefficients[0]` is the intercept.
#[derive(Debug, Clone, PartialEq)]
pub struct IrlsFit {
    pub coefficients: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IrlsOptions {
    pub lambda: f64,
    pub max_iterations: usize,
    pub tolerance: f64,
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `Σ log(1 + e^{-s z})` with `s = ±1`, plus the ridge term, in a form that
/// does not overflow for large margins.
fn penalized_nll(rows: &[Vec<f64>], labels: &[bool], beta: &[f64], lambda: f64) -> f64 {
    let mut total = 0.0;
    for (x, &y) in rows.iter().zip(labels) {
        let z = dot(x, beta);
        let m = if y { z } else { -z };
        total += if m > 0.0 { (-m).exp().ln_1p() } else { -m + m.exp().ln_1p() };
    }
    total + 0.5 * lambda * dot(beta, beta)
}

/// Fits `P(y = 1 | x) = σ(β · x)`. Each row of `rows` must already contain
/// the constant 1 in column 0.
pub fn fit_irls(rows: &[Vec<f64>], labels: &[bool], options: IrlsOptions) -> IrlsFit {
    let d = rows.first().map_or(1, Vec::len);
    let mut beta = vec![0.0; d];
    let mut objective = penalized_nll(rows, labels, &beta, options.lambda);

    for iteration in 1..=options.max_iterations {
        let mut gradient: Vec<f64> = beta.iter().map(|b| -options.lambda * b).collect();
        let mut hessian = vec![vec![0.0; d]; d];
        for (j, row) in hessian.iter_mut().enumerate() {
            row[j] = options.lambda;
        }
        for (x, &y) in rows.iter().zip(labels) {
            let p = sigmoid(dot(x, &beta));
            let residual = f64::from(u8::from(y)) - p;
            let w = p * (1.0 - p);
            for j in 0..d {
                gradient[j] += residual * x[j];
                for k in 0..d {
                    hessian[j][k] += w * x[j] * x[k];
                }
            }
        }
        let Some(step) = solve(hessian, gradient) else {
            return IrlsFit { coefficients: beta, iterations: iteration, converged: false };
        };

        // Step halving keeps the penalized objective non-increasing.
        let mut scale = 1.0;
        let mut candidate: Vec<f64>;
        let mut candidate_objective;
        loop {
            candidate = beta.iter().zip(&step).map(|(b, s)| b + scale * s).collect();
            candidate_objective = penalized_nll(rows, labels, &candidate, options.lambda);
            if candidate_objective <= objective || scale < 1e-10 {
                break;
            }
            scale *= 0.5;
        }
        let max_change = step.iter().map(|s| (scale * s).abs()).fold(0.0, f64::max);
        beta = candidate;
        objective = candidate_objective;
        if max_change < options.tolerance {
            return IrlsFit { coefficients: beta, iterations: iteration, converged: true };
        }
    }
    IrlsFit { coefficients: beta, iterations: options.max_iterations, converged: false }
}

/// Gaussian elimination with partial pivoting; `None` when singular.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let factor = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= factor * a[col][k];
            }
            b[row] -= factor * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let tail: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - tail) / a[row][row];
    }
    Some(x)
}
