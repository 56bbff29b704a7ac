//! Damped least-squares (Levenberg-style) fitting for the small models used
//! across the crate: fringe fits, Gaussian peaks, exponential decays, and
//! point-spread-function fits.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum FitError {
    #[error("fit did not converge after {0} iterations")]
    NoConvergence(usize),
    #[error("singular normal equations")]
    Singular,
    #[error("need at least {needed} data points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("{0}")]
    BadInput(String),
}

/// A model to fit: residuals r_i(p) and the analytic Jacobian ∂r_i/∂p_j.
pub trait Model {
    fn residuals(&self, params: &[f64], out: &mut Vec<f64>);
    fn jacobian(&self, params: &[f64], out: &mut Vec<Vec<f64>>);
    fn n_points(&self) -> usize;
}

#[derive(Clone, Debug)]
pub struct FitResult {
    pub params: Vec<f64>,
    /// Linearized parameter covariance, row-major n×n.
    pub covariance: Vec<Vec<f64>>,
    pub chi2: f64,
    pub iterations: usize,
}

impl FitResult {
    pub fn std_err(&self, i: usize) -> f64 {
        self.covariance[i][i].max(0.0).sqrt()
    }
}

/// Solve A x = b for a small symmetric system by Gaussian elimination with
/// partial pivoting. Returns None when A is singular.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for row in (col + 1)..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut s = b[row];
        for k in (row + 1)..n {
            s -= a[row][k] * x[k];
        }
        x[row] = s / a[row][row];
    }
    Some(x)
}

fn invert(a: &[Vec<f64>]) -> Option<Vec<Vec<f64>>> {
    let n = a.len();
    let mut out = vec![vec![0.0; n]; n];
    for col in 0..n {
        let mut e = vec![0.0; n];
        e[col] = 1.0;
        let x = solve(a.to_vec(), e)?;
        for row in 0..n {
            out[row][col] = x[row];
        }
    }
    Some(out)
}

fn chi2_of(r: &[f64]) -> f64 {
    r.iter().map(|x| x * x).sum()
}

/// Levenberg-style damped least squares with analytic Jacobian.
pub fn levenberg_fit<M: Model>(
    model: &M,
    initial: &[f64],
    max_iter: usize,
) -> Result<FitResult, FitError> {
    let n = initial.len();
    let m = model.n_points();
    if m < n {
        return Err(FitError::TooFewPoints { needed: n, got: m });
    }
    let mut params = initial.to_vec();
    let mut r = Vec::new();
    let mut jac = Vec::new();
    model.residuals(&params, &mut r);
    let mut chi2 = chi2_of(&r);
    let mut lambda = 1e-3;
    let mut iterations = 0;
    let mut converged = false;

    for _ in 0..max_iter {
        iterations += 1;
        model.jacobian(&params, &mut jac);
        // normal equations JtJ + λ diag(JtJ)
        let mut jtj = vec![vec![0.0; n]; n];
        let mut jtr = vec![0.0; n];
        for i in 0..m {
            for a in 0..n {
                jtr[a] += jac[i][a] * r[i];
                for b in a..n {
                    jtj[a][b] += jac[i][a] * jac[i][b];
                }
            }
        }
        for a in 0..n {
            for b in 0..a {
                jtj[a][b] = jtj[b][a];
            }
        }
        let mut improved = false;
        for _ in 0..30 {
            let mut damped = jtj.clone();
            for a in 0..n {
                damped[a][a] += lambda * jtj[a][a].max(1e-12);
            }
            let step = match solve(damped, jtr.clone()) {
                Some(s) => s,
                None => return Err(FitError::Singular),
            };
            let trial: Vec<f64> = params.iter().zip(&step).map(|(p, s)| p - s).collect();
            let mut rt = Vec::new();
            model.residuals(&trial, &mut rt);
            let c2 = chi2_of(&rt);
            if c2 <= chi2 {
                let rel = (chi2 - c2) / chi2.max(1e-300);
                let step_small = step.iter().all(|s| s.abs() < 1e-12);
                params = trial;
                r = rt;
                chi2 = c2;
                lambda = (lambda * 0.3).max(1e-12);
                improved = true;
                if rel < 1e-12 || step_small {
                    converged = true;
                }
                break;
            }
            lambda *= 10.0;
        }
        if converged || !improved {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(FitError::NoConvergence(max_iter));
    }

    // covariance = inv(JtJ) * chi2 / (m - n)
    model.jacobian(&params, &mut jac);
    let mut jtj = vec![vec![0.0; n]; n];
    for i in 0..m {
        for a in 0..n {
            for b in a..n {
                jtj[a][b] += jac[i][a] * jac[i][b];
            }
        }
    }
    for a in 0..n {
        for b in 0..a {
            jtj[a][b] = jtj[b][a];
        }
    }
    let dof = (m.saturating_sub(n)).max(1) as f64;
    let s2 = chi2 / dof;
    let covariance = match invert(&jtj) {
        Some(inv) => inv
            .into_iter()
            .map(|row| row.into_iter().map(|v| v * s2).collect())
            .collect(),
        None => vec![vec![f64::NAN; n]; n],
    };
    Ok(FitResult { params, covariance, chi2, iterations })
}

/// y = A exp(-(x-c)²/(2 s²)) + b, fitted to (x, y) pairs.
pub struct GaussianPeak<'a> {
    pub x: &'a [f64],
    pub y: &'a [f64],
}

impl Model for GaussianPeak<'_> {
    fn residuals(&self, p: &[f64], out: &mut Vec<f64>) {
        let (a, c, s, b) = (p[0], p[1], p[2], p[3]);
        out.clear();
        for (&x, &y) in self.x.iter().zip(self.y) {
            let u = (x - c) / s;
            out.push(a * (-0.5 * u * u).exp() + b - y);
        }
    }
    fn jacobian(&self, p: &[f64], out: &mut Vec<Vec<f64>>) {
        let (a, c, s, _) = (p[0], p[1], p[2], p[3]);
        out.clear();
        for &x in self.x {
            let u = (x - c) / s;
            let g = (-0.5 * u * u).exp();
            out.push(vec![g, a * g * u / s, a * g * u * u / s, 1.0]);
        }
    }
    fn n_points(&self) -> usize {
        self.x.len()
    }
}

/// Fit a Gaussian peak with a data-driven initial guess.
pub fn fit_gaussian_peak(x: &[f64], y: &[f64]) -> Result<FitResult, FitError> {
    if x.len() != y.len() {
        return Err(FitError::BadInput("x/y length mismatch".into()));
    }
    if x.len() < 4 {
        return Err(FitError::TooFewPoints { needed: 4, got: x.len() });
    }
    let (imax, &ymax) = y
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .unwrap();
    let ymin = y.iter().cloned().fold(f64::INFINITY, f64::min);
    let span = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        - x.iter().cloned().fold(f64::INFINITY, f64::min);
    let init = [ymax - ymin, x[imax], (span / 8.0).max(1e-12), ymin];
    levenberg_fit(&GaussianPeak { x, y }, &init, 200)
}

/// y = A exp(-x/τ), fitted in (A, τ).
pub struct ExponentialDecay<'a> {
    pub x: &'a [f64],
    pub y: &'a [f64],
}

impl Model for ExponentialDecay<'_> {
    fn residuals(&self, p: &[f64], out: &mut Vec<f64>) {
        let (a, tau) = (p[0], p[1]);
        out.clear();
        for (&x, &y) in self.x.iter().zip(self.y) {
            out.push(a * (-x / tau).exp() - y);
        }
    }
    fn jacobian(&self, p: &[f64], out: &mut Vec<Vec<f64>>) {
        let (a, tau) = (p[0], p[1]);
        out.clear();
        for &x in self.x {
            let e = (-x / tau).exp();
            out.push(vec![e, a * e * x / (tau * tau)]);
        }
    }
    fn n_points(&self) -> usize {
        self.x.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn gaussian_peak_recovery() {
        let x: Vec<f64> = (0..40).map(|i| -2.0 + 0.1 * i as f64).collect();
        let y: Vec<f64> = x
            .iter()
            .map(|&x| 1.7 * (-0.5 * ((x - 0.3) / 0.4_f64).powi(2)).exp() + 0.05)
            .collect();
        let fit = fit_gaussian_peak(&x, &y).unwrap();
        assert_abs_diff_eq!(fit.params[0], 1.7, epsilon = 1e-8);
        assert_abs_diff_eq!(fit.params[1], 0.3, epsilon = 1e-8);
        assert_abs_diff_eq!(fit.params[2].abs(), 0.4, epsilon = 1e-8);
        assert_abs_diff_eq!(fit.params[3], 0.05, epsilon = 1e-8);
    }

    #[test]
    fn exponential_recovery() {
        let x: Vec<f64> = (0..20).map(|i| i as f64 * 0.8).collect();
        let y: Vec<f64> = x.iter().map(|&x| 0.9 * (-x / 7.4_f64).exp()).collect();
        let fit = levenberg_fit(&ExponentialDecay { x: &x, y: &y }, &[1.0, 3.0], 200).unwrap();
        assert_abs_diff_eq!(fit.params[0], 0.9, epsilon = 1e-9);
        assert_abs_diff_eq!(fit.params[1], 7.4, epsilon = 1e-6);
    }

    #[test]
    fn too_few_points_rejected() {
        let x = [0.0, 1.0];
        let y = [1.0, 0.5];
        assert!(fit_gaussian_peak(&x, &y).is_err());
    }
}
