//! Fringe normalization and fitting, Bloch-vector reconstruction, and the
//! Uhlmann-fidelity report comparing reconstructed states against ideal
//! references.

use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::atomsim::NoiseParams;
use crate::fit::{levenberg_fit, ExponentialDecay, FitError, FitResult, Model};
use crate::geometry::AtomClass;
use crate::mat2::Mat2;
use crate::sequencer::{ideal_preprobe_state, GateKind};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error("fringe needs at least {needed} phase points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("alpha/p0 length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("matrix is not Hermitian (deviation {0:.3e})")]
    NotHermitian(f64),
    #[error("matrix is not positive semidefinite: {0}")]
    NotPsd(String),
    #[error("normalization out of range: {0}")]
    BadNormalization(String),
    #[error("empty data")]
    Empty,
}

/// One measured fringe: detected F = 3 probability versus probe phase for
/// one atom class.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FringeData {
    pub class: AtomClass,
    pub alpha: Vec<f64>,
    pub p0: Vec<f64>,
    /// Atom-shot count behind each point (same for all phases).
    pub shots: Option<u64>,
}

/// Undo atom loss and detection leakage:
/// raw = (1 − loss) · (p + (1 − p) · leakage)  ⇒  p,
/// i.e. divide by the survival fraction first, then subtract the leakage
/// floor. Normalized values outside [−0.05, 1.05] flag inconsistent inputs.
pub fn normalize_fringe(raw: &[f64], loss: f64, leakage: f64) -> Result<Vec<f64>, AnalysisError> {
    if !(0.0..1.0).contains(&loss) {
        return Err(AnalysisError::BadNormalization(format!(
            "loss must be in [0, 1), got {loss}"
        )));
    }
    if !(0.0..1.0).contains(&leakage) {
        return Err(AnalysisError::BadNormalization(format!(
            "leakage must be in [0, 1), got {leakage}"
        )));
    }
    let out: Vec<f64> = raw
        .iter()
        .map(|&r| ((r / (1.0 - loss)) - leakage) / (1.0 - leakage))
        .collect();
    if let Some(&bad) = out.iter().find(|v| !(-0.05..=1.05).contains(*v)) {
        return Err(AnalysisError::BadNormalization(format!(
            "normalized value {bad:.4} outside [-0.05, 1.05]; loss/leakage inconsistent with data"
        )));
    }
    Ok(out)
}

/// Expected survival fraction for a sequence of duration `t_total`:
/// transfer loss once, collision loss exponential in time.
pub fn expected_survival(params: &NoiseParams, t_total: f64) -> f64 {
    (1.0 - params.loss_transfer) * (-t_total / params.loss_collision_tau).exp()
}

/// P0(α) = n²(1 + sinθ cos(α + φ))/2 in the parameters (n, θ, φ).
struct FringeModel<'a> {
    alpha: &'a [f64],
    p0: &'a [f64],
}

impl Model for FringeModel<'_> {
    fn residuals(&self, p: &[f64], out: &mut Vec<f64>) {
        let (n, th, ph) = (p[0], p[1], p[2]);
        out.clear();
        for (&a, &y) in self.alpha.iter().zip(self.p0) {
            out.push(n * n * (1.0 + th.sin() * (a + ph).cos()) / 2.0 - y);
        }
    }
    fn jacobian(&self, p: &[f64], out: &mut Vec<Vec<f64>>) {
        let (n, th, ph) = (p[0], p[1], p[2]);
        out.clear();
        for &a in self.alpha {
            let c = (a + ph).cos();
            let s = (a + ph).sin();
            out.push(vec![
                n * (1.0 + th.sin() * c),
                n * n * th.cos() * c / 2.0,
                -n * n * th.sin() * s / 2.0,
            ]);
        }
    }
    fn n_points(&self) -> usize {
        self.alpha.len()
    }
}

/// Reconstructed fringe parameters. θ carries an unavoidable θ ↔ π − θ
/// ambiguity (the fringe only measures sin θ); `theta` is reported in
/// [0, π/2] until resolved against a reference hemisphere.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BlochEstimate {
    pub class: AtomClass,
    pub n: f64,
    pub theta: f64,
    pub phi: f64,
    pub n_err: f64,
    pub theta_err: f64,
    pub phi_err: f64,
    pub chi2: f64,
    /// φ is meaningless when sinθ ≈ 0 (state at a pole).
    pub phi_identifiable: bool,
    pub theta_ambiguous: bool,
    /// Full 3×3 covariance of (n, θ, φ) from the fit.
    pub covariance: Vec<Vec<f64>>,
}

impl BlochEstimate {
    /// Resolve the θ branch toward the hemisphere of a reference polar
    /// angle: keep θ if the reference is in the upper hemisphere, else use
    /// π − θ.
    pub fn resolve_hemisphere(&mut self, reference_theta: f64) {
        let upper = reference_theta <= std::f64::consts::FRAC_PI_2;
        let in_upper = self.theta <= std::f64::consts::FRAC_PI_2;
        if upper != in_upper {
            self.theta = std::f64::consts::PI - self.theta;
        }
        self.theta_ambiguous = false;
    }

    /// Bloch vector (unit direction scaled by 1; shrinkage n is separate).
    pub fn bloch_vector(&self) -> [f64; 3] {
        // fringe convention: P0 = n²(1 + sinθ cos(α + φ))/2 for the state
        // cos(θ/2)|0⟩ + e^{iχ} sin(θ/2)|1⟩ with χ = π/2 − φ
        let chi = std::f64::consts::FRAC_PI_2 - self.phi;
        [
            self.theta.sin() * chi.cos(),
            self.theta.sin() * chi.sin(),
            self.theta.cos(),
        ]
    }
}

/// Fit the three-parameter fringe model to normalized data. Initial values
/// come from a linear harmonic decomposition, so convergence is immediate
/// for clean data.
pub fn fit_fringe(data: &FringeData) -> Result<BlochEstimate, AnalysisError> {
    fit_fringe_normalized(data, &data.p0)
}

/// Like `fit_fringe` but with externally normalized probabilities.
pub fn fit_fringe_normalized(
    data: &FringeData,
    p0: &[f64],
) -> Result<BlochEstimate, AnalysisError> {
    if data.alpha.len() != p0.len() {
        return Err(AnalysisError::LengthMismatch(data.alpha.len(), p0.len()));
    }
    if data.alpha.len() < 5 {
        return Err(AnalysisError::TooFewPoints { needed: 5, got: data.alpha.len() });
    }
    let m = data.alpha.len() as f64;
    let mean: f64 = p0.iter().sum::<f64>() / m;
    let mut re = 0.0;
    let mut im = 0.0;
    for (&a, &y) in data.alpha.iter().zip(p0) {
        re += y * a.cos();
        im += y * a.sin();
    }
    re *= 2.0 / m;
    im *= 2.0 / m;
    let amp = (re * re + im * im).sqrt();
    // mean = n²/2, amp·cos/sin decompose n² sinθ/2 at phase φ
    let n0 = (2.0 * mean).max(1e-6).sqrt();
    let sin_theta0 = (amp / mean.max(1e-12)).clamp(0.0, 1.0);
    let theta0 = sin_theta0.asin();
    let phi0 = (-im).atan2(re);
    let model = FringeModel { alpha: &data.alpha, p0 };
    let fit: FitResult = levenberg_fit(&model, &[n0, theta0, phi0], 200)?;
    let n = fit.params[0].abs();
    let mut theta = fit.params[1].rem_euclid(std::f64::consts::TAU);
    let mut phi = fit.params[2];
    // fold θ into [0, π/2] (sign/branch conventions of the fit)
    if theta > std::f64::consts::PI {
        theta = std::f64::consts::TAU - theta;
        phi += std::f64::consts::PI;
    }
    if theta > std::f64::consts::FRAC_PI_2 {
        theta = std::f64::consts::PI - theta;
    }
    phi = phi.rem_euclid(std::f64::consts::TAU);
    let phi_identifiable = theta.sin() > 0.05;
    Ok(BlochEstimate {
        class: data.class,
        n,
        theta,
        phi,
        n_err: fit.std_err(0),
        theta_err: fit.std_err(1),
        phi_err: fit.std_err(2),
        chi2: fit.chi2,
        phi_identifiable,
        theta_ambiguous: true,
        covariance: fit.covariance,
    })
}

/// Reconstructed density matrix on the storage pair: trace n², direction
/// (θ, φ) in the fringe convention. Pure by construction (the fringe model
/// has no depolarization parameter; shrinkage lives in the trace).
pub fn bloch_to_density(n: f64, theta: f64, phi: f64) -> Mat2 {
    let chi = std::f64::consts::FRAC_PI_2 - phi;
    let psi = [
        C64::new(n * (theta / 2.0).cos(), 0.0),
        C64::from_polar(n * (theta / 2.0).sin(), chi),
    ];
    Mat2::outer(psi)
}

const PSD_TOL: f64 = 1e-10;

/// Uhlmann fidelity F(ρ, σ) = Tr √(√ρ σ √ρ). Inputs are validated as
/// Hermitian and positive semidefinite to 1e-10.
pub fn uhlmann_fidelity(rho: &Mat2, sigma: &Mat2) -> Result<f64, AnalysisError> {
    for m in [rho, sigma] {
        let h = m.hermiticity_error();
        if h > PSD_TOL {
            return Err(AnalysisError::NotHermitian(h));
        }
        let (ls, _) = m.eigh();
        if ls[0] < -PSD_TOL {
            return Err(AnalysisError::NotPsd(format!("eigenvalue {:.3e}", ls[0])));
        }
    }
    let sr = rho.sqrt_psd(PSD_TOL).map_err(AnalysisError::NotPsd)?;
    let inner = sr.mul(sigma).mul(&sr);
    // eigenvalues of √ρ σ √ρ at rounding-error level relative to the state
    // scale are exact zeros (orthogonal supports); the relative floor inside
    // sqrt_psd cannot see this when the whole matrix is rounding noise
    let scale = (rho.trace().re * sigma.trace().re).max(PSD_TOL);
    let floor = 1e-15 * scale;
    let (ls, _) = inner.eigh();
    for &l in &ls {
        if l < -1e-8 * scale {
            return Err(AnalysisError::NotPsd(format!("eigenvalue {l:.3e}")));
        }
    }
    Ok(ls.iter().map(|&l| if l > floor { l.sqrt() } else { 0.0 }).sum())
}

/// Fidelity of a Bloch estimate against the ideal pre-probe state of its
/// class, with the θ branch resolved toward the ideal hemisphere.
pub fn estimate_fidelity(
    est: &BlochEstimate,
    gate: Option<GateKind>,
) -> Result<f64, AnalysisError> {
    let ideal = ideal_preprobe_state(gate, est.class);
    let sigma = Mat2::outer(ideal);
    let mut resolved = est.clone();
    let (_, ideal_theta, _) = crate::sequencer::bloch_angles(ideal);
    resolved.resolve_hemisphere(ideal_theta);
    let rho = bloch_to_density(resolved.n, resolved.theta, resolved.phi);
    uhlmann_fidelity(&rho, &sigma)
}

/// Delta-method standard error of the fidelity through the fit covariance.
fn fidelity_std_err(
    est: &BlochEstimate,
    gate: Option<GateKind>,
) -> Result<f64, AnalysisError> {
    let f0 = estimate_fidelity(est, gate)?;
    let h = [1e-6, 1e-6, 1e-6];
    let mut grad = [0.0f64; 3];
    for i in 0..3 {
        let mut plus = est.clone();
        match i {
            0 => plus.n += h[i],
            1 => plus.theta += h[i],
            _ => plus.phi += h[i],
        }
        grad[i] = (estimate_fidelity(&plus, gate)? - f0) / h[i];
    }
    let mut var = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            let c = est.covariance[i][j];
            if c.is_finite() {
                var += grad[i] * c * grad[j];
            }
        }
    }
    Ok(var.max(0.0).sqrt())
}

/// Per-class fidelity summary for one gate run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClassFidelity {
    pub class: AtomClass,
    pub n: f64,
    pub theta: f64,
    pub phi: f64,
    pub fidelity: f64,
    pub fidelity_err: f64,
    pub phi_identifiable: bool,
}

/// Full fidelity report: per-class Bloch parameters and Uhlmann fidelities
/// against the ideal states, plus the mean non-target fidelity.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FidelityReport {
    pub gate: Option<GateKind>,
    pub classes: Vec<ClassFidelity>,
    pub mean_nontarget_fidelity: f64,
}

impl FidelityReport {
    pub fn class(&self, class: AtomClass) -> Option<&ClassFidelity> {
        self.classes.iter().find(|c| c.class == class)
    }
}

/// Build the report from per-class fringes (already normalized).
pub fn gate_fidelity_report(
    fringes: &[(FringeData, Vec<f64>)],
    gate: Option<GateKind>,
) -> Result<FidelityReport, AnalysisError> {
    if fringes.is_empty() {
        return Err(AnalysisError::Empty);
    }
    let mut classes = Vec::new();
    let mut nontarget_sum = 0.0;
    let mut nontarget_n = 0usize;
    for (data, p0) in fringes {
        let mut est = fit_fringe_normalized(data, p0)?;
        let ideal = ideal_preprobe_state(gate, data.class);
        let (_, ideal_theta, _) = crate::sequencer::bloch_angles(ideal);
        let fidelity = estimate_fidelity(&est, gate)?;
        let fidelity_err = fidelity_std_err(&est, gate)?;
        est.resolve_hemisphere(ideal_theta);
        if data.class != AtomClass::Target {
            nontarget_sum += fidelity;
            nontarget_n += 1;
        }
        classes.push(ClassFidelity {
            class: data.class,
            n: est.n,
            theta: est.theta,
            phi: est.phi,
            fidelity,
            fidelity_err,
            phi_identifiable: est.phi_identifiable,
        });
    }
    Ok(FidelityReport {
        gate,
        classes,
        mean_nontarget_fidelity: if nontarget_n > 0 {
            nontarget_sum / nontarget_n as f64
        } else {
            f64::NAN
        },
    })
}

/// Exponential contrast decay fit. Returns (τ, τ standard error,
/// decaying): `decaying` is false when the data are consistent with no
/// decay over the sampled window (fitted τ much longer than the window or
/// non-finite).
pub fn fit_exponential_contrast(
    t: &[f64],
    contrast: &[f64],
) -> Result<(f64, f64, bool), AnalysisError> {
    if t.len() != contrast.len() {
        return Err(AnalysisError::LengthMismatch(t.len(), contrast.len()));
    }
    if t.len() < 3 {
        return Err(AnalysisError::TooFewPoints { needed: 3, got: t.len() });
    }
    let span = t.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        - t.iter().cloned().fold(f64::INFINITY, f64::min);
    let a0 = contrast.first().copied().unwrap_or(1.0).max(1e-3);
    let model = ExponentialDecay { x: t, y: contrast };
    match levenberg_fit(&model, &[a0, span.max(1e-6)], 300) {
        Ok(fit) => {
            let tau = fit.params[1];
            let tau_err = fit.std_err(1);
            let decaying = tau.is_finite() && tau > 0.0 && tau < 20.0 * span;
            Ok((tau, tau_err, decaying))
        }
        // flat data drive τ to infinity without converging: report no decay
        Err(FitError::NoConvergence(_)) => Ok((f64::INFINITY, f64::NAN, false)),
        Err(e) => Err(e.into()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sequencer::default_alphas;
    use approx::assert_abs_diff_eq;
    use num_complex::Complex64 as C64;

    fn synthetic_fringe(n: f64, theta: f64, phi: f64) -> FringeData {
        let alpha = default_alphas(16);
        let p0 = alpha
            .iter()
            .map(|&a| n * n * (1.0 + theta.sin() * (a + phi).cos()) / 2.0)
            .collect();
        FringeData { class: AtomClass::Target, alpha, p0, shots: None }
    }

    #[test]
    fn fringe_fit_recovers_parameters() {
        let data = synthetic_fringe(0.93, 1.1, 2.4);
        let est = fit_fringe(&data).unwrap();
        assert_abs_diff_eq!(est.n, 0.93, epsilon = 1e-8);
        assert_abs_diff_eq!(est.theta, 1.1, epsilon = 1e-8);
        assert_abs_diff_eq!(est.phi, 2.4, epsilon = 1e-8);
        assert!(est.phi_identifiable);
    }

    #[test]
    fn fringe_fit_flags_pole() {
        let data = synthetic_fringe(0.9, 0.01, 1.0);
        let est = fit_fringe(&data).unwrap();
        assert!(!est.phi_identifiable);
    }

    #[test]
    fn normalization_inverts_forward_model() {
        let p = [0.1, 0.4, 0.93];
        let loss = 0.10;
        let leakage = 0.02;
        let raw: Vec<f64> = p
            .iter()
            .map(|&x| (1.0 - loss) * (x + (1.0 - x) * leakage))
            .collect();
        let rec = normalize_fringe(&raw, loss, leakage).unwrap();
        for (a, b) in p.iter().zip(&rec) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn normalization_rejects_bad_inputs() {
        assert!(normalize_fringe(&[0.5], 1.0, 0.0).is_err());
        assert!(normalize_fringe(&[0.5], 0.0, 1.0).is_err());
        // raw value incompatible with the stated loss
        assert!(matches!(
            normalize_fringe(&[0.99], 0.5, 0.02),
            Err(AnalysisError::BadNormalization(_))
        ));
    }

    #[test]
    fn uhlmann_pure_states_overlap() {
        let a = [C64::new(0.8, 0.0), C64::new(0.0, 0.6)];
        let b = [C64::new(0.6, 0.0), C64::new(0.8, 0.0)];
        let f = uhlmann_fidelity(&Mat2::outer(a), &Mat2::outer(b)).unwrap();
        let ov = (a[0].conj() * b[0] + a[1].conj() * b[1]).norm();
        assert_abs_diff_eq!(f, ov, epsilon = 1e-10);
    }

    #[test]
    fn uhlmann_identical_is_trace() {
        // for trace-n² ρ against itself, F = n²
        let rho = bloch_to_density(0.9, 1.2, 0.5);
        let f = uhlmann_fidelity(&rho, &rho).unwrap();
        assert_abs_diff_eq!(f, 0.81, epsilon = 1e-10);
    }

    #[test]
    fn uhlmann_rejects_non_hermitian() {
        let mut m = Mat2::identity();
        m.e[0][1] = C64::new(0.5, 0.0);
        assert!(matches!(
            uhlmann_fidelity(&m, &Mat2::identity()),
            Err(AnalysisError::NotHermitian(_))
        ));
    }

    #[test]
    fn uhlmann_rejects_negative() {
        let m = Mat2::new(
            C64::new(-0.5, 0.0),
            C64::new(0.0, 0.0),
            C64::new(0.0, 0.0),
            C64::new(1.0, 0.0),
        );
        assert!(uhlmann_fidelity(&m, &Mat2::identity()).is_err());
    }

    #[test]
    fn density_from_bloch_matches_fringe_convention() {
        // state from bloch_to_density must reproduce the fringe it was
        // fitted from: P0(α) = |⟨0| U(π/2, α) ψ⟩|²
        let (n, theta, phi) = (0.95, 0.8, 1.7);
        let rho = bloch_to_density(n, theta, phi);
        for &alpha in &default_alphas(8) {
            let u = crate::mat2::rotation(std::f64::consts::FRAC_PI_2, alpha);
            let rot = u.mul(&rho).mul(&u.adjoint());
            let p = rot.e[0][0].re;
            let expect = n * n * (1.0 + theta.sin() * (alpha + phi).cos()) / 2.0;
            assert_abs_diff_eq!(p, expect, epsilon = 1e-10);
        }
    }

    #[test]
    fn exponential_contrast_fit() {
        let t: Vec<f64> = (1..10).map(|i| i as f64 * 0.005).collect();
        let c: Vec<f64> = t.iter().map(|&x| 0.95 * (-x / 0.0074).exp()).collect();
        let (tau, _, decaying) = fit_exponential_contrast(&t, &c).unwrap();
        assert_abs_diff_eq!(tau, 0.0074, epsilon = 1e-8);
        assert!(decaying);
    }

    #[test]
    fn flat_contrast_flagged_non_decaying() {
        let t: Vec<f64> = (1..10).map(|i| i as f64 * 0.005).collect();
        let c = vec![0.9; t.len()];
        let (_, _, decaying) = fit_exponential_contrast(&t, &c).unwrap();
        assert!(!decaying);
    }
}
