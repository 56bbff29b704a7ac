//! Lattice drift stabilization: synthetic stacked-PSF imaging, 3D position
//! estimation, the Brewster-plate phase actuator, a discretely stepped PID
//! loop, and addressing-beam alignment scans.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::atomsim::{
    apply_pulse, calibrate_pi_pulse, AtomState, LevelId, NoiseRealization, PulseChannel,
    PulseEnvelope, PulseSpec,
};
use crate::fit::{fit_gaussian_peak, FitError};
use crate::geometry::{BeamAxis, SiteIndex, TransitionShifts};
use crate::sequencer::ExperimentConfig;

#[derive(Debug, Error)]
pub enum StabilizationError {
    #[error("no isolated atoms to stack")]
    NoAtoms,
    #[error("actuator saturated at {0:.2} mrad")]
    ActuatorSaturated(f64),
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error("insufficient signal to noise for a position estimate")]
    LowSignal,
    #[error("fitted peak at {0:.3} µm lies outside the scanned range")]
    PeakOutsideScan(f64),
    #[error("invalid parameter: {0}")]
    BadParameter(String),
}

/// Slow lattice drift: linear ramp plus an optional random walk.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DriftState {
    /// Current lattice offset (x, y, z), µm.
    pub offset: [f64; 3],
    /// Deterministic drift rate, µm/hour per axis.
    pub rate_um_per_hour: [f64; 3],
    /// Random-walk step amplitude, µm/√hour.
    pub random_walk_um: f64,
}

impl Default for DriftState {
    fn default() -> Self {
        // "characteristic time scale of <1 µm/hour"
        DriftState {
            offset: [0.0; 3],
            rate_um_per_hour: [0.8, -0.5, 0.3],
            random_walk_um: 0.05,
        }
    }
}

impl DriftState {
    /// Advance the drift by `dt` seconds.
    pub fn advance<R: Rng>(&mut self, dt: f64, rng: &mut R) {
        let hours = dt / 3600.0;
        for a in 0..3 {
            self.offset[a] += self.rate_um_per_hour[a] * hours;
            if self.random_walk_um > 0.0 {
                let step = Normal::new(0.0, self.random_walk_um * hours.sqrt()).unwrap();
                self.offset[a] += step.sample(rng);
            }
        }
    }

    pub fn validate(&self) -> Result<(), StabilizationError> {
        if self.offset.iter().any(|o| !o.is_finite()) {
            return Err(StabilizationError::BadParameter("non-finite offset".into()));
        }
        Ok(())
    }
}

/// Brewster-plate actuator: 8 mrad of tilt give a π/2 phase shift, which
/// translates the lattice by one spacing (4.9 µm).
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BrewsterActuator {
    pub tilt_mrad: f64,
    pub max_tilt_mrad: f64,
}

pub const MRAD_PER_HALF_PI: f64 = 8.0;
pub const UM_PER_HALF_PI: f64 = 4.9;

impl Default for BrewsterActuator {
    fn default() -> Self {
        // wide enough to track ~1 µm/h drift for a few days of running
        // (±400 mrad ↔ ±245 µm with the linearized calibration)
        BrewsterActuator { tilt_mrad: 0.0, max_tilt_mrad: 400.0 }
    }
}

impl BrewsterActuator {
    pub fn tilt_for_translation(translation_um: f64) -> f64 {
        translation_um / UM_PER_HALF_PI * MRAD_PER_HALF_PI
    }

    pub fn translation_for_tilt(tilt_mrad: f64) -> f64 {
        tilt_mrad / MRAD_PER_HALF_PI * UM_PER_HALF_PI
    }

    pub fn phase_for_tilt(tilt_mrad: f64) -> f64 {
        tilt_mrad / MRAD_PER_HALF_PI * std::f64::consts::FRAC_PI_2
    }

    /// Current lattice translation produced by the plate.
    pub fn translation(&self) -> f64 {
        Self::translation_for_tilt(self.tilt_mrad)
    }

    /// Apply a translation command, reporting saturation.
    pub fn command(&mut self, translation_um: f64) -> Result<(), StabilizationError> {
        let next = self.tilt_mrad + Self::tilt_for_translation(translation_um);
        if next.abs() > self.max_tilt_mrad {
            self.tilt_mrad = next.clamp(-self.max_tilt_mrad, self.max_tilt_mrad);
            return Err(StabilizationError::ActuatorSaturated(next));
        }
        self.tilt_mrad = next;
        Ok(())
    }
}

/// Estimated lattice position with per-axis uncertainty.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct PositionEstimate {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    /// In-plane uncertainty, µm (paper: maintained within 0.1 µm).
    pub sigma_xy: f64,
    /// Axial uncertainty, µm (paper: 0.23 µm).
    pub sigma_z: f64,
    pub low_snr: bool,
}

impl PositionEstimate {
    pub fn validate(&self) -> Result<(), StabilizationError> {
        if !(self.sigma_xy > 0.0 && self.sigma_z > 0.0) {
            return Err(StabilizationError::BadParameter("uncertainties must be > 0".into()));
        }
        Ok(())
    }
}

/// Imaging model: in-plane Gaussian PSF whose radius doubles one plane out
/// of focus, peak amplitude falling as a Lorentzian of the defocus.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PsfParams {
    /// In-focus PSF radius, µm.
    pub sigma0_um: f64,
    /// Axial distance between the stacked image planes, µm.
    pub plane_spacing_um: f64,
    /// Peak counts per stacked atom at focus.
    pub peak_counts: f64,
    /// Camera read noise per pixel, counts RMS.
    pub read_noise: f64,
    /// Image side length, pixels (odd).
    pub image_size: usize,
    pub pixel_um: f64,
}

impl Default for PsfParams {
    fn default() -> Self {
        PsfParams {
            sigma0_um: 0.6,
            plane_spacing_um: 4.9,
            peak_counts: 60.0,
            read_noise: 2.0,
            image_size: 21,
            pixel_um: 0.4,
        }
    }
}

impl PsfParams {
    /// Defocus scale: the radius doubles one plane out of focus, so
    /// σ(z) = σ0 √(1 + (z/zc)²) with zc = spacing/√3.
    pub fn defocus_zc(&self) -> f64 {
        self.plane_spacing_um / 3.0f64.sqrt()
    }

    pub fn sigma_at(&self, defocus_um: f64) -> f64 {
        let u = defocus_um / self.defocus_zc();
        self.sigma0_um * (1.0 + u * u).sqrt()
    }

    /// Peak amplitude at a given defocus: the integrated signal is
    /// conserved, so the 2D peak falls as (σ0/σ)².
    pub fn amplitude_at(&self, defocus_um: f64) -> f64 {
        let s = self.sigma_at(defocus_um) / self.sigma0_um;
        self.peak_counts / (s * s)
    }

    /// The three stack planes: in focus, near (+1 plane), far (−1 plane).
    pub fn planes(&self) -> [f64; 3] {
        [0.0, self.plane_spacing_um, -self.plane_spacing_um]
    }
}

/// Three stacked images (in-focus, near-defocused, far-defocused), row
/// major, in counts.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ImageStack {
    pub images: [Vec<f64>; 3],
    pub size: usize,
    pub pixel_um: f64,
    pub planes: [f64; 3],
    /// Number of isolated atoms averaged into the stack.
    pub n_atoms: usize,
}

/// Forward imaging model: one stacked spot at the true lattice offset,
/// averaged over `n_isolated` atoms (shot and read noise shrink as 1/√N).
/// `offset` is (x, y, z) in µm relative to the nominal lattice position.
pub fn synthesize_image_stack<R: Rng>(
    offset: [f64; 3],
    n_isolated: usize,
    psf: &PsfParams,
    noise: bool,
    rng: &mut R,
) -> Result<ImageStack, StabilizationError> {
    if n_isolated == 0 {
        return Err(StabilizationError::NoAtoms);
    }
    if psf.image_size % 2 == 0 || psf.image_size < 5 {
        return Err(StabilizationError::BadParameter(
            "image_size must be odd and at least 5".into(),
        ));
    }
    let size = psf.image_size;
    let half = (size / 2) as f64;
    let scale = 1.0 / (n_isolated as f64).sqrt();
    let mut images: [Vec<f64>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for (k, &plane) in psf.planes().iter().enumerate() {
        let sigma = psf.sigma_at(offset[2] - plane);
        let amp = psf.amplitude_at(offset[2] - plane);
        let mut img = Vec::with_capacity(size * size);
        for row in 0..size {
            let y = (row as f64 - half) * psf.pixel_um;
            for col in 0..size {
                let x = (col as f64 - half) * psf.pixel_um;
                let dx = x - offset[0];
                let dy = y - offset[1];
                let mut v = amp * (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp();
                if noise {
                    let shot = v.max(0.0).sqrt();
                    let sigma_n = (shot * shot + psf.read_noise * psf.read_noise).sqrt() * scale;
                    v += Normal::new(0.0, sigma_n).unwrap().sample(rng);
                }
                img.push(v);
            }
        }
        images[k] = img;
    }
    Ok(ImageStack { images, size, pixel_um: psf.pixel_um, planes: psf.planes(), n_atoms: n_isolated })
}

struct MarginalFit {
    center_um: f64,
    center_err_um: f64,
    /// Peak amplitude of the underlying 2D spot, counts.
    amp_2d: f64,
    sigma_um: f64,
}

fn fit_marginal(
    img: &[f64],
    size: usize,
    pixel_um: f64,
    along_x: bool,
) -> Result<MarginalFit, StabilizationError> {
    let half = (size / 2) as f64;
    let mut coords = Vec::with_capacity(size);
    let mut sums = vec![0.0f64; size];
    for i in 0..size {
        coords.push((i as f64 - half) * pixel_um);
    }
    for row in 0..size {
        for col in 0..size {
            let v = img[row * size + col];
            sums[if along_x { col } else { row }] += v;
        }
    }
    let fit = fit_gaussian_peak(&coords, &sums)?;
    let amp_marg = fit.params[0];
    let sigma = fit.params[2].abs();
    // the x marginal of a 2D Gaussian spot has peak A·σ√(2π)/pixel
    let amp_2d = amp_marg * pixel_um / (sigma * (2.0 * std::f64::consts::PI).sqrt());
    Ok(MarginalFit {
        center_um: fit.params[1],
        center_err_um: fit.std_err(1),
        amp_2d,
        sigma_um: sigma,
    })
}

/// Estimate the 3D lattice offset from a stacked-image triple: Gaussian
/// centroid fits of the in-focus marginals give (x, y); the three peak
/// amplitudes fitted against the defocus response give z.
pub fn estimate_position(
    stack: &ImageStack,
    psf: &PsfParams,
) -> Result<PositionEstimate, StabilizationError> {
    let size = stack.size;
    let fx = fit_marginal(&stack.images[0], size, stack.pixel_um, true)?;
    let fy = fit_marginal(&stack.images[0], size, stack.pixel_um, false)?;

    // SNR gate on the in-focus spot
    let border_rms = border_rms(&stack.images[0], size);
    let low_snr = fx.amp_2d < 4.0 * border_rms.max(1e-12);
    if fx.amp_2d <= 0.0 || !fx.amp_2d.is_finite() {
        return Err(StabilizationError::LowSignal);
    }

    // per-plane peak amplitudes
    let mut amps = [0.0f64; 3];
    amps[0] = fx.amp_2d;
    for k in 1..3 {
        amps[k] = fit_marginal(&stack.images[k], size, stack.pixel_um, true)?.amp_2d;
    }

    // z from the Lorentzian amplitude response A(z) = A0 / (1 + ((z−u)/zc)²)
    // with A0 eliminated by linear least squares at each candidate z
    let zc = psf.defocus_zc();
    let chi2 = |z: f64| -> f64 {
        let mut mm = 0.0;
        let mut ma = 0.0;
        let m: Vec<f64> = stack
            .planes
            .iter()
            .map(|&u| {
                let t = (z - u) / zc;
                1.0 / (1.0 + t * t)
            })
            .collect();
        for (mk, &ak) in m.iter().zip(&amps) {
            mm += mk * mk;
            ma += mk * ak;
        }
        let a0 = ma / mm;
        m.iter().zip(&amps).map(|(mk, &ak)| (a0 * mk - ak).powi(2)).sum()
    };
    let span = stack.planes[1].abs() * 1.5;
    let mut best = (0.0, f64::INFINITY);
    let n_grid = 301;
    for i in 0..n_grid {
        let z = -span + 2.0 * span * i as f64 / (n_grid - 1) as f64;
        let c = chi2(z);
        if c < best.1 {
            best = (z, c);
        }
    }
    let (mut a, mut b) = (best.0 - span / 100.0, best.0 + span / 100.0);
    for _ in 0..60 {
        let c = (2.0 * a + b) / 3.0;
        let d = (a + 2.0 * b) / 3.0;
        if chi2(c) < chi2(d) {
            b = d;
        } else {
            a = c;
        }
    }
    let z = (a + b) / 2.0;

    // curvature-based z uncertainty
    let h = 0.01;
    let curv = (chi2(z + h) - 2.0 * chi2(z) + chi2(z - h)) / (h * h);
    let dof_scale = chi2(z).max(border_rms * border_rms);
    let sigma_z = if curv > 0.0 {
        (2.0 * dof_scale / curv).sqrt().clamp(1e-4, 1.0)
    } else {
        0.23
    };

    let est = PositionEstimate {
        x: fx.center_um,
        y: fy.center_um,
        z,
        sigma_xy: fx.center_err_um.max(fy.center_err_um).max(1e-4),
        sigma_z,
        low_snr,
    };
    est.validate()?;
    let _ = (fx.sigma_um, fy.sigma_um);
    Ok(est)
}

fn border_rms(img: &[f64], size: usize) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..size {
        for &idx in &[i, (size - 1) * size + i, i * size, i * size + size - 1] {
            sum += img[idx] * img[idx];
            n += 1;
        }
    }
    (sum / n as f64).sqrt()
}

/// Discretely stepped PID loop. The 120 s time constant dominates: a pure
/// proportional step commands error · (dt / τ) per iteration.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PidState {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
    /// Correction time constant, s.
    pub tau: f64,
    pub integrator: f64,
    pub last_error: Option<f64>,
    /// Anti-windup bound on the integrator, µm·s.
    pub integrator_bound: f64,
}

impl Default for PidState {
    fn default() -> Self {
        PidState {
            kp: 1.0,
            ki: 0.1,
            kd: 0.0,
            tau: 120.0,
            integrator: 0.0,
            last_error: None,
            integrator_bound: 600.0,
        }
    }
}

/// One discrete correction step: returns the commanded translation, µm.
pub fn pid_step(state: &mut PidState, error_um: f64, dt: f64) -> Result<f64, StabilizationError> {
    if !(dt > 0.0) {
        return Err(StabilizationError::BadParameter(format!("dt must be > 0, got {dt}")));
    }
    state.integrator = (state.integrator + error_um * dt)
        .clamp(-state.integrator_bound, state.integrator_bound);
    let derivative = match state.last_error {
        Some(last) => (error_um - last) / dt,
        None => 0.0,
    };
    state.last_error = Some(error_um);
    let command = (dt / state.tau)
        * (state.kp * error_um + state.ki * state.integrator / state.tau + state.kd * derivative);
    Ok(command)
}

/// One record of the closed-loop timeline.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LoopRecord {
    pub iteration: usize,
    pub time_s: f64,
    pub true_offset: [f64; 3],
    pub estimate: [f64; 3],
    pub command_um: [f64; 3],
    pub residual: [f64; 3],
}

/// Closed-loop stabilization options.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoopConfig {
    pub dt_s: f64,
    pub iterations: usize,
    pub n_isolated_atoms: usize,
    /// Use the full imaging pipeline; when false the estimator is the true
    /// offset plus Gaussian measurement noise (0.1/0.1/0.23 µm), which is
    /// much faster for long stability runs.
    pub image_based: bool,
    /// Noise floor of the lens z-stage (strain gauge loop), µm.
    pub z_stage_noise_um: f64,
}

impl Default for LoopConfig {
    fn default() -> Self {
        LoopConfig {
            dt_s: 10.0,
            iterations: 360,
            n_isolated_atoms: 12,
            image_based: true,
            z_stage_noise_um: 0.01,
        }
    }
}

/// Simulate the measure → correct → advance loop. x and y are corrected by
/// Brewster plates, z by the lens stage. Returns the full timeline.
pub fn closed_loop<R: Rng>(
    mut drift: DriftState,
    psf: &PsfParams,
    pid: &PidState,
    cfg: &LoopConfig,
    rng: &mut R,
) -> Result<Vec<LoopRecord>, StabilizationError> {
    drift.validate()?;
    let mut pids = [*pid, *pid, *pid];
    let mut plates = [BrewsterActuator::default(), BrewsterActuator::default()];
    let mut records = Vec::with_capacity(cfg.iterations);
    let mut correction = [0.0f64; 3];
    for iteration in 0..cfg.iterations {
        let seen = [
            drift.offset[0] - correction[0],
            drift.offset[1] - correction[1],
            drift.offset[2] - correction[2],
        ];
        let estimate = if cfg.image_based {
            let stack =
                synthesize_image_stack(seen, cfg.n_isolated_atoms, psf, true, rng)?;
            let e = estimate_position(&stack, psf)?;
            [e.x, e.y, e.z]
        } else {
            let nxy = Normal::new(0.0, 0.1).unwrap();
            let nz = Normal::new(0.0, 0.23).unwrap();
            [
                seen[0] + nxy.sample(rng),
                seen[1] + nxy.sample(rng),
                seen[2] + nz.sample(rng),
            ]
        };
        let mut command = [0.0f64; 3];
        for a in 0..3 {
            command[a] = pid_step(&mut pids[a], estimate[a], cfg.dt_s)?;
        }
        // actuate: Brewster plates in-plane, lens stage axially
        for a in 0..2 {
            match plates[a].command(command[a]) {
                Ok(()) => correction[a] += command[a],
                Err(StabilizationError::ActuatorSaturated(_)) => {
                    correction[a] = plates[a].translation();
                }
                Err(e) => return Err(e),
            }
        }
        correction[2] += command[2];
        if cfg.z_stage_noise_um > 0.0 {
            correction[2] += Normal::new(0.0, cfg.z_stage_noise_um).unwrap().sample(rng);
        }
        let residual = [
            drift.offset[0] - correction[0],
            drift.offset[1] - correction[1],
            drift.offset[2] - correction[2],
        ];
        records.push(LoopRecord {
            iteration,
            time_s: iteration as f64 * cfg.dt_s,
            true_offset: drift.offset,
            estimate,
            command_um: command,
            residual,
        });
        drift.advance(cfg.dt_s, rng);
    }
    Ok(records)
}

/// One point of an addressing-beam alignment scan.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AlignmentPoint {
    pub offset_um: f64,
    pub transfer: f64,
}

/// Alignment-scan result: fitted beam center per the scanned transverse
/// axis.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AlignmentResult {
    pub points: Vec<AlignmentPoint>,
    pub center_um: f64,
    pub center_err_um: f64,
}

/// Scan one addressing beam transversely across its line of atoms and fit
/// the transferred population. The microwave probe sits just above the
/// maximal single-beam shift, so transfer peaks at best alignment.
/// `transverse` selects which of the two transverse offsets is scanned.
pub fn alignment_scan<R: Rng>(
    axis: BeamAxis,
    target: SiteIndex,
    offsets_um: &[f64],
    cfg: &ExperimentConfig,
    transverse: usize,
    probe_factor: f64,
    shots: usize,
    rng: &mut R,
) -> Result<AlignmentResult, StabilizationError> {
    if offsets_um.len() < 5 {
        return Err(StabilizationError::BadParameter(
            "need at least 5 scan offsets".into(),
        ));
    }
    if transverse > 1 {
        return Err(StabilizationError::BadParameter(
            "transverse index must be 0 or 1".into(),
        ));
    }
    let delta = cfg.beam.peak_shift_2pi;
    let probe_offset = probe_factor * delta;
    let pulse = PulseSpec::new(
        PulseChannel::Scan,
        calibrate_pi_pulse(PulseEnvelope::Blackman, cfg.seq.omega1_pi_duration),
        cfg.seq.omega1_pi_duration,
    )
    .with_detuning(probe_offset);
    let noise = NoiseRealization::default();
    let line_sites: Vec<SiteIndex> = cfg
        .lattice
        .sites()
        .filter(|s| match axis {
            BeamAxis::X => s.j == target.j && s.k == target.k,
            BeamAxis::Y => s.i == target.i && s.k == target.k,
        })
        .collect();

    let mut points = Vec::with_capacity(offsets_um.len());
    for &d in offsets_um {
        let mut beam = cfg.beam.beam(axis, target);
        beam.offset_um[transverse] = d;
        let mut total = 0.0;
        let mut count = 0usize;
        for &site in &line_sites {
            let shift = beam.coeffs.scan
                * beam.peak_shift_2pi
                * crate::geometry::beam_intensity(&beam, site, &cfg.lattice);
            let shifts = TransitionShifts { scan: shift, ..TransitionShifts::default() };
            let mut state = AtomState::in_level(LevelId::S40);
            apply_pulse(&mut state, &pulse, &shifts, &noise, 0.0, cfg.seq.pulse_steps)
                .map_err(|e| StabilizationError::BadParameter(e.to_string()))?;
            let p = state.population(LevelId::M3m1).clamp(0.0, 1.0);
            if shots > 0 {
                for _ in 0..shots {
                    if rng.gen::<f64>() < p {
                        total += 1.0;
                    }
                    count += 1;
                }
            } else {
                total += p;
                count += 1;
            }
        }
        points.push(AlignmentPoint { offset_um: d, transfer: total / count as f64 });
    }

    let xs: Vec<f64> = points.iter().map(|p| p.offset_um).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.transfer).collect();
    let fit = fit_gaussian_peak(&xs, &ys)?;
    let spread = ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        - ys.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(fit.params[0] > 0.05) || !(spread > 0.05) {
        return Err(StabilizationError::BadParameter(
            "no significant transfer peak in the scanned range".into(),
        ));
    }
    let center = fit.params[1];
    let lo = xs.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if center < lo || center > hi {
        return Err(StabilizationError::PeakOutsideScan(center));
    }
    Ok(AlignmentResult { points, center_um: center, center_err_um: fit.std_err(1) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn brewster_round_trip_is_identity() {
        let tilt = 3.7;
        let um = BrewsterActuator::translation_for_tilt(tilt);
        assert_abs_diff_eq!(BrewsterActuator::tilt_for_translation(um), tilt, epsilon = 1e-12);
        // 8 mrad ↔ π/2 ↔ 4.9 µm
        assert_abs_diff_eq!(
            BrewsterActuator::phase_for_tilt(8.0),
            std::f64::consts::FRAC_PI_2,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(BrewsterActuator::translation_for_tilt(8.0), 4.9, epsilon = 1e-12);
    }

    #[test]
    fn brewster_saturation_reported() {
        let mut plate = BrewsterActuator { tilt_mrad: 0.0, max_tilt_mrad: 10.0 };
        assert!(plate.command(5.0).is_ok());
        assert!(matches!(
            plate.command(10.0),
            Err(StabilizationError::ActuatorSaturated(_))
        ));
        assert_abs_diff_eq!(plate.tilt_mrad, 10.0, epsilon = 1e-12);
    }

    #[test]
    fn image_centroid_at_center_for_zero_offset() {
        let psf = PsfParams::default();
        let stack = synthesize_image_stack([0.0; 3], 8, &psf, false, &mut rng(1)).unwrap();
        let est = estimate_position(&stack, &psf).unwrap();
        assert_abs_diff_eq!(est.x, 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(est.y, 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(est.z, 0.0, epsilon = 1e-6);
    }

    #[test]
    fn image_centroid_tracks_offset_exactly() {
        let psf = PsfParams::default();
        let stack =
            synthesize_image_stack([0.3, -0.2, 0.0], 8, &psf, false, &mut rng(1)).unwrap();
        let est = estimate_position(&stack, &psf).unwrap();
        assert_abs_diff_eq!(est.x, 0.3, epsilon = 1e-6);
        assert_abs_diff_eq!(est.y, -0.2, epsilon = 1e-6);
    }

    #[test]
    fn amplitude_peaks_at_focus() {
        let psf = PsfParams::default();
        let mut best = (0.0, 0.0);
        for i in 0..41 {
            let z = -4.0 + 0.2 * i as f64;
            let a = psf.amplitude_at(z);
            if a > best.1 {
                best = (z, a);
            }
        }
        assert_abs_diff_eq!(best.0, 0.0, epsilon = 0.21);
        // radius doubles one plane out of focus
        assert_abs_diff_eq!(
            psf.sigma_at(psf.plane_spacing_um),
            2.0 * psf.sigma0_um,
            epsilon = 1e-12
        );
    }

    #[test]
    fn near_far_amplitudes_equal_at_focus() {
        let psf = PsfParams::default();
        let stack = synthesize_image_stack([0.0; 3], 4, &psf, false, &mut rng(1)).unwrap();
        let peak = |img: &Vec<f64>| img.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_abs_diff_eq!(
            peak(&stack.images[1]),
            peak(&stack.images[2]),
            epsilon = 1e-12
        );
    }

    #[test]
    fn estimator_unbiased_on_grid() {
        let psf = PsfParams::default();
        for ix in -2..=2 {
            for iz in -2..=2 {
                let offset = [ix as f64 * 0.6, 0.25, iz as f64 * 0.9];
                let stack =
                    synthesize_image_stack(offset, 4, &psf, false, &mut rng(1)).unwrap();
                let est = estimate_position(&stack, &psf).unwrap();
                assert_abs_diff_eq!(est.x, offset[0], epsilon = 1e-3);
                assert_abs_diff_eq!(est.y, offset[1], epsilon = 1e-3);
                assert_abs_diff_eq!(est.z, offset[2], epsilon = 1e-3);
            }
        }
    }

    fn rms_errors(psf: &PsfParams, n_atoms: usize, trials: usize, seed: u64) -> (f64, f64) {
        let mut r = rng(seed);
        let mut sx = 0.0;
        let mut sz = 0.0;
        for t in 0..trials {
            let offset = [
                0.3 * ((t % 5) as f64 - 2.0) / 2.0,
                -0.2 * ((t % 3) as f64 - 1.0),
                0.5 * ((t % 7) as f64 - 3.0) / 3.0,
            ];
            let stack = synthesize_image_stack(offset, n_atoms, psf, true, &mut r).unwrap();
            let est = estimate_position(&stack, psf).unwrap();
            sx += (est.x - offset[0]).powi(2) + (est.y - offset[1]).powi(2);
            sz += (est.z - offset[2]).powi(2);
        }
        (
            (sx / (2.0 * trials as f64)).sqrt(),
            (sz / trials as f64).sqrt(),
        )
    }

    #[test]
    fn noisy_estimates_meet_precision_targets() {
        let psf = PsfParams::default();
        let (rms_xy, rms_z) = rms_errors(&psf, 12, 40, 7);
        assert!(rms_xy <= 0.1, "in-plane RMS {rms_xy}");
        assert!(rms_z <= 0.23, "axial RMS {rms_z}");
    }

    #[test]
    fn noise_monotonically_degrades_estimates() {
        let mut last = 0.0;
        for (i, counts) in [240.0, 60.0, 15.0].iter().enumerate() {
            let psf = PsfParams { peak_counts: *counts, ..PsfParams::default() };
            let (rms_xy, _) = rms_errors(&psf, 8, 30, 11);
            assert!(
                rms_xy > last,
                "level {i}: rms {rms_xy} not above previous {last}"
            );
            last = rms_xy;
        }
    }

    #[test]
    fn pid_zero_error_zero_command() {
        let mut pid = PidState { ki: 0.0, ..PidState::default() };
        assert_abs_diff_eq!(pid_step(&mut pid, 0.0, 10.0).unwrap(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn pid_proportional_first_order_step() {
        let mut pid = PidState { kp: 1.0, ki: 0.0, kd: 0.0, ..PidState::default() };
        let cmd = pid_step(&mut pid, 0.49, 10.0).unwrap();
        assert_abs_diff_eq!(cmd, 0.49 * 10.0 / 120.0, epsilon = 1e-12);
    }

    #[test]
    fn pid_integrator_is_bounded() {
        let mut pid = PidState { integrator_bound: 50.0, ..PidState::default() };
        for _ in 0..1000 {
            pid_step(&mut pid, 10.0, 10.0).unwrap();
        }
        assert!(pid.integrator <= 50.0);
    }

    #[test]
    fn ramp_disturbance_tracked_with_small_error() {
        // 1 µm/hour ramp; first-order lag error ≈ rate · τ ≈ 0.033 µm
        let drift = DriftState {
            offset: [0.0; 3],
            rate_um_per_hour: [1.0, 0.0, 0.0],
            random_walk_um: 0.0,
        };
        let pid = PidState { ki: 0.0, ..PidState::default() };
        let cfg = LoopConfig {
            image_based: false,
            iterations: 720,
            z_stage_noise_um: 0.0,
            ..LoopConfig::default()
        };
        // noiseless measurement variant for the analytic comparison
        let records = closed_loop_noiseless(drift, &pid, &cfg).unwrap();
        let tail: Vec<f64> = records[600..].iter().map(|r| r.residual[0]).collect();
        let mean = tail.iter().sum::<f64>() / tail.len() as f64;
        assert!(mean.abs() < 0.1, "steady-state residual {mean}");
        assert_abs_diff_eq!(mean, 1.0 / 3600.0 * 120.0, epsilon = 0.01);
    }

    /// Deterministic closed loop with a perfect estimator, for analytic
    /// comparisons in tests.
    fn closed_loop_noiseless(
        mut drift: DriftState,
        pid: &PidState,
        cfg: &LoopConfig,
    ) -> Result<Vec<LoopRecord>, StabilizationError> {
        let mut pids = [*pid, *pid, *pid];
        let mut correction = [0.0f64; 3];
        let mut records = Vec::new();
        let mut r = rng(0);
        for iteration in 0..cfg.iterations {
            let seen = [
                drift.offset[0] - correction[0],
                drift.offset[1] - correction[1],
                drift.offset[2] - correction[2],
            ];
            let mut command = [0.0; 3];
            for a in 0..3 {
                command[a] = pid_step(&mut pids[a], seen[a], cfg.dt_s)?;
                correction[a] += command[a];
            }
            records.push(LoopRecord {
                iteration,
                time_s: iteration as f64 * cfg.dt_s,
                true_offset: drift.offset,
                estimate: seen,
                command_um: command,
                residual: [
                    drift.offset[0] - correction[0],
                    drift.offset[1] - correction[1],
                    drift.offset[2] - correction[2],
                ],
            });
            drift.advance(cfg.dt_s, &mut r);
        }
        Ok(records)
    }

    #[test]
    fn closed_loop_stable_over_long_runs() {
        for (rate, walk) in [([0.0; 3], 0.0), ([1.0, -1.0, 0.5], 0.0), ([0.0; 3], 0.2)] {
            let drift = DriftState {
                offset: [0.5, -0.5, 0.2],
                rate_um_per_hour: rate,
                random_walk_um: walk,
            };
            let cfg = LoopConfig {
                image_based: false,
                iterations: 10_000,
                ..LoopConfig::default()
            };
            let records =
                closed_loop(drift, &PsfParams::default(), &PidState::default(), &cfg, &mut rng(3))
                    .unwrap();
            let max_resid = records
                .iter()
                .flat_map(|r| r.residual.iter())
                .fold(0.0f64, |m, &v| m.max(v.abs()));
            assert!(max_resid < 5.0, "residual diverged: {max_resid}");
        }
    }

    #[test]
    fn closed_loop_image_pipeline_converges() {
        let drift = DriftState {
            offset: [0.8, -0.6, 0.5],
            rate_um_per_hour: [0.5, 0.5, 0.2],
            random_walk_um: 0.0,
        };
        let cfg = LoopConfig { iterations: 200, ..LoopConfig::default() };
        let records =
            closed_loop(drift, &PsfParams::default(), &PidState::default(), &cfg, &mut rng(4))
                .unwrap();
        let tail: Vec<&LoopRecord> = records[150..].iter().collect();
        let rms_xy = (tail
            .iter()
            .map(|r| r.residual[0].powi(2) + r.residual[1].powi(2))
            .sum::<f64>()
            / (2.0 * tail.len() as f64))
            .sqrt();
        assert!(rms_xy < 0.2, "in-plane residual RMS {rms_xy}");
    }

    #[test]
    fn alignment_scan_noise_free_recovers_center() {
        let cfg = ExperimentConfig::default();
        let offsets: Vec<f64> = (-10..=10).map(|i| i as f64 * 0.15).collect();
        let result = alignment_scan(
            BeamAxis::X,
            SiteIndex::new(2, 2, 2),
            &offsets,
            &cfg,
            0,
            1.02,
            0,
            &mut rng(5),
        )
        .unwrap();
        assert_abs_diff_eq!(result.center_um, 0.0, epsilon = 1e-3);
        // symmetric scan about the true center: peak at the midpoint
        let mid = (offsets[0] + offsets[offsets.len() - 1]) / 2.0;
        assert_abs_diff_eq!(result.center_um, mid, epsilon = 1e-3);
    }

    #[test]
    fn alignment_scan_with_shot_noise_within_100nm() {
        let cfg = ExperimentConfig::default();
        let offsets: Vec<f64> = (-10..=10).map(|i| i as f64 * 0.15).collect();
        let result = alignment_scan(
            BeamAxis::X,
            SiteIndex::new(2, 2, 2),
            &offsets,
            &cfg,
            0,
            1.02,
            200,
            &mut rng(6),
        )
        .unwrap();
        assert!(
            result.center_um.abs() <= 0.1,
            "center {} µm off with shot noise",
            result.center_um
        );
    }

    #[test]
    fn alignment_scan_peak_outside_range_rejected() {
        let cfg = ExperimentConfig::default();
        // scan window far away from the beam center
        let offsets: Vec<f64> = (0..8).map(|i| 6.0 + i as f64 * 0.5).collect();
        let r = alignment_scan(
            BeamAxis::X,
            SiteIndex::new(2, 2, 2),
            &offsets,
            &cfg,
            0,
            1.02,
            0,
            &mut rng(7),
        );
        assert!(r.is_err());
    }
}
