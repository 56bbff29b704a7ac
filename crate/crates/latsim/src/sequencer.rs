//! Sequence compilation and execution: global π/2 framing pulses, per-target
//! (ω₁, ω₂, ω₁) gate blocks, dummy blocks, the echo π pulse, MEMS repointing
//! and adiabatic light ramps.
//!
//! The compiled canonical order is
//!
//!   GlobalHalfPi(0) → real block(s) → EchoPi → dummy block(s) → probe
//!
//! with one dummy block at every real pointing on the opposite side of the
//! echo, so each non-target atom collects the same multiset of (light
//! exposure, microwave kick) events on both sides with its state flipped in
//! between.

use num_complex::Complex64 as C64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::FringeData;
use crate::atomsim::{
    apply_light_phase, apply_pulse, apply_wait, calibrate_pi_pulse, calibrate_pulse_area,
    measure_f3, sample_noise, AtomState, LevelId, NoiseParams, NoiseRealization, PulseChannel,
    PulseEnvelope, PulseSpec,
};
use crate::geometry::{
    beam_intensity, classify_sites, stark_shift_map, AtomClass, BeamSpec, ClassMap, GeometryError,
    LatticeConfig, ShiftCoeffs, SiteIndex, StarkShiftMap, TransitionShifts,
};
use crate::mat2::rotation;

#[derive(Debug, Error)]
pub enum SequenceError {
    #[error("gate programs take 1 or 2 distinct targets, got {0}")]
    BadTargetCount(usize),
    #[error("coincident targets")]
    CoincidentTargets,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("invalid step ordering: {0}")]
    BadOrdering(String),
    #[error("empty detuning list")]
    NoDetunings,
    #[error("program has no free-phase probe")]
    NoProbe,
}

/// Beam parameters shared by both addressing beams.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BeamParams {
    pub waist_w0: f64,
    pub rayleigh_zr: f64,
    /// Single-beam peak shift Δ, rad/s.
    pub peak_shift_2pi: f64,
    pub coeffs: ShiftCoeffs,
}

impl Default for BeamParams {
    fn default() -> Self {
        // 2Δ ≈ 25 × the ω₁ π-pulse peak Rabi frequency, enough to resolve
        // the three spectrum peaks
        let seq = SequenceConfig::default();
        let rabi = calibrate_pi_pulse(PulseEnvelope::Blackman, seq.omega1_pi_duration);
        BeamParams {
            waist_w0: 2.7,
            rayleigh_zr: 26.0,
            peak_shift_2pi: 12.5 * rabi,
            coeffs: ShiftCoeffs::default(),
        }
    }
}

impl BeamParams {
    pub fn beam(&self, axis: crate::geometry::BeamAxis, line: SiteIndex) -> BeamSpec {
        BeamSpec {
            axis,
            line,
            offset_um: [0.0, 0.0],
            waist_w0: self.waist_w0,
            rayleigh_zr: self.rayleigh_zr,
            peak_shift_2pi: self.peak_shift_2pi,
            coeffs: self.coeffs,
        }
    }

    pub fn crossed_pair(&self, target: SiteIndex) -> [BeamSpec; 2] {
        [
            self.beam(crate::geometry::BeamAxis::X, target),
            self.beam(crate::geometry::BeamAxis::Y, target),
        ]
    }
}

/// Pulse timing defaults. One addressed block (ramp, ω₁ π, ω₂, ω₁ π, ramp)
/// comes to roughly 1 ms.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SequenceConfig {
    pub half_pi_duration: f64,
    pub pi0_duration: f64,
    pub omega1_pi_duration: f64,
    pub omega2_duration: f64,
    pub ramp_duration: f64,
    pub mems_settle: f64,
    pub interpulse_gap: f64,
    /// Dummy microwave offset in units of Δ, far from every shifted resonance.
    pub dummy_detuning_factor: f64,
    pub pulse_steps: usize,
}

impl Default for SequenceConfig {
    fn default() -> Self {
        SequenceConfig {
            half_pi_duration: 100e-6,
            pi0_duration: 100e-6,
            omega1_pi_duration: 80e-6,
            omega2_duration: 160e-6,
            ramp_duration: 290e-6,
            mems_settle: 5e-6,
            interpulse_gap: 10e-6,
            dummy_detuning_factor: 10.0,
            pulse_steps: crate::atomsim::DEFAULT_PULSE_STEPS,
        }
    }
}

/// Everything the executor needs besides the program itself.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub lattice: LatticeConfig,
    pub beam: BeamParams,
    pub noise: NoiseParams,
    pub seq: SequenceConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), String> {
        self.lattice.validate().map_err(|e| e.to_string())?;
        self.noise.validate()?;
        if !(self.beam.waist_w0 > 0.0) || !(self.beam.rayleigh_zr > 0.0) {
            return Err("beam waist and Rayleigh range must be > 0".into());
        }
        Ok(())
    }
}

/// How a run treats the noise model.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct RunOptions {
    /// Static detunings, loss, T1 scrambling, detection floor.
    pub stochastic_noise: bool,
    /// Deterministic light-phase and ac-Zeeman kicks.
    pub deterministic_kicks: bool,
    /// Sample site occupancy at `occupancy_fill` per shot; when off every
    /// site holds an atom.
    pub sample_occupancy: bool,
    /// Bernoulli-sample each detection instead of using probabilities.
    pub sample_detection: bool,
}

impl RunOptions {
    pub fn noise_free() -> Self {
        RunOptions {
            stochastic_noise: false,
            deterministic_kicks: false,
            sample_occupancy: false,
            sample_detection: false,
        }
    }

    pub fn kicks_only() -> Self {
        RunOptions { deterministic_kicks: true, ..RunOptions::noise_free() }
    }

    pub fn full() -> Self {
        RunOptions {
            stochastic_noise: true,
            deterministic_kicks: true,
            sample_occupancy: true,
            sample_detection: true,
        }
    }
}

/// The paper's three demonstrated gates plus arbitrary rotations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum GateKind {
    /// π about X.
    I,
    /// π about (X+Y)/√2.
    II,
    /// π/2 about X.
    III,
    Custom { axis_phase: f64, angle: f64 },
}

impl GateKind {
    pub fn axis_angle(&self) -> (f64, f64) {
        match self {
            GateKind::I => (0.0, std::f64::consts::PI),
            GateKind::II => (std::f64::consts::FRAC_PI_4, std::f64::consts::PI),
            GateKind::III => (0.0, std::f64::consts::FRAC_PI_2),
            GateKind::Custom { axis_phase, angle } => (*axis_phase, *angle),
        }
    }

    pub fn label(&self) -> String {
        match self {
            GateKind::I => "I".into(),
            GateKind::II => "II".into(),
            GateKind::III => "III".into(),
            GateKind::Custom { axis_phase, angle } => {
                format!("custom(phase={axis_phase:.3}, angle={angle:.3})")
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum SequenceStep {
    /// Repoint the MEMS mirrors to the crossed-beam lines of a site.
    PointBeams { target: SiteIndex },
    RampLightOn,
    RampLightOff,
    Microwave(PulseSpec),
    Wait { duration: f64 },
    EchoPi,
    GlobalHalfPi { phase: f64 },
}

/// A compiled sequence. The final scanned-phase π/2 probe is implicit; the
/// executor appends it when a probe phase is supplied.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GateProgram {
    pub targets: Vec<SiteIndex>,
    pub gate: Option<GateKind>,
    pub initial_level: LevelId,
    pub steps: Vec<SequenceStep>,
    /// ω₂ phase offset compensating residual target phase from the dummy
    /// blocks and off-resonant kicks.
    pub omega2_phase_comp: f64,
}

impl GateProgram {
    pub fn step_duration(&self, step: &SequenceStep, seq: &SequenceConfig) -> f64 {
        match step {
            SequenceStep::PointBeams { .. } => seq.mems_settle,
            SequenceStep::RampLightOn | SequenceStep::RampLightOff => seq.ramp_duration,
            SequenceStep::Microwave(p) => p.duration,
            SequenceStep::Wait { duration } => *duration,
            SequenceStep::EchoPi => seq.pi0_duration,
            SequenceStep::GlobalHalfPi { .. } => seq.half_pi_duration,
        }
    }

    /// Total duration of the compiled steps (probe excluded).
    pub fn total_duration(&self, seq: &SequenceConfig) -> f64 {
        self.steps.iter().map(|s| self.step_duration(s, seq)).sum()
    }

    /// Structural validation: ramps strictly alternate, addressed microwaves
    /// only run with the light on, repointing only with the light off.
    pub fn verify(&self) -> Result<(), SequenceError> {
        let mut light_on = false;
        for step in &self.steps {
            match step {
                SequenceStep::RampLightOn => {
                    if light_on {
                        return Err(SequenceError::BadOrdering("light already on".into()));
                    }
                    light_on = true;
                }
                SequenceStep::RampLightOff => {
                    if !light_on {
                        return Err(SequenceError::BadOrdering("light already off".into()));
                    }
                    light_on = false;
                }
                SequenceStep::PointBeams { .. } => {
                    if light_on {
                        return Err(SequenceError::BadOrdering(
                            "cannot repoint with light on".into(),
                        ));
                    }
                }
                SequenceStep::Microwave(p) => {
                    let addressed = !matches!(p.channel, PulseChannel::Omega0);
                    if addressed && !light_on {
                        return Err(SequenceError::BadOrdering(
                            "addressed microwave with light off".into(),
                        ));
                    }
                }
                SequenceStep::EchoPi | SequenceStep::GlobalHalfPi { .. } => {
                    if light_on {
                        return Err(SequenceError::BadOrdering(
                            "global pulse with light on".into(),
                        ));
                    }
                }
                SequenceStep::Wait { .. } => {}
            }
        }
        if light_on {
            return Err(SequenceError::BadOrdering("light left on".into()));
        }
        Ok(())
    }

    /// Static echo-balance check: the multiset of (pointing, light-on
    /// microwave count) must be identical before and after the echo π.
    pub fn echo_balanced(&self) -> bool {
        let mut sides: [Vec<(SiteIndex, usize)>; 2] = [Vec::new(), Vec::new()];
        let mut side = 0usize;
        let mut pointing: Option<SiteIndex> = None;
        let mut light_on = false;
        let mut mw_count = 0usize;
        for step in &self.steps {
            match step {
                SequenceStep::EchoPi => side = 1,
                SequenceStep::PointBeams { target } => pointing = Some(*target),
                SequenceStep::RampLightOn => {
                    light_on = true;
                    mw_count = 0;
                }
                SequenceStep::RampLightOff => {
                    light_on = false;
                    if let Some(p) = pointing {
                        sides[side].push((p, mw_count));
                    }
                }
                SequenceStep::Microwave(_) => {
                    if light_on {
                        mw_count += 1;
                    }
                }
                _ => {}
            }
        }
        sides[0].sort();
        sides[1].sort();
        sides[0] == sides[1]
    }

    pub fn class_map(&self, lattice: &LatticeConfig) -> Result<ClassMap, GeometryError> {
        classify_sites(&self.targets, lattice)
    }
}

fn omega1_pi_pulse(cfg: &ExperimentConfig, offset: f64) -> PulseSpec {
    PulseSpec::new(
        PulseChannel::Omega1,
        calibrate_pi_pulse(PulseEnvelope::Blackman, cfg.seq.omega1_pi_duration),
        cfg.seq.omega1_pi_duration,
    )
    .with_detuning(offset)
}

/// Shift of the ω₁ (lower-leg) transition at the crossing of the beams
/// pointed at `target`; the compiled ω₁ pulses sit on this resonance.
fn target_omega1_shift(cfg: &ExperimentConfig, target: SiteIndex) -> f64 {
    let beams = cfg.beam.crossed_pair(target);
    beams
        .iter()
        .map(|b| b.coeffs.omega1_down * b.peak_shift_2pi * beam_intensity(b, target, &cfg.lattice))
        .sum()
}

fn target_omega2_shift(cfg: &ExperimentConfig, target: SiteIndex) -> f64 {
    let beams = cfg.beam.crossed_pair(target);
    beams
        .iter()
        .map(|b| b.coeffs.omega2 * b.peak_shift_2pi * beam_intensity(b, target, &cfg.lattice))
        .sum()
}

fn push_gap(steps: &mut Vec<SequenceStep>, cfg: &ExperimentConfig) {
    if cfg.seq.interpulse_gap > 0.0 {
        steps.push(SequenceStep::Wait { duration: cfg.seq.interpulse_gap });
    }
}

fn push_real_block(
    steps: &mut Vec<SequenceStep>,
    cfg: &ExperimentConfig,
    target: SiteIndex,
    gate: GateKind,
    omega2_phase_comp: f64,
) {
    let (axis_phase, angle) = gate.axis_angle();
    steps.push(SequenceStep::PointBeams { target });
    steps.push(SequenceStep::RampLightOn);
    push_gap(steps, cfg);
    let w1 = target_omega1_shift(cfg, target);
    steps.push(SequenceStep::Microwave(omega1_pi_pulse(cfg, w1)));
    push_gap(steps, cfg);
    if angle != 0.0 {
        // the ω₁ transfer swaps the basis labels, so the physical rotation
        // axis is the negated drive phase
        let w2 = target_omega2_shift(cfg, target);
        let pulse = PulseSpec::new(
            PulseChannel::Omega2,
            calibrate_pulse_area(PulseEnvelope::Blackman, cfg.seq.omega2_duration, angle),
            cfg.seq.omega2_duration,
        )
        .with_phase(-axis_phase + omega2_phase_comp)
        .with_detuning(w2);
        steps.push(SequenceStep::Microwave(pulse));
    } else {
        // zero rotation: keep the slot filled with a far-detuned placeholder
        // so the kick bookkeeping matches the dummy block
        let pulse = PulseSpec::new(
            PulseChannel::Dummy,
            calibrate_pi_pulse(PulseEnvelope::Blackman, cfg.seq.omega2_duration),
            cfg.seq.omega2_duration,
        )
        .with_detuning(cfg.seq.dummy_detuning_factor * cfg.beam.peak_shift_2pi);
        steps.push(SequenceStep::Microwave(pulse));
    }
    push_gap(steps, cfg);
    steps.push(SequenceStep::Microwave(omega1_pi_pulse(cfg, w1)));
    push_gap(steps, cfg);
    steps.push(SequenceStep::RampLightOff);
}

fn push_dummy_block(steps: &mut Vec<SequenceStep>, cfg: &ExperimentConfig, target: SiteIndex) {
    let offset = cfg.seq.dummy_detuning_factor * cfg.beam.peak_shift_2pi;
    steps.push(SequenceStep::PointBeams { target });
    steps.push(SequenceStep::RampLightOn);
    push_gap(steps, cfg);
    let d1 = PulseSpec::new(
        PulseChannel::Dummy,
        calibrate_pi_pulse(PulseEnvelope::Blackman, cfg.seq.omega1_pi_duration),
        cfg.seq.omega1_pi_duration,
    )
    .with_detuning(offset);
    steps.push(SequenceStep::Microwave(d1));
    push_gap(steps, cfg);
    let d2 = PulseSpec::new(
        PulseChannel::Dummy,
        calibrate_pi_pulse(PulseEnvelope::Blackman, cfg.seq.omega2_duration),
        cfg.seq.omega2_duration,
    )
    .with_detuning(offset);
    steps.push(SequenceStep::Microwave(d2));
    push_gap(steps, cfg);
    steps.push(SequenceStep::Microwave(d1));
    push_gap(steps, cfg);
    steps.push(SequenceStep::RampLightOff);
}

/// Compile the addressed-gate spin-echo program: framing π/2, real blocks
/// for every target, echo π, dummy blocks at the same pointings, implicit
/// scanned-phase probe.
pub fn compile_gate_program(
    targets: &[SiteIndex],
    gate: GateKind,
    cfg: &ExperimentConfig,
) -> Result<GateProgram, SequenceError> {
    compile_gate_program_with_comp(targets, gate, cfg, 0.0)
}

pub fn compile_gate_program_with_comp(
    targets: &[SiteIndex],
    gate: GateKind,
    cfg: &ExperimentConfig,
    omega2_phase_comp: f64,
) -> Result<GateProgram, SequenceError> {
    if targets.is_empty() || targets.len() > 2 {
        return Err(SequenceError::BadTargetCount(targets.len()));
    }
    if targets.len() == 2 && targets[0] == targets[1] {
        return Err(SequenceError::CoincidentTargets);
    }
    for t in targets {
        if !cfg.lattice.contains(*t) {
            return Err(GeometryError::OutOfBounds(t.i, t.j, t.k).into());
        }
    }
    let mut steps = Vec::new();
    steps.push(SequenceStep::GlobalHalfPi { phase: 0.0 });
    for &t in targets {
        push_real_block(&mut steps, cfg, t, gate, omega2_phase_comp);
    }
    steps.push(SequenceStep::EchoPi);
    for &t in targets {
        push_dummy_block(&mut steps, cfg, t);
    }
    let program = GateProgram {
        targets: targets.to_vec(),
        gate: Some(gate),
        initial_level: LevelId::S30,
        steps,
        omega2_phase_comp,
    };
    program.verify()?;
    debug_assert!(program.echo_balanced());
    Ok(program)
}

/// The addressing-off reference: identical framing and echo, with the
/// addressed blocks replaced by plain waits of the same duration.
pub fn compile_reference_program(
    targets: &[SiteIndex],
    cfg: &ExperimentConfig,
) -> Result<GateProgram, SequenceError> {
    let addressed = compile_gate_program(targets, GateKind::I, cfg)?;
    let mut steps = Vec::new();
    let mut side_wait = [0.0, 0.0];
    let mut side = 0usize;
    for step in &addressed.steps {
        match step {
            SequenceStep::GlobalHalfPi { .. } => {}
            SequenceStep::EchoPi => side = 1,
            other => side_wait[side] += addressed.step_duration(other, &cfg.seq),
        }
    }
    steps.push(SequenceStep::GlobalHalfPi { phase: 0.0 });
    steps.push(SequenceStep::Wait { duration: side_wait[0] });
    steps.push(SequenceStep::EchoPi);
    steps.push(SequenceStep::Wait { duration: side_wait[1] });
    Ok(GateProgram {
        targets: targets.to_vec(),
        gate: None,
        initial_level: LevelId::S30,
        steps,
        omega2_phase_comp: 0.0,
    })
}

/// Spin-echo coherence program: π/2 – T/2 – π – T/2 – probe.
pub fn compile_echo_program(t_total: f64) -> GateProgram {
    GateProgram {
        targets: Vec::new(),
        gate: None,
        initial_level: LevelId::S30,
        steps: vec![
            SequenceStep::GlobalHalfPi { phase: 0.0 },
            SequenceStep::Wait { duration: t_total / 2.0 },
            SequenceStep::EchoPi,
            SequenceStep::Wait { duration: t_total / 2.0 },
        ],
        omega2_phase_comp: 0.0,
    }
}

/// Ramsey program (no echo): π/2 – T – probe.
pub fn compile_ramsey_program(t_total: f64) -> GateProgram {
    GateProgram {
        targets: Vec::new(),
        gate: None,
        initial_level: LevelId::S30,
        steps: vec![
            SequenceStep::GlobalHalfPi { phase: 0.0 },
            SequenceStep::Wait { duration: t_total },
        ],
        omega2_phase_comp: 0.0,
    }
}

/// Single-π-pulse transfer program on the |4,0⟩ → |3,−1⟩ transition for
/// the frequency scan, one block per target.
pub fn compile_scan_program(
    targets: &[SiteIndex],
    detuning: f64,
    cfg: &ExperimentConfig,
) -> Result<GateProgram, SequenceError> {
    if targets.is_empty() {
        return Err(SequenceError::BadTargetCount(0));
    }
    let mut steps = Vec::new();
    for &t in targets {
        if !cfg.lattice.contains(t) {
            return Err(GeometryError::OutOfBounds(t.i, t.j, t.k).into());
        }
        steps.push(SequenceStep::PointBeams { target: t });
        steps.push(SequenceStep::RampLightOn);
        push_gap(&mut steps, cfg);
        let pulse = PulseSpec::new(
            PulseChannel::Scan,
            calibrate_pi_pulse(PulseEnvelope::Blackman, cfg.seq.omega1_pi_duration),
            cfg.seq.omega1_pi_duration,
        )
        .with_detuning(detuning);
        steps.push(SequenceStep::Microwave(pulse));
        push_gap(&mut steps, cfg);
        steps.push(SequenceStep::RampLightOff);
    }
    let program = GateProgram {
        targets: targets.to_vec(),
        gate: None,
        initial_level: LevelId::S40,
        steps,
        omega2_phase_comp: 0.0,
    };
    program.verify()?;
    Ok(program)
}

/// Per-pointing lookup tables the executor needs for every site.
struct PointingTable {
    targets: Vec<SiteIndex>,
    maps: Vec<StarkShiftMap>,
    /// Per pointing, per site: summed beam intensity (for the light kick).
    intensities: Vec<Vec<f64>>,
}

impl PointingTable {
    fn build(program: &GateProgram, cfg: &ExperimentConfig) -> Result<Self, SequenceError> {
        let mut targets = Vec::new();
        for step in &program.steps {
            if let SequenceStep::PointBeams { target } = step {
                if !targets.contains(target) {
                    targets.push(*target);
                }
            }
        }
        let mut maps = Vec::new();
        let mut intensities = Vec::new();
        for &t in &targets {
            let beams = cfg.beam.crossed_pair(t);
            maps.push(stark_shift_map(&beams, &cfg.lattice)?);
            let per_site: Vec<f64> = cfg
                .lattice
                .sites()
                .map(|s| beams.iter().map(|b| beam_intensity(b, s, &cfg.lattice)).sum())
                .collect();
            intensities.push(per_site);
        }
        Ok(PointingTable { targets, maps, intensities })
    }

    fn index_of(&self, target: SiteIndex) -> usize {
        self.targets.iter().position(|&t| t == target).expect("pointing in table")
    }
}

/// Per-level stark phase rates while the light is on, consistent with the
/// per-transition shift map for every channel except ω₂ (whose pair
/// detuning is taken from the map directly during the pulse).
fn stark_level_rates(s: &TransitionShifts) -> [f64; 5] {
    [
        0.0,
        s.clock,
        s.omega1_down + s.clock,
        s.omega1_up,
        s.scan + s.clock,
    ]
}

/// Evolve one atom through the compiled steps (probe not included).
fn execute_steps(
    program: &GateProgram,
    cfg: &ExperimentConfig,
    opts: &RunOptions,
    site: SiteIndex,
    table: &PointingTable,
    noise: &NoiseRealization,
) -> AtomState {
    let mut state = AtomState::in_level(program.initial_level);
    state.vib_level = noise.vib_level;
    let flat = cfg.lattice.flat(site);
    let zeeman = if opts.deterministic_kicks { cfg.noise.zeeman_phase_kick } else { 0.0 };
    let zero_shifts = TransitionShifts::default();
    let mut light_on = false;
    let mut pointing = 0usize;

    for step in &program.steps {
        match step {
            SequenceStep::PointBeams { target } => {
                pointing = table.index_of(*target);
                free_evolve(&mut state, cfg.seq.mems_settle, noise, None);
            }
            SequenceStep::RampLightOn => {
                light_on = true;
                let local = table.maps[pointing].at(site).scaled(noise.beam_scale);
                free_evolve(&mut state, cfg.seq.ramp_duration, noise, Some(stark_level_rates(&local)));
            }
            SequenceStep::RampLightOff => {
                let local = table.maps[pointing].at(site).scaled(noise.beam_scale);
                free_evolve(&mut state, cfg.seq.ramp_duration, noise, Some(stark_level_rates(&local)));
                if opts.deterministic_kicks {
                    let kick = cfg.noise.line_phase_kick
                        * table.intensities[pointing][flat]
                        * noise.beam_scale;
                    apply_light_phase(&mut state, kick);
                }
                light_on = false;
            }
            SequenceStep::Microwave(pulse) => {
                let shifts = if light_on {
                    table.maps[pointing].at(site).scaled(noise.beam_scale)
                } else {
                    zero_shifts
                };
                apply_pulse(&mut state, pulse, &shifts, noise, zeeman, cfg.seq.pulse_steps)
                    .expect("pulse integration");
            }
            SequenceStep::Wait { duration } => {
                let rates = if light_on {
                    Some(stark_level_rates(&table.maps[pointing].at(site).scaled(noise.beam_scale)))
                } else {
                    None
                };
                free_evolve(&mut state, *duration, noise, rates);
            }
            SequenceStep::EchoPi => {
                let pulse = PulseSpec::new(
                    PulseChannel::Omega0,
                    calibrate_pi_pulse(PulseEnvelope::Blackman, cfg.seq.pi0_duration),
                    cfg.seq.pi0_duration,
                );
                apply_pulse(&mut state, &pulse, &zero_shifts, noise, zeeman, cfg.seq.pulse_steps)
                    .expect("echo pulse");
            }
            SequenceStep::GlobalHalfPi { phase } => {
                let pulse = PulseSpec::new(
                    PulseChannel::Omega0,
                    calibrate_pulse_area(
                        PulseEnvelope::Blackman,
                        cfg.seq.half_pi_duration,
                        std::f64::consts::FRAC_PI_2,
                    ),
                    cfg.seq.half_pi_duration,
                )
                .with_phase(*phase);
                apply_pulse(&mut state, &pulse, &zero_shifts, noise, zeeman, cfg.seq.pulse_steps)
                    .expect("framing pulse");
            }
        }
    }
    state
}

fn free_evolve(
    state: &mut AtomState,
    duration: f64,
    noise: &NoiseRealization,
    stark_rates: Option<[f64; 5]>,
) {
    apply_wait(state, duration, noise);
    if let Some(rates) = stark_rates {
        for (l, r) in rates.iter().enumerate() {
            state.amp[l] *= C64::from_polar(1.0, -r * duration);
        }
    }
}

/// T1 phase scramble just before the probe.
fn apply_t1_scramble(state: &mut AtomState, noise: &NoiseRealization) {
    if let Some(phase) = noise.t1_scramble_phase {
        state.amp[LevelId::S40 as usize] *= C64::from_polar(1.0, phase);
    }
}

/// F = 3 detection probability after the ideal π/2 probe at phase `alpha`.
/// The probe only touches the storage pair; leaked F = 3 population counts.
fn probe_f3_probability(state: &AtomState, alpha: f64, params: &NoiseParams) -> f64 {
    if !state.occupied || state.lost {
        return 0.0;
    }
    let u = rotation(std::f64::consts::FRAC_PI_2, alpha);
    let s = u.apply(state.storage_pair());
    let p = (s[0].norm_sqr()
        + state.population(LevelId::C31)
        + state.population(LevelId::M3m1))
    .clamp(0.0, 1.0);
    p + (1.0 - p) * params.background_f3
}

fn shot_rng(seed: u64, site: usize, shot: usize, salt: u64) -> ChaCha8Rng {
    // splitmix-style mixing for independent, order-free streams
    let mut z = seed
        ^ (site as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (shot as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9)
        ^ salt.wrapping_mul(0x94D0_49BB_1331_11EB);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

fn draw_noise(
    cfg: &ExperimentConfig,
    opts: &RunOptions,
    site: SiteIndex,
    t_total: f64,
    rng: &mut ChaCha8Rng,
) -> NoiseRealization {
    if opts.stochastic_noise {
        sample_noise(&cfg.noise, cfg.lattice.in_core(site), t_total, rng)
    } else {
        NoiseRealization::default()
    }
}

fn occupied(cfg: &ExperimentConfig, opts: &RunOptions, rng: &mut ChaCha8Rng) -> bool {
    !opts.sample_occupancy || rng.gen::<f64>() < cfg.lattice.occupancy_fill
}

fn effective_noise_params(cfg: &ExperimentConfig, opts: &RunOptions) -> NoiseParams {
    if opts.stochastic_noise {
        cfg.noise
    } else {
        NoiseParams { background_f3: 0.0, ..cfg.noise }
    }
}

/// Aggregated execution result without a probe: per-class detected F = 3
/// ratio and the timing ledger.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunResult {
    pub total_duration: f64,
    /// (class, detected-to-initial ratio R, initial atom count).
    pub class_f3: Vec<(AtomClass, f64, usize)>,
    /// Per-site mean detected F = 3 probability (NaN when never occupied).
    pub site_f3: Vec<f64>,
}

impl RunResult {
    pub fn class_ratio(&self, class: AtomClass) -> Option<f64> {
        self.class_f3.iter().find(|(c, _, _)| *c == class).map(|(_, r, _)| *r)
    }
}

/// Execute the program against every occupied site and report per-class
/// F = 3 detection ratios. Deterministic for a fixed seed.
pub fn run_program(
    program: &GateProgram,
    cfg: &ExperimentConfig,
    opts: &RunOptions,
    shots: usize,
    seed: u64,
) -> Result<RunResult, SequenceError> {
    program.verify()?;
    let table = PointingTable::build(program, cfg)?;
    let classes = program.class_map(&cfg.lattice)?;
    let t_total = program.total_duration(&cfg.seq);
    let params = effective_noise_params(cfg, opts);
    let sites: Vec<SiteIndex> = cfg.lattice.sites().collect();

    let per_site: Vec<(f64, usize)> = sites
        .par_iter()
        .map(|&site| {
            let flat = cfg.lattice.flat(site);
            let mut sum = 0.0;
            let mut n = 0usize;
            for shot in 0..shots.max(1) {
                let mut rng = shot_rng(seed, flat, shot, 0x51);
                if !occupied(cfg, opts, &mut rng) {
                    continue;
                }
                let noise = draw_noise(cfg, opts, site, t_total, &mut rng);
                n += 1;
                if noise.lost {
                    continue;
                }
                let state = execute_steps(program, cfg, opts, site, &table, &noise);
                let p = measure_f3(&state, &params);
                if opts.sample_detection {
                    sum += if rng.gen::<f64>() < p { 1.0 } else { 0.0 };
                } else {
                    sum += p;
                }
            }
            (sum, n)
        })
        .collect();

    let mut class_sum: Vec<(AtomClass, f64, usize)> =
        AtomClass::ALL.iter().map(|&c| (c, 0.0, 0usize)).collect();
    let mut site_f3 = vec![f64::NAN; sites.len()];
    for (idx, &site) in sites.iter().enumerate() {
        let (sum, n) = per_site[idx];
        if n > 0 {
            site_f3[idx] = sum / n as f64;
        }
        let class = classes.at(site);
        let entry = class_sum.iter_mut().find(|(c, _, _)| *c == class).unwrap();
        entry.1 += sum;
        entry.2 += n;
    }
    let class_f3 = class_sum
        .into_iter()
        .map(|(c, sum, n)| (c, if n > 0 { sum / n as f64 } else { f64::NAN }, n))
        .collect();
    Ok(RunResult { total_duration: t_total, class_f3, site_f3 })
}

/// Per-class fringes from running the program and probing at each phase in
/// `alphas`. One pre-probe trajectory is computed per (site, shot); the
/// probe itself is evaluated analytically at every phase.
pub fn fringe_scan(
    program: &GateProgram,
    cfg: &ExperimentConfig,
    opts: &RunOptions,
    alphas: &[f64],
    shots: usize,
    seed: u64,
) -> Result<Vec<FringeData>, SequenceError> {
    program.verify()?;
    let table = PointingTable::build(program, cfg)?;
    let classes = program.class_map(&cfg.lattice)?;
    let t_total = program.total_duration(&cfg.seq) + cfg.seq.half_pi_duration;
    let params = effective_noise_params(cfg, opts);
    let sites: Vec<SiteIndex> = cfg.lattice.sites().collect();
    let n_alpha = alphas.len();

    // per-site partial sums in site order, then a sequential class
    // aggregation, so results do not depend on the parallel split
    let per_site: Vec<(Vec<f64>, usize)> = sites
        .par_iter()
        .map(|&site| {
            let flat = cfg.lattice.flat(site);
            let mut sums = vec![0.0f64; n_alpha];
            let mut n = 0usize;
            for shot in 0..shots.max(1) {
                let mut rng = shot_rng(seed, flat, shot, 0x51);
                if !occupied(cfg, opts, &mut rng) {
                    continue;
                }
                let noise = draw_noise(cfg, opts, site, t_total, &mut rng);
                n += 1;
                if noise.lost {
                    continue;
                }
                let mut state = execute_steps(program, cfg, opts, site, &table, &noise);
                apply_t1_scramble(&mut state, &noise);
                for (ai, &alpha) in alphas.iter().enumerate() {
                    let p = probe_f3_probability(&state, alpha, &params);
                    if opts.sample_detection {
                        if rng.gen::<f64>() < p {
                            sums[ai] += 1.0;
                        }
                    } else {
                        sums[ai] += p;
                    }
                }
            }
            (sums, n)
        })
        .collect();
    let mut acc = vec![(vec![0.0f64; n_alpha], 0usize); AtomClass::ALL.len()];
    for (idx, &site) in sites.iter().enumerate() {
        let cidx = AtomClass::ALL.iter().position(|&c| c == classes.at(site)).unwrap();
        for (x, y) in acc[cidx].0.iter_mut().zip(&per_site[idx].0) {
            *x += y;
        }
        acc[cidx].1 += per_site[idx].1;
    }

    Ok(AtomClass::ALL
        .iter()
        .zip(acc)
        .map(|(&class, (sums, n))| FringeData {
            class,
            alpha: alphas.to_vec(),
            p0: sums
                .iter()
                .map(|s| if n > 0 { s / n as f64 } else { f64::NAN })
                .collect(),
            shots: if n > 0 { Some(n as u64) } else { None },
        })
        .collect())
}

/// Ideal storage-basis state just before the probe, from exact 2×2
/// rotations in the compiled order. This is the comparison state σ for the
/// fidelity analysis and the oracle for the echo-cancellation checks.
pub fn ideal_preprobe_state(gate: Option<GateKind>, class: AtomClass) -> [C64; 2] {
    let half_pi = rotation(std::f64::consts::FRAC_PI_2, 0.0);
    let echo = rotation(std::f64::consts::PI, 0.0);
    let mut psi = [C64::new(1.0, 0.0), C64::new(0.0, 0.0)];
    psi = half_pi.apply(psi);
    if class == AtomClass::Target {
        if let Some(g) = gate {
            let (axis_phase, angle) = g.axis_angle();
            psi = rotation(angle, axis_phase).apply(psi);
        }
    }
    psi = echo.apply(psi);
    psi
}

/// Ideal fringe-model parameters (n, θ, φ) for a class, derived from the
/// ideal pre-probe state.
pub fn ideal_fringe_params(gate: Option<GateKind>, class: AtomClass) -> (f64, f64, f64) {
    let psi = ideal_preprobe_state(gate, class);
    bloch_angles(psi)
}

/// (n, θ, φ) of a storage-pair state in the fringe-model convention:
/// P0(α) = n²(1 + sinθ cos(α + φ))/2 after the π/2 probe.
pub fn bloch_angles(psi: [C64; 2]) -> (f64, f64, f64) {
    let n2 = psi[0].norm_sqr() + psi[1].norm_sqr();
    let n = n2.sqrt();
    if n < 1e-15 {
        return (0.0, 0.0, 0.0);
    }
    let cos_half = psi[0].norm() / n;
    let theta = 2.0 * cos_half.clamp(0.0, 1.0).acos();
    // relative phase of |1⟩ vs |0⟩
    let rel = (psi[1] * psi[0].conj()).arg();
    // probe convention: P0 = n²(1 + sinθ cos(α + φ))/2 with φ = π/2 − rel
    let phi = (std::f64::consts::FRAC_PI_2 - rel).rem_euclid(std::f64::consts::TAU);
    (n, theta, phi)
}

/// Find the ω₂ phase compensation nulling the target's residual phase from
/// dummy blocks and off-resonant kicks: a noise-free run with kicks on,
/// maximizing mean target state fidelity against the ideal state.
pub fn calibrate_gate_phase(
    targets: &[SiteIndex],
    gate: GateKind,
    cfg: &ExperimentConfig,
) -> Result<f64, SequenceError> {
    let opts = RunOptions::kicks_only();
    let score = |comp: f64| -> Result<f64, SequenceError> {
        let program = compile_gate_program_with_comp(targets, gate, cfg, comp)?;
        let table = PointingTable::build(&program, cfg)?;
        let noise = NoiseRealization::default();
        let mut total = 0.0;
        for &t in targets {
            let state = execute_steps(&program, cfg, &opts, t, &table, &noise);
            let ideal = ideal_preprobe_state(Some(gate), AtomClass::Target);
            let s = state.storage_pair();
            let ov = ideal[0].conj() * s[0] + ideal[1].conj() * s[1];
            total += ov.norm();
        }
        Ok(total / targets.len() as f64)
    };
    // coarse grid, then golden-section refinement
    let mut best = (0.0, -1.0);
    for k in 0..48 {
        let comp = -std::f64::consts::PI + k as f64 * std::f64::consts::TAU / 48.0;
        let f = score(comp)?;
        if f > best.1 {
            best = (comp, f);
        }
    }
    let golden = 0.618_033_988_749_895;
    let width = std::f64::consts::TAU / 48.0;
    let (mut a, mut b) = (best.0 - width, best.0 + width);
    let mut c = b - golden * (b - a);
    let mut d = a + golden * (b - a);
    let mut fc = score(c)?;
    let mut fd = score(d)?;
    for _ in 0..40 {
        if fc > fd {
            b = d;
            d = c;
            fd = fc;
            c = b - golden * (b - a);
            fc = score(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + golden * (b - a);
            fd = score(d)?;
        }
    }
    Ok((a + b) / 2.0)
}

/// Compile a gate program with its calibrated ω₂ phase compensation.
pub fn compile_calibrated_gate(
    targets: &[SiteIndex],
    gate: GateKind,
    cfg: &ExperimentConfig,
) -> Result<GateProgram, SequenceError> {
    let comp = calibrate_gate_phase(targets, gate, cfg)?;
    compile_gate_program_with_comp(targets, gate, cfg, comp)
}

/// Per-class state fidelity of a deterministic (noise-free) run against the
/// ideal pre-probe states: the echo-cancellation figure of merit.
pub fn deterministic_state_fidelities(
    program: &GateProgram,
    cfg: &ExperimentConfig,
    opts: &RunOptions,
) -> Result<Vec<(SiteIndex, AtomClass, f64)>, SequenceError> {
    program.verify()?;
    let table = PointingTable::build(program, cfg)?;
    let classes = program.class_map(&cfg.lattice)?;
    let noise = NoiseRealization::default();
    let sites: Vec<SiteIndex> = cfg.lattice.sites().collect();
    let out = sites
        .par_iter()
        .map(|&site| {
            let class = classes.at(site);
            let state = execute_steps(program, cfg, opts, site, &table, &noise);
            let ideal = ideal_preprobe_state(program.gate, class);
            let s = state.storage_pair();
            let ov = ideal[0].conj() * s[0] + ideal[1].conj() * s[1];
            (site, class, ov.norm())
        })
        .collect();
    Ok(out)
}

/// Per-class transfer ratio R versus ω₁-scan detuning.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScanResult {
    pub detunings: Vec<f64>,
    /// One R series per atom class, in `AtomClass::ALL` order.
    pub class_r: Vec<Vec<f64>>,
}

/// Run the single-π-pulse transfer program across a detuning list and
/// report the detected-to-initial ratio per class.
pub fn frequency_scan(
    detunings: &[f64],
    targets: &[SiteIndex],
    cfg: &ExperimentConfig,
    opts: &RunOptions,
    shots: usize,
    seed: u64,
) -> Result<ScanResult, SequenceError> {
    if detunings.is_empty() {
        return Err(SequenceError::NoDetunings);
    }
    let mut class_r = vec![Vec::with_capacity(detunings.len()); AtomClass::ALL.len()];
    for (di, &d) in detunings.iter().enumerate() {
        let program = compile_scan_program(targets, d, cfg)?;
        let result = run_program(&program, cfg, opts, shots, seed ^ (di as u64) << 32)?;
        for (ci, &class) in AtomClass::ALL.iter().enumerate() {
            class_r[ci].push(result.class_ratio(class).unwrap_or(f64::NAN));
        }
    }
    Ok(ScanResult { detunings: detunings.to_vec(), class_r })
}

/// Fringe contrast (first-harmonic amplitude over mean) and raw amplitude
/// for one coherence time.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ContrastPoint {
    pub t_total: f64,
    pub contrast_overall: f64,
    pub contrast_core: f64,
    /// Unnormalized fringe amplitude (shows atom loss).
    pub amplitude_overall: f64,
}

fn fringe_contrast(alphas: &[f64], p0: &[f64]) -> (f64, f64) {
    let n = alphas.len() as f64;
    let mean: f64 = p0.iter().sum::<f64>() / n;
    let mut re = 0.0;
    let mut im = 0.0;
    for (&a, &p) in alphas.iter().zip(p0) {
        re += p * a.cos();
        im += p * a.sin();
    }
    let amp = 2.0 * (re * re + im * im).sqrt() / n;
    (if mean.abs() > 1e-12 { amp / mean } else { 0.0 }, amp)
}

/// Echo (or Ramsey) fringe contrast versus total coherence time, overall
/// and for the central core.
pub fn contrast_curve(
    t_values: &[f64],
    cfg: &ExperimentConfig,
    opts: &RunOptions,
    use_echo: bool,
    alphas: &[f64],
    shots: usize,
    seed: u64,
) -> Result<Vec<ContrastPoint>, SequenceError> {
    let mut out = Vec::with_capacity(t_values.len());
    for (ti, &t) in t_values.iter().enumerate() {
        let program = if use_echo { compile_echo_program(t) } else { compile_ramsey_program(t) };
        let point = contrast_point(&program, cfg, opts, alphas, shots, seed ^ (ti as u64) << 40)?;
        out.push(ContrastPoint { t_total: t, ..point });
    }
    Ok(out)
}

fn contrast_point(
    program: &GateProgram,
    cfg: &ExperimentConfig,
    opts: &RunOptions,
    alphas: &[f64],
    shots: usize,
    seed: u64,
) -> Result<ContrastPoint, SequenceError> {
    let table = PointingTable::build(program, cfg)?;
    let t_total = program.total_duration(&cfg.seq) + cfg.seq.half_pi_duration;
    let params = effective_noise_params(cfg, opts);
    let sites: Vec<SiteIndex> = cfg.lattice.sites().collect();
    let n_alpha = alphas.len();

    let per_site: Vec<(Vec<f64>, usize)> = sites
        .par_iter()
        .map(|&site| {
            let flat = cfg.lattice.flat(site);
            let mut sums = vec![0.0f64; n_alpha];
            let mut n = 0usize;
            for shot in 0..shots.max(1) {
                let mut rng = shot_rng(seed, flat, shot, 0x51);
                if !occupied(cfg, opts, &mut rng) {
                    continue;
                }
                let noise = draw_noise(cfg, opts, site, t_total, &mut rng);
                n += 1;
                if noise.lost {
                    continue;
                }
                let mut state = execute_steps(program, cfg, opts, site, &table, &noise);
                apply_t1_scramble(&mut state, &noise);
                for (ai, &alpha) in alphas.iter().enumerate() {
                    let p = probe_f3_probability(&state, alpha, &params);
                    sums[ai] += if opts.sample_detection {
                        if rng.gen::<f64>() < p { 1.0 } else { 0.0 }
                    } else {
                        p
                    };
                }
            }
            (sums, n)
        })
        .collect();
    let mut sum_all = vec![0.0f64; n_alpha];
    let mut sum_core = vec![0.0f64; n_alpha];
    let mut n_all = 0usize;
    let mut n_core = 0usize;
    for (idx, &site) in sites.iter().enumerate() {
        let (sums, n) = &per_site[idx];
        for (x, y) in sum_all.iter_mut().zip(sums) {
            *x += y;
        }
        n_all += n;
        if cfg.lattice.in_core(site) {
            for (x, y) in sum_core.iter_mut().zip(sums) {
                *x += y;
            }
            n_core += n;
        }
    }

    let p_all: Vec<f64> = sum_all.iter().map(|s| s / n_all.max(1) as f64).collect();
    let p_core: Vec<f64> = sum_core.iter().map(|s| s / n_core.max(1) as f64).collect();
    let (c_all, amp_all) = fringe_contrast(alphas, &p_all);
    let (c_core, _) = fringe_contrast(alphas, &p_core);
    Ok(ContrastPoint {
        t_total: 0.0,
        contrast_overall: c_all,
        contrast_core: c_core,
        amplitude_overall: amp_all,
    })
}

/// Evenly spaced probe phases covering [0, 2π).
pub fn default_alphas(n: usize) -> Vec<f64> {
    (0..n).map(|k| k as f64 * std::f64::consts::TAU / n as f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn cfg() -> ExperimentConfig {
        ExperimentConfig::default()
    }

    fn target() -> SiteIndex {
        SiteIndex::new(2, 2, 2)
    }

    #[test]
    fn ideal_states_match_hand_results() {
        // no gate: both classes sit on the equator with a zero fringe phase
        let (n, theta, phi) = ideal_fringe_params(None, AtomClass::Spectator);
        assert_abs_diff_eq!(n, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(theta, std::f64::consts::FRAC_PI_2, epsilon = 1e-12);
        assert_abs_diff_eq!(phi, 0.0, epsilon = 1e-12);
        // gate I flips the target fringe by π
        let (_, _, phi_t) = ideal_fringe_params(Some(GateKind::I), AtomClass::Target);
        assert_abs_diff_eq!(phi_t, std::f64::consts::PI, epsilon = 1e-12);
        // gate III parks the target at the pole: flat half-height fringe
        let (n3, theta3, _) = ideal_fringe_params(Some(GateKind::III), AtomClass::Target);
        assert_abs_diff_eq!(n3, 1.0, epsilon = 1e-12);
        assert!(theta3.sin() < 1e-12, "gate III should leave sinθ = 0, got θ = {theta3}");
    }

    #[test]
    fn reference_program_gives_identity_fringe() {
        let cfg = cfg();
        let program = compile_reference_program(&[target()], &cfg).unwrap();
        let alphas = default_alphas(8);
        let fringes =
            fringe_scan(&program, &cfg, &RunOptions::noise_free(), &alphas, 1, 7).unwrap();
        for f in &fringes {
            if f.shots.is_none() {
                continue;
            }
            for (&a, &p) in f.alpha.iter().zip(&f.p0) {
                assert_abs_diff_eq!(p, (1.0 + a.cos()) / 2.0, epsilon = 1e-7);
            }
        }
    }

    #[test]
    fn gate_i_fringes_noise_free() {
        let cfg = cfg();
        let program = compile_gate_program(&[target()], GateKind::I, &cfg).unwrap();
        let alphas = default_alphas(8);
        let fringes =
            fringe_scan(&program, &cfg, &RunOptions::noise_free(), &alphas, 1, 7).unwrap();
        for f in &fringes {
            let tol = if f.class == AtomClass::Target { 1e-6 } else { 2e-3 };
            let sign = if f.class == AtomClass::Target { -1.0 } else { 1.0 };
            for (&a, &p) in f.alpha.iter().zip(&f.p0) {
                assert_abs_diff_eq!(p, (1.0 + sign * a.cos()) / 2.0, epsilon = tol);
            }
        }
    }

    #[test]
    fn zero_angle_gate_is_identity() {
        // zero ω₂ amplitude: the target goes to the computational basis and
        // back, which is the identity up to the compensated phase
        let cfg = cfg();
        let gate = GateKind::Custom { axis_phase: 0.0, angle: 0.0 };
        let program = compile_gate_program(&[target()], gate, &cfg).unwrap();
        let alphas = default_alphas(8);
        let fringes =
            fringe_scan(&program, &cfg, &RunOptions::noise_free(), &alphas, 1, 7).unwrap();
        let f = fringes.iter().find(|f| f.class == AtomClass::Target).unwrap();
        for (&a, &p) in f.alpha.iter().zip(&f.p0) {
            assert_abs_diff_eq!(p, (1.0 + a.cos()) / 2.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn two_target_program_structure() {
        let cfg = cfg();
        let t2 = SiteIndex::new(1, 3, 2);
        let program = compile_gate_program(&[target(), t2], GateKind::II, &cfg).unwrap();
        let pointings = program
            .steps
            .iter()
            .filter(|s| matches!(s, SequenceStep::PointBeams { .. }))
            .count();
        assert_eq!(pointings, 4, "two real and two dummy blocks");
        assert!(program.echo_balanced());
        program.verify().unwrap();
        // dropping the trailing dummy block breaks the balance
        let mut broken = program.clone();
        while !matches!(broken.steps.last(), Some(SequenceStep::RampLightOn)) {
            broken.steps.pop();
        }
        broken.steps.pop();
        assert!(!broken.echo_balanced());
    }

    #[test]
    fn ordering_violations_rejected() {
        let cfg = cfg();
        let mut program = compile_gate_program(&[target()], GateKind::I, &cfg).unwrap();
        // repointing with the light on is rejected
        let on = program
            .steps
            .iter()
            .position(|s| matches!(s, SequenceStep::RampLightOn))
            .unwrap();
        program.steps.insert(on + 1, SequenceStep::PointBeams { target: target() });
        assert!(matches!(program.verify(), Err(SequenceError::BadOrdering(_))));
    }

    #[test]
    fn duration_ledger_is_exact() {
        let cfg = cfg();
        let program = compile_gate_program(&[target()], GateKind::I, &cfg).unwrap();
        let mut by_hand = 0.0;
        for step in &program.steps {
            by_hand += program.step_duration(step, &cfg.seq);
        }
        assert_abs_diff_eq!(program.total_duration(&cfg.seq), by_hand, epsilon = 0.0);
        // the reference program mirrors the addressed one in total time
        let reference = compile_reference_program(&[target()], &cfg).unwrap();
        assert_abs_diff_eq!(
            reference.total_duration(&cfg.seq),
            program.total_duration(&cfg.seq),
            epsilon = 1e-12
        );
    }

    #[test]
    fn fringe_scan_is_deterministic() {
        let cfg = cfg();
        let program = compile_gate_program(&[target()], GateKind::I, &cfg).unwrap();
        let alphas = default_alphas(6);
        let opts = RunOptions::full();
        let a = fringe_scan(&program, &cfg, &opts, &alphas, 12, 99).unwrap();
        let b = fringe_scan(&program, &cfg, &opts, &alphas, 12, 99).unwrap();
        for (fa, fb) in a.iter().zip(&b) {
            assert_eq!(fa.shots, fb.shots);
            for (x, y) in fa.p0.iter().zip(&fb.p0) {
                assert!(x.to_bits() == y.to_bits() || (x.is_nan() && y.is_nan()));
            }
        }
        let c = fringe_scan(&program, &cfg, &opts, &alphas, 12, 100).unwrap();
        let differs = a
            .iter()
            .zip(&c)
            .any(|(fa, fc)| fa.p0.iter().zip(&fc.p0).any(|(x, y)| x != y));
        assert!(differs, "different seeds should give different samples");
    }

    #[test]
    fn frequency_scan_peak_structure() {
        let cfg = cfg();
        let delta = cfg.beam.peak_shift_2pi;
        let scan = frequency_scan(
            &[0.0, delta, 2.0 * delta],
            &[target()],
            &cfg,
            &RunOptions::noise_free(),
            1,
            5,
        )
        .unwrap();
        let idx = |c: AtomClass| AtomClass::ALL.iter().position(|&x| x == c).unwrap();
        let t = &scan.class_r[idx(AtomClass::Target)];
        let l = &scan.class_r[idx(AtomClass::Line)];
        let s = &scan.class_r[idx(AtomClass::Spectator)];
        // target transfers at 2Δ; line atoms peak at Δ but sit off-focus
        // along the beam axis, so their π pulse is slightly detuned and the
        // class average stays well below one
        assert!(t[2] > 0.99 && t[1] < 0.05 && t[0] < 0.05, "target R: {t:?}");
        assert!(l[1] > 0.2 && l[1] > 10.0 * l[0] && l[1] > 10.0 * l[2], "line R: {l:?}");
        // spectators are unshifted: they transfer at zero detuning only
        assert!(s[0] > 0.99 && s[1] < 0.05 && s[2] < 0.05, "spectator R: {s:?}");
    }

    #[test]
    fn calibrated_gate_cancels_kicks() {
        // with deterministic light and microwave kicks on, the dummy blocks
        // plus the calibrated ω₂ phase restore near-unit state fidelity
        let mut cfg = cfg();
        cfg.seq.pulse_steps = 64;
        let program = compile_calibrated_gate(&[target()], GateKind::II, &cfg).unwrap();
        let fids =
            deterministic_state_fidelities(&program, &cfg, &RunOptions::kicks_only()).unwrap();
        for (site, class, f) in &fids {
            assert!(
                *f > 0.998,
                "site {site:?} class {class:?} fidelity {f}"
            );
        }
    }

    #[test]
    fn uncompensated_kicks_hurt_the_target_only() {
        let mut cfg = cfg();
        cfg.seq.pulse_steps = 64;
        let program = compile_gate_program(&[target()], GateKind::II, &cfg).unwrap();
        let fids =
            deterministic_state_fidelities(&program, &cfg, &RunOptions::kicks_only()).unwrap();
        for (_, class, f) in &fids {
            if *class == AtomClass::Target {
                assert!(*f < 0.99, "uncompensated target fidelity {f}");
            } else {
                assert!(*f > 0.998, "non-target fidelity {f}");
            }
        }
    }

    #[test]
    fn contrast_curve_echo_vs_ramsey() {
        let cfg = cfg();
        let alphas = default_alphas(8);
        let opts = RunOptions {
            stochastic_noise: true,
            deterministic_kicks: false,
            sample_occupancy: false,
            sample_detection: false,
        };
        let t = 10e-3;
        let echo = contrast_curve(&[t], &cfg, &opts, true, &alphas, 40, 11).unwrap();
        let ramsey = contrast_curve(&[t], &cfg, &opts, false, &alphas, 40, 11).unwrap();
        // the echo removes static detunings: contrast well above Ramsey
        assert!(
            echo[0].contrast_overall > ramsey[0].contrast_overall + 0.1,
            "echo {} vs ramsey {}",
            echo[0].contrast_overall,
            ramsey[0].contrast_overall
        );
        // without echo the quieter core outlives the full cloud
        assert!(
            ramsey[0].contrast_core > ramsey[0].contrast_overall,
            "core {} vs overall {}",
            ramsey[0].contrast_core,
            ramsey[0].contrast_overall
        );
    }

    #[test]
    fn program_round_trips_through_json() {
        let cfg = cfg();
        let program = compile_gate_program(&[target()], GateKind::III, &cfg).unwrap();
        let json = serde_json::to_string(&program).unwrap();
        let back: GateProgram = serde_json::from_str(&json).unwrap();
        // float text round trips can differ in the last ulp; the JSON form
        // itself must be stable
        assert_eq!(json, serde_json::to_string(&back).unwrap());
        assert_eq!(program.targets, back.targets);
        assert_eq!(program.steps.len(), back.steps.len());
    }
}
