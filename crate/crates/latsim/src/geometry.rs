//! Lattice layout, addressing-beam intensity model, per-site ac Stark shift
//! map, and atom-class labeling.
//!
//! Two Gaussian beams propagate along the two horizontal lattice axes and
//! cross at the target site, which therefore sees roughly twice the
//! single-beam shift. Atoms on exactly one beam line see one unit of shift
//! (reduced by the axial falloff), everything else is strongly suppressed
//! by the Gaussian transverse profile.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("lattice dims must all be >= 1")]
    EmptyLattice,
    #[error("spacing must be > 0, got {0}")]
    BadSpacing(f64),
    #[error("occupancy_fill must be in [0,1], got {0}")]
    BadFill(f64),
    #[error("site ({0}, {1}, {2}) outside lattice bounds")]
    OutOfBounds(usize, usize, usize),
    #[error("two addressing beams must have orthogonal axes")]
    ParallelBeams,
    #[error("at most two addressing beams are supported")]
    TooManyBeams,
    #[error("duplicate target site ({0}, {1}, {2})")]
    DuplicateTarget(usize, usize, usize),
}

/// Discrete 3D lattice geometry and fill fraction.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatticeConfig {
    /// Number of sites per axis.
    pub dims: [usize; 3],
    /// Site spacing in μm (same for every axis).
    pub spacing: f64,
    /// Probability that a site holds an atom.
    pub occupancy_fill: f64,
}

impl Default for LatticeConfig {
    fn default() -> Self {
        LatticeConfig { dims: [5, 5, 5], spacing: 4.9, occupancy_fill: 0.40 }
    }
}

impl LatticeConfig {
    pub fn validate(&self) -> Result<(), GeometryError> {
        if self.dims.iter().any(|&d| d == 0) {
            return Err(GeometryError::EmptyLattice);
        }
        if !(self.spacing > 0.0) {
            return Err(GeometryError::BadSpacing(self.spacing));
        }
        if !(0.0..=1.0).contains(&self.occupancy_fill) {
            return Err(GeometryError::BadFill(self.occupancy_fill));
        }
        Ok(())
    }

    pub fn n_sites(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn sites(&self) -> impl Iterator<Item = SiteIndex> + '_ {
        let [nx, ny, nz] = self.dims;
        (0..nx).flat_map(move |i| {
            (0..ny).flat_map(move |j| (0..nz).map(move |k| SiteIndex { i, j, k }))
        })
    }

    pub fn contains(&self, s: SiteIndex) -> bool {
        s.i < self.dims[0] && s.j < self.dims[1] && s.k < self.dims[2]
    }

    /// Physical site position in μm.
    pub fn position(&self, s: SiteIndex) -> [f64; 3] {
        [
            s.i as f64 * self.spacing,
            s.j as f64 * self.spacing,
            s.k as f64 * self.spacing,
        ]
    }

    /// Flat index for dense per-site storage.
    pub fn flat(&self, s: SiteIndex) -> usize {
        (s.i * self.dims[1] + s.j) * self.dims[2] + s.k
    }

    /// True when the site lies in the central core (middle third per axis
    /// for the default 5×5×5 this is the central 3×3×3).
    pub fn in_core(&self, s: SiteIndex) -> bool {
        let ok = |x: usize, n: usize| {
            if n < 3 {
                true
            } else {
                x >= 1 && x < n - 1
            }
        };
        ok(s.i, self.dims[0]) && ok(s.j, self.dims[1]) && ok(s.k, self.dims[2])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SiteIndex {
    pub i: usize,
    pub j: usize,
    pub k: usize,
}

impl SiteIndex {
    pub fn new(i: usize, j: usize, k: usize) -> Self {
        SiteIndex { i, j, k }
    }
}

/// Horizontal propagation axis of an addressing beam.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BeamAxis {
    X,
    Y,
}

/// Per-transition relative shift coefficients for one beam, multiplying
/// `peak_shift_2pi`. The paper does not give per-sublevel ratios under the
/// circularly polarized tune-out light, so each transition gets its own
/// coefficient. Storage clock states are unshifted at tune-out by default.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShiftCoeffs {
    /// |3,0⟩ ↔ |4,1⟩ leg of ω₁.
    pub omega1_up: f64,
    /// |4,0⟩ ↔ |3,1⟩ leg of ω₁.
    pub omega1_down: f64,
    /// |3,1⟩ ↔ |4,1⟩ (ω₂).
    pub omega2: f64,
    /// |4,0⟩ ↔ |3,−1⟩ (the frequency-scan transition).
    pub scan: f64,
    /// Residual |3,0⟩ ↔ |4,0⟩ clock differential.
    pub clock: f64,
}

impl Default for ShiftCoeffs {
    fn default() -> Self {
        ShiftCoeffs { omega1_up: 1.0, omega1_down: 1.0, omega2: 1.0, scan: 1.0, clock: 0.0 }
    }
}

/// One addressing beam: a Gaussian beam propagating along a horizontal
/// lattice axis, focused on a given site.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct BeamSpec {
    pub axis: BeamAxis,
    /// Site whose line the beam is centered on and where the focus sits.
    pub line: SiteIndex,
    /// Continuous transverse offset of the beam center in μm. For an
    /// X-axis beam the components are (Δy, Δz); for a Y-axis beam (Δx, Δz).
    pub offset_um: [f64; 2],
    /// Beam waist w₀ in μm.
    pub waist_w0: f64,
    /// Rayleigh range in μm.
    pub rayleigh_zr: f64,
    /// Single-beam peak ac Stark shift at focus, rad/s (the symbol Δ).
    pub peak_shift_2pi: f64,
    pub coeffs: ShiftCoeffs,
}

impl BeamSpec {
    /// Beam focused on `target`, propagating along `axis`.
    pub fn crossing(axis: BeamAxis, target: SiteIndex, peak_shift_2pi: f64) -> Self {
        BeamSpec {
            axis,
            line: target,
            offset_um: [0.0, 0.0],
            waist_w0: 2.7,
            rayleigh_zr: 26.0,
            peak_shift_2pi,
            coeffs: ShiftCoeffs::default(),
        }
    }

    /// The two crossed beams addressing `target`.
    pub fn crossed_pair(target: SiteIndex, peak_shift_2pi: f64) -> [BeamSpec; 2] {
        [
            BeamSpec::crossing(BeamAxis::X, target, peak_shift_2pi),
            BeamSpec::crossing(BeamAxis::Y, target, peak_shift_2pi),
        ]
    }

    /// (axial distance from focus, transverse distance from beam line) in
    /// μm for an arbitrary physical position.
    pub fn axial_transverse(&self, pos: [f64; 3], lattice: &LatticeConfig) -> (f64, f64) {
        let focus = lattice.position(self.line);
        match self.axis {
            BeamAxis::X => {
                let z = pos[0] - focus[0];
                let dy = pos[1] - (focus[1] + self.offset_um[0]);
                let dz = pos[2] - (focus[2] + self.offset_um[1]);
                (z, (dy * dy + dz * dz).sqrt())
            }
            BeamAxis::Y => {
                let z = pos[1] - focus[1];
                let dx = pos[0] - (focus[0] + self.offset_um[0]);
                let dz = pos[2] - (focus[2] + self.offset_um[1]);
                (z, (dx * dx + dz * dz).sqrt())
            }
        }
    }

    /// Relative Gaussian-beam intensity at a physical position, 1.0 at focus.
    pub fn intensity_at(&self, pos: [f64; 3], lattice: &LatticeConfig) -> f64 {
        let (z, r) = self.axial_transverse(pos, lattice);
        let w0 = self.waist_w0;
        let w2 = w0 * w0 * (1.0 + (z / self.rayleigh_zr).powi(2));
        (w0 * w0 / w2) * (-2.0 * r * r / w2).exp()
    }
}

/// Relative intensity of `beam` at a lattice site, in [0, 1].
pub fn beam_intensity(beam: &BeamSpec, site: SiteIndex, lattice: &LatticeConfig) -> f64 {
    beam.intensity_at(lattice.position(site), lattice)
}

/// Per-site ac Stark shifts for every modeled transition, rad/s.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct TransitionShifts {
    pub omega1_up: f64,
    pub omega1_down: f64,
    pub omega2: f64,
    pub scan: f64,
    pub clock: f64,
}

impl TransitionShifts {
    /// All shifts multiplied by a common intensity factor.
    pub fn scaled(&self, f: f64) -> TransitionShifts {
        TransitionShifts {
            omega1_up: self.omega1_up * f,
            omega1_down: self.omega1_down * f,
            omega2: self.omega2 * f,
            scan: self.scan * f,
            clock: self.clock * f,
        }
    }

    fn add_scaled(&mut self, c: &ShiftCoeffs, s: f64) {
        self.omega1_up += c.omega1_up * s;
        self.omega1_down += c.omega1_down * s;
        self.omega2 += c.omega2 * s;
        self.scan += c.scan * s;
        self.clock += c.clock * s;
    }
}

/// Dense per-site shift map for one beam pointing.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StarkShiftMap {
    pub lattice: LatticeConfig,
    pub shifts: Vec<TransitionShifts>,
}

impl StarkShiftMap {
    pub fn at(&self, site: SiteIndex) -> &TransitionShifts {
        &self.shifts[self.lattice.flat(site)]
    }

    pub fn zero(lattice: &LatticeConfig) -> Self {
        StarkShiftMap {
            lattice: *lattice,
            shifts: vec![TransitionShifts::default(); lattice.n_sites()],
        }
    }
}

/// Sum the shift contributions of up to two (orthogonal) beams per site.
pub fn stark_shift_map(
    beams: &[BeamSpec],
    lattice: &LatticeConfig,
) -> Result<StarkShiftMap, GeometryError> {
    lattice.validate()?;
    if beams.len() > 2 {
        return Err(GeometryError::TooManyBeams);
    }
    if beams.len() == 2 && beams[0].axis == beams[1].axis {
        return Err(GeometryError::ParallelBeams);
    }
    let mut map = StarkShiftMap::zero(lattice);
    for site in lattice.sites() {
        let idx = lattice.flat(site);
        for beam in beams {
            let intensity = beam_intensity(beam, site, lattice);
            map.shifts[idx].add_scaled(&beam.coeffs, beam.peak_shift_2pi * intensity);
        }
    }
    Ok(map)
}

/// Atom classes of the paper's figures. Precedence when classifying:
/// Target > Line > NearestNeighbor > Spectator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AtomClass {
    Target,
    Line,
    NearestNeighbor,
    Spectator,
}

impl AtomClass {
    pub const ALL: [AtomClass; 4] = [
        AtomClass::Target,
        AtomClass::Line,
        AtomClass::NearestNeighbor,
        AtomClass::Spectator,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            AtomClass::Target => "target",
            AtomClass::Line => "line",
            AtomClass::NearestNeighbor => "nearest_neighbor",
            AtomClass::Spectator => "spectator",
        }
    }
}

/// Dense per-site class map.
#[derive(Clone, Debug)]
pub struct ClassMap {
    pub lattice: LatticeConfig,
    pub classes: Vec<AtomClass>,
}

impl ClassMap {
    pub fn at(&self, site: SiteIndex) -> AtomClass {
        self.classes[self.lattice.flat(site)]
    }

    pub fn count(&self, class: AtomClass) -> usize {
        self.classes.iter().filter(|&&c| c == class).count()
    }
}

/// Classify every site for a sequence addressing `targets` with the default
/// crossed X/Y beam pair per target. A site is Line when it lies on any
/// beam line of any pointing and is not itself a target; NearestNeighbor
/// when it is face-adjacent to a target and not already Target/Line.
pub fn classify_sites(
    targets: &[SiteIndex],
    lattice: &LatticeConfig,
) -> Result<ClassMap, GeometryError> {
    lattice.validate()?;
    for (n, t) in targets.iter().enumerate() {
        if !lattice.contains(*t) {
            return Err(GeometryError::OutOfBounds(t.i, t.j, t.k));
        }
        if targets[..n].contains(t) {
            return Err(GeometryError::DuplicateTarget(t.i, t.j, t.k));
        }
    }
    let mut classes = vec![AtomClass::Spectator; lattice.n_sites()];
    for site in lattice.sites() {
        let idx = lattice.flat(site);
        let is_target = targets.contains(&site);
        if is_target {
            classes[idx] = AtomClass::Target;
            continue;
        }
        let on_line = targets.iter().any(|t| {
            // X-axis beam line through t: varying i with (j,k) fixed;
            // Y-axis beam line: varying j with (i,k) fixed.
            (site.j == t.j && site.k == t.k) || (site.i == t.i && site.k == t.k)
        });
        if on_line {
            classes[idx] = AtomClass::Line;
            continue;
        }
        let neighbor = targets.iter().any(|t| {
            let di = site.i.abs_diff(t.i);
            let dj = site.j.abs_diff(t.j);
            let dk = site.k.abs_diff(t.k);
            di + dj + dk == 1
        });
        if neighbor {
            classes[idx] = AtomClass::NearestNeighbor;
        }
    }
    Ok(ClassMap { lattice: *lattice, classes })
}
