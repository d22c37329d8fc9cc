//! Parametric construction of S-SRR unit cells, RIS arrays and RIS pairs
//! as a solver-independent geometric scene.
//!
//! All geometry is described in millimetres with axis-aligned boxes.
//! Zero-thickness boxes (min == max on one axis) model conducting sheets.
//! Primitives are priority-ordered: on overlap, the later primitive wins.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Coordinate tolerance (mm) used when deduplicating mesh lines and
/// matching lumped items to grid edges.
pub const COORD_TOL_MM: f64 = 1e-9;

pub const SCENE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];

    pub fn index(self) -> usize {
        match self {
            Axis::X => 0,
            Axis::Y => 1,
            Axis::Z => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Material {
    Air,
    PerfectConductor,
    Dielectric { eps_r: f64, tan_delta: f64 },
}

/// Axis-aligned box primitive. A degenerate extent on one axis (min == max)
/// models an infinitely thin sheet of the given material.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxPrimitive {
    pub min_mm: [f64; 3],
    pub max_mm: [f64; 3],
    pub material: Material,
}

impl BoxPrimitive {
    pub fn new(min_mm: [f64; 3], max_mm: [f64; 3], material: Material) -> Self {
        // Normalize per axis so callers may pass corners in either order
        // (overlapping-array load patches produce inverted extents).
        let mut lo = min_mm;
        let mut hi = max_mm;
        for a in 0..3 {
            if lo[a] > hi[a] {
                std::mem::swap(&mut lo[a], &mut hi[a]);
            }
        }
        Self { min_mm: lo, max_mm: hi, material }
    }

    /// Closed-boundary containment with tolerance, so that points on sheet
    /// planes and box faces count as inside.
    pub fn contains(&self, p_mm: [f64; 3]) -> bool {
        (0..3).all(|a| {
            p_mm[a] >= self.min_mm[a] - COORD_TOL_MM && p_mm[a] <= self.max_mm[a] + COORD_TOL_MM
        })
    }

    pub fn translated(&self, d_mm: [f64; 3]) -> Self {
        let mut b = self.clone();
        for a in 0..3 {
            b.min_mm[a] += d_mm[a];
            b.max_mm[a] += d_mm[a];
        }
        b
    }
}

/// Series R-L-C load. `l_h == 0` means no inductor, `c_f == None` means no
/// capacitor (a short at DC is only produced by r == 0, l == 0, c == None).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LumpedLoad {
    pub r_ohm: f64,
    #[serde(default)]
    pub l_h: f64,
    #[serde(default)]
    pub c_f: Option<f64>,
}

impl LumpedLoad {
    pub fn resistor(r_ohm: f64) -> Self {
        Self { r_ohm, l_h: 0.0, c_f: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PortRole {
    Active,
    Passive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LumpedKind {
    /// Measurement/source port: voltage source in series with an internal
    /// resistance, optionally in series with a tunable load.
    Port {
        resistance_ohm: f64,
        role: PortRole,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        load: Option<LumpedLoad>,
    },
    /// Plain series load with no source and no recording.
    Load(LumpedLoad),
}

/// A lumped circuit element occupying the segment from `start_mm` to
/// `start_mm + length_mm` along `axis`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LumpedItem {
    pub start_mm: [f64; 3],
    pub axis: Axis,
    pub length_mm: f64,
    pub kind: LumpedKind,
}

impl LumpedItem {
    pub fn end_mm(&self) -> [f64; 3] {
        let mut e = self.start_mm;
        e[self.axis.index()] += self.length_mm;
        e
    }

    pub fn is_port(&self) -> bool {
        matches!(self.kind, LumpedKind::Port { .. })
    }
}

/// Geometric truth handed to the mesher and the solver: an ordered list of
/// material primitives, lumped element placements, and the per-axis
/// coordinates the mesher must preserve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub schema_version: u32,
    pub primitives: Vec<BoxPrimitive>,
    pub lumped_items: Vec<LumpedItem>,
    /// Per-axis coordinates that must appear in any mesh of this scene.
    pub fixed_lines_mm: [Vec<f64>; 3],
}

impl Scene {
    pub fn new() -> Self {
        Self {
            schema_version: SCENE_SCHEMA_VERSION,
            primitives: Vec::new(),
            lumped_items: Vec::new(),
            fixed_lines_mm: [Vec::new(), Vec::new(), Vec::new()],
        }
    }

    pub fn push_primitive(&mut self, b: BoxPrimitive) {
        for a in 0..3 {
            self.add_fixed_line(a, b.min_mm[a]);
            self.add_fixed_line(a, b.max_mm[a]);
        }
        self.primitives.push(b);
    }

    pub fn push_lumped(&mut self, item: LumpedItem) {
        let end = item.end_mm();
        for a in 0..3 {
            self.add_fixed_line(a, item.start_mm[a]);
            self.add_fixed_line(a, end[a]);
        }
        self.lumped_items.push(item);
    }

    pub fn add_fixed_line(&mut self, axis: usize, coord_mm: f64) {
        insert_sorted_dedup(&mut self.fixed_lines_mm[axis], coord_mm);
    }

    /// Material at a point: the highest-priority (last) primitive containing
    /// it, air if none does.
    pub fn material_at(&self, p_mm: [f64; 3]) -> Material {
        self.primitives
            .iter()
            .rev()
            .find(|b| b.contains(p_mm))
            .map(|b| b.material)
            .unwrap_or(Material::Air)
    }

    /// Bounding box over primitives and lumped items.
    pub fn bounding_box(&self) -> Option<([f64; 3], [f64; 3])> {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for b in &self.primitives {
            for a in 0..3 {
                lo[a] = lo[a].min(b.min_mm[a]);
                hi[a] = hi[a].max(b.max_mm[a]);
            }
        }
        for it in &self.lumped_items {
            let end = it.end_mm();
            for a in 0..3 {
                lo[a] = lo[a].min(it.start_mm[a].min(end[a]));
                hi[a] = hi[a].max(it.start_mm[a].max(end[a]));
            }
        }
        if lo[0].is_finite() {
            Some((lo, hi))
        } else {
            None
        }
    }

    /// Ports in declaration order (the port index space used everywhere else).
    pub fn ports(&self) -> Vec<&LumpedItem> {
        self.lumped_items.iter().filter(|i| i.is_port()).collect()
    }

    pub fn port_roles(&self) -> Vec<PortRole> {
        self.lumped_items
            .iter()
            .filter_map(|i| match &i.kind {
                LumpedKind::Port { role, .. } => Some(*role),
                LumpedKind::Load(_) => None,
            })
            .collect()
    }

    pub fn translated(&self, d_mm: [f64; 3]) -> Self {
        let mut s = self.clone();
        for b in &mut s.primitives {
            for a in 0..3 {
                b.min_mm[a] += d_mm[a];
                b.max_mm[a] += d_mm[a];
            }
        }
        for it in &mut s.lumped_items {
            for a in 0..3 {
                it.start_mm[a] += d_mm[a];
            }
        }
        for a in 0..3 {
            for c in &mut s.fixed_lines_mm[a] {
                *c += d_mm[a];
            }
        }
        s
    }

    pub fn to_json(&self) -> serde_json::Result<String> {
        serde_json::to_string_pretty(self)
    }

    pub fn from_json(s: &str) -> serde_json::Result<Self> {
        serde_json::from_str(s)
    }
}

impl Default for Scene {
    fn default() -> Self {
        Self::new()
    }
}

fn insert_sorted_dedup(v: &mut Vec<f64>, x: f64) {
    match v.binary_search_by(|p| p.partial_cmp(&x).unwrap()) {
        Ok(_) => {}
        Err(pos) => {
            let near_prev = pos > 0 && (x - v[pos - 1]).abs() <= COORD_TOL_MM;
            let near_next = pos < v.len() && (v[pos] - x).abs() <= COORD_TOL_MM;
            if !near_prev && !near_next {
                v.insert(pos, x);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Parametric specs
// ---------------------------------------------------------------------------

/// Square split ring resonator dimensions. The outer ring spans
/// `outer_width_mm` (x) by `outer_length_mm` (y); the outer-ring gap faces +y
/// and the inner-ring gap faces -y.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SrrSpec {
    /// Outer ring extent along y (L2).
    pub outer_length_mm: f64,
    /// Outer ring extent along x (L1).
    pub outer_width_mm: f64,
    /// Gap width in the outer ring (G1), centered in the +y edge.
    pub outer_gap_mm: f64,
    /// Gap width in the inner ring (G2), centered in the -y edge.
    pub inner_gap_mm: f64,
    pub outer_trace_width_mm: f64,
    pub inner_trace_width_mm: f64,
    /// Clearance between the outer and inner ring traces.
    pub ring_separation_mm: f64,
    /// Metal thickness; 0 collapses traces to conducting sheets.
    #[serde(default)]
    pub metal_thickness_mm: f64,
}

impl SrrSpec {
    /// The tuned unit cell dimensions reported for 8 GHz operation.
    pub fn reference_design() -> Self {
        Self {
            outer_length_mm: 10.36,
            outer_width_mm: 10.9,
            outer_gap_mm: 1.05,
            inner_gap_mm: 1.05,
            outer_trace_width_mm: 1.05,
            inner_trace_width_mm: 1.05,
            // Inter-ring spacing is not part of the published dimension set;
            // 0.4 mm places the fundamental S-SRR resonance closest to the
            // 8 GHz design frequency for these ring dimensions.
            ring_separation_mm: 0.4,
            metal_thickness_mm: 0.0,
        }
    }

    /// Outer extent of the inner ring along x.
    pub fn inner_width_mm(&self) -> f64 {
        self.outer_width_mm - 2.0 * self.outer_trace_width_mm - 2.0 * self.ring_separation_mm
    }

    /// Outer extent of the inner ring along y.
    pub fn inner_length_mm(&self) -> f64 {
        self.outer_length_mm - 2.0 * self.outer_trace_width_mm - 2.0 * self.ring_separation_mm
    }

    pub fn validate(&self, out: &mut Vec<Violation>) {
        let pos = [
            ("srr.outer_length_mm", self.outer_length_mm),
            ("srr.outer_width_mm", self.outer_width_mm),
            ("srr.outer_gap_mm", self.outer_gap_mm),
            ("srr.inner_gap_mm", self.inner_gap_mm),
            ("srr.outer_trace_width_mm", self.outer_trace_width_mm),
            ("srr.inner_trace_width_mm", self.inner_trace_width_mm),
            ("srr.ring_separation_mm", self.ring_separation_mm),
        ];
        for (name, v) in pos {
            if !(v > 0.0) {
                out.push(Violation::new(name, format!("must be > 0, got {v}")));
            }
        }
        if self.metal_thickness_mm < 0.0 {
            out.push(Violation::new("srr.metal_thickness_mm", "must be >= 0"));
        }
        if self.inner_length_mm() <= 2.0 * self.inner_trace_width_mm
            || self.inner_width_mm() <= 2.0 * self.inner_trace_width_mm
        {
            out.push(Violation::new(
                "srr.ring_separation_mm",
                "inner ring does not fit strictly inside the outer ring \
                 (require outer extent - 2*outer_trace - 2*ring_separation > 2*inner_trace)",
            ));
        }
        if self.outer_gap_mm >= self.outer_width_mm {
            out.push(Violation::new("srr.outer_gap_mm", "gap must be narrower than the ring width"));
        }
        if self.inner_gap_mm >= self.outer_width_mm {
            out.push(Violation::new("srr.inner_gap_mm", "gap must be narrower than the ring width"));
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubstrateSpec {
    pub width_mm: f64,
    pub length_mm: f64,
    pub thickness_mm: f64,
    pub eps_r: f64,
    pub tan_delta: f64,
    #[serde(default)]
    pub has_groundplane: bool,
}

impl SubstrateSpec {
    pub fn reference_design() -> Self {
        Self {
            width_mm: 12.21,
            length_mm: 12.21,
            thickness_mm: 4.8,
            eps_r: 2.2,
            tan_delta: 0.024,
            // The published cell dimensions place the S-SRR resonance near
            // 8 GHz only for a transmissive (no ground sheet) screen; with a
            // backed substrate this thickness it drops to ~6.7 GHz.
            has_groundplane: false,
        }
    }

    pub fn validate(&self, out: &mut Vec<Violation>) {
        for (name, v) in [
            ("substrate.width_mm", self.width_mm),
            ("substrate.length_mm", self.length_mm),
            ("substrate.thickness_mm", self.thickness_mm),
        ] {
            if !(v > 0.0) {
                out.push(Violation::new(name, format!("must be > 0, got {v}")));
            }
        }
        if !(self.eps_r >= 1.0) {
            out.push(Violation::new("substrate.eps_r", "must be >= 1"));
        }
        if !(self.tan_delta >= 0.0) {
            out.push(Violation::new("substrate.tan_delta", "must be >= 0"));
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnitCellSpec {
    pub srr: SrrSpec,
    pub substrate: SubstrateSpec,
    #[serde(default = "default_port_resistance")]
    pub port_resistance_ohm: f64,
    /// Tunable series load in the port branch.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lumped_state: Option<LumpedLoad>,
}

fn default_port_resistance() -> f64 {
    50.0
}

impl UnitCellSpec {
    pub fn reference_design() -> Self {
        Self {
            srr: SrrSpec::reference_design(),
            substrate: SubstrateSpec::reference_design(),
            port_resistance_ohm: 50.0,
            lumped_state: None,
        }
    }

    pub fn validate(&self, out: &mut Vec<Violation>) {
        self.srr.validate(out);
        self.substrate.validate(out);
        if !(self.port_resistance_ohm > 0.0) {
            out.push(Violation::new("cell.port_resistance_ohm", "must be > 0"));
        }
        if self.srr.outer_width_mm > self.substrate.width_mm
            || self.srr.outer_length_mm > self.substrate.length_mm
        {
            out.push(Violation::new(
                "cell.srr",
                "SRR footprint must fit within the substrate footprint",
            ));
        }
        if let Some(load) = &self.lumped_state {
            if load.r_ohm < 0.0 || load.l_h < 0.0 || load.c_f.map_or(false, |c| c <= 0.0) {
                out.push(Violation::new(
                    "cell.lumped_state",
                    "require r >= 0, l >= 0 and, when present, c > 0",
                ));
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArraySpec {
    pub rows: usize,
    pub cols: usize,
    pub cell: UnitCellSpec,
    /// Center-to-center S-SRR spacing, identical on both axes.
    pub pitch_mm: f64,
    pub patch_width_mm: f64,
    #[serde(default)]
    pub patch_thickness_mm: f64,
    pub role: PortRole,
}

impl ArraySpec {
    pub fn reference_design(rows: usize, cols: usize, role: PortRole) -> Self {
        Self {
            rows,
            cols,
            cell: UnitCellSpec::reference_design(),
            pitch_mm: 10.0,
            patch_width_mm: 1.2,
            patch_thickness_mm: 0.0,
            role,
        }
    }

    pub fn validate(&self, out: &mut Vec<Violation>) {
        self.cell.validate(out);
        if self.rows < 1 {
            out.push(Violation::new("array.rows", "must be >= 1"));
        }
        if self.cols < 1 {
            out.push(Violation::new("array.cols", "must be >= 1"));
        }
        // Adjacent outer rings may fuse by up to one trace width (they are
        // galvanically joined by the load patches anyway); any tighter pitch
        // destroys the resonator geometry.
        let footprint = self.cell.srr.outer_width_mm.max(self.cell.srr.outer_length_mm)
            - self.cell.srr.outer_trace_width_mm;
        if (self.rows > 1 || self.cols > 1) && !(self.pitch_mm > footprint) {
            out.push(Violation::new(
                "array.pitch_mm",
                format!("pitch must exceed SRR footprint ({footprint} mm)"),
            ));
        }
        if !(self.patch_width_mm > 0.0) {
            out.push(Violation::new("array.patch_width_mm", "must be > 0"));
        }
        if self.patch_thickness_mm < 0.0 {
            out.push(Violation::new("array.patch_thickness_mm", "must be >= 0"));
        }
    }

    pub fn port_count(&self) -> usize {
        self.rows * self.cols
    }

    pub fn patch_count(&self) -> usize {
        self.rows * (self.cols - 1) + (self.rows - 1) * self.cols
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PairSpec {
    pub ris1: ArraySpec,
    pub ris2: ArraySpec,
    /// Center-to-center distance between the two RIS units along boresight (z).
    pub separation_mm: f64,
}

impl PairSpec {
    /// The unit-cell pair at the default 10 mm distance.
    pub fn reference_unit_cell_pair() -> Self {
        Self {
            ris1: ArraySpec::reference_design(1, 1, PortRole::Active),
            ris2: ArraySpec::reference_design(1, 1, PortRole::Passive),
            separation_mm: 10.0,
        }
    }

    pub fn reference_pair(rows: usize, cols: usize, separation_mm: f64) -> Self {
        Self {
            ris1: ArraySpec::reference_design(rows, cols, PortRole::Active),
            ris2: ArraySpec::reference_design(rows, cols, PortRole::Passive),
            separation_mm,
        }
    }

    fn structure_depth_mm(&self, a: &ArraySpec) -> f64 {
        a.cell.substrate.thickness_mm + a.cell.srr.metal_thickness_mm
    }
}

/// A named invariant violation; `field` is the offending spec field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub field: String,
    pub constraint: String,
}

impl Violation {
    pub fn new(field: &str, constraint: impl Into<String>) -> Self {
        Self { field: field.to_string(), constraint: constraint.into() }
    }
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.field, self.constraint)
    }
}

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("invalid spec: {}", format_violations(.0))]
    InvalidSpec(Vec<Violation>),
    #[error("RIS volumes overlap: separation {separation_mm} mm is smaller than the combined structure depth {required_mm} mm")]
    OverlappingPair { separation_mm: f64, required_mm: f64 },
}

fn format_violations(v: &[Violation]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join("; ")
}

/// Total validation of a pair spec: empty list iff every invariant holds.
pub fn validate_spec(spec: &PairSpec) -> Vec<Violation> {
    let mut out = Vec::new();
    spec.ris1.validate(&mut out);
    spec.ris2.validate(&mut out);
    if spec.ris1.role != PortRole::Active {
        out.push(Violation::new("pair.ris1.role", "must be active"));
    }
    if spec.ris2.role != PortRole::Passive {
        out.push(Violation::new("pair.ris2.role", "must be passive"));
    }
    if !(spec.separation_mm > 0.0) {
        out.push(Violation::new("pair.separation_mm", "must be > 0"));
    }
    out
}

// ---------------------------------------------------------------------------
// Builders
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Facing {
    PlusZ,
    MinusZ,
}

/// Build the scene of one unit cell. `origin_mm` is the center of the
/// substrate back face; the SRR plane faces +z.
pub fn build_unit_cell(spec: &UnitCellSpec, origin_mm: [f64; 3]) -> Result<Scene, SceneError> {
    let mut violations = Vec::new();
    spec.validate(&mut violations);
    if !violations.is_empty() {
        return Err(SceneError::InvalidSpec(violations));
    }
    let mut scene = Scene::new();
    emit_unit_cell(&mut scene, spec, origin_mm, Facing::PlusZ, PortRole::Active);
    Ok(scene)
}

/// Build the full two-RIS scene. RIS1 (active) sits at -separation/2 facing
/// +z, RIS2 (passive) at +separation/2 facing -z; port indexing is row-major
/// per RIS with RIS1 ports first.
pub fn build_pair(spec: &PairSpec) -> Result<Scene, SceneError> {
    let violations = validate_spec(spec);
    if !violations.is_empty() {
        return Err(SceneError::InvalidSpec(violations));
    }
    let required =
        (spec.structure_depth_mm(&spec.ris1) + spec.structure_depth_mm(&spec.ris2)) / 2.0;
    if spec.separation_mm <= required {
        return Err(SceneError::OverlappingPair {
            separation_mm: spec.separation_mm,
            required_mm: required,
        });
    }

    let mut scene = Scene::new();
    emit_array(&mut scene, &spec.ris1, -spec.separation_mm / 2.0, Facing::PlusZ);
    emit_array(&mut scene, &spec.ris2, spec.separation_mm / 2.0, Facing::MinusZ);
    Ok(scene)
}

/// Emit one RIS array; `z_center_mm` is the mid-plane of its substrate slab.
fn emit_array(scene: &mut Scene, array: &ArraySpec, z_center_mm: f64, facing: Facing) {
    let th = array.cell.substrate.thickness_mm;
    // Back-face z such that the substrate is centered on z_center_mm.
    let z_back = match facing {
        Facing::PlusZ => z_center_mm - th / 2.0,
        Facing::MinusZ => z_center_mm + th / 2.0,
    };
    let cell_x = |c: usize| (c as f64 - (array.cols as f64 - 1.0) / 2.0) * array.pitch_mm;
    let cell_y = |r: usize| (r as f64 - (array.rows as f64 - 1.0) / 2.0) * array.pitch_mm;

    for r in 0..array.rows {
        for c in 0..array.cols {
            emit_unit_cell(
                scene,
                &array.cell,
                [cell_x(c), cell_y(r), z_back],
                facing,
                array.role,
            );
        }
    }

    // Load patches join midpoints of facing outer-ring edges of adjacent
    // cells, in the SRR metal plane.
    let srr = &array.cell.srr;
    let z_metal = match facing {
        Facing::PlusZ => z_back + th,
        Facing::MinusZ => z_back - th,
    };
    let (z_lo, z_hi) = patch_z_extent(z_metal, array.patch_thickness_mm.max(srr.metal_thickness_mm), facing);
    let hw = array.patch_width_mm / 2.0;
    // Horizontal neighbours.
    for r in 0..array.rows {
        for c in 0..array.cols.saturating_sub(1) {
            let x0 = cell_x(c) + srr.outer_width_mm / 2.0;
            let x1 = cell_x(c + 1) - srr.outer_width_mm / 2.0;
            let yc = cell_y(r);
            scene.push_primitive(BoxPrimitive::new(
                [x0, yc - hw, z_lo],
                [x1, yc + hw, z_hi],
                Material::PerfectConductor,
            ));
        }
    }
    // Vertical neighbours.
    for r in 0..array.rows.saturating_sub(1) {
        for c in 0..array.cols {
            let y0 = cell_y(r) + srr.outer_length_mm / 2.0;
            let y1 = cell_y(r + 1) - srr.outer_length_mm / 2.0;
            let xc = cell_x(c);
            scene.push_primitive(BoxPrimitive::new(
                [xc - hw, y0, z_lo],
                [xc + hw, y1, z_hi],
                Material::PerfectConductor,
            ));
        }
    }
}

fn patch_z_extent(z_metal: f64, thickness: f64, facing: Facing) -> (f64, f64) {
    match facing {
        Facing::PlusZ => (z_metal, z_metal + thickness),
        Facing::MinusZ => (z_metal - thickness, z_metal),
    }
}

fn emit_unit_cell(
    scene: &mut Scene,
    spec: &UnitCellSpec,
    origin_mm: [f64; 3],
    facing: Facing,
    role: PortRole,
) {
    let sub = &spec.substrate;
    let srr = &spec.srr;
    let [ox, oy, oz] = origin_mm;
    let sign = match facing {
        Facing::PlusZ => 1.0,
        Facing::MinusZ => -1.0,
    };
    let z_front = oz + sign * sub.thickness_mm;

    // Substrate slab.
    let (z0, z1) = if sign > 0.0 { (oz, z_front) } else { (z_front, oz) };
    scene.push_primitive(BoxPrimitive::new(
        [ox - sub.width_mm / 2.0, oy - sub.length_mm / 2.0, z0],
        [ox + sub.width_mm / 2.0, oy + sub.length_mm / 2.0, z1],
        Material::Dielectric { eps_r: sub.eps_r, tan_delta: sub.tan_delta },
    ));

    // Groundplane sheet on the back face.
    if sub.has_groundplane {
        scene.push_primitive(BoxPrimitive::new(
            [ox - sub.width_mm / 2.0, oy - sub.length_mm / 2.0, oz],
            [ox + sub.width_mm / 2.0, oy + sub.length_mm / 2.0, oz],
            Material::PerfectConductor,
        ));
    }

    let (zm_lo, zm_hi) = if srr.metal_thickness_mm > 0.0 {
        if sign > 0.0 {
            (z_front, z_front + srr.metal_thickness_mm)
        } else {
            (z_front - srr.metal_thickness_mm, z_front)
        }
    } else {
        (z_front, z_front)
    };
    let mut metal = |min: [f64; 2], max: [f64; 2]| {
        scene.push_primitive(BoxPrimitive::new(
            [ox + min[0], oy + min[1], zm_lo],
            [ox + max[0], oy + max[1], zm_hi],
            Material::PerfectConductor,
        ));
    };

    // Outer ring: gap centered in the +y edge.
    let (w1, l1) = (srr.outer_width_mm / 2.0, srr.outer_length_mm / 2.0);
    let wt = srr.outer_trace_width_mm;
    let g1 = srr.outer_gap_mm / 2.0;
    metal([-w1, -l1], [w1, -l1 + wt]); // -y edge
    metal([-w1, -l1 + wt], [-w1 + wt, l1]); // -x edge
    metal([w1 - wt, -l1 + wt], [w1, l1]); // +x edge
    metal([-w1 + wt, l1 - wt], [-g1, l1]); // +y edge, left of gap
    metal([g1, l1 - wt], [w1 - wt, l1]); // +y edge, right of gap

    // Inner ring: gap centered in the -y edge.
    let (w2, l2) = (srr.inner_width_mm() / 2.0, srr.inner_length_mm() / 2.0);
    let it = srr.inner_trace_width_mm;
    let g2 = srr.inner_gap_mm / 2.0;
    metal([-w2, l2 - it], [w2, l2]); // +y edge
    metal([-w2, -l2], [-w2 + it, l2 - it]); // -x edge
    metal([w2 - it, -l2], [w2, l2 - it]); // +x edge
    metal([-w2 + it, -l2], [-g2, -l2 + it]); // -y edge, left of gap
    metal([g2, -l2], [w2 - it, -l2 + it]); // -y edge, right of gap

    // Lumped port bridging the outer-ring gap, oriented along x, placed at
    // the mid-width of the +y edge in the metal plane.
    let y_port = oy + l1 - wt / 2.0;
    let z_port = if sign > 0.0 { zm_lo } else { zm_hi };
    scene.push_lumped(LumpedItem {
        start_mm: [ox - g1, y_port, z_port],
        axis: Axis::X,
        length_mm: srr.outer_gap_mm,
        kind: LumpedKind::Port {
            resistance_ohm: spec.port_resistance_ohm,
            role,
            load: spec.lumped_state,
        },
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conductor_count(s: &Scene) -> usize {
        s.primitives
            .iter()
            .filter(|p| p.material == Material::PerfectConductor)
            .count()
    }

    #[test]
    fn reference_unit_cell_builds() {
        let spec = UnitCellSpec::reference_design();
        let scene = build_unit_cell(&spec, [0.0; 3]).unwrap();
        assert_eq!(scene.ports().len(), 1);
        assert!(conductor_count(&scene) >= 4);
        // Substrate plus ten ring segments (no ground sheet by default).
        assert_eq!(scene.primitives.len(), 11);
    }

    #[test]
    fn translation_equivariance() {
        let spec = UnitCellSpec::reference_design();
        let a = build_unit_cell(&spec, [0.0, 0.0, 0.0]).unwrap();
        let b = build_unit_cell(&spec, [5.0, 0.0, 0.0]).unwrap();
        let shifted = a.translated([5.0, 0.0, 0.0]);
        assert_eq!(b.primitives.len(), shifted.primitives.len());
        for (x, y) in b.primitives.iter().zip(shifted.primitives.iter()) {
            for a in 0..3 {
                assert!((x.min_mm[a] - y.min_mm[a]).abs() < 1e-12);
                assert!((x.max_mm[a] - y.max_mm[a]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn oversized_inner_ring_rejected() {
        let mut spec = UnitCellSpec::reference_design();
        spec.srr.ring_separation_mm = 4.0; // leaves no room for the inner ring
        let err = build_unit_cell(&spec, [0.0; 3]).unwrap_err();
        match err {
            SceneError::InvalidSpec(v) => {
                assert!(v.iter().any(|x| x.field.contains("ring_separation")));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn pair_port_and_patch_counts() {
        for (rows, cols) in [(1, 1), (3, 3), (11, 11)] {
            let spec = PairSpec::reference_pair(rows, cols, 10.0);
            let scene = build_pair(&spec).unwrap();
            assert_eq!(scene.ports().len(), 2 * rows * cols);
            let per_ris_patches = rows * (cols - 1) + (rows - 1) * cols;
            // Patches are the conductor primitives beyond the per-cell ones.
            let per_cell_conductors = 10; // ring segments; no ground sheet
            let expected =
                2 * (rows * cols * per_cell_conductors + per_ris_patches);
            assert_eq!(conductor_count(&scene), expected);
        }
    }

    #[test]
    fn pair_port_ordering_active_first() {
        let spec = PairSpec::reference_pair(2, 2, 10.0);
        let scene = build_pair(&spec).unwrap();
        let roles = scene.port_roles();
        assert_eq!(roles.len(), 8);
        assert!(roles[..4].iter().all(|r| *r == PortRole::Active));
        assert!(roles[4..].iter().all(|r| *r == PortRole::Passive));
    }

    #[test]
    fn validate_spec_flags_violations() {
        let mut spec = PairSpec::reference_pair(3, 3, 10.0);
        assert!(validate_spec(&spec).is_empty());
        spec.ris1.pitch_mm = 5.0;
        let v = validate_spec(&spec);
        assert!(v.iter().any(|x| x.field == "array.pitch_mm"));
        spec.separation_mm = 0.0;
        let v = validate_spec(&spec);
        assert!(v.iter().any(|x| x.field == "pair.separation_mm"));
    }

    #[test]
    fn overlapping_pair_rejected() {
        let mut spec = PairSpec::reference_unit_cell_pair();
        spec.separation_mm = 3.0; // less than one substrate thickness
        assert!(matches!(build_pair(&spec), Err(SceneError::OverlappingPair { .. })));
    }

    #[test]
    fn lumped_items_lie_on_fixed_lines() {
        let scene = build_pair(&PairSpec::reference_pair(2, 3, 10.0)).unwrap();
        for it in &scene.lumped_items {
            let end = it.end_mm();
            for a in 0..3 {
                for coord in [it.start_mm[a], end[a]] {
                    assert!(
                        scene.fixed_lines_mm[a]
                            .iter()
                            .any(|c| (c - coord).abs() <= COORD_TOL_MM),
                        "lumped coordinate {coord} missing from axis {a} fixed lines"
                    );
                }
            }
        }
    }

    #[test]
    fn pair_scene_mirror_symmetric() {
        let scene = build_pair(&PairSpec::reference_pair(3, 3, 10.0)).unwrap();
        // Reflect about x = 0: every primitive must map onto one in the set.
        let key = |b: &BoxPrimitive| {
            let mut k = Vec::with_capacity(6);
            for a in 0..3 {
                k.push((b.min_mm[a] * 1e6).round() as i64);
                k.push((b.max_mm[a] * 1e6).round() as i64);
            }
            k
        };
        let set: std::collections::HashSet<_> = scene.primitives.iter().map(key).collect();
        for b in &scene.primitives {
            let mut m = b.clone();
            m.min_mm[0] = -b.max_mm[0];
            m.max_mm[0] = -b.min_mm[0];
            assert!(set.contains(&key(&m)), "no mirror image for {b:?}");
        }
    }

    #[test]
    fn scene_json_round_trip() {
        let scene = build_unit_cell(&UnitCellSpec::reference_design(), [1.0, -2.0, 3.0]).unwrap();
        let json = scene.to_json().unwrap();
        let back = Scene::from_json(&json).unwrap();
        assert_eq!(scene, back);
    }

    #[test]
    fn deterministic_construction() {
        let spec = PairSpec::reference_pair(2, 2, 12.0);
        let a = build_pair(&spec).unwrap();
        let b = build_pair(&spec).unwrap();
        assert_eq!(a, b);
    }
}
