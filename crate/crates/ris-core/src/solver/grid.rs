//! Rasterization of a scene onto the Yee grid: per-edge material
//! coefficients and lumped element attachments.

use super::SolverError;
use crate::mesher::Mesh;
use crate::scene::{LumpedKind, Material, PortRole, Scene};
use crate::{C0, EPS0};

/// Alignment tolerance (mm) when matching scene coordinates to mesh lines.
const ALIGN_TOL_MM: f64 = 1e-6;

/// A lumped series branch attached to a run of consecutive co-linear edges.
#[derive(Debug, Clone)]
pub struct LumpedElement {
    /// Edge component/axis (0 = x, 1 = y, 2 = z).
    pub comp: usize,
    /// Flat indices of the edges the branch spans, in axis order.
    pub edges: Vec<usize>,
    /// Edge lengths (m).
    pub dl_m: Vec<f64>,
    /// Dual-face areas of the edges (m^2).
    pub area_m2: Vec<f64>,
    /// Total series resistance (port internal resistance plus load R).
    pub r_ohm: f64,
    pub l_h: f64,
    pub c_f: Option<f64>,
    /// Ports host the excitation when selected as the active port.
    pub is_port: bool,
    pub role: Option<PortRole>,
    /// (i, j, k) of the middle edge, where the loop current is probed.
    pub mid_ijk: [usize; 3],
}

/// Per-Yee-edge material data plus resolved lumped attachments.
#[derive(Debug, Clone)]
pub struct MaterialGrid {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    /// Absolute permittivity per edge, one array per component.
    pub eps: [Vec<f64>; 3],
    /// Electric conductivity per edge (S/m).
    pub sigma: [Vec<f64>; 3],
    /// Perfect-conductor mask per edge.
    pub pec: [Vec<bool>; 3],
    /// All lumped branches; `ports` indexes the port subset in port order.
    pub lumped: Vec<LumpedElement>,
    pub ports: Vec<usize>,
}

impl MaterialGrid {
    #[inline]
    pub fn idx(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.ny + j) * self.nz + k
    }

    pub fn n_ports(&self) -> usize {
        self.ports.len()
    }

    pub fn port_roles(&self) -> Vec<PortRole> {
        self.ports
            .iter()
            .map(|&l| self.lumped[l].role.expect("ports carry a role"))
            .collect()
    }

    pub fn active_ports(&self) -> Vec<usize> {
        self.port_roles()
            .iter()
            .enumerate()
            .filter(|(_, r)| **r == PortRole::Active)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn passive_ports(&self) -> Vec<usize> {
        self.port_roles()
            .iter()
            .enumerate()
            .filter(|(_, r)| **r == PortRole::Passive)
            .map(|(i, _)| i)
            .collect()
    }
}

fn lines_m(mesh: &Mesh, axis: usize) -> Vec<f64> {
    mesh.lines_mm[axis].iter().map(|c| c * 1e-3).collect()
}

/// Index range [a, b) of values v[i] lying inside [lo, hi] with tolerance.
fn range_in(values: &[f64], lo: f64, hi: f64, tol: f64) -> (usize, usize) {
    let a = values.partition_point(|&v| v < lo - tol);
    let b = values.partition_point(|&v| v <= hi + tol);
    (a, b)
}

fn find_line(values: &[f64], c: f64, tol: f64) -> Option<usize> {
    let p = values.partition_point(|&v| v < c - tol);
    if p < values.len() && (values[p] - c).abs() <= tol {
        Some(p)
    } else {
        None
    }
}

/// Rasterize the scene onto the mesh. Each Yee edge carries the material of
/// the highest-priority primitive containing its midpoint; dielectric loss
/// maps to a conductivity matched at the reference frequency,
/// sigma = 2 pi f0 eps0 eps_r tan_delta.
pub fn rasterize(scene: &Scene, mesh: &Mesh, f0_hz: f64) -> Result<MaterialGrid, SolverError> {
    let nx = mesh.lines_mm[0].len();
    let ny = mesh.lines_mm[1].len();
    let nz = mesh.lines_mm[2].len();
    for (axis, n) in [nx, ny, nz].iter().enumerate() {
        if *n < 2 {
            return Err(SolverError::GridTooSmall(*n, axis));
        }
    }
    let n = nx * ny * nz;
    let mut grid = MaterialGrid {
        nx,
        ny,
        nz,
        eps: [vec![EPS0; n], vec![EPS0; n], vec![EPS0; n]],
        sigma: [vec![0.0; n], vec![0.0; n], vec![0.0; n]],
        pec: [vec![false; n], vec![false; n], vec![false; n]],
        lumped: Vec::new(),
        ports: Vec::new(),
    };

    // Line and edge-midpoint coordinate arrays per axis (mm, matching scene
    // units for containment tests).
    let lines: [&Vec<f64>; 3] = [&mesh.lines_mm[0], &mesh.lines_mm[1], &mesh.lines_mm[2]];
    let mids: [Vec<f64>; 3] = [
        mesh.lines_mm[0].windows(2).map(|w| (w[0] + w[1]) / 2.0).collect(),
        mesh.lines_mm[1].windows(2).map(|w| (w[0] + w[1]) / 2.0).collect(),
        mesh.lines_mm[2].windows(2).map(|w| (w[0] + w[1]) / 2.0).collect(),
    ];

    // Paint primitives in priority order (later overrides earlier).
    for prim in &scene.primitives {
        let (eps, sigma, is_pec) = match prim.material {
            Material::Air => (EPS0, 0.0, false),
            Material::PerfectConductor => (EPS0, 0.0, true),
            Material::Dielectric { eps_r, tan_delta } => (
                EPS0 * eps_r,
                2.0 * std::f64::consts::PI * f0_hz * EPS0 * eps_r * tan_delta,
                false,
            ),
        };
        for comp in 0..3 {
            // Component `comp` edges: midpoint coordinate along comp, line
            // coordinates on the other two axes.
            let mut ranges = [(0usize, 0usize); 3];
            let mut empty = false;
            for axis in 0..3 {
                let coords: &[f64] = if axis == comp { &mids[axis] } else { lines[axis] };
                let r = range_in(coords, prim.min_mm[axis], prim.max_mm[axis], ALIGN_TOL_MM);
                if r.0 >= r.1 {
                    empty = true;
                }
                ranges[axis] = r;
            }
            if empty {
                continue;
            }
            for i in ranges[0].0..ranges[0].1.min(if comp == 0 { nx - 1 } else { nx }) {
                for j in ranges[1].0..ranges[1].1.min(if comp == 1 { ny - 1 } else { ny }) {
                    for k in ranges[2].0..ranges[2].1.min(if comp == 2 { nz - 1 } else { nz }) {
                        let idx = (i * ny + j) * nz + k;
                        grid.eps[comp][idx] = eps;
                        grid.sigma[comp][idx] = sigma;
                        grid.pec[comp][idx] = is_pec;
                    }
                }
            }
        }
    }

    // Resolve lumped items to edge runs.
    let xm: [Vec<f64>; 3] = [lines_m(mesh, 0), lines_m(mesh, 1), lines_m(mesh, 2)];
    for (item_index, item) in scene.lumped_items.iter().enumerate() {
        let comp = item.axis.index();
        let end = item.end_mm();
        let mut ijk = [0usize; 3];
        for axis in 0..3 {
            if axis == comp {
                continue;
            }
            ijk[axis] = find_line(lines[axis], item.start_mm[axis], ALIGN_TOL_MM).ok_or_else(
                || SolverError::LumpedNotAligned {
                    index: item_index,
                    detail: format!(
                        "no mesh line at {} mm on axis {axis}",
                        item.start_mm[axis]
                    ),
                },
            )?;
        }
        let a = find_line(lines[comp], item.start_mm[comp].min(end[comp]), ALIGN_TOL_MM)
            .ok_or_else(|| SolverError::LumpedNotAligned {
                index: item_index,
                detail: format!("no mesh line at segment start on axis {comp}"),
            })?;
        let b = find_line(lines[comp], item.start_mm[comp].max(end[comp]), ALIGN_TOL_MM)
            .ok_or_else(|| SolverError::LumpedNotAligned {
                index: item_index,
                detail: format!("no mesh line at segment end on axis {comp}"),
            })?;
        if b <= a {
            return Err(SolverError::LumpedNotAligned {
                index: item_index,
                detail: "zero-length lumped segment".into(),
            });
        }

        let mut edges = Vec::with_capacity(b - a);
        let mut dl_m = Vec::with_capacity(b - a);
        let mut area_m2 = Vec::with_capacity(b - a);
        for l in a..b {
            ijk[comp] = l;
            let idx = (ijk[0] * ny + ijk[1]) * nz + ijk[2];
            if grid.pec[comp][idx] {
                return Err(SolverError::LumpedNotAligned {
                    index: item_index,
                    detail: "lumped segment crosses a perfect conductor".into(),
                });
            }
            edges.push(idx);
            dl_m.push(xm[comp][l + 1] - xm[comp][l]);
            area_m2.push(dual_area(&xm, ijk, comp));
        }
        ijk[comp] = a + (b - a) / 2;

        let (r_total, l_h, c_f, is_port, role) = match &item.kind {
            LumpedKind::Port { resistance_ohm, role, load } => {
                let load = load.unwrap_or(crate::scene::LumpedLoad::resistor(0.0));
                (resistance_ohm + load.r_ohm, load.l_h, load.c_f, true, Some(*role))
            }
            LumpedKind::Load(load) => (load.r_ohm, load.l_h, load.c_f, false, None),
        };
        if is_port {
            grid.ports.push(grid.lumped.len());
        }
        grid.lumped.push(LumpedElement {
            comp,
            edges,
            dl_m,
            area_m2,
            r_ohm: r_total,
            l_h,
            c_f,
            is_port,
            role,
            mid_ijk: ijk,
        });
    }

    Ok(grid)
}

/// Dual-face area (m^2) of the edge along `comp` at line indices `ijk`.
fn dual_area(lines_m: &[Vec<f64>; 3], ijk: [usize; 3], comp: usize) -> f64 {
    let mut area = 1.0;
    for axis in 0..3 {
        if axis == comp {
            continue;
        }
        area *= dual_spacing(&lines_m[axis], ijk[axis]);
    }
    area
}

pub(crate) fn dual_spacing(lines_m: &[f64], i: usize) -> f64 {
    let n = lines_m.len();
    let lo = if i == 0 { lines_m[0] } else { (lines_m[i - 1] + lines_m[i]) / 2.0 };
    let hi = if i + 1 >= n {
        lines_m[n - 1]
    } else {
        (lines_m[i] + lines_m[i + 1]) / 2.0
    };
    hi - lo
}

/// Courant-stable timestep for the nonuniform grid:
/// dt = cfl * min over cells of 1 / (c_local sqrt(1/dx^2 + 1/dy^2 + 1/dz^2)),
/// with the local phase velocity taken from the fastest (lowest-permittivity)
/// edge touching the cell.
pub fn stable_timestep(mesh: &Mesh, grid: &MaterialGrid, cfl_factor: f64) -> f64 {
    let x = lines_m(mesh, 0);
    let y = lines_m(mesh, 1);
    let z = lines_m(mesh, 2);
    let (nx, ny, nz) = (grid.nx, grid.ny, grid.nz);
    let mut dt_min = f64::INFINITY;
    for i in 0..nx - 1 {
        let dx = x[i + 1] - x[i];
        for j in 0..ny - 1 {
            let dy = y[j + 1] - y[j];
            for k in 0..nz - 1 {
                let dz = z[k + 1] - z[k];
                // Fastest permittivity among the cell's corner edges.
                let mut eps_min = f64::INFINITY;
                for comp in 0..3 {
                    let idx = (i * ny + j) * nz + k;
                    eps_min = eps_min.min(grid.eps[comp][idx]);
                }
                let c_local = C0 / (eps_min / EPS0).sqrt();
                let inv = 1.0 / (dx * dx) + 1.0 / (dy * dy) + 1.0 / (dz * dz);
                dt_min = dt_min.min(1.0 / (c_local * inv.sqrt()));
            }
        }
    }
    cfl_factor * dt_min
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesher::{generate_mesh, MeshSpec};
    use crate::scene::{BoxPrimitive, Scene};

    fn uniform_mesh(n: usize, d_mm: f64) -> Mesh {
        let lines: Vec<f64> = (0..n).map(|i| i as f64 * d_mm).collect();
        Mesh {
            lines_mm: [lines.clone(), lines.clone(), lines],
            fixed: [vec![true; n], vec![true; n], vec![true; n]],
            pml_cells: 0,
            merge_threshold_mm: d_mm / 2.0,
        }
    }

    #[test]
    fn all_air_scene_is_vacuum() {
        let mut scene = Scene::new();
        scene.push_primitive(BoxPrimitive::new([0.0; 3], [10.0; 3], Material::Air));
        let mesh = uniform_mesh(11, 1.0);
        let grid = rasterize(&scene, &mesh, 8e9).unwrap();
        for comp in 0..3 {
            assert!(grid.eps[comp].iter().all(|&e| (e - EPS0).abs() < 1e-25));
            assert!(grid.sigma[comp].iter().all(|&s| s == 0.0));
            assert!(grid.pec[comp].iter().all(|&p| !p));
        }
    }

    #[test]
    fn reference_substrate_conductivity() {
        let mut scene = Scene::new();
        scene.push_primitive(BoxPrimitive::new(
            [0.0; 3],
            [10.0; 3],
            Material::Dielectric { eps_r: 2.2, tan_delta: 0.024 },
        ));
        let mesh = uniform_mesh(11, 1.0);
        let grid = rasterize(&scene, &mesh, 8e9).unwrap();
        // sigma = 2 pi 8e9 eps0 * 2.2 * 0.024 ~= 2.35e-2 S/m
        let expected = 2.0 * std::f64::consts::PI * 8e9 * EPS0 * 2.2 * 0.024;
        assert!((expected - 2.35e-2).abs() / 2.35e-2 < 0.01);
        let idx = grid.idx(5, 5, 5);
        for comp in 0..3 {
            assert!((grid.sigma[comp][idx] - expected).abs() < 1e-9);
        }
    }

    #[test]
    fn conductor_overrides_dielectric() {
        let mut scene = Scene::new();
        scene.push_primitive(BoxPrimitive::new(
            [0.0; 3],
            [10.0; 3],
            Material::Dielectric { eps_r: 4.0, tan_delta: 0.0 },
        ));
        scene.push_primitive(BoxPrimitive::new(
            [2.0; 3],
            [4.0; 3],
            Material::PerfectConductor,
        ));
        let mesh = uniform_mesh(11, 1.0);
        let grid = rasterize(&scene, &mesh, 8e9).unwrap();
        let inside = grid.idx(2, 3, 3); // x-edge midpoint at 2.5, inside box
        assert!(grid.pec[0][inside]);
        let outside = grid.idx(6, 6, 6);
        assert!(!grid.pec[0][outside]);
        assert!((grid.eps[0][outside] - 4.0 * EPS0).abs() < 1e-22);
    }

    #[test]
    fn pec_sheet_masks_tangential_edges_only() {
        let mut scene = Scene::new();
        scene.push_primitive(BoxPrimitive::new([0.0; 3], [10.0; 3], Material::Air));
        scene.push_primitive(BoxPrimitive::new(
            [2.0, 2.0, 5.0],
            [8.0, 8.0, 5.0],
            Material::PerfectConductor,
        ));
        let mesh = uniform_mesh(11, 1.0);
        let grid = rasterize(&scene, &mesh, 8e9).unwrap();
        // Tangential (x-directed) edge in the sheet plane.
        assert!(grid.pec[0][grid.idx(4, 4, 5)]);
        // Normal (z-directed) edge crossing the plane is not masked.
        assert!(!grid.pec[2][grid.idx(4, 4, 5)]);
    }

    #[test]
    fn timestep_closed_form_and_scaling() {
        let mut scene = Scene::new();
        scene.push_primitive(BoxPrimitive::new([0.0; 3], [5.0; 3], Material::Air));
        let mesh = uniform_mesh(11, 0.5);
        let grid = rasterize(&scene, &mesh, 8e9).unwrap();
        let dt = stable_timestep(&mesh, &grid, 0.5);
        let d: f64 = 0.5e-3;
        let expected = 0.5 / (C0 * (3.0 / (d * d)).sqrt());
        assert!((dt - expected).abs() / expected < 1e-12);
        assert!((dt - 4.81e-13).abs() / 4.81e-13 < 0.01);

        // Filling with eps_r = 4 halves the local speed and doubles dt.
        let mut filled = Scene::new();
        filled.push_primitive(BoxPrimitive::new(
            [-1.0; 3],
            [6.0; 3],
            Material::Dielectric { eps_r: 4.0, tan_delta: 0.0 },
        ));
        let grid2 = rasterize(&filled, &mesh, 8e9).unwrap();
        let dt2 = stable_timestep(&mesh, &grid2, 0.5);
        assert!((dt2 - 2.0 * dt).abs() / dt < 1e-9);
    }

    #[test]
    fn misaligned_lumped_rejected() {
        let mut scene = Scene::new();
        scene.push_primitive(BoxPrimitive::new([0.0; 3], [10.0; 3], Material::Air));
        scene.push_lumped(crate::scene::LumpedItem {
            start_mm: [2.0, 3.37, 5.0],
            axis: crate::scene::Axis::X,
            length_mm: 1.0,
            kind: LumpedKind::Load(crate::scene::LumpedLoad::resistor(50.0)),
        });
        // Mesh without the item's transverse line.
        let mesh = uniform_mesh(11, 1.0);
        let err = rasterize(&scene, &mesh, 8e9).unwrap_err();
        assert!(matches!(err, SolverError::LumpedNotAligned { index: 0, .. }));
    }

    #[test]
    fn generated_mesh_keeps_lumped_aligned() {
        let scene = crate::scene::build_unit_cell(
            &crate::scene::UnitCellSpec::reference_design(),
            [0.0; 3],
        )
        .unwrap();
        let mesh = generate_mesh(&scene, &MeshSpec::new(0.35, 1.5, 8, 4.7)).unwrap();
        let grid = rasterize(&scene, &mesh, 8e9).unwrap();
        assert_eq!(grid.n_ports(), 1);
        let port = &grid.lumped[grid.ports[0]];
        assert!(port.edges.len() >= 3, "gap spanned by {} edges", port.edges.len());
    }
}
