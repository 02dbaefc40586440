//! Marching cubes surface extraction and mesh utilities.
//!
//! Cubes are formed by eight neighbouring voxel centers. Each crossing edge
//! gets one vertex, placed by linear interpolation and shared between all
//! cubes that touch the edge, so the output is indexed and watertight
//! wherever the case table is. Triangles are wound counter-clockwise when
//! seen from the side of larger field values.

mod export;
mod tables;

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::volgrid::VolumeGrid;

pub use export::{export_mesh, red_blue, write_obj, write_ply, write_stl, MeshFormat};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TriangleMesh {
    /// Vertex positions in millimeters.
    pub vertices: Vec<[f64; 3]>,
    pub triangles: Vec<[usize; 3]>,
    /// Optional per-vertex scalar, e.g. distance to a reference surface.
    pub vertex_scalar: Option<Vec<f64>>,
}

impl TriangleMesh {
    pub fn new(vertices: Vec<[f64; 3]>, triangles: Vec<[usize; 3]>) -> Result<Self> {
        let mesh = Self {
            vertices,
            triangles,
            vertex_scalar: None,
        };
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len();
        for (i, t) in self.triangles.iter().enumerate() {
            if t.iter().any(|&v| v >= n) {
                return Err(Error::Validation(format!("triangle {i} references a missing vertex")));
            }
            if t[0] == t[1] || t[1] == t[2] || t[0] == t[2] {
                return Err(Error::Validation(format!("triangle {i} repeats a vertex")));
            }
        }
        if let Some(s) = &self.vertex_scalar {
            if s.len() != n {
                return Err(Error::Size {
                    expected: n,
                    found: s.len(),
                });
            }
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn with_scalar(mut self, scalar: Vec<f64>) -> Result<Self> {
        self.vertex_scalar = Some(scalar);
        self.validate()?;
        Ok(self)
    }

    /// Reverse the winding of every triangle.
    pub fn flip_orientation(&mut self) {
        for t in &mut self.triangles {
            t.swap(1, 2);
        }
    }

    /// Signed enclosed volume; positive when triangles face outward.
    pub fn signed_volume(&self) -> f64 {
        self.triangles
            .iter()
            .map(|t| {
                let [a, b, c] = t.map(|i| self.vertices[i]);
                let cross = [
                    b[1] * c[2] - b[2] * c[1],
                    b[2] * c[0] - b[0] * c[2],
                    b[0] * c[1] - b[1] * c[0],
                ];
                a[0] * cross[0] + a[1] * cross[1] + a[2] * cross[2]
            })
            .sum::<f64>()
            / 6.0
    }
}

/// Extract the `iso` level set of a scalar grid.
pub fn marching_cubes(field: &VolumeGrid, iso: f64) -> Result<TriangleMesh> {
    let data = field.require_scalar()?;
    let [nx, ny, nz] = field.dims();
    if nx < 2 || ny < 2 || nz < 2 {
        return Err(Error::Shape(format!("marching cubes needs at least 2x2x2 voxels, got {nx}x{ny}x{nz}")));
    }
    if !iso.is_finite() {
        return Err(Error::Argument(format!("iso level must be finite, got {iso}")));
    }
    let spacing = field.spacing();
    let origin = field.origin();
    let lin = |x: usize, y: usize, z: usize| x + nx * (y + ny * z);

    let mut mesh = TriangleMesh::default();
    let mut edge_vertex: HashMap<usize, usize> = HashMap::new();

    for z in 0..nz - 1 {
        for y in 0..ny - 1 {
            for x in 0..nx - 1 {
                let mut values = [0.0f64; 8];
                let mut case = 0usize;
                for (i, c) in tables::CORNERS.iter().enumerate() {
                    values[i] = f64::from(data[lin(x + c[0], y + c[1], z + c[2])]);
                    if values[i] < iso {
                        case |= 1 << i;
                    }
                }
                let cut = tables::EDGE_TABLE[case];
                if cut == 0 {
                    continue;
                }
                let mut local = [usize::MAX; 12];
                for (e, &[a, b]) in tables::EDGES.iter().enumerate() {
                    if cut & (1 << e) == 0 {
                        continue;
                    }
                    // orient every edge from its lower corner so shared edges
                    // produce bit-identical vertices
                    let (lo, hi) = if tables::CORNERS[a] <= tables::CORNERS[b] { (a, b) } else { (b, a) };
                    let cl = tables::CORNERS[lo];
                    let ch = tables::CORNERS[hi];
                    let axis = (0..3).find(|&k| cl[k] != ch[k]).expect("edge spans one axis");
                    let base = [x + cl[0], y + cl[1], z + cl[2]];
                    let key = 3 * lin(base[0], base[1], base[2]) + axis;
                    local[e] = *edge_vertex.entry(key).or_insert_with(|| {
                        let (f0, f1) = (values[lo], values[hi]);
                        let t = if f1 == f0 { 0.5 } else { (iso - f0) / (f1 - f0) };
                        let mut p = [0.0; 3];
                        for k in 0..3 {
                            let idx = base[k] as f64 + if k == axis { t } else { 0.0 };
                            p[k] = origin[k] + idx * spacing[k];
                        }
                        mesh.vertices.push(p);
                        mesh.vertices.len() - 1
                    });
                }
                for tri in tables::TRI_TABLE[case].chunks(3) {
                    if tri[0] < 0 {
                        break;
                    }
                    let t = [local[tri[0] as usize], local[tri[2] as usize], local[tri[1] as usize]];
                    mesh.triangles.push(t);
                }
            }
        }
    }
    Ok(mesh)
}

/// Mask as a 0/1 scalar field; mesh it at iso 0.5. Scalar input is returned as is.
pub fn mask_to_field(mask: &VolumeGrid) -> VolumeGrid {
    match mask.mask_data() {
        Some(m) => VolumeGrid::new_scalar(
            mask.dims(),
            mask.spacing(),
            mask.origin(),
            m.iter().map(|&v| f32::from(v)).collect(),
        )
        .expect("geometry already validated"),
        None => mask.clone(),
    }
}

/// Surface of a binary mask with normals pointing out of the foreground.
///
/// A mask is larger inside, so the raw marching cubes winding faces inward;
/// this flips it.
pub fn mask_surface(mask: &VolumeGrid, iso: f64) -> Result<TriangleMesh> {
    mask.require_mask()?;
    let mut mesh = marching_cubes(&mask_to_field(mask), iso)?;
    mesh.flip_orientation();
    Ok(mesh)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize)]
pub struct TopologyReport {
    pub vertices: usize,
    pub edges: usize,
    pub triangles: usize,
    pub euler_characteristic: i64,
    pub boundary_edges: usize,
    pub non_manifold_edges: usize,
}

pub fn mesh_topology_report(mesh: &TriangleMesh) -> TopologyReport {
    let mut uses: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for t in &mesh.triangles {
        for k in 0..3 {
            let (a, b) = (t[k], t[(k + 1) % 3]);
            *uses.entry((a.min(b), a.max(b))).or_default() += 1;
        }
    }
    let v = mesh.vertices.len();
    let e = uses.len();
    let f = mesh.triangles.len();
    TopologyReport {
        vertices: v,
        edges: e,
        triangles: f,
        euler_characteristic: v as i64 - e as i64 + f as i64,
        boundary_edges: uses.values().filter(|&&c| c == 1).count(),
        non_manifold_edges: uses.values().filter(|&&c| c >= 3).count(),
    }
}
