use std::fs;
use std::io::Write;
use std::path::Path;

use super::TriangleMesh;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeshFormat {
    /// ASCII Wavefront OBJ, 1-based indices.
    Obj,
    /// Binary little-endian STL with facet normals.
    StlBinary,
    /// ASCII PLY with a red-blue colormap of the vertex scalar.
    PlyWithScalar,
}

impl MeshFormat {
    /// Guess from a file extension (`obj`, `stl`, `ply`).
    pub fn from_extension(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "obj" => Some(Self::Obj),
            "stl" => Some(Self::StlBinary),
            "ply" => Some(Self::PlyWithScalar),
            _ => None,
        }
    }
}

pub fn write_obj(mesh: &TriangleMesh, mut out: impl Write) -> std::io::Result<()> {
    for v in &mesh.vertices {
        writeln!(out, "v {} {} {}", v[0], v[1], v[2])?;
    }
    for t in &mesh.triangles {
        writeln!(out, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1)?;
    }
    Ok(())
}

fn facet_normal(a: [f64; 3], b: [f64; 3], c: [f64; 3]) -> [f32; 3] {
    let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    let v = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
    let n = [u[1] * v[2] - u[2] * v[1], u[2] * v[0] - u[0] * v[2], u[0] * v[1] - u[1] * v[0]];
    let len = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
    if len == 0.0 {
        [0.0; 3]
    } else {
        n.map(|x| (x / len) as f32)
    }
}

pub fn write_stl(mesh: &TriangleMesh, mut out: impl Write) -> std::io::Result<()> {
    let mut header = [0u8; 80];
    let tag = b"binary STL written by shapeseg";
    header[..tag.len()].copy_from_slice(tag);
    out.write_all(&header)?;
    out.write_all(&(mesh.triangles.len() as u32).to_le_bytes())?;
    for t in &mesh.triangles {
        let [a, b, c] = t.map(|i| mesh.vertices[i]);
        let mut facet = Vec::with_capacity(50);
        for x in facet_normal(a, b, c) {
            facet.extend_from_slice(&x.to_le_bytes());
        }
        for p in [a, b, c] {
            for x in p {
                facet.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        facet.extend_from_slice(&0u16.to_le_bytes());
        out.write_all(&facet)?;
    }
    Ok(())
}

/// Linear red (minimum) to blue (maximum) ramp; a flat range is all red.
pub fn red_blue(value: f64, min: f64, max: f64) -> [u8; 3] {
    let t = if max > min { ((value - min) / (max - min)).clamp(0.0, 1.0) } else { 0.0 };
    [(255.0 * (1.0 - t)).round() as u8, 0, (255.0 * t).round() as u8]
}

pub fn write_ply(mesh: &TriangleMesh, mut out: impl Write) -> Result<()> {
    let scalar = mesh
        .vertex_scalar
        .as_ref()
        .ok_or_else(|| Error::Argument("PLY export needs a per-vertex scalar channel".into()))?;
    let (min, max) = scalar
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let mut text = String::new();
    use std::fmt::Write as _;
    let _ = write!(
        text,
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\nproperty float value\n\
         element face {}\nproperty list uchar int vertex_indices\nend_header\n",
        mesh.vertices.len(),
        mesh.triangles.len()
    );
    for (v, &s) in mesh.vertices.iter().zip(scalar) {
        let [r, g, b] = red_blue(s, min, max);
        let _ = writeln!(text, "{} {} {} {r} {g} {b} {s}", v[0], v[1], v[2]);
    }
    for t in &mesh.triangles {
        let _ = writeln!(text, "3 {} {} {}", t[0], t[1], t[2]);
    }
    out.write_all(text.as_bytes())
        .map_err(|e| Error::io("<ply stream>", e))
}

pub fn export_mesh(mesh: &TriangleMesh, path: impl AsRef<Path>, format: MeshFormat) -> Result<()> {
    let path = path.as_ref();
    mesh.validate()?;
    let mut buf = Vec::new();
    match format {
        MeshFormat::Obj => write_obj(mesh, &mut buf).map_err(|e| Error::io(path, e))?,
        MeshFormat::StlBinary => write_stl(mesh, &mut buf).map_err(|e| Error::io(path, e))?,
        MeshFormat::PlyWithScalar => write_ply(mesh, &mut buf)?,
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}
