//! Voxel grids, 2D slices and the on-disk volume container.
//!
//! Every array in the crate uses the same layout: row-major with `x` varying
//! fastest and `z` slowest, so voxel `(x, y, z)` lives at
//! `x + nx * (y + ny * z)`.
//!
//! A volume on disk is a pair of files: a JSON header `<name>.svol.json`
//!
//! ```json
//! {"dims":[nx,ny,nz],"spacing":[sx,sy,sz],"origin":[ox,oy,oz],"kind":"mask","data":"<name>.raw"}
//! ```
//!
//! and a raw payload next to it holding one byte per voxel (`"mask"`) or one
//! little-endian IEEE-754 `f32` per voxel (`"f32"`).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Element type stored in a [`VolumeGrid`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ElementKind {
    #[serde(rename = "mask")]
    BinaryMask,
    #[serde(rename = "f32")]
    ScalarF32,
}

#[derive(Debug, Clone, PartialEq)]
enum Payload {
    Mask(Vec<u8>),
    Scalar(Vec<f32>),
}

/// A 3D voxel grid with physical spacing and origin (millimeters).
///
/// Grids are immutable once built; every constructor checks the layout and
/// value-domain invariants.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeGrid {
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    payload: Payload,
}

fn check_geometry(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<()> {
    if dims.contains(&0) {
        return Err(Error::format("dims", format!("all dims must be positive, got {dims:?}")));
    }
    if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
        return Err(Error::format(
            "spacing",
            format!("spacing must be finite and positive, got {spacing:?}"),
        ));
    }
    if origin.iter().any(|o| !o.is_finite()) {
        return Err(Error::format("origin", format!("origin must be finite, got {origin:?}")));
    }
    Ok(())
}

impl VolumeGrid {
    pub fn new_mask(
        dims: [usize; 3],
        spacing: [f64; 3],
        origin: [f64; 3],
        data: Vec<u8>,
    ) -> Result<Self> {
        check_geometry(dims, spacing, origin)?;
        let expected = dims[0] * dims[1] * dims[2];
        if data.len() != expected {
            return Err(Error::Size {
                expected,
                found: data.len(),
            });
        }
        if let Some(pos) = data.iter().position(|&v| v > 1) {
            return Err(Error::Validation(format!(
                "binary mask value {} at element {pos}",
                data[pos]
            )));
        }
        Ok(Self {
            dims,
            spacing,
            origin,
            payload: Payload::Mask(data),
        })
    }

    pub fn new_scalar(
        dims: [usize; 3],
        spacing: [f64; 3],
        origin: [f64; 3],
        data: Vec<f32>,
    ) -> Result<Self> {
        check_geometry(dims, spacing, origin)?;
        let expected = dims[0] * dims[1] * dims[2];
        if data.len() != expected {
            return Err(Error::Size {
                expected,
                found: data.len(),
            });
        }
        Ok(Self {
            dims,
            spacing,
            origin,
            payload: Payload::Scalar(data),
        })
    }

    /// Build a mask grid from a predicate over voxel indices.
    pub fn mask_from_fn(
        dims: [usize; 3],
        spacing: [f64; 3],
        origin: [f64; 3],
        mut inside: impl FnMut(usize, usize, usize) -> bool,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    data.push(u8::from(inside(x, y, z)));
                }
            }
        }
        Self::new_mask(dims, spacing, origin, data)
    }

    /// Build a scalar grid from a function over voxel indices.
    pub fn scalar_from_fn(
        dims: [usize; 3],
        spacing: [f64; 3],
        origin: [f64; 3],
        mut value: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    data.push(value(x, y, z));
                }
            }
        }
        Self::new_scalar(dims, spacing, origin, data)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn origin(&self) -> [f64; 3] {
        self.origin
    }

    pub fn kind(&self) -> ElementKind {
        match self.payload {
            Payload::Mask(_) => ElementKind::BinaryMask,
            Payload::Scalar(_) => ElementKind::ScalarF32,
        }
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    /// Mask payload, or `None` for scalar grids.
    pub fn mask_data(&self) -> Option<&[u8]> {
        match &self.payload {
            Payload::Mask(m) => Some(m),
            Payload::Scalar(_) => None,
        }
    }

    /// Scalar payload, or `None` for mask grids.
    pub fn scalar_data(&self) -> Option<&[f32]> {
        match &self.payload {
            Payload::Scalar(s) => Some(s),
            Payload::Mask(_) => None,
        }
    }

    pub fn require_mask(&self) -> Result<&[u8]> {
        self.mask_data()
            .ok_or_else(|| Error::Argument("expected a binary mask grid".into()))
    }

    pub fn require_scalar(&self) -> Result<&[f32]> {
        self.scalar_data()
            .ok_or_else(|| Error::Argument("expected a scalar grid".into()))
    }

    /// Value at a voxel as `f64`, regardless of element kind.
    pub fn value(&self, x: usize, y: usize, z: usize) -> f64 {
        let i = self.index(x, y, z);
        match &self.payload {
            Payload::Mask(m) => f64::from(m[i]),
            Payload::Scalar(s) => f64::from(s[i]),
        }
    }

    /// Physical position of a voxel center: `origin + index * spacing`.
    pub fn position(&self, x: usize, y: usize, z: usize) -> [f64; 3] {
        [
            self.origin[0] + x as f64 * self.spacing[0],
            self.origin[1] + y as f64 * self.spacing[1],
            self.origin[2] + z as f64 * self.spacing[2],
        ]
    }

    /// Same geometry, new origin.
    pub fn with_origin(&self, origin: [f64; 3]) -> Result<Self> {
        check_geometry(self.dims, self.spacing, origin)?;
        Ok(Self {
            origin,
            ..self.clone()
        })
    }

    /// Same data, new spacing.
    pub fn with_spacing(&self, spacing: [f64; 3]) -> Result<Self> {
        check_geometry(self.dims, spacing, self.origin)?;
        Ok(Self {
            spacing,
            ..self.clone()
        })
    }

    pub fn count_foreground(&self) -> usize {
        match &self.payload {
            Payload::Mask(m) => m.iter().filter(|&&v| v == 1).count(),
            Payload::Scalar(s) => s.iter().filter(|&&v| v != 0.0).count(),
        }
    }
}

/// Whether a [`SliceField`] holds labels or real values.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SliceKind {
    Binary,
    Real,
}

/// A single 2D plane (row-major, `x` fastest).
#[derive(Debug, Clone, PartialEq)]
pub struct SliceField {
    width: usize,
    height: usize,
    values: Vec<f64>,
    kind: SliceKind,
}

impl SliceField {
    pub fn new(width: usize, height: usize, values: Vec<f64>, kind: SliceKind) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Shape(format!(
                "slice dims must be positive, got {width}x{height}"
            )));
        }
        if values.len() != width * height {
            return Err(Error::Size {
                expected: width * height,
                found: values.len(),
            });
        }
        if kind == SliceKind::Binary {
            if let Some(v) = values.iter().find(|&&v| v != 0.0 && v != 1.0) {
                return Err(Error::Validation(format!("binary slice contains {v}")));
            }
        }
        Ok(Self {
            width,
            height,
            values,
            kind,
        })
    }

    pub fn real(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        Self::new(width, height, values, SliceKind::Real)
    }

    pub fn binary(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        Self::new(width, height, values, SliceKind::Binary)
    }

    /// Binary slice from a predicate over `(x, y)`.
    pub fn binary_from_fn(
        width: usize,
        height: usize,
        mut inside: impl FnMut(usize, usize) -> bool,
    ) -> Result<Self> {
        let mut values = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                values.push(if inside(x, y) { 1.0 } else { 0.0 });
            }
        }
        Self::binary(width, height, values)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn kind(&self) -> SliceKind {
        self.kind
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[x + self.width * y]
    }

    pub fn same_shape(&self, other: &SliceField) -> bool {
        self.width == other.width && self.height == other.height
    }
}

/// The `z`-th xy-plane of `grid`.
pub fn extract_slice(grid: &VolumeGrid, z: usize) -> Result<SliceField> {
    let [nx, ny, nz] = grid.dims;
    if z >= nz {
        return Err(Error::Index { index: z, len: nz });
    }
    let range = z * nx * ny..(z + 1) * nx * ny;
    let (values, kind) = match &grid.payload {
        Payload::Mask(m) => (
            m[range].iter().map(|&v| f64::from(v)).collect(),
            SliceKind::Binary,
        ),
        Payload::Scalar(s) => (
            s[range].iter().map(|&v| f64::from(v)).collect(),
            SliceKind::Real,
        ),
    };
    Ok(SliceField {
        width: nx,
        height: ny,
        values,
        kind,
    })
}

/// Stack slices along `z`. Real slices are stored as `f32`.
pub fn stack_slices(slices: &[SliceField], spacing: [f64; 3], origin: [f64; 3]) -> Result<VolumeGrid> {
    let first = slices
        .first()
        .ok_or_else(|| Error::Argument("cannot stack an empty slice list".into()))?;
    for (i, s) in slices.iter().enumerate() {
        if !s.same_shape(first) || s.kind != first.kind {
            return Err(Error::Shape(format!(
                "slice {i} is {}x{} {:?}, expected {}x{} {:?}",
                s.width, s.height, s.kind, first.width, first.height, first.kind
            )));
        }
    }
    let dims = [first.width, first.height, slices.len()];
    match first.kind {
        SliceKind::Binary => {
            let data = slices
                .iter()
                .flat_map(|s| s.values.iter().map(|&v| v as u8))
                .collect();
            VolumeGrid::new_mask(dims, spacing, origin, data)
        }
        SliceKind::Real => {
            let data = slices
                .iter()
                .flat_map(|s| s.values.iter().map(|&v| v as f32))
                .collect();
            VolumeGrid::new_scalar(dims, spacing, origin, data)
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: [f64; 3],
    kind: ElementKind,
    data: String,
}

/// Payload file name paired with a header path: `case.svol.json` -> `case.raw`.
pub fn payload_path(header: &Path) -> PathBuf {
    let name = header
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let stem = name
        .strip_suffix(".svol.json")
        .or_else(|| name.strip_suffix(".json"))
        .unwrap_or(&name);
    header.with_file_name(format!("{stem}.raw"))
}

pub fn save_volume(grid: &VolumeGrid, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let raw_path = payload_path(path);
    let header = Header {
        dims: grid.dims,
        spacing: grid.spacing,
        origin: grid.origin,
        kind: grid.kind(),
        data: raw_path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
    };
    let bytes = match &grid.payload {
        Payload::Mask(m) => m.clone(),
        Payload::Scalar(s) => s.iter().flat_map(|v| v.to_le_bytes()).collect(),
    };
    let json = serde_json::to_string(&header).expect("header serializes");
    fs::write(path, json).map_err(|e| Error::io(path, e))?;
    fs::write(&raw_path, bytes).map_err(|e| Error::io(&raw_path, e))?;
    Ok(())
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<VolumeGrid> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::format("header", e.to_string()))?;
    let obj = value
        .as_object()
        .ok_or_else(|| Error::format("header", "expected a JSON object"))?;
    for field in ["dims", "spacing", "origin", "kind", "data"] {
        let v = obj
            .get(field)
            .ok_or_else(|| Error::format(field, "missing"))?;
        let ok = match field {
            "dims" => serde_json::from_value::<[usize; 3]>(v.clone()).is_ok(),
            "spacing" | "origin" => serde_json::from_value::<[f64; 3]>(v.clone()).is_ok(),
            "kind" => serde_json::from_value::<ElementKind>(v.clone()).is_ok(),
            _ => v.is_string(),
        };
        if !ok {
            return Err(Error::format(field, format!("malformed value {v}")));
        }
    }
    let header: Header =
        serde_json::from_value(value).map_err(|e| Error::format("header", e.to_string()))?;
    check_geometry(header.dims, header.spacing, header.origin)?;

    let raw_path = path.with_file_name(&header.data);
    let bytes = fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
    let expected = header.dims[0] * header.dims[1] * header.dims[2];
    match header.kind {
        ElementKind::BinaryMask => {
            VolumeGrid::new_mask(header.dims, header.spacing, header.origin, bytes)
        }
        ElementKind::ScalarF32 => {
            if bytes.len() % 4 != 0 {
                return Err(Error::Size {
                    expected: expected * 4,
                    found: bytes.len(),
                });
            }
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            VolumeGrid::new_scalar(header.dims, header.spacing, header.origin, data)
        }
    }
}
