//! Exact Euclidean distance transforms and per-slice signed distance fields.
//!
//! Distances are computed with the separable lower-envelope-of-parabolas
//! transform: a 1D pass along every row followed by a 1D pass along every
//! column. Each pass is exact for squared distances, so the result on integer
//! pixel grids is an exact integer.
//!
//! Sign convention: negative inside the mask, positive outside. With the
//! default half-pixel offset, a pixel's magnitude is its center distance to
//! the nearest opposite-label pixel minus `0.5`, i.e. the distance to the
//! pixel boundary separating the two labels.

use crate::error::{Error, Result};
use crate::volgrid::{extract_slice, stack_slices, SliceField, SliceKind, VolumeGrid};

/// One-dimensional squared distance transform of a sampled function.
///
/// Computes `out[x] = min_q (f[q] + weight2 * (x - q)^2)` over all `q` with a
/// finite `f[q]`. Positions with no finite site at all come out as infinity.
/// `sites` and `bounds` are scratch buffers reused across calls.
pub(crate) fn lower_envelope(
    f: &[f64],
    weight2: f64,
    out: &mut [f64],
    sites: &mut Vec<usize>,
    bounds: &mut Vec<f64>,
) {
    debug_assert_eq!(f.len(), out.len());
    sites.clear();
    bounds.clear();
    for (q, &fq) in f.iter().enumerate() {
        if !fq.is_finite() {
            continue;
        }
        let qf = q as f64;
        let lifted_q = fq + weight2 * qf * qf;
        loop {
            let Some(&p) = sites.last() else {
                sites.push(q);
                bounds.push(f64::NEG_INFINITY);
                break;
            };
            let pf = p as f64;
            let lifted_p = f[p] + weight2 * pf * pf;
            // abscissa where parabolas rooted at p and q intersect
            let s = (lifted_q - lifted_p) / (2.0 * weight2 * (qf - pf));
            if s <= *bounds.last().unwrap() {
                sites.pop();
                bounds.pop();
            } else {
                sites.push(q);
                bounds.push(s);
                break;
            }
        }
    }
    if sites.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (x, o) in out.iter_mut().enumerate() {
        let xf = x as f64;
        while k + 1 < sites.len() && bounds[k + 1] < xf {
            k += 1;
        }
        let d = xf - sites[k] as f64;
        *o = f[sites[k]] + weight2 * d * d;
    }
}

/// Exact squared Euclidean distance (pixel units, center to center) from
/// every pixel to the nearest pixel labelled `target_label`.
pub fn edt_squared(mask: &SliceField, target_label: u8) -> Result<SliceField> {
    if mask.kind() != SliceKind::Binary {
        return Err(Error::Argument("distance transform needs a binary slice".into()));
    }
    let (w, h) = (mask.width(), mask.height());
    let target = f64::from(target_label);
    let mut grid: Vec<f64> = mask
        .values()
        .iter()
        .map(|&v| if v == target { 0.0 } else { f64::INFINITY })
        .collect();
    if grid.iter().all(|v| v.is_infinite()) {
        return Err(Error::Empty(format!("no pixel carries label {target_label}")));
    }

    let mut sites = Vec::with_capacity(w.max(h));
    let mut bounds = Vec::with_capacity(w.max(h));
    let mut row_out = vec![0.0; w];
    for y in 0..h {
        let row = &mut grid[y * w..(y + 1) * w];
        lower_envelope(row, 1.0, &mut row_out, &mut sites, &mut bounds);
        row.copy_from_slice(&row_out);
    }
    let mut col = vec![0.0; h];
    let mut col_out = vec![0.0; h];
    for x in 0..w {
        for y in 0..h {
            col[y] = grid[x + y * w];
        }
        lower_envelope(&col, 1.0, &mut col_out, &mut sites, &mut bounds);
        for y in 0..h {
            grid[x + y * w] = col_out[y];
        }
    }
    SliceField::real(w, h, grid)
}

/// Options for [`sdf_from_mask`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SdfOptions {
    /// Subtract half a pixel so magnitudes measure the distance to the pixel
    /// boundary rather than to the nearest opposite-label pixel center.
    pub half_pixel_offset: bool,
}

impl Default for SdfOptions {
    fn default() -> Self {
        Self {
            half_pixel_offset: true,
        }
    }
}

impl SdfOptions {
    fn offset(&self) -> f64 {
        if self.half_pixel_offset {
            0.5
        } else {
            0.0
        }
    }
}

/// A 2D signed distance field, raw (pixel units) or normalized to `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SignedDistanceSlice {
    width: usize,
    height: usize,
    values: Vec<f64>,
    normalized: bool,
    scale: f64,
}

impl SignedDistanceSlice {
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// Positive divisor applied during normalization (1 for raw fields).
    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[x + self.width * y]
    }

    pub fn to_field(&self) -> SliceField {
        SliceField::real(self.width, self.height, self.values.clone()).expect("shape is consistent")
    }

    /// Inside/outside mask recovered from the zero crossing (`value < 0` is inside).
    pub fn threshold(&self) -> SliceField {
        let values = self
            .values
            .iter()
            .map(|&v| if v < 0.0 { 1.0 } else { 0.0 })
            .collect();
        SliceField::binary(self.width, self.height, values).expect("shape is consistent")
    }
}

/// Raw signed distance field of a binary slice.
///
/// Slices carrying a single label have no boundary; they saturate to
/// `±(diagonal - offset)`, which normalizes to `±1`.
pub fn sdf_from_mask(mask: &SliceField, opts: SdfOptions) -> Result<SignedDistanceSlice> {
    if mask.kind() != SliceKind::Binary {
        return Err(Error::Argument("signed distance needs a binary slice".into()));
    }
    let (w, h) = (mask.width(), mask.height());
    let offset = opts.offset();
    let fg = mask.values().iter().filter(|&&v| v == 1.0).count();
    let values = if fg == 0 || fg == w * h {
        let diag = ((w * w + h * h) as f64).sqrt();
        let sign = if fg == 0 { 1.0 } else { -1.0 };
        vec![sign * (diag - offset); w * h]
    } else {
        let to_fg = edt_squared(mask, 1)?;
        let to_bg = edt_squared(mask, 0)?;
        mask.values()
            .iter()
            .zip(to_fg.values().iter().zip(to_bg.values()))
            .map(|(&label, (&dfg, &dbg))| {
                if label == 1.0 {
                    -(dbg.sqrt() - offset)
                } else {
                    dfg.sqrt() - offset
                }
            })
            .collect()
    };
    Ok(SignedDistanceSlice {
        width: w,
        height: h,
        values,
        normalized: false,
        scale: 1.0,
    })
}

/// Divide by the slice's max absolute value; an all-zero field stays zero
/// with scale 1. Already-normalized input is returned unchanged.
pub fn normalize_sdf(raw: &SignedDistanceSlice) -> SignedDistanceSlice {
    if raw.normalized {
        return raw.clone();
    }
    let max_abs = raw.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let scale = if max_abs > 0.0 { max_abs } else { 1.0 };
    SignedDistanceSlice {
        width: raw.width,
        height: raw.height,
        values: raw.values.iter().map(|v| v / scale).collect(),
        normalized: true,
        scale,
    }
}

/// Normalized signed distance field of one slice.
pub fn normalized_sdf(mask: &SliceField, opts: SdfOptions) -> Result<SignedDistanceSlice> {
    Ok(normalize_sdf(&sdf_from_mask(mask, opts)?))
}

/// Per-slice signed distance transform of a mask volume.
///
/// Each z-slice is transformed independently; geometry is preserved.
pub fn sdf_volume(mask_volume: &VolumeGrid, opts: SdfOptions, normalize: bool) -> Result<VolumeGrid> {
    mask_volume.require_mask()?;
    let nz = mask_volume.dims()[2];
    let mut slices = Vec::with_capacity(nz);
    for z in 0..nz {
        let raw = sdf_from_mask(&extract_slice(mask_volume, z)?, opts)?;
        let s = if normalize { normalize_sdf(&raw) } else { raw };
        slices.push(s.to_field());
    }
    stack_slices(&slices, mask_volume.spacing(), mask_volume.origin())
}
