use super::{forward_raw, ModelParams};
use crate::error::{Error, Result};
use crate::volgrid::{extract_slice, stack_slices, SliceField, SliceKind, VolumeGrid};

/// Network output for one slice.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub seg_probs: SliceField,
    pub sdf: SliceField,
}

impl Prediction {
    /// Foreground where the probability is strictly above 0.5.
    pub fn mask(&self) -> SliceField {
        let v = self
            .seg_probs
            .values()
            .iter()
            .map(|&p| if p > 0.5 { 1.0 } else { 0.0 })
            .collect();
        SliceField::binary(self.seg_probs.width(), self.seg_probs.height(), v).expect("same shape")
    }
}

pub fn predict_slices(params: &ModelParams, images: &[SliceField]) -> Result<Vec<Prediction>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(16) {
        let inputs: Vec<&[f64]> = chunk.iter().map(|s| s.values()).collect();
        for s in chunk {
            if s.width() != params.config().input_width || s.height() != params.config().input_height {
                return Err(Error::Shape(format!(
                    "slice is {}x{}, network expects {}x{}",
                    s.width(),
                    s.height(),
                    params.config().input_width,
                    params.config().input_height
                )));
            }
        }
        let fw = forward_raw(params, &inputs)?;
        for ((seg, sdf), s) in fw.seg.into_iter().zip(fw.sdf).zip(chunk) {
            out.push(Prediction {
                seg_probs: SliceField::real(s.width(), s.height(), seg)?,
                sdf: SliceField::real(s.width(), s.height(), sdf)?,
            });
        }
    }
    Ok(out)
}

/// Slice-by-slice inference: thresholded mask volume and predicted SDF volume,
/// both with the image's geometry.
pub fn predict_volume(params: &ModelParams, image: &VolumeGrid) -> Result<(VolumeGrid, VolumeGrid)> {
    let nz = image.dims()[2];
    let slices = (0..nz).map(|z| extract_slice(image, z)).collect::<Result<Vec<_>>>()?;
    let slices: Vec<SliceField> = slices
        .into_iter()
        .map(|s| SliceField::new(s.width(), s.height(), s.into_values(), SliceKind::Real))
        .collect::<Result<_>>()?;
    let preds = predict_slices(params, &slices)?;
    let masks: Vec<SliceField> = preds.iter().map(Prediction::mask).collect();
    let sdfs: Vec<SliceField> = preds.into_iter().map(|p| p.sdf).collect();
    Ok((
        stack_slices(&masks, image.spacing(), image.origin())?,
        stack_slices(&sdfs, image.spacing(), image.origin())?,
    ))
}

fn reflect(i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let r = i % period;
    if r < n {
        r
    } else {
        period - r
    }
}

/// Reflect-pad on the right and bottom up to the next multiple of `multiple`.
pub fn pad_to_multiple(slice: &SliceField, multiple: usize) -> SliceField {
    let (w, h) = (slice.width(), slice.height());
    let pw = w.div_ceil(multiple) * multiple;
    let ph = h.div_ceil(multiple) * multiple;
    if (pw, ph) == (w, h) {
        return slice.clone();
    }
    let mut v = Vec::with_capacity(pw * ph);
    for y in 0..ph {
        let sy = reflect(y, h);
        for x in 0..pw {
            v.push(slice.get(reflect(x, w), sy));
        }
    }
    SliceField::new(pw, ph, v, slice.kind()).expect("padded values come from the source")
}

/// Top-left `width x height` window.
pub fn crop_slice(slice: &SliceField, width: usize, height: usize) -> Result<SliceField> {
    if width > slice.width() || height > slice.height() {
        return Err(Error::Shape(format!(
            "cannot crop {}x{} to {width}x{height}",
            slice.width(),
            slice.height()
        )));
    }
    let mut v = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            v.push(slice.get(x, y));
        }
    }
    SliceField::new(width, height, v, slice.kind())
}
