//! Dataset loading and padded inference for the pipeline commands.

use std::path::Path;

use shapeseg::model::{crop_slice, pad_to_multiple, predict_slices, ModelParams, Prediction, TrainSample};
use shapeseg::phantom::{image_path, mask_path, Manifest};
use shapeseg::sdf::{normalized_sdf, SdfOptions};
use shapeseg::volgrid::{extract_slice, load_volume, stack_slices};
use shapeseg::{Error, Result, SliceField, SliceKind, VolumeGrid};

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    Manifest::load(dir.join("manifest.json"))
}

pub fn split_ids<'a>(manifest: &'a Manifest, split: &str) -> Result<&'a [String]> {
    manifest
        .split_lists()
        .into_iter()
        .find(|(name, _)| *name == split)
        .map(|(_, ids)| ids)
        .ok_or_else(|| Error::Argument(format!("unknown split `{split}` (expected train, val or test)")))
}

fn image_slices(image: &VolumeGrid) -> Result<Vec<SliceField>> {
    (0..image.dims()[2])
        .map(|z| {
            let s = extract_slice(image, z)?;
            SliceField::new(s.width(), s.height(), s.into_values(), SliceKind::Real)
        })
        .collect()
}

/// Every slice of every case in `split`, reflect-padded to a multiple of
/// `multiple`, with its normalized SDF target. Returns the padded slice size.
pub fn load_samples(dir: &Path, manifest: &Manifest, split: &str, multiple: usize) -> Result<(Vec<TrainSample>, (usize, usize))> {
    let ids = split_ids(manifest, split)?;
    if ids.is_empty() {
        return Err(Error::Argument(format!("split `{split}` has no cases")));
    }
    let mut samples = Vec::new();
    let mut size = None;
    for id in ids {
        let image = load_volume(image_path(dir, split, id))?;
        let mask = load_volume(mask_path(dir, split, id))?;
        if image.dims() != mask.dims() {
            return Err(Error::Shape(format!("case {id}: image and mask differ in size")));
        }
        mask.require_mask()?;
        for (z, img) in image_slices(&image)?.into_iter().enumerate() {
            let img = pad_to_multiple(&img, multiple);
            let m = pad_to_multiple(&extract_slice(&mask, z)?, multiple);
            let dims = (img.width(), img.height());
            if *size.get_or_insert(dims) != dims {
                return Err(Error::Shape(format!("case {id} has {dims:?} slices, expected {:?}", size.unwrap())));
            }
            let sdf = normalized_sdf(&m, SdfOptions::default())?;
            samples.push(TrainSample::new(&img, &m, &sdf)?);
        }
    }
    Ok((samples, size.expect("at least one slice")))
}

/// Slice-wise inference with reflect padding to the model input size and
/// cropping back; outputs inherit the image geometry.
pub fn predict_padded(params: &ModelParams, image: &VolumeGrid) -> Result<(VolumeGrid, VolumeGrid)> {
    let multiple = 1usize << params.config().depth;
    let [w, h, _] = image.dims();
    let padded: Vec<SliceField> = image_slices(image)?.iter().map(|s| pad_to_multiple(s, multiple)).collect();
    let preds = predict_slices(params, &padded)?;
    let masks = preds.iter().map(|p| crop_slice(&p.mask(), w, h)).collect::<Result<Vec<_>>>()?;
    let sdfs = preds.iter().map(|p: &Prediction| crop_slice(&p.sdf, w, h)).collect::<Result<Vec<_>>>()?;
    Ok((
        stack_slices(&masks, image.spacing(), image.origin())?,
        stack_slices(&sdfs, image.spacing(), image.origin())?,
    ))
}
