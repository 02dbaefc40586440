//! Synthetic volumes with known ground truth.
//!
//! Every case is drawn from a `Pcg64` generator (PCG XSL-RR 128/64) built as
//! `Pcg64::new(seed, index)`, so case `i` depends only on the seed and `i`.
//! Shape parameters are drawn first, then one standard normal per voxel in
//! x-fastest order for the noise.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use rand_pcg::Pcg64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volgrid::{save_volume, VolumeGrid};

/// Voxels kept free between any shape and the grid border.
pub const MARGIN: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeFamily {
    Sphere,
    Ellipsoid,
    TwoLobe,
    /// Cycles sphere, ellipsoid, two-lobe by case index.
    Mixed,
}

impl ShapeFamily {
    fn for_case(self, index: usize) -> ShapeFamily {
        match self {
            ShapeFamily::Mixed => [ShapeFamily::Sphere, ShapeFamily::Ellipsoid, ShapeFamily::TwoLobe][index % 3],
            f => f,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    /// In-plane grid size (width = height).
    pub size: usize,
    /// Number of slices per case.
    pub slices: usize,
    pub count: usize,
    pub seed: u64,
    pub family: ShapeFamily,
    pub contrast: f64,
    pub noise_sigma: f64,
    /// In-plane size must be a multiple of this (the network's `2^depth`).
    pub size_multiple: usize,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            size: 64,
            slices: 64,
            count: 10,
            seed: 0,
            family: ShapeFamily::Mixed,
            contrast: 1.0,
            noise_sigma: 0.1,
            size_multiple: 4,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::Config("case count must be at least 1".into()));
        }
        if self.size_multiple == 0 || self.size == 0 || !self.size.is_multiple_of(self.size_multiple) {
            return Err(Error::Config(format!(
                "size {} must be a positive multiple of {}",
                self.size, self.size_multiple
            )));
        }
        if self.slices == 0 {
            return Err(Error::Config("slice count must be at least 1".into()));
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return Err(Error::Config(format!("noise sigma must be >= 0, got {}", self.noise_sigma)));
        }
        if !self.contrast.is_finite() {
            return Err(Error::Config(format!("contrast must be finite, got {}", self.contrast)));
        }
        // the smallest shape needs a couple of voxels of room on every side
        if (self.size.min(self.slices) as f64 - 1.0) / 2.0 - MARGIN < 2.0 {
            return Err(Error::Config(format!(
                "grid {}x{}x{} is too small for a shape with a {MARGIN}-voxel margin",
                self.size, self.size, self.slices
            )));
        }
        Ok(())
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.size, self.size, self.slices]
    }
}

/// Analytic solid in voxel-index coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "kebab-case")]
pub enum Shape {
    Sphere { center: [f64; 3], radius: f64 },
    Ellipsoid { center: [f64; 3], radii: [f64; 3] },
    TwoLobe { centers: [[f64; 3]; 2], radii: [f64; 2] },
}

impl Shape {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        let d2 = |c: [f64; 3]| (0..3).map(|k| (p[k] - c[k]).powi(2)).sum::<f64>();
        match *self {
            Shape::Sphere { center, radius } => d2(center) <= radius * radius,
            Shape::Ellipsoid { center, radii } => (0..3).map(|k| ((p[k] - center[k]) / radii[k]).powi(2)).sum::<f64>() <= 1.0,
            Shape::TwoLobe { centers, radii } => d2(centers[0]) <= radii[0] * radii[0] || d2(centers[1]) <= radii[1] * radii[1],
        }
    }

    /// Axis-aligned bounding box `(lo, hi)`.
    pub fn bounds(&self) -> ([f64; 3], [f64; 3]) {
        let ball = |c: [f64; 3], r: [f64; 3]| ([c[0] - r[0], c[1] - r[1], c[2] - r[2]], [c[0] + r[0], c[1] + r[1], c[2] + r[2]]);
        match *self {
            Shape::Sphere { center, radius } => ball(center, [radius; 3]),
            Shape::Ellipsoid { center, radii } => ball(center, radii),
            Shape::TwoLobe { centers, radii } => {
                let (a0, a1) = ball(centers[0], [radii[0]; 3]);
                let (b0, b1) = ball(centers[1], [radii[1]; 3]);
                (
                    [a0[0].min(b0[0]), a0[1].min(b0[1]), a0[2].min(b0[2])],
                    [a1[0].max(b1[0]), a1[1].max(b1[1]), a1[2].max(b1[2])],
                )
            }
        }
    }

    fn check_fits(&self, dims: [usize; 3]) -> Result<()> {
        let (lo, hi) = self.bounds();
        for k in 0..3 {
            if lo[k] < MARGIN || hi[k] > dims[k] as f64 - 1.0 - MARGIN {
                return Err(Error::Config(format!(
                    "shape spans [{:.2}, {:.2}] on axis {k}, outside the {MARGIN}-voxel margin of a {}-voxel grid",
                    lo[k], hi[k], dims[k]
                )));
            }
        }
        Ok(())
    }
}

fn uniform(rng: &mut Pcg64, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

fn sample_shape(family: ShapeFamily, dims: [usize; 3], rng: &mut Pcg64) -> Shape {
    let half = dims.map(|d| (d as f64 - 1.0) / 2.0);
    let room = half.map(|h| h - MARGIN);
    let min_room = room[0].min(room[1]).min(room[2]);
    let jitter = |rng: &mut Pcg64, k: usize, extent: f64| half[k] + uniform(rng, -0.5, 0.5) * (room[k] - extent).max(0.0);
    match family {
        ShapeFamily::Sphere | ShapeFamily::Mixed => {
            let radius = uniform(rng, 0.5, 0.8) * min_room;
            let center = [0, 1, 2].map(|k| jitter(rng, k, radius));
            Shape::Sphere { center, radius }
        }
        ShapeFamily::Ellipsoid => {
            let radii = room.map(|r| uniform(rng, 0.45, 0.85) * r);
            let center = [0, 1, 2].map(|k| jitter(rng, k, radii[k]));
            Shape::Ellipsoid { center, radii }
        }
        ShapeFamily::TwoLobe => {
            let radii = [uniform(rng, 0.3, 0.45) * min_room, uniform(rng, 0.3, 0.45) * min_room];
            let angle = uniform(rng, 0.0, std::f64::consts::PI);
            // lobes overlap enough to stay connected but leave a waist
            let sep = 0.8 * (radii[0] + radii[1]);
            let dir = [angle.cos(), angle.sin(), 0.0];
            let mid = half;
            Shape::TwoLobe {
                centers: [
                    [0, 1, 2].map(|k| mid[k] - 0.5 * sep * dir[k]),
                    [0, 1, 2].map(|k| mid[k] + 0.5 * sep * dir[k]),
                ],
                radii,
            }
        }
    }
}

/// Shape drawn for case `index`.
pub fn case_shape(spec: &PhantomSpec, index: usize) -> Result<Shape> {
    spec.validate()?;
    let mut rng = Pcg64::new(u128::from(spec.seed), index as u128);
    Ok(sample_shape(spec.family.for_case(index), spec.dims(), &mut rng))
}

fn box_filter3(values: &[f64], dims: [usize; 3]) -> Vec<f64> {
    let [nx, ny, nz] = dims;
    let mut cur = values.to_vec();
    let strides = [1, nx, nx * ny];
    for axis in 0..3 {
        let mut next = vec![0.0; cur.len()];
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let i = x + nx * (y + ny * z);
                    let pos = [x, y, z][axis];
                    let mut s = cur[i];
                    if pos > 0 {
                        s += cur[i - strides[axis]];
                    }
                    if pos + 1 < dims[axis] {
                        s += cur[i + strides[axis]];
                    }
                    next[i] = s;
                }
            }
        }
        cur = next;
    }
    cur.iter().map(|v| v / 27.0).collect()
}

/// Rasterize `shape` and build the noisy image for case `index`.
///
/// The mask holds voxels whose center lies inside the shape. The image is
/// `contrast * mask` averaged over a 3x3x3 box (zero outside the grid) plus
/// Gaussian noise.
pub fn render_case(spec: &PhantomSpec, index: usize, shape: &Shape) -> Result<(VolumeGrid, VolumeGrid)> {
    spec.validate()?;
    let dims = spec.dims();
    shape.check_fits(dims)?;
    let mask = VolumeGrid::mask_from_fn(dims, [1.0; 3], [0.0; 3], |x, y, z| {
        shape.contains([x as f64, y as f64, z as f64])
    })?;
    let m = mask.require_mask()?;
    let scaled: Vec<f64> = m.iter().map(|&v| spec.contrast * f64::from(v)).collect();
    let smooth = box_filter3(&scaled, dims);

    let mut rng = Pcg64::new(u128::from(spec.seed), index as u128);
    sample_shape(spec.family.for_case(index), dims, &mut rng);
    let image: Vec<f32> = smooth
        .iter()
        .map(|&v| {
            let n: f64 = rng.sample(StandardNormal);
            (v + spec.noise_sigma * n) as f32
        })
        .collect();
    let image = VolumeGrid::new_scalar(dims, [1.0; 3], [0.0; 3], image)?;
    Ok((image, mask))
}

/// Image and mask for case `index`, deterministic in `(spec, index)`.
pub fn gen_case(spec: &PhantomSpec, index: usize) -> Result<(VolumeGrid, VolumeGrid)> {
    let shape = case_shape(spec, index)?;
    render_case(spec, index, &shape)
}

/// `|x - center| - radius` at every voxel center, in physical units.
pub fn analytic_sphere_sdf(dims: [usize; 3], spacing: [f64; 3], center: [f64; 3], radius: f64) -> Result<VolumeGrid> {
    VolumeGrid::scalar_from_fn(dims, spacing, [0.0; 3], |x, y, z| {
        let p = [x as f64 * spacing[0], y as f64 * spacing[1], z as f64 * spacing[2]];
        let d = ((p[0] - center[0]).powi(2) + (p[1] - center[1]).powi(2) + (p[2] - center[2]).powi(2)).sqrt();
        (d - radius) as f32
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: PhantomSpec,
    pub fractions: [f64; 3],
    pub splits: Splits,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format("manifest", e.to_string()))
    }

    /// `(split name, case ids)` in train, val, test order.
    pub fn split_lists(&self) -> [(&'static str, &[String]); 3] {
        [("train", &self.splits.train), ("val", &self.splits.val), ("test", &self.splits.test)]
    }
}

pub fn case_id(index: usize) -> String {
    format!("case_{index:03}")
}

pub fn image_path(dir: &Path, split: &str, id: &str) -> PathBuf {
    dir.join(split).join(format!("{id}_image.svol.json"))
}

pub fn mask_path(dir: &Path, split: &str, id: &str) -> PathBuf {
    dir.join(split).join(format!("{id}_mask.svol.json"))
}

/// Case counts per split: train and val are rounded, test takes the rest.
pub fn split_counts(count: usize, fractions: [f64; 3]) -> Result<[usize; 3]> {
    if fractions.iter().any(|f| f.is_nan() || *f < 0.0) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions {fractions:?} must be >= 0 and sum to 1")));
    }
    let train = ((fractions[0] * count as f64).round() as usize).min(count);
    let val = ((fractions[1] * count as f64).round() as usize).min(count - train);
    Ok([train, val, count - train - val])
}

/// Write every case under `dir/<split>/` plus `dir/manifest.json`.
///
/// Cases are split by index: the first ones go to train, then val, then test.
/// `jobs` threads generate cases; the files do not depend on it.
pub fn gen_dataset(spec: &PhantomSpec, fractions: [f64; 3], dir: impl AsRef<Path>, jobs: usize) -> Result<PathBuf> {
    spec.validate()?;
    let dir = dir.as_ref();
    let [train, val, _] = split_counts(spec.count, fractions)?;
    let split_of = |i: usize| if i < train { "train" } else if i < train + val { "val" } else { "test" };
    for split in ["train", "val", "test"] {
        let d = dir.join(split);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }

    let jobs = jobs.clamp(1, spec.count);
    let write_case = |i: usize| -> Result<()> {
        let (image, mask) = gen_case(spec, i)?;
        let id = case_id(i);
        save_volume(&image, image_path(dir, split_of(i), &id))?;
        save_volume(&mask, mask_path(dir, split_of(i), &id))
    };
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..jobs)
            .map(|j| {
                let write_case = &write_case;
                s.spawn(move || (j..spec.count).step_by(jobs).try_for_each(write_case))
            })
            .collect();
        handles.into_iter().try_for_each(|h| h.join().expect("phantom worker panicked"))
    })?;

    let ids = |r: std::ops::Range<usize>| r.map(case_id).collect::<Vec<_>>();
    let manifest = Manifest {
        spec: spec.clone(),
        fractions,
        splits: Splits {
            train: ids(0..train),
            val: ids(train..train + val),
            test: ids(train + val..spec.count),
        },
    };
    let path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
