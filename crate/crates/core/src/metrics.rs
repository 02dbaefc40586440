//! Overlap and surface-distance metrics between binary volumes.
//!
//! Surfaces are the foreground voxels with at least one 6-connected
//! background neighbour (voxels outside the grid count as background).
//! Distances are Euclidean in physical units. For two surfaces of the same
//! grid the nearest-point queries go through an exact anisotropic 3D
//! distance transform; otherwise they fall back to exhaustive search.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::TriangleMesh;
use crate::sdf::lower_envelope;
use crate::volgrid::VolumeGrid;

/// Points of a voxel surface, with the grid they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfacePointSet {
    pub points: Vec<[f64; 3]>,
    voxels: Vec<[usize; 3]>,
    grid: Option<([usize; 3], [f64; 3], [f64; 3])>,
}

impl SurfacePointSet {
    /// Free-standing points with no grid attached.
    pub fn from_points(points: Vec<[f64; 3]>) -> Self {
        Self {
            points,
            voxels: Vec::new(),
            grid: None,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn voxels(&self) -> &[[usize; 3]] {
        &self.voxels
    }

    fn shares_grid_with(&self, other: &SurfacePointSet) -> bool {
        self.grid.is_some() && self.grid == other.grid
    }
}

fn is_surface(mask: &[u8], dims: [usize; 3], x: usize, y: usize, z: usize) -> bool {
    let [nx, ny, nz] = dims;
    let at = |x: usize, y: usize, z: usize| mask[x + nx * (y + ny * z)] == 1;
    x == 0
        || y == 0
        || z == 0
        || x + 1 == nx
        || y + 1 == ny
        || z + 1 == nz
        || !at(x - 1, y, z)
        || !at(x + 1, y, z)
        || !at(x, y - 1, z)
        || !at(x, y + 1, z)
        || !at(x, y, z - 1)
        || !at(x, y, z + 1)
}

/// Foreground voxels touching the background, in voxel order.
pub fn extract_surface_voxels(mask: &VolumeGrid) -> Result<SurfacePointSet> {
    let data = mask.require_mask()?;
    let dims = mask.dims();
    let mut points = Vec::new();
    let mut voxels = Vec::new();
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                if data[mask.index(x, y, z)] == 1 && is_surface(data, dims, x, y, z) {
                    points.push(mask.position(x, y, z));
                    voxels.push([x, y, z]);
                }
            }
        }
    }
    if points.is_empty() {
        return Err(Error::Empty("mask has no foreground voxels".into()));
    }
    Ok(SurfacePointSet {
        points,
        voxels,
        grid: Some((dims, mask.spacing(), mask.origin())),
    })
}

/// Squared physical distance to the nearest marked voxel, for every voxel.
fn squared_distance_map(marked: &[[usize; 3]], dims: [usize; 3], spacing: [f64; 3]) -> Vec<f64> {
    let [nx, ny, nz] = dims;
    let mut grid = vec![f64::INFINITY; nx * ny * nz];
    for &[x, y, z] in marked {
        grid[x + nx * (y + ny * z)] = 0.0;
    }
    let longest = nx.max(ny).max(nz);
    let mut line = vec![0.0; longest];
    let mut out = vec![0.0; longest];
    let mut sites = Vec::with_capacity(longest);
    let mut bounds = Vec::with_capacity(longest);
    let strides = [1, nx, nx * ny];
    for axis in 0..3 {
        let n = dims[axis];
        let w2 = spacing[axis] * spacing[axis];
        let (oa, ob) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        for j in 0..dims[ob] {
            for i in 0..dims[oa] {
                let start = i * strides[oa] + j * strides[ob];
                for k in 0..n {
                    line[k] = grid[start + k * strides[axis]];
                }
                lower_envelope(&line[..n], w2, &mut out[..n], &mut sites, &mut bounds);
                for k in 0..n {
                    grid[start + k * strides[axis]] = out[k];
                }
            }
        }
    }
    grid
}

fn nearest_brute(p: &[f64; 3], to: &[[f64; 3]]) -> f64 {
    to.iter()
        .map(|q| {
            let d = [p[0] - q[0], p[1] - q[1], p[2] - q[2]];
            d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
        })
        .fold(f64::INFINITY, f64::min)
        .sqrt()
}

/// Distance from every point of `from` to the nearest point of `to`.
pub fn directed_distances(from: &SurfacePointSet, to: &SurfacePointSet) -> Result<Vec<f64>> {
    if from.is_empty() || to.is_empty() {
        return Err(Error::Argument("directed distance needs two nonempty point sets".into()));
    }
    if let (true, Some((dims, spacing, _))) = (from.shares_grid_with(to), from.grid) {
        let map = squared_distance_map(&to.voxels, dims, spacing);
        let [nx, ny, _] = dims;
        return Ok(from
            .voxels
            .iter()
            .map(|&[x, y, z]| map[x + nx * (y + ny * z)].sqrt())
            .collect());
    }
    Ok(from.points.iter().map(|p| nearest_brute(p, &to.points)).collect())
}

/// Percentile `q` in `[0, 100]` with linear interpolation between the
/// closest ranks: `rank = q / 100 * (n - 1)`, then
/// `v[floor] + frac(rank) * (v[ceil] - v[floor])` over the sorted values.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of an empty set");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = q / 100.0 * (v.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    v[lo] + (rank - lo as f64) * (v[hi] - v[lo])
}

/// Both directed distance arrays between two surfaces.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceDistances {
    pub a_to_b: Vec<f64>,
    pub b_to_a: Vec<f64>,
}

impl SurfaceDistances {
    pub fn new(a: &SurfacePointSet, b: &SurfacePointSet) -> Result<Self> {
        if a.is_empty() || b.is_empty() {
            return Err(Error::UndefinedMetric("surface distance with an empty surface".into()));
        }
        Ok(Self {
            a_to_b: directed_distances(a, b)?,
            b_to_a: directed_distances(b, a)?,
        })
    }

    fn pooled(&self) -> impl Iterator<Item = &f64> {
        self.a_to_b.iter().chain(&self.b_to_a)
    }

    pub fn hausdorff(&self) -> f64 {
        self.pooled().copied().fold(0.0, f64::max)
    }

    /// 95th percentile of the pooled two-way distances.
    pub fn hd95(&self) -> f64 {
        let pooled: Vec<f64> = self.pooled().copied().collect();
        percentile(&pooled, 95.0)
    }

    pub fn assd(&self) -> f64 {
        let n = self.a_to_b.len() + self.b_to_a.len();
        self.pooled().sum::<f64>() / n as f64
    }

    /// Fraction of both surfaces within `tolerance` of the other (`<=`).
    pub fn surface_dice(&self, tolerance: f64) -> Result<f64> {
        if tolerance.is_nan() || tolerance < 0.0 {
            return Err(Error::Argument(format!("tolerance must be >= 0, got {tolerance}")));
        }
        let n = self.a_to_b.len() + self.b_to_a.len();
        let within = self.pooled().filter(|&&d| d <= tolerance).count();
        Ok(within as f64 / n as f64)
    }
}

pub fn hausdorff(a: &SurfacePointSet, b: &SurfacePointSet) -> Result<f64> {
    Ok(SurfaceDistances::new(a, b)?.hausdorff())
}

pub fn hd95(a: &SurfacePointSet, b: &SurfacePointSet) -> Result<f64> {
    Ok(SurfaceDistances::new(a, b)?.hd95())
}

pub fn assd(a: &SurfacePointSet, b: &SurfacePointSet) -> Result<f64> {
    Ok(SurfaceDistances::new(a, b)?.assd())
}

pub fn surface_dice(a: &SurfacePointSet, b: &SurfacePointSet, tolerance: f64) -> Result<f64> {
    if tolerance.is_nan() || tolerance < 0.0 {
        return Err(Error::Argument(format!("tolerance must be >= 0, got {tolerance}")));
    }
    SurfaceDistances::new(a, b)?.surface_dice(tolerance)
}

fn check_same_dims(a: &VolumeGrid, b: &VolumeGrid) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("volumes differ in size: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// `2|A and B| / (|A| + |B|)`; two empty masks score 1.
pub fn volumetric_dice(pred: &VolumeGrid, truth: &VolumeGrid) -> Result<f64> {
    check_same_dims(pred, truth)?;
    let (a, b) = (pred.require_mask()?, truth.require_mask()?);
    let mut inter = 0usize;
    let mut total = 0usize;
    for (&x, &y) in a.iter().zip(b) {
        inter += usize::from(x & y);
        total += usize::from(x) + usize::from(y);
    }
    Ok(if total == 0 { 1.0 } else { 2.0 * inter as f64 / total as f64 })
}

/// Per-case metrics. Surface metrics are `None` when either surface is empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub case: String,
    pub vol_dice: f64,
    pub surf_dice: Option<f64>,
    pub hd: Option<f64>,
    pub hd95: Option<f64>,
    pub assd: Option<f64>,
}

pub const DEFAULT_TOLERANCE: f64 = 1.0;

pub fn evaluate_pair(pred: &VolumeGrid, truth: &VolumeGrid, tolerance: f64, case: &str) -> Result<MetricsRecord> {
    check_same_dims(pred, truth)?;
    if tolerance.is_nan() || tolerance < 0.0 {
        return Err(Error::Argument(format!("tolerance must be >= 0, got {tolerance}")));
    }
    let vol_dice = volumetric_dice(pred, truth)?;
    let surfaces = match (extract_surface_voxels(pred), extract_surface_voxels(truth)) {
        (Ok(a), Ok(b)) => Some(SurfaceDistances::new(&a, &b)?),
        (Err(Error::Empty(_)), _) | (_, Err(Error::Empty(_))) => None,
        (Err(e), _) | (_, Err(e)) => return Err(e),
    };
    Ok(match surfaces {
        Some(d) => MetricsRecord {
            case: case.to_string(),
            vol_dice,
            surf_dice: Some(d.surface_dice(tolerance)?),
            hd: Some(d.hausdorff()),
            hd95: Some(d.hd95()),
            assd: Some(d.assd()),
        },
        None => MetricsRecord {
            case: case.to_string(),
            vol_dice,
            surf_dice: None,
            hd: None,
            hd95: None,
            assd: None,
        },
    })
}

/// Attach each vertex's distance to the nearest truth surface point.
pub fn vertex_distance_channel(mesh: &TriangleMesh, truth: &SurfacePointSet) -> Result<TriangleMesh> {
    if truth.is_empty() {
        return Err(Error::Argument("truth surface is empty".into()));
    }
    let scalar = mesh.vertices.iter().map(|v| nearest_brute(v, &truth.points)).collect();
    mesh.clone().with_scalar(scalar)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: Option<f64>,
    /// Sample standard deviation (`n - 1`); 0 for a single value.
    pub std: Option<f64>,
    pub count: usize,
    pub excluded: usize,
}

impl MetricSummary {
    fn of(values: &[Option<f64>]) -> Self {
        let defined: Vec<f64> = values.iter().flatten().copied().collect();
        let n = defined.len();
        let excluded = values.len() - n;
        if n == 0 {
            return Self {
                mean: None,
                std: None,
                count: 0,
                excluded,
            };
        }
        let mean = defined.iter().sum::<f64>() / n as f64;
        let std = if n == 1 {
            0.0
        } else {
            (defined.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Self {
            mean: Some(mean),
            std: Some(std),
            count: n,
            excluded,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub cases: usize,
    pub vol_dice: MetricSummary,
    pub surf_dice: MetricSummary,
    pub hd: MetricSummary,
    pub hd95: MetricSummary,
    pub assd: MetricSummary,
}

pub fn aggregate(records: &[MetricsRecord]) -> Result<AggregateReport> {
    if records.is_empty() {
        return Err(Error::Argument("no records to aggregate".into()));
    }
    let col = |f: fn(&MetricsRecord) -> Option<f64>| MetricSummary::of(&records.iter().map(f).collect::<Vec<_>>());
    Ok(AggregateReport {
        cases: records.len(),
        vol_dice: col(|r| Some(r.vol_dice)),
        surf_dice: col(|r| r.surf_dice),
        hd: col(|r| r.hd),
        hd95: col(|r| r.hd95),
        assd: col(|r| r.assd),
    })
}

pub const CSV_HEADER: &str = "case,vol_dice,surf_dice,hd,hd95,assd";

/// One row per case; undefined metrics are left empty.
pub fn records_to_csv(records: &[MetricsRecord]) -> String {
    let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.case,
            r.vol_dice,
            cell(r.surf_dice),
            cell(r.hd),
            cell(r.hd95),
            cell(r.assd)
        );
    }
    out
}

/// Text table with one row per labelled report, columns in the order
/// volumetric dice, surface dice, HD, HD95, ASSD.
pub fn format_table(rows: &[(String, AggregateReport)]) -> String {
    let cell = |s: &MetricSummary| match (s.mean, s.std) {
        (Some(m), Some(sd)) => format!("{m:.4}±{sd:.4}"),
        _ => "n/a".to_string(),
    };
    let mut out = String::from("| Model | Volumetric Dice | Surface Dice | HD | HD95 | ASSD |\n");
    out.push_str("|---|---|---|---|---|---|\n");
    for (label, r) in rows {
        let _ = writeln!(
            out,
            "| {label} | {} | {} | {} | {} | {} |",
            cell(&r.vol_dice),
            cell(&r.surf_dice),
            cell(&r.hd),
            cell(&r.hd95),
            cell(&r.assd)
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cube(dims: [usize; 3], lo: [usize; 3], side: usize) -> VolumeGrid {
        VolumeGrid::mask_from_fn(dims, [1.0; 3], [0.0; 3], |x, y, z| {
            (lo[0]..lo[0] + side).contains(&x) && (lo[1]..lo[1] + side).contains(&y) && (lo[2]..lo[2] + side).contains(&z)
        })
        .unwrap()
    }

    #[test]
    fn dice_counts() {
        let a = cube([6, 6, 6], [1, 1, 1], 2);
        assert_eq!(volumetric_dice(&a, &a).unwrap(), 1.0);
        assert_eq!(volumetric_dice(&a, &cube([6, 6, 6], [3, 3, 3], 2)).unwrap(), 0.0);
        // shift by one voxel in x: overlap is a 1x2x2 slab
        assert_eq!(volumetric_dice(&a, &cube([6, 6, 6], [2, 1, 1], 2)).unwrap(), 0.5);
        let e = cube([3, 3, 3], [0, 0, 0], 0);
        assert_eq!(volumetric_dice(&e, &e).unwrap(), 1.0);
        assert!(volumetric_dice(&a, &e).is_err());
    }

    #[test]
    fn surface_voxel_counts() {
        assert_eq!(extract_surface_voxels(&cube([6, 6, 6], [1, 1, 1], 4)).unwrap().len(), 56);
        assert_eq!(extract_surface_voxels(&cube([5, 5, 5], [2, 2, 2], 1)).unwrap().len(), 1);
        let full = cube([3, 3, 3], [0, 0, 0], 3);
        assert_eq!(extract_surface_voxels(&full).unwrap().len(), 26);
        assert!(matches!(extract_surface_voxels(&cube([3, 3, 3], [0, 0, 0], 0)), Err(Error::Empty(_))));
    }

    #[test]
    fn simple_distances() {
        let a = SurfacePointSet::from_points(vec![[0.0; 3]]);
        let b = SurfacePointSet::from_points(vec![[3.0, 0.0, 0.0]]);
        assert_eq!(directed_distances(&a, &b).unwrap(), vec![3.0]);
        assert_eq!(assd(&a, &b).unwrap(), 3.0);
        assert!(directed_distances(&a, &SurfacePointSet::from_points(vec![])).is_err());
        assert!(matches!(hausdorff(&a, &SurfacePointSet::from_points(vec![])), Err(Error::UndefinedMetric(_))));
        assert!(surface_dice(&a, &b, -1.0).is_err());
    }

    #[test]
    fn percentile_rule() {
        let mut v = vec![0.0; 19];
        v.push(10.0);
        assert!((percentile(&v, 95.0) - 0.5).abs() < 1e-12);
        assert_eq!(percentile(&[1.0, 2.0, 3.0], 50.0), 2.0);
        assert_eq!(percentile(&[4.0], 95.0), 4.0);
    }

    #[test]
    fn identical_masks() {
        let a = cube([8, 8, 8], [2, 2, 2], 4);
        let r = evaluate_pair(&a, &a, 1.0, "x").unwrap();
        assert_eq!((r.vol_dice, r.surf_dice, r.hd, r.hd95, r.assd), (1.0, Some(1.0), Some(0.0), Some(0.0), Some(0.0)));
    }

    #[test]
    fn empty_prediction_is_undefined() {
        let a = cube([8, 8, 8], [2, 2, 2], 4);
        let e = cube([8, 8, 8], [0, 0, 0], 0);
        let r = evaluate_pair(&e, &a, 1.0, "x").unwrap();
        assert_eq!(r.vol_dice, 0.0);
        assert!(r.hd.is_none() && r.surf_dice.is_none());
    }

    #[test]
    fn aggregate_stats() {
        let rec = |v: f64, hd: Option<f64>| MetricsRecord {
            case: "c".into(),
            vol_dice: v,
            surf_dice: hd,
            hd,
            hd95: hd,
            assd: hd,
        };
        let r = aggregate(&[rec(2.0, Some(1.0)), rec(4.0, None), rec(6.0, Some(1.0))]).unwrap();
        assert_eq!(r.vol_dice.mean, Some(4.0));
        assert_eq!(r.vol_dice.std, Some(2.0));
        assert_eq!(r.hd.count, 2);
        assert_eq!(r.hd.excluded, 1);
        assert_eq!(r.hd.std, Some(0.0));
        let one = aggregate(&[rec(0.7, Some(3.0))]).unwrap();
        assert_eq!((one.vol_dice.mean, one.vol_dice.std), (Some(0.7), Some(0.0)));
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn vertex_channel() {
        let mesh = TriangleMesh::new(vec![[0.0, 0.0, 5.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]], vec![[0, 1, 2]]).unwrap();
        let truth = SurfacePointSet::from_points(vec![[0.0; 3]]);
        let m = vertex_distance_channel(&mesh, &truth).unwrap();
        assert_eq!(m.vertex_scalar.unwrap(), vec![5.0, 1.0, 1.0]);
        assert!(vertex_distance_channel(&mesh, &SurfacePointSet::from_points(vec![])).is_err());
    }

    #[test]
    fn csv_layout() {
        let r = MetricsRecord {
            case: "c0".into(),
            vol_dice: 1.0,
            surf_dice: None,
            hd: Some(2.5),
            hd95: None,
            assd: None,
        };
        assert_eq!(records_to_csv(&[r]), "case,vol_dice,surf_dice,hd,hd95,assd\nc0,1,,2.5,,\n");
    }
}
