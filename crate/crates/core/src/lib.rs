//! Shape-aware slice segmentation for surface reconstruction.
//!
//! The crate covers the full pipeline from binary masks to evaluated surfaces:
//!
//! * [`volgrid`]: voxel grids, 2D slices and the `.svol.json` container.
//! * [`sdf`]: exact 2D Euclidean distance transforms and signed distance slices.
//! * [`losses`]: BCE, dice, L1 and Laplacian losses with analytic gradients.
//! * [`model`]: a small two-head U-Net trained with Adam.
//! * [`mesh`]: marching cubes and OBJ/STL/PLY export.
//! * [`metrics`]: volumetric dice, surface dice, HD, HD95 and ASSD.
//! * [`phantom`]: synthetic volumes with known ground truth.
//!
//! A guided tour lives in the `book/` directory of the repository.

pub mod error;
pub mod losses;
pub mod mesh;
pub mod metrics;
pub mod model;
pub mod phantom;
pub mod sdf;
pub mod volgrid;

pub use error::{Error, Result};
pub use volgrid::{ElementKind, SliceField, SliceKind, VolumeGrid};
