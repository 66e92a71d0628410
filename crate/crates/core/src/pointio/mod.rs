//! Point-cloud files and the procedural synthetic corpus.

pub mod dataset;
pub mod io;
pub mod partial;
pub mod shapes;

pub use dataset::{Dataset, DatasetEntry, Manifest, ManifestEntry, Split, CATEGORIES};
pub use io::{read_cloud, read_ply, read_xyz, write_cloud, write_ply, write_xyz};
pub use partial::{crop, make_partial, match_count, Plane};
pub use shapes::{normalize, sample_surface, Primitive, ShapeSpec};
