//! Synthetic shapes, crops, and metrics for benchmarking completion.

pub mod bench;
pub mod crop;
pub mod metrics;
pub mod shapes;

pub use bench::{
    aggregate, format_sig9, format_table, procedural_shapes, run_benchmark, write_csv, Aggregate, BenchOptions, BenchRow,
    BenchmarkShape, CropSweep, EvalReport, CSV_HEADER,
};
pub use crop::{apply_plane, crop_cuboid, crop_plane, crop_plane_in, CropKind, CropSpec, Realized};
pub use metrics::{chamfer_l2, grid_chamfer_x1000, iou, EVAL_POINTS};
pub use shapes::{generate_shape, ShapeCategory};
