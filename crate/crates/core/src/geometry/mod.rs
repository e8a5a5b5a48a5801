//! Homographies, epipolar geometry, and invertible transform chains.

mod chain;
mod epipolar;
mod homography;
mod ransac;

pub use chain::{Direction, Mapped, TransformChain, TransformStep};
#[allow(unused_imports)]
pub(crate) use chain::in_frame;
pub use epipolar::{epipolar_distance, epipolar_line_distance, fundamental_from_poses, skew, FundamentalMatrix};
pub use homography::Homography;
pub use ransac::{dlt_homography, estimate_homography_ransac, symmetric_transfer_error, RansacConfig, RansacFit};

/// Continuous pixel coordinate.
pub type Point = nalgebra::Point2<f64>;
