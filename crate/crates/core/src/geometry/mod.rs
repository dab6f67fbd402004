//! Point clouds, rigid transforms, the discrete rotation groups, neighbour
//! queries and point-set distances.

pub mod chamfer;
pub mod cloud;
pub mod group;
pub mod io;
pub mod knn;
pub mod pose;

pub use chamfer::{cd_metric, chamfer};
pub use cloud::PointCloud;
pub use group::RotationGroup;
pub use knn::{knn, KdTree};
pub use pose::{apply_pose, quat_to_matrix, Mat3, Pose, Quat, Scale, Vec3};
