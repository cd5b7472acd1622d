//! Anchor-based local pose alignment: room boxes, corner anchor frames,
//! 8-DoF anchor-local camera poses, anchor assignment and ray generation.

mod pose;
mod rays;
mod room;

pub use pose::{
    assign_anchor, circular_abs_diff, euler_to_matrix, global_to_lpa, lpa_to_global,
    matrix_to_euler, pick_anchor, rotation_angle_between, wrap_roll, wrap_yaw, AnchorSystem,
    CornerView, GlobalCamera, LpaPose,
};
pub(crate) use rays::exit_distance;
pub use rays::{boundary_depths, camera_rays, generate_rays, ray_box_distance, Rays};
pub use room::{anchor_frames, anchor_frames_with, AnchorFrame, CoreOrientation, RoomBox};
