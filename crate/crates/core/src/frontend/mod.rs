//! Tracking: two-view initialization, per-frame pose tracking and keyframe decisions.

mod init;
mod keyframe;
mod tracking;

pub use init::*;
pub use keyframe::*;
pub use tracking::*;
