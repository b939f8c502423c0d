//! Local mapping: map state, residuals, windowed and global bundle adjustment.

mod map;
mod residuals;
mod solver;
mod triangulate;

pub use map::*;
pub use residuals::*;
pub use solver::*;
pub use triangulate::*;
