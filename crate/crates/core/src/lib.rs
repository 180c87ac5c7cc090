pub mod closedform;
pub mod conv;
pub mod corrupt;
pub mod denoise;
pub mod geom3d;
pub mod harness;
pub mod so3rep;
pub mod steerable;
