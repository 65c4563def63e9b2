pub mod conv;
pub mod elementwise;
pub mod linalg;
pub mod nn;
pub mod reduce;
pub mod shape;
