pub mod affine;
pub mod error;
pub mod midpoint;
pub mod numerics;
pub mod composition;
pub mod moyal;
pub mod sphere;
pub mod experiment;
