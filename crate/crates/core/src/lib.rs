pub mod diffcore;
pub mod distgeo;
pub mod evalkit;
pub mod kinematics;
pub mod localsolve;
pub mod model;
pub mod training;
