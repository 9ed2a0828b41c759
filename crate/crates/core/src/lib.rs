pub mod estimator;
pub mod io;
pub mod neural;
pub mod pipeline;
pub mod plant;
pub mod seed;
pub mod threat;
