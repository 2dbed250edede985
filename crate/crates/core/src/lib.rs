pub mod geom3;
pub mod quad;
pub mod sampling;
pub mod stats;
pub mod two_scatterer;
pub mod estimators;
pub mod lorentz;
pub mod cli;
