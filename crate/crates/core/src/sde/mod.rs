//! SDE families, transition densities and path simulation.

pub mod density;
pub mod family;
pub mod simulate;

pub use density::{
    derived_speed_nu, logdens_bm, logdens_euler, logdens_gbm, logdens_ou, logdens_t_increment,
    ou_moments, sd_from_scale, transition_logdens,
};
pub use family::{AuxValues, Reference, SdeFamily};
pub use simulate::{simulate_path, simulate_path_with, Path, SimRng, ThetaGrid};
