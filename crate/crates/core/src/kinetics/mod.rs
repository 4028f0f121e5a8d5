//! Mass-action reaction networks, a stiff integrator and the dataset
//! pipeline built on them.

mod dataset;
mod io;
mod mechanism;
mod ode;

pub use dataset::*;
pub use io::{decode_dataset, encode_dataset, read_dataset, write_dataset, CNNE_MAGIC, CNNE_VERSION};
pub use mechanism::{Environment, Mechanism, Reaction, DEMO_MECHANISM, T_REF};
pub use ode::{integrate, integrate_fixed, rhs, rhs_and_jacobian, FixedRun, IntegratorOptions, Trajectory};
