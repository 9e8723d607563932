//! Body self-perception for a simulated planar arm.
//!
//! * [`arm_sim`] simulates the arm, camera and skin and records datasets.
//! * [`gp_forward`] learns per-modality forward models with GP regression.
//! * [`pc_estimator`] infers joint angles by free-energy descent and runs the
//!   rubber-hand drift experiment.
//! * [`self_grid`] segments a visual field into body and non-body cells.
//! * [`harness`] wires everything into reproducible command runs.

pub mod arm_sim;
pub mod error;
pub mod gp_forward;
pub mod harness;
pub mod par;
pub mod pc_estimator;
pub mod rng;
pub mod self_grid;

pub use error::{Error, Result};
