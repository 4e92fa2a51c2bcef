//! Spiking neural ensembles: ANN teachers distill partitioned feature
//! knowledge into small spiking students, with informed feature-space
//! disentanglement, dynamic student activation, and event-driven energy
//! accounting.

pub mod arch;
pub mod autodiff;
pub mod config;
pub mod data;
pub mod energy;
pub mod ensemble;
pub mod error;
pub mod losses;
pub mod optim;
pub mod parallel;
pub mod partition;
pub mod report;
pub mod rng;
pub mod snn;
pub mod teacher;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
