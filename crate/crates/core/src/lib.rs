pub mod arch;
pub mod autodiff;
pub mod data;
pub mod capsule;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod tensor;
