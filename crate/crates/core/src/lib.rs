pub mod basis;
pub mod error;
pub mod exchange;
pub mod fields;
pub mod grid;
pub mod hf;
pub mod precision;
pub mod propagator;
pub mod scf;
