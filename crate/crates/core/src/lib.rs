pub mod approximator;
pub mod cli;
pub mod environments;
pub mod intrinsic;
pub mod measures;
pub mod oracle;
pub mod trainer;
