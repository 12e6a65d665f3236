pub mod armor;
pub mod control;
pub mod dataflow;
pub mod faults;
pub mod kernel;
pub mod managers;
pub mod runner;
pub mod metrics;
pub mod scenario;
pub mod sim;
pub mod topology;
pub mod vla;
