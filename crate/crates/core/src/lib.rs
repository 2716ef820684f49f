pub mod cli;
pub mod experiments;
pub mod graph;
pub mod io;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod training;
