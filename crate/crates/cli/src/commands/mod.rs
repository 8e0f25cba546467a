pub mod audit;
pub mod classify;
pub mod evaluate;
pub mod fit;
pub mod report;
pub mod synth;
