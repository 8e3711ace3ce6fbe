pub mod numerics;
pub mod actor;
pub mod encoders;
pub mod losses;
pub mod metrics;
pub mod planner;
pub mod policy;
pub mod synthcohort;
pub mod training;
