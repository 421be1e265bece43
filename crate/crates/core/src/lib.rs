pub mod agent;
pub mod envs;
pub mod guidance;
pub mod harness;
pub mod numerics;
pub mod oracle;
pub mod worldmodel;
