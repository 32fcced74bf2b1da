pub mod domain;
pub mod factor_config;
pub mod telemetry;
pub mod protection;
pub mod router;
pub mod simulator;
