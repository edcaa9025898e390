pub mod backends;
pub mod collectives;
pub mod cost;
pub mod layer;
pub mod profile;
pub mod scheduler;
pub mod trace;
pub mod validate;
