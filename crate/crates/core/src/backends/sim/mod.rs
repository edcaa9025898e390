//! Discrete-event network simulator.

mod driver;
mod net;
mod scenario;

pub use driver::{sim_run, sim_sweep, LayerMetrics, Phase, RequestInfo, SimMetrics, SimOptions};
pub use net::{Fault, LinkParams, ReqId, RequestSpec, SimNet};
pub use scenario::{run_scenario, ScenarioConfig, ScenarioRequest, ScenarioResult};

use crate::cost::CostError;

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Cost(#[from] CostError),
}
