//! Multi-layer edge offloading: a five-stage pipeline timing model, a
//! time-aligned optimizer with an independent exact oracle, a fluid
//! simulator with burst injection and the task coordination protocol.

pub mod model;
pub mod oracle;
pub mod protocol;
pub mod random;
pub mod sim;
pub mod tato;

pub use model::{
    build_topology, stage_times, AccessPoint, Burst, DeviceSpec, Instance, Layer, LinkSpec, ModelError, OffloadPlan,
    RateTable, Shares, Stage, StageKind, StageTimes, Topology, TopologyError, TopologySpec, Workload,
};
pub use oracle::{feasible_at, grid_search, optimal_tmax_bisect, OracleError};
pub use protocol::{run_schedule, step_node, Message, NodeState, Phase};
pub use sim::{metrics, simulate, Metrics, SimConfig, SimTrace};
pub use tato::{allocate_wireless, baseline_plan, overload_equalize, tato_multi, tato_single, Baseline, Solution, TatoError};
