//! Double-integrator plant, scripted nominal policies, safety-sample
//! generators, measurement noise, and the closed loop.

mod noise;
mod nominal;
mod plant;
mod scenario;
mod world;

pub use noise::{measure_position, NoiseModel};
pub use nominal::NominalPolicy;
pub use plant::{invert_setpoints, step, to_setpoints, PlantState, Setpoints, MAX_DT, SMALL_ANGLE_LIMIT};
pub use scenario::{
    build_model, run_scenario, RunSummary, ScenarioOutcome, TraceLog, TraceRow, INVARIANCE_SLACK, PLANAR_INDICES,
    TRACE_COLUMNS,
};
pub use world::{sample_safety_obstacles, sample_safety_uniform, DiskBarrier, Domain2, Obstacle, ObstacleWorld};
