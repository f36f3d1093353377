//! Monte Carlo estimation of marginal operating characteristics.

pub mod engine;
pub mod rng;
pub mod scenario;

pub use engine::{
    aggregate, run_grid, run_replicate, run_scenario, self_check, write_oc_csv, BiasReference,
    CachedPrior, CellOutcome, Method, OcRecord, PriorCache, ReplicateOutcome, ScenarioRun,
    SimSettings,
};
pub use rng::{stream, StreamRole};
pub use scenario::{
    generate_replicate, historical_rate, scenario_grid, EffectScale, Family, FamilySpec,
    Hypothesis, Replicate, RuleSpec, ScenarioConfig,
};
