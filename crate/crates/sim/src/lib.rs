//! Coverage simulations for post-selection intervals under the nested error
//! regression model.

pub mod demo;
pub mod harness;
pub mod scenario;

pub use demo::{region_demo, region_demo_from_parts, RegionDemo};
pub use harness::{run_until_selected, run_with_candidates, underselection, CoverageRow, CoverageTable, Pipeline, RegionFamily, SimError, Targets};
pub use scenario::{candidate_set_for, generate_nerm, simulate_nerm, NermDesign, NermSample, SelectionTag, Setting, SimScenario, BETA_TRUE, P};
