//! Evaluation of trained models: metric reports, NFE sweeps, side-by-side
//! comparison grids and self-contained numerical oracles.

mod eval;
mod grid;
mod oracle;
mod report;

pub use eval::{evaluate, nfe_sweep, parse_nfe_list, sweep_table, EvalImage, EvalOptions, EvalRun, EvalSample, SweepPoint, RPFD_SEED};
pub use grid::{comparison_grid, write_grids};
pub use oracle::{run_oracle, OracleOutcome, OracleSuite, RENDER_TOLERANCE};
pub use report::{parse_metrics, ImageScore, Metric, MetricReport};
