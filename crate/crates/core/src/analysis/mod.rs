//! Experiment orchestration: ablations, sweeps, cross-corpus scoring,
//! attention export and the linear probe baseline.

mod attention;
mod experiment;
mod probe;

pub use attention::{extract_prompt_attention, parse_pgm, to_pgm, AttentionMap, AttentionTarget, Graymap, Modality};
pub use experiment::{
    ablation_suite, cross_dataset_eval, parallel_map, run_cell, run_protocol, sweep, AblationRow, AblationTable,
    PreparedSplit, RunPlan, SweepAxis, SweepResult, SWEEP_CSV_HEADER,
};
pub use probe::{linear_probe, ProbeResult};
