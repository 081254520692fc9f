//! Energy-harvesting simulation: charging traces and the discrete-time
//! scheduler/inference loop.

pub mod sim;
pub mod trace;

pub use sim::{
    export_report, load_report, prepare_bundle, run_simulation, step_energy, ClampKind, ClampSpan,
    SimConfig, SimEvent, SimEventKind, SimResult, SimSeries, StepOutcome, WeightBundle, DEFAULT_DT,
};
pub use trace::{load_trace, parse_trace, save_trace, synth_trace, HarvestTrace, SynthKind};
