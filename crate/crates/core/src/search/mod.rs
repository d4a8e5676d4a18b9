//! Architecture probabilities, bi-level search, discretization and manual
//! separation sweeps.

mod arch;
mod bilevel;
mod sweep;

pub use arch::{arch_probs, discretize, ArchBitstring, ArchParams};
pub use bilevel::{
    arch_step, bilevel_step, init_search, run_search, search, search_epoch, BilevelLog, SearchConfig, SearchData,
    SearchEpoch, SearchResult, SearchSchedule,
};
pub use sweep::{stage_blocks, sweep_enumerate, SweepMode, SweepScheme};
