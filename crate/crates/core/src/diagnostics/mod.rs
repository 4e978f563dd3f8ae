//! Self-checks shipped with the library: gradient verification, scan
//! agreement and the attention-versus-scan timing harness.

pub mod bench;
pub mod gradcheck;
pub mod scancheck;

pub use bench::{reference_attention, run_bench, BenchConfig, BenchRecord, Mechanism};
pub use gradcheck::{check_graph, CheckResult};
pub use scancheck::{scan_check, ScanCheckConfig, ScanCheckReport};
