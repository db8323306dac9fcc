pub mod reference;
pub mod suites;

pub use suites::{gradient_suite, invariant_suite, oracle_equivalence, prefix_consistency, rel_error, CheckResult};
