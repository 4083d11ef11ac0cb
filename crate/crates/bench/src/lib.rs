//! Criterion benchmarks for the planner and the PU objective; run with
//! `cargo bench -p safeskill-bench`.
