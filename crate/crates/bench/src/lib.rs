//! Benchmark-only crate; the suites live in `benches/core_ops.rs`.
//! Run them with `cargo bench -p attnscope-bench`.
