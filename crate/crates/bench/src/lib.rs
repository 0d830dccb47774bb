//! Criterion benchmarks for the core layers and the desk model live under
//! `benches/`; run them with `cargo bench -p lnadapt-bench`.
