//! Benchmarks live in `benches/`; run them with `cargo bench -p lpa3d-bench`.
