//! Benchmarks only; run with `cargo bench -p longtail-bench`.
