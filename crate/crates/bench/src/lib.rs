//! Benchmarks live in `benches/`; run them with `cargo bench -p f2hdr-bench`.
