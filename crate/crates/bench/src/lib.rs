//! Criterion benchmarks for the estimation pipeline live in `benches/`.
