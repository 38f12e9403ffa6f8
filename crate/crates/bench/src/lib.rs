//! Criterion benchmarks for the link simulator live in `benches/`.
