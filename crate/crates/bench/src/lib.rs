//! Criterion benchmarks for the filter and learners live in `benches/`.
