//! Criterion benchmarks for `hse-core` live under `benches/`.
