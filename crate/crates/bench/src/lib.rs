//! Criterion benchmarks for the numeric kernels and training steps live in
//! `benches/`.
