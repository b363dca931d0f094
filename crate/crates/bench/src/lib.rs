//! Criterion benchmarks for the kernel routines and the training passes live in `benches/`.
