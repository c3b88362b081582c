//! Criterion benchmarks for the blockseq kernels live in `benches/`.
