//! Criterion benchmarks for the inference kernels live in `benches/`.
