//! Criterion benchmarks for the hot kernels live under `benches/`; this crate
//! has no library code of its own.
