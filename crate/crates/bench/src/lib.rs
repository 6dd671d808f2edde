//! Criterion benchmarks over `electric-core`; see `benches/`.
