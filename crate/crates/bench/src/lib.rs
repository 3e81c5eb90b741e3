//! Criterion benchmarks for qvpf-core; see `benches/`.
