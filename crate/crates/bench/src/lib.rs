//! Benchmark-only package; see `benches/estimators.rs`.
