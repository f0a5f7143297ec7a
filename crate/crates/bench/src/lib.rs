//! Criterion benchmarks for the vocspoof kernels; see `benches/`.
