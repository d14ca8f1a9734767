//! Criterion benchmarks of the assembly, eigensolver, site-energy and force kernels; see `benches/`.
