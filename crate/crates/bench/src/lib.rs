//! Criterion benchmarks for the mixed-precision GEMM engine live in
//! `benches/`; run them with `cargo bench -p mixquant-bench`.
