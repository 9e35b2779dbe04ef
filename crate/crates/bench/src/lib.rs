//! Criterion benchmarks for `crd-core`. Run with `cargo bench -p crd-bench`.
