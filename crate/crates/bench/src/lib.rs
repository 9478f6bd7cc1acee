//! Criterion benchmarks for the sparse attention kernel and tiled encoding.
//! Run with `cargo bench -p vfi-bench`.
