//! Criterion benchmarks for the hot paths: convolution kernels, full edge
//! forward passes, and wire-format encode/decode. See `benches/kernels.rs`;
//! this crate intentionally exports nothing.
