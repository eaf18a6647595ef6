//! Criterion benchmarks for the alignment stages.
//!
//! Run with `cargo bench -p crackalign-bench`. The perturbation grid sweep
//! (accuracy rather than speed) is `crackalign bench` on the command line.
