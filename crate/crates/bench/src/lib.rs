//! Benchmark-only crate; see `benches/engines.rs` for the measurements.
//! Kept as a library stub so the workspace member builds on its own.
