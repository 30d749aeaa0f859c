//! Nothing here: this crate only exists to host the criterion benchmarks
//! under `benches/`. See `benches/primitives.rs`.
