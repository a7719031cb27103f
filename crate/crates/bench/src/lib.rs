//! Criterion benchmarks for the hot paths of `icpo-core`: the policy
//! forward pass, trajectory sampling, the mixed-policy loss with its
//! gradient, and one full training step. See `benches/core.rs`.
