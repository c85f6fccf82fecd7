//! Criterion benchmarks for the registration, field and forest stages.
