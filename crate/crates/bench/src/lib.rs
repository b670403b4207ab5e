//! Criterion benchmarks for the gridprompt pipeline; see `benches/`.
