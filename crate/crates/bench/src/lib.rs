//! Criterion benchmarks for the parsing, execution, decoding and tagging paths live in `benches/`.
