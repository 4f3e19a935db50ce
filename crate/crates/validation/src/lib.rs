//! End-to-end acceptance criteria; see `tests/acceptance.rs`.
