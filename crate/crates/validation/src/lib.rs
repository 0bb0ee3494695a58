//! Acceptance suite for the whole toolkit; see `tests/acceptance.rs`.
//!
//! Kept in its own package so that cargo runs it after every other test
//! binary in the workspace.
