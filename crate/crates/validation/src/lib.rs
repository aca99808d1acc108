//! Hosts the end-to-end acceptance suite in `tests/acceptance.rs`. It lives
//! in its own package so that `cargo test --workspace` runs it after every
//! other test target.
