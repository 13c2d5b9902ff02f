//! Acceptance checks for `btotvc`. Everything lives in `tests/acceptance.rs`;
//! run it with `cargo test -p btotvc-validation -- --nocapture` for detail.
