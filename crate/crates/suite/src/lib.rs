//! Home of the `acceptance` test target; run it with
//! `cargo test -p adaface-suite --test acceptance`.
