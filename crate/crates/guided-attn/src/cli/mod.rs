//! Command-line entry points.

/// Placeholder during bring-up.
pub fn run() -> i32 {
    0
}
