//! Regenerate the bundled toy image set.
//!
//! cargo run -p styleforge --example make_toyset -- crates/core/data/toy

use std::path::PathBuf;

use styleforge::toyset::write_toy_set;

fn main() -> styleforge::Result<()> {
    let root = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "crates/core/data/toy".into()));
    write_toy_set(&root.join("train"), 100, 48, 64, 2024)?;
    write_toy_set(&root.join("heldout"), 13, 48, 64, 4048)?;
    Ok(())
}
