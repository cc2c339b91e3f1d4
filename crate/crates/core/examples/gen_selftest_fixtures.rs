//! Regenerates the embedded selftest fixtures.
//!
//! `cargo run -p d2feat --example gen_selftest_fixtures [DIR]`

fn main() -> d2feat::Result<()> {
    let dir = std::env::args()
        .nth(1)
        .unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/fixtures/selftest").to_string());
    d2feat::selftest::write_fixtures(&dir)?;
    println!("wrote fixtures to {dir}");
    Ok(())
}
