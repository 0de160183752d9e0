//! Regenerates the bundled replay batch.
//!
//! `cargo run -p gradepipe-cli --example make_fixture_batch -- fixtures/quiz57`

#[path = "../tests/support/fixture_batch.rs"]
mod fixture_batch;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "fixtures/quiz57".to_string());
    let out = std::path::PathBuf::from(out);
    if out.exists() {
        std::fs::remove_dir_all(&out)?;
    }
    fixture_batch::generate(&out)?;
    println!("wrote {}", out.display());
    Ok(())
}
