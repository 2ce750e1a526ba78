//! Generate a small synthetic dataset for trying out the CLI:
//!
//! ```text
//! cargo run -p diffinv-cli --example make_demo_data -- fixtures/demo
//! ```

use std::path::PathBuf;

use diffinv_cli::fixtures::write_demo_dataset;

fn main() {
    let dir = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("fixtures/demo"));
    let manifest = write_demo_dataset(
        &dir,
        &[3, 3, 2, 1],
        Some(&[
            "make the scene redder",
            "add a blue tint",
            "invert the colors",
            "rotate the color channels",
        ]),
        2024,
    )
    .expect("demo dataset generation failed");
    println!("wrote {}", manifest.display());
    println!("try: cargo run -p diffinv-cli -- run --dataset {} --count 3", manifest.display());
}
