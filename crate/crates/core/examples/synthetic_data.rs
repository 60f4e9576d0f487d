//! Renders a handful of synthetic samples and writes them as PGM images
//! next to a points file per sample.
//!
//! Usage: `synthetic_data [OUT_DIR]`

use std::path::PathBuf;

use ddn::dataset::{generate_synthetic, write_points_text, SyntheticSpec};

fn main() -> ddn::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "synthetic_samples".into()));
    std::fs::create_dir_all(&out).map_err(|e| ddn::DdnError::io(&out, e))?;
    let spec = SyntheticSpec {
        train_count: 6,
        test_count: 2,
        ..Default::default()
    };
    let (train, test) = generate_synthetic(&spec)?;
    for (i, s) in train.iter().chain(&test).enumerate() {
        s.image.write_pnm(&out.join(format!("sample_{i:02}.pgm")))?;
        write_points_text(&out.join(format!("sample_{i:02}.pts")), &s.truth)?;
        println!("sample {i}: {}x{}, reference length {:.2} px", s.image.width(), s.image.height(), s.normalizer);
    }
    println!("wrote {} samples to {}", train.len() + test.len(), out.display());
    Ok(())
}
