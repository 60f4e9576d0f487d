//! Scores noisy predictions against ground truth and prints the
//! per-landmark PCK table and the mean normalized error.

use ddn::dataset::{generate_synthetic, SyntheticSpec};
use ddn::eval::{mean_normalized_error, pck};
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};

fn main() -> ddn::Result<()> {
    let spec = SyntheticSpec {
        train_count: 1,
        test_count: 200,
        ..Default::default()
    };
    let (_, test) = generate_synthetic(&spec)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    let noise = Normal::new(0.0, 2.0).expect("valid sigma");
    let truths: Vec<_> = test.iter().map(|s| s.truth.clone()).collect();
    let preds: Vec<_> = truths
        .iter()
        .map(|t| t.map(|p| [p[0] + noise.sample(&mut rng), p[1] + noise.sample(&mut rng)]))
        .collect();
    let norms: Vec<f64> = test.iter().map(|s| s.normalizer).collect();

    let report = pck(&preds, &truths, &norms, &[0.05, 0.1, 0.2])?;
    print!("{}", report.landmark_table());
    println!("mean normalized error {:.2}%", mean_normalized_error(&preds, &truths, &norms)?);
    Ok(())
}
