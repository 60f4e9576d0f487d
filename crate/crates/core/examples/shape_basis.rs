//! Builds the PCA shape basis from the synthetic training shapes, reports
//! the retained energy and round-trips one shape through the coefficients.

use ddn::dataset::{generate_synthetic, SyntheticSpec};
use ddn::shape::{build_shape_basis, decode_shape, DEFAULT_ENERGY_FRACTION};

fn main() -> ddn::Result<()> {
    let spec = SyntheticSpec {
        train_count: 300,
        test_count: 10,
        ..Default::default()
    };
    let (train, test) = generate_synthetic(&spec)?;
    let shapes: Vec<_> = train.iter().map(|s| s.truth.clone()).collect();
    let basis = build_shape_basis(&shapes, DEFAULT_ENERGY_FRACTION)?;
    println!("{} landmarks, rank {}", basis.landmark_count(), basis.rank());
    println!("coefficient scales {:?}", basis.coefficient_scales(shapes.len()));

    let truth = &test[0].truth;
    let coeffs = basis.project(truth)?;
    let back = decode_shape(&basis, &coeffs)?;
    println!("held-out shape coefficients {:?}", coeffs.0);
    println!("largest projection residual {:.3} px", back.max_distance(truth));
    Ok(())
}
