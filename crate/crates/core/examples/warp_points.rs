//! Fits a thin-plate spline between two small point sets and warps a few
//! query points, at several bending weights.

use ddn::shape::LandmarkSet;
use ddn::tps::TpsFitter;

fn main() -> ddn::Result<()> {
    let src = LandmarkSet::new(vec![[10.0, 10.0], [50.0, 12.0], [30.0, 30.0], [12.0, 52.0], [52.0, 50.0]])?;
    // the centre point is pulled up and to the right, the rest stay put
    let dst = src.map(|p| if p == [30.0, 30.0] { [34.0, 26.0] } else { p });
    let query = LandmarkSet::new(vec![[30.0, 30.0], [20.0, 20.0], [40.0, 45.0], [0.0, 0.0]])?;

    for gamma in [0.0, 1.0, 100.0] {
        let fitter = TpsFitter::anchored(&src, gamma)?;
        let params = fitter.fit(&dst)?;
        let warped = fitter.warp(&dst, &query)?;
        println!("gamma {gamma:>5}: bending {:.4}", params.bending_at(&src));
        for (q, w) in query.points().iter().zip(warped.points()) {
            println!("  ({:5.1}, {:5.1}) -> ({:6.2}, {:6.2})", q[0], q[1], w[0], w[1]);
        }
    }
    Ok(())
}
