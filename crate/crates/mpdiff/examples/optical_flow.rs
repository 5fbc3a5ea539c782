//! Dense flow estimation on a known displacement, plus the flow-residual
//! consistency score that the thermal experiment optimizes.
//!
//! ```text
//! cargo run --release --example optical_flow
//! ```

use mpdiff::fields::{warp, Field2D, Mask2D, VelocityField2D};
use mpdiff::metrics::consistency_score;
use mpdiff::thermal::{estimate_flow, FlowOptions};

fn main() {
    let prev = Field2D::from_fn(24, 24, |x, y| {
        let (fx, fy) = (x as f64 / 24.0, y as f64 / 24.0);
        (-((fx - 0.45).powi(2) + (fy - 0.55).powi(2)) / 0.02).exp()
            + 0.5 * (-((fx - 0.7).powi(2) + (fy - 0.3).powi(2)) / 0.01).exp()
    });
    let truth = VelocityField2D::new(
        Field2D::constant(24, 24, 0.8),
        Field2D::constant(24, 24, -0.4),
    )
    .unwrap();
    let next = warp(&prev, &truth, 1.0).unwrap();

    let est = estimate_flow(&prev, &next, &FlowOptions::default()).unwrap();
    let mut sx = 0.0;
    let mut sy = 0.0;
    let mut n = 0.0;
    for y in 2..22 {
        for x in 2..22 {
            if prev.get(x, y) > 0.1 {
                sx += est.vx.get(x, y);
                sy += est.vy.get(x, y);
                n += 1.0;
            }
        }
    }
    println!("true displacement  ( 0.80, -0.40) cells/frame");
    println!("estimated (signal) ({:+.2}, {:+.2}) cells/frame", sx / n, sy / n);

    let mask = Mask2D::full(24, 24);
    let cs_true =
        consistency_score(&[prev.clone(), next.clone()], std::slice::from_ref(&truth), std::slice::from_ref(&mask))
            .unwrap();
    let cs_est = consistency_score(&[prev, next], &[est], &[mask]).unwrap();
    println!("consistency score: true flows {cs_true:.2e}, estimated flows {cs_est:.4}");
}
