//! Fits the four melt-pool parameters to synthetic observations by
//! nonlinear least squares, with and without measurement noise.
//!
//! ```text
//! cargo run --release --example heat_calibration
//! ```

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mpdiff::fields::Field2D;
use mpdiff::thermal::{
    calibrate, meltpool_field, CalibrateOptions, GridSpec, HeatParams, LaserPath, Waypoint,
};

fn main() {
    let truth = HeatParams { rho: 1.1, kappa_x: 0.02, kappa_y: 0.013, c_n: 0.8 };
    let grid = GridSpec { width: 20, height: 20, extent: 1.0 };
    let path = LaserPath::new(vec![
        Waypoint { time: 0.0, x: 0.3, y: 0.35, power: 1.0 },
        Waypoint { time: 1.2, x: 0.7, y: 0.6, power: 1.0 },
    ])
    .unwrap();
    let phi0 = HeatParams { rho: 0.7, kappa_x: 0.035, kappa_y: 0.02, c_n: 0.5 };
    println!("truth:   {truth:?}");
    println!("initial: {phi0:?}");

    for noise in [0.0, 0.01] {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let obs: Vec<(f64, Field2D)> = [0.3, 0.6, 0.9, 1.1]
            .iter()
            .map(|&s| {
                let mut u = meltpool_field(&path, s, &truth, &grid, 0.005).unwrap();
                if noise > 0.0 {
                    u = u.map(|v| v + noise * rng.sample::<f64, _>(rand_distr::StandardNormal));
                }
                (s, u)
            })
            .collect();
        let out = calibrate(&obs, &path, &grid, &phi0, &CalibrateOptions::default()).unwrap();
        let p = out.params;
        let rel = |a: f64, b: f64| (a - b).abs() / b * 100.0;
        println!(
            "noise {noise:>4}: rho {:.4} ({:.1}%), kx {:.5} ({:.1}%), ky {:.5} ({:.1}%), cn {:.4} ({:.1}%), final loss {:.3e}, {} accepted steps",
            p.rho,
            rel(p.rho, truth.rho),
            p.kappa_x,
            rel(p.kappa_x, truth.kappa_x),
            p.kappa_y,
            rel(p.kappa_y, truth.kappa_y),
            p.c_n,
            rel(p.c_n, truth.c_n),
            out.final_loss,
            out.loss_trace.len(),
        );
    }
}
