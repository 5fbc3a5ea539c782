//! Rolls a seeded buoyant-smoke scene forward and prints conservation
//! diagnostics; writes a few PGM snapshots next to the binary output dir.
//!
//! ```text
//! cargo run --release --example fluid_rollout
//! ```

use mpdiff::fields::Field2D;
use mpdiff::fluidsim::{max_divergence, simulate, FluidInit};
use mpdiff::io::write_pgm;

fn com_y(f: &Field2D) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for y in 0..f.height() {
        for x in 0..f.width() {
            num += f.get(x, y) * y as f64;
            den += f.get(x, y);
        }
    }
    num / den
}

fn main() {
    let init = FluidInit::random(5);
    let states = simulate(&init, 200, 32, 0.05).unwrap();
    let m0 = states[0].buoyancy.sum();
    println!("step  mass-drift  com-y   max|div|");
    for s in (0..=200).step_by(40) {
        let st = &states[s];
        println!(
            "{s:4}  {:+8.3}%  {:6.2}  {:.2e}",
            (st.buoyancy.sum() - m0) / m0 * 100.0,
            com_y(&st.buoyancy),
            max_divergence(&st.velocity),
        );
    }
    let out = std::path::Path::new("target/fluid_rollout");
    std::fs::create_dir_all(out).unwrap();
    for (i, s) in [0usize, 100, 200].iter().enumerate() {
        let path = out.join(format!("buoyancy_{i}.pgm"));
        write_pgm(&path, &states[*s].buoyancy).unwrap();
        println!("wrote {}", path.display());
    }
}
