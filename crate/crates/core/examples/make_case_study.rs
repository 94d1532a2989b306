//! Writes the synthetic case-study CSV: n = 1000 rows of
//! `y = 1 + 0.5 x1 + sin(2π x2) + tanh(x3 x4) + ε`, `ε ~ N(0, 0.5²)`.
//!
//! Usage: `cargo run --example make_case_study -- <out.csv>`

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn main() {
    let out = std::env::args().nth(1).unwrap_or_else(|| "case_study/data.csv".into());
    let mut rng = ChaCha8Rng::seed_from_u64(20240501);
    let noise = Normal::new(0.0, 0.5).expect("valid sd");
    let mut text = String::from("y,x1,x2,x3,x4\n");
    for _ in 0..1000 {
        let x1: f64 = rng.random_range(-1.0..1.0);
        let x2: f64 = rng.random_range(0.0..1.0);
        let x3: f64 = rng.random_range(-2.0..2.0);
        let x4: f64 = rng.random_range(-2.0..2.0);
        let y = 1.0 + 0.5 * x1 + (2.0 * std::f64::consts::PI * x2).sin() + (x3 * x4).tanh() + noise.sample(&mut rng);
        text.push_str(&format!("{y},{x1},{x2},{x3},{x4}\n"));
    }
    std::fs::write(&out, text).expect("write csv");
}
