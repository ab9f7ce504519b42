//! Builds a small conv -> group norm -> swish -> mse graph, backpropagates,
//! and compares against central finite differences.
//!
//!     cargo run --release --example autodiff

use anyhow::Result;
use poregen::gradcore::{grad_check, op_suite, Array, GradCheckOptions};
use rand::{Rng, SeedableRng};

fn main() -> Result<()> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let mut rand_array = |shape: &[usize]| {
        let n = shape.iter().product();
        Array::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    };
    let x = rand_array(&[2, 4, 4, 4, 4]);
    let w = rand_array(&[4, 4, 3, 3, 3]);
    let gamma = rand_array(&[4]);
    let beta = rand_array(&[4]);
    let target = rand_array(&[2, 4, 2, 2, 2]);

    let report = grad_check(
        |g, v| {
            let y = g.conv3d(v[0], v[1], None, 2)?;
            let y = g.group_norm(y, v[2], v[3], 2, 1e-5)?;
            let y = g.swish(y)?;
            let t = g.constant(target.clone());
            g.mse(y, t)
        },
        &[x, w, gamma, beta],
        &GradCheckOptions {
            max_elements: Some(40),
            ..Default::default()
        },
    )?;
    println!("conv block: max relative error {:.2e} over {} elements", report.max_rel_error, report.checked);

    println!("\nper-op suite:");
    for (name, r) in op_suite(7)? {
        println!("  {name:<24} {:.2e}", r.max_rel_error);
    }
    Ok(())
}
