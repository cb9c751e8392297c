//! Forward-simulates the mean-reverting SDE for a scalar state and compares
//! the sample moments with the closed-form Gaussian kernel.
//!
//! cargo run --release --example simulate_kernel -- [n_paths] [n_steps] [plot.svg]

use std::path::Path;

use emoshift::eval::moments_plot;
use emoshift::sde::{forward_moment_check, NoiseSchedule};

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let n_paths: usize = args.get(1).map(|s| s.parse()).transpose()?.unwrap_or(10_000);
    let n_steps: usize = args.get(2).map(|s| s.parse()).transpose()?.unwrap_or(1000);

    let schedule = NoiseSchedule::new(0.05, 20.0, 0.01, 1.0)?;
    let (x0, y) = (2.0, 0.0);
    let (checks, track) = forward_moment_check(x0, y, &schedule, n_paths, n_steps, &[0.25, 0.5, 0.75, 1.0], 1)?;

    println!("   t   kernel mean  sim mean   kernel var  sim var     z");
    for c in &checks {
        println!(
            "{:5.2}  {:10.5}  {:9.5}  {:10.5}  {:8.5}  {:5.2}",
            c.t, c.kernel_mean, c.sim_mean, c.kernel_var, c.sim_var, c.z()
        );
    }
    let worst = checks.iter().map(|c| c.z()).fold(0.0, f64::max);
    println!("worst deviation {worst:.2} standard errors");

    if let Some(path) = args.get(3) {
        moments_plot(&track, &schedule, x0, y, Path::new(path))?;
        println!("wrote {path}");
    }
    Ok(())
}
