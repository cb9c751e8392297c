//! Runs the reverse-time sampler with an exact score for a Gaussian source,
//! comparing the two diffusion coefficients.
//!
//! cargo run --release --example reverse_solve -- [n_paths] [n_steps]

use emoshift::inference::{reverse_solve, ReverseDiffusion};
use emoshift::sde::NoiseSchedule;
use ndarray::Array2;

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let n: u64 = args.get(1).map(|s| s.parse()).transpose()?.unwrap_or(5000);
    let steps: usize = args.get(2).map(|s| s.parse()).transpose()?.unwrap_or(200);

    let s = NoiseSchedule::default();
    let y = Array2::zeros((1, 1));
    // Source N(2, 1) diffused towards Y = 0 stays Gaussian: mean 2α, variance α² + σ².
    let score = |x: &Array2<f64>, t: f64| {
        let a = s.alpha(t)?;
        let v = a * a + s.variance(t)?;
        Ok(x.mapv(|x| -(x - 2.0 * a) / v))
    };

    println!("target: mean 2.000, variance 1.000");
    for diffusion in [ReverseDiffusion::Sqrt, ReverseDiffusion::Beta] {
        let mut finals = Vec::with_capacity(n as usize);
        for seed in 0..n {
            finals.push(reverse_solve(&y, &score, &s, steps, diffusion, seed)?[[0, 0]]);
        }
        let mean = finals.iter().sum::<f64>() / n as f64;
        let var = finals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        println!("{diffusion:>7}: mean {mean:.3}, variance {var:.3}");
    }
    Ok(())
}
