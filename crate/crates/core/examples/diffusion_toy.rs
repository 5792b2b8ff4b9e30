//! Train the latent denoiser on a two-cluster mixture in 2-D and sample
//! from it; the samples should split between both clusters.
//!
//! cargo run --release --example diffusion_toy -- [samples] [seed]

use cadcrafter::align::toy::{TwoClusterConfig, TwoClusterTask};

fn main() {
    let args: Vec<u64> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let n = args.first().copied().unwrap_or(500) as usize;
    let seed = args.get(1).copied().unwrap_or(0);
    let task = TwoClusterTask::new(TwoClusterConfig { seed, ..Default::default() });
    let store = task.pretrain();
    let zs = task.sample(&store, n, seed + 1);
    let mut bins = [0usize; 12];
    for z in &zs {
        let b = ((z[0] + 3.0) / 0.5).floor().clamp(0.0, 11.0) as usize;
        bins[b] += 1;
    }
    for (i, c) in bins.iter().enumerate() {
        let lo = -3.0 + 0.5 * i as f64;
        println!("{lo:+.1} .. {:+.1} {}", lo + 0.5, "#".repeat(c * 200 / n));
    }
    let right = zs.iter().filter(|z| z[0] >= 0.0).count();
    println!("{right} of {n} samples in the right-hand cluster");
}
