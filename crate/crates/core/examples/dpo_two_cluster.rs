//! Preference tuning on a two-cluster latent toy where only one cluster
//! decodes to a valid solid.
//!
//! cargo run --release --example dpo_two_cluster -- [seed]

use cadcrafter::align::toy::{window_means, TwoClusterConfig, TwoClusterTask};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let seed = std::env::args().nth(1).map_or(0, |s| s.parse().expect("seed must be an integer"));
    let task = TwoClusterTask::new(TwoClusterConfig { seed, ..Default::default() });
    let out = task.run().expect("two-cluster run");
    println!("pairs {}", out.pairs);
    println!("valid fraction {:.3} -> {:.3}", out.pre_valid_fraction, out.post_valid_fraction);
    let w: Vec<String> = window_means(&out.log.losses, 10).iter().map(|l| format!("{l:.4}")).collect();
    println!("loss by 10-step window: {}", w.join(" "));
    println!("{:.1}s", out.log.seconds);
}
