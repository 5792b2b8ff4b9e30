//! Train the sequence autoencoder on a procedural corpus and report
//! reconstruction accuracy.
//!
//! cargo run --release --example train_autoencoder -- [corpus size] [max epochs]

use cadcrafter::autodiff::ParamStore;
use cadcrafter::cad::{generate_random_sequence, GeneratorConfig};
use cadcrafter::models::{init_autoencoder, train_autoencoder, AeTrainConfig, ModelConfig};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let n = args.first().copied().unwrap_or(512);
    let epochs = args.get(1).copied().unwrap_or(400);
    let corpus: Vec<_> = (0..n as u64).map(|s| generate_random_sequence(s, &GeneratorConfig::default()).unwrap()).collect();
    let lens: usize = corpus.iter().map(|s| s.logical_length()).sum();
    println!("corpus: {n} sequences, mean length {:.1}", lens as f64 / n as f64);

    let cfg = ModelConfig::default();
    let mut store = ParamStore::new();
    init_autoencoder(&mut store, &cfg, 0);
    println!("autoencoder parameters: {}", store.num_scalars());
    let tc = AeTrainConfig { max_epochs: epochs, ..Default::default() };
    let log = train_autoencoder(&mut store, &cfg, &corpus, &tc);
    println!(
        "epochs {} steps {} in {:.0}s: acc_cmd {:.2}% acc_para {:.2}%",
        log.epochs, log.steps, log.seconds, 100.0 * log.acc_cmd, 100.0 * log.acc_para
    );
}
