//! Score perturbed copies of generated sequences against the originals with
//! the reconstruction accuracies, invalid rate and Chamfer distance.
//!
//! cargo run --release --example evaluate_metrics -- [items] [level shift]

use cadcrafter::cad::{generate_random_sequence, CadSequence, Command, GeneratorConfig};
use cadcrafter::metrics::{aggregate, evaluate_item, EvalConfig};

fn shift(seq: &CadSequence, by: i16) -> CadSequence {
    let cmds = seq
        .logical()
        .iter()
        .map(|c| {
            let mut pv = *c.params();
            for &s in c.kind().used_slots().iter().filter(|s| s.is_continuous()) {
                pv.set(s, (c.level(s) + by).clamp(0, s.max_level()));
            }
            Command::from_params(c.kind(), pv).expect("clamped level")
        })
        .collect();
    CadSequence::new(cmds).expect("same grammar")
}

fn main() {
    let args: Vec<i64> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let n = args.first().copied().unwrap_or(32) as u64;
    let by = args.get(1).copied().unwrap_or(2) as i16;
    let cfg = EvalConfig::default();
    let items: Vec<_> = (0..n)
        .map(|i| {
            let gt = generate_random_sequence(i, &GeneratorConfig::default()).expect("generator");
            evaluate_item(&format!("item_{i:04}"), &shift(&gt, by), &gt, &cfg)
        })
        .collect();
    println!("{}", aggregate(&items, &cfg).expect("non-empty").to_table());
}
