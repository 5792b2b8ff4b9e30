//! The whole pipeline at toy scale: corpus generation, the four training
//! stages, sampling before and after preference tuning, and evaluation.
//!
//! cargo run --release --example pipeline_smoke -- [run dir]

use cadcrafter::pipeline::{cmd_eval, cmd_generate, cmd_sample, cmd_train, Condition, PipelineConfig, Run, SampleRequest, Stage};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let root = std::env::args().nth(1).unwrap_or_else(|| "toy-run".into());
    let run = Run::new(&root);
    let cfg = PipelineConfig::toy();
    let g = cmd_generate(&cfg, &run).expect("generate");
    println!("corpus: {}", serde_json::to_string(&g).expect("plain data"));
    for st in [Stage::Ae, Stage::DiffusionMv, Stage::DiffusionSv, Stage::Dpo] {
        let r = cmd_train(st, &cfg, &run, false).expect("train");
        println!("{st}: {:.0}s {}", r.seconds, r.summary);
    }
    let req = |stage| SampleRequest {
        stage,
        condition: Some(Condition::Single),
        items: cfg.sample.items,
        per_item: 1,
        seed: None,
        export_obj: true,
    };
    let pre = cmd_sample(&cfg, &run, &req(Stage::DiffusionSv)).expect("sample");
    let post = cmd_sample(&cfg, &run, &req(Stage::Dpo)).expect("sample");
    println!("invalid rate before tuning {:.3}, after {:.3}", pre.invalid_rate, post.invalid_rate);
    let report = cmd_eval(&run.samples(Stage::Dpo, Condition::Single).join("s0"), &run.sequences(), &cfg).expect("eval");
    println!("{}", report.to_table());
    println!("run written to {root}");
}
