//! Trains the synthetic cluster benchmark with and without the second
//! stage and prints the RF→BC gap for each seed.
//!
//! cargo run --release --example gap_benchmark [seed...]

use tqn::data::gen_clusters;
use tqn::pipeline::{run_experiment, EvalConfig, Stage, TrainConfig};

fn main() -> tqn::Result<()> {
    let seeds: Vec<u64> = std::env::args()
        .skip(1)
        .map(|s| s.parse().expect("seed"))
        .collect();
    let seeds = if seeds.is_empty() {
        vec![1, 2, 3]
    } else {
        seeds
    };
    for seed in seeds {
        let data = gen_clusters(8, 32, 100, 0.05, seed)?;
        let mut cfg = TrainConfig {
            seed,
            ..TrainConfig::default()
        };
        let (_, two) = run_experiment(&data, &cfg, &EvalConfig::default())?;
        cfg.stage2.epochs = 0;
        let (_, one) = run_experiment(&data, &cfg, &EvalConfig::default())?;
        let (e1, e2) = (one.eval.unwrap(), two.eval.unwrap());
        let s1 = two.stage_curve(Stage::Triplet);
        let s2 = two.stage_curve(Stage::Quantization);
        println!(
            "seed {seed}: stage1-only rf={:.4} bc={:.4} drop={:+.4} | two-stage rf={:.4} bc={:.4} drop={:+.4}",
            e1.rf, e1.bc, e1.drop_rel, e2.rf, e2.bc, e2.drop_rel
        );
        println!(
            "  stage1 Lt {:.4}->{:.4} Ltqn {:.4}->{:.4} | stage2 Ltqn {:.4}->{:.4}",
            s1[0].triplet_loss,
            s1.last().unwrap().triplet_loss,
            s1[0].tqn_loss,
            s1.last().unwrap().tqn_loss,
            s2[0].tqn_loss,
            s2.last().unwrap().tqn_loss
        );
    }
    Ok(())
}
