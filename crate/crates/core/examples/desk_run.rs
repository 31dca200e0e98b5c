//! Trains one configuration on synthetic scenes and prints matched PA as it goes.
//!
//! cargo run --release -p infoseg-core --example desk_run -- key=value ...
//! Keys: est, assign, seed, steps, lr, p, batch, tau, every, iic, widths, cm

use infoseg::checkpoint::Checkpoint;
use infoseg::datasets::{generate_synthetic, ChannelStats, Dataset, ImageBatch, SyntheticSceneConfig};
use infoseg::evaluator::{evaluate_run, EvalOptions};
use infoseg::trainer::{batch_for_step, Objective, TrainConfig, Trainer};
use std::collections::HashMap;

fn main() {
    let args: HashMap<String, String> = std::env::args()
        .skip(1)
        .filter_map(|a| a.split_once('=').map(|(k, v)| (k.to_string(), v.to_string())))
        .collect();
    let get = |k: &str, d: &str| args.get(k).cloned().unwrap_or_else(|| d.to_string());
    let scenes = |seed, n| {
        let s = generate_synthetic(
            &SyntheticSceneConfig {
                seed,
                ..Default::default()
            },
            n,
        )
        .unwrap();
        Dataset {
            meta: s.meta,
            items: s.items,
        }
    };
    let train = scenes(0, 2000).images();
    let eval = scenes(1, 300);
    let w: usize = get("widths", "32").parse().unwrap();
    let config = TrainConfig {
        name: "desk".into(),
        estimator: serde_json::from_str(&format!("\"{}\"", get("est", "jsd"))).unwrap(),
        assignment: serde_json::from_str(&format!("\"{}\"", get("assign", "soft"))).unwrap(),
        seed: get("seed", "0").parse().unwrap(),
        max_steps: get("steps", "800").parse().unwrap(),
        lr: get("lr", "1e-3").parse().unwrap(),
        feature_dim: get("p", "32").parse().unwrap(),
        batch_size: get("batch", "32").parse().unwrap(),
        temperature: get("tau", "0.8").parse().unwrap(),
        objective: if args.contains_key("iic") {
            Objective::IicMi
        } else {
            Objective::Infoseg
        },
        block_a_widths: [w / 2, w, w, w],
        block_b_stages: 2,
        checkpoint_every: 0,
        ..Default::default()
    };
    let every: u64 = get("every", "100").parse().unwrap();
    let mut trainer = Trainer::new(config.clone(), 3, ChannelStats::compute(&train).unwrap()).unwrap();
    let t = std::time::Instant::now();
    let mut losses = Vec::new();
    while trainer.step() < config.max_steps {
        let idx = batch_for_step(train.len(), config.batch_size, config.seed, trainer.step()).unwrap();
        let refs: Vec<_> = idx.iter().map(|&i| &train[i]).collect();
        losses.push(
            trainer
                .train_step(&ImageBatch::from_images(&refs).unwrap())
                .unwrap()
                .loss,
        );
        if trainer.step() % every == 0 || trainer.step() == config.max_steps {
            let ckpt: Checkpoint = trainer.to_checkpoint().unwrap();
            let r = evaluate_run(
                &ckpt,
                &eval,
                &EvalOptions {
                    batch_size: 100,
                    ..Default::default()
                },
            )
            .unwrap();
            let tail = &losses[losses.len().saturating_sub(every as usize)..];
            println!(
                "step {:5} loss {:.4} pa {:.4} base {:.4} miou {:.4} ({:.0}s)",
                trainer.step(),
                tail.iter().sum::<f64>() / tail.len() as f64,
                r.metrics.pa,
                r.metrics.best_constant_pa,
                r.metrics.miou.unwrap_or(0.0),
                t.elapsed().as_secs_f64()
            );
            if args.contains_key("cm") {
                for p in 0..r.confusion.num_pred() {
                    let row: Vec<u64> = (0..r.confusion.num_true()).map(|t| r.confusion.get(p, t)).collect();
                    println!("    pred {p}: {row:?}");
                }
            }
        }
    }
}
