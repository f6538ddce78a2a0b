//! End-to-end training on a reduced synthetic config, with before/after
//! evaluation. Finishes in about a minute; the full desk-scale defaults live
//! in the `focusseg train` command.
//!
//! Run with: cargo run --release --example train_synthetic

use focusseg::model::{build_model, ModelConfig};
use focusseg::train::{default_datasets, evaluate, train, TrainConfig};
use focusseg::Result;

fn main() -> Result<()> {
    let model_cfg = ModelConfig {
        input_size: [32, 32],
        encoder_channels: [8, 16, 32],
        head_channels: 32,
        decoder_lowlevel_channels: 8,
        ..ModelConfig::default()
    };
    let train_cfg = TrainConfig {
        epochs: 10,
        train_scenes: 64,
        val_scenes: 16,
        base_lr: 3e-4,
        ..TrainConfig::default()
    };

    let (train_set, val_set) = default_datasets(&model_cfg, &train_cfg)?;
    let init = build_model(&model_cfg, train_cfg.seed)?;
    let before = evaluate(&init, &val_set)?;
    println!("before training:\n{}", before.render_table());

    let result = train(&model_cfg, &train_cfg, &train_set, None)?;
    for e in &result.epoch_losses {
        println!(
            "epoch {:>2}: total {:.4} | ce {:.4} | dice {:.4} | sel {:.4}",
            e.epoch, e.total, e.ce, e.dice, e.selector
        );
    }

    let after = evaluate(&result.model, &val_set)?;
    println!("after training:\n{}", after.render_table());
    println!(
        "mIoU {:.4} -> {:.4}, boundary-band IoU {:.4} -> {:.4}",
        before.metrics.miou,
        after.metrics.miou,
        before.metrics.boundary_miou,
        after.metrics.boundary_miou
    );
    Ok(())
}
