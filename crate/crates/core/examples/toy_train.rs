//! Train the default model on the variance-separated toy task.

use std::time::Instant;

use hrvconformer::model::{ConformerConfig, HrvConformer};
use hrvconformer::train::{evaluate, train_with, variance_task, TrainConfig};

fn main() -> hrvconformer::Result<()> {
    let args: Vec<usize> = std::env::args().skip(1).map(|a| a.parse().unwrap()).collect();
    let batch = args.first().copied().unwrap_or(64);
    let epochs = args.get(1).copied().unwrap_or(300);
    let cfg = ConformerConfig::default();
    let train_ws = variance_task(16, 4, cfg.window_samples, "train", 1);
    let val_ws = variance_task(8, 4, cfg.window_samples, "val", 2);
    let (model, mut store) = HrvConformer::build(cfg, 0)?;
    let tc = TrainConfig {
        batch,
        epochs,
        eval_every: 10,
        ..TrainConfig::default()
    };
    let t = Instant::now();
    let out = train_with(&model, &mut store, &train_ws, &val_ws, &tc, |r| {
        println!(
            "epoch {:4} lr {:.2e} loss {:.4} acc {:.3} val_auc {:.3} ({:.1}s)",
            r.epoch,
            r.lr,
            r.train_loss,
            r.train_acc,
            r.val_epoch_auc,
            t.elapsed().as_secs_f64()
        );
    })?;
    let ev = evaluate(&model, &store, &train_ws, 64, true)?;
    println!("final train window acc {:.3}", ev.metrics.window_acc);
    let ev = evaluate(&model, &out.best, &val_ws, 64, true)?;
    println!("best eval {} val {:?}", out.best_eval, ev.metrics);
    Ok(())
}
