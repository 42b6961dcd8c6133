//! Trains a lung or infection model on generated data and reports held-out DSC.
//!
//! cargo run --release -p cxrseg-core --example train_synth -- [lung|infection] [n_per_class] [size] [epochs]

use std::time::Instant;

use cxrseg_core::io::synth_dataset;
use cxrseg_core::trainer::{evaluate_loss, train_with_progress};
use cxrseg_core::{build_model, Arch, ModelConfig, Sample, TrainConfig};

fn main() -> cxrseg_core::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let task = args.first().map(String::as_str).unwrap_or("lung").to_string();
    let n: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(67);
    let size: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(64);
    let epochs: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(40);
    let alpha: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(1e-4);

    let to_samples = |data: Vec<(String, cxrseg_core::io::SynthSample)>| -> Vec<Sample> {
        data.into_iter()
            .map(|(id, s)| {
                let target = if task == "lung" { s.lung } else { s.infection };
                Sample::new(id, s.image, target).unwrap()
            })
            .collect()
    };
    let all = to_samples(synth_dataset(n, size, 1));
    let split = all.len() * 4 / 5;
    let (train_set, val_set) = all.split_at(split);
    let test = to_samples(synth_dataset(17, size, 99));

    let model = build_model::<f32>(ModelConfig::new(Arch::Unet, 3, 8), 7)?;
    let cfg = TrainConfig { max_epochs: epochs, alpha, seed: 3, ..TrainConfig::default() };
    let t0 = Instant::now();
    let out = train_with_progress(model, train_set, val_set, &cfg, |r| {
        println!(
            "epoch {:3} train {:.4} val {:.4} dsc {:.4} lr {:.1e} {:.1}s",
            r.epoch,
            r.train_loss,
            r.val_loss,
            r.val_dsc,
            r.lr,
            t0.elapsed().as_secs_f64()
        )
    })?;
    let (loss, dsc) = evaluate_loss(&out.model, &test, 4)?;
    println!("held-out loss {loss:.4} dsc {dsc:.4} (best epoch {})", out.best_epoch);
    Ok(())
}
