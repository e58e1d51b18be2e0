//! Quick probe of the transfer experiment: baseline (MI+TI+RDI) vs the
//! masked attack at equal compute, small sample count.

use rapa_core::attacks::{run_attack, AttackConfig, LossKind, TransformKind, TransformSpec};
use rapa_core::data::{assign_targets, generate_shapeset, ShapeSetConfig, TargetRule};
use rapa_core::masking::MaskPlan;
use rapa_core::nets::{
    argmax, build_model, init_params, logits_batch, train, Arch, ModelGraph, ParamStore,
    TrainHyper, NUM_CLASSES, PRESETS,
};
use rapa_core::tensor::Tensor;
use std::time::Instant;

fn asr(graph: &ModelGraph, params: &ParamStore, x_adv: &[f64], y_tar: &[u8]) -> f64 {
    let n = y_tar.len();
    let quant: Vec<f64> = x_adv.iter().map(|v| *v as f32 as f64).collect();
    let batch = Tensor::new(vec![n, 1, 16, 16], quant).unwrap();
    let out = logits_batch(graph, params, &batch).unwrap();
    let hits = (0..n)
        .filter(|&i| {
            argmax(&out.data()[i * NUM_CLASSES..(i + 1) * NUM_CLASSES]) == y_tar[i] as usize
        })
        .count();
    hits as f64 / n as f64
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let n_eval: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(64);
    let t_iters: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(300);
    let sigma: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(0.1);
    let p: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(0.05);

    let data = generate_shapeset(&ShapeSetConfig {
        samples_per_class: 640,
        noise_sigma: sigma,
        max_translation: 2,
        seed: 101,
    })
    .unwrap();
    let (train_set, test_set) = data.split_per_class(512).unwrap();

    let mut models = Vec::new();
    for (i, preset) in PRESETS.iter().enumerate() {
        let graph = build_model(Arch::preset(preset)).unwrap();
        let params = init_params(&graph, 11 + i as u64);
        let hyper = TrainHyper {
            epochs: 6,
            batch_size: 32,
            learning_rate: 0.1,
            seed: 11 + i as u64,
        };
        let (trained, m) = train(&graph, &params, &train_set, Some(&test_set), &hyper).unwrap();
        println!("{preset}: test acc {:.4}", m.final_test_acc);
        models.push((preset.to_string(), graph, trained));
    }

    let eval = assign_targets(&test_set.subset(&(0..n_eval).map(|i| i * 16 % 1024 + i / 64).collect::<Vec<_>>()), TargetRule::NextClass, 0);

    let base = AttackConfig {
        eps: 16.0 / 255.0,
        alpha: 2.0 / 255.0,
        iterations: t_iters,
        inferences: 5,
        mu: 1.0,
        loss: LossKind::Logit,
        transform: TransformSpec::with_kind(TransformKind::Rdi),
        ti_kernel: 5,
        mask_plan: None,
        seed: 7,
        snapshot_every: 0,
    };
    let mut rapa = base.clone();
    rapa.mask_plan = Some(MaskPlan::dense_norm(p).unwrap());

    for (name, cfg) in [("baseline", &base), ("rapa", &rapa)] {
        let t0 = Instant::now();
        let batch = run_attack(&models[0].1, &models[0].2, &eval, cfg).unwrap();
        let y_tar = batch.y_tar.clone();
        print!("{name:8} ({:5.1}s): ", t0.elapsed().as_secs_f64());
        let mut sum = 0.0;
        for (mname, g, pstore) in &models {
            let a = asr(g, pstore, &batch.x_adv, &y_tar);
            if mname != "cnn_bn" {
                sum += a;
            }
            print!("{mname} {a:.3}  ");
        }
        println!("| transfer mean {:.3}", sum / 3.0);
    }
}
