//! Minimal white-box attack diagnostic: prints the objective trace.

use rapa_core::attacks::{run_attack, AttackConfig};
use rapa_core::data::{assign_targets, generate_shapeset, ShapeSetConfig, TargetRule};
use rapa_core::nets::{
    argmax, build_model, init_params, logits, train, Arch, TrainHyper,
};
use rapa_core::tensor::Tensor;

fn main() {
    let data = generate_shapeset(&ShapeSetConfig {
        samples_per_class: 80,
        ..Default::default()
    })
    .unwrap();
    let (train_set, test_set) = data.split_per_class(64).unwrap();
    let graph = build_model(Arch::preset("cnn_bn")).unwrap();
    let params = init_params(&graph, 11);
    let hyper = TrainHyper {
        epochs: 6,
        batch_size: 32,
        learning_rate: 0.1,
        seed: 11,
    };
    let (trained, m) = train(&graph, &params, &train_set, Some(&test_set), &hyper).unwrap();
    println!("test acc {:.4}", m.final_test_acc);

    let eval = assign_targets(&test_set.subset(&[0, 20, 40, 60]), TargetRule::NextClass, 0);
    let cfg = AttackConfig::ifgsm(16.0 / 255.0, 2.0 / 255.0, 100);
    let batch = run_attack(&graph, &trained, &eval, &cfg).unwrap();

    for i in 0..eval.len() {
        let tr = &batch.traces[i];
        println!(
            "sample {i}: y={} y_tar={} obj[0]={:+.3} obj[25]={:+.3} obj[99]={:+.3} glinf[0]={:.2e}",
            batch.y[i],
            batch.y_tar[i],
            tr[0].objective,
            tr[25].objective,
            tr[99].objective,
            tr[0].grad_linf
        );
        let z = logits(
            &graph,
            &trained,
            &Tensor::new(vec![256], batch.adv_image(i).to_vec()).unwrap(),
        )
        .unwrap();
        println!(
            "  pred {} logits {:?}",
            argmax(z.data()),
            z.data().iter().map(|v| (v * 10.0).round() / 10.0).collect::<Vec<_>>()
        );
        let delta: f64 = batch
            .adv_image(i)
            .iter()
            .zip(batch.clean_image(i))
            .map(|(a, c)| (a - c).abs())
            .fold(0.0, f64::max);
        println!("  max |delta| = {delta:.4}  (eps {:.4})", 16.0 / 255.0);
    }
}
