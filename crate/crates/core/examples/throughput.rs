//! Rough single-core throughput numbers for the pieces that dominate
//! experiment runtime: masked forward+backward inferences and training
//! epochs.

use rapa_core::attacks::{objective_node, LossKind};
use rapa_core::data::{generate_shapeset, ShapeSetConfig};
use rapa_core::masking::{LiveMask, MaskPlan};
use rapa_core::nets::{
    build_model, forward, forward_on_tape, init_params, Arch, GradScope, Mode, ParamOverride,
};
use rapa_core::tape::Tape;
use std::time::Instant;

fn main() {
    let graph = build_model(Arch::preset("cnn_bn")).unwrap();
    let params = init_params(&graph, 1);
    let data = generate_shapeset(&ShapeSetConfig {
        samples_per_class: 8,
        ..Default::default()
    })
    .unwrap();
    let x = data.image_batch(0..1);
    let plan = MaskPlan::dense_norm(0.05).unwrap();

    // Unmasked attack inference: eval forward + input-gradient backward.
    let n = 500;
    let t0 = Instant::now();
    let mut sink = 0.0;
    for i in 0..n {
        let fp = forward(&graph, &params, &x, Mode::Eval, GradScope::Input).unwrap();
        let mut tape = fp.tape;
        let obj = objective_node(&mut tape, fp.logits, (i % 8) as usize, LossKind::Logit).unwrap();
        let g = tape.backward(obj).unwrap();
        sink += g.expect(fp.input).data()[0];
    }
    let dt = t0.elapsed().as_secs_f64();
    println!("plain inference: {:.3} ms ({:.0}/s)", dt / n as f64 * 1e3, n as f64 / dt);

    // Masked attack inference via the fused leaf path.
    let t0 = Instant::now();
    for i in 0..n {
        let live = LiveMask {
            plan,
            key: i as u64,
        };
        let mut tape = Tape::new();
        let x_id = tape.leaf(x.clone().with_grad()).unwrap();
        let wiring = forward_on_tape(
            &graph,
            &params,
            &mut tape,
            x_id,
            Mode::Eval,
            false,
            Some(&live as &dyn ParamOverride),
        )
        .unwrap();
        let obj = objective_node(&mut tape, wiring.logits, (i % 8) as usize, LossKind::Logit)
            .unwrap();
        let g = tape.backward(obj).unwrap();
        sink += g.expect(x_id).data()[0];
    }
    let dt = t0.elapsed().as_secs_f64();
    println!("masked inference: {:.3} ms ({:.0}/s)", dt / n as f64 * 1e3, n as f64 / dt);

    // Train-mode batch step (forward + param gradients), batch 32.
    let xb = data.image_batch(0..32);
    let t0 = Instant::now();
    let steps = 50;
    for _ in 0..steps {
        let fp = forward(&graph, &params, &xb, Mode::Train, GradScope::Params).unwrap();
        let mut tape = fp.tape;
        let lsm = tape.log_softmax(fp.logits).unwrap();
        let picked = tape.gather_rows(lsm, &vec![0usize; 32]).unwrap();
        let loss = tape.mean_all(picked).unwrap();
        let g = tape.backward(loss).unwrap();
        sink += g.expect(fp.param_nodes[0].1).data()[0];
    }
    let dt = t0.elapsed().as_secs_f64();
    println!(
        "train step (batch 32): {:.2} ms -> {:.1} s per epoch of 4096",
        dt / steps as f64 * 1e3,
        dt / steps as f64 * 128.0
    );
    eprintln!("(sink {sink:.3e})");
}
