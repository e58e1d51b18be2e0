//! Gradient verification: reverse-mode backward against central finite
//! differences, for every primitive and for full model losses.
//!
//! The probe step is h = 1e-4 and the acceptance metric is
//! max_i |ad_i - fd_i| / max(1, max_i |fd_i|) < 1e-5.
//! ReLU inputs are kept away from the kink, where the finite-difference
//! oracle itself is invalid.

use rapa_core::attacks::{objective_node, LossKind};
use rapa_core::data::{generate_shapeset, ShapeSetConfig};
use rapa_core::nets::{
    build_model, forward, init_params, Arch, GradScope, Mode, ParamStore,
};
use rapa_core::rng::{stream_key, Rng};
use rapa_core::tape::{finite_diff_grad, NodeId, Tape};
use rapa_core::tensor::Tensor;

const H: f64 = 1e-4;
const TOL: f64 = 1e-5;
const INSTANCES: usize = 10;

fn rel_err(ad: &[f64], fd: &[f64]) -> f64 {
    let denom = fd.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    ad.iter()
        .zip(fd)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
        / denom
}

fn rand_tensor(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| lo + (hi - lo) * rng.uniform()).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Random values bounded away from zero (for ReLU inputs).
fn rand_tensor_off_zero(rng: &mut Rng, shape: &[usize], margin: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let mag = margin + rng.uniform();
            if rng.uniform() < 0.5 {
                -mag
            } else {
                mag
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Checks backward vs finite differences for each leaf in `grad_leaves`.
/// `build` wires leaves (by tape id) into a scalar output and must be
/// deterministic given the leaf values.
fn grad_check<F>(name: &str, leaves: &[Tensor], grad_leaves: &[usize], build: F)
where
    F: Fn(&mut Tape, &[NodeId]) -> NodeId,
{
    let eval = |vals: &[Tensor]| -> f64 {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = vals
            .iter()
            .map(|t| tape.leaf(t.clone()).unwrap())
            .collect();
        let out = build(&mut tape, &ids);
        tape.value(out).item()
    };

    let mut tape = Tape::new();
    let ids: Vec<NodeId> = leaves
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let t = if grad_leaves.contains(&i) {
                t.clone().with_grad()
            } else {
                t.clone()
            };
            tape.leaf(t).unwrap()
        })
        .collect();
    let out = build(&mut tape, &ids);
    assert_eq!(tape.value(out).numel(), 1, "{name}: output must be scalar");
    let grads = tape.backward(out).unwrap();

    for &li in grad_leaves {
        let ad = grads.expect(ids[li]).data().to_vec();
        let fd = finite_diff_grad(
            |v| {
                let mut vals = leaves.to_vec();
                vals[li] = Tensor::new(leaves[li].shape().to_vec(), v.to_vec()).unwrap();
                eval(&vals)
            },
            leaves[li].data(),
            H,
        )
        .unwrap();
        let err = rel_err(&ad, &fd);
        assert!(
            err < TOL,
            "{name}: leaf {li} rel err {err:.3e} exceeds {TOL:.0e}"
        );
    }
}

#[test]
fn elementwise_and_scale_ops() {
    for k in 0..INSTANCES as u64 {
        let mut rng = Rng::new(stream_key(&[1, k]));
        let a = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
        let w = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
        grad_check("add", &[a.clone(), b.clone(), w.clone()], &[0, 1], |t, ids| {
            let y = t.add(ids[0], ids[1]).unwrap();
            let prod = t.mul(y, ids[2]).unwrap();
            t.sum_all(prod).unwrap()
        });
        grad_check("sub", &[a.clone(), b.clone(), w.clone()], &[0, 1], |t, ids| {
            let y = t.sub(ids[0], ids[1]).unwrap();
            let prod = t.mul(y, ids[2]).unwrap();
            t.sum_all(prod).unwrap()
        });
        grad_check("mul", &[a.clone(), b.clone(), w.clone()], &[0, 1], |t, ids| {
            let y = t.mul(ids[0], ids[1]).unwrap();
            let prod = t.mul(y, ids[2]).unwrap();
            t.sum_all(prod).unwrap()
        });
        grad_check("scale", &[a.clone(), w.clone()], &[0], |t, ids| {
            let y = t.scale(ids[0], -1.7).unwrap();
            let prod = t.mul(y, ids[1]).unwrap();
            t.sum_all(prod).unwrap()
        });
    }
}

#[test]
fn matmul_and_bias_ops() {
    for k in 0..INSTANCES as u64 {
        let mut rng = Rng::new(stream_key(&[2, k]));
        let a = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
        let b = rand_tensor(&mut rng, &[4, 2], -1.0, 1.0);
        let w = rand_tensor(&mut rng, &[3, 2], -1.0, 1.0);
        grad_check("matmul", &[a, b, w], &[0, 1], |t, ids| {
            let y = t.matmul(ids[0], ids[1]).unwrap();
            let prod = t.mul(y, ids[2]).unwrap();
            t.sum_all(prod).unwrap()
        });

        let x = rand_tensor(&mut rng, &[3, 5], -1.0, 1.0);
        let bias = rand_tensor(&mut rng, &[5], -1.0, 1.0);
        let w = rand_tensor(&mut rng, &[3, 5], -1.0, 1.0);
        grad_check("bias_add_rows", &[x, bias, w], &[0, 1], |t, ids| {
            let y = t.bias_add_rows(ids[0], ids[1]).unwrap();
            let prod = t.mul(y, ids[2]).unwrap();
            t.sum_all(prod).unwrap()
        });

        let x = rand_tensor(&mut rng, &[2, 3, 4, 4], -1.0, 1.0);
        let bias = rand_tensor(&mut rng, &[3], -1.0, 1.0);
        let w = rand_tensor(&mut rng, &[2, 3, 4, 4], -1.0, 1.0);
        grad_check("bias_add_channels", &[x, bias, w], &[0, 1], |t, ids| {
            let y = t.bias_add_channels(ids[0], ids[1]).unwrap();
            let prod = t.mul(y, ids[2]).unwrap();
            t.sum_all(prod).unwrap()
        });
    }
}

#[test]
fn conv_pool_flatten_ops() {
    for k in 0..INSTANCES as u64 {
        let mut rng = Rng::new(stream_key(&[3, k]));
        let x = rand_tensor(&mut rng, &[2, 2, 5, 5], -1.0, 1.0);
        let kern = rand_tensor(&mut rng, &[3, 2, 3, 3], -1.0, 1.0);
        let w = rand_tensor(&mut rng, &[2, 3, 5, 5], -1.0, 1.0);
        grad_check("conv2d", &[x, kern, w], &[0, 1], |t, ids| {
            let y = t.conv2d(ids[0], ids[1], 1).unwrap();
            let prod = t.mul(y, ids[2]).unwrap();
            t.sum_all(prod).unwrap()
        });

        let x = rand_tensor(&mut rng, &[2, 3, 4, 4], -1.0, 1.0);
        let w = rand_tensor(&mut rng, &[2, 3, 2, 2], -1.0, 1.0);
        grad_check("avg_pool", &[x, w], &[0], |t, ids| {
            let y = t.avg_pool(ids[0], 2).unwrap();
            let prod = t.mul(y, ids[1]).unwrap();
            t.sum_all(prod).unwrap()
        });

        let x = rand_tensor(&mut rng, &[2, 3, 2, 2], -1.0, 1.0);
        let w = rand_tensor(&mut rng, &[2, 12], -1.0, 1.0);
        grad_check("flatten", &[x, w], &[0], |t, ids| {
            let y = t.flatten(ids[0]).unwrap();
            let prod = t.mul(y, ids[1]).unwrap();
            t.sum_all(prod).unwrap()
        });
    }
}

#[test]
fn relu_off_kink() {
    for k in 0..INSTANCES as u64 {
        let mut rng = Rng::new(stream_key(&[4, k]));
        // |x| >= 0.05 >> h keeps central differences valid.
        let x = rand_tensor_off_zero(&mut rng, &[3, 6], 0.05);
        let w = rand_tensor(&mut rng, &[3, 6], -1.0, 1.0);
        grad_check("relu", &[x, w], &[0], |t, ids| {
            let y = t.relu(ids[0]).unwrap();
            let prod = t.mul(y, ids[1]).unwrap();
            t.sum_all(prod).unwrap()
        });
    }
}

#[test]
fn normalization_ops() {
    for k in 0..INSTANCES as u64 {
        let mut rng = Rng::new(stream_key(&[5, k]));
        let x = rand_tensor(&mut rng, &[3, 2, 4, 4], -1.0, 1.0);
        let gamma = rand_tensor(&mut rng, &[2], 0.5, 1.5);
        let beta = rand_tensor(&mut rng, &[2], -0.5, 0.5);
        let w = rand_tensor(&mut rng, &[3, 2, 4, 4], -1.0, 1.0);

        grad_check(
            "batch_norm_train",
            &[x.clone(), gamma.clone(), beta.clone(), w.clone()],
            &[0, 1, 2],
            |t, ids| {
                let (y, _, _) = t.batch_norm_train(ids[0], ids[1], ids[2], 1e-5).unwrap();
                let prod = t.mul(y, ids[3]).unwrap();
                t.sum_all(prod).unwrap()
            },
        );

        let rm: Vec<f64> = (0..2).map(|_| rng.uniform() - 0.5).collect();
        let rv: Vec<f64> = (0..2).map(|_| 0.5 + rng.uniform()).collect();
        grad_check(
            "batch_norm_eval",
            &[x.clone(), gamma.clone(), beta.clone(), w.clone()],
            &[0, 1, 2],
            |t, ids| {
                let y = t
                    .batch_norm_eval(ids[0], ids[1], ids[2], &rm, &rv, 1e-5)
                    .unwrap();
                let prod = t.mul(y, ids[3]).unwrap();
                t.sum_all(prod).unwrap()
            },
        );

        grad_check(
            "layer_norm",
            &[x, gamma, beta, w],
            &[0, 1, 2],
            |t, ids| {
                let y = t.layer_norm(ids[0], ids[1], ids[2], 1e-5).unwrap();
                let prod = t.mul(y, ids[3]).unwrap();
                t.sum_all(prod).unwrap()
            },
        );

        // 2-d input path.
        let x2 = rand_tensor(&mut rng, &[4, 6], -1.0, 1.0);
        let g2 = rand_tensor(&mut rng, &[6], 0.5, 1.5);
        let b2 = rand_tensor(&mut rng, &[6], -0.5, 0.5);
        let w2 = rand_tensor(&mut rng, &[4, 6], -1.0, 1.0);
        grad_check("layer_norm_2d", &[x2, g2, b2, w2], &[0, 1, 2], |t, ids| {
            let y = t.layer_norm(ids[0], ids[1], ids[2], 1e-5).unwrap();
            let prod = t.mul(y, ids[3]).unwrap();
            t.sum_all(prod).unwrap()
        });
    }
}

#[test]
fn softmax_reduce_gather_ops() {
    for k in 0..INSTANCES as u64 {
        let mut rng = Rng::new(stream_key(&[6, k]));
        let x = rand_tensor(&mut rng, &[2, 5], -2.0, 2.0);
        let w = rand_tensor(&mut rng, &[2, 5], -1.0, 1.0);
        grad_check("softmax", &[x.clone(), w.clone()], &[0], |t, ids| {
            let y = t.softmax(ids[0]).unwrap();
            let prod = t.mul(y, ids[1]).unwrap();
            t.sum_all(prod).unwrap()
        });
        grad_check("log_softmax", &[x.clone(), w.clone()], &[0], |t, ids| {
            let y = t.log_softmax(ids[0]).unwrap();
            let prod = t.mul(y, ids[1]).unwrap();
            t.sum_all(prod).unwrap()
        });
        grad_check("mean_all", &[x.clone()], &[0], |t, ids| {
            t.mean_all(ids[0]).unwrap()
        });
        grad_check("sum_all", &[x.clone()], &[0], |t, ids| {
            t.sum_all(ids[0]).unwrap()
        });
        let idx = [(rng.below(5)) as usize, (rng.below(5)) as usize];
        grad_check("gather_rows", &[x, w], &[0], move |t, ids| {
            let y = t.gather_rows(ids[0], &idx).unwrap();
            let s = t.sum_all(y).unwrap();
            t.scale(s, 1.3).unwrap()
        });
    }
}

#[test]
fn resize_and_pad_ops() {
    for k in 0..INSTANCES as u64 {
        let mut rng = Rng::new(stream_key(&[7, k]));
        let x = rand_tensor(&mut rng, &[1, 2, 5, 5], -1.0, 1.0);
        let w_up = rand_tensor(&mut rng, &[1, 2, 8, 8], -1.0, 1.0);
        grad_check("resize_up", &[x.clone(), w_up], &[0], |t, ids| {
            let y = t.resize_bilinear(ids[0], 8, 8).unwrap();
            let prod = t.mul(y, ids[1]).unwrap();
            t.sum_all(prod).unwrap()
        });
        let w_down = rand_tensor(&mut rng, &[1, 2, 3, 3], -1.0, 1.0);
        grad_check("resize_down", &[x.clone(), w_down], &[0], |t, ids| {
            let y = t.resize_bilinear(ids[0], 3, 3).unwrap();
            let prod = t.mul(y, ids[1]).unwrap();
            t.sum_all(prod).unwrap()
        });
        let w_pad = rand_tensor(&mut rng, &[1, 2, 9, 9], -1.0, 1.0);
        grad_check("pad2d", &[x, w_pad], &[0], |t, ids| {
            let y = t.pad2d(ids[0], 2, 1, 9, 9).unwrap();
            let prod = t.mul(y, ids[1]).unwrap();
            t.sum_all(prod).unwrap()
        });
    }
}

// ---- full model losses ----

fn tiny_dataset() -> rapa_core::data::Dataset {
    generate_shapeset(&ShapeSetConfig {
        samples_per_class: 2,
        noise_sigma: 0.1,
        max_translation: 1,
        seed: 40,
    })
    .unwrap()
}

/// Loss of the model as a function of the flat trainable parameter vector,
/// plus the ReLU activation pattern of that evaluation.
fn model_loss(
    graph: &rapa_core::nets::ModelGraph,
    template: &ParamStore,
    x: &Tensor,
    y: &[usize],
    flat: &[f64],
) -> (f64, Vec<bool>) {
    let mut params = template.clone();
    params.set_trainable_from_flat(flat).unwrap();
    let fp = forward(graph, &params, x, Mode::Train, GradScope::None).unwrap();
    let mut tape = fp.tape;
    let lsm = tape.log_softmax(fp.logits).unwrap();
    let picked = tape.gather_rows(lsm, y).unwrap();
    let mean = tape.mean_all(picked).unwrap();
    let loss = tape.scale(mean, -1.0).unwrap();
    (tape.value(loss).item(), tape.relu_input_signs())
}

/// Backward over all trainable parameters vs finite differences on a
/// deterministic sample of coordinates from every tensor.
fn check_model_param_grads(preset: &str, tag: u64) {
    let graph = build_model(Arch::preset(preset)).unwrap();
    let data = tiny_dataset();
    for instance in 0..INSTANCES as u64 {
        let seed = stream_key(&[tag, instance]);
        let params = init_params(&graph, seed);
        let mut rng = Rng::new(stream_key(&[tag, instance, 1]));
        let i0 = rng.below(data.len() as u64 - 1) as usize;
        let x = data.image_batch_indices(&[i0, i0 + 1]);
        let y = vec![data.label(i0) as usize, data.label(i0 + 1) as usize];

        let fp = forward(&graph, &params, &x, Mode::Train, GradScope::Params).unwrap();
        let mut tape = fp.tape;
        let lsm = tape.log_softmax(fp.logits).unwrap();
        let picked = tape.gather_rows(lsm, &y).unwrap();
        let mean = tape.mean_all(picked).unwrap();
        let loss = tape.scale(mean, -1.0).unwrap();
        let grads = tape.backward(loss).unwrap();

        let layout = params.flat_layout();
        let mut ad_flat = vec![0.0; params.trainable_count()];
        for slice in &layout {
            let node = fp
                .param_nodes
                .iter()
                .find(|(idx, _)| *idx == slice.entry_index)
                .map(|(_, n)| *n)
                .unwrap();
            if let Some(g) = grads.get(node) {
                ad_flat[slice.start..slice.start + slice.len].copy_from_slice(g.data());
            }
        }

        // Probe up to 6 coordinates per tensor, deterministically.
        let flat0 = params.flatten_trainable();
        let mut coords = Vec::new();
        for slice in &layout {
            for _ in 0..slice.len.min(6) {
                coords.push(slice.start + rng.below(slice.len as u64) as usize);
            }
        }
        coords.sort_unstable();
        coords.dedup();

        // Central differences per coordinate. A probe whose segment crosses
        // a ReLU kink (activation pattern differs between the two endpoint
        // evaluations) measures a subgradient jump, not the derivative, and
        // is excluded from the comparison.
        let mut ad = Vec::with_capacity(coords.len());
        let mut fd = Vec::with_capacity(coords.len());
        let mut skipped = 0usize;
        let mut flat = flat0.clone();
        for &c in &coords {
            let orig = flat[c];
            flat[c] = orig + H;
            let (fp_val, signs_p) = model_loss(&graph, &params, &x, &y, &flat);
            flat[c] = orig - H;
            let (fm_val, signs_m) = model_loss(&graph, &params, &x, &y, &flat);
            flat[c] = orig;
            if signs_p != signs_m {
                skipped += 1;
                continue;
            }
            fd.push((fp_val - fm_val) / (2.0 * H));
            ad.push(ad_flat[c]);
        }
        assert!(
            skipped * 10 <= coords.len() * 3,
            "{preset} instance {instance}: too many kink-crossing probes ({skipped}/{})",
            coords.len()
        );
        let err = rel_err(&ad, &fd);
        assert!(
            err < TOL,
            "{preset} instance {instance}: param grad rel err {err:.3e}"
        );
    }
}

/// Backward to the input (the attack path) vs finite differences.
fn check_model_input_grads(preset: &str, tag: u64) {
    let graph = build_model(Arch::preset(preset)).unwrap();
    let data = tiny_dataset();
    for instance in 0..INSTANCES as u64 {
        let seed = stream_key(&[tag, instance, 77]);
        let params = init_params(&graph, seed);
        let mut rng = Rng::new(stream_key(&[tag, instance, 78]));
        let i = rng.below(data.len() as u64) as usize;
        let y_tar = rng.below(8) as usize;
        let x = data.image_batch_indices(&[i]);

        let fp = forward(&graph, &params, &x, Mode::Eval, GradScope::Input).unwrap();
        let mut tape = fp.tape;
        let obj = objective_node(&mut tape, fp.logits, y_tar, LossKind::Logit).unwrap();
        let grads = tape.backward(obj).unwrap();
        let ad_full = grads.expect(fp.input).data().to_vec();

        let eval = |v: &[f64]| -> (f64, Vec<bool>) {
            let xb = Tensor::new(vec![1, 1, 16, 16], v.to_vec()).unwrap();
            let fp = forward(&graph, &params, &xb, Mode::Eval, GradScope::None).unwrap();
            let mut tape = fp.tape;
            let obj = objective_node(&mut tape, fp.logits, y_tar, LossKind::Logit).unwrap();
            (tape.value(obj).item(), tape.relu_input_signs())
        };
        let mut point = x.data().to_vec();
        let mut ad = Vec::new();
        let mut fd = Vec::new();
        let mut skipped = 0usize;
        for c in 0..point.len() {
            let orig = point[c];
            point[c] = orig + H;
            let (fp_val, signs_p) = eval(&point);
            point[c] = orig - H;
            let (fm_val, signs_m) = eval(&point);
            point[c] = orig;
            if signs_p != signs_m {
                skipped += 1;
                continue;
            }
            fd.push((fp_val - fm_val) / (2.0 * H));
            ad.push(ad_full[c]);
        }
        assert!(
            skipped * 10 <= point.len() * 3,
            "{preset} instance {instance}: too many kink-crossing probes ({skipped})"
        );
        let err = rel_err(&ad, &fd);
        assert!(
            err < TOL,
            "{preset} instance {instance}: input grad rel err {err:.3e}"
        );
    }
}

#[test]
fn cnn_bn_loss_param_gradients() {
    check_model_param_grads("cnn_bn", 100);
}

#[test]
fn mlp_loss_param_gradients() {
    check_model_param_grads("mlp", 101);
}

#[test]
fn cnn_bn_input_gradients() {
    check_model_input_grads("cnn_bn", 102);
}

#[test]
fn mlp_input_gradients() {
    check_model_input_grads("mlp", 103);
}

#[test]
fn cnn_ln_input_gradients() {
    check_model_input_grads("cnn_ln", 104);
}

#[test]
fn gradients_are_deterministic() {
    let graph = build_model(Arch::preset("cnn_bn")).unwrap();
    let params = init_params(&graph, 9);
    let data = tiny_dataset();
    let x = data.image_batch_indices(&[0, 5]);
    let run = || {
        let fp = forward(&graph, &params, &x, Mode::Train, GradScope::InputAndParams).unwrap();
        let mut tape = fp.tape;
        let lsm = tape.log_softmax(fp.logits).unwrap();
        let picked = tape.gather_rows(lsm, &[0, 2]).unwrap();
        let loss = tape.mean_all(picked).unwrap();
        let grads = tape.backward(loss).unwrap();
        let mut out = vec![tape.value(loss).item()];
        out.extend_from_slice(grads.expect(fp.input).data());
        for (_, n) in &fp.param_nodes {
            if let Some(g) = grads.get(*n) {
                out.extend_from_slice(g.data());
            }
        }
        out
    };
    let a = run();
    let b = run();
    assert_eq!(a, b, "repeated backward must be bitwise identical");
}

#[test]
fn general_linearity_holds_to_roundoff() {
    // backward(a f + b g) vs a backward(f) + b backward(g) with shared
    // intermediates: exact up to the documented fixed summation order, so
    // compare at 1e-12 relative.
    let mut rng = Rng::new(11);
    let x_t = rand_tensor(&mut rng, &[4, 4], -1.0, 1.0);
    let w_t = rand_tensor(&mut rng, &[4, 4], -1.0, 1.0);
    let (a, b) = (1.3, -0.7);

    let grad_of = |mode: u8| -> Vec<f64> {
        let mut tape = Tape::new();
        let x = tape.leaf(x_t.clone().with_grad()).unwrap();
        let w = tape.leaf(w_t.clone()).unwrap();
        let xx = tape.mul(x, x).unwrap();
        let f = tape.sum_all(xx).unwrap();
        let xw = tape.matmul(x, w).unwrap();
        let g = tape.mean_all(xw).unwrap();
        let seed = match mode {
            0 => {
                let fa = tape.scale(f, a).unwrap();
                let gb = tape.scale(g, b).unwrap();
                tape.add(fa, gb).unwrap()
            }
            1 => f,
            _ => g,
        };
        let grads = tape.backward(seed).unwrap();
        grads.expect(x).data().to_vec()
    };

    let combined = grad_of(0);
    let gf = grad_of(1);
    let gg = grad_of(2);
    for i in 0..combined.len() {
        let expect = a * gf[i] + b * gg[i];
        assert!(
            (combined[i] - expect).abs() <= 1e-12 * expect.abs().max(1.0),
            "index {i}: {} vs {expect}",
            combined[i]
        );
    }
}
