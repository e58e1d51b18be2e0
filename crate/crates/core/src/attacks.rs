//! Targeted iterative attacks: losses, input transforms, gradient
//! post-processing, the sign-step update with epsilon-ball projection, and
//! the driver that composes them with per-inference parameter masking.
//!
//! The driver maximizes an objective by gradient ascent: the target logit
//! for the logit loss, or the target log-probability (negative
//! cross-entropy) for the cross-entropy loss. Traces record the maximized
//! objective.
//!
//! RNG discipline: the (seed, sample, t, s) coordinates derive one key per
//! inference; mask sampling and transform randomness use independent child
//! streams of that key, so masked and unmasked runs see identical transform
//! draws and results do not depend on batch parallelization.

use crate::data::{Dataset, PIXELS, SIDE};
use crate::error::{Error, Result};
use crate::masking::{LiveMask, MaskPlan, STREAM_MASK, STREAM_TRANSFORM};
use crate::nets::{forward_on_tape, ModelGraph, Mode, ParamOverride, ParamStore};
use crate::rng::{child_key, stream_key, Rng};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Logit,
    CrossEntropy,
}

impl LossKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "logit" => Ok(LossKind::Logit),
            "ce" | "cross_entropy" => Ok(LossKind::CrossEntropy),
            other => Err(Error::InvalidConfig(format!("unknown loss `{other}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Logit => "logit",
            LossKind::CrossEntropy => "ce",
        }
    }
}

/// Loss value on raw logits: the target logit (to be maximized), or the
/// cross-entropy -log softmax(z)[y_tar].
pub fn loss_value(kind: LossKind, logits: &[f64], y_tar: usize) -> Result<f64> {
    if y_tar >= logits.len() {
        return Err(Error::InvalidConfig(format!(
            "target index {y_tar} out of range for {} logits",
            logits.len()
        )));
    }
    Ok(match kind {
        LossKind::Logit => logits[y_tar],
        LossKind::CrossEntropy => {
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|v| (v - mx).exp()).sum();
            -(logits[y_tar] - mx - z.ln())
        }
    })
}

/// Records the maximized attack objective for a `[1,c]` logits node: the
/// target logit, or log softmax[y_tar] (negative cross-entropy).
pub fn objective_node(
    tape: &mut Tape,
    logits: NodeId,
    y_tar: usize,
    kind: LossKind,
) -> Result<NodeId> {
    let picked = match kind {
        LossKind::Logit => tape.gather_rows(logits, &[y_tar])?,
        LossKind::CrossEntropy => {
            let lsm = tape.log_softmax(logits)?;
            tape.gather_rows(lsm, &[y_tar])?
        }
    };
    tape.sum_all(picked)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransformKind {
    Identity,
    Di,
    Rdi,
    Si,
}

impl TransformKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(TransformKind::Identity),
            "di" => Ok(TransformKind::Di),
            "rdi" => Ok(TransformKind::Rdi),
            "si" => Ok(TransformKind::Si),
            other => Err(Error::InvalidConfig(format!("unknown transform `{other}`"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TransformKind::Identity => "identity",
            TransformKind::Di => "di",
            TransformKind::Rdi => "rdi",
            TransformKind::Si => "si",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransformSpec {
    pub kind: TransformKind,
    /// Max enlarge ratio for di/rdi (canvas side = ceil(16 * ratio)).
    pub enlarge_ratio: f64,
    /// Probability that di/rdi applies at a given inference.
    pub apply_prob: f64,
    /// Number of scaled copies for si.
    pub copies: usize,
}

impl TransformSpec {
    pub fn identity() -> Self {
        TransformSpec {
            kind: TransformKind::Identity,
            enlarge_ratio: 1.0,
            apply_prob: 0.0,
            copies: 1,
        }
    }

    pub fn with_kind(kind: TransformKind) -> Self {
        TransformSpec {
            kind,
            enlarge_ratio: 1.25,
            apply_prob: 0.7,
            copies: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.enlarge_ratio < 1.0 {
            return Err(Error::InvalidConfig(format!(
                "enlarge ratio {} < 1",
                self.enlarge_ratio
            )));
        }
        if !(0.0..=1.0).contains(&self.apply_prob) {
            return Err(Error::InvalidConfig(format!(
                "apply probability {} outside [0,1]",
                self.apply_prob
            )));
        }
        if self.copies == 0 {
            return Err(Error::InvalidConfig("si needs >= 1 scale copies".into()));
        }
        Ok(())
    }

    fn canvas(&self) -> usize {
        (SIDE as f64 * self.enlarge_ratio).ceil() as usize
    }
}

/// Records the input transform on the tape. RNG draw order per di/rdi
/// application is fixed: apply-coin, size, top offset, left offset.
///
/// di output lives on the enlarged canvas; rdi resizes back to 16x16. The
/// si kind is handled by the attack driver via [`Tape::scale`] (copy index
/// depends on the inference counter, which this function does not see).
pub fn input_transform(
    spec: &TransformSpec,
    tape: &mut Tape,
    x: NodeId,
    rng: &mut Rng,
) -> Result<NodeId> {
    match spec.kind {
        TransformKind::Identity | TransformKind::Si => Ok(x),
        TransformKind::Di | TransformKind::Rdi => {
            if rng.uniform() >= spec.apply_prob {
                return Ok(x);
            }
            let canvas = spec.canvas();
            let size = rng.range_inclusive(SIDE as i64, canvas as i64) as usize;
            let resized = if size == SIDE {
                x
            } else {
                tape.resize_bilinear(x, size, size)?
            };
            let top = rng.below((canvas - size + 1) as u64) as usize;
            let left = rng.below((canvas - size + 1) as u64) as usize;
            let padded = tape.pad2d(resized, top, left, canvas, canvas)?;
            if spec.kind == TransformKind::Rdi {
                tape.resize_bilinear(padded, SIDE, SIDE)
            } else {
                Ok(padded)
            }
        }
    }
}

/// Scaled copies of an image: copy j is x / 2^j for j = 0..k-1.
pub fn scale_copies(x: &Tensor, k: usize) -> Result<Vec<Tensor>> {
    if k == 0 {
        return Err(Error::InvalidConfig("need k >= 1 scale copies".into()));
    }
    Ok((0..k)
        .map(|j| {
            let f = 0.5f64.powi(j as i32);
            let data = x.data().iter().map(|v| v * f).collect();
            Tensor::new(x.shape().to_vec(), data).expect("same shape")
        })
        .collect())
}

/// Normalized Gaussian kernel with sigma = size / 3.
fn gaussian_kernel(size: usize) -> Vec<f64> {
    let sigma = size as f64 / 3.0;
    let c = (size / 2) as f64;
    let mut k = vec![0.0; size * size];
    let mut sum = 0.0;
    for y in 0..size {
        for x in 0..size {
            let (dy, dx) = (y as f64 - c, x as f64 - c);
            let v = (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
            k[y * size + x] = v;
            sum += v;
        }
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Translation-invariant gradient smoothing: convolves the input-gradient
/// with a normalized Gaussian kernel (zero padding). `kernel_size` 0 or 1
/// turns smoothing off.
pub fn ti_smooth(grad: &[f64], kernel_size: usize) -> Result<Vec<f64>> {
    if kernel_size != 0 && kernel_size % 2 == 0 {
        return Err(Error::InvalidConfig(format!(
            "TI kernel size {kernel_size} must be odd"
        )));
    }
    if grad.len() != PIXELS {
        return Err(Error::shape(
            "ti_smooth",
            format!("expected {PIXELS} gradient values, got {}", grad.len()),
        ));
    }
    if kernel_size <= 1 {
        return Ok(grad.to_vec());
    }
    let k = gaussian_kernel(kernel_size);
    let r = (kernel_size / 2) as i64;
    let mut out = vec![0.0; PIXELS];
    let side = SIDE as i64;
    for y in 0..side {
        for x in 0..side {
            let mut acc = 0.0;
            for dy in -r..=r {
                let sy = y + dy;
                if !(0..side).contains(&sy) {
                    continue;
                }
                for dx in -r..=r {
                    let sx = x + dx;
                    if !(0..side).contains(&sx) {
                        continue;
                    }
                    acc += grad[(sy * side + sx) as usize]
                        * k[((dy + r) * kernel_size as i64 + (dx + r)) as usize];
                }
            }
            out[(y * side + x) as usize] = acc;
        }
    }
    Ok(out)
}

/// Momentum accumulation: m' = mu * m + g / ||g||_1 (m' = mu * m when the
/// gradient vanishes).
pub fn mi_update(momentum: &mut [f64], grad: &[f64], mu: f64) {
    let l1: f64 = grad.iter().map(|v| v.abs()).sum();
    if l1 > 0.0 {
        let inv = 1.0 / l1;
        for (m, g) in momentum.iter_mut().zip(grad) {
            *m = mu * *m + g * inv;
        }
    } else {
        for m in momentum.iter_mut() {
            *m *= mu;
        }
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// One ascent step followed by projection into the epsilon-ball and the
/// pixel range: x' = clip_[0,1](clip_[x_clean +- eps](x + alpha sign(dir))).
pub fn step_and_project(
    x_adv: &mut [f64],
    direction: &[f64],
    alpha: f64,
    x_clean: &[f64],
    eps: f64,
) {
    for i in 0..x_adv.len() {
        let stepped = x_adv[i] + alpha * sign(direction[i]);
        let lo = x_clean[i] - eps;
        let hi = x_clean[i] + eps;
        x_adv[i] = stepped.clamp(lo, hi).clamp(0.0, 1.0);
    }
}

#[derive(Debug, Clone)]
pub struct AttackConfig {
    /// L-inf budget in pixel units ([0,1] scale).
    pub eps: f64,
    /// Step size.
    pub alpha: f64,
    /// Max iterations T.
    pub iterations: usize,
    /// Inferences per iteration S.
    pub inferences: usize,
    /// Momentum decay mu.
    pub mu: f64,
    pub loss: LossKind,
    pub transform: TransformSpec,
    /// Odd kernel size, or 0 to disable TI smoothing.
    pub ti_kernel: usize,
    pub mask_plan: Option<MaskPlan>,
    pub seed: u64,
    /// Record an x_adv snapshot every this many iterations (0 = off).
    pub snapshot_every: usize,
}

impl AttackConfig {
    /// Plain I-FGSM with the logit loss: no momentum, no transform, no
    /// masking.
    pub fn ifgsm(eps: f64, alpha: f64, iterations: usize) -> Self {
        AttackConfig {
            eps,
            alpha,
            iterations,
            inferences: 1,
            mu: 0.0,
            loss: LossKind::Logit,
            transform: TransformSpec::identity(),
            ti_kernel: 0,
            mask_plan: None,
            seed: 0,
            snapshot_every: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.eps <= 0.0 {
            return Err(Error::InvalidConfig(format!("eps {} must be > 0", self.eps)));
        }
        if self.alpha <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "alpha {} must be > 0",
                self.alpha
            )));
        }
        if self.iterations < 1 {
            return Err(Error::InvalidConfig("iterations must be >= 1".into()));
        }
        if self.inferences < 1 {
            return Err(Error::InvalidConfig("inferences must be >= 1".into()));
        }
        if self.mu < 0.0 {
            return Err(Error::InvalidConfig(format!("mu {} must be >= 0", self.mu)));
        }
        if self.ti_kernel != 0 && self.ti_kernel % 2 == 0 {
            return Err(Error::InvalidConfig(format!(
                "ti_kernel {} must be odd or 0",
                self.ti_kernel
            )));
        }
        self.transform.validate()
    }
}

/// Per-iteration record: the maximized objective averaged over the S
/// inferences, and the L-inf norm of the averaged raw gradient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterTrace {
    pub objective: f64,
    pub grad_linf: f64,
}

/// Adversarial examples with full traces. Image buffers are sample-major;
/// x_adv stays in f64 (evaluation and persistence quantize to f32).
#[derive(Debug, Clone)]
pub struct AdvBatch {
    pub x_adv: Vec<f64>,
    pub x_clean: Vec<f64>,
    pub y: Vec<u8>,
    pub y_tar: Vec<u8>,
    pub traces: Vec<Vec<IterTrace>>,
    /// (iteration, sample-major images) captured every `snapshot_every`
    /// iterations, quantized to stored precision.
    pub snapshots: Vec<(usize, Vec<f64>)>,
}

impl AdvBatch {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn adv_image(&self, i: usize) -> &[f64] {
        &self.x_adv[i * PIXELS..(i + 1) * PIXELS]
    }

    pub fn clean_image(&self, i: usize) -> &[f64] {
        &self.x_clean[i * PIXELS..(i + 1) * PIXELS]
    }

    /// Checks the epsilon-ball and pixel-range invariants.
    pub fn check_invariants(&self, eps: f64) -> Result<()> {
        for (a, c) in self.x_adv.iter().zip(&self.x_clean) {
            if (a - c).abs() > eps + 1e-9 || !(0.0..=1.0).contains(a) {
                return Err(Error::InvalidConfig(format!(
                    "adversarial pixel {a} violates eps-ball around {c}"
                )));
            }
        }
        Ok(())
    }
}

struct SingleResult {
    x_adv: Vec<f64>,
    trace: Vec<IterTrace>,
    snapshots: Vec<(usize, Vec<f64>)>,
}

fn attack_single(
    graph: &ModelGraph,
    params: &ParamStore,
    image: &[f64],
    y_tar: usize,
    cfg: &AttackConfig,
    sample_index: u64,
) -> Result<SingleResult> {
    let x_clean = image.to_vec();
    let mut x_adv = x_clean.clone();
    let mut momentum = vec![0.0; PIXELS];
    let mut trace = Vec::with_capacity(cfg.iterations);
    let mut snapshots = Vec::new();

    for t in 1..=cfg.iterations {
        let mut g_sum = vec![0.0; PIXELS];
        let mut obj_sum = 0.0;
        for s in 1..=cfg.inferences {
            let key = stream_key(&[cfg.seed, sample_index, t as u64, s as u64]);

            let live_mask = cfg.mask_plan.map(|plan| LiveMask {
                plan,
                key: child_key(key, STREAM_MASK),
            });

            let mut tape = Tape::new();
            let x_t = Tensor::new(vec![1, 1, SIDE, SIDE], x_adv.clone())?.with_grad();
            let x_id = tape.leaf(x_t)?;

            let x_in = match cfg.transform.kind {
                TransformKind::Si => {
                    let j = ((s - 1) % cfg.transform.copies) as i32;
                    if j == 0 {
                        x_id
                    } else {
                        tape.scale(x_id, 0.5f64.powi(j))?
                    }
                }
                _ => {
                    let mut rng = Rng::new(child_key(key, STREAM_TRANSFORM));
                    input_transform(&cfg.transform, &mut tape, x_id, &mut rng)?
                }
            };

            let wiring = forward_on_tape(
                graph,
                params,
                &mut tape,
                x_in,
                Mode::Eval,
                false,
                live_mask.as_ref().map(|m| m as &dyn ParamOverride),
            )?;
            let obj = objective_node(&mut tape, wiring.logits, y_tar, cfg.loss)?;
            obj_sum += tape.value(obj).item();
            let grads = tape.backward(obj)?;
            let gx = grads
                .get(x_id)
                .ok_or(Error::NonFinite("objective does not reach the input"))?;
            for (acc, g) in g_sum.iter_mut().zip(gx.data()) {
                *acc += g;
            }
        }
        // Arithmetic mean over the S per-inference gradients, fixed order.
        let inv_s = 1.0 / cfg.inferences as f64;
        for g in &mut g_sum {
            *g *= inv_s;
        }
        let grad_linf = g_sum.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        trace.push(IterTrace {
            objective: obj_sum * inv_s,
            grad_linf,
        });

        let direction = if cfg.ti_kernel >= 3 {
            ti_smooth(&g_sum, cfg.ti_kernel)?
        } else {
            g_sum
        };
        mi_update(&mut momentum, &direction, cfg.mu);
        step_and_project(&mut x_adv, &momentum, cfg.alpha, &x_clean, cfg.eps);

        for (a, c) in x_adv.iter().zip(&x_clean) {
            if (a - c).abs() > cfg.eps + 1e-9 || !(0.0..=1.0).contains(a) {
                return Err(Error::NonFinite("eps-ball invariant violated in-loop"));
            }
        }

        if cfg.snapshot_every > 0 && t % cfg.snapshot_every == 0 {
            let snap: Vec<f64> = x_adv.iter().map(|v| *v as f32 as f64).collect();
            snapshots.push((t, snap));
        }
    }

    Ok(SingleResult {
        x_adv,
        trace,
        snapshots,
    })
}

/// Runs the attack over every sample of `data` (targets must be assigned).
/// Samples are independent and processed in parallel; output is identical
/// for any worker count.
pub fn run_attack(
    graph: &ModelGraph,
    params: &ParamStore,
    data: &Dataset,
    cfg: &AttackConfig,
) -> Result<AdvBatch> {
    cfg.validate()?;
    if !data.has_targets() {
        return Err(Error::InvalidConfig(
            "dataset has no targeted labels; call assign_targets first".into(),
        ));
    }
    if data.is_empty() {
        return Err(Error::InvalidConfig("empty attack dataset".into()));
    }

    let results: Vec<Result<SingleResult>> = (0..data.len())
        .into_par_iter()
        .map(|i| {
            attack_single(
                graph,
                params,
                data.image(i),
                data.target(i).expect("targets checked") as usize,
                cfg,
                i as u64,
            )
        })
        .collect();

    let n = data.len();
    let mut x_adv = Vec::with_capacity(n * PIXELS);
    let mut x_clean = Vec::with_capacity(n * PIXELS);
    let mut traces = Vec::with_capacity(n);
    let mut per_sample_snaps: Vec<Vec<(usize, Vec<f64>)>> = Vec::with_capacity(n);
    for (i, r) in results.into_iter().enumerate() {
        let r = r?;
        x_adv.extend_from_slice(&r.x_adv);
        x_clean.extend_from_slice(data.image(i));
        traces.push(r.trace);
        per_sample_snaps.push(r.snapshots);
    }

    // Reassemble per-sample snapshots into batch-major snapshots.
    let mut snapshots = Vec::new();
    if cfg.snapshot_every > 0 {
        let count = per_sample_snaps[0].len();
        for k in 0..count {
            let iter = per_sample_snaps[0][k].0;
            let mut buf = Vec::with_capacity(n * PIXELS);
            for snaps in &per_sample_snaps {
                debug_assert_eq!(snaps[k].0, iter);
                buf.extend_from_slice(&snaps[k].1);
            }
            snapshots.push((iter, buf));
        }
    }

    let batch = AdvBatch {
        x_adv,
        x_clean,
        y: (0..n).map(|i| data.label(i)).collect(),
        y_tar: (0..n).map(|i| data.target(i).unwrap()).collect(),
        traces,
        snapshots,
    };
    batch.check_invariants(cfg.eps)?;
    Ok(batch)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logit_loss_reads_off_target() {
        assert_eq!(
            loss_value(LossKind::Logit, &[1.0, 2.0, 5.0], 2).unwrap(),
            5.0
        );
    }

    #[test]
    fn cross_entropy_uniform_case() {
        let v = loss_value(LossKind::CrossEntropy, &[0.0, 0.0, 0.0, 0.0], 1).unwrap();
        assert!((v - 4.0f64.ln()).abs() < 1e-12, "{v}");
    }

    #[test]
    fn logit_objective_gradient_is_one_hot() {
        let mut tape = Tape::new();
        let z = tape
            .leaf(
                Tensor::new(vec![1, 4], vec![0.3, -0.2, 1.0, 0.4])
                    .unwrap()
                    .with_grad(),
            )
            .unwrap();
        let obj = objective_node(&mut tape, z, 2, LossKind::Logit).unwrap();
        let g = tape.backward(obj).unwrap();
        assert_eq!(g.expect(z).data(), &[0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn scale_copies_follow_halving_rule() {
        let x = Tensor::ones(vec![1, 1, 2, 2]);
        let copies = scale_copies(&x, 3).unwrap();
        assert_eq!(copies.len(), 3);
        assert!(copies[0].data().iter().all(|&v| v == 1.0));
        assert!(copies[1].data().iter().all(|&v| v == 0.5));
        assert!(copies[2].data().iter().all(|&v| v == 0.25));
        assert_eq!(scale_copies(&x, 1).unwrap()[0].data(), x.data());
    }

    #[test]
    fn ti_kernel_identity_and_normalization() {
        let g = vec![1.0; PIXELS];
        assert_eq!(ti_smooth(&g, 0).unwrap(), g);
        assert_eq!(ti_smooth(&g, 1).unwrap(), g);
        assert!(ti_smooth(&g, 4).is_err());
        // Constant field: interior pixels keep their value.
        let sm = ti_smooth(&g, 3).unwrap();
        for y in 1..SIDE - 1 {
            for x in 1..SIDE - 1 {
                assert!((sm[y * SIDE + x] - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ti_delta_spreads_preserving_mass() {
        let mut g = vec![0.0; PIXELS];
        g[8 * SIDE + 8] = 1.0;
        let sm = ti_smooth(&g, 3).unwrap();
        // Kernel footprint fully interior: total mass preserved.
        let total: f64 = sm.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!(sm[8 * SIDE + 8] < 1.0);
        assert!(sm[7 * SIDE + 8] > 0.0);
    }

    #[test]
    fn mi_update_examples() {
        // mu=0: normalized gradient only.
        let mut m = vec![0.5, 0.5];
        mi_update(&mut m, &[3.0, -1.0], 0.0);
        assert_eq!(m, vec![0.75, -0.25]);
        // mu=1, m=0, g=[2,-2] -> [0.5, -0.5].
        let mut m = vec![0.0, 0.0];
        mi_update(&mut m, &[2.0, -2.0], 1.0);
        assert_eq!(m, vec![0.5, -0.5]);
        // zero gradient: decay only.
        let mut m = vec![0.4, -0.2];
        mi_update(&mut m, &[0.0, 0.0], 0.5);
        assert_eq!(m, vec![0.2, -0.1]);
    }

    #[test]
    fn step_and_project_examples() {
        let eps = 16.0 / 255.0;
        let alpha = 2.0 / 255.0;
        // Sign rule.
        let mut x = vec![0.5, 0.5];
        step_and_project(&mut x, &[2.0, -3.0], alpha, &[0.5, 0.5], eps);
        assert!((x[0] - (0.5 + alpha)).abs() < 1e-15);
        assert!((x[1] - (0.5 - alpha)).abs() < 1e-15);
        // Epsilon clip: unprojected 0.9 around clean 0.5 -> 0.5 + 16/255.
        let mut x = vec![0.9 - alpha];
        step_and_project(&mut x, &[1.0], alpha, &[0.5], eps);
        assert!((x[0] - (0.5 + eps)).abs() < 1e-12, "{}", x[0]);
        // Range clamp: negative goes to 0.
        let mut x = vec![0.05];
        step_and_project(&mut x, &[-1.0], 0.2, &[0.05], 0.5);
        assert_eq!(x[0], 0.0);
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let mut cfg = AttackConfig::ifgsm(16.0 / 255.0, 2.0 / 255.0, 10);
        assert!(cfg.validate().is_ok());
        cfg.eps = 0.0;
        assert!(cfg.validate().is_err());
        cfg = AttackConfig::ifgsm(0.1, 0.01, 10);
        cfg.ti_kernel = 4;
        assert!(cfg.validate().is_err());
        cfg = AttackConfig::ifgsm(0.1, 0.01, 10);
        cfg.inferences = 0;
        assert!(cfg.validate().is_err());
    }
}
