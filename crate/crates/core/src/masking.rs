//! DropConnect-style Bernoulli masking of model parameters.
//!
//! A [`MaskPlan`] selects layer types (dense, norm, conv) and drop
//! probabilities. A [`MaskDraw`] is one concrete sampled mask set: each
//! selected parameter entry gets an independent 0/1 mask of its own shape,
//! where an entry value is kept (1) when the uniform draw u >= p.
//!
//! Weight-like tensors (dense/conv weights, norm gamma) use `p_w`;
//! bias-like tensors (biases, norm beta) use `p_b`. Running statistics of
//! normalization layers are never masked. Kept weights are not rescaled by
//! 1/(1-p): masks multiply raw parameter values.

use crate::error::{Error, Result};
use crate::nets::{LayerType, ParamEntry, ParamStore, TensorKind};
use crate::rng::{child_key, stream_key, Rng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskPlan {
    pub dense: bool,
    pub norm: bool,
    pub conv: bool,
    pub p_w: f64,
    pub p_b: f64,
}

impl MaskPlan {
    pub fn new(dense: bool, norm: bool, conv: bool, p_w: f64, p_b: f64) -> Result<Self> {
        if !dense && !norm && !conv {
            return Err(Error::InvalidConfig(
                "mask plan selects no layer types".into(),
            ));
        }
        for p in [p_w, p_b] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidConfig(format!(
                    "drop probability {p} outside [0,1]"
                )));
            }
        }
        Ok(MaskPlan {
            dense,
            norm,
            conv,
            p_w,
            p_b,
        })
    }

    /// The default layer set (dense + norm) with a single probability for
    /// weights and biases.
    pub fn dense_norm(p: f64) -> Result<Self> {
        MaskPlan::new(true, true, false, p, p)
    }

    pub fn selects(&self, entry: &ParamEntry) -> bool {
        if !entry.trainable {
            return false;
        }
        let type_on = match entry.layer_type {
            LayerType::Dense => self.dense,
            LayerType::Norm => self.norm,
            LayerType::Conv => self.conv,
            _ => false,
        };
        type_on
            && matches!(
                entry.kind,
                TensorKind::Weight | TensorKind::Bias | TensorKind::Gamma | TensorKind::Beta
            )
    }

    fn probability_for(&self, kind: TensorKind) -> f64 {
        match kind {
            TensorKind::Weight | TensorKind::Gamma => self.p_w,
            _ => self.p_b,
        }
    }
}

/// One sampled mask set: per selected entry, a 0/1 tensor of matching shape.
#[derive(Debug, Clone)]
pub struct MaskDraw {
    pub key: u64,
    /// (entry index in the ParamStore, mask values).
    pub masks: Vec<(usize, Vec<f64>)>,
}

impl MaskDraw {
    /// Fraction of dropped (zero) entries pooled over all masks.
    pub fn drop_rate(&self) -> f64 {
        let mut zeros = 0usize;
        let mut total = 0usize;
        for (_, m) in &self.masks {
            zeros += m.iter().filter(|&&v| v == 0.0).count();
            total += m.len();
        }
        if total == 0 {
            0.0
        } else {
            zeros as f64 / total as f64
        }
    }
}

/// Samples one mask set. The RNG substream of each tensor is derived from
/// `(key, layer index, tensor-kind tag)`, so draws are independent of the
/// order in which entries are visited.
pub fn sample_masks(plan: &MaskPlan, params: &ParamStore, key: u64) -> MaskDraw {
    let mut masks = Vec::new();
    for (idx, entry) in params.entries().iter().enumerate() {
        if !plan.selects(entry) {
            continue;
        }
        let p = plan.probability_for(entry.kind);
        let n = entry.tensor.numel();
        let mut rng = Rng::new(stream_key(&[key, entry.layer_index as u64, entry.kind.tag()]));
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.uniform() >= p { 1.0 } else { 0.0 })
            .collect();
        masks.push((idx, mask));
    }
    MaskDraw { key, masks }
}

/// Applies a draw, returning a masked copy. The source store is unchanged.
pub fn apply_masks(params: &ParamStore, draw: &MaskDraw) -> Result<ParamStore> {
    let mut out = params.clone();
    for (idx, mask) in &draw.masks {
        let entry = out.entry_mut(*idx);
        if entry.tensor.numel() != mask.len() {
            return Err(Error::shape(
                "apply_masks",
                format!(
                    "mask for `{}` has {} values, tensor has {}",
                    entry.name,
                    mask.len(),
                    entry.tensor.numel()
                ),
            ));
        }
        for (v, m) in entry.tensor.data_mut().iter_mut().zip(mask) {
            *v *= m;
        }
    }
    Ok(out)
}

/// Elementwise mask application on a bare tensor (`W_masked = M .* W`).
pub fn mask_tensor(t: &Tensor, mask: &[f64]) -> Result<Tensor> {
    if t.numel() != mask.len() {
        return Err(Error::shape(
            "mask_tensor",
            format!("{} values vs {} mask entries", t.numel(), mask.len()),
        ));
    }
    let data = t.data().iter().zip(mask).map(|(v, m)| v * m).collect();
    Tensor::new(t.shape().to_vec(), data)
}

/// Fused sample-and-apply for the attack hot path: materializes masked
/// parameter leaves directly, without building a [`MaskDraw`] or cloning the
/// store. Consumes the same RNG substreams in the same order as
/// [`sample_masks`], so the resulting model is bitwise identical to
/// `apply_masks(params, sample_masks(plan, params, key))`.
#[derive(Debug, Clone, Copy)]
pub struct LiveMask {
    pub plan: MaskPlan,
    pub key: u64,
}

impl crate::nets::ParamOverride for LiveMask {
    fn materialize(&self, entry: &crate::nets::ParamEntry) -> Option<Tensor> {
        if !self.plan.selects(entry) {
            return None;
        }
        let p = self.plan.probability_for(entry.kind);
        let mut rng = Rng::new(stream_key(&[
            self.key,
            entry.layer_index as u64,
            entry.kind.tag(),
        ]));
        let data: Vec<f64> = entry
            .tensor
            .data()
            .iter()
            .map(|&v| if rng.uniform() >= p { v } else { 0.0 })
            .collect();
        Some(Tensor::new(entry.tensor.shape().to_vec(), data).expect("same shape"))
    }
}

/// Lazy sequence of masked model variants indexed by (t, s). Draws at
/// distinct coordinates are independent; the same (seed, t, s) always
/// reproduces the same variant.
#[derive(Debug, Clone)]
pub struct VariantStream {
    plan: MaskPlan,
    seed: u64,
}

impl VariantStream {
    pub fn new(plan: MaskPlan, seed: u64) -> Self {
        VariantStream { plan, seed }
    }

    pub fn draw(&self, params: &ParamStore, t: u64, s: u64) -> MaskDraw {
        sample_masks(&self.plan, params, stream_key(&[self.seed, t, s]))
    }

    pub fn view(&self, params: &ParamStore, t: u64, s: u64) -> Result<ParamStore> {
        apply_masks(params, &self.draw(params, t, s))
    }
}

/// Tags for deriving independent child streams from one (t, s) key: mask
/// sampling and input-transform randomness must not interact, so that a
/// p = 0 masked run consumes transform randomness identically to an
/// unmasked run.
pub const STREAM_MASK: u64 = 0x4d41_534b; // "MASK"
pub const STREAM_TRANSFORM: u64 = 0x5452_4e53; // "TRNS"

/// Mask-sampling key for the (seed, sample, t, s) coordinates used by the
/// attack driver.
pub fn mask_key(base: u64) -> u64 {
    child_key(base, STREAM_MASK)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::{build_model, init_params, logits, Arch};

    fn store() -> ParamStore {
        let graph = build_model(Arch::preset("cnn_bn")).unwrap();
        init_params(&graph, 1)
    }

    #[test]
    fn p_zero_keeps_everything() {
        let params = store();
        let plan = MaskPlan::dense_norm(0.0).unwrap();
        let draw = sample_masks(&plan, &params, 7);
        assert!(draw.masks.iter().all(|(_, m)| m.iter().all(|&v| v == 1.0)));
        let masked = apply_masks(&params, &draw).unwrap();
        assert!(masked.bitwise_eq(&params));
    }

    #[test]
    fn p_one_drops_everything_selected() {
        let params = store();
        let plan = MaskPlan::dense_norm(1.0).unwrap();
        let draw = sample_masks(&plan, &params, 7);
        assert!(draw.masks.iter().all(|(_, m)| m.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn drop_rate_is_binomially_consistent() {
        let params = store();
        let p = 0.05;
        let plan = MaskPlan::dense_norm(p).unwrap();
        // Pool enough draws for >= 1e5 maskable entries.
        let mut zeros = 0usize;
        let mut total = 0usize;
        for k in 0..2 {
            let draw = sample_masks(&plan, &params, k);
            for (_, m) in &draw.masks {
                zeros += m.iter().filter(|&&v| v == 0.0).count();
                total += m.len();
            }
        }
        assert!(total >= 100_000, "pooled {total} entries");
        let rate = zeros as f64 / total as f64;
        let sigma = (p * (1.0 - p) / total as f64).sqrt();
        assert!(
            (rate - p).abs() <= 3.0 * sigma,
            "rate {rate} vs p {p} (3 sigma {})",
            3.0 * sigma
        );
    }

    #[test]
    fn elementwise_mask_rule() {
        let w = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let masked = mask_tensor(&w, &[1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(masked.data(), &[1.0, 0.0, 0.0, 4.0]);
    }

    #[test]
    fn unselected_layers_are_untouched() {
        let params = store();
        let plan = MaskPlan::new(true, true, false, 0.9, 0.9).unwrap();
        let draw = sample_masks(&plan, &params, 13);
        let masked = apply_masks(&params, &draw).unwrap();
        for (a, b) in params.entries().iter().zip(masked.entries()) {
            let conv_or_stat = a.layer_type == LayerType::Conv
                || matches!(a.kind, TensorKind::RunningMean | TensorKind::RunningVar);
            if conv_or_stat {
                assert_eq!(a.tensor.data(), b.tensor.data(), "{}", a.name);
            }
        }
    }

    #[test]
    fn base_store_is_not_mutated_by_masked_forwards() {
        let graph = build_model(Arch::preset("cnn_bn")).unwrap();
        let params = init_params(&graph, 3);
        let before = params.clone();
        let plan = MaskPlan::dense_norm(0.3).unwrap();
        let stream = VariantStream::new(plan, 99);
        let x = Tensor::new(vec![256], vec![0.25; 256]).unwrap();
        for t in 0..4 {
            let view = stream.view(&params, t, 0).unwrap();
            let _ = logits(&graph, &view, &x).unwrap();
        }
        assert!(params.bitwise_eq(&before));
    }

    #[test]
    fn variant_stream_is_reproducible_and_varies() {
        let params = store();
        let plan = MaskPlan::dense_norm(0.05).unwrap();
        let stream = VariantStream::new(plan, 5);
        let a = stream.draw(&params, 1, 1);
        let b = stream.draw(&params, 1, 1);
        let c = stream.draw(&params, 1, 2);
        assert_eq!(a.masks, b.masks);
        assert_ne!(a.masks, c.masks);
    }

    #[test]
    fn empty_plan_is_rejected() {
        assert!(MaskPlan::new(false, false, false, 0.1, 0.1).is_err());
        assert!(MaskPlan::dense_norm(1.5).is_err());
    }

    #[test]
    fn live_mask_matches_sample_then_apply_bitwise() {
        use crate::nets::ParamOverride;
        let params = store();
        let plan = MaskPlan::new(true, true, true, 0.2, 0.1).unwrap();
        for key in [0u64, 1, 999] {
            let expected = apply_masks(&params, &sample_masks(&plan, &params, key)).unwrap();
            let live = LiveMask { plan, key };
            for (i, e) in params.entries().iter().enumerate() {
                let got = live
                    .materialize(e)
                    .unwrap_or_else(|| e.tensor.clone());
                assert_eq!(
                    got.data(),
                    expected.entry(i).tensor.data(),
                    "entry {} key {key}",
                    e.name
                );
            }
        }
    }
}
