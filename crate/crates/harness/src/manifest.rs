//! Experiment manifests: a TOML description of dataset, models, attacks,
//! and evaluation, with validation and a canonical content hash that every
//! produced artifact carries.

use rapa_core::attacks::{AttackConfig, LossKind, TransformKind, TransformSpec};
use rapa_core::data::TargetRule;
use rapa_core::error::{Error, Result};
use rapa_core::masking::MaskPlan;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

/// Parses "16/255" fraction syntax or a plain float.
pub fn parse_ratio(s: &str) -> Result<f64> {
    let s = s.trim();
    if let Some((num, den)) = s.split_once('/') {
        let n: f64 = num
            .trim()
            .parse()
            .map_err(|_| Error::InvalidConfig(format!("bad ratio `{s}`")))?;
        let d: f64 = den
            .trim()
            .parse()
            .map_err(|_| Error::InvalidConfig(format!("bad ratio `{s}`")))?;
        if d == 0.0 {
            return Err(Error::InvalidConfig(format!("zero denominator in `{s}`")));
        }
        Ok(n / d)
    } else {
        s.parse()
            .map_err(|_| Error::InvalidConfig(format!("bad number `{s}`")))
    }
}

/// Parses "dense,norm[,conv]" into mask layer flags.
pub fn parse_mask_layers(s: &str) -> Result<(bool, bool, bool)> {
    let (mut dense, mut norm, mut conv) = (false, false, false);
    for part in s.split(',') {
        match part.trim() {
            "dense" => dense = true,
            "norm" => norm = true,
            "conv" => conv = true,
            "" => {}
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown mask layer `{other}` (expected dense, norm, conv)"
                )))
            }
        }
    }
    Ok((dense, norm, conv))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetSection {
    #[serde(default = "default_spc")]
    pub samples_per_class: usize,
    #[serde(default = "default_sigma")]
    pub noise_sigma: f64,
    #[serde(default = "default_translation")]
    pub max_translation: usize,
    /// Defaults to the global seed when absent.
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default = "default_train_per_class")]
    pub train_per_class: usize,
}

fn default_spc() -> usize {
    640
}
fn default_sigma() -> f64 {
    0.1
}
fn default_translation() -> usize {
    2
}
fn default_train_per_class() -> usize {
    512
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            samples_per_class: default_spc(),
            noise_sigma: default_sigma(),
            max_translation: default_translation(),
            seed: None,
            train_per_class: default_train_per_class(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSection {
    pub preset: String,
    pub seed: u64,
    #[serde(default)]
    pub role: ModelRole,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ModelRole {
    Surrogate,
    #[default]
    Target,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSection {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
}

fn default_epochs() -> usize {
    6
}
fn default_batch() -> usize {
    32
}
fn default_lr() -> f64 {
    0.1
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            epochs: default_epochs(),
            batch_size: default_batch(),
            learning_rate: default_lr(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSection {
    /// Evaluation sample count (class-balanced draw from the test split).
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "default_rule")]
    pub target_rule: String,
    /// Defaults to the global seed when absent.
    #[serde(default)]
    pub seed: Option<u64>,
    /// Snapshot cadence for ASR-vs-iteration curves (0 = off).
    #[serde(default)]
    pub curve_every: usize,
}

fn default_samples() -> usize {
    256
}
fn default_rule() -> String {
    "next_class".to_string()
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            samples: default_samples(),
            target_rule: default_rule(),
            seed: None,
            curve_every: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackSection {
    pub name: String,
    #[serde(default = "default_eps")]
    pub eps: String,
    #[serde(default = "default_alpha")]
    pub alpha: String,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "default_inferences")]
    pub inferences: usize,
    #[serde(default = "default_mu")]
    pub mu: f64,
    #[serde(default = "default_loss")]
    pub loss: String,
    #[serde(default = "default_transform")]
    pub transform: String,
    #[serde(default = "default_ti")]
    pub ti_kernel: usize,
    #[serde(default)]
    pub mask_p: f64,
    #[serde(default = "default_mask_layers")]
    pub mask_layers: String,
    /// Defaults to the global seed when absent.
    #[serde(default)]
    pub seed: Option<u64>,
}

fn default_eps() -> String {
    "16/255".to_string()
}
fn default_alpha() -> String {
    "2/255".to_string()
}
fn default_iterations() -> usize {
    300
}
fn default_inferences() -> usize {
    5
}
fn default_mu() -> f64 {
    1.0
}
fn default_loss() -> String {
    "logit".to_string()
}
fn default_transform() -> String {
    "rdi".to_string()
}
fn default_ti() -> usize {
    5
}
fn default_mask_layers() -> String {
    "dense,norm".to_string()
}

impl AttackSection {
    /// Resolves this section into an executable config. The attack seed
    /// defaults to the global seed so that equal-definition attacks are
    /// bitwise comparable across configurations.
    pub fn to_config(&self, global_seed: u64, curve_every: usize) -> Result<AttackConfig> {
        let transform = match TransformKind::parse(&self.transform)? {
            TransformKind::Identity => TransformSpec::identity(),
            kind => TransformSpec::with_kind(kind),
        };
        let mask_plan = if self.mask_p > 0.0 {
            let (dense, norm, conv) = parse_mask_layers(&self.mask_layers)?;
            Some(MaskPlan::new(dense, norm, conv, self.mask_p, self.mask_p)?)
        } else {
            None
        };
        let cfg = AttackConfig {
            eps: parse_ratio(&self.eps)?,
            alpha: parse_ratio(&self.alpha)?,
            iterations: self.iterations,
            inferences: self.inferences,
            mu: self.mu,
            loss: LossKind::parse(&self.loss)?,
            transform,
            ti_kernel: self.ti_kernel,
            mask_plan,
            seed: self.seed.unwrap_or(global_seed),
            snapshot_every: curve_every,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Full experiment description.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub name: String,
    pub global_seed: u64,
    #[serde(default)]
    pub dataset: DatasetSection,
    pub models: Vec<ModelSection>,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
    pub attacks: Vec<AttackSection>,
}

impl RunManifest {
    pub fn from_toml(text: &str) -> Result<Self> {
        let m: RunManifest =
            toml::from_str(text).map_err(|e| Error::Format(format!("manifest: {e}")))?;
        m.validate()?;
        Ok(m)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::InvalidConfig("experiment name is empty".into()));
        }
        if self.attacks.is_empty() {
            return Err(Error::InvalidConfig(
                "manifest declares zero attack configs".into(),
            ));
        }
        let mut names: Vec<&str> = self.attacks.iter().map(|a| a.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.attacks.len() {
            return Err(Error::InvalidConfig("attack names are not unique".into()));
        }
        let mut model_names: Vec<String> = self.models.iter().map(|m| m.model_name()).collect();
        model_names.sort_unstable();
        model_names.dedup();
        if model_names.len() != self.models.len() {
            return Err(Error::InvalidConfig("model names are not unique".into()));
        }
        let surrogates = self
            .models
            .iter()
            .filter(|m| m.role == ModelRole::Surrogate)
            .count();
        if surrogates != 1 {
            return Err(Error::InvalidConfig(format!(
                "need exactly one surrogate model, found {surrogates}"
            )));
        }
        // Fair compute: compared attacks must match in iterations and
        // inferences per iteration.
        let (t0, s0) = (self.attacks[0].iterations, self.attacks[0].inferences);
        for a in &self.attacks {
            if a.iterations != t0 || a.inferences != s0 {
                return Err(Error::InvalidConfig(format!(
                    "fair-compute violation: attack `{}` runs (T={}, S={}), expected (T={t0}, S={s0})",
                    a.name, a.iterations, a.inferences
                )));
            }
        }
        if self.eval.samples == 0 {
            return Err(Error::InvalidConfig("eval.samples must be >= 1".into()));
        }
        TargetRule::parse(&self.eval.target_rule)?;
        for a in &self.attacks {
            a.to_config(self.global_seed, self.eval.curve_every)?;
        }
        if self.dataset.train_per_class >= self.dataset.samples_per_class {
            return Err(Error::InvalidConfig(
                "train_per_class must leave test samples".into(),
            ));
        }
        Ok(())
    }

    /// Canonical serialized form; semantic equality implies byte equality.
    pub fn canonical_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    /// Hex SHA-256 of the canonical form. Stamped into every artifact.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.canonical_toml().as_bytes());
        let out = h.finalize();
        out.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn dataset_seed(&self) -> u64 {
        self.dataset.seed.unwrap_or(self.global_seed)
    }

    pub fn eval_seed(&self) -> u64 {
        self.eval.seed.unwrap_or(self.global_seed)
    }
}

impl ModelSection {
    /// Unique display name: preset plus seed.
    pub fn model_name(&self) -> String {
        format!("{}_s{}", self.preset, self.seed)
    }
}

/// The reference experiment: `cnn_bn` surrogate, three targets, baseline
/// (MI+TI+RDI) vs the masked attack at equal compute.
pub fn baseline_vs_rapa(global_seed: u64) -> RunManifest {
    RunManifest {
        name: "baseline_vs_rapa".to_string(),
        global_seed,
        dataset: DatasetSection::default(),
        models: vec![
            ModelSection {
                preset: "cnn_bn".into(),
                seed: 11,
                role: ModelRole::Surrogate,
            },
            ModelSection {
                preset: "cnn_ln".into(),
                seed: 12,
                role: ModelRole::Target,
            },
            ModelSection {
                preset: "mlp".into(),
                seed: 13,
                role: ModelRole::Target,
            },
            ModelSection {
                preset: "cnn_wide".into(),
                seed: 14,
                role: ModelRole::Target,
            },
        ],
        train: TrainSection::default(),
        eval: EvalSection::default(),
        attacks: vec![
            AttackSection {
                name: "mi_ti_rdi".into(),
                eps: default_eps(),
                alpha: default_alpha(),
                iterations: 300,
                inferences: 5,
                mu: 1.0,
                loss: "logit".into(),
                transform: "rdi".into(),
                ti_kernel: 5,
                mask_p: 0.0,
                mask_layers: default_mask_layers(),
                seed: None,
            },
            AttackSection {
                name: "rapa".into(),
                eps: default_eps(),
                alpha: default_alpha(),
                iterations: 300,
                inferences: 5,
                mu: 1.0,
                loss: "logit".into(),
                transform: "rdi".into(),
                ti_kernel: 5,
                mask_p: 0.05,
                mask_layers: default_mask_layers(),
                seed: None,
            },
        ],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ratio_syntax() {
        assert_eq!(parse_ratio("16/255").unwrap(), 16.0 / 255.0);
        assert_eq!(parse_ratio("0.05").unwrap(), 0.05);
        assert!(parse_ratio("x/y").is_err());
        assert!(parse_ratio("1/0").is_err());
    }

    #[test]
    fn reference_manifest_is_valid_and_hash_stable() {
        let m = baseline_vs_rapa(17);
        m.validate().unwrap();
        assert_eq!(m.hash(), m.hash());
        let reparsed = RunManifest::from_toml(&m.canonical_toml()).unwrap();
        assert_eq!(reparsed.hash(), m.hash());
    }

    #[test]
    fn zero_attacks_rejected() {
        let mut m = baseline_vs_rapa(17);
        m.attacks.clear();
        assert!(m.validate().is_err());
    }

    #[test]
    fn fair_compute_is_enforced() {
        let mut m = baseline_vs_rapa(17);
        m.attacks[1].inferences = 1;
        let err = m.validate().unwrap_err();
        assert!(err.to_string().contains("fair-compute"), "{err}");
    }

    #[test]
    fn duplicate_attack_names_rejected() {
        let mut m = baseline_vs_rapa(17);
        m.attacks[1].name = m.attacks[0].name.clone();
        assert!(m.validate().is_err());
    }

    #[test]
    fn exactly_one_surrogate() {
        let mut m = baseline_vs_rapa(17);
        m.models[1].role = ModelRole::Surrogate;
        assert!(m.validate().is_err());
    }
}
