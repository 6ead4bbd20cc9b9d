//! Run configuration: one TOML document with `[env]`, `[data]`,
//! `[preference]`, `[model]`, `[optim]` and `[eval]` tables.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Split, TeacherMode};
use crate::envs::{EnvId, EnvSpec};
use crate::error::{Error, Result};
use crate::nn::TransformerShape;
use crate::seqnets::EncoderConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvSection {
    pub env_id: EnvId,
    /// Overrides the env's default horizon when set.
    pub horizon: Option<usize>,
}

impl Default for EnvSection {
    fn default() -> Self {
        Self {
            env_id: EnvId::Gridworld8,
            horizon: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSection {
    pub split: Split,
    pub n_traj: usize,
    pub seed: u64,
    /// Size of the independently seeded held-out dataset used by reports.
    pub heldout_n_traj: usize,
    pub heldout_seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            split: Split::MediumReplay,
            n_traj: 200,
            seed: 0,
            heldout_n_traj: 200,
            heldout_seed: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreferenceSection {
    pub mode: TeacherMode,
    pub n_pairs: i64,
    pub tie_eps: f64,
    pub seed: u64,
    /// Pairs drawn on the held-out dataset for accuracy reports.
    pub heldout_pairs: i64,
}

impl Default for PreferenceSection {
    fn default() -> Self {
        Self {
            mode: TeacherMode::Deterministic,
            n_pairs: 500,
            tie_eps: crate::data::DEFAULT_TIE_EPS,
            seed: 0,
            heldout_pairs: 500,
        }
    }
}

/// What the hindsight encoder reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderInput {
    /// The same `context_len` window the policy reconstructs.
    Window,
    /// The whole trajectory.
    Trajectory,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    pub width: usize,
    pub encoder_layers: usize,
    pub encoder_heads: usize,
    pub policy_layers: usize,
    pub policy_heads: usize,
    pub z_dim: usize,
    pub context_len: usize,
    pub dropout: f64,
    pub encoder_input: EncoderInput,
    pub reward_hidden: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            width: 64,
            encoder_layers: 3,
            encoder_heads: 2,
            policy_layers: 3,
            policy_heads: 1,
            z_dim: 16,
            context_len: 20,
            dropout: 0.1,
            encoder_input: EncoderInput::Window,
            reward_hidden: 64,
        }
    }
}

impl ModelSection {
    pub fn encoder_shape(&self) -> TransformerShape {
        TransformerShape {
            width: self.width,
            n_layers: self.encoder_layers,
            n_heads: self.encoder_heads,
            dropout: self.dropout,
        }
    }

    pub fn policy_shape(&self) -> TransformerShape {
        TransformerShape {
            width: self.width,
            n_layers: self.policy_layers,
            n_heads: self.policy_heads,
            dropout: self.dropout,
        }
    }

    pub fn encoder_config(&self, spec: &EnvSpec) -> EncoderConfig {
        EncoderConfig {
            state_dim: spec.state_dim,
            action_dim: spec.action_dim(),
            z_dim: self.z_dim,
            max_timestep: spec.horizon + 1,
            shape: self.encoder_shape(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimSection {
    pub steps: usize,
    pub batch_size: usize,
    pub pref_batch_size: usize,
    pub lr: f64,
    pub lr_z: f64,
    pub weight_decay: f64,
    pub alpha: f64,
    pub beta: f64,
    pub margin: f64,
    pub grad_clip: f64,
    pub warmup_steps: usize,
    /// Blocks the encoder update in the preference phase.
    pub oppo_a: bool,
    /// Includes `alpha * L_PM` (with a frozen z*) in the HIM-phase loss.
    pub him_pm_alpha_in_him: bool,
    /// Runs a preference phase after every HIM step.
    pub pm_phase: bool,
    pub checkpoint_every: usize,
    pub seed: u64,
    pub reward_steps: usize,
    pub reward_lr: f64,
    pub reward_batch_size: usize,
    /// Return-to-go values are divided by this before entering the network.
    pub rtg_scale: f64,
}

impl Default for OptimSection {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch_size: 64,
            pref_batch_size: 64,
            lr: 1e-4,
            lr_z: 1e-3,
            weight_decay: 1e-4,
            alpha: 0.5,
            beta: 0.1,
            margin: 1.0,
            grad_clip: 0.25,
            warmup_steps: 2_000,
            oppo_a: false,
            him_pm_alpha_in_him: true,
            pm_phase: true,
            checkpoint_every: 5_000,
            seed: 0,
            reward_steps: 2_000,
            reward_lr: 1e-3,
            reward_batch_size: 64,
            rtg_scale: 10.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    pub n_episodes: usize,
    pub seeds: Vec<u64>,
    pub amounts: Vec<i64>,
    pub n_embed_sample: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            n_episodes: 10,
            seeds: vec![0, 1, 2],
            amounts: vec![5000, 500, 100],
            n_embed_sample: 200,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub env: EnvSection,
    pub data: DataSection,
    pub preference: PreferenceSection,
    pub model: ModelSection,
    pub optim: OptimSection,
    pub eval: EvalSection,
}

impl RunConfig {
    /// Desk-scale defaults.
    pub fn desk() -> Self {
        Self::default()
    }

    /// The full-scale hyperparameters (width 128, 1e5 steps, 50k labels).
    pub fn full_scale() -> Self {
        let mut c = Self::default();
        c.model.width = 128;
        c.optim.steps = 100_000;
        c.optim.warmup_steps = 100_000;
        c.optim.checkpoint_every = 10_000;
        c.preference.n_pairs = 50_000;
        c.eval.amounts = vec![50_000, 1_000, 500];
        c
    }

    pub fn env_spec(&self) -> EnvSpec {
        let mut spec = EnvSpec::new(self.env.env_id);
        if let Some(h) = self.env.horizon {
            spec.horizon = h;
        }
        spec
    }

    /// Parses a TOML document, reporting every unknown key and every
    /// invalid value in one error.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let value: toml::Value =
            toml::from_str(text).map_err(|e| Error::Config(format!("malformed config: {e}")))?;
        let mut problems: Vec<String> = unknown_keys(&value)
            .into_iter()
            .map(|k| format!("unknown key `{k}`"))
            .collect();
        if !problems.is_empty() {
            return Err(Error::Config(problems.join("; ")));
        }
        let config: RunConfig = value
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        problems.extend(config.problems());
        if problems.is_empty() {
            Ok(config)
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::load(path, e.to_string()))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    fn problems(&self) -> Vec<String> {
        let mut p = Vec::new();
        let mut check = |ok: bool, msg: &str| {
            if !ok {
                p.push(msg.to_string());
            }
        };
        check(self.env.horizon != Some(0), "env.horizon must be positive");
        check(self.data.n_traj >= 2, "data.n_traj must be at least 2");
        check(self.data.heldout_n_traj >= 2, "data.heldout_n_traj must be at least 2");
        check(self.preference.n_pairs > 0, "preference.n_pairs must be positive");
        check(self.preference.heldout_pairs > 0, "preference.heldout_pairs must be positive");
        check(self.preference.tie_eps >= 0.0, "preference.tie_eps must be non-negative");
        let m = &self.model;
        check(m.width > 0, "model.width must be positive");
        check(m.encoder_layers > 0 && m.policy_layers > 0, "model layer counts must be positive");
        check(
            m.encoder_heads > 0 && m.width % m.encoder_heads == 0,
            "model.width must be divisible by model.encoder_heads",
        );
        check(
            m.policy_heads > 0 && m.width % m.policy_heads == 0,
            "model.width must be divisible by model.policy_heads",
        );
        check(m.z_dim > 0, "model.z_dim must be positive");
        check(m.context_len > 0, "model.context_len must be positive");
        check((0.0..1.0).contains(&m.dropout), "model.dropout must lie in [0, 1)");
        check(m.reward_hidden > 0, "model.reward_hidden must be positive");
        let o = &self.optim;
        check(o.steps > 0, "optim.steps must be positive");
        check(o.batch_size > 0 && o.pref_batch_size > 0, "optim batch sizes must be positive");
        check(o.lr > 0.0 && o.lr_z > 0.0 && o.reward_lr > 0.0, "optim learning rates must be positive");
        check(o.weight_decay >= 0.0, "optim.weight_decay must be non-negative");
        check(o.alpha >= 0.0, "optim.alpha must be non-negative");
        check(o.beta >= 0.0, "optim.beta must be non-negative");
        check(o.margin > 0.0, "optim.margin must be positive");
        check(o.grad_clip > 0.0, "optim.grad_clip must be positive");
        check(o.reward_batch_size > 0, "optim.reward_batch_size must be positive");
        check(o.rtg_scale > 0.0, "optim.rtg_scale must be positive");
        let e = &self.eval;
        check(e.n_episodes > 0, "eval.n_episodes must be positive");
        check(!e.seeds.is_empty(), "eval.seeds must not be empty");
        check(e.amounts.iter().all(|&a| a > 0), "eval.amounts must be positive");
        p
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// Dotted paths of keys in `value` that the schema does not define.
fn unknown_keys(value: &toml::Value) -> Vec<String> {
    let mut schema = RunConfig::default();
    schema.env.horizon = Some(1);
    let schema = toml::Value::try_from(&schema).expect("schema serializes");
    let mut out = BTreeSet::new();
    walk(value, &schema, "", &mut out);
    out.into_iter().collect()
}

fn walk(value: &toml::Value, schema: &toml::Value, prefix: &str, out: &mut BTreeSet<String>) {
    let (Some(table), Some(known)) = (value.as_table(), schema.as_table()) else {
        return;
    };
    for (key, v) in table {
        let path = if prefix.is_empty() {
            key.clone()
        } else {
            format!("{prefix}.{key}")
        };
        match known.get(key) {
            Some(s) if s.is_table() => walk(v, s, &path, out),
            Some(_) => {}
            None => {
                out.insert(path);
            }
        }
    }
}
