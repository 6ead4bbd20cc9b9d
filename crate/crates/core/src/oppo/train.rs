use rand::Rng;
use serde::{Deserialize, Serialize};

use super::losses::{him_loss, norm_loss, pm_loss, select_pos_neg};
use crate::autograd::{clip_grad_norm, grad_norm, warmup_scale, AdamW, Graph, Group, ParamKey, Tensor, Var};
use crate::checkpoint::{check_shapes, Checkpoint, ShapeEntry};
use crate::config::{EncoderInput, RunConfig};
use crate::data::{segment_sample, OfflineDataset, PreferenceDataset, SegmentBatch};
use crate::error::{Error, Result};
use crate::nn::normal_tensor;
use crate::rng::{self, domain, StreamRng};
use crate::seqnets::{Condition, Conditioning, Encoder, PolicyConfig, SeqPolicy};

const Z_STAR: ParamKey = ParamKey {
    group: Group::Context,
    index: 0,
};

/// Trajectories per encoder call when embedding for evaluation.
const EMBED_CHUNK: usize = 32;

/// `(positive, negative)` index pairs of the strict preferences in `prefs`.
pub fn preference_pairs(prefs: &PreferenceDataset) -> Result<Vec<(usize, usize)>> {
    let mut out = Vec::new();
    for t in &prefs.triples {
        if let Some(pair) = select_pos_neg(t)? {
            out.push(pair);
        }
    }
    Ok(out)
}

/// Encoder, contextual policy and the learned optimal context.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBundle {
    pub encoder: Encoder,
    pub policy: SeqPolicy,
    /// `1 x z_dim`.
    pub z_star: Tensor,
    pub config: RunConfig,
    pub dataset_ref: String,
}

impl ModelBundle {
    pub fn init(config: &RunConfig, dataset_ref: &str) -> Result<Self> {
        config.validate()?;
        let spec = config.env_spec();
        let seed = config.optim.seed;
        let encoder = Encoder::new(
            config.model.encoder_config(&spec),
            &mut rng::stream(seed, domain::INIT, 0),
        )?;
        let policy = SeqPolicy::new(
            PolicyConfig::for_env(
                &spec,
                config.model.policy_shape(),
                Conditioning::Context {
                    z_dim: config.model.z_dim,
                },
            ),
            &mut rng::stream(seed, domain::INIT, 1),
        )?;
        let z_star = normal_tensor(1, config.model.z_dim, 0.1, &mut rng::stream(seed, domain::INIT, 2));
        Ok(Self {
            encoder,
            policy,
            z_star,
            config: config.clone(),
            dataset_ref: dataset_ref.to_string(),
        })
    }

    pub fn z_star_vec(&self) -> Vec<f64> {
        self.z_star.data().to_vec()
    }

    /// Encoder input for the trajectories at `indices`. Window mode takes a
    /// random window per trajectory when `rng` is given and the first window
    /// otherwise.
    pub fn encoder_batch(
        &self,
        dataset: &OfflineDataset,
        indices: &[usize],
        rng: Option<&mut StreamRng>,
    ) -> Result<SegmentBatch> {
        match self.config.model.encoder_input {
            EncoderInput::Trajectory => SegmentBatch::full_trajectories(dataset, indices),
            EncoderInput::Window => {
                let k = self.config.model.context_len;
                let windows = match rng {
                    Some(rng) => indices
                        .iter()
                        .map(|&i| {
                            let len = dataset
                                .trajectories
                                .get(i)
                                .ok_or_else(|| Error::Input(format!("trajectory index {i} out of range")))?
                                .length;
                            Ok((i, rng.random_range(0..len)))
                        })
                        .collect::<Result<Vec<_>>>()?,
                    None => indices.iter().map(|&i| (i, 0)).collect(),
                };
                SegmentBatch::from_windows(dataset, &windows, k)
            }
        }
    }

    /// Eval-mode embeddings of the trajectories at `indices`.
    pub fn embed(&self, dataset: &OfflineDataset, indices: &[usize]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(indices.len());
        for chunk in indices.chunks(EMBED_CHUNK) {
            let batch = self.encoder_batch(dataset, chunk, None)?;
            out.extend(self.encoder.embed(&batch)?);
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Him,
    Pm,
}

/// One line of the metric log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub phase: Phase,
    pub total: f64,
    pub him: Option<f64>,
    pub pm: Option<f64>,
    pub norm: Option<f64>,
    pub grad_norm_encoder: Option<f64>,
    pub grad_norm_policy: Option<f64>,
    pub grad_norm_z: Option<f64>,
    pub z_star_norm: f64,
    pub lr_scale: f64,
}

/// Everything needed to continue training bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub bundle: ModelBundle,
    /// Completed iterations (one HIM phase plus, if enabled, one PM phase).
    pub step: usize,
    pub opt_encoder: AdamW,
    pub opt_policy: AdamW,
    pub opt_z: AdamW,
}

impl TrainState {
    pub fn new(bundle: ModelBundle) -> Self {
        let o = &bundle.config.optim;
        Self {
            opt_encoder: AdamW::new(o.lr, o.weight_decay, &bundle.encoder.store.sizes()),
            opt_policy: AdamW::new(o.lr, o.weight_decay, &bundle.policy.store.sizes()),
            opt_z: AdamW::new(o.lr_z, o.weight_decay, &[bundle.z_star.len()]),
            bundle,
            step: 0,
        }
    }

    fn phase_rng(&self, phase: Phase) -> StreamRng {
        let offset = match phase {
            Phase::Him => 0,
            Phase::Pm => 1,
        };
        rng::stream(
            self.bundle.config.optim.seed,
            domain::TRAIN,
            2 * self.step as u64 + offset,
        )
    }

    /// Encodes a preference batch; returns `(z_plus, z_minus)` nodes.
    fn encode_pairs(
        &self,
        g: &mut Graph,
        dataset: &OfflineDataset,
        pairs: &[(usize, usize)],
        rng: &mut StreamRng,
    ) -> Result<(Var, Var)> {
        let n = self.bundle.config.optim.pref_batch_size;
        let picked: Vec<(usize, usize)> = (0..n).map(|_| pairs[rng.random_range(0..pairs.len())]).collect();
        let pos: Vec<usize> = picked.iter().map(|p| p.0).collect();
        let neg: Vec<usize> = picked.iter().map(|p| p.1).collect();
        let mut idx = pos;
        idx.extend(neg);
        let batch = self.bundle.encoder_batch(dataset, &idx, Some(rng))?;
        let z = self.bundle.encoder.encode(g, &batch, Some(rng))?;
        let zp = g.gather(&[z], (0..n).map(|r| (0, r)).collect());
        let zm = g.gather(&[z], (n..2 * n).map(|r| (0, r)).collect());
        Ok((zp, zm))
    }

    /// HIM phase: updates the encoder and the policy.
    pub fn him_step(&mut self, dataset: &OfflineDataset, pairs: &[(usize, usize)]) -> Result<StepRecord> {
        let o = self.bundle.config.optim.clone();
        let k = self.bundle.config.model.context_len;
        let mut rng = self.phase_rng(Phase::Him);
        let mut g = Graph::new();
        let (window, z) = match self.bundle.config.model.encoder_input {
            EncoderInput::Window => {
                let window = segment_sample(dataset, o.batch_size, k, &mut rng)?;
                let z = self.bundle.encoder.encode(&mut g, &window, Some(&mut rng))?;
                (window, z)
            }
            EncoderInput::Trajectory => {
                let idx: Vec<usize> = (0..o.batch_size).map(|_| rng.random_range(0..dataset.len())).collect();
                let windows: Vec<(usize, usize)> = idx
                    .iter()
                    .map(|&i| (i, rng.random_range(0..dataset.trajectories[i].length)))
                    .collect();
                let window = SegmentBatch::from_windows(dataset, &windows, k)?;
                let full = SegmentBatch::full_trajectories(dataset, &idx)?;
                let z = self.bundle.encoder.encode(&mut g, &full, Some(&mut rng))?;
                (window, z)
            }
        };
        let pred = self
            .bundle
            .policy
            .forward(&mut g, &Condition::Context(z), &window, Some(&mut rng))?;
        let him = him_loss(&mut g, pred, &window)?;
        let with_pm = o.him_pm_alpha_in_him && o.alpha > 0.0 && !pairs.is_empty();
        let (pm, all_z) = if with_pm {
            let (zp, zm) = self.encode_pairs(&mut g, dataset, pairs, &mut rng)?;
            let zs = g.constant(self.bundle.z_star.clone());
            let pm = pm_loss(&mut g, zs, zp, zm, o.margin);
            let n_him = g.value(z).rows();
            let n_pm = g.value(zp).rows();
            let rows = (0..n_him)
                .map(|r| (0, r))
                .chain((0..n_pm).map(|r| (1, r)))
                .chain((0..n_pm).map(|r| (2, r)))
                .collect();
            (Some(pm), g.gather(&[z, zp, zm], rows))
        } else {
            (None, z)
        };
        let norm = norm_loss(&mut g, all_z);
        let mut total = him;
        if let Some(pm) = pm {
            let scaled = g.scale(pm, o.alpha);
            total = g.add(total, scaled);
        }
        let scaled = g.scale(norm, o.beta);
        total = g.add(total, scaled);
        let mut record = StepRecord {
            step: self.step,
            phase: Phase::Him,
            total: g.value(total).item(),
            him: Some(g.value(him).item()),
            pm: pm.map(|v| g.value(v).item()),
            norm: Some(g.value(norm).item()),
            grad_norm_encoder: None,
            grad_norm_policy: None,
            grad_norm_z: None,
            z_star_norm: self.bundle.z_star.sq_norm().sqrt(),
            lr_scale: warmup_scale(self.step as u64, o.warmup_steps as u64),
        };
        check_finite(&record)?;
        let grads = g.backward(total);
        let mut ge = grads.group(Group::Encoder, self.bundle.encoder.store.len());
        let mut gp = grads.group(Group::Policy, self.bundle.policy.store.len());
        record.grad_norm_encoder = Some(grad_norm(ge.iter()));
        record.grad_norm_policy = Some(grad_norm(gp.iter()));
        check_finite(&record)?;
        clip_grad_norm(&mut [&mut ge, &mut gp], o.grad_clip);
        self.opt_encoder
            .update(self.bundle.encoder.store.values_mut(), &ge, record.lr_scale);
        self.opt_policy
            .update(self.bundle.policy.store.values_mut(), &gp, record.lr_scale);
        Ok(record)
    }

    /// PM phase: updates z* and, unless `oppo_a` is set, the encoder.
    pub fn pm_step(&mut self, dataset: &OfflineDataset, pairs: &[(usize, usize)]) -> Result<StepRecord> {
        if pairs.is_empty() {
            return Err(Error::Data("no strict preferences to train on".into()));
        }
        let o = self.bundle.config.optim.clone();
        let mut rng = self.phase_rng(Phase::Pm);
        let mut g = Graph::new();
        let (zp, zm) = self.encode_pairs(&mut g, dataset, pairs, &mut rng)?;
        let zs = g.param(Z_STAR, &self.bundle.z_star);
        let pm = pm_loss(&mut g, zs, zp, zm, o.margin);
        let lr_scale = warmup_scale(self.step as u64, o.warmup_steps as u64);
        let mut record = StepRecord {
            step: self.step,
            phase: Phase::Pm,
            total: g.value(pm).item(),
            him: None,
            pm: Some(g.value(pm).item()),
            norm: None,
            grad_norm_encoder: None,
            grad_norm_policy: None,
            grad_norm_z: None,
            z_star_norm: self.bundle.z_star.sq_norm().sqrt(),
            lr_scale,
        };
        check_finite(&record)?;
        let grads = g.backward(pm);
        let mut gz = grads.group(Group::Context, 1);
        record.grad_norm_z = Some(grad_norm(gz.iter()));
        check_finite(&record)?;
        if o.oppo_a {
            clip_grad_norm(&mut [&mut gz], o.grad_clip);
        } else {
            let mut ge = grads.group(Group::Encoder, self.bundle.encoder.store.len());
            record.grad_norm_encoder = Some(grad_norm(ge.iter()));
            check_finite(&record)?;
            clip_grad_norm(&mut [&mut ge, &mut gz], o.grad_clip);
            self.opt_encoder
                .update(self.bundle.encoder.store.values_mut(), &ge, lr_scale);
        }
        self.opt_z
            .update(std::slice::from_mut(&mut self.bundle.z_star), &gz, 1.0);
        Ok(record)
    }

    /// One HIM phase followed by one PM phase (when enabled).
    pub fn train_step(&mut self, dataset: &OfflineDataset, pairs: &[(usize, usize)]) -> Result<Vec<StepRecord>> {
        let mut out = vec![self.him_step(dataset, pairs)?];
        if self.bundle.config.optim.pm_phase {
            out.push(self.pm_step(dataset, pairs)?);
        }
        self.step += 1;
        Ok(out)
    }

    fn meta(&self) -> serde_json::Value {
        let b = &self.bundle;
        serde_json::json!({
            "kind": "oppo",
            "step": self.step,
            "config": b.config,
            "config_hash": b.config.hash(),
            "dataset_ref": b.dataset_ref,
            "rng": {"seed": b.config.optim.seed, "domain": domain::TRAIN, "next_stream": 2 * self.step},
            "optimizer_steps": [self.opt_encoder.step, self.opt_policy.step, self.opt_z.step],
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new(self.meta());
        c.push_group("encoder", self.bundle.encoder.store.entries());
        c.push_group("policy", self.bundle.policy.store.entries());
        c.push_group("context", vec![("z_star".into(), self.bundle.z_star.clone())]);
        for (name, opt) in [
            ("encoder", &self.opt_encoder),
            ("policy", &self.opt_policy),
            ("context", &self.opt_z),
        ] {
            c.push_group(&format!("optim.{name}"), moments(opt));
        }
        c
    }

    /// Rebuilds a state from a checkpoint, validating the shape table
    /// against the architecture its config describes.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let kind = ckpt.meta.get("kind").and_then(|v| v.as_str());
        if kind != Some("oppo") {
            return Err(Error::Data(format!("checkpoint kind {kind:?} is not `oppo`")));
        }
        let config: RunConfig = serde_json::from_value(ckpt.meta["config"].clone())?;
        let dataset_ref = ckpt.meta["dataset_ref"].as_str().unwrap_or_default().to_string();
        let step = ckpt.meta["step"]
            .as_u64()
            .ok_or_else(|| Error::Data("checkpoint has no step".into()))? as usize;
        let mut state = TrainState::new(ModelBundle::init(&config, &dataset_ref)?);
        let expected = state.to_checkpoint().shapes();
        check_shapes(&expected, &ckpt.shapes()).map_err(Error::Data)?;
        state.bundle.encoder.store.load(&ckpt.group("encoder"))?;
        state.bundle.policy.store.load(&ckpt.group("policy"))?;
        state.bundle.z_star = ckpt.tensor("context.z_star").expect("shape-checked").clone();
        let steps: Vec<u64> = serde_json::from_value(ckpt.meta["optimizer_steps"].clone())?;
        for (i, (name, opt)) in [
            ("encoder", &mut state.opt_encoder),
            ("policy", &mut state.opt_policy),
            ("context", &mut state.opt_z),
        ]
        .into_iter()
        .enumerate()
        {
            restore_moments(opt, &ckpt.group(&format!("optim.{name}")));
            opt.step = steps.get(i).copied().unwrap_or(0);
        }
        state.step = step;
        Ok(state)
    }

    pub fn shapes(&self) -> Vec<ShapeEntry> {
        self.to_checkpoint().shapes()
    }
}

fn moments(opt: &AdamW) -> Vec<(String, Tensor)> {
    let mut out = Vec::new();
    for (i, (m, v)) in opt.m.iter().zip(&opt.v).enumerate() {
        out.push((format!("m.{i}"), Tensor::row_vector(m.clone())));
        out.push((format!("v.{i}"), Tensor::row_vector(v.clone())));
    }
    out
}

fn restore_moments(opt: &mut AdamW, entries: &[(String, Tensor)]) {
    for (i, pair) in entries.chunks(2).enumerate() {
        opt.m[i] = pair[0].1.data().to_vec();
        opt.v[i] = pair[1].1.data().to_vec();
    }
}

fn check_finite(record: &StepRecord) -> Result<()> {
    let parts = [
        Some(record.total),
        record.him,
        record.pm,
        record.norm,
        record.grad_norm_encoder,
        record.grad_norm_policy,
        record.grad_norm_z,
    ];
    if parts.iter().flatten().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            step: record.step as u64,
            detail: serde_json::to_string(record)?,
        })
    }
}

/// Trains from scratch for `config.optim.steps` iterations, passing every
/// record to `log` and every checkpoint (each `checkpoint_every`
/// iterations and at the end) to `save`.
pub fn oppo_train(
    dataset: &OfflineDataset,
    prefs: &PreferenceDataset,
    config: &RunConfig,
    log: &mut dyn FnMut(&StepRecord) -> Result<()>,
    save: &mut dyn FnMut(&TrainState) -> Result<()>,
) -> Result<TrainState> {
    let state = TrainState::new(ModelBundle::init(config, &dataset.content_hash)?);
    continue_training(state, dataset, prefs, log, save)
}

/// Runs the remaining iterations of `state` up to `config.optim.steps`.
pub fn continue_training(
    mut state: TrainState,
    dataset: &OfflineDataset,
    prefs: &PreferenceDataset,
    log: &mut dyn FnMut(&StepRecord) -> Result<()>,
    save: &mut dyn FnMut(&TrainState) -> Result<()>,
) -> Result<TrainState> {
    if state.bundle.dataset_ref != dataset.content_hash {
        return Err(Error::HashMismatch {
            expected: state.bundle.dataset_ref.clone(),
            found: dataset.content_hash.clone(),
        });
    }
    prefs.validate_against(dataset)?;
    if state.bundle.config.env_spec() != dataset.env {
        return Err(Error::Config("config env does not match the dataset env".into()));
    }
    let pairs = preference_pairs(prefs)?;
    let total = state.bundle.config.optim.steps;
    let every = state.bundle.config.optim.checkpoint_every;
    while state.step < total {
        for r in state.train_step(dataset, &pairs)? {
            log(&r)?;
        }
        if (every > 0 && state.step % every == 0) || state.step == total {
            save(&state)?;
        }
    }
    Ok(state)
}
