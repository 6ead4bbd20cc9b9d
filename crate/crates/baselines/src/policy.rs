use serde::{Deserialize, Serialize};

use oppo_core::autograd::{clip_grad_norm, grad_norm, warmup_scale, AdamW, Graph, Group};
use oppo_core::checkpoint::{check_shapes, Checkpoint};
use oppo_core::config::RunConfig;
use oppo_core::data::{segment_sample, OfflineDataset, PreferenceDataset, SegmentBatch};
use oppo_core::envs;
use oppo_core::oppo::him_loss;
use oppo_core::rng::{self, domain, StreamRng};
use oppo_core::seqnets::{Condition, Conditioning, PolicyConfig, RolloutCondition, SeqPolicy};
use oppo_eval::{evaluate_policy, ScoreSummary};
use oppo_core::{Error, Result};

use crate::reward::{relabel_dataset, train_reward_model, RewardChannel, RewardModel, RewardRecord};

/// Stream index offset for baseline policy training in the training domain.
const POLICY_STREAM: u64 = 1 << 41;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    /// Return-conditioned on learned rewards.
    DtPseudo,
    /// Return-conditioned on the ground-truth rewards.
    DtTrue,
    Bc,
}

impl BaselineKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            BaselineKind::DtPseudo => "dt_pseudo",
            BaselineKind::DtTrue => "dt_true",
            BaselineKind::Bc => "bc",
        }
    }
}

/// A trained baseline policy plus what it needs at evaluation time.
#[derive(Clone, Debug, PartialEq)]
pub struct BaselinePolicy {
    pub kind: BaselineKind,
    pub policy: SeqPolicy,
    /// Initial return-to-go at evaluation (unscaled); unused by BC.
    pub target_return: f64,
    pub rtg_scale: f64,
    pub context_len: usize,
    pub config: RunConfig,
    pub dataset_ref: String,
    /// The learned reward the return-to-go is measured in (pseudo arm only).
    pub reward_model: Option<RewardModel>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyRecord {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub lr_scale: f64,
}

/// Return-to-go of every batch row, divided by `scale`; padding rows get 0.
pub fn window_rtg(batch: &SegmentBatch, rewards: &RewardChannel, scale: f64) -> Vec<f64> {
    let k = batch.k;
    let mut out = vec![0.0; batch.n_rows()];
    for (b, &ti) in batch.traj_index.iter().enumerate() {
        let r = &rewards.rewards[ti];
        for row in b * k..(b + 1) * k {
            if batch.mask[row] {
                out[row] = r[batch.timesteps[row]..].iter().sum::<f64>() / scale;
            }
        }
    }
    out
}

fn build_policy(config: &RunConfig, conditioning: Conditioning) -> Result<SeqPolicy> {
    config.validate()?;
    SeqPolicy::new(
        PolicyConfig::for_env(&config.env_spec(), config.model.policy_shape(), conditioning),
        &mut rng::stream(config.optim.seed, domain::INIT, 4),
    )
}

fn fit(
    policy: &mut SeqPolicy,
    dataset: &OfflineDataset,
    config: &RunConfig,
    rewards: Option<&RewardChannel>,
    log: &mut dyn FnMut(&PolicyRecord) -> Result<()>,
) -> Result<()> {
    let o = &config.optim;
    let k = config.model.context_len;
    let mut opt = AdamW::new(o.lr, o.weight_decay, &policy.store.sizes());
    for step in 0..o.steps {
        let mut rng: StreamRng = rng::stream(o.seed, domain::TRAIN, POLICY_STREAM + step as u64);
        let batch = segment_sample(dataset, o.batch_size, k, &mut rng)?;
        let cond = match rewards {
            Some(r) => Condition::ReturnToGo(window_rtg(&batch, r, o.rtg_scale)),
            None => Condition::None,
        };
        let mut g = Graph::new();
        let pred = policy.forward(&mut g, &cond, &batch, Some(&mut rng))?;
        let loss = him_loss(&mut g, pred, &batch)?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFinite {
                step: step as u64,
                detail: format!("policy loss {value}"),
            });
        }
        let lr_scale = warmup_scale(step as u64, o.warmup_steps as u64);
        let grads = g.backward(loss);
        let mut gp = grads.group(Group::Policy, policy.store.len());
        let norm = grad_norm(gp.iter());
        clip_grad_norm(&mut [&mut gp], o.grad_clip);
        opt.update(policy.store.values_mut(), &gp, lr_scale);
        log(&PolicyRecord {
            step,
            loss: value,
            grad_norm: norm,
            lr_scale,
        })?;
    }
    Ok(())
}

/// Trains a return-conditioned policy on `rewards` and sets its evaluation
/// target to the largest return the channel assigns to a dataset trajectory.
pub fn train_return_conditioned(
    dataset: &OfflineDataset,
    rewards: &RewardChannel,
    config: &RunConfig,
    log: &mut dyn FnMut(&PolicyRecord) -> Result<()>,
) -> Result<BaselinePolicy> {
    if rewards.dataset_ref != dataset.content_hash {
        return Err(Error::HashMismatch {
            expected: rewards.dataset_ref.clone(),
            found: dataset.content_hash.clone(),
        });
    }
    if rewards.rewards.len() != dataset.len()
        || rewards
            .rewards
            .iter()
            .zip(&dataset.trajectories)
            .any(|(r, t)| r.len() != t.length)
    {
        return Err(Error::Input("reward channel does not cover the dataset".into()));
    }
    let mut policy = build_policy(config, Conditioning::ReturnToGo)?;
    fit(&mut policy, dataset, config, Some(rewards), log)?;
    let target_return = rewards.returns().into_iter().fold(f64::NEG_INFINITY, f64::max);
    Ok(BaselinePolicy {
        kind: if rewards.pseudo {
            BaselineKind::DtPseudo
        } else {
            BaselineKind::DtTrue
        },
        policy,
        target_return,
        rtg_scale: config.optim.rtg_scale,
        context_len: config.model.context_len,
        config: config.clone(),
        dataset_ref: dataset.content_hash.clone(),
        reward_model: None,
    })
}

/// Behavior cloning with the same causal architecture and no conditioning.
pub fn train_bc(
    dataset: &OfflineDataset,
    config: &RunConfig,
    log: &mut dyn FnMut(&PolicyRecord) -> Result<()>,
) -> Result<BaselinePolicy> {
    let mut policy = build_policy(config, Conditioning::Unconditioned)?;
    fit(&mut policy, dataset, config, None, log)?;
    Ok(BaselinePolicy {
        kind: BaselineKind::Bc,
        policy,
        target_return: 0.0,
        rtg_scale: config.optim.rtg_scale,
        context_len: config.model.context_len,
        config: config.clone(),
        dataset_ref: dataset.content_hash.clone(),
        reward_model: None,
    })
}

impl BaselinePolicy {
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::new(serde_json::json!({
            "kind": self.kind.as_str(),
            "step": self.config.optim.steps,
            "config": self.config,
            "config_hash": self.config.hash(),
            "dataset_ref": self.dataset_ref,
            "target_return": self.target_return,
        }));
        c.push_group("policy", self.policy.store.entries());
        if let Some(rm) = &self.reward_model {
            c.push_group("reward", rm.store.entries());
        }
        c
    }

    /// Reward used to decrement the return-to-go during rollouts.
    pub fn step_reward(&self, state: &[f64], action: &[f64]) -> f64 {
        match (&self.kind, &self.reward_model) {
            (BaselineKind::DtPseudo, Some(rm)) => rm.reward(state, action),
            _ => envs::reward(&self.config.env_spec(), state, action).unwrap_or(0.0),
        }
    }

    /// Scores greedy rollouts of the policy.
    pub fn evaluate(&self, n_episodes: usize, seeds: &[u64]) -> Result<ScoreSummary> {
        let spec = self.config.env_spec();
        let reward = |s: &[f64], a: &[f64]| self.step_reward(s, a);
        let cond = match self.kind {
            BaselineKind::Bc => RolloutCondition::None,
            _ => RolloutCondition::ReturnToGo {
                target: self.target_return,
                scale: self.rtg_scale,
                reward: &reward,
            },
        };
        evaluate_policy(&spec, &self.policy, &cond, self.context_len, n_episodes, seeds)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let kind: BaselineKind = serde_json::from_value(ckpt.meta["kind"].clone())
            .map_err(|_| Error::Data(format!("checkpoint kind {} is not a baseline", ckpt.meta["kind"])))?;
        let config: RunConfig = serde_json::from_value(ckpt.meta["config"].clone())?;
        let conditioning = match kind {
            BaselineKind::Bc => Conditioning::Unconditioned,
            _ => Conditioning::ReturnToGo,
        };
        let mut policy = build_policy(&config, conditioning)?;
        let mut expected = Checkpoint::new(serde_json::Value::Null);
        expected.push_group("policy", policy.store.entries());
        let mut reward_model = None;
        if kind == BaselineKind::DtPseudo {
            let spec = config.env_spec();
            let rm = RewardModel::new(spec.state_dim, spec.action_dim(), config.model.reward_hidden, &mut rng::stream(0, domain::INIT, 3));
            expected.push_group("reward", rm.store.entries());
            reward_model = Some(rm);
        }
        check_shapes(&expected.shapes(), &ckpt.shapes()).map_err(Error::Data)?;
        policy.store.load(&ckpt.group("policy"))?;
        if let Some(rm) = reward_model.as_mut() {
            rm.store.load(&ckpt.group("reward"))?;
        }
        Ok(Self {
            reward_model,
            kind,
            policy,
            target_return: ckpt.meta["target_return"].as_f64().unwrap_or(0.0),
            rtg_scale: config.optim.rtg_scale,
            context_len: config.model.context_len,
            dataset_ref: ckpt.meta["dataset_ref"].as_str().unwrap_or_default().to_string(),
            config,
        })
    }
}

/// The full two-step pipeline: fit a reward model to `prefs`, relabel the
/// dataset with it, then train a return-conditioned policy on the result.
pub fn train_dt_pseudo(
    dataset: &OfflineDataset,
    prefs: &PreferenceDataset,
    config: &RunConfig,
    reward_log: &mut dyn FnMut(&RewardRecord) -> Result<()>,
    log: &mut dyn FnMut(&PolicyRecord) -> Result<()>,
) -> Result<BaselinePolicy> {
    let model = train_reward_model(dataset, prefs, config, reward_log)?;
    let channel = relabel_dataset(dataset, &model)?;
    let mut out = train_return_conditioned(dataset, &channel, config, log)?;
    out.reward_model = Some(model);
    Ok(out)
}
