use rand::Rng;
use serde::{Deserialize, Serialize};

use oppo_core::autograd::{clip_grad_norm, grad_norm, AdamW, Graph, Group, Tensor, Var};
use oppo_core::checkpoint::{check_shapes, Checkpoint};
use oppo_core::config::RunConfig;
use oppo_core::data::{OfflineDataset, PreferenceDataset, PreferenceTriple, Trajectory};
use oppo_core::nn::{Linear, ParamStore};
use oppo_core::rng::{self, domain};
use oppo_core::{Error, Result};

/// Probability clamp applied before the log in the preference loss.
pub const PROB_CLAMP: f64 = 1e-7;

/// Stream index offset separating reward-model streams from policy streams
/// in the training domain.
const REWARD_STREAM: u64 = 1 << 40;

/// Two-hidden-layer ReLU network `r(s, a)` over the concatenated state and
/// action.
#[derive(Clone, Debug, PartialEq)]
pub struct RewardModel {
    pub state_dim: usize,
    pub action_dim: usize,
    pub hidden: usize,
    pub store: ParamStore,
    layers: [Linear; 3],
}

impl RewardModel {
    pub fn new<R: Rng + ?Sized>(state_dim: usize, action_dim: usize, hidden: usize, rng: &mut R) -> Self {
        let mut store = ParamStore::new(Group::Reward);
        let input = state_dim + action_dim;
        let layers = [
            Linear::new(&mut store, "l1", input, hidden, (2.0 / input as f64).sqrt(), rng),
            Linear::new(&mut store, "l2", hidden, hidden, (2.0 / hidden as f64).sqrt(), rng),
            Linear::new(&mut store, "out", hidden, 1, (1.0 / hidden as f64).sqrt(), rng),
        ];
        Self {
            state_dim,
            action_dim,
            hidden,
            store,
            layers,
        }
    }

    /// `n x 1` rewards for `n x (state_dim + action_dim)` inputs.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let h = self.layers[0].forward(&self.store, g, x);
        let h = g.relu(h);
        let h = self.layers[1].forward(&self.store, g, h);
        let h = g.relu(h);
        self.layers[2].forward(&self.store, g, h)
    }

    /// Concatenated `(s_t, a_t)` rows of every real step.
    fn step_inputs(&self, traj: &Trajectory) -> Result<Vec<f64>> {
        if traj.state_dim != self.state_dim || traj.action_dim != self.action_dim {
            return Err(Error::Input(format!(
                "trajectory dims ({}, {}) do not match the reward model ({}, {})",
                traj.state_dim, traj.action_dim, self.state_dim, self.action_dim
            )));
        }
        let mut out = Vec::with_capacity(traj.length * (self.state_dim + self.action_dim));
        for t in 0..traj.length {
            out.extend(traj.state(t).iter().map(|&v| v as f64));
            out.extend(traj.action(t).iter().map(|&v| v as f64));
        }
        Ok(out)
    }

    /// Per-step rewards over the real steps of `traj`.
    pub fn step_rewards(&self, traj: &Trajectory) -> Result<Vec<f64>> {
        let x = self.step_inputs(traj)?;
        let n = traj.length;
        if n == 0 {
            return Ok(Vec::new());
        }
        let mut g = Graph::new();
        let xv = g.constant(Tensor::from_vec(n, self.state_dim + self.action_dim, x));
        let r = self.forward(&mut g, xv);
        Ok(g.value(r).data().to_vec())
    }

    pub fn reward(&self, state: &[f64], action: &[f64]) -> f64 {
        let mut g = Graph::new();
        let row = state.iter().chain(action).copied().collect();
        let x = g.constant(Tensor::row_vector(row));
        let r = self.forward(&mut g, x);
        g.value(r).item()
    }

    /// Predicted return of `traj`.
    pub fn trajectory_sum(&self, traj: &Trajectory) -> Result<f64> {
        Ok(self.step_rewards(traj)?.iter().sum())
    }

    /// `n x 1` predicted returns of `trajs` as one graph node.
    pub fn trajectory_sums(&self, g: &mut Graph, trajs: &[&Trajectory]) -> Result<Var> {
        let width = self.state_dim + self.action_dim;
        let mut x = Vec::new();
        let mut segment = Vec::new();
        for (s, traj) in trajs.iter().enumerate() {
            x.extend(self.step_inputs(traj)?);
            segment.extend(std::iter::repeat_n(s, traj.length));
        }
        let rows = segment.len();
        let xv = g.constant(Tensor::from_vec(rows, width, x));
        let r = self.forward(g, xv);
        Ok(g.segment_sum(r, segment, trajs.len()))
    }

    pub fn to_checkpoint(&self, meta: serde_json::Value) -> Checkpoint {
        let mut c = Checkpoint::new(meta);
        c.push_group("reward", self.store.entries());
        c
    }

    /// Loads the `reward` group of `ckpt` into a model of this shape.
    pub fn load_from(&mut self, ckpt: &Checkpoint) -> Result<()> {
        let fresh = self.to_checkpoint(serde_json::Value::Null);
        let found: Vec<_> = ckpt
            .shapes()
            .into_iter()
            .filter(|s| s.name.starts_with("reward."))
            .collect();
        check_shapes(&fresh.shapes(), &found).map_err(Error::Data)?;
        self.store.load(&ckpt.group("reward"))
    }
}

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `P[τi ≻ τj] = logistic(Σ r(τi) − Σ r(τj))`, unclamped.
pub fn bt_probability(model: &RewardModel, ti: &Trajectory, tj: &Trajectory) -> Result<f64> {
    Ok(logistic(model.trajectory_sum(ti)? - model.trajectory_sum(tj)?))
}

/// Mean preference cross-entropy over `triples`, where `y = 0` means `τi`
/// is preferred and `y = 0.5` splits the mass evenly.
pub fn reward_model_loss(
    g: &mut Graph,
    model: &RewardModel,
    dataset: &OfflineDataset,
    triples: &[&PreferenceTriple],
) -> Result<Var> {
    if triples.is_empty() {
        return Err(Error::Input("empty preference batch".into()));
    }
    let n = triples.len();
    let mut trajs = Vec::with_capacity(2 * n);
    for side in 0..2 {
        for t in triples {
            let idx = if side == 0 { t.i } else { t.j };
            trajs.push(
                dataset
                    .trajectories
                    .get(idx)
                    .ok_or_else(|| Error::Input(format!("trajectory index {idx} out of range")))?,
            );
        }
    }
    let sums = model.trajectory_sums(g, &trajs)?;
    let si = g.gather(&[sums], (0..n).map(|r| (0, r)).collect());
    let sj = g.gather(&[sums], (n..2 * n).map(|r| (0, r)).collect());
    let diff = g.sub(si, sj);
    Ok(g.bt_cross_entropy(diff, triples.iter().map(|t| t.y).collect(), PROB_CLAMP))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardRecord {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
}

/// Fits a reward model to every triple in `prefs`, ties included.
pub fn train_reward_model(
    dataset: &OfflineDataset,
    prefs: &PreferenceDataset,
    config: &RunConfig,
    log: &mut dyn FnMut(&RewardRecord) -> Result<()>,
) -> Result<RewardModel> {
    prefs.validate_against(dataset)?;
    if prefs.is_empty() {
        return Err(Error::Data("no preference labels to train on".into()));
    }
    let o = &config.optim;
    let spec = &dataset.env;
    let seed = o.seed;
    let mut model = RewardModel::new(
        spec.state_dim,
        spec.action_dim(),
        config.model.reward_hidden,
        &mut rng::stream(seed, domain::INIT, 3),
    );
    let mut opt = AdamW::new(o.reward_lr, o.weight_decay, &model.store.sizes());
    for step in 0..o.reward_steps {
        let mut rng = rng::stream(seed, domain::TRAIN, REWARD_STREAM + step as u64);
        let batch: Vec<&PreferenceTriple> = (0..o.reward_batch_size)
            .map(|_| &prefs.triples[rng.random_range(0..prefs.len())])
            .collect();
        let mut g = Graph::new();
        let loss = reward_model_loss(&mut g, &model, dataset, &batch)?;
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Err(Error::NonFinite {
                step: step as u64,
                detail: format!("reward model loss {value}"),
            });
        }
        let grads = g.backward(loss);
        let mut gr = grads.group(Group::Reward, model.store.len());
        let norm = grad_norm(gr.iter());
        clip_grad_norm(&mut [&mut gr], o.grad_clip);
        opt.update(model.store.values_mut(), &gr, 1.0);
        log(&RewardRecord {
            step,
            loss: value,
            grad_norm: norm,
        })?;
    }
    Ok(model)
}

/// Fraction of non-tie triples whose preferred side gets the larger
/// predicted return.
pub fn reward_accuracy(model: &RewardModel, dataset: &OfflineDataset, prefs: &PreferenceDataset) -> Result<f64> {
    prefs.validate_against(dataset)?;
    let strict = prefs.non_ties();
    if strict.is_empty() {
        return Err(Error::Input("no non-tie triples to score".into()));
    }
    let sums: Vec<f64> = dataset
        .trajectories
        .iter()
        .map(|t| model.trajectory_sum(t))
        .collect::<Result<_>>()?;
    let correct = strict
        .iter()
        .filter(|t| (t.y == 0.0 && sums[t.i] > sums[t.j]) || (t.y == 1.0 && sums[t.j] > sums[t.i]))
        .count();
    Ok(correct as f64 / strict.len() as f64)
}

/// Per-step rewards for every trajectory of a dataset, tagged as learned
/// rather than ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardChannel {
    pub pseudo: bool,
    pub dataset_ref: String,
    /// One vector per trajectory, covering its real steps only.
    pub rewards: Vec<Vec<f64>>,
}

impl RewardChannel {
    pub fn returns(&self) -> Vec<f64> {
        self.rewards.iter().map(|r| r.iter().sum()).collect()
    }

    /// The ground-truth rewards, for the oracle comparison arm.
    pub fn true_rewards(dataset: &OfflineDataset) -> Result<Self> {
        let rewards = dataset
            .trajectories
            .iter()
            .map(|t| {
                t.hidden_return()?;
                Ok(t.hidden_rewards[..t.length].iter().map(|&r| r as f64).collect())
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            pseudo: false,
            dataset_ref: dataset.content_hash.clone(),
            rewards,
        })
    }
}

/// Replaces every real step's reward with the model's prediction.
pub fn relabel_dataset(dataset: &OfflineDataset, model: &RewardModel) -> Result<RewardChannel> {
    Ok(RewardChannel {
        pseudo: true,
        dataset_ref: dataset.content_hash.clone(),
        rewards: dataset
            .trajectories
            .iter()
            .map(|t| model.step_rewards(t))
            .collect::<Result<_>>()?,
    })
}
