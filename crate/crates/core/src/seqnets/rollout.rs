use super::policy::{ConditionValue, SeqPolicy};
use crate::autograd::Tensor;
use crate::data::{SegmentBatch, Trajectory};
use crate::envs::{self, Action, ActionKind, EnvSpec};
use crate::error::{Error, Result};

/// Conditioning held fixed (context) or updated (return-to-go) during an
/// episode.
pub enum RolloutCondition<'a> {
    Context(&'a [f64]),
    /// Starts at `target` and is decremented by `reward(s, a)` after every
    /// step; the network sees `rtg / scale`.
    ReturnToGo {
        target: f64,
        scale: f64,
        reward: &'a dyn Fn(&[f64], &[f64]) -> f64,
    },
    None,
}

#[derive(Clone, Debug)]
pub struct RolloutResult {
    /// Visited states and chosen actions; `hidden_rewards` holds the env
    /// rewards and must only be read through oracle paths.
    pub trajectory: Trajectory,
    pub true_return: f64,
}

/// Anything that maps a conditioned window to per-step action outputs.
pub trait WindowPolicy {
    /// Outputs for every row of `batch`, `B*K x action_dim`.
    fn predict_window(&self, cond: &ConditionValue, batch: &SegmentBatch) -> Result<Tensor>;

    fn supports(&self, spec: &EnvSpec) -> bool;
}

impl WindowPolicy for SeqPolicy {
    fn predict_window(&self, cond: &ConditionValue, batch: &SegmentBatch) -> Result<Tensor> {
        self.predict(cond, batch)
    }

    fn supports(&self, spec: &EnvSpec) -> bool {
        self.config.state_dim == spec.state_dim && self.config.action_kind == spec.action_kind
    }
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Greedy closed-loop episode: the policy sees the last `k` steps of its
/// own history at every decision.
pub fn rollout(
    spec: &EnvSpec,
    policy: &impl WindowPolicy,
    cond: &RolloutCondition<'_>,
    seed: u64,
    horizon: usize,
    k: usize,
) -> Result<RolloutResult> {
    if k == 0 {
        return Err(Error::Config("context window must be at least 1".into()));
    }
    if !policy.supports(spec) {
        return Err(Error::Input("policy was built for a different env".into()));
    }
    let horizon = horizon.min(spec.horizon);
    let (sd, ad) = (spec.state_dim, spec.action_dim());
    let mut state = envs::reset(spec, seed)?;
    let mut traj = Trajectory::empty(spec.horizon, sd, ad, "rollout");
    let mut states: Vec<Vec<f64>> = Vec::new();
    let mut actions: Vec<Vec<f64>> = Vec::new();
    let mut rtgs: Vec<f64> = Vec::new();
    let mut remaining = match cond {
        RolloutCondition::ReturnToGo { target, .. } => *target,
        _ => 0.0,
    };
    let mut total = 0.0;
    while !state.done && states.len() < horizon {
        let t = state.t;
        states.push(state.observation.clone());
        actions.push(vec![0.0; ad]);
        if let RolloutCondition::ReturnToGo { scale, .. } = cond {
            rtgs.push(remaining / scale);
        }
        let lo = states.len().saturating_sub(k);
        let len = states.len() - lo;
        let pad = k - len;
        let mut batch = SegmentBatch {
            k,
            state_dim: sd,
            action_dim: ad,
            states: vec![0.0; k * sd],
            actions: vec![0.0; k * ad],
            timesteps: vec![0; k],
            mask: vec![false; k],
            traj_index: vec![0],
            start: vec![t + 1 - len],
        };
        let mut rtg_row = vec![0.0; k];
        for p in 0..len {
            let row = pad + p;
            batch.states[row * sd..(row + 1) * sd].copy_from_slice(&states[lo + p]);
            batch.actions[row * ad..(row + 1) * ad].copy_from_slice(&actions[lo + p]);
            batch.timesteps[row] = t + 1 - len + p;
            batch.mask[row] = true;
            if !rtgs.is_empty() {
                rtg_row[row] = rtgs[lo + p];
            }
        }
        let value = match cond {
            RolloutCondition::Context(z) => ConditionValue::Context(vec![z.to_vec()]),
            RolloutCondition::ReturnToGo { .. } => ConditionValue::ReturnToGo(rtg_row),
            RolloutCondition::None => ConditionValue::None,
        };
        let pred = policy.predict_window(&value, &batch)?;
        let out = pred.row(k - 1);
        let action = match &spec.action_kind {
            ActionKind::Discrete(_) => Action::Discrete(argmax(out)),
            ActionKind::Continuous { .. } => Action::Continuous(out.to_vec()),
        };
        let encoded = action.encode(spec);
        let step = envs::step(spec, &state, &action)?;
        if let RolloutCondition::ReturnToGo { reward, .. } = cond {
            remaining -= reward(&state.observation, &encoded);
        }
        traj.push(&state.observation, &encoded, step.reward);
        *actions.last_mut().expect("pushed above") = encoded;
        total += step.reward;
        state = step.state;
    }
    Ok(RolloutResult {
        trajectory: traj,
        true_return: total,
    })
}
