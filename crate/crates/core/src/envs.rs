//! Deterministic desk-scale environments.
//!
//! Both environments carry a hidden per-step reward. Only the scripted
//! teacher and the evaluator are meant to read it.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Trajectory;
use crate::error::{Error, Result};
use crate::rng::{self, domain};

pub const GRID_SIZE: i64 = 8;
pub const GRID_ACTIONS: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnvId {
    Gridworld8,
    Pointmass2d,
}

impl EnvId {
    pub fn as_str(&self) -> &'static str {
        match self {
            EnvId::Gridworld8 => "gridworld8",
            EnvId::Pointmass2d => "pointmass2d",
        }
    }
}

impl fmt::Display for EnvId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EnvId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gridworld8" => Ok(EnvId::Gridworld8),
            "pointmass2d" => Ok(EnvId::Pointmass2d),
            other => Err(Error::Config(format!("unknown env_id `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ActionKind {
    Discrete(usize),
    Continuous { low: Vec<f64>, high: Vec<f64> },
}

/// Gridworld moves, in action-index order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GridMove {
    Up,
    Down,
    Left,
    Right,
    Stay,
}

impl GridMove {
    pub const ALL: [GridMove; GRID_ACTIONS] = [
        GridMove::Up,
        GridMove::Down,
        GridMove::Left,
        GridMove::Right,
        GridMove::Stay,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    fn delta(self) -> (i64, i64) {
        match self {
            GridMove::Up => (0, -1),
            GridMove::Down => (0, 1),
            GridMove::Left => (-1, 0),
            GridMove::Right => (1, 0),
            GridMove::Stay => (0, 0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub env_id: EnvId,
    pub state_dim: usize,
    pub action_kind: ActionKind,
    pub horizon: usize,
    /// Kept for completeness; labeling and scoring use undiscounted sums.
    pub discount: f64,
    pub goal: Vec<f64>,
    pub dt: f64,
}

impl EnvSpec {
    /// The default constants for `env_id`.
    pub fn new(env_id: EnvId) -> Self {
        match env_id {
            EnvId::Gridworld8 => Self {
                env_id,
                state_dim: 2,
                action_kind: ActionKind::Discrete(GRID_ACTIONS),
                horizon: 64,
                discount: 0.99,
                goal: vec![7.0, 7.0],
                dt: 1.0,
            },
            EnvId::Pointmass2d => Self {
                env_id,
                state_dim: 4,
                action_kind: ActionKind::Continuous {
                    low: vec![-1.0, -1.0],
                    high: vec![1.0, 1.0],
                },
                horizon: 100,
                discount: 0.99,
                goal: vec![1.0, 1.0],
                dt: 0.1,
            },
        }
    }

    pub fn action_dim(&self) -> usize {
        match &self.action_kind {
            ActionKind::Discrete(n) => *n,
            ActionKind::Continuous { low, .. } => low.len(),
        }
    }

    pub fn is_discrete(&self) -> bool {
        matches!(self.action_kind, ActionKind::Discrete(_))
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.discount) {
            return Err(Error::Config("discount must lie in [0, 1)".into()));
        }
        if self.goal.len() != 2 {
            return Err(Error::Config("goal must be a 2-D point".into()));
        }
        match (self.env_id, &self.action_kind) {
            (EnvId::Gridworld8, ActionKind::Discrete(GRID_ACTIONS)) => {
                if self.state_dim != 2 {
                    return Err(Error::Config("gridworld8 has state_dim 2".into()));
                }
                let on_board = self
                    .goal
                    .iter()
                    .all(|&g| g.fract() == 0.0 && (0.0..GRID_SIZE as f64).contains(&g));
                if !on_board {
                    return Err(Error::Config("gridworld8 goal must be a board cell".into()));
                }
            }
            (EnvId::Pointmass2d, ActionKind::Continuous { low, high }) => {
                if self.state_dim != 4 || low.len() != 2 || high.len() != 2 {
                    return Err(Error::Config(
                        "pointmass2d has state_dim 4 and 2 actions".into(),
                    ));
                }
                let finite = low.iter().chain(high).all(|b| b.is_finite());
                if !finite || low.iter().zip(high).any(|(l, h)| l >= h) {
                    return Err(Error::Config("action bounds must be finite and ordered".into()));
                }
                if !(self.dt > 0.0) {
                    return Err(Error::Config("dt must be positive".into()));
                }
            }
            _ => {
                return Err(Error::Config(format!(
                    "action space does not match {}",
                    self.env_id
                )))
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnvState {
    pub observation: Vec<f64>,
    pub t: usize,
    pub done: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Action {
    Discrete(usize),
    Continuous(Vec<f64>),
}

impl Action {
    /// Real-valued encoding used in trajectories (one-hot for discrete).
    pub fn encode(&self, spec: &EnvSpec) -> Vec<f64> {
        match self {
            Action::Discrete(a) => {
                let mut v = vec![0.0; spec.action_dim()];
                v[*a] = 1.0;
                v
            }
            Action::Continuous(a) => a.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Step {
    pub state: EnvState,
    pub reward: f64,
    pub done: bool,
}

pub fn reset(spec: &EnvSpec, seed: u64) -> Result<EnvState> {
    spec.validate()?;
    let observation = match spec.env_id {
        EnvId::Gridworld8 => vec![0.0, 0.0],
        EnvId::Pointmass2d => {
            let mut rng = rng::stream(seed, domain::RESET, 0);
            let x = rng.random_range(-1.0..=1.0);
            let y = rng.random_range(-1.0..=1.0);
            vec![x, y, 0.0, 0.0]
        }
    };
    Ok(EnvState {
        observation,
        t: 0,
        done: false,
    })
}

pub fn step(spec: &EnvSpec, state: &EnvState, action: &Action) -> Result<Step> {
    if state.done {
        return Err(Error::Contract("step called on a finished episode".into()));
    }
    if state.observation.len() != spec.state_dim {
        return Err(Error::Input("state dimension does not match env".into()));
    }
    let t = state.t + 1;
    let (observation, reward, reached) = match (spec.env_id, action) {
        (EnvId::Gridworld8, Action::Discrete(a)) => {
            let mv = GridMove::ALL
                .get(*a)
                .ok_or_else(|| Error::Input(format!("gridworld action {a} out of range")))?;
            let (dx, dy) = mv.delta();
            let x = (state.observation[0] as i64 + dx).clamp(0, GRID_SIZE - 1);
            let y = (state.observation[1] as i64 + dy).clamp(0, GRID_SIZE - 1);
            let reached = x as f64 == spec.goal[0] && y as f64 == spec.goal[1];
            (vec![x as f64, y as f64], -1.0, reached)
        }
        (EnvId::Pointmass2d, Action::Continuous(a)) => {
            let ActionKind::Continuous { low, high } = &spec.action_kind else {
                unreachable!("validated spec");
            };
            if a.len() != 2 {
                return Err(Error::Input("pointmass2d expects 2 action components".into()));
            }
            let o = &state.observation;
            let ax = a[0].clamp(low[0], high[0]);
            let ay = a[1].clamp(low[1], high[1]);
            let vx = o[2] + spec.dt * ax;
            let vy = o[3] + spec.dt * ay;
            let x = o[0] + spec.dt * vx;
            let y = o[1] + spec.dt * vy;
            let dist = ((x - spec.goal[0]).powi(2) + (y - spec.goal[1]).powi(2)).sqrt();
            (vec![x, y, vx, vy], -dist, false)
        }
        _ => return Err(Error::Input("action kind does not match env".into())),
    };
    let done = reached || t >= spec.horizon;
    Ok(Step {
        state: EnvState {
            observation,
            t,
            done,
        },
        reward,
        done,
    })
}

/// Reward of taking the encoded `action` from observation `obs`. Both envs
/// have rewards that depend only on the observation and the action.
pub fn reward(spec: &EnvSpec, obs: &[f64], action: &[f64]) -> Result<f64> {
    let action = match spec.action_kind {
        ActionKind::Discrete(_) => Action::Discrete(crate::seqnets::argmax(action)),
        ActionKind::Continuous { .. } => Action::Continuous(action.to_vec()),
    };
    let state = EnvState {
        observation: obs.to_vec(),
        t: 0,
        done: false,
    };
    Ok(step(spec, &state, &action)?.reward)
}

/// Undiscounted sum of the hidden rewards over the trajectory's real steps.
pub fn true_return(spec: &EnvSpec, trajectory: &Trajectory) -> Result<f64> {
    if trajectory.state_dim != spec.state_dim || trajectory.action_dim != spec.action_dim() {
        return Err(Error::Input(format!(
            "trajectory dims ({}, {}) do not match {}",
            trajectory.state_dim, trajectory.action_dim, spec.env_id
        )));
    }
    trajectory.hidden_return()
}

/// Normalisation references: a uniform-random policy maps to 0, the
/// scripted optimum to 100.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRefs {
    pub random_ref: f64,
    pub expert_ref: f64,
}

pub fn normalized_score(raw_return: f64, refs: ScoreRefs) -> Result<f64> {
    if !(refs.expert_ref > refs.random_ref) {
        return Err(Error::Config(format!(
            "degenerate score references: random {} expert {}",
            refs.random_ref, refs.expert_ref
        )));
    }
    Ok(100.0 * (raw_return - refs.random_ref) / (refs.expert_ref - refs.random_ref))
}

/// Greedy expert: gridworld moves right until the goal column, then down;
/// point-mass uses a clipped PD controller toward the goal.
pub fn scripted_optimal_action(spec: &EnvSpec, state: &EnvState) -> Action {
    let o = &state.observation;
    match spec.env_id {
        EnvId::Gridworld8 => {
            let mv = if o[0] < spec.goal[0] {
                GridMove::Right
            } else if o[0] > spec.goal[0] {
                GridMove::Left
            } else if o[1] < spec.goal[1] {
                GridMove::Down
            } else if o[1] > spec.goal[1] {
                GridMove::Up
            } else {
                GridMove::Stay
            };
            Action::Discrete(mv.index())
        }
        EnvId::Pointmass2d => {
            let (kp, kd) = (4.0, 4.0);
            let a = (0..2)
                .map(|d| (kp * (spec.goal[d] - o[d]) - kd * o[2 + d]).clamp(-1.0, 1.0))
                .collect();
            Action::Continuous(a)
        }
    }
}

pub fn random_action<R: Rng + ?Sized>(spec: &EnvSpec, rng: &mut R) -> Action {
    match &spec.action_kind {
        ActionKind::Discrete(n) => Action::Discrete(rng.random_range(0..*n)),
        ActionKind::Continuous { low, high } => Action::Continuous(
            low.iter()
                .zip(high)
                .map(|(&l, &h)| rng.random_range(l..=h))
                .collect(),
        ),
    }
}

/// Runs one episode under `policy` and returns the undiscounted return.
pub fn episode_return(
    spec: &EnvSpec,
    seed: u64,
    mut policy: impl FnMut(&EnvState) -> Action,
) -> Result<f64> {
    let mut state = reset(spec, seed)?;
    let mut total = 0.0;
    while !state.done {
        let action = policy(&state);
        let out = step(spec, &state, &action)?;
        total += out.reward;
        state = out.state;
    }
    Ok(total)
}

/// Reference values: mean of 100 uniform-random episodes and the mean return
/// of the scripted optimum over the same 100 start seeds.
pub fn score_refs(spec: &EnvSpec) -> Result<ScoreRefs> {
    const EPISODES: u64 = 100;
    let mut random = 0.0;
    let mut expert = 0.0;
    for ep in 0..EPISODES {
        let mut rng = rng::stream(0, domain::RANDOM_REF, ep);
        random += episode_return(spec, ep, |_| random_action(spec, &mut rng))?;
        expert += episode_return(spec, ep, |s| scripted_optimal_action(spec, s))?;
    }
    Ok(ScoreRefs {
        random_ref: random / EPISODES as f64,
        expert_ref: expert / EPISODES as f64,
    })
}
