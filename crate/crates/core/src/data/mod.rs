//! Offline trajectory datasets and preference datasets.

mod io;
mod segment;
mod teacher;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::envs::{self, Action, EnvSpec, GridMove};
use crate::error::{Error, Result};
use crate::rng::{self, domain};

pub use io::{
    content_hash, load_dataset, load_preferences, read_preferences, save_dataset,
    save_preferences, write_preferences, DATASET_META, DATASET_ORACLE, DATASET_TRAJECTORIES,
};
pub use segment::{segment_sample, SegmentBatch};
pub use teacher::{
    build_preference_dataset, sample_pairs, scripted_preference, TeacherMode, DEFAULT_TIE_EPS,
};

/// One episode. States and actions are zero-padded to the horizon; only the
/// first `length` rows are real.
///
/// `hidden_rewards` is the ground-truth channel. It is empty when the
/// dataset was loaded without its oracle file.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub states: Vec<f32>,
    pub actions: Vec<f32>,
    pub hidden_rewards: Vec<f32>,
    pub length: usize,
    pub horizon: usize,
    pub state_dim: usize,
    pub action_dim: usize,
    pub behavior_tag: String,
}

/// Serializable view of a trajectory without the reward channel.
#[derive(Debug, Serialize)]
pub struct LearnerView<'a> {
    pub length: usize,
    pub behavior_tag: &'a str,
    pub states: &'a [f32],
    pub actions: &'a [f32],
}

impl Trajectory {
    pub fn empty(horizon: usize, state_dim: usize, action_dim: usize, tag: &str) -> Self {
        Self {
            states: vec![0.0; horizon * state_dim],
            actions: vec![0.0; horizon * action_dim],
            hidden_rewards: vec![0.0; horizon],
            length: 0,
            horizon,
            state_dim,
            action_dim,
            behavior_tag: tag.to_string(),
        }
    }

    /// Appends a step. Values are stored at `f32` precision.
    pub fn push(&mut self, state: &[f64], action: &[f64], reward: f64) {
        assert!(self.length < self.horizon, "trajectory longer than horizon");
        let t = self.length;
        for (d, &s) in state.iter().enumerate() {
            self.states[t * self.state_dim + d] = s as f32;
        }
        for (d, &a) in action.iter().enumerate() {
            self.actions[t * self.action_dim + d] = a as f32;
        }
        self.hidden_rewards[t] = reward as f32;
        self.length += 1;
    }

    pub fn state(&self, t: usize) -> &[f32] {
        &self.states[t * self.state_dim..(t + 1) * self.state_dim]
    }

    pub fn action(&self, t: usize) -> &[f32] {
        &self.actions[t * self.action_dim..(t + 1) * self.action_dim]
    }

    pub fn has_oracle(&self) -> bool {
        self.hidden_rewards.len() == self.horizon
    }

    pub fn hidden_return(&self) -> Result<f64> {
        if !self.has_oracle() {
            return Err(Error::Data(
                "hidden rewards not loaded; open the dataset with its oracle".into(),
            ));
        }
        Ok(self.hidden_rewards[..self.length]
            .iter()
            .map(|&r| r as f64)
            .sum())
    }

    pub fn learner_view(&self) -> LearnerView<'_> {
        LearnerView {
            length: self.length,
            behavior_tag: &self.behavior_tag,
            states: &self.states[..self.length * self.state_dim],
            actions: &self.actions[..self.length * self.action_dim],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Medium,
    MediumReplay,
    MediumExpert,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Medium => "medium",
            Split::MediumReplay => "medium_replay",
            Split::MediumExpert => "medium_expert",
        }
    }

    /// Behavior noise level and tag for the `k`-th of `n` trajectories.
    fn behavior(&self, k: usize, n: usize) -> (f64, String) {
        match self {
            Split::Medium => (0.5, "medium".into()),
            Split::MediumReplay => {
                let eps = [0.9, 0.7, 0.5][k % 3];
                (eps, format!("replay-{eps:.1}"))
            }
            Split::MediumExpert => {
                if k < n / 2 {
                    (0.5, "medium".into())
                } else {
                    (0.05, "expert".into())
                }
            }
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "medium" => Ok(Split::Medium),
            "medium_replay" => Ok(Split::MediumReplay),
            "medium_expert" => Ok(Split::MediumExpert),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OfflineDataset {
    pub env: EnvSpec,
    pub split: Split,
    pub seed: u64,
    pub trajectories: Vec<Trajectory>,
    pub content_hash: String,
}

impl OfflineDataset {
    pub fn new(env: EnvSpec, split: Split, seed: u64, trajectories: Vec<Trajectory>) -> Result<Self> {
        if trajectories.is_empty() {
            return Err(Error::Input("dataset must contain at least one trajectory".into()));
        }
        for t in &trajectories {
            if t.horizon != env.horizon
                || t.state_dim != env.state_dim
                || t.action_dim != env.action_dim()
            {
                return Err(Error::Data(
                    "trajectory shape does not match the dataset env".into(),
                ));
            }
            if t.length == 0 || t.length > t.horizon {
                return Err(Error::Data("trajectory length out of range".into()));
            }
        }
        let content_hash = content_hash(&env, split, seed, &trajectories);
        Ok(Self {
            env,
            split,
            seed,
            trajectories,
            content_hash,
        })
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn true_return(&self, i: usize) -> Result<f64> {
        envs::true_return(&self.env, &self.trajectories[i])
    }

    pub fn true_returns(&self) -> Result<Vec<f64>> {
        (0..self.len()).map(|i| self.true_return(i)).collect()
    }

    /// New dataset holding the trajectories at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let trajectories = indices
            .iter()
            .map(|&i| {
                self.trajectories
                    .get(i)
                    .cloned()
                    .ok_or_else(|| Error::Input(format!("index {i} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(self.env.clone(), self.split, self.seed, trajectories)
    }

    pub fn with_tag(&self, tag: &str) -> Result<Self> {
        let idx: Vec<usize> = (0..self.len())
            .filter(|&i| self.trajectories[i].behavior_tag == tag)
            .collect();
        self.subset(&idx)
    }
}

/// Noisy scripted behavior for one episode.
///
/// With probability `eps` a step deviates from the scripted optimum: three
/// times out of four it repeats a per-episode distractor action, otherwise it
/// takes a uniformly random action. The distractor makes a trajectory's
/// suboptimality persistent, which gives each episode a recognisable style.
pub fn behavior_episode(
    spec: &EnvSpec,
    eps: f64,
    tag: &str,
    seed: u64,
    index: u64,
) -> Result<Trajectory> {
    let mut rng = rng::stream(seed, domain::BEHAVIOR, index);
    let reset_seed: u64 = rng.random();
    let distractor = match spec.env_id {
        envs::EnvId::Gridworld8 => {
            let choices = [GridMove::Up, GridMove::Left, GridMove::Stay];
            Action::Discrete(choices[rng.random_range(0..choices.len())].index())
        }
        envs::EnvId::Pointmass2d => {
            Action::Continuous(vec![rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)])
        }
    };
    let mut traj = Trajectory::empty(spec.horizon, spec.state_dim, spec.action_dim(), tag);
    let mut state = envs::reset(spec, reset_seed)?;
    while !state.done {
        let action = if rng.random::<f64>() < eps {
            if rng.random::<f64>() < 0.75 {
                distractor.clone()
            } else {
                envs::random_action(spec, &mut rng)
            }
        } else {
            envs::scripted_optimal_action(spec, &state)
        };
        let action = clip_action(spec, action);
        let out = envs::step(spec, &state, &action)?;
        traj.push(&state.observation, &action.encode(spec), out.reward);
        state = out.state;
    }
    Ok(traj)
}

fn clip_action(spec: &EnvSpec, action: Action) -> Action {
    match (action, &spec.action_kind) {
        (Action::Continuous(a), envs::ActionKind::Continuous { low, high }) => Action::Continuous(
            a.iter()
                .zip(low.iter().zip(high))
                .map(|(&x, (&l, &h))| x.clamp(l, h))
                .collect(),
        ),
        (a, _) => a,
    }
}

pub fn generate_offline_dataset(
    spec: &EnvSpec,
    split: Split,
    n_traj: usize,
    seed: u64,
) -> Result<OfflineDataset> {
    spec.validate()?;
    if n_traj < 2 {
        return Err(Error::Input("n_traj must be at least 2".into()));
    }
    let trajectories = (0..n_traj)
        .map(|k| {
            let (eps, tag) = split.behavior(k, n_traj);
            behavior_episode(spec, eps, &tag, seed, k as u64)
        })
        .collect::<Result<Vec<_>>>()?;
    OfflineDataset::new(spec.clone(), split, seed, trajectories)
}

/// Trajectory produced by the scripted optimum from reset seed `seed`.
pub fn scripted_optimal_trajectory(spec: &EnvSpec, seed: u64) -> Result<Trajectory> {
    let mut traj = Trajectory::empty(spec.horizon, spec.state_dim, spec.action_dim(), "optimal");
    let mut state = envs::reset(spec, seed)?;
    while !state.done {
        let action = envs::scripted_optimal_action(spec, &state);
        let out = envs::step(spec, &state, &action)?;
        traj.push(&state.observation, &action.encode(spec), out.reward);
        state = out.state;
    }
    Ok(traj)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    ScriptedDeterministic,
    ScriptedStochastic,
    Human,
}

impl LabelSource {
    pub fn code(&self) -> u8 {
        match self {
            LabelSource::ScriptedDeterministic => 0,
            LabelSource::ScriptedStochastic => 1,
            LabelSource::Human => 2,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(LabelSource::ScriptedDeterministic),
            1 => Ok(LabelSource::ScriptedStochastic),
            2 => Ok(LabelSource::Human),
            c => Err(Error::Data(format!("unknown label source code {c}"))),
        }
    }
}

/// `y = 0` means trajectory `i` is preferred, `y = 1` means `j` is, and
/// `y = 0.5` records a tie.
pub fn is_valid_label(y: f64) -> bool {
    y == 0.0 || y == 0.5 || y == 1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreferenceTriple {
    pub i: usize,
    pub j: usize,
    pub y: f64,
    pub source: LabelSource,
    pub annotator_id: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreferenceDataset {
    pub triples: Vec<PreferenceTriple>,
    pub dataset_ref: String,
}

impl PreferenceDataset {
    /// Checks the hash pin and every triple against `dataset`.
    pub fn validate_against(&self, dataset: &OfflineDataset) -> Result<()> {
        if self.dataset_ref != dataset.content_hash {
            return Err(Error::HashMismatch {
                expected: dataset.content_hash.clone(),
                found: self.dataset_ref.clone(),
            });
        }
        for (k, t) in self.triples.iter().enumerate() {
            if t.i == t.j {
                return Err(Error::Data(format!("triple {k} compares a trajectory with itself")));
            }
            if t.i >= dataset.len() || t.j >= dataset.len() {
                return Err(Error::Data(format!("triple {k} indexes outside the dataset")));
            }
            if !is_valid_label(t.y) {
                return Err(Error::Data(format!("triple {k} has invalid label {}", t.y)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    /// Triples with a strict preference.
    pub fn non_ties(&self) -> Vec<&PreferenceTriple> {
        self.triples.iter().filter(|t| t.y != 0.5).collect()
    }

    pub fn truncated(&self, n: usize) -> Self {
        Self {
            triples: self.triples.iter().take(n).cloned().collect(),
            dataset_ref: self.dataset_ref.clone(),
        }
    }
}
