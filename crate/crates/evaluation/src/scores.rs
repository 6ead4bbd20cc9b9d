use rand::Rng;
use serde::{Deserialize, Serialize};

use oppo_core::data::OfflineDataset;
use oppo_core::envs::{normalized_score, score_refs, EnvSpec};
use oppo_core::oppo::ModelBundle;
use oppo_core::rng::{self, domain};
use oppo_core::seqnets::{rollout, RolloutCondition, WindowPolicy};
use oppo_core::{Error, Result};

/// Normalised scores of one evaluation, grouped by seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreSummary {
    pub mean: f64,
    /// Population standard deviation over every episode.
    pub std: f64,
    pub seeds: Vec<u64>,
    /// Mean normalised score per seed, in `seeds` order.
    pub per_seed: Vec<f64>,
    pub n_episodes: usize,
}

impl ScoreSummary {
    pub fn from_scores(seeds: &[u64], scores: &[Vec<f64>]) -> Self {
        let all: Vec<f64> = scores.iter().flatten().copied().collect();
        let n = all.len().max(1) as f64;
        let mean = all.iter().sum::<f64>() / n;
        let var = all.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
            seeds: seeds.to_vec(),
            per_seed: scores
                .iter()
                .map(|s| s.iter().sum::<f64>() / s.len().max(1) as f64)
                .collect(),
            n_episodes: scores.first().map_or(0, Vec::len),
        }
    }
}

/// Reset seed of episode `episode` under evaluation seed `seed`.
pub fn episode_reset_seed(seed: u64, episode: usize) -> u64 {
    rng::stream(seed, domain::EVAL, episode as u64).random()
}

/// Greedy rollouts of `policy` for every `(seed, episode)` pair, scored
/// against the env's normalisation references.
pub fn evaluate_policy(
    spec: &EnvSpec,
    policy: &impl WindowPolicy,
    cond: &RolloutCondition<'_>,
    k: usize,
    n_episodes: usize,
    seeds: &[u64],
) -> Result<ScoreSummary> {
    if n_episodes == 0 || seeds.is_empty() {
        return Err(Error::Config("evaluation needs at least one episode and one seed".into()));
    }
    let refs = score_refs(spec)?;
    let mut scores = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut per = Vec::with_capacity(n_episodes);
        for ep in 0..n_episodes {
            let out = rollout(spec, policy, cond, episode_reset_seed(seed, ep), spec.horizon, k)?;
            per.push(normalized_score(out.true_return, refs)?);
        }
        scores.push(per);
    }
    Ok(ScoreSummary::from_scores(seeds, &scores))
}

/// Which context the contextual policy is conditioned on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZChoice {
    ZStar,
    /// Embedding of the highest-return trajectory in the dataset.
    ZHigh,
    /// Embedding of the lowest-return trajectory in the dataset.
    ZLow,
    Custom(Vec<f64>),
}

impl ZChoice {
    pub fn name(&self) -> &'static str {
        match self {
            ZChoice::ZStar => "z_star",
            ZChoice::ZHigh => "z_high",
            ZChoice::ZLow => "z_low",
            ZChoice::Custom(_) => "custom",
        }
    }
}

/// Index of the highest (or lowest) true return; ties keep the lowest index.
pub fn extreme_return_index(dataset: &OfflineDataset, highest: bool) -> Result<usize> {
    let returns = dataset.true_returns()?;
    let mut best = 0;
    for (i, &r) in returns.iter().enumerate() {
        if (highest && r > returns[best]) || (!highest && r < returns[best]) {
            best = i;
        }
    }
    Ok(best)
}

pub fn resolve_z(bundle: &ModelBundle, dataset: &OfflineDataset, choice: &ZChoice) -> Result<Vec<f64>> {
    let z = match choice {
        ZChoice::ZStar => bundle.z_star_vec(),
        ZChoice::ZHigh | ZChoice::ZLow => {
            let i = extreme_return_index(dataset, matches!(choice, ZChoice::ZHigh))?;
            bundle.embed(dataset, &[i])?.remove(0)
        }
        ZChoice::Custom(z) => z.clone(),
    };
    if z.len() != bundle.config.model.z_dim {
        return Err(Error::Input(format!(
            "context has {} entries, the model expects {}",
            z.len(),
            bundle.config.model.z_dim
        )));
    }
    Ok(z)
}

/// Scores the contextual policy conditioned on `choice`.
pub fn evaluate_context(
    bundle: &ModelBundle,
    dataset: &OfflineDataset,
    choice: &ZChoice,
    n_episodes: usize,
    seeds: &[u64],
) -> Result<ScoreSummary> {
    let z = resolve_z(bundle, dataset, choice)?;
    evaluate_policy(
        &bundle.config.env_spec(),
        &bundle.policy,
        &RolloutCondition::Context(&z),
        bundle.config.model.context_len,
        n_episodes,
        seeds,
    )
}
