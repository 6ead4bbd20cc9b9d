use serde::{Deserialize, Serialize};

use oppo_core::config::RunConfig;
use oppo_core::data::{build_preference_dataset, generate_offline_dataset, OfflineDataset, PreferenceDataset};
use oppo_core::oppo::{oppo_train, ModelBundle};
use oppo_core::{Error, Result};

use crate::scores::{evaluate_context, ScoreSummary, ZChoice};
use crate::stats::{euclidean, preference_accuracy, spearman};

/// Training data, labels and the held-out split a config describes.
#[derive(Clone, Debug)]
pub struct Workbench {
    pub dataset: OfflineDataset,
    pub prefs: PreferenceDataset,
    pub heldout: OfflineDataset,
    pub heldout_prefs: PreferenceDataset,
}

impl Workbench {
    pub fn from_config(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let spec = config.env_spec();
        let d = &config.data;
        let p = &config.preference;
        let dataset = generate_offline_dataset(&spec, d.split, d.n_traj, d.seed)?;
        let prefs = build_preference_dataset(&dataset, p.n_pairs, p.mode, p.tie_eps, p.seed)?;
        let heldout = generate_offline_dataset(&spec, d.split, d.heldout_n_traj, d.heldout_seed)?;
        let heldout_prefs = build_preference_dataset(
            &heldout,
            p.heldout_pairs,
            p.mode,
            p.tie_eps,
            p.seed.wrapping_add(1),
        )?;
        Ok(Self {
            dataset,
            prefs,
            heldout,
            heldout_prefs,
        })
    }
}

pub fn train_quiet(dataset: &OfflineDataset, prefs: &PreferenceDataset, config: &RunConfig) -> Result<ModelBundle> {
    let state = oppo_train(dataset, prefs, config, &mut |_| Ok(()), &mut |_| Ok(()))?;
    Ok(state.bundle)
}

/// How well the embedding space orders held-out trajectories.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    /// Spearman correlation between `|z - z*|` and true return.
    pub distance_return_spearman: f64,
    pub preference_accuracy: f64,
}

pub fn alignment(bundle: &ModelBundle, heldout: &OfflineDataset, heldout_prefs: &PreferenceDataset) -> Result<Alignment> {
    heldout_prefs.validate_against(heldout)?;
    let idx: Vec<usize> = (0..heldout.len()).collect();
    let z = bundle.embed(heldout, &idx)?;
    let z_star = bundle.z_star_vec();
    let dist: Vec<f64> = z.iter().map(|zi| euclidean(zi, &z_star)).collect();
    Ok(Alignment {
        distance_return_spearman: spearman(&dist, &heldout.true_returns()?)?,
        preference_accuracy: preference_accuracy(&z_star, |i| z[i].clone(), &heldout_prefs.triples)?,
    })
}

/// Scores of the three reference contexts for one trained bundle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextScores {
    pub z_star: ScoreSummary,
    pub z_high: ScoreSummary,
    pub z_low: ScoreSummary,
}

pub fn context_scores(bundle: &ModelBundle, dataset: &OfflineDataset) -> Result<ContextScores> {
    let e = &bundle.config.eval;
    let eval = |c: ZChoice| evaluate_context(bundle, dataset, &c, e.n_episodes, &e.seeds);
    Ok(ContextScores {
        z_star: eval(ZChoice::ZStar)?,
        z_high: eval(ZChoice::ZHigh)?,
        z_low: eval(ZChoice::ZLow)?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub amount: usize,
    pub dataset_hash: String,
    pub score: ScoreSummary,
}

/// Trains one bundle per label amount and scores it under `z*`. Smaller
/// amounts use a prefix of the labels of the largest one, so the label sets
/// are nested.
pub fn feedback_sweep(config: &RunConfig, amounts: &[i64]) -> Result<Vec<SweepRow>> {
    if amounts.is_empty() || amounts.iter().any(|&a| a <= 0) {
        return Err(Error::Config("sweep amounts must be a non-empty list of positive counts".into()));
    }
    let max = *amounts.iter().max().expect("non-empty");
    let mut c = config.clone();
    c.preference.n_pairs = max;
    let bench = Workbench::from_config(&c)?;
    let e = &config.eval;
    amounts
        .iter()
        .map(|&amount| {
            let prefs = bench.prefs.truncated(amount as usize);
            let bundle = train_quiet(&bench.dataset, &prefs, config)?;
            Ok(SweepRow {
                amount: amount as usize,
                dataset_hash: bench.dataset.content_hash.clone(),
                score: evaluate_context(&bundle, &bench.dataset, &ZChoice::ZStar, e.n_episodes, &e.seeds)?,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub seed: u64,
    pub oppo: f64,
    pub oppo_a: f64,
}

/// Paired `z*` scores with and without preference gradients reaching the
/// encoder, one row per training seed.
pub fn ablation_oppo_a(config: &RunConfig, seeds: &[u64]) -> Result<Vec<AblationRow>> {
    let bench = Workbench::from_config(config)?;
    let e = &config.eval;
    seeds
        .iter()
        .map(|&seed| {
            let mut scores = [0.0; 2];
            for (slot, flag) in scores.iter_mut().zip([false, true]) {
                let mut c = config.clone();
                c.optim.seed = seed;
                c.optim.oppo_a = flag;
                let bundle = train_quiet(&bench.dataset, &bench.prefs, &c)?;
                *slot = evaluate_context(&bundle, &bench.dataset, &ZChoice::ZStar, e.n_episodes, &e.seeds)?.mean;
            }
            Ok(AblationRow {
                seed,
                oppo: scores[0],
                oppo_a: scores[1],
            })
        })
        .collect()
}
