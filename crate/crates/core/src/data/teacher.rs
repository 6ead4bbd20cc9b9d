use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{LabelSource, OfflineDataset, PreferenceDataset, PreferenceTriple, Trajectory};
use crate::envs::{self, EnvSpec};
use crate::error::{Error, Result};
use crate::rng::{self, domain};

pub const DEFAULT_TIE_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TeacherMode {
    Deterministic,
    Stochastic,
}

impl TeacherMode {
    pub fn source(&self) -> LabelSource {
        match self {
            TeacherMode::Deterministic => LabelSource::ScriptedDeterministic,
            TeacherMode::Stochastic => LabelSource::ScriptedStochastic,
        }
    }
}

impl std::str::FromStr for TeacherMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "deterministic" => Ok(TeacherMode::Deterministic),
            "stochastic" => Ok(TeacherMode::Stochastic),
            other => Err(Error::Config(format!("unknown teacher mode `{other}`"))),
        }
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

/// Probability that the stochastic teacher answers `y = 1` (prefers `j`).
pub(crate) fn prob_prefers_j(return_i: f64, return_j: f64) -> f64 {
    logistic(return_j - return_i)
}

/// Label a pair from hidden returns.
///
/// Deterministic: `0` if `i` beats `j` by more than `tie_eps`, `1` in the
/// opposite case, `0.5` otherwise. Stochastic: Bernoulli with
/// `P[y = 1] = logistic(R_j - R_i)`, never a tie.
pub fn scripted_preference<R: Rng + ?Sized>(
    spec: &EnvSpec,
    traj_i: &Trajectory,
    traj_j: &Trajectory,
    mode: TeacherMode,
    tie_eps: f64,
    rng: &mut R,
) -> Result<f64> {
    let ri = envs::true_return(spec, traj_i)?;
    let rj = envs::true_return(spec, traj_j)?;
    Ok(match mode {
        TeacherMode::Deterministic => {
            if ri > rj + tie_eps {
                0.0
            } else if rj > ri + tie_eps {
                1.0
            } else {
                0.5
            }
        }
        TeacherMode::Stochastic => {
            if rng.random::<f64>() < prob_prefers_j(ri, rj) {
                1.0
            } else {
                0.0
            }
        }
    })
}

/// `n_pairs` ordered index pairs with `i != j`, each drawn uniformly and
/// independently (duplicates across draws are allowed).
pub fn sample_pairs(n_traj: usize, n_pairs: usize, seed: u64) -> Result<Vec<(usize, usize)>> {
    if n_traj < 2 {
        return Err(Error::Input("need at least two trajectories to form pairs".into()));
    }
    Ok((0..n_pairs)
        .map(|k| {
            let mut rng = rng::stream(seed, domain::PAIRS, k as u64);
            let i = rng.random_range(0..n_traj);
            let mut j = rng.random_range(0..n_traj - 1);
            if j >= i {
                j += 1;
            }
            (i, j)
        })
        .collect())
}

pub fn build_preference_dataset(
    dataset: &OfflineDataset,
    n_pairs: i64,
    mode: TeacherMode,
    tie_eps: f64,
    seed: u64,
) -> Result<PreferenceDataset> {
    if n_pairs <= 0 {
        return Err(Error::Input("n_pairs must be positive".into()));
    }
    let pairs = sample_pairs(dataset.len(), n_pairs as usize, seed)?;
    let triples = pairs
        .into_iter()
        .enumerate()
        .map(|(k, (i, j))| {
            let mut rng = rng::stream(seed, domain::TEACHER, k as u64);
            let y = scripted_preference(
                &dataset.env,
                &dataset.trajectories[i],
                &dataset.trajectories[j],
                mode,
                tie_eps,
                &mut rng,
            )?;
            Ok(PreferenceTriple {
                i,
                j,
                y,
                source: mode.source(),
                annotator_id: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PreferenceDataset {
        triples,
        dataset_ref: dataset.content_hash.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_offline_dataset, Split};
    use crate::envs::EnvId;

    fn grid() -> EnvSpec {
        EnvSpec::new(EnvId::Gridworld8)
    }

    fn traj_with_return(r: f64) -> Trajectory {
        let spec = grid();
        let mut t = Trajectory::empty(spec.horizon, 2, 5, "synthetic");
        let steps = (-r) as usize;
        for _ in 0..steps {
            t.push(&[0.0, 0.0], &[0.0, 0.0, 0.0, 0.0, 1.0], -1.0);
        }
        t
    }

    #[test]
    fn deterministic_prefers_higher_return() {
        let mut rng = rng::stream(0, 0, 0);
        let (a, b) = (traj_with_return(-14.0), traj_with_return(-20.0));
        let y = scripted_preference(&grid(), &a, &b, TeacherMode::Deterministic, 0.0, &mut rng);
        assert_eq!(y.unwrap(), 0.0);
        let y = scripted_preference(&grid(), &b, &a, TeacherMode::Deterministic, 0.0, &mut rng);
        assert_eq!(y.unwrap(), 1.0);
    }

    #[test]
    fn deterministic_ties_give_half() {
        let mut rng = rng::stream(0, 0, 0);
        let (a, b) = (traj_with_return(-30.0), traj_with_return(-30.0));
        let y = scripted_preference(&grid(), &a, &b, TeacherMode::Deterministic, 1e-6, &mut rng);
        assert_eq!(y.unwrap(), 0.5);
    }

    #[test]
    fn stochastic_tie_probability_is_half() {
        assert_eq!(prob_prefers_j(-30.0, -30.0), 0.5);
        let (a, b) = (traj_with_return(-30.0), traj_with_return(-30.0));
        let mut ones = 0;
        for k in 0..4000 {
            let mut rng = rng::stream(9, domain::TEACHER, k);
            let y =
                scripted_preference(&grid(), &a, &b, TeacherMode::Stochastic, 0.0, &mut rng).unwrap();
            assert!(y == 0.0 || y == 1.0);
            ones += (y == 1.0) as usize;
        }
        // 4000 draws: 5 sigma is about 0.04
        assert!((ones as f64 / 4000.0 - 0.5).abs() < 0.04);
    }

    #[test]
    fn env_mismatch_is_input_error() {
        let pm = EnvSpec::new(EnvId::Pointmass2d);
        let mut rng = rng::stream(0, 0, 0);
        let (a, b) = (traj_with_return(-14.0), traj_with_return(-20.0));
        assert!(matches!(
            scripted_preference(&pm, &a, &b, TeacherMode::Deterministic, 0.0, &mut rng),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn preference_dataset_contract() {
        let ds = generate_offline_dataset(&grid(), Split::MediumExpert, 200, 1).unwrap();
        let prefs = build_preference_dataset(&ds, 500, TeacherMode::Deterministic, DEFAULT_TIE_EPS, 2)
            .unwrap();
        assert_eq!(prefs.len(), 500);
        assert!(prefs.triples.iter().all(|t| t.i != t.j));
        prefs.validate_against(&ds).unwrap();
        let again = build_preference_dataset(&ds, 500, TeacherMode::Deterministic, DEFAULT_TIE_EPS, 2)
            .unwrap();
        assert_eq!(prefs, again);
        let returns = ds.true_returns().unwrap();
        for t in prefs.non_ties() {
            let expected = if returns[t.i] > returns[t.j] { 0.0 } else { 1.0 };
            assert_eq!(t.y, expected);
        }
    }

    #[test]
    fn non_positive_pair_count_rejected() {
        let ds = generate_offline_dataset(&grid(), Split::Medium, 10, 1).unwrap();
        assert!(matches!(
            build_preference_dataset(&ds, 0, TeacherMode::Deterministic, 0.0, 0),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn hash_mismatch_rejected() {
        let ds = generate_offline_dataset(&grid(), Split::Medium, 10, 1).unwrap();
        let other = generate_offline_dataset(&grid(), Split::Medium, 10, 2).unwrap();
        let prefs = build_preference_dataset(&ds, 5, TeacherMode::Deterministic, 0.0, 0).unwrap();
        assert!(matches!(
            prefs.validate_against(&other),
            Err(Error::HashMismatch { .. })
        ));
    }

    #[test]
    fn deterministic_labels_form_a_consistent_order() {
        // every pair among 20 trajectories, checked for transitivity by brute force
        let ds = generate_offline_dataset(&grid(), Split::MediumReplay, 20, 5).unwrap();
        let n = ds.len();
        let mut rng = rng::stream(0, 0, 0);
        let mut prefers = vec![vec![false; n]; n];
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let y = scripted_preference(
                    &ds.env,
                    &ds.trajectories[i],
                    &ds.trajectories[j],
                    TeacherMode::Deterministic,
                    DEFAULT_TIE_EPS,
                    &mut rng,
                )
                .unwrap();
                prefers[i][j] = y == 0.0;
            }
        }
        for a in 0..n {
            assert!(!prefers[a][a]);
            for b in 0..n {
                if prefers[a][b] {
                    assert!(!prefers[b][a], "asymmetry");
                }
                for c in 0..n {
                    if prefers[a][b] && prefers[b][c] {
                        assert!(prefers[a][c], "transitivity {a} {b} {c}");
                    }
                }
            }
        }
    }
}
