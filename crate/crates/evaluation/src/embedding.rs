use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use oppo_core::data::{scripted_optimal_trajectory, OfflineDataset};
use oppo_core::envs;
use oppo_core::oppo::ModelBundle;
use oppo_core::rng::{self, domain};
use oppo_core::Result;

pub const Z_STAR_ID: &str = "z_star";
pub const Z_OPTIMAL_ID: &str = "z_optimal";

/// One row of the embedding table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRow {
    /// `traj-<index>` for dataset trajectories, or one of the marker ids.
    pub id: String,
    pub z: Vec<f64>,
    /// Missing for the learned optimal context, which has no trajectory.
    pub true_return: Option<f64>,
    pub proj: [f64; 2],
}

/// Top principal directions of the rows of `z`, as `(mean, directions)`.
///
/// Directions are sorted by explained variance and sign-fixed so that their
/// largest-magnitude component is positive. Missing directions (fewer than
/// `n` dimensions) are zero.
pub fn principal_directions(z: &[Vec<f64>], n: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let d = z.first().map_or(0, Vec::len);
    let rows = z.len().max(1) as f64;
    let mut mean = vec![0.0; d];
    for r in z {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / rows;
        }
    }
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for r in z {
        for a in 0..d {
            for b in 0..d {
                cov[(a, b)] += (r[a] - mean[a]) * (r[b] - mean[b]) / rows;
            }
        }
    }
    let mut dirs = Vec::with_capacity(n);
    if d > 0 {
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        for &c in order.iter().take(n) {
            let mut v: Vec<f64> = eig.eigenvectors.column(c).iter().copied().collect();
            let lead = v.iter().copied().fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
            if lead < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            dirs.push(v);
        }
    }
    while dirs.len() < n {
        dirs.push(vec![0.0; d]);
    }
    (mean, dirs)
}

pub fn project(z: &[f64], mean: &[f64], dirs: &[Vec<f64>]) -> [f64; 2] {
    let mut out = [0.0; 2];
    for (o, dir) in out.iter_mut().zip(dirs) {
        *o = z.iter().zip(mean).zip(dir).map(|((x, m), v)| (x - m) * v).sum();
    }
    out
}

/// Embeds a seeded sample of `n_sample` trajectories and appends rows for
/// `z*` and for the embedding of the scripted-optimal trajectory. The 2-D
/// projection uses the principal directions of the sampled rows only.
pub fn embedding_report(
    bundle: &ModelBundle,
    dataset: &OfflineDataset,
    n_sample: usize,
) -> Result<Vec<EmbeddingRow>> {
    let n = if n_sample > dataset.len() {
        log::warn!(
            "requested {n_sample} embeddings but the dataset has {}; using all",
            dataset.len()
        );
        dataset.len()
    } else {
        n_sample
    };
    let mut rng = rng::stream(bundle.config.optim.seed, domain::EVAL, u64::MAX);
    let mut idx = sample(&mut rng, dataset.len(), n).into_vec();
    idx.sort_unstable();
    let z = bundle.embed(dataset, &idx)?;
    let returns = dataset.true_returns()?;

    let spec = &dataset.env;
    let optimal = scripted_optimal_trajectory(spec, 0)?;
    let optimal_return = envs::true_return(spec, &optimal)?;
    let single = OfflineDataset::new(spec.clone(), dataset.split, 0, vec![optimal])?;
    let z_optimal = bundle.embed(&single, &[0])?.remove(0);

    let (mean, dirs) = principal_directions(&z, 2);
    let mut rows: Vec<EmbeddingRow> = idx
        .iter()
        .zip(z)
        .map(|(&i, z)| EmbeddingRow {
            id: format!("traj-{i}"),
            proj: project(&z, &mean, &dirs),
            z,
            true_return: Some(returns[i]),
        })
        .collect();
    let z_star = bundle.z_star_vec();
    rows.push(EmbeddingRow {
        id: Z_STAR_ID.into(),
        proj: project(&z_star, &mean, &dirs),
        z: z_star,
        true_return: None,
    });
    rows.push(EmbeddingRow {
        id: Z_OPTIMAL_ID.into(),
        proj: project(&z_optimal, &mean, &dirs),
        z: z_optimal,
        true_return: Some(optimal_return),
    });
    Ok(rows)
}
