use rand::Rng;

use super::OfflineDataset;
use crate::error::{Error, Result};

/// A batch of left-padded windows of length `k`.
///
/// Row `b * k + p` holds position `p` of window `b`. Padding rows are zero,
/// carry timestep 0 and have `mask == false`.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentBatch {
    pub k: usize,
    pub state_dim: usize,
    pub action_dim: usize,
    pub states: Vec<f64>,
    pub actions: Vec<f64>,
    pub timesteps: Vec<usize>,
    pub mask: Vec<bool>,
    pub traj_index: Vec<usize>,
    pub start: Vec<usize>,
}

impl SegmentBatch {
    pub fn batch_size(&self) -> usize {
        self.traj_index.len()
    }

    pub fn n_rows(&self) -> usize {
        self.mask.len()
    }

    pub fn n_valid(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Windows `[start, start + k)` clipped to each trajectory's length.
    pub fn from_windows(dataset: &OfflineDataset, windows: &[(usize, usize)], k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::Input("window length must be at least 1".into()));
        }
        let (sd, ad) = (dataset.env.state_dim, dataset.env.action_dim());
        let n = windows.len();
        let mut batch = SegmentBatch {
            k,
            state_dim: sd,
            action_dim: ad,
            states: vec![0.0; n * k * sd],
            actions: vec![0.0; n * k * ad],
            timesteps: vec![0; n * k],
            mask: vec![false; n * k],
            traj_index: Vec::with_capacity(n),
            start: Vec::with_capacity(n),
        };
        for (b, &(ti, start)) in windows.iter().enumerate() {
            let traj = dataset
                .trajectories
                .get(ti)
                .ok_or_else(|| Error::Input(format!("trajectory index {ti} out of range")))?;
            if start >= traj.length {
                return Err(Error::Input(format!(
                    "window start {start} beyond trajectory length {}",
                    traj.length
                )));
            }
            let real = k.min(traj.length - start);
            let pad = k - real;
            for p in 0..real {
                let t = start + p;
                let row = b * k + pad + p;
                for (d, &s) in traj.state(t).iter().enumerate() {
                    batch.states[row * sd + d] = s as f64;
                }
                for (d, &a) in traj.action(t).iter().enumerate() {
                    batch.actions[row * ad + d] = a as f64;
                }
                batch.timesteps[row] = t;
                batch.mask[row] = true;
            }
            batch.traj_index.push(ti);
            batch.start.push(start);
        }
        Ok(batch)
    }

    /// Whole trajectories, padded to the longest one in `indices`.
    pub fn full_trajectories(dataset: &OfflineDataset, indices: &[usize]) -> Result<Self> {
        let k = indices
            .iter()
            .map(|&i| {
                dataset
                    .trajectories
                    .get(i)
                    .map(|t| t.length)
                    .ok_or_else(|| Error::Input(format!("trajectory index {i} out of range")))
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .max()
            .unwrap_or(1);
        let windows: Vec<(usize, usize)> = indices.iter().map(|&i| (i, 0)).collect();
        Self::from_windows(dataset, &windows, k)
    }

    /// Copy with every window extended by `extra` fully masked positions on
    /// the left.
    pub fn with_extra_padding(&self, extra: usize) -> Self {
        let k = self.k + extra;
        let n = self.batch_size();
        let (sd, ad) = (self.state_dim, self.action_dim);
        let mut out = SegmentBatch {
            k,
            state_dim: sd,
            action_dim: ad,
            states: vec![0.0; n * k * sd],
            actions: vec![0.0; n * k * ad],
            timesteps: vec![0; n * k],
            mask: vec![false; n * k],
            traj_index: self.traj_index.clone(),
            start: self.start.clone(),
        };
        for b in 0..n {
            for p in 0..self.k {
                let (src, dst) = (b * self.k + p, b * k + extra + p);
                out.states[dst * sd..(dst + 1) * sd]
                    .copy_from_slice(&self.states[src * sd..(src + 1) * sd]);
                out.actions[dst * ad..(dst + 1) * ad]
                    .copy_from_slice(&self.actions[src * ad..(src + 1) * ad]);
                out.timesteps[dst] = self.timesteps[src];
                out.mask[dst] = self.mask[src];
            }
        }
        out
    }
}

/// Uniformly picks a trajectory, then a start offset within it.
pub fn segment_sample<R: Rng + ?Sized>(
    dataset: &OfflineDataset,
    batch: usize,
    k: usize,
    rng: &mut R,
) -> Result<SegmentBatch> {
    if dataset.is_empty() {
        return Err(Error::Input("cannot sample from an empty dataset".into()));
    }
    if k == 0 {
        return Err(Error::Input("window length must be at least 1".into()));
    }
    let windows: Vec<(usize, usize)> = (0..batch)
        .map(|_| {
            let ti = rng.random_range(0..dataset.len());
            let start = rng.random_range(0..dataset.trajectories[ti].length);
            (ti, start)
        })
        .collect();
    SegmentBatch::from_windows(dataset, &windows, k)
}
