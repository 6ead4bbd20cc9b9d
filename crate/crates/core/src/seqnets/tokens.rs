use crate::autograd::{Graph, Tensor, Var};
use crate::data::SegmentBatch;
use crate::error::{Error, Result};
use crate::nn::{Linear, ParamStore};

/// Per-step state and action tokens of a batch, with the timestep
/// embedding already added. Both are `B*K x width`.
pub(crate) struct StepTokens {
    pub states: Var,
    pub actions: Var,
    pub time: Var,
}

pub(crate) fn check_batch(batch: &SegmentBatch, state_dim: usize, action_dim: usize, max_timestep: usize) -> Result<()> {
    if batch.state_dim != state_dim || batch.action_dim != action_dim {
        return Err(Error::Input(format!(
            "segment dims ({}, {}) do not match network dims ({state_dim}, {action_dim})",
            batch.state_dim, batch.action_dim
        )));
    }
    if batch.states.len() != batch.n_rows() * state_dim
        || batch.actions.len() != batch.n_rows() * action_dim
        || batch.n_rows() != batch.batch_size() * batch.k
    {
        return Err(Error::Input("segment arrays are inconsistent with its shape".into()));
    }
    if let Some(&t) = batch.timesteps.iter().max() {
        if t >= max_timestep {
            return Err(Error::Input(format!(
                "timestep {t} exceeds the embedding table ({max_timestep} rows)"
            )));
        }
    }
    Ok(())
}

pub(crate) fn embed_steps(
    store: &ParamStore,
    g: &mut Graph,
    batch: &SegmentBatch,
    state_proj: &Linear,
    action_proj: &Linear,
    time_table: usize,
) -> StepTokens {
    let rows = batch.n_rows();
    let s_in = g.constant(Tensor::from_vec(rows, batch.state_dim, batch.states.clone()));
    let a_in = g.constant(Tensor::from_vec(rows, batch.action_dim, batch.actions.clone()));
    let table = store.var(g, time_table);
    let time = g.gather(&[table], batch.timesteps.iter().map(|&t| (0, t)).collect());
    let s = state_proj.forward(store, g, s_in);
    let s = g.add(s, time);
    let a = action_proj.forward(store, g, a_in);
    let a = g.add(a, time);
    StepTokens {
        states: s,
        actions: a,
        time,
    }
}
