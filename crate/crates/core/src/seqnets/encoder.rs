use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tokens::{check_batch, embed_steps};
use crate::autograd::{AttnLayout, Graph, Group, Tensor, Var};
use crate::data::SegmentBatch;
use crate::error::Result;
use crate::nn::{normal_tensor, Block, LayerNorm, Linear, Mode, ParamStore, TransformerShape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub state_dim: usize,
    pub action_dim: usize,
    pub z_dim: usize,
    /// Rows of the timestep embedding table (horizon + 1).
    pub max_timestep: usize,
    pub shape: TransformerShape,
}

/// Bidirectional hindsight encoder: maps a masked window of
/// `(s_0, a_0, s_1, a_1, ...)` tokens to an embedding through a learned
/// readout token.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub store: ParamStore,
    state_proj: Linear,
    action_proj: Linear,
    readout: usize,
    time_table: usize,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    out: Linear,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(config: EncoderConfig, rng: &mut R) -> Result<Self> {
        config.shape.validate()?;
        let w = config.shape.width;
        let mut store = ParamStore::new(Group::Encoder);
        let state_proj = Linear::new(&mut store, "embed.state", config.state_dim, w, 0.02, rng);
        let action_proj = Linear::new(&mut store, "embed.action", config.action_dim, w, 0.02, rng);
        let readout = store.add("embed.readout", normal_tensor(1, w, 0.02, rng));
        let time_table = store.add(
            "embed.timestep",
            normal_tensor(config.max_timestep, w, 0.02, rng),
        );
        let blocks = (0..config.shape.n_layers)
            .map(|l| Block::new(&mut store, &format!("blocks.{l}"), w, rng))
            .collect();
        let ln_f = LayerNorm::new(&mut store, "ln_f", w);
        let out = Linear::new(&mut store, "head.z", w, config.z_dim, 0.02, rng);
        Ok(Self {
            config,
            store,
            state_proj,
            action_proj,
            readout,
            time_table,
            blocks,
            ln_f,
            out,
        })
    }

    pub fn z_dim(&self) -> usize {
        self.config.z_dim
    }

    /// Embeds every window of `batch`; returns a `B x z_dim` node.
    /// Dropout is applied only when `rng` is given (train mode).
    pub fn encode<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        batch: &SegmentBatch,
        rng: Option<&mut R>,
    ) -> Result<Var> {
        let c = &self.config;
        check_batch(batch, c.state_dim, c.action_dim, c.max_timestep)?;
        let (n, k) = (batch.batch_size(), batch.k);
        let t = 1 + 2 * k;
        let steps = embed_steps(
            &self.store,
            g,
            batch,
            &self.state_proj,
            &self.action_proj,
            self.time_table,
        );
        let readout = self.store.var(g, self.readout);
        let mut index = Vec::with_capacity(n * t);
        let mut key_valid = Vec::with_capacity(n * t);
        for b in 0..n {
            index.push((0, 0));
            key_valid.push(true);
            for p in 0..k {
                let row = b * k + p;
                index.push((1, row));
                index.push((2, row));
                key_valid.push(batch.mask[row]);
                key_valid.push(batch.mask[row]);
            }
        }
        let tokens = g.gather(&[readout, steps.states, steps.actions], index);
        let mut mode = Mode {
            dropout: c.shape.dropout,
            rng,
        };
        let mut x = mode.apply(g, tokens);
        let layout = AttnLayout {
            n_seq: n,
            seq_len: t,
            n_heads: c.shape.n_heads,
            causal: false,
            key_valid,
        };
        for block in &self.blocks {
            x = block.forward(&self.store, g, x, &layout, &mut mode);
        }
        let summary = g.gather(&[x], (0..n).map(|b| (0, b * t)).collect());
        let summary = self.ln_f.forward(&self.store, g, summary);
        Ok(self.out.forward(&self.store, g, summary))
    }

    /// Eval-mode embeddings as plain vectors.
    pub fn embed(&self, batch: &SegmentBatch) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let z = self.encode::<crate::rng::StreamRng>(&mut g, batch, None)?;
        let z = g.value(z);
        Ok((0..z.rows()).map(|r| z.row(r).to_vec()).collect())
    }

    pub fn parameter(&self, name: &str) -> Option<&Tensor> {
        self.store.get(name)
    }
}
