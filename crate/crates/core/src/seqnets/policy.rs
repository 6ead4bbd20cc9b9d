use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tokens::{check_batch, embed_steps};
use crate::autograd::{AttnLayout, Graph, Group, Tensor, Var};
use crate::data::SegmentBatch;
use crate::envs::{ActionKind, EnvSpec};
use crate::error::{Error, Result};
use crate::nn::{Block, LayerNorm, Linear, Mode, ParamStore, TransformerShape};

/// What the causal policy is conditioned on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conditioning {
    /// A single prompt token projected from a context vector of this length.
    Context { z_dim: usize },
    /// A return-to-go token before every state token.
    ReturnToGo,
    /// Plain behavior cloning.
    Unconditioned,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub state_dim: usize,
    pub action_kind: ActionKind,
    /// Rows of the timestep embedding table (horizon + 1).
    pub max_timestep: usize,
    pub shape: TransformerShape,
    pub conditioning: Conditioning,
}

impl PolicyConfig {
    pub fn for_env(spec: &EnvSpec, shape: TransformerShape, conditioning: Conditioning) -> Self {
        Self {
            state_dim: spec.state_dim,
            action_kind: spec.action_kind.clone(),
            max_timestep: spec.horizon + 1,
            shape,
            conditioning,
        }
    }

    pub fn action_dim(&self) -> usize {
        match &self.action_kind {
            ActionKind::Discrete(n) => *n,
            ActionKind::Continuous { low, .. } => low.len(),
        }
    }
}

/// Per-call conditioning input matching [`Conditioning`].
pub enum Condition {
    /// `B x z_dim` context node, one row per window.
    Context(Var),
    /// Return-to-go for every row of the batch (`B*K` values, already scaled).
    ReturnToGo(Vec<f64>),
    None,
}

/// Causal autoregressive action predictor.
#[derive(Clone, Debug, PartialEq)]
pub struct SeqPolicy {
    pub config: PolicyConfig,
    pub store: ParamStore,
    state_proj: Linear,
    action_proj: Linear,
    cond_proj: Option<Linear>,
    time_table: usize,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    head: Linear,
}

impl SeqPolicy {
    pub fn new<R: Rng + ?Sized>(config: PolicyConfig, rng: &mut R) -> Result<Self> {
        config.shape.validate()?;
        if let ActionKind::Continuous { low, high } = &config.action_kind {
            if low.len() != high.len() || low.iter().zip(high).any(|(l, h)| !(l < h)) {
                return Err(Error::Config("continuous action bounds are invalid".into()));
            }
        }
        let w = config.shape.width;
        let ad = config.action_dim();
        let mut store = ParamStore::new(Group::Policy);
        let state_proj = Linear::new(&mut store, "embed.state", config.state_dim, w, 0.02, rng);
        let action_proj = Linear::new(&mut store, "embed.action", ad, w, 0.02, rng);
        let cond_proj = match config.conditioning {
            Conditioning::Context { z_dim } => {
                Some(Linear::new(&mut store, "embed.context", z_dim, w, 0.02, rng))
            }
            Conditioning::ReturnToGo => Some(Linear::new(&mut store, "embed.rtg", 1, w, 0.02, rng)),
            Conditioning::Unconditioned => None,
        };
        let time_table = store.add(
            "embed.timestep",
            crate::nn::normal_tensor(config.max_timestep, w, 0.02, rng),
        );
        let blocks = (0..config.shape.n_layers)
            .map(|l| Block::new(&mut store, &format!("blocks.{l}"), w, rng))
            .collect();
        let ln_f = LayerNorm::new(&mut store, "ln_f", w);
        let head = Linear::new(&mut store, "head.action", w, ad, 0.02, rng);
        Ok(Self {
            config,
            store,
            state_proj,
            action_proj,
            cond_proj,
            time_table,
            blocks,
            ln_f,
            head,
        })
    }

    pub fn action_dim(&self) -> usize {
        self.config.action_dim()
    }

    fn tokens_per_step(&self) -> usize {
        match self.config.conditioning {
            Conditioning::ReturnToGo => 3,
            _ => 2,
        }
    }

    fn prefix(&self) -> usize {
        match self.config.conditioning {
            Conditioning::Context { .. } => 1,
            _ => 0,
        }
    }

    /// Position of the state token of step `p` inside one sequence.
    fn state_slot(&self, p: usize) -> usize {
        self.prefix() + self.tokens_per_step() * p + self.tokens_per_step() - 2
    }

    /// Per-step action predictions, `B*K x action_dim` in batch row order.
    /// The prediction for step `t` is read at the token of `s_t`.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        cond: &Condition,
        batch: &SegmentBatch,
        rng: Option<&mut R>,
    ) -> Result<Var> {
        let c = &self.config;
        check_batch(batch, c.state_dim, c.action_dim(), c.max_timestep)?;
        let (n, k) = (batch.batch_size(), batch.k);
        let steps = embed_steps(
            &self.store,
            g,
            batch,
            &self.state_proj,
            &self.action_proj,
            self.time_table,
        );
        let cond_tokens = match (c.conditioning, cond) {
            (Conditioning::Context { z_dim }, Condition::Context(z)) => {
                let zv = g.value(*z);
                if zv.shape() != (n, z_dim) {
                    return Err(Error::Input(format!(
                        "context has shape {:?}, expected ({n}, {z_dim})",
                        zv.shape()
                    )));
                }
                let proj = self.cond_proj.expect("context projection");
                Some(proj.forward(&self.store, g, *z))
            }
            (Conditioning::ReturnToGo, Condition::ReturnToGo(rtg)) => {
                if rtg.len() != batch.n_rows() {
                    return Err(Error::Input(format!(
                        "{} return-to-go values for {} rows",
                        rtg.len(),
                        batch.n_rows()
                    )));
                }
                let r = g.constant(Tensor::from_vec(rtg.len(), 1, rtg.clone()));
                let proj = self.cond_proj.expect("rtg projection");
                let r = proj.forward(&self.store, g, r);
                Some(g.add(r, steps.time))
            }
            (Conditioning::Unconditioned, Condition::None) => None,
            (Conditioning::Context { .. }, _) => {
                return Err(Error::Contract("contextual policy called without a context".into()))
            }
            _ => {
                return Err(Error::Contract(
                    "conditioning input does not match the policy".into(),
                ))
            }
        };
        let per = self.tokens_per_step();
        let t = self.prefix() + per * k;
        let mut index = Vec::with_capacity(n * t);
        let mut key_valid = Vec::with_capacity(n * t);
        for b in 0..n {
            if self.prefix() == 1 {
                index.push((2, b));
                key_valid.push(true);
            }
            for p in 0..k {
                let row = b * k + p;
                if per == 3 {
                    index.push((2, row));
                    key_valid.push(batch.mask[row]);
                }
                index.push((0, row));
                index.push((1, row));
                key_valid.push(batch.mask[row]);
                key_valid.push(batch.mask[row]);
            }
        }
        let mut sources = vec![steps.states, steps.actions];
        sources.extend(cond_tokens);
        let tokens = g.gather(&sources, index);
        let mut mode = Mode {
            dropout: c.shape.dropout,
            rng,
        };
        let mut x = mode.apply(g, tokens);
        let layout = AttnLayout {
            n_seq: n,
            seq_len: t,
            n_heads: c.shape.n_heads,
            causal: true,
            key_valid,
        };
        for block in &self.blocks {
            x = block.forward(&self.store, g, x, &layout, &mut mode);
        }
        let picks = (0..n)
            .flat_map(|b| (0..k).map(move |p| (b, p)))
            .map(|(b, p)| (0, b * t + self.state_slot(p)))
            .collect();
        let h = g.gather(&[x], picks);
        let h = self.ln_f.forward(&self.store, g, h);
        let out = self.head.forward(&self.store, g, h);
        Ok(match &c.action_kind {
            ActionKind::Discrete(_) => out,
            ActionKind::Continuous { low, high } => {
                let squashed = g.tanh(out);
                let ad = low.len();
                let mut diag = Tensor::zeros(ad, ad);
                for d in 0..ad {
                    diag.set(d, d, 0.5 * (high[d] - low[d]));
                }
                let mid = Tensor::row_vector(low.iter().zip(high).map(|(l, h)| 0.5 * (l + h)).collect());
                let diag = g.constant(diag);
                let mid = g.constant(mid);
                let scaled = g.matmul(squashed, diag);
                g.add_bias(scaled, mid)
            }
        })
    }

    /// Eval-mode predictions as a plain tensor.
    pub fn predict(&self, cond: &ConditionValue, batch: &SegmentBatch) -> Result<Tensor> {
        if let ConditionValue::Context(rows) = cond {
            let cols = rows.first().map_or(0, Vec::len);
            if rows.iter().any(|r| r.len() != cols) {
                return Err(Error::Input("context rows have different lengths".into()));
            }
        }
        let mut g = Graph::new();
        let cond = cond.to_condition(&mut g);
        let out = self.forward::<crate::rng::StreamRng>(&mut g, &cond, batch, None)?;
        Ok(g.value(out).clone())
    }
}

/// Graph-free conditioning input for evaluation-mode calls.
#[derive(Clone, Debug, PartialEq)]
pub enum ConditionValue {
    /// One context row per window.
    Context(Vec<Vec<f64>>),
    ReturnToGo(Vec<f64>),
    None,
}

impl ConditionValue {
    pub fn to_condition(&self, g: &mut Graph) -> Condition {
        match self {
            ConditionValue::Context(rows) => {
                let cols = rows.first().map_or(0, Vec::len);
                let data = rows.iter().flatten().copied().collect();
                Condition::Context(g.constant(Tensor::from_vec(rows.len(), cols, data)))
            }
            ConditionValue::ReturnToGo(r) => Condition::ReturnToGo(r.clone()),
            ConditionValue::None => Condition::None,
        }
    }
}
