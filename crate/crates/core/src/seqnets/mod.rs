//! The hindsight encoder and the causal sequence policies.

mod encoder;
mod policy;
mod rollout;
mod tokens;

pub use encoder::{Encoder, EncoderConfig};
pub use policy::{Condition, ConditionValue, Conditioning, PolicyConfig, SeqPolicy};
pub use rollout::{argmax, rollout, RolloutCondition, RolloutResult, WindowPolicy};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{Graph, Tensor};
    use crate::data::{generate_offline_dataset, segment_sample, SegmentBatch, Split};
    use crate::envs::{EnvId, EnvSpec, GridMove};
    use crate::error::{Error, Result};
    use crate::nn::TransformerShape;
    use crate::rng::{self, StreamRng};
    use crate::testutil::max_grad_error;

    fn shape(width: usize, n_layers: usize, n_heads: usize, dropout: f64) -> TransformerShape {
        TransformerShape {
            width,
            n_layers,
            n_heads,
            dropout,
        }
    }

    fn batch(env: EnvId, n: usize, k: usize) -> (EnvSpec, SegmentBatch) {
        let spec = EnvSpec::new(env);
        let ds = generate_offline_dataset(&spec, Split::Medium, 6, 3).unwrap();
        let b = segment_sample(&ds, n, k, &mut rng::stream(5, 0, 0)).unwrap();
        (spec, b)
    }

    fn context_policy(spec: &EnvSpec, s: TransformerShape) -> SeqPolicy {
        let cfg = PolicyConfig::for_env(spec, s, Conditioning::Context { z_dim: 4 });
        SeqPolicy::new(cfg, &mut rng::stream(9, 0, 0)).unwrap()
    }

    fn z_rows(n: usize, dim: usize) -> ConditionValue {
        ConditionValue::Context(
            (0..n)
                .map(|b| (0..dim).map(|d| 0.3 * (b as f64) - 0.2 * d as f64).collect())
                .collect(),
        )
    }

    #[test]
    fn discrete_head_has_one_output_per_move() {
        let (spec, b) = batch(EnvId::Gridworld8, 3, 20);
        let pol = context_policy(&spec, shape(16, 2, 1, 0.1));
        let out = pol.predict(&z_rows(3, 4), &b).unwrap();
        assert_eq!(out.shape(), (60, 5));
    }

    #[test]
    fn missing_context_is_contract_violation() {
        let (spec, b) = batch(EnvId::Gridworld8, 1, 20);
        let pol = context_policy(&spec, shape(16, 1, 1, 0.0));
        assert!(matches!(
            pol.predict(&ConditionValue::None, &b),
            Err(Error::Contract(_))
        ));
    }

    fn perturbation_is_causal(spec: &EnvSpec, pol: &SeqPolicy, cond: &ConditionValue, b: &SegmentBatch) {
        let base = pol.predict(cond, b).unwrap();
        let sd = b.state_dim;
        for t in 0..b.k - 1 {
            let mut moved = b.clone();
            for later in t + 1..b.k {
                moved.states[later * sd] += 0.75;
                moved.actions[later * b.action_dim] += 0.5;
                moved.timesteps[later] = (moved.timesteps[later] + 1).min(spec.horizon);
            }
            let out = pol.predict(cond, &moved).unwrap();
            for r in 0..=t {
                assert_eq!(out.row(r), base.row(r), "row {r} changed after perturbing > {t}");
            }
        }
    }

    #[test]
    fn future_tokens_do_not_affect_earlier_predictions() {
        for env in [EnvId::Gridworld8, EnvId::Pointmass2d] {
            let (spec, b) = batch(env, 1, 12);
            let pol = context_policy(&spec, shape(16, 2, 2, 0.1));
            perturbation_is_causal(&spec, &pol, &z_rows(1, 4), &b);
            let cfg = PolicyConfig::for_env(&spec, shape(16, 2, 1, 0.1), Conditioning::ReturnToGo);
            let dt = SeqPolicy::new(cfg, &mut rng::stream(2, 0, 0)).unwrap();
            let rtg = ConditionValue::ReturnToGo((0..12).map(|i| -(i as f64) * 0.1).collect());
            perturbation_is_causal(&spec, &dt, &rtg, &b);
        }
    }

    #[test]
    fn zero_weights_continuous_head_outputs_squash_of_zero() {
        let (spec, b) = batch(EnvId::Pointmass2d, 2, 20);
        let mut pol = context_policy(&spec, shape(16, 2, 2, 0.1));
        let names = pol.store.names().to_vec();
        for (name, v) in names.iter().zip(pol.store.values_mut()) {
            if !name.ends_with("gamma") {
                *v = Tensor::zeros(v.rows(), v.cols());
            }
        }
        let out = pol.predict(&z_rows(2, 4), &b).unwrap();
        // bounds are symmetric, so the affine map sends tanh(0) to 0
        assert!(out.data().iter().all(|&x| x == 0.0_f64.tanh()));
    }

    #[test]
    fn eval_predictions_are_deterministic() {
        let (spec, b) = batch(EnvId::Pointmass2d, 2, 20);
        let pol = context_policy(&spec, shape(16, 2, 2, 0.1));
        let z = z_rows(2, 4);
        assert_eq!(pol.predict(&z, &b).unwrap(), pol.predict(&z, &b).unwrap());
        let out = pol.predict(&z, &b).unwrap();
        assert!(out.data().iter().all(|x| x.abs() <= 1.0));
    }

    fn weighted_output(g: &mut Graph, out: crate::autograd::Var) -> crate::autograd::Var {
        let n = g.value(out).len();
        let w = (0..n).map(|i| ((i * 7 % 11) as f64 - 5.0) / 5.0).collect();
        g.weighted_sum(out, w)
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        for env in [EnvId::Gridworld8, EnvId::Pointmass2d] {
            let (spec, b) = batch(env, 2, 5);
            let cfg = EncoderConfig {
                state_dim: spec.state_dim,
                action_dim: spec.action_dim(),
                z_dim: 3,
                max_timestep: spec.horizon + 1,
                shape: shape(8, 1, 2, 0.0),
            };
            let mut enc = Encoder::new(cfg, &mut rng::stream(4, 0, 0)).unwrap();
            // larger init so the attention weights are far from uniform
            for v in enc.store.values_mut() {
                if v.rows() > 1 {
                    v.scale_assign(15.0);
                }
            }
            let layout = enc.clone();
            let err = max_grad_error(&mut enc.store, |store, g| {
                let mut e = layout.clone();
                e.store = store.clone();
                let z = e.encode::<StreamRng>(g, &b, None).unwrap();
                weighted_output(g, z)
            });
            assert!(err < 1e-4, "{env:?}: max relative error {err}");
        }
    }

    #[test]
    fn policy_gradients_match_finite_differences() {
        for env in [EnvId::Gridworld8, EnvId::Pointmass2d] {
            let (spec, b) = batch(env, 2, 4);
            for cond in [
                Conditioning::Context { z_dim: 3 },
                Conditioning::ReturnToGo,
                Conditioning::Unconditioned,
            ] {
                let cfg = PolicyConfig::for_env(&spec, shape(8, 1, 1, 0.0), cond);
                let mut pol = SeqPolicy::new(cfg, &mut rng::stream(4, 0, 0)).unwrap();
                for v in pol.store.values_mut() {
                    if v.rows() > 1 {
                        v.scale_assign(15.0);
                    }
                }
                let value = match cond {
                    Conditioning::Context { .. } => z_rows(2, 3),
                    Conditioning::ReturnToGo => {
                        ConditionValue::ReturnToGo((0..8).map(|i| 1.0 - 0.2 * i as f64).collect())
                    }
                    Conditioning::Unconditioned => ConditionValue::None,
                };
                let layout = pol.clone();
                let err = max_grad_error(&mut pol.store, |store, g| {
                    let mut p = layout.clone();
                    p.store = store.clone();
                    let c = value.to_condition(g);
                    let out = p.forward::<StreamRng>(g, &c, &b, None).unwrap();
                    weighted_output(g, out)
                });
                assert!(err < 1e-4, "{env:?} {cond:?}: max relative error {err}");
            }
        }
    }

    #[test]
    fn context_gradient_reaches_the_input_vector() {
        let (spec, b) = batch(EnvId::Gridworld8, 2, 4);
        let pol = context_policy(&spec, shape(8, 1, 1, 0.0));
        let z0 = Tensor::from_vec(2, 4, (0..8).map(|i| 0.1 * i as f64).collect());
        let loss_at = |z: &Tensor| {
            let mut g = Graph::new();
            let zv = g.param(
                crate::autograd::ParamKey {
                    group: crate::autograd::Group::Context,
                    index: 0,
                },
                z,
            );
            let out = pol.forward::<StreamRng>(&mut g, &Condition::Context(zv), &b, None).unwrap();
            let l = weighted_output(&mut g, out);
            let v = g.value(l).item();
            (v, g.backward(l))
        };
        let (_, grads) = loss_at(&z0);
        let gz = grads
            .get(crate::autograd::ParamKey {
                group: crate::autograd::Group::Context,
                index: 0,
            })
            .unwrap()
            .clone();
        for e in 0..8 {
            let mut up = z0.clone();
            up.data_mut()[e] += 1e-5;
            let mut down = z0.clone();
            down.data_mut()[e] -= 1e-5;
            let numeric = (loss_at(&up).0 - loss_at(&down).0) / 2e-5;
            let a = gz.data()[e];
            assert!((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-5) < 1e-4);
        }
    }

    /// Reads the newest state of the window and moves right, then down.
    struct Lookup;

    impl WindowPolicy for Lookup {
        fn predict_window(&self, _: &ConditionValue, batch: &SegmentBatch) -> Result<Tensor> {
            let mut out = Tensor::zeros(batch.n_rows(), 5);
            for r in 0..batch.n_rows() {
                let s = &batch.states[r * 2..r * 2 + 2];
                let mv = if s[0] < 7.0 { GridMove::Right } else { GridMove::Down };
                out.set(r, mv.index(), 1.0);
            }
            Ok(out)
        }

        fn supports(&self, spec: &EnvSpec) -> bool {
            spec.env_id == EnvId::Gridworld8
        }
    }

    #[test]
    fn lookup_policy_rollout_is_optimal() {
        let spec = EnvSpec::new(EnvId::Gridworld8);
        let r = rollout(&spec, &Lookup, &RolloutCondition::None, 0, 64, 20).unwrap();
        assert_eq!(r.true_return, -14.0);
        assert_eq!(r.trajectory.length, 14);
    }

    #[test]
    fn greedy_rollout_is_deterministic_and_bounded() {
        for env in [EnvId::Gridworld8, EnvId::Pointmass2d] {
            let spec = EnvSpec::new(env);
            let pol = context_policy(&spec, shape(16, 1, 1, 0.1));
            let z = [0.5, -0.5, 0.1, 0.0];
            let a = rollout(&spec, &pol, &RolloutCondition::Context(&z), 3, spec.horizon, 20).unwrap();
            let b = rollout(&spec, &pol, &RolloutCondition::Context(&z), 3, spec.horizon, 20).unwrap();
            assert_eq!(a.trajectory, b.trajectory);
            assert_eq!(a.true_return, b.true_return);
            assert!(a.trajectory.length <= spec.horizon);
            let short = rollout(&spec, &pol, &RolloutCondition::Context(&z), 3, 7, 20).unwrap();
            assert!(short.trajectory.length <= 7);
        }
    }

    #[test]
    fn rtg_rollout_decrements_by_reward_callback() {
        let spec = EnvSpec::new(EnvId::Gridworld8);
        let cfg = PolicyConfig::for_env(&spec, shape(8, 1, 1, 0.0), Conditioning::ReturnToGo);
        let pol = SeqPolicy::new(cfg, &mut rng::stream(1, 0, 0)).unwrap();
        let calls = std::cell::Cell::new(0);
        let reward = |_: &[f64], _: &[f64]| {
            calls.set(calls.get() + 1);
            -1.0
        };
        let cond = RolloutCondition::ReturnToGo {
            target: -14.0,
            scale: 10.0,
            reward: &reward,
        };
        let r = rollout(&spec, &pol, &cond, 0, 64, 20).unwrap();
        assert_eq!(calls.get(), r.trajectory.length);
    }
}
