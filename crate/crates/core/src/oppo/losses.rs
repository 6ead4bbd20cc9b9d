use crate::autograd::{Graph, Tensor, Var};
use crate::data::{is_valid_label, PreferenceTriple, SegmentBatch};
use crate::error::{Error, Result};

/// Masked mean squared error between per-step predictions (`B*K x A`) and
/// the batch actions, averaged over valid steps and action dimensions.
pub fn him_loss(g: &mut Graph, pred: Var, batch: &SegmentBatch) -> Result<Var> {
    let n_valid = batch.n_valid();
    if n_valid == 0 {
        return Err(Error::Input("segment batch has no valid steps".into()));
    }
    let ad = batch.action_dim;
    if g.value(pred).shape() != (batch.n_rows(), ad) {
        return Err(Error::Input(format!(
            "predictions have shape {:?}, expected ({}, {ad})",
            g.value(pred).shape(),
            batch.n_rows()
        )));
    }
    let target = g.constant(Tensor::from_vec(batch.n_rows(), ad, batch.actions.clone()));
    let diff = g.sub(pred, target);
    let sq = g.square(diff);
    let w = 1.0 / (n_valid * ad) as f64;
    let weights = batch
        .mask
        .iter()
        .flat_map(|&m| std::iter::repeat_n(if m { w } else { 0.0 }, ad))
        .collect();
    Ok(g.weighted_sum(sq, weights))
}

/// Positive and negative trajectory indices of a triple, or `None` for a tie.
pub fn select_pos_neg(triple: &PreferenceTriple) -> Result<Option<(usize, usize)>> {
    if !is_valid_label(triple.y) {
        return Err(Error::Data(format!("label {} is not one of 0, 0.5, 1", triple.y)));
    }
    Ok(if triple.y == 0.0 {
        Some((triple.i, triple.j))
    } else if triple.y == 1.0 {
        Some((triple.j, triple.i))
    } else {
        None
    })
}

/// Triplet hinge `max(|z* - z+| - |z* - z-| + m, 0)` averaged over rows.
/// `z_star` is `1 x d`; `z_plus` and `z_minus` are `n x d`.
pub fn pm_loss(g: &mut Graph, z_star: Var, z_plus: Var, z_minus: Var, margin: f64) -> Var {
    let n = g.value(z_plus).rows();
    assert_eq!(g.value(z_minus).rows(), n);
    assert_eq!(g.value(z_star).rows(), 1);
    let anchor = g.gather(&[z_star], vec![(0, 0); n]);
    let dp = g.sub(anchor, z_plus);
    let dp = g.row_norm(dp);
    let dm = g.sub(anchor, z_minus);
    let dm = g.row_norm(dm);
    let gap = g.sub(dp, dm);
    let m = g.constant(Tensor::filled(n, 1, margin));
    let hinge = g.add(gap, m);
    let hinge = g.relu(hinge);
    g.mean(hinge)
}

/// Mean squared L2 norm of the rows of `z`.
pub fn norm_loss(g: &mut Graph, z: Var) -> Var {
    let n = g.value(z).rows();
    let sq = g.square(z);
    let len = g.value(sq).len();
    g.weighted_sum(sq, vec![1.0 / n as f64; len])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{Group, ParamKey};
    use crate::data::LabelSource;
    use proptest::prelude::*;

    fn value(f: impl FnOnce(&mut Graph) -> Var) -> f64 {
        let mut g = Graph::new();
        let v = f(&mut g);
        g.value(v).item()
    }

    fn row(g: &mut Graph, v: &[f64]) -> Var {
        g.constant(Tensor::row_vector(v.to_vec()))
    }

    #[test]
    fn pm_loss_hand_values() {
        let l = value(|g| {
            let (s, p, m) = (row(g, &[0.0, 0.0]), row(g, &[0.0, 0.0]), row(g, &[3.0, 4.0]));
            pm_loss(g, s, p, m, 1.0)
        });
        assert_eq!(l, 0.0);
        let l = value(|g| {
            let (s, p, m) = (row(g, &[0.0, 0.0]), row(g, &[3.0, 4.0]), row(g, &[0.0, 1.0]));
            pm_loss(g, s, p, m, 1.0)
        });
        assert_eq!(l, 5.0);
        let l = value(|g| {
            let (s, p, m) = (row(g, &[0.3, -2.0]), row(g, &[1.0, 1.0]), row(g, &[1.0, 1.0]));
            pm_loss(g, s, p, m, 0.7)
        });
        assert_eq!(l, 0.7);
    }

    #[test]
    fn norm_loss_hand_values() {
        assert_eq!(value(|g| { let z = row(g, &[3.0, 4.0]); norm_loss(g, z) }), 25.0);
        assert_eq!(
            value(|g| {
                let z = g.constant(Tensor::zeros(3, 4));
                norm_loss(g, z)
            }),
            0.0
        );
    }

    fn triple(y: f64) -> PreferenceTriple {
        PreferenceTriple {
            i: 4,
            j: 9,
            y,
            source: LabelSource::ScriptedDeterministic,
            annotator_id: None,
        }
    }

    #[test]
    fn label_semantics() {
        assert_eq!(select_pos_neg(&triple(0.0)).unwrap(), Some((4, 9)));
        assert_eq!(select_pos_neg(&triple(1.0)).unwrap(), Some((9, 4)));
        assert_eq!(select_pos_neg(&triple(0.5)).unwrap(), None);
        assert!(matches!(select_pos_neg(&triple(0.3)), Err(Error::Data(_))));
    }

    fn small_batch(actions: Vec<f64>, mask: Vec<bool>, ad: usize) -> SegmentBatch {
        let rows = mask.len();
        SegmentBatch {
            k: rows,
            state_dim: 1,
            action_dim: ad,
            states: vec![0.0; rows],
            actions,
            timesteps: vec![0; rows],
            mask,
            traj_index: vec![0],
            start: vec![0],
        }
    }

    #[test]
    fn him_loss_values() {
        let actions = vec![
            0.0, 0.0, 1.0, 0.0, 0.0, //
            1.0, 0.0, 0.0, 0.0, 0.0, //
            0.0, 0.0, 0.0, 0.0, 1.0,
        ];
        let b = small_batch(actions.clone(), vec![true, true, true], 5);
        let exact = value(|g| {
            let p = g.constant(Tensor::from_vec(3, 5, actions.clone()));
            him_loss(g, p, &b).unwrap()
        });
        assert_eq!(exact, 0.0);
        let zero = value(|g| {
            let p = g.constant(Tensor::zeros(3, 5));
            him_loss(g, p, &b).unwrap()
        });
        assert!((zero - 0.2).abs() < 1e-15);
        let empty = small_batch(vec![0.0; 5], vec![false], 5);
        let mut g = Graph::new();
        let p = g.constant(Tensor::zeros(1, 5));
        assert!(matches!(him_loss(&mut g, p, &empty), Err(Error::Input(_))));
    }

    #[test]
    fn him_loss_ignores_padding() {
        let actions: Vec<f64> = (0..8).map(|i| (i as f64 * 0.37).sin()).collect();
        let preds: Vec<f64> = (0..8).map(|i| (i as f64 * 0.91).cos()).collect();
        let b = small_batch(actions.clone(), vec![true; 4], 2);
        let base = value(|g| {
            let p = g.constant(Tensor::from_vec(4, 2, preds.clone()));
            him_loss(g, p, &b).unwrap()
        });
        let padded = b.with_extra_padding(3);
        let mut padded_preds = vec![5.0; 6];
        padded_preds.extend(&preds);
        let with_pad = value(|g| {
            let p = g.constant(Tensor::from_vec(7, 2, padded_preds.clone()));
            him_loss(g, p, &padded).unwrap()
        });
        assert_eq!(base, with_pad);
    }

    fn rotate(v: &[f64], theta: f64, axis: (usize, usize)) -> Vec<f64> {
        let mut out = v.to_vec();
        let (c, s) = (theta.cos(), theta.sin());
        out[axis.0] = c * v[axis.0] - s * v[axis.1];
        out[axis.1] = s * v[axis.0] + c * v[axis.1];
        out
    }

    fn pm_value(s: &[f64], p: &[f64], m: &[f64], margin: f64) -> f64 {
        value(|g| {
            let (s, p, m) = (row(g, s), row(g, p), row(g, m));
            pm_loss(g, s, p, m, margin)
        })
    }

    proptest! {
        #[test]
        fn pm_loss_rotation_invariant(
            s in prop::collection::vec(-3.0..3.0f64, 4),
            p in prop::collection::vec(-3.0..3.0f64, 4),
            m in prop::collection::vec(-3.0..3.0f64, 4),
            theta in 0.0..std::f64::consts::TAU,
            margin in 0.1..2.0f64,
        ) {
            let base = pm_value(&s, &p, &m, margin);
            let r = |v: &[f64]| rotate(&rotate(v, theta, (0, 2)), 0.5 * theta, (1, 3));
            let rotated = pm_value(&r(&s), &r(&p), &r(&m), margin);
            prop_assert!((base - rotated).abs() <= 1e-9 * (1.0 + base.abs()));
        }

        #[test]
        fn norm_loss_is_homogeneous(
            z in prop::collection::vec(-3.0..3.0f64, 6),
            c in -4.0..4.0f64,
        ) {
            let base = value(|g| { let v = g.constant(Tensor::from_vec(2, 3, z.clone())); norm_loss(g, v) });
            let scaled_z: Vec<f64> = z.iter().map(|x| x * c).collect();
            let scaled = value(|g| { let v = g.constant(Tensor::from_vec(2, 3, scaled_z)); norm_loss(g, v) });
            prop_assert!((scaled - c * c * base).abs() <= 1e-10 * (1.0 + scaled.abs()));
        }
    }

    #[test]
    fn pm_loss_gradients_match_finite_differences() {
        let s0 = vec![0.2, -0.4, 0.9];
        let p0 = vec![0.5, 0.3, -0.2, -1.0, 0.1, 0.4];
        let m0 = vec![0.1, 0.2, 0.3, 0.7, -0.5, 0.2];
        let key = |index| ParamKey {
            group: Group::Context,
            index,
        };
        let eval = |vals: &[Vec<f64>]| {
            let mut g = Graph::new();
            let s = g.param(key(0), &Tensor::from_vec(1, 3, vals[0].clone()));
            let p = g.param(key(1), &Tensor::from_vec(2, 3, vals[1].clone()));
            let m = g.param(key(2), &Tensor::from_vec(2, 3, vals[2].clone()));
            let l = pm_loss(&mut g, s, p, m, 1.0);
            (g.value(l).item(), g.backward(l))
        };
        let vals = vec![s0, p0, m0];
        let (_, grads) = eval(&vals);
        for which in 0..3 {
            let analytic = grads.get(key(which)).unwrap().clone();
            for e in 0..vals[which].len() {
                let mut up = vals.clone();
                up[which][e] += 1e-5;
                let mut down = vals.clone();
                down[which][e] -= 1e-5;
                let numeric = (eval(&up).0 - eval(&down).0) / 2e-5;
                let a = analytic.data()[e];
                let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-5);
                assert!(err < 1e-4, "input {which}[{e}]: {a} vs {numeric}");
            }
        }
    }
}
