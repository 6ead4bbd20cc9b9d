use crate::autograd::{Graph, Var};
use crate::nn::ParamStore;

/// Largest relative error between analytic gradients and central finite
/// differences over every scalar of `store`. Gradients below 1e-5 in
/// magnitude are compared absolutely, since central differences carry about
/// 1e-10 of round-off at this step size.
pub fn max_grad_error(store: &mut ParamStore, loss: impl Fn(&ParamStore, &mut Graph) -> Var) -> f64 {
    const H: f64 = 1e-5;
    let analytic = {
        let mut g = Graph::new();
        let l = loss(store, &mut g);
        g.backward(l).group(store.group(), store.len())
    };
    let eval = |store: &ParamStore| {
        let mut g = Graph::new();
        let l = loss(store, &mut g);
        g.value(l).item()
    };
    let mut worst: f64 = 0.0;
    for p in 0..store.len() {
        for e in 0..store.values()[p].len() {
            let orig = store.values()[p].data()[e];
            store.values_mut()[p].data_mut()[e] = orig + H;
            let up = eval(store);
            store.values_mut()[p].data_mut()[e] = orig - H;
            let down = eval(store);
            store.values_mut()[p].data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * H);
            let a = analytic[p].as_ref().map_or(0.0, |t| t.data()[e]);
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-5);
            worst = worst.max(err);
        }
    }
    worst
}
