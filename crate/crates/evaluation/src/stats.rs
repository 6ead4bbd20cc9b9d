use oppo_core::data::PreferenceTriple;
use oppo_core::{Error, Result};

/// Ranks starting at 1; tied values share their average rank.
pub fn ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            out[o] = rank;
        }
        i = j + 1;
    }
    out
}

pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}

/// Spearman rank correlation; 0 when either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Input(format!(
            "spearman needs two equal-length samples of at least 2, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    Ok(pearson(&ranks(x), &ranks(y)))
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Fraction of non-tie triples whose label agrees with the distance
/// ordering to `z_star`: `y = 0` is correct when `z_i` is strictly closer.
/// Equal distances count as wrong.
pub fn preference_accuracy(
    z_star: &[f64],
    embed: impl Fn(usize) -> Vec<f64>,
    triples: &[PreferenceTriple],
) -> Result<f64> {
    let strict: Vec<&PreferenceTriple> = triples.iter().filter(|t| t.y != 0.5).collect();
    if strict.is_empty() {
        return Err(Error::Input("no non-tie triples to score".into()));
    }
    let correct = strict
        .iter()
        .filter(|t| {
            let di = euclidean(z_star, &embed(t.i));
            let dj = euclidean(z_star, &embed(t.j));
            (t.y == 0.0 && di < dj) || (t.y == 1.0 && dj < di)
        })
        .count();
    Ok(correct as f64 / strict.len() as f64)
}
