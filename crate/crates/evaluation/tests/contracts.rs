use oppo_core::config::RunConfig;
use oppo_core::data::{build_preference_dataset, generate_offline_dataset, Split, TeacherMode};
use oppo_core::oppo::ModelBundle;
use oppo_core::rng;
use oppo_eval::*;
use rand::Rng;

fn tiny_config() -> RunConfig {
    let mut c = RunConfig::desk();
    c.model.width = 8;
    c.model.encoder_layers = 1;
    c.model.policy_layers = 1;
    c.model.z_dim = 4;
    c.model.context_len = 5;
    c.eval.n_episodes = 1;
    c.eval.seeds = vec![0, 1];
    c
}

#[test]
fn custom_context_scores_are_finite() {
    let c = tiny_config();
    let ds = generate_offline_dataset(&c.env_spec(), Split::MediumReplay, 12, 0).unwrap();
    let bundle = ModelBundle::init(&c, &ds.content_hash).unwrap();
    let z = bundle.embed(&ds, &[5]).unwrap().remove(0);
    let s = evaluate_context(&bundle, &ds, &ZChoice::Custom(z), 2, &[0, 1]).unwrap();
    assert!(s.mean.is_finite() && s.std.is_finite());
    assert_eq!(s.per_seed.len(), 2);
    let bad = evaluate_context(&bundle, &ds, &ZChoice::Custom(vec![0.0; 3]), 1, &[0]);
    assert!(bad.is_err());
    for choice in [ZChoice::ZStar, ZChoice::ZHigh, ZChoice::ZLow] {
        let a = evaluate_context(&bundle, &ds, &choice, 1, &[3]).unwrap();
        let b = evaluate_context(&bundle, &ds, &choice, 1, &[3]).unwrap();
        assert_eq!(a, b, "{}", choice.name());
    }
}

#[test]
fn embedding_report_rows_and_centering() {
    let c = tiny_config();
    let ds = generate_offline_dataset(&c.env_spec(), Split::MediumReplay, 15, 0).unwrap();
    let bundle = ModelBundle::init(&c, &ds.content_hash).unwrap();
    let rows = embedding_report(&bundle, &ds, 10).unwrap();
    assert_eq!(rows.len(), 12);
    assert_eq!(rows[10].id, "z_star");
    assert_eq!(rows[11].id, "z_optimal");
    assert!(rows[10].true_return.is_none());
    for col in 0..2 {
        let s: f64 = rows[..10].iter().map(|r| r.proj[col]).sum();
        assert!(s.abs() < 1e-9, "column {col} sums to {s}");
    }
    // Asking for more than the dataset holds is clipped.
    assert_eq!(embedding_report(&bundle, &ds, 99).unwrap().len(), 17);
}

#[test]
fn random_embeddings_score_near_chance() {
    let c = tiny_config();
    let ds = generate_offline_dataset(&c.env_spec(), Split::MediumReplay, 200, 0).unwrap();
    let prefs = build_preference_dataset(&ds, 600, TeacherMode::Deterministic, 1e-6, 0).unwrap();
    let mut r = rng::stream(11, 0, 0);
    let z: Vec<Vec<f64>> = (0..ds.len())
        .map(|_| (0..4).map(|_| r.random_range(-1.0..1.0)).collect())
        .collect();
    let n = prefs.non_ties().len() as f64;
    let acc = preference_accuracy(&[0.0; 4], |i| z[i].clone(), &prefs.triples).unwrap();
    // Four binomial standard deviations around one half.
    let tol = 4.0 * (0.25 / n).sqrt();
    assert!((acc - 0.5).abs() < tol, "accuracy {acc} over {n} pairs");
}
