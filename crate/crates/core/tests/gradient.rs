use std::time::Instant;

use approx::assert_abs_diff_eq;
use pkrank::model::{
    check_gradients, loss_gradient, FeatureMap, GradCheckConfig, LossWeights, ModelConfig,
    ModelParams, Mode,
};
use pkrank::pairs::LabeledPair;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn pair(target: u8, mos_a: f64, mos_b: f64) -> LabeledPair {
    LabeledPair {
        utterance_id: "u".into(),
        system_a: "a".into(),
        system_b: "b".into(),
        mos_a,
        mos_b,
        target,
    }
}

fn inputs(n: usize, t: usize, bands: usize, seed: u64) -> Vec<FeatureMap> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| FeatureMap {
            c: 2,
            h: t,
            w: bands,
            data: (0..2 * t * bands).map(|_| rng.random_range(-2.0..2.0)).collect(),
        })
        .collect()
}

#[test]
fn every_parameter_matches_finite_differences() {
    let params = ModelParams::new(ModelConfig::desk().with_n_mels(24), 17).unwrap();
    let x = inputs(1, 16, 24, 1);
    let pairs = [pair(1, 4.1, 2.2)];
    let start = Instant::now();
    let report =
        check_gradients(&params, &x, &pairs, LossWeights::default(), GradCheckConfig::default())
            .unwrap();
    assert_eq!(report.checked, params.num_weights());
    assert!(
        report.passed(),
        "{} mismatches, first {:?}",
        report.mismatches.len(),
        report.mismatches.first()
    );
    assert!(start.elapsed().as_secs() < 60, "took {:?}", start.elapsed());
}

#[test]
fn batch_statistics_couple_samples_correctly() {
    let params = ModelParams::new(ModelConfig::desk().with_n_mels(24), 23).unwrap();
    let x = inputs(2, 16, 24, 4);
    let pairs = [pair(1, 4.1, 2.2), pair(0, 1.9, 3.4)];
    let cfg = GradCheckConfig { stride: 7, ..GradCheckConfig::default() };
    let report = check_gradients(&params, &x, &pairs, LossWeights::default(), cfg).unwrap();
    assert_eq!(report.checked, params.num_weights().div_ceil(7));
    assert!(report.passed(), "first mismatch {:?}", report.mismatches.first());
}

#[test]
fn no_signal_without_loss_weights() {
    let params = ModelParams::new(ModelConfig::desk().with_n_mels(24), 2).unwrap();
    let x = inputs(2, 16, 24, 3);
    let pairs = [pair(1, 4.0, 2.0), pair(0, 2.0, 4.0)];
    let (_, grad) = loss_gradient(&params, &x, &pairs, LossWeights { alpha: 0.0, beta: 0.0 }).unwrap();
    assert!(grad.iter().all(|&g| g == 0.0));
}

#[test]
fn score_bias_gradient_has_closed_form() {
    // dL/db = alpha * (sigmoid(z) - y) for the score bias, averaged over the batch
    let params = ModelParams::new(ModelConfig::desk().with_n_mels(24), 5).unwrap();
    let x = inputs(3, 16, 24, 9);
    let pairs = [pair(1, 4.0, 2.0), pair(0, 2.0, 4.0), pair(1, 3.0, 1.5)];
    let w = LossWeights { alpha: 0.7, beta: 0.2 };
    let (_, grad) = loss_gradient(&params, &x, &pairs, w).unwrap();
    let tape = params.forward(&x, Mode::Train).unwrap();
    let expected: f64 = tape
        .outputs
        .iter()
        .zip(&pairs)
        .map(|(o, p)| w.alpha * (o.score_cp - f64::from(p.target)))
        .sum::<f64>()
        / 3.0;
    let bias = params.layout().tensors().iter().find(|t| t.name == "head.bias").unwrap();
    assert_abs_diff_eq!(grad[bias.offset], expected, epsilon = 1e-14);
    let mos_expected: f64 = tape
        .outputs
        .iter()
        .zip(&pairs)
        .map(|(o, p)| w.beta * (o.mos_pre[0] - p.mos_a))
        .sum::<f64>()
        / 3.0;
    assert_abs_diff_eq!(grad[bias.offset + 1], mos_expected, epsilon = 1e-14);
}
