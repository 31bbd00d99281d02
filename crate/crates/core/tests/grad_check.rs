//! Finite-difference verification of every analytic gradient path: CE,
//! knowledge (coverage + penalty), KD, and the weighted total, each through
//! the full network in 64-bit.

use ndarray::Array2;
use rand::Rng;

use kreplay_core::corpus::{ImageFeatures, TokenSequence, Vocabulary, BOS_ID};
use kreplay_core::losses::{ce_grad, kd_grad, knowledge_grad, total_loss};
use kreplay_core::model::{params::Params, Model, ModelConfig};
use kreplay_core::replay::KnowledgeKeyword;
use kreplay_core::util::seeded_rng;

const H: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;
const NUM_COORDS: usize = 120;

fn tiny_setup() -> (Model<f64>, ImageFeatures, Vocabulary) {
    let vocab = Vocabulary::build(&["alpha beta gamma delta epsilon zeta eta theta"], 1).unwrap();
    assert_eq!(vocab.size(), 12);
    let cfg = ModelConfig {
        vocab_size: vocab.size(),
        d_model: 16,
        num_layers: 2,
        num_heads: 2,
        max_len: 8,
        dropout: 0.0,
        feature_dim: 6,
        seed: 42,
    };
    let model = Model::<f64>::init(&cfg).unwrap();
    let mut rng = seeded_rng(7, "gradcheck-image");
    let regions = Array2::from_shape_simple_fn((3, 6), || rng.random::<f64>() * 2.0 - 1.0);
    let image = ImageFeatures::new(regions, "grad-img".into()).unwrap();
    (model, image, vocab)
}

/// Checks the analytic gradient against central differences on a sample of
/// coordinates: random ones plus the largest-magnitude ones.
fn check_gradient(
    model: &Model<f64>,
    analytic: &Params<f64>,
    mut value_fn: impl FnMut(&Model<f64>) -> f64,
    label: &str,
) {
    let flat = analytic.to_flat();
    let n = flat.len();
    let mut rng = seeded_rng(1234, label);
    let mut coords: Vec<usize> = (0..NUM_COORDS).map(|_| rng.random_range(0..n)).collect();
    let mut by_mag: Vec<usize> = (0..n).collect();
    by_mag.sort_by(|&a, &b| flat[b].abs().partial_cmp(&flat[a].abs()).unwrap());
    coords.extend_from_slice(&by_mag[..20]);

    let mut checked = 0usize;
    for &idx in &coords {
        let mut plus = model.clone();
        plus.params.nudge(idx, H);
        let f_plus = value_fn(&plus);
        let mut minus = model.clone();
        minus.params.nudge(idx, -H);
        let f_minus = value_fn(&minus);
        let numeric = (f_plus - f_minus) / (2.0 * H);
        let a = flat[idx];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        assert!(
            rel < REL_TOL,
            "{label}: coordinate {idx}: analytic {a:.10e} vs numeric {numeric:.10e} (rel {rel:.3e})"
        );
        checked += 1;
    }
    assert!(checked >= NUM_COORDS, "{label}: too few coordinates checked");
}

#[test]
fn ce_gradient_matches_finite_differences() {
    let (model, image, _vocab) = tiny_setup();
    let input = vec![BOS_ID, 4, 5, 6, 7];
    let target = vec![4, 5, 6, 7, 8];
    let mask = vec![true; 5];

    let (logits, cache) = model.forward_cached(&image, &input).unwrap();
    let (_, dlogits) = ce_grad(&logits, &target, &mask).unwrap();
    let mut grads = model.params.zeros_like();
    model.backward(&cache, &dlogits, &mut grads);

    check_gradient(&model, &grads, |m| {
        let (logits, _) = m.forward_cached(&image, &input).unwrap();
        let (v, _) = ce_grad(&logits, &target, &mask).unwrap();
        v
    }, "ce");
}

#[test]
fn knowledge_gradient_matches_finite_differences() {
    let (model, image, vocab) = tiny_setup();
    let input = vec![BOS_ID, 4, 5, 6];
    // Two-token keyword exercises N > 1.
    let keyword = KnowledgeKeyword::new("beta gamma", 0, &vocab).unwrap();

    let (logits, cache) = model.forward_cached(&image, &input).unwrap();
    let (_, _, dlogits) = knowledge_grad(&logits, &keyword).unwrap();
    let mut grads = model.params.zeros_like();
    model.backward(&cache, &dlogits, &mut grads);

    check_gradient(&model, &grads, |m| {
        let (logits, _) = m.forward_cached(&image, &input).unwrap();
        let (cov, rep, _) = knowledge_grad(&logits, &keyword).unwrap();
        cov + rep
    }, "knowledge");
}

#[test]
fn kd_gradient_matches_finite_differences() {
    let (model, image, _vocab) = tiny_setup();
    let teacher = {
        let cfg = ModelConfig { seed: 99, ..model.config.clone() };
        Model::<f64>::init(&cfg).unwrap()
    };
    let input = vec![BOS_ID, 4, 5, 6, 7];
    let teacher_logits = teacher
        .forward(&image, &TokenSequence::new(input.clone()))
        .unwrap();

    for temperature in [1.0, 16.0] {
        let (logits, cache) = model.forward_cached(&image, &input).unwrap();
        let (_, dlogits) = kd_grad(&teacher_logits, &logits, temperature).unwrap();
        let mut grads = model.params.zeros_like();
        model.backward(&cache, &dlogits, &mut grads);

        check_gradient(&model, &grads, |m| {
            let (logits, _) = m.forward_cached(&image, &input).unwrap();
            let (v, _) = kd_grad(&teacher_logits, &logits, temperature).unwrap();
            v
        }, &format!("kd-T{temperature}"));
    }
}

/// The full mixed-batch objective: CE over caption items plus the knowledge
/// and KD terms over replay items with fixed pseudo-captions, weighted as
/// L = L_ce + lambda_know * L_know + lambda_kd * L_kd.
#[test]
fn total_gradient_matches_finite_differences() {
    let (model, image, vocab) = tiny_setup();
    let teacher = {
        let cfg = ModelConfig { seed: 99, ..model.config.clone() };
        Model::<f64>::init(&cfg).unwrap()
    };
    let mut rng = seeded_rng(3, "total-images");
    let image2 = ImageFeatures::new(
        Array2::from_shape_simple_fn((2, 6), || rng.random::<f64>() * 2.0 - 1.0),
        "img2".into(),
    )
    .unwrap();

    let (lambda_know, lambda_kd) = (1.0f64, 1.0f64);
    let temperature = 16.0;
    let ce_items = vec![
        (image.clone(), vec![BOS_ID, 4, 5, 6], vec![4, 5, 6, 2]),
        (image2.clone(), vec![BOS_ID, 7, 8], vec![7, 8, 2]),
    ];
    // Pseudo-captions are constants of the objective (Algorithm-style: decode
    // happens before the differentiated forward pass).
    let replay_items = vec![
        (image.clone(), vec![BOS_ID, 5, 6, 4], KnowledgeKeyword::new("beta gamma", 0, &vocab).unwrap()),
        (image2.clone(), vec![BOS_ID, 9, 10], KnowledgeKeyword::new("delta", 1, &vocab).unwrap()),
    ];

    let total_of = |m: &Model<f64>| -> f64 {
        let mut l_ce = 0.0;
        for (img, input, target) in &ce_items {
            let (logits, _) = m.forward_cached(img, input).unwrap();
            let mask = vec![true; target.len()];
            let (v, _) = ce_grad(&logits, target, &mask).unwrap();
            l_ce += v;
        }
        l_ce /= ce_items.len() as f64;
        let mut l_know = 0.0;
        let mut l_kd = 0.0;
        for (img, input, keyword) in &replay_items {
            let (logits, _) = m.forward_cached(img, input).unwrap();
            let (cov, rep, _) = knowledge_grad(&logits, keyword).unwrap();
            l_know += cov + rep;
            let t_logits = teacher.forward(img, &TokenSequence::new(input.clone())).unwrap();
            let (kd, _) = kd_grad(&t_logits, &logits, temperature).unwrap();
            l_kd += kd;
        }
        l_know /= replay_items.len() as f64;
        l_kd /= replay_items.len() as f64;
        total_loss(l_ce, l_know, l_kd, lambda_know, lambda_kd).unwrap()
    };

    // Analytic gradient with the same routing and averaging.
    let mut grads = model.params.zeros_like();
    let inv_c = 1.0 / ce_items.len() as f64;
    for (img, input, target) in &ce_items {
        let (logits, cache) = model.forward_cached(img, input).unwrap();
        let mask = vec![true; target.len()];
        let (_, mut dl) = ce_grad(&logits, target, &mask).unwrap();
        dl.mapv_inplace(|v| v * inv_c);
        model.backward(&cache, &dl, &mut grads);
    }
    let inv_k = 1.0 / replay_items.len() as f64;
    for (img, input, keyword) in &replay_items {
        let (logits, cache) = model.forward_cached(img, input).unwrap();
        let (_, _, mut dk) = knowledge_grad(&logits, keyword).unwrap();
        dk.mapv_inplace(|v| v * lambda_know * inv_k);
        let t_logits = teacher.forward(img, &TokenSequence::new(input.clone())).unwrap();
        let (_, mut dkd) = kd_grad(&t_logits, &logits, temperature).unwrap();
        dkd.mapv_inplace(|v| v * lambda_kd * inv_k);
        let dl = dk + dkd;
        model.backward(&cache, &dl, &mut grads);
    }

    check_gradient(&model, &grads, total_of, "total");
}
