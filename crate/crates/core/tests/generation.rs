use lesionkit::generation::{dose_proxies, generate, mean_logprob_tokens, DecodeConfig, GenerationStatus, Intervention};
use lesionkit::lesion::{LesionSpec, Severity, Strategy};
use lesionkit::matrix::Matrix;
use lesionkit::model::{component_checksum, Backend, ComponentKind, ModelConfig, PositionalScheme, ToyModel};

/// With every layer matrix zero the residual stream is just the embedding,
/// so the next-token distribution depends only on the current token.
fn markov_chain(unembed: [[f32; 3]; 3]) -> ToyModel {
    let mut model = ToyModel::zeros(ModelConfig {
        vocab_size: 3,
        d_model: 3,
        n_layers: 1,
        n_heads: 1,
        d_ffn: 2,
        init_seed: 0,
        positional: PositionalScheme::None,
    })
    .unwrap();
    let eye = Matrix::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
    model.set_embedding(eye).unwrap();
    model
        .set_unembedding(Matrix::from_rows(&unembed.map(|r| r.to_vec())).unwrap())
        .unwrap();
    model
}

#[test]
fn three_token_chain_rule() {
    let u = [[0.2, -0.4, 1.0], [0.7, 0.1, -0.3], [-0.5, 0.9, 0.0]];
    let model = markov_chain(u);
    // rms of a one-hot 3-vector scales the hot entry to 1/sqrt(1/3 + eps).
    let scale = 1.0 / (1.0f64 / 3.0 + 1e-5).sqrt();
    let p = |from: usize, to: usize| {
        let z: f64 = (0..3).map(|j| (u[j][from] as f64 * scale).exp()).sum();
        (u[to][from] as f64 * scale).exp() / z
    };
    let expected = (p(0, 1).ln() + p(1, 2).ln() + p(2, 2).ln()) / 3.0;
    let got = mean_logprob_tokens(&model, &[0], &[1, 2, 2]).unwrap();
    assert!((got - expected).abs() < 1e-6, "{got} vs {expected}");
}

#[test]
fn certain_model_has_zero_logprob() {
    let big = 60.0;
    // Entry [j][i] is the logit of token j after token i: 0 -> 1 -> 2 -> 0.
    let model = markov_chain([[0.0, 0.0, big], [big, 0.0, 0.0], [0.0, big, 0.0]]);
    let lp = mean_logprob_tokens(&model, &[0], &[1, 2, 0, 1]).unwrap();
    assert!(lp.abs() < 1e-12, "{lp}");
}

#[test]
fn failed_decoding_is_reported_and_restored() {
    let mut model = ToyModel::build(ModelConfig::toy(8)).unwrap();
    // Huge unembedding overflows the logits to infinity.
    let (v, d) = (model.config().vocab_size, model.config().d_model);
    model.set_unembedding(Matrix::filled(v, d, f32::MAX)).unwrap();
    let before = component_checksum(&model).unwrap();
    let spec = LesionSpec::new("toy", 1, ComponentKind::Value, Severity::new(0.5).unwrap(), Strategy::Zero, 0);
    let out = generate(&mut model, Some(&spec), "Tell me about your first job", &DecodeConfig::default()).unwrap();
    assert_eq!(out.status, GenerationStatus::GenerationFailed);
    assert!(out.token_ids.is_empty() && out.error.is_some());
    assert_eq!(component_checksum(&model).unwrap(), before);
}

#[test]
fn unaddressable_lesion_is_an_error() {
    let mut model = ToyModel::build(ModelConfig::toy(8)).unwrap();
    let spec = LesionSpec::new("toy", 12, ComponentKind::Value, Severity::FULL, Strategy::Zero, 0);
    assert!(generate(&mut model, Some(&spec), "x", &DecodeConfig::default()).is_err());
}

#[test]
fn full_ablation_moves_residual_more_than_quarter() {
    // Recorded sanity check on the fixture model, not a theorem.
    let mut model = ToyModel::build(ModelConfig::toy(0)).unwrap();
    let prompts = ["Tell me about the best trip you ever took", "Do you cut grass with an axe?"];
    let mut wins = 0;
    for kind in ComponentKind::ALL {
        let r = |s: f64, model: &mut ToyModel| {
            let spec = LesionSpec::new("toy", 1, kind, Severity::new(s).unwrap(), Strategy::Zero, 0);
            dose_proxies(model, Intervention::Lesion(&spec), &prompts).unwrap().residual_change
        };
        let quarter = r(0.25, &mut model);
        let full = r(1.0, &mut model);
        println!("{kind}: residual change 25% = {quarter:.4}, 100% = {full:.4}");
        wins += (full >= quarter) as usize;
    }
    println!("full >= quarter for {wins}/7 components");
    assert_eq!(model.n_layers(), 4);
}
