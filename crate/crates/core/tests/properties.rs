use proptest::prelude::*;

use lesionkit::battery::{Battery, PromptItem, Subtest};
use lesionkit::generation::kl_divergence;
use lesionkit::lesion::{
    apply_lesion, matched_random_lesion, sample_mask, ControlUniverse, LesionSpec, Mask, Severity, Strategy as Replacement,
};
use lesionkit::matrix::Matrix;
use lesionkit::model::{ComponentKind, ModelConfig, ToyModel, TokenDistribution};
use lesionkit::scoring::features::surface_features_with;
use lesionkit::scoring::{heuristic_score, SymptomSchema, TextResources};

fn strategy() -> impl Strategy<Value = Replacement> {
    prop::sample::select(Replacement::ALL.to_vec())
}

fn matrix(max: usize) -> impl Strategy<Value = Matrix> {
    (1..=max, 1..=max).prop_flat_map(|(r, c)| {
        prop::collection::vec(-10.0f32..10.0, r * c).prop_map(move |d| Matrix::from_vec(r, c, d).unwrap())
    })
}

proptest! {
    #[test]
    fn zero_severity_is_identity(m in matrix(12), st in strategy(), seed: u64) {
        let mask = sample_mask(m.rows(), m.cols(), Severity::ZERO, seed);
        prop_assert_eq!(apply_lesion(&m, &mask, st).unwrap(), m);
    }

    #[test]
    fn retained_entries_are_untouched(m in matrix(12), st in strategy(), s in 0u32..=10_000, seed: u64) {
        let sev = Severity::new(s as f64 / 10_000.0).unwrap();
        let mask = sample_mask(m.rows(), m.cols(), sev, seed);
        let out = apply_lesion(&m, &mask, st).unwrap();
        for r in 0..m.rows() {
            for c in 0..m.cols() {
                if mask.is_retained(r, c) {
                    prop_assert_eq!(out.get(r, c).to_bits(), m.get(r, c).to_bits());
                } else if st == Replacement::Zero {
                    prop_assert_eq!(out.get(r, c), 0.0);
                }
            }
        }
    }

    #[test]
    fn masks_regenerate(rows in 1usize..40, cols in 1usize..40, s in 0u32..=10_000, seed: u64) {
        let sev = Severity::new(s as f64 / 10_000.0).unwrap();
        prop_assert_eq!(sample_mask(rows, cols, sev, seed), sample_mask(rows, cols, sev, seed));
    }

    #[test]
    fn severity_canonicalises(s in 0u32..=10_000) {
        let a = Severity::new(s as f64 / 10_000.0).unwrap();
        let b: Severity = a.canonical().parse::<f64>().map(|v| Severity::new(v).unwrap()).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn feature_ratios_bounded(bytes in prop::collection::vec(any::<u8>(), 0..200), prompt in ".{0,60}") {
        let text = String::from_utf8_lossy(&bytes);
        let f = surface_features_with(TextResources::bundled(), &prompt, &text);
        prop_assert!(f.ratios_in_unit_interval(), "{:?}", f);
    }

    #[test]
    fn heuristic_is_pure(bytes in prop::collection::vec(any::<u8>(), 0..120)) {
        let text = String::from_utf8_lossy(&bytes);
        let schema = SymptomSchema::default_schema();
        let p = PromptItem::connected_text("p", "Tell me about your first job");
        prop_assert_eq!(heuristic_score(&p, &text, &schema), heuristic_score(&p, &text, &schema));
    }

    #[test]
    fn kl_is_nonnegative(a in prop::collection::vec(-8.0f32..8.0, 2..20), shift in prop::collection::vec(-3.0f32..3.0, 20)) {
        let b: Vec<f32> = a.iter().zip(&shift).map(|(x, s)| x + s).collect();
        let p = TokenDistribution::from_logits(&a);
        let q = TokenDistribution::from_logits(&b);
        prop_assert!(kl_divergence(p.probs(), q.probs()).unwrap() >= 0.0);
        prop_assert_eq!(kl_divergence(p.probs(), p.probs()).unwrap(), 0.0);
    }

    #[test]
    fn softmax_sums_to_one(a in prop::collection::vec(-80.0f32..80.0, 1..300)) {
        let total: f64 = TokenDistribution::from_logits(&a).probs().iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-6);
    }

    #[test]
    fn battery_round_trip(ids in prop::collection::btree_set("[a-z]{1,6}", 1..8), texts in prop::collection::vec(".{0,30}", 8)) {
        let items: Vec<PromptItem> = ids
            .iter()
            .zip(&texts)
            .map(|(id, t)| PromptItem::connected_text(id.clone(), t.clone()))
            .collect();
        let b = Battery::new(items).unwrap();
        let json = b.to_json();
        let back = Battery::from_json(&json).unwrap();
        prop_assert_eq!(back.to_json(), json);
        prop_assert_eq!(back.count(Subtest::ConnectedText), b.len());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn matched_random_counts_match(
        layer in 0usize..2,
        kind in prop::sample::select(ComponentKind::ALL.to_vec()),
        s in 1u32..=10_000,
        base_seed: u64,
        control_seed: u64,
        same_layer: bool,
    ) {
        let model = ToyModel::build(ModelConfig { d_model: 8, n_heads: 2, d_ffn: 12, n_layers: 2, ..ModelConfig::toy(1) }).unwrap();
        let sev = Severity::new(s as f64 / 10_000.0).unwrap();
        let spec = LesionSpec::new("toy", layer, kind, sev, Replacement::Zero, base_seed);
        let (r, c) = model.config().component_shape(kind);
        let target = spec.mask_for(r, c).zero_count();
        let universe = if same_layer { ControlUniverse::SameLayer } else { ControlUniverse::WholeModel };
        let masks = matched_random_lesion(&model, &spec, control_seed, universe).unwrap();
        let zeros: usize = masks.iter().map(|(_, _, m): &(usize, ComponentKind, Mask)| m.zero_count()).sum();
        prop_assert_eq!(zeros, target);
    }
}
