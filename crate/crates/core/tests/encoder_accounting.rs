use adaptqa_core::accounting::count;
use adaptqa_core::autograd::Tape;
use adaptqa_core::cacnn::CacnnConfig;
use adaptqa_core::encoder::{
    apply_freeze_policy, build_encoder, forward, AdapterConfig, BoundParams, EncoderConfig, EncoderInput,
    FreezePolicy, ParameterRegistry,
};
use adaptqa_core::model::{build_model, model_layout, HeadConfig, ModelConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_config() -> impl Strategy<Value = EncoderConfig> {
    (1usize..4, 1usize..4, 1usize..4, 1usize..3, 2usize..20).prop_map(|(layers, heads, dh, mult, vocab)| EncoderConfig {
        vocab_size: vocab,
        hidden_size: heads * dh * 2,
        num_layers: layers,
        num_heads: heads,
        intermediate_size: heads * dh * 2 * mult,
        max_seq_len: 12,
        adapter: None,
        init_std: 0.02,
    })
}

fn policy_for(n: usize) -> impl Strategy<Value = FreezePolicy> {
    (0..=n, any::<bool>(), any::<bool>()).prop_map(|(k, e, a)| FreezePolicy {
        top_layers_trainable: k,
        embeddings_trainable: e,
        adapters_trainable: a,
    })
}

fn head_strategy() -> impl Strategy<Value = HeadConfig> {
    prop_oneof![
        Just(HeadConfig::AffineSpan),
        (1usize..5, 1usize..3, 1usize..4, 1usize..4).prop_map(|(n_f, w1, k, w2)| HeadConfig::Cacnn(
            CacnnConfig::context_vector(n_f + 1, w1, 2, 2, k, w2)
        )),
        (1usize..5, 1usize..3, 1usize..4, 1usize..4)
            .prop_map(|(n_f, w1, k, w2)| HeadConfig::Cacnn(CacnnConfig::simplified(n_f, w1, k, w2))),
    ]
}

fn hidden(reg: &ParameterRegistry, config: &EncoderConfig, tokens: &[usize], segments: &[usize]) -> Vec<u64> {
    let mut tape = Tape::new();
    let params = BoundParams::bind(&mut tape, reg).unwrap();
    let input = EncoderInput {
        tokens,
        segments,
        attention_mask: None,
    };
    let out = forward(&mut tape, &params, config, input).unwrap();
    tape.data(out.hidden).iter().map(|v| v.to_bits()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn zero_init_adapters_leave_output_bit_identical(
        config in small_config(), a in 1usize..6, seed in any::<u64>(), len in 1usize..12,
    ) {
        let adapted = config.clone().with_adapter(Some(AdapterConfig::new(a)));
        let base = build_encoder(&config, seed).unwrap();
        let with = build_encoder(&adapted, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tokens: Vec<usize> = (0..len).map(|_| rng.gen_range(0..config.vocab_size)).collect();
        let segments: Vec<usize> = (0..len).map(|_| rng.gen_range(0..2)).collect();
        prop_assert_eq!(hidden(&base, &config, &tokens, &segments), hidden(&with, &adapted, &tokens, &segments));
    }

    #[test]
    fn closed_form_counts_equal_registry_counts(
        config in small_config(), adapter in proptest::option::of(1usize..6), head in head_strategy(), policy_seed in any::<u64>(),
    ) {
        let config = config.with_adapter(adapter.map(AdapterConfig::new));
        let mut rng = ChaCha8Rng::seed_from_u64(policy_seed);
        let policy = FreezePolicy {
            top_layers_trainable: rng.gen_range(0..=config.num_layers),
            embeddings_trainable: rng.gen(),
            adapters_trainable: rng.gen(),
        };
        let model = ModelConfig::new(config.clone(), head);
        let mut reg = build_model(&model, 0).unwrap();
        apply_freeze_policy(&mut reg, &config, &policy).unwrap();
        let report = count(&config, &policy, &head).unwrap();
        prop_assert_eq!(report.total, reg.total_count());
        prop_assert_eq!(report.trainable_under_policy, reg.trainable_count());
        prop_assert_eq!(report.frozen(), reg.frozen_count());
        let summary = reg.trainable_parameters();
        prop_assert_eq!(summary.trainable_count + summary.frozen_count(), summary.total_count);
    }

    #[test]
    fn more_training_never_means_fewer_trainable_parameters(
        config in small_config(), policy in policy_for(3), a in 1usize..8,
    ) {
        let k = policy.top_layers_trainable.min(config.num_layers);
        let policy = FreezePolicy { top_layers_trainable: k, ..policy };
        let head = HeadConfig::AffineSpan;
        let t = |c: &EncoderConfig, p: &FreezePolicy| count(c, p, &head).unwrap().trainable_under_policy;
        if k < config.num_layers {
            let deeper = FreezePolicy { top_layers_trainable: k + 1, ..policy };
            prop_assert!(t(&config, &deeper) >= t(&config, &policy));
        }
        let small = config.clone().with_adapter(Some(AdapterConfig::new(a)));
        let large = config.clone().with_adapter(Some(AdapterConfig::new(a + 1)));
        prop_assert!(t(&small, &policy) >= t(&config, &policy));
        prop_assert!(t(&large, &policy) >= t(&small, &policy));
    }
}

#[test]
fn five_identity_configurations() {
    let configs = [(2, 4, 1), (4, 8, 2), (2, 32, 3), (4, 1, 4), (2, 16, 5)];
    for (layers, a, seed) in configs {
        let base = EncoderConfig::desk(layers);
        let adapted = base.clone().with_adapter(Some(AdapterConfig::new(a)));
        let r0 = build_encoder(&base, seed).unwrap();
        let r1 = build_encoder(&adapted, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let len = rng.gen_range(8..64);
        let tokens: Vec<usize> = (0..len).map(|_| rng.gen_range(0..64)).collect();
        let segments: Vec<usize> = (0..len).map(|i| usize::from(i > len / 4)).collect();
        assert_eq!(hidden(&r0, &base, &tokens, &segments), hidden(&r1, &adapted, &tokens, &segments));
    }
}

#[test]
fn bert_base_layout_agrees_with_closed_form() {
    for adapter in [None, Some(64), Some(768)] {
        let config = EncoderConfig::bert_base().with_adapter(adapter.map(AdapterConfig::new));
        for policy in [FreezePolicy::top(0), FreezePolicy::top(1), FreezePolicy::top(6), FreezePolicy::full(12)] {
            let model = ModelConfig::new(config.clone(), HeadConfig::AffineSpan);
            let mut layout = model_layout(&model).unwrap();
            apply_freeze_policy(&mut layout, &config, &policy).unwrap();
            let report = count(&config, &policy, &HeadConfig::AffineSpan).unwrap();
            assert_eq!(report.trainable_under_policy, layout.trainable_count());
            assert_eq!(report.total, layout.total_count());
        }
    }
}

#[test]
fn checkpoint_file_roundtrip() {
    let config = ModelConfig::new(
        EncoderConfig::desk(2).with_adapter(Some(AdapterConfig::new(4))),
        HeadConfig::Cacnn(CacnnConfig::context_vector(4, 2, 2, 2, 3, 1)),
    );
    let mut reg = build_model(&config, 8).unwrap();
    apply_freeze_policy(&mut reg, &config.encoder, &FreezePolicy::top(1)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("params.txt");
    reg.write_text(std::io::BufWriter::new(std::fs::File::create(&path).unwrap())).unwrap();
    let back = ParameterRegistry::read_text(std::io::BufReader::new(std::fs::File::open(&path).unwrap())).unwrap();
    assert_eq!(back, reg);
}
