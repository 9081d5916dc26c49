use adaptqa_core::autograd::gradcheck::{check_gradients, random_grid, DEFAULT_STEP, DEFAULT_TOLERANCE};
use adaptqa_core::autograd::{Tape, ValueGrid, Var};
use adaptqa_core::cacnn::{self, CacnnConfig, CacnnParams, CacnnVariant};
use adaptqa_core::encoder::{BoundParams, EncoderConfig, EncoderInput};
use adaptqa_core::model::{build_model, span_logits, HeadConfig, ModelConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn params_for(tape: &mut Tape, config: &CacnnConfig, h: usize, rng: &mut ChaCha8Rng) -> CacnnParams {
    let shapes = config.param_shapes(h);
    let vars: Vec<Var> = shapes.iter().map(|(_, s)| tape.constant(random_grid(rng, s))).collect();
    CacnnParams {
        initial_weight: vars[0],
        initial_bias: vars[1],
        context_weight: vars.get(2).copied(),
        context_bias: vars.get(3).copied(),
    }
}

#[test]
fn zero_input_gives_zero_output() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let config = CacnnConfig::simplified(3, 2, 2, 2);
    let mut tape = Tape::new();
    let p = params_for(&mut tape, &config, 4, &mut rng);
    let x = tape.constant(ValueGrid::zeros(&[8, 4]));
    let out = cacnn::forward_simplified(&mut tape, &config, &p, x).unwrap();
    assert!(tape.data(out).iter().all(|&v| v == 0.0));
}

#[test]
fn constant_input_gives_constant_rows_with_unit_sample_width() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let config = CacnnConfig::context_vector(5, 3, 2, 2, 4, 1);
    let mut tape = Tape::new();
    let p = params_for(&mut tape, &config, 3, &mut rng);
    let row = [0.3, -1.2, 0.7];
    let x = tape.constant(ValueGrid::matrix(7, 3, row.repeat(7)).unwrap());
    let out = cacnn::forward_context_vector(&mut tape, &config, &p, x).unwrap();
    let data = tape.data(out);
    for t in 1..7 {
        assert_eq!(&data[t * 4..(t + 1) * 4], &data[..4]);
    }
}

#[test]
fn wrong_variant_is_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let config = CacnnConfig::simplified(4, 1, 3, 1);
    let mut tape = Tape::new();
    let p = params_for(&mut tape, &config, 2, &mut rng);
    let x = tape.constant(ValueGrid::zeros(&[8, 2]));
    assert!(cacnn::forward_context_vector(&mut tape, &config, &p, x).is_err());
    let short = tape.constant(ValueGrid::zeros(&[1, 2]));
    assert!(cacnn::forward_simplified(&mut tape, &config, &p, short).is_err());
}

fn stack_gradcheck(config: CacnnConfig, len: usize, h: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = vec![random_grid(&mut rng, &[len, h])];
    inputs.extend(config.param_shapes(h).iter().map(|(_, s)| random_grid(&mut rng, s)));
    inputs.push(random_grid(&mut rng, &[config.sample_filters, 2]));
    inputs.push(random_grid(&mut rng, &[2]));
    let context = config.variant == CacnnVariant::ContextVector;
    let check = check_gradients(
        "cacnn+affine",
        &inputs,
        |tape, v| {
            let p = CacnnParams {
                initial_weight: v[1],
                initial_bias: v[2],
                context_weight: context.then(|| v[3]),
                context_bias: context.then(|| v[4]),
            };
            let n = v.len();
            let maps = cacnn::forward(tape, &config, &p, v[0])?;
            let (s, e) = cacnn::head_logits(tape, maps, v[n - 2], v[n - 1])?;
            tape.concat(&[s, e], 0)
        },
        DEFAULT_STEP,
        DEFAULT_TOLERANCE,
        seed,
    )
    .unwrap();
    assert!(check.passed(), "{config:?}: {}", check.max_rel_error);
    check.max_rel_error
}

#[test]
fn gradients_through_the_full_stack() {
    for seed in 0..10 {
        stack_gradcheck(CacnnConfig::context_vector(5, 3, 2, 3, 3, 2), 6, 4, seed);
        stack_gradcheck(CacnnConfig::simplified(4, 2, 2, 3), 6, 3, seed);
    }
}

#[test]
fn initial_filters_receive_gradient_through_synthesized_filters() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for config in [CacnnConfig::context_vector(4, 2, 2, 2, 3, 1), CacnnConfig::simplified(4, 2, 3, 1)] {
        let mut tape = Tape::new();
        let x = tape.constant(random_grid(&mut rng, &[6, 3]));
        let shapes = config.param_shapes(3);
        let iw = tape.variable(random_grid(&mut rng, &shapes[0].1));
        let ib = tape.variable(random_grid(&mut rng, &shapes[1].1));
        let (cw, cb) = if shapes.len() > 2 {
            (Some(tape.constant(random_grid(&mut rng, &shapes[2].1))), Some(tape.constant(random_grid(&mut rng, &shapes[3].1))))
        } else {
            (None, None)
        };
        let p = CacnnParams {
            initial_weight: iw,
            initial_bias: ib,
            context_weight: cw,
            context_bias: cb,
        };
        let out = cacnn::forward(&mut tape, &config, &p, x).unwrap();
        let total = tape.sum(out);
        tape.backward(total);
        assert!(tape.grad(iw).unwrap().iter().any(|&g| g != 0.0), "{config:?}");
    }
}

#[test]
fn examples_in_a_batch_do_not_interact() {
    let config = ModelConfig::new(
        EncoderConfig::desk(2),
        HeadConfig::Cacnn(CacnnConfig::context_vector(6, 3, 2, 2, 4, 3)),
    );
    let reg = build_model(&config, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let batch: Vec<Vec<usize>> = (0..5).map(|_| (0..12).map(|_| rng.gen_range(0..64)).collect()).collect();
    let segments = vec![0usize; 12];
    let run = |order: &[usize]| {
        let mut tape = Tape::new();
        let params = BoundParams::bind(&mut tape, &reg).unwrap();
        order
            .iter()
            .map(|&i| {
                let input = EncoderInput {
                    tokens: &batch[i],
                    segments: &segments,
                    attention_mask: None,
                };
                let (s, _) = span_logits(&mut tape, &params, &config, input).unwrap();
                tape.data(s).to_vec()
            })
            .collect::<Vec<_>>()
    };
    let forward = run(&[0, 1, 2, 3, 4]);
    let permuted = run(&[3, 0, 4, 2, 1]);
    for (pos, &i) in [3, 0, 4, 2, 1].iter().enumerate() {
        assert_eq!(permuted[pos], forward[i]);
    }
}

#[test]
fn runs_at_bert_base_width() {
    let h = 768;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cases = [
        (CacnnConfig::context_vector(16, 3, 3, 4, 20, 3), 32),
        (CacnnConfig::simplified(8, 1, 4, 1), 384),
    ];
    for (config, len) in cases {
        config.validate(h, Some(len)).unwrap();
        let mut tape = Tape::new();
        let p = params_for(&mut tape, &config, h, &mut rng);
        let x = tape.constant(random_grid(&mut rng, &[len, h]));
        let w = tape.constant(random_grid(&mut rng, &[config.sample_filters, 2]));
        let b = tape.constant(ValueGrid::vector(vec![0.0, 0.0]));
        let maps = cacnn::forward(&mut tape, &config, &p, x).unwrap();
        let (s, e) = cacnn::head_logits(&mut tape, maps, w, b).unwrap();
        assert_eq!(tape.shape(s), &[len]);
        assert!(tape.value(e).is_finite());
        let count = config.param_count(h);
        assert!(count > 2 * config.sample_filters as u64 + 2);
    }
}

#[test]
fn affine_layer_for_twenty_maps_has_42_parameters() {
    let config = ModelConfig::new(
        EncoderConfig::desk(2),
        HeadConfig::Cacnn(CacnnConfig::context_vector(4, 1, 2, 2, 20, 1)),
    );
    let reg = build_model(&config, 0).unwrap();
    let affine: usize = reg.iter().filter(|(n, _)| n.starts_with("head.span.")).map(|(_, p)| p.numel()).sum();
    assert_eq!(affine, 42);
}

proptest! {
    #[test]
    fn registry_counts_match_closed_form(
        n_f in 1usize..8, w1 in 1usize..5, m in 1usize..4, k in 1usize..6, w2 in 1usize..4, wc_off in 0usize..8,
        simplified in any::<bool>(),
    ) {
        let config = if simplified {
            CacnnConfig::simplified(n_f, w1, k, w2)
        } else {
            CacnnConfig::context_vector(n_f, w1, 1 + wc_off % n_f, m, k, w2)
        };
        let model = ModelConfig::new(EncoderConfig::desk(2), HeadConfig::Cacnn(config));
        let reg = build_model(&model, 0).unwrap();
        prop_assert_eq!(cacnn::registry_head_count(&reg), config.param_count(32));
        let (h, nf) = (32u64, n_f as u64);
        let expected = if simplified {
            nf * (w1 as u64 * h + 1) + 2 * k as u64 + 2
        } else {
            nf * (w1 as u64 * h + 1) + m as u64 * ((1 + wc_off % n_f) as u64 + 1) + 2 * k as u64 + 2
        };
        prop_assert_eq!(config.param_count(32), expected);
    }
}
