//! Optimized kernels against the brute-force references, exhaustively on small shapes.

use adaptqa_core::autograd::{Padding, Tape, ValueGrid};
use adaptqa_core::cacnn::{self, CacnnConfig, CacnnParams, Reduction};
use adaptqa_core::span::{decode_span, span_f1};
use adaptqa_oracles as oracle;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn rows(flat: &[f64], cols: usize) -> oracle::Matrix {
    flat.chunks(cols).map(<[f64]>::to_vec).collect()
}

fn filters(flat: &[f64], k: usize, w: usize, c: usize) -> Vec<oracle::Matrix> {
    flat.chunks(w * c).take(k).map(|f| rows(f, c)).collect()
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

#[test]
fn conv1d_matches_brute_force_on_every_small_shape() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut checked = 0;
    for len in 1..=8 {
        for c in 1..=8 {
            for k in 1..=8 {
                for w in 1..=8 {
                    let x = random(&mut rng, len * c);
                    let f = random(&mut rng, k * w * c);
                    for (padding, same) in [(Padding::Same, true), (Padding::Valid, false)] {
                        let mut tape = Tape::new();
                        let xv = tape.constant(ValueGrid::matrix(len, c, x.clone()).unwrap());
                        let fv = tape.constant(ValueGrid::new(vec![k, w, c], f.clone()).unwrap());
                        let out = tape.conv1d(xv, fv, padding);
                        if !same && w > len {
                            assert!(out.is_err());
                            continue;
                        }
                        let out = out.unwrap();
                        let expect: Vec<f64> = oracle::conv1d(&rows(&x, c), &filters(&f, k, w, c), same)
                            .into_iter()
                            .flatten()
                            .collect();
                        assert_eq!(bits(tape.data(out)), bits(&expect), "L={len} C={c} K={k} w={w} same={same}");
                        checked += 1;
                    }
                }
            }
        }
    }
    assert!(checked > 6000);
}

struct Head {
    config: CacnnConfig,
    initial: Vec<f64>,
    initial_bias: Vec<f64>,
    context: Vec<f64>,
    context_bias: Vec<f64>,
}

impl Head {
    fn random(rng: &mut ChaCha8Rng, config: CacnnConfig, h: usize) -> Self {
        let (n_f, w1) = (config.initial_filters, config.initial_width);
        Self {
            config,
            initial: random(rng, n_f * w1 * h),
            initial_bias: random(rng, n_f),
            context: random(rng, config.context_filters * config.context_width),
            context_bias: random(rng, config.context_filters),
        }
    }

    fn run(&self, x: &[f64], len: usize, h: usize) -> Vec<f64> {
        let c = &self.config;
        let mut tape = Tape::new();
        let xv = tape.constant(ValueGrid::matrix(len, h, x.to_vec()).unwrap());
        let has_context = c.context_filters > 0;
        let p = CacnnParams {
            initial_weight: tape.constant(
                ValueGrid::new(vec![c.initial_filters, c.initial_width, h], self.initial.clone()).unwrap(),
            ),
            initial_bias: tape.constant(ValueGrid::vector(self.initial_bias.clone())),
            context_weight: has_context.then(|| {
                tape.constant(ValueGrid::new(vec![c.context_filters, c.context_width, 1], self.context.clone()).unwrap())
            }),
            context_bias: has_context.then(|| tape.constant(ValueGrid::vector(self.context_bias.clone()))),
        };
        let out = cacnn::forward(&mut tape, c, &p, xv).unwrap();
        assert_eq!(tape.shape(out), &[len, c.sample_filters]);
        tape.data(out).to_vec()
    }

    fn oracle(&self, x: &[f64], h: usize) -> Vec<f64> {
        let c = &self.config;
        let x = rows(x, h);
        let initial = filters(&self.initial, c.initial_filters, c.initial_width, h);
        let out = if c.context_filters > 0 {
            let context = rows(&self.context, c.context_width);
            oracle::ContextVectorOracle {
                initial_filters: &initial,
                initial_bias: &self.initial_bias,
                context_filters: &context,
                context_bias: &self.context_bias,
                feature_maps: c.sample_filters,
                sample_width: c.sample_width,
                use_max: c.reduction == Reduction::Max,
                relu_between: c.relu_between,
            }
            .forward(&x)
        } else {
            oracle::cacnn_simplified(&x, &initial, &self.initial_bias, c.sample_filters, c.sample_width, c.relu_between)
        };
        out.into_iter().flatten().collect()
    }
}

#[test]
fn worked_context_vector_example() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let head = Head::random(&mut rng, CacnnConfig::context_vector(4, 2, 2, 2, 2, 1), 3);
    let x = random(&mut rng, 6 * 3);
    assert_eq!(bits(&head.run(&x, 6, 3)), bits(&head.oracle(&x, 3)));
}

#[test]
fn worked_simplified_example() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let head = Head::random(&mut rng, CacnnConfig::simplified(2, 1, 2, 2), 2);
    let x = random(&mut rng, 8 * 2);
    assert_eq!(bits(&head.run(&x, 8, 2)), bits(&head.oracle(&x, 2)));
}

#[test]
fn both_variants_match_brute_force_on_every_small_config() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut context_runs, mut simplified_runs) = (0, 0);
    let mut idx = 0usize;
    for len in 1..=6 {
        for h in 1..=6 {
            for n_f in 1..=6 {
                for k in 1..=6 {
                    for w1 in 1..=6 {
                        for w2 in 1..=6 {
                            idx += 1;
                            let x = random(&mut rng, len * h);
                            let mut cv = CacnnConfig::context_vector(n_f, w1, 1 + idx % n_f, 1 + idx % 3, k, w2);
                            cv.reduction = if idx.is_multiple_of(4) { Reduction::Sum } else { Reduction::Max };
                            cv.relu_between = idx.is_multiple_of(5);
                            let head = Head::random(&mut rng, cv, h);
                            assert_eq!(bits(&head.run(&x, len, h)), bits(&head.oracle(&x, h)), "{cv:?} L={len} H={h}");
                            context_runs += 1;

                            let mut sv = CacnnConfig::simplified(n_f, w1, k, w2);
                            sv.relu_between = idx.is_multiple_of(5);
                            if sv.validate(h, Some(len)).is_ok() {
                                let head = Head::random(&mut rng, sv, h);
                                assert_eq!(bits(&head.run(&x, len, h)), bits(&head.oracle(&x, h)), "{sv:?} L={len} H={h}");
                                simplified_runs += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    assert_eq!(context_runs, 6usize.pow(6));
    assert!(simplified_runs > 1000, "{simplified_runs}");
}

#[test]
fn decode_span_matches_exhaustive_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for len in 1..=12 {
        for trial in 0..200 {
            let start = random(&mut rng, len);
            let end = random(&mut rng, len);
            let max_len = 1 + trial % 8;
            let got = decode_span(&start, &end, max_len);
            let (s, e, score) = oracle::best_span(&start, &end, max_len);
            assert_eq!(got.span, (s, e), "L={len} trial={trial}");
            assert_eq!(got.score.to_bits(), score.to_bits());
        }
    }
}

#[test]
fn decode_span_ties_match_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for len in 1..=12 {
        for _ in 0..200 {
            let start: Vec<f64> = (0..len).map(|_| f64::from(rng.gen_range(0..3))).collect();
            let end: Vec<f64> = (0..len).map(|_| f64::from(rng.gen_range(0..3))).collect();
            let (s, e, _) = oracle::best_span(&start, &end, 30);
            assert_eq!(decode_span(&start, &end, 30).span, (s, e));
        }
    }
}

#[test]
fn span_f1_matches_position_sets() {
    for s in 0..10 {
        for e in s..10 {
            for gs in 0..10 {
                for ge in gs..10 {
                    let pred = if s == 0 { (0, 0) } else { (s, e) };
                    let gold = if gs == 0 { (0, 0) } else { (gs, ge) };
                    assert!((span_f1(pred, gold) - oracle::span_f1(pred, gold)).abs() < 1e-15);
                }
            }
        }
    }
}
