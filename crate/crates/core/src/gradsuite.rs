//! The finite-difference suite behind `adaptqa gradcheck`: every
//! differentiable tape op plus whole-model composites.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::gradcheck::{check_gradients, distinct_grid, random_grid, GradCheck, DEFAULT_STEP};
use crate::autograd::{CustomOp, Padding, Tape, ValueGrid, Var};
use crate::cacnn::CacnnConfig;
use crate::encoder::{AdapterConfig, BoundParams, EncoderConfig, EncoderInput};
use crate::error::Result;
use crate::model::{build_model, span_logits, HeadConfig, ModelConfig};

/// One named check, parameterized by seed.
#[derive(Clone, Copy)]
pub struct Case {
    pub name: &'static str,
    run: fn(&str, u64, f64) -> Result<GradCheck>,
}

impl Case {
    pub fn run(&self, seed: u64, tolerance: f64) -> Result<GradCheck> {
        (self.run)(self.name, seed, tolerance)
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn check(
    name: &str,
    inputs: &[ValueGrid],
    seed: u64,
    tol: f64,
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<GradCheck> {
    check_gradients(name, inputs, f, DEFAULT_STEP, tol, seed)
}

macro_rules! case {
    ($name:literal, |$n:ident, $seed:ident, $tol:ident| $body:expr) => {
        Case {
            name: $name,
            run: |$n, $seed, $tol| $body,
        }
    };
}

/// One check per differentiable operation.
pub fn op_cases() -> Vec<Case> {
    vec![
        case!("matmul", |n, s, t| {
            let mut r = rng(s);
            let (a, b) = (random_grid(&mut r, &[3, 4]), random_grid(&mut r, &[4, 2]));
            check(n, &[a, b], s, t, |tp, v| tp.matmul(v[0], v[1]))
        }),
        case!("add", |n, s, t| {
            let mut r = rng(s);
            let (a, b) = (random_grid(&mut r, &[3, 4]), random_grid(&mut r, &[3, 4]));
            check(n, &[a, b], s, t, |tp, v| tp.add(v[0], v[1]))
        }),
        case!("mul", |n, s, t| {
            let mut r = rng(s);
            let (a, b) = (random_grid(&mut r, &[3, 4]), random_grid(&mut r, &[3, 4]));
            check(n, &[a, b], s, t, |tp, v| tp.mul(v[0], v[1]))
        }),
        case!("add_row", |n, s, t| {
            let mut r = rng(s);
            let (a, b) = (random_grid(&mut r, &[3, 4]), random_grid(&mut r, &[4]));
            check(n, &[a, b], s, t, |tp, v| tp.add_row(v[0], v[1]))
        }),
        case!("affine", |n, s, t| {
            let mut r = rng(s);
            let x = random_grid(&mut r, &[3, 4]);
            let w = random_grid(&mut r, &[4, 5]);
            let b = random_grid(&mut r, &[5]);
            check(n, &[x, w, b], s, t, |tp, v| tp.affine(v[0], v[1], v[2]))
        }),
        case!("scale", |n, s, t| {
            let x = random_grid(&mut rng(s), &[3, 4]);
            check(n, &[x], s, t, |tp, v| Ok(tp.scale(v[0], -1.7)))
        }),
        case!("gelu", |n, s, t| {
            let x = random_grid(&mut rng(s), &[3, 4]);
            check(n, &[x], s, t, |tp, v| Ok(tp.gelu(v[0])))
        }),
        case!("relu", |n, s, t| {
            // Entries sit on a grid offset from zero, away from the kink.
            let mut x = distinct_grid(&mut rng(s), &[3, 4], 0.13);
            x.data_mut().iter_mut().for_each(|v| *v += 0.065);
            check(n, &[x], s, t, |tp, v| Ok(tp.relu(v[0])))
        }),
        case!("tanh", |n, s, t| {
            let x = random_grid(&mut rng(s), &[3, 4]);
            check(n, &[x], s, t, |tp, v| Ok(tp.tanh(v[0])))
        }),
        case!("softmax", |n, s, t| {
            let x = random_grid(&mut rng(s), &[2, 5]);
            check(n, &[x], s, t, |tp, v| tp.softmax(v[0], 1))
        }),
        case!("layer_norm", |n, s, t| {
            let mut r = rng(s);
            let x = random_grid(&mut r, &[3, 8]);
            let g = random_grid(&mut r, &[8]);
            let b = random_grid(&mut r, &[8]);
            check(n, &[x, g, b], s, t, |tp, v| tp.layer_norm(v[0], v[1], v[2], 1e-12))
        }),
        case!("conv1d", |n, s, t| {
            let mut r = rng(s);
            let x = random_grid(&mut r, &[7, 3]);
            let f = random_grid(&mut r, &[2, 3, 3]);
            let same = s % 2 == 0;
            check(n, &[x, f], s, t, move |tp, v| {
                tp.conv1d(v[0], v[1], if same { Padding::Same } else { Padding::Valid })
            })
        }),
        case!("max_reduce", |n, s, t| {
            let x = distinct_grid(&mut rng(s), &[5, 3], 0.1);
            check(n, &[x], s, t, |tp, v| tp.max_reduce(v[0]))
        }),
        case!("sum_reduce", |n, s, t| {
            let x = random_grid(&mut rng(s), &[5, 3]);
            check(n, &[x], s, t, |tp, v| tp.sum_reduce(v[0]))
        }),
        case!("sum", |n, s, t| {
            let x = random_grid(&mut rng(s), &[5, 3]);
            check(n, &[x], s, t, |tp, v| Ok(tp.sum(v[0])))
        }),
        case!("concat", |n, s, t| {
            let mut r = rng(s);
            let (a, b) = (random_grid(&mut r, &[2, 3]), random_grid(&mut r, &[2, 2]));
            check(n, &[a, b], s, t, |tp, v| tp.concat(&[v[0], v[1]], 1))
        }),
        case!("split", |n, s, t| {
            let x = random_grid(&mut rng(s), &[4, 5]);
            check(n, &[x], s, t, |tp, v| {
                let parts = tp.split(v[0], 1, &[2, 3])?;
                let a = tp.scale(parts[0], 2.0);
                let b = tp.transpose(parts[1])?;
                let b = tp.reshape(b, &[4, 3])?;
                tp.concat(&[a, b], 1)
            })
        }),
        case!("reshape", |n, s, t| {
            let x = random_grid(&mut rng(s), &[3, 4]);
            check(n, &[x], s, t, |tp, v| tp.reshape(v[0], &[2, 6]))
        }),
        case!("transpose", |n, s, t| {
            let x = random_grid(&mut rng(s), &[3, 4]);
            check(n, &[x], s, t, |tp, v| tp.transpose(v[0]))
        }),
        case!("tile", |n, s, t| {
            let x = random_grid(&mut rng(s), &[2, 3]);
            check(n, &[x], s, t, |tp, v| tp.tile(v[0], 17))
        }),
        case!("embedding_lookup", |n, s, t| {
            let mut r = rng(s);
            let table = random_grid(&mut r, &[6, 3]);
            let ids: Vec<usize> = (0..5).map(|_| r.gen_range(0..6)).collect();
            check(n, &[table], s, t, move |tp, v| tp.embedding(v[0], &ids))
        }),
        case!("cross_entropy", |n, s, t| {
            let mut r = rng(s);
            let logits = random_grid(&mut r, &[7]);
            let target = r.gen_range(0..7);
            check(n, &[logits], s, t, move |tp, v| tp.cross_entropy(v[0], target))
        }),
    ]
}

/// A small encoder so that every parameter can be perturbed in a few seconds.
fn tiny_encoder() -> EncoderConfig {
    EncoderConfig {
        vocab_size: 11,
        hidden_size: 8,
        num_layers: 2,
        num_heads: 2,
        intermediate_size: 16,
        max_seq_len: 8,
        adapter: Some(AdapterConfig {
            up_init_std: 0.3,
            ..AdapterConfig::new(3)
        }),
        init_std: 0.3,
    }
}

/// Gradient of summed start/end logits with respect to every model parameter.
fn composite(name: &str, head: HeadConfig, seed: u64, tol: f64) -> Result<GradCheck> {
    let config = ModelConfig::new(tiny_encoder(), head);
    let registry = build_model(&config, seed)?;
    let names: Vec<String> = registry.names().map(str::to_string).collect();
    let inputs: Vec<ValueGrid> = registry
        .iter()
        .map(|(_, p)| ValueGrid::new(p.shape.clone(), p.values.clone()))
        .collect::<Result<_>>()?;
    let mut r = rng(seed);
    let len = 6;
    let tokens: Vec<usize> = (0..len).map(|_| r.gen_range(0..11)).collect();
    let segments: Vec<usize> = (0..len).map(|i| usize::from(i >= 2)).collect();
    let mut mask = vec![1u8; len];
    mask[len - 1] = 0;
    check(name, &inputs, seed, tol, |tape, vars| {
        let params = BoundParams::from_vars(names.iter().cloned().zip(vars.iter().copied()));
        let input = EncoderInput {
            tokens: &tokens,
            segments: &segments,
            attention_mask: Some(&mask),
        };
        let (s, e) = span_logits(tape, &params, &config, input)?;
        tape.concat(&[s, e], 0)
    })
}

/// Encoder + adapters with each head type, differentiated end to end.
pub fn composite_cases() -> Vec<Case> {
    vec![
        case!("encoder+adapter+affine", |n, s, t| composite(n, HeadConfig::AffineSpan, s, t)),
        case!("encoder+adapter+cacnn-context", |n, s, t| composite(
            n,
            HeadConfig::Cacnn(CacnnConfig::context_vector(5, 3, 2, 2, 3, 2)),
            s,
            t
        )),
        case!("encoder+adapter+cacnn-simplified", |n, s, t| composite(
            n,
            HeadConfig::Cacnn(CacnnConfig::simplified(8, 2, 2, 3)),
            s,
            t
        )),
    ]
}

/// `x²` with a deliberately wrong backward rule (`x` instead of `2x`).
struct WrongSquare;

impl CustomOp for WrongSquare {
    fn name(&self) -> &str {
        "wrong_square"
    }

    fn forward(&self, inputs: &[&ValueGrid]) -> Result<ValueGrid> {
        let x = inputs[0];
        ValueGrid::new(x.shape().to_vec(), x.data().iter().map(|v| v * v).collect())
    }

    fn backward(&self, inputs: &[&ValueGrid], _output: &ValueGrid, grad_out: &[f64]) -> Vec<Vec<f64>> {
        vec![inputs[0].data().iter().zip(grad_out).map(|(x, g)| x * g).collect()]
    }
}

/// A check that must fail; proves the harness notices a broken backward.
pub fn faulty_case() -> Case {
    case!("wrong_square (injected fault)", |n, s, t| {
        let x = random_grid(&mut rng(s), &[3, 3]);
        check(n, &[x], s, t, |tp, v| tp.custom(Box::new(WrongSquare), &[v[0]]))
    })
}
