#![allow(dead_code)]

pub mod oracle;
pub mod triplet_oracle;

use fadvlp::model::vocab::{BOS, EOS};
use fadvlp::model::{FadVlpModel, ModelConfig, Session, TextBatch};
use fadvlp::objectives::{cmc_loss, hmc_loss, iclm_loss, rclm_loss, LmNormalization, PairBatch, TripletBatch};
use fadvlp::tensor::{finite_difference_gradient, max_relative_error, relative_error, Reduction};
use fadvlp::{Tape, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor for gradients that vanish up to round-off.
pub const FLOOR: f64 = 1e-6;

type Build = fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>;

pub struct Primitive {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub build: Build,
}

fn p(name: &'static str, shapes: &[&[usize]], build: Build) -> Primitive {
    Primitive {
        name,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        build,
    }
}

/// Every differentiable tape operation, each on a small fixed shape.
pub fn primitives() -> Vec<Primitive> {
    vec![
        p("add", &[&[3, 4], &[3, 4]], |t, v| t.add(v[0], v[1])),
        p("add_broadcast", &[&[2, 3, 4], &[4]], |t, v| t.add(v[0], v[1])),
        p("sub", &[&[3, 4], &[3, 4]], |t, v| t.sub(v[0], v[1])),
        p("mul", &[&[3, 4], &[3, 4]], |t, v| t.mul(v[0], v[1])),
        p("mul_broadcast", &[&[2, 3, 4], &[3, 4]], |t, v| t.mul(v[0], v[1])),
        p("scale", &[&[3, 4]], |t, v| t.scale(v[0], 0.7)),
        p("add_scalar", &[&[3, 4]], |t, v| t.add_scalar(v[0], -1.3)),
        p("matmul", &[&[3, 4], &[4, 2]], |t, v| t.matmul(v[0], v[1])),
        p("bmm", &[&[2, 3, 4], &[2, 4, 2]], |t, v| t.bmm(v[0], v[1])),
        p("transpose", &[&[3, 4]], |t, v| t.transpose(v[0])),
        p("permute", &[&[2, 3, 4]], |t, v| t.permute(v[0], &[2, 0, 1])),
        p("reshape", &[&[3, 4]], |t, v| t.reshape(v[0], &[2, 6])),
        p("concat", &[&[2, 3], &[2, 2]], |t, v| t.concat(&[v[0], v[1]], 1)),
        p("slice", &[&[4, 5]], |t, v| t.slice(v[0], 1, 1, 3)),
        p("gather_rows", &[&[5, 3]], |t, v| t.gather_rows(v[0], &[0, 2, 2, 4])),
        p("sum", &[&[3, 4]], |t, v| t.sum(v[0])),
        p("mean", &[&[3, 4]], |t, v| t.mean(v[0])),
        p("sum_axis", &[&[2, 3, 4]], |t, v| t.sum_axis(v[0], 1)),
        p("mean_axis", &[&[2, 3, 4]], |t, v| t.mean_axis(v[0], 2)),
        p("gelu", &[&[3, 4]], |t, v| t.gelu(v[0])),
        p("tanh", &[&[3, 4]], |t, v| t.tanh(v[0])),
        p("softmax", &[&[3, 4]], |t, v| t.softmax(v[0], 1)),
        p("log_softmax", &[&[3, 4]], |t, v| t.log_softmax(v[0], 0)),
        p("layer_norm", &[&[3, 4], &[4], &[4]], |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5)),
        p("l2_normalize", &[&[3, 4]], |t, v| t.l2_normalize(v[0], 1, 1e-12)),
        p("cross_entropy_mean", &[&[4, 5]], |t, v| {
            t.cross_entropy(v[0], &[1, 0, 4, 3], Some(3), Reduction::Mean)
        }),
        p("cross_entropy_sum", &[&[4, 5]], |t, v| t.cross_entropy(v[0], &[1, 0, 4, 2], None, Reduction::Sum)),
        p("im2col", &[&[1, 4, 4, 2]], |t, v| t.im2col(v[0], 3, 1, 1)),
        p("im2col_strided", &[&[2, 5, 5, 1]], |t, v| t.im2col(v[0], 2, 2, 0)),
    ]
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Seeded weights `w` so the checked scalar is `Σ w ⊙ out`.
fn weighted<T: fadvlp::tensor::Scalar>(tape: &mut Tape<T>, out: Var, seed: u64) -> Result<Var, TensorError> {
    let shape = tape.shape(out).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = Tensor::from_fn(&shape, |_| T::lit(rng.gen_range(-1.0..1.0)));
    let w = tape.constant(w);
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

/// Max relative error between backward and central differences over
/// every input coordinate of one random instance.
pub fn check_primitive(prim: &Primitive, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Tensor<f64>> = prim.shapes.iter().map(|s| random(s, &mut rng)).collect();
    let eval = |xs: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = (prim.build)(&mut tape, &vars).unwrap();
        let l = weighted(&mut tape, out, seed).unwrap();
        tape.value(l).item()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let out = (prim.build)(&mut tape, &vars).unwrap();
    let l = weighted(&mut tape, out, seed).unwrap();
    let grads = tape.backward(l).unwrap();
    let mut worst = 0.0f64;
    for k in 0..inputs.len() {
        let analytic = grads.dense(&tape, vars[k]);
        let numeric = finite_difference_gradient(
            |xk: &Tensor<f64>| {
                let mut xs = inputs.clone();
                xs[k] = xk.clone();
                eval(&xs)
            },
            &inputs[k],
            H,
        );
        worst = worst.max(max_relative_error(analytic.data(), numeric.data(), FLOOR));
    }
    worst
}

pub fn toy_config() -> ModelConfig {
    ModelConfig {
        image_size: 8,
        channels: 3,
        conv_widths: vec![4, 6, 8, 8],
        conv_strides: vec![2, 2, 2, 2],
        vocab_size: 12,
        width: 8,
        text_layers: 1,
        mm_layers: 1,
        heads: 2,
        ffn_width: 8,
        joint_dim: 4,
        max_len: 6,
        dropout: 0.0,
        temperature: 0.5,
    }
}

/// A toy model with every parameter, gates included, moved off its
/// initial value.
pub fn toy_model(seed: u64) -> FadVlpModel<f64> {
    let mut m = FadVlpModel::<f64>::new(toy_config(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    for t in m.tensors_mut() {
        for x in t.data_mut() {
            *x += rng.gen_range(-0.3..0.3);
        }
    }
    m
}

pub fn toy_images(b: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(&[b, 8, 8, 3], |_| rng.gen_range(0.0..1.0))
}

pub fn toy_captions(b: usize, rng: &mut ChaCha8Rng) -> TextBatch {
    let rows = (0..b)
        .map(|_| {
            let n = rng.gen_range(0..=4);
            let mut row = vec![BOS];
            row.extend((0..n).map(|_| rng.gen_range(7..12u32)));
            row.push(EOS);
            row
        })
        .collect();
    TextBatch::captions(rows, 6).unwrap()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Composite {
    Cmc,
    Iclm,
    Hmc,
    Rclm,
}

impl Composite {
    pub const ALL: [Composite; 4] = [Composite::Cmc, Composite::Iclm, Composite::Hmc, Composite::Rclm];
}

/// Max relative error of the composite loss gradient over a random
/// sample of coordinates from every parameter the loss reaches.
pub fn check_composite(which: Composite, seed: u64) -> f64 {
    let model = toy_model(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = rng.gen_range(2..=3);
    let pairs = PairBatch {
        ids: (0..b as u64).collect(),
        images: toy_images(b, &mut rng),
        captions: toy_captions(b, &mut rng),
    };
    let triplets = TripletBatch {
        reference_ids: (0..b as u64).collect(),
        target_ids: (10..10 + b as u64).collect(),
        references: toy_images(b, &mut rng),
        captions: toy_captions(b, &mut rng),
        targets: toy_images(b, &mut rng),
    };
    let norm = if seed % 2 == 0 {
        LmNormalization::SumPerCaption
    } else {
        LmNormalization::PerToken
    };
    let loss = |s: &mut Session<f64>| match which {
        Composite::Cmc => cmc_loss(s, &pairs),
        Composite::Iclm => iclm_loss(s, &pairs, norm),
        Composite::Hmc => hmc_loss(s, &triplets),
        Composite::Rclm => rclm_loss(s, &triplets, norm),
    };
    let mut s = Session::train(&model);
    let l = loss(&mut s).unwrap();
    let grads = s.gradients(l).unwrap();
    let eval = |m: &FadVlpModel<f64>| {
        let mut s = Session::eval(m);
        let l = loss(&mut s).unwrap();
        s.tape.value(l).item()
    };
    let mut worst = 0.0f64;
    for (pi, g) in grads.iter().enumerate() {
        let Some(g) = g else { continue };
        for _ in 0..2 {
            let i = rng.gen_range(0..g.len());
            let mut up = model.clone();
            up.tensors_mut()[pi].data_mut()[i] += H;
            let mut down = model.clone();
            down.tensors_mut()[pi].data_mut()[i] -= H;
            let numeric = (eval(&up) - eval(&down)) / (2.0 * H);
            // attention key biases cancel inside softmax, so their gradient is zero up to round-off
            worst = worst.max(relative_error(g[i], numeric, 1e-5));
        }
    }
    worst
}
