use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{ModelConfig, KERNEL};
use crate::tensor::{Scalar, Tensor, TensorError};

/// Every stored parameter of the model, in a fixed insertion order that
/// also fixes the optimizer-state and checkpoint layout.
///
/// There is exactly one copy of the text decoder and one of the multimodal
/// decoder; the three modes differ only in which mode token leads the text
/// and which image contexts are supplied.
#[derive(Debug, Clone, PartialEq)]
pub struct FadVlpModel<T: Scalar = f32> {
    config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn uniform(&mut self, shape: &[usize], bound: f64) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| self.rng.gen_range(-bound..bound))
    }

    /// Glorot-uniform for a `[fan_in, fan_out]` matrix.
    fn matrix(&mut self, fan_in: usize, fan_out: usize) -> Tensor<f64> {
        self.uniform(&[fan_in, fan_out], (6.0 / (fan_in + fan_out) as f64).sqrt())
    }
}

impl<T: Scalar> FadVlpModel<T> {
    /// Fresh random initialisation; gates start at zero.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, TensorError> {
        config.validate()?;
        let mut model = FadVlpModel {
            config: config.clone(),
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        };
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let c = &config;
        let d = c.width;

        let mut cin = c.channels;
        for (s, &cout) in c.conv_widths.iter().enumerate() {
            let fan_in = KERNEL * KERNEL * cin;
            let w = init.uniform(&[fan_in, cout], (6.0 / fan_in as f64).sqrt());
            model.add(&format!("enc.conv{s}.w"), w);
            model.add(&format!("enc.conv{s}.b"), Tensor::zeros(&[cout]));
            model.add(&format!("enc.norm{s}.g"), Tensor::full(&[cout], 1.0));
            model.add(&format!("enc.norm{s}.b"), Tensor::zeros(&[cout]));
            cin = cout;
        }
        let n = c.conv_widths.len();
        for (tag, stage) in [("adapt3", n - 2), ("adapt4", n - 1)] {
            let w = init.matrix(c.conv_widths[stage], d);
            model.add(&format!("enc.{tag}.w"), w);
            model.add(&format!("enc.{tag}.b"), Tensor::zeros(&[d]));
        }
        let stage_emb = init.uniform(&[2, d], 0.1);
        model.add("enc.stage_emb", stage_emb);

        let tok = init.uniform(&[c.vocab_size, d], 0.1);
        model.add("emb.tok", tok);
        let pos = init.uniform(&[c.max_len + 1, d], 0.1);
        model.add("emb.pos", pos);

        for l in 0..c.text_layers {
            model.add_layer(&mut init, &format!("text.{l}"), false);
        }
        for l in 0..c.mm_layers {
            model.add_layer(&mut init, &format!("mm.{l}"), true);
        }
        for head in ["f", "g", "h"] {
            let w = init.matrix(d, c.joint_dim);
            model.add(&format!("head.{head}.w"), w);
        }
        let lm = init.matrix(d, c.vocab_size);
        model.add("lm.w", lm);
        model.add("lm.b", Tensor::zeros(&[c.vocab_size]));
        Ok(model)
    }

    fn add_attention(&mut self, init: &mut Init, prefix: &str) {
        let d = self.config.width;
        for proj in ["q", "k", "v", "o"] {
            let w = init.matrix(d, d);
            self.add(&format!("{prefix}.{proj}.w"), w);
            self.add(&format!("{prefix}.{proj}.b"), Tensor::zeros(&[d]));
        }
    }

    fn add_norm(&mut self, prefix: &str) {
        let d = self.config.width;
        self.add(&format!("{prefix}.g"), Tensor::full(&[d], 1.0));
        self.add(&format!("{prefix}.b"), Tensor::zeros(&[d]));
    }

    fn add_layer(&mut self, init: &mut Init, prefix: &str, multimodal: bool) {
        let (d, f) = (self.config.width, self.config.ffn_width);
        self.add_attention(init, &format!("{prefix}.self"));
        self.add_norm(&format!("{prefix}.self_norm"));
        if multimodal {
            self.add_attention(init, &format!("{prefix}.cross"));
            self.add_norm(&format!("{prefix}.cross_norm"));
            self.add_attention(init, &format!("{prefix}.gated"));
            self.add(&format!("{prefix}.gate"), Tensor::zeros(&[1]));
        }
        let up = init.matrix(d, f);
        self.add(&format!("{prefix}.ffn.up.w"), up);
        self.add(&format!("{prefix}.ffn.up.b"), Tensor::zeros(&[f]));
        let down = init.matrix(f, d);
        self.add(&format!("{prefix}.ffn.down.w"), down);
        self.add(&format!("{prefix}.ffn.down.b"), Tensor::zeros(&[d]));
        self.add_norm(&format!("{prefix}.ffn_norm"));
    }

    fn add(&mut self, name: &str, value: Tensor<f64>) {
        self.insert(name, value.cast()).expect("initialisation names are unique");
    }

    /// Appends a new named parameter (e.g. a classification head).
    pub fn insert(&mut self, name: &str, value: Tensor<T>) -> Result<(), TensorError> {
        if self.index.contains_key(name) {
            return Err(TensorError::Invalid {
                op: "insert_param",
                detail: format!("parameter {name} already exists"),
            });
        }
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.tensors.push(value);
        Ok(())
    }

    /// Assembles a model from stored parts, checking that every parameter
    /// a fresh model would create is present with the same shape.
    pub fn from_parts(config: ModelConfig, named: Vec<(String, Tensor<T>)>) -> Result<Self, TensorError> {
        let reference = FadVlpModel::<T>::new(config.clone(), 0)?;
        let mut model = FadVlpModel {
            config,
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        };
        for (name, t) in named {
            model.insert(&name, t)?;
        }
        for (name, t) in reference.iter() {
            match model.get(name) {
                None => {
                    return Err(TensorError::Invalid {
                        op: "from_parts",
                        detail: format!("missing parameter {name}"),
                    })
                }
                Some(have) if have.shape() != t.shape() => {
                    return Err(TensorError::Invalid {
                        op: "from_parts",
                        detail: format!("{name}: shape {:?}, config expects {:?}", have.shape(), t.shape()),
                    })
                }
                _ => {}
            }
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Changes the temperature, the one hyperparameter that owns no weights.
    pub fn set_temperature(&mut self, temperature: f64) -> Result<(), TensorError> {
        let config = ModelConfig {
            temperature,
            ..self.config.clone()
        };
        config.validate()?;
        self.config = config;
        Ok(())
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.position(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.position(name).map(|i| &mut self.tensors[i])
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> FadVlpModel<U> {
        FadVlpModel {
            config: self.config.clone(),
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }
}
