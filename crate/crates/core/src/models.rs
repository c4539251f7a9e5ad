//! Vision backbone, linear classifier head and the image-to-text projection.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::seeding;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    Mlp,
    TinyCnn,
}

impl Arch {
    pub fn as_str(self) -> &'static str {
        match self {
            Arch::Mlp => "mlp",
            Arch::TinyCnn => "tiny_cnn",
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Arch::Mlp => 0,
            Arch::TinyCnn => 1,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Arch::Mlp),
            1 => Some(Arch::TinyCnn),
            _ => None,
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(Arch::Mlp),
            "tiny_cnn" => Ok(Arch::TinyCnn),
            other => Err(Error::Usage(format!("unknown arch `{other}` (expected mlp|tiny_cnn)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub arch: Arch,
    /// `(channels, height, width)`
    pub input_shape: [usize; 3],
    pub d: usize,
    pub num_classes: usize,
    pub k: usize,
    pub init_seed: u64,
}

impl ModelConfig {
    pub fn new(arch: Arch, input_shape: [usize; 3], num_classes: usize) -> Self {
        Self {
            arch,
            input_shape,
            d: 64,
            num_classes,
            k: 16,
            init_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.k == 0 || self.num_classes == 0 || self.input_shape.contains(&0) {
            return Err(Error::Config(format!("invalid model config {self:?}")));
        }
        if self.arch == Arch::TinyCnn && (self.input_shape[1] < 2 || self.input_shape[2] < 2) {
            return Err(Error::Config("tiny_cnn needs inputs of at least 2×2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
}

impl Parameter {
    /// Weight decay applies to weight matrices, kernels and the projection,
    /// never to biases.
    pub fn decays(&self) -> bool {
        !self.name.ends_with(".bias")
    }
}

/// Backbone F, head G and projection W.
///
/// Parameter order is fixed: backbone parameters first, then `head.weight`
/// (d×C), `head.bias` (C) and `projection` (k×d).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    config: ModelConfig,
    params: Vec<Parameter>,
}

const CONV1_CH: usize = 8;
const CONV2_CH: usize = 16;

fn uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("positive extents")
}

/// Uniform initialization in `±1/√fan_in`, zero biases, projection in
/// `±1/√d`; fully determined by `config.init_seed`.
pub fn init_params(config: &ModelConfig) -> Result<ModelBundle> {
    config.validate()?;
    let mut rng = seeding::rng(config.init_seed, "init", 0);
    let [c, h, w] = config.input_shape;
    let d = config.d;
    let mut params = Vec::new();
    let mut push = |name: &str, value: Tensor| {
        params.push(Parameter { name: name.to_owned(), value: value.with_grad() })
    };
    match config.arch {
        Arch::Mlp => {
            let input = c * h * w;
            let hidden = 4 * d;
            push("backbone.fc1.weight", uniform(&[input, hidden], 1.0 / (input as f64).sqrt(), &mut rng));
            push("backbone.fc1.bias", Tensor::zeros(&[hidden]));
            push("backbone.fc2.weight", uniform(&[hidden, d], 1.0 / (hidden as f64).sqrt(), &mut rng));
            push("backbone.fc2.bias", Tensor::zeros(&[d]));
        }
        Arch::TinyCnn => {
            let fan1 = (c * 9) as f64;
            let fan2 = (CONV1_CH * 9) as f64;
            push("backbone.conv1.weight", uniform(&[CONV1_CH, c, 3, 3], 1.0 / fan1.sqrt(), &mut rng));
            push("backbone.conv2.weight", uniform(&[CONV2_CH, CONV1_CH, 3, 3], 1.0 / fan2.sqrt(), &mut rng));
            push("backbone.fc.weight", uniform(&[CONV2_CH, d], 1.0 / (CONV2_CH as f64).sqrt(), &mut rng));
            push("backbone.fc.bias", Tensor::zeros(&[d]));
        }
    }
    push("head.weight", uniform(&[d, config.num_classes], 1.0 / (d as f64).sqrt(), &mut rng));
    push("head.bias", Tensor::zeros(&[config.num_classes]));
    push("projection", uniform(&[config.k, d], 1.0 / (d as f64).sqrt(), &mut rng));
    Ok(ModelBundle { config: config.clone(), params })
}

/// Graph handles for every parameter of a bundle, in bundle order.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    fn backbone(&self) -> &[Var] {
        &self.vars[..self.vars.len() - 3]
    }

    pub fn head_weight(&self) -> Var {
        self.vars[self.vars.len() - 3]
    }

    pub fn head_bias(&self) -> Var {
        self.vars[self.vars.len() - 2]
    }

    pub fn projection(&self) -> Var {
        self.vars[self.vars.len() - 1]
    }
}

impl ModelBundle {
    /// Assembles a bundle from explicit parameters, checking names and shapes
    /// against a freshly initialized model of the same config.
    pub fn from_parameters(config: ModelConfig, params: Vec<Parameter>) -> Result<Self> {
        let template = init_params(&config)?;
        if template.params.len() != params.len() {
            return Err(Error::Format(format!(
                "expected {} parameters for {}, got {}",
                template.params.len(),
                config.arch,
                params.len()
            )));
        }
        for (t, p) in template.params.iter().zip(&params) {
            if t.name != p.name || t.value.shape() != p.value.shape() {
                return Err(Error::Format(format!(
                    "parameter `{}` {:?} does not match expected `{}` {:?}",
                    p.name,
                    p.value.shape(),
                    t.name,
                    t.value.shape()
                )));
            }
        }
        let params = params
            .into_iter()
            .map(|p| Parameter { name: p.name, value: p.value.with_grad() })
            .collect();
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Parameter> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.data().iter().all(|v| v.is_finite()))
    }

    /// Adds every parameter to `g`, as trainable leaves or as constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundParams {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    g.leaf(p.value.clone())
                } else {
                    g.constant(p.value.clone())
                }
            })
            .collect();
        BoundParams { vars }
    }

    /// Adds a `B×C×H×W` batch as a constant, validating its shape.
    pub fn input(&self, g: &mut Graph, batch: usize, pixels: Vec<f64>) -> Result<Var> {
        let [c, h, w] = self.config.input_shape;
        let t = Tensor::new(vec![batch, c, h, w], pixels)
            .map_err(|_| Error::dim("forward_features", format!("input does not match B×{c}×{h}×{w} for B={batch}")))?;
        Ok(g.constant(t))
    }

    /// Image representation `F(x)`: `B×C×H×W → B×d`.
    pub fn forward_features(&self, g: &mut Graph, bound: &BoundParams, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 4 || shape[1..] != self.config.input_shape {
            return Err(Error::dim(
                "forward_features",
                format!("input {shape:?} vs expected B×{:?}", self.config.input_shape),
            ));
        }
        let b = shape[0];
        let p = bound.backbone();
        match self.config.arch {
            Arch::Mlp => {
                let flat = g.reshape(x, vec![b, shape[1..].iter().product()])?;
                let h = g.matmul(flat, p[0])?;
                let h = g.add_bias(h, p[1])?;
                let h = g.relu(h);
                let f = g.matmul(h, p[2])?;
                g.add_bias(f, p[3])
            }
            Arch::TinyCnn => {
                let h = g.conv2d(x, p[0], 1, 1)?;
                let h = g.relu(h);
                let h = g.avg_pool2(h)?;
                let h = g.conv2d(h, p[1], 1, 1)?;
                let h = g.relu(h);
                let h = g.global_avg_pool(h)?;
                let f = g.matmul(h, p[2])?;
                g.add_bias(f, p[3])
            }
        }
    }

    /// Classifier head `G`: logits = f·weight + bias.
    pub fn classify(&self, g: &mut Graph, bound: &BoundParams, features: Var) -> Result<Var> {
        self.check_width(g, features, "classify")?;
        let z = g.matmul(features, bound.head_weight())?;
        g.add_bias(z, bound.head_bias())
    }

    /// Row i ↦ W·f_i, i.e. `features · Wᵀ` (B×k).
    pub fn project(&self, g: &mut Graph, bound: &BoundParams, features: Var) -> Result<Var> {
        self.check_width(g, features, "project")?;
        let wt = g.transpose(bound.projection())?;
        g.matmul(features, wt)
    }

    fn check_width(&self, g: &Graph, features: Var, op: &'static str) -> Result<()> {
        match g.shape(features) {
            [_, w] if *w == self.config.d => Ok(()),
            other => Err(Error::dim(op, format!("features {other:?}, expected B×{}", self.config.d))),
        }
    }

    /// Inference-only logits for a batch of images (row-major `B×C×H×W`).
    pub fn logits(&self, pixels: &[f64]) -> Result<Vec<f64>> {
        let per = self.config.input_shape.iter().product::<usize>();
        if per == 0 || pixels.len() % per != 0 || pixels.is_empty() {
            return Err(Error::dim("logits", format!("{} values is not a whole batch", pixels.len())));
        }
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let x = self.input(&mut g, pixels.len() / per, pixels.to_vec())?;
        let f = self.forward_features(&mut g, &bound, x)?;
        let z = self.classify(&mut g, &bound, f)?;
        Ok(g.value(z).data().to_vec())
    }
}
