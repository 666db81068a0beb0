//! Dual feed-forward encoder.
//!
//! Each modality has its own tower of affine + activation layers followed by a bias-free
//! projection into the shared space; outputs are L2-normalised onto the unit hypersphere.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};
use crate::tensor::{Graph, Tensor, Var};

/// Initial contrastive temperature.
pub const INIT_TAU: f64 = 0.07;
/// Upper bound on the logit scale `1/τ`.
pub const MAX_LOGIT_SCALE: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Activation::Tanh),
            1 => Some(Activation::Relu),
            _ => None,
        }
    }

    pub(crate) fn to_code(self) -> u8 {
        match self {
            Activation::Tanh => 0,
            Activation::Relu => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Image,
    Text,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub image_input_dim: usize,
    pub text_input_dim: usize,
    pub image_hidden: Vec<usize>,
    pub text_hidden: Vec<usize>,
    pub shared_dim: usize,
    pub activation: Activation,
    pub init_seed: u64,
}

impl EncoderConfig {
    /// Two hidden layers of width 64, tanh, 16-dimensional shared space.
    pub fn with_dims(image_input_dim: usize, text_input_dim: usize, init_seed: u64) -> Self {
        EncoderConfig {
            image_input_dim,
            text_input_dim,
            image_hidden: vec![64, 64],
            text_hidden: vec![64, 64],
            shared_dim: 16,
            activation: Activation::Tanh,
            init_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.image_input_dim, self.text_input_dim, self.shared_dim];
        if dims
            .iter()
            .chain(&self.image_hidden)
            .chain(&self.text_hidden)
            .any(|&d| d == 0)
        {
            return Err(Error::invalid("encoder dimensions must all be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `fan_in × fan_out`
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tower {
    pub layers: Vec<Layer>,
    /// `hidden × shared_dim`, no bias.
    pub projection: Tensor,
}

impl Tower {
    fn init(input: usize, hidden: &[usize], shared: usize, rng: &mut impl Rng) -> Result<Tower> {
        let mut uniform = |fan_in: usize, fan_out: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| (rng.random::<f64>() * 2.0 - 1.0) * bound)
                .collect();
            Tensor::matrix(fan_in, fan_out, data)
        };
        let mut layers = Vec::with_capacity(hidden.len());
        let mut fan_in = input;
        for &width in hidden {
            layers.push(Layer {
                weight: uniform(fan_in, width)?,
                bias: Tensor::zeros(vec![width]),
            });
            fan_in = width;
        }
        let projection = uniform(fan_in, shared)?;
        Ok(Tower { layers, projection })
    }

    pub fn input_dim(&self) -> usize {
        self.layers
            .first()
            .map_or(self.projection.shape()[0], |l| l.weight.shape()[0])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub activation: Activation,
    pub image: Tower,
    pub text: Tower,
    /// `ln(1/τ)`, stored as a scalar tensor.
    pub log_inv_tau: Tensor,
}

impl EncoderParams {
    /// Seeded uniform init in `±1/√fan_in`, zero biases, `τ = 0.07`.
    pub fn init(cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = stream_rng(cfg.init_seed, Stream::Init, 0, 0);
        let image = Tower::init(cfg.image_input_dim, &cfg.image_hidden, cfg.shared_dim, &mut rng)?;
        let text = Tower::init(cfg.text_input_dim, &cfg.text_hidden, cfg.shared_dim, &mut rng)?;
        Ok(EncoderParams {
            activation: cfg.activation,
            image,
            text,
            log_inv_tau: Tensor::scalar((1.0 / INIT_TAU).ln()),
        })
    }

    pub fn tower(&self, modality: Modality) -> &Tower {
        match modality {
            Modality::Image => &self.image,
            Modality::Text => &self.text,
        }
    }

    pub fn input_dim(&self, modality: Modality) -> usize {
        self.tower(modality).input_dim()
    }

    pub fn shared_dim(&self) -> usize {
        self.image.projection.shape()[1]
    }

    pub fn set_temperature(&mut self, tau: f64) -> Result<()> {
        if tau <= 0.0 || !tau.is_finite() {
            return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
        }
        self.log_inv_tau = Tensor::scalar((1.0 / tau).ln());
        Ok(())
    }

    /// Every parameter with a stable name, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (prefix, tower) in [("image", &self.image), ("text", &self.text)] {
            for (i, l) in tower.layers.iter().enumerate() {
                out.push((format!("{prefix}.{i}.weight"), &l.weight));
                out.push((format!("{prefix}.{i}.bias"), &l.bias));
            }
            out.push((format!("{prefix}.projection"), &tower.projection));
        }
        out.push(("log_inv_tau".to_string(), &self.log_inv_tau));
        out
    }

    /// Mutable parameters in the same order as [`EncoderParams::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for tower in [&mut self.image, &mut self.text] {
            for l in tower.layers.iter_mut() {
                out.push(&mut l.weight);
                out.push(&mut l.bias);
            }
            out.push(&mut tower.projection);
        }
        out.push(&mut self.log_inv_tau);
        out
    }

    /// Rebuilds parameters from the output of [`EncoderParams::named_tensors`].
    pub fn from_named(activation: Activation, named: Vec<(String, Tensor)>) -> Result<Self> {
        let malformed = |detail: String| Error::Malformed {
            what: "parameter set",
            detail,
        };
        let mut towers: [Option<Tower>; 2] = [None, None];
        let mut log_inv_tau = None;
        let mut iter = named.into_iter().peekable();
        for (slot, prefix) in ["image", "text"].into_iter().enumerate() {
            let mut layers = Vec::new();
            loop {
                let Some((name, t)) = iter.next() else {
                    return Err(malformed(format!("missing {prefix}.projection")));
                };
                if name == format!("{prefix}.projection") {
                    towers[slot] = Some(Tower { layers, projection: t });
                    break;
                }
                let i = layers.len();
                if name != format!("{prefix}.{i}.weight") {
                    return Err(malformed(format!("unexpected tensor {name:?}")));
                }
                let (bname, bias) = iter
                    .next()
                    .ok_or_else(|| malformed(format!("missing {prefix}.{i}.bias")))?;
                if bname != format!("{prefix}.{i}.bias") {
                    return Err(malformed(format!("unexpected tensor {bname:?}")));
                }
                layers.push(Layer { weight: t, bias });
            }
        }
        if let Some((name, t)) = iter.next() {
            if name != "log_inv_tau" || t.numel() != 1 {
                return Err(malformed(format!("unexpected tensor {name:?}")));
            }
            log_inv_tau = Some(t);
        }
        if let Some((name, _)) = iter.next() {
            return Err(malformed(format!("trailing tensor {name:?}")));
        }
        let [Some(image), Some(text)] = towers else {
            unreachable!("both towers parsed above")
        };
        let params = EncoderParams {
            activation,
            image,
            text,
            log_inv_tau: log_inv_tau.ok_or_else(|| malformed("missing log_inv_tau".into()))?,
        };
        params.check_shapes()?;
        Ok(params)
    }

    fn check_shapes(&self) -> Result<()> {
        let shared = self.shared_dim();
        for (name, tower) in [("image", &self.image), ("text", &self.text)] {
            let mut fan_in = None;
            for (i, l) in tower.layers.iter().enumerate() {
                let ws = l.weight.shape();
                let ok = ws.len() == 2 && l.bias.shape() == [ws[1]] && fan_in.is_none_or(|f| f == ws[0]);
                if !ok {
                    return Err(Error::shape("encoder", format!("{name} layer {i} does not chain")));
                }
                fan_in = Some(ws[1]);
            }
            let ps = tower.projection.shape();
            if ps.len() != 2 || ps[1] != shared || fan_in.is_some_and(|f| f != ps[0]) {
                return Err(Error::shape("encoder", format!("{name} projection {ps:?}")));
            }
        }
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.all_finite())
    }

    /// Places every parameter on the tape, trainable or constant.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundParams {
        let mut leaf = |t: &Tensor| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        let mut bind_tower = |t: &Tower| BoundTower {
            layers: t.layers.iter().map(|l| (leaf(&l.weight), leaf(&l.bias))).collect(),
            projection: leaf(&t.projection),
        };
        let image = bind_tower(&self.image);
        let text = bind_tower(&self.text);
        let log_inv_tau = leaf(&self.log_inv_tau);
        BoundParams {
            activation: self.activation,
            image,
            text,
            log_inv_tau,
        }
    }
}

impl EncoderParams {
    /// Builds [`BoundParams`] from vars already on a tape, given in the order of
    /// [`EncoderParams::named_tensors`]. Shapes are checked against `self`.
    pub fn bind_vars(&self, g: &Graph, vars: &[Var]) -> Result<BoundParams> {
        let named = self.named_tensors();
        if vars.len() != named.len() {
            return Err(Error::shape(
                "bind_vars",
                format!("expected {} vars, got {}", named.len(), vars.len()),
            ));
        }
        for ((name, t), &v) in named.iter().zip(vars) {
            if g.value(v).shape() != t.shape() {
                return Err(Error::shape(
                    "bind_vars",
                    format!("{name}: expected {:?}, got {:?}", t.shape(), g.value(v).shape()),
                ));
            }
        }
        let mut it = vars.iter().copied();
        let mut next_tower = |t: &Tower| BoundTower {
            layers: t
                .layers
                .iter()
                .map(|_| (it.next().unwrap(), it.next().unwrap()))
                .collect(),
            projection: it.next().unwrap(),
        };
        let image = next_tower(&self.image);
        let text = next_tower(&self.text);
        Ok(BoundParams {
            activation: self.activation,
            image,
            text,
            log_inv_tau: it.next().unwrap(),
        })
    }
}

#[derive(Debug, Clone)]
pub struct BoundTower {
    layers: Vec<(Var, Var)>,
    projection: Var,
}

/// Parameters recorded on a [`Graph`].
#[derive(Debug, Clone)]
pub struct BoundParams {
    activation: Activation,
    image: BoundTower,
    text: BoundTower,
    pub log_inv_tau: Var,
}

impl BoundParams {
    /// Vars in the order of [`EncoderParams::tensors_mut`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for tower in [&self.image, &self.text] {
            for &(w, b) in &tower.layers {
                out.push(w);
                out.push(b);
            }
            out.push(tower.projection);
        }
        out.push(self.log_inv_tau);
        out
    }
}

/// Runs one tower on `inputs` (`N × input_dim`) and returns unit-norm `N × d` embeddings.
pub fn encode(g: &mut Graph, params: &BoundParams, inputs: Var, modality: Modality) -> Result<Var> {
    let tower = match modality {
        Modality::Image => &params.image,
        Modality::Text => &params.text,
    };
    let mut x = inputs;
    for &(w, b) in &tower.layers {
        let z = g.matmul(x, w)?;
        let z = g.add(z, b)?;
        x = match params.activation {
            Activation::Tanh => g.tanh(z)?,
            Activation::Relu => g.relu(z)?,
        };
    }
    let projected = g.matmul(x, tower.projection)?;
    g.l2_normalize_rows(projected).map_err(|e| match e {
        Error::ZeroNormRow { row } => Error::DegenerateEmbedding { row },
        other => other,
    })
}

/// `clamp(exp(ln(1/τ)), 0, 100)`
pub fn logit_scale(g: &mut Graph, params: &BoundParams) -> Result<Var> {
    let s = g.exp(params.log_inv_tau)?;
    g.clamp(s, 0.0, MAX_LOGIT_SCALE)
}

/// Gradient-free batch encoding.
pub fn encode_batch(params: &EncoderParams, inputs: &Tensor, modality: Modality) -> Result<Tensor> {
    if !inputs.is_matrix() || inputs.cols() != params.input_dim(modality) {
        return Err(Error::shape(
            "encode_batch",
            format!(
                "{modality:?} tower expects {} input columns, got {:?}",
                params.input_dim(modality),
                inputs.shape()
            ),
        ));
    }
    if !inputs.all_finite() {
        return Err(Error::invalid("encode_batch: inputs must be finite"));
    }
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let x = g.constant(inputs.clone());
    let out = encode(&mut g, &bound, x, modality)?;
    Ok(g.value(out).clone())
}
