//! The two trainable token mappers: `phi` (image embedding -> pseudo-word
//! token) and `phi_ts` (text embedding -> supplement token). Both are
//! `d -> h -> h -> d` perceptrons with tanh hidden units and a linear output.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::rng::{rng_from, uniform_fan_in};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapperRole {
    Phi,
    PhiTs,
}

impl MapperRole {
    pub fn name(self) -> &'static str {
        match self {
            MapperRole::Phi => "phi",
            MapperRole::PhiTs => "phi_ts",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    /// `[fan_in x fan_out]`, applied as `x · weight`.
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MapperParams {
    role: MapperRole,
    dim: usize,
    hidden: usize,
    layers: Vec<Layer>,
}

/// Tape handles of one registered mapper, in layer order.
#[derive(Clone, Debug)]
pub struct MapperVars {
    pub layers: Vec<(Var, Var)>,
}

impl MapperVars {
    pub fn all(&self) -> impl Iterator<Item = Var> + '_ {
        self.layers.iter().flat_map(|(w, b)| [*w, *b])
    }
}

pub fn param_count(dim: usize, hidden: usize) -> usize {
    2 * hidden * dim + hidden * hidden + 2 * hidden + dim
}

impl MapperParams {
    /// Seeded uniform init in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`. The role
    /// does not enter the draw: equal seeds give equal weights.
    pub fn init(role: MapperRole, dim: usize, hidden: usize, seed: u64) -> Result<Self> {
        if dim == 0 || hidden == 0 {
            return Err(Error::param("mapper", "dim and hidden must be positive"));
        }
        let mut rng = rng_from(seed);
        let mut layers = Vec::with_capacity(3);
        for (fan_in, fan_out) in [(dim, hidden), (hidden, hidden), (hidden, dim)] {
            let weight =
                Tensor::matrix(fan_in, fan_out, uniform_fan_in(&mut rng, fan_in * fan_out, fan_in))?;
            let bias = Tensor::vector(uniform_fan_in(&mut rng, fan_out, fan_in));
            layers.push(Layer { weight, bias });
        }
        Ok(MapperParams {
            role,
            dim,
            hidden,
            layers,
        })
    }

    pub fn from_layers(role: MapperRole, layers: Vec<Layer>) -> Result<Self> {
        if layers.len() != 3 {
            return Err(Error::shape("mapper", format!("{} layers, expected 3", layers.len())));
        }
        let dim = layers[0].weight.rows();
        let hidden = layers[0].weight.cols();
        let expect = [(dim, hidden), (hidden, hidden), (hidden, dim)];
        for (l, (i, o)) in layers.iter().zip(expect) {
            if l.weight.shape() != [i, o] || l.bias.len() != o {
                return Err(Error::shape(
                    "mapper",
                    format!(
                        "layer {:?}/{:?} does not fit {}x{}",
                        l.weight.shape(),
                        l.bias.shape(),
                        i,
                        o
                    ),
                ));
            }
        }
        Ok(MapperParams {
            role,
            dim,
            hidden,
            layers,
        })
    }

    pub fn role(&self) -> MapperRole {
        self.role
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Parameter tensors with stable names (`l0.weight`, `l0.bias`, ...).
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::with_capacity(6);
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("l{}.weight", i), &l.weight));
            out.push((format!("l{}.bias", i), &l.bias));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.all_finite() && l.bias.all_finite())
    }

    /// Zeroes the output layer, making every token zero.
    pub fn zero_output_layer(&mut self) {
        let last = self.layers.last_mut().expect("three layers");
        last.weight.data_mut().fill(0.0);
        last.bias.data_mut().fill(0.0);
    }

    /// Records the parameters as differentiable leaves.
    pub fn register(&self, tape: &mut Tape) -> MapperVars {
        self.register_with(tape, true)
    }

    fn register_with(&self, tape: &mut Tape, trainable: bool) -> MapperVars {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                (
                    tape.leaf(l.weight.clone().with_grad(trainable)),
                    tape.leaf(l.bias.clone().with_grad(trainable)),
                )
            })
            .collect();
        MapperVars { layers }
    }

    /// Maps rows of `input` (`[n x dim]`) to unnormalized tokens.
    pub fn forward(&self, tape: &mut Tape, vars: &MapperVars, input: Var) -> Result<Var> {
        if tape.value(input).cols() != self.dim {
            return Err(Error::shape(
                "mapper",
                format!(
                    "input width {} != mapper dim {}",
                    tape.value(input).cols(),
                    self.dim
                ),
            ));
        }
        let mut x = input;
        let last = vars.layers.len() - 1;
        for (i, &(w, b)) in vars.layers.iter().enumerate() {
            let z = tape.matmul(x, w)?;
            let z = tape.add_bias(z, b)?;
            x = if i < last { tape.tanh(z) } else { z };
        }
        Ok(x)
    }

    /// Inference-only application to a `[dim]` vector or `[n x dim]` batch.
    pub fn apply(&self, input: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.register_with(&mut tape, false);
        let x = tape.constant(input.clone());
        let out = self.forward(&mut tape, &vars, x)?;
        let t = tape.value(out).clone();
        if input.shape().len() == 1 {
            t.reshape(vec![self.dim])
        } else {
            Ok(t)
        }
    }
}

/// `phi` and `phi_ts` together.
#[derive(Clone, Debug, PartialEq)]
pub struct MapperPair {
    pub phi: MapperParams,
    pub phi_ts: MapperParams,
}

impl MapperPair {
    /// Both mappers initialized from explicit seeds.
    pub fn init(dim: usize, hidden: usize, phi_seed: u64, phi_ts_seed: u64) -> Result<Self> {
        Ok(MapperPair {
            phi: MapperParams::init(MapperRole::Phi, dim, hidden, phi_seed)?,
            phi_ts: MapperParams::init(MapperRole::PhiTs, dim, hidden, phi_ts_seed)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.phi.dim()
    }

    pub fn all_finite(&self) -> bool {
        self.phi.all_finite() && self.phi_ts.all_finite()
    }
}

fn check_role(params: &MapperParams, role: MapperRole) -> Result<()> {
    if params.role != role {
        return Err(Error::Contract(format!(
            "expected a {} mapper, got {}",
            role.name(),
            params.role.name()
        )));
    }
    Ok(())
}

/// Pseudo-word token `phi(v)` for a unit image embedding.
pub fn map_pseudo_token(phi: &MapperParams, image_emb: &Tensor) -> Result<Tensor> {
    check_role(phi, MapperRole::Phi)?;
    phi.apply(image_emb)
}

/// Supplement token `phi_ts(w)` for a unit text embedding.
pub fn map_supplement_token(phi_ts: &MapperParams, text_emb: &Tensor) -> Result<Tensor> {
    check_role(phi_ts, MapperRole::PhiTs)?;
    phi_ts.apply(text_emb)
}
