//! Dense feed-forward networks with exact reverse-mode gradients.
//!
//! Hidden layers share one activation; the output layer is affine and
//! produces logits. A [`Mlp`] keeps the activations of its last
//! [`Mlp::forward`] call so that [`Mlp::backward`] can run without
//! recomputation.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::scalar::Scalar;

/// Header line of the checkpoint format.
pub const CHECKPOINT_HEADER: &str = "SKDLAB-MODEL-v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply<F: Scalar>(self, x: F) -> F {
        match self {
            Activation::Relu => x.max(F::zero()),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the activation's output.
    fn derivative_from_output<F: Scalar>(self, y: F) -> F {
        match self {
            Activation::Relu => {
                if y > F::zero() {
                    F::one()
                } else {
                    F::zero()
                }
            }
            Activation::Tanh => F::one() - y * y,
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        })
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }
}

/// Weight matrix (`out × in`) and bias vector of one affine layer.
///
/// The same shape is reused for gradients and optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<F> {
    pub weight: Array2<F>,
    pub bias: Array1<F>,
}

impl<F: Scalar> Dense<F> {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Array2::zeros((fan_out, fan_in)),
            bias: Array1::zeros(fan_out),
        }
    }

    fn zeros_like(other: &Self) -> Self {
        Self {
            weight: Array2::zeros(other.weight.raw_dim()),
            bias: Array1::zeros(other.bias.raw_dim()),
        }
    }

    fn same_shape(&self, other: &Self) -> bool {
        self.weight.dim() == other.weight.dim() && self.bias.len() == other.bias.len()
    }
}

/// Per-parameter gradients, shape-congruent with the model that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientTape<F> {
    pub layers: Vec<Dense<F>>,
}

impl<F: Scalar> GradientTape<F> {
    pub fn zeros_like(model: &Mlp<F>) -> Self {
        Self {
            layers: model.layers.iter().map(Dense::zeros_like).collect(),
        }
    }

    pub fn reset(&mut self) {
        for l in &mut self.layers {
            l.weight.fill(F::zero());
            l.bias.fill(F::zero());
        }
    }

    pub fn is_congruent(&self, model: &Mlp<F>) -> bool {
        self.layers.len() == model.layers.len() && self.layers.iter().zip(&model.layers).all(|(g, w)| g.same_shape(w))
    }

    /// Flattened view in layer order, weights (row-major) before biases.
    pub fn flatten(&self) -> Vec<F> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend(l.weight.iter().copied());
            out.extend(l.bias.iter().copied());
        }
        out
    }
}

#[derive(Debug, Clone)]
struct ForwardCache<F> {
    /// Input to each layer; entry 0 is the batch itself.
    inputs: Vec<Array2<F>>,
}

/// Multi-layer perceptron producing logits.
#[derive(Debug, Clone)]
pub struct Mlp<F> {
    dims: Vec<usize>,
    activation: Activation,
    layers: Vec<Dense<F>>,
    cache: Option<ForwardCache<F>>,
}

impl<F: Scalar> PartialEq for Mlp<F> {
    fn eq(&self, other: &Self) -> bool {
        self.dims == other.dims && self.activation == other.activation && self.layers == other.layers
    }
}

fn validate_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 {
        return Err(Error::Config(format!(
            "a model needs at least an input and an output dimension, got {dims:?}"
        )));
    }
    if dims.contains(&0) {
        return Err(Error::Config(format!(
            "layer dimensions must be positive, got {dims:?}"
        )));
    }
    Ok(())
}

impl<F: Scalar> Mlp<F> {
    /// Glorot-uniform weights in `(-s, s)`, `s = sqrt(6 / (fan_in + fan_out))`, zero biases.
    pub fn init(dims: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        validate_dims(dims)?;
        let mut rng = SeededRng::new(seed);
        let layers = dims
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let weight =
                    Array2::from_shape_simple_fn((fan_out, fan_in), || F::of((2.0 * rng.uniform_open() - 1.0) * bound));
                Dense {
                    weight,
                    bias: Array1::zeros(fan_out),
                }
            })
            .collect();
        Ok(Self {
            dims: dims.to_vec(),
            activation,
            layers,
            cache: None,
        })
    }

    /// Builds a model from explicit layers; shapes must chain.
    pub fn from_layers(activation: Activation, layers: Vec<Dense<F>>) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| Error::Config("a model needs at least one layer".into()))?;
        let mut dims = vec![first.weight.ncols()];
        for (l, layer) in layers.iter().enumerate() {
            let (out, inp) = layer.weight.dim();
            if inp != *dims.last().unwrap() || layer.bias.len() != out {
                return Err(Error::Shape(format!(
                    "layer {l}: weight {out}x{inp}, bias {}, expected input {}",
                    layer.bias.len(),
                    dims.last().unwrap()
                )));
            }
            dims.push(out);
        }
        validate_dims(&dims)?;
        Ok(Self {
            dims,
            activation,
            layers,
            cache: None,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn layers(&self) -> &[Dense<F>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense<F>] {
        &mut self.layers
    }

    pub fn num_parameters(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    fn check_batch(&self, batch: &ArrayView2<F>) -> Result<()> {
        if batch.ncols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "batch has {} columns, model expects {}",
                batch.ncols(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    fn affine(layer: &Dense<F>, input: &ArrayView2<F>) -> Array2<F> {
        let mut z = input.dot(&layer.weight.t());
        z += &layer.bias;
        z
    }

    fn run(&self, batch: ArrayView2<F>, mut keep: Option<&mut Vec<Array2<F>>>) -> Array2<F> {
        let last = self.layers.len() - 1;
        let mut current = batch.to_owned();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = Self::affine(layer, &current.view());
            if l < last {
                z.mapv_inplace(|x| self.activation.apply(x));
            }
            let input = std::mem::replace(&mut current, z);
            if let Some(k) = keep.as_deref_mut() {
                k.push(input);
            }
        }
        current
    }

    /// Logits for a `B × input_dim` batch; caches activations for [`Mlp::backward`].
    pub fn forward(&mut self, batch: ArrayView2<F>) -> Result<Array2<F>> {
        self.check_batch(&batch)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let out = self.run(batch, Some(&mut inputs));
        self.cache = Some(ForwardCache { inputs });
        Ok(out)
    }

    /// Logits without touching the activation cache.
    pub fn infer(&self, batch: ArrayView2<F>) -> Result<Array2<F>> {
        self.check_batch(&batch)?;
        Ok(self.run(batch, None))
    }

    /// Batch-averaged parameter gradients given `∂loss/∂logits` for each row of
    /// the batch passed to the preceding [`Mlp::forward`].
    pub fn backward(&self, upstream: ArrayView2<F>) -> Result<GradientTape<F>> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::State("backward called before forward".into()))?;
        let batch = cache.inputs[0].nrows();
        if upstream.dim() != (batch, self.num_classes()) {
            return Err(Error::Shape(format!(
                "upstream is {:?}, expected ({batch}, {})",
                upstream.dim(),
                self.num_classes()
            )));
        }
        let scale = F::one() / F::of(batch.max(1) as f64);
        let mut delta = upstream.mapv(|g| g * scale);
        let mut grads: Vec<Dense<F>> = Vec::with_capacity(self.layers.len());
        for l in (0..self.layers.len()).rev() {
            let input = &cache.inputs[l];
            grads.push(Dense {
                weight: delta.t().dot(input),
                bias: delta.sum_axis(Axis(0)),
            });
            if l > 0 {
                let mut back = delta.dot(&self.layers[l].weight);
                let act = self.activation;
                Zip::from(&mut back)
                    .and(input)
                    .for_each(|d, &y| *d *= act.derivative_from_output(y));
                delta = back;
            }
        }
        grads.reverse();
        Ok(GradientTape { layers: grads })
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }

    /// Serializes to the `SKDLAB-MODEL-v1` text format. Values are written as
    /// shortest round-trip `f64` decimals, row-major.
    pub fn to_checkpoint_string(&self) -> String {
        use std::fmt::Write;
        let mut s = String::new();
        writeln!(s, "{CHECKPOINT_HEADER}").unwrap();
        let dims: Vec<String> = self.dims.iter().map(usize::to_string).collect();
        writeln!(s, "dims {}", dims.join(" ")).unwrap();
        writeln!(s, "activation {}", self.activation).unwrap();
        for (l, layer) in self.layers.iter().enumerate() {
            let (rows, cols) = layer.weight.dim();
            writeln!(s, "weight {l} {rows} {cols}").unwrap();
            for row in layer.weight.rows() {
                let vals: Vec<String> = row.iter().map(|v| format!("{:?}", v.as_f64())).collect();
                writeln!(s, "{}", vals.join(" ")).unwrap();
            }
            writeln!(s, "bias {l} {}", layer.bias.len()).unwrap();
            let vals: Vec<String> = layer.bias.iter().map(|v| format!("{:?}", v.as_f64())).collect();
            writeln!(s, "{}", vals.join(" ")).unwrap();
        }
        s
    }

    pub fn from_checkpoint_str(text: &str) -> Result<Self> {
        CheckpointParser::new(text).parse()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::io::write_atomic(path.as_ref(), self.to_checkpoint_string().as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_str(&text)
    }
}

struct CheckpointParser<'a> {
    lines: std::iter::Enumerate<std::str::Lines<'a>>,
    line_no: usize,
}

impl<'a> CheckpointParser<'a> {
    fn new(text: &'a str) -> Self {
        Self {
            lines: text.lines().enumerate(),
            line_no: 0,
        }
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            line: self.line_no,
            msg: msg.into(),
        }
    }

    fn next_line(&mut self) -> Result<&'a str> {
        match self.lines.next() {
            Some((i, l)) => {
                self.line_no = i + 1;
                Ok(l)
            }
            None => {
                self.line_no += 1;
                Err(self.err("unexpected end of checkpoint"))
            }
        }
    }

    fn keyed(&mut self, key: &str) -> Result<Vec<&'a str>> {
        let line = self.next_line()?;
        let mut parts = line.split_whitespace();
        if parts.next() != Some(key) {
            return Err(self.err(format!("expected `{key}` record")));
        }
        Ok(parts.collect())
    }

    fn ints(&self, parts: &[&str]) -> Result<Vec<usize>> {
        parts
            .iter()
            .map(|p| p.parse::<usize>().map_err(|_| self.err(format!("bad integer `{p}`"))))
            .collect()
    }

    fn values<F: Scalar>(&mut self, expect: usize) -> Result<Vec<F>> {
        let line = self.next_line()?;
        let vals = line
            .split_whitespace()
            .map(|p| {
                p.parse::<f64>()
                    .map(F::of)
                    .map_err(|_| self.err(format!("bad number `{p}`")))
            })
            .collect::<Result<Vec<F>>>()?;
        if vals.len() != expect {
            return Err(self.err(format!("expected {expect} values, found {}", vals.len())));
        }
        Ok(vals)
    }

    fn parse<F: Scalar>(mut self) -> Result<Mlp<F>> {
        if self.next_line()?.trim() != CHECKPOINT_HEADER {
            return Err(self.err(format!("missing `{CHECKPOINT_HEADER}` header")));
        }
        let dims_parts = self.keyed("dims")?;
        let dims = self.ints(&dims_parts)?;
        validate_dims(&dims).map_err(|e| self.err(e.to_string()))?;
        let act = self.keyed("activation")?;
        let activation: Activation = act
            .first()
            .ok_or_else(|| self.err("missing activation tag"))?
            .parse()
            .map_err(|e: Error| self.err(e.to_string()))?;
        let mut layers = Vec::new();
        for l in 0..dims.len() - 1 {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            let head = self.keyed("weight")?;
            if self.ints(&head)? != [l, fan_out, fan_in] {
                return Err(self.err(format!("expected `weight {l} {fan_out} {fan_in}`")));
            }
            let mut weight = Vec::with_capacity(fan_out * fan_in);
            for _ in 0..fan_out {
                weight.extend(self.values::<F>(fan_in)?);
            }
            let head = self.keyed("bias")?;
            if self.ints(&head)? != [l, fan_out] {
                return Err(self.err(format!("expected `bias {l} {fan_out}`")));
            }
            let bias = self.values::<F>(fan_out)?;
            layers.push(Dense {
                weight: Array2::from_shape_vec((fan_out, fan_in), weight).expect("row count checked"),
                bias: Array1::from_vec(bias),
            });
        }
        Mlp::from_layers(activation, layers)
    }
}
