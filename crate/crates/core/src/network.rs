//! U-Net construction and forward passes.
//!
//! Layer layout for depth `D` and base width `c` (every conv is 3×3 "same"
//! + ReLU unless noted):
//!
//! | prefix            | convolutions                                    |
//! |-------------------|-------------------------------------------------|
//! | `enc{l}`          | `conv1`: `c_{l-1} → c_l`, `conv2`: `c_l → c_l`, then 2×2 max-pool |
//! | `bottleneck`      | `conv1`: `c_{D-1} → c_D`, `conv2`: `c_D → c_D`  |
//! | `dec{l}` (l = D−1…0) | nearest 2× upsample, `up`: `c_{l+1} → c_l`, concat skip `enc{l}`, `conv1`: `2c_l → c_l`, `conv2`: `c_l → c_l`, dropout |
//! | `head`            | 1×1 conv `c_0 → 1` + sigmoid, or `c_0 → 3` + channel softmax |
//!
//! with `c_l = c · 2^l` and `c_{-1} = 1` (grey-scale input). Each conv owns a
//! `.weight` (`[out, in, k, k]`) and a `.bias` (`[out]`).

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Gradients, Padding, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Head {
    /// One output channel through a sigmoid.
    BinarySigmoid,
    /// Three output channels (tumor, liver, other) through a channel softmax.
    Softmax3,
}

impl Head {
    pub fn out_channels(self) -> usize {
        match self {
            Head::BinarySigmoid => 1,
            Head::Softmax3 => 3,
        }
    }
}

impl fmt::Display for Head {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Head::BinarySigmoid => "binary_sigmoid",
            Head::Softmax3 => "softmax3",
        })
    }
}

impl FromStr for Head {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "binary_sigmoid" => Ok(Head::BinarySigmoid),
            "softmax3" => Ok(Head::Softmax3),
            other => Err(Error::InvalidConfig(format!("unknown head `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UNetConfig {
    pub input_size: usize,
    pub depth: usize,
    pub base_channels: usize,
    pub dropout_rate: f64,
    pub head: Head,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            input_size: 64,
            depth: 3,
            base_channels: 8,
            dropout_rate: 0.4,
            head: Head::BinarySigmoid,
        }
    }
}

impl UNetConfig {
    pub fn with_head(mut self, head: Head) -> Self {
        self.head = head;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::InvalidConfig("depth must be >= 1".into()));
        }
        if self.base_channels == 0 {
            return Err(Error::InvalidConfig("base_channels must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidConfig(format!(
                "dropout_rate must be in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        let factor = 1usize
            .checked_shl(self.depth as u32)
            .filter(|&f| f > 0)
            .ok_or_else(|| Error::InvalidConfig(format!("depth {} too large", self.depth)))?;
        if self.input_size == 0 || !self.input_size.is_multiple_of(factor) {
            return Err(Error::InvalidConfig(format!(
                "input_size {} must be a positive multiple of 2^depth = {factor}",
                self.input_size
            )));
        }
        Ok(())
    }

    fn width(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// `(name, shape)` of every parameter tensor in forward order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut conv = |name: String, cin: usize, cout: usize, k: usize| {
            out.push((format!("{name}.weight"), vec![cout, cin, k, k]));
            out.push((format!("{name}.bias"), vec![cout]));
        };
        for l in 0..self.depth {
            let cin = if l == 0 { 1 } else { self.width(l - 1) };
            conv(format!("enc{l}.conv1"), cin, self.width(l), 3);
            conv(format!("enc{l}.conv2"), self.width(l), self.width(l), 3);
        }
        let bottom = self.width(self.depth);
        conv(
            "bottleneck.conv1".into(),
            self.width(self.depth - 1),
            bottom,
            3,
        );
        conv("bottleneck.conv2".into(), bottom, bottom, 3);
        for l in (0..self.depth).rev() {
            conv(format!("dec{l}.up"), self.width(l + 1), self.width(l), 3);
            conv(format!("dec{l}.conv1"), 2 * self.width(l), self.width(l), 3);
            conv(format!("dec{l}.conv2"), self.width(l), self.width(l), 3);
        }
        conv("head".into(), self.width(0), self.head.out_channels(), 1);
        out
    }

    /// Compact `key=value` rendering stored inside checkpoints.
    pub fn digest(&self) -> String {
        format!(
            "unet;input_size={};depth={};base_channels={};dropout_rate={};head={}",
            self.input_size, self.depth, self.base_channels, self.dropout_rate, self.head
        )
    }

    pub fn from_digest(s: &str) -> Result<Self> {
        let mut parts = s.split(';');
        if parts.next() != Some("unet") {
            return Err(Error::InvalidConfig(format!("not a U-Net digest: `{s}`")));
        }
        let mut cfg = UNetConfig::default();
        let mut seen = 0;
        for part in parts {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("bad digest field `{part}`")))?;
            let bad = |_| Error::InvalidConfig(format!("bad value for {k}: `{v}`"));
            match k {
                "input_size" => cfg.input_size = v.parse().map_err(bad)?,
                "depth" => cfg.depth = v.parse().map_err(bad)?,
                "base_channels" => cfg.base_channels = v.parse().map_err(bad)?,
                "dropout_rate" => {
                    cfg.dropout_rate = v
                        .parse()
                        .map_err(|_| Error::InvalidConfig(format!("bad dropout_rate `{v}`")))?
                }
                "head" => cfg.head = v.parse()?,
                _ => return Err(Error::InvalidConfig(format!("unknown digest key `{k}`"))),
            }
            seen += 1;
        }
        if seen != 5 {
            return Err(Error::InvalidConfig(format!("incomplete digest `{s}`")));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams<T = f32> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Real> Default for NetworkParams<T> {
    fn default() -> Self {
        NetworkParams {
            entries: Vec::new(),
        }
    }
}

impl<T: Real> NetworkParams<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a tensor; duplicate names are rejected.
    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.get(&name).is_some() {
            return Err(Error::invalid(format!("duplicate parameter name `{name}`")));
        }
        self.entries.push((name, tensor));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for t in self.tensors_mut() {
            t.zero_grad();
        }
    }

    pub fn cast<U: Real>(&self) -> NetworkParams<U> {
        NetworkParams {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), t.cast()))
                .collect(),
        }
    }
}

/// Parameter vars recorded on a tape by [`Network::record`].
pub struct Recorded {
    pub output: Var,
    pub params: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Network<T = f32> {
    config: UNetConfig,
    params: NetworkParams<T>,
}

/// Builds a U-Net with uniform `[−b, b]`, `b = sqrt(6 / fan_in)` weights and
/// zero biases.
pub fn build_unet<T: Real>(config: UNetConfig, rng: &mut SeededRng) -> Result<Network<T>> {
    config.validate()?;
    let mut params = NetworkParams::new();
    for (name, shape) in config.layout() {
        let tensor = if name.ends_with(".weight") {
            let fan_in: usize = shape[1..].iter().product();
            let bound = (6.0 / fan_in as f64).sqrt();
            Tensor::from_fn(shape, |_| T::from_f64(rng.uniform_in(-bound, bound)))?
        } else {
            Tensor::zeros(shape)?
        };
        params.push(name, tensor.with_requires_grad(true))?;
    }
    Ok(Network { config, params })
}

impl<T: Real> Network<T> {
    /// Wraps existing parameters, checking names and shapes against `config`.
    pub fn from_params(config: UNetConfig, params: NetworkParams<T>) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        if layout.len() != params.len() {
            return Err(Error::invalid(format!(
                "expected {} parameter tensors for {}, got {}",
                layout.len(),
                config.digest(),
                params.len()
            )));
        }
        for ((name, shape), (pname, t)) in layout.iter().zip(params.iter()) {
            if name != pname || shape.as_slice() != t.shape() {
                return Err(Error::ShapeMismatch {
                    context: "parameter layout",
                    left: shape.clone(),
                    right: t.shape().to_vec(),
                });
            }
        }
        let mut params = params;
        for t in params.tensors_mut() {
            t.set_requires_grad(true);
        }
        Ok(Network { config, params })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn params(&self) -> &NetworkParams<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut NetworkParams<T> {
        &mut self.params
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let s = self.config.input_size;
        if shape.len() != 4 || shape[1] != 1 || shape[2] != s || shape[3] != s {
            return Err(Error::ShapeMismatch {
                context: "network input must be [N, 1, size, size]",
                left: shape.to_vec(),
                right: vec![0, 1, s, s],
            });
        }
        Ok(())
    }

    /// Records the forward pass of `input` (`[N, 1, S, S]`) on `tape`.
    pub fn record(
        &self,
        tape: &mut Tape<T>,
        input: Var,
        training: bool,
        rng: &mut SeededRng,
    ) -> Result<Recorded> {
        self.check_input(tape.shape(input))?;
        let params: Vec<Var> = self.params.iter().map(|(_, t)| tape.leaf(t)).collect();
        let mut next = params.iter().copied();
        let mut conv = |tape: &mut Tape<T>, x: Var, relu: bool| -> Result<Var> {
            let (w, b) = (next.next().unwrap(), next.next().unwrap());
            let y = tape.conv2d(x, w, b, Padding::Same)?;
            Ok(if relu { tape.relu(y) } else { y })
        };

        let mut x = input;
        let mut skips = Vec::with_capacity(self.config.depth);
        for _ in 0..self.config.depth {
            x = conv(tape, x, true)?;
            x = conv(tape, x, true)?;
            skips.push(x);
            x = tape.max_pool_2x2(x)?;
        }
        x = conv(tape, x, true)?;
        x = conv(tape, x, true)?;
        for skip in skips.into_iter().rev() {
            x = tape.upsample_nearest_2x(x)?;
            x = conv(tape, x, true)?;
            x = tape.concat_channels(skip, x)?;
            x = conv(tape, x, true)?;
            x = conv(tape, x, true)?;
            x = tape.dropout(x, self.config.dropout_rate, training, rng)?;
        }
        let logits = conv(tape, x, false)?;
        let output = match self.config.head {
            Head::BinarySigmoid => tape.sigmoid(logits),
            Head::Softmax3 => tape.softmax_channels(logits)?,
        };
        Ok(Recorded { output, params })
    }

    /// Probabilities for a `[N, 1, S, S]` batch: `[N, 1, S, S]` for the binary
    /// head, `[N, 3, S, S]` for the softmax head.
    pub fn forward(
        &self,
        batch: &Tensor<T>,
        training: bool,
        rng: &mut SeededRng,
    ) -> Result<Tensor<T>> {
        self.check_input(batch.shape())?;
        let mut tape = Tape::new();
        let x = tape.leaf(batch);
        let rec = self.record(&mut tape, x, training, rng)?;
        tape.to_tensor(rec.output)
    }

    /// Evaluation-mode forward pass (dropout disabled, no randomness used).
    pub fn predict(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        self.forward(batch, false, &mut SeededRng::new(0, 0))
    }

    /// Adds the gradients recorded for `rec.params` into the parameter tensors.
    pub fn accumulate_grads(&mut self, grads: &Gradients<T>, rec: &Recorded) -> Result<()> {
        for (var, t) in rec.params.iter().zip(self.params.tensors_mut()) {
            grads.accumulate_into(*var, t)?;
        }
        Ok(())
    }
}
