//! Agent-side networks: model-free trunk, rollout policies, summarizer.

use imagine_autograd::{Binding, ParamStore, Var};
use rand::Rng;

use crate::blocks::{Conv, Linear};
use crate::error::{Error, Result};
use crate::models::expected_reward;

/// `(kernel, stride, channels)` of each convolution.
pub type ConvLayers = [(usize, usize, usize)];

pub const MODEL_FREE_LAYERS: [(usize, usize, usize); 4] = [(4, 2, 16), (8, 4, 32), (4, 2, 64), (3, 1, 64)];
/// Pixel rollout policy and pixel summarizer trunk.
pub const PIXEL_POLICY_LAYERS: [(usize, usize, usize); 4] = [(4, 2, 16), (8, 4, 32), (4, 2, 32), (3, 1, 32)];
pub const STATE_POLICY_LAYERS: [(usize, usize, usize); 2] = [(4, 1, 32), (4, 1, 32)];
pub const STATE_SUMMARY_LAYERS: [(usize, usize, usize); 2] = [(4, 1, 32), (4, 1, 16)];

/// ReLU convolutions (SAME padding) followed by a flatten.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvNet {
    pub convs: Vec<Conv>,
    /// Flattened output length.
    pub out_dim: usize,
    input: (usize, usize, usize),
}

impl ConvNet {
    pub fn new(name: &str, input: (usize, usize, usize), layers: &ConvLayers) -> Self {
        let (mut h, mut w, mut c) = input;
        let mut convs = Vec::with_capacity(layers.len());
        for (i, &(k, s, out)) in layers.iter().enumerate() {
            convs.push(Conv::strided(format!("{name}/conv{}", i + 1), k, c, out, s));
            h = h.div_ceil(s);
            w = w.div_ceil(s);
            c = out;
        }
        Self {
            convs,
            out_dim: h * w * c,
            input,
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        for c in &self.convs {
            c.init(store, rng);
        }
    }

    pub fn forward<'g>(&self, b: &Binding<'g>, x: Var<'g>) -> Result<Var<'g>> {
        let s = x.shape();
        if s.len() != 4 || (s[1], s[2], s[3]) != self.input {
            return Err(Error::Shape(format!(
                "conv net expects {:?} inputs, got {s:?}",
                self.input
            )));
        }
        let mut h = x;
        for c in &self.convs {
            h = c.forward(b, h).relu();
        }
        Ok(h.flatten())
    }
}

/// CNN over the current frame, then a 512-unit ReLU layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelFreePath {
    pub cnn: ConvNet,
    pub fc: Linear,
}

impl ModelFreePath {
    pub const WIDTH: usize = 512;

    pub fn new(name: &str, height: usize, width: usize) -> Self {
        let cnn = ConvNet::new(&format!("{name}/cnn"), (height, width, 3), &MODEL_FREE_LAYERS);
        let fc = Linear::new(format!("{name}/fc"), cnn.out_dim, Self::WIDTH);
        Self { cnn, fc }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        self.cnn.init(store, rng);
        self.fc.init(store, rng);
    }

    pub fn forward<'g>(&self, b: &Binding<'g>, o: Var<'g>) -> Result<Var<'g>> {
        Ok(self.fc.forward(b, self.cnn.forward(b, o)?).relu())
    }
}

/// Rollout policy: CNN over a state or a frame, a 128-unit layer and logits.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutPolicyNet {
    pub cnn: ConvNet,
    pub hidden: Linear,
    pub logits: Linear,
    pub on_pixels: bool,
}

impl RolloutPolicyNet {
    /// Over abstract states of shape `(h, w, c)`.
    pub fn on_state(name: &str, state: (usize, usize, usize), num_actions: usize) -> Self {
        Self::build(
            name,
            ConvNet::new(&format!("{name}/cnn"), state, &STATE_POLICY_LAYERS),
            num_actions,
            false,
        )
    }

    pub fn on_pixels(name: &str, height: usize, width: usize, num_actions: usize) -> Self {
        let cnn = ConvNet::new(&format!("{name}/cnn"), (height, width, 3), &PIXEL_POLICY_LAYERS);
        Self::build(name, cnn, num_actions, true)
    }

    fn build(name: &str, cnn: ConvNet, num_actions: usize, on_pixels: bool) -> Self {
        Self {
            hidden: Linear::new(format!("{name}/fc"), cnn.out_dim, 128),
            logits: Linear::new(format!("{name}/logits"), 128, num_actions),
            cnn,
            on_pixels,
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        self.cnn.init(store, rng);
        self.hidden.init(store, rng);
        self.logits.init(store, rng);
    }

    pub fn forward<'g>(&self, b: &Binding<'g>, x: Var<'g>) -> Result<Var<'g>> {
        let h = self.hidden.forward(b, self.cnn.forward(b, x)?).relu();
        Ok(self.logits.forward(b, h))
    }
}

/// LSTM cell with gates ordered input, forget, cell, output.
#[derive(Clone, Debug, PartialEq)]
pub struct Lstm {
    pub name: String,
    pub in_dim: usize,
    pub hidden: usize,
}

impl Lstm {
    pub fn new(name: impl Into<String>, in_dim: usize, hidden: usize) -> Self {
        Self {
            name: name.into(),
            in_dim,
            hidden,
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        let h = self.hidden;
        Linear::new(format!("{}/x", self.name), self.in_dim, 4 * h).init(store, rng);
        Linear::new(format!("{}/h", self.name), h, 4 * h).init(store, rng);
        // Start with the forget gate open.
        let b = store.get_mut(&format!("{}/x/b", self.name)).expect("just inserted");
        for v in &mut b.data_mut()[h..2 * h] {
            *v = 1.0;
        }
    }

    pub fn step<'g>(&self, b: &Binding<'g>, x: Var<'g>, h: Var<'g>, c: Var<'g>) -> (Var<'g>, Var<'g>) {
        let n = self.hidden;
        let gates = x.matmul(b.param(&format!("{}/x/w", self.name))) + h.matmul(b.param(&format!("{}/h/w", self.name)));
        let gates = gates
            .add_bias(b.param(&format!("{}/x/b", self.name)))
            .add_bias(b.param(&format!("{}/h/b", self.name)));
        let i = gates.narrow_last(0, n).sigmoid();
        let f = gates.narrow_last(n, n).sigmoid();
        let g = gates.narrow_last(2 * n, n).tanh();
        let o = gates.narrow_last(3 * n, n).sigmoid();
        let c2 = f * c + i * g;
        (o * c2.tanh(), c2)
    }
}

/// Encodes each imagined step and runs the LSTM over each chain from the
/// last step back to the first; the final hidden states of the `K` chains are
/// concatenated per batch row.
#[derive(Clone, Debug, PartialEq)]
pub struct Summarizer {
    pub cnn: ConvNet,
    pub fc: Linear,
    pub lstm: Lstm,
    pub reward_dim: usize,
}

impl Summarizer {
    pub const HIDDEN: usize = 256;

    /// Per-step input feature shape and the reward head width (`N + 2`).
    pub fn on_state(name: &str, state: (usize, usize, usize), reward_logits: usize) -> Self {
        Self::build(
            name,
            ConvNet::new(&format!("{name}/cnn"), state, &STATE_SUMMARY_LAYERS),
            reward_logits,
        )
    }

    pub fn on_pixels(name: &str, height: usize, width: usize, reward_logits: usize) -> Self {
        Self::build(
            name,
            ConvNet::new(&format!("{name}/cnn"), (height, width, 3), &PIXEL_POLICY_LAYERS),
            reward_logits,
        )
    }

    fn build(name: &str, cnn: ConvNet, reward_logits: usize) -> Self {
        // Expected reward plus the per-bit probabilities.
        let reward_dim = 1 + reward_logits;
        Self {
            fc: Linear::new(format!("{name}/fc"), cnn.out_dim + reward_dim, 128),
            lstm: Lstm::new(format!("{name}/lstm"), 128, Self::HIDDEN),
            cnn,
            reward_dim,
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        self.cnn.init(store, rng);
        self.fc.init(store, rng);
        self.lstm.init(store, rng);
    }

    fn encode_step<'g>(&self, b: &Binding<'g>, feature: Var<'g>, reward_logits: Var<'g>) -> Result<Var<'g>> {
        if reward_logits.shape()[1] + 1 != self.reward_dim {
            return Err(Error::Shape(format!(
                "summarizer expects {} reward logits, got {:?}",
                self.reward_dim - 1,
                reward_logits.shape()
            )));
        }
        let rows = reward_logits.shape()[0];
        let stats = Var::concat_last(&[
            expected_reward(reward_logits).reshape(&[rows, 1]),
            reward_logits.sigmoid(),
        ]);
        let x = Var::concat_last(&[self.cnn.forward(b, feature)?, stats]);
        Ok(self.fc.forward(b, x).relu())
    }

    /// `features[t]` and `reward_logits[t]` hold `batch * k` rows with the
    /// chains of each batch row adjacent. Returns `[batch, k * 256]`.
    pub fn forward<'g>(
        &self,
        b: &Binding<'g>,
        features: &[Var<'g>],
        reward_logits: &[Var<'g>],
        batch: usize,
        k: usize,
    ) -> Result<Var<'g>> {
        if features.is_empty() || features.len() != reward_logits.len() {
            return Err(Error::Shape(format!(
                "{} features and {} reward steps",
                features.len(),
                reward_logits.len()
            )));
        }
        let rows = batch * k;
        let g = b.graph();
        let zeros = || g.constant(imagine_autograd::Tensor::zeros(&[rows, Self::HIDDEN]));
        let (mut h, mut c) = (zeros(), zeros());
        for t in (0..features.len()).rev() {
            if features[t].shape()[0] != rows {
                return Err(Error::Shape(format!(
                    "imagined step {t} has {} rows, expected {rows}",
                    features[t].shape()[0]
                )));
            }
            let x = self.encode_step(b, features[t], reward_logits[t])?;
            (h, c) = self.lstm.step(b, x, h, c);
        }
        Ok(h.reshape(&[batch, k * Self::HIDDEN]))
    }
}
