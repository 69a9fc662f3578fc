//! Desk-scale environments, trajectory collection and jumpy preprocessing.

mod bouncing_ball;
mod collect;
mod dataset;
mod jumpy;
mod minipacman;

pub use bouncing_ball::{bouncing_ball_step, BallState, BouncingBall, BouncingBallConfig};
pub use collect::{collect_trajectories, BatchedEnvs, CollectOptions, CollectResult, DataPolicy};
pub use dataset::{Dataset, DatasetManifest};
pub use jumpy::jumpy_preprocess;
pub use minipacman::{Action, MiniPacman, MiniPacmanConfig, PacmanState};

use imagine_autograd::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Resampling factor between observations and model states.
pub const SPATIAL_FACTOR: usize = 8;

/// An RGB frame stored as bytes; pixel value `b` stands for `b / 255`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Observation {
    height: usize,
    width: usize,
    pixels: Vec<u8>,
}

impl Observation {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if !height.is_multiple_of(SPATIAL_FACTOR) || !width.is_multiple_of(SPATIAL_FACTOR) || height == 0 || width == 0
        {
            return Err(Error::Shape(format!(
                "frame {height}x{width} not a positive multiple of {SPATIAL_FACTOR}"
            )));
        }
        if pixels.len() != height * width * 3 {
            return Err(Error::Shape(format!(
                "{} bytes for a {height}x{width}x3 frame",
                pixels.len()
            )));
        }
        Ok(Self { height, width, pixels })
    }

    pub fn blank(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, vec![0; height * width * 3])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bytes(&self) -> &[u8] {
        &self.pixels
    }

    pub(crate) fn bytes_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    /// Pixel values in `[0, 1]`, `[H, W, 3]`.
    pub fn to_unit(&self) -> Vec<f64> {
        self.pixels.iter().map(|&b| b as f64 / 255.0).collect()
    }

    /// Quantize a `[H, W, 3]` tensor of values in `[0, 1]`.
    pub fn from_unit(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 || s[2] != 3 {
            return Err(Error::Shape(format!("expected [H, W, 3], got {s:?}")));
        }
        let px = t
            .data()
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        Self::new(s[0], s[1], px)
    }

    /// Stack frames into a `[N, H, W, 3]` tensor.
    pub fn batch(frames: &[&Observation]) -> Result<Tensor> {
        let first = frames
            .first()
            .ok_or_else(|| Error::InvalidInput("empty observation batch".into()))?;
        let (h, w) = (first.height, first.width);
        let mut data = Vec::with_capacity(frames.len() * h * w * 3);
        for f in frames {
            if (f.height, f.width) != (h, w) {
                return Err(Error::Shape("mixed frame sizes in batch".into()));
            }
            data.extend(f.pixels.iter().map(|&b| b as f64 / 255.0));
        }
        Ok(Tensor::from_vec(&[frames.len(), h, w, 3], data))
    }

    pub(crate) fn fill_rect(&mut self, y0: usize, x0: usize, h: usize, w: usize, rgb: [u8; 3]) {
        for y in y0..(y0 + h).min(self.height) {
            for x in x0..(x0 + w).min(self.width) {
                let i = (y * self.width + x) * 3;
                self.pixels[i..i + 3].copy_from_slice(&rgb);
            }
        }
    }
}

/// One-hot action, or for jumpy data the concatenation of `c` one-hot blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionRecord {
    values: Vec<f64>,
    num_actions: usize,
}

impl ActionRecord {
    pub fn one_hot(action: usize, num_actions: usize) -> Result<Self> {
        if action >= num_actions {
            return Err(Error::InvalidInput(format!(
                "action {action} out of range for {num_actions} actions"
            )));
        }
        let mut values = vec![0.0; num_actions];
        values[action] = 1.0;
        Ok(Self { values, num_actions })
    }

    /// Concatenate records of equal arity.
    pub fn concat(parts: &[ActionRecord]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidInput("concat of no actions".into()))?;
        if parts.iter().any(|p| p.num_actions != first.num_actions) {
            return Err(Error::InvalidInput("mixed action arity".into()));
        }
        Ok(Self {
            values: parts.iter().flat_map(|p| p.values.iter().copied()).collect(),
            num_actions: first.num_actions,
        })
    }

    /// A record from raw values, e.g. a relaxed probability vector.
    pub fn from_values(values: Vec<f64>, num_actions: usize) -> Result<Self> {
        if num_actions == 0 || !values.len().is_multiple_of(num_actions) {
            return Err(Error::Shape(format!(
                "{} values is not a multiple of {num_actions} actions",
                values.len()
            )));
        }
        Ok(Self { values, num_actions })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    /// Number of concatenated blocks (the jumpy factor).
    pub fn blocks(&self) -> usize {
        self.values.len() / self.num_actions
    }

    /// Index of the hot entry of each block; `None` unless every block is one-hot.
    pub fn indices(&self) -> Option<Vec<usize>> {
        self.values
            .chunks(self.num_actions)
            .map(|b| {
                let ones: Vec<usize> = b
                    .iter()
                    .enumerate()
                    .filter(|(_, &v)| v == 1.0)
                    .map(|(i, _)| i)
                    .collect();
                let zeros = b.iter().filter(|&&v| v == 0.0).count();
                (ones.len() == 1 && zeros == b.len() - 1).then(|| ones[0])
            })
            .collect()
    }

    pub fn is_valid_one_hot(&self) -> bool {
        self.indices().is_some()
    }
}

/// `context` holds `o_{-2}, o_{-1}, o_0`; `actions[t]` leads from frame `t`
/// to `observations[t]` which carries reward `rewards[t]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub context: Vec<Observation>,
    pub observations: Vec<Observation>,
    pub actions: Vec<ActionRecord>,
    pub rewards: Vec<f64>,
}

impl Trajectory {
    pub fn new(
        context: Vec<Observation>,
        observations: Vec<Observation>,
        actions: Vec<ActionRecord>,
        rewards: Vec<f64>,
    ) -> Result<Self> {
        let t = Self {
            context,
            observations,
            actions,
            rewards,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.context.len() != 3 {
            return Err(Error::InvalidInput(format!(
                "context must hold 3 frames, got {}",
                self.context.len()
            )));
        }
        let t = self.observations.len();
        if self.actions.len() != t || self.rewards.len() != t {
            return Err(Error::InvalidInput(format!(
                "trajectory lengths differ: {} observations, {} actions, {} rewards",
                t,
                self.actions.len(),
                self.rewards.len()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    BouncingBall,
    MiniPacman,
}

impl std::str::FromStr for EnvKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bouncing_ball" | "bouncing-ball" => Ok(Self::BouncingBall),
            "mini_pacman" | "mini-pacman" | "minipacman" => Ok(Self::MiniPacman),
            other => Err(Error::Config(format!("unknown environment {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub kind: EnvKind,
    pub height: usize,
    pub width: usize,
    pub action_repeat: usize,
    pub seed: u64,
    #[serde(default)]
    pub bouncing_ball: BouncingBallConfig,
    #[serde(default)]
    pub mini_pacman: MiniPacmanConfig,
}

impl EnvConfig {
    pub fn new(kind: EnvKind, seed: u64) -> Self {
        let action_repeat = match kind {
            EnvKind::BouncingBall => 1,
            EnvKind::MiniPacman => 4,
        };
        Self {
            kind,
            height: 80,
            width: 80,
            action_repeat,
            seed,
            bouncing_ball: BouncingBallConfig::default(),
            mini_pacman: MiniPacmanConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.action_repeat == 0 {
            return Err(Error::Config("action_repeat must be at least 1".into()));
        }
        if !self.height.is_multiple_of(SPATIAL_FACTOR) || !self.width.is_multiple_of(SPATIAL_FACTOR) {
            return Err(Error::Config(format!(
                "frame {}x{} must be divisible by {SPATIAL_FACTOR}",
                self.height, self.width
            )));
        }
        Ok(())
    }

    pub fn num_actions(&self) -> usize {
        match self.kind {
            EnvKind::BouncingBall => self.bouncing_ball.num_actions,
            EnvKind::MiniPacman => Action::COUNT,
        }
    }

    /// Build an instance whose randomness derives from `seed`.
    pub fn build(&self, seed: u64) -> Result<Env> {
        self.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(match self.kind {
            EnvKind::BouncingBall => Env::BouncingBall(BouncingBall::new(
                self.bouncing_ball.clone(),
                self.height,
                self.width,
                rng,
            )?),
            EnvKind::MiniPacman => {
                Env::MiniPacman(MiniPacman::new(self.mini_pacman.clone(), self.height, self.width, rng)?)
            }
        })
    }
}

#[derive(Clone, Debug)]
pub struct StepResult {
    pub observation: Observation,
    pub reward: f64,
    pub done: bool,
}

/// A raw (single-frame) environment instance.
#[derive(Clone, Debug)]
pub enum Env {
    BouncingBall(BouncingBall),
    MiniPacman(MiniPacman),
}

impl Env {
    pub fn num_actions(&self) -> usize {
        match self {
            Env::BouncingBall(e) => e.num_actions(),
            Env::MiniPacman(_) => Action::COUNT,
        }
    }

    pub fn reset(&mut self) -> Observation {
        match self {
            Env::BouncingBall(e) => e.reset(),
            Env::MiniPacman(e) => e.reset(),
        }
    }

    pub fn step(&mut self, action: usize) -> Result<StepResult> {
        match self {
            Env::BouncingBall(e) => e.step(action),
            Env::MiniPacman(e) => e.step(action),
        }
    }

    /// Raw environment steps taken since construction.
    pub fn raw_steps(&self) -> u64 {
        match self {
            Env::BouncingBall(e) => e.raw_steps(),
            Env::MiniPacman(e) => e.raw_steps(),
        }
    }

    pub fn render(&self) -> Observation {
        match self {
            Env::BouncingBall(e) => e.render(),
            Env::MiniPacman(e) => e.render(),
        }
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        match self {
            Env::BouncingBall(e) => e.rng(),
            Env::MiniPacman(e) => e.rng(),
        }
    }

    /// Execute `action` for `repeat` raw steps; rewards are summed and the
    /// last frame is returned. Stops early when the episode ends.
    pub fn step_repeated(&mut self, action: usize, repeat: usize) -> Result<StepResult> {
        let mut total = 0.0;
        let mut last = None;
        for _ in 0..repeat.max(1) {
            let r = self.step(action)?;
            total += r.reward;
            let done = r.done;
            last = Some(r);
            if done {
                break;
            }
        }
        let mut r = last.expect("at least one raw step");
        r.reward = total;
        Ok(r)
    }
}
