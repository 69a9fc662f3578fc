//! Environment model families, their likelihoods and training.

mod scoring;
mod sequence;
mod step;
mod train;

pub use scoring::{
    expected_reward, gaussian_kl, gaussian_log_density, pixel_log_prob, reward_decode, reward_encode, reward_log_prob,
    sampled_log_ratio,
};
pub use sequence::{
    evaluate, mle_loss, sequence_elbo, sequence_log_weights, EvalReport, SequenceScore, TrajectoryBatch,
};
pub use step::{ModelState, StepMode, StepOutput};
pub use train::{train, TrainConfig, TrainLog, TrainRow};

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use imagine_autograd::ParamStore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{ConvStack, ConvStackSpec, Decoder, Encoder, InitialState, LatentHead, Transition, Widths};
use crate::envs::SPATIAL_FACTOR;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Ar,
    Rar,
    DssmDet,
    DssmVae,
    Sssm,
    SssmUncond,
    BaselineVae,
}

impl Family {
    pub const ALL: [Family; 7] = [
        Family::Ar,
        Family::Rar,
        Family::DssmDet,
        Family::DssmVae,
        Family::Sssm,
        Family::SssmUncond,
        Family::BaselineVae,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Ar => "ar",
            Family::Rar => "rar",
            Family::DssmDet => "dssm_det",
            Family::DssmVae => "dssm_vae",
            Family::Sssm => "sssm",
            Family::SssmUncond => "sssm_uncond",
            Family::BaselineVae => "baseline_vae",
        }
    }

    /// Families trained by maximum likelihood (no latent posterior).
    pub fn is_deterministic(self) -> bool {
        matches!(self, Family::Ar | Family::Rar | Family::DssmDet)
    }

    pub fn has_posterior(self) -> bool {
        !self.is_deterministic()
    }

    /// Families with an abstract state that can be rolled out without pixels.
    pub fn has_state(self) -> bool {
        matches!(
            self,
            Family::DssmDet | Family::DssmVae | Family::Sssm | Family::SssmUncond
        )
    }

    /// Families whose generative steps must render the previous frame.
    pub fn renders_observations(self) -> bool {
        matches!(self, Family::Ar | Family::Rar)
    }

    pub fn conditions_on_actions(self) -> bool {
        !matches!(self, Family::SssmUncond | Family::BaselineVae)
    }
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace('-', "_");
        Family::ALL
            .into_iter()
            .find(|f| f.name() == norm)
            .ok_or_else(|| Error::Config(format!("unknown model family {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub family: Family,
    /// Environment steps per model step.
    pub jumpy: usize,
    /// Frames kept by the auto-regressive family.
    pub ar_order: usize,
    pub num_actions: usize,
    pub height: usize,
    pub width: usize,
    pub reward_bits: usize,
    pub channel_scale: f64,
}

impl ModelConfig {
    pub fn new(family: Family, num_actions: usize, height: usize, width: usize) -> Self {
        Self {
            family,
            jumpy: 1,
            ar_order: 3,
            num_actions,
            height,
            width,
            reward_bits: 8,
            channel_scale: 1.0,
        }
    }

    pub fn with_scale(mut self, scale: f64) -> Self {
        self.channel_scale = scale;
        self
    }

    pub fn with_jumpy(mut self, c: usize) -> Self {
        self.jumpy = c;
        self
    }

    /// Length of an action record fed to the model.
    pub fn action_len(&self) -> usize {
        self.jumpy * self.num_actions
    }

    pub fn state_hw(&self) -> (usize, usize) {
        (self.height / SPATIAL_FACTOR, self.width / SPATIAL_FACTOR)
    }

    pub fn widths(&self) -> Result<Widths> {
        Widths::new(self.channel_scale)
    }

    pub fn validate(&self) -> Result<()> {
        if self.jumpy == 0 || self.num_actions == 0 {
            return Err(Error::Config("jumpy factor and action count must be positive".into()));
        }
        if !self.height.is_multiple_of(SPATIAL_FACTOR)
            || !self.width.is_multiple_of(SPATIAL_FACTOR)
            || self.height == 0
            || self.width == 0
        {
            return Err(Error::Config(format!(
                "frame {}x{} must be a positive multiple of {SPATIAL_FACTOR}",
                self.height, self.width
            )));
        }
        if self.family == Family::Ar && self.ar_order == 0 {
            return Err(Error::Config("auto-regressive order must be at least 1".into()));
        }
        if self.reward_bits == 0 || self.reward_bits > 30 {
            return Err(Error::Config("reward_bits must be in 1..=30".into()));
        }
        self.widths()?;
        Ok(())
    }
}

/// The sub-networks a family uses.
#[derive(Clone, Debug)]
pub struct Architecture {
    pub widths: Widths,
    pub encoder: Encoder,
    pub initial: Option<InitialState>,
    pub prior: Option<LatentHead>,
    pub posterior: Option<LatentHead>,
    pub transition: Option<Transition>,
    pub decoder: Decoder,
    pub ar_mixer: Option<ConvStack>,
}

impl Architecture {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let w = config.widths()?;
        let a = config.action_len();
        let f = config.family;
        let encoder = Encoder::new("encoder", &w);
        let decoder = Decoder::new("decoder", &w, w.state, config.state_hw(), config.reward_bits);
        let (initial, prior, transition, ar_mixer) = if f == Family::Ar {
            let k = config.ar_order;
            let spec = ConvStackSpec::new((1, w.wide), (3, w.wide), (3, w.state))?;
            (
                None,
                None,
                None,
                Some(ConvStack::new("ar_mixer", k * (w.state + a), spec)),
            )
        } else {
            let extra = if f == Family::Rar { w.state } else { 0 };
            let transition = (f != Family::BaselineVae).then(|| Transition::new("transition", &w, a, extra));
            (
                Some(InitialState::new("initial", &w)),
                Some(LatentHead::new("prior", &w, w.state + a)),
                transition,
                None,
            )
        };
        let posterior = f
            .has_posterior()
            .then(|| LatentHead::new("posterior", &w, 4 * w.state + a));
        Ok(Self {
            widths: w,
            encoder,
            initial,
            prior,
            posterior,
            transition,
            decoder,
            ar_mixer,
        })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        self.encoder.init(store, rng);
        if let Some(m) = &self.initial {
            m.init(store, rng);
        }
        if let Some(m) = &self.prior {
            m.init(store, rng);
        }
        if let Some(m) = &self.posterior {
            m.init(store, rng);
        }
        if let Some(m) = &self.transition {
            m.init(store, rng);
        }
        self.decoder.init(store, rng);
        if let Some(m) = &self.ar_mixer {
            m.init(store, rng);
        }
    }
}

/// Instrumentation counters, for cost accounting in tests and benchmarks.
#[derive(Debug, Default)]
pub struct Counters {
    pixel_decodes: AtomicU64,
    generative_steps: AtomicU64,
    sample_steps: AtomicU64,
}

impl Counters {
    pub fn pixel_decodes(&self) -> u64 {
        self.pixel_decodes.load(Ordering::Relaxed)
    }

    pub fn generative_steps(&self) -> u64 {
        self.generative_steps.load(Ordering::Relaxed)
    }

    /// Generative steps summed over batch rows (one per chain per step).
    pub fn sample_steps(&self) -> u64 {
        self.sample_steps.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.pixel_decodes.store(0, Ordering::Relaxed);
        self.generative_steps.store(0, Ordering::Relaxed);
        self.sample_steps.store(0, Ordering::Relaxed);
    }

    pub(crate) fn count_decode(&self) {
        self.pixel_decodes.fetch_add(1, Ordering::Relaxed);
    }

    pub(crate) fn count_step(&self, rows: usize) {
        self.generative_steps.fetch_add(1, Ordering::Relaxed);
        self.sample_steps.fetch_add(rows as u64, Ordering::Relaxed);
    }
}

/// A model family instance: configuration, architecture and parameters.
#[derive(Debug)]
pub struct EnvModel {
    pub config: ModelConfig,
    pub arch: Architecture,
    pub params: ParamStore,
    pub counters: Counters,
}

impl Clone for EnvModel {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            arch: self.arch.clone(),
            params: self.params.clone(),
            counters: Counters::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CheckpointManifest {
    config: ModelConfig,
    channel_scale: f64,
    shapes: BTreeMap<String, Vec<usize>>,
}

const PARAMS_FILE: &str = "params.bin";
const MODEL_MANIFEST: &str = "model.toml";

impl EnvModel {
    /// Build a model with freshly initialized parameters.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let arch = Architecture::new(&config)?;
        let mut params = ParamStore::new();
        arch.init(&mut params, &mut ChaCha8Rng::seed_from_u64(seed));
        Ok(Self {
            config,
            arch,
            params,
            counters: Counters::default(),
        })
    }

    pub fn family(&self) -> Family {
        self.config.family
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_elements()
    }

    /// Write the parameter archive and a manifest of shapes.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.params.save(&dir.join(PARAMS_FILE))?;
        let manifest = CheckpointManifest {
            config: self.config.clone(),
            channel_scale: self.config.channel_scale,
            shapes: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), v.shape().to_vec()))
                .collect(),
        };
        std::fs::write(dir.join(MODEL_MANIFEST), toml::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MODEL_MANIFEST);
        let text = std::fs::read_to_string(&mpath).map_err(|e| Error::MissingArtifact {
            path: mpath.clone(),
            reason: e.to_string(),
        })?;
        let manifest: CheckpointManifest = toml::from_str(&text)?;
        let params = ParamStore::load(&dir.join(PARAMS_FILE))?;
        let arch = Architecture::new(&manifest.config)?;
        let mut reference = ParamStore::new();
        arch.init(&mut reference, &mut ChaCha8Rng::seed_from_u64(0));
        for (name, t) in reference.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => {
                    return Err(Error::Shape(format!(
                        "checkpoint {name}: shape {:?}, architecture expects {:?}",
                        p.shape(),
                        t.shape()
                    )))
                }
                None => {
                    return Err(Error::MissingArtifact {
                        path: dir.join(PARAMS_FILE),
                        reason: format!("parameter {name} absent"),
                    })
                }
            }
        }
        Ok(Self {
            config: manifest.config,
            arch,
            params,
            counters: Counters::default(),
        })
    }
}
