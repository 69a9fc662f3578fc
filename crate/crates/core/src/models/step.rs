use imagine_autograd::{Binding, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{EnvModel, Family};
use crate::blocks::{broadcast, LatentStats};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepMode {
    /// Draw latents (and rendered frames) at random.
    Sample,
    /// Use latent means and pixel probabilities.
    Mean,
}

/// Batched model state. Which fields are set depends on the family.
#[derive(Clone, Debug)]
pub struct ModelState<'g> {
    /// Abstract state (or, for the frame VAE, the fixed context embedding).
    pub s: Option<Var<'g>>,
    /// Previous frame, consumed by the recurrent auto-regressive family.
    pub prev_obs: Option<Var<'g>>,
    /// FIFO of the last frames, oldest first (auto-regressive family).
    pub frames: Vec<Var<'g>>,
    /// FIFO of the actions taken after each buffered frame.
    pub actions: Vec<Var<'g>>,
}

impl<'g> ModelState<'g> {
    pub fn batch(&self) -> usize {
        self.s
            .or_else(|| self.frames.last().copied())
            .map_or(0, |v| v.shape()[0])
    }

    /// The abstract state, or an error for families without one.
    pub fn state(&self) -> Result<Var<'g>> {
        self.s
            .ok_or_else(|| Error::InvalidInput("this model family has no abstract state".into()))
    }

    /// Repeat every batch row `times` times (as consecutive blocks).
    pub fn repeat(&self, times: usize) -> Self {
        Self {
            s: self.s.map(|v| v.repeat_rows(times)),
            prev_obs: self.prev_obs.map(|v| v.repeat_rows(times)),
            frames: self.frames.iter().map(|v| v.repeat_rows(times)).collect(),
            actions: self.actions.iter().map(|v| v.repeat_rows(times)).collect(),
        }
    }
}

pub struct StepOutput<'g> {
    pub state: ModelState<'g>,
    /// The latent fed to the decoder.
    pub z: Option<Var<'g>>,
    pub prior: Option<LatentStats<'g>>,
    pub posterior: Option<LatentStats<'g>>,
    pub pixel_logits: Option<Var<'g>>,
    pub reward_logits: Var<'g>,
}

pub(crate) fn standard_normal(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.sample(StandardNormal)).collect())
}

fn noise<'g>(b: &Binding<'g>, like: Var<'g>, rng: Option<&mut ChaCha8Rng>) -> Var<'g> {
    let shape = like.shape();
    let t = match rng {
        Some(r) => standard_normal(&shape, r),
        None => Tensor::zeros(&shape),
    };
    b.graph().constant(t)
}

impl EnvModel {
    fn check_frame(&self, o: &Var<'_>) -> Result<()> {
        let s = o.shape();
        let c = &self.config;
        if s.len() != 4 || s[1..] != [c.height, c.width, 3] {
            return Err(Error::Shape(format!(
                "expected frames [n, {}, {}, 3], got {s:?}",
                c.height, c.width
            )));
        }
        Ok(())
    }

    fn check_action(&self, a: &Var<'_>, n: usize) -> Result<()> {
        let want = [n, self.config.action_len()];
        if a.shape() != want {
            return Err(Error::Shape(format!(
                "expected action records {want:?}, got {:?}",
                a.shape()
            )));
        }
        Ok(())
    }

    /// Actions as seen by the networks; unconditional families get zeros.
    fn effective_action<'g>(&self, b: &Binding<'g>, a: Var<'g>) -> Var<'g> {
        if self.config.family.conditions_on_actions() {
            a
        } else {
            b.graph().constant(Tensor::zeros(&a.shape()))
        }
    }

    pub fn encode<'g>(&self, b: &Binding<'g>, o: Var<'g>) -> Result<Var<'g>> {
        self.check_frame(&o)?;
        self.arch.encoder.forward(b, o)
    }

    fn decode_pixels<'g>(&self, b: &Binding<'g>, s: Var<'g>, z: Var<'g>) -> Result<Var<'g>> {
        self.counters.count_decode();
        self.arch.decoder.pixels(b, s, z)
    }

    /// Build `s_0` from the three context frames (oldest first).
    pub fn init_state<'g>(&self, b: &Binding<'g>, context: &[Var<'g>]) -> Result<ModelState<'g>> {
        if context.len() != 3 {
            return Err(Error::InvalidInput(format!(
                "context must hold 3 frames, got {}",
                context.len()
            )));
        }
        for o in context {
            self.check_frame(o)?;
        }
        let n = context[0].shape()[0];
        if context.iter().any(|o| o.shape()[0] != n) {
            return Err(Error::Shape("context frames differ in batch size".into()));
        }
        if self.config.family == Family::Ar {
            let k = self.config.ar_order;
            let frames: Vec<Var> = (0..k).map(|i| context[(3 + i).saturating_sub(k).min(2)]).collect();
            let zero = b.graph().constant(Tensor::zeros(&[n, self.config.action_len()]));
            return Ok(ModelState {
                s: None,
                prev_obs: None,
                frames,
                actions: vec![zero; k],
            });
        }
        let init = self
            .arch
            .initial
            .as_ref()
            .expect("state families have an initial network");
        let e: Vec<Var> = context
            .iter()
            .map(|&o| self.arch.encoder.forward(b, o))
            .collect::<Result<_>>()?;
        let s = init.forward(b, e[0], e[1], e[2])?;
        Ok(ModelState {
            s: Some(s),
            prev_obs: (self.config.family == Family::Rar).then_some(context[2]),
            frames: Vec::new(),
            actions: Vec::new(),
        })
    }

    fn prior_stats<'g>(&self, b: &Binding<'g>, s: Var<'g>, a: Var<'g>) -> Result<LatentStats<'g>> {
        let sh = s.shape();
        let head = self.arch.prior.as_ref().expect("family has a prior");
        head.forward(b, Var::concat_last(&[s, broadcast(a, sh[1], sh[2])]))
    }

    /// Prior statistics `p(z | s, a)` as used by the generative step.
    pub fn prior<'g>(&self, b: &Binding<'g>, state: &ModelState<'g>, action: Var<'g>) -> Result<LatentStats<'g>> {
        let s = state.state()?;
        self.check_action(&action, s.shape()[0])?;
        self.prior_stats(b, s, self.effective_action(b, action))
    }

    fn posterior_stats<'g>(
        &self,
        b: &Binding<'g>,
        s: Var<'g>,
        a: Var<'g>,
        e: Var<'g>,
        prior: &LatentStats<'g>,
    ) -> Result<LatentStats<'g>> {
        let sh = s.shape();
        let head = self.arch.posterior.as_ref().expect("family has a posterior");
        head.forward(
            b,
            Var::concat_last(&[s, broadcast(a, sh[1], sh[2]), e, prior.mu, prior.sigma]),
        )
    }

    fn render<'g>(
        &self,
        b: &Binding<'g>,
        logits: Var<'g>,
        mode: StepMode,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Var<'g>> {
        match mode {
            StepMode::Mean => Ok(logits.sigmoid()),
            StepMode::Sample => {
                let rng = rng.ok_or_else(|| Error::InvalidInput("sample mode requires an rng".into()))?;
                let p = logits.value();
                let data = p
                    .data()
                    .iter()
                    .map(|&l| f64::from(rng.random::<f64>() < imagine_autograd::sigmoid(l)))
                    .collect();
                Ok(b.graph().constant(Tensor::from_vec(p.shape(), data)))
            }
        }
    }

    /// One step of the generative model under `action` (`[n, c*A]`). The pixel
    /// decoder runs only when `decode_pixels` is set or the family must render
    /// its own frames.
    pub fn generative_step<'g>(
        &self,
        b: &Binding<'g>,
        state: &ModelState<'g>,
        action: Var<'g>,
        mode: StepMode,
        decode_pixels: bool,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<StepOutput<'g>> {
        self.step_with_prior(b, None, state, action, mode, decode_pixels, rng)
    }

    /// [`generative_step`](Self::generative_step) with the prior head read from
    /// `prior` (a store holding `prior/...` parameters of the same shapes)
    /// instead of the model's own.
    #[allow(clippy::too_many_arguments)]
    pub fn generative_step_with_prior<'g>(
        &self,
        b: &Binding<'g>,
        prior: &Binding<'g>,
        state: &ModelState<'g>,
        action: Var<'g>,
        mode: StepMode,
        decode_pixels: bool,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<StepOutput<'g>> {
        if self.arch.prior.is_none() {
            return Err(Error::InvalidInput(format!(
                "{} has no prior to replace",
                self.family()
            )));
        }
        self.step_with_prior(b, Some(prior), state, action, mode, decode_pixels, rng)
    }

    /// Reward-head logits for a batch of states.
    pub fn reward_logits<'g>(&self, b: &Binding<'g>, s: Var<'g>) -> Result<Var<'g>> {
        self.arch.decoder.reward(b, s)
    }

    #[allow(clippy::too_many_arguments)]
    fn step_with_prior<'g>(
        &self,
        b: &Binding<'g>,
        prior_b: Option<&Binding<'g>>,
        state: &ModelState<'g>,
        action: Var<'g>,
        mode: StepMode,
        decode_pixels: bool,
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<StepOutput<'g>> {
        let family = self.config.family;
        if mode == StepMode::Sample && rng.is_none() && family != Family::DssmDet {
            return Err(Error::InvalidInput("sample mode requires an rng".into()));
        }
        self.check_action(&action, state.batch())?;
        self.counters.count_step(state.batch());
        let a = self.effective_action(b, action);
        if family == Family::Ar {
            return self.ar_step(b, state, a, None, mode, rng);
        }
        let s = state.state()?;
        let prior = self.prior_stats(prior_b.unwrap_or(b), s, a)?;
        let sampled = |rng: Option<&mut ChaCha8Rng>| match mode {
            StepMode::Sample => prior.reparameterize(noise(b, prior.mu, rng)),
            StepMode::Mean => prior.mu,
        };
        let tr = self.arch.transition.as_ref();
        let (next_s, z, prev_obs) = match family {
            Family::Sssm | Family::SssmUncond => {
                let z = sampled(rng.as_deref_mut());
                (tr.unwrap().forward(b, s, z, a, None)?, z, None)
            }
            Family::DssmVae => {
                let s2 = tr.unwrap().forward(b, s, prior.mu, a, None)?;
                (s2, sampled(rng.as_deref_mut()), None)
            }
            Family::DssmDet => (tr.unwrap().forward(b, s, prior.mu, a, None)?, prior.mu, None),
            Family::Rar => {
                let prev = state
                    .prev_obs
                    .ok_or_else(|| Error::InvalidInput("recurrent model needs the previous frame".into()))?;
                let e = self.arch.encoder.forward(b, prev)?;
                (tr.unwrap().forward(b, s, prior.mu, a, Some(e))?, prior.mu, Some(prev))
            }
            Family::BaselineVae => (s, sampled(rng.as_deref_mut()), None),
            Family::Ar => unreachable!(),
        };
        let pixel_logits = if decode_pixels || family == Family::Rar {
            Some(self.decode_pixels(b, next_s, z)?)
        } else {
            None
        };
        let prev_obs = match (prev_obs, pixel_logits) {
            (Some(_), Some(l)) => Some(self.render(b, l, mode, rng)?),
            _ => None,
        };
        Ok(StepOutput {
            reward_logits: self.arch.decoder.reward(b, next_s)?,
            state: ModelState {
                s: Some(next_s),
                prev_obs,
                frames: Vec::new(),
                actions: Vec::new(),
            },
            z: Some(z),
            prior: Some(prior),
            posterior: None,
            pixel_logits,
        })
    }

    /// Auto-regressive step: predict the next frame from the buffered frames
    /// and actions, then push either `observed` or the rendered frame.
    fn ar_step<'g>(
        &self,
        b: &Binding<'g>,
        state: &ModelState<'g>,
        a: Var<'g>,
        observed: Option<Var<'g>>,
        mode: StepMode,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<StepOutput<'g>> {
        let k = self.config.ar_order;
        if state.frames.len() != k || state.actions.len() != k {
            return Err(Error::InvalidInput("auto-regressive buffer not initialized".into()));
        }
        let mut actions: Vec<Var> = state.actions[1..].to_vec();
        actions.push(a);
        let sh = state.frames[0].shape();
        let (h, w) = (sh[1] / 8, sh[2] / 8);
        let embeddings: Vec<Var> = state
            .frames
            .iter()
            .map(|&o| self.arch.encoder.forward(b, o))
            .collect::<Result<_>>()?;
        let mut parts = embeddings.clone();
        parts.extend(actions.iter().map(|&x| broadcast(x, h, w)));
        let mixer = self.arch.ar_mixer.as_ref().expect("auto-regressive mixer");
        let hidden = mixer.forward(b, Var::concat_last(&parts))?;
        let logits = self.decode_pixels(b, hidden, *embeddings.last().unwrap())?;
        let next = match observed {
            Some(o) => o,
            None => self.render(b, logits, mode, rng)?,
        };
        let mut frames: Vec<Var> = state.frames[1..].to_vec();
        frames.push(next);
        Ok(StepOutput {
            reward_logits: self.arch.decoder.reward(b, hidden)?,
            state: ModelState {
                s: None,
                prev_obs: None,
                frames,
                actions,
            },
            z: None,
            prior: None,
            posterior: None,
            pixel_logits: Some(logits),
        })
    }

    /// One filtering step given the next observation. Latent families sample
    /// `z` from the posterior as `mu + sigma * eps`; `rng = None` takes
    /// `eps = 0`. Deterministic families are teacher forced. Pixels are always
    /// decoded.
    pub fn inference_step<'g>(
        &self,
        b: &Binding<'g>,
        state: &ModelState<'g>,
        action: Var<'g>,
        next_obs: Var<'g>,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<StepOutput<'g>> {
        self.check_frame(&next_obs)?;
        let n = state.batch();
        self.check_action(&action, n)?;
        if next_obs.shape()[0] != n {
            return Err(Error::Shape("observation batch differs from state batch".into()));
        }
        let family = self.config.family;
        let a = self.effective_action(b, action);
        if family == Family::Ar {
            return self.ar_step(b, state, a, Some(next_obs), StepMode::Mean, None);
        }
        let s = state.state()?;
        let prior = self.prior_stats(b, s, a)?;
        let tr = self.arch.transition.as_ref();
        if family.is_deterministic() {
            let (next_s, prev_obs) = if family == Family::Rar {
                let prev = state
                    .prev_obs
                    .ok_or_else(|| Error::InvalidInput("recurrent model needs the previous frame".into()))?;
                let e = self.arch.encoder.forward(b, prev)?;
                (tr.unwrap().forward(b, s, prior.mu, a, Some(e))?, Some(next_obs))
            } else {
                (tr.unwrap().forward(b, s, prior.mu, a, None)?, None)
            };
            return Ok(StepOutput {
                pixel_logits: Some(self.decode_pixels(b, next_s, prior.mu)?),
                reward_logits: self.arch.decoder.reward(b, next_s)?,
                state: ModelState {
                    s: Some(next_s),
                    prev_obs,
                    frames: Vec::new(),
                    actions: Vec::new(),
                },
                z: Some(prior.mu),
                prior: Some(prior),
                posterior: None,
            });
        }
        let e = self.arch.encoder.forward(b, next_obs)?;
        let post = self.posterior_stats(b, s, a, e, &prior)?;
        let z = post.reparameterize(noise(b, post.mu, rng));
        let next_s = match family {
            Family::Sssm | Family::SssmUncond => tr.unwrap().forward(b, s, z, a, None)?,
            Family::DssmVae => tr.unwrap().forward(b, s, prior.mu, a, None)?,
            Family::BaselineVae => s,
            _ => unreachable!(),
        };
        Ok(StepOutput {
            pixel_logits: Some(self.decode_pixels(b, next_s, z)?),
            reward_logits: self.arch.decoder.reward(b, next_s)?,
            state: ModelState {
                s: Some(next_s),
                prev_obs: None,
                frames: Vec::new(),
                actions: Vec::new(),
            },
            z: Some(z),
            prior: Some(prior),
            posterior: Some(post),
        })
    }
}
