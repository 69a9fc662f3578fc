use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Observation, StepResult};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BouncingBallConfig {
    /// Drift speed per axis in pixels per step; the sign of each axis is
    /// drawn at reset.
    pub velocity: [f64; 2],
    /// Standard deviation of the per-axis Gaussian position increment.
    pub diffusion: f64,
    pub radius: f64,
    /// Size of the (ignored) action set, so the ball shares the action interface.
    pub num_actions: usize,
}

impl Default for BouncingBallConfig {
    fn default() -> Self {
        Self {
            velocity: [3.0, 2.0],
            diffusion: 1.5,
            radius: 6.0,
            num_actions: 5,
        }
    }
}

/// Ball center `(x, y)` and velocity in pixel units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BallState {
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
}

/// Reflect `p` into `[lo, hi]`, flipping `v` once per bounce.
fn reflect(mut p: f64, mut v: f64, lo: f64, hi: f64) -> (f64, f64) {
    if hi <= lo {
        return (lo, v);
    }
    for _ in 0..64 {
        if p < lo {
            p = 2.0 * lo - p;
            v = -v;
        } else if p > hi {
            p = 2.0 * hi - p;
            v = -v;
        } else {
            return (p, v);
        }
    }
    (p.clamp(lo, hi), v)
}

/// Render a hard-edged white disc on black.
pub(crate) fn render_ball(s: &BallState, radius: f64, height: usize, width: usize) -> Observation {
    let mut obs = Observation::blank(height, width).expect("validated frame size");
    let r2 = radius * radius;
    let y0 = (s.y - radius).floor().max(0.0) as usize;
    let y1 = ((s.y + radius).ceil() as usize).min(height);
    let x0 = (s.x - radius).floor().max(0.0) as usize;
    let x1 = ((s.x + radius).ceil() as usize).min(width);
    let px = obs.bytes_mut();
    for y in y0..y1 {
        for x in x0..x1 {
            let dy = y as f64 + 0.5 - s.y;
            let dx = x as f64 + 0.5 - s.x;
            if dx * dx + dy * dy <= r2 {
                let i = (y * width + x) * 3;
                px[i..i + 3].fill(255);
            }
        }
    }
    obs
}

/// Advance the ball by its drift plus Gaussian diffusion, reflecting
/// elastically so the disc stays inside the frame, and render the result.
pub fn bouncing_ball_step(
    state: &BallState,
    config: &BouncingBallConfig,
    height: usize,
    width: usize,
    rng: &mut ChaCha8Rng,
) -> (BallState, Observation) {
    let (nx, ny) = if config.diffusion > 0.0 {
        let n = Normal::new(0.0, config.diffusion).expect("positive diffusion");
        (n.sample(rng), n.sample(rng))
    } else {
        (0.0, 0.0)
    };
    let r = config.radius;
    let (x, vx) = reflect(state.x + state.vx + nx, state.vx, r, width as f64 - r);
    let (y, vy) = reflect(state.y + state.vy + ny, state.vy, r, height as f64 - r);
    let next = BallState { x, y, vx, vy };
    let obs = render_ball(&next, r, height, width);
    (next, obs)
}

#[derive(Clone, Debug)]
pub struct BouncingBall {
    config: BouncingBallConfig,
    height: usize,
    width: usize,
    state: BallState,
    rng: ChaCha8Rng,
    raw_steps: u64,
}

impl BouncingBall {
    pub fn new(config: BouncingBallConfig, height: usize, width: usize, rng: ChaCha8Rng) -> Result<Self> {
        if config.radius <= 0.0 || 2.0 * config.radius >= height.min(width) as f64 {
            return Err(Error::Config(format!(
                "ball radius {} does not fit a {height}x{width} frame",
                config.radius
            )));
        }
        if config.diffusion < 0.0 || !config.diffusion.is_finite() {
            return Err(Error::Config("diffusion must be finite and nonnegative".into()));
        }
        if config.num_actions == 0 {
            return Err(Error::Config("num_actions must be positive".into()));
        }
        let mut env = Self {
            config,
            height,
            width,
            state: BallState {
                x: width as f64 / 2.0,
                y: height as f64 / 2.0,
                vx: 0.0,
                vy: 0.0,
            },
            rng,
            raw_steps: 0,
        };
        env.reset();
        Ok(env)
    }

    pub fn num_actions(&self) -> usize {
        self.config.num_actions
    }

    pub fn state(&self) -> BallState {
        self.state
    }

    pub fn set_state(&mut self, state: BallState) {
        self.state = state;
    }

    pub fn config(&self) -> &BouncingBallConfig {
        &self.config
    }

    pub fn reset(&mut self) -> Observation {
        let r = self.config.radius;
        let x = self.rng.random_range(r..=self.width as f64 - r);
        let y = self.rng.random_range(r..=self.height as f64 - r);
        let sx = if self.rng.random::<bool>() { 1.0 } else { -1.0 };
        let sy = if self.rng.random::<bool>() { 1.0 } else { -1.0 };
        self.state = BallState {
            x,
            y,
            vx: sx * self.config.velocity[0],
            vy: sy * self.config.velocity[1],
        };
        self.render()
    }

    /// Actions are accepted for interface parity and ignored.
    pub fn step(&mut self, action: usize) -> Result<StepResult> {
        if action >= self.config.num_actions {
            return Err(Error::InvalidInput(format!("action {action} out of range")));
        }
        let (s, observation) = bouncing_ball_step(&self.state, &self.config, self.height, self.width, &mut self.rng);
        self.state = s;
        self.raw_steps += 1;
        Ok(StepResult {
            observation,
            reward: 0.0,
            done: false,
        })
    }

    pub fn render(&self) -> Observation {
        render_ball(&self.state, self.config.radius, self.height, self.width)
    }

    pub fn raw_steps(&self) -> u64 {
        self.raw_steps
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn cfg(diffusion: f64) -> BouncingBallConfig {
        BouncingBallConfig {
            diffusion,
            ..Default::default()
        }
    }

    #[test]
    fn zero_diffusion_shifts_by_velocity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = BallState {
            x: 40.0,
            y: 40.0,
            vx: 2.5,
            vy: 0.0,
        };
        let (n, _) = bouncing_ball_step(&s, &cfg(0.0), 80, 80, &mut rng);
        assert_eq!((n.x, n.y), (42.5, 40.0));
        assert_eq!((n.vx, n.vy), (2.5, 0.0));
    }

    #[test]
    fn left_wall_flips_horizontal_velocity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = BallState {
            x: 6.5,
            y: 40.0,
            vx: -3.0,
            vy: 1.0,
        };
        let (n, _) = bouncing_ball_step(&s, &cfg(0.0), 80, 80, &mut rng);
        assert_eq!(n.vx, 3.0);
        assert_eq!(n.vy, 1.0);
        assert!(n.x >= 6.0);
    }

    #[test]
    fn diffusion_variance_matches_configuration() {
        let sigma = 1.3;
        let c = cfg(sigma);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let s = BallState {
            x: 40.0,
            y: 40.0,
            vx: 2.0,
            vy: -1.0,
        };
        let n = 10_000;
        let (mut sum, mut sq) = (0.0, 0.0);
        for _ in 0..n {
            // Restart from the center each step so reflections never interfere.
            let (next, _) = bouncing_ball_step(&s, &c, 80, 80, &mut rng);
            for d in [next.x - s.x - s.vx, next.y - s.y - s.vy] {
                sum += d;
                sq += d * d;
            }
        }
        let m = (2 * n) as f64;
        let var = sq / m - (sum / m).powi(2);
        let rel = (var - sigma * sigma).abs() / (sigma * sigma);
        assert!(rel < 0.05, "variance {var} vs {}", sigma * sigma);
    }

    #[test]
    fn zero_diffusion_runs_are_identical() {
        let run = |seed| {
            let mut env = BouncingBall::new(cfg(0.0), 80, 80, ChaCha8Rng::seed_from_u64(3)).unwrap();
            env.set_state(BallState {
                x: 20.0,
                y: 30.0,
                vx: 3.0,
                vy: -2.0,
            });
            // A different rng stream must not matter without diffusion.
            env.rng = ChaCha8Rng::seed_from_u64(seed);
            (0..50).map(|_| env.step(0).unwrap().observation).collect::<Vec<_>>()
        };
        assert_eq!(run(1), run(2));
    }

    #[test]
    fn ball_stays_in_frame_and_pixels_are_binary() {
        let mut env = BouncingBall::new(cfg(4.0), 80, 80, ChaCha8Rng::seed_from_u64(5)).unwrap();
        for _ in 0..500 {
            let obs = env.step(1).unwrap().observation;
            let s = env.state();
            assert!(s.x >= 6.0 && s.x <= 74.0 && s.y >= 6.0 && s.y <= 74.0);
            assert!(obs.bytes().iter().all(|&b| b == 0 || b == 255));
            assert!(obs.bytes().contains(&255));
        }
    }

    #[test]
    fn oversized_ball_rejected() {
        let c = BouncingBallConfig {
            radius: 40.0,
            ..Default::default()
        };
        assert!(BouncingBall::new(c, 80, 80, ChaCha8Rng::seed_from_u64(0)).is_err());
    }
}
