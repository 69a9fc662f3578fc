//! Shape-checked convolutional building blocks shared by every model family.
//!
//! Feature maps are `[batch, height, width, channels]`. Every block owns a
//! parameter-name prefix; `init` registers freshly initialized parameters in a
//! [`ParamStore`] and `forward` reads them through a [`Binding`].

use imagine_autograd::{Binding, Padding, ParamStore, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fan-in variance scaling: `N(0, 1 / fan_in)`.
fn fan_in_normal<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let n = Normal::new(0.0, (1.0 / fan_in.max(1) as f64).sqrt()).expect("finite std");
    let len = shape.iter().product();
    Tensor::from_vec(shape, (0..len).map(|_| n.sample(rng)).collect())
}

fn check_channels(x: &Var<'_>, want: usize, who: &str) -> Result<()> {
    let s = x.shape();
    if s.len() != 4 || s[3] != want {
        return Err(Error::Shape(format!("{who}: expected [n, h, w, {want}], got {s:?}")));
    }
    Ok(())
}

fn check_spatial(a: &Var<'_>, b: &Var<'_>, who: &str) -> Result<()> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 4 || sb.len() != 4 || sa[..3] != sb[..3] {
        return Err(Error::Shape(format!("{who}: spatial mismatch {sa:?} vs {sb:?}")));
    }
    Ok(())
}

/// Size-preserving convolution with bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    pub name: String,
    pub kernel: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub stride: usize,
}

impl Conv {
    pub fn new(name: impl Into<String>, kernel: usize, in_ch: usize, out_ch: usize) -> Self {
        Self::strided(name, kernel, in_ch, out_ch, 1)
    }

    pub fn strided(name: impl Into<String>, kernel: usize, in_ch: usize, out_ch: usize, stride: usize) -> Self {
        Self {
            name: name.into(),
            kernel,
            in_ch,
            out_ch,
            stride,
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        let shape = [self.kernel, self.kernel, self.in_ch, self.out_ch];
        let fan_in = self.kernel * self.kernel * self.in_ch;
        store.insert(format!("{}/w", self.name), fan_in_normal(&shape, fan_in, rng));
        store.insert(format!("{}/b", self.name), Tensor::zeros(&[self.out_ch]));
    }

    pub fn forward<'g>(&self, b: &Binding<'g>, x: Var<'g>) -> Var<'g> {
        x.conv2d(
            b.param(&format!("{}/w", self.name)),
            Some(b.param(&format!("{}/b", self.name))),
            self.stride,
            Padding::Same,
        )
    }

    pub fn mac_per_output(&self) -> usize {
        self.kernel * self.kernel * self.in_ch * self.out_ch
    }
}

/// Fully connected layer over the last axis.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub name: String,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, in_dim: usize, out_dim: usize) -> Self {
        Self {
            name: name.into(),
            in_dim,
            out_dim,
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        store.insert(
            format!("{}/w", self.name),
            fan_in_normal(&[self.in_dim, self.out_dim], self.in_dim, rng),
        );
        store.insert(format!("{}/b", self.name), Tensor::zeros(&[self.out_dim]));
    }

    pub fn forward<'g>(&self, b: &Binding<'g>, x: Var<'g>) -> Var<'g> {
        x.matmul(b.param(&format!("{}/w", self.name)))
            .add_bias(b.param(&format!("{}/b", self.name)))
    }
}

/// Kernel sizes and output channels of the three convolutions of a
/// [`ConvStack`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvStackSpec {
    pub layers: [(usize, usize); 3],
}

impl ConvStackSpec {
    /// The first two convolutions must agree in width for the inner skip add.
    pub fn new(l1: (usize, usize), l2: (usize, usize), l3: (usize, usize)) -> Result<Self> {
        if l1.1 != l2.1 {
            return Err(Error::Shape(format!(
                "conv stack skip add needs equal widths, got {} and {}",
                l1.1, l2.1
            )));
        }
        if [l1, l2, l3].iter().any(|&(k, c)| k == 0 || c == 0) {
            return Err(Error::Shape("conv stack kernels and widths must be positive".into()));
        }
        Ok(Self { layers: [l1, l2, l3] })
    }

    pub fn out_ch(&self) -> usize {
        self.layers[2].1
    }
}

/// `y = conv3(relu(conv2(h) + h))` with `h = relu(conv1(x))`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvStack {
    pub in_ch: usize,
    pub spec: ConvStackSpec,
    convs: [Conv; 3],
}

impl ConvStack {
    pub fn new(name: &str, in_ch: usize, spec: ConvStackSpec) -> Self {
        let [(k1, c1), (k2, c2), (k3, c3)] = spec.layers;
        Self {
            in_ch,
            spec,
            convs: [
                Conv::new(format!("{name}/conv1"), k1, in_ch, c1),
                Conv::new(format!("{name}/conv2"), k2, c1, c2),
                Conv::new(format!("{name}/conv3"), k3, c2, c3),
            ],
        }
    }

    pub fn out_ch(&self) -> usize {
        self.spec.out_ch()
    }

    pub fn convs(&self) -> &[Conv; 3] {
        &self.convs
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        for c in &self.convs {
            c.init(store, rng);
        }
    }

    pub fn forward<'g>(&self, b: &Binding<'g>, x: Var<'g>) -> Result<Var<'g>> {
        check_channels(&x, self.in_ch, &self.convs[0].name)?;
        let h = self.convs[0].forward(b, x).relu();
        let inner = self.convs[1].forward(b, h).relu();
        Ok(self.convs[2].forward(b, inner + h))
    }
}

/// Residual stack mapping any width to `out_ch`, with a learned 1x1
/// projection on the skip path when widths differ.
#[derive(Clone, Debug, PartialEq)]
pub struct ResConv {
    pub in_ch: usize,
    pub out_ch: usize,
    convs: [Conv; 3],
    projection: Option<Conv>,
}

impl ResConv {
    pub fn new(name: &str, in_ch: usize, hidden: usize, out_ch: usize) -> Self {
        Self {
            in_ch,
            out_ch,
            convs: [
                Conv::new(format!("{name}/conv1"), 3, in_ch, hidden),
                Conv::new(format!("{name}/conv2"), 5, hidden, hidden),
                Conv::new(format!("{name}/conv3"), 3, hidden, out_ch),
            ],
            projection: (in_ch != out_ch).then(|| Conv::new(format!("{name}/proj"), 1, in_ch, out_ch)),
        }
    }

    pub fn has_projection(&self) -> bool {
        self.projection.is_some()
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        for c in self.convs.iter().chain(&self.projection) {
            c.init(store, rng);
        }
    }

    pub fn forward<'g>(&self, b: &Binding<'g>, x: Var<'g>) -> Result<Var<'g>> {
        check_channels(&x, self.in_ch, &self.convs[0].name)?;
        let h = self.convs[0].forward(b, x).relu();
        let h = self.convs[1].forward(b, h).relu();
        let h = self.convs[2].forward(b, h);
        let skip = match &self.projection {
            Some(p) => p.forward(b, x),
            None => x,
        };
        Ok(skip + h)
    }
}

/// Concatenate the input with the spatially tiled global max of a 3x3 conv.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolInject {
    pub in_ch: usize,
    conv: Conv,
}

impl PoolInject {
    pub fn new(name: &str, in_ch: usize, pooled: usize) -> Self {
        Self {
            in_ch,
            conv: Conv::new(format!("{name}/conv"), 3, in_ch, pooled),
        }
    }

    pub fn out_ch(&self) -> usize {
        self.in_ch + self.conv.out_ch
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        self.conv.init(store, rng);
    }

    pub fn forward<'g>(&self, b: &Binding<'g>, x: Var<'g>) -> Result<Var<'g>> {
        check_channels(&x, self.in_ch, &self.conv.name)?;
        let s = x.shape();
        let pooled = self.conv.forward(b, x).max_spatial().tile_spatial(s[1], s[2]);
        Ok(Var::concat_last(&[x, pooled]))
    }
}

/// Tile an action record `[n, L]` over an `h x w` plane.
pub fn broadcast<'g>(action: Var<'g>, h: usize, w: usize) -> Var<'g> {
    action.tile_spatial(h, w)
}

/// Channel widths derived from the global channel scale.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Widths {
    pub scale: f64,
    /// State and latent channels (64 at scale 1).
    pub state: usize,
    /// Hidden width of 32-channel layers.
    pub wide: usize,
    /// Hidden width of 16-channel layers.
    pub narrow: usize,
    /// Reward head convolution (24 at scale 1).
    pub reward: usize,
}

impl Widths {
    pub fn new(scale: f64) -> Result<Self> {
        if !(scale > 0.0 && scale <= 4.0) {
            return Err(Error::Config(format!("channel scale {scale} out of range")));
        }
        let ch = |base: f64| ((base * scale).round() as usize).max(1);
        let w = Self {
            scale,
            state: ch(64.0),
            wide: ch(32.0),
            narrow: ch(16.0),
            reward: ch(24.0),
        };
        // The decoder's first depth-to-space splits the state width by 4.
        if !w.state.is_multiple_of(4) {
            return Err(Error::Config(format!(
                "channel scale {scale} gives a state width of {} (must be divisible by 4)",
                w.state
            )));
        }
        Ok(w)
    }
}

/// Observation `[n, H, W, 3]` to embedding `[n, H/8, W/8, state]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    stack1: ConvStack,
    stack2: ConvStack,
}

impl Encoder {
    pub fn new(name: &str, w: &Widths) -> Self {
        let s1 = ConvStackSpec::new((3, w.narrow), (5, w.narrow), (3, w.state)).expect("equal widths");
        let s2 = ConvStackSpec::new((3, w.wide), (5, w.wide), (3, w.state)).expect("equal widths");
        Self {
            stack1: ConvStack::new(&format!("{name}/stack1"), 3 * 16, s1),
            stack2: ConvStack::new(&format!("{name}/stack2"), w.state * 4, s2),
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        self.stack1.init(store, rng);
        self.stack2.init(store, rng);
    }

    pub fn forward<'g>(&self, b: &Binding<'g>, o: Var<'g>) -> Result<Var<'g>> {
        let s = o.shape();
        if s.len() != 4 || s[3] != 3 || !s[1].is_multiple_of(8) || !s[2].is_multiple_of(8) {
            return Err(Error::Shape(format!("encoder input {s:?} is not [n, 8k, 8m, 3]")));
        }
        let h = self.stack1.forward(b, o.space_to_depth(4))?;
        let h = self.stack2.forward(b, h.space_to_depth(2))?;
        Ok(h.relu())
    }
}

/// Pixel log-odds from `(s, z)` and reward-bit logits from `s`.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    pub state_ch: usize,
    pub latent_ch: usize,
    pub reward_bits: usize,
    pixel1: ConvStack,
    pixel2: ConvStack,
    reward_conv: Conv,
    reward_fc: Linear,
}

impl Decoder {
    /// `state_hw` is the state's spatial size, needed by the reward FC layer.
    pub fn new(name: &str, w: &Widths, latent_ch: usize, state_hw: (usize, usize), reward_bits: usize) -> Self {
        let s1 = ConvStackSpec::new((1, w.wide), (5, w.wide), (3, w.state)).expect("equal widths");
        let s2 = ConvStackSpec::new((3, w.state), (3, w.state), (1, 3 * 16)).expect("equal widths");
        Self {
            state_ch: w.state,
            latent_ch,
            reward_bits,
            pixel1: ConvStack::new(&format!("{name}/pixel1"), w.state + latent_ch, s1),
            pixel2: ConvStack::new(&format!("{name}/pixel2"), w.state / 4, s2),
            reward_conv: Conv::new(format!("{name}/reward_conv"), 3, w.state, w.reward),
            reward_fc: Linear::new(
                format!("{name}/reward_fc"),
                state_hw.0 * state_hw.1 * w.reward,
                reward_bits + 2,
            ),
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        self.pixel1.init(store, rng);
        self.pixel2.init(store, rng);
        self.reward_conv.init(store, rng);
        self.reward_fc.init(store, rng);
    }

    pub fn pixels<'g>(&self, b: &Binding<'g>, s: Var<'g>, z: Var<'g>) -> Result<Var<'g>> {
        check_spatial(&s, &z, "decoder")?;
        let h = self.pixel1.forward(b, Var::concat_last(&[s, z]))?;
        let h = self.pixel2.forward(b, h.depth_to_space(2))?;
        Ok(h.depth_to_space(4))
    }

    pub fn reward<'g>(&self, b: &Binding<'g>, s: Var<'g>) -> Result<Var<'g>> {
        check_channels(&s, self.state_ch, "reward head")?;
        let h = self.reward_conv.forward(b, s).relu().flatten();
        if h.shape()[1] != self.reward_fc.in_dim {
            return Err(Error::Shape(format!(
                "reward head built for {} features, got {}",
                self.reward_fc.in_dim,
                h.shape()[1]
            )));
        }
        Ok(self.reward_fc.forward(b, h))
    }
}

/// Mean and standard deviation maps of a diagonal Gaussian.
#[derive(Clone, Copy, Debug)]
pub struct LatentStats<'g> {
    pub mu: Var<'g>,
    pub sigma: Var<'g>,
}

impl<'g> LatentStats<'g> {
    /// `mu + sigma * eps`.
    pub fn reparameterize(&self, eps: Var<'g>) -> Var<'g> {
        self.mu + self.sigma * eps
    }
}

/// Conv stack whose final layer emits `2 * latent` channels, split into the
/// mean and a softplus-activated standard deviation. Used for both the prior
/// and the posterior; only the input width differs.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentHead {
    pub in_ch: usize,
    pub latent_ch: usize,
    stack: ConvStack,
}

impl LatentHead {
    pub fn new(name: &str, w: &Widths, in_ch: usize) -> Self {
        let spec = ConvStackSpec::new((1, w.wide), (3, w.wide), (3, 2 * w.state)).expect("equal widths");
        Self {
            in_ch,
            latent_ch: w.state,
            stack: ConvStack::new(&format!("{name}/stack"), in_ch, spec),
        }
    }

    pub fn stack(&self) -> &ConvStack {
        &self.stack
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        self.stack.init(store, rng);
    }

    pub fn forward<'g>(&self, b: &Binding<'g>, x: Var<'g>) -> Result<LatentStats<'g>> {
        let h = self.stack.forward(b, x)?;
        Ok(LatentStats {
            mu: h.narrow_last(0, self.latent_ch),
            sigma: h.narrow_last(self.latent_ch, self.latent_ch).softplus(),
        })
    }
}

/// `res_conv -> relu -> pool_inject -> res_conv` over `concat(s, a, z[, extra])`.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub state_ch: usize,
    pub action_len: usize,
    pub latent_ch: usize,
    pub extra_ch: usize,
    res1: ResConv,
    pool: PoolInject,
    res2: ResConv,
}

impl Transition {
    pub fn new(name: &str, w: &Widths, action_len: usize, extra_ch: usize) -> Self {
        let in_ch = w.state + action_len + w.state + extra_ch;
        let pool = PoolInject::new(&format!("{name}/pool"), w.state, w.wide);
        Self {
            state_ch: w.state,
            action_len,
            latent_ch: w.state,
            extra_ch,
            res1: ResConv::new(&format!("{name}/res1"), in_ch, w.wide, w.state),
            res2: ResConv::new(&format!("{name}/res2"), pool.out_ch(), w.wide, w.state),
            pool,
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        self.res1.init(store, rng);
        self.pool.init(store, rng);
        self.res2.init(store, rng);
    }

    pub fn forward<'g>(
        &self,
        b: &Binding<'g>,
        s: Var<'g>,
        z: Var<'g>,
        action: Var<'g>,
        extra: Option<Var<'g>>,
    ) -> Result<Var<'g>> {
        check_spatial(&s, &z, "transition")?;
        let sh = s.shape();
        if action.shape() != [sh[0], self.action_len] {
            return Err(Error::Shape(format!(
                "transition expects actions [{}, {}], got {:?}",
                sh[0],
                self.action_len,
                action.shape()
            )));
        }
        let mut parts = vec![s, broadcast(action, sh[1], sh[2]), z];
        match (extra, self.extra_ch) {
            (Some(e), c) if c > 0 => {
                check_spatial(&s, &e, "transition extra input")?;
                parts.push(e);
            }
            (None, 0) => {}
            _ => return Err(Error::Shape("transition extra input presence mismatch".into())),
        }
        let h = self.res1.forward(b, Var::concat_last(&parts))?.relu();
        let h = self.pool.forward(b, h)?;
        self.res2.forward(b, h)
    }
}

/// First state from three context embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct InitialState {
    stack: ConvStack,
}

impl InitialState {
    pub fn new(name: &str, w: &Widths) -> Self {
        let spec = ConvStackSpec::new((1, w.state), (3, w.state), (3, w.state)).expect("equal widths");
        Self {
            stack: ConvStack::new(&format!("{name}/stack"), 3 * w.state, spec),
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        self.stack.init(store, rng);
    }

    pub fn forward<'g>(&self, b: &Binding<'g>, e0: Var<'g>, e1: Var<'g>, e2: Var<'g>) -> Result<Var<'g>> {
        check_spatial(&e0, &e1, "initial state")?;
        check_spatial(&e0, &e2, "initial state")?;
        self.stack.forward(b, Var::concat_last(&[e0, e1, e2]))
    }
}
