//! Observation, reward and latent scores.

use imagine_autograd::{Tensor, Var};

use crate::blocks::LatentStats;
use crate::error::{Error, Result};

/// Negative entropy term `sum p ln p + (1 - p) ln (1 - p)` per row, with `0 ln 0 = 0`.
fn neg_entropy_rows(p: &Tensor) -> Vec<f64> {
    let n = p.shape()[0];
    let inner = p.numel() / n.max(1);
    let xlogx = |x: f64| if x > 0.0 { x * x.ln() } else { 0.0 };
    (0..n)
        .map(|r| {
            p.data()[r * inner..(r + 1) * inner]
                .iter()
                .map(|&v| xlogx(v) + xlogx(1.0 - v))
                .sum()
        })
        .collect()
}

/// Score pseudo-probability pixels `p` (`[n, H, W, 3]`) under predicted log-odds:
/// `-KL(p || sigmoid(logits))` summed per batch row. Zero iff the prediction
/// equals the observation, negative otherwise.
pub fn pixel_log_prob<'g>(logits: Var<'g>, p: &Tensor) -> Result<Var<'g>> {
    if logits.shape() != p.shape() {
        return Err(Error::Shape(format!(
            "pixel logits {:?} vs observation {:?}",
            logits.shape(),
            p.shape()
        )));
    }
    let h = Tensor::from_vec(&[p.shape()[0]], neg_entropy_rows(p));
    Ok(logits.bernoulli_log_prob(p) - logits.graph().constant(h))
}

/// Bits of a reward: magnitude of `floor(r)` (least significant first), then
/// a sign bit (`r < 0`) and a zero indicator (`r == 0`).
pub fn reward_encode(r: f64, bits: usize) -> Result<Vec<f64>> {
    if !r.is_finite() {
        return Err(Error::InvalidInput(format!("reward {r} is not finite")));
    }
    let mag = r.floor().abs();
    if mag >= 2f64.powi(bits as i32) {
        return Err(Error::InvalidInput(format!(
            "reward {r} does not fit {bits} magnitude bits"
        )));
    }
    let m = mag as u64;
    let mut out: Vec<f64> = (0..bits).map(|i| ((m >> i) & 1) as f64).collect();
    out.push(f64::from(r < 0.0));
    out.push(f64::from(r == 0.0));
    Ok(out)
}

/// Inverse of [`reward_encode`] on hard bits (thresholded at 0.5).
pub fn reward_decode(code: &[f64]) -> f64 {
    let bits = code.len().saturating_sub(2);
    if code.get(bits + 1).is_some_and(|&z| z >= 0.5) {
        return 0.0;
    }
    let mag: f64 = (0..bits).filter(|&i| code[i] >= 0.5).map(|i| 2f64.powi(i as i32)).sum();
    if code.get(bits).is_some_and(|&s| s >= 0.5) {
        -mag
    } else {
        mag
    }
}

/// Bernoulli log-likelihood of the encoded rewards under `logits` (`[n, N+2]`).
pub fn reward_log_prob<'g>(logits: Var<'g>, rewards: &[f64]) -> Result<Var<'g>> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != rewards.len() || s[1] < 3 {
        return Err(Error::Shape(format!(
            "reward logits {s:?} for {} rewards",
            rewards.len()
        )));
    }
    let bits = s[1] - 2;
    let mut data = Vec::with_capacity(s[0] * s[1]);
    for &r in rewards {
        data.extend(reward_encode(r, bits)?);
    }
    Ok(logits.bernoulli_log_prob(&Tensor::from_vec(&s, data)))
}

/// Probability-weighted reward under independent bits:
/// `(1 - p_zero) (1 - 2 p_sign) sum_n p_n 2^n`, per row.
pub fn expected_reward<'g>(logits: Var<'g>) -> Var<'g> {
    let s = logits.shape();
    let bits = s[1] - 2;
    let g = logits.graph();
    let p = logits.sigmoid();
    let powers = g.constant(Tensor::from_vec(
        &[bits, 1],
        (0..bits).map(|i| 2f64.powi(i as i32)).collect(),
    ));
    let mag = p.narrow_last(0, bits).matmul(powers);
    let sign = p.narrow_last(bits, 1).scale(-2.0).add_scalar(1.0);
    let nonzero = p.narrow_last(bits + 1, 1).neg().add_scalar(1.0);
    (mag * sign * nonzero).reshape(&[s[0]])
}

/// Closed-form `KL(q || p)` between diagonal Gaussians, summed per batch row.
pub fn gaussian_kl<'g>(q: &LatentStats<'g>, p: &LatentStats<'g>) -> Result<Var<'g>> {
    let shape = q.mu.shape();
    if [q.sigma.shape(), p.mu.shape(), p.sigma.shape()]
        .iter()
        .any(|s| *s != shape)
    {
        return Err(Error::Shape("latent statistics differ in shape".into()));
    }
    let log_ratio = p.sigma.ln() - q.sigma.ln();
    let quad = (q.sigma.square() + (q.mu - p.mu).square()) / p.sigma.square().scale(2.0);
    let n = shape[0];
    Ok((log_ratio + quad)
        .add_scalar(-0.5)
        .reshape(&[n, shape.iter().skip(1).product()])
        .sum_rows())
}

/// `log N(z; mu, sigma^2)` summed per batch row.
pub fn gaussian_log_density<'g>(z: Var<'g>, stats: &LatentStats<'g>) -> Var<'g> {
    let shape = z.shape();
    let n = shape[0];
    let c = -0.5 * (2.0 * std::f64::consts::PI).ln();
    let d = (z - stats.mu) / stats.sigma;
    (d.square().scale(-0.5) - stats.sigma.ln())
        .add_scalar(c)
        .reshape(&[n, shape.iter().skip(1).product()])
        .sum_rows()
}

/// Single-sample estimate `log q(z) - log p(z)`, whose expectation under `q`
/// is the KL divergence.
pub fn sampled_log_ratio<'g>(z: Var<'g>, q: &LatentStats<'g>, p: &LatentStats<'g>) -> Var<'g> {
    gaussian_log_density(z, q) - gaussian_log_density(z, p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use imagine_autograd::Graph;

    #[test]
    fn pixel_score_zero_at_equality_and_ln2_at_half() {
        let g = Graph::new();
        let p = Tensor::from_vec(&[1, 1, 2, 3], vec![0.0, 1.0, 0.3, 0.5, 0.9, 1.0]);
        let logits = p.map(|v| {
            let v = v.clamp(1e-300, 1.0 - 1e-16);
            (v / (1.0 - v)).ln()
        });
        let s = pixel_log_prob(g.constant(logits), &p).unwrap().item();
        assert!(s.abs() < 1e-9, "{s}");

        let ones = Tensor::ones(&[1, 1, 1, 3]);
        let s = pixel_log_prob(g.constant(Tensor::zeros(&[1, 1, 1, 3])), &ones)
            .unwrap()
            .item();
        assert!((s + 3.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn reward_codes() {
        let z = reward_encode(0.0, 8).unwrap();
        assert_eq!(&z[..8], &[0.0; 8]);
        assert_eq!((z[8], z[9]), (0.0, 1.0));
        let f = reward_encode(5.7, 8).unwrap();
        assert_eq!(&f[..8], &[1., 0., 1., 0., 0., 0., 0., 0.]);
        assert_eq!((f[8], f[9]), (0.0, 0.0));
        let n = reward_encode(-3.0, 8).unwrap();
        assert_eq!(&n[..3], &[1., 1., 0.]);
        assert_eq!((n[8], n[9]), (1.0, 0.0));
        assert!(reward_encode(256.0, 8).is_err());
        assert!(reward_encode(-256.5, 8).is_err());
    }

    #[test]
    fn zero_logits_reward_score() {
        let g = Graph::new();
        let l = g.constant(Tensor::zeros(&[1, 10]));
        let s = reward_log_prob(l, &[3.0]).unwrap().item();
        assert!((s - 10.0 * 0.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn expected_reward_of_confident_logits() {
        let g = Graph::new();
        let mut bits = reward_encode(-5.0, 8).unwrap();
        for b in &mut bits {
            *b = if *b > 0.5 { 40.0 } else { -40.0 };
        }
        let e = expected_reward(g.constant(Tensor::from_vec(&[1, 10], bits))).item();
        assert!((e + 5.0).abs() < 1e-9);
    }

    #[test]
    fn kl_closed_form_cases() {
        let g = Graph::new();
        let st = |mu: f64, s: f64| LatentStats {
            mu: g.constant(Tensor::full(&[1, 1], mu)),
            sigma: g.constant(Tensor::full(&[1, 1], s)),
        };
        assert_eq!(gaussian_kl(&st(0.3, 0.7), &st(0.3, 0.7)).unwrap().item(), 0.0);
        assert!((gaussian_kl(&st(1.0, 1.0), &st(0.0, 1.0)).unwrap().item() - 0.5).abs() < 1e-15);
    }
}
