use super::{ActionRecord, Trajectory};
use crate::error::{Error, Result};

/// Subsample a trajectory by `c`: keep every `c`-th frame (the last of each
/// block), concatenate the block's actions and sum its rewards. The 3-frame
/// context is kept as is.
pub fn jumpy_preprocess(trajectory: &Trajectory, c: usize) -> Result<Trajectory> {
    let t = trajectory.len();
    if c == 0 || !t.is_multiple_of(c) {
        return Err(Error::InvalidInput(format!(
            "jumpy factor {c} does not divide trajectory length {t}"
        )));
    }
    if c == 1 {
        return Ok(trajectory.clone());
    }
    let blocks = t / c;
    let mut observations = Vec::with_capacity(blocks);
    let mut actions = Vec::with_capacity(blocks);
    let mut rewards = Vec::with_capacity(blocks);
    for b in 0..blocks {
        let range = b * c..(b + 1) * c;
        observations.push(trajectory.observations[range.end - 1].clone());
        actions.push(ActionRecord::concat(&trajectory.actions[range.clone()])?);
        rewards.push(trajectory.rewards[range].iter().sum());
    }
    Trajectory::new(trajectory.context.clone(), observations, actions, rewards)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::Observation;

    fn traj(rewards: &[f64], a: usize) -> Trajectory {
        let frames: Vec<Observation> = (0..rewards.len())
            .map(|i| {
                let mut o = Observation::blank(8, 8).unwrap();
                o.fill_rect(0, 0, 1, 1, [i as u8; 3]);
                o
            })
            .collect();
        let actions = (0..rewards.len())
            .map(|i| ActionRecord::one_hot(i % a, a).unwrap())
            .collect();
        Trajectory::new(
            vec![Observation::blank(8, 8).unwrap(); 3],
            frames,
            actions,
            rewards.to_vec(),
        )
        .unwrap()
    }

    #[test]
    fn identity_at_one() {
        let t = traj(&[1.0, 2.0, 3.0], 5);
        assert_eq!(jumpy_preprocess(&t, 1).unwrap(), t);
    }

    #[test]
    fn block_sums() {
        let t = traj(&[1., 0., 2., 1., 0., 0., 0., 3.], 5);
        let j = jumpy_preprocess(&t, 4).unwrap();
        assert_eq!(j.rewards, vec![4.0, 3.0]);
        assert_eq!(j.observations[0], t.observations[3]);
        assert_eq!(j.observations[1], t.observations[7]);
    }

    #[test]
    fn chunked_actions_have_one_hot_blocks() {
        let t = traj(&[0.0; 10], 5);
        let j = jumpy_preprocess(&t, 2).unwrap();
        assert_eq!(j.len(), 5);
        for a in &j.actions {
            assert_eq!(a.len(), 10);
            assert_eq!(a.values().iter().filter(|&&v| v == 1.0).count(), 2);
            assert_eq!(a.blocks(), 2);
            assert!(a.is_valid_one_hot());
        }
    }

    #[test]
    fn non_divisor_rejected() {
        let t = traj(&[0.0; 10], 5);
        assert!(jumpy_preprocess(&t, 3).is_err());
        assert!(jumpy_preprocess(&t, 0).is_err());
    }
}
