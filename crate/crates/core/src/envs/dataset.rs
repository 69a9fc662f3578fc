use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use super::{jumpy_preprocess, ActionRecord, DataPolicy, EnvConfig, Observation, Trajectory};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"IMGTRAJ1";
const MANIFEST: &str = "manifest.toml";
const RECORDS: &str = "trajectories.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub env: EnvConfig,
    pub policy: DataPolicy,
    pub seed: u64,
    /// Modeled steps per trajectory after jumpy preprocessing.
    pub horizon: usize,
    pub jumpy: usize,
    pub count: usize,
    pub num_actions: usize,
    pub height: usize,
    pub width: usize,
}

/// A set of equally shaped trajectories.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub trajectories: Vec<Trajectory>,
}

impl Dataset {
    pub fn new(
        env: EnvConfig,
        policy: DataPolicy,
        seed: u64,
        jumpy: usize,
        trajectories: Vec<Trajectory>,
    ) -> Result<Self> {
        let first = trajectories
            .first()
            .ok_or_else(|| Error::InvalidInput("empty dataset".into()))?;
        let manifest = DatasetManifest {
            num_actions: env.num_actions(),
            height: env.height,
            width: env.width,
            env,
            policy,
            seed,
            horizon: first.len(),
            jumpy,
            count: trajectories.len(),
        };
        let ds = Self { manifest, trajectories };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    fn validate(&self) -> Result<()> {
        let m = &self.manifest;
        for t in &self.trajectories {
            t.validate()?;
            if t.len() != m.horizon {
                return Err(Error::InvalidInput("trajectories of unequal length".into()));
            }
            for o in t.context.iter().chain(&t.observations) {
                if (o.height(), o.width()) != (m.height, m.width) {
                    return Err(Error::Shape("frame size differs from manifest".into()));
                }
            }
            for a in &t.actions {
                if a.num_actions() != m.num_actions || a.blocks() != m.jumpy || !a.is_valid_one_hot() {
                    return Err(Error::InvalidInput("action records do not match manifest".into()));
                }
            }
        }
        Ok(())
    }

    /// Apply jumpy preprocessing to every trajectory.
    pub fn jumpy(&self, c: usize) -> Result<Self> {
        let trajectories = self
            .trajectories
            .iter()
            .map(|t| jumpy_preprocess(t, c))
            .collect::<Result<Vec<_>>>()?;
        let mut manifest = self.manifest.clone();
        manifest.horizon /= c;
        manifest.jumpy *= c;
        Ok(Self { manifest, trajectories })
    }

    /// Split off the last `n` trajectories.
    pub fn split_tail(mut self, n: usize) -> (Self, Self) {
        let n = n.min(self.trajectories.len());
        let tail = self.trajectories.split_off(self.trajectories.len() - n);
        let mut head_m = self.manifest.clone();
        head_m.count = self.trajectories.len();
        let mut tail_m = self.manifest;
        tail_m.count = tail.len();
        (
            Self {
                manifest: head_m,
                trajectories: self.trajectories,
            },
            Self {
                manifest: tail_m,
                trajectories: tail,
            },
        )
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(MANIFEST), toml::to_string_pretty(&self.manifest)?)?;
        let mut w = BufWriter::new(File::create(dir.join(RECORDS))?);
        w.write_all(MAGIC)?;
        for t in &self.trajectories {
            for o in t.context.iter().chain(&t.observations) {
                w.write_all(o.bytes())?;
            }
            for a in &t.actions {
                let idx = a.indices().expect("validated one-hot actions");
                w.write_all(&idx.iter().map(|&i| i as u8).collect::<Vec<_>>())?;
            }
            for &r in &t.rewards {
                w.write_f64::<LittleEndian>(r)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST);
        let text = std::fs::read_to_string(&mpath).map_err(|e| Error::MissingArtifact {
            path: mpath.clone(),
            reason: e.to_string(),
        })?;
        let m: DatasetManifest = toml::from_str(&text)?;
        let mut r = BufReader::new(File::open(dir.join(RECORDS))?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::InvalidInput("trajectory records have a bad header".into()));
        }
        let frame = m.height * m.width * 3;
        let mut trajectories = Vec::with_capacity(m.count);
        for _ in 0..m.count {
            let mut frames = Vec::with_capacity(3 + m.horizon);
            for _ in 0..3 + m.horizon {
                let mut buf = vec![0u8; frame];
                r.read_exact(&mut buf)?;
                frames.push(Observation::new(m.height, m.width, buf)?);
            }
            let observations = frames.split_off(3);
            let mut actions = Vec::with_capacity(m.horizon);
            for _ in 0..m.horizon {
                let mut idx = vec![0u8; m.jumpy];
                r.read_exact(&mut idx)?;
                let parts = idx
                    .iter()
                    .map(|&i| ActionRecord::one_hot(i as usize, m.num_actions))
                    .collect::<Result<Vec<_>>>()?;
                actions.push(ActionRecord::concat(&parts)?);
            }
            let mut rewards = vec![0.0; m.horizon];
            r.read_f64_into::<LittleEndian>(&mut rewards)?;
            trajectories.push(Trajectory::new(frames, observations, actions, rewards)?);
        }
        let ds = Self {
            manifest: m,
            trajectories,
        };
        ds.validate()?;
        Ok(ds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{collect_trajectories, CollectOptions, EnvKind};

    #[test]
    fn roundtrip_with_jumpy_actions() {
        let mut env = EnvConfig::new(EnvKind::MiniPacman, 1);
        env.height = 16;
        env.width = 16;
        let r = collect_trajectories(&env, DataPolicy::pill_seeker(), &CollectOptions::new(4, 3, 5)).unwrap();
        let ds = Dataset::new(env, DataPolicy::pill_seeker(), 5, 1, r.trajectories)
            .unwrap()
            .jumpy(2)
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back.manifest, ds.manifest);
        assert_eq!(back.trajectories, ds.trajectories);
        assert_eq!(back.manifest.jumpy, 2);
    }

    #[test]
    fn missing_manifest_reported() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(Dataset::load(dir.path()), Err(Error::MissingArtifact { .. })));
    }
}
