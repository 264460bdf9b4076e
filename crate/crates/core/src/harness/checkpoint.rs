//! Stage checkpoints: parameters, training curves, RNG state and the hashes
//! that tie later stages to the ones they were built on.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use candle_core::DType;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::policy::ActionStats;
use crate::store::{Container, NamedArray};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Warmstart,
    Belief,
    Policy,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Warmstart, Stage::Belief, Stage::Policy];

    pub fn name(&self) -> &'static str {
        match self {
            Stage::Warmstart => "warmstart",
            Stage::Belief => "belief",
            Stage::Policy => "policy",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage {s:?} (warmstart, belief, policy)")))
    }
}

/// Snapshot of a ChaCha8 generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        use rand::SeedableRng;
        let mut r = ChaCha8Rng::from_seed(self.seed);
        r.set_stream(self.stream);
        r.set_word_pos(self.word_pos);
        r
    }

    fn encode(&self) -> String {
        let seed: String = self.seed.iter().map(|b| format!("{b:02x}")).collect();
        format!("{seed}:{}:{}", self.stream, self.word_pos)
    }

    fn decode(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("malformed RNG state {s:?}"));
        let mut parts = s.split(':');
        let hex = parts.next().ok_or_else(bad)?;
        if hex.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&hex[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let stream = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let word_pos = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        Ok(Self { seed, stream, word_pos })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    /// Hash of the architecture keys of the run configuration.
    pub model_hash: String,
    /// Hash of the full run configuration.
    pub config_hash: String,
    pub ablation: String,
    pub params: BTreeMap<String, NamedArray>,
    /// EMA target copy (warm-start stage only).
    pub ema: BTreeMap<String, NamedArray>,
    pub curves: BTreeMap<String, Vec<f32>>,
    pub action_stats: Option<ActionStats>,
    pub rng: RngState,
    /// Stage name → file digest of the checkpoints this one was built from.
    pub parents: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn store(&self, dtype: DType) -> Result<ParamStore> {
        ParamStore::from_arrays(&self.params, dtype)
    }

    pub fn ema_store(&self, dtype: DType) -> Result<ParamStore> {
        ParamStore::from_arrays(&self.ema, dtype)
    }

    pub fn curve(&self, name: &str) -> Result<&[f32]> {
        self.curves
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Dependency(format!("{} checkpoint has no {name:?} curve", self.stage)))
    }

    fn to_container(&self) -> Result<Container> {
        let mut c = Container::new("checkpoint");
        c.meta.insert("stage".into(), self.stage.to_string());
        c.meta.insert("model_hash".into(), self.model_hash.clone());
        c.meta.insert("config_hash".into(), self.config_hash.clone());
        c.meta.insert("ablation".into(), self.ablation.clone());
        c.meta.insert("rng".into(), self.rng.encode());
        for (k, v) in &self.parents {
            c.meta.insert(format!("parent.{k}"), v.clone());
        }
        for (k, a) in &self.params {
            c.insert(format!("param/{k}"), a.clone());
        }
        for (k, a) in &self.ema {
            c.insert(format!("ema/{k}"), a.clone());
        }
        for (k, v) in &self.curves {
            c.insert(format!("curve/{k}"), NamedArray::f32(vec![v.len()], v.clone())?);
        }
        if let Some(s) = &self.action_stats {
            c.insert("stats/action", NamedArray::f32(vec![2, 3], s.to_vec())?);
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Dependency(format!("checkpoint {path:?} not found")));
        }
        let c = Container::load(path)?;
        if c.kind != "checkpoint" {
            return Err(Error::Config(format!("{path:?} is a {} file, not a checkpoint", c.kind)));
        }
        let mut params = BTreeMap::new();
        let mut ema = BTreeMap::new();
        let mut curves = BTreeMap::new();
        let mut action_stats = None;
        for (name, arr) in c.arrays {
            if let Some(k) = name.strip_prefix("param/") {
                params.insert(k.to_string(), arr);
            } else if let Some(k) = name.strip_prefix("ema/") {
                ema.insert(k.to_string(), arr);
            } else if let Some(k) = name.strip_prefix("curve/") {
                let v = arr
                    .as_f32()
                    .ok_or_else(|| Error::Config(format!("curve {k} is not f32")))?;
                curves.insert(k.to_string(), v.to_vec());
            } else if name == "stats/action" {
                let v = arr.as_f32().ok_or_else(|| Error::Config("action stats not f32".into()))?;
                action_stats = Some(ActionStats::from_slice(v)?);
            }
        }
        let parents = c
            .meta
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("parent.").map(|s| (s.to_string(), v.clone())))
            .collect();
        let get = |k: &str| c.meta.get(k).cloned().ok_or_else(|| Error::Config(format!("checkpoint lacks {k}")));
        Ok(Self {
            stage: get("stage")?.parse()?,
            model_hash: get("model_hash")?,
            config_hash: get("config_hash")?,
            ablation: get("ablation")?,
            params,
            ema,
            curves,
            action_stats,
            rng: RngState::decode(&get("rng")?)?,
            parents,
        })
    }

    /// Load and check stage and architecture hash.
    pub fn load_expect(path: &Path, stage: Stage, model_hash: &str) -> Result<Self> {
        let ck = Self::load(path)?;
        if ck.stage != stage {
            return Err(Error::Config(format!(
                "{path:?} holds a {} checkpoint, expected {stage}",
                ck.stage
            )));
        }
        if ck.model_hash != model_hash {
            return Err(Error::ConfigHashMismatch {
                what: format!("{stage} checkpoint {path:?}"),
                expected: model_hash.to_string(),
                found: ck.model_hash,
            });
        }
        Ok(ck)
    }
}

/// SHA-256 of a file's bytes.
pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn sample() -> Checkpoint {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let _: u64 = r.random();
        let mut params = BTreeMap::new();
        params.insert(
            "a.w".to_string(),
            NamedArray::f32(vec![2, 3], (0..6).map(|_| r.random::<f32>() - 0.5).collect()).unwrap(),
        );
        params.insert("a.b".to_string(), NamedArray::f32(vec![1], vec![f32::MIN_POSITIVE]).unwrap());
        let mut curves = BTreeMap::new();
        curves.insert("loss".to_string(), vec![3.0, 2.0, 1.5]);
        let mut parents = BTreeMap::new();
        parents.insert("warmstart".to_string(), "abc".to_string());
        Checkpoint {
            stage: Stage::Belief,
            model_hash: "m".into(),
            config_hash: "c".into(),
            ablation: "ttt".into(),
            params,
            ema: BTreeMap::new(),
            curves,
            action_stats: Some(ActionStats::identity()),
            rng: RngState::capture(&r),
            parents,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ckpt");
        let ck = sample();
        ck.save(&p).unwrap();
        let back = Checkpoint::load(&p).unwrap();
        assert_eq!(back, ck);
        let mut a = ck.rng.restore();
        let mut b = back.rng.restore();
        assert_eq!(a.random::<u64>(), b.random::<u64>());
    }

    #[test]
    fn guards() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ckpt");
        sample().save(&p).unwrap();
        assert!(matches!(
            Checkpoint::load_expect(&p, Stage::Belief, "other"),
            Err(Error::ConfigHashMismatch { .. })
        ));
        assert!(Checkpoint::load_expect(&p, Stage::Policy, "m").is_err());
        assert!(Checkpoint::load_expect(&p, Stage::Belief, "m").is_ok());
        assert!(matches!(
            Checkpoint::load(&dir.path().join("missing")),
            Err(Error::Dependency(_))
        ));
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(Checkpoint::load(&p), Err(Error::Corrupt { .. })));
    }
}
