//! Expert demonstration datasets.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;

use super::{
    reset, rollout_expert, TaskKind, TaskSpec, ACTION_DIM, IMG_CHANNELS, IMG_LEN, IMG_SIDE,
    PROPRIO_DIM,
};
use crate::error::{Error, Result};
use crate::seed::{self, Stream};
use crate::store::{ArrayData, Container, ContainerWriter, NamedArray, FORMAT_VERSION};

/// Length of the ground-truth summary row (see [`super::WorldState::summary`]).
pub const GT_DIM: usize = 20;

const BLOCK: usize = 128;

/// One trajectory. `gt` is analysis-only and never fed to a model.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub seed: u64,
    /// `T * 32 * 32 * 3` bytes.
    pub images: Vec<u8>,
    pub proprio: Vec<[f32; PROPRIO_DIM]>,
    pub actions: Vec<[f32; ACTION_DIM]>,
    pub tokens: Vec<i32>,
    pub success: bool,
    pub gt: Vec<[f32; GT_DIM]>,
}

impl EpisodeRecord {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn image(&self, t: usize) -> &[u8] {
        &self.images[t * IMG_LEN..(t + 1) * IMG_LEN]
    }

    fn check(&self) -> Result<()> {
        let t = self.actions.len();
        if self.images.len() != t * IMG_LEN || self.proprio.len() != t || self.gt.len() != t {
            return Err(Error::Shape(format!(
                "episode arrays disagree on length (actions {t}, proprio {}, gt {}, images {} bytes)",
                self.proprio.len(),
                self.gt.len(),
                self.images.len()
            )));
        }
        Ok(())
    }

    pub fn to_arrays(&self) -> Result<Vec<(&'static str, NamedArray)>> {
        self.check()?;
        let t = self.len();
        Ok(vec![
            (
                "obs",
                NamedArray::new(
                    vec![t, IMG_SIDE, IMG_SIDE, IMG_CHANNELS],
                    ArrayData::U8(self.images.clone()),
                )?,
            ),
            (
                "proprio",
                NamedArray::f32(vec![t, PROPRIO_DIM], self.proprio.concat())?,
            ),
            (
                "actions",
                NamedArray::f32(vec![t, ACTION_DIM], self.actions.concat())?,
            ),
            (
                "tokens",
                NamedArray::new(vec![self.tokens.len()], ArrayData::I32(self.tokens.clone()))?,
            ),
            (
                "success",
                NamedArray::new(vec![1], ArrayData::U8(vec![u8::from(self.success)]))?,
            ),
            ("gt", NamedArray::f32(vec![t, GT_DIM], self.gt.concat())?),
        ])
    }

    pub fn from_container(c: &Container, prefix: &str, seed: u64) -> Result<Self> {
        let get = |n: &str| c.array(&format!("{prefix}/{n}"));
        let bad = |n: &str| Error::Corrupt {
            path: prefix.into(),
            reason: format!("array {n} has the wrong dtype"),
        };
        let rows = |n: &str, w: usize| -> Result<Vec<f32>> {
            let a = get(n)?;
            if a.shape.len() != 2 || a.shape[1] != w {
                return Err(Error::Shape(format!("{prefix}/{n}: shape {:?}", a.shape)));
            }
            Ok(a.as_f32().ok_or_else(|| bad(n))?.to_vec())
        };
        let proprio = rows("proprio", PROPRIO_DIM)?
            .chunks_exact(PROPRIO_DIM)
            .map(|c| c.try_into().unwrap())
            .collect();
        let actions = rows("actions", ACTION_DIM)?
            .chunks_exact(ACTION_DIM)
            .map(|c| c.try_into().unwrap())
            .collect();
        let gt = rows("gt", GT_DIM)?
            .chunks_exact(GT_DIM)
            .map(|c| c.try_into().unwrap())
            .collect();
        let rec = Self {
            seed,
            images: get("obs")?.as_u8().ok_or_else(|| bad("obs"))?.to_vec(),
            proprio,
            actions,
            tokens: get("tokens")?.as_i32().ok_or_else(|| bad("tokens"))?.to_vec(),
            success: get("success")?.as_u8().ok_or_else(|| bad("success"))?[0] != 0,
            gt,
        };
        rec.check()?;
        Ok(rec)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub task: TaskKind,
    pub aliased: bool,
    pub distractors: usize,
    pub horizon: usize,
    pub settle_steps: usize,
    /// 1 = sequential single-worker mode.
    pub workers: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            task: TaskKind::PpN,
            aliased: true,
            distractors: 0,
            horizon: 200,
            settle_steps: 12,
            workers: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub episodes: usize,
    pub master_seed: u64,
    pub seeds: Vec<u64>,
    pub task: TaskKind,
    pub aliased: bool,
    pub success_count: usize,
    pub format_version: u32,
}

impl DatasetManifest {
    fn to_meta(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("episodes".into(), self.episodes.to_string());
        m.insert("master_seed".into(), self.master_seed.to_string());
        m.insert(
            "seeds".into(),
            self.seeds.iter().map(u64::to_string).collect::<Vec<_>>().join(","),
        );
        m.insert("task".into(), self.task.to_string());
        m.insert("aliased".into(), self.aliased.to_string());
        m.insert("success_count".into(), self.success_count.to_string());
        m.insert("format_version".into(), self.format_version.to_string());
        m
    }

    fn from_meta(c: &Container) -> Result<Self> {
        let num = |k: &str| -> Result<u64> {
            c.meta(k)?
                .parse()
                .map_err(|_| Error::Config(format!("manifest key {k} is not a number")))
        };
        let seeds_txt = c.meta("seeds")?;
        let seeds = if seeds_txt.is_empty() {
            vec![]
        } else {
            seeds_txt
                .split(',')
                .map(|s| s.parse().map_err(|_| Error::Config("bad seed list".into())))
                .collect::<Result<Vec<u64>>>()?
        };
        Ok(Self {
            episodes: num("episodes")? as usize,
            master_seed: num("master_seed")?,
            seeds,
            task: c.meta("task")?.parse()?,
            aliased: c.meta("aliased")? == "true",
            success_count: num("success_count")? as usize,
            format_version: num("format_version")? as u32,
        })
    }
}

/// Task and scene seed of dataset episode `index`.
pub fn episode_task(cfg: &DatasetConfig, master_seed: u64, index: u64) -> Result<(TaskSpec, u64)> {
    let ep_seed = seed::derive(master_seed, Stream::DatasetEpisode, index);
    let mut rng = seed::rng(ep_seed, Stream::TaskLayout, 0);
    let task = TaskSpec::generate(
        cfg.task,
        cfg.aliased,
        cfg.distractors,
        cfg.horizon,
        cfg.settle_steps,
        &mut rng,
    )?;
    Ok((task, ep_seed))
}

/// Run one expert episode on `task` from scene seed `ep_seed`.
pub fn record_expert_episode(task: &TaskSpec, ep_seed: u64) -> Result<EpisodeRecord> {
    let (s0, o0) = reset(task, ep_seed)?;
    let mut rng = seed::rng(ep_seed, Stream::ExpertNoise, 0);
    let (states, observations, actions, last) = rollout_expert(s0, o0, &mut rng)?;
    Ok(EpisodeRecord {
        seed: ep_seed,
        images: observations.iter().flat_map(|o| o.image.iter().copied()).collect(),
        proprio: observations.iter().map(|o| o.proprio).collect(),
        actions: actions.iter().map(|a| a.to_array()).collect(),
        tokens: task.instruction(),
        success: last.success(),
        gt: states.iter().map(|s| s.summary()).collect(),
    })
}

fn make_episode(cfg: &DatasetConfig, master_seed: u64, index: usize) -> Result<EpisodeRecord> {
    let (task, ep_seed) = episode_task(cfg, master_seed, index as u64)?;
    record_expert_episode(&task, ep_seed)
}

/// Generate `n_episodes` expert rollouts into a dataset file at `path`.
/// The output is byte-identical for any worker count; the temporary file is
/// removed if anything fails.
pub fn generate_dataset(
    cfg: &DatasetConfig,
    n_episodes: usize,
    master_seed: u64,
    path: &Path,
) -> Result<DatasetManifest> {
    if n_episodes == 0 {
        return Err(Error::Precondition("n_episodes must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let mut writer = ContainerWriter::create(path, "dataset")?;
    let mut seeds = Vec::with_capacity(n_episodes);
    let mut success_count = 0;
    for start in (0..n_episodes).step_by(BLOCK) {
        let end = (start + BLOCK).min(n_episodes);
        let block: Vec<EpisodeRecord> = if cfg.workers <= 1 {
            (start..end)
                .map(|i| make_episode(cfg, master_seed, i))
                .collect::<Result<_>>()?
        } else {
            pool.install(|| {
                (start..end)
                    .into_par_iter()
                    .map(|i| make_episode(cfg, master_seed, i))
                    .collect::<Result<_>>()
            })?
        };
        for (i, rec) in (start..end).zip(block) {
            for (name, arr) in rec.to_arrays()? {
                writer.push(&format!("ep{i:06}/{name}"), &arr)?;
            }
            seeds.push(rec.seed);
            success_count += usize::from(rec.success);
        }
    }
    let manifest = DatasetManifest {
        episodes: n_episodes,
        master_seed,
        seeds,
        task: cfg.task,
        aliased: cfg.aliased,
        success_count,
        format_version: FORMAT_VERSION,
    };
    writer.finish(&manifest.to_meta())?;
    Ok(manifest)
}

pub fn load_dataset(path: &Path) -> Result<(DatasetManifest, Vec<EpisodeRecord>)> {
    let c = Container::load(path)?;
    if c.kind != "dataset" {
        return Err(Error::Config(format!("{path:?} is a {} file, not a dataset", c.kind)));
    }
    let manifest = DatasetManifest::from_meta(&c)?;
    if manifest.seeds.len() != manifest.episodes {
        return Err(Error::Corrupt {
            path: path.to_path_buf(),
            reason: "seed list does not match the episode count".into(),
        });
    }
    let episodes = (0..manifest.episodes)
        .map(|i| EpisodeRecord::from_container(&c, &format!("ep{i:06}"), manifest.seeds[i]))
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, episodes))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(task: TaskKind, aliased: bool) -> DatasetConfig {
        DatasetConfig {
            task,
            aliased,
            ..Default::default()
        }
    }

    #[test]
    fn generation_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
        let mut cf = cfg(TaskKind::PpN, true);
        generate_dataset(&cf, 10, 7, &a).unwrap();
        generate_dataset(&cf, 10, 7, &b).unwrap();
        cf.workers = 3;
        generate_dataset(&cf, 10, 7, &c).unwrap();
        let bytes = std::fs::read(&a).unwrap();
        assert_eq!(bytes, std::fs::read(&b).unwrap());
        assert_eq!(bytes, std::fs::read(&c).unwrap());
    }

    #[test]
    fn round_trip_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.bin");
        let m = generate_dataset(&cfg(TaskKind::Pp1, false), 100, 1, &p).unwrap();
        assert!((95..=100).contains(&m.success_count), "{}", m.success_count);
        let (m2, eps) = load_dataset(&p).unwrap();
        assert_eq!(m, m2);
        assert_eq!(eps.len(), 100);
        let (task, s) = episode_task(&cfg(TaskKind::Pp1, false), 1, 3).unwrap();
        assert_eq!(eps[3], record_expert_episode(&task, s).unwrap());
    }

    #[test]
    fn aliased_multi_object_records_contain_occlusion_events() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.bin");
        generate_dataset(&cfg(TaskKind::PpN, true), 8, 3, &p).unwrap();
        let (_, eps) = load_dataset(&p).unwrap();
        for ep in eps {
            // gt column 10 is "placed" for object 0
            assert!(ep.gt.first().unwrap()[10] == 0.0);
            assert!(ep.gt.iter().any(|g| g[10] == 1.0), "no placement recorded");
            assert!(ep.success);
        }
    }

    #[test]
    fn zero_episodes_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(generate_dataset(&cfg(TaskKind::Pp1, false), 0, 0, &dir.path().join("x")).is_err());
    }
}
