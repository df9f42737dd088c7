//! Dataset directories: episode files, a text index and a JSON manifest.
//!
//! Index lines: `<file> <train|test> <episode_id> <world_seed> <sky_id>`.
//! Lines starting with `#` are comments.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{generate_episode, make_split, read_episode, write_episode, Episode, EpisodeMeta, PolicyConfig};
use crate::error::{Result, XvwmError};
use crate::sim::{make_world, RenderConfig, ViewId, World, WorldConfig, NUM_SKIES};

pub const INDEX_FILE: &str = "index.txt";
pub const MANIFEST_FILE: &str = "manifest.json";
const INDEX_HEADER: &str = "# xvwm dataset index v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub episodes: usize,
    pub duration_s: f64,
    pub fps: f64,
    pub world_seed: u64,
    pub views: Vec<ViewId>,
    pub split_ratio: f64,
    pub policy: PolicyConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            episodes: 240,
            duration_s: 20.0,
            fps: 5.0,
            world_seed: 0,
            views: ViewId::ALL.to_vec(),
            split_ratio: 0.9,
            policy: PolicyConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u16,
    pub seed: u64,
    pub world: WorldConfig,
    pub render: RenderConfig,
    pub dataset: DatasetConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn tag(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexEntry {
    pub file: String,
    pub split: Split,
    pub meta: EpisodeMeta,
}

fn mix(seed: u64, i: u64) -> u64 {
    // splitmix64 over a combined key
    let mut z = seed ^ i.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generate every episode, the split and the index under `dir`.
pub fn generate_dataset(
    dir: &Path,
    world_cfg: &WorldConfig,
    rcfg: &RenderConfig,
    cfg: &DatasetConfig,
    seed: u64,
) -> Result<Manifest> {
    rcfg.validate()?;
    let base = make_world(cfg.world_seed, world_cfg)?;
    if cfg.views.is_empty() {
        return Err(XvwmError::Config("dataset.views is empty".into()));
    }
    fs::create_dir_all(dir)?;
    let ids: Vec<u64> = (0..cfg.episodes as u64).collect();
    let split = make_split(&ids, cfg.split_ratio, seed)?;

    let mut index = String::new();
    writeln!(index, "{INDEX_HEADER}").unwrap();
    for &id in &ids {
        let ep_seed = mix(seed, id);
        let sky = ChaCha8Rng::seed_from_u64(ep_seed).gen_range(0..NUM_SKIES as u8);
        let world = base.with_sky(sky);
        let mut ep = generate_episode(&world, &cfg.policy, rcfg, &cfg.views, cfg.duration_s, cfg.fps, ep_seed)?;
        ep.id = id;
        let file = format!("ep_{id:05}.xvwm");
        write_episode(&ep, &dir.join(&file))?;
        let tag = if split.test.binary_search(&id).is_ok() {
            Split::Test
        } else {
            Split::Train
        };
        writeln!(index, "{file} {} {id} {} {sky}", tag.tag(), cfg.world_seed).unwrap();
    }
    fs::write(dir.join(INDEX_FILE), index)?;
    let manifest = Manifest {
        format_version: 1,
        seed,
        world: world_cfg.clone(),
        render: rcfg.clone(),
        dataset: cfg.clone(),
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(dir.join(MANIFEST_FILE), json + "\n")?;
    Ok(manifest)
}

pub fn parse_index(text: &str) -> Result<Vec<IndexEntry>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |msg: &str| XvwmError::format("index", format!("line {}: {msg}", lineno + 1));
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 5 {
            return Err(bad("expected 5 fields"));
        }
        let split = match parts[1] {
            "train" => Split::Train,
            "test" => Split::Test,
            _ => return Err(bad("split tag must be train or test")),
        };
        let id = parts[2].parse().map_err(|_| bad("bad episode id"))?;
        let world_seed = parts[3].parse().map_err(|_| bad("bad world seed"))?;
        let sky_id: u8 = parts[4].parse().map_err(|_| bad("bad sky id"))?;
        if parts[0].contains('/') || parts[0].contains("..") {
            return Err(bad("file must be a plain name"));
        }
        out.push(IndexEntry {
            file: parts[0].to_string(),
            split,
            meta: EpisodeMeta {
                id,
                world_seed,
                sky_id,
            },
        });
    }
    Ok(out)
}

/// An opened dataset directory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub entries: Vec<IndexEntry>,
    world: World,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&manifest_path).map_err(|e| {
            XvwmError::Startup(format!("cannot read {}: {e}", manifest_path.display()))
        })?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| XvwmError::format("manifest", e.to_string()))?;
        let index_path = dir.join(INDEX_FILE);
        let index = fs::read_to_string(&index_path).map_err(|e| {
            XvwmError::Startup(format!("cannot read {}: {e}", index_path.display()))
        })?;
        let entries = parse_index(&index)?;
        let world = make_world(manifest.dataset.world_seed, &manifest.world)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
            entries,
            world,
        })
    }

    /// The arena with the sky of `sky_id`.
    pub fn world(&self, sky_id: u8) -> World {
        self.world.with_sky(sky_id)
    }

    pub fn render_config(&self) -> &RenderConfig {
        &self.manifest.render
    }

    pub fn entries(&self, split: Split) -> impl Iterator<Item = &IndexEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Load one episode, optionally keeping only `views`.
    pub fn load(&self, entry: &IndexEntry, views: Option<&[ViewId]>) -> Result<Episode> {
        let mut ep = read_episode(&self.dir.join(&entry.file), entry.meta)?;
        if let Some(v) = views {
            ep.retain_views(v);
        }
        Ok(ep)
    }

    pub fn load_split(&self, split: Split, views: Option<&[ViewId]>) -> Result<Vec<Episode>> {
        self.entries(split).map(|e| self.load(e, views)).collect()
    }
}
