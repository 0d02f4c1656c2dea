//! Trajectory data model, on-disk dataset layout and training-tuple sampling.
//!
//! A dataset directory holds `manifest.json` plus one `ep_<id>/` directory per
//! episode containing `proprio.f32` (row-major `(T+1) x d_q` little-endian f32)
//! and `view1.u8`..`view3.u8` (row-major `(T+1) x H x W x 3` bytes). Every file
//! is covered by a SHA-256 checksum recorded in the manifest.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::returns::RewardSchedule;

pub const DATASET_VERSION: u32 = 1;
pub const NUM_VIEWS: usize = 3;
const MANIFEST: &str = "manifest.json";
const PROPRIO_FILE: &str = "proprio.f32";

/// Robot internal state: joint angles in radians followed by gripper aperture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Proprioception {
    pub values: Vec<f32>,
}

impl Proprioception {
    pub fn new(values: Vec<f32>) -> Self {
        Self { values }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// 8-bit RGB raster, row-major `H x W x 3`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            data.extend_from_slice(&rgb);
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, row: usize, col: usize, rgb: [u8; 3]) {
        let i = (row * self.width + col) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MultiViewObservation {
    pub views: [RgbImage; NUM_VIEWS],
}

impl MultiViewObservation {
    pub fn new(views: [RgbImage; NUM_VIEWS]) -> Result<Self> {
        let (h, w) = (views[0].height, views[0].width);
        for v in &views {
            if v.height != h || v.width != w || v.data.len() != h * w * 3 {
                return Err(Error::Geometry(
                    "all views must share the same H x W".into(),
                ));
            }
        }
        Ok(Self { views })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.views[0].height, self.views[0].width)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointObservation {
    pub obs: MultiViewObservation,
    pub proprio: Proprioception,
}

/// Kind of scripted failure injected by the simulator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    Drop,
    Misplace,
    Stall,
}

impl FailureKind {
    pub const ALL: [FailureKind; 3] = [FailureKind::Drop, FailureKind::Misplace, FailureKind::Stall];

    pub fn as_str(&self) -> &'static str {
        match self {
            FailureKind::Drop => "drop",
            FailureKind::Misplace => "misplace",
            FailureKind::Stall => "stall",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureMarker {
    pub kind: FailureKind,
    pub step: usize,
}

/// Side-channel labels carried alongside an episode for evaluation only.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMeta {
    #[serde(default)]
    pub object_shape: Option<String>,
    #[serde(default)]
    pub failure: Option<FailureMarker>,
    /// Ground-truth fraction of the script completed at each step.
    #[serde(default)]
    pub progress: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub steps: Vec<JointObservation>,
    pub success: bool,
    pub task_id: String,
    pub meta: EpisodeMeta,
}

impl Episode {
    /// Terminal step index `T`.
    pub fn horizon(&self) -> usize {
        self.steps.len().saturating_sub(1)
    }

    pub fn d_q(&self) -> usize {
        self.steps.first().map_or(0, |s| s.proprio.dim())
    }

    pub fn image_dims(&self) -> (usize, usize) {
        self.steps.first().map_or((0, 0), |s| s.obs.dims())
    }

    pub fn schedule(&self) -> Result<RewardSchedule> {
        RewardSchedule::new(self.horizon(), self.success)
    }

    pub fn return_to_go(&self, t: usize) -> Result<f64> {
        self.schedule()?.return_to_go(t)
    }

    fn validate(&self, id: &str, d_q: usize, dims: (usize, usize)) -> Result<()> {
        let bad = |detail: String| Error::Heterogeneous {
            episode: id.to_string(),
            detail,
        };
        if self.steps.len() < 2 {
            return Err(bad("episode needs at least 2 steps (T >= 1)".into()));
        }
        for (t, s) in self.steps.iter().enumerate() {
            if s.proprio.dim() != d_q {
                return Err(bad(format!(
                    "step {t} has d_q={} but dataset has d_q={d_q}",
                    s.proprio.dim()
                )));
            }
            if s.proprio.values.iter().any(|v| !v.is_finite()) {
                return Err(bad(format!("step {t} has non-finite proprioception")));
            }
            if s.obs.dims() != dims {
                return Err(bad(format!(
                    "step {t} has image dims {:?} but dataset has {:?}",
                    s.obs.dims(),
                    dims
                )));
            }
        }
        Ok(())
    }
}

/// One supervised sample: the current observation, its horizon-`K` future
/// proprioception (clamped to the last step) and the return-to-go.
#[derive(Debug, Clone, Copy)]
pub struct TrainingTuple<'a> {
    pub current: &'a JointObservation,
    pub future_proprio: &'a Proprioception,
    pub future_index: usize,
    pub return_target: f64,
    pub t: usize,
    pub episode_ref: usize,
}

pub fn sample_tuple(
    episode: &Episode,
    episode_ref: usize,
    t: usize,
    horizon: usize,
) -> Result<TrainingTuple<'_>> {
    let last = episode.horizon();
    if t > last {
        return Err(Error::StepOutOfRange { t, max: last });
    }
    if horizon == 0 {
        return Err(Error::invalid("prediction horizon K must be >= 1"));
    }
    let future_index = (t + horizon).min(last);
    Ok(TrainingTuple {
        current: &episode.steps[t],
        future_proprio: &episode.steps[future_index].proprio,
        future_index,
        return_target: episode.return_to_go(t)?,
        t,
        episode_ref,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeEntry {
    pub id: String,
    pub task_id: String,
    #[serde(rename = "T")]
    pub horizon: usize,
    pub success: bool,
    /// file name -> hex SHA-256
    pub checksums: std::collections::BTreeMap<String, String>,
    #[serde(default)]
    pub meta: EpisodeMeta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub d_q: usize,
    #[serde(rename = "H")]
    pub height: usize,
    #[serde(rename = "W")]
    pub width: usize,
    pub episodes: Vec<EpisodeEntry>,
}

impl Manifest {
    pub fn read(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST);
        if !path.is_file() {
            return Err(Error::MissingManifest(path));
        }
        let raw: serde_json::Value = serde_json::from_slice(&fs::read(&path)?)?;
        let version = raw
            .get("version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::invalid("manifest has no version field"))?;
        if version != DATASET_VERSION as u64 {
            return Err(Error::Version {
                found: version as u32,
                expected: DATASET_VERSION,
            });
        }
        Ok(serde_json::from_value(raw)?)
    }

    /// Object-shape tags of every episode, deduplicated and sorted.
    pub fn shape_tags(&self) -> Vec<String> {
        let mut tags: Vec<String> = self
            .episodes
            .iter()
            .filter_map(|e| e.meta.object_shape.clone())
            .collect();
        tags.sort();
        tags.dedup();
        tags
    }

    pub fn summary(&self) -> ManifestSummary {
        ManifestSummary {
            episodes: self.episodes.len(),
            steps: self.episodes.iter().map(|e| e.horizon + 1).sum(),
            successes: self.episodes.iter().filter(|e| e.success).count(),
            d_q: self.d_q,
            height: self.height,
            width: self.width,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ManifestSummary {
    pub episodes: usize,
    pub steps: usize,
    pub successes: usize,
    pub d_q: usize,
    pub height: usize,
    pub width: usize,
}

impl std::fmt::Display for ManifestSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} episodes ({} success / {} failure), {} steps, d_q={}, views {}x{}",
            self.episodes,
            self.successes,
            self.episodes - self.successes,
            self.steps,
            self.d_q,
            self.height,
            self.width
        )
    }
}

fn episode_id(index: usize) -> String {
    format!("{index:05}")
}

fn view_file(k: usize) -> String {
    format!("view{}.u8", k + 1)
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn write_dataset(episodes: &[Episode], root: &Path) -> Result<ManifestSummary> {
    let first = episodes.first().ok_or(Error::EmptyDataset)?;
    let d_q = first.d_q();
    let dims = first.image_dims();
    for (i, ep) in episodes.iter().enumerate() {
        ep.validate(&episode_id(i), d_q, dims)?;
    }

    fs::create_dir_all(root)?;
    let mut entries = Vec::with_capacity(episodes.len());
    for (i, ep) in episodes.iter().enumerate() {
        let id = episode_id(i);
        let dir = root.join(format!("ep_{id}"));
        fs::create_dir_all(&dir)?;
        let mut checksums = std::collections::BTreeMap::new();

        let mut proprio = Vec::with_capacity(ep.steps.len() * d_q * 4);
        for s in &ep.steps {
            for v in &s.proprio.values {
                proprio.extend_from_slice(&v.to_le_bytes());
            }
        }
        checksums.insert(PROPRIO_FILE.to_string(), sha256_hex(&proprio));
        fs::write(dir.join(PROPRIO_FILE), &proprio)?;

        for k in 0..NUM_VIEWS {
            let mut bytes = Vec::with_capacity(ep.steps.len() * dims.0 * dims.1 * 3);
            for s in &ep.steps {
                bytes.extend_from_slice(&s.obs.views[k].data);
            }
            checksums.insert(view_file(k), sha256_hex(&bytes));
            fs::write(dir.join(view_file(k)), &bytes)?;
        }

        entries.push(EpisodeEntry {
            id,
            task_id: ep.task_id.clone(),
            horizon: ep.horizon(),
            success: ep.success,
            checksums,
            meta: ep.meta.clone(),
        });
    }

    let manifest = Manifest {
        version: DATASET_VERSION,
        d_q,
        height: dims.0,
        width: dims.1,
        episodes: entries,
    };
    fs::write(
        root.join(MANIFEST),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(manifest.summary())
}

fn read_checked(dir: &Path, name: &str, expected_len: usize, entry: &EpisodeEntry) -> Result<Vec<u8>> {
    let label = format!("ep_{}/{name}", entry.id);
    let bytes = fs::read(dir.join(name)).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Truncated {
            file: label.clone(),
            expected: expected_len,
            found: 0,
        },
        _ => Error::Io(e),
    })?;
    if bytes.len() != expected_len {
        return Err(Error::Truncated {
            file: label,
            expected: expected_len,
            found: bytes.len(),
        });
    }
    match entry.checksums.get(name) {
        Some(sum) if *sum == sha256_hex(&bytes) => Ok(bytes),
        _ => Err(Error::Checksum { file: label }),
    }
}

pub fn read_dataset(root: &Path) -> Result<Vec<Episode>> {
    let manifest = Manifest::read(root)?;
    let (d_q, h, w) = (manifest.d_q, manifest.height, manifest.width);
    let mut episodes = Vec::with_capacity(manifest.episodes.len());
    for entry in &manifest.episodes {
        let dir = root.join(format!("ep_{}", entry.id));
        let n = entry.horizon + 1;
        let proprio = read_checked(&dir, PROPRIO_FILE, n * d_q * 4, entry)?;
        let mut views: Vec<Vec<u8>> = Vec::with_capacity(NUM_VIEWS);
        for k in 0..NUM_VIEWS {
            views.push(read_checked(&dir, &view_file(k), n * h * w * 3, entry)?);
        }
        let frame = h * w * 3;
        let steps = (0..n)
            .map(|t| {
                let values = proprio[t * d_q * 4..(t + 1) * d_q * 4]
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect();
                let view = |k: usize| RgbImage {
                    height: h,
                    width: w,
                    data: views[k][t * frame..(t + 1) * frame].to_vec(),
                };
                JointObservation {
                    obs: MultiViewObservation {
                        views: [view(0), view(1), view(2)],
                    },
                    proprio: Proprioception::new(values),
                }
            })
            .collect();
        episodes.push(Episode {
            steps,
            success: entry.success,
            task_id: entry.task_id.clone(),
            meta: entry.meta.clone(),
        });
    }
    Ok(episodes)
}
