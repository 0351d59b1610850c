//! Label-balanced window datasets.
//!
//! On disk a dataset is a directory with `manifest.json` and `windows.xld`. The data
//! file is columnar:
//!
//! ```text
//! magic "XLD1", u32 version, u64 count n
//! f64[n]          t (window end time, s)
//! f64[n × 4]      frame timestamps
//! f64[n × 196]    window values
//! u8[n × 28]      slot mask (frame-major, 1 = real vehicle)
//! u8[n]           label (0 left, 1 keep, 2 right)
//! u8[n × 16]      query uuid
//! ```
//!
//! Little-endian throughout.

use std::collections::VecDeque;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use uuid::Uuid;
use xlane_core::train::Sample;
use xlane_core::window::{ObservationWindow, FRAMES, SLOTS, WINDOW_LEN};
use xlane_core::{Class, Window};

use crate::config::SimConfig;
use crate::error::{Result, TwinError};
use crate::frame::Frame;
use crate::observe::{build_window, label_window};
use crate::sim::Simulator;

pub const DATA_MAGIC: &[u8; 4] = b"XLD1";
pub const DATA_VERSION: u32 = 1;
pub const DATA_FILE: &str = "windows.xld";
pub const MANIFEST_FILE: &str = "manifest.json";

const WARM_UP_S: f64 = 60.0;
const KEEP_ACCEPT: f64 = 0.05;
const CANDIDATE_FACTOR: usize = 2;
/// 4 frames of history through the frame 2.5 s ahead.
const BUFFER: usize = FRAMES + 5;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledWindow {
    pub window: Window,
    pub label: Class,
    pub query: Uuid,
    pub t: f64,
}

impl LabeledWindow {
    pub fn one_hot(&self) -> [f64; 3] {
        let mut v = [0.0; 3];
        v[self.label.index()] = 1.0;
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub data_file: String,
    pub count: usize,
    pub n_per_class: usize,
    /// Indexed by class: left, keep, right.
    pub class_counts: [usize; 3],
    pub seed: u64,
    pub simulated_seconds: f64,
    pub splits: Splits,
    pub sim: SimConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub windows: Vec<LabeledWindow>,
}

impl Dataset {
    pub fn indices(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.manifest.splits.train,
            Split::Val => &self.manifest.splits.val,
            Split::Test => &self.manifest.splits.test,
        }
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &LabeledWindow> {
        self.indices(split).iter().map(|&i| &self.windows[i])
    }

    pub fn samples(&self, split: Split) -> Vec<Sample<f64>> {
        self.split(split).map(|w| (w.window.clone(), w.label)).collect()
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut out = BufWriter::new(std::fs::File::create(dir.join(&self.manifest.data_file))?);
        write_columns(&self.windows, &mut out)?;
        out.flush()?;
        std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(&self.manifest)?)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest: Manifest = serde_json::from_slice(&std::fs::read(dir.join(MANIFEST_FILE))?)?;
        if manifest.version != DATA_VERSION {
            return Err(TwinError::Format(format!("unsupported manifest version {}", manifest.version)));
        }
        let mut input = BufReader::new(std::fs::File::open(dir.join(&manifest.data_file))?);
        let windows = read_columns(&mut input)?;
        if windows.len() != manifest.count {
            return Err(TwinError::Format(format!(
                "manifest lists {} windows, data file has {}",
                manifest.count,
                windows.len()
            )));
        }
        let s = &manifest.splits;
        if s.train.iter().chain(&s.val).chain(&s.test).any(|&i| i >= windows.len()) {
            return Err(TwinError::Format("split index out of range".into()));
        }
        Ok(Self { manifest, windows })
    }
}

pub fn write_columns<W: Write>(windows: &[LabeledWindow], out: &mut W) -> Result<()> {
    out.write_all(DATA_MAGIC)?;
    out.write_u32::<LittleEndian>(DATA_VERSION)?;
    out.write_u64::<LittleEndian>(windows.len() as u64)?;
    for w in windows {
        out.write_f64::<LittleEndian>(w.t)?;
    }
    for w in windows {
        for &ts in w.window.timestamps() {
            out.write_f64::<LittleEndian>(ts)?;
        }
    }
    for w in windows {
        for &v in w.window.values() {
            out.write_f64::<LittleEndian>(v)?;
        }
    }
    for w in windows {
        for row in w.window.mask() {
            for &m in row {
                out.write_u8(m as u8)?;
            }
        }
    }
    for w in windows {
        out.write_u8(w.label.index() as u8)?;
    }
    for w in windows {
        out.write_all(w.query.as_bytes())?;
    }
    Ok(())
}

/// Reads the columnar file and re-validates every window.
pub fn read_columns<R: Read>(input: &mut R) -> Result<Vec<LabeledWindow>> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != DATA_MAGIC {
        return Err(TwinError::Format(format!("bad magic {magic:?}")));
    }
    let version = input.read_u32::<LittleEndian>()?;
    if version != DATA_VERSION {
        return Err(TwinError::Format(format!("unsupported data version {version}")));
    }
    let n = input.read_u64::<LittleEndian>()? as usize;
    if n > 1 << 26 {
        return Err(TwinError::Format(format!("implausible window count {n}")));
    }
    let mut f64s = |len: usize| -> Result<Vec<f64>> {
        let mut v = vec![0.0; len];
        input.read_f64_into::<LittleEndian>(&mut v)?;
        Ok(v)
    };
    let t = f64s(n)?;
    let ts = f64s(n * FRAMES)?;
    let values = f64s(n * WINDOW_LEN)?;
    let mut mask = vec![0u8; n * FRAMES * SLOTS];
    input.read_exact(&mut mask)?;
    let mut labels = vec![0u8; n];
    input.read_exact(&mut labels)?;
    let mut uuids = vec![0u8; n * 16];
    input.read_exact(&mut uuids)?;

    (0..n)
        .map(|i| {
            let mut m = [[false; SLOTS]; FRAMES];
            for k in 0..FRAMES {
                for s in 0..SLOTS {
                    m[k][s] = mask[(i * FRAMES + k) * SLOTS + s] != 0;
                }
            }
            let stamps: [f64; FRAMES] = ts[i * FRAMES..(i + 1) * FRAMES].try_into().expect("slice length");
            let window =
                ObservationWindow::new(stamps, values[i * WINDOW_LEN..(i + 1) * WINDOW_LEN].to_vec(), m)?;
            let label = Class::from_index(labels[i] as usize)
                .ok_or_else(|| TwinError::Format(format!("window {i}: bad label {}", labels[i])))?;
            let query = Uuid::from_slice(&uuids[i * 16..(i + 1) * 16]).expect("16 bytes");
            Ok(LabeledWindow {
                window,
                label,
                query,
                t: t[i],
            })
        })
        .collect()
}

/// Stratified 70/15/15 split, shuffled with `rng`.
pub fn stratified_split(labels: &[Class], rng: &mut impl Rng) -> Splits {
    let mut splits = Splits::default();
    for class in Class::ALL {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(rng);
        let n_train = (idx.len() as f64 * 0.70).round() as usize;
        let n_val = (idx.len() as f64 * 0.15).round() as usize;
        splits.train.extend_from_slice(&idx[..n_train]);
        splits.val.extend_from_slice(&idx[n_train..(n_train + n_val).min(idx.len())]);
        splits.test.extend_from_slice(&idx[(n_train + n_val).min(idx.len())..]);
    }
    splits.train.sort_unstable();
    splits.val.sort_unstable();
    splits.test.sort_unstable();
    splits
}

/// Simulate until every class has enough candidate windows, then draw exactly
/// `n_per_class` of each.
pub fn generate_dataset(cfg: &SimConfig, n_per_class: usize) -> Result<Dataset> {
    if n_per_class == 0 {
        return Err(TwinError::Config("n_per_class must be positive".into()));
    }
    let mut sim = Simulator::new(cfg.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_da7a);
    sim.warm_up(WARM_UP_S);

    let want = n_per_class * CANDIDATE_FACTOR;
    let mut candidates: [Vec<LabeledWindow>; 3] = Default::default();
    let mut buffer: VecDeque<Frame> = VecDeque::with_capacity(BUFFER);
    // rough budget: one lane change per vehicle lifetime gives ~5 windows per class
    let mut budget = (want as f64 * 4.0 / cfg.spawn_rate.max(0.05) / (1.0 + cfg.lane_change_propensity * 20.0))
        .max(300.0);
    let hard_limit = budget * 50.0;
    let start = sim.time();

    while candidates.iter().any(|c| c.len() < want) {
        if sim.time() - start > budget {
            if budget >= hard_limit {
                return Err(TwinError::Config(format!(
                    "only {:?} candidates per class after {:.0}s of simulation",
                    candidates.iter().map(Vec::len).collect::<Vec<_>>(),
                    sim.time() - start
                )));
            }
            log::warn!(
                "too few lane changes after {:.0}s (have {:?}), extending simulation",
                sim.time() - start,
                candidates.iter().map(Vec::len).collect::<Vec<_>>()
            );
            budget = (budget * 2.0).min(hard_limit);
        }
        if buffer.len() == BUFFER {
            buffer.pop_front();
        }
        buffer.push_back(sim.next_frame());
        if buffer.len() < BUFFER {
            continue;
        }
        let now = &buffer[FRAMES - 1];
        let t = now.timestamp;
        for v in &now.vehicles {
            let Ok(label) = label_window(buffer.iter().skip(FRAMES - 1), v.raw_id, t) else {
                continue;
            };
            let bucket = &mut candidates[label.index()];
            if bucket.len() >= want || (label == Class::Keep && !rng.gen_bool(KEEP_ACCEPT)) {
                continue;
            }
            let Ok(built) = build_window(buffer.iter().take(FRAMES), v.raw_id, t) else {
                continue;
            };
            bucket.push(LabeledWindow {
                window: built.window,
                label,
                query: uuid::Builder::from_random_bytes(rng.gen()).into_uuid(),
                t,
            });
        }
    }

    let mut windows = Vec::with_capacity(3 * n_per_class);
    for bucket in &mut candidates {
        bucket.shuffle(&mut rng);
        windows.extend(bucket.drain(..n_per_class));
    }
    windows.shuffle(&mut rng);
    let labels: Vec<Class> = windows.iter().map(|w| w.label).collect();
    let splits = stratified_split(&labels, &mut rng);
    Ok(Dataset {
        manifest: Manifest {
            format: "xlane-dataset".into(),
            version: DATA_VERSION,
            data_file: DATA_FILE.into(),
            count: windows.len(),
            n_per_class,
            class_counts: [n_per_class; 3],
            seed: cfg.seed,
            simulated_seconds: sim.time(),
            splits,
            sim: cfg.clone(),
        },
        windows,
    })
}
