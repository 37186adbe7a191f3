use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::body::{sample_body, BodySample};
use super::hand::{sample_hand, HandSample};
use super::{stratified_labels, Gesture, Style, NUM_BACKGROUNDS, NUM_SKIN_TONES};
use crate::conditioning::{load_mask, load_rgb, save_mask, save_rgb, Layout, Skeleton};
use crate::error::{Error, Result};
use crate::exec::ExecMode;
use crate::morphology::Mask;
use crate::rng::{self, Domain};
use crate::tensor::Tensor4;

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub n: usize,
    pub seed: u64,
    pub hand_size: usize,
    pub body_width: usize,
    pub body_height: usize,
    /// Relative frequency of each gesture, in [`Gesture::ALL`] order.
    pub gesture_weights: [f64; 5],
    /// Background classes to draw from.
    pub backgrounds: Vec<usize>,
    /// Train, validation and test fractions.
    pub splits: [f64; 3],
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n: 2000,
            seed: 0,
            hand_size: 64,
            body_width: 64,
            body_height: 96,
            gesture_weights: [1.0; 5],
            backgrounds: (0..NUM_BACKGROUNDS).collect(),
            splits: [0.8, 0.1, 0.1],
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hand_size < 8 || self.body_width < 8 || self.body_height < 8 {
            return Err(Error::Config("data resolutions must be at least 8".into()));
        }
        if self.backgrounds.is_empty() || self.backgrounds.iter().any(|&b| b >= NUM_BACKGROUNDS) {
            return Err(Error::Config(format!("data.backgrounds must list classes below {NUM_BACKGROUNDS}")));
        }
        if self.gesture_weights.iter().chain(&self.splits).any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config("weights must be finite and non-negative".into()));
        }
        Ok(())
    }

    fn styles(&self, n: usize) -> Vec<Style> {
        (0..n)
            .map(|i| {
                let mut r = rng::stream(self.seed, Domain::Data, (1 << 39) | i as u64);
                let skin = r.random_range(0..NUM_SKIN_TONES);
                let bg = self.backgrounds[r.random_range(0..self.backgrounds.len())];
                Style(skin * NUM_BACKGROUNDS + bg)
            })
            .collect()
    }

    fn gestures(&self) -> Result<Vec<Gesture>> {
        let mut r = rng::stream(self.seed, Domain::Split, 0);
        Ok(stratified_labels(self.n, &self.gesture_weights, &mut r)?.into_iter().map(|g| Gesture::ALL[g]).collect())
    }

    /// Split assignment with exact per-split counts.
    pub fn split_labels(&self) -> Result<Vec<Split>> {
        let mut r = rng::stream(self.seed, Domain::Split, 1);
        Ok(stratified_labels(self.n, &self.splits, &mut r)?.into_iter().map(|s| Split::ALL[s]).collect())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Hands,
    Bodies,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub image: String,
    pub mask: String,
    pub keypoints: String,
    pub style: usize,
    pub gesture: Gesture,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub kind: DatasetKind,
    pub width: usize,
    pub height: usize,
    pub config: DataConfig,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }
}

/// One sample read back from disk.
#[derive(Clone, Debug)]
pub struct Record {
    pub entry: ManifestEntry,
    pub image: Tensor4,
    pub mask: Mask,
    pub skeleton: Skeleton,
}

impl Record {
    pub fn style(&self) -> Style {
        Style(self.entry.style)
    }
}

pub fn generate_hands(cfg: &DataConfig, exec: ExecMode) -> Result<Vec<HandSample>> {
    cfg.validate()?;
    let gestures = cfg.gestures()?;
    let styles = cfg.styles(cfg.n);
    Ok(exec.map_range(cfg.n, |i| {
        let mut r = rng::stream(cfg.seed, Domain::Data, i as u64);
        sample_hand(&mut r, cfg.hand_size, styles[i], gestures[i])
    }))
}

pub fn generate_bodies(cfg: &DataConfig, exec: ExecMode) -> Result<Vec<BodySample>> {
    cfg.validate()?;
    let gestures = cfg.gestures()?;
    let styles = cfg.styles(cfg.n);
    Ok(exec.map_range(cfg.n, |i| {
        let mut r = rng::stream(cfg.seed, Domain::Data, i as u64);
        sample_body(&mut r, cfg.body_width, cfg.body_height, styles[i], gestures[i])
    }))
}

struct Item<'a> {
    image: &'a Tensor4,
    mask: Mask,
    skeleton: Skeleton,
    style: Style,
    gesture: Gesture,
}

fn write_items(dir: &Path, kind: DatasetKind, cfg: &DataConfig, items: Vec<Item>) -> Result<Manifest> {
    for sub in ["images", "masks", "keypoints"] {
        fs::create_dir_all(dir.join(sub))?;
    }
    let mut cfg = cfg.clone();
    cfg.n = items.len();
    let splits = cfg.split_labels()?;
    let (width, height) = items.first().map(|it| (it.image.width(), it.image.height())).unwrap_or((0, 0));
    let mut entries = Vec::with_capacity(items.len());
    for (i, (it, split)) in items.into_iter().zip(splits).enumerate() {
        let id = format!("{i:06}");
        let e = ManifestEntry {
            image: format!("images/{id}.png"),
            mask: format!("masks/{id}.png"),
            keypoints: format!("keypoints/{id}.json"),
            id,
            style: it.style.0,
            gesture: it.gesture,
            split,
        };
        save_rgb(&dir.join(&e.image), it.image)?;
        save_mask(&dir.join(&e.mask), &it.mask)?;
        it.skeleton.save(&dir.join(&e.keypoints))?;
        entries.push(e);
    }
    let m = Manifest {
        kind,
        width,
        height,
        config: cfg,
        entries,
    };
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&m)?)?;
    Ok(m)
}

/// Write hand crops as `images/`, `masks/`, `keypoints/` and a manifest.
pub fn write_hands(dir: &Path, cfg: &DataConfig, samples: &[HandSample]) -> Result<Manifest> {
    let items = samples
        .iter()
        .map(|s| Item {
            image: &s.image,
            mask: s.mask.clone(),
            skeleton: Skeleton::new(Layout::Hands42, s.hands.flat()).expect("42 keypoints"),
            style: s.style,
            gesture: s.gesture,
        })
        .collect();
    write_items(dir, DatasetKind::Hands, cfg, items)
}

/// Write body frames; the mask is the union of both hand masks.
pub fn write_bodies(dir: &Path, cfg: &DataConfig, samples: &[BodySample]) -> Result<Manifest> {
    let items = samples
        .iter()
        .map(|s| Item {
            image: &s.image,
            mask: s.hands_mask(),
            skeleton: s.skeleton.clone(),
            style: s.style,
            gesture: s.gesture,
        })
        .collect();
    write_items(dir, DatasetKind::Bodies, cfg, items)
}

fn load(dir: &Path, kind: DatasetKind) -> Result<Vec<Record>> {
    let m = Manifest::load(dir)?;
    if m.kind != kind {
        return Err(Error::Data(format!("{} holds {:?}, expected {:?}", dir.display(), m.kind, kind)));
    }
    let data = |p: &PathBuf, e: Error| Error::Data(format!("{}: {e}", p.display()));
    m.entries
        .into_iter()
        .map(|entry| {
            let (ip, mp, kp) = (dir.join(&entry.image), dir.join(&entry.mask), dir.join(&entry.keypoints));
            let image = load_rgb(&ip).map_err(|e| data(&ip, e))?;
            let mask = load_mask(&mp).map_err(|e| data(&mp, e))?;
            let skeleton = Skeleton::load(&kp).map_err(|e| data(&kp, e))?;
            Ok(Record {
                entry,
                image,
                mask,
                skeleton,
            })
        })
        .collect()
}

pub fn load_hands(dir: &Path) -> Result<Vec<Record>> {
    load(dir, DatasetKind::Hands)
}

pub fn load_bodies(dir: &Path) -> Result<Vec<Record>> {
    load(dir, DatasetKind::Bodies)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: usize) -> DataConfig {
        DataConfig {
            n,
            hand_size: 32,
            body_width: 32,
            body_height: 48,
            ..DataConfig::default()
        }
    }

    #[test]
    fn gesture_distribution_matches_weights() {
        let cfg = DataConfig {
            gesture_weights: [0.4, 0.3, 0.1, 0.1, 0.1],
            ..small(1000)
        };
        let bodies = generate_bodies(&cfg, ExecMode::Sequential).unwrap();
        for (g, w) in Gesture::ALL.iter().zip(cfg.gesture_weights) {
            let freq = bodies.iter().filter(|b| b.gesture == *g).count() as f64 / 1000.0;
            assert!((freq - w).abs() <= 0.02, "{g:?}: {freq} vs {w}");
        }
    }

    #[test]
    fn generation_is_order_independent() {
        let cfg = small(6);
        let a = generate_hands(&cfg, ExecMode::Sequential).unwrap();
        let b = generate_hands(&cfg, ExecMode::Parallel).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.image, y.image);
        }
    }

    #[test]
    fn write_and_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small(10);
        let hands = generate_hands(&cfg, ExecMode::Sequential).unwrap();
        let m = write_hands(dir.path(), &cfg, &hands).unwrap();
        assert_eq!(m.entries.len(), 10);
        assert_eq!(m.entries.iter().filter(|e| e.split == Split::Train).count(), 8);
        let back = load_hands(dir.path()).unwrap();
        for (r, s) in back.iter().zip(&hands) {
            assert_eq!(r.mask, s.mask);
            assert!(r.image.max_abs_diff(&s.image).unwrap() <= 0.5 / 255.0 + 1e-6);
            assert_eq!(r.skeleton.hands(), s.hands);
        }
        assert!(load_bodies(dir.path()).is_err());
    }

    #[test]
    fn body_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small(4);
        let bodies = generate_bodies(&cfg, ExecMode::Sequential).unwrap();
        write_bodies(dir.path(), &cfg, &bodies).unwrap();
        let back = load_bodies(dir.path()).unwrap();
        assert_eq!(back.len(), 4);
        assert_eq!(back[0].skeleton.layout, Layout::Stick44);
        assert_eq!(back[2].mask, bodies[2].hands_mask());
    }
}
