//! Synthetic pair generation, the on-disk dataset layout and its manifest.
//!
//! A dataset directory holds `manifest.json` and `pairs/NNNNNN_{clean,blur,noisy}.*`.
//! On the sRGB track clean and blurry images are 16-bit PNG; noisy images are
//! always `.sirt` so they keep their unclamped values. The linear track stores
//! everything as `.sirt`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::blur::{make_pair, render_burst, Burst, CapturePair, SceneOptions, SceneSpec};
use crate::error::{Error, Result};
use crate::imaging::{load_image, load_sirt_unclamped, save_image, save_sirt_unclamped, ColorSpace, Image, ImageFormat};
use crate::noise::{IspParams, NoiseConfig, NoiseModel, NoiseParams};
use crate::rng::{derive_seed, rng_from, tag};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const MIN_FRAMES: usize = 7;
pub const MAX_FRAMES: usize = 13;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Training pairs.
    pub n_scenes: usize,
    /// Held-out pairs, appended after the training ids.
    pub n_test: usize,
    pub n_frames: usize,
    pub scene: SceneOptions,
    pub noise: NoiseConfig,
    pub space: ColorSpace,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_scenes: 200,
            n_test: 0,
            n_frames: 11,
            scene: SceneOptions::default(),
            noise: NoiseConfig::default(),
            space: ColorSpace::Srgb,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(MIN_FRAMES..=MAX_FRAMES).contains(&self.n_frames) {
            return Err(Error::Config(format!(
                "n_frames {} outside [{MIN_FRAMES}, {MAX_FRAMES}]",
                self.n_frames
            )));
        }
        if self.n_scenes + self.n_test == 0 {
            return Err(Error::Config("dataset would be empty".into()));
        }
        if self.scene.canvas < 16 || self.scene.canvas % 4 != 0 {
            return Err(Error::Config(format!(
                "canvas {} must be a multiple of 4 and at least 16",
                self.scene.canvas
            )));
        }
        self.noise.validate()?;
        if self.noise.model == NoiseModel::Sensor && self.space != ColorSpace::Linear {
            return Err(Error::Config("sensor noise requires space = \"linear\"".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.n_scenes + self.n_test
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn split_of(&self, id: usize) -> Split {
        if id < self.n_scenes {
            Split::Train
        } else {
            Split::Test
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairPaths {
    pub clean: String,
    pub blur: String,
    pub noisy: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: usize,
    pub split: Split,
    /// Relative to the manifest's directory.
    pub paths: PairPaths,
    pub noise: NoiseParams,
    pub space: ColorSpace,
    /// Per-sample seed every random draw of this sample derives from.
    pub seed: u64,
    pub n_frames: usize,
    pub isp: Option<IspParams>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub synth: SynthConfig,
    pub records: Vec<SampleRecord>,
}

impl Manifest {
    pub fn records_in(&self, split: Split) -> impl Iterator<Item = &SampleRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }
}

pub fn sample_seed(global: u64, id: usize) -> u64 {
    derive_seed(&[global, id as u64])
}

/// Synthesize pair `id` of `cfg` in memory. Everything random derives from
/// `(cfg.seed, id)`, so generation order and parallelism never change results.
pub fn synthesize_pair(cfg: &SynthConfig, id: usize) -> Result<(CapturePair, SampleRecord)> {
    let seed = sample_seed(cfg.seed, id);
    let mut scene_rng = rng_from(&[seed, tag::SCENE]);
    let spec = SceneSpec::random(&cfg.scene, cfg.n_frames, &mut scene_rng);
    let burst = render_burst(&spec, cfg.n_frames)?;
    let isp = (cfg.space == ColorSpace::Linear).then(|| IspParams::sample(&mut rng_from(&[seed, tag::ISP])));
    let mut noise_rng = rng_from(&[seed, tag::NOISE]);
    let noise = cfg.noise.sample(&mut noise_rng);
    let pair = make_pair(&burst, &noise, cfg.space, isp.as_ref(), cfg.noise.blur_noise_sigma, &mut noise_rng)?;
    let stem = format!("pairs/{id:06}");
    let clean_ext = match cfg.space {
        ColorSpace::Srgb => ImageFormat::Png16.extension(),
        ColorSpace::Linear => ImageFormat::Sirt.extension(),
    };
    let record = SampleRecord {
        id,
        split: cfg.split_of(id),
        paths: PairPaths {
            clean: format!("{stem}_clean.{clean_ext}"),
            blur: format!("{stem}_blur.{clean_ext}"),
            noisy: format!("{stem}_noisy.{}", ImageFormat::Sirt.extension()),
        },
        noise,
        space: cfg.space,
        seed,
        n_frames: cfg.n_frames,
        isp,
    };
    Ok((pair, record))
}

/// A loaded pair together with its manifest record.
#[derive(Debug, Clone)]
pub struct Sample {
    pub record: SampleRecord,
    pub pair: CapturePair,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: Manifest,
    /// Directory the manifest lives in; empty for in-memory datasets.
    pub root: PathBuf,
    /// SHA-256 of the manifest file (of its serialized form when in memory).
    pub hash: String,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&Sample> {
        self.samples.iter().filter(|s| s.record.split == split).collect()
    }

    pub fn space(&self) -> ColorSpace {
        self.manifest.synth.space
    }
}

fn manifest_bytes(manifest: &Manifest) -> Result<Vec<u8>> {
    Ok(serde_json::to_vec_pretty(manifest)?)
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Synthesize a whole dataset without touching the disk.
pub fn synthesize(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let samples = (0..cfg.len())
        .map(|id| synthesize_pair(cfg, id).map(|(pair, record)| Sample { record, pair }))
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        synth: cfg.clone(),
        records: samples.iter().map(|s| s.record.clone()).collect(),
    };
    let hash = sha256_hex(&manifest_bytes(&manifest)?);
    Ok(Dataset {
        manifest,
        root: PathBuf::new(),
        hash,
        samples,
    })
}

/// Synthesize and write a dataset under `out_dir`; returns the manifest path.
pub fn write_dataset(cfg: &SynthConfig, out_dir: &Path) -> Result<PathBuf> {
    cfg.validate()?;
    let pairs_dir = out_dir.join("pairs");
    fs::create_dir_all(&pairs_dir).map_err(|e| Error::io(&pairs_dir, e))?;
    let mut records = Vec::with_capacity(cfg.len());
    for id in 0..cfg.len() {
        let (pair, record) = synthesize_pair(cfg, id)?;
        let clean = pair
            .clean()
            .ok_or_else(|| Error::InvalidParam("synthetic pair without a clean image".into()))?;
        let format = match cfg.space {
            ColorSpace::Srgb => ImageFormat::Png16,
            ColorSpace::Linear => ImageFormat::Sirt,
        };
        save_image(clean, &out_dir.join(&record.paths.clean), format)?;
        save_image(&pair.blurry, &out_dir.join(&record.paths.blur), format)?;
        save_sirt_unclamped(&pair.noisy, &out_dir.join(&record.paths.noisy))?;
        records.push(record);
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        synth: cfg.clone(),
        records,
    };
    let path = out_dir.join(MANIFEST_FILE);
    fs::write(&path, manifest_bytes(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let manifest: Manifest = serde_json::from_slice(&bytes).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Decode {
            path: path.to_path_buf(),
            reason: format!("unsupported manifest version {}", manifest.version),
        });
    }
    Ok(manifest)
}

/// SHA-256 (hex) of the manifest file's bytes.
pub fn manifest_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Load every pair of a dataset (optionally one split). Noisy images keep
/// their stored, unclamped values.
pub fn load_dataset(manifest_path: &Path, split: Option<Split>) -> Result<Dataset> {
    let manifest = read_manifest(manifest_path)?;
    let hash = manifest_hash(manifest_path)?;
    let root = manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    let samples = manifest
        .records
        .iter()
        .filter(|r| split.is_none_or(|s| s == r.split))
        .map(|record| load_record(&root, record))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        manifest,
        root,
        hash,
        samples,
    })
}

/// Load the images of one record, paths relative to `root`.
pub fn load_record(root: &Path, record: &SampleRecord) -> Result<Sample> {
    let cs = record.space;
    let clean = load_image(&root.join(&record.paths.clean), cs)?;
    let blurry = load_image(&root.join(&record.paths.blur), cs)?;
    let noisy = load_sirt_unclamped(&root.join(&record.paths.noisy), cs)?;
    let pair = CapturePair::new(blurry, noisy, Some(clean), record.noise, record.isp)?;
    Ok(Sample {
        record: record.clone(),
        pair,
    })
}

/// Load an ordered burst of sharp frames from a directory of PNGs (sorted by
/// file name), e.g. extracted high-frame-rate video.
pub fn load_burst_dir(dir: &Path, colorspace: ColorSpace) -> Result<Burst> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    let frames = paths
        .iter()
        .map(|p| load_image(p, colorspace))
        .collect::<Result<Vec<Image>>>()?;
    Burst::new(frames, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: usize) -> SynthConfig {
        SynthConfig {
            n_scenes: n,
            n_test: 1,
            scene: SceneOptions {
                canvas: 32,
                ..SceneOptions::default()
            },
            seed: 5,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn synthesis_is_deterministic_per_id() {
        let cfg = small(3);
        let (a, ra) = synthesize_pair(&cfg, 2).unwrap();
        let (b, rb) = synthesize_pair(&cfg, 2).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(a.noisy.data(), b.noisy.data());
        let (c, _) = synthesize_pair(&cfg, 1).unwrap();
        assert_ne!(a.blurry.data(), c.blurry.data());
        assert_eq!(cfg.split_of(3), Split::Test);
    }

    #[test]
    fn written_dataset_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small(2);
        let path = write_dataset(&cfg, dir.path()).unwrap();
        let ds = load_dataset(&path, None).unwrap();
        assert_eq!(ds.samples.len(), 3);
        assert_eq!(ds.split(Split::Train).len(), 2);
        assert_eq!(ds.hash, manifest_hash(&path).unwrap());
        let mem = synthesize(&cfg).unwrap();
        for (disk, mem) in ds.samples.iter().zip(&mem.samples) {
            assert_eq!(disk.record, mem.record);
            // Noisy images are stored bit-exactly, unclamped.
            assert_eq!(disk.pair.noisy.data(), mem.pair.noisy.data());
            let diff = (disk.pair.blurry.data() - mem.pair.blurry.data()).mapv(f32::abs);
            assert!(diff.iter().all(|&d| d <= 0.5 / 65535.0 + 1e-7));
        }
        assert!(ds.samples.iter().any(|s| !s.pair.noisy.is_unit_range()));
    }

    #[test]
    fn linear_track_writes_tensors() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            space: ColorSpace::Linear,
            noise: NoiseConfig {
                model: NoiseModel::Sensor,
                ..NoiseConfig::default()
            },
            ..small(1)
        };
        let path = write_dataset(&cfg, dir.path()).unwrap();
        let ds = load_dataset(&path, Some(Split::Train)).unwrap();
        let s = &ds.samples[0];
        assert!(s.record.paths.clean.ends_with(".sirt"));
        assert!(s.record.isp.is_some());
        assert_eq!(s.pair.blurry.colorspace(), ColorSpace::Linear);
        assert!(matches!(s.record.noise, NoiseParams::Sensor { .. }));
    }

    #[test]
    fn config_errors() {
        let bad_frames = SynthConfig { n_frames: 5, ..small(1) };
        assert!(bad_frames.validate().unwrap_err().is_config());
        let sensor_srgb = SynthConfig {
            noise: NoiseConfig {
                model: NoiseModel::Sensor,
                ..NoiseConfig::default()
            },
            ..small(1)
        };
        assert!(sensor_srgb.validate().is_err());
        let dir = tempfile::tempdir().unwrap();
        assert!(load_dataset(&dir.path().join("missing.json"), None).is_err());
    }

    #[test]
    fn burst_directory_loads_in_name_order() {
        let dir = tempfile::tempdir().unwrap();
        for (i, v) in [0.2f32, 0.6, 0.4].iter().enumerate() {
            let img = Image::filled(8, 8, 3, *v, ColorSpace::Srgb);
            save_image(&img, &dir.path().join(format!("frame_{i:03}.png")), ImageFormat::Png16).unwrap();
        }
        let burst = load_burst_dir(dir.path(), ColorSpace::Srgb).unwrap();
        assert_eq!(burst.len(), 3);
        assert!((burst.latent().data()[[0, 0, 0]] - 0.6).abs() < 1e-4);
    }
}
