//! Held-out evaluation and run comparison.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array4, Axis};
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Sample, Split};
use crate::error::{Error, Result};
use crate::imaging::{psnr, tiled_ssim, ColorSpace, Image};
use crate::model::{Checkpoint, UNet};
use crate::train::{Mode, TrainConfig};

pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Tile side for the tiled SSIM.
    pub ssim_tile: usize,
    /// Clamp restored images to `[0, 1]` before metrics.
    pub clamp_output: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ssim_tile: 16,
            clamp_output: false,
        }
    }
}

/// Anything that maps a (blurry, noisy) pair to a restored image.
pub trait Restorer {
    fn restore(&self, blurry: &Image, noisy: &Image) -> Result<Image>;
}

/// A trained network plus the mode that decides which images it sees.
pub struct NetworkRestorer {
    pub net: UNet<f32>,
    pub mode: Mode,
}

impl NetworkRestorer {
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        Ok(Self {
            net: ck.network()?,
            mode: checkpoint_mode(ck)?,
        })
    }
}

impl Restorer for NetworkRestorer {
    /// Full-resolution inference; the network pads and crops back internally.
    fn restore(&self, blurry: &Image, noisy: &Image) -> Result<Image> {
        let inputs: Vec<Array4<f32>> = self
            .mode
            .network_inputs(blurry, noisy)
            .into_iter()
            .map(|img| img.to_chw().insert_axis(Axis(0)))
            .collect();
        let views: Vec<_> = inputs.iter().map(|x| x.view()).collect();
        let out = self.net.infer(&views)?;
        Image::from_chw(out.index_axis(Axis(0), 0), noisy.colorspace())
    }
}

/// Training configuration stored inside a checkpoint.
pub fn checkpoint_train_config(ck: &Checkpoint) -> Result<TrainConfig> {
    let train = ck
        .run_config
        .get("train")
        .ok_or_else(|| Error::Config("checkpoint carries no training configuration".into()))?;
    Ok(serde_json::from_value(train.clone())?)
}

pub fn checkpoint_mode(ck: &Checkpoint) -> Result<Mode> {
    Ok(checkpoint_train_config(ck)?.mode)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub id: usize,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub n_images: usize,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub version: u32,
    pub run_id: String,
    pub mode: Option<Mode>,
    pub config_hash: String,
    pub manifest_hash: String,
    pub eval: EvalConfig,
    pub aggregate: Aggregate,
    pub per_image: Vec<ImageMetrics>,
}

impl EvalReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let report: Self = serde_json::from_slice(&bytes).map_err(|e| Error::Decode {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        if report.version != REPORT_VERSION {
            return Err(Error::Decode {
                path: path.to_path_buf(),
                reason: format!("unsupported report version {}", report.version),
            });
        }
        Ok(report)
    }
}

/// Convert to sRGB for metrics: linear-track images go through the sample's ISP.
/// Bring `img` to sRGB using the sample's ISP when it is linear.
pub fn to_srgb(img: &Image, sample: &Sample) -> Result<Image> {
    match img.colorspace() {
        ColorSpace::Srgb => Ok(img.clone()),
        ColorSpace::Linear => {
            let isp = sample.record.isp.as_ref().ok_or_else(|| {
                Error::InvalidParam(format!("linear sample {} has no ISP parameters", sample.record.id))
            })?;
            isp.process(img)
        }
    }
}

/// The evaluation split: `test` when present, otherwise every pair.
pub fn eval_samples(data: &Dataset) -> Vec<&Sample> {
    let test = data.split(Split::Test);
    if test.is_empty() {
        data.samples.iter().collect()
    } else {
        test
    }
}

/// Score `restorer` on `samples` against their clean references.
pub fn evaluate_restorer(
    restorer: &dyn Restorer,
    samples: &[&Sample],
    cfg: &EvalConfig,
) -> Result<(Aggregate, Vec<ImageMetrics>)> {
    if samples.is_empty() {
        return Err(Error::InvalidParam("no images to evaluate".into()));
    }
    let per_image = samples
        .iter()
        .map(|s| {
            let clean = s.pair.clean().ok_or_else(|| {
                Error::InvalidParam(format!("pair {} has no clean reference", s.record.id))
            })?;
            let mut out = restorer.restore(&s.pair.blurry, &s.pair.noisy)?;
            out.same_shape(clean)?;
            if cfg.clamp_output {
                out = out.clamped();
            }
            let out = to_srgb(&out, s)?;
            let clean = to_srgb(clean, s)?;
            Ok(ImageMetrics {
                id: s.record.id,
                psnr: psnr(&out, &clean, 1.0)?,
                ssim: tiled_ssim(&out, &clean, cfg.ssim_tile)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let n = per_image.len() as f64;
    let aggregate = Aggregate {
        n_images: per_image.len(),
        psnr: per_image.iter().map(|m| m.psnr).sum::<f64>() / n,
        ssim: per_image.iter().map(|m| m.ssim).sum::<f64>() / n,
    };
    Ok((aggregate, per_image))
}

/// Evaluate a checkpoint on the held-out pairs of `data`. Reads nothing but the
/// inputs; checkpoint and manifest are left untouched.
pub fn evaluate(ck: &Checkpoint, data: &Dataset, cfg: &EvalConfig, run_id: &str) -> Result<EvalReport> {
    let restorer = NetworkRestorer::from_checkpoint(ck)?;
    let (aggregate, per_image) = evaluate_restorer(&restorer, &eval_samples(data), cfg)?;
    Ok(EvalReport {
        version: REPORT_VERSION,
        run_id: run_id.to_string(),
        mode: Some(restorer.mode),
        config_hash: ck.config_hash.clone(),
        manifest_hash: data.hash.clone(),
        eval: *cfg,
        aggregate,
        per_image,
    })
}

/// Rows of a comparison, best PSNR first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub manifest_hash: String,
    pub rows: Vec<ComparisonRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub rank: usize,
    pub run_id: String,
    pub mode: Option<Mode>,
    pub psnr: f64,
    pub ssim: f64,
    pub n_images: usize,
}

/// Rank reports by mean PSNR (ties broken by run id). All reports must share
/// one manifest hash.
pub fn compare_runs(reports: &[EvalReport]) -> Result<Comparison> {
    let first = reports
        .first()
        .ok_or_else(|| Error::InvalidParam("nothing to compare".into()))?;
    if let Some(other) = reports.iter().find(|r| r.manifest_hash != first.manifest_hash) {
        return Err(Error::InvalidParam(format!(
            "runs {} and {} were evaluated on different manifests ({} vs {})",
            first.run_id, other.run_id, first.manifest_hash, other.manifest_hash
        )));
    }
    let mut sorted: Vec<&EvalReport> = reports.iter().collect();
    sorted.sort_by(|a, b| {
        b.aggregate
            .psnr
            .partial_cmp(&a.aggregate.psnr)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.run_id.cmp(&b.run_id))
    });
    Ok(Comparison {
        manifest_hash: first.manifest_hash.clone(),
        rows: sorted
            .iter()
            .enumerate()
            .map(|(i, r)| ComparisonRow {
                rank: i + 1,
                run_id: r.run_id.clone(),
                mode: r.mode,
                psnr: r.aggregate.psnr,
                ssim: r.aggregate.ssim,
                n_images: r.aggregate.n_images,
            })
            .collect(),
    })
}

fn mode_label(mode: Option<Mode>) -> &'static str {
    mode.map_or("-", Mode::name)
}

impl Comparison {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("rank,run_id,mode,psnr,ssim,n_images\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{:.4},{:.4},{}",
                r.rank,
                r.run_id,
                mode_label(r.mode),
                r.psnr,
                r.ssim,
                r.n_images
            );
        }
        out
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| Rank | Run | Mode | PSNR (dB) | SSIM |\n|---:|---|---|---:|---:|\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "| {} | {} | {} | {:.2} | {:.4} |",
                r.rank,
                r.run_id,
                mode_label(r.mode),
                r.psnr,
                r.ssim
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blur::SceneOptions;
    use crate::dataset::{synthesize, SynthConfig};
    use crate::noise::{NoiseConfig, NoiseModel};

    struct Clean;
    impl Restorer for Clean {
        fn restore(&self, _: &Image, noisy: &Image) -> Result<Image> {
            Ok(noisy.clone())
        }
    }

    fn data(sigma: f64, space: ColorSpace) -> Dataset {
        synthesize(&SynthConfig {
            n_scenes: 0,
            n_test: 3,
            scene: SceneOptions {
                canvas: 48,
                ..SceneOptions::default()
            },
            noise: NoiseConfig {
                model: NoiseModel::Gaussian,
                sigma_range: [sigma, sigma],
                ..NoiseConfig::default()
            },
            space,
            seed: 2,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    fn report(run: &str, psnr: f64, hash: &str) -> EvalReport {
        EvalReport {
            version: REPORT_VERSION,
            run_id: run.into(),
            mode: None,
            config_hash: "c".into(),
            manifest_hash: hash.into(),
            eval: EvalConfig::default(),
            aggregate: Aggregate {
                n_images: 1,
                psnr,
                ssim: 0.5,
            },
            per_image: vec![],
        }
    }

    #[test]
    fn identity_on_clean_input_caps() {
        // sigma 0: noisy == clean
        let d = data(0.0, ColorSpace::Srgb);
        let (agg, per) = evaluate_restorer(&Clean, &eval_samples(&d), &EvalConfig::default()).unwrap();
        assert_eq!(agg.psnr, crate::imaging::PSNR_CAP_DB);
        assert!((agg.ssim - 1.0).abs() < 1e-9);
        assert_eq!(per.len(), 3);
    }

    #[test]
    fn pass_through_noisy_matches_sigma() {
        let d = data(25.0, ColorSpace::Srgb);
        let (agg, per) = evaluate_restorer(&Clean, &eval_samples(&d), &EvalConfig::default()).unwrap();
        assert!((agg.psnr - 20.0 * (255.0f64 / 25.0).log10()).abs() < 0.1, "{}", agg.psnr);
        let mean = per.iter().map(|m| m.psnr).sum::<f64>() / per.len() as f64;
        assert!((mean - agg.psnr).abs() < 1e-12);
        let clamped = EvalConfig {
            clamp_output: true,
            ..EvalConfig::default()
        };
        let (c, _) = evaluate_restorer(&Clean, &eval_samples(&d), &clamped).unwrap();
        assert!(c.psnr > agg.psnr);
    }

    #[test]
    fn linear_track_is_scored_in_srgb() {
        let d = data(0.0, ColorSpace::Linear);
        let (agg, _) = evaluate_restorer(&Clean, &eval_samples(&d), &EvalConfig::default()).unwrap();
        assert_eq!(agg.psnr, crate::imaging::PSNR_CAP_DB);
    }

    #[test]
    fn comparison_ranks_and_ties() {
        assert_eq!(compare_runs(&[report("a", 20.0, "h")]).unwrap().rows.len(), 1);
        let cmp = compare_runs(&[report("b", 20.0, "h"), report("c", 25.0, "h"), report("a", 20.0, "h")]).unwrap();
        let order: Vec<_> = cmp.rows.iter().map(|r| r.run_id.as_str()).collect();
        assert_eq!(order, ["c", "a", "b"]);
        assert_eq!(cmp.to_csv().lines().count(), 4);
        assert!(cmp.to_markdown().contains("| 1 | c |"));
        assert!(compare_runs(&[report("a", 1.0, "h"), report("b", 1.0, "g")]).is_err());
        assert!(compare_runs(&[]).is_err());
    }

    #[test]
    fn report_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.json");
        let r = report("x", 30.0, "h");
        r.save(&path).unwrap();
        assert_eq!(EvalReport::load(&path).unwrap(), r);
    }
}
