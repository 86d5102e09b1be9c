//! Co-learning training loop, learning-rate schedule, and the baseline modes.
//!
//! All randomness is keyed: the epoch order by `(seed, epoch)`, each sample's crop,
//! flips, sub-sampling plan and (for `N2nStyle`) second noise draw by
//! `(seed, sample id, epoch)`. The training state is therefore fully described by
//! the parameters, the optimizer moments and the step counter.

use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array4, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{Dataset, Sample, Split};
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::losses::{supervised_loss, total_loss, LossConfig, LossLogLine, LossOutput};
use crate::model::{Checkpoint, NetworkConfig, UNet, Variant};
use crate::nn::{Adam, AdamState};
use crate::noise::apply_noise;
use crate::rng::{derive_seed, rng_from, tag};
use crate::sampler::{draw_plan, SubsamplePlan};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Mode {
    /// Dual input, self-supervised co-learning.
    Selfir,
    /// Blurry input, clean target.
    BaselineB,
    /// Noisy input, clean target.
    BaselineN,
    /// Dual input, clean target.
    BaselineR,
    /// Noisy input, a second independent noisy draw as target.
    N2nStyle,
    /// Noisy input, neighbor sub-sampling reconstruction + regularization.
    Nei2neiStyle,
    /// Blurry input, noisy target.
    DeblurNoisySup,
}

impl Mode {
    pub const ALL: [Mode; 7] = [
        Mode::Selfir,
        Mode::BaselineB,
        Mode::BaselineN,
        Mode::BaselineR,
        Mode::N2nStyle,
        Mode::Nei2neiStyle,
        Mode::DeblurNoisySup,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Selfir => "SELFIR",
            Mode::BaselineB => "BASELINE_B",
            Mode::BaselineN => "BASELINE_N",
            Mode::BaselineR => "BASELINE_R",
            Mode::N2nStyle => "N2N_STYLE",
            Mode::Nei2neiStyle => "NEI2NEI_STYLE",
            Mode::DeblurNoisySup => "DEBLUR_NOISY_SUP",
        }
    }

    pub fn variant(self) -> Variant {
        match self {
            Mode::Selfir | Mode::BaselineR => Variant::Dual,
            _ => Variant::Single,
        }
    }

    /// Whether training in this mode touches the clean image at all.
    pub fn reads_clean(self) -> bool {
        matches!(self, Mode::BaselineB | Mode::BaselineN | Mode::BaselineR | Mode::N2nStyle)
    }

    /// Images fed to the network, in encoder order.
    pub fn network_inputs<'a>(self, blurry: &'a Image, noisy: &'a Image) -> Vec<&'a Image> {
        match self {
            Mode::Selfir | Mode::BaselineR => vec![blurry, noisy],
            Mode::BaselineB | Mode::DeblurNoisySup => vec![blurry],
            Mode::BaselineN | Mode::N2nStyle | Mode::Nei2neiStyle => vec![noisy],
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_uppercase().replace('-', "_");
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == norm)
            .ok_or_else(|| Error::Config(format!("unknown mode {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: Mode,
    pub batch_size: usize,
    pub crop_size: usize,
    pub epochs: u64,
    /// Stop after this many optimizer steps even if epochs remain.
    pub max_steps: Option<u64>,
    pub lr0: f64,
    /// Epochs between learning-rate halvings.
    pub lr_halving_period: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub loss: LossConfig,
    /// Random horizontal/vertical flips shared across a sample's images.
    pub flips: bool,
    pub seed: u64,
    pub network: NetworkConfig,
    /// Save a checkpoint every this many epochs (0 = only at the end).
    pub checkpoint_every: u64,
    /// Recorded for the run snapshot; training is always bit-reproducible here.
    pub deterministic: bool,
    pub toy_profile: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Selfir,
            batch_size: 16,
            crop_size: 128,
            epochs: 200,
            max_steps: None,
            lr0: 3e-4,
            lr_halving_period: 50,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            loss: LossConfig::default(),
            flips: true,
            seed: 0,
            network: NetworkConfig::default(),
            checkpoint_every: 10,
            deterministic: true,
            toy_profile: false,
        }
    }
}

/// Fields that do not influence the optimization trajectory.
const NON_SEMANTIC: [&str; 5] = ["epochs", "max_steps", "checkpoint_every", "deterministic", "toy_profile"];

impl TrainConfig {
    /// Desk-scale profile: 64 px crops, batch 8, 16-channel three-level network,
    /// 3000 steps.
    pub fn toy() -> Self {
        let mut cfg = Self::default();
        cfg.apply_toy_profile();
        cfg
    }

    pub fn apply_toy_profile(&mut self) {
        self.batch_size = 8;
        self.crop_size = 64;
        self.network = NetworkConfig {
            variant: self.network.variant,
            in_channels: self.network.in_channels,
            out_channels: self.network.out_channels,
            ..NetworkConfig::toy()
        };
        self.max_steps = Some(3000);
        self.checkpoint_every = 0;
        self.toy_profile = true;
    }

    /// Network configuration with the encoder layout this mode needs.
    pub fn network_config(&self) -> NetworkConfig {
        NetworkConfig {
            variant: self.mode.variant(),
            ..self.network
        }
    }

    pub fn adam(&self) -> Adam {
        Adam {
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return cfg_err("batch_size must be positive".into());
        }
        if self.crop_size == 0 || self.crop_size % 4 != 0 {
            return cfg_err(format!("crop_size {} must be a positive multiple of 4", self.crop_size));
        }
        let net = self.network_config();
        net.validate()?;
        let sub = match self.mode {
            Mode::Selfir | Mode::Nei2neiStyle => self.crop_size / 2,
            _ => self.crop_size,
        };
        if sub % net.divisor() != 0 || self.crop_size % net.divisor() != 0 {
            return cfg_err(format!(
                "crop_size {} incompatible with a {}-level network (needs multiples of {})",
                self.crop_size,
                net.n_levels,
                2 * net.divisor()
            ));
        }
        if self.mode == Mode::Selfir && sub < self.loss.mask.patch_size {
            return cfg_err(format!(
                "sub-sampled crop {sub} smaller than mask patch {}",
                self.loss.mask.patch_size
            ));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return cfg_err(format!("lr0 {} must be positive", self.lr0));
        }
        if self.lr_halving_period == 0 {
            return cfg_err("lr_halving_period must be positive".into());
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return cfg_err("Adam betas must lie in [0, 1)".into());
        }
        self.loss.weights.validate()
    }

    /// Hash of every trajectory-relevant field plus the training data identity.
    pub fn config_hash(&self, manifest_hash: &str) -> Result<String> {
        let mut value = serde_json::to_value(self)?;
        if let Some(map) = value.as_object_mut() {
            for key in NON_SEMANTIC {
                map.remove(key);
            }
        }
        let mut hasher = Sha256::new();
        hasher.update(serde_json::to_vec(&value)?);
        hasher.update(b"\0");
        hasher.update(manifest_hash.as_bytes());
        Ok(hex::encode(hasher.finalize()))
    }
}

/// `lr0 * 0.5^floor(epoch / period)`.
pub fn lr_at_epoch(lr0: f64, period: u64, epoch: u64) -> f64 {
    let halvings = (epoch / period.max(1)).min(i32::MAX as u64) as i32;
    lr0 * 0.5f64.powi(halvings)
}

/// Crop window and flips drawn once per sample per step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropWindow {
    pub y: usize,
    pub x: usize,
    pub size: usize,
    pub flip_h: bool,
    pub flip_v: bool,
}

impl CropWindow {
    pub fn apply(&self, img: &Image) -> Result<Image> {
        let mut out = img.crop(self.y, self.x, self.size, self.size)?;
        if self.flip_h {
            out = out.flip_horizontal();
        }
        if self.flip_v {
            out = out.flip_vertical();
        }
        Ok(out)
    }
}

/// Uniform crop origin over all valid positions, plus optional fair-coin flips.
pub fn draw_crop<R: Rng + ?Sized>(h: usize, w: usize, size: usize, flips: bool, rng: &mut R) -> Result<CropWindow> {
    if size == 0 || size > h || size > w {
        return Err(Error::Shape(format!("cannot crop {size}x{size} from {h}x{w}")));
    }
    let y = rng.random_range(0..=h - size);
    let x = rng.random_range(0..=w - size);
    let (flip_h, flip_v) = if flips {
        (rng.random_bool(0.5), rng.random_bool(0.5))
    } else {
        (false, false)
    };
    Ok(CropWindow {
        y,
        x,
        size,
        flip_h,
        flip_v,
    })
}

/// Aligned crops of one pair: the same window for every image.
#[derive(Debug, Clone)]
pub struct CroppedSample {
    pub blurry: Image,
    pub noisy: Image,
    pub clean: Option<Image>,
    pub window: CropWindow,
}

/// Crop a pair; the clean image is read only when `with_clean` is set.
pub fn crop_batch<R: Rng + ?Sized>(
    pair: &crate::blur::CapturePair,
    crop_size: usize,
    flips: bool,
    with_clean: bool,
    rng: &mut R,
) -> Result<CroppedSample> {
    let (h, w, _) = pair.dims();
    let window = draw_crop(h, w, crop_size, flips, rng)?;
    let clean = if with_clean {
        let c = pair
            .clean()
            .ok_or_else(|| Error::InvalidParam("this mode needs clean images".into()))?;
        Some(window.apply(c)?)
    } else {
        None
    };
    Ok(CroppedSample {
        blurry: window.apply(&pair.blurry)?,
        noisy: window.apply(&pair.noisy)?,
        clean,
        window,
    })
}

fn stack(images: &[Image]) -> Array4<f32> {
    let (h, w, c) = images[0].dims();
    let mut out = Array4::zeros((images.len(), c, h, w));
    for (i, img) in images.iter().enumerate() {
        out.index_axis_mut(Axis(0), i).assign(&img.to_chw());
    }
    out
}

/// Network-ready tensors for one step.
pub struct Batch {
    pub inputs: Vec<Array4<f32>>,
    pub blurry: Array4<f32>,
    pub noisy: Array4<f32>,
    /// Supervised target, absent for self-supervised modes.
    pub target: Option<Array4<f32>>,
    pub plans: Vec<SubsamplePlan>,
}

/// Assemble the batch of `samples` for `epoch`.
pub fn build_batch(cfg: &TrainConfig, samples: &[&Sample], epoch: u64) -> Result<Batch> {
    let mode = cfg.mode;
    let mut blurry = Vec::with_capacity(samples.len());
    let mut noisy = Vec::with_capacity(samples.len());
    let mut targets = Vec::with_capacity(samples.len());
    let mut plans = Vec::with_capacity(samples.len());
    for s in samples {
        let id = s.record.id as u64;
        let mut rng = rng_from(&[cfg.seed, id, epoch, tag::CROP]);
        let crop = crop_batch(&s.pair, cfg.crop_size, cfg.flips, mode.reads_clean(), &mut rng)?;
        let target = match mode {
            Mode::BaselineB | Mode::BaselineN | Mode::BaselineR => crop.clean.clone(),
            Mode::DeblurNoisySup => Some(crop.noisy.clone()),
            Mode::N2nStyle => {
                let clean = crop.clean.as_ref().expect("mode reads clean");
                let mut rng = rng_from(&[cfg.seed, id, epoch, tag::SECOND_NOISE]);
                Some(apply_noise(clean, &s.pair.noise, false, &mut rng)?)
            }
            Mode::Selfir | Mode::Nei2neiStyle => None,
        };
        if let Some(t) = target {
            targets.push(t);
        }
        if matches!(mode, Mode::Selfir | Mode::Nei2neiStyle) {
            let seed = derive_seed(&[cfg.seed, id, epoch, tag::PLAN]);
            plans.push(draw_plan(cfg.crop_size, cfg.crop_size, seed, cfg.loss.neighbor_only)?);
        }
        blurry.push(crop.blurry);
        noisy.push(crop.noisy);
    }
    let blurry = stack(&blurry);
    let noisy = stack(&noisy);
    let inputs = match mode.variant() {
        Variant::Dual => vec![blurry.clone(), noisy.clone()],
        Variant::Single => match mode {
            Mode::BaselineB | Mode::DeblurNoisySup => vec![blurry.clone()],
            _ => vec![noisy.clone()],
        },
    };
    Ok(Batch {
        inputs,
        blurry,
        noisy,
        target: (!targets.is_empty()).then(|| stack(&targets)),
        plans,
    })
}

/// Loss and parameter gradient of one batch.
pub fn batch_objective(net: &UNet<f32>, cfg: &TrainConfig, batch: &Batch) -> Result<LossOutput<f32>> {
    let inputs: Vec<_> = batch.inputs.iter().map(|x| x.view()).collect();
    match cfg.mode {
        Mode::Selfir => total_loss(
            net,
            &inputs,
            batch.noisy.view(),
            Some(batch.blurry.view()),
            &batch.plans,
            &cfg.loss,
        ),
        Mode::Nei2neiStyle => total_loss(net, &inputs, batch.noisy.view(), None, &batch.plans, &cfg.loss),
        _ => {
            let target = batch
                .target
                .as_ref()
                .ok_or_else(|| Error::InvalidParam("supervised mode without a target".into()))?;
            supervised_loss(net, &inputs, target.view())
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Run directory for the loss log and checkpoints.
    pub out_dir: Option<PathBuf>,
    pub resume: Option<Checkpoint>,
    /// Resume even if the checkpoint's config hash differs.
    pub force: bool,
    /// Print a progress line every this many steps (0 = silent).
    pub progress_every: u64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// One line per optimizer step taken in this call.
    pub history: Vec<LossLogLine>,
    /// Learning rate used in each epoch started in this call.
    pub epoch_lrs: Vec<(u64, f64)>,
}

pub const LOSS_LOG: &str = "loss.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const FINAL_CHECKPOINT: &str = "final";

pub fn epoch_checkpoint_name(epoch: u64) -> String {
    format!("epoch_{epoch:04}")
}

/// Train on the `train` split of `data`.
pub fn train(cfg: &TrainConfig, data: &Dataset, opts: TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    let samples = data.split(Split::Train);
    if samples.is_empty() {
        return Err(Error::Config("dataset has no training pairs".into()));
    }
    if cfg.mode.reads_clean() && samples.iter().any(|s| !s.pair.has_clean()) {
        return Err(Error::Config(format!("{} needs clean images in the dataset", cfg.mode)));
    }
    let spe = (samples.len() / cfg.batch_size) as u64;
    if spe == 0 {
        return Err(Error::Config(format!(
            "batch_size {} exceeds the {} training pairs",
            cfg.batch_size,
            samples.len()
        )));
    }
    let total_steps = cfg
        .max_steps
        .map_or(cfg.epochs * spe, |m| m.min(cfg.epochs * spe));
    let net_cfg = cfg.network_config();
    let config_hash = cfg.config_hash(&data.hash)?;
    let run_config = serde_json::json!({ "train": cfg, "manifest_hash": data.hash });

    let (mut net, mut adam, start) = match opts.resume {
        Some(ck) => {
            if ck.config_hash != config_hash && !opts.force {
                return Err(Error::Config(format!(
                    "checkpoint config hash {} does not match this run ({config_hash})",
                    ck.config_hash
                )));
            }
            if ck.network != net_cfg {
                return Err(Error::Config("checkpoint network differs from the configured one".into()));
            }
            let n = ck.params.len();
            let adam = ck.adam.clone().unwrap_or_else(|| AdamState::new(n));
            (UNet::from_params(net_cfg, ck.params)?, adam, ck.step)
        }
        None => {
            let net = UNet::<f32>::new(net_cfg, cfg.seed)?;
            let n = net.num_params();
            (net, AdamState::new(n), 0)
        }
    };

    let mut log = match &opts.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(LOSS_LOG);
            let file = if start == 0 {
                File::create(&path)
            } else {
                OpenOptions::new().create(true).append(true).open(&path)
            }
            .map_err(|e| Error::io(&path, e))?;
            Some((BufWriter::new(file), path))
        }
        None => None,
    };

    let optimizer = cfg.adam();
    let make_checkpoint = |net: &UNet<f32>, adam: &AdamState<f32>, step: u64| Checkpoint {
        network: net_cfg,
        params: net.params().to_vec(),
        adam: Some(adam.clone()),
        epoch: step / spe,
        step,
        seed: cfg.seed,
        config_hash: config_hash.clone(),
        run_config: run_config.clone(),
    };

    let mut history = Vec::new();
    let mut epoch_lrs = Vec::new();
    let mut order: Vec<usize> = Vec::new();
    let mut order_epoch = None;
    for step in start..total_steps {
        let epoch = step / spe;
        let k = (step % spe) as usize;
        if order_epoch != Some(epoch) {
            order = (0..samples.len()).collect();
            order.shuffle(&mut rng_from(&[cfg.seed, epoch, tag::SHUFFLE]));
            order_epoch = Some(epoch);
        }
        let lr = lr_at_epoch(cfg.lr0, cfg.lr_halving_period, epoch);
        if k == 0 || step == start {
            epoch_lrs.push((epoch, lr));
        }
        let picked: Vec<&Sample> = order[k * cfg.batch_size..(k + 1) * cfg.batch_size]
            .iter()
            .map(|&i| samples[i])
            .collect();
        let batch = build_batch(cfg, &picked, epoch)?;
        let out = batch_objective(&net, cfg, &batch)?;
        if !out.report.is_finite() || out.grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteLoss {
                step,
                detail: format!(
                    "rec {} reg {} aux {} total {} (mode {}, lr {lr}); check the noise configuration",
                    out.report.rec, out.report.reg, out.report.aux, out.report.total, cfg.mode
                ),
            });
        }
        optimizer.step(net.params_mut(), &out.grads, &mut adam, lr);
        let line = LossLogLine {
            step: step + 1,
            epoch,
            rec: out.report.rec,
            reg: out.report.reg,
            aux: out.report.aux,
            total: out.report.total,
            mask_fill_ratio: out.report.mask_fill_ratio,
            lr,
        };
        if let Some((w, path)) = log.as_mut() {
            serde_json::to_writer(&mut *w, &line)?;
            w.write_all(b"\n").map_err(|e| Error::io(&*path, e))?;
        }
        if opts.progress_every > 0 && (step + 1) % opts.progress_every == 0 {
            eprintln!(
                "step {:>6} epoch {:>4} total {:.6} rec {:.6} fill {:.3} lr {:.3e}",
                step + 1,
                epoch,
                line.total,
                line.rec,
                line.mask_fill_ratio,
                lr
            );
        }
        history.push(line);
        let epoch_done = (step + 1) % spe == 0;
        if epoch_done && cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 {
            if let Some(dir) = &opts.out_dir {
                let ck = make_checkpoint(&net, &adam, step + 1);
                ck.save(&dir.join(CHECKPOINT_DIR).join(epoch_checkpoint_name(epoch + 1)))?;
            }
        }
    }
    if let Some((mut w, path)) = log {
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    let checkpoint = make_checkpoint(&net, &adam, total_steps.max(start));
    if let Some(dir) = &opts.out_dir {
        checkpoint.save(&dir.join(CHECKPOINT_DIR).join(FINAL_CHECKPOINT))?;
    }
    Ok(TrainOutcome {
        checkpoint,
        history,
        epoch_lrs,
    })
}

/// Path of the final checkpoint inside a run directory.
pub fn final_checkpoint_path(run_dir: &Path) -> PathBuf {
    run_dir.join(CHECKPOINT_DIR).join(FINAL_CHECKPOINT)
}

/// Mean of `values` over consecutive windows of `window` entries.
pub fn smoothed(values: &[f64], window: usize) -> Vec<f64> {
    values
        .chunks(window.max(1))
        .filter(|c| c.len() == window.max(1))
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationSuite {
    /// BASELINE_B, BASELINE_N, BASELINE_R, NEI2NEI_STYLE, SELFIR.
    Table1,
    /// Clean-supervised vs noisy-supervised deblurring.
    Table3,
    /// SelfIR without and with the auxiliary loss.
    Table4,
    /// SelfIR over lambda_aux in {0, 1, 2, 4, 8}.
    LambdaAux,
    /// SelfIR over lambda_reg in {0, 1, 2, 4, 8}.
    LambdaReg,
}

impl FromStr for AblationSuite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "table1" => Ok(Self::Table1),
            "table3" => Ok(Self::Table3),
            "table4" => Ok(Self::Table4),
            "lambda_aux" | "table5" => Ok(Self::LambdaAux),
            "lambda_reg" | "table6" => Ok(Self::LambdaReg),
            _ => Err(Error::Config(format!("unknown ablation suite {s:?}"))),
        }
    }
}

pub const LAMBDA_GRID: [f64; 5] = [0.0, 1.0, 2.0, 4.0, 8.0];

/// The training configurations of a suite, with row labels.
pub fn suite_rows(suite: AblationSuite, base: &TrainConfig) -> Vec<(String, TrainConfig)> {
    let with = |mode: Mode| TrainConfig {
        mode,
        ..base.clone()
    };
    let selfir_with = |reg: Option<f64>, aux: Option<f64>| {
        let mut cfg = with(Mode::Selfir);
        if let Some(v) = reg {
            cfg.loss.weights.lambda_reg = v;
        }
        if let Some(v) = aux {
            cfg.loss.weights.lambda_aux = v;
        }
        cfg
    };
    match suite {
        AblationSuite::Table1 => [
            Mode::BaselineB,
            Mode::BaselineN,
            Mode::BaselineR,
            Mode::Nei2neiStyle,
            Mode::Selfir,
        ]
        .into_iter()
        .map(|m| (m.name().to_string(), with(m)))
        .collect(),
        AblationSuite::Table3 => vec![
            ("Clear Images".into(), with(Mode::BaselineB)),
            ("Noisy Images".into(), with(Mode::DeblurNoisySup)),
        ],
        AblationSuite::Table4 => vec![
            ("w/o L_aux".into(), selfir_with(None, Some(0.0))),
            ("w/ L_aux".into(), selfir_with(None, None)),
        ],
        AblationSuite::LambdaAux => LAMBDA_GRID
            .iter()
            .map(|&v| (format!("lambda_aux={v}"), selfir_with(None, Some(v))))
            .collect(),
        AblationSuite::LambdaReg => LAMBDA_GRID
            .iter()
            .map(|&v| (format!("lambda_reg={v}"), selfir_with(Some(v), None)))
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub mode: Mode,
    pub lambda_reg: f64,
    pub lambda_aux: f64,
    pub seeds: Vec<u64>,
    pub psnr_per_seed: Vec<f64>,
    pub ssim_per_seed: Vec<f64>,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub suite: AblationSuite,
    pub manifest_hash: String,
    /// Metrics of the unprocessed noisy input, for reference.
    pub noisy_input_psnr: f64,
    pub noisy_input_ssim: f64,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("label,mode,lambda_reg,lambda_aux,psnr,ssim\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{:.4},{:.4}\n",
                r.label, r.mode, r.lambda_reg, r.lambda_aux, r.psnr, r.ssim
            ));
        }
        out.push_str(&format!(
            "noisy input,-,-,-,{:.4},{:.4}\n",
            self.noisy_input_psnr, self.noisy_input_ssim
        ));
        out
    }

    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.label == label)
    }
}

struct PassThroughNoisy;

impl crate::evalreport::Restorer for PassThroughNoisy {
    fn restore(&self, _: &Image, noisy: &Image) -> Result<Image> {
        Ok(noisy.clone())
    }
}

/// Train and evaluate every row of `suite` for each seed. Runs train on the
/// `train` split and are scored on the held-out split. With `out_dir`, each run
/// gets its own directory plus `table.json` / `table.csv` at the top.
pub fn run_ablation(
    suite: AblationSuite,
    base: &TrainConfig,
    data: &Dataset,
    seeds: &[u64],
    eval: &crate::evalreport::EvalConfig,
    out_dir: Option<&Path>,
    progress_every: u64,
) -> Result<AblationTable> {
    use crate::evalreport::{eval_samples, evaluate, evaluate_restorer};
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let (input, _) = evaluate_restorer(&PassThroughNoisy, &eval_samples(data), eval)?;
    let mut rows = Vec::new();
    for (label, cfg) in suite_rows(suite, base) {
        let mut psnrs = Vec::new();
        let mut ssims = Vec::new();
        for &seed in seeds {
            let cfg = TrainConfig { seed, ..cfg.clone() };
            let run_id = format!("{}-seed{seed}", label.replace(['/', ' ', '='], "_"));
            let run_dir = out_dir.map(|d| d.join(&run_id));
            let outcome = train(
                &cfg,
                data,
                TrainOptions {
                    out_dir: run_dir.clone(),
                    progress_every,
                    ..TrainOptions::default()
                },
            )?;
            let report = evaluate(&outcome.checkpoint, data, eval, &run_id)?;
            if let Some(dir) = &run_dir {
                report.save(&dir.join("eval.json"))?;
            }
            psnrs.push(report.aggregate.psnr);
            ssims.push(report.aggregate.ssim);
        }
        let n = seeds.len() as f64;
        rows.push(AblationRow {
            label,
            mode: cfg.mode,
            lambda_reg: cfg.loss.weights.lambda_reg,
            lambda_aux: cfg.loss.weights.lambda_aux,
            seeds: seeds.to_vec(),
            psnr: psnrs.iter().sum::<f64>() / n,
            ssim: ssims.iter().sum::<f64>() / n,
            psnr_per_seed: psnrs,
            ssim_per_seed: ssims,
        });
    }
    let table = AblationTable {
        suite,
        manifest_hash: data.hash.clone(),
        noisy_input_psnr: input.psnr,
        noisy_input_ssim: input.ssim,
        rows,
    };
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let json = dir.join("table.json");
        fs::write(&json, serde_json::to_vec_pretty(&table)?).map_err(|e| Error::io(&json, e))?;
        let csv = dir.join("table.csv");
        fs::write(&csv, table.to_csv()).map_err(|e| Error::io(&csv, e))?;
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blur::{CapturePair, SceneOptions};
    use crate::dataset::{synthesize, SynthConfig};
    use crate::imaging::ColorSpace;
    use crate::noise::NoiseParams;

    fn tiny_data(n: usize) -> Dataset {
        synthesize(&SynthConfig {
            n_scenes: n,
            n_test: 0,
            scene: SceneOptions {
                canvas: 32,
                ..SceneOptions::default()
            },
            seed: 3,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    fn tiny_cfg(mode: Mode) -> TrainConfig {
        TrainConfig {
            mode,
            batch_size: 2,
            crop_size: 16,
            epochs: 2,
            network: NetworkConfig {
                n_levels: 2,
                base_channels: 4,
                ..NetworkConfig::default()
            },
            loss: LossConfig {
                mask: crate::sharpmask::MaskConfig {
                    patch_size: 4,
                    ..Default::default()
                },
                ..LossConfig::default()
            },
            checkpoint_every: 1,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn schedule_halves_every_period() {
        assert_eq!(lr_at_epoch(3e-4, 50, 0), 3e-4);
        assert_eq!(lr_at_epoch(3e-4, 50, 49), 3e-4);
        assert_eq!(lr_at_epoch(3e-4, 50, 50), 1.5e-4);
        assert_eq!(lr_at_epoch(3e-4, 50, 150), 3.75e-5);
    }

    #[test]
    fn mode_names_round_trip() {
        for m in Mode::ALL {
            assert_eq!(m.name().parse::<Mode>().unwrap(), m);
            assert_eq!(m.name().to_lowercase().replace('_', "-").parse::<Mode>().unwrap(), m);
            let json = serde_json::to_string(&m).unwrap();
            assert_eq!(json, format!("\"{}\"", m.name()));
        }
        assert!("nope".parse::<Mode>().unwrap_err().is_config());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig::toy().validate().is_ok());
        let bad = TrainConfig {
            crop_size: 62,
            ..TrainConfig::default()
        };
        assert!(bad.validate().unwrap_err().is_config());
        let too_small = TrainConfig {
            crop_size: 16,
            ..TrainConfig::default()
        };
        assert!(too_small.validate().is_err());
    }

    #[test]
    fn hash_ignores_run_length_only() {
        let a = TrainConfig::toy();
        let b = TrainConfig {
            max_steps: Some(10),
            epochs: 3,
            ..a.clone()
        };
        assert_eq!(a.config_hash("m").unwrap(), b.config_hash("m").unwrap());
        let c = TrainConfig { seed: 1, ..a.clone() };
        assert_ne!(a.config_hash("m").unwrap(), c.config_hash("m").unwrap());
        assert_ne!(a.config_hash("m").unwrap(), a.config_hash("n").unwrap());
    }

    #[test]
    fn static_pair_crop_stays_aligned() {
        let img = Image::new(
            ndarray::Array3::from_shape_fn((12, 10, 3), |(y, x, c)| (y * 30 + x * 3 + c) as f32 / 400.0),
            ColorSpace::Srgb,
        )
        .unwrap();
        let pair = CapturePair::new(img.clone(), img.clone(), Some(img), NoiseParams::none(), None).unwrap();
        let mut rng = rng_from(&[1]);
        for _ in 0..20 {
            let c = crop_batch(&pair, 6, true, true, &mut rng).unwrap();
            assert_eq!(c.blurry, c.noisy);
            assert_eq!(c.clean.as_ref().unwrap(), &c.blurry);
        }
        assert!(crop_batch(&pair, 11, false, false, &mut rng).is_err());
    }

    #[test]
    fn selfir_never_reads_clean() {
        let data = tiny_data(4);
        train(&tiny_cfg(Mode::Selfir), &data, TrainOptions::default()).unwrap();
        train(&tiny_cfg(Mode::Nei2neiStyle), &data, TrainOptions::default()).unwrap();
        train(&tiny_cfg(Mode::DeblurNoisySup), &data, TrainOptions::default()).unwrap();
        assert!(data.samples.iter().all(|s| s.pair.clean_reads() == 0));
        train(&tiny_cfg(Mode::BaselineB), &data, TrainOptions::default()).unwrap();
        assert!(data.samples.iter().all(|s| s.pair.clean_reads() > 0));
    }

    #[test]
    fn every_mode_trains_and_logs() {
        let data = tiny_data(4);
        for mode in Mode::ALL {
            let dir = tempfile::tempdir().unwrap();
            let out = train(
                &tiny_cfg(mode),
                &data,
                TrainOptions {
                    out_dir: Some(dir.path().to_path_buf()),
                    ..TrainOptions::default()
                },
            )
            .unwrap();
            assert_eq!(out.history.len(), 4, "{mode}");
            assert_eq!(out.checkpoint.step, 4);
            let log = fs::read_to_string(dir.path().join(LOSS_LOG)).unwrap();
            assert_eq!(log.lines().count(), 4);
            assert!(dir.path().join("checkpoints/epoch_0001/meta.json").exists());
            assert!(final_checkpoint_path(dir.path()).join("meta.json").exists());
            assert_eq!(out.checkpoint.network.variant, mode.variant());
        }
    }

    #[test]
    fn resume_reproduces_uninterrupted_run() {
        let data = tiny_data(4);
        let cfg = TrainConfig {
            epochs: 3,
            ..tiny_cfg(Mode::Selfir)
        };
        let full = train(&cfg, &data, TrainOptions::default()).unwrap();
        let first = train(
            &TrainConfig {
                max_steps: Some(3),
                ..cfg.clone()
            },
            &data,
            TrainOptions::default(),
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        first.checkpoint.save(dir.path()).unwrap();
        let ck = Checkpoint::load(dir.path(), None, false).unwrap();
        let rest = train(
            &cfg,
            &data,
            TrainOptions {
                resume: Some(ck),
                ..TrainOptions::default()
            },
        )
        .unwrap();
        let joined: Vec<_> = first.history.iter().chain(&rest.history).copied().collect();
        assert_eq!(joined, full.history);
        assert_eq!(rest.checkpoint.params, full.checkpoint.params);
    }

    #[test]
    fn resume_refuses_other_config() {
        let data = tiny_data(4);
        let cfg = tiny_cfg(Mode::Selfir);
        let out = train(&cfg, &data, TrainOptions::default()).unwrap();
        let other = TrainConfig { seed: 9, ..cfg };
        let err = train(
            &other,
            &data,
            TrainOptions {
                resume: Some(out.checkpoint.clone()),
                ..TrainOptions::default()
            },
        )
        .unwrap_err();
        assert!(err.is_config());
        assert!(train(
            &other,
            &data,
            TrainOptions {
                resume: Some(out.checkpoint),
                force: true,
                ..TrainOptions::default()
            },
        )
        .is_ok());
    }

    #[test]
    fn non_finite_loss_aborts() {
        let data = tiny_data(4);
        let cfg = TrainConfig {
            lr0: 1e30,
            ..tiny_cfg(Mode::BaselineB)
        };
        let err = train(
            &TrainConfig {
                epochs: 50,
                ..cfg
            },
            &data,
            TrainOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { .. }), "{err}");
    }

    #[test]
    fn batch_too_large_is_config_error() {
        let data = tiny_data(2);
        let cfg = TrainConfig {
            batch_size: 3,
            ..tiny_cfg(Mode::Selfir)
        };
        assert!(train(&cfg, &data, TrainOptions::default()).unwrap_err().is_config());
    }

    #[test]
    fn smoothing_windows() {
        assert_eq!(smoothed(&[1.0, 3.0, 5.0, 7.0, 9.0], 2), vec![2.0, 6.0]);
    }

    #[test]
    fn suites_have_expected_rows() {
        let base = TrainConfig::toy();
        assert_eq!(suite_rows(AblationSuite::Table1, &base).len(), 5);
        assert_eq!(suite_rows(AblationSuite::Table3, &base).len(), 2);
        let aux = suite_rows(AblationSuite::LambdaAux, &base);
        let grid: Vec<f64> = aux.iter().map(|(_, c)| c.loss.weights.lambda_aux).collect();
        assert_eq!(grid, LAMBDA_GRID);
        let reg = suite_rows(AblationSuite::LambdaReg, &base);
        assert!(reg.iter().all(|(_, c)| c.mode == Mode::Selfir && c.loss.weights.lambda_aux == 2.0));
        let t4 = suite_rows(AblationSuite::Table4, &base);
        assert_eq!(t4[0].1.loss.weights.lambda_aux, 0.0);
        assert_eq!("table5".parse::<AblationSuite>().unwrap(), AblationSuite::LambdaAux);
    }

    #[test]
    fn ablation_runs_end_to_end() {
        let data = synthesize(&SynthConfig {
            n_scenes: 4,
            n_test: 2,
            scene: SceneOptions {
                canvas: 32,
                ..SceneOptions::default()
            },
            seed: 3,
            ..SynthConfig::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let table = run_ablation(
            AblationSuite::LambdaAux,
            &TrainConfig {
                epochs: 1,
                ..tiny_cfg(Mode::Selfir)
            },
            &data,
            &[0, 1],
            &crate::evalreport::EvalConfig::default(),
            Some(dir.path()),
            0,
        )
        .unwrap();
        assert_eq!(table.rows.len(), 5);
        assert!(table.rows.iter().all(|r| r.psnr_per_seed.len() == 2 && r.psnr.is_finite()));
        assert!(dir.path().join("table.csv").exists());
        assert!(dir.path().join("lambda_aux_0-seed1/eval.json").exists());
        assert_eq!(table.to_csv().lines().count(), 7);
    }
}
