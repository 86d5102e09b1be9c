//! Noise models (Gaussian, Poisson, heteroscedastic sensor) and a simplified
//! invertible ISP so sensor noise can be applied in linear space.

use ndarray::Array3;
use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{ColorSpace, Image};

pub const SHOT_MIN: f64 = 0.000_686_74;
pub const SHOT_MAX: f64 = 0.021_948_56;
const READ_SLOPE: f64 = 1.85;
const READ_INTERCEPT: f64 = 0.3;
const READ_LOG_STD: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "lowercase")]
pub enum NoiseParams {
    Gaussian { sigma: f64 },
    Poisson { lambda: f64 },
    Sensor { lambda_shot: f64, lambda_read: f64 },
}

impl NoiseParams {
    pub fn none() -> Self {
        NoiseParams::Gaussian { sigma: 0.0 }
    }

    pub fn requires_linear(&self) -> bool {
        matches!(self, NoiseParams::Sensor { .. })
    }
}

/// Regressor used for the mean of `log(lambda_read)`.
///
/// The published relation writes `1.85 * lambda_shot + 0.3`; the upstream model it
/// cites regresses on `log(lambda_shot)`. `LogShot` is the default.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReadNoiseRegressor {
    #[default]
    LogShot,
    LinearShot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseModel {
    Gaussian,
    Poisson,
    Sensor,
}

/// Noise configuration block: which model, and the ranges parameters are drawn from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    pub model: NoiseModel,
    /// Gaussian std range in 8-bit units (divided by 255 when sampled).
    pub sigma_range: [f64; 2],
    pub lambda_range: [f64; 2],
    pub read_regressor: ReadNoiseRegressor,
    /// Std (8-bit units) of the low-intensity noise added to the blurry image.
    pub blur_noise_sigma: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            model: NoiseModel::Gaussian,
            sigma_range: [5.0, 50.0],
            lambda_range: [5.0, 50.0],
            read_regressor: ReadNoiseRegressor::LogShot,
            blur_noise_sigma: 0.0,
        }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        let ordered = |r: [f64; 2]| r[0].is_finite() && r[1].is_finite() && r[0] <= r[1];
        if !ordered(self.sigma_range) || self.sigma_range[0] < 0.0 {
            return Err(Error::Config(format!("bad sigma range {:?}", self.sigma_range)));
        }
        if !ordered(self.lambda_range) || self.lambda_range[0] <= 0.0 {
            return Err(Error::Config(format!("bad lambda range {:?}", self.lambda_range)));
        }
        if !(0.0..=2.0).contains(&self.blur_noise_sigma) {
            return Err(Error::Config(format!(
                "blur noise sigma {} outside [0, 2]/255",
                self.blur_noise_sigma
            )));
        }
        Ok(())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> NoiseParams {
        let uniform = |rng: &mut R, r: [f64; 2]| {
            if r[0] == r[1] {
                r[0]
            } else {
                rng.random_range(r[0]..=r[1])
            }
        };
        match self.model {
            NoiseModel::Gaussian => NoiseParams::Gaussian {
                sigma: uniform(rng, self.sigma_range) / 255.0,
            },
            NoiseModel::Poisson => NoiseParams::Poisson {
                lambda: uniform(rng, self.lambda_range),
            },
            NoiseModel::Sensor => sample_sensor_params(rng, self.read_regressor),
        }
    }
}

fn finish(img: &Image, data: Array3<f32>, clamp: bool) -> Image {
    let out = img.map_data(data);
    if clamp {
        out.clamped()
    } else {
        out
    }
}

/// `img + n`, `n ~ N(0, sigma^2)` i.i.d. Pass `clamp = false` for loss targets.
pub fn add_gaussian<R: Rng + ?Sized>(img: &Image, sigma: f64, clamp: bool, rng: &mut R) -> Result<Image> {
    if !(sigma >= 0.0) {
        return Err(Error::InvalidParam(format!("negative sigma {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(finish(img, img.data().clone(), clamp));
    }
    let data = img.data().mapv(|x| {
        let z: f64 = StandardNormal.sample(rng);
        (x as f64 + sigma * z) as f32
    });
    Ok(finish(img, data, clamp))
}

/// Each pixel drawn as `Poisson(lambda * x) / lambda`.
pub fn add_poisson<R: Rng + ?Sized>(img: &Image, lambda: f64, clamp: bool, rng: &mut R) -> Result<Image> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidParam(format!("Poisson lambda must be positive, got {lambda}")));
    }
    let data = img.data().mapv(|x| {
        let rate = lambda * (x.max(0.0) as f64);
        if rate == 0.0 {
            return 0.0;
        }
        let count: f64 = Poisson::new(rate).expect("positive rate").sample(rng);
        (count / lambda) as f32
    });
    Ok(finish(img, data, clamp))
}

/// Draw `(lambda_shot, lambda_read)`: `log(lambda_shot)` uniform on
/// `[log 0.00068674, log 0.02194856]`, `log(lambda_read)` Gaussian with std 0.2
/// around `1.85 * r + 0.3` where `r` is picked by `regressor`.
pub fn sample_sensor_params<R: Rng + ?Sized>(rng: &mut R, regressor: ReadNoiseRegressor) -> NoiseParams {
    let log_shot = rng.random_range(SHOT_MIN.ln()..SHOT_MAX.ln());
    let shot = log_shot.exp();
    let x = match regressor {
        ReadNoiseRegressor::LogShot => log_shot,
        ReadNoiseRegressor::LinearShot => shot,
    };
    let z: f64 = StandardNormal.sample(rng);
    let log_read = READ_SLOPE * x + READ_INTERCEPT + READ_LOG_STD * z;
    NoiseParams::Sensor {
        lambda_shot: shot,
        lambda_read: log_read.exp(),
    }
}

/// Heteroscedastic Gaussian noise with per-pixel variance `lambda_read + lambda_shot * x`.
pub fn add_sensor<R: Rng + ?Sized>(
    img: &Image,
    lambda_shot: f64,
    lambda_read: f64,
    clamp: bool,
    rng: &mut R,
) -> Result<Image> {
    img.expect_colorspace(ColorSpace::Linear)?;
    if !(lambda_shot >= 0.0 && lambda_read >= 0.0) {
        return Err(Error::InvalidParam(format!(
            "sensor noise needs non-negative variances, got shot {lambda_shot} read {lambda_read}"
        )));
    }
    if lambda_shot == 0.0 && lambda_read == 0.0 {
        return Ok(finish(img, img.data().clone(), clamp));
    }
    let data = img.data().mapv(|x| {
        let var = lambda_read + lambda_shot * (x.max(0.0) as f64);
        let z: f64 = StandardNormal.sample(rng);
        (x as f64 + var.sqrt() * z) as f32
    });
    Ok(finish(img, data, clamp))
}

pub fn apply_noise<R: Rng + ?Sized>(img: &Image, params: &NoiseParams, clamp: bool, rng: &mut R) -> Result<Image> {
    match *params {
        NoiseParams::Gaussian { sigma } => add_gaussian(img, sigma, clamp, rng),
        NoiseParams::Poisson { lambda } => add_poisson(img, lambda, clamp, rng),
        NoiseParams::Sensor {
            lambda_shot,
            lambda_read,
        } => add_sensor(img, lambda_shot, lambda_read, clamp, rng),
    }
}

type Mat3 = [[f64; 3]; 3];

fn invert3(m: &Mat3) -> Option<Mat3> {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    if det.abs() < 1e-12 || !det.is_finite() {
        return None;
    }
    let mut inv = [[0.0; 3]; 3];
    for (i, row) in inv.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            // adjugate: cofactor of (j, i)
            let (r0, r1) = ((j + 1) % 3, (j + 2) % 3);
            let (c0, c1) = ((i + 1) % 3, (i + 2) % 3);
            *v = (m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0]) / det;
        }
    }
    Some(inv)
}

fn frobenius(m: &Mat3) -> f64 {
    m.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
}

fn mat_vec(m: &Mat3, v: [f64; 3]) -> [f64; 3] {
    [0, 1, 2].map(|i| m[i][0] * v[0] + m[i][1] * v[1] + m[i][2] * v[2])
}

/// Linear-space knee below which the transfer curve is a straight line, so the
/// display-side slope stays bounded near zero.
const GAMMA_KNEE: f64 = 1e-3;

/// Display to linear: `x^gamma` with a linear toe, odd-symmetric for negative inputs.
fn decode_gamma(x: f64, gamma: f64) -> f64 {
    let knee_display = GAMMA_KNEE.powf(1.0 / gamma);
    let a = x.abs();
    let y = if a < knee_display {
        a * GAMMA_KNEE / knee_display
    } else {
        a.powf(gamma)
    };
    x.signum() * y
}

fn encode_gamma(x: f64, gamma: f64) -> f64 {
    let knee_display = GAMMA_KNEE.powf(1.0 / gamma);
    let a = x.abs();
    let y = if a < GAMMA_KNEE {
        a * knee_display / GAMMA_KNEE
    } else {
        a.powf(1.0 / gamma)
    };
    x.signum() * y
}

/// Row-stochastic, non-negative sRGB-to-camera mixing. Its inverse is the default CCM.
const RGB_TO_CAM: Mat3 = [[0.70, 0.20, 0.10], [0.15, 0.70, 0.15], [0.10, 0.25, 0.65]];

pub const MAX_CCM_CONDITION: f64 = 1e4;

/// Camera pipeline parameters. `ccm` maps camera RGB to linear sRGB.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IspParams {
    pub wb_gains: [f64; 3],
    pub ccm: Mat3,
    pub gamma: f64,
}

impl Default for IspParams {
    fn default() -> Self {
        Self {
            wb_gains: [1.0; 3],
            ccm: invert3(&RGB_TO_CAM).expect("default matrix is invertible"),
            gamma: 2.2,
        }
    }
}

impl IspParams {
    pub fn identity() -> Self {
        Self {
            wb_gains: [1.0; 3],
            ccm: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            gamma: 1.0,
        }
    }

    /// Fixed CCM, gamma 2.2, and per-image white-balance gains drawn from `[1, 2]`.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut p = Self::default();
        for g in p.wb_gains.iter_mut() {
            *g = rng.random_range(1.0..=2.0);
        }
        p
    }

    pub fn validate(&self) -> Result<Mat3> {
        if self.wb_gains.iter().any(|g| !(1.0..=4.0).contains(g)) {
            return Err(Error::InvalidParam(format!(
                "white-balance gains {:?} outside [1, 4]",
                self.wb_gains
            )));
        }
        if !(self.gamma > 0.0) {
            return Err(Error::InvalidParam(format!("gamma must be positive, got {}", self.gamma)));
        }
        let inv = invert3(&self.ccm)
            .ok_or_else(|| Error::InvalidParam("color correction matrix is singular".into()))?;
        // Frobenius-norm condition number, an upper bound on the 2-norm one.
        let cond = frobenius(&self.ccm) * frobenius(&inv);
        if !(cond < MAX_CCM_CONDITION) {
            return Err(Error::InvalidParam(format!(
                "color correction matrix is ill-conditioned (condition {cond:.3e})"
            )));
        }
        Ok(inv)
    }

    fn map_pixels(img: &Image, f: impl Fn([f64; 3]) -> [f64; 3]) -> Result<Array3<f32>> {
        if img.channels() != 3 {
            return Err(Error::Shape(format!(
                "ISP expects 3 channels, image has {}",
                img.channels()
            )));
        }
        let mut out = img.data().clone();
        for mut px in out.lanes_mut(ndarray::Axis(2)) {
            let v = f([px[0] as f64, px[1] as f64, px[2] as f64]);
            for c in 0..3 {
                px[c] = v[c] as f32;
            }
        }
        Ok(out)
    }

    /// sRGB to linear camera space: inverse gamma, inverse CCM, divide by gains.
    /// The gamma curve is a pure power above a linear-space knee of 1e-3.
    pub fn unprocess(&self, img: &Image) -> Result<Image> {
        img.expect_colorspace(ColorSpace::Srgb)?;
        let inv = self.validate()?;
        let data = Self::map_pixels(img, |v| {
            let lin = v.map(|x| decode_gamma(x, self.gamma));
            let cam = mat_vec(&inv, lin);
            [0, 1, 2].map(|c| cam[c] / self.wb_gains[c])
        })?;
        Ok(img.map_data(data).retag(ColorSpace::Linear))
    }

    /// Exact inverse of [`IspParams::unprocess`].
    pub fn process(&self, img: &Image) -> Result<Image> {
        img.expect_colorspace(ColorSpace::Linear)?;
        self.validate()?;
        let data = Self::map_pixels(img, |v| {
            let cam = [0, 1, 2].map(|c| v[c] * self.wb_gains[c]);
            mat_vec(&self.ccm, cam).map(|x| encode_gamma(x, self.gamma))
        })?;
        Ok(img.map_data(data).retag(ColorSpace::Srgb))
    }
}
