//! Synthetic sharp bursts and long-exposure blur by frame averaging.

use std::f64::consts::TAU;
use std::sync::atomic::{AtomicUsize, Ordering};

use ndarray::Array3;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{ColorSpace, Image};
use crate::noise::{add_gaussian, apply_noise, IspParams, NoiseParams};

/// Largest allowed displacement over a burst, as a fraction of canvas width.
pub const MAX_DISPLACEMENT_FRACTION: f64 = 0.25;
pub const MIN_CANVAS: usize = 8;
/// Upper bound on the blurry-image noise std, in 8-bit units.
pub const MAX_BLUR_NOISE_SIGMA: f64 = 2.0;

/// An ordered stack of sharp frames sharing shape and colorspace.
#[derive(Debug, Clone, PartialEq)]
pub struct Burst {
    frames: Vec<Image>,
    pub frame_interval: f64,
}

impl Burst {
    pub fn new(frames: Vec<Image>, frame_interval: f64) -> Result<Self> {
        if frames.len() < 2 {
            return Err(Error::InvalidParam(format!(
                "a burst needs at least 2 frames, got {}",
                frames.len()
            )));
        }
        let (dims, cs) = (frames[0].dims(), frames[0].colorspace());
        for (i, f) in frames.iter().enumerate() {
            if f.dims() != dims || f.colorspace() != cs {
                return Err(Error::Shape(format!(
                    "frame {i} is {:?}/{:?}, frame 0 is {dims:?}/{cs:?}",
                    f.dims(),
                    f.colorspace()
                )));
            }
        }
        Ok(Self {
            frames,
            frame_interval,
        })
    }

    pub fn frames(&self) -> &[Image] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn colorspace(&self) -> ColorSpace {
        self.frames[0].colorspace()
    }

    pub fn middle_index(&self) -> usize {
        self.frames.len() / 2
    }

    /// The latent clean image: the middle frame.
    pub fn latent(&self) -> &Image {
        &self.frames[self.middle_index()]
    }

    fn map_frames(&self, f: impl Fn(&Image) -> Result<Image>) -> Result<Self> {
        Self::new(
            self.frames.iter().map(f).collect::<Result<_>>()?,
            self.frame_interval,
        )
    }
}

/// Pixel-wise mean of all frames.
pub fn average_blur(burst: &Burst) -> Result<Image> {
    let first = burst
        .frames
        .first()
        .ok_or_else(|| Error::InvalidParam("empty burst".into()))?;
    let mut acc = first.data().mapv(f64::from);
    for f in &burst.frames[1..] {
        acc.zip_mut_with(f.data(), |a, &b| *a += b as f64);
    }
    let n = burst.frames.len() as f64;
    Ok(first.map_data(acc.mapv(|v| (v / n) as f32)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Shape {
    Rectangle { half_w: f64, half_h: f64 },
    Ellipse { rx: f64, ry: f64 },
    /// Glyph-like strokes: segments in object-local coordinates.
    Glyph {
        segments: [[f64; 4]; 3],
        thickness: f64,
    },
}

impl Shape {
    fn contains(&self, dx: f64, dy: f64) -> bool {
        match *self {
            Shape::Rectangle { half_w, half_h } => dx.abs() <= half_w && dy.abs() <= half_h,
            Shape::Ellipse { rx, ry } => (dx / rx).powi(2) + (dy / ry).powi(2) <= 1.0,
            Shape::Glyph {
                segments,
                thickness,
            } => segments
                .iter()
                .any(|&[x0, y0, x1, y1]| segment_distance(dx, dy, x0, y0, x1, y1) <= thickness / 2.0),
        }
    }
}

fn segment_distance(px: f64, py: f64, x0: f64, y0: f64, x1: f64, y1: f64) -> f64 {
    let (vx, vy) = (x1 - x0, y1 - y0);
    let len2 = vx * vx + vy * vy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((px - x0) * vx + (py - y0) * vy) / len2).clamp(0.0, 1.0)
    };
    ((px - x0 - t * vx).powi(2) + (py - y0 - t * vy).powi(2)).sqrt()
}

/// A sinusoidal grating: `amplitude * sin(2pi (fx x + fy y) + phase)` weighted per channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grating {
    pub freq: [f64; 2],
    pub phase: f64,
    pub amplitude: f64,
    pub color: [f64; 3],
}

impl Grating {
    fn eval(&self, x: f64, y: f64) -> f64 {
        self.amplitude * (TAU * (self.freq[0] * x + self.freq[1] * y) + self.phase).sin()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: Shape,
    /// Position `(x, y)` in frame 0.
    pub center: [f64; 2],
    /// Pixels per frame, `(x, y)`.
    pub velocity: [f64; 2],
    pub color: [f64; 3],
    pub texture: Vec<Grating>,
}

/// Procedural scene: a textured background plus moving objects, viewed through a
/// randomly shaking camera.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub background_color: [f64; 3],
    pub background: Vec<Grating>,
    pub objects: Vec<SceneObject>,
    /// Std of the per-frame random-walk step of the camera, in pixels.
    pub shake_amplitude: f64,
    pub shake_seed: u64,
}

fn shade(base: [f64; 3], gratings: &[Grating], x: f64, y: f64) -> [f64; 3] {
    let mut c = base;
    for g in gratings {
        let v = g.eval(x, y);
        for k in 0..3 {
            c[k] += v * g.color[k];
        }
    }
    c
}

/// Options for [`SceneSpec::random`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneOptions {
    pub canvas: usize,
    pub max_objects: usize,
    /// Probability that an object moves.
    pub moving_probability: f64,
    /// Probability that the camera shakes.
    pub shake_probability: f64,
    pub max_shake: f64,
}

impl Default for SceneOptions {
    fn default() -> Self {
        Self {
            canvas: 96,
            max_objects: 5,
            moving_probability: 0.6,
            shake_probability: 0.3,
            max_shake: 0.3,
        }
    }
}

fn random_gratings<R: Rng + ?Sized>(rng: &mut R, count: usize, max_freq: f64, max_amp: f64) -> Vec<Grating> {
    (0..count)
        .map(|_| {
            let f = rng.random_range(0.02..max_freq);
            let angle = rng.random_range(0.0..TAU);
            let tint: f64 = rng.random_range(0.3..1.0);
            Grating {
                freq: [f * angle.cos(), f * angle.sin()],
                phase: rng.random_range(0.0..TAU),
                amplitude: rng.random_range(0.02..max_amp),
                color: [0, 1, 2].map(|_| tint * rng.random_range(0.5..1.0)),
            }
        })
        .collect()
}

impl SceneSpec {
    pub fn blank(height: usize, width: usize, background: f64) -> Self {
        Self {
            height,
            width,
            channels: 3,
            background_color: [background; 3],
            background: Vec::new(),
            objects: Vec::new(),
            shake_amplitude: 0.0,
            shake_seed: 0,
        }
    }

    /// A random textured scene whose total motion over `n_frames` stays within bounds.
    pub fn random<R: Rng + ?Sized>(opts: &SceneOptions, n_frames: usize, rng: &mut R) -> Self {
        let canvas = opts.canvas as f64;
        let steps = n_frames.saturating_sub(1).max(1) as f64;
        let shake = if rng.random_bool(opts.shake_probability) {
            rng.random_range(0.0..opts.max_shake)
        } else {
            0.0
        };
        // Leave room for roughly three std of shake drift.
        let shake_budget = 3.0 * shake * steps.sqrt();
        let max_speed = ((MAX_DISPLACEMENT_FRACTION * canvas - shake_budget) / steps).max(0.0) * 0.9;
        let n_objects = rng.random_range(1..=opts.max_objects.max(1));
        let objects = (0..n_objects)
            .map(|_| {
                let size = rng.random_range(0.08..0.22) * canvas;
                let shape = match rng.random_range(0..3) {
                    0 => Shape::Rectangle {
                        half_w: size * rng.random_range(0.5..1.0),
                        half_h: size * rng.random_range(0.5..1.0),
                    },
                    1 => Shape::Ellipse {
                        rx: size * rng.random_range(0.5..1.0),
                        ry: size * rng.random_range(0.5..1.0),
                    },
                    _ => Shape::Glyph {
                        segments: [0; 3].map(|_| {
                            [0; 4].map(|_| rng.random_range(-size..size))
                        }),
                        thickness: rng.random_range(1.5..4.0),
                    },
                };
                let velocity = if rng.random_bool(opts.moving_probability) {
                    let speed = rng.random_range(0.3 * max_speed..=max_speed.max(1e-9));
                    let angle = rng.random_range(0.0..TAU);
                    [speed * angle.cos(), speed * angle.sin()]
                } else {
                    [0.0, 0.0]
                };
                SceneObject {
                    shape,
                    center: [rng.random_range(0.0..canvas), rng.random_range(0.0..canvas)],
                    velocity,
                    color: [0; 3].map(|_| rng.random_range(0.1..0.9)),
                    texture: random_gratings(rng, 2, 0.35, 0.15),
                }
            })
            .collect();
        Self {
            height: opts.canvas,
            width: opts.canvas,
            channels: 3,
            background_color: [0; 3].map(|_| rng.random_range(0.3..0.7)),
            background: random_gratings(rng, 5, 0.3, 0.12),
            objects,
            shake_amplitude: shake,
            shake_seed: rng.random(),
        }
    }

    /// Camera offset `(x, y)` for each frame: a Gaussian random walk from the origin.
    pub fn shake_path(&self, n_frames: usize) -> Vec<[f64; 2]> {
        let mut rng = crate::rng::rng_from(&[self.shake_seed, crate::rng::tag::SCENE]);
        let mut pos = [0.0, 0.0];
        let mut path = Vec::with_capacity(n_frames);
        for t in 0..n_frames {
            if t > 0 && self.shake_amplitude > 0.0 {
                for p in pos.iter_mut() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *p += self.shake_amplitude * z;
                }
            }
            path.push(pos);
        }
        path
    }

    fn validate(&self, n_frames: usize) -> Result<()> {
        if self.height < MIN_CANVAS || self.width < MIN_CANVAS || !(1..=3).contains(&self.channels) {
            return Err(Error::InvalidParam(format!(
                "degenerate canvas {}x{}x{}",
                self.height, self.width, self.channels
            )));
        }
        let limit = MAX_DISPLACEMENT_FRACTION * self.width as f64;
        let shake = self.shake_path(n_frames);
        let steps = (n_frames - 1) as f64;
        for (i, o) in self.objects.iter().enumerate() {
            let d = (o.velocity[0] * steps).hypot(o.velocity[1] * steps);
            let worst = shake
                .iter()
                .map(|s| (s[0] + o.velocity[0] * steps).hypot(s[1] + o.velocity[1] * steps).max(d))
                .fold(d, f64::max);
            if worst > limit + 1e-9 {
                return Err(Error::InvalidParam(format!(
                    "object {i} moves {worst:.2} px over the burst, limit {limit:.2}"
                )));
            }
        }
        Ok(())
    }

    fn render_frame(&self, t: usize, shake: [f64; 2]) -> Array3<f32> {
        // 2x2 supersampling at quarter-pixel offsets
        const OFFSETS: [f64; 2] = [0.25, 0.75];
        let mut out = Array3::zeros((self.height, self.width, self.channels));
        let tf = t as f64;
        for y in 0..self.height {
            for x in 0..self.width {
                let mut acc = [0.0f64; 3];
                for oy in OFFSETS {
                    for ox in OFFSETS {
                        let sx = x as f64 + ox - shake[0];
                        let sy = y as f64 + oy - shake[1];
                        let mut c = shade(self.background_color, &self.background, sx, sy);
                        for o in &self.objects {
                            let dx = sx - (o.center[0] + o.velocity[0] * tf);
                            let dy = sy - (o.center[1] + o.velocity[1] * tf);
                            if o.shape.contains(dx, dy) {
                                c = shade(o.color, &o.texture, dx, dy);
                            }
                        }
                        for k in 0..3 {
                            acc[k] += c[k].clamp(0.0, 1.0);
                        }
                    }
                }
                for k in 0..self.channels {
                    out[[y, x, k]] = (acc[k] / 4.0) as f32;
                }
            }
        }
        out
    }
}

/// Render `n_frames` consecutive sharp sRGB frames of `spec`.
pub fn render_burst(spec: &SceneSpec, n_frames: usize) -> Result<Burst> {
    if n_frames < 2 {
        return Err(Error::InvalidParam(format!(
            "a burst needs at least 2 frames, got {n_frames}"
        )));
    }
    spec.validate(n_frames)?;
    let shake = spec.shake_path(n_frames);
    let frames = (0..n_frames)
        .map(|t| Image::new(spec.render_frame(t, shake[t]), ColorSpace::Srgb))
        .collect::<Result<Vec<_>>>()?;
    Burst::new(frames, 1.0)
}

/// Aligned blurry/noisy capture, with the latent clean image when synthetic.
///
/// Reads of the clean image are counted so training code can prove it never
/// looked at it.
#[derive(Debug)]
pub struct CapturePair {
    pub blurry: Image,
    /// Kept unclamped when synthesized in memory.
    pub noisy: Image,
    clean: Option<Image>,
    clean_reads: AtomicUsize,
    pub noise: NoiseParams,
    pub space: ColorSpace,
    pub isp: Option<IspParams>,
}

impl Clone for CapturePair {
    fn clone(&self) -> Self {
        Self {
            blurry: self.blurry.clone(),
            noisy: self.noisy.clone(),
            clean: self.clean.clone(),
            clean_reads: AtomicUsize::new(self.clean_reads()),
            noise: self.noise,
            space: self.space,
            isp: self.isp,
        }
    }
}

impl CapturePair {
    pub fn new(
        blurry: Image,
        noisy: Image,
        clean: Option<Image>,
        noise: NoiseParams,
        isp: Option<IspParams>,
    ) -> Result<Self> {
        blurry.same_shape(&noisy)?;
        let space = blurry.colorspace();
        if noisy.colorspace() != space {
            return Err(Error::ColorSpace {
                expected: space,
                found: noisy.colorspace(),
            });
        }
        if let Some(c) = &clean {
            c.same_shape(&blurry)?;
            if c.colorspace() != space {
                return Err(Error::ColorSpace {
                    expected: space,
                    found: c.colorspace(),
                });
            }
        }
        Ok(Self {
            blurry,
            noisy,
            clean,
            clean_reads: AtomicUsize::new(0),
            noise,
            space,
            isp,
        })
    }

    pub fn has_clean(&self) -> bool {
        self.clean.is_some()
    }

    pub fn clean(&self) -> Option<&Image> {
        self.clean_reads.fetch_add(1, Ordering::Relaxed);
        self.clean.as_ref()
    }

    pub fn clean_reads(&self) -> usize {
        self.clean_reads.load(Ordering::Relaxed)
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.blurry.dims()
    }
}

/// Build a training pair from a sharp burst.
///
/// `I` is the middle frame, `I_B` the frame average plus optional low-intensity
/// Gaussian noise (`blur_noise_sigma`, 8-bit units), `I_N = I + N` with `N` drawn
/// from `noise` and left unclamped. For the linear track every frame is unprocessed
/// before averaging, so blur happens in linear intensity.
pub fn make_pair<R: Rng + ?Sized>(
    burst: &Burst,
    noise: &NoiseParams,
    space: ColorSpace,
    isp: Option<&IspParams>,
    blur_noise_sigma: f64,
    rng: &mut R,
) -> Result<CapturePair> {
    if noise.requires_linear() && space != ColorSpace::Linear {
        return Err(Error::InvalidParam("sensor noise requires the linear track".into()));
    }
    if !(0.0..=MAX_BLUR_NOISE_SIGMA).contains(&blur_noise_sigma) {
        return Err(Error::InvalidParam(format!(
            "blurry-image noise std {blur_noise_sigma} outside [0, {MAX_BLUR_NOISE_SIGMA}]/255"
        )));
    }
    let frames = match (burst.colorspace(), space) {
        (a, b) if a == b => burst.clone(),
        (ColorSpace::Srgb, ColorSpace::Linear) => {
            let isp = isp.ok_or_else(|| {
                Error::InvalidParam("an sRGB burst on the linear track needs ISP parameters".into())
            })?;
            burst.map_frames(|f| isp.unprocess(f))?
        }
        (from, to) => {
            return Err(Error::InvalidParam(format!(
                "cannot build a {to:?} pair from a {from:?} burst"
            )))
        }
    };
    let clean = frames.latent().clone();
    let mut blurry = average_blur(&frames)?;
    if blur_noise_sigma > 0.0 {
        blurry = add_gaussian(&blurry, blur_noise_sigma / 255.0, true, rng)?;
    }
    let noisy = apply_noise(&clean, noise, false, rng)?;
    let isp = if space == ColorSpace::Linear { isp.copied() } else { None };
    CapturePair::new(blurry, noisy, Some(clean), *noise, isp)
}
