//! Dual-encoder U-Net restoration network and its checkpoint container.
//!
//! Each encoder level is two 3x3 conv + LeakyReLU blocks followed by a 2x max pool;
//! the decoder upsamples (nearest), concatenates the skip features of every encoder
//! at that level, and applies two more conv blocks. A final 3x3 conv maps to the
//! output channels. All parameters live in one flat vector.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Array3, Array4, ArrayView2, ArrayView3, ArrayView4, ArrayViewMut1, ArrayViewMut2, Axis, NdFloat};
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::sirt;
use crate::nn::ops;
use crate::nn::AdamState;
use crate::rng::{rng_from, tag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Separate encoders for the blurry and the noisy input.
    Dual,
    /// One encoder, one input.
    Single,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    #[default]
    ConcatSkips,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub n_levels: usize,
    pub base_channels: usize,
    /// Channels of each input branch.
    pub in_channels: usize,
    pub out_channels: usize,
    pub fusion: Fusion,
    pub variant: Variant,
    /// Add the (last) input to the output.
    pub residual: bool,
    pub leaky_slope: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            n_levels: 5,
            base_channels: 48,
            in_channels: 3,
            out_channels: 3,
            fusion: Fusion::ConcatSkips,
            variant: Variant::Dual,
            residual: false,
            leaky_slope: 0.1,
        }
    }
}

impl NetworkConfig {
    pub fn toy() -> Self {
        Self {
            n_levels: 3,
            base_channels: 16,
            ..Self::default()
        }
    }

    pub fn n_inputs(&self) -> usize {
        match self.variant {
            Variant::Dual => 2,
            Variant::Single => 1,
        }
    }

    /// Spatial dims must be multiples of this.
    pub fn divisor(&self) -> usize {
        1 << (self.n_levels - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_levels == 0 || self.n_levels > 8 {
            return Err(Error::Config(format!("n_levels {} outside 1..=8", self.n_levels)));
        }
        if self.base_channels == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.residual && self.in_channels != self.out_channels {
            return Err(Error::Config(
                "residual output needs matching input/output channels".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.leaky_slope) {
            return Err(Error::Config(format!("leaky slope {} outside [0, 1)", self.leaky_slope)));
        }
        Ok(())
    }

    /// Parameter count, a pure function of the configuration.
    pub fn param_count(&self) -> usize {
        Layout::new(self).total
    }
}

#[derive(Debug, Clone)]
struct ConvSpec {
    name: String,
    cin: usize,
    cout: usize,
    offset: usize,
}

impl ConvSpec {
    fn weight_len(&self) -> usize {
        self.cout * self.cin * 9
    }

    fn len(&self) -> usize {
        self.weight_len() + self.cout
    }
}

#[derive(Debug, Clone)]
struct Layout {
    /// `encoders[e][level]` = the level's two convs.
    encoders: Vec<Vec<[ConvSpec; 2]>>,
    /// `decoder[level]` for levels `0..n_levels-1`.
    decoder: Vec<[ConvSpec; 2]>,
    head: ConvSpec,
    total: usize,
}

impl Layout {
    fn new(cfg: &NetworkConfig) -> Self {
        let mut offset = 0;
        let mut conv = |name: String, cin: usize, cout: usize| {
            let spec = ConvSpec {
                name,
                cin,
                cout,
                offset,
            };
            offset += spec.len();
            spec
        };
        let c = cfg.base_channels;
        let n_enc = cfg.n_inputs();
        let encoders = (0..n_enc)
            .map(|e| {
                (0..cfg.n_levels)
                    .map(|l| {
                        let cin = if l == 0 { cfg.in_channels } else { c };
                        [
                            conv(format!("enc{e}.level{l}.conv0"), cin, c),
                            conv(format!("enc{e}.level{l}.conv1"), c, c),
                        ]
                    })
                    .collect()
            })
            .collect();
        let dec_width = 2 * c;
        let decoder = (0..cfg.n_levels.saturating_sub(1))
            .rev()
            .map(|l| {
                let below = if l + 2 == cfg.n_levels { n_enc * c } else { dec_width };
                [
                    conv(format!("dec.level{l}.conv0"), below + n_enc * c, dec_width),
                    conv(format!("dec.level{l}.conv1"), dec_width, dec_width),
                ]
            })
            .collect::<Vec<_>>()
            .into_iter()
            .rev()
            .collect();
        let head_in = if cfg.n_levels == 1 { n_enc * c } else { dec_width };
        let head = conv("head".into(), head_in, cfg.out_channels);
        Self {
            encoders,
            decoder,
            head,
            total: offset,
        }
    }

    fn convs(&self) -> impl Iterator<Item = &ConvSpec> {
        self.encoders
            .iter()
            .flat_map(|e| e.iter().flat_map(|l| l.iter()))
            .chain(self.decoder.iter().flat_map(|l| l.iter()))
            .chain(std::iter::once(&self.head))
    }
}

/// Unfolded input of a conv with the input's `(c, h, w)`.
struct ConvInput<T> {
    cols: Array2<T>,
    dims: (usize, usize, usize),
}

struct EncoderCache<T> {
    /// Inputs of conv0 and conv1 at each level.
    inputs: Vec<[ConvInput<T>; 2]>,
    mid: Vec<Array3<T>>,
    /// Post-activation output of conv1 at each level: the skip feature.
    skips: Vec<Array3<T>>,
    pool_args: Vec<Array3<u8>>,
}

struct DecoderCache<T> {
    inputs: [ConvInput<T>; 2],
    mid: Array3<T>,
    out: Array3<T>,
}

/// Activations of one sample needed for the backward pass.
struct SampleTrace<T> {
    encoders: Vec<EncoderCache<T>>,
    decoder: Vec<Option<DecoderCache<T>>>,
    head_input: ConvInput<T>,
}

/// Cached forward state for a batch.
pub struct Trace<T> {
    samples: Vec<SampleTrace<T>>,
}

/// Parameter gradients plus (optionally) gradients w.r.t. each input branch.
pub struct Gradients<T> {
    pub params: Vec<T>,
    pub inputs: Option<Vec<Array4<T>>>,
}

#[derive(Debug, Clone)]
pub struct UNet<T> {
    config: NetworkConfig,
    layout: Layout,
    params: Vec<T>,
}

fn cast<T: NdFloat>(v: f64) -> T {
    T::from(v).expect("representable")
}

impl<T: NdFloat> UNet<T> {
    /// He-uniform weights for the leaky ReLU slope, zero biases.
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut params = vec![T::zero(); layout.total];
        let mut rng = rng_from(&[seed, tag::INIT]);
        let a = config.leaky_slope;
        for spec in layout.convs() {
            let fan_in = (spec.cin * 9) as f64;
            let bound = (6.0 / ((1.0 + a * a) * fan_in)).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            for p in &mut params[spec.offset..spec.offset + spec.weight_len()] {
                *p = cast(dist.sample(&mut rng));
            }
        }
        Ok(Self {
            config,
            layout,
            params,
        })
    }

    pub fn from_params(config: NetworkConfig, params: Vec<T>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.total {
            return Err(Error::Shape(format!(
                "{} parameters for a network of {}",
                params.len(),
                layout.total
            )));
        }
        Ok(Self {
            config,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// `(name, dims, flat range)` for every weight and bias tensor.
    pub fn tensor_layout(&self) -> Vec<(String, Vec<usize>, std::ops::Range<usize>)> {
        self.layout
            .convs()
            .flat_map(|c| {
                let w_end = c.offset + c.weight_len();
                [
                    (format!("{}.weight", c.name), vec![c.cout, c.cin, 3, 3], c.offset..w_end),
                    (format!("{}.bias", c.name), vec![c.cout], w_end..w_end + c.cout),
                ]
            })
            .collect()
    }

    pub fn cast<U: NdFloat>(&self) -> UNet<U> {
        UNet {
            config: self.config,
            layout: self.layout.clone(),
            params: self.params.iter().map(|p| cast::<U>(p.to_f64().unwrap())).collect(),
        }
    }

    fn weights(&self, spec: &ConvSpec) -> (ArrayView2<'_, T>, ndarray::ArrayView1<'_, T>) {
        let w_end = spec.offset + spec.weight_len();
        let w = ArrayView2::from_shape((spec.cout, spec.cin * 9), &self.params[spec.offset..w_end])
            .expect("layout");
        let b = ndarray::ArrayView1::from(&self.params[w_end..w_end + spec.cout]);
        (w, b)
    }

    fn conv_act(&self, spec: &ConvSpec, x: ArrayView3<'_, T>, act: bool) -> (Array3<T>, ConvInput<T>) {
        let (w, b) = self.weights(spec);
        let dims = x.dim();
        let cols = ops::im2col(x);
        let mut y = ops::conv3x3_cols(cols.view(), w, b, dims.1, dims.2);
        if act {
            ops::leaky_relu_inplace(&mut y, cast(self.config.leaky_slope));
        }
        (y, ConvInput { cols, dims })
    }

    fn check_inputs(&self, inputs: &[ArrayView4<'_, T>]) -> Result<(usize, usize, usize)> {
        if inputs.len() != self.config.n_inputs() {
            return Err(Error::Shape(format!(
                "{:?} network takes {} inputs, got {}",
                self.config.variant,
                self.config.n_inputs(),
                inputs.len()
            )));
        }
        let (n, c, h, w) = inputs[0].dim();
        for x in inputs {
            if x.dim() != (n, c, h, w) {
                return Err(Error::Shape(format!("inputs {:?} vs {:?}", x.dim(), inputs[0].dim())));
            }
        }
        if c != self.config.in_channels {
            return Err(Error::Shape(format!(
                "{c} input channels, network expects {}",
                self.config.in_channels
            )));
        }
        let d = self.config.divisor();
        if h % d != 0 || w % d != 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!("{h}x{w} input not divisible by {d}")));
        }
        Ok((n, h, w))
    }

    fn forward_sample(&self, inputs: &[ArrayView3<'_, T>]) -> (Array3<T>, SampleTrace<T>) {
        let levels = self.config.n_levels;
        let encoders: Vec<EncoderCache<T>> = self
            .layout
            .encoders
            .iter()
            .zip(inputs)
            .map(|(enc, x)| {
                let mut cache = EncoderCache {
                    inputs: Vec::with_capacity(levels),
                    mid: Vec::with_capacity(levels),
                    skips: Vec::with_capacity(levels),
                    pool_args: Vec::with_capacity(levels),
                };
                for (l, [c0, c1]) in enc.iter().enumerate() {
                    let input = if l == 0 {
                        x.to_owned()
                    } else {
                        let (p, arg) = ops::maxpool2(cache.skips[l - 1].view());
                        cache.pool_args.push(arg);
                        p
                    };
                    let (mid, in0) = self.conv_act(c0, input.view(), true);
                    let (out, in1) = self.conv_act(c1, mid.view(), true);
                    cache.inputs.push([in0, in1]);
                    cache.mid.push(mid);
                    cache.skips.push(out);
                }
                cache
            })
            .collect();

        let bottom: Vec<ArrayView3<'_, T>> = encoders.iter().map(|e| e.skips[levels - 1].view()).collect();
        let mut x = ops::concat(&bottom);
        let mut decoder: Vec<Option<DecoderCache<T>>> = (0..levels.saturating_sub(1)).map(|_| None).collect();
        for l in (0..levels.saturating_sub(1)).rev() {
            let up = ops::upsample2(x.view());
            let mut parts = vec![up.view()];
            parts.extend(encoders.iter().map(|e| e.skips[l].view()));
            let cat = ops::concat(&parts);
            let [c0, c1] = &self.layout.decoder[l];
            let (mid, in0) = self.conv_act(c0, cat.view(), true);
            let (out, in1) = self.conv_act(c1, mid.view(), true);
            x = out.clone();
            decoder[l] = Some(DecoderCache {
                inputs: [in0, in1],
                mid,
                out,
            });
        }
        let (mut y, head_input) = self.conv_act(&self.layout.head, x.view(), false);
        if self.config.residual {
            y += &inputs[inputs.len() - 1];
        }
        (
            y,
            SampleTrace {
                encoders,
                decoder,
                head_input,
            },
        )
    }

    /// Differentiable forward pass. `inputs` is `[blurry, noisy]` for the dual
    /// variant or `[input]` for the single one, each `N x C x H x W`.
    pub fn forward(&self, inputs: &[ArrayView4<'_, T>]) -> Result<(Array4<T>, Trace<T>)> {
        let (n, h, w) = self.check_inputs(inputs)?;
        let mut out = Array4::zeros((n, self.config.out_channels, h, w));
        let mut samples = Vec::with_capacity(n);
        for i in 0..n {
            let xs: Vec<ArrayView3<'_, T>> = inputs.iter().map(|x| x.index_axis(Axis(0), i)).collect();
            let (y, trace) = self.forward_sample(&xs);
            out.index_axis_mut(Axis(0), i).assign(&y);
            samples.push(trace);
        }
        Ok((out, Trace { samples }))
    }

    /// Same values as [`UNet::forward`] with no trace retained, so nothing computed
    /// from the result can carry gradient back to the parameters.
    pub fn forward_nograd(&self, inputs: &[ArrayView4<'_, T>]) -> Result<Array4<T>> {
        let (n, h, w) = self.check_inputs(inputs)?;
        let mut out = Array4::zeros((n, self.config.out_channels, h, w));
        for i in 0..n {
            let xs: Vec<ArrayView3<'_, T>> = inputs.iter().map(|x| x.index_axis(Axis(0), i)).collect();
            let (y, _) = self.forward_sample(&xs);
            out.index_axis_mut(Axis(0), i).assign(&y);
        }
        Ok(out)
    }

    /// No-gradient inference at any size: replicate-pad to the divisibility
    /// requirement, run, crop back.
    pub fn infer(&self, inputs: &[ArrayView4<'_, T>]) -> Result<Array4<T>> {
        let (n, c, h, w) = inputs
            .first()
            .ok_or_else(|| Error::Shape("no inputs".into()))?
            .dim();
        let d = self.config.divisor();
        let (ph, pw) = (h.div_ceil(d) * d, w.div_ceil(d) * d);
        if (ph, pw) == (h, w) {
            return self.forward_nograd(inputs);
        }
        let padded: Vec<Array4<T>> = inputs
            .iter()
            .map(|x| {
                Array4::from_shape_fn((n, c, ph, pw), |(i, k, y, xx)| x[[i, k, y.min(h - 1), xx.min(w - 1)]])
            })
            .collect();
        let views: Vec<_> = padded.iter().map(|p| p.view()).collect();
        let out = self.forward_nograd(&views)?;
        Ok(out.slice(s![.., .., ..h, ..w]).to_owned())
    }

    fn conv_backward(
        &self,
        spec: &ConvSpec,
        x: &ConvInput<T>,
        dy: ArrayView3<'_, T>,
        grads: &mut [T],
        need_dx: bool,
    ) -> Option<Array3<T>> {
        let (w, _) = self.weights(spec);
        let region = &mut grads[spec.offset..spec.offset + spec.len()];
        let (gw, gb) = region.split_at_mut(spec.weight_len());
        let gw = ArrayViewMut2::from_shape((spec.cout, spec.cin * 9), gw).expect("layout");
        let gb = ArrayViewMut1::from(gb);
        ops::conv3x3_cols_backward(x.cols.view(), x.dims, w, dy, gw, gb, need_dx)
    }

    fn backward_sample(
        &self,
        trace: &SampleTrace<T>,
        d_out: ArrayView3<'_, T>,
        grads: &mut [T],
        need_input: bool,
    ) -> Option<Vec<Array3<T>>> {
        let slope: T = cast(self.config.leaky_slope);
        let levels = self.config.n_levels;
        let n_enc = self.config.n_inputs();
        let c = self.config.base_channels;

        let mut dx = self
            .conv_backward(&self.layout.head, &trace.head_input, d_out, grads, true)
            .expect("requested");
        let mut d_skips: Vec<Vec<Option<Array3<T>>>> = (0..n_enc).map(|_| (0..levels).map(|_| None).collect()).collect();
        let add = |slot: &mut Option<Array3<T>>, g: ArrayView3<'_, T>| match slot {
            Some(acc) => *acc += &g,
            None => *slot = Some(g.to_owned()),
        };

        for l in 0..levels.saturating_sub(1) {
            let cache = trace.decoder[l].as_ref().expect("decoder level cached");
            let [c0, c1] = &self.layout.decoder[l];
            ops::leaky_relu_backward_inplace(cache.out.view(), &mut dx, slope);
            let mut dmid = self
                .conv_backward(c1, &cache.inputs[1], dx.view(), grads, true)
                .expect("requested");
            ops::leaky_relu_backward_inplace(cache.mid.view(), &mut dmid, slope);
            let dcat = self
                .conv_backward(c0, &cache.inputs[0], dmid.view(), grads, true)
                .expect("requested");
            let up_ch = c0.cin - n_enc * c;
            for (e, skips) in d_skips.iter_mut().enumerate() {
                let lo = up_ch + e * c;
                add(&mut skips[l], dcat.slice(s![lo..lo + c, .., ..]));
            }
            dx = ops::upsample2_backward(dcat.slice(s![..up_ch, .., ..]));
        }
        for (e, skips) in d_skips.iter_mut().enumerate() {
            add(&mut skips[levels - 1], dx.slice(s![e * c..(e + 1) * c, .., ..]));
        }

        let mut input_grads = Vec::with_capacity(n_enc);
        for (e, enc) in self.layout.encoders.iter().enumerate() {
            let cache = &trace.encoders[e];
            let mut d_in = None;
            for l in (0..levels).rev() {
                let [c0, c1] = &enc[l];
                let mut g = d_skips[e][l].take().expect("every level receives gradient");
                ops::leaky_relu_backward_inplace(cache.skips[l].view(), &mut g, slope);
                let mut gmid = self
                    .conv_backward(c1, &cache.inputs[l][1], g.view(), grads, true)
                    .expect("requested");
                ops::leaky_relu_backward_inplace(cache.mid[l].view(), &mut gmid, slope);
                let need = l > 0 || need_input;
                let gin = self.conv_backward(c0, &cache.inputs[l][0], gmid.view(), grads, need);
                if l > 0 {
                    let gin = gin.expect("requested");
                    let (_, h, w) = cache.skips[l - 1].dim();
                    let back = ops::maxpool2_backward(gin.view(), &cache.pool_args[l - 1], h, w);
                    add(&mut d_skips[e][l - 1], back.view());
                } else {
                    d_in = gin;
                }
            }
            if let Some(mut d) = d_in {
                if self.config.residual && e == n_enc - 1 {
                    d += &d_out;
                }
                input_grads.push(d);
            }
        }
        need_input.then_some(input_grads)
    }

    /// Backpropagate `d_out` (gradient of a scalar w.r.t. the forward output).
    pub fn backward(&self, trace: &Trace<T>, d_out: ArrayView4<'_, T>, need_input_grads: bool) -> Result<Gradients<T>> {
        let n = trace.samples.len();
        if d_out.dim().0 != n || d_out.dim().1 != self.config.out_channels {
            return Err(Error::Shape(format!("output gradient {:?} for a batch of {n}", d_out.dim())));
        }
        let mut params = vec![T::zero(); self.params.len()];
        let mut inputs: Option<Vec<Array4<T>>> = None;
        for (i, sample) in trace.samples.iter().enumerate() {
            let gi = self.backward_sample(sample, d_out.index_axis(Axis(0), i), &mut params, need_input_grads);
            if let Some(gs) = gi {
                let acc = inputs.get_or_insert_with(|| {
                    gs.iter()
                        .map(|g| {
                            let (c, h, w) = g.dim();
                            Array4::zeros((n, c, h, w))
                        })
                        .collect()
                });
                for (a, g) in acc.iter_mut().zip(gs) {
                    a.index_axis_mut(Axis(0), i).assign(&g);
                }
            }
        }
        Ok(Gradients { params, inputs })
    }
}

/// Training checkpoint: parameters, optimizer moments and schedule position.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub network: NetworkConfig,
    pub params: Vec<f32>,
    pub adam: Option<AdamState<f32>>,
    /// Epochs completed.
    pub epoch: u64,
    /// Optimizer steps completed; with the seed this fixes every future random draw.
    pub step: u64,
    pub seed: u64,
    pub config_hash: String,
    /// Resolved run configuration, stored verbatim.
    pub run_config: serde_json::Value,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dims: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    format_version: u32,
    network: NetworkConfig,
    epoch: u64,
    step: u64,
    seed: u64,
    config_hash: String,
    adam_t: Option<u64>,
    tensors: Vec<TensorEntry>,
    run_config: serde_json::Value,
}

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

impl Checkpoint {
    /// Directory archive: `meta.json` plus one `.sirt` file per tensor under
    /// `params/`, and `adam_m/`, `adam_v/` when optimizer state is present.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let net = UNet::<f32>::from_params(self.network, self.params.clone())?;
        let layout = net.tensor_layout();
        let mut groups: Vec<(&str, &[f32])> = vec![("params", &self.params)];
        if let Some(a) = &self.adam {
            groups.push(("adam_m", &a.m));
            groups.push(("adam_v", &a.v));
        }
        for (group, values) in &groups {
            let sub = dir.join(group);
            fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
            for (name, dims, range) in &layout {
                sirt::write(&sub.join(format!("{name}.sirt")), dims, &values[range.clone()])?;
            }
        }
        let meta = CheckpointMeta {
            format_version: CHECKPOINT_FORMAT_VERSION,
            network: self.network,
            epoch: self.epoch,
            step: self.step,
            seed: self.seed,
            config_hash: self.config_hash.clone(),
            adam_t: self.adam.as_ref().map(|a| a.t),
            tensors: layout
                .iter()
                .map(|(name, dims, _)| TensorEntry {
                    name: name.clone(),
                    dims: dims.clone(),
                })
                .collect(),
            run_config: self.run_config.clone(),
        };
        let path = dir.join("meta.json");
        fs::write(&path, serde_json::to_vec_pretty(&meta)?).map_err(|e| Error::io(&path, e))
    }

    /// Load a checkpoint. When `expected_hash` is given it must match the stored
    /// configuration hash unless `force` is set.
    pub fn load(dir: &Path, expected_hash: Option<&str>, force: bool) -> Result<Self> {
        let path = dir.join("meta.json");
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let meta: CheckpointMeta = serde_json::from_slice(&bytes)?;
        if meta.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Decode {
                path,
                reason: format!("unsupported checkpoint version {}", meta.format_version),
            });
        }
        if let Some(h) = expected_hash {
            if h != meta.config_hash && !force {
                return Err(Error::Config(format!(
                    "checkpoint config hash {} does not match {h} (use --force to override)",
                    meta.config_hash
                )));
            }
        }
        let total = meta.network.param_count();
        let layout = UNet::<f32>::from_params(meta.network, vec![0.0; total])?.tensor_layout();
        if meta.tensors.len() != layout.len() {
            return Err(Error::Shape(format!(
                "checkpoint lists {} tensors, network has {}",
                meta.tensors.len(),
                layout.len()
            )));
        }
        let read_group = |group: &str| -> Result<Vec<f32>> {
            let mut out = vec![0.0f32; total];
            for (name, dims, range) in &layout {
                let p: PathBuf = dir.join(group).join(format!("{name}.sirt"));
                let tensor = sirt::read(&p)?;
                if &tensor.dims != dims {
                    return Err(Error::Decode {
                        path: p,
                        reason: format!("dims {:?}, network expects {dims:?}", tensor.dims),
                    });
                }
                out[range.clone()].copy_from_slice(&tensor.data);
            }
            Ok(out)
        };
        let params = read_group("params")?;
        let adam = match meta.adam_t {
            Some(t) => Some(AdamState {
                m: read_group("adam_m")?,
                v: read_group("adam_v")?,
                t,
            }),
            None => None,
        };
        Ok(Self {
            network: meta.network,
            params,
            adam,
            epoch: meta.epoch,
            step: meta.step,
            seed: meta.seed,
            config_hash: meta.config_hash,
            run_config: meta.run_config,
        })
    }

    pub fn network(&self) -> Result<UNet<f32>> {
        UNet::from_params(self.network, self.params.clone())
    }
}

/// Draw a batch-shaped tensor of uniform values; handy for probes and tests.
pub fn random_tensor<T: NdFloat, R: Rng + ?Sized>(dims: (usize, usize, usize, usize), rng: &mut R) -> Array4<T> {
    Array4::from_shape_fn(dims, |_| cast(rng.random_range(0.0..1.0)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(variant: Variant) -> NetworkConfig {
        NetworkConfig {
            n_levels: 2,
            base_channels: 2,
            in_channels: 1,
            out_channels: 1,
            variant,
            ..NetworkConfig::default()
        }
    }

    #[test]
    fn shape_contract() {
        let cfg = NetworkConfig {
            n_levels: 2,
            ..NetworkConfig::toy()
        };
        let net = UNet::<f32>::new(cfg, 0).unwrap();
        let mut rng = rng_from(&[1]);
        let b = random_tensor::<f32, _>((2, 3, 16, 16), &mut rng);
        let n = random_tensor::<f32, _>((2, 3, 16, 16), &mut rng);
        let (y, _) = net.forward(&[b.view(), n.view()]).unwrap();
        assert_eq!(y.dim(), (2, 3, 16, 16));
        assert!(net.forward(&[b.view()]).is_err());
        let odd = random_tensor::<f32, _>((1, 3, 15, 16), &mut rng);
        assert!(net.forward(&[odd.view(), odd.view()]).is_err());
        let wrong_c = random_tensor::<f32, _>((2, 1, 16, 16), &mut rng);
        assert!(net.forward(&[wrong_c.view(), wrong_c.view()]).is_err());
    }

    #[test]
    fn param_count_formula() {
        // toy dual, 3 levels, c = 16, 3 -> 3 channels
        let c = 16;
        let enc = (3 * 9 * c + c) + (c * 9 * c + c) + 2 * ((c * 9 * c + c) * 2);
        let dec_bottom = (2 * c + 2 * c) * 9 * 2 * c + 2 * c + (2 * c * 9 * 2 * c + 2 * c);
        let dec_top = (2 * c + 2 * c) * 9 * 2 * c + 2 * c + (2 * c * 9 * 2 * c + 2 * c);
        let head = 2 * c * 9 * 3 + 3;
        assert_eq!(NetworkConfig::toy().param_count(), 2 * enc + dec_bottom + dec_top + head);
        assert_eq!(NetworkConfig::toy().param_count(), 80_387);
        assert_eq!(NetworkConfig::default().param_count(), 1_375_491);
        assert_eq!(
            UNet::<f32>::new(NetworkConfig::toy(), 3).unwrap().num_params(),
            NetworkConfig::toy().param_count()
        );
    }

    #[test]
    fn both_branches_matter() {
        let net = UNet::<f64>::new(tiny(Variant::Dual), 4).unwrap();
        let mut rng = rng_from(&[2]);
        let b = random_tensor::<f64, _>((1, 1, 8, 8), &mut rng);
        let n = random_tensor::<f64, _>((1, 1, 8, 8), &mut rng);
        let y = net.forward_nograd(&[b.view(), n.view()]).unwrap();
        let zero = Array4::zeros(n.dim());
        let y0 = net.forward_nograd(&[b.view(), zero.view()]).unwrap();
        let yb0 = net.forward_nograd(&[zero.view(), n.view()]).unwrap();
        assert!((&y - &y0).iter().any(|d| d.abs() > 1e-9));
        assert!((&y - &yb0).iter().any(|d| d.abs() > 1e-9));
    }

    #[test]
    fn nograd_matches_forward_bitwise() {
        let net = UNet::<f32>::new(NetworkConfig { n_levels: 2, ..NetworkConfig::toy() }, 5).unwrap();
        let mut rng = rng_from(&[3]);
        let b = random_tensor::<f32, _>((2, 3, 8, 8), &mut rng);
        let n = random_tensor::<f32, _>((2, 3, 8, 8), &mut rng);
        let (y, _) = net.forward(&[b.view(), n.view()]).unwrap();
        assert_eq!(y, net.forward_nograd(&[b.view(), n.view()]).unwrap());
    }

    fn fd_check(cfg: NetworkConfig, seed: u64) {
        let net = UNet::<f64>::new(cfg, seed).unwrap();
        let mut rng = rng_from(&[seed, 99]);
        let inputs: Vec<Array4<f64>> = (0..cfg.n_inputs())
            .map(|_| random_tensor((2, cfg.in_channels, 8, 8), &mut rng))
            .collect();
        let views: Vec<_> = inputs.iter().map(|x| x.view()).collect();
        let weights = random_tensor::<f64, _>((2, cfg.out_channels, 8, 8), &mut rng);
        let objective = |net: &UNet<f64>, views: &[ArrayView4<'_, f64>]| {
            let y = net.forward_nograd(views).unwrap();
            (&y * &y * &weights).sum() * 0.5
        };
        let (y, trace) = net.forward(&views).unwrap();
        let d_out = &y * &weights;
        let g = net.backward(&trace, d_out.view(), true).unwrap();
        let step = 1e-6;
        let mut checked = 0;
        for i in (0..net.num_params()).step_by(net.num_params() / 25 + 1) {
            let mut plus = net.clone();
            plus.params_mut()[i] += step;
            let mut minus = net.clone();
            minus.params_mut()[i] -= step;
            let fd = (objective(&plus, &views) - objective(&minus, &views)) / (2.0 * step);
            let an = g.params[i];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
            assert!(rel < 1e-3 || (fd - an).abs() < 1e-7, "param {i}: fd {fd} analytic {an}");
            checked += 1;
        }
        assert!(checked >= 20);
        let gi = g.inputs.unwrap();
        for (k, idx) in [(0usize, [0usize, 0, 3, 4]), (cfg.n_inputs() - 1, [1, 0, 7, 0])] {
            let mut plus = inputs.clone();
            plus[k][idx] += step;
            let mut minus = inputs.clone();
            minus[k][idx] -= step;
            let pv: Vec<_> = plus.iter().map(|x| x.view()).collect();
            let mv: Vec<_> = minus.iter().map(|x| x.view()).collect();
            let fd = (objective(&net, &pv) - objective(&net, &mv)) / (2.0 * step);
            let an = gi[k][idx];
            assert!((fd - an).abs() <= 1e-3 * fd.abs().max(an.abs()).max(1e-4), "input {k}{idx:?}: {fd} vs {an}");
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        fd_check(tiny(Variant::Dual), 11);
        fd_check(tiny(Variant::Single), 12);
        fd_check(
            NetworkConfig {
                n_levels: 3,
                residual: true,
                ..tiny(Variant::Dual)
            },
            13,
        );
    }

    #[test]
    fn infer_pads_and_crops() {
        let net = UNet::<f32>::new(NetworkConfig { n_levels: 3, base_channels: 4, ..NetworkConfig::toy() }, 1).unwrap();
        let mut rng = rng_from(&[4]);
        let x = random_tensor::<f32, _>((1, 3, 10, 14), &mut rng);
        let y = net.infer(&[x.view(), x.view()]).unwrap();
        assert_eq!(y.dim(), (1, 3, 10, 14));
        let aligned = random_tensor::<f32, _>((1, 3, 8, 8), &mut rng);
        assert_eq!(
            net.infer(&[aligned.view(), aligned.view()]).unwrap(),
            net.forward_nograd(&[aligned.view(), aligned.view()]).unwrap()
        );
    }

    #[test]
    fn deterministic_init() {
        let a = UNet::<f32>::new(NetworkConfig::toy(), 9).unwrap();
        let b = UNet::<f32>::new(NetworkConfig::toy(), 9).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), UNet::<f32>::new(NetworkConfig::toy(), 10).unwrap().params());
    }

    #[test]
    fn checkpoint_round_trip_and_hash_guard() {
        let cfg = NetworkConfig::toy();
        let net = UNet::<f32>::new(cfg, 2).unwrap();
        let mut adam = AdamState::new(net.num_params());
        adam.t = 7;
        adam.m[3] = 0.5;
        let ck = Checkpoint {
            network: cfg,
            params: net.params().to_vec(),
            adam: Some(adam),
            epoch: 3,
            step: 42,
            seed: 17,
            config_hash: "abc".into(),
            run_config: serde_json::json!({"mode": "selfir"}),
        };
        let dir = tempfile::tempdir().unwrap();
        ck.save(dir.path()).unwrap();
        assert!(dir.path().join("params/head.weight.sirt").exists());
        assert_eq!(Checkpoint::load(dir.path(), Some("abc"), false).unwrap(), ck);
        assert!(matches!(Checkpoint::load(dir.path(), Some("xyz"), false), Err(Error::Config(_))));
        assert_eq!(Checkpoint::load(dir.path(), Some("xyz"), true).unwrap(), ck);
    }
}
