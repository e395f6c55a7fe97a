//! Style-based generator and convolutional critic, desk scale.
//!
//! The generator is a mapping network (z -> w) feeding a synthesis ladder
//! of modulated 3x3 convolutions with per-layer noise injection and
//! per-resolution tRGB skip outputs. Weights are stored unscaled and
//! multiplied by 1/sqrt(fan_in) at use (equalized learning rate).
//!
//! Models own plain f64 parameter arrays; every forward pass stages them
//! onto a fresh tape as leaves. Staged with `requires_grad = false`, a
//! model contributes constants, which is how the source model is detached
//! inside the feature-matching term.

use std::collections::BTreeMap;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::rng::{normal_vec, stream_rng};
use crate::tensor::{Tape, TensorId};

pub const LRELU_SLOPE: f64 = 0.2;
const DEMOD_EPS: f64 = 1e-8;

// ── Configuration ───────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub z_dim: usize,
    pub w_dim: usize,
    pub base_resolution: usize,
    pub final_resolution: usize,
    /// Channel count per resolution; filled by the constructors.
    pub channels_per_resolution: BTreeMap<usize, usize>,
    pub mapping_layers: usize,
    /// Use an all-zeros anchor point instead of a seeded Gaussian draw.
    #[serde(default)]
    pub anchor_zero: bool,
}

impl GeneratorConfig {
    /// Desk default: 32x32 output, 64 channels at 4x4 halving upward.
    pub fn desk(final_resolution: usize) -> Result<Self> {
        let cfg = GeneratorConfig {
            z_dim: 64,
            w_dim: 64,
            base_resolution: 4,
            final_resolution,
            channels_per_resolution: channel_ladder(4, final_resolution, 64),
            mapping_layers: 2,
            anchor_zero: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Tiny 8x8 configuration for gradient checks.
    pub fn toy() -> Self {
        GeneratorConfig {
            z_dim: 8,
            w_dim: 8,
            base_resolution: 4,
            final_resolution: 8,
            channels_per_resolution: channel_ladder(4, 8, 8),
            mapping_layers: 2,
            anchor_zero: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.final_resolution.is_power_of_two()
            || !self.base_resolution.is_power_of_two()
            || self.final_resolution < self.base_resolution
        {
            return Err(err_config!(
                "final_resolution {} must be a power of two >= base_resolution {}",
                self.final_resolution,
                self.base_resolution
            ));
        }
        if self.z_dim == 0 || self.w_dim == 0 || self.mapping_layers == 0 {
            return Err(err_config!("z_dim, w_dim and mapping_layers must be positive"));
        }
        for res in self.resolutions() {
            if !self.channels_per_resolution.contains_key(&res) {
                return Err(err_config!("channels_per_resolution is missing resolution {res}"));
            }
        }
        Ok(())
    }

    /// Resolutions of the synthesis ladder, base first.
    pub fn resolutions(&self) -> Vec<usize> {
        let mut out = Vec::new();
        let mut r = self.base_resolution;
        while r <= self.final_resolution {
            out.push(r);
            r *= 2;
        }
        out
    }

    pub fn channels(&self, res: usize) -> usize {
        self.channels_per_resolution[&res]
    }

    /// Number of feature convolution layers: one at the base resolution,
    /// two per doubling above it.
    pub fn feature_layer_count(&self) -> usize {
        1 + 2 * (self.resolutions().len() - 1)
    }

    /// Output resolution of feature layer `l` (0-based).
    pub fn layer_resolution(&self, l: usize) -> usize {
        if l == 0 {
            self.base_resolution
        } else {
            self.base_resolution << ((l + 1) / 2)
        }
    }

    /// Input/output channels of feature layer `l`.
    pub fn layer_channels(&self, l: usize) -> (usize, usize) {
        let out_res = self.layer_resolution(l);
        let in_res = if l == 0 {
            self.base_resolution
        } else if l % 2 == 1 {
            out_res / 2
        } else {
            out_res
        };
        (self.channels(in_res), self.channels(out_res))
    }
}

fn channel_ladder(base: usize, final_res: usize, base_channels: usize) -> BTreeMap<usize, usize> {
    let mut map = BTreeMap::new();
    let mut r = base;
    let mut c = base_channels;
    while r <= final_res {
        map.insert(r, c.max(4));
        r *= 2;
        c /= 2;
    }
    map
}

// ── Parameter store ─────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Ordered, name-addressable parameter set. Ordering is the checkpoint
/// contract: it never depends on insertion-time hashing.
#[derive(Debug, Clone, Default)]
pub struct Params {
    entries: Vec<(String, ParamTensor)>,
    index: HashMap<String, usize>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>) {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "param {name}");
        assert!(!self.index.contains_key(name), "duplicate param {name}");
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), ParamTensor { shape, data }));
    }

    pub fn get(&self, name: &str) -> Option<&ParamTensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamTensor> {
        let i = *self.index.get(name)?;
        Some(&mut self.entries[i].1)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamTensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ParamTensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_elements(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.data.len()).sum()
    }

    /// Stage every parameter onto a tape, preserving order.
    pub fn stage(&self, tape: &mut Tape, requires_grad: bool) -> StagedParams {
        let ids = self
            .entries
            .iter()
            .map(|(_, t)| tape.leaf(t.data.clone(), t.shape.clone(), requires_grad))
            .collect();
        StagedParams { ids, index: self.index.clone() }
    }
}

/// Tape handles for one staged parameter set.
pub struct StagedParams {
    ids: Vec<TensorId>,
    index: HashMap<String, usize>,
}

impl StagedParams {
    pub fn id(&self, name: &str) -> TensorId {
        self.ids[*self.index.get(name).unwrap_or_else(|| panic!("no param named {name}"))]
    }

    pub fn ids(&self) -> &[TensorId] {
        &self.ids
    }
}

// ── Models ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct GeneratorModel {
    pub config: GeneratorConfig,
    pub params: Params,
    pub anchor_seed: u64,
}

#[derive(Debug, Clone)]
pub struct DiscriminatorModel {
    pub config: GeneratorConfig,
    pub params: Params,
}

impl GeneratorModel {
    pub fn init(config: GeneratorConfig, init_seed: u64, anchor_seed: u64) -> Self {
        let mut rng = stream_rng(init_seed, "init.g");
        let mut p = Params::new();
        for i in 0..config.mapping_layers {
            let (fi, fo) = (if i == 0 { config.z_dim } else { config.w_dim }, config.w_dim);
            p.insert(&format!("mapping.{i}.weight"), vec![fi, fo], normal_vec(&mut rng, fi * fo));
            p.insert(&format!("mapping.{i}.bias"), vec![fo], vec![0.0; fo]);
        }
        let base_c = config.channels(config.base_resolution);
        let br = config.base_resolution;
        p.insert("synthesis.const", vec![base_c, br, br], normal_vec(&mut rng, base_c * br * br));
        for l in 0..config.feature_layer_count() {
            let (ci, co) = config.layer_channels(l);
            let pre = format!("synthesis.conv{l}");
            p.insert(&format!("{pre}.affine.weight"), vec![config.w_dim, ci], normal_vec(&mut rng, config.w_dim * ci));
            p.insert(&format!("{pre}.affine.bias"), vec![ci], vec![1.0; ci]);
            p.insert(&format!("{pre}.weight"), vec![co, ci, 3, 3], normal_vec(&mut rng, co * ci * 9));
            p.insert(&format!("{pre}.bias"), vec![co], vec![0.0; co]);
            // Nonzero so the stochastic channel is alive from the start;
            // the anchored-subspace mechanism depends on noise having an
            // effect on features.
            p.insert(&format!("{pre}.noise_strength"), vec![1], vec![1.0]);
        }
        for (k, res) in config.resolutions().iter().enumerate() {
            let c = config.channels(*res);
            let pre = format!("synthesis.trgb{k}");
            p.insert(&format!("{pre}.affine.weight"), vec![config.w_dim, c], normal_vec(&mut rng, config.w_dim * c));
            p.insert(&format!("{pre}.affine.bias"), vec![c], vec![1.0; c]);
            p.insert(&format!("{pre}.weight"), vec![3, c, 1, 1], normal_vec(&mut rng, 3 * c));
            p.insert(&format!("{pre}.bias"), vec![3], vec![0.0; 3]);
        }
        GeneratorModel { config, params: p, anchor_seed }
    }
}

impl DiscriminatorModel {
    pub fn init(config: GeneratorConfig, init_seed: u64) -> Self {
        let mut rng = stream_rng(init_seed, "init.d");
        let mut p = Params::new();
        let top = config.final_resolution;
        let c_top = config.channels(top);
        p.insert("d.from_rgb.weight", vec![c_top, 3, 1, 1], normal_vec(&mut rng, c_top * 3));
        p.insert("d.from_rgb.bias", vec![c_top], vec![0.0; c_top]);
        let mut res = top;
        let mut k = 0;
        while res > config.base_resolution {
            let (ci, co) = (config.channels(res), config.channels(res / 2));
            let pre = format!("d.block{k}");
            p.insert(&format!("{pre}.weight"), vec![co, ci, 3, 3], normal_vec(&mut rng, co * ci * 9));
            p.insert(&format!("{pre}.bias"), vec![co], vec![0.0; co]);
            res /= 2;
            k += 1;
        }
        let cb = config.channels(config.base_resolution);
        p.insert("d.final.weight", vec![cb, cb, 3, 3], normal_vec(&mut rng, cb * cb * 9));
        p.insert("d.final.bias", vec![cb], vec![0.0; cb]);
        let flat = cb * config.base_resolution * config.base_resolution;
        p.insert("d.dense0.weight", vec![flat, 64], normal_vec(&mut rng, flat * 64));
        p.insert("d.dense0.bias", vec![64], vec![0.0; 64]);
        p.insert("d.dense1.weight", vec![64, 1], normal_vec(&mut rng, 64));
        p.insert("d.dense1.bias", vec![1], vec![0.0; 1]);
        DiscriminatorModel { config, params: p }
    }
}

// ── Noise bundles ───────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseMode {
    Random,
    Anchored,
    Interpolated(f64),
}

/// Per-layer noise fields, one single-channel field per feature layer.
#[derive(Debug, Clone)]
pub struct NoiseBundle {
    pub fields: Vec<Vec<f64>>,
    pub mode: NoiseMode,
}

impl NoiseBundle {
    pub fn zeros(config: &GeneratorConfig) -> Self {
        let fields = (0..config.feature_layer_count())
            .map(|l| {
                let r = config.layer_resolution(l);
                vec![0.0; r * r]
            })
            .collect();
        NoiseBundle { fields, mode: NoiseMode::Anchored }
    }
}

fn draw_fields(config: &GeneratorConfig, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..config.feature_layer_count())
        .map(|l| {
            let r = config.layer_resolution(l);
            normal_vec(rng, r * r)
        })
        .collect()
}

/// The anchor point: a fixed noise realization regenerated from the
/// model's anchor seed (or zeros when configured).
pub fn anchored_fields(model: &GeneratorModel) -> Vec<Vec<f64>> {
    if model.config.anchor_zero {
        return NoiseBundle::zeros(&model.config).fields;
    }
    let mut rng = stream_rng(model.anchor_seed, "anchor");
    draw_fields(&model.config, &mut rng)
}

/// Draw a noise bundle. `Random` consumes `rng`; `Anchored` ignores it and
/// regenerates from the anchor seed; `Interpolated(a)` blends
/// a * p_anch + (1 - a) * p_rand elementwise, consuming `rng` exactly like
/// `Random` does.
pub fn sample_noise(
    rng: &mut rand_chacha::ChaCha8Rng,
    model: &GeneratorModel,
    mode: NoiseMode,
) -> Result<NoiseBundle> {
    match mode {
        NoiseMode::Random => Ok(NoiseBundle { fields: draw_fields(&model.config, rng), mode }),
        NoiseMode::Anchored => Ok(NoiseBundle { fields: anchored_fields(model), mode }),
        NoiseMode::Interpolated(alpha) => {
            if !(0.0..=1.0).contains(&alpha) {
                return Err(err_contract!("interpolation weight {alpha} outside [0, 1]"));
            }
            let rand_fields = draw_fields(&model.config, rng);
            // Endpoints reproduce the parent bundles bit-for-bit.
            if alpha == 1.0 {
                return Ok(NoiseBundle { fields: anchored_fields(model), mode });
            }
            if alpha == 0.0 {
                return Ok(NoiseBundle { fields: rand_fields, mode });
            }
            let anch = anchored_fields(model);
            let fields = anch
                .into_iter()
                .zip(rand_fields)
                .map(|(a, r)| {
                    a.into_iter().zip(r).map(|(av, rv)| alpha * av + (1.0 - alpha) * rv).collect()
                })
                .collect();
            Ok(NoiseBundle { fields, mode })
        }
    }
}

// ── Generator forward ───────────────────────────────────────────────────

/// z -> w. z rows are RMS-normalized (rejecting zero rows), then passed
/// through the mapping stack; the final layer is linear.
pub fn map_latent(
    tape: &mut Tape,
    config: &GeneratorConfig,
    gp: &StagedParams,
    z: TensorId,
) -> Result<TensorId> {
    let shape = tape.shape(z).to_vec();
    if shape.len() != 2 || shape[1] != config.z_dim {
        return Err(err_dim!("map_latent: z shape {:?}, expected [N, {}]", shape, config.z_dim));
    }
    let data = tape.data(z);
    if data.iter().any(|v| !v.is_finite()) {
        return Err(err_contract!("map_latent: z contains non-finite values"));
    }
    for row in 0..shape[0] {
        let r = &data[row * shape[1]..(row + 1) * shape[1]];
        if r.iter().all(|&v| v == 0.0) {
            return Err(err_contract!("map_latent: z row {row} is the zero vector"));
        }
    }
    let ms = tape.row_mean_square(z)?;
    let inv = tape.rsqrt(ms);
    let mut x = tape.row_scale(z, inv)?;
    for i in 0..config.mapping_layers {
        let fan_in = if i == 0 { config.z_dim } else { config.w_dim };
        let w = gp.id(&format!("mapping.{i}.weight"));
        let b = gp.id(&format!("mapping.{i}.bias"));
        let ws = tape.scale(w, 1.0 / (fan_in as f64).sqrt());
        let lin = tape.matmul(x, ws)?;
        x = tape.bias_row(lin, b)?;
        if i + 1 < config.mapping_layers {
            x = tape.leaky_relu(x, LRELU_SLOPE);
        }
    }
    Ok(x)
}

/// What a synthesis pass should record besides the image.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SynthTaps {
    pub features: bool,
    pub rgb: bool,
}

pub struct SynthOutput {
    /// [N, 3, R, R] image (unbounded; consumers clamp to [-1, 1]).
    pub image: TensorId,
    /// Feature-layer outputs F_1..F_L (post noise, bias, activation).
    pub features: Vec<TensorId>,
    /// Per-resolution tRGB outputs before skip summation.
    pub rgb_taps: Vec<TensorId>,
}

/// Style source for a synthesis pass: derived from w, or explicit
/// per-layer style vectors (batch 1) in unified ladder order.
enum StyleSource<'a> {
    FromW(TensorId),
    Explicit(&'a StyleSpaceVector),
}

/// Modulated conv: scale input channels by s, convolve with the
/// fan-in-scaled weight, then rescale output channels by the inverse RMS
/// of the modulated kernel rows.
fn modulated_conv(
    tape: &mut Tape,
    x: TensorId,
    weight: TensorId,
    fan_in: usize,
    s: TensorId,
    demodulate: bool,
) -> Result<TensorId> {
    let ws = tape.scale(weight, 1.0 / (fan_in as f64).sqrt());
    let xm = tape.channel_scale(x, s)?;
    let y = tape.conv2d(xm, ws)?;
    if !demodulate {
        return Ok(y);
    }
    let w2 = tape.weight_sq_rowsum(ws)?;
    let w2t = tape.transpose(w2)?;
    let s2 = tape.mul(s, s)?;
    let denom = tape.matmul(s2, w2t)?;
    let denom = tape.add_scalar(denom, DEMOD_EPS);
    let d = tape.rsqrt(denom);
    tape.channel_scale(y, d)
}

fn style_for(
    tape: &mut Tape,
    gp: &StagedParams,
    w_dim: usize,
    source: &StyleSource,
    prefix: &str,
    batch: usize,
    style_idx: usize,
) -> Result<TensorId> {
    match source {
        StyleSource::FromW(w) => {
            let aw = gp.id(&format!("{prefix}.affine.weight"));
            let ab = gp.id(&format!("{prefix}.affine.bias"));
            let aws = tape.scale(aw, 1.0 / (w_dim as f64).sqrt());
            let lin = tape.matmul(*w, aws)?;
            tape.bias_row(lin, ab)
        }
        StyleSource::Explicit(sv) => {
            if batch != 1 {
                return Err(err_contract!("explicit styles support batch size 1"));
            }
            let v = sv
                .per_layer
                .get(style_idx)
                .ok_or_else(|| err_dim!("style vector missing layer {style_idx}"))?;
            Ok(tape.constant(v.clone(), vec![1, v.len()]))
        }
    }
}

fn synthesize_impl(
    tape: &mut Tape,
    config: &GeneratorConfig,
    gp: &StagedParams,
    style: StyleSource,
    batch: usize,
    noise: &NoiseBundle,
    taps: SynthTaps,
) -> Result<SynthOutput> {
    let layer_count = config.feature_layer_count();
    if noise.fields.len() != layer_count {
        return Err(err_dim!(
            "noise bundle has {} fields, config needs {}",
            noise.fields.len(),
            layer_count
        ));
    }
    for (l, f) in noise.fields.iter().enumerate() {
        let r = config.layer_resolution(l);
        if f.len() != r * r {
            return Err(err_dim!("noise field {l} has {} elements, expected {}", f.len(), r * r));
        }
    }

    let base_c = config.channels(config.base_resolution);
    let br = config.base_resolution;
    let cst = gp.id("synthesis.const");
    let cst = tape.reshape(cst, vec![1, base_c, br, br])?;
    let mut x = if batch == 1 { cst } else { tile_const(tape, cst, batch)? };

    let mut features = Vec::new();
    let mut rgb_taps = Vec::new();
    let mut style_idx = 0usize;
    let mut layer = 0usize;
    let mut acc: Option<TensorId> = None;

    for (k, &res) in config.resolutions().iter().enumerate() {
        let convs_here = if k == 0 { 1 } else { 2 };
        for step in 0..convs_here {
            if k > 0 && step == 0 {
                x = tape.resample_up2(x)?;
            }
            let pre = format!("synthesis.conv{layer}");
            let (ci, _) = config.layer_channels(layer);
            let s = style_for(tape, gp, config.w_dim, &style, &pre, batch, style_idx)?;
            style_idx += 1;
            let wt = gp.id(&format!("{pre}.weight"));
            let y = modulated_conv(tape, x, wt, ci * 9, s, true)?;
            let field = tape.constant(noise.fields[layer].clone(), vec![res, res]);
            let strength = gp.id(&format!("{pre}.noise_strength"));
            let y = tape.add_noise(y, field, strength)?;
            let b = gp.id(&format!("{pre}.bias"));
            let y = tape.bias_channel(y, b)?;
            x = tape.leaky_relu(y, LRELU_SLOPE);
            if taps.features {
                features.push(x);
            }
            layer += 1;
        }
        let pre = format!("synthesis.trgb{k}");
        let c = config.channels(res);
        let s = style_for(tape, gp, config.w_dim, &style, &pre, batch, style_idx)?;
        style_idx += 1;
        let wt = gp.id(&format!("{pre}.weight"));
        let rgb = modulated_conv(tape, x, wt, c, s, false)?;
        let brgb = gp.id(&format!("{pre}.bias"));
        let rgb = tape.bias_channel(rgb, brgb)?;
        if taps.rgb {
            rgb_taps.push(rgb);
        }
        acc = Some(match acc {
            None => rgb,
            Some(prev) => {
                let up = tape.resample_up2(prev)?;
                tape.add(up, rgb)?
            }
        });
    }

    Ok(SynthOutput { image: acc.expect("ladder is nonempty"), features, rgb_taps })
}

/// Tile a [1,C,H,W] tensor over the batch with gradient flow back to the
/// original (expressed as matmul with a ones column).
fn tile_const(tape: &mut Tape, cst: TensorId, batch: usize) -> Result<TensorId> {
    let shape = tape.shape(cst).to_vec();
    let chw: usize = shape.iter().skip(1).product();
    let flat = tape.reshape(cst, vec![1, chw])?;
    let ones = tape.constant(vec![1.0; batch], vec![batch, 1]);
    let tiled = tape.matmul(ones, flat)?;
    tape.reshape(tiled, vec![batch, shape[1], shape[2], shape[3]])
}

/// Full synthesis pass from a style vector w [N, w_dim].
pub fn synthesize(
    tape: &mut Tape,
    config: &GeneratorConfig,
    gp: &StagedParams,
    w: TensorId,
    noise: &NoiseBundle,
    taps: SynthTaps,
) -> Result<SynthOutput> {
    let ws = tape.shape(w).to_vec();
    if ws.len() != 2 || ws[1] != config.w_dim {
        return Err(err_dim!("synthesize: w shape {:?}, expected [N, {}]", ws, config.w_dim));
    }
    synthesize_impl(tape, config, gp, StyleSource::FromW(w), ws[0], noise, taps)
}

/// Synthesis pass driven by explicit style-space vectors (batch 1).
pub fn synthesize_with_styles(
    tape: &mut Tape,
    config: &GeneratorConfig,
    gp: &StagedParams,
    styles: &StyleSpaceVector,
    noise: &NoiseBundle,
    taps: SynthTaps,
) -> Result<SynthOutput> {
    synthesize_impl(tape, config, gp, StyleSource::Explicit(styles), 1, noise, taps)
}

// ── Unified ladder indexing ─────────────────────────────────────────────

/// Swappable/freezable generator layers in forward order: feature convs
/// and tRGB layers interleaved as they run. Entry 0 also owns the learned
/// constant input. Each entry lists the parameter names that travel with
/// the layer (style affines belong to their layer).
pub fn ladder_layers(config: &GeneratorConfig) -> Vec<(String, Vec<String>)> {
    let mut out = Vec::new();
    let mut layer = 0;
    for (k, res) in config.resolutions().iter().enumerate() {
        let convs_here = if k == 0 { 1 } else { 2 };
        for _ in 0..convs_here {
            let pre = format!("synthesis.conv{layer}");
            let mut names = vec![
                format!("{pre}.affine.weight"),
                format!("{pre}.affine.bias"),
                format!("{pre}.weight"),
                format!("{pre}.bias"),
                format!("{pre}.noise_strength"),
            ];
            if layer == 0 {
                names.insert(0, "synthesis.const".to_string());
            }
            out.push((format!("conv{layer}@{res}"), names));
            layer += 1;
        }
        let pre = format!("synthesis.trgb{k}");
        out.push((
            format!("trgb{k}@{res}"),
            vec![
                format!("{pre}.affine.weight"),
                format!("{pre}.affine.bias"),
                format!("{pre}.weight"),
                format!("{pre}.bias"),
            ],
        ));
    }
    out
}

/// Mapping-network parameter names.
pub fn mapping_param_names(config: &GeneratorConfig) -> Vec<String> {
    (0..config.mapping_layers)
        .flat_map(|i| [format!("mapping.{i}.weight"), format!("mapping.{i}.bias")])
        .collect()
}

// ── Style space ─────────────────────────────────────────────────────────

/// Per-layer style vectors in unified ladder order: the modulation input
/// of every feature conv and tRGB layer, interleaved as they run.
#[derive(Debug, Clone, PartialEq)]
pub struct StyleSpaceVector {
    pub per_layer: Vec<Vec<f64>>,
}

impl StyleSpaceVector {
    pub fn total_channels(&self) -> usize {
        self.per_layer.iter().map(|v| v.len()).sum()
    }
}

/// Names of modulated layers in forward (ladder) order.
pub fn style_layer_names(config: &GeneratorConfig) -> Vec<String> {
    let mut names = Vec::new();
    let mut layer = 0;
    for (k, _) in config.resolutions().iter().enumerate() {
        let convs_here = if k == 0 { 1 } else { 2 };
        for _ in 0..convs_here {
            names.push(format!("synthesis.conv{layer}"));
            layer += 1;
        }
        names.push(format!("synthesis.trgb{k}"));
    }
    names
}

/// Compute the style-space vectors for a single latent (batch 1).
pub fn style_vectors(model: &GeneratorModel, w_row: &[f64]) -> Result<StyleSpaceVector> {
    if w_row.len() != model.config.w_dim {
        return Err(err_dim!("style_vectors: w has {} dims, expected {}", w_row.len(), model.config.w_dim));
    }
    let mut tape = Tape::new();
    let gp = model.params.stage(&mut tape, false);
    let w = tape.leaf(w_row.to_vec(), vec![1, model.config.w_dim], false);
    let mut per_layer = Vec::new();
    for name in style_layer_names(&model.config) {
        let s = style_for(&mut tape, &gp, model.config.w_dim, &StyleSource::FromW(w), &name, 1, 0)?;
        per_layer.push(tape.data(s).to_vec());
    }
    Ok(StyleSpaceVector { per_layer })
}

/// Add `delta` to exactly one (layer, channel) coordinate.
pub fn modulate_style(
    styles: &StyleSpaceVector,
    layer: usize,
    channel: usize,
    delta: f64,
) -> Result<StyleSpaceVector> {
    let mut out = styles.clone();
    let v = out
        .per_layer
        .get_mut(layer)
        .ok_or_else(|| err_dim!("style layer {layer} out of range"))?;
    if channel >= v.len() {
        return Err(err_dim!("style channel {channel} out of range for layer {layer} (width {})", v.len()));
    }
    v[channel] += delta;
    Ok(out)
}

// ── Discriminator forward ───────────────────────────────────────────────

/// Image [N,3,R,R] -> per-sample logit [N,1].
pub fn discriminate(
    tape: &mut Tape,
    config: &GeneratorConfig,
    dp: &StagedParams,
    image: TensorId,
) -> Result<TensorId> {
    let s = tape.shape(image).to_vec();
    let top = config.final_resolution;
    if s.len() != 4 || s[1] != 3 || s[2] != top || s[3] != top {
        return Err(err_dim!("discriminate: image shape {:?}, expected [N,3,{top},{top}]", s));
    }
    let n = s[0];
    let w = dp.id("d.from_rgb.weight");
    let ws = tape.scale(w, 1.0 / (3f64).sqrt());
    let y = tape.conv2d(image, ws)?;
    let b = dp.id("d.from_rgb.bias");
    let y = tape.bias_channel(y, b)?;
    let mut x = tape.leaky_relu(y, LRELU_SLOPE);

    let mut res = top;
    let mut k = 0;
    while res > config.base_resolution {
        let ci = config.channels(res);
        let w = dp.id(&format!("d.block{k}.weight"));
        let ws = tape.scale(w, 1.0 / ((ci * 9) as f64).sqrt());
        let y = tape.conv2d(x, ws)?;
        let b = dp.id(&format!("d.block{k}.bias"));
        let y = tape.bias_channel(y, b)?;
        let y = tape.leaky_relu(y, LRELU_SLOPE);
        x = tape.resample_down2(y)?;
        res /= 2;
        k += 1;
    }

    let cb = config.channels(config.base_resolution);
    let w = dp.id("d.final.weight");
    let ws = tape.scale(w, 1.0 / ((cb * 9) as f64).sqrt());
    let y = tape.conv2d(x, ws)?;
    let b = dp.id("d.final.bias");
    let y = tape.bias_channel(y, b)?;
    let x = tape.leaky_relu(y, LRELU_SLOPE);

    let flat_dim = cb * config.base_resolution * config.base_resolution;
    let flat = tape.reshape(x, vec![n, flat_dim])?;
    let w0 = dp.id("d.dense0.weight");
    let w0s = tape.scale(w0, 1.0 / (flat_dim as f64).sqrt());
    let h = tape.matmul(flat, w0s)?;
    let b0 = dp.id("d.dense0.bias");
    let h = tape.bias_row(h, b0)?;
    let h = tape.leaky_relu(h, LRELU_SLOPE);
    let w1 = dp.id("d.dense1.weight");
    let w1s = tape.scale(w1, 1.0 / 8.0);
    let sc = tape.matmul(h, w1s)?;
    let b1 = dp.id("d.dense1.bias");
    tape.bias_row(sc, b1)
}

// ── Convenience: plain-array generation ─────────────────────────────────

/// Generate images for a batch of latent rows with one shared noise bundle.
/// Returns the raw image data [N,3,R,R] (unclamped).
pub fn generate_raw(
    model: &GeneratorModel,
    z_rows: &[Vec<f64>],
    noise: &NoiseBundle,
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let gp = model.params.stage(&mut tape, false);
    let n = z_rows.len();
    if n == 0 {
        return Err(err_contract!("generate_raw: empty batch"));
    }
    let mut zdata = Vec::with_capacity(n * model.config.z_dim);
    for r in z_rows {
        if r.len() != model.config.z_dim {
            return Err(err_dim!("latent row has {} dims, expected {}", r.len(), model.config.z_dim));
        }
        zdata.extend_from_slice(r);
    }
    let z = tape.leaf(zdata, vec![n, model.config.z_dim], false);
    let w = map_latent(&mut tape, &model.config, &gp, z)?;
    let out = synthesize(&mut tape, &model.config, &gp, w, noise, SynthTaps::default())?;
    Ok(tape.data(out.image).to_vec())
}
