//! Trimmed three-stage VGG-style fully convolutional network with one
//! side-output head per stage and a fixed-weight fusion of the side maps.
//!
//! Each stage is a run of `k x k` convolutions (same padding, ReLU); stages
//! are separated by 2x2 / stride-2 max pooling. A stage's tapped convolution
//! feeds a 1x1 convolution to one channel followed by a sigmoid; that map is
//! bilinearly upsampled to the input resolution. The fused map is the
//! `fusion_weights`-weighted sum of the upsampled side maps.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::autodiff::kernels::pooled;
use crate::error::{Error, Result};
use crate::scalar::{flush_subnormals, Scalar};
use crate::tensor::Tensor;

pub const DEFAULT_FUSION_WEIGHTS: [f64; 3] = [0.2, 0.35, 0.45];

/// One convolution stage.
#[derive(Clone, Debug, PartialEq)]
pub struct StageSpec {
    pub convs: usize,
    pub channels: usize,
    /// Zero-based index of the convolution feeding the side head.
    pub tap: usize,
}

impl StageSpec {
    /// Stage tapped at its last convolution.
    pub fn new(convs: usize, channels: usize) -> Self {
        Self {
            convs,
            channels,
            tap: convs.saturating_sub(1),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub stages: Vec<StageSpec>,
    pub kernel_size: usize,
    pub input_channels: usize,
    pub fusion_weights: Vec<f64>,
}

impl Default for BackboneConfig {
    /// Desk-scale widths (16, 32, 64) with the VGG conv counts (2, 2, 3).
    fn default() -> Self {
        Self::with_widths([16, 32, 64])
    }
}

impl BackboneConfig {
    /// VGG conv counts (2, 2, 3) with the given stage widths.
    pub fn with_widths(widths: [usize; 3]) -> Self {
        Self {
            stages: vec![
                StageSpec::new(2, widths[0]),
                StageSpec::new(2, widths[1]),
                StageSpec::new(3, widths[2]),
            ],
            kernel_size: 3,
            input_channels: 3,
            fusion_weights: DEFAULT_FUSION_WEIGHTS.to_vec(),
        }
    }

    /// Original VGG16 widths for the first three stages.
    pub fn vgg16() -> Self {
        Self::with_widths([64, 128, 256])
    }

    /// One stage fused with weight exactly 1: the fused map is the side map
    /// and the network reduces to a single-output MIL model.
    pub fn identity_fusion(&self) -> bool {
        self.stages.len() == 1 && self.fusion_weights == [1.0]
    }

    pub fn side_count(&self) -> usize {
        self.stages.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::invalid("backbone needs at least one stage"));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.convs == 0 || s.channels == 0 {
                return Err(Error::invalid(format!(
                    "stage {} has {} convs with {} channels",
                    i + 1,
                    s.convs,
                    s.channels
                )));
            }
            if s.tap >= s.convs {
                return Err(Error::invalid(format!(
                    "stage {} taps conv {} but has only {}",
                    i + 1,
                    s.tap + 1,
                    s.convs
                )));
            }
        }
        if self.kernel_size == 0 || self.kernel_size % 2 == 0 {
            return Err(Error::invalid(format!(
                "kernel size must be odd, got {}",
                self.kernel_size
            )));
        }
        if self.input_channels == 0 {
            return Err(Error::invalid("input needs at least one channel"));
        }
        if self.fusion_weights.len() != self.stages.len() {
            return Err(Error::invalid(format!(
                "{} fusion weights for {} side outputs",
                self.fusion_weights.len(),
                self.stages.len()
            )));
        }
        if self.fusion_weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::invalid("fusion weights must be finite and nonnegative"));
        }
        Ok(())
    }

    /// Layer name of the `conv`-th convolution of `stage` (both zero-based).
    pub fn layer_name(stage: usize, conv: usize) -> String {
        format!("c{}_{}", stage + 1, conv + 1)
    }

    pub fn param_count(&self) -> usize {
        let k2 = self.kernel_size * self.kernel_size;
        let mut in_c = self.input_channels;
        let mut total = 0;
        for s in &self.stages {
            for _ in 0..s.convs {
                total += s.channels * in_c * k2 + s.channels;
                in_c = s.channels;
            }
            total += s.channels + 1;
        }
        total
    }

    /// Stage list as `convs x channels`, with `@tap` (one-based) when the
    /// side head is not on the last convolution.
    pub fn stages_text(&self) -> String {
        self.stages
            .iter()
            .map(|s| {
                if s.tap + 1 == s.convs {
                    format!("{}x{}", s.convs, s.channels)
                } else {
                    format!("{}x{}@{}", s.convs, s.channels, s.tap + 1)
                }
            })
            .collect::<Vec<_>>()
            .join(",")
    }

    pub fn parse_stages(text: &str) -> Result<Vec<StageSpec>> {
        let bad = || Error::invalid(format!("bad stage list {text:?}; expected e.g. 2x16,2x32,3x64"));
        text.split(',')
            .map(|item| {
                let item = item.trim();
                let (body, tap) = match item.split_once('@') {
                    Some((b, t)) => (b, Some(t.trim().parse::<usize>().map_err(|_| bad())?)),
                    None => (item, None),
                };
                let (convs, channels) = body.split_once('x').ok_or_else(bad)?;
                let convs: usize = convs.trim().parse().map_err(|_| bad())?;
                let channels: usize = channels.trim().parse().map_err(|_| bad())?;
                let mut spec = StageSpec::new(convs, channels);
                if let Some(t) = tap {
                    if t == 0 {
                        return Err(bad());
                    }
                    spec.tap = t - 1;
                }
                Ok(spec)
            })
            .collect()
    }

    /// `key=value` lines, the form stored in checkpoints.
    pub fn to_text(&self) -> String {
        format!(
            "stages={}\nkernel_size={}\ninput_channels={}\nfusion_weights={}\n",
            self.stages_text(),
            self.kernel_size,
            self.input_channels,
            join_f64(&self.fusion_weights)
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("config line without '=': {line:?}")))?;
            let v = v.trim();
            match k.trim() {
                "stages" => cfg.stages = Self::parse_stages(v)?,
                "kernel_size" => cfg.kernel_size = parse_num(k, v)?,
                "input_channels" => cfg.input_channels = parse_num(k, v)?,
                "fusion_weights" => cfg.fusion_weights = parse_f64_list(v)?,
                other => return Err(Error::invalid(format!("unknown backbone key {other:?}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

pub(crate) fn join_f64(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

pub(crate) fn parse_f64_list(v: &str) -> Result<Vec<f64>> {
    v.split(',')
        .map(|x| {
            x.trim()
                .parse::<f64>()
                .map_err(|_| Error::invalid(format!("bad number {x:?} in list {v:?}")))
        })
        .collect()
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::invalid(format!("bad value {v:?} for {key}")))
}

/// Receptive field and stride of one tapped layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RfRow {
    pub layer: String,
    pub rf: usize,
    pub stride: usize,
}

impl fmt::Display for RfRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}\t{}\t{}", self.layer, self.rf, self.stride)
    }
}

/// Receptive field size and stride of every tapped layer, from
/// `rf' = rf + (k - 1) * stride` applied to each conv and pool in order.
pub fn receptive_field_report(config: &BackboneConfig) -> Result<Vec<RfRow>> {
    config.validate()?;
    let (mut rf, mut stride) = (1usize, 1usize);
    let mut rows = Vec::with_capacity(config.stages.len());
    for (si, stage) in config.stages.iter().enumerate() {
        if si > 0 {
            rf += stride;
            stride *= 2;
        }
        for ci in 0..stage.convs {
            rf += (config.kernel_size - 1) * stride;
            if ci == stage.tap {
                rows.push(RfRow {
                    layer: BackboneConfig::layer_name(si, ci),
                    rf,
                    stride,
                });
            }
        }
    }
    Ok(rows)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    ConvWeight,
    ConvBias,
    SideWeight,
    SideBias,
}

impl ParamKind {
    pub fn is_side(self) -> bool {
        matches!(self, ParamKind::SideWeight | ParamKind::SideBias)
    }

    pub fn is_weight(self) -> bool {
        matches!(self, ParamKind::ConvWeight | ParamKind::SideWeight)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<S> {
    pub name: String,
    pub kind: ParamKind,
    pub tensor: Tensor<S>,
}

/// Network parameters plus the configuration that shapes them.
#[derive(Clone, Debug, PartialEq)]
pub struct Network<S> {
    config: BackboneConfig,
    params: Vec<Param<S>>,
}

/// Per-scale probability maps, all at input resolution (`[B, 1, H, W]`).
#[derive(Clone, Debug, PartialEq)]
pub struct SideOutputs<S> {
    pub side_maps: Vec<Tensor<S>>,
    pub fused_map: Tensor<S>,
    /// Spatial size of each side map before upsampling.
    pub native_sizes: Vec<(usize, usize)>,
    /// False when the fused map is the single side map itself, in which
    /// case no separate fusion loss applies.
    pub fusion_layer: bool,
}

impl<S: Scalar> SideOutputs<S> {
    pub fn batch(&self) -> usize {
        self.fused_map.dims()[0]
    }

    /// Splits a batched result into one `SideOutputs` per image.
    pub fn split(&self) -> Vec<SideOutputs<S>> {
        let b = self.batch();
        let (h, w) = self.fused_map.spatial();
        let slice = |t: &Tensor<S>, i: usize| {
            Tensor::new(vec![1, 1, h, w], t.data()[i * h * w..(i + 1) * h * w].to_vec())
                .expect("same plane size")
        };
        (0..b)
            .map(|i| SideOutputs {
                side_maps: self.side_maps.iter().map(|m| slice(m, i)).collect(),
                fused_map: slice(&self.fused_map, i),
                native_sizes: self.native_sizes.clone(),
                fusion_layer: self.fusion_layer,
            })
            .collect()
    }
}

/// Tape handles of one forward pass.
#[derive(Clone, Debug)]
pub struct SideVars {
    pub sides: Vec<Var>,
    pub fused: Var,
}

impl SideVars {
    /// See [`SideOutputs::fusion_layer`].
    pub fn fusion_layer(&self) -> bool {
        !(self.sides.len() == 1 && self.fused == self.sides[0])
    }
}

/// Offset subtracted from `[0, 1]` pixel values before the first convolution.
pub const INPUT_CENTER: f64 = 0.5;

pub fn build_network<S: Scalar>(config: &BackboneConfig, seed: u64) -> Result<Network<S>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = config.kernel_size;
    let mut params = Vec::new();
    let mut in_c = config.input_channels;
    let mut uniform = |dims: &[usize], bound: f64| {
        let n: usize = dims.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        Tensor::<S>::from_f64(dims, &v).expect("positive dims")
    };
    for (si, stage) in config.stages.iter().enumerate() {
        for ci in 0..stage.convs {
            let name = BackboneConfig::layer_name(si, ci);
            let fan_in = in_c * k * k;
            params.push(Param {
                name: format!("{name}.weight"),
                kind: ParamKind::ConvWeight,
                tensor: uniform(&[stage.channels, in_c, k, k], (6.0 / fan_in as f64).sqrt()),
            });
            params.push(Param {
                name: format!("{name}.bias"),
                kind: ParamKind::ConvBias,
                tensor: Tensor::zeros(&[stage.channels]),
            });
            in_c = stage.channels;
        }
    }
    for (si, stage) in config.stages.iter().enumerate() {
        params.push(Param {
            name: format!("side{}.weight", si + 1),
            kind: ParamKind::SideWeight,
            tensor: uniform(&[1, stage.channels, 1, 1], (1.0 / stage.channels as f64).sqrt()),
        });
        params.push(Param {
            name: format!("side{}.bias", si + 1),
            kind: ParamKind::SideBias,
            tensor: Tensor::zeros(&[1]),
        });
    }
    Ok(Network {
        config: config.clone(),
        params,
    })
}

impl<S: Scalar> Network<S> {
    /// Assembles a network from named tensors, checking them against the
    /// shapes `config` implies.
    pub fn from_params(config: BackboneConfig, tensors: Vec<(String, Tensor<S>)>) -> Result<Self> {
        let template = build_network::<S>(&config, 0)?;
        if template.params.len() != tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} arrays, found {}",
                template.params.len(),
                tensors.len()
            )));
        }
        let params = template
            .params
            .into_iter()
            .zip(tensors)
            .map(|(p, (name, t))| {
                if p.name != name || p.tensor.dims() != t.dims() {
                    return Err(Error::Checkpoint(format!(
                        "array {name:?} {:?} does not match expected {:?} {:?}",
                        t.dims(),
                        p.name,
                        p.tensor.dims()
                    )));
                }
                Ok(Param {
                    name,
                    kind: p.kind,
                    tensor: t,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param<S>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<S>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn cast<T: Scalar>(&self) -> Network<T> {
        Network {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    kind: p.kind,
                    tensor: p.tensor.cast(),
                })
                .collect(),
        }
    }

    /// Records every parameter on `tape`, as trainable leaves or constants.
    pub fn bind(&self, tape: &mut Tape<S>, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    tape.param(p.tensor.clone())
                } else {
                    tape.constant(p.tensor.clone())
                }
            })
            .collect()
    }

    /// Centres a `[B, C, H, W]` or `[C, H, W]` image and records it as a constant.
    pub fn bind_image(&self, tape: &mut Tape<S>, image: &Tensor<S>) -> Result<Var> {
        let dims = match *image.dims() {
            [c, h, w] => vec![1, c, h, w],
            [b, c, h, w] => vec![b, c, h, w],
            _ => {
                return Err(Error::shape(
                    "forward",
                    format!("image must be [B,C,H,W] or [C,H,W], got {:?}", image.dims()),
                ))
            }
        };
        if dims[1] != self.config.input_channels {
            return Err(Error::shape(
                "forward",
                format!(
                    "image has {} channels, network expects {}",
                    dims[1], self.config.input_channels
                ),
            ));
        }
        let center = S::from_f64_lossy(INPUT_CENTER);
        let data = image.data().iter().map(|&v| v - center).collect();
        Ok(tape.constant(Tensor::new(dims, data)?))
    }

    /// Records a forward pass of `input` through bound parameters.
    pub fn forward_on_tape(&self, tape: &mut Tape<S>, params: &[Var], input: Var) -> Result<(SideVars, Vec<(usize, usize)>)> {
        if params.len() != self.params.len() {
            return Err(Error::invalid("parameter bindings do not match the network"));
        }
        let (_, _, h, w) = tape.value(input).nchw("forward")?;
        let pad = self.config.kernel_size / 2;
        let mut x = input;
        let mut p = 0;
        let mut taps = Vec::with_capacity(self.config.stages.len());
        for (si, stage) in self.config.stages.iter().enumerate() {
            if si > 0 {
                x = tape.maxpool2x2(x)?;
            }
            for ci in 0..stage.convs {
                let c = tape.conv2d(x, params[p], params[p + 1], 1, pad)?;
                x = tape.relu(c);
                p += 2;
                if ci == stage.tap {
                    taps.push(x);
                }
            }
        }
        let mut sides = Vec::with_capacity(taps.len());
        let mut native = Vec::with_capacity(taps.len());
        for feat in taps {
            let logit = tape.conv2d(feat, params[p], params[p + 1], 1, 0)?;
            p += 2;
            native.push(tape.value(logit).spatial());
            let prob = tape.sigmoid(logit);
            sides.push(tape.upsample_bilinear(prob, h, w)?);
        }
        let terms: Vec<(Var, S)> = sides
            .iter()
            .zip(&self.config.fusion_weights)
            .map(|(&v, &a)| (v, S::from_f64_lossy(a)))
            .collect();
        let fused = if self.config.identity_fusion() {
            sides[0]
        } else {
            tape.weighted_sum(&terms)?
        };
        Ok((SideVars { sides, fused }, native))
    }

    /// Inference forward pass; parameters are left untouched.
    pub fn forward(&self, image: &Tensor<S>) -> Result<SideOutputs<S>> {
        flush_subnormals(|| self.forward_inner(image))
    }

    fn forward_inner(&self, image: &Tensor<S>) -> Result<SideOutputs<S>> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false);
        let input = self.bind_image(&mut tape, image)?;
        let (vars, native_sizes) = self.forward_on_tape(&mut tape, &params, input)?;
        Ok(SideOutputs {
            side_maps: vars.sides.iter().map(|&v| tape.value(v).clone()).collect(),
            fused_map: tape.value(vars.fused).clone(),
            native_sizes,
            fusion_layer: vars.fusion_layer(),
        })
    }
}

/// Spatial size of each side map before upsampling, for an `h x w` input.
pub fn native_side_sizes(config: &BackboneConfig, h: usize, w: usize) -> Vec<(usize, usize)> {
    let (mut h, mut w) = (h, w);
    (0..config.stages.len())
        .map(|si| {
            if si > 0 {
                h = pooled(h);
                w = pooled(w);
            }
            (h, w)
        })
        .collect()
}
