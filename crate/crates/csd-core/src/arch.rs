//! EDSR-style super-resolution backbones whose every convolution can be
//! evaluated at a reduced width.
//!
//! The teacher network *is* the weight storage; a student of width `r` is the
//! channel-prefix view of it: every layer evaluated at width `r` uses the
//! leading `ceil(r * C)` output channels and the matching input prefix, so the
//! student's parameters are a strict subset of the teacher's.

use std::path::Path;

use ndarray::{s, Array1, Array4, ArrayView1, ArrayView4};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{meta_field, Container};
use crate::error::{Error, Result};
use crate::tensor::{conv2d, conv2d_backward, pixel_shuffle, pixel_unshuffle, relu, relu_backward};

/// Width fraction of the student, `0 < r <= 1`; `r = 1` is the teacher.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WidthMultiplier(f64);

impl WidthMultiplier {
    pub const FULL: WidthMultiplier = WidthMultiplier(1.0);

    pub fn new(value: f64) -> Result<Self> {
        if value > 0.0 && value <= 1.0 {
            Ok(WidthMultiplier(value))
        } else {
            Err(Error::Config(format!(
                "width multiplier must be in (0, 1], got {value}"
            )))
        }
    }

    pub fn value(self) -> f64 {
        self.0
    }

    /// Channels retained out of `full`: `ceil(r * full)`, at least 1.
    pub fn channels(self, full: usize) -> usize {
        ((self.0 * full as f64).ceil() as usize).clamp(1, full)
    }
}

/// A convolution whose input/output channels can be evaluated at a prefix
/// slice. `out_group > 1` marks pre-shuffle layers whose output count must
/// stay a multiple of the shuffle factor squared.
#[derive(Debug, Clone)]
pub struct SliceableConv {
    pub weight: Array4<f64>,
    pub bias: Array1<f64>,
    pub in_fixed: bool,
    pub out_fixed: bool,
    pub out_group: usize,
}

impl SliceableConv {
    fn init(
        rng: &mut impl Rng,
        out_c: usize,
        in_c: usize,
        k: usize,
        in_fixed: bool,
        out_fixed: bool,
        out_group: usize,
    ) -> Self {
        let bound = 1.0 / ((in_c * k * k) as f64).sqrt();
        let weight = Array4::from_shape_simple_fn((out_c, in_c, k, k), || {
            rng.random_range(-bound..bound)
        });
        let bias = Array1::from_shape_simple_fn(out_c, || rng.random_range(-bound..bound));
        SliceableConv {
            weight,
            bias,
            in_fixed,
            out_fixed,
            out_group,
        }
    }

    pub fn in_channels(&self, r: WidthMultiplier) -> usize {
        let full = self.weight.dim().1;
        if self.in_fixed {
            full
        } else {
            r.channels(full)
        }
    }

    pub fn out_channels(&self, r: WidthMultiplier) -> usize {
        let full = self.weight.dim().0;
        if self.out_fixed {
            full
        } else {
            r.channels(full / self.out_group) * self.out_group
        }
    }

    pub fn sliced_weight(&self, r: WidthMultiplier) -> ArrayView4<'_, f64> {
        self.weight
            .slice(s![..self.out_channels(r), ..self.in_channels(r), .., ..])
    }

    pub fn sliced_bias(&self, r: WidthMultiplier) -> ArrayView1<'_, f64> {
        self.bias.slice(s![..self.out_channels(r)])
    }

    pub fn forward(&self, x: &Array4<f64>, r: WidthMultiplier) -> Array4<f64> {
        conv2d(x, self.sliced_weight(r), self.sliced_bias(r))
    }

    pub fn param_count(&self, r: WidthMultiplier) -> usize {
        let (_, _, k, _) = self.weight.dim();
        let (co, ci) = (self.out_channels(r), self.in_channels(r));
        co * ci * k * k + co
    }
}

/// Static description of a backbone; stored in checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub base_width: usize,
    pub n_blocks: usize,
    pub scale: usize,
    pub res_scale: f64,
    pub rgb_mean: [f64; 3],
}

/// DIV2K channel means, the usual EDSR normalization.
pub const DIV2K_RGB_MEAN: [f64; 3] = [0.4488, 0.4371, 0.4040];

impl BackboneConfig {
    pub fn new(base_width: usize, n_blocks: usize, scale: usize, res_scale: f64) -> Self {
        BackboneConfig {
            base_width,
            n_blocks,
            scale,
            res_scale,
            rgb_mean: DIV2K_RGB_MEAN,
        }
    }

    fn validate(&self) -> Result<()> {
        if !matches!(self.scale, 2 | 3 | 4) {
            return Err(Error::Config(format!(
                "scale must be one of 2, 3, 4, got {}",
                self.scale
            )));
        }
        if self.base_width < 4 {
            return Err(Error::Config(format!(
                "base_width must be >= 4, got {}",
                self.base_width
            )));
        }
        if self.n_blocks < 1 {
            return Err(Error::Config("n_blocks must be >= 1".into()));
        }
        Ok(())
    }

    /// x4 is realized as two x2 shuffle stages, x2 and x3 as one stage.
    pub fn stage_scales(&self) -> Vec<usize> {
        match self.scale {
            4 => vec![2, 2],
            s => vec![s],
        }
    }
}

#[derive(Debug, Clone)]
pub struct ResBlock {
    pub conv1: SliceableConv,
    pub conv2: SliceableConv,
}

#[derive(Debug, Clone)]
pub struct SRBackbone {
    pub cfg: BackboneConfig,
    head: SliceableConv,
    body: Vec<ResBlock>,
    /// Conv closing the residual body, before the long skip-add.
    fuse: SliceableConv,
    upsample: Vec<SliceableConv>,
    tail: SliceableConv,
}

pub const KERNEL: usize = 3;

/// Build a randomly initialized backbone. Layout is deterministic given the
/// config; values are deterministic given the RNG.
pub fn build_backbone(cfg: &BackboneConfig, rng: &mut impl Rng) -> Result<SRBackbone> {
    cfg.validate()?;
    let w = cfg.base_width;
    let head = SliceableConv::init(rng, w, 3, KERNEL, true, false, 1);
    let body = (0..cfg.n_blocks)
        .map(|_| ResBlock {
            conv1: SliceableConv::init(rng, w, w, KERNEL, false, false, 1),
            conv2: SliceableConv::init(rng, w, w, KERNEL, false, false, 1),
        })
        .collect();
    let fuse = SliceableConv::init(rng, w, w, KERNEL, false, false, 1);
    let upsample = cfg
        .stage_scales()
        .iter()
        .map(|&s| SliceableConv::init(rng, w * s * s, w, KERNEL, false, false, s * s))
        .collect();
    let tail = SliceableConv::init(rng, 3, w, KERNEL, false, true, 1);
    Ok(SRBackbone {
        cfg: cfg.clone(),
        head,
        body,
        fuse,
        upsample,
        tail,
    })
}

/// Activations cached by a training forward, consumed by [`SRBackbone::backward`].
pub struct ForwardCache {
    r: WidthMultiplier,
    x_norm: Array4<f64>,
    block_inputs: Vec<Array4<f64>>,
    block_hidden: Vec<Array4<f64>>,
    body_out: Array4<f64>,
    upsample_inputs: Vec<Array4<f64>>,
    tail_input: Array4<f64>,
}

/// Per-layer gradient buffers, full-size; a width-`r` backward writes into
/// the prefix slice of each buffer.
pub struct BackboneGrads {
    pub layers: Vec<(Array4<f64>, Array1<f64>)>,
}

impl BackboneGrads {
    pub fn zero_like(net: &SRBackbone) -> Self {
        BackboneGrads {
            layers: net
                .layers()
                .iter()
                .map(|l| {
                    (
                        Array4::zeros(l.weight.dim()),
                        Array1::zeros(l.bias.dim()),
                    )
                })
                .collect(),
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for (w, b) in &mut self.layers {
            w.mapv_inplace(|v| v * factor);
            b.mapv_inplace(|v| v * factor);
        }
    }
}

impl SRBackbone {
    /// Layers in checkpoint order: head, body convs, fuse, upsample stages, tail.
    pub fn layers(&self) -> Vec<&SliceableConv> {
        let mut v = Vec::with_capacity(self.n_layers());
        v.push(&self.head);
        for b in &self.body {
            v.push(&b.conv1);
            v.push(&b.conv2);
        }
        v.push(&self.fuse);
        v.extend(self.upsample.iter());
        v.push(&self.tail);
        v
    }

    pub fn layers_mut(&mut self) -> Vec<&mut SliceableConv> {
        let mut v = Vec::new();
        v.push(&mut self.head);
        for b in &mut self.body {
            v.push(&mut b.conv1);
            v.push(&mut b.conv2);
        }
        v.push(&mut self.fuse);
        v.extend(self.upsample.iter_mut());
        v.push(&mut self.tail);
        v
    }

    pub fn layer_names(&self) -> Vec<String> {
        let mut v = Vec::with_capacity(self.n_layers());
        v.push("head".to_string());
        for i in 0..self.body.len() {
            v.push(format!("body.{i}.conv1"));
            v.push(format!("body.{i}.conv2"));
        }
        v.push("fuse".to_string());
        for i in 0..self.upsample.len() {
            v.push(format!("upsample.{i}"));
        }
        v.push("tail".to_string());
        v
    }

    fn n_layers(&self) -> usize {
        2 * self.body.len() + self.upsample.len() + 3
    }

    /// Channels of a sliced output mask per layer, for gradient-routing probes:
    /// the number of output/input channels the width-`r` student actually uses.
    pub fn used_channels(&self, r: WidthMultiplier) -> Vec<(usize, usize)> {
        self.layers()
            .iter()
            .map(|l| (l.out_channels(r), l.in_channels(r)))
            .collect()
    }

    fn check_input(&self, x: &Array4<f64>) -> Result<()> {
        if x.dim().1 != 3 {
            return Err(Error::Shape(format!(
                "expected 3-channel input, got {} channels",
                x.dim().1
            )));
        }
        Ok(())
    }

    fn normalize(&self, x: &Array4<f64>) -> Array4<f64> {
        let mut out = x.clone();
        for (c, mean) in self.cfg.rgb_mean.iter().enumerate() {
            out.slice_mut(s![.., c, .., ..]).mapv_inplace(|v| v - mean);
        }
        out
    }

    fn denormalize_inplace(&self, y: &mut Array4<f64>) {
        for (c, mean) in self.cfg.rgb_mean.iter().enumerate() {
            y.slice_mut(s![.., c, .., ..]).mapv_inplace(|v| v + mean);
        }
    }

    /// Inference forward at width `r`; `(B,3,H,W)` to `(B,3,sH,sW)`.
    pub fn forward(&self, x: &Array4<f64>, r: WidthMultiplier) -> Result<Array4<f64>> {
        Ok(self.forward_impl(x, r, false)?.0)
    }

    /// Forward that also returns the caches needed for [`Self::backward`].
    pub fn forward_train(&self, x: &Array4<f64>, r: WidthMultiplier) -> Result<(Array4<f64>, ForwardCache)> {
        let (y, cache) = self.forward_impl(x, r, true)?;
        Ok((y, cache.expect("cache requested")))
    }

    fn forward_impl(
        &self,
        x: &Array4<f64>,
        r: WidthMultiplier,
        keep: bool,
    ) -> Result<(Array4<f64>, Option<ForwardCache>)> {
        self.check_input(x)?;
        let x_norm = self.normalize(x);
        let head_out = self.head.forward(&x_norm, r);

        let mut block_inputs = Vec::new();
        let mut block_hidden = Vec::new();
        let mut f = head_out.clone();
        for blk in &self.body {
            let a1 = relu(&blk.conv1.forward(&f, r));
            let branch = blk.conv2.forward(&a1, r);
            if keep {
                block_inputs.push(f.clone());
                block_hidden.push(a1);
            }
            f.scaled_add(self.cfg.res_scale, &branch);
        }
        let body_out = f;
        let mut f = self.fuse.forward(&body_out, r);
        f += &head_out;

        let mut upsample_inputs = Vec::new();
        for (conv, stage) in self.upsample.iter().zip(self.cfg.stage_scales()) {
            if keep {
                upsample_inputs.push(f.clone());
            }
            f = pixel_shuffle(&conv.forward(&f, r), stage);
        }
        let tail_input = f;
        let mut y = self.tail.forward(&tail_input, r);
        self.denormalize_inplace(&mut y);

        let cache = keep.then(|| ForwardCache {
            r,
            x_norm,
            block_inputs,
            block_hidden,
            body_out,
            upsample_inputs,
            tail_input,
        });
        Ok((y, cache))
    }

    /// Accumulate parameter gradients for the width used in `cache`.
    /// Gradients land in the channel-prefix slice of each full-size buffer,
    /// so student and teacher passes can share one accumulator.
    pub fn backward(&self, cache: &ForwardCache, grad_y: &Array4<f64>, grads: &mut BackboneGrads) {
        let r = cache.r;
        let n = self.n_layers();
        let (tail_idx, fuse_idx, head_idx) = (n - 1, 2 * self.body.len() + 1, 0);
        let upsample_base = fuse_idx + 1;

        // tail
        let g = conv2d_backward(
            &cache.tail_input,
            self.tail.sliced_weight(r),
            grad_y,
            true,
        );
        accumulate(&mut grads.layers[tail_idx], &g);
        let mut g_cur = g.input.expect("input grad");

        // upsample stages, reversed
        for (i, (conv, stage)) in self
            .upsample
            .iter()
            .zip(self.cfg.stage_scales())
            .enumerate()
            .rev()
        {
            let g_pre_shuffle = pixel_unshuffle(&g_cur, stage);
            let g = conv2d_backward(
                &cache.upsample_inputs[i],
                conv.sliced_weight(r),
                &g_pre_shuffle,
                true,
            );
            accumulate(&mut grads.layers[upsample_base + i], &g);
            g_cur = g.input.expect("input grad");
        }

        // long skip: grad splits into the fuse conv branch and the head output
        let g_skip = g_cur.clone();
        let g = conv2d_backward(&cache.body_out, self.fuse.sliced_weight(r), &g_cur, true);
        accumulate(&mut grads.layers[fuse_idx], &g);
        let mut g_body = g.input.expect("input grad");

        // residual blocks, reversed
        for (i, blk) in self.body.iter().enumerate().rev() {
            let g_branch = g_body.mapv(|v| v * self.cfg.res_scale);
            let g2 = conv2d_backward(
                &cache.block_hidden[i],
                blk.conv2.sliced_weight(r),
                &g_branch,
                true,
            );
            accumulate(&mut grads.layers[2 * i + 2], &g2);
            let g_a1 = relu_backward(&g2.input.expect("input grad"), &cache.block_hidden[i]);
            let g1 = conv2d_backward(
                &cache.block_inputs[i],
                blk.conv1.sliced_weight(r),
                &g_a1,
                true,
            );
            accumulate(&mut grads.layers[2 * i + 1], &g1);
            g_body += &g1.input.expect("input grad");
        }

        let g_head_out = &g_body + &g_skip;
        let g = conv2d_backward(&cache.x_norm, self.head.sliced_weight(r), &g_head_out, false);
        accumulate(&mut grads.layers[head_idx], &g);
    }

    /// Scalar parameters actually used at width `r`.
    pub fn parameter_count(&self, r: WidthMultiplier) -> usize {
        self.layers().iter().map(|l| l.param_count(r)).sum()
    }

    /// Physically copy the width-`r` slice into a standalone backbone that is
    /// forward-equivalent to `self.forward(.., r)` at its own full width.
    pub fn extract_student(&self, r: WidthMultiplier) -> SRBackbone {
        let slice_conv = |c: &SliceableConv| SliceableConv {
            weight: c.sliced_weight(r).to_owned(),
            bias: c.sliced_bias(r).to_owned(),
            in_fixed: c.in_fixed,
            out_fixed: c.out_fixed,
            out_group: c.out_group,
        };
        SRBackbone {
            cfg: BackboneConfig {
                base_width: r.channels(self.cfg.base_width),
                ..self.cfg.clone()
            },
            head: slice_conv(&self.head),
            body: self
                .body
                .iter()
                .map(|b| ResBlock {
                    conv1: slice_conv(&b.conv1),
                    conv2: slice_conv(&b.conv2),
                })
                .collect(),
            fuse: slice_conv(&self.fuse),
            upsample: self.upsample.iter().map(slice_conv).collect(),
            tail: slice_conv(&self.tail),
        }
    }

    /// Write weights and architecture metadata to a checkpoint container.
    pub fn save(&self, path: &Path, r_exported: f64) -> Result<()> {
        let mut c = Container::new(serde_json::json!({
            "kind": "sr_backbone",
            "base_width": self.cfg.base_width,
            "n_blocks": self.cfg.n_blocks,
            "scale": self.cfg.scale,
            "res_scale": self.cfg.res_scale,
            "rgb_mean": self.cfg.rgb_mean,
            "r_exported": r_exported,
            "upsampler_sliced": true,
        }));
        for (name, layer) in self.layer_names().iter().zip(self.layers()) {
            c.insert(&format!("{name}.weight"), layer.weight.clone());
            c.insert(&format!("{name}.bias"), layer.bias.clone());
        }
        c.save(path)
    }

    pub fn load(path: &Path) -> Result<SRBackbone> {
        let c = Container::load(path)?;
        // Training-state containers (`best.csdc` / `last.csdc` in a run
        // directory) nest the architecture under `backbone` and prefix
        // tensors with `net.`; exported model containers are flat. Accept
        // both so evaluation, export, benchmarking, and teacher
        // initialization read training outputs directly.
        let (arch_meta, prefix) = match c.meta.get("backbone") {
            Some(nested) => (nested.clone(), "net."),
            None => (c.meta.clone(), ""),
        };
        let cfg = BackboneConfig {
            base_width: meta_field(path, &arch_meta, "base_width")?,
            n_blocks: meta_field(path, &arch_meta, "n_blocks")?,
            scale: meta_field(path, &arch_meta, "scale")?,
            res_scale: meta_field(path, &arch_meta, "res_scale")?,
            rgb_mean: meta_field(path, &arch_meta, "rgb_mean")?,
        };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        use rand::SeedableRng;
        let mut net = build_backbone(&cfg, &mut rng)?;
        let names = net.layer_names();
        for (name, layer) in names.iter().zip(net.layers_mut()) {
            let w = c.get(path, &format!("{prefix}{name}.weight"))?;
            let b = c.get(path, &format!("{prefix}{name}.bias"))?;
            if w.shape() != layer.weight.shape() || b.shape() != layer.bias.shape() {
                return Err(Error::checkpoint(
                    path,
                    format!("layer `{name}` has unexpected shape"),
                ));
            }
            layer.weight = w
                .clone()
                .into_dimensionality()
                .map_err(|e| Error::checkpoint(path, e.to_string()))?;
            layer.bias = b
                .clone()
                .into_dimensionality()
                .map_err(|e| Error::checkpoint(path, e.to_string()))?;
        }
        Ok(net)
    }
}

fn accumulate(dst: &mut (Array4<f64>, Array1<f64>), g: &crate::tensor::ConvGradients) {
    let (co, ci, _, _) = g.weight.dim();
    let mut wslice = dst.0.slice_mut(s![..co, ..ci, .., ..]);
    wslice += &g.weight;
    let mut bslice = dst.1.slice_mut(s![..co]);
    bslice += &g.bias;
}
