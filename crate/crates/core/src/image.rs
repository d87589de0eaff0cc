//! Byte-image comparison arm: raw vectors rendered as 224x224 grayscale
//! images and classified by a small DenseNet-style convolutional network
//! (dense blocks with within-block all-to-all layer connectivity).

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::checkpoint::{Checkpoint, RngState};
use crate::nn::dense::Dense;
use crate::nn::loss::{bce_with_logit, sigmoid};
use crate::nn::schedule::LrSchedule;
use crate::nn::sgd::sgd_step;
use crate::nn::tensor::{Param, ParamVisitor};
use crate::nn::NnError;
use crate::vectorizer::RawVector;

pub const WIDTH: usize = 224;
pub const HEIGHT: usize = 224;
pub const CELLS: usize = WIDTH * HEIGHT;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("record exceeds image capacity: {bytes} bytes > {CELLS}")]
    ExceedsCapacity { bytes: usize },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("training set holds a single class; both labels are required")]
    SingleClass,
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("image has {0} cells, expected {CELLS}")]
    BadImage(usize),
    #[error("checkpoint does not hold a model of kind '{0}'")]
    WrongKind(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A 224x224 grid of byte values; padding cells are zero.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub pixels: Vec<u8>,
}

/// Serializes each token as a little-endian u16 (token values exceed one
/// byte once the text vocabulary is offset by 256).
pub fn serialize_tokens(v: &RawVector) -> Vec<u8> {
    let mut out = Vec::with_capacity(v.len() * 2);
    for &t in &v.tokens {
        out.extend_from_slice(&(t as u16).to_le_bytes());
    }
    out
}

/// Pads the byte serialization with zeros split as evenly as possible
/// between front and back (the extra zero goes to the back when the deficit
/// is odd) and reshapes row-major to 224x224.
pub fn to_grayscale(v: &RawVector) -> Result<GrayImage, ImageError> {
    let payload = serialize_tokens(v);
    if payload.len() > CELLS {
        return Err(ImageError::ExceedsCapacity { bytes: payload.len() });
    }
    let deficit = CELLS - payload.len();
    let front = deficit / 2;
    let mut pixels = vec![0u8; CELLS];
    pixels[front..front + payload.len()].copy_from_slice(&payload);
    Ok(GrayImage { pixels })
}

pub fn write_pgm(img: &GrayImage, w: &mut dyn std::io::Write) -> std::io::Result<()> {
    write!(w, "P5\n{WIDTH} {HEIGHT}\n255\n")?;
    w.write_all(&img.pixels)
}

/// Channel-major feature map.
#[derive(Debug, Clone)]
pub struct Fmap {
    pub ch: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Fmap {
    pub fn zeros(ch: usize, h: usize, w: usize) -> Self {
        Fmap { ch, h, w, data: vec![0.0; ch * h * w] }
    }

    fn plane(&self, c: usize) -> &[f64] {
        &self.data[c * self.h * self.w..(c + 1) * self.h * self.w]
    }
}

struct Conv2d {
    w: Param,
    b: Param,
    in_ch: usize,
    out_ch: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

impl Conv2d {
    fn new(in_ch: usize, out_ch: usize, k: usize, stride: usize, pad: usize, rng: &mut impl Rng) -> Self {
        // Rectifier stacks need variance-preserving init; the narrower
        // 1/sqrt(fan_in) bound used elsewhere attenuates sparse inputs into
        // the noise floor by the global pool.
        let fan_in = in_ch * k * k;
        let bound = (6.0 / fan_in as f64).sqrt();
        Conv2d {
            w: Param::uniform_bound(&[out_ch, in_ch, k, k], bound, rng),
            b: Param::zeros(&[out_ch]),
            in_ch,
            out_ch,
            k,
            stride,
            pad,
        }
    }

    fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        ((h + 2 * self.pad - self.k) / self.stride + 1, (w + 2 * self.pad - self.k) / self.stride + 1)
    }

    /// Output positions for kernel offset `k_off` whose input index
    /// `o*stride + k_off - pad` lands inside `[0, extent)`.
    fn valid_range(&self, k_off: usize, out_extent: usize, extent: usize) -> (usize, usize) {
        let shift = k_off as isize - self.pad as isize;
        let lo = if shift < 0 {
            ((-shift) as usize).div_ceil(self.stride)
        } else {
            0
        };
        let hi_in = extent as isize - 1 - shift;
        if hi_in < 0 {
            return (0, 0);
        }
        let hi = ((hi_in as usize) / self.stride + 1).min(out_extent);
        (lo.min(hi), hi)
    }

    fn forward(&self, x: &Fmap) -> Fmap {
        debug_assert_eq!(x.ch, self.in_ch);
        let (oh, ow) = self.out_hw(x.h, x.w);
        let mut out = Fmap::zeros(self.out_ch, oh, ow);
        let wd = self.w.value.data();
        let k2 = self.k * self.k;
        let s = self.stride;
        for oc in 0..self.out_ch {
            let bias = self.b.value.data()[oc];
            let oplane = &mut out.data[oc * oh * ow..(oc + 1) * oh * ow];
            oplane.iter_mut().for_each(|v| *v = bias);
            for ic in 0..self.in_ch {
                let xplane = x.plane(ic);
                let wbase = (oc * self.in_ch + ic) * k2;
                for kh in 0..self.k {
                    let (oy_lo, oy_hi) = self.valid_range(kh, oh, x.h);
                    for kw in 0..self.k {
                        let wv = wd[wbase + kh * self.k + kw];
                        if wv == 0.0 {
                            continue;
                        }
                        let (ox_lo, ox_hi) = self.valid_range(kw, ow, x.w);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        let x_shift_h = kh as isize - self.pad as isize;
                        let x_shift_w = kw as isize - self.pad as isize;
                        for oy in oy_lo..oy_hi {
                            let iy = (oy * s) as isize + x_shift_h;
                            let ix0 = (ox_lo * s) as isize + x_shift_w;
                            let xrow = &xplane[iy as usize * x.w + ix0 as usize..];
                            let orow = &mut oplane[oy * ow + ox_lo..oy * ow + ox_hi];
                            if s == 1 {
                                for (o, xv) in orow.iter_mut().zip(xrow) {
                                    *o += wv * xv;
                                }
                            } else {
                                for (j, o) in orow.iter_mut().enumerate() {
                                    *o += wv * xrow[j * s];
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn backward(&mut self, x: &Fmap, dy: &Fmap) -> Fmap {
        let (oh, ow) = (dy.h, dy.w);
        let mut dx = Fmap::zeros(x.ch, x.h, x.w);
        let k2 = self.k * self.k;
        let s = self.stride;
        for oc in 0..self.out_ch {
            let dplane = dy.plane(oc);
            self.b.grad.data_mut()[oc] += dplane.iter().sum::<f64>();
            for ic in 0..self.in_ch {
                let xplane = x.plane(ic);
                let dxplane = &mut dx.data[ic * x.h * x.w..(ic + 1) * x.h * x.w];
                let wbase = (oc * self.in_ch + ic) * k2;
                for kh in 0..self.k {
                    let (oy_lo, oy_hi) = self.valid_range(kh, oh, x.h);
                    for kw in 0..self.k {
                        let widx = wbase + kh * self.k + kw;
                        let wv = self.w.value.data()[widx];
                        let (ox_lo, ox_hi) = self.valid_range(kw, ow, x.w);
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        let x_shift_h = kh as isize - self.pad as isize;
                        let x_shift_w = kw as isize - self.pad as isize;
                        let mut dw = 0.0;
                        for oy in oy_lo..oy_hi {
                            let iy = ((oy * s) as isize + x_shift_h) as usize;
                            let ix0 = ((ox_lo * s) as isize + x_shift_w) as usize;
                            let drow = &dplane[oy * ow + ox_lo..oy * ow + ox_hi];
                            if s == 1 {
                                let xrow = &xplane[iy * x.w + ix0..iy * x.w + ix0 + drow.len()];
                                let dxrow = &mut dxplane
                                    [iy * x.w + ix0..iy * x.w + ix0 + drow.len()];
                                for ((g, xv), dxv) in drow.iter().zip(xrow).zip(dxrow) {
                                    dw += g * xv;
                                    *dxv += g * wv;
                                }
                            } else {
                                let xrow = &xplane[iy * x.w..(iy + 1) * x.w];
                                let dxrow = &mut dxplane[iy * x.w..(iy + 1) * x.w];
                                for (j, g) in drow.iter().enumerate() {
                                    let ix = ix0 + j * s;
                                    dw += g * xrow[ix];
                                    dxrow[ix] += g * wv;
                                }
                            }
                        }
                        self.w.grad.data_mut()[widx] += dw;
                    }
                }
            }
        }
        dx
    }

}

impl ParamVisitor for Conv2d {
    fn for_each_param(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        f("w", &mut self.w);
        f("b", &mut self.b);
    }
}

fn relu_fmap(x: &Fmap) -> Fmap {
    Fmap { ch: x.ch, h: x.h, w: x.w, data: x.data.iter().map(|v| v.max(0.0)).collect() }
}

fn relu_fmap_backward(x: &Fmap, dy: &Fmap) -> Fmap {
    Fmap {
        ch: x.ch,
        h: x.h,
        w: x.w,
        data: x.data.iter().zip(&dy.data).map(|(&v, &g)| if v > 0.0 { g } else { 0.0 }).collect(),
    }
}

fn max_pool(x: &Fmap, f: usize) -> (Fmap, Vec<usize>) {
    if f <= 1 {
        return (x.clone(), (0..x.data.len()).collect());
    }
    let (oh, ow) = (x.h / f, x.w / f);
    let mut out = Fmap::zeros(x.ch, oh, ow);
    let mut arg = vec![0usize; x.ch * oh * ow];
    for c in 0..x.ch {
        let plane = x.plane(c);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0;
                for dy in 0..f {
                    for dx in 0..f {
                        let idx = (oy * f + dy) * x.w + ox * f + dx;
                        if plane[idx] > best {
                            best = plane[idx];
                            best_idx = idx;
                        }
                    }
                }
                let o = (c * oh + oy) * ow + ox;
                out.data[o] = best;
                arg[o] = c * x.h * x.w + best_idx;
            }
        }
    }
    (out, arg)
}

fn max_pool_backward(x: &Fmap, dy: &Fmap, arg: &[usize], f: usize) -> Fmap {
    if f <= 1 {
        return dy.clone();
    }
    let mut dx = Fmap::zeros(x.ch, x.h, x.w);
    for (o, &src) in arg.iter().enumerate() {
        dx.data[src] += dy.data[o];
    }
    dx
}

fn avg_pool(x: &Fmap, f: usize) -> Fmap {
    if f <= 1 {
        return x.clone();
    }
    let (oh, ow) = (x.h / f, x.w / f);
    let norm = 1.0 / (f * f) as f64;
    let mut out = Fmap::zeros(x.ch, oh, ow);
    for c in 0..x.ch {
        let plane = x.plane(c);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for dy in 0..f {
                    for dx in 0..f {
                        acc += plane[(oy * f + dy) * x.w + ox * f + dx];
                    }
                }
                out.data[(c * oh + oy) * ow + ox] = acc * norm;
            }
        }
    }
    out
}

fn avg_pool_backward(x: &Fmap, dy: &Fmap, f: usize) -> Fmap {
    if f <= 1 {
        return dy.clone();
    }
    let norm = 1.0 / (f * f) as f64;
    let mut dx = Fmap::zeros(x.ch, x.h, x.w);
    for c in 0..x.ch {
        for oy in 0..dy.h {
            for ox in 0..dy.w {
                let g = dy.data[(c * dy.h + oy) * dy.w + ox] * norm;
                for ddy in 0..f {
                    for ddx in 0..f {
                        dx.data[c * x.h * x.w + (oy * f + ddy) * x.w + ox * f + ddx] += g;
                    }
                }
            }
        }
    }
    dx
}

const RMS_EPS: f64 = 1e-6;
/// Fixed centering for the log-RMS head feature; pooled activations land
/// around this scale, and an uncentered log feature conditions the head
/// badly.
const LOG_RMS_CENTER: f64 = -4.605_170_185_988_091; // ln(0.01)

/// Per-example RMS normalization of the pooled feature vector, standing in
/// for the batch normalization the full-size architecture carries before
/// its classifier. The magnitude is not discarded: the head receives it as
/// an explicit log-RMS feature so scale differences between examples stay
/// learnable. Returns the normalized vector and the RMS.
fn rms_norm(x: &[f64]) -> (Vec<f64>, f64) {
    let r = (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt();
    let s = 1.0 / (r + RMS_EPS);
    (x.iter().map(|v| v * s).collect(), r)
}

/// Backward through `[rms_norm(x) || ln(rms + eps)]` given the upstream
/// gradients on the normalized channels and on the log-RMS feature.
fn rms_norm_backward(x: &[f64], r: f64, dy: &[f64], d_log_r: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let s = 1.0 / (r + RMS_EPS);
    if r < 1e-12 {
        return dy.iter().map(|g| g * s).collect();
    }
    let dot: f64 = dy.iter().zip(x).map(|(g, v)| g * v).sum();
    let norm_coef = dot / (n * r * (r + RMS_EPS) * (r + RMS_EPS));
    let log_coef = d_log_r / (n * r * (r + RMS_EPS));
    x.iter().zip(dy).map(|(v, g)| g * s - v * norm_coef + v * log_coef).collect()
}

fn concat(maps: &[&Fmap]) -> Fmap {
    let (h, w) = (maps[0].h, maps[0].w);
    let ch = maps.iter().map(|m| m.ch).sum();
    let mut data = Vec::with_capacity(ch * h * w);
    for m in maps {
        data.extend_from_slice(&m.data);
    }
    Fmap { ch, h, w, data }
}

/// One dense block: layer i consumes the concatenation of the block input
/// and every earlier layer's output, and contributes `growth` new channels.
struct DenseBlock {
    convs: Vec<Conv2d>,
    growth: usize,
}

struct BlockCache {
    /// Pre-activation concatenated input of each layer.
    layer_inputs: Vec<Fmap>,
}

impl DenseBlock {
    fn new(in_ch: usize, layers: usize, growth: usize, rng: &mut impl Rng) -> Self {
        let convs = (0..layers)
            .map(|i| Conv2d::new(in_ch + i * growth, growth, 3, 1, 1, rng))
            .collect();
        DenseBlock { convs, growth }
    }

    fn out_channels(&self, in_ch: usize) -> usize {
        in_ch + self.convs.len() * self.growth
    }

    fn forward(&self, x: &Fmap) -> (Fmap, BlockCache) {
        let mut features: Vec<Fmap> = vec![x.clone()];
        let mut layer_inputs = Vec::with_capacity(self.convs.len());
        for conv in &self.convs {
            let refs: Vec<&Fmap> = features.iter().collect();
            let cat = concat(&refs);
            let y = conv.forward(&relu_fmap(&cat));
            layer_inputs.push(cat);
            features.push(y);
        }
        let refs: Vec<&Fmap> = features.iter().collect();
        (concat(&refs), BlockCache { layer_inputs })
    }

    fn backward(&mut self, cache: &BlockCache, dy: &Fmap) -> Fmap {
        let layers = self.convs.len();
        let in_ch = self.convs[0].in_ch;
        let (h, w) = (dy.h, dy.w);
        let plane = h * w;

        // Split the output gradient into per-feature gradients.
        let mut d_features: Vec<Fmap> = Vec::with_capacity(layers + 1);
        let mut offset = 0;
        for ch in std::iter::once(in_ch).chain(std::iter::repeat(self.growth).take(layers)) {
            d_features.push(Fmap {
                ch,
                h,
                w,
                data: dy.data[offset * plane..(offset + ch) * plane].to_vec(),
            });
            offset += ch;
        }

        for i in (0..layers).rev() {
            let cat = &cache.layer_inputs[i];
            let d_out = d_features[i + 1].clone();
            let d_relu = self.convs[i].backward(&relu_fmap(cat), &d_out);
            let d_cat = relu_fmap_backward(cat, &d_relu);
            // Route the concatenated gradient back to each source feature.
            let mut offset = 0;
            for df in d_features.iter_mut().take(i + 1) {
                let n = df.ch * plane;
                for (a, b) in df.data.iter_mut().zip(&d_cat.data[offset..offset + n]) {
                    *a += b;
                }
                offset += n;
            }
        }
        d_features.swap_remove(0)
    }
}

impl ParamVisitor for DenseBlock {
    fn for_each_param(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        for (i, conv) in self.convs.iter_mut().enumerate() {
            conv.for_each_param(&mut |name, p| f(&format!("conv{i}.{name}"), p));
        }
    }
}

/// Desk-scale architecture knobs. The full pretrained architecture is out of
/// reach here; this keeps the dense-connectivity pattern at a trainable size.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CnnConfig {
    pub input_hw: usize,
    pub stem_channels: usize,
    pub stem_kernel: usize,
    pub stem_stride: usize,
    /// Max-pool factor after the stem (1 disables pooling).
    pub stem_pool: usize,
    pub num_blocks: usize,
    pub layers_per_block: usize,
    pub growth: usize,
    /// Avg-pool factor inside transitions.
    pub transition_pool: usize,
}

impl CnnConfig {
    /// 224 -> 56 (stem stride 4) -> 28 (max pool) -> blocks at 28 and 14.
    pub fn desk_default() -> Self {
        CnnConfig {
            input_hw: WIDTH,
            stem_channels: 16,
            stem_kernel: 7,
            stem_stride: 4,
            stem_pool: 2,
            num_blocks: 2,
            layers_per_block: 4,
            growth: 8,
            transition_pool: 2,
        }
    }

    /// Tiny 1-block variant for gradient checking.
    pub fn micro(input_hw: usize) -> Self {
        CnnConfig {
            input_hw,
            stem_channels: 3,
            stem_kernel: 3,
            stem_stride: 1,
            stem_pool: 1,
            num_blocks: 1,
            layers_per_block: 2,
            growth: 2,
            transition_pool: 2,
        }
    }
}

struct Transition {
    conv: Conv2d,
    pool: usize,
}

pub struct DenseBlockModel {
    pub cfg: CnnConfig,
    stem: Conv2d,
    blocks: Vec<DenseBlock>,
    transitions: Vec<Transition>,
    head: Dense,
}

struct CnnCache {
    input: Fmap,
    stem_pre: Fmap,
    stem_relu: Fmap,
    stem_pool_arg: Vec<usize>,
    blocks: Vec<(Fmap, BlockCache, Fmap)>, // (block input, cache, block output)
    transitions: Vec<(Fmap, Fmap)>,        // (relu input, conv input after relu)
    head_in_pre: Fmap,                     // final block output, pre-relu
    pooled: Vec<f64>,
    pooled_rms: f64,
    normed: Vec<f64>,
}

impl DenseBlockModel {
    pub fn new(cfg: CnnConfig, rng: &mut ChaCha20Rng) -> Self {
        let stem = Conv2d::new(
            1,
            cfg.stem_channels,
            cfg.stem_kernel,
            cfg.stem_stride,
            cfg.stem_kernel / 2,
            rng,
        );
        let mut blocks = Vec::new();
        let mut transitions = Vec::new();
        let mut ch = cfg.stem_channels;
        for b in 0..cfg.num_blocks {
            let block = DenseBlock::new(ch, cfg.layers_per_block, cfg.growth, rng);
            ch = block.out_channels(ch);
            blocks.push(block);
            if b + 1 < cfg.num_blocks {
                let out = (ch / 2).max(1);
                transitions.push(Transition {
                    conv: Conv2d::new(ch, out, 1, 1, 0, rng),
                    pool: cfg.transition_pool,
                });
                ch = out;
            }
        }
        let head = Dense::new(ch + 1, 1, rng);
        DenseBlockModel { cfg, stem, blocks, transitions, head }
    }

    pub fn final_channels(&self) -> usize {
        self.head.input_size() - 1
    }

    pub fn n_params(&mut self) -> usize {
        self.param_count()
    }

    fn image_fmap(&self, img: &GrayImage) -> Result<Fmap, ImageError> {
        let hw = self.cfg.input_hw;
        if img.pixels.len() != hw * hw {
            return Err(ImageError::BadImage(img.pixels.len()));
        }
        Ok(Fmap {
            ch: 1,
            h: hw,
            w: hw,
            data: img.pixels.iter().map(|&b| b as f64 / 255.0).collect(),
        })
    }

    fn forward_cached(&self, img: &GrayImage) -> Result<(f64, CnnCache), ImageError> {
        let input = self.image_fmap(img)?;
        let stem_pre = self.stem.forward(&input);
        let stem_relu = relu_fmap(&stem_pre);
        let (stem_pooled, stem_pool_arg) = max_pool(&stem_relu, self.cfg.stem_pool);

        let mut x = stem_pooled;
        let mut blocks = Vec::new();
        let mut transitions = Vec::new();
        for (i, block) in self.blocks.iter().enumerate() {
            let (out, cache) = block.forward(&x);
            blocks.push((x.clone(), cache, out.clone()));
            x = out;
            if let Some(t) = self.transitions.get(i) {
                let relu_in = x.clone();
                let activated = relu_fmap(&relu_in);
                let conved = t.conv.forward(&activated);
                let pooled = avg_pool(&conved, t.pool);
                transitions.push((relu_in, activated));
                x = pooled;
            }
        }

        let head_in_pre = x.clone();
        let activated = relu_fmap(&head_in_pre);
        let plane = (activated.h * activated.w) as f64;
        let pooled: Vec<f64> =
            (0..activated.ch).map(|c| activated.plane(c).iter().sum::<f64>() / plane).collect();
        let (mut normed, pooled_rms) = rms_norm(&pooled);
        normed.push((pooled_rms + RMS_EPS).ln() - LOG_RMS_CENTER);
        let logit = self.head.forward(&normed)?[0];
        Ok((
            logit,
            CnnCache {
                input,
                stem_pre,
                stem_relu,
                stem_pool_arg,
                blocks,
                transitions,
                head_in_pre,
                pooled,
                pooled_rms,
                normed,
            },
        ))
    }

    pub fn logit(&self, img: &GrayImage) -> Result<f64, ImageError> {
        Ok(self.forward_cached(img)?.0)
    }

    /// Probability that the image encodes a censorship event.
    pub fn classify(&self, img: &GrayImage) -> Result<f64, ImageError> {
        Ok(sigmoid(self.logit(img)?))
    }

    /// Accumulates gradients of a BCE loss for one image; returns the loss.
    pub fn train_example(&mut self, img: &GrayImage, target: f64) -> Result<f64, ImageError> {
        let (logit, cache) = self.forward_cached(img)?;
        let (loss, dlogit) = bce_with_logit(logit, target);

        let d_head_in = self.head.backward(&cache.normed, &[dlogit]);
        let channels = d_head_in.len() - 1;
        let d_pooled = rms_norm_backward(
            &cache.pooled,
            cache.pooled_rms,
            &d_head_in[..channels],
            d_head_in[channels],
        );
        let act = relu_fmap(&cache.head_in_pre);
        let plane = (act.h * act.w) as f64;
        let mut d_act = Fmap::zeros(act.ch, act.h, act.w);
        for c in 0..act.ch {
            let g = d_pooled[c] / plane;
            let n = act.h * act.w;
            for v in &mut d_act.data[c * n..(c + 1) * n] {
                *v = g;
            }
        }
        let mut dx = relu_fmap_backward(&cache.head_in_pre, &d_act);

        for i in (0..self.blocks.len()).rev() {
            if let Some(t) = self.transitions.get_mut(i) {
                let (relu_in, activated) = &cache.transitions[i];
                let (oh, ow) = t.conv.out_hw(activated.h, activated.w);
                let conv_shape = Fmap::zeros(t.conv.out_ch, oh, ow);
                let d_conved = avg_pool_backward(&conv_shape, &dx, t.pool);
                let d_activated = t.conv.backward(activated, &d_conved);
                dx = relu_fmap_backward(relu_in, &d_activated);
            }
            let (_, block_cache, _) = &cache.blocks[i];
            dx = self.blocks[i].backward(block_cache, &dx);
        }

        let d_relu = max_pool_backward(&cache.stem_relu, &dx, &cache.stem_pool_arg, self.cfg.stem_pool);
        let d_pre = relu_fmap_backward(&cache.stem_pre, &d_relu);
        let _ = self.stem.backward(&cache.input, &d_pre);
        Ok(loss)
    }

    pub fn to_checkpoint(&mut self, rng: Option<&ChaCha20Rng>, epoch: u64) -> Checkpoint {
        let meta = serde_json::to_string(&self.cfg).expect("config serializes");
        let mut params = Vec::new();
        self.for_each_param(&mut |name, p| params.push((name.to_string(), p.value.clone())));
        Checkpoint {
            model_kind: "densenet_cd".into(),
            meta_json: meta,
            params,
            optimizer: Vec::new(),
            rng: rng.map(RngState::capture),
            epoch,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, ImageError> {
        if ck.model_kind != "densenet_cd" {
            return Err(ImageError::WrongKind(ck.model_kind.clone()));
        }
        let cfg: CnnConfig = serde_json::from_str(&ck.meta_json)
            .map_err(|_| ImageError::WrongKind("meta".into()))?;
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let mut model = DenseBlockModel::new(cfg, &mut rng);
        let mut missing = false;
        model.for_each_param(&mut |name, p| match ck.params.iter().find(|(n, _)| n == name) {
            Some((_, t)) if t.shape() == p.value.shape() => p.value = t.clone(),
            _ => missing = true,
        });
        if missing {
            return Err(ImageError::WrongKind("parameter table mismatch".into()));
        }
        Ok(model)
    }

    /// Zeroes the weights through which layer `layer` of block `block` sees
    /// the block input (the shortcut concatenation), for structural tests.
    pub fn ablate_shortcut(&mut self, block: usize, layer: usize) {
        let in_ch = self.blocks[block].convs[0].in_ch;
        let conv = &mut self.blocks[block].convs[layer];
        let k2 = conv.k * conv.k;
        for oc in 0..conv.out_ch {
            for ic in 0..in_ch {
                let base = (oc * conv.in_ch + ic) * k2;
                for v in &mut conv.w.value.data_mut()[base..base + k2] {
                    *v = 0.0;
                }
            }
        }
    }
}

use rand::SeedableRng;

impl ParamVisitor for DenseBlockModel {
    fn for_each_param(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        self.stem.for_each_param(&mut |name, p| f(&format!("stem.{name}"), p));
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.for_each_param(&mut |name, p| f(&format!("block{i}.{name}"), p));
        }
        for (i, t) in self.transitions.iter_mut().enumerate() {
            t.conv.for_each_param(&mut |name, p| f(&format!("trans{i}.{name}"), p));
        }
        self.head.for_each_param(&mut |name, p| f(&format!("head.{name}"), p));
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImgTrainConfig {
    pub seed: u64,
    pub max_epochs: u64,
    pub batch_size: usize,
    /// Fraction of the training images sampled fresh each epoch.
    pub sample_fraction: f64,
    pub lr: LrSchedule,
    pub patience: u32,
    pub min_delta: f64,
}

impl Default for ImgTrainConfig {
    fn default() -> Self {
        ImgTrainConfig {
            seed: 0,
            max_epochs: 20,
            batch_size: 16,
            sample_fraction: 1.0,
            lr: LrSchedule::new(1e-6, 1e-7, 10),
            patience: 5,
            min_delta: 1e-5,
        }
    }
}

pub use crate::cd::{ClassifierEpoch, ClassifierOutcome};

pub fn validation_stats(
    model: &DenseBlockModel,
    data: &[(GrayImage, bool)],
    threshold: f64,
) -> Result<(f64, f64), ImageError> {
    let mut loss = 0.0;
    let mut correct = 0usize;
    for (img, y) in data {
        let logit = model.logit(img)?;
        loss += bce_with_logit(logit, *y as u8 as f64).0;
        if (sigmoid(logit) >= threshold) == *y {
            correct += 1;
        }
    }
    Ok((loss / data.len() as f64, correct as f64 / data.len() as f64))
}

/// Binary cross-entropy training of the dense-block model, mirroring the
/// embedding classifier's loop.
pub fn train_image_classifier(
    model: &mut DenseBlockModel,
    train: &[(GrayImage, bool)],
    val: &[(GrayImage, bool)],
    cfg: &ImgTrainConfig,
) -> Result<ClassifierOutcome, ImageError> {
    if train.is_empty() || val.is_empty() {
        return Err(ImageError::EmptyDataset);
    }
    if train.iter().all(|(_, y)| *y) || train.iter().all(|(_, y)| !*y) {
        return Err(ImageError::SingleClass);
    }

    let mut data_rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    data_rng.set_stream(2);

    let (val_loss, val_acc) = validation_stats(model, val, 0.5)?;
    let mut history = vec![ClassifierEpoch {
        epoch: 0,
        lr: cfg.lr.lr(0),
        train_loss: None,
        val_loss,
        val_accuracy: val_acc,
    }];

    let mut best = val_loss;
    let mut best_epoch = 0u64;
    let mut bad_epochs = 0u32;
    let mut stopped_early = false;
    let mut epochs_run = 0;

    let per_epoch = ((train.len() as f64 * cfg.sample_fraction).floor() as usize)
        .clamp(1, train.len());

    for epoch in 1..=cfg.max_epochs {
        let lr = cfg.lr.lr(epoch - 1);
        let mut idx: Vec<usize> = (0..train.len()).collect();
        use rand::seq::SliceRandom;
        idx.shuffle(&mut data_rng);
        idx.truncate(per_epoch);

        let mut epoch_loss = 0.0;
        for batch in idx.chunks(cfg.batch_size.max(1)) {
            for &i in batch {
                let (img, y) = &train[i];
                epoch_loss += model.train_example(img, *y as u8 as f64)?;
            }
            sgd_step(model, lr, batch.len() as f64)?;
            model.zero_grads();
        }

        let (val_loss, val_acc) = validation_stats(model, val, 0.5)?;
        history.push(ClassifierEpoch {
            epoch,
            lr,
            train_loss: Some(epoch_loss / per_epoch as f64),
            val_loss,
            val_accuracy: val_acc,
        });
        epochs_run = epoch;

        if val_loss < best - cfg.min_delta {
            best = val_loss;
            best_epoch = epoch;
            bad_epochs = 0;
        } else {
            bad_epochs += 1;
            if bad_epochs > cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }

    Ok(ClassifierOutcome { history, stopped_early, best_epoch, epochs_run })
}
