//! The event-to-image network: a small U-Net with a residual bottleneck and
//! a logistic output layer.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Conv2d, Map, NormCache, Padding};
use crate::representation::{crop_planes, Crop, CropRect, EventTensor};

/// Single-channel image with every pixel in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct IntensityImage {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl IntensityImage {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "{} pixels for a {height}x{width} image",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("non-finite pixel {v}")));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Validation("pixel outside [0, 1]".into()));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value.clamp(0.0, 1.0); height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_gray8(&self) -> image::GrayImage {
        let pixels = self
            .data
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        image::GrayImage::from_raw(self.width as u32, self.height as u32, pixels)
            .expect("buffer length matches geometry")
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_gray8()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
    }
}

impl Crop for IntensityImage {
    fn crop(&self, rect: &CropRect) -> Result<Self> {
        let data = crop_planes(&self.data, 1, self.height, self.width, rect)?;
        Ok(Self {
            height: rect.size,
            width: rect.size,
            data,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    #[default]
    Instance,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReconNetConfig {
    /// Input channels are `2 * t_bins`.
    pub t_bins: usize,
    /// Resolution levels of the U-Net; the input side must be divisible by
    /// `2^(levels - 1)`.
    pub levels: usize,
    pub base_width: usize,
    pub residual_blocks: usize,
    pub normalization: Normalization,
    pub padding: Padding,
    /// Per-sample zero-mean/unit-variance scaling of the raw event mass.
    pub standardize_input: bool,
    /// Smallest spatial size the network will be asked to process.
    pub min_input_size: usize,
}

impl Default for ReconNetConfig {
    fn default() -> Self {
        Self {
            t_bins: 9,
            levels: 3,
            base_width: 32,
            residual_blocks: 2,
            normalization: Normalization::Instance,
            padding: Padding::Zeros,
            standardize_input: false,
            min_input_size: 128,
        }
    }
}

impl ReconNetConfig {
    pub fn input_channels(&self) -> usize {
        2 * self.t_bins
    }

    pub fn size_factor(&self) -> usize {
        1 << (self.levels.saturating_sub(1))
    }

    pub fn width_at(&self, level: usize) -> usize {
        self.base_width << level
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_bins == 0 || self.levels == 0 || self.base_width == 0 {
            return Err(Error::InvalidConfig(
                "t_bins, levels and base_width must all be >= 1".into(),
            ));
        }
        if self.levels > 8 {
            return Err(Error::InvalidConfig(format!(
                "{} levels is too deep",
                self.levels
            )));
        }
        let f = self.size_factor();
        if self.min_input_size < f || !self.min_input_size.is_multiple_of(f) {
            return Err(Error::InvalidConfig(format!(
                "{} levels need inputs divisible by {f}, but the minimum input size is {}",
                self.levels, self.min_input_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Gradient buffers laid out like the network's parameter list.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<Vec<f64>>);

impl Gradients {
    pub fn zeros_like(params: &[Param]) -> Self {
        Self(params.iter().map(|p| vec![0.0; p.data.len()]).collect())
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().flatten().all(|v| *v == 0.0)
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvRef {
    conv: Conv2d,
    weight: usize,
    bias: usize,
}

#[derive(Debug, Clone, Copy)]
struct NormRef {
    gamma: usize,
    beta: usize,
}

/// conv -> (instance norm) -> SiLU
#[derive(Debug, Clone, Copy)]
struct Block {
    conv: ConvRef,
    norm: Option<NormRef>,
}

/// SiLU(x + norm(conv(block(x))))
#[derive(Debug, Clone, Copy)]
struct ResBlock {
    inner: Block,
    conv: ConvRef,
    norm: Option<NormRef>,
}

struct BlockCache {
    input: Map,
    norm: Option<NormCache>,
    pre: Map,
}

struct ResCache {
    inner: BlockCache,
    mid: Map,
    norm: Option<NormCache>,
    pre: Map,
}

/// Activations retained by [`ReconNet::forward_train`].
pub struct ForwardCache {
    encoder: Vec<Vec<BlockCache>>,
    residual: Vec<ResCache>,
    decoder: Vec<BlockCache>,
    skip_channels: Vec<usize>,
    head_input: Map,
    output: Vec<f64>,
}

/// Network parameters plus the fixed layer graph (`net_state`).
#[derive(Debug, Clone)]
pub struct ReconNet {
    config: ReconNetConfig,
    params: Vec<Param>,
    encoder: Vec<Vec<Block>>,
    residual: Vec<ResBlock>,
    decoder: Vec<Block>,
    head: ConvRef,
}

struct Builder<'a> {
    params: Vec<Param>,
    rng: &'a mut ChaCha8Rng,
    config: &'a ReconNetConfig,
}

impl Builder<'_> {
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) -> ConvRef {
        let conv = Conv2d {
            cin,
            cout,
            k,
            padding: self.config.padding,
        };
        let bound = 1.0 / ((cin * k * k) as f64).sqrt();
        let w = (0..conv.weight_len())
            .map(|_| self.rng.gen_range(-bound..bound))
            .collect();
        let b = (0..cout)
            .map(|_| self.rng.gen_range(-bound..bound))
            .collect();
        let weight = self.push(format!("{name}.weight"), vec![cout, cin, k, k], w);
        let bias = self.push(format!("{name}.bias"), vec![cout], b);
        ConvRef { conv, weight, bias }
    }

    fn norm(&mut self, name: &str, c: usize) -> Option<NormRef> {
        match self.config.normalization {
            Normalization::None => None,
            Normalization::Instance => Some(NormRef {
                gamma: self.push(format!("{name}.gamma"), vec![c], vec![1.0; c]),
                beta: self.push(format!("{name}.beta"), vec![c], vec![0.0; c]),
            }),
        }
    }

    fn block(&mut self, name: &str, cin: usize, cout: usize) -> Block {
        Block {
            conv: self.conv(&format!("{name}.conv"), cin, cout, 3),
            norm: self.norm(&format!("{name}.norm"), cout),
        }
    }

    fn push(&mut self, name: String, shape: Vec<usize>, data: Vec<f64>) -> usize {
        self.params.push(Param { name, shape, data });
        self.params.len() - 1
    }
}

impl ReconNet {
    /// Deterministic initialisation: uniform `±1/sqrt(fan_in)` for
    /// convolutions, unit scale and zero shift for normalisation.
    pub fn init(config: ReconNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            params: Vec::new(),
            rng: &mut rng,
            config: &config,
        };
        let levels = config.levels;
        let mut encoder = Vec::with_capacity(levels);
        for l in 0..levels {
            let cin = if l == 0 {
                config.input_channels()
            } else {
                config.width_at(l - 1)
            };
            let w = config.width_at(l);
            let mut blocks = vec![b.block(&format!("enc{l}.0"), cin, w)];
            if l + 1 < levels || levels == 1 {
                blocks.push(b.block(&format!("enc{l}.1"), w, w));
            }
            encoder.push(blocks);
        }
        let wb = config.width_at(levels - 1);
        let residual = (0..config.residual_blocks)
            .map(|r| ResBlock {
                inner: b.block(&format!("res{r}.0"), wb, wb),
                conv: b.conv(&format!("res{r}.1.conv"), wb, wb, 3),
                norm: b.norm(&format!("res{r}.1.norm"), wb),
            })
            .collect();
        let decoder = (0..levels - 1)
            .rev()
            .map(|l| {
                b.block(
                    &format!("dec{l}"),
                    config.width_at(l + 1) + config.width_at(l),
                    config.width_at(l),
                )
            })
            .collect();
        let head = b.conv("head", config.width_at(0), 1, 1);
        let params = b.params;
        Ok(Self {
            config,
            params,
            encoder,
            residual,
            decoder,
            head,
        })
    }

    pub fn config(&self) -> &ReconNetConfig {
        &self.config
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    /// Replaces all parameters, checking names and shapes.
    pub fn load_params(&mut self, params: Vec<Param>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} parameter tensors, found {}",
                self.params.len(),
                params.len()
            )));
        }
        for (have, new) in self.params.iter().zip(&params) {
            if have.name != new.name || have.shape != new.shape || new.data.len() != have.data.len()
            {
                return Err(Error::ShapeMismatch(format!(
                    "parameter {} {:?} does not match {} {:?}",
                    new.name, new.shape, have.name, have.shape
                )));
            }
        }
        self.params = params;
        Ok(())
    }

    fn check_input(&self, tensor: &EventTensor) -> Result<()> {
        if tensor.channels() != self.config.input_channels() {
            return Err(Error::ChannelMismatch {
                expected: self.config.input_channels(),
                actual: tensor.channels(),
            });
        }
        let f = self.config.size_factor();
        if !tensor.height().is_multiple_of(f) || !tensor.width().is_multiple_of(f) {
            return Err(Error::ShapeMismatch(format!(
                "input {}x{} is not divisible by {f}",
                tensor.height(),
                tensor.width()
            )));
        }
        Ok(())
    }

    fn input_map(&self, tensor: &EventTensor) -> Map {
        let mut data = tensor.data().to_vec();
        if self.config.standardize_input {
            let n = data.len() as f64;
            let mean = data.iter().sum::<f64>() / n;
            let var = data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + nn::NORM_EPS).sqrt();
            data.iter_mut().for_each(|v| *v = (*v - mean) * inv);
        }
        Map::new(tensor.channels(), tensor.height(), tensor.width(), data)
    }

    pub fn reconstruct(&self, tensor: &EventTensor) -> Result<IntensityImage> {
        Ok(self.forward_train(tensor)?.0)
    }

    pub fn forward_train(&self, tensor: &EventTensor) -> Result<(IntensityImage, ForwardCache)> {
        self.check_input(tensor)?;
        let mut h = self.input_map(tensor);
        let mut encoder_cache = Vec::with_capacity(self.encoder.len());
        let mut skips = Vec::new();
        for (l, blocks) in self.encoder.iter().enumerate() {
            if l > 0 {
                h = nn::avg_pool2_forward(&h);
            }
            let mut caches = Vec::with_capacity(blocks.len());
            for blk in blocks {
                let (out, c) = self.block_forward(blk, h);
                caches.push(c);
                h = out;
            }
            encoder_cache.push(caches);
            if l + 1 < self.encoder.len() {
                skips.push(h.clone());
            }
        }
        let mut residual_cache = Vec::with_capacity(self.residual.len());
        for rb in &self.residual {
            let (out, c) = self.res_forward(rb, h);
            residual_cache.push(c);
            h = out;
        }
        let mut decoder_cache = Vec::with_capacity(self.decoder.len());
        let mut skip_channels = Vec::with_capacity(self.decoder.len());
        for blk in &self.decoder {
            let skip = skips.pop().expect("one skip per decoder level");
            let up = nn::upsample2_forward(&h);
            skip_channels.push(up.c);
            let (out, c) = self.block_forward(blk, nn::concat(&up, &skip));
            decoder_cache.push(c);
            h = out;
        }
        let logits = self.conv_forward(&self.head, &h);
        let output: Vec<f64> = logits.data.iter().map(|v| nn::sigmoid(*v)).collect();
        let image = IntensityImage {
            height: logits.h,
            width: logits.w,
            data: output.clone(),
        };
        Ok((
            image,
            ForwardCache {
                encoder: encoder_cache,
                residual: residual_cache,
                decoder: decoder_cache,
                skip_channels,
                head_input: h,
                output,
            },
        ))
    }

    /// Accumulates parameter gradients of `<d_image, G(x)>` into `grads`.
    pub fn backward(&self, cache: &ForwardCache, d_image: &[f64], grads: &mut Gradients) {
        assert_eq!(d_image.len(), cache.output.len(), "image gradient size");
        let hi = &cache.head_input;
        let d_logits = Map::new(
            1,
            hi.h,
            hi.w,
            d_image
                .iter()
                .zip(&cache.output)
                .map(|(g, s)| g * s * (1.0 - s))
                .collect(),
        );
        let mut dh = self.conv_backward(&self.head, hi, &d_logits, grads);
        let mut d_skips = Vec::with_capacity(self.decoder.len());
        for ((blk, c), &up_c) in self
            .decoder
            .iter()
            .zip(&cache.decoder)
            .zip(&cache.skip_channels)
            .rev()
        {
            let d_cat = self.block_backward(blk, c, &dh, grads);
            let (d_up, d_skip) = nn::split(&d_cat, up_c);
            d_skips.push(d_skip);
            dh = nn::upsample2_backward(&d_up);
        }
        // d_skips now runs from the shallowest skip to the deepest
        for (rb, c) in self.residual.iter().zip(&cache.residual).rev() {
            dh = self.res_backward(rb, c, &dh, grads);
        }
        for (l, (blocks, caches)) in self.encoder.iter().zip(&cache.encoder).enumerate().rev() {
            if l + 1 < self.encoder.len() {
                dh.add_assign(&d_skips[l]);
            }
            for (blk, c) in blocks.iter().zip(caches).rev() {
                dh = self.block_backward(blk, c, &dh, grads);
            }
            if l > 0 {
                dh = nn::avg_pool2_backward(&dh);
            }
        }
    }

    fn conv_forward(&self, c: &ConvRef, x: &Map) -> Map {
        c.conv
            .forward(&self.params[c.weight].data, &self.params[c.bias].data, x)
    }

    fn conv_backward(&self, c: &ConvRef, x: &Map, dy: &Map, grads: &mut Gradients) -> Map {
        let (dw, db) = two_mut(&mut grads.0, c.weight, c.bias);
        c.conv.backward(&self.params[c.weight].data, x, dy, dw, db)
    }

    fn norm_forward(&self, n: &Option<NormRef>, x: Map) -> (Map, Option<NormCache>) {
        match n {
            None => (x, None),
            Some(n) => {
                let (y, c) = nn::instance_norm_forward(
                    &x,
                    &self.params[n.gamma].data,
                    &self.params[n.beta].data,
                );
                (y, Some(c))
            }
        }
    }

    fn norm_backward(
        &self,
        n: &Option<NormRef>,
        cache: &Option<NormCache>,
        dy: Map,
        grads: &mut Gradients,
    ) -> Map {
        match (n, cache) {
            (Some(n), Some(c)) => {
                let (dg, db) = two_mut(&mut grads.0, n.gamma, n.beta);
                nn::instance_norm_backward(c, &self.params[n.gamma].data, &dy, dg, db)
            }
            _ => dy,
        }
    }

    fn block_forward(&self, blk: &Block, x: Map) -> (Map, BlockCache) {
        let z = self.conv_forward(&blk.conv, &x);
        let (pre, norm) = self.norm_forward(&blk.norm, z);
        let out = nn::silu_forward(&pre);
        (
            out,
            BlockCache {
                input: x,
                norm,
                pre,
            },
        )
    }

    fn block_backward(&self, blk: &Block, c: &BlockCache, dy: &Map, grads: &mut Gradients) -> Map {
        let d_pre = nn::silu_backward(&c.pre, dy);
        let dz = self.norm_backward(&blk.norm, &c.norm, d_pre, grads);
        self.conv_backward(&blk.conv, &c.input, &dz, grads)
    }

    fn res_forward(&self, rb: &ResBlock, x: Map) -> (Map, ResCache) {
        let (mid, inner) = self.block_forward(&rb.inner, x.clone());
        let z = self.conv_forward(&rb.conv, &mid);
        let (mut pre, norm) = self.norm_forward(&rb.norm, z);
        pre.add_assign(&x);
        let out = nn::silu_forward(&pre);
        (
            out,
            ResCache {
                inner,
                mid,
                norm,
                pre,
            },
        )
    }

    fn res_backward(&self, rb: &ResBlock, c: &ResCache, dy: &Map, grads: &mut Gradients) -> Map {
        let d_pre = nn::silu_backward(&c.pre, dy);
        let dz = self.norm_backward(&rb.norm, &c.norm, d_pre.clone(), grads);
        let d_mid = self.conv_backward(&rb.conv, &c.mid, &dz, grads);
        let mut dx = self.block_backward(&rb.inner, &c.inner, &d_mid, grads);
        dx.add_assign(&d_pre);
        dx
    }
}

fn two_mut<T>(v: &mut [T], a: usize, b: usize) -> (&mut T, &mut T) {
    assert!(a != b);
    if a < b {
        let (lo, hi) = v.split_at_mut(b);
        (&mut lo[a], &mut hi[0])
    } else {
        let (lo, hi) = v.split_at_mut(a);
        (&mut hi[0], &mut lo[b])
    }
}
