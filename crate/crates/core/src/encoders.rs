//! Frozen image-text embedding backends and zero-shot prediction.

use std::sync::Mutex;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::reconstruction::IntensityImage;
use crate::representation::BilinearMap;

pub const DEFAULT_TEMPLATE: &str = "image of a [CLASS].";
const PLACEHOLDER: &str = "[CLASS]";
const UNIT_TOL: f64 = 1e-5;

/// `rows x dim` matrix of unit-length text (or prototype) features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    rows: usize,
    dim: usize,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * dim {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {rows}x{dim} feature matrix",
                data.len()
            )));
        }
        for (i, row) in data.chunks_exact(dim.max(1)).enumerate() {
            check_unit(row, &format!("feature row {i}"))?;
        }
        Ok(Self { rows, dim, data })
    }

    /// Normalises every row before building the matrix.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        let n = rows.len();
        let mut data = Vec::with_capacity(n * dim);
        for mut r in rows {
            if r.len() != dim {
                return Err(Error::ShapeMismatch("ragged feature rows".into()));
            }
            normalize(&mut r)?;
            data.extend(r);
        }
        Self::new(n, dim, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }
    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }
}

/// Unit-length image embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualFeature {
    data: Vec<f64>,
}

impl VisualFeature {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        check_unit(&data, "visual feature")?;
        Ok(Self { data })
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    pub fn dim(&self) -> usize {
        self.data.len()
    }
}

fn check_unit(v: &[f64], what: &str) -> Result<()> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite(what.into()));
    }
    let n = norm(v);
    if (n - 1.0).abs() > UNIT_TOL {
        return Err(Error::Validation(format!(
            "{what} has norm {n}, expected 1"
        )));
    }
    Ok(())
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

pub(crate) fn normalize(v: &mut [f64]) -> Result<()> {
    let n = norm(v);
    if !(n.is_finite() && n > 0.0) {
        return Err(Error::NonFinite("feature normalisation".into()));
    }
    v.iter_mut().for_each(|x| *x /= n);
    Ok(())
}

/// How an [`IntensityImage`] is turned into backend input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preprocessing {
    pub input_size: usize,
    pub replicate_channels: usize,
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for Preprocessing {
    fn default() -> Self {
        Self {
            input_size: 224,
            replicate_channels: 3,
            mean: [0.481_454_66, 0.457_827_5, 0.408_210_73],
            std: [0.268_629_54, 0.261_302_58, 0.275_777_11],
        }
    }
}

/// A frozen embedding model. Implementations must be deterministic and must
/// expose the vector-Jacobian product of image encoding.
pub trait EncoderBackend: Send + Sync {
    fn identifier(&self) -> String;
    fn dim(&self) -> usize;
    fn preprocessing(&self) -> Preprocessing;
    /// Whether `encode_*` may be called from several threads at once.
    fn thread_safe(&self) -> bool {
        false
    }
    /// Digest of every frozen parameter.
    fn parameter_checksum(&self) -> String;
    fn encode_text(&self, prompts: &[String]) -> Result<FeatureMatrix>;
    fn encode_image(&self, image: &IntensityImage) -> Result<VisualFeature>;
    /// Gradient of `<d_feature, encode_image(image)>` with respect to the
    /// image pixels, row-major.
    fn image_vjp(&self, image: &IntensityImage, d_feature: &[f64]) -> Result<Vec<f64>>;
}

pub fn build_prompts(categories: &[String], template: &str) -> Result<Vec<String>> {
    if template.matches(PLACEHOLDER).count() != 1 {
        return Err(Error::Template(format!(
            "template {template:?} must contain {PLACEHOLDER} exactly once"
        )));
    }
    if categories.is_empty() {
        return Err(Error::Template("no categories to build prompts for".into()));
    }
    Ok(categories
        .iter()
        .map(|c| template.replacen(PLACEHOLDER, c, 1))
        .collect())
}

pub fn encode_text(backend: &dyn EncoderBackend, prompts: &[String]) -> Result<FeatureMatrix> {
    backend.encode_text(prompts)
}

pub fn encode_image(backend: &dyn EncoderBackend, image: &IntensityImage) -> Result<VisualFeature> {
    backend.encode_image(image)
}

pub fn similarities(v: &[f64], features: &FeatureMatrix) -> Result<Vec<f64>> {
    if v.len() != features.dim() {
        return Err(Error::ShapeMismatch(format!(
            "feature dim {} vs matrix dim {}",
            v.len(),
            features.dim()
        )));
    }
    Ok(features.iter_rows().map(|f| dot(v, f)).collect())
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

pub fn class_probabilities(
    v: &VisualFeature,
    features: &FeatureMatrix,
    temperature: f64,
) -> Result<Vec<f64>> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let logits: Vec<f64> = similarities(v.data(), features)?
        .into_iter()
        .map(|s| s / temperature)
        .collect();
    Ok(softmax(&logits))
}

/// Index of the largest entry, preferring the lowest index on ties.
pub fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, v) in values.iter().enumerate() {
        if best.is_none_or(|b| *v > values[b]) {
            best = Some(i);
        }
    }
    best
}

pub fn predict(probs: &[f64]) -> Result<usize> {
    argmax(probs).ok_or_else(|| Error::Validation("empty probability vector".into()))
}

/// Resolves a backend identifier such as `stub:seed=7,dim=16`.
pub fn load_backend(identifier: &str) -> Result<Box<dyn EncoderBackend>> {
    if let Some(rest) = identifier.strip_prefix("stub") {
        let spec = StubSpec::parse(rest.strip_prefix(':').unwrap_or(rest))?;
        return Ok(Box::new(StubBackend::new(spec)?));
    }
    let path = std::path::Path::new(identifier);
    if path.exists() {
        Err(Error::Backend(format!(
            "{identifier}: pretrained weight files are not supported by this build"
        )))
    } else {
        Err(Error::Backend(format!(
            "{identifier}: no such backend or weight file"
        )))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StubSpec {
    pub seed: u64,
    pub dim: usize,
    pub grid: usize,
    pub input_size: usize,
    /// Length of the constant offset added before normalisation.
    pub hub: f64,
}

impl Default for StubSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            dim: 16,
            grid: 6,
            input_size: 24,
            hub: 0.0,
        }
    }
}

impl StubSpec {
    /// Parses `key=value` options, with or without the `stub:` prefix that
    /// `identifier` adds.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.strip_prefix("stub:").unwrap_or(s);
        let mut spec = Self::default();
        for kv in s.split(',').map(str::trim).filter(|kv| !kv.is_empty()) {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Backend(format!("bad stub option {kv:?}")))?;
            let bad = |e: &dyn std::fmt::Display| Error::Backend(format!("stub option {k}: {e}"));
            match k {
                "seed" => spec.seed = v.parse().map_err(|e| bad(&e))?,
                "dim" => spec.dim = v.parse().map_err(|e| bad(&e))?,
                "grid" => spec.grid = v.parse().map_err(|e| bad(&e))?,
                "size" => spec.input_size = v.parse().map_err(|e| bad(&e))?,
                "hub" => spec.hub = v.parse().map_err(|e| bad(&e))?,
                _ => return Err(Error::Backend(format!("unknown stub option {k:?}"))),
            }
        }
        Ok(spec)
    }

    pub fn identifier(&self) -> String {
        format!(
            "stub:seed={},dim={},grid={},size={},hub={}",
            self.seed, self.dim, self.grid, self.input_size, self.hub
        )
    }
}

/// Deterministic test backend.
///
/// Images: replicate to three channels, resize, normalise, take the
/// variance of each `grid x grid` block per channel, remove each channel's
/// mean block variance, apply a fixed Gaussian linear map plus offset and
/// normalise. Block variance makes the embedding
/// indifferent to a global intensity flip. Text: a Gaussian vector seeded by
/// a SHA-256 of the backend seed and the prompt.
#[derive(Debug, Clone)]
pub struct StubBackend {
    spec: StubSpec,
    pre: Preprocessing,
    /// `dim x (3 * grid * grid)`, row-major.
    weight: Vec<f64>,
    offset: Vec<f64>,
}

struct StubForward {
    /// Normalised channels, `3 x s x s`.
    z: Vec<f64>,
    block_mean: Vec<f64>,
    u: Vec<f64>,
    u_norm: f64,
}

impl StubBackend {
    pub fn new(spec: StubSpec) -> Result<Self> {
        if spec.dim == 0 || spec.grid == 0 || spec.input_size == 0 {
            return Err(Error::Backend("stub dims must be positive".into()));
        }
        if !spec.input_size.is_multiple_of(spec.grid) || spec.input_size / spec.grid < 2 {
            return Err(Error::Backend(format!(
                "stub input size {} must be a multiple (>= 2x) of grid {}",
                spec.input_size, spec.grid
            )));
        }
        if !(spec.hub.is_finite() && spec.hub >= 0.0) {
            return Err(Error::Backend("stub hub must be finite and >= 0".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let fan_in = 3 * spec.grid * spec.grid;
        let scale = 1.0 / (fan_in as f64).sqrt();
        let weight: Vec<f64> = (0..spec.dim * fan_in)
            .map(|_| -> f64 { scale * Distribution::<f64>::sample(&StandardNormal, &mut rng) })
            .collect();
        let mut offset: Vec<f64> = (0..spec.dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        normalize(&mut offset)?;
        offset.iter_mut().for_each(|o| *o *= spec.hub);
        let pre = Preprocessing {
            input_size: spec.input_size,
            ..Preprocessing::default()
        };
        Ok(Self {
            spec,
            pre,
            weight,
            offset,
        })
    }

    pub fn spec(&self) -> &StubSpec {
        &self.spec
    }

    /// Linear map from block energies to the raw embedding.
    pub fn weight(&self) -> &[f64] {
        &self.weight
    }

    fn text_feature(&self, prompt: &str) -> Vec<f64> {
        let mut h = Sha256::new();
        h.update(self.spec.seed.to_le_bytes());
        h.update(prompt.as_bytes());
        let digest = h.finalize();
        let seed = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut f: Vec<f64> = (0..self.spec.dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        normalize(&mut f).expect("gaussian draw is non-zero");
        f
    }

    fn resize_map(&self, image: &IntensityImage) -> BilinearMap {
        let s = self.spec.input_size;
        BilinearMap::new(image.height(), image.width(), s, s)
    }

    fn forward(&self, image: &IntensityImage) -> Result<StubForward> {
        if image.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("non-finite pixel".into()));
        }
        let s = self.spec.input_size;
        let g = self.spec.grid;
        let k = s / g;
        let mut x = vec![0.0; s * s];
        self.resize_map(image).apply(image.data(), &mut x);
        let mut z = vec![0.0; 3 * s * s];
        for c in 0..3 {
            let (m, sd) = (self.pre.mean[c], self.pre.std[c]);
            for (dst, src) in z[c * s * s..(c + 1) * s * s].iter_mut().zip(&x) {
                *dst = (src - m) / sd;
            }
        }
        let n = (k * k) as f64;
        let mut block_mean = vec![0.0; 3 * g * g];
        let mut energy = vec![0.0; 3 * g * g];
        for c in 0..3 {
            for by in 0..g {
                for bx in 0..g {
                    let (mut s1, mut s2) = (0.0, 0.0);
                    for y in by * k..(by + 1) * k {
                        for xx in bx * k..(bx + 1) * k {
                            let v = z[(c * s + y) * s + xx];
                            s1 += v;
                            s2 += v * v;
                        }
                    }
                    let i = (c * g + by) * g + bx;
                    block_mean[i] = s1 / n;
                    energy[i] = s2 / n - (s1 / n) * (s1 / n);
                }
            }
            center(&mut energy[c * g * g..(c + 1) * g * g]);
        }
        let fan_in = 3 * g * g;
        let u: Vec<f64> = self
            .weight
            .chunks_exact(fan_in)
            .zip(&self.offset)
            .map(|(row, b)| dot(row, &energy) + b)
            .collect();
        let u_norm = norm(&u);
        if !(u_norm.is_finite() && u_norm > 0.0) {
            return Err(Error::NonFinite("stub image embedding".into()));
        }
        Ok(StubForward {
            z,
            block_mean,
            u,
            u_norm,
        })
    }
}

impl EncoderBackend for StubBackend {
    fn identifier(&self) -> String {
        self.spec.identifier()
    }

    fn dim(&self) -> usize {
        self.spec.dim
    }

    fn preprocessing(&self) -> Preprocessing {
        self.pre.clone()
    }

    fn thread_safe(&self) -> bool {
        true
    }

    fn parameter_checksum(&self) -> String {
        let mut h = Sha256::new();
        for v in self.weight.iter().chain(&self.offset) {
            h.update(v.to_le_bytes());
        }
        hex(&h.finalize())
    }

    fn encode_text(&self, prompts: &[String]) -> Result<FeatureMatrix> {
        let rows = prompts.iter().map(|p| self.text_feature(p)).collect();
        if prompts.is_empty() {
            return FeatureMatrix::new(0, self.spec.dim, Vec::new());
        }
        FeatureMatrix::from_rows(rows)
    }

    fn encode_image(&self, image: &IntensityImage) -> Result<VisualFeature> {
        let f = self.forward(image)?;
        VisualFeature::new(f.u.iter().map(|u| u / f.u_norm).collect())
    }

    fn image_vjp(&self, image: &IntensityImage, d_feature: &[f64]) -> Result<Vec<f64>> {
        if d_feature.len() != self.spec.dim {
            return Err(Error::ShapeMismatch(format!(
                "feature gradient has {} entries, expected {}",
                d_feature.len(),
                self.spec.dim
            )));
        }
        let f = self.forward(image)?;
        let s = self.spec.input_size;
        let g = self.spec.grid;
        let k = s / g;
        let fan_in = 3 * g * g;
        // v = u / |u|
        let v: Vec<f64> = f.u.iter().map(|u| u / f.u_norm).collect();
        let vd = dot(&v, d_feature);
        let du: Vec<f64> = d_feature
            .iter()
            .zip(&v)
            .map(|(d, vi)| (d - vi * vd) / f.u_norm)
            .collect();
        let mut de = vec![0.0; fan_in];
        for (row, dui) in self.weight.chunks_exact(fan_in).zip(&du) {
            for (e, w) in de.iter_mut().zip(row) {
                *e += dui * w;
            }
        }
        for c in 0..3 {
            center(&mut de[c * g * g..(c + 1) * g * g]);
        }
        let n = (k * k) as f64;
        let mut dx = vec![0.0; s * s];
        for c in 0..3 {
            let inv_sd = 1.0 / self.pre.std[c];
            for y in 0..s {
                for xx in 0..s {
                    let i = (c * g + y / k) * g + xx / k;
                    let zv = f.z[(c * s + y) * s + xx];
                    dx[y * s + xx] += de[i] * 2.0 * (zv - f.block_mean[i]) / n * inv_sd;
                }
            }
        }
        let mut d_image = vec![0.0; image.height() * image.width()];
        self.resize_map(image).apply_adjoint(&dx, &mut d_image);
        Ok(d_image)
    }
}

/// Subtracts the mean; self-adjoint, so it serves both directions.
fn center(values: &mut [f64]) {
    let m = values.iter().sum::<f64>() / values.len() as f64;
    values.iter_mut().for_each(|v| *v -= m);
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Wraps a backend and records every prompt sent to the text encoder.
pub struct RecordingBackend<B> {
    inner: B,
    log: Mutex<Vec<String>>,
}

impl<B: EncoderBackend> RecordingBackend<B> {
    pub fn new(inner: B) -> Self {
        Self {
            inner,
            log: Mutex::new(Vec::new()),
        }
    }

    pub fn text_calls(&self) -> Vec<String> {
        self.log.lock().expect("log lock").clone()
    }

    pub fn clear(&self) {
        self.log.lock().expect("log lock").clear();
    }
}

impl<B: EncoderBackend> EncoderBackend for RecordingBackend<B> {
    fn identifier(&self) -> String {
        self.inner.identifier()
    }
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn preprocessing(&self) -> Preprocessing {
        self.inner.preprocessing()
    }
    fn thread_safe(&self) -> bool {
        self.inner.thread_safe()
    }
    fn parameter_checksum(&self) -> String {
        self.inner.parameter_checksum()
    }
    fn encode_text(&self, prompts: &[String]) -> Result<FeatureMatrix> {
        self.log
            .lock()
            .expect("log lock")
            .extend(prompts.iter().cloned());
        self.inner.encode_text(prompts)
    }
    fn encode_image(&self, image: &IntensityImage) -> Result<VisualFeature> {
        self.inner.encode_image(image)
    }
    fn image_vjp(&self, image: &IntensityImage, d_feature: &[f64]) -> Result<Vec<f64>> {
        self.inner.image_vjp(image, d_feature)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn names(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    fn stub() -> StubBackend {
        StubBackend::new(StubSpec::default()).unwrap()
    }

    fn random_image(seed: u64, h: usize, w: usize) -> IntensityImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        IntensityImage::new(h, w, (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn prompts() {
        assert_eq!(
            build_prompts(&names(&["anchor"]), DEFAULT_TEMPLATE).unwrap(),
            ["image of a anchor."]
        );
        assert_eq!(
            build_prompts(&names(&["a", "b"]), "[CLASS]").unwrap(),
            ["a", "b"]
        );
        assert!(matches!(
            build_prompts(&[], DEFAULT_TEMPLATE),
            Err(Error::Template(_))
        ));
        assert!(matches!(
            build_prompts(&names(&["a"]), "a photo"),
            Err(Error::Template(_))
        ));
        assert!(build_prompts(&names(&["a"]), "[CLASS] [CLASS]").is_err());
    }

    #[test]
    fn probabilities_and_prediction() {
        let f = FeatureMatrix::from_rows(vec![vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let v = VisualFeature::new(vec![1.0, 0.0]).unwrap();
        let p = class_probabilities(&v, &f, 1.0).unwrap();
        assert!((p[0] - 0.7311).abs() < 1e-4 && (p[1] - 0.2689).abs() < 1e-4);
        let eq = VisualFeature::new(vec![0.5f64.sqrt(), 0.5f64.sqrt()]).unwrap();
        let p = class_probabilities(&eq, &f, 0.01).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-12);
        assert!(class_probabilities(&v, &f, 0.0).is_err());
        assert!(class_probabilities(&v, &f, -1.0).is_err());
        assert_eq!(predict(&[0.2, 0.5, 0.3]).unwrap(), 1);
        assert_eq!(predict(&[0.5, 0.5]).unwrap(), 0);
        assert_eq!(predict(&[0.0, 0.0, 1.0]).unwrap(), 2);
        assert!(predict(&[]).is_err());
    }

    #[test]
    fn stub_is_deterministic_and_unit_norm() {
        let b = stub();
        let prompts = names(&["image of a anchor.", "image of a camera."]);
        let f1 = b.encode_text(&prompts).unwrap();
        let f2 = stub().encode_text(&prompts).unwrap();
        assert_eq!(f1, f2);
        assert_eq!(f1.rows(), 2);
        for seed in 0..10 {
            let img = random_image(seed, 20, 28);
            let v = b.encode_image(&img).unwrap();
            assert_eq!(v, b.encode_image(&img).unwrap());
            assert!((norm(v.data()) - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn stub_spec_parsing() {
        let s = StubSpec::parse("seed=3,dim=8,hub=0.25").unwrap();
        assert_eq!((s.seed, s.dim, s.hub), (3, 8, 0.25));
        assert_eq!(StubSpec::parse(&s.identifier()).unwrap(), s);
        assert_eq!(StubSpec::parse(&s.identifier()[5..]).unwrap(), s);
        assert!(StubSpec::parse("colour=red").is_err());
        assert!(load_backend("stub:seed=7").is_ok());
        assert!(matches!(
            load_backend("/no/such/weights.bin"),
            Err(Error::Backend(_))
        ));
        assert!(StubBackend::new(StubSpec {
            grid: 5,
            ..StubSpec::default()
        })
        .is_err());
    }

    #[test]
    fn stub_ignores_global_intensity_flip() {
        let b = stub();
        let img = random_image(4, 24, 24);
        let flipped =
            IntensityImage::new(24, 24, img.data().iter().map(|v| 1.0 - v).collect()).unwrap();
        let (a, c) = (
            b.encode_image(&img).unwrap(),
            b.encode_image(&flipped).unwrap(),
        );
        for (x, y) in a.data().iter().zip(c.data()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn recording_backend_logs_prompts() {
        let r = RecordingBackend::new(stub());
        r.encode_text(&names(&["x", "y"])).unwrap();
        assert_eq!(r.text_calls(), ["x", "y"]);
        r.clear();
        assert!(r.text_calls().is_empty());
    }
}
