//! Synthetic event recordings of textured objects seen through a moving
//! sensor.
//!
//! Each category has a spatial amplitude map chosen so that the stub
//! backend's block-variance features of a clean rendering point toward the
//! category's text feature. A recording moves a random binary texture,
//! modulated by that map, along three saccades and emits events wherever the
//! log intensity changes by more than a contrast threshold. Half of the
//! recordings also contain a short-lived textured occluder at the start or
//! the end, which makes the forward and time-reversed recordings disagree.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::encoders::{build_prompts, EncoderBackend, StubBackend, StubSpec};
use crate::error::{Error, Result};
use crate::events_io::{
    write_event_file, Event, EventStream, Manifest, ManifestEntry, Polarity, Split,
};
use crate::representation::BilinearMap;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub sensor: usize,
    pub categories: Vec<String>,
    /// Categories that only appear in the test split (zero-shot targets).
    pub unseen_categories: Vec<String>,
    pub train_per_category: usize,
    pub test_per_category: usize,
    pub unseen_test_per_category: usize,
    pub motion_steps: usize,
    pub step_us: u64,
    pub contrast_threshold: f64,
    /// Expected background events per pixel.
    pub noise_rate: f64,
    pub occluder_probability: f64,
    pub occluder_size: usize,
    pub occluder_steps: usize,
    pub amplitude_range: (f64, f64),
    pub stub: StubSpec,
    pub template: String,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            sensor: 32,
            categories: ["anchor", "butterfly", "camera"].map(String::from).to_vec(),
            unseen_categories: ["dolphin", "elephant"].map(String::from).to_vec(),
            train_per_category: 100,
            test_per_category: 50,
            unseen_test_per_category: 30,
            motion_steps: 12,
            step_us: 1000,
            contrast_threshold: 0.5,
            noise_rate: 0.01,
            occluder_probability: 0.5,
            occluder_size: 12,
            occluder_steps: 3,
            amplitude_range: (0.6, 1.0),
            stub: StubSpec {
                hub: 0.5,
                ..StubSpec::default()
            },
            template: crate::encoders::DEFAULT_TEMPLATE.into(),
            seed: 2024,
        }
    }
}

const PAD: usize = 8;

/// Per-category amplitude maps on the stub's block grid, values in [0, 1].
pub fn category_templates(
    config: &SyntheticConfig,
    categories: &[String],
) -> Result<Vec<Vec<f64>>> {
    let stub = StubBackend::new(config.stub.clone())?;
    let text = stub.encode_text(&build_prompts(categories, &config.template)?)?;
    let g2 = config.stub.grid * config.stub.grid;
    let w = stub.weight();
    let mut out = Vec::with_capacity(categories.len());
    for f in text.iter_rows() {
        // sum the three channel blocks of the linear map, project onto f
        let mut z = vec![0.0; g2];
        for (d, fd) in f.iter().enumerate() {
            let row = &w[d * 3 * g2..(d + 1) * 3 * g2];
            for c in 0..3 {
                for (zi, wi) in z.iter_mut().zip(&row[c * g2..(c + 1) * g2]) {
                    *zi += fd * wi;
                }
            }
        }
        let mean = z.iter().sum::<f64>() / g2 as f64;
        let a: Vec<f64> = z.iter().map(|v| (v - mean).max(0.0)).collect();
        let max = a.iter().cloned().fold(0.0, f64::max);
        if max <= 0.0 {
            return Err(Error::InvalidConfig("degenerate category template".into()));
        }
        out.push(a.into_iter().map(|v| v / max).collect());
    }
    Ok(out)
}

fn upsample_template(template: &[f64], grid: usize, sensor: usize) -> Vec<f64> {
    let mut out = vec![0.0; sensor * sensor];
    BilinearMap::new(grid, grid, sensor, sensor).apply(template, &mut out);
    out
}

fn sign_texture(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            if z >= 0.0 {
                1.0
            } else {
                -1.0
            }
        })
        .collect()
}

/// Simulates one recording of an object with amplitude map `amplitude`
/// (`sensor x sensor`).
pub fn simulate(
    config: &SyntheticConfig,
    amplitude: &[f64],
    rng: &mut ChaCha8Rng,
) -> Result<EventStream> {
    let n = config.sensor;
    let s = n + 2 * PAD;
    let texture = sign_texture(rng, s * s);
    let mut amp = vec![0.0; s * s];
    for y in 0..n {
        for x in 0..n {
            amp[(y + PAD) * s + x + PAD] = amplitude[y * n + x].clamp(0.0, 1.0);
        }
    }
    let render = |amp: &[f64], tex: &[f64]| -> Vec<f64> {
        amp.iter()
            .zip(tex)
            .map(|(a, t)| (0.5 + 0.45 * a * t).clamp(0.02, 1.0))
            .collect()
    };
    let base = render(&amp, &texture);
    let occluded = if rng.gen::<f64>() < config.occluder_probability {
        let size = config.occluder_size.min(n);
        let cx = PAD + rng.gen_range(0..=n - size);
        let cy = PAD + rng.gen_range(0..=n - size);
        let occ_tex = sign_texture(rng, s * s);
        let mut a2 = amp.clone();
        let mut t2 = texture.clone();
        for y in cy..cy + size {
            for x in cx..cx + size {
                a2[y * s + x] = 1.0;
                t2[y * s + x] = occ_tex[y * s + x];
            }
        }
        let start = if rng.gen::<f64>() < 0.5 {
            0
        } else {
            config.motion_steps.saturating_sub(config.occluder_steps)
        };
        Some((render(&a2, &t2), start))
    } else {
        None
    };
    let dirs: [(isize, isize); 3] = [(1, 0), (0, 1), (-1, -1)];
    let frame = |img: &[f64], shift: (isize, isize)| -> Vec<f64> {
        let mut out = Vec::with_capacity(n * n);
        for y in 0..n {
            for x in 0..n {
                let sy = (PAD as isize - shift.1 + y as isize) as usize;
                let sx = (PAD as isize - shift.0 + x as isize) as usize;
                out.push(img[sy * s + sx].ln());
            }
        }
        out
    };
    let mut reference = frame(&base, (0, 0));
    let mut shift = (0isize, 0isize);
    let mut events = Vec::new();
    let thr = config.contrast_threshold;
    for k in 0..config.motion_steps {
        let d = dirs[(k * 3 / config.motion_steps).min(2)];
        shift = (shift.0 + d.0, shift.1 + d.1);
        let img = match &occluded {
            Some((im, start)) if (*start..start + config.occluder_steps).contains(&k) => im,
            _ => &base,
        };
        let current = frame(img, shift);
        for (i, (l, r)) in current.iter().zip(reference.iter_mut()).enumerate() {
            let dl = l - *r;
            let count = (dl.abs() / thr).floor() as usize;
            if count == 0 {
                continue;
            }
            let p = if dl > 0.0 {
                Polarity::On
            } else {
                Polarity::Off
            };
            for _ in 0..count {
                let t = k as u64 * config.step_us + rng.gen_range(0..config.step_us);
                events.push(Event::new((i % n) as u16, (i / n) as u16, t, p));
            }
            *r += dl.signum() * count as f64 * thr;
        }
    }
    let expected_noise = config.noise_rate * (n * n) as f64;
    if expected_noise > 0.0 {
        let count = Poisson::new(expected_noise)
            .map_err(|e| Error::InvalidConfig(format!("noise rate: {e}")))?
            .sample(rng) as usize;
        let span = config.motion_steps as u64 * config.step_us;
        for _ in 0..count {
            let x = rng.gen_range(0..n) as u16;
            let y = rng.gen_range(0..n) as u16;
            let p = if rng.gen::<bool>() {
                Polarity::On
            } else {
                Polarity::Off
            };
            events.push(Event::new(x, y, rng.gen_range(0..span), p));
        }
    }
    EventStream::new(events, n as u32, n as u32)
}

/// One generated recording with its category and split.
#[derive(Debug, Clone)]
pub struct SyntheticSample {
    pub stream: EventStream,
    pub category: String,
    pub split: Split,
}

pub fn generate(config: &SyntheticConfig) -> Result<Vec<SyntheticSample>> {
    let mut all: Vec<String> = config.categories.clone();
    all.extend(config.unseen_categories.iter().cloned());
    let templates = category_templates(config, &all)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut out = Vec::new();
    let plan = [
        (Split::Train, config.train_per_category, false),
        (Split::Test, config.test_per_category, false),
        (Split::Test, config.unseen_test_per_category, true),
    ];
    for (split, per_category, unseen) in plan {
        for (ci, name) in all.iter().enumerate() {
            if (ci >= config.categories.len()) != unseen {
                continue;
            }
            for _ in 0..per_category {
                let (lo, hi) = config.amplitude_range;
                let scale = rng.gen_range(lo..=hi);
                let t: Vec<f64> = templates[ci].iter().map(|v| v * scale).collect();
                let amp = upsample_template(&t, config.stub.grid, config.sensor);
                out.push(SyntheticSample {
                    stream: simulate(config, &amp, &mut rng)?,
                    category: name.clone(),
                    split,
                });
            }
        }
    }
    Ok(out)
}

/// Writes `<dir>/<split>/<category>/<nnn>.bin`, `manifest.csv` and
/// `config.json`. Returns the manifest.
pub fn write_dataset(config: &SyntheticConfig, dir: &Path) -> Result<Manifest> {
    let samples = generate(config)?;
    let mut entries = Vec::with_capacity(samples.len());
    let mut counters: std::collections::BTreeMap<(String, String), usize> = Default::default();
    for s in &samples {
        let split = s.split.to_string();
        let n = counters
            .entry((split.clone(), s.category.clone()))
            .or_default();
        let rel = Path::new(&split)
            .join(&s.category)
            .join(format!("{:03}.bin", *n));
        *n += 1;
        let path = dir.join(&rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        write_event_file(&path, &s.stream)?;
        entries.push(ManifestEntry {
            relative_path: rel,
            category_name: s.category.clone(),
            split: s.split,
        });
    }
    let manifest = Manifest {
        root: dir.to_path_buf(),
        entries,
    };
    let mpath = dir.join("manifest.csv");
    std::fs::write(&mpath, manifest.to_csv()).map_err(|e| Error::io(&mpath, e))?;
    let cpath = dir.join("config.json");
    std::fs::write(&cpath, serde_json::to_string_pretty(config)?)
        .map_err(|e| Error::io(&cpath, e))?;
    Ok(manifest)
}
