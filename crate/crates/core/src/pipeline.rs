//! Joint training of the reconstruction network against a frozen encoder.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::dataset::{load_manifest_split, prepare_all, PreparedSample};
use crate::encoders::{
    build_prompts, class_probabilities, load_backend, predict, EncoderBackend, FeatureMatrix,
    DEFAULT_TEMPLATE,
};
use crate::error::{Error, Result};
use crate::events_io::{Manifest, Split};
use crate::nn::Padding;
use crate::objectives::{
    attraction_loss, consistency_loss, prototype_attraction_loss, repulsion_loss, total_loss,
    LossWeights,
};
use crate::optim::{apply_update, OptimizerConfig, OptimizerState};
use crate::prototypes::PrototypeBank;
use crate::reconstruction::{Gradients, IntensityImage, Normalization, ReconNet, ReconNetConfig};
use crate::representation::{crop, sample_crop_rect, CropRect};
use crate::sampling::ReliabilitySets;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    TextPrompt,
    VisualPrototype,
}

/// Architecture knobs of the reconstruction network; the input channel
/// count follows `t_bins`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub levels: usize,
    pub base_width: usize,
    pub residual_blocks: usize,
    pub normalization: Normalization,
    pub padding: Padding,
    pub standardize_input: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        let d = ReconNetConfig::default();
        Self {
            levels: d.levels,
            base_width: d.base_width,
            residual_blocks: d.residual_blocks,
            normalization: d.normalization,
            padding: d.padding,
            standardize_input: d.standardize_input,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub manifest: PathBuf,
    pub backend: String,
    pub mode: Mode,
    /// Prototype bank file, required in `visual_prototype` mode.
    pub prototype_bank: Option<PathBuf>,
    pub template: String,
    /// Category list used for prompts; defaults to the manifest's train
    /// categories in order of first appearance.
    pub categories: Option<Vec<String>>,
    pub sensor_width: u32,
    pub sensor_height: u32,
    pub batch_size: usize,
    pub k: usize,
    pub use_ppi: bool,
    pub use_trci: bool,
    pub t_bins: usize,
    pub resize: usize,
    pub crop: usize,
    pub loss: LossWeights,
    /// Divides similarities before the softmax; 0.01 is the usual logit
    /// scale of 100.
    pub prediction_temperature: f64,
    pub loss_temperature: f64,
    pub optimizer: OptimizerConfig,
    pub network: NetworkConfig,
    pub steps: u64,
    /// Write an intermediate checkpoint every this many steps (0 = never).
    pub checkpoint_every: u64,
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            manifest: PathBuf::from("manifest.csv"),
            backend: "stub:seed=7".into(),
            mode: Mode::TextPrompt,
            prototype_bank: None,
            template: DEFAULT_TEMPLATE.into(),
            categories: None,
            sensor_width: 240,
            sensor_height: 180,
            batch_size: 32,
            k: 6,
            use_ppi: true,
            use_trci: true,
            t_bins: 9,
            resize: 224,
            crop: 128,
            loss: LossWeights::default(),
            prediction_temperature: 0.01,
            loss_temperature: 1.0,
            optimizer: OptimizerConfig::default(),
            network: NetworkConfig::default(),
            steps: 1000,
            checkpoint_every: 0,
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.k == 0 || self.k > self.batch_size {
            return Err(Error::InvalidConfig(format!(
                "need 1 <= K ({}) <= B ({})",
                self.k, self.batch_size
            )));
        }
        if self.crop == 0 || self.crop > self.resize {
            return Err(Error::InvalidConfig(format!(
                "crop {} must be in 1..=resize {}",
                self.crop, self.resize
            )));
        }
        for (name, t) in [
            ("prediction_temperature", self.prediction_temperature),
            ("loss_temperature", self.loss_temperature),
        ] {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if self.mode == Mode::VisualPrototype && self.prototype_bank.is_none() {
            return Err(Error::InvalidConfig(
                "visual_prototype mode needs a prototype_bank".into(),
            ));
        }
        self.loss.validate()?;
        self.optimizer.validate()?;
        self.recon_config().validate()
    }

    pub fn recon_config(&self) -> ReconNetConfig {
        ReconNetConfig {
            t_bins: self.t_bins,
            levels: self.network.levels,
            base_width: self.network.base_width,
            residual_blocks: self.network.residual_blocks,
            normalization: self.network.normalization,
            padding: self.network.padding,
            standardize_input: self.network.standardize_input,
            min_input_size: self.crop,
        }
    }

    /// Reads a JSON config. Relative `manifest` and `prototype_bank` paths
    /// are taken relative to the config file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: Self = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        if cfg.manifest.is_relative() {
            cfg.manifest = base.join(&cfg.manifest);
        }
        if let Some(bank) = cfg.prototype_bank.as_mut().filter(|b| b.is_relative()) {
            *bank = base.join(&*bank);
        }
        Ok(cfg)
    }

    /// Stable digest of the configuration.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_string(self).expect("config serialises");
        crate::encoders::hex(&Sha256::digest(json.as_bytes()))[..16].to_string()
    }
}

/// Everything computed for one mini-batch.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchState {
    pub step: u64,
    pub indices: Vec<usize>,
    /// Global reconstructions, one row-major image per sample.
    pub reconstructions: Vec<Vec<f64>>,
    pub local_reconstructions: Vec<Vec<f64>>,
    pub crops: Vec<CropRect>,
    pub features: Vec<Vec<f64>>,
    pub reversed_features: Vec<Vec<f64>>,
    pub max_probs: Vec<f64>,
    pub pseudo: Vec<usize>,
    pub reversed_pseudo: Option<Vec<usize>>,
    pub sets: ReliabilitySets,
    pub att: f64,
    pub att_skipped: bool,
    pub rep: f64,
    pub con: f64,
    pub total: f64,
    pub updated: bool,
}

impl BatchState {
    /// Entropy (nats) of the pseudo-label histogram.
    pub fn pseudo_entropy(&self, categories: usize) -> f64 {
        let mut counts = vec![0usize; categories];
        for &c in &self.pseudo {
            counts[c] += 1;
        }
        let n = self.pseudo.len() as f64;
        counts
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / n;
                -p * p.ln()
            })
            .sum()
    }

    pub fn metrics(&self, categories: usize) -> StepMetrics {
        StepMetrics {
            step: self.step,
            att: self.att,
            rep: self.rep,
            con: self.con,
            total: self.total,
            att_skipped: self.att_skipped,
            s_ppi: self.sets.s_ppi.len(),
            s_trci: self.sets.s_trci.len(),
            s_rds: self.sets.s_rds.len(),
            rds_indices: self.sets.s_rds.clone(),
            pseudo_entropy: self.pseudo_entropy(categories),
        }
    }
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub att: f64,
    pub rep: f64,
    pub con: f64,
    pub total: f64,
    pub att_skipped: bool,
    pub s_ppi: usize,
    pub s_trci: usize,
    pub s_rds: usize,
    pub rds_indices: Vec<usize>,
    pub pseudo_entropy: f64,
}

/// Training state: network, optimiser and the frozen encoder's targets.
pub struct Trainer {
    config: TrainConfig,
    net: ReconNet,
    optimizer: OptimizerState,
    backend: Arc<dyn EncoderBackend>,
    categories: Vec<String>,
    text: FeatureMatrix,
    bank: Option<PrototypeBank>,
    step: u64,
}

impl Trainer {
    pub fn new(
        config: TrainConfig,
        backend: Arc<dyn EncoderBackend>,
        categories: Vec<String>,
        bank: Option<PrototypeBank>,
    ) -> Result<Self> {
        config.validate()?;
        let net = ReconNet::init(config.recon_config(), config.seed)?;
        let optimizer = OptimizerState::new(net.params());
        let text = backend.encode_text(&build_prompts(&categories, &config.template)?)?;
        let bank = match (config.mode, bank) {
            (Mode::TextPrompt, _) => None,
            (Mode::VisualPrototype, Some(b)) => Some(b.aligned_to(&categories)?),
            (Mode::VisualPrototype, None) => {
                return Err(Error::InvalidConfig(
                    "visual_prototype mode without a bank".into(),
                ))
            }
        };
        Ok(Self {
            config,
            net,
            optimizer,
            backend,
            categories,
            text,
            bank,
            step: 0,
        })
    }

    /// Restores network, optimiser and step from a checkpoint.
    pub fn restore(&mut self, ckpt: Checkpoint) -> Result<()> {
        let net = ckpt.network_for(&self.config.recon_config())?;
        if ckpt.optimizer.m.len() != net.params().len() {
            return Err(Error::Integrity(
                "optimizer state does not match network".into(),
            ));
        }
        self.net = net;
        self.optimizer = ckpt.optimizer;
        self.step = ckpt.step;
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            categories: self.categories.clone(),
            params: self.net.params().to_vec(),
            optimizer: self.optimizer.clone(),
            step: self.step,
            backend: self.backend.identifier(),
            preprocessing: self.backend.preprocessing(),
        }
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }
    pub fn net(&self) -> &ReconNet {
        &self.net
    }
    pub fn step(&self) -> u64 {
        self.step
    }
    pub fn categories(&self) -> &[String] {
        &self.categories
    }
    pub fn text_features(&self) -> &FeatureMatrix {
        &self.text
    }
    pub fn backend(&self) -> &Arc<dyn EncoderBackend> {
        &self.backend
    }

    /// Sample indices used at `step`: consecutive slices of a per-epoch
    /// permutation determined by the seed.
    pub fn batch_indices(&self, step: u64, n: usize) -> Result<Vec<usize>> {
        let b = self.config.batch_size;
        if n < b {
            return Err(Error::InvalidConfig(format!(
                "batch size {b} exceeds the {n} training samples"
            )));
        }
        let per_epoch = (n / b) as u64;
        let epoch = step / per_epoch;
        let offset = ((step % per_epoch) as usize) * b;
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x05ee_d0fb_a7c4);
        rng.set_stream(epoch);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        Ok(perm[offset..offset + b].to_vec())
    }

    /// Runs the next step on the training set.
    pub fn step_on(&mut self, samples: &[PreparedSample]) -> Result<BatchState> {
        let idx = self.batch_indices(self.step, samples.len())?;
        let batch: Vec<&PreparedSample> = idx.iter().map(|&i| &samples[i]).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(self.step);
        let mut state = self.train_step(&batch, &mut rng)?;
        state.indices = idx;
        Ok(state)
    }

    fn encode_and_predict(&self, image: &IntensityImage) -> Result<(Vec<f64>, Vec<f64>, usize)> {
        let v = self.backend.encode_image(image)?;
        let probs = class_probabilities(&v, &self.text, self.config.prediction_temperature)?;
        let c = predict(&probs)?;
        Ok((v.data().to_vec(), probs, c))
    }

    /// One optimisation step on `batch`.
    pub fn train_step(
        &mut self,
        batch: &[&PreparedSample],
        rng: &mut ChaCha8Rng,
    ) -> Result<BatchState> {
        let cfg = &self.config;
        let b = batch.len();
        if b == 0 {
            return Err(Error::InvalidConfig("empty batch".into()));
        }
        // global reconstruction and pseudo-labels
        let mut images = Vec::with_capacity(b);
        let mut caches = Vec::with_capacity(b);
        let mut features = Vec::with_capacity(b);
        let mut max_probs = Vec::with_capacity(b);
        let mut pseudo = Vec::with_capacity(b);
        for s in batch {
            let (img, cache) = self.net.forward_train(&s.forward)?;
            let (v, probs, c) = self.encode_and_predict(&img)?;
            max_probs.push(probs[c]);
            pseudo.push(c);
            features.push(v);
            images.push(img);
            caches.push(cache);
        }
        // reversed branch, no gradient
        let mut reversed_features = Vec::new();
        let reversed_pseudo = if cfg.use_trci {
            let mut preds = Vec::with_capacity(b);
            for s in batch {
                let img = self.net.reconstruct(&s.reversed)?;
                let (v, _, c) = self.encode_and_predict(&img)?;
                reversed_features.push(v);
                preds.push(c);
            }
            Some(preds)
        } else {
            None
        };
        let sets = ReliabilitySets::compute(
            &max_probs,
            &pseudo,
            reversed_pseudo.as_deref(),
            cfg.use_ppi.then_some(cfg.k),
        )?;

        let mut grads = Gradients::zeros_like(self.net.params());
        let w = cfg.loss;
        // local-global consistency, averaged over the batch
        let mut con = 0.0;
        let mut crops = Vec::new();
        let mut local_images = Vec::new();
        let mut d_images: Vec<Vec<f64>> =
            images.iter().map(|i| vec![0.0; i.data().len()]).collect();
        if w.lambda_con > 0.0 {
            for (i, s) in batch.iter().enumerate() {
                let rect = sample_crop_rect(rng, cfg.resize, cfg.crop)?;
                let local_in = crop(&s.forward, &rect)?;
                let (local, local_cache) = self.net.forward_train(&local_in)?;
                let l = consistency_loss(&local, &images[i], &rect)?;
                con += l.value / b as f64;
                let scale = w.lambda_con / b as f64;
                let d_local: Vec<f64> = l.grad_local.iter().map(|g| g * scale).collect();
                self.net.backward(&local_cache, &d_local, &mut grads);
                for (d, g) in d_images[i].iter_mut().zip(&l.grad_global) {
                    *d += g * scale;
                }
                crops.push(rect);
                local_images.push(local.data().to_vec());
            }
        }
        let att = match &self.bank {
            Some(bank) => prototype_attraction_loss(
                &features,
                bank,
                &pseudo,
                &sets.s_rds,
                cfg.loss_temperature,
            )?,
            None => attraction_loss(
                &features,
                &self.text,
                &pseudo,
                &sets.s_rds,
                cfg.loss_temperature,
            )?,
        };
        let rep = repulsion_loss(&features, cfg.loss_temperature)?;
        let mut state = BatchState {
            step: self.step,
            indices: (0..b).collect(),
            reconstructions: images.iter().map(|i| i.data().to_vec()).collect(),
            local_reconstructions: local_images,
            crops,
            features,
            reversed_features,
            max_probs,
            pseudo,
            reversed_pseudo,
            sets,
            att: att.value,
            att_skipped: att.skipped,
            rep: rep.value,
            con,
            total: f64::NAN,
            updated: false,
        };
        state.total = match total_loss(att.value, rep.value, con, &w) {
            Ok(t) => t,
            Err(e) => return Err(self.dump_diagnostics(&state, e)),
        };

        for i in 0..b {
            let dv: Vec<f64> = att.grad[i]
                .iter()
                .zip(&rep.grad[i])
                .map(|(a, r)| w.lambda_att * a + w.lambda_rep * r)
                .collect();
            if dv.iter().any(|g| *g != 0.0) {
                let d_img = self.backend.image_vjp(&images[i], &dv)?;
                for (d, g) in d_images[i].iter_mut().zip(&d_img) {
                    *d += g;
                }
            }
            if d_images[i].iter().any(|g| *g != 0.0) {
                self.net.backward(&caches[i], &d_images[i], &mut grads);
            }
        }
        if grads.0.iter().flatten().any(|g| !g.is_finite()) {
            return Err(
                self.dump_diagnostics(&state, Error::NonFinite("parameter gradient".into()))
            );
        }
        // An all-zero gradient carries no signal; skip so weight decay does
        // not move the parameters on its own.
        if !grads.is_zero() {
            apply_update(
                &self.config.optimizer,
                &mut self.optimizer,
                self.net.params_mut(),
                &grads,
            );
            state.updated = true;
        }
        self.step += 1;
        Ok(state)
    }

    fn dump_diagnostics(&self, state: &BatchState, err: Error) -> Error {
        let dir = &self.config.output_dir;
        let path = dir.join(format!("diagnostic_step{:06}.json", state.step));
        let written = std::fs::create_dir_all(dir)
            .ok()
            .and_then(|_| serde_json::to_string(state).ok())
            .and_then(|json| std::fs::write(&path, json).ok())
            .is_some();
        let location = if written {
            format!("batch state dumped to {}", path.display())
        } else {
            "batch state could not be written".into()
        };
        Error::NonFinite(format!("{err} at step {}; {location}", state.step))
    }
}

fn train_categories(config: &TrainConfig, manifest: &Manifest) -> Vec<String> {
    config.categories.clone().unwrap_or_else(|| {
        let mut out: Vec<String> = Vec::new();
        for e in manifest.split(Split::Train) {
            if !out.contains(&e.category_name) {
                out.push(e.category_name.clone());
            }
        }
        out
    })
}

/// Builds a trainer and its prepared training set from the config files.
pub fn setup(config: &TrainConfig) -> Result<(Trainer, Vec<PreparedSample>)> {
    config.validate()?;
    let manifest = Manifest::load(&config.manifest)?;
    let categories = train_categories(config, &manifest);
    let backend: Arc<dyn EncoderBackend> = Arc::from(load_backend(&config.backend)?);
    let bank = match &config.prototype_bank {
        Some(p) if config.mode == Mode::VisualPrototype => Some(PrototypeBank::load(p)?),
        _ => None,
    };
    let train = load_manifest_split(
        &config.manifest,
        Split::Train,
        config.sensor_width,
        config.sensor_height,
    )?;
    // labels are dropped here; training never sees them
    let samples = prepare_all(&train.streams, config.t_bins, config.resize)?;
    let trainer = Trainer::new(config.clone(), backend, categories, bank)?;
    Ok((trainer, samples))
}

/// Trains from scratch, or from `resume`, up to `config.steps`. Returns the
/// final checkpoint path.
pub fn train(config: &TrainConfig, resume: Option<&Path>) -> Result<PathBuf> {
    let (mut trainer, samples) = setup(config)?;
    if let Some(path) = resume {
        trainer.restore(load_checkpoint(path)?)?;
    }
    let dir = &config.output_dir;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let metrics_path = dir.join("metrics.jsonl");
    let mut metrics = std::fs::OpenOptions::new()
        .create(true)
        .append(resume.is_some())
        .write(true)
        .truncate(resume.is_none())
        .open(&metrics_path)
        .map_err(|e| Error::io(&metrics_path, e))?;
    let c = trainer.categories().len();
    while trainer.step() < config.steps {
        let state = trainer.step_on(&samples)?;
        let line = serde_json::to_string(&state.metrics(c))?;
        writeln!(metrics, "{line}").map_err(|e| Error::io(&metrics_path, e))?;
        log::info!(
            "step {} total {:.4} att {:.4} rep {:.4} con {:.4} |S_rds| {}",
            state.step,
            state.total,
            state.att,
            state.rep,
            state.con,
            state.sets.s_rds.len()
        );
        if config.checkpoint_every > 0 && trainer.step() % config.checkpoint_every == 0 {
            save_checkpoint(
                &dir.join(format!("checkpoint_{:06}.ckpt", trainer.step())),
                &trainer.checkpoint(),
            )?;
        }
    }
    let final_path = dir.join("final.ckpt");
    save_checkpoint(&final_path, &trainer.checkpoint())?;
    Ok(final_path)
}

/// Reconstructs one event file with a trained checkpoint.
pub fn reconstruct_file(ckpt: &Checkpoint, events: &Path) -> Result<IntensityImage> {
    let net = ckpt.network()?;
    let cfg = &ckpt.config;
    let stream = crate::events_io::read_event_file(events, cfg.sensor_width, cfg.sensor_height)?;
    net.reconstruct(&crate::dataset::to_tensor(&stream, cfg.t_bins, cfg.resize)?)
}
