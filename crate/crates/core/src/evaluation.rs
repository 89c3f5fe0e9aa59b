//! Accuracy evaluation, experiment protocols and report files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::dataset::{load_manifest_split, prepare_all, to_tensor, PreparedSample};
use crate::encoders::{build_prompts, class_probabilities, predict, EncoderBackend};
use crate::error::{Error, Result};
use crate::events_io::{EventStream, Split};
use crate::pipeline::{StepMetrics, TrainConfig, Trainer};
use crate::prototypes::PrototypeBank;
use crate::reconstruction::ReconNet;
use crate::representation::EventTensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryAccuracy {
    pub category: String,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub protocol: String,
    /// Categories with test samples, in the order of `confusion` rows.
    pub true_categories: Vec<String>,
    /// Prompt set the classifier chose from, in the order of `confusion`
    /// columns.
    pub prompt_categories: Vec<String>,
    pub per_category: Vec<CategoryAccuracy>,
    pub correct: usize,
    pub total: usize,
    pub overall_accuracy: f64,
    pub confusion: Vec<Vec<usize>>,
    pub config_fingerprint: String,
    pub runtime_seconds: f64,
    /// Reserved for image-quality metrics computed by external plugins.
    pub fid: Option<f64>,
    pub inception_score: Option<f64>,
    pub extra_metrics: BTreeMap<String, f64>,
}

/// Read-only classifier: reconstruction network plus frozen text targets.
pub struct Classifier<'a> {
    pub net: &'a ReconNet,
    pub backend: &'a dyn EncoderBackend,
    pub template: &'a str,
    pub temperature: f64,
}

impl Classifier<'_> {
    /// Predicted prompt index for each tensor.
    pub fn predict_all(&self, tensors: &[&EventTensor], prompts: &[String]) -> Result<Vec<usize>> {
        let text = self
            .backend
            .encode_text(&build_prompts(prompts, self.template)?)?;
        tensors
            .iter()
            .map(|t| {
                let img = self.net.reconstruct(t)?;
                let v = self.backend.encode_image(&img)?;
                predict(&class_probabilities(&v, &text, self.temperature)?)
            })
            .collect()
    }

    /// Scores predictions over `prompts` against ground-truth names. A
    /// prediction of a prompt absent from the true labels is always wrong.
    pub fn evaluate(
        &self,
        protocol: &str,
        tensors: &[&EventTensor],
        labels: &[String],
        prompts: &[String],
        fingerprint: &str,
    ) -> Result<EvalReport> {
        if tensors.len() != labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} samples with {} labels",
                tensors.len(),
                labels.len()
            )));
        }
        let unknown: Vec<String> = unique(labels)
            .into_iter()
            .filter(|l| !prompts.contains(l))
            .collect();
        if !unknown.is_empty() {
            return Err(Error::UnknownCategory(unknown.join(", ")));
        }
        let start = Instant::now();
        let preds = self.predict_all(tensors, prompts)?;
        let mut report = score(protocol, labels, &preds, prompts, fingerprint);
        report.runtime_seconds = start.elapsed().as_secs_f64();
        Ok(report)
    }
}

fn unique(labels: &[String]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for l in labels {
        if !out.contains(l) {
            out.push(l.clone());
        }
    }
    out
}

/// Builds the report from predicted prompt indices.
pub fn score(
    protocol: &str,
    labels: &[String],
    preds: &[usize],
    prompts: &[String],
    fingerprint: &str,
) -> EvalReport {
    let true_categories = unique(labels);
    let mut confusion = vec![vec![0usize; prompts.len()]; true_categories.len()];
    let mut per: Vec<(usize, usize)> = vec![(0, 0); true_categories.len()];
    for (label, &p) in labels.iter().zip(preds) {
        let row = true_categories
            .iter()
            .position(|c| c == label)
            .expect("label listed");
        confusion[row][p] += 1;
        per[row].1 += 1;
        if prompts[p] == *label {
            per[row].0 += 1;
        }
    }
    let correct = per.iter().map(|p| p.0).sum();
    let total = labels.len();
    EvalReport {
        protocol: protocol.into(),
        per_category: true_categories
            .iter()
            .zip(&per)
            .map(|(c, &(k, n))| CategoryAccuracy {
                category: c.clone(),
                correct: k,
                total: n,
                accuracy: k as f64 / n as f64,
            })
            .collect(),
        true_categories,
        prompt_categories: prompts.to_vec(),
        correct,
        total,
        overall_accuracy: if total > 0 {
            correct as f64 / total as f64
        } else {
            0.0
        },
        confusion,
        config_fingerprint: fingerprint.into(),
        runtime_seconds: 0.0,
        fid: None,
        inception_score: None,
        extra_metrics: BTreeMap::new(),
    }
}

/// Tensors and category names of one manifest split, as used by a
/// checkpoint's config.
pub fn load_eval_split(
    config: &TrainConfig,
    manifest: &Path,
    split: Split,
) -> Result<(Vec<EventTensor>, Vec<String>)> {
    let data = load_manifest_split(manifest, split, config.sensor_width, config.sensor_height)?;
    let tensors = data
        .streams
        .iter()
        .map(|s| to_tensor(s, config.t_bins, config.resize))
        .collect::<Result<Vec<_>>>()?;
    Ok((tensors, data.labels))
}

fn checkpoint_classifier<'a>(
    ckpt: &'a Checkpoint,
    net: &'a ReconNet,
    backend: &'a dyn EncoderBackend,
) -> Classifier<'a> {
    Classifier {
        net,
        backend,
        template: &ckpt.config.template,
        temperature: ckpt.config.prediction_temperature,
    }
}

/// Standard protocol over `categories`.
pub fn evaluate(
    ckpt: &Checkpoint,
    tensors: &[EventTensor],
    labels: &[String],
    categories: &[String],
    backend: &dyn EncoderBackend,
) -> Result<EvalReport> {
    let net = ckpt.network()?;
    let refs: Vec<&EventTensor> = tensors.iter().collect();
    checkpoint_classifier(ckpt, &net, backend).evaluate(
        "standard",
        &refs,
        labels,
        categories,
        &ckpt.config.fingerprint(),
    )
}

/// Evaluates on categories disjoint from training; only the unseen
/// categories' prompts are encoded.
pub fn zero_shot_eval(
    ckpt: &Checkpoint,
    train_categories: &[String],
    test_categories: &[String],
    tensors: &[EventTensor],
    labels: &[String],
    backend: &dyn EncoderBackend,
) -> Result<EvalReport> {
    let overlap: Vec<&str> = test_categories
        .iter()
        .filter(|c| train_categories.contains(c))
        .map(String::as_str)
        .collect();
    if !overlap.is_empty() {
        return Err(Error::Protocol(format!(
            "zero-shot test categories overlap training: {}",
            overlap.join(", ")
        )));
    }
    let net = ckpt.network()?;
    let refs: Vec<&EventTensor> = tensors.iter().collect();
    checkpoint_classifier(ckpt, &net, backend).evaluate(
        "zero_shot",
        &refs,
        labels,
        test_categories,
        &ckpt.config.fingerprint(),
    )
}

/// Predicts over the true categories followed by distractor prompts.
pub fn superset_eval(
    ckpt: &Checkpoint,
    true_categories: &[String],
    extra_categories: &[String],
    tensors: &[EventTensor],
    labels: &[String],
    backend: &dyn EncoderBackend,
) -> Result<EvalReport> {
    let overlap: Vec<&str> = extra_categories
        .iter()
        .filter(|c| true_categories.contains(c))
        .map(String::as_str)
        .collect();
    if !overlap.is_empty() {
        return Err(Error::Protocol(format!(
            "extra categories duplicate true ones: {}",
            overlap.join(", ")
        )));
    }
    let mut prompts = true_categories.to_vec();
    for e in extra_categories {
        if prompts.contains(e) {
            return Err(Error::Protocol(format!("extra category {e} listed twice")));
        }
        prompts.push(e.clone());
    }
    let protocol = if extra_categories.is_empty() {
        "standard".to_string()
    } else {
        format!("superset+{}", extra_categories.len())
    };
    let net = ckpt.network()?;
    let refs: Vec<&EventTensor> = tensors.iter().collect();
    checkpoint_classifier(ckpt, &net, backend).evaluate(
        &protocol,
        &refs,
        labels,
        &prompts,
        &ckpt.config.fingerprint(),
    )
}

/// Prepared train and test data for in-memory experiments. Labels stay here
/// and are only used for scoring.
pub struct ExperimentData {
    pub categories: Vec<String>,
    pub train: Vec<PreparedSample>,
    pub train_labels: Vec<String>,
    pub test: Vec<EventTensor>,
    pub test_labels: Vec<String>,
}

impl ExperimentData {
    pub fn from_streams(
        config: &TrainConfig,
        categories: Vec<String>,
        train: &[EventStream],
        train_labels: Vec<String>,
        test: &[EventStream],
        test_labels: Vec<String>,
    ) -> Result<Self> {
        Ok(Self {
            categories,
            train: prepare_all(train, config.t_bins, config.resize)?,
            train_labels,
            test: test
                .iter()
                .map(|s| to_tensor(s, config.t_bins, config.resize))
                .collect::<Result<_>>()?,
            test_labels,
        })
    }

    /// Loads the manifest's train and test splits restricted to the train
    /// categories.
    pub fn load(config: &TrainConfig) -> Result<Self> {
        let (w, h) = (config.sensor_width, config.sensor_height);
        let train = load_manifest_split(&config.manifest, Split::Train, w, h)?;
        let categories = config
            .categories
            .clone()
            .unwrap_or_else(|| unique(&train.labels));
        let test = load_manifest_split(&config.manifest, Split::Test, w, h)?;
        let keep: Vec<usize> = (0..test.labels.len())
            .filter(|&i| categories.contains(&test.labels[i]))
            .collect();
        let test_streams: Vec<EventStream> =
            keep.iter().map(|&i| test.streams[i].clone()).collect();
        let test_labels = keep.iter().map(|&i| test.labels[i].clone()).collect();
        Self::from_streams(
            config,
            categories,
            &train.streams,
            train.labels,
            &test_streams,
            test_labels,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub label: String,
    pub seed: u64,
    pub test_accuracy: f64,
    pub train_accuracy: f64,
    /// Largest share of one category among predictions on the training set.
    pub max_category_fraction: f64,
    pub metrics: Vec<StepMetrics>,
    pub encoder_checksum_before: String,
    pub encoder_checksum_after: String,
}

/// Trains for `config.steps` in memory and scores the result.
pub fn run_experiment(
    label: &str,
    config: &TrainConfig,
    backend: Arc<dyn EncoderBackend>,
    data: &ExperimentData,
    bank: Option<PrototypeBank>,
) -> Result<RunOutcome> {
    let checksum_before = backend.parameter_checksum();
    let mut trainer = Trainer::new(
        config.clone(),
        backend.clone(),
        data.categories.clone(),
        bank,
    )?;
    let mut metrics = Vec::with_capacity(config.steps as usize);
    let c = data.categories.len();
    while trainer.step() < config.steps {
        metrics.push(trainer.step_on(&data.train)?.metrics(c));
    }
    let classifier = Classifier {
        net: trainer.net(),
        backend: backend.as_ref(),
        template: &config.template,
        temperature: config.prediction_temperature,
    };
    let fp = config.fingerprint();
    let test: Vec<&EventTensor> = data.test.iter().collect();
    let test_report =
        classifier.evaluate("standard", &test, &data.test_labels, &data.categories, &fp)?;
    let train: Vec<&EventTensor> = data.train.iter().map(|s| &s.forward).collect();
    let train_preds = classifier.predict_all(&train, &data.categories)?;
    let train_report = score(
        "train",
        &data.train_labels,
        &train_preds,
        &data.categories,
        &fp,
    );
    let mut counts = vec![0usize; c];
    for p in &train_preds {
        counts[*p] += 1;
    }
    let max_count = counts.iter().copied().max().unwrap_or(0);
    Ok(RunOutcome {
        label: label.into(),
        seed: config.seed,
        test_accuracy: test_report.overall_accuracy,
        train_accuracy: train_report.overall_accuracy,
        max_category_fraction: max_count as f64 / train_preds.len().max(1) as f64,
        metrics,
        encoder_checksum_before: checksum_before,
        encoder_checksum_after: backend.parameter_checksum(),
    })
}

/// One row of a sweep: a setting and its accuracy averaged over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub label: String,
    pub x: f64,
    pub accuracy: f64,
    pub per_seed: Vec<f64>,
    pub max_category_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub name: String,
    pub x_label: String,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn row(&self, label: &str) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "label",
            &self.x_label,
            "accuracy",
            "max_category_fraction",
            "per_seed",
        ])
        .expect("in-memory write");
        for r in &self.rows {
            let per_seed: Vec<String> = r.per_seed.iter().map(|a| format!("{a:.6}")).collect();
            w.write_record([
                r.label.clone(),
                format!("{}", r.x),
                format!("{:.6}", r.accuracy),
                format!("{:.6}", r.max_category_fraction),
                per_seed.join(";"),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }

    /// Points drawn by [`SweepTable::plot`], in row order.
    pub fn plot_points(&self) -> Vec<(f64, f64)> {
        self.rows.iter().map(|r| (r.x, r.accuracy)).collect()
    }

    /// Line plot of accuracy against the swept value.
    pub fn plot(&self, path: &Path) -> Result<()> {
        use plotters::prelude::*;
        let pts = self.plot_points();
        let err = |e: &dyn std::fmt::Display| Error::Image(format!("{}: {e}", path.display()));
        let (w, h) = (480u32, 320u32);
        let mut buf = vec![0u8; (w * h * 3) as usize];
        {
            let root = BitMapBackend::with_buffer(&mut buf, (w, h)).into_drawing_area();
            root.fill(&WHITE).map_err(|e| err(&e))?;
            let (x0, x1) = pts
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| {
                    (a.min(p.0), b.max(p.0))
                });
            let (x0, x1) = if x0 < x1 {
                (x0, x1)
            } else {
                (x0 - 1.0, x0 + 1.0)
            };
            let pad = (x1 - x0) * 0.05;
            let mut chart = ChartBuilder::on(&root)
                .margin(20)
                .build_cartesian_2d((x0 - pad)..(x1 + pad), 0.0..1.0)
                .map_err(|e| err(&e))?;
            let frame = [
                (x0 - pad, 0.0),
                (x1 + pad, 0.0),
                (x1 + pad, 1.0),
                (x0 - pad, 1.0),
                (x0 - pad, 0.0),
            ];
            chart
                .draw_series(LineSeries::new(frame, BLACK))
                .map_err(|e| err(&e))?;
            for tick in 1..10 {
                let y = tick as f64 / 10.0;
                chart
                    .draw_series(LineSeries::new(
                        [(x0 - pad, y), (x1 + pad, y)],
                        RGBColor(225, 225, 225),
                    ))
                    .map_err(|e| err(&e))?;
            }
            chart
                .draw_series(LineSeries::new(pts.clone(), BLUE.stroke_width(2)))
                .map_err(|e| err(&e))?;
            chart
                .draw_series(pts.iter().map(|p| Circle::new(*p, 4, BLUE.filled())))
                .map_err(|e| err(&e))?;
            root.present().map_err(|e| err(&e))?;
        }
        image::RgbImage::from_raw(w, h, buf)
            .expect("buffer matches size")
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| err(&e))
    }
}

fn sweep_row(label: String, x: f64, outcomes: &[RunOutcome]) -> SweepRow {
    let n = outcomes.len().max(1) as f64;
    SweepRow {
        label,
        x,
        accuracy: outcomes.iter().map(|o| o.test_accuracy).sum::<f64>() / n,
        per_seed: outcomes.iter().map(|o| o.test_accuracy).collect(),
        max_category_fraction: outcomes
            .iter()
            .map(|o| o.max_category_fraction)
            .sum::<f64>()
            / n,
    }
}

fn seeded(config: &TrainConfig, seeds: &[u64]) -> Vec<TrainConfig> {
    if seeds.is_empty() {
        return vec![config.clone()];
    }
    seeds
        .iter()
        .map(|&s| TrainConfig {
            seed: s,
            ..config.clone()
        })
        .collect()
}

/// One train+evaluate run per K (per seed), all else equal.
pub fn k_sweep(
    config: &TrainConfig,
    ks: &[usize],
    seeds: &[u64],
    backend: Arc<dyn EncoderBackend>,
    data: &ExperimentData,
) -> Result<SweepTable> {
    let mut rows = Vec::with_capacity(ks.len());
    for &k in ks {
        let outcomes = seeded(config, seeds)
            .into_iter()
            .map(|c| {
                let c = TrainConfig {
                    k,
                    use_ppi: true,
                    ..c
                };
                run_experiment(&format!("K={k}"), &c, backend.clone(), data, None)
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(sweep_row(format!("K={k}"), k as f64, &outcomes));
    }
    Ok(SweepTable {
        name: "k_sweep".into(),
        x_label: "K".into(),
        rows,
    })
}

/// Component switches for one ablation row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationRow {
    pub id: usize,
    pub repulsion: bool,
    pub consistency: bool,
    pub ppi: bool,
    pub trci: bool,
}

impl AblationRow {
    /// The seven standard rows; attraction is always on.
    pub fn standard() -> Vec<AblationRow> {
        let row = |id, repulsion, consistency, ppi, trci| AblationRow {
            id,
            repulsion,
            consistency,
            ppi,
            trci,
        };
        vec![
            row(1, false, false, false, false),
            row(2, true, false, false, false),
            row(3, true, true, false, false),
            row(4, true, false, true, false),
            row(5, true, true, true, false),
            row(6, true, false, true, true),
            row(7, true, true, true, true),
        ]
    }

    /// Disabled losses get weight 0; enabled ones keep the base weights.
    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        if !self.repulsion {
            c.loss.lambda_rep = 0.0;
        }
        if !self.consistency {
            c.loss.lambda_con = 0.0;
        }
        c.use_ppi = self.ppi;
        c.use_trci = self.trci;
        c
    }
}

pub fn ablation_harness(
    config: &TrainConfig,
    rows: &[AblationRow],
    seeds: &[u64],
    backend: Arc<dyn EncoderBackend>,
    data: &ExperimentData,
) -> Result<SweepTable> {
    let mut out = Vec::with_capacity(rows.len());
    for row in rows {
        let label = format!("({})", row.id);
        let outcomes = seeded(&row.apply(config), seeds)
            .into_iter()
            .map(|c| run_experiment(&label, &c, backend.clone(), data, None))
            .collect::<Result<Vec<_>>>()?;
        out.push(sweep_row(label, row.id as f64, &outcomes));
    }
    Ok(SweepTable {
        name: "ablation".into(),
        x_label: "row".into(),
        rows: out,
    })
}

/// Reports and tables produced by one CLI invocation.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub reports: Vec<EvalReport>,
    pub tables: Vec<SweepTable>,
}

/// Writes `report.json`, one CSV per table, one PNG per non-empty table and
/// `files.txt` listing everything written. Returns the written paths.
pub fn emit_report(report: &RunReport, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let write = |name: &str, bytes: &[u8]| -> Result<PathBuf> {
        let p = dir.join(name);
        std::fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
        Ok(p)
    };
    written.push(write(
        "report.json",
        serde_json::to_string_pretty(report)?.as_bytes(),
    )?);
    for t in &report.tables {
        written.push(write(&format!("{}.csv", t.name), t.to_csv().as_bytes())?);
        if !t.rows.is_empty() {
            let p = dir.join(format!("{}.png", t.name));
            t.plot(&p)?;
            written.push(p);
        }
    }
    let listing: String = written
        .iter()
        .filter_map(|p| p.file_name().and_then(|n| n.to_str()))
        .map(|n| format!("{n}\n"))
        .collect();
    written.push(write("files.txt", listing.as_bytes())?);
    Ok(written)
}
