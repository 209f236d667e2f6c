//! Experiment protocols: clean parity, distortion sweeps, limited data and
//! epochs, and the loss-family comparison.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::dataset::{gen_synthetic, Dataset, Split, SyntheticSpec};
use super::distort::{apply_distortion, DistortionKind, DistortionSpec, DistortionTable};
use super::report::{ExperimentReport, ReportRow};
use crate::contrast::{
    compute_magnitude, ContrastiveFeature, ExtractConfig, Extraction, Extractor, LossKind,
};
use crate::error::{Error, Result};
use crate::head::{ContrastiveHead, ContrastivePipeline};
use crate::nn::{desk_cnn, train, EpochStats, Network, TrainConfig};

/// Paths to an IDX train/test pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdxPaths {
    pub train_images: PathBuf,
    pub train_labels: PathBuf,
    pub test_images: PathBuf,
    pub test_labels: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub seed: u64,
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub image_size: usize,
    pub jitter: f64,
    /// Use IDX files instead of the synthetic generator.
    pub idx: Option<IdxPaths>,
    pub base: TrainConfig,
    pub head: TrainConfig,
    pub extraction: ExtractConfig,
    pub distortions: DistortionTable,
    pub sweep_kinds: Vec<DistortionKind>,
    pub levels: Vec<u8>,
    /// Per-class sample counts for the limited-data study.
    pub limited_data: Vec<usize>,
    /// Checkpoint stride (in epochs) for the limited-epoch study.
    pub epoch_stride: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            seed: 0,
            classes: 10,
            train_per_class: 500,
            test_per_class: 100,
            image_size: 32,
            jitter: 1.0,
            idx: None,
            base: TrainConfig::default(),
            head: TrainConfig::default(),
            extraction: ExtractConfig::default(),
            distortions: DistortionTable::default(),
            sweep_kinds: DistortionKind::ALL.to_vec(),
            levels: vec![1, 2, 3, 4, 5],
            limited_data: (1..=10).map(|k| 50 * k).collect(),
            epoch_stride: 3,
        }
    }
}

impl BenchConfig {
    /// Read TOML or JSON, chosen by file extension.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let cfg: BenchConfig = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => serde_json::from_str(&text)?,
            _ => toml::from_str(&text)
                .map_err(|e| Error::format(format!("{}: {e}", path.display())))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        self.head.validate()?;
        self.distortions.validate()?;
        if self.levels.iter().any(|&l| l > 5) {
            return Err(Error::invalid("distortion levels run from 0 to 5"));
        }
        if self.epoch_stride == 0 {
            return Err(Error::invalid("epoch_stride must be positive"));
        }
        Ok(())
    }

    pub fn snapshot(&self) -> serde_json::Value {
        serde_json::to_value(self).unwrap_or(serde_json::Value::Null)
    }

    /// `(train, test)` splits.
    pub fn datasets(&self) -> Result<(Dataset<f32>, Dataset<f32>)> {
        if let Some(p) = &self.idx {
            let train =
                Dataset::load_idx(&p.train_images, &p.train_labels, self.classes, Split::Train)?;
            let test =
                Dataset::load_idx(&p.test_images, &p.test_labels, self.classes, Split::Test)?;
            return Ok((train, test));
        }
        let spec = |seed, per_class| SyntheticSpec {
            seed,
            classes: self.classes,
            per_class,
            size: self.image_size,
            jitter: self.jitter,
        };
        let train = gen_synthetic(&spec(self.seed, self.train_per_class), Split::Train)?;
        let test = gen_synthetic(
            &spec(self.seed.wrapping_add(1), self.test_per_class),
            Split::Test,
        )?;
        Ok((train, test))
    }
}

/// Base network and head trained on the same clean data.
#[derive(Debug, Clone)]
pub struct TrainedPipeline {
    pub base: Network<f32>,
    pub magnitude: f64,
    pub head: ContrastiveHead<f32>,
    pub base_history: Vec<EpochStats>,
    pub head_history: Vec<EpochStats>,
}

impl TrainedPipeline {
    pub fn pipeline(&self) -> Result<ContrastivePipeline<'_, f32>> {
        ContrastivePipeline::new(&self.base, Some(self.magnitude), &self.head)
    }

    /// `(feed-forward, contrastive)` accuracy over the identical samples.
    pub fn evaluate(&self, ds: &Dataset<f32>) -> Result<(f64, f64)> {
        if ds.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let preds = self.pipeline()?.predict_batch(&ds.images)?;
        let n = ds.len() as f64;
        let ff = preds
            .iter()
            .zip(&ds.labels)
            .filter(|(p, &l)| p.base_label == l)
            .count() as f64;
        let ca = preds
            .iter()
            .zip(&ds.labels)
            .filter(|(p, &l)| p.label == l)
            .count() as f64;
        Ok((100.0 * ff / n, 100.0 * ca / n))
    }
}

/// Features of every training sample under `config`.
pub fn extract_all(
    base: &Network<f32>,
    magnitude: f64,
    config: ExtractConfig,
    ds: &Dataset<f32>,
) -> Result<Vec<ContrastiveFeature<f32>>> {
    Extractor::new(base, config, Some(magnitude))?.extract_batch(&ds.images, 0)
}

/// Compute `M`, extract training features and train a head on them.
pub fn fit_head(
    base: &Network<f32>,
    train_set: &Dataset<f32>,
    extraction: ExtractConfig,
    head_config: &TrainConfig,
    seed: u64,
) -> Result<(f64, ContrastiveHead<f32>, Vec<EpochStats>)> {
    let magnitude = compute_magnitude(base, &train_set.images)?;
    let features = extract_all(base, magnitude, extraction, train_set)?;
    let mut head = ContrastiveHead::for_base(base, Some(magnitude), extraction, seed)?;
    let outcome = head.train(&features, &train_set.labels, head_config)?;
    Ok((magnitude, head, outcome.history))
}

/// Train the base network and head on `train_set`.
pub fn train_pipeline(config: &BenchConfig, train_set: &Dataset<f32>) -> Result<TrainedPipeline> {
    let mut base = desk_cnn::<f32>(train_set.sample_shape(), train_set.num_classes, config.seed)?;
    let mut base_cfg = config.base.clone();
    base_cfg.checkpoint_every = None;
    let outcome = train(&mut base, &train_set.images, &train_set.labels, &base_cfg)?;
    let (magnitude, head, head_history) = fit_head(
        &base,
        train_set,
        config.extraction,
        &config.head,
        config.seed.wrapping_add(7),
    )?;
    Ok(TrainedPipeline {
        base,
        magnitude,
        head,
        base_history: outcome.history,
        head_history,
    })
}

fn reference_parity() -> Vec<(String, f64)> {
    vec![
        ("resnet18_cifar10_feed_forward".into(), 91.02),
        ("resnet18_cifar10_contrastive".into(), 90.94),
    ]
}

/// Clean test accuracy of both inference paths.
pub fn run_clean_parity(config: &BenchConfig) -> Result<(ExperimentReport, TrainedPipeline)> {
    let (train_set, test_set) = config.datasets()?;
    let trained = train_pipeline(config, &train_set)?;
    let report = parity_report(config, &trained, &test_set)?;
    Ok((report, trained))
}

pub fn parity_report(
    config: &BenchConfig,
    trained: &TrainedPipeline,
    test_set: &Dataset<f32>,
) -> Result<ExperimentReport> {
    let (ff, ca) = trained.evaluate(test_set)?;
    let mut report = ExperimentReport::new("clean-parity");
    report
        .rows
        .push(ReportRow::new("clean", 0, test_set.len(), ff, ca));
    report.reference = reference_parity();
    report.config = config.snapshot();
    Ok(report)
}

/// Evaluate every `(kind, level)` cell of the sweep on distorted copies of
/// `test_set`. Only clean data was used for training.
pub fn sweep_rows(
    config: &BenchConfig,
    trained: &TrainedPipeline,
    test_set: &Dataset<f32>,
    prefix: &str,
) -> Result<Vec<ReportRow>> {
    let mut rows = Vec::new();
    for &kind in &config.sweep_kinds {
        for &level in &config.levels {
            let spec = DistortionSpec {
                kind,
                level,
                seed: config.seed,
            };
            let ds = apply_distortion(test_set, &spec, &config.distortions)?;
            let (ff, ca) = trained.evaluate(&ds)?;
            rows.push(ReportRow::new(
                format!("{prefix}{kind}"),
                level as u32,
                ds.len(),
                ff,
                ca,
            ));
        }
    }
    Ok(rows)
}

fn add_kind_aggregates(report: &mut ExperimentReport, kinds: &[String]) {
    for k in kinds {
        if let Some(a) = report.aggregate(k, |r| r == k) {
            report.aggregates.push(a);
        }
    }
}

pub fn run_distortion_sweep(config: &BenchConfig) -> Result<(ExperimentReport, TrainedPipeline)> {
    let (train_set, test_set) = config.datasets()?;
    let trained = train_pipeline(config, &train_set)?;
    let report = sweep_report(config, &trained, &test_set)?;
    Ok((report, trained))
}

pub fn sweep_report(
    config: &BenchConfig,
    trained: &TrainedPipeline,
    test_set: &Dataset<f32>,
) -> Result<ExperimentReport> {
    let mut report = ExperimentReport::new("distortion-sweep");
    let (ff, ca) = trained.evaluate(test_set)?;
    report
        .rows
        .push(ReportRow::new("clean", 0, test_set.len(), ff, ca));
    report
        .rows
        .extend(sweep_rows(config, trained, test_set, "")?);
    let kinds: Vec<String> = config.sweep_kinds.iter().map(|k| k.to_string()).collect();
    add_kind_aggregates(&mut report, &kinds);
    report.reference = vec![("highest_full_scale_gain_glass_blur".into(), 8.22)];
    report.config = config.snapshot();
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LimitedMode {
    Data,
    Epochs,
}

/// Limited-data or limited-epoch study. Each series entry is a clean-test
/// report; its single row's `level` holds the per-class count or epoch.
pub fn run_limited(config: &BenchConfig, mode: LimitedMode) -> Result<Vec<ExperimentReport>> {
    let (train_set, test_set) = config.datasets()?;
    let mut series = Vec::new();
    match mode {
        LimitedMode::Data => {
            for &per_class in &config.limited_data {
                let subset =
                    train_set.take_per_class(per_class, config.seed.wrapping_add(per_class as u64));
                let trained = train_pipeline(config, &subset)?;
                let (ff, ca) = trained.evaluate(&test_set)?;
                let mut r = ExperimentReport::new(format!("limited-data-{per_class}"));
                r.rows.push(ReportRow::new(
                    "clean",
                    per_class as u32,
                    test_set.len(),
                    ff,
                    ca,
                ));
                r.config = config.snapshot();
                series.push(r);
            }
        }
        LimitedMode::Epochs => {
            let mut base =
                desk_cnn::<f32>(train_set.sample_shape(), train_set.num_classes, config.seed)?;
            let mut base_cfg = config.base.clone();
            base_cfg.checkpoint_every = Some(config.epoch_stride);
            let outcome = train(&mut base, &train_set.images, &train_set.labels, &base_cfg)?;
            for (epoch, net) in outcome.checkpoints {
                let (magnitude, head, head_history) = fit_head(
                    &net,
                    &train_set,
                    config.extraction,
                    &config.head,
                    config.seed.wrapping_add(7),
                )?;
                let trained = TrainedPipeline {
                    base: net,
                    magnitude,
                    head,
                    base_history: Vec::new(),
                    head_history,
                };
                let (ff, ca) = trained.evaluate(&test_set)?;
                let mut r = ExperimentReport::new(format!("limited-epochs-{epoch}"));
                r.rows.push(ReportRow::new(
                    "clean",
                    epoch as u32,
                    test_set.len(),
                    ff,
                    ca,
                ));
                r.config = config.snapshot();
                series.push(r);
            }
        }
    }
    Ok(series)
}

fn reference_losses() -> Vec<(String, f64)> {
    [
        ("feed-forward", 67.89),
        ("mse-m", 71.35),
        ("ce", 69.42),
        ("bce", 70.24),
        ("l1", 69.09),
        ("l1-m", 69.92),
        ("smoothl1", 69.22),
        ("smoothl1-m", 70.01),
        ("nll", 70.93),
        ("softmargin", 70.91),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

/// One head per loss kind over a shared base network, each evaluated on the
/// distortion sweep. Row kinds read `<loss>/<distortion>`; aggregates hold
/// each loss's mean over its rows and `ranking` orders losses by mean
/// contrastive accuracy.
pub fn run_loss_comparison(config: &BenchConfig) -> Result<ExperimentReport> {
    let (train_set, test_set) = config.datasets()?;
    let mut base = desk_cnn::<f32>(train_set.sample_shape(), train_set.num_classes, config.seed)?;
    let mut base_cfg = config.base.clone();
    base_cfg.checkpoint_every = None;
    let outcome = train(&mut base, &train_set.images, &train_set.labels, &base_cfg)?;
    loss_comparison_report(config, &base, outcome.history, &train_set, &test_set)
}

pub fn loss_comparison_report(
    config: &BenchConfig,
    base: &Network<f32>,
    base_history: Vec<EpochStats>,
    train_set: &Dataset<f32>,
    test_set: &Dataset<f32>,
) -> Result<ExperimentReport> {
    let mut report = ExperimentReport::new("loss-comparison");
    for kind in LossKind::ALL {
        let extraction = ExtractConfig {
            extraction: Extraction::Gradient(kind),
            normalize: config.extraction.normalize,
        };
        let (magnitude, head, head_history) = fit_head(
            base,
            train_set,
            extraction,
            &config.head,
            config.seed.wrapping_add(7),
        )?;
        let trained = TrainedPipeline {
            base: base.clone(),
            magnitude,
            head,
            base_history: base_history.clone(),
            head_history,
        };
        let prefix = format!("{kind}/");
        report
            .rows
            .extend(sweep_rows(config, &trained, test_set, &prefix)?);
        if let Some(a) = report.aggregate(kind.name(), |r| r.starts_with(&prefix)) {
            report.aggregates.push(a);
        }
    }
    if let Some(first) = report.aggregates.first() {
        // every loss shares the same base network, hence the same ff mean
        let ff = first.ff_mean;
        report.aggregates.insert(
            0,
            super::report::Aggregate {
                label: "feed-forward".into(),
                ff_mean: ff,
                contrastive_mean: ff,
                gain_mean: 0.0,
                rows: first.rows,
            },
        );
    }
    let mut ranked: Vec<&super::report::Aggregate> = report.aggregates.iter().skip(1).collect();
    ranked.sort_by(|a, b| b.contrastive_mean.total_cmp(&a.contrastive_mean));
    report.ranking = ranked.into_iter().map(|a| a.label.clone()).collect();
    report.reference = reference_losses();
    report.config = config.snapshot();
    Ok(report)
}

/// Cap the global thread pool from `CONTRASTNET_THREADS`, if set.
/// Returns the number of threads in use.
pub fn init_threads() -> usize {
    if let Some(n) = std::env::var("CONTRASTNET_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
    {
        // a pool that already exists keeps its size
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
    rayon::current_num_threads()
}
