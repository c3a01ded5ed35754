//! End-to-end protocol: phantom, references, augmented subsets, three
//! trained autoencoders, clustering of every r-space, and the Table-1 style
//! report.
//!
//! Every stage reads and writes files, so the stage-wise command line path
//! and [`run_all`] produce the same artifacts.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augmentation::{build_experiment_sets, AugmentKind, DeformConfig, TranslateConfig};
use crate::autoencoders::{
    mean_loss, read_latents_csv, train, write_latents_csv, AeModel, ArchConfig, TrainConfig, Variant, VariantParams,
};
use crate::error::{Error, Result};
use crate::nn::AdamConfig;
use crate::rspace_eval::{evaluate_rspace, pca_scatter_svg, MetricsRecord, PointSet};
use crate::seed;
use crate::volume_data::{
    generate_phantom, read_patches, read_sequence, sample_pool_patches, sample_reference_patches, write_patches,
    write_sequence, PhantomConfig,
};

pub const EXPERIMENTS: [AugmentKind; 2] = [AugmentKind::Deformation, AugmentKind::Translation];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatchesSection {
    pub n: usize,
    pub side: usize,
    pub margin: usize,
}

impl Default for PatchesSection {
    fn default() -> Self {
        PatchesSection {
            n: 10,
            side: 30,
            margin: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSection {
    pub n_aug: usize,
    pub deform: DeformConfig,
    pub translate: TranslateConfig,
}

impl Default for AugmentSection {
    fn default() -> Self {
        AugmentSection {
            n_aug: 50,
            deform: DeformConfig::default(),
            translate: TranslateConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub latent_dim: usize,
    pub channels: Vec<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            latent_dim: 128,
            channels: vec![8, 16, 32],
        }
    }
}

/// The unlabeled patches the autoencoders are trained on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoolSection {
    pub n: usize,
    pub validation_fraction: f64,
    pub margin: usize,
}

impl Default for PoolSection {
    fn default() -> Self {
        PoolSection {
            n: 2000,
            validation_fraction: 0.1,
            margin: 0,
        }
    }
}

/// Per-variant training settings; the seed comes from the `[seeds]` section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VariantTrain {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub weights: VariantParams,
}

impl Default for VariantTrain {
    fn default() -> Self {
        let t = TrainConfig::default();
        VariantTrain {
            epochs: t.epochs,
            batch_size: t.batch_size,
            adam: t.adam,
            weights: t.weights,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub cae: VariantTrain,
    pub vae: VariantTrain,
    pub swae: VariantTrain,
}

impl TrainSection {
    pub fn get(&self, v: Variant) -> &VariantTrain {
        match v {
            Variant::Cae => &self.cae,
            Variant::Vae => &self.vae,
            Variant::Swae => &self.swae,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub k: usize,
    pub scatter_svg: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            k: 10,
            scatter_svg: true,
        }
    }
}

/// Optional explicit seeds; anything left out is derived from the master seed.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeedOverrides {
    pub data: Option<u64>,
    pub patches: Option<u64>,
    pub augment: Option<u64>,
    pub pool: Option<u64>,
    pub cae: Option<u64>,
    pub vae: Option<u64>,
    pub swae: Option<u64>,
    pub eval: Option<u64>,
}

/// Seed of every randomized stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub data: u64,
    pub patches: u64,
    pub augment: u64,
    pub pool: u64,
    pub cae: u64,
    pub vae: u64,
    pub swae: u64,
    pub eval: u64,
}

impl Seeds {
    pub fn train(&self, v: Variant) -> u64 {
        match v {
            Variant::Cae => self.cae,
            Variant::Vae => self.vae,
            Variant::Swae => self.swae,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub master_seed: u64,
    pub seeds: SeedOverrides,
    pub data: PhantomConfig,
    pub patches: PatchesSection,
    pub augment: AugmentSection,
    pub model: ModelSection,
    pub pool: PoolSection,
    pub train: TrainSection,
    pub eval: EvalSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let patches = PatchesSection::default();
        ExperimentConfig {
            master_seed: 0,
            seeds: SeedOverrides::default(),
            data: PhantomConfig {
                patch_side: patches.side,
                patch_margin: patches.margin,
                ..PhantomConfig::default()
            },
            patches,
            augment: AugmentSection::default(),
            model: ModelSection::default(),
            pool: PoolSection::default(),
            train: TrainSection::default(),
            eval: EvalSection::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parses and validates a TOML document.
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        // the phantom check uses the patch geometry of the [patches] section
        cfg.data.patch_side = cfg.patches.side;
        cfg.data.patch_margin = cfg.patches.margin;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Canonical TOML form; its hash identifies the experiment.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn sha256(&self) -> String {
        let digest = Sha256::digest(self.to_toml().as_bytes());
        digest.iter().fold(String::new(), |mut s, b| {
            write!(s, "{b:02x}").unwrap();
            s
        })
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.patches;
        if p.n == 0 || p.side == 0 {
            return Err(Error::Config("patches.n and patches.side must be >= 1".into()));
        }
        if self.data.patch_side != p.side || self.data.patch_margin != p.margin {
            return Err(Error::Config(
                "data.patch_side/patch_margin must match the [patches] section".into(),
            ));
        }
        self.data.validate()?;
        if p.margin < self.augment.translate.max_shift {
            return Err(Error::Config(format!(
                "patches.margin {} is smaller than augment.translate.max_shift {}",
                p.margin, self.augment.translate.max_shift
            )));
        }
        if self.eval.k != p.n {
            return Err(Error::Config(format!(
                "eval.k = {} must equal the number of reference patches {}",
                self.eval.k, p.n
            )));
        }
        if self.augment.n_aug == 0 {
            return Err(Error::Config("augment.n_aug must be >= 1".into()));
        }
        self.augment.deform.validate()?;
        let pool = &self.pool;
        if !(0.0..1.0).contains(&pool.validation_fraction) {
            return Err(Error::Config("pool.validation_fraction must lie in [0, 1)".into()));
        }
        for v in Variant::ALL {
            let t = self.train_config(v);
            t.validate(v)?;
            if self.split_sizes().0 < t.batch_size {
                return Err(Error::Config(format!(
                    "{v}: {} training patches cannot fill a batch of {}",
                    self.split_sizes().0,
                    t.batch_size
                )));
            }
        }
        self.arch()?;
        Ok(())
    }

    pub fn seeds(&self) -> Seeds {
        let s = &self.seeds;
        let d = |o: Option<u64>, tag: &str| o.unwrap_or_else(|| seed::derive_tag(self.master_seed, tag));
        Seeds {
            data: d(s.data, "data"),
            patches: d(s.patches, "patches"),
            augment: d(s.augment, "augment"),
            pool: d(s.pool, "pool"),
            cae: d(s.cae, "train-cae"),
            vae: d(s.vae, "train-vae"),
            swae: d(s.swae, "train-swae"),
            eval: d(s.eval, "eval"),
        }
    }

    pub fn train_config(&self, v: Variant) -> TrainConfig {
        let t = self.train.get(v);
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            seed: self.seeds().train(v),
            adam: t.adam,
            weights: t.weights,
        }
    }

    /// (training, validation) patch counts.
    pub fn split_sizes(&self) -> (usize, usize) {
        let n_val = (self.pool.n as f64 * self.pool.validation_fraction).round() as usize;
        (self.pool.n - n_val, n_val)
    }

    pub fn arch(&self) -> Result<ArchConfig> {
        let side = self.patches.side;
        let stages = self.model.channels.len() as u32;
        if stages == 0 || self.model.latent_dim == 0 {
            return Err(Error::Config(
                "model needs at least one stage and latent_dim >= 1".into(),
            ));
        }
        // stride-2 stages need a side divisible by 2^stages, padded evenly
        let step = 1usize << stages;
        let mut padded = side.div_ceil(step) * step;
        while !(padded - side).is_multiple_of(2) {
            padded += step;
        }
        Ok(ArchConfig {
            patch_side: side,
            padded_side: padded,
            channels: self.model.channels.clone(),
            latent_dim: self.model.latent_dim,
        })
    }
}

/// File names inside a run directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn augment_dir(&self) -> PathBuf {
        self.root.join("augment")
    }

    pub fn model(&self, v: Variant) -> PathBuf {
        self.root.join("models").join(format!("{v}.rsmdl"))
    }

    pub fn latents(&self, v: Variant, kind: AugmentKind) -> PathBuf {
        self.root.join("latents").join(format!("{v}_{}.csv", kind.name()))
    }

    pub fn metrics(&self, v: Variant, kind: AugmentKind) -> PathBuf {
        self.root.join("metrics").join(format!("{v}_{}.json", kind.name()))
    }

    pub fn plot(&self, v: Variant, kind: AugmentKind) -> PathBuf {
        self.root.join("plots").join(format!("{v}_{}.svg", kind.name()))
    }

    pub fn report(&self) -> PathBuf {
        self.root.join("report.json")
    }

    pub fn table(&self) -> PathBuf {
        self.root.join("table1.csv")
    }
}

pub fn sequence_path(data_dir: &Path) -> PathBuf {
    data_dir.join("sequence.rsvol")
}

pub fn references_path(data_dir: &Path) -> PathBuf {
    data_dir.join("references.rspat")
}

pub fn augmented_path(augment_dir: &Path, kind: AugmentKind) -> PathBuf {
    augment_dir.join(format!("{}.rspat", kind.name()))
}

/// Sidecar written next to a model file.
pub fn training_summary_path(model: &Path) -> PathBuf {
    model.with_extension("json")
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => create_dir(p),
        _ => Ok(()),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("json serializes") + "\n";
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(0, format!("{}: {e}", path.display())))
}

/// Generates the phantom sequence and the reference patches.
pub fn gen_data(cfg: &ExperimentConfig, out_dir: &Path) -> Result<()> {
    let seeds = cfg.seeds();
    let seq = generate_phantom(&cfg.data, seeds.data)?;
    let p = &cfg.patches;
    let refs = sample_reference_patches(&seq, p.n, p.side, p.margin, seeds.patches)?;
    create_dir(out_dir)?;
    write_sequence(sequence_path(out_dir), &seq)?;
    write_patches(references_path(out_dir), &refs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub variant: Variant,
    pub seed: u64,
    pub n_train: usize,
    pub n_validation: usize,
    pub epoch_losses: Vec<f64>,
    /// Reconstruction MSE on the held-out split.
    pub validation_mse: Option<f64>,
}

/// Samples the training pool, trains one variant and saves it with a
/// summary sidecar.
pub fn train_stage(
    cfg: &ExperimentConfig,
    variant: Variant,
    data_dir: &Path,
    model_path: &Path,
) -> Result<TrainSummary> {
    let seq = read_sequence(sequence_path(data_dir), cfg.data.frame_period)?;
    let refs = read_patches(references_path(data_dir))?;
    let seeds = cfg.seeds();
    let mut pool = sample_pool_patches(&seq, &refs, cfg.pool.n, cfg.patches.side, cfg.pool.margin, seeds.pool)?;
    let (n_train, n_validation) = cfg.split_sizes();
    let validation = pool.split_off(n_train);
    let tcfg = cfg.train_config(variant);
    let outcome = train(variant, &pool, &cfg.arch()?, &tcfg)?;
    let validation_mse = if validation.is_empty() {
        None
    } else {
        Some(mean_loss(&outcome.model, &validation)?)
    };
    create_parent(model_path)?;
    outcome.model.save(model_path)?;
    let summary = TrainSummary {
        variant,
        seed: tcfg.seed,
        n_train,
        n_validation,
        epoch_losses: outcome.epoch_losses,
        validation_mse,
    };
    write_json(&training_summary_path(model_path), &summary)?;
    Ok(summary)
}

/// Builds and writes the deformation and translation subsets.
pub fn augment_stage(cfg: &ExperimentConfig, data_dir: &Path, out_dir: &Path) -> Result<()> {
    let seq = read_sequence(sequence_path(data_dir), cfg.data.frame_period)?;
    let refs = read_patches(references_path(data_dir))?;
    let a = &cfg.augment;
    let seed = cfg.seeds().augment;
    let (deformed, translated) = build_experiment_sets(&seq, &refs, a.n_aug, &a.deform, &a.translate, seed)?;
    create_dir(out_dir)?;
    for set in [deformed, translated] {
        set.write(out_dir, refs.len(), a.n_aug, &a.deform, &a.translate, seed)?;
    }
    Ok(())
}

/// Encodes a patch archive into a latent CSV. The vae uses its mean code
/// unless `vae_sample` gives a sampling seed.
pub fn encode_stage(model_path: &Path, patches_path: &Path, out_csv: &Path, vae_sample: Option<u64>) -> Result<()> {
    let model = AeModel::<f32>::load(model_path)?;
    let patches = read_patches(patches_path)?;
    let latents = model.encode_all(&patches, vae_sample)?;
    create_parent(out_csv)?;
    write_latents_csv(out_csv, &patches, &latents)
}

/// Clusters a latent CSV and writes the metrics JSON.
pub fn evaluate_stage(
    latents_csv: &Path,
    k: usize,
    seed: u64,
    variant: &str,
    experiment: &str,
    out_json: &Path,
) -> Result<MetricsRecord> {
    let points = PointSet::from_rows(&read_latents_csv(latents_csv)?)?;
    let metrics = evaluate_rspace(&points, k, seed)?;
    let record = MetricsRecord::new(variant, experiment, &metrics, k, points.len(), seed);
    create_parent(out_json)?;
    record.write(out_json)?;
    Ok(record)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config_sha256: String,
    pub master_seed: u64,
    pub seeds: Seeds,
    pub config: ExperimentConfig,
    pub training: Vec<TrainSummary>,
    /// 3 variants x 2 experiments.
    pub cells: Vec<MetricsRecord>,
    pub wall_time_s: f64,
}

impl ExperimentReport {
    pub fn cell(&self, v: Variant, kind: AugmentKind) -> Option<&MetricsRecord> {
        self.cells
            .iter()
            .find(|c| c.variant == v.name() && c.experiment == kind.name())
    }

    /// JSON without the wall-time field, for reproducibility comparisons.
    pub fn timeless_json(&self) -> String {
        let mut v = serde_json::to_value(self).expect("report serializes");
        v.as_object_mut().unwrap().remove("wall_time_s");
        serde_json::to_string_pretty(&v).unwrap()
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        read_json(path.as_ref())
    }
}

/// `x` with four significant digits.
pub fn format_significant(x: f64, digits: usize) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x.is_finite() {
            format!("{:.*}", digits - 1, 0.0)
        } else {
            "inf".into()
        };
    }
    let magnitude = x.abs().log10().floor() as i64;
    let decimals = (digits as i64 - 1 - magnitude).max(0) as usize;
    format!("{x:.decimals$}")
}

fn format_ch(x: f64) -> String {
    if x.is_finite() {
        format!("{}", x.round() as i64)
    } else {
        "inf".into()
    }
}

/// Table-1 layout: one row per variant.
pub fn table_csv(report: &ExperimentReport) -> String {
    let mut out = String::from("variant,precision_deformation,precision_translation,ch_deformation,ch_translation\n");
    for v in Variant::ALL {
        let [d, t] = EXPERIMENTS.map(|k| report.cell(v, k).expect("report has every cell"));
        writeln!(
            out,
            "{v},{},{},{},{}",
            format_significant(d.precision, 4),
            format_significant(t.precision, 4),
            format_ch(d.ch_ground_truth),
            format_ch(t.ch_ground_truth)
        )
        .unwrap();
    }
    out
}

/// Gathers training summaries and metrics from a run directory.
pub fn assemble_report(cfg: &ExperimentConfig, layout: &Layout, wall_time_s: f64) -> Result<ExperimentReport> {
    let training = Variant::ALL
        .iter()
        .map(|&v| read_json(&training_summary_path(&layout.model(v))))
        .collect::<Result<Vec<TrainSummary>>>()?;
    let mut cells = Vec::with_capacity(6);
    for v in Variant::ALL {
        for kind in EXPERIMENTS {
            cells.push(MetricsRecord::read(layout.metrics(v, kind))?);
        }
    }
    Ok(ExperimentReport {
        config_sha256: cfg.sha256(),
        master_seed: cfg.master_seed,
        seeds: cfg.seeds(),
        config: cfg.clone(),
        training,
        cells,
        wall_time_s,
    })
}

/// Writes `report.json`, `table1.csv` and, if enabled, the PCA scatter plots.
pub fn emit_report(report: &ExperimentReport, layout: &Layout) -> Result<()> {
    create_dir(&layout.root)?;
    write_json(&layout.report(), report)?;
    let table = layout.table();
    std::fs::write(&table, table_csv(report)).map_err(|e| Error::io(&table, e))?;
    if report.config.eval.scatter_svg {
        for v in Variant::ALL {
            for kind in EXPERIMENTS {
                let points = PointSet::from_rows(&read_latents_csv(layout.latents(v, kind))?)?;
                let path = layout.plot(v, kind);
                create_parent(&path)?;
                let svg = pca_scatter_svg(&points, &format!("{v} / {}", kind.name()));
                std::fs::write(&path, svg).map_err(|e| Error::io(&path, e))?;
            }
        }
    }
    Ok(())
}

/// Every stage in order, writing all artifacts under `out_dir`.
pub fn run_all(cfg: &ExperimentConfig, out_dir: &Path) -> Result<ExperimentReport> {
    let start = Instant::now();
    cfg.validate()?;
    let layout = Layout::new(out_dir);
    let seeds = cfg.seeds();
    create_dir(out_dir)?;
    let config_copy = out_dir.join("config.toml");
    std::fs::write(&config_copy, cfg.to_toml()).map_err(|e| Error::io(&config_copy, e))?;

    gen_data(cfg, &layout.data_dir()).map_err(|e| e.in_stage("gen-data", seeds.data))?;
    for v in Variant::ALL {
        train_stage(cfg, v, &layout.data_dir(), &layout.model(v))
            .map_err(|e| e.in_stage(format!("train {v}"), seeds.train(v)))?;
    }
    augment_stage(cfg, &layout.data_dir(), &layout.augment_dir()).map_err(|e| e.in_stage("augment", seeds.augment))?;
    for v in Variant::ALL {
        for kind in EXPERIMENTS {
            let stage = format!("{v} {}", kind.name());
            encode_stage(
                &layout.model(v),
                &augmented_path(&layout.augment_dir(), kind),
                &layout.latents(v, kind),
                None,
            )
            .map_err(|e| e.in_stage(format!("encode {stage}"), seeds.train(v)))?;
            evaluate_stage(
                &layout.latents(v, kind),
                cfg.eval.k,
                seeds.eval,
                v.name(),
                kind.name(),
                &layout.metrics(v, kind),
            )
            .map_err(|e| e.in_stage(format!("evaluate {stage}"), seeds.eval))?;
        }
    }
    let report = assemble_report(cfg, &layout, start.elapsed().as_secs_f64())?;
    emit_report(&report, &layout).map_err(|e| e.in_stage("report", seeds.eval))?;
    Ok(report)
}
