//! End-to-end experiment orchestration: declarative configs, named presets,
//! the training-plus-scheduled-analysis pipeline, and structured CSV
//! outputs.
//!
//! A run consumes one `ExperimentConfig` and writes a self-contained
//! artifact directory: resolved config, manifest (config hash + timestamp;
//! the only place a timestamp appears), metrics.csv, analysis traces,
//! checkpoints and final analyses. Re-running the same config overwrites the
//! directory with byte-identical CSVs.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::basin::{self, BasinScope, BasinSize, BasinSpace};
use crate::config::{ConfigError, FlatConfig};
use crate::data::{self, DataError, LabeledDataset, SubsetStrategy};
use crate::lmap;
use crate::net::{ActivationKind, BnMode, Network};
use crate::phase::{self, GrokkingParams, GrokkingReport, PhaseOptions};
use crate::project;
use crate::rng;
use crate::rpd;
use crate::train::{self, LossKind, MetricTrace, OptimizerKind, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error("data: {0}")]
    Data(#[from] DataError),
    #[error("training: {0}")]
    Train(#[from] TrainError),
    #[error("network: {0}")]
    Net(#[from] crate::net::NetError),
    #[error("rank analysis: {0}")]
    Rpd(#[from] crate::rpd::RpdError),
    #[error("basin analysis: {0}")]
    Basin(#[from] crate::basin::BasinError),
    #[error("linear map: {0}")]
    Lmap(#[from] crate::lmap::LmapError),
    #[error("projection: {0}")]
    Project(#[from] crate::project::ProjectError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("unknown preset `{0}`")]
    UnknownPreset(String),
}

/// Format a float with 9 significant digits; NaN prints as `nan`.
pub fn fmt_float(v: f64) -> String {
    if v.is_nan() {
        "nan".to_string()
    } else {
        format!("{v:.8e}")
    }
}

#[derive(Debug, Clone)]
pub enum DataSpec {
    Mnist {
        dir: PathBuf,
        train_images: Option<PathBuf>,
        train_labels: Option<PathBuf>,
        test_images: Option<PathBuf>,
        test_labels: Option<PathBuf>,
        subset: usize,
        test_subset: usize,
        strategy: SubsetStrategy,
    },
    Synthetic { classes: usize, dim: usize, per_class: usize, spread: f64 },
}

#[derive(Debug, Clone)]
pub struct NetSpec {
    pub widths: Vec<usize>,
    pub activation: ActivationKind,
    pub bn: bool,
    pub bn_momentum: f64,
    pub use_bias: bool,
}

#[derive(Debug, Clone)]
pub struct AnalysisSpec {
    /// Hidden layers whose RPD steepness is tracked at every snapshot.
    pub rpd_layers: Vec<usize>,
    pub rpd_bins: usize,
    /// Measure basins every N-th snapshot (0 = never).
    pub basin_every: usize,
    pub basin_spaces: Vec<BasinSpace>,
    /// Training-set subsample size used for basin measurements.
    pub basin_samples: usize,
    pub basin_trials: usize,
    pub basin_grid_sample: (f64, f64, usize),
    pub basin_grid_weight: (f64, f64, usize),
    /// Steps at which to save checkpoints (the final network is always
    /// saved).
    pub checkpoint_steps: Vec<usize>,
    pub basin_at_end: bool,
    pub prune_at_end: bool,
    pub project_at_end: bool,
    pub class_rpd_at_end: bool,
    pub phase_exclude_last: usize,
    pub phase_debounce: usize,
    pub grokking_window: usize,
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataSpec,
    pub net: NetSpec,
    pub train: TrainConfig,
    pub analysis: AnalysisSpec,
    flat: FlatConfig,
}

const KNOWN_KEYS: &[&str] = &[
    "seed",
    "out_dir",
    "data.source",
    "data.dir",
    "data.train_images",
    "data.train_labels",
    "data.test_images",
    "data.test_labels",
    "data.subset",
    "data.test_subset",
    "data.subset_strategy",
    "data.classes",
    "data.dim",
    "data.per_class",
    "data.spread",
    "net.widths",
    "net.activation",
    "net.bn",
    "net.bn_momentum",
    "net.use_bias",
    "train.optimizer",
    "train.learning_rate",
    "train.batch_size",
    "train.epochs",
    "train.weight_decay",
    "train.loss",
    "train.init_scale",
    "train.eval_every",
    "train.adam_beta1",
    "train.adam_beta2",
    "train.adam_epsilon",
    "analysis.rpd_layers",
    "analysis.rpd_bins",
    "analysis.basin_every",
    "analysis.basin_space",
    "analysis.basin_samples",
    "analysis.basin_trials",
    "analysis.basin_grid_sample",
    "analysis.basin_grid_weight",
    "analysis.checkpoint_steps",
    "analysis.basin_at_end",
    "analysis.prune_at_end",
    "analysis.project_at_end",
    "analysis.class_rpd_at_end",
    "analysis.phase_exclude_last",
    "analysis.phase_debounce",
    "analysis.grokking_window",
];

impl ExperimentConfig {
    pub fn from_flat(flat: FlatConfig) -> Result<Self, ExperimentError> {
        flat.check_known_keys(KNOWN_KEYS)?;
        let seed = flat.parse_u64("seed", 0)?;
        let out_dir = PathBuf::from(flat.get_or("out_dir", "runs/out"));

        let data = match flat.get_or("data.source", "synthetic") {
            "mnist" => {
                let dir = PathBuf::from(flat.get_or("data.dir", "data/mnist"));
                let strategy = match flat.get_or("data.subset_strategy", "stratified") {
                    "uniform" => SubsetStrategy::Uniform,
                    "stratified" => SubsetStrategy::Stratified,
                    other => {
                        return Err(ConfigError::TypeMismatch {
                            key: "data.subset_strategy".into(),
                            expected: "stratified or uniform",
                            value: other.into(),
                        }
                        .into())
                    }
                };
                DataSpec::Mnist {
                    dir,
                    train_images: flat.get("data.train_images").map(PathBuf::from),
                    train_labels: flat.get("data.train_labels").map(PathBuf::from),
                    test_images: flat.get("data.test_images").map(PathBuf::from),
                    test_labels: flat.get("data.test_labels").map(PathBuf::from),
                    subset: flat.parse_usize("data.subset", 0)?,
                    test_subset: flat.parse_usize("data.test_subset", 0)?,
                    strategy,
                }
            }
            "synthetic" => DataSpec::Synthetic {
                classes: flat.parse_usize("data.classes", 4)?,
                dim: flat.parse_usize("data.dim", 8)?,
                per_class: flat.parse_usize("data.per_class", 40)?,
                spread: flat.parse_f64("data.spread", 0.25)?,
            },
            other => {
                return Err(ConfigError::TypeMismatch {
                    key: "data.source".into(),
                    expected: "mnist or synthetic",
                    value: other.into(),
                }
                .into())
            }
        };

        let widths = flat.parse_usize_list("net.widths")?;
        let widths = if widths.is_empty() { vec![8, 16, 4] } else { widths };
        let activation_name = flat.get_or("net.activation", "tanh");
        let activation = ActivationKind::parse(activation_name).ok_or_else(|| {
            ConfigError::TypeMismatch {
                key: "net.activation".into(),
                expected: "identity, tanh, relu or gaussian",
                value: activation_name.into(),
            }
        })?;
        let net = NetSpec {
            widths,
            activation,
            bn: flat.parse_bool("net.bn", false)?,
            bn_momentum: flat.parse_f64("net.bn_momentum", crate::net::BN_MOMENTUM)?,
            use_bias: flat.parse_bool("net.use_bias", false)?,
        };

        let optimizer = match flat.get_or("train.optimizer", "sgd") {
            "sgd" => OptimizerKind::Sgd,
            "adam" => OptimizerKind::Adam {
                beta1: flat.parse_f64("train.adam_beta1", 0.9)?,
                beta2: flat.parse_f64("train.adam_beta2", 0.999)?,
                epsilon: flat.parse_f64("train.adam_epsilon", 1e-8)?,
            },
            other => {
                return Err(ConfigError::TypeMismatch {
                    key: "train.optimizer".into(),
                    expected: "sgd or adam",
                    value: other.into(),
                }
                .into())
            }
        };
        let loss_name = flat.get_or("train.loss", "cross_entropy");
        let loss = LossKind::parse(loss_name).ok_or_else(|| ConfigError::TypeMismatch {
            key: "train.loss".into(),
            expected: "cross_entropy or squared_error",
            value: loss_name.into(),
        })?;
        let train = TrainConfig {
            optimizer,
            learning_rate: flat.parse_f64("train.learning_rate", 0.03)?,
            batch_size: flat.parse_usize("train.batch_size", 64)?,
            epochs: flat.parse_usize("train.epochs", 10)?,
            weight_decay: flat.parse_f64("train.weight_decay", 0.0)?,
            loss,
            seed,
            init_scale: flat.parse_f64("train.init_scale", 1.0)?,
            eval_every: flat.parse_usize("train.eval_every", 100)?,
        };

        let basin_spaces = match flat.get_or("analysis.basin_space", "sample") {
            "sample" => vec![BasinSpace::Sample],
            "weight" => vec![BasinSpace::Weight],
            "both" => vec![BasinSpace::Sample, BasinSpace::Weight],
            other => {
                return Err(ConfigError::TypeMismatch {
                    key: "analysis.basin_space".into(),
                    expected: "sample, weight or both",
                    value: other.into(),
                }
                .into())
            }
        };
        let analysis = AnalysisSpec {
            rpd_layers: flat.parse_usize_list("analysis.rpd_layers")?,
            rpd_bins: flat.parse_usize("analysis.rpd_bins", rpd::DEFAULT_BINS)?,
            basin_every: flat.parse_usize("analysis.basin_every", 0)?,
            basin_spaces,
            basin_samples: flat.parse_usize("analysis.basin_samples", 200)?,
            basin_trials: flat.parse_usize("analysis.basin_trials", 8)?,
            basin_grid_sample: flat.parse_grid("analysis.basin_grid_sample", (1e-3, 3.0, 12))?,
            basin_grid_weight: flat.parse_grid("analysis.basin_grid_weight", (0.01, 10.0, 12))?,
            checkpoint_steps: flat.parse_usize_list("analysis.checkpoint_steps")?,
            basin_at_end: flat.parse_bool("analysis.basin_at_end", false)?,
            prune_at_end: flat.parse_bool("analysis.prune_at_end", false)?,
            project_at_end: flat.parse_bool("analysis.project_at_end", false)?,
            class_rpd_at_end: flat.parse_bool("analysis.class_rpd_at_end", false)?,
            phase_exclude_last: flat.parse_usize("analysis.phase_exclude_last", 2)?,
            phase_debounce: flat.parse_usize("analysis.phase_debounce", 3)?,
            grokking_window: flat.parse_usize("analysis.grokking_window", 5)?,
        };

        Ok(ExperimentConfig { seed, out_dir, data, net, train, analysis, flat })
    }

    pub fn parse(text: &str) -> Result<Self, ExperimentError> {
        Ok(Self::from_flat(FlatConfig::parse(text)?)?)
    }

    pub fn with_out_dir(mut self, dir: &Path) -> Self {
        self.out_dir = dir.to_path_buf();
        self
    }

    pub fn flat(&self) -> &FlatConfig {
        &self.flat
    }
}

/// Load the (train, test) datasets a config describes, normalized to [0, 1].
pub fn load_datasets(config: &ExperimentConfig) -> Result<(LabeledDataset, Option<LabeledDataset>), ExperimentError> {
    match &config.data {
        DataSpec::Mnist {
            dir,
            train_images,
            train_labels,
            test_images,
            test_labels,
            subset,
            test_subset,
            strategy,
        } => {
            let ti = train_images.clone().unwrap_or_else(|| dir.join("train-images-idx3-ubyte"));
            let tl = train_labels.clone().unwrap_or_else(|| dir.join("train-labels-idx1-ubyte"));
            let vi = test_images.clone().unwrap_or_else(|| dir.join("t10k-images-idx3-ubyte"));
            let vl = test_labels.clone().unwrap_or_else(|| dir.join("t10k-labels-idx1-ubyte"));
            let mut train_ds = data::load_idx(&ti, &tl)?.normalize()?;
            if *subset > 0 && *subset < train_ds.len() {
                train_ds = train_ds.subset(*subset, rng::stream_key(config.seed, &[rng::tag::SUBSET, 0]), *strategy)?;
            }
            let mut test_ds = data::load_idx(&vi, &vl)?.normalize()?;
            if *test_subset > 0 && *test_subset < test_ds.len() {
                test_ds =
                    test_ds.subset(*test_subset, rng::stream_key(config.seed, &[rng::tag::SUBSET, 1]), *strategy)?;
            }
            Ok((train_ds, Some(test_ds)))
        }
        DataSpec::Synthetic { classes, dim, per_class, spread } => {
            let train_ds = data::synthetic_blobs(*classes, *dim, *per_class, *spread, config.seed);
            let test_ds =
                data::synthetic_blobs(*classes, *dim, *per_class, *spread, config.seed.wrapping_add(104729));
            Ok((train_ds, Some(test_ds)))
        }
    }
}

/// Build the network a config describes.
pub fn build_network(config: &ExperimentConfig) -> Network {
    let mut net = Network::init_kaiming_scaled(&config.net.widths, config.seed, config.train.init_scale)
        .with_activation(config.net.activation);
    if config.net.bn {
        net = net.with_batch_norm(config.net.bn_momentum);
    }
    if config.net.use_bias {
        net = net.with_bias();
    }
    net
}

/// Everything a run produced, for programmatic consumers; the same data goes
/// to the artifact directory as CSV.
pub struct RunArtifacts {
    pub out_dir: PathBuf,
    pub net: Network,
    pub trace: MetricTrace,
    /// Per snapshot: (step, per-layer steepness).
    pub rpd_trace: Vec<(usize, Vec<(usize, f64)>)>,
    /// Per measured snapshot: (step, per-space basin size).
    pub basin_trace: Vec<(usize, Vec<(BasinSpace, BasinSize)>)>,
    pub grokking: GrokkingReport,
    pub train_ds: LabeledDataset,
    pub test_ds: Option<LabeledDataset>,
}

fn write_file(dir: &Path, name: &str, content: &str) -> Result<(), ExperimentError> {
    fs::write(dir.join(name), content)?;
    Ok(())
}

fn basin_flag_name(s: &BasinSize) -> &'static str {
    match s.flag {
        basin::BasinFlag::Crossed => "crossed",
        basin::BasinFlag::NotReached => "not_reached",
        basin::BasinFlag::BelowAtZero => "below_at_zero",
    }
}

/// Execute one experiment end to end.
pub fn run(config: &ExperimentConfig) -> Result<RunArtifacts, ExperimentError> {
    fs::create_dir_all(&config.out_dir)?;
    write_file(&config.out_dir, "config.resolved", &config.flat.canonical_text())?;

    let (train_ds, test_ds) = load_datasets(config)?;
    let net = build_network(config);

    // Fixed training-set subsample for basin trajectories.
    let basin_ds = if config.analysis.basin_every > 0 || config.analysis.basin_at_end {
        let n = config.analysis.basin_samples.min(train_ds.len()).max(1);
        Some(train_ds.subset(n, rng::stream_key(config.seed, &[rng::tag::SUBSET, 2]), SubsetStrategy::Stratified)?)
    } else {
        None
    };
    let sample_grid = {
        let (lo, hi, n) = config.analysis.basin_grid_sample;
        basin::log_grid(lo, hi, n)
    };
    let weight_grid = {
        let (lo, hi, n) = config.analysis.basin_grid_weight;
        basin::log_grid(lo, hi, n)
    };

    let mut rpd_trace: Vec<(usize, Vec<(usize, f64)>)> = Vec::new();
    let mut basin_trace: Vec<(usize, Vec<(BasinSpace, BasinSize)>)> = Vec::new();
    let mut snapshot_counter = 0usize;
    let mut observer_error: Option<ExperimentError> = None;

    // Metrics stream to disk as training progresses; the file is complete
    // the moment the final snapshot lands.
    let mut metrics_file = fs::File::create(config.out_dir.join("metrics.csv"))?;
    {
        use std::io::Write as _;
        metrics_file.write_all(b"step,train_acc,test_acc,loss,weight_norm\n")?;
    }

    let analysis = &config.analysis;
    let out_dir = config.out_dir.clone();
    let seed = config.seed;
    let mut observer = |step: usize, net: &Network, snap: &mut train::MetricSnapshot| {
        if observer_error.is_some() {
            return;
        }
        let idx = snapshot_counter;
        snapshot_counter += 1;
        // Per-layer RPD steepness.
        if !analysis.rpd_layers.is_empty() {
            let mut row = Vec::with_capacity(analysis.rpd_layers.len());
            for &layer in &analysis.rpd_layers {
                match rpd::layer_steepness(net, &train_ds, layer, analysis.rpd_bins, BnMode::Eval) {
                    Ok(s) => row.push((layer, s)),
                    Err(e) => {
                        observer_error = Some(e.into());
                        return;
                    }
                }
            }
            snap.rpd_gradients = Some(row.clone());
            rpd_trace.push((step, row));
        }
        // Basin sizes on the fixed subsample.
        if analysis.basin_every > 0 && idx % analysis.basin_every == 0 {
            let ds = basin_ds.as_ref().expect("basin subsample exists");
            let mut sizes = Vec::new();
            for &space in &analysis.basin_spaces {
                let grid = match space {
                    BasinSpace::Sample => &sample_grid,
                    BasinSpace::Weight => &weight_grid,
                };
                match basin::measure_basin(
                    net,
                    ds,
                    space,
                    BasinScope::All,
                    grid,
                    analysis.basin_trials,
                    rng::stream_key(seed, &[0xBA51, step as u64]),
                    BnMode::Eval,
                ) {
                    Ok((_, size)) => sizes.push((space, size)),
                    Err(e) => {
                        observer_error = Some(e.into());
                        return;
                    }
                }
            }
            snap.basin_sizes =
                Some(sizes.iter().map(|(sp, s)| (sp.name().to_string(), s.size)).collect());
            basin_trace.push((step, sizes));
        }
        if analysis.checkpoint_steps.contains(&step) {
            if let Err(e) = net.save_checkpoint(&out_dir.join(format!("checkpoint_{step}.ckpt")), seed, step) {
                observer_error = Some(e.into());
                return;
            }
        }
        {
            use std::io::Write as _;
            let row = format!(
                "{},{},{},{},{}\n",
                snap.step,
                fmt_float(snap.train_acc),
                fmt_float(snap.test_acc),
                fmt_float(snap.loss),
                fmt_float(snap.weight_norm)
            );
            if let Err(e) = metrics_file.write_all(row.as_bytes()).and_then(|()| metrics_file.flush()) {
                observer_error = Some(e.into());
            }
        }
    };

    let (net, trace) = train::train(net, &train_ds, test_ds.as_ref(), &config.train, Some(&mut observer))?;
    if let Some(e) = observer_error {
        return Err(e);
    }

    drop(metrics_file);
    let final_step = trace.snapshots.last().map_or(0, |s| s.step);
    net.save_checkpoint(&config.out_dir.join("checkpoint_final.ckpt"), config.seed, final_step)?;

    // rpd_grad_trace.csv
    if !rpd_trace.is_empty() {
        let mut csv = String::from("step,layer,steepness\n");
        for (step, row) in &rpd_trace {
            for (layer, s) in row {
                let _ = writeln!(csv, "{step},{layer},{}", fmt_float(*s));
            }
        }
        write_file(&config.out_dir, "rpd_grad_trace.csv", &csv)?;
    }

    // basin_trace.csv
    if !basin_trace.is_empty() {
        let mut csv = String::from("step,space,scope,size,flag\n");
        for (step, sizes) in &basin_trace {
            for (space, size) in sizes {
                let _ = writeln!(
                    csv,
                    "{step},{},all,{},{}",
                    space.name(),
                    fmt_float(size.size.unwrap_or(f64::NAN)),
                    basin_flag_name(size)
                );
            }
        }
        write_file(&config.out_dir, "basin_trace.csv", &csv)?;
    }

    // Final per-layer RPD histograms and steepness.
    if !analysis.rpd_layers.is_empty() {
        let mut rpd_csv = String::from("layer,class,bin_center,density\n");
        let mut grad_csv = String::from("layer,steepness\n");
        for &layer in &analysis.rpd_layers {
            let hist = rpd::layer_rpd(&net, &train_ds, layer, None, analysis.rpd_bins, BnMode::Eval)?;
            for (c, d) in hist.bin_centers().iter().zip(&hist.density) {
                let _ = writeln!(rpd_csv, "{layer},all,{},{}", fmt_float(*c), fmt_float(*d));
            }
            let _ = writeln!(grad_csv, "{layer},{}", fmt_float(rpd::rpd_gradient(&hist).steepness()));
            if analysis.class_rpd_at_end {
                for k in 0..train_ds.num_classes() {
                    let h = rpd::layer_rpd(&net, &train_ds, layer, Some(k), analysis.rpd_bins, BnMode::Eval)?;
                    for (c, d) in h.bin_centers().iter().zip(&h.density) {
                        let _ = writeln!(rpd_csv, "{layer},{k},{},{}", fmt_float(*c), fmt_float(*d));
                    }
                }
            }
        }
        write_file(&config.out_dir, "rpd.csv", &rpd_csv)?;
        write_file(&config.out_dir, "rpd_grad.csv", &grad_csv)?;
    }

    // Final basin curves.
    if analysis.basin_at_end {
        let ds = basin_ds.as_ref().expect("basin subsample exists");
        let mut curve_csv = String::from("space,scope,amplitude,accuracy,trials\n");
        let mut size_csv = String::from("space,scope,size,flag\n");
        for &space in &analysis.basin_spaces {
            let grid = match space {
                BasinSpace::Sample => &sample_grid,
                BasinSpace::Weight => &weight_grid,
            };
            let (curve, size) = basin::measure_basin(
                &net,
                ds,
                space,
                BasinScope::All,
                grid,
                analysis.basin_trials,
                rng::stream_key(seed, &[0xBA51, u64::MAX]),
                BnMode::Eval,
            )?;
            for (a, acc) in curve.amplitudes.iter().zip(&curve.accuracies) {
                let _ = writeln!(
                    curve_csv,
                    "{},all,{},{},{}",
                    space.name(),
                    fmt_float(*a),
                    fmt_float(*acc),
                    curve.trials
                );
            }
            let _ = writeln!(
                size_csv,
                "{},all,{},{}",
                space.name(),
                fmt_float(size.size.unwrap_or(f64::NAN)),
                basin_flag_name(&size)
            );
        }
        write_file(&config.out_dir, "basin.csv", &curve_csv)?;
        write_file(&config.out_dir, "basin_size.csv", &size_csv)?;
    }

    // Pruning profile.
    if analysis.prune_at_end {
        let eval_ds = test_ds.as_ref().unwrap_or(&train_ds);
        let mut csv = String::from("from_layer,accuracy\n");
        for l in 2..=net.num_layers() {
            let acc = lmap::prune_accuracy(&net, l, eval_ds, BnMode::Eval)?;
            let _ = writeln!(csv, "{l},{}", fmt_float(acc));
        }
        write_file(&config.out_dir, "prune.csv", &csv)?;
    }

    // Bottleneck projection and train/test overlap.
    if analysis.project_at_end {
        let proj = project::bottleneck_2d(&net, &train_ds, BnMode::Eval)?;
        let mut csv = String::from("sample_id,label,c1,c2\n");
        for i in 0..proj.coords.rows() {
            let _ = writeln!(
                csv,
                "{i},{},{},{}",
                proj.labels[i],
                fmt_float(proj.coords.get(i, 0)),
                fmt_float(proj.coords.get(i, 1))
            );
        }
        write_file(&config.out_dir, "proj.csv", &csv)?;
        if let Some(test) = &test_ds {
            let tproj = project::bottleneck_2d(&net, test, BnMode::Eval)?;
            let mut tcsv = String::from("sample_id,label,c1,c2\n");
            for i in 0..tproj.coords.rows() {
                let _ = writeln!(
                    tcsv,
                    "{i},{},{},{}",
                    tproj.labels[i],
                    fmt_float(tproj.coords.get(i, 0)),
                    fmt_float(tproj.coords.get(i, 1))
                );
            }
            write_file(&config.out_dir, "proj_test.csv", &tcsv)?;
            let overlap =
                project::overlap_statistic(&proj.coords, &tproj.coords, project::OVERLAP_K, project::OVERLAP_Q);
            let mut ocsv = String::from("k,q,overlap\n");
            let _ = writeln!(ocsv, "{},{},{}", project::OVERLAP_K, project::OVERLAP_Q, fmt_float(overlap));
            write_file(&config.out_dir, "overlap.csv", &ocsv)?;
        }
    }

    // Grokking report.
    let chance = 1.0 / train_ds.num_classes().max(1) as f64;
    let params = GrokkingParams { chance, window: analysis.grokking_window, ..GrokkingParams::default() };
    let grokking = phase::detect_grokking(&trace.train_accuracy(), &trace.test_accuracy(), &params);
    {
        let mut csv = String::from("detected,onset_step,plateau_start,plateau_end,jump\n");
        let _ = writeln!(
            csv,
            "{},{},{},{},{}",
            grokking.detected,
            grokking.onset_step.map_or("nan".to_string(), |s| s.to_string()),
            grokking.plateau.map_or("nan".to_string(), |(s, _)| s.to_string()),
            grokking.plateau.map_or("nan".to_string(), |(_, e)| e.to_string()),
            fmt_float(grokking.jump)
        );
        write_file(&config.out_dir, "grokking.csv", &csv)?;
    }

    // Phase trace, when enough tracked layers survive the exclusion.
    if !rpd_trace.is_empty() {
        let opts = PhaseOptions {
            exclude_last: analysis.phase_exclude_last,
            ..PhaseOptions::default()
        };
        let usable = analysis.rpd_layers.len().saturating_sub(opts.exclude_last) >= 3;
        if usable {
            let mut phase_csv = String::from("step,label,rho,spread\n");
            let mut labels: Vec<(usize, phase::PhaseLabel)> = Vec::new();
            for (step, row) in &rpd_trace {
                let profile: Vec<f64> = row.iter().map(|&(_, s)| s).collect();
                if let Ok(reading) = phase::classify_phase_profile(&profile, &opts) {
                    let _ = writeln!(
                        phase_csv,
                        "{step},{},{},{}",
                        reading.label.name(),
                        fmt_float(reading.rho),
                        fmt_float(reading.spread)
                    );
                    labels.push((*step, reading.label));
                }
            }
            write_file(&config.out_dir, "phase.csv", &phase_csv)?;
            let transitions = phase::detect_transition(&labels, analysis.phase_debounce);
            let mut tcsv = String::from("step,from,to\n");
            for (step, from, to) in transitions {
                let _ = writeln!(tcsv, "{step},{},{}", from.name(), to.name());
            }
            write_file(&config.out_dir, "transitions.csv", &tcsv)?;
        }
    }

    // Manifest: config hash, seed, timestamp (only here), file list.
    {
        let mut files: Vec<String> = fs::read_dir(&config.out_dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| n != "manifest.txt")
            .collect();
        files.sort();
        let created = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map_or(0, |d| d.as_secs());
        let manifest = format!(
            "netdyn run manifest\nconfig_hash = {:016x}\nseed = {}\ncreated_unix = {}\nfiles = {}\n",
            config.flat.hash(),
            config.seed,
            created,
            files.join(",")
        );
        write_file(&config.out_dir, "manifest.txt", &manifest)?;
    }

    Ok(RunArtifacts { out_dir: config.out_dir.clone(), net, trace, rpd_trace, basin_trace, grokking, train_ds, test_ds })
}

// --- presets ----------------------------------------------------------------

fn preset_flat(pairs: &[(&str, &str)]) -> FlatConfig {
    let owned: Vec<(&str, String)> = pairs.iter().map(|&(k, v)| (k, v.to_string())).collect();
    FlatConfig::from_pairs(&owned)
}

/// A lightweight synthetic pipeline exercising every analysis; seconds to
/// run.
pub fn preset_smoke() -> FlatConfig {
    preset_flat(&[
        ("seed", "7"),
        ("out_dir", "runs/smoke"),
        ("data.source", "synthetic"),
        ("data.classes", "4"),
        ("data.dim", "8"),
        ("data.per_class", "40"),
        ("data.spread", "0.25"),
        ("net.widths", "8,16,12,10,4"),
        ("net.activation", "tanh"),
        ("train.optimizer", "sgd"),
        ("train.learning_rate", "0.1"),
        ("train.batch_size", "16"),
        ("train.epochs", "30"),
        ("train.eval_every", "30"),
        ("analysis.rpd_layers", "2,3,4"),
        ("analysis.rpd_bins", "20"),
        ("analysis.phase_exclude_last", "0"),
        ("analysis.basin_every", "2"),
        ("analysis.basin_space", "both"),
        ("analysis.basin_samples", "60"),
        ("analysis.basin_trials", "4"),
        ("analysis.basin_grid_sample", "0.05:4:8"),
        ("analysis.basin_grid_weight", "0.05:6:8"),
        ("analysis.basin_at_end", "true"),
        ("analysis.prune_at_end", "true"),
        ("analysis.project_at_end", "true"),
        ("analysis.class_rpd_at_end", "true"),
    ])
}

/// Shallow 784-2048-10 on a small stratified subset; pair with the identity
/// variant to compare the early linear regime.
pub fn preset_fig2_small(activation: &str) -> FlatConfig {
    preset_flat(&[
        ("seed", "5"),
        ("out_dir", &format!("runs/fig2-small-{activation}")),
        ("data.source", "mnist"),
        ("data.dir", "data/mnist"),
        ("data.subset", "600"),
        ("net.widths", "784,2048,10"),
        ("net.activation", activation),
        ("train.optimizer", "sgd"),
        ("train.learning_rate", "0.1"),
        ("train.batch_size", "64"),
        ("train.epochs", "40"),
        ("train.eval_every", "100"),
        ("analysis.rpd_layers", "2"),
        ("analysis.rpd_bins", "50"),
    ])
}

/// The same shallow pair at larger sample count, where the nonlinear network
/// pulls away from the linear one. Adam converges in a handful of epochs;
/// plain SGD needs several times longer to leave the coincidence regime.
pub fn preset_fig2_large(activation: &str) -> FlatConfig {
    preset_flat(&[
        ("seed", "5"),
        ("out_dir", &format!("runs/fig2-large-{activation}")),
        ("data.source", "mnist"),
        ("data.dir", "data/mnist"),
        ("data.subset", "20000"),
        ("net.widths", "784,2048,10"),
        ("net.activation", activation),
        ("train.optimizer", "adam"),
        ("train.learning_rate", "0.001"),
        ("train.batch_size", "128"),
        ("train.epochs", "6"),
        ("train.eval_every", "300"),
        ("analysis.rpd_layers", "2"),
        ("analysis.rpd_bins", "50"),
    ])
}

/// Six-layer ReLU net for the pruning profile.
pub fn preset_fig3_prune() -> FlatConfig {
    preset_flat(&[
        ("seed", "5"),
        ("out_dir", "runs/fig3-prune"),
        ("data.source", "mnist"),
        ("data.dir", "data/mnist"),
        ("data.subset", "20000"),
        ("net.widths", "784,256,256,256,256,10"),
        ("net.activation", "relu"),
        ("train.optimizer", "adam"),
        ("train.learning_rate", "0.001"),
        ("train.batch_size", "256"),
        ("train.epochs", "8"),
        ("train.eval_every", "300"),
        ("analysis.rpd_layers", "2,3,4,5"),
        ("analysis.rpd_bins", "50"),
        ("analysis.phase_exclude_last", "1"),
        ("analysis.prune_at_end", "true"),
    ])
}

/// Depth comparison nets for the basin trends.
pub fn preset_fig4_depth(depth_hidden: usize) -> FlatConfig {
    let mut widths = vec![784];
    widths.extend(std::iter::repeat(256).take(depth_hidden));
    widths.push(10);
    let widths_str: Vec<String> = widths.iter().map(|w| w.to_string()).collect();
    preset_flat(&[
        ("seed", "1"),
        ("out_dir", &format!("runs/fig4-depth{}", depth_hidden + 2)),
        ("data.source", "mnist"),
        ("data.dir", "data/mnist"),
        ("data.subset", "20000"),
        ("net.widths", &widths_str.join(",")),
        ("net.activation", "relu"),
        ("train.optimizer", "adam"),
        ("train.learning_rate", "0.001"),
        ("train.batch_size", "256"),
        ("train.epochs", "6"),
        ("train.eval_every", "300"),
        ("analysis.basin_at_end", "true"),
        ("analysis.basin_space", "both"),
        ("analysis.basin_samples", "1500"),
        ("analysis.basin_trials", "10"),
        ("analysis.basin_grid_sample", "0.05:20:14"),
        ("analysis.basin_grid_weight", "0.01:10:14"),
    ])
}

/// Oversized-initialization grokking regime: small training set, large
/// initial weights, small weight decay, squared error, full-batch Adam.
pub fn preset_fig7(init_scale: u32) -> FlatConfig {
    preset_flat(&[
        ("seed", "5"),
        ("out_dir", &format!("runs/fig7-s{init_scale}")),
        ("data.source", "mnist"),
        ("data.dir", "data/mnist"),
        ("data.subset", "1000"),
        ("data.test_subset", "2000"),
        ("net.widths", "784,200,200,10"),
        ("net.activation", "relu"),
        ("train.optimizer", "adam"),
        ("train.learning_rate", "0.001"),
        ("train.batch_size", "1000"),
        ("train.epochs", "6000"),
        ("train.weight_decay", "0.0001"),
        ("train.loss", "squared_error"),
        ("train.init_scale", &init_scale.to_string()),
        ("train.eval_every", "20"),
        ("analysis.rpd_layers", "2,3"),
        ("analysis.rpd_bins", "50"),
        ("analysis.basin_every", "1"),
        ("analysis.basin_space", "sample"),
        ("analysis.basin_samples", "200"),
        ("analysis.basin_trials", "4"),
        ("analysis.basin_grid_sample", "0.001:3:12"),
        ("analysis.grokking_window", "5"),
    ])
}

/// Named presets; suite names expand to multiple variants.
pub fn preset(name: &str) -> Result<Vec<(String, FlatConfig)>, ExperimentError> {
    let one = |n: &str, f: FlatConfig| vec![(n.to_string(), f)];
    Ok(match name {
        "smoke" => one("smoke", preset_smoke()),
        "fig2-small-tanh" => one(name, preset_fig2_small("tanh")),
        "fig2-small-identity" => one(name, preset_fig2_small("identity")),
        "fig2-large-tanh" => one(name, preset_fig2_large("tanh")),
        "fig2-large-identity" => one(name, preset_fig2_large("identity")),
        "fig2" => vec![
            ("fig2-small-tanh".into(), preset_fig2_small("tanh")),
            ("fig2-small-identity".into(), preset_fig2_small("identity")),
            ("fig2-large-tanh".into(), preset_fig2_large("tanh")),
            ("fig2-large-identity".into(), preset_fig2_large("identity")),
        ],
        "fig3-prune" => one(name, preset_fig3_prune()),
        "fig4-depth3" => one(name, preset_fig4_depth(1)),
        "fig4-depth7" => one(name, preset_fig4_depth(5)),
        "fig4" => vec![
            ("fig4-depth3".into(), preset_fig4_depth(1)),
            ("fig4-depth7".into(), preset_fig4_depth(5)),
        ],
        "fig7-s8" => one(name, preset_fig7(8)),
        "fig7-s6" => one(name, preset_fig7(6)),
        "fig7" => vec![("fig7-s8".into(), preset_fig7(8)), ("fig7-s6".into(), preset_fig7(6))],
        other => return Err(ExperimentError::UnknownPreset(other.to_string())),
    })
}

pub fn preset_names() -> &'static [&'static str] {
    &[
        "smoke",
        "fig2",
        "fig2-small-tanh",
        "fig2-small-identity",
        "fig2-large-tanh",
        "fig2-large-identity",
        "fig3-prune",
        "fig4",
        "fig4-depth3",
        "fig4-depth7",
        "fig7",
        "fig7-s8",
        "fig7-s6",
    ]
}
