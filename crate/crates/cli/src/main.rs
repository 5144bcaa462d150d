//! netdyn: train fully connected networks and probe their learning dynamics
//! (rank statistics, linear substitution maps, attraction basins, phases,
//! grokking, low-dimensional projections) from declarative configs.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use netdyn_core::basin::{self, BasinScope, BasinSpace};
use netdyn_core::config::FlatConfig;
use netdyn_core::data::{self, LabeledDataset, SubsetStrategy};
use netdyn_core::experiment::{self, fmt_float, ExperimentConfig};
use netdyn_core::lmap;
use netdyn_core::net::{BnMode, Network};
use netdyn_core::phase::{self, GrokkingParams, PhaseLabel, PhaseOptions};
use netdyn_core::plot;
use netdyn_core::project;
use netdyn_core::rpd;

#[derive(Parser)]
#[command(name = "netdyn", version, about = "learning-dynamics laboratory for fully connected networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Directory holding the four IDX files under their standard names
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[arg(long)]
    train_images: Option<PathBuf>,
    #[arg(long)]
    train_labels: Option<PathBuf>,
    #[arg(long)]
    test_images: Option<PathBuf>,
    #[arg(long)]
    test_labels: Option<PathBuf>,
    /// Take a seeded subset of this many training rows (0 = all)
    #[arg(long, default_value_t = 0)]
    subset: usize,
    /// stratified | uniform
    #[arg(long, default_value = "stratified")]
    subset_strategy: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Synthetic fixture instead of IDX files: classes,dim,per_class,spread
    #[arg(long)]
    synthetic: Option<String>,
}

impl DataArgs {
    fn strategy(&self) -> Result<SubsetStrategy> {
        match self.subset_strategy.as_str() {
            "stratified" => Ok(SubsetStrategy::Stratified),
            "uniform" => Ok(SubsetStrategy::Uniform),
            other => bail!("unknown subset strategy `{other}` (stratified|uniform)"),
        }
    }

    /// Load the training-side dataset these flags describe, normalized.
    fn load_train(&self) -> Result<LabeledDataset> {
        if let Some(spec) = &self.synthetic {
            let parts: Vec<&str> = spec.split(',').collect();
            if parts.len() != 4 {
                bail!("--synthetic wants classes,dim,per_class,spread");
            }
            let classes: usize = parts[0].parse().context("synthetic classes")?;
            let dim: usize = parts[1].parse().context("synthetic dim")?;
            let per_class: usize = parts[2].parse().context("synthetic per_class")?;
            let spread: f64 = parts[3].parse().context("synthetic spread")?;
            return Ok(data::synthetic_blobs(classes, dim, per_class, spread, self.seed));
        }
        let dir = self.data_dir.clone().unwrap_or_else(|| PathBuf::from("data/mnist"));
        let images = self.train_images.clone().unwrap_or_else(|| dir.join("train-images-idx3-ubyte"));
        let labels = self.train_labels.clone().unwrap_or_else(|| dir.join("train-labels-idx1-ubyte"));
        let mut ds = data::load_idx(&images, &labels)
            .with_context(|| format!("loading {}", images.display()))?
            .normalize()?;
        if self.subset > 0 && self.subset < ds.len() {
            ds = ds.subset(self.subset, self.seed, self.strategy()?)?;
        }
        Ok(ds)
    }

    /// Load the test-side dataset, if one is specified or derivable.
    fn load_test(&self) -> Result<Option<LabeledDataset>> {
        if self.synthetic.is_some() {
            return Ok(None);
        }
        let dir = self.data_dir.clone().unwrap_or_else(|| PathBuf::from("data/mnist"));
        let images = self.test_images.clone().unwrap_or_else(|| dir.join("t10k-images-idx3-ubyte"));
        let labels = self.test_labels.clone().unwrap_or_else(|| dir.join("t10k-labels-idx1-ubyte"));
        if !images.exists() || !labels.exists() {
            return Ok(None);
        }
        Ok(Some(data::load_idx(&images, &labels)?.normalize()?))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a network from a config file and write metrics/checkpoints
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override the config's out_dir
        #[arg(long)]
        out: Option<PathBuf>,
        /// key=value config overrides
        #[arg(long = "set")]
        sets: Vec<String>,
    },
    /// Run a full experiment pipeline from a preset or config file
    Run {
        #[arg(long, conflicts_with = "config")]
        preset: Option<String>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long = "set")]
        sets: Vec<String>,
        /// List available presets and exit
        #[arg(long, default_value_t = false)]
        list: bool,
    },
    /// Rank probability distribution of a checkpoint's hidden layer
    Rpd {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        layer: usize,
        #[arg(long)]
        class: Option<usize>,
        #[arg(long, default_value_t = rpd::DEFAULT_BINS)]
        bins: usize,
        #[arg(long, default_value = "eval")]
        bn_mode: String,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Accuracy after substituting layers with their composed linear map
    Prune {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Start layer; omit to sweep every layer
        #[arg(long)]
        from_layer: Option<usize>,
        #[arg(long, default_value = "eval")]
        bn_mode: String,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Accuracy-vs-noise basin curves in sample or weight space
    Basin {
        #[arg(long)]
        checkpoint: PathBuf,
        /// sample | weight
        #[arg(long)]
        space: String,
        #[arg(long)]
        class: Option<usize>,
        #[arg(long)]
        sample: Option<usize>,
        /// lo:hi:count log-spaced amplitude grid
        #[arg(long, default_value = "0.001:10:20")]
        grid: String,
        #[arg(long, default_value_t = basin::DEFAULT_TRIALS)]
        trials: usize,
        #[arg(long, default_value = "eval")]
        bn_mode: String,
        /// Refine the 50% crossing by bisection
        #[arg(long, default_value_t = false)]
        refine: bool,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Classify layer-wise phases and detect transitions/grokking from traces
    Phase {
        /// metrics.csv from a run
        #[arg(long)]
        metrics: PathBuf,
        /// rpd_grad_trace.csv from a run
        #[arg(long)]
        rpd: PathBuf,
        #[arg(long, default_value_t = 0.15)]
        tau_flat: f64,
        #[arg(long, default_value_t = 0.6)]
        tau_rho: f64,
        #[arg(long, default_value_t = 2)]
        exclude_last: usize,
        #[arg(long, default_value_t = 3)]
        debounce: usize,
        #[arg(long, default_value_t = 0.1)]
        chance: f64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Low-dimensional projections of a checkpoint
    Project {
        #[arg(long)]
        checkpoint: PathBuf,
        /// bottleneck2d | pca3d
        #[arg(long, default_value = "bottleneck2d")]
        mode: String,
        #[arg(long, default_value = "eval")]
        bn_mode: String,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Render SVG plots for the CSV files in a run directory
    Plot {
        #[arg(long)]
        dir: PathBuf,
        /// Plot a single CSV file instead of a whole directory
        #[arg(long)]
        file: Option<PathBuf>,
    },
}

fn parse_bn_mode(s: &str) -> Result<BnMode> {
    match s {
        "eval" => Ok(BnMode::Eval),
        "batch" => Ok(BnMode::BatchStats),
        other => bail!("unknown bn mode `{other}` (eval|batch)"),
    }
}

fn parse_grid(spec: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = spec.split(':').collect();
    if parts.len() != 3 {
        bail!("--grid wants lo:hi:count");
    }
    let lo: f64 = parts[0].parse().context("grid lo")?;
    let hi: f64 = parts[1].parse().context("grid hi")?;
    let n: usize = parts[2].parse().context("grid count")?;
    Ok(basin::log_grid(lo, hi, n))
}

fn load_checkpoint(path: &Path) -> Result<Network> {
    let (net, _, _) = Network::load_checkpoint(path)
        .with_context(|| format!("loading checkpoint {}", path.display()))?;
    Ok(net)
}

fn write_out(dir: &Path, name: &str, content: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(name), content)?;
    println!("wrote {}", dir.join(name).display());
    Ok(())
}

fn run_experiment_config(mut flat: FlatConfig, out: Option<PathBuf>, sets: &[String]) -> Result<()> {
    flat.apply_overrides(sets)?;
    let mut cfg = ExperimentConfig::from_flat(flat)?;
    if let Some(dir) = out {
        cfg = cfg.with_out_dir(&dir);
    }
    let art = experiment::run(&cfg)?;
    let last = art.trace.snapshots.last().expect("at least one snapshot");
    println!(
        "done: {} steps, train_acc {:.4}, test_acc {:.4}, artifacts in {}",
        last.step,
        last.train_acc,
        last.test_acc,
        art.out_dir.display()
    );
    Ok(())
}

fn main() -> Result<()> {
    netdyn_core::parallel::init_threads_from_env();
    let cli = Cli::parse();
    match cli.command {
        Command::Train { config, out, sets } => {
            let text = fs::read_to_string(&config)
                .with_context(|| format!("reading {}", config.display()))?;
            run_experiment_config(FlatConfig::parse(&text)?, out, &sets)?;
        }
        Command::Run { preset, config, out, sets, list } => {
            if list {
                for name in experiment::preset_names() {
                    println!("{name}");
                }
                return Ok(());
            }
            let variants: Vec<(String, FlatConfig)> = match (&preset, &config) {
                (Some(name), None) => experiment::preset(name)?,
                (None, Some(path)) => {
                    let text = fs::read_to_string(path)
                        .with_context(|| format!("reading {}", path.display()))?;
                    vec![("config".to_string(), FlatConfig::parse(&text)?)]
                }
                _ => bail!("run wants exactly one of --preset or --config"),
            };
            let multi = variants.len() > 1;
            for (variant, flat) in variants {
                println!("== {variant}");
                let out_dir = match (&out, multi) {
                    (Some(base), true) => Some(base.join(&variant)),
                    (Some(base), false) => Some(base.clone()),
                    (None, _) => None,
                };
                run_experiment_config(flat, out_dir, &sets)?;
            }
        }
        Command::Rpd { checkpoint, layer, class, bins, bn_mode, out, data } => {
            let net = load_checkpoint(&checkpoint)?;
            let ds = data.load_train()?;
            let mode = parse_bn_mode(&bn_mode)?;
            let hist = rpd::layer_rpd(&net, &ds, layer, class, bins, mode)?;
            let grad = rpd::rpd_gradient(&hist);
            let mut csv = String::from("layer,class,bin_center,density\n");
            let class_label = class.map_or("all".to_string(), |k| k.to_string());
            for (c, d) in hist.bin_centers().iter().zip(&hist.density) {
                csv.push_str(&format!("{layer},{class_label},{},{}\n", fmt_float(*c), fmt_float(*d)));
            }
            write_out(&out, "rpd.csv", &csv)?;
            let mut gcsv = String::from("layer,steepness\n");
            gcsv.push_str(&format!("{layer},{}\n", fmt_float(grad.steepness())));
            write_out(&out, "rpd_grad.csv", &gcsv)?;
        }
        Command::Prune { checkpoint, from_layer, bn_mode, out, data } => {
            let net = load_checkpoint(&checkpoint)?;
            let ds = data.load_train()?;
            let mode = parse_bn_mode(&bn_mode)?;
            let layers: Vec<usize> = match from_layer {
                Some(l) => vec![l],
                None => (2..=net.num_layers()).collect(),
            };
            let mut csv = String::from("from_layer,accuracy\n");
            for l in layers {
                let acc = lmap::prune_accuracy(&net, l, &ds, mode)?;
                csv.push_str(&format!("{l},{}\n", fmt_float(acc)));
            }
            write_out(&out, "prune.csv", &csv)?;
        }
        Command::Basin { checkpoint, space, class, sample, grid, trials, bn_mode, refine, out, data } => {
            let net = load_checkpoint(&checkpoint)?;
            let ds = data.load_train()?;
            let mode = parse_bn_mode(&bn_mode)?;
            let space = match space.as_str() {
                "sample" => BasinSpace::Sample,
                "weight" => BasinSpace::Weight,
                other => bail!("unknown space `{other}` (sample|weight)"),
            };
            let scope = match (class, sample) {
                (Some(k), None) => BasinScope::Class(k),
                (None, Some(i)) => BasinScope::Sample(i),
                (None, None) => BasinScope::All,
                _ => bail!("--class and --sample are mutually exclusive"),
            };
            let grid = parse_grid(&grid)?;
            let (curve, mut size) =
                basin::measure_basin(&net, &ds, space, scope, &grid, trials, data.seed, mode)?;
            if refine {
                if let Some(bracket) = size.bracket {
                    let refined = basin::refine_basin_size(
                        &net,
                        &ds,
                        space,
                        scope,
                        bracket,
                        trials,
                        data.seed,
                        mode,
                        basin::DEFAULT_THRESHOLD,
                        1e-3,
                    )?;
                    size.size = Some(refined);
                }
            }
            let mut csv = String::from("space,scope,amplitude,accuracy,trials\n");
            for (a, acc) in curve.amplitudes.iter().zip(&curve.accuracies) {
                csv.push_str(&format!(
                    "{},{},{},{},{trials}\n",
                    space.name(),
                    scope.label(),
                    fmt_float(*a),
                    fmt_float(*acc)
                ));
            }
            write_out(&out, "basin.csv", &csv)?;
            let flag = match size.flag {
                basin::BasinFlag::Crossed => "crossed",
                basin::BasinFlag::NotReached => "not_reached",
                basin::BasinFlag::BelowAtZero => "below_at_zero",
            };
            let mut scsv = String::from("space,scope,size,flag\n");
            scsv.push_str(&format!(
                "{},{},{},{flag}\n",
                space.name(),
                scope.label(),
                fmt_float(size.size.unwrap_or(f64::NAN))
            ));
            write_out(&out, "basin_size.csv", &scsv)?;
        }
        Command::Phase { metrics, rpd, tau_flat, tau_rho, exclude_last, debounce, chance, out } => {
            // rpd_grad_trace.csv: step,layer,steepness (long format).
            let text = fs::read_to_string(&rpd).with_context(|| format!("reading {}", rpd.display()))?;
            let mut per_step: Vec<(usize, Vec<(usize, f64)>)> = Vec::new();
            for line in text.lines().skip(1) {
                let parts: Vec<&str> = line.split(',').collect();
                if parts.len() != 3 {
                    continue;
                }
                let step: usize = parts[0].parse().context("trace step")?;
                let layer: usize = parts[1].parse().context("trace layer")?;
                let steep: f64 = parts[2].parse().context("trace steepness")?;
                match per_step.last_mut() {
                    Some((s, row)) if *s == step => row.push((layer, steep)),
                    _ => per_step.push((step, vec![(layer, steep)])),
                }
            }
            let opts = PhaseOptions { tau_flat, tau_rho, exclude_last };
            let mut csv = String::from("step,label,rho,spread\n");
            let mut labels: Vec<(usize, PhaseLabel)> = Vec::new();
            for (step, mut row) in per_step {
                row.sort_by_key(|&(l, _)| l);
                let profile: Vec<f64> = row.iter().map(|&(_, s)| s).collect();
                let reading = phase::classify_phase_profile(&profile, &opts)
                    .with_context(|| format!("classifying step {step}"))?;
                csv.push_str(&format!(
                    "{step},{},{},{}\n",
                    reading.label.name(),
                    fmt_float(reading.rho),
                    fmt_float(reading.spread)
                ));
                labels.push((step, reading.label));
            }
            write_out(&out, "phase.csv", &csv)?;
            let transitions = phase::detect_transition(&labels, debounce);
            let mut tcsv = String::from("step,from,to\n");
            for (step, from, to) in transitions {
                tcsv.push_str(&format!("{step},{},{}\n", from.name(), to.name()));
            }
            write_out(&out, "transitions.csv", &tcsv)?;
            // Grokking report from metrics.csv.
            let mtext =
                fs::read_to_string(&metrics).with_context(|| format!("reading {}", metrics.display()))?;
            let mut train_acc = Vec::new();
            let mut test_acc = Vec::new();
            for line in mtext.lines().skip(1) {
                let parts: Vec<&str> = line.split(',').collect();
                if parts.len() < 3 {
                    continue;
                }
                let step: usize = parts[0].parse().context("metrics step")?;
                let tr: f64 = parts[1].parse().context("metrics train_acc")?;
                let te: f64 = parts[2].parse().context("metrics test_acc")?;
                train_acc.push((step, tr));
                test_acc.push((step, te));
            }
            let report = phase::detect_grokking(
                &train_acc,
                &test_acc,
                &GrokkingParams { chance, ..GrokkingParams::default() },
            );
            let mut gcsv = String::from("detected,onset_step,plateau_start,plateau_end,jump\n");
            gcsv.push_str(&format!(
                "{},{},{},{},{}\n",
                report.detected,
                report.onset_step.map_or("nan".to_string(), |s| s.to_string()),
                report.plateau.map_or("nan".to_string(), |(s, _)| s.to_string()),
                report.plateau.map_or("nan".to_string(), |(_, e)| e.to_string()),
                fmt_float(report.jump)
            ));
            write_out(&out, "grokking.csv", &gcsv)?;
        }
        Command::Project { checkpoint, mode, bn_mode, out, data } => {
            let net = load_checkpoint(&checkpoint)?;
            let ds = data.load_train()?;
            let bn = parse_bn_mode(&bn_mode)?;
            match mode.as_str() {
                "bottleneck2d" => {
                    let proj = project::bottleneck_2d(&net, &ds, bn)?;
                    let mut csv = String::from("sample_id,label,c1,c2\n");
                    for i in 0..proj.coords.rows() {
                        csv.push_str(&format!(
                            "{i},{},{},{}\n",
                            proj.labels[i],
                            fmt_float(proj.coords.get(i, 0)),
                            fmt_float(proj.coords.get(i, 1))
                        ));
                    }
                    write_out(&out, "proj.csv", &csv)?;
                    if let Some(test) = data.load_test()? {
                        let tproj = project::bottleneck_2d(&net, &test, bn)?;
                        let mut tcsv = String::from("sample_id,label,c1,c2\n");
                        for i in 0..tproj.coords.rows() {
                            tcsv.push_str(&format!(
                                "{i},{},{},{}\n",
                                tproj.labels[i],
                                fmt_float(tproj.coords.get(i, 0)),
                                fmt_float(tproj.coords.get(i, 1))
                            ));
                        }
                        write_out(&out, "proj_test.csv", &tcsv)?;
                        let overlap = project::overlap_statistic(
                            &proj.coords,
                            &tproj.coords,
                            project::OVERLAP_K,
                            project::OVERLAP_Q,
                        );
                        let mut ocsv = String::from("k,q,overlap\n");
                        ocsv.push_str(&format!(
                            "{},{},{}\n",
                            project::OVERLAP_K,
                            project::OVERLAP_Q,
                            fmt_float(overlap)
                        ));
                        write_out(&out, "overlap.csv", &ocsv)?;
                    }
                }
                "pca3d" => {
                    let coords = project::pca_3d(ds.samples())?;
                    let mut csv = String::from("sample_id,label,c1,c2,c3\n");
                    for i in 0..coords.rows() {
                        csv.push_str(&format!(
                            "{i},{},{},{},{}\n",
                            ds.labels()[i],
                            fmt_float(coords.get(i, 0)),
                            fmt_float(coords.get(i, 1)),
                            fmt_float(coords.get(i, 2))
                        ));
                    }
                    write_out(&out, "proj.csv", &csv)?;
                }
                other => bail!("unknown projection mode `{other}` (bottleneck2d|pca3d)"),
            }
        }
        Command::Plot { dir, file } => {
            if let Some(path) = file {
                let svg = plot::plot_file(&path)?;
                let out = path.with_extension("svg");
                fs::write(&out, svg)?;
                println!("wrote {}", out.display());
            } else {
                for path in plot::emit_plots(&dir)? {
                    println!("wrote {}", path.display());
                }
            }
        }
    }
    Ok(())
}
