use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use thiserror::Error;

use boxdet::data::{
    generate_synthetic_dataset, image::load_png, AnnotatedImage, ClassCount, DatasetManifest, Dataset, Palette,
    SyntheticDatasetSpec, SyntheticSceneSpec,
};
use boxdet::eval::{
    box_plot, detect_all, evaluate, probability_gap_analysis, true_positives, EvalOptions, Summary, EVAL_FLOOR,
};
use boxdet::network::{build_network, parse_anchor_list, NetworkConfig, RegionHeadSpec};
use boxdet::train::{checkpoint_name, select_best_checkpoint, train, CheckpointRecord, StopReason};
use boxdet::transfer::{apply_surgery, estimate_anchors, load_weights, save_weights, SurgeryPlan, WeightsFile};
use boxdet::{exec_for_threads, Detection, Exec};

use crate::run_config::RunConfig;

/// Widths of the compact network written by `anchors --network-out`.
const DEFAULT_WIDTHS: &str = "8,16,32,32,64,64";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Lib(#[from] boxdet::Error),
}

type Result<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// 2 usage or configuration, 3 data, format, surgery or I/O, 4 divergence.
pub fn exit_code(e: &CliError) -> u8 {
    use boxdet::Error as E;
    match e {
        CliError::Usage(_) | CliError::Lib(E::Config(_)) => 2,
        CliError::Lib(E::Diverged(_)) => 4,
        CliError::Lib(_) => 3,
    }
}

#[derive(Debug, Parser)]
#[command(name = "boxdet", version, about = "Train and evaluate a grid/anchor box detector")]
pub struct Cli {
    /// Worker threads; 1 is fully reproducible.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic dataset and print per-class image counts.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        classes: usize,
        #[arg(long)]
        train_per_class: usize,
        #[arg(long, default_value_t = 5)]
        val_per_class: usize,
        #[arg(long, default_value_t = 1)]
        distractors: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Extra distractor-only training images with empty labels.
        #[arg(long, default_value_t = 0)]
        hard_negatives: usize,
        #[arg(long, default_value_t = 128)]
        size: usize,
        #[arg(long, default_value_t = 1)]
        max_boxes: usize,
        /// Plain single-class boxes instead of patterned brands.
        #[arg(long)]
        generic: bool,
    },
    /// Cluster the manifest's box shapes into anchors (grid-cell units).
    Anchors {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Network input size; the grid is input / 32.
        #[arg(long, default_value_t = 128)]
        input: usize,
        /// Also write a compact network description using these anchors.
        #[arg(long)]
        network_out: Option<PathBuf>,
        #[arg(long, default_value = DEFAULT_WIDTHS)]
        widths: String,
    },
    /// Adapt pretrained weights to a new class count.
    Surgery {
        #[arg(long)]
        weights: PathBuf,
        /// Description of the source network.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        classes: usize,
        #[arg(long)]
        anchors: usize,
        /// Explicit target anchors `w,h,w,h,...`.
        #[arg(long)]
        anchor_values: Option<String>,
        /// Estimate target anchors from this manifest.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train; exits 0 on the loss threshold, 1 when the budget runs out.
    Train {
        /// Run configuration file.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        network: Option<PathBuf>,
        /// Initial weights.
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        max_iterations: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// `START:DURATION:FACTOR`
        #[arg(long)]
        lr_spike: Option<String>,
        /// `section.key=value`, repeatable.
        #[arg(long = "set")]
        overrides: Vec<String>,
    },
    /// Evaluate weights on a manifest; prints `class,ap`.
    Eval {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Directory for CSV and SVG reports.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        network: Option<PathBuf>,
    },
    /// Evaluate every checkpoint and pick the one before the first AP drop.
    Select {
        #[arg(long)]
        checkpoints: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        network: Option<PathBuf>,
    },
    /// Print `class,probability,cx,cy,w,h` rows for one image.
    Detect {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 0.25)]
        prob_threshold: f32,
        #[arg(long)]
        network: Option<PathBuf>,
    },
    /// Compare true-positive probabilities on known classes with detections
    /// on unknown content and recommend a rejection threshold.
    Gap {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        known: PathBuf,
        /// Images of unknown content; every detection on them counts.
        #[arg(long)]
        unknown: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        network: Option<PathBuf>,
    },
}

pub fn run(cli: Cli) -> Result<u8> {
    let exec = exec_for_threads(cli.threads);
    match cli.command {
        Command::Synth {
            out,
            classes,
            train_per_class,
            val_per_class,
            distractors,
            seed,
            hard_negatives,
            size,
            max_boxes,
            generic,
        } => {
            if classes == 0 {
                return Err(usage("--classes must be at least 1"));
            }
            if size == 0 || max_boxes == 0 {
                return Err(usage("--size and --max-boxes must be positive"));
            }
            let counts = if generic {
                vec![ClassCount {
                    name: "box".into(),
                    train: classes * train_per_class,
                    validation: classes * val_per_class,
                }]
            } else {
                (0..classes)
                    .map(|c| ClassCount {
                        name: format!("brand{c:02}"),
                        train: train_per_class,
                        validation: val_per_class,
                    })
                    .collect()
            };
            let mut template = SyntheticSceneSpec::new(size, size, seed);
            template.palette = if generic { Palette::Generic } else { Palette::Brands };
            let spec = SyntheticDatasetSpec {
                classes: counts.clone(),
                template,
                max_boxes_per_image: max_boxes,
                distractors_per_image: distractors,
                hard_negatives,
                seed,
            };
            let ds = generate_synthetic_dataset(&spec, &out, exec)?;
            println!("class,train,validation");
            for c in &counts {
                println!("{},{},{}", c.name, c.train, c.validation);
            }
            if hard_negatives > 0 {
                println!("hard_negative,{hard_negatives},0");
            }
            eprintln!(
                "{} training and {} validation images in {}",
                ds.train.images.len(),
                ds.validation.images.len(),
                out.display()
            );
            Ok(0)
        }
        Command::Anchors {
            manifest,
            k,
            seed,
            input,
            network_out,
            widths,
        } => {
            if k == 0 {
                return Err(usage("--k must be at least 1"));
            }
            let m = DatasetManifest::load(&manifest)?;
            let shapes = Dataset::new(m.load_samples(exec)?).box_shapes();
            let widths = parse_widths(&widths)?;
            let probe = NetworkConfig::compact(input, widths, RegionHeadSpec::new(1, vec![(1.0, 1.0)]));
            let (grid, _) = probe.grid_for(input, input)?;
            let anchors = estimate_anchors(&shapes, k, grid as f32, seed)?;
            println!("w,h");
            for (w, h) in &anchors {
                println!("{w},{h}");
            }
            if let Some(path) = network_out {
                let classes = m.class_names.len().max(1);
                NetworkConfig::compact(input, widths, RegionHeadSpec::new(classes, anchors)).save(&path)?;
                eprintln!("network description written to {}", path.display());
            }
            Ok(0)
        }
        Command::Surgery {
            weights,
            config,
            classes,
            anchors,
            anchor_values,
            manifest,
            out,
            seed,
        } => {
            if classes == 0 || anchors == 0 {
                return Err(usage("--classes and --anchors must be at least 1"));
            }
            let source_cfg = NetworkConfig::load(&config)?;
            let source = WeightsFile::load(&weights, &source_cfg)?;
            let (grid, _) = source_cfg.grid_for(source_cfg.input_width, source_cfg.input_height)?;
            let target_anchors = match (anchor_values, manifest) {
                (Some(text), _) => parse_anchor_list(&text)?,
                (None, Some(m)) => {
                    let shapes = Dataset::new(DatasetManifest::load(&m)?.load_samples(exec)?).box_shapes();
                    estimate_anchors(&shapes, anchors, grid as f32, seed)?
                }
                (None, None) if source_cfg.head.num_anchors() == anchors => source_cfg.head.anchors.clone(),
                (None, None) => {
                    return Err(usage(
                        "changing the anchor count needs --anchor-values or --manifest",
                    ))
                }
            };
            if target_anchors.len() != anchors {
                return Err(usage(format!(
                    "--anchors {anchors} but {} anchor shapes were given",
                    target_anchors.len()
                )));
            }
            let target_cfg = source_cfg.with_head(RegionHeadSpec::new(classes, target_anchors));
            let plan = SurgeryPlan::final_layer(source_cfg.head.num_classes, &target_cfg);
            let network = apply_surgery(&source, &target_cfg, &plan, seed)?;
            save_weights(&network, &out)?;
            target_cfg.save(out.with_extension("cfg"))?;
            eprintln!(
                "final filters {} → {}",
                source_cfg.head.required_filters(),
                target_cfg.head.required_filters()
            );
            Ok(0)
        }
        Command::Train {
            config,
            manifest,
            out,
            network,
            weights,
            max_iterations,
            seed,
            lr_spike,
            overrides,
        } => {
            let mut rc = match &config {
                Some(p) => RunConfig::load(p)?,
                None => RunConfig::default(),
            };
            for o in &overrides {
                rc.set_dotted(o)?;
            }
            if let Some(s) = seed {
                rc.init_seed = s;
                rc.training.seed = s;
                rc.training.augmentation.seed = s;
            }
            if let Some(n) = max_iterations {
                rc.training.max_iterations = n;
            }
            if let Some(spike) = lr_spike {
                rc.set_dotted(&format!("train.lr_spike={spike}"))?;
            }
            rc.manifest = manifest.or(rc.manifest);
            rc.out = out.or(rc.out);
            rc.description = network.or(rc.description);
            rc.weights = weights.or(rc.weights);
            if rc.description.is_none() {
                rc.description = rc.weights.as_deref().and_then(|w| resolve_network(None, w).ok());
            }
            let manifest = rc.manifest.clone().ok_or_else(|| usage("no manifest (flag or [paths] manifest)"))?;
            let out = rc.out.clone().ok_or_else(|| usage("no output directory (flag or [paths] out)"))?;
            let description = rc
                .description
                .clone()
                .ok_or_else(|| usage("no network description (flag or [network] description)"))?;
            rc.training.validate()?;
            std::fs::create_dir_all(&out).map_err(|e| boxdet::Error::io(&out, e))?;
            for p in [&mut rc.manifest, &mut rc.out, &mut rc.description, &mut rc.weights]
                .into_iter()
                .flatten()
            {
                *p = std::path::absolute(&*p).map_err(|e| boxdet::Error::io(&*p, e))?;
            }
            let net_cfg = NetworkConfig::load(&description)?;
            write_file(&out.join("run.log"), &run_log(&rc))?;
            net_cfg.save(out.join("network.cfg"))?;

            let mut net = match &rc.weights {
                Some(w) => load_weights(w, &net_cfg)?,
                None => build_network(&net_cfg, rc.init_seed)?,
            };
            net.set_exec(exec);
            let dataset = Dataset::new(DatasetManifest::load(&manifest)?.load_samples(exec)?);
            let outcome = train(&mut net, &dataset, &rc.training, Some(&out))?;
            let stop = match outcome.stop {
                StopReason::LossThreshold => "loss_threshold",
                StopReason::IterationBudget => "iteration_budget",
            };
            let state = format!("{}stop={stop}\n", outcome.state.to_text());
            write_file(&out.join("state.txt"), &state)?;
            eprintln!(
                "stopped ({stop}) after {} iterations, average loss {:.4}, {} checkpoints",
                outcome.state.iteration,
                outcome.state.avg_loss,
                outcome.checkpoints.len()
            );
            Ok(match outcome.stop {
                StopReason::LossThreshold => 0,
                StopReason::IterationBudget if rc.training.max_iterations == 0 => 0,
                StopReason::IterationBudget => 1,
            })
        }
        Command::Eval {
            weights,
            manifest,
            report,
            network,
        } => {
            let net = load_network(network, &weights, exec)?;
            let m = DatasetManifest::load(&manifest)?;
            let samples = m.load_samples(exec)?;
            let r = evaluate(&net, &samples, &m.class_names, &EvalOptions::default())?;
            if let Some(dir) = report {
                r.write(&dir)?;
            }
            print!("{}", r.ap_csv());
            Ok(0)
        }
        Command::Select {
            checkpoints,
            manifest,
            network,
        } => {
            let cfg_path = network.unwrap_or_else(|| checkpoints.join("network.cfg"));
            let cfg = NetworkConfig::load(&cfg_path)?;
            let m = DatasetManifest::load(&manifest)?;
            let samples = m.load_samples(exec)?;
            let mut records = list_checkpoints(&checkpoints)?;
            if records.is_empty() {
                return Err(usage(format!("no checkpoints in {}", checkpoints.display())));
            }
            for rec in &mut records {
                let mut net = load_weights(&rec.path, &cfg)?;
                net.set_exec(exec);
                let r = evaluate(&net, &samples, &m.class_names, &EvalOptions::default())?;
                rec.validation_ap = Some(r.combined_ap().unwrap_or(0.0));
                eprintln!("iteration {}: AP {:.4}", rec.iteration, rec.validation_ap.unwrap_or(0.0));
            }
            let best = select_best_checkpoint(&records)?.iteration;
            println!("iteration,path,ap,selected");
            for rec in &records {
                println!(
                    "{},{},{},{}",
                    rec.iteration,
                    rec.path.display(),
                    rec.validation_ap.unwrap_or(0.0),
                    u8::from(rec.iteration == best)
                );
            }
            Ok(0)
        }
        Command::Detect {
            weights,
            image,
            prob_threshold,
            network,
        } => {
            let net = load_network(network, &weights, exec)?;
            let sample = AnnotatedImage {
                pixels: load_png(&image)?,
                boxes: Vec::new(),
                is_hard_negative: false,
            };
            let dets = detect_all(&net, std::slice::from_ref(&sample), prob_threshold)?;
            for d in dets.into_iter().flatten() {
                println!("{}", detection_row(&d));
            }
            Ok(0)
        }
        Command::Gap {
            weights,
            known,
            unknown,
            out,
            network,
        } => {
            let net = load_network(network, &weights, exec)?;
            let km = DatasetManifest::load(&known)?;
            let known_samples = km.load_samples(exec)?;
            let unknown_samples = DatasetManifest::load(&unknown)?.load_samples(exec)?;
            let truths: Vec<&[_]> = known_samples.iter().map(|s| s.boxes.as_slice()).collect();
            let known_tps = true_positives(&detect_all(&net, &known_samples, EVAL_FLOOR)?, &truths, 0.5);
            let unknown_dets: Vec<Detection> = detect_all(&net, &unknown_samples, EVAL_FLOOR)?
                .into_iter()
                .flatten()
                .collect();
            let gap = probability_gap_analysis(&known_tps, &unknown_dets)?;
            let name = |c: usize| km.class_names.get(c).cloned().unwrap_or_else(|| format!("class{c}"));
            let mut rows: Vec<(String, Summary)> = gap.per_class.iter().map(|(&c, s)| (name(c), *s)).collect();
            if let Some(u) = gap.unknown {
                rows.push(("unknown".into(), u));
            }
            let mut csv = String::from("class,min,q1,median,q3,max\n");
            for (n, s) in &rows {
                csv.push_str(&format!("{n},{},{},{},{},{}\n", s.min, s.q1, s.median, s.q3, s.max));
            }
            print!("{csv}");
            let verdict = match gap.threshold {
                Some(t) => format!("threshold={t}\n"),
                None => "threshold=none\n".into(),
            };
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir).map_err(|e| boxdet::Error::io(&dir, e))?;
                write_file(&dir.join("gap.csv"), &csv)?;
                write_file(&dir.join("threshold.txt"), &verdict)?;
                write_file(&dir.join("gap.svg"), &box_plot(&rows, gap.threshold))?;
            }
            match gap.threshold {
                Some(t) => eprintln!(
                    "known min {:.4}, unknown max {:.4}, recommended threshold {t:.4}",
                    gap.known_min, gap.unknown_max
                ),
                None => eprintln!(
                    "overlap: known min {:.4} is not above unknown max {:.4}; no threshold",
                    gap.known_min, gap.unknown_max
                ),
            }
            Ok(0)
        }
    }
}

pub fn detection_row(d: &Detection) -> String {
    format!("{},{},{},{},{},{}", d.class_id, d.probability, d.rect.cx, d.rect.cy, d.rect.w, d.rect.h)
}

fn parse_widths(text: &str) -> Result<[usize; 6]> {
    let v: Vec<usize> = text
        .split(',')
        .map(|s| s.trim().parse().map_err(|_| usage(format!("bad width `{s}`"))))
        .collect::<Result<_>>()?;
    v.try_into().map_err(|_| usage("--widths needs six values"))
}

/// `--network`, else `<weights>.cfg`, else `network.cfg` beside the weights.
fn resolve_network(flag: Option<PathBuf>, weights: &Path) -> Result<PathBuf> {
    if let Some(p) = flag {
        return Ok(p);
    }
    let sibling = weights.with_extension("cfg");
    if sibling.is_file() {
        return Ok(sibling);
    }
    let shared = weights.parent().unwrap_or(Path::new(".")).join("network.cfg");
    if shared.is_file() {
        return Ok(shared);
    }
    Err(usage(format!(
        "no network description for {}; pass --network",
        weights.display()
    )))
}

fn load_network(flag: Option<PathBuf>, weights: &Path, exec: Exec) -> Result<boxdet::network::Network> {
    let cfg = NetworkConfig::load(resolve_network(flag, weights)?)?;
    let mut net = load_weights(weights, &cfg)?;
    net.set_exec(exec);
    Ok(net)
}

/// `model_<iteration>.ylw` files in iteration order.
fn list_checkpoints(dir: &Path) -> Result<Vec<CheckpointRecord>> {
    let entries = std::fs::read_dir(dir).map_err(|e| boxdet::Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| boxdet::Error::io(dir, e))?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        let iteration = name
            .strip_prefix("model_")
            .and_then(|r| r.strip_suffix(".ylw"))
            .and_then(|i| i.parse::<usize>().ok());
        if let Some(iteration) = iteration {
            if checkpoint_name(iteration) == name {
                out.push(CheckpointRecord {
                    iteration,
                    path,
                    validation_ap: None,
                });
            }
        }
    }
    out.sort_by_key(|c| c.iteration);
    Ok(out)
}

fn run_log(rc: &RunConfig) -> String {
    let args: Vec<String> = std::env::args().collect();
    format!(
        "# boxdet {}\n# command: {}\n{}",
        env!("CARGO_PKG_VERSION"),
        args.join(" "),
        rc.to_text()
    )
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| boxdet::Error::io(path, e).into())
}
