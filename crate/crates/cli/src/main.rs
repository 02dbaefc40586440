//! `shapeseg` command-line pipeline.
//!
//! Exit codes: 0 on success, 2 for usage and validation errors (including
//! missing inputs), 3 for runtime and numeric failures. Diagnostics go to
//! stderr; stdout only carries output paths or JSON.

mod config;
mod data;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use config::{Ablation, RunConfig};
use shapeseg::mesh::{export_mesh, marching_cubes, mask_surface, MeshFormat};
use shapeseg::metrics::{
    aggregate, evaluate_pair, extract_surface_voxels, format_table, records_to_csv, vertex_distance_channel,
    AggregateReport, MetricsRecord,
};
use shapeseg::model::{load_model, save_model, train};
use shapeseg::phantom::{gen_dataset, mask_path, PhantomSpec, ShapeFamily};
use shapeseg::sdf::{sdf_volume, SdfOptions};
use shapeseg::volgrid::{load_volume, save_volume};
use shapeseg::ElementKind;

#[derive(Parser)]
#[command(name = "shapeseg", version, about = "Shape-aware slice segmentation and surface reconstruction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with train/val/test splits.
    Phantom(PhantomArgs),
    /// Per-slice signed distance transform of a mask volume.
    Sdf(SdfArgs),
    /// Train the two-head network on a phantom dataset.
    Train(TrainArgs),
    /// Run a trained model on image volumes.
    Predict(PredictArgs),
    /// Extract a surface mesh from a mask or SDF volume.
    Reconstruct(ReconstructArgs),
    /// Compare predicted masks against ground truth.
    Evaluate(EvaluateArgs),
    /// Aggregate metric files into a mean and standard deviation table.
    Report(ReportArgs),
}

#[derive(Args)]
struct PhantomArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    count: usize,
    /// In-plane size; slices default to the same count.
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long)]
    slices: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = FamilyArg::Mixed)]
    family: FamilyArg,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    #[arg(long, default_value_t = 1.0)]
    contrast: f64,
    /// Train, val and test fractions.
    #[arg(long, value_delimiter = ',', default_values_t = [0.6, 0.2, 0.2])]
    split: Vec<f64>,
    /// Sizes must be a multiple of this.
    #[arg(long, default_value_t = 4)]
    size_multiple: usize,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum FamilyArg {
    Sphere,
    Ellipsoid,
    TwoLobe,
    Mixed,
}

impl From<FamilyArg> for ShapeFamily {
    fn from(f: FamilyArg) -> Self {
        match f {
            FamilyArg::Sphere => ShapeFamily::Sphere,
            FamilyArg::Ellipsoid => ShapeFamily::Ellipsoid,
            FamilyArg::TwoLobe => ShapeFamily::TwoLobe,
            FamilyArg::Mixed => ShapeFamily::Mixed,
        }
    }
}

#[derive(Args)]
struct SdfArgs {
    #[arg(long)]
    mask: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Keep raw pixel distances instead of normalizing each slice.
    #[arg(long)]
    raw: bool,
    /// Measure to the nearest opposite pixel center rather than the pixel boundary.
    #[arg(long)]
    no_offset: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory holding `manifest.json`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Ablation::D)]
    ablation: Ablation,
    /// Training report path; defaults to `<out>.report.json`.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, default_value = "train")]
    train_split: String,
    #[arg(long, default_value = "val")]
    val_split: String,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    decay: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Seeds both initialization and shuffling.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    base_channels: Option<usize>,
    #[arg(long)]
    stop_at_val_dice: Option<f64>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    /// Single image volume.
    #[arg(long, conflicts_with = "data", requires_all = ["out_mask", "out_sdf"])]
    image: Option<PathBuf>,
    #[arg(long)]
    out_mask: Option<PathBuf>,
    #[arg(long)]
    out_sdf: Option<PathBuf>,
    /// Dataset directory; predicts every case of `--split` into `--out`.
    #[arg(long, requires = "out")]
    data: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Source {
    Mask,
    Sdf,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Obj,
    Stl,
    Ply,
}

#[derive(Args)]
struct ReconstructArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Defaults to the volume's element kind.
    #[arg(long, value_enum)]
    from: Option<Source>,
    #[arg(long)]
    iso: Option<f64>,
    /// Defaults to the output file extension.
    #[arg(long, value_enum)]
    format: Option<FormatArg>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Single predicted mask.
    #[arg(long, requires = "truth", conflicts_with_all = ["pred_dir", "data"])]
    pred: Option<PathBuf>,
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Directory of `<case>_mask.svol.json` predictions.
    #[arg(long, requires = "data")]
    pred_dir: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    tolerance: Option<f64>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    json: Option<PathBuf>,
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Write one distance-colored PLY mesh per case here.
    #[arg(long)]
    ply_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct ReportArgs {
    /// Metric files written by `evaluate --json`.
    #[arg(long, required = true)]
    metrics: Vec<PathBuf>,
    /// Row labels, one per metrics file; defaults to the file stems.
    /// Files sharing a label are pooled into one row.
    #[arg(long)]
    label: Vec<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Invalid invocation that clap cannot catch.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Serialize, Deserialize)]
struct MetricsFile {
    records: Vec<MetricsRecord>,
    aggregate: AggregateReport,
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn ensure_parent(path: &Path) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn cmd_phantom(a: PhantomArgs) -> anyhow::Result<()> {
    let spec = PhantomSpec {
        size: a.size,
        slices: a.slices.unwrap_or(a.size),
        count: a.count,
        seed: a.seed,
        family: a.family.into(),
        contrast: a.contrast,
        noise_sigma: a.noise,
        size_multiple: a.size_multiple,
    };
    let [train, val, test] = a.split[..] else {
        return Err(usage(format!("--split needs three fractions, got {}", a.split.len())));
    };
    let fractions = [train, val, test];
    let manifest = gen_dataset(&spec, fractions, &a.out, a.jobs)?;
    println!("{}", manifest.display());
    Ok(())
}

fn cmd_sdf(a: SdfArgs) -> anyhow::Result<()> {
    let mask = load_volume(&a.mask)?;
    let opts = SdfOptions {
        half_pixel_offset: !a.no_offset,
    };
    let out = sdf_volume(&mask, opts, !a.raw)?;
    ensure_parent(&a.out)?;
    save_volume(&out, &a.out)?;
    println!("{}", a.out.display());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> anyhow::Result<()> {
    let mut cfg = RunConfig::load(a.config.as_deref())?;
    cfg.train.loss.weights = a.ablation.weights();
    if let Some(v) = a.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = a.lr {
        cfg.train.learning_rate = v;
    }
    if let Some(v) = a.decay {
        cfg.train.decay_factor = v;
    }
    if let Some(v) = a.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = a.seed {
        cfg.train.seed = v;
        cfg.net.seed = v;
    }
    if let Some(v) = a.depth {
        cfg.net.depth = v;
    }
    if let Some(v) = a.base_channels {
        cfg.net.base_channels = v;
    }
    if a.stop_at_val_dice.is_some() {
        cfg.train.stop_at_val_dice = a.stop_at_val_dice;
    }
    if cfg.net.depth == 0 || cfg.net.depth > 16 {
        cfg.net.validate()?;
    }
    let manifest = data::load_manifest(&a.data)?;
    let multiple = 1usize << cfg.net.depth;
    let (train_set, dims) = data::load_samples(&a.data, &manifest, &a.train_split, multiple)?;
    let (val_set, val_dims) = data::load_samples(&a.data, &manifest, &a.val_split, multiple)?;
    if dims != val_dims {
        bail!(usage(format!("train slices are {dims:?} after padding but val slices are {val_dims:?}")));
    }
    cfg.net.input_width = dims.0;
    cfg.net.input_height = dims.1;
    cfg.validate()?;

    let (params, report) = train(&train_set, &val_set, &cfg.net, &cfg.train)?;
    ensure_parent(&a.out)?;
    save_model(&params, &a.out)?;
    let report_path = a.report.unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".report.json");
        PathBuf::from(p)
    });
    let json = serde_json::json!({
        "ablation": format!("{:?}", a.ablation).to_lowercase(),
        "config": cfg,
        "report": report,
    });
    write_file(&report_path, serde_json::to_string_pretty(&json)?)?;
    println!("{}", a.out.display());
    println!("{}", report_path.display());
    Ok(())
}

fn cmd_predict(a: PredictArgs) -> anyhow::Result<()> {
    let params = load_model(&a.model)?;
    match (&a.image, &a.data) {
        (Some(image), None) => {
            let (out_mask, out_sdf) = (a.out_mask.as_ref().unwrap(), a.out_sdf.as_ref().unwrap());
            let (mask, sdf) = data::predict_padded(&params, &load_volume(image)?)?;
            ensure_parent(out_mask)?;
            ensure_parent(out_sdf)?;
            save_volume(&mask, out_mask)?;
            save_volume(&sdf, out_sdf)?;
            println!("{}", out_mask.display());
            println!("{}", out_sdf.display());
        }
        (None, Some(dir)) => {
            let out = a.out.as_ref().expect("clap requires --out");
            let manifest = data::load_manifest(dir)?;
            let ids = data::split_ids(&manifest, &a.split)?;
            fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
            for id in ids {
                let image = load_volume(shapeseg::phantom::image_path(dir, &a.split, id))?;
                let (mask, sdf) = data::predict_padded(&params, &image)?;
                save_volume(&mask, out.join(format!("{id}_mask.svol.json")))?;
                save_volume(&sdf, out.join(format!("{id}_sdf.svol.json")))?;
            }
            println!("{}", out.display());
        }
        _ => bail!(usage("predict needs either --image or --data")),
    }
    Ok(())
}

fn cmd_reconstruct(a: ReconstructArgs) -> anyhow::Result<()> {
    let cfg = RunConfig::load(a.config.as_deref())?;
    cfg.validate()?;
    let vol = load_volume(&a.input)?;
    let from = a.from.unwrap_or(match vol.kind() {
        ElementKind::BinaryMask => Source::Mask,
        ElementKind::ScalarF32 => Source::Sdf,
    });
    let format = match a.format {
        Some(FormatArg::Obj) => MeshFormat::Obj,
        Some(FormatArg::Stl) => MeshFormat::StlBinary,
        Some(FormatArg::Ply) => MeshFormat::PlyWithScalar,
        None => MeshFormat::from_extension(&a.out)
            .ok_or_else(|| usage(format!("cannot infer a mesh format from {}", a.out.display())))?,
    };
    if format == MeshFormat::PlyWithScalar {
        bail!(usage("PLY output carries a distance channel; use `evaluate --ply-dir`"));
    }
    let mesh = match from {
        Source::Mask => mask_surface(&vol, a.iso.or(cfg.iso).unwrap_or(0.5))?,
        Source::Sdf => marching_cubes(&vol, a.iso.or(cfg.iso).unwrap_or(0.0))?,
    };
    ensure_parent(&a.out)?;
    export_mesh(&mesh, &a.out, format)?;
    println!("{}", a.out.display());
    Ok(())
}

fn evaluate_case(
    pred: &Path,
    truth: &Path,
    tolerance: f64,
    case: &str,
    ply: Option<&Path>,
) -> anyhow::Result<MetricsRecord> {
    let p = load_volume(pred)?;
    let t = load_volume(truth)?;
    let record = evaluate_pair(&p, &t, tolerance, case)?;
    if let Some(ply) = ply {
        if p.count_foreground() > 0 && t.count_foreground() > 0 {
            let mesh = mask_surface(&p, 0.5)?;
            let colored = vertex_distance_channel(&mesh, &extract_surface_voxels(&t)?)?;
            export_mesh(&colored, ply, MeshFormat::PlyWithScalar)?;
        }
    }
    Ok(record)
}

fn cmd_evaluate(a: EvaluateArgs) -> anyhow::Result<()> {
    let cfg = RunConfig::load(a.config.as_deref())?;
    cfg.validate()?;
    let tolerance = a.tolerance.unwrap_or(cfg.tolerance);
    let mut jobs: Vec<(String, PathBuf, PathBuf)> = Vec::new();
    match (&a.pred, &a.pred_dir) {
        (Some(pred), None) => {
            let truth = a.truth.clone().expect("clap requires --truth");
            let case = pred.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            let case = case.strip_suffix(".svol.json").unwrap_or(&case).to_string();
            jobs.push((case, pred.clone(), truth));
        }
        (None, Some(dir)) => {
            let data_dir = a.data.as_ref().expect("clap requires --data");
            let manifest = data::load_manifest(data_dir)?;
            for id in data::split_ids(&manifest, &a.split)? {
                jobs.push((id.clone(), dir.join(format!("{id}_mask.svol.json")), mask_path(data_dir, &a.split, id)));
            }
        }
        _ => bail!(usage("evaluate needs either --pred/--truth or --pred-dir/--data")),
    }
    if let Some(dir) = &a.ply_dir {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let ply_for = |case: &str| a.ply_dir.as_ref().map(|d| d.join(format!("{case}.ply")));

    let workers = a.jobs.clamp(1, jobs.len().max(1));
    let mut slots: Vec<Option<anyhow::Result<MetricsRecord>>> = (0..jobs.len()).map(|_| None).collect();
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let jobs = &jobs;
                let ply_for = &ply_for;
                s.spawn(move || {
                    (w..jobs.len())
                        .step_by(workers)
                        .map(|i| {
                            let (case, pred, truth) = &jobs[i];
                            (i, evaluate_case(pred, truth, tolerance, case, ply_for(case).as_deref()))
                        })
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("evaluation worker panicked") {
                slots[i] = Some(r);
            }
        }
    });
    let records = slots.into_iter().map(|r| r.expect("every case evaluated")).collect::<anyhow::Result<Vec<_>>>()?;
    let file = MetricsFile {
        aggregate: aggregate(&records)?,
        records,
    };
    let json = serde_json::to_string_pretty(&file)?;
    if let Some(csv) = &a.csv {
        write_file(csv, records_to_csv(&file.records))?;
        println!("{}", csv.display());
    }
    match &a.json {
        Some(path) => {
            write_file(path, &json)?;
            println!("{}", path.display());
        }
        None if a.csv.is_none() => println!("{json}"),
        None => {}
    }
    Ok(())
}

fn cmd_report(a: ReportArgs) -> anyhow::Result<()> {
    if !a.label.is_empty() && a.label.len() != a.metrics.len() {
        bail!(usage(format!("{} labels for {} metrics files", a.label.len(), a.metrics.len())));
    }
    let mut rows: Vec<(String, Vec<MetricsRecord>)> = Vec::new();
    for (i, path) in a.metrics.iter().enumerate() {
        let text = fs::read_to_string(path).map_err(|e| shapeseg::Error::Io {
            path: path.clone(),
            source: e,
        })?;
        let file: MetricsFile = serde_json::from_str(&text)
            .map_err(|e| shapeseg::Error::Config(format!("{}: {e}", path.display())))?;
        let label = a.label.get(i).cloned().unwrap_or_else(|| {
            let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            name.strip_suffix(".json").unwrap_or(&name).to_string()
        });
        match rows.iter_mut().find(|(l, _)| *l == label) {
            Some((_, records)) => records.extend(file.records),
            None => rows.push((label, file.records)),
        }
    }
    let rows = rows
        .into_iter()
        .map(|(label, records)| Ok((label, aggregate(&records)?)))
        .collect::<shapeseg::Result<Vec<_>>>()?;
    let table = format_table(&rows);
    match &a.out {
        Some(path) => {
            write_file(path, &table)?;
            println!("{}", path.display());
        }
        None => print!("{table}"),
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 2;
    }
    match err.downcast_ref::<shapeseg::Error>() {
        Some(shapeseg::Error::Numeric(_)) | Some(shapeseg::Error::UndefinedMetric(_)) => 3,
        Some(shapeseg::Error::Io { source, .. }) if source.kind() != std::io::ErrorKind::NotFound => 3,
        Some(_) => 2,
        None => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Phantom(a) => cmd_phantom(a),
        Command::Sdf(a) => cmd_sdf(a),
        Command::Train(a) => cmd_train(a),
        Command::Predict(a) => cmd_predict(a),
        Command::Reconstruct(a) => cmd_reconstruct(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Report(a) => cmd_report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
