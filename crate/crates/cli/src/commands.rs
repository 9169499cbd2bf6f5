use std::fs;
use std::path::{Path, PathBuf};

use clap::Args;
use log::{info, warn};

use patchrd::config::{PipelineConfig, RetrievalMode};
use patchrd::eval::{
    crop_cuboid, crop_plane_in, format_table, procedural_shapes, run_benchmark, write_csv, BenchOptions,
    BenchmarkShape, CropKind, CropSweep,
};
use patchrd::pipeline::{complete as run_complete, Inputs};
use patchrd::retrieval::{
    load_database, make_triplets, save_database, train_embedding, Database, Embedder, EmbedderKind,
};
use patchrd::voxelgrid::{export_obj as write_obj, read_grid, write_grid, Encoding, VoxelGrid};

use crate::{at, CliResult, ConfigArgs, Failure};

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "grid".into())
}

fn load(path: &Path) -> CliResult<VoxelGrid> {
    if !path.exists() {
        return Err(Failure::input(format!("{}: no such file", path.display())));
    }
    read_grid(path).map_err(at(path))
}

fn make_dir(dir: &Path) -> CliResult {
    fs::create_dir_all(dir).map_err(|e| Failure::input(format!("{}: {e}", dir.display())))
}

fn write_text(path: &Path, text: &str) -> CliResult {
    fs::write(path, text).map_err(|e| Failure::input(format!("{}: {e}", path.display())))
}

fn save(grid: &VoxelGrid, path: &Path) -> CliResult {
    write_grid(grid, path).map_err(at(path))
}

/// `dir/stem_suffix`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let dir = path.parent().unwrap_or(Path::new(""));
    dir.join(format!("{}_{suffix}", stem(path)))
}

/// Writes the resolved config next to a command's outputs.
fn echo_config(config: &PipelineConfig, path: &Path) -> CliResult {
    write_text(path, &config.to_json())?;
    info!("config written to {}", path.display());
    Ok(())
}

fn parse_range(s: &str) -> CliResult<(f64, f64)> {
    let bad = || Failure::input(format!("ratio range '{s}' must look like lo:hi, e.g. 0.1:0.3"));
    let (lo, hi) = s.split_once(':').ok_or_else(bad)?;
    Ok((lo.trim().parse().map_err(|_| bad())?, hi.trim().parse().map_err(|_| bad())?))
}

#[derive(Args, Debug)]
pub struct CropArgs {
    /// Complete grid to crop.
    input: PathBuf,
    /// Output directory.
    out_dir: PathBuf,
    #[arg(long, default_value = "cuboid")]
    kind: String,
    /// Accepted deleted fraction, lo:hi. Optional for plane cuts.
    #[arg(long)]
    ratio: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

pub fn crop(a: CropArgs) -> CliResult {
    let kind: CropKind = a.kind.parse()?;
    let range = a.ratio.as_deref().map(parse_range).transpose()?;
    let grid = load(&a.input)?;
    let (partial, spec) = match kind {
        CropKind::Cuboid => crop_cuboid(&grid, range.unwrap_or((0.1, 0.3)), a.seed)?,
        CropKind::Plane => crop_plane_in(&grid, range, a.seed)?,
    };
    make_dir(&a.out_dir)?;
    let name = stem(&a.input);
    let grid_path = a.out_dir.join(format!("{name}_partial.pvox"));
    save(&partial, &grid_path)?;
    let json = serde_json::to_string_pretty(&spec).expect("crop spec serializes") + "\n";
    write_text(&a.out_dir.join(format!("{name}_crop.json")), &json)?;
    println!(
        "{}: deleted {:.1}% of {} voxels",
        grid_path.display(),
        100.0 * spec.realized_ratio.unwrap_or(0.0),
        grid.occupied_count()
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Partial grid the codebook comes from.
    #[arg(long)]
    partial: PathBuf,
    /// Complete grid supplying the true patches.
    #[arg(long)]
    gt: PathBuf,
    /// Output PRDB1 file.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    n_rnd: Option<usize>,
    #[arg(long)]
    n_true: Option<usize>,
    #[command(flatten)]
    config: ConfigArgs,
}

pub fn train_embed(a: TrainArgs) -> CliResult {
    let mut config = a.config.resolve()?;
    let e = &mut config.embedding;
    e.epochs = a.epochs.unwrap_or(e.epochs);
    e.lr = a.lr.unwrap_or(e.lr);
    e.batch = a.batch.unwrap_or(e.batch);
    e.n_rnd = a.n_rnd.unwrap_or(e.n_rnd);
    e.n_true = a.n_true.unwrap_or(e.n_true);
    config.paths.gt = Some(a.gt.clone());
    config.validate()?;
    if config.embedding.epochs == 0 {
        warn!("--epochs 0: writing initialized, untrained embedders");
        eprintln!("warning: --epochs 0 writes initialized, untrained embedders");
    }
    let partial = load(&a.partial)?.binarize(0.5);
    let gt = load(&a.gt)?;
    let coarse = config.coarse.provide(&partial, Some(&gt))?;
    let triplets = make_triplets(&partial, &coarse, &gt, &config.triplet_options())?;
    println!("{} triplets", triplets.len());
    let trained = train_embedding(&triplets, &config.train_options())?;
    for (epoch, loss) in trained.loss_history.iter().enumerate() {
        println!("epoch {epoch:>4} loss {loss:.9}");
    }
    if let Some(p) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        make_dir(p)?;
    }
    let db = Database {
        embedders: vec![trained.coarse, trained.detailed],
        codebook: None,
    };
    save_database(&db, &a.out).map_err(at(&a.out))?;
    echo_config(&config, &sibling(&a.out, "config.json"))?;
    println!("embedders written to {}", a.out.display());
    Ok(())
}

fn load_embedders(config: &PipelineConfig) -> CliResult<Option<(Embedder, Embedder)>> {
    if config.retrieval != RetrievalMode::Embedding {
        return Ok(None);
    }
    let path = config
        .paths
        .embedder
        .as_ref()
        .ok_or_else(|| Failure::precondition("embedding retrieval needs --embedder with trained embedders"))?;
    if !path.exists() {
        return Err(Failure::precondition(format!("{}: embedder file not found", path.display())));
    }
    let db = load_database(path).map_err(at(path))?;
    let get = |kind| {
        db.embedder(kind)
            .cloned()
            .ok_or_else(|| Failure::precondition(format!("{}: no {kind:?} embedder in the file", path.display())))
    };
    Ok(Some((get(EmbedderKind::Coarse)?, get(EmbedderKind::Detailed)?)))
}

#[derive(Args, Debug)]
pub struct CompleteArgs {
    /// Partial grid.
    input: PathBuf,
    /// Output directory.
    out_dir: PathBuf,
    /// Complete grid, for the gt_downsample coarse provider.
    #[arg(long)]
    gt: Option<PathBuf>,
    #[command(flatten)]
    config: ConfigArgs,
}

pub fn complete(a: CompleteArgs) -> CliResult {
    let mut config = a.config.resolve()?;
    if let Some(gt) = &a.gt {
        config.paths.gt = Some(gt.clone());
    }
    let partial = load(&a.input)?;
    if partial.binarize(0.5).is_empty() {
        return Err(Failure::input(format!("{}: input grid has no occupied voxels", a.input.display())));
    }
    let gt = config.paths.gt.as_deref().map(load).transpose()?;
    let embedders = load_embedders(&config)?;
    let inputs = Inputs {
        gt: gt.as_ref(),
        embedders: embedders.as_ref().map(|(c, d)| (c, d)),
        keep_states: false,
    };
    let done = run_complete(&partial, &config, inputs)?;

    make_dir(&a.out_dir)?;
    let name = stem(&a.input);
    let out = |suffix: &str| a.out_dir.join(format!("{name}_{suffix}"));
    patchrd::voxelgrid::write_grid_as(&done.scalar, out("scalar.pvox"), Encoding::Scalar).map_err(at(&out("scalar.pvox")))?;
    save(&done.binary, &out("completed.pvox"))?;
    save(&done.coarse, &out("coarse.pvox"))?;
    write_obj(&done.binary, 0.5, out("completed.obj")).map_err(at(&out("completed.obj")))?;
    let diag = serde_json::to_string_pretty(&done.diagnostics).expect("diagnostics serialize") + "\n";
    write_text(&out("diagnostics.json"), &diag)?;
    echo_config(&config, &out("config.json"))?;
    let d = &done.diagnostics;
    println!(
        "{}: {} occupied voxels, codebook {}, {} retrieval sets, {} subvolumes, mean discontinuity {:.6}",
        out("completed.pvox").display(),
        done.binary.occupied_count(),
        d.codebook_size,
        d.retrieval_sets,
        d.subvolumes.len(),
        d.mean_discontinuity
    );
    if let Some(gt) = &gt {
        let v = patchrd::eval::iou(&done.binary, gt, 0.5)?;
        let cd = patchrd::eval::grid_chamfer_x1000(&done.binary, gt, config.seed)?;
        println!("vs ground truth: IoU {v:.6}, CD x1000 {cd:.6}");
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Directory of complete grids (.pvox or .txt). Files in subdirectories
    /// take the subdirectory name as category; others the name before '_'.
    dataset: Option<PathBuf>,
    /// Use this many procedural shapes instead of a dataset directory.
    #[arg(long, conflicts_with = "dataset")]
    procedural: Option<usize>,
    /// CSV report path.
    #[arg(long, default_value = "report.csv")]
    out: PathBuf,
    /// Crop ratios in percent; 0 runs the uncropped shape.
    #[arg(long, value_delimiter = ',', default_values_t = vec![10.0, 20.0, 40.0, 60.0])]
    ratios: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = vec![0u64])]
    seeds: Vec<u64>,
    #[arg(long, default_value = "cuboid")]
    kind: String,
    /// Accepted distance of the realized ratio from the nominal one, in percent.
    #[arg(long, default_value_t = 5.0)]
    half_width: f64,
    /// Only run the coarse-only baseline.
    #[arg(long)]
    coarse_only: bool,
    /// Record wall-clock seconds per row (makes the report non-reproducible).
    #[arg(long)]
    timing: bool,
    #[command(flatten)]
    config: ConfigArgs,
}

fn dataset_shapes(dir: &Path) -> CliResult<Vec<BenchmarkShape>> {
    if !dir.is_dir() {
        return Err(Failure::input(format!("{}: not a directory", dir.display())));
    }
    let is_grid = |p: &Path| p.is_file() && matches!(p.extension().and_then(|e| e.to_str()), Some("pvox" | "txt"));
    let list = |d: &Path| -> CliResult<Vec<PathBuf>> {
        let mut v: Vec<PathBuf> = fs::read_dir(d)
            .map_err(|e| Failure::input(format!("{}: {e}", d.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .collect();
        v.sort();
        Ok(v)
    };
    let mut shapes = Vec::new();
    for entry in list(dir)? {
        if entry.is_dir() {
            let category = stem(&entry);
            for file in list(&entry)?.into_iter().filter(|p| is_grid(p)) {
                shapes.push(BenchmarkShape {
                    id: format!("{category}/{}", stem(&file)),
                    category: category.clone(),
                    grid: load(&file)?,
                });
            }
        } else if is_grid(&entry) {
            let id = stem(&entry);
            let category = id.split('_').next().unwrap_or(&id).to_string();
            shapes.push(BenchmarkShape {
                grid: load(&entry)?,
                id,
                category,
            });
        }
    }
    Ok(shapes)
}

pub fn eval(a: EvalArgs) -> CliResult {
    let config = a.config.resolve()?;
    let kind: CropKind = a.kind.parse()?;
    let shapes = match (&a.dataset, a.procedural) {
        (_, Some(n)) => procedural_shapes(n, config.s_shape)?,
        (Some(dir), None) => dataset_shapes(dir)?,
        (None, None) => return Err(Failure::input("eval needs a dataset directory or --procedural N")),
    };
    if shapes.is_empty() {
        return Err(Failure::input("dataset holds no .pvox or .txt grids"));
    }
    let embedders = if a.coarse_only { None } else { load_embedders(&config)? };
    let mut sweep = CropSweep::new(kind, a.ratios.iter().map(|r| r / 100.0).collect(), a.seeds.clone());
    sweep.half_width = a.half_width / 100.0;
    let options = BenchOptions {
        coarse_only: a.coarse_only,
        timing: a.timing,
    };
    let report = run_benchmark(
        &shapes,
        &config,
        &sweep,
        embedders.as_ref().map(|(c, d)| (c, d)),
        options,
    )?;
    if let Some(p) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        make_dir(p)?;
    }
    let mut buf = Vec::new();
    write_csv(&report.rows, &mut buf)?;
    fs::write(&a.out, buf).map_err(|e| Failure::input(format!("{}: {e}", a.out.display())))?;
    echo_config(&config, &sibling(&a.out, "config.json"))?;
    print!("{}", format_table(&report));
    let errors = report.rows.iter().filter(|r| r.is_error()).count();
    println!("{} rows ({errors} errors) written to {}", report.rows.len(), a.out.display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    input: PathBuf,
    output: PathBuf,
    #[arg(long, default_value_t = 0.5)]
    threshold: f32,
}

pub fn export_obj(a: ExportArgs) -> CliResult {
    let grid = load(&a.input)?;
    let mesh = write_obj(&grid, a.threshold, &a.output).map_err(at(&a.output))?;
    println!("{}: {} faces", a.output.display(), mesh.quads.len());
    Ok(())
}

#[derive(Args, Debug)]
pub struct InfoArgs {
    input: PathBuf,
}

pub fn info(a: InfoArgs) -> CliResult {
    let path = &a.input;
    let bytes = fs::read(path).map_err(|e| Failure::input(format!("{}: {e}", path.display())))?;
    if bytes.starts_with(patchrd::retrieval::store::MAGIC) {
        let db = load_database(path).map_err(at(path))?;
        println!("{}: embedder database", path.display());
        for e in &db.embedders {
            println!("  {:?} embedder: patch extent {}, code dim {}", e.kind(), e.extent(), e.code_dim());
        }
        if let Some(cb) = &db.codebook {
            println!("  codebook: {} patches of extent {}", cb.len(), cb.extent());
        }
        return Ok(());
    }
    let grid = load(path)?;
    println!("{}: {}³ grid, pitch {}", path.display(), grid.size(), grid.pitch());
    println!("  occupied: {}", grid.occupied_count());
    println!("  values: {}", if grid.is_binary() { "binary" } else { "scalar" });
    match grid.bounding_box() {
        Some((lo, hi)) => println!("  bounding box: {lo:?} .. {hi:?}"),
        None => println!("  bounding box: empty"),
    }
    Ok(())
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Output directory.
    out_dir: PathBuf,
    /// Number of shapes; categories cycle chair, table, lamp, shelf, sofa.
    #[arg(long, default_value_t = 20)]
    count: usize,
    #[arg(long, default_value_t = 32)]
    size: usize,
}

pub fn synth(a: SynthArgs) -> CliResult {
    let shapes = procedural_shapes(a.count, a.size)?;
    make_dir(&a.out_dir)?;
    for s in &shapes {
        save(&s.grid, &a.out_dir.join(format!("{}.pvox", s.id)))?;
    }
    println!("{} shapes written to {}", shapes.len(), a.out_dir.display());
    Ok(())
}
