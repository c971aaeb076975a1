//! Command-line laboratory for panoptic segmentation on synthetic scenes:
//! generate data, train the two branches, run inference, cluster, fuse,
//! evaluate, and benchmark clustering.

mod bench;
mod config;
mod io;
mod pipeline;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use panolab_core::clustering::{bandwidth_search, LabeledEmbedding, MeanShiftConfig, SeedingMode};
use panolab_core::datagen::{generate_scene, mirror_scene, Scene};
use panolab_core::fusion::{fuse, FuseOptions};
use panolab_core::metrics::{MiouAccumulator, PqAccumulator, PqReport};
use panolab_core::network::{
    train, AdadeltaConfig, Branch, Network, TrainConfig, TrainLoss, TrainSample,
};
use panolab_core::ClassTable;

#[derive(Parser)]
#[command(name = "panolab", version, about = "synthetic panoptic segmentation laboratory")]
struct Cli {
    /// Worker threads for parallel sections (results do not depend on this).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic scenes with ground truth.
    Gen(GenArgs),
    /// Train the semantic or instance branch.
    Train(TrainArgs),
    /// Full pipeline on one image: semantics, embedding, clusters, fusion.
    Infer(InferArgs),
    /// Cluster a saved embedding map into instances.
    Cluster(ClusterArgs),
    /// Fuse a semantic map and an instance map into segments.
    Fuse(FuseArgs),
    /// Score predicted segmentations against ground truth.
    Eval(EvalArgs),
    /// Search clustering bandwidths on labeled scenes.
    Bandwidth(BandwidthArgs),
    /// Benchmark clustering on a synthetic embedding map.
    Bench(BenchArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Scene spec TOML (see crates/cli/src/config.rs for the schema).
    #[arg(long)]
    spec: PathBuf,
    /// Seed of the first scene; scene i uses seed + i.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of scenes.
    #[arg(long, default_value_t = 1)]
    count: usize,
    /// Mirror each scene about its vertical axis after generation.
    #[arg(long)]
    mirror: bool,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum BranchArg {
    Semantic,
    Instance,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum SeedingArg {
    Bin,
    Exhaustive,
}

impl From<SeedingArg> for SeedingMode {
    fn from(v: SeedingArg) -> SeedingMode {
        match v {
            SeedingArg::Bin => SeedingMode::Bin,
            SeedingArg::Exhaustive => SeedingMode::Exhaustive,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Directory produced by `gen` (classes.txt plus scene files).
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    branch: BranchArg,
    /// Stage 1 trains on RGB only; stage 2 appends coordinate channels.
    #[arg(long, default_value_t = 1)]
    stage: u8,
    #[arg(long, default_value_t = 300)]
    iters: usize,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    /// Base learning rate of the polynomial-decay schedule.
    #[arg(long, default_value_t = 0.003)]
    lr: f64,
    /// Weight initialization seed (unused with --from).
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Continue from a saved model instead of fresh weights. A stage-1
    /// model passed to --stage 2 is extended with zero-weight coordinate
    /// input channels first.
    #[arg(long)]
    from: Option<PathBuf>,
    /// Embedding dimensions of the instance branch.
    #[arg(long, default_value_t = 12)]
    emb_dim: usize,
    /// Output model file.
    #[arg(long)]
    out: PathBuf,
    /// Optional per-iteration loss log (text).
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    semantic_model: PathBuf,
    #[arg(long)]
    instance_model: PathBuf,
    #[arg(long)]
    classes: PathBuf,
    #[arg(long)]
    bandwidths: PathBuf,
    /// Substitute this ground-truth semantic map for the semantic branch.
    #[arg(long)]
    semantic_gt: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SeedingArg::Bin)]
    seeding: SeedingArg,
    /// Output segment-id map (PGM); the table goes to --segments.
    #[arg(long)]
    out: PathBuf,
    /// Output segment table; defaults to --out with a .txt extension.
    #[arg(long)]
    segments: Option<PathBuf>,
    /// Also dump the instance embedding map.
    #[arg(long)]
    emb_out: Option<PathBuf>,
    /// Also dump the argmax semantic map.
    #[arg(long)]
    sem_out: Option<PathBuf>,
    /// Also dump the clustered instance map.
    #[arg(long)]
    inst_out: Option<PathBuf>,
}

#[derive(Args)]
struct ClusterArgs {
    /// Embedding file written by `infer --emb-out` (expects a .hdr sidecar).
    #[arg(long)]
    embedding: PathBuf,
    #[arg(long)]
    semantic: PathBuf,
    #[arg(long)]
    classes: PathBuf,
    #[arg(long)]
    bandwidths: PathBuf,
    #[arg(long, value_enum, default_value_t = SeedingArg::Bin)]
    seeding: SeedingArg,
    /// Output instance map (PGM).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FuseArgs {
    #[arg(long)]
    semantic: PathBuf,
    #[arg(long)]
    instances: PathBuf,
    #[arg(long)]
    classes: PathBuf,
    /// Drop segments smaller than this many pixels (0 = keep all).
    #[arg(long, default_value_t = 0)]
    min_area: usize,
    /// Output segment-id map (PGM); the table goes to --segments.
    #[arg(long)]
    out: PathBuf,
    /// Output segment table; defaults to --out with a .txt extension.
    #[arg(long)]
    segments: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of predicted `*_seg.pgm` + `*_seg.txt` pairs.
    #[arg(long)]
    pred: PathBuf,
    /// Directory of ground-truth pairs with matching file names.
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    classes: PathBuf,
    /// Machine-readable report file; the table prints to stdout.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BandwidthArgs {
    /// Directory with scene embeddings and ground truth: for each scene
    /// `X.ppm`, expects `X_emb.f32`, `X_sem.pgm`, `X_inst.pgm`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    classes: PathBuf,
    /// Ascending candidate bandwidths.
    #[arg(long, value_delimiter = ',', required = true)]
    candidates: Vec<f64>,
    /// Output bandwidth table.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 2048)]
    height: usize,
    #[arg(long, default_value_t = 1024)]
    width: usize,
    #[arg(long, default_value_t = 12)]
    channels: usize,
    #[arg(long, default_value_t = 20)]
    instances: usize,
    #[arg(long, default_value_t = 0.5)]
    bandwidth: f64,
    #[arg(long, value_enum, default_value_t = SeedingArg::Bin)]
    seeding: SeedingArg,
    /// Timed runs after one warm-up.
    #[arg(long, default_value_t = 5)]
    runs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Report file (deterministic fields only; timings print to stdout).
    #[arg(long)]
    out: PathBuf,
    /// Also write the synthetic embedding map.
    #[arg(long)]
    dump_embedding: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        if let Err(e) =
            rayon::ThreadPoolBuilder::new().num_threads(threads).build_global()
        {
            eprintln!("error: building the thread pool: {e}");
            return ExitCode::from(3);
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(error_code(&err))
        }
    }
}

/// 3 for data/format/configuration problems, 4 for numerical failures.
fn error_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<panolab_core::Error>() {
            return match e {
                panolab_core::Error::Diverged { .. } | panolab_core::Error::NonFinite(_) => 4,
                _ => 3,
            };
        }
    }
    3
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Gen(args) => cmd_gen(args),
        Command::Train(args) => cmd_train(args),
        Command::Infer(args) => cmd_infer(args),
        Command::Cluster(args) => cmd_cluster(args),
        Command::Fuse(args) => cmd_fuse(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Bandwidth(args) => cmd_bandwidth(args),
        Command::Bench(args) => cmd_bench(args),
    }
}

fn scene_stem(i: usize) -> String {
    format!("scene_{i:04}")
}

fn cmd_gen(args: GenArgs) -> Result<()> {
    let (classes, spec) = config::load_scene_spec(&args.spec)?;
    std::fs::create_dir_all(&args.out)
        .with_context(|| format!("creating {}", args.out.display()))?;
    io::write_classes(&args.out.join("classes.txt"), &classes)?;
    for i in 0..args.count {
        let mut scene = generate_scene(&spec, &classes, args.seed + i as u64)?;
        if args.mirror {
            scene = mirror_scene(&scene)?;
        }
        let stem = scene_stem(i);
        io::write_ppm(&args.out.join(format!("{stem}.ppm")), &scene.image)?;
        io::write_semantic(&args.out.join(format!("{stem}_sem.pgm")), &scene.semantic)?;
        io::write_instances(&args.out.join(format!("{stem}_inst.pgm")), &scene.instances)?;
    }
    println!("wrote {} scenes to {}", args.count, args.out.display());
    Ok(())
}

/// Loads every `scene_*.ppm` (sorted by name) with its ground-truth maps.
fn load_dataset(dir: &Path) -> Result<(ClassTable, Vec<Scene>)> {
    let classes = io::read_classes(&dir.join("classes.txt"))?;
    let mut stems: Vec<String> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            name.strip_suffix(".ppm").map(str::to_string)
        })
        .collect();
    stems.sort();
    if stems.is_empty() {
        bail!("{}: no scene images found", dir.display());
    }
    let mut scenes = Vec::with_capacity(stems.len());
    for stem in &stems {
        scenes.push(Scene {
            image: io::read_ppm(&dir.join(format!("{stem}.ppm")))?,
            semantic: io::read_semantic(&dir.join(format!("{stem}_sem.pgm")))?,
            instances: io::read_instances(&dir.join(format!("{stem}_inst.pgm")))?,
        });
    }
    Ok((classes, scenes))
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    if !(1..=2).contains(&args.stage) {
        bail!("--stage must be 1 or 2");
    }
    let (classes, scenes) = load_dataset(&args.data)?;
    let samples: Vec<TrainSample<'_>> = scenes
        .iter()
        .map(|s| TrainSample { image: &s.image, semantic: &s.semantic, instances: &s.instances })
        .collect();

    let input_channels = if args.stage == 2 { 5 } else { 3 };
    let out_channels = match args.branch {
        BranchArg::Semantic => classes.len(),
        BranchArg::Instance => args.emb_dim,
    };
    let net = match &args.from {
        Some(path) => {
            let mut net = io::read_model(path)?;
            if args.stage == 2 && net.input_channels() == 3 {
                net.extend_input_channels(2)?;
            }
            if net.input_channels() != input_channels {
                bail!(
                    "{}: model expects {} input channels, stage {} needs {}",
                    path.display(),
                    net.input_channels(),
                    args.stage,
                    input_channels
                );
            }
            if net.output_channels() != out_channels {
                bail!(
                    "{}: model emits {} channels, this branch needs {}",
                    path.display(),
                    net.output_channels(),
                    out_channels
                );
            }
            net
        }
        None => Network::glorot(&[input_channels, 16, 16, out_channels], args.seed)?,
    };

    let cfg = TrainConfig {
        iterations: args.iters,
        batch_size: args.batch,
        optimizer: AdadeltaConfig {
            base_lr: args.lr,
            max_iterations: args.iters.max(1),
            ..AdadeltaConfig::default()
        },
        ..TrainConfig::default()
    };
    let branch = match args.branch {
        BranchArg::Semantic => Branch::Semantic,
        BranchArg::Instance => Branch::Instance,
    };
    let (trained, logs) = train(branch, &samples, &net, &cfg)?;
    io::write_model(&args.out, &trained)?;
    if let Some(log_path) = &args.log {
        let mut text = String::new();
        for l in &logs {
            match l.loss {
                TrainLoss::Semantic(v) => {
                    text.push_str(&format!("{} {} {}\n", l.iteration, l.lr, v));
                }
                TrainLoss::Instance(b) => {
                    text.push_str(&format!(
                        "{} {} {} {} {} {}\n",
                        l.iteration, l.lr, b.total, b.variance, b.distance, b.regularization
                    ));
                }
            }
        }
        std::fs::write(log_path, text)
            .with_context(|| format!("writing {}", log_path.display()))?;
    }
    let first = logs.first().map(|l| l.loss.total()).unwrap_or(f64::NAN);
    let last = logs.last().map(|l| l.loss.total()).unwrap_or(f64::NAN);
    println!(
        "trained {} iterations on {} scenes: loss {first:.6} -> {last:.6}",
        logs.len(),
        scenes.len()
    );
    Ok(())
}

fn segments_path(out: &Path, explicit: Option<PathBuf>) -> PathBuf {
    explicit.unwrap_or_else(|| out.with_extension("txt"))
}

fn cmd_infer(args: InferArgs) -> Result<()> {
    let classes = io::read_classes(&args.classes)?;
    let image = io::read_ppm(&args.image)?;
    let semantic_net = io::read_model(&args.semantic_model)?;
    let instance_net = io::read_model(&args.instance_model)?;
    let bandwidths = io::read_bandwidths(&args.bandwidths)?;
    let gt = args.semantic_gt.as_deref().map(io::read_semantic).transpose()?;
    let ms = MeanShiftConfig { seeding: args.seeding.into(), ..MeanShiftConfig::default() };
    let out = pipeline::run_pipeline(
        &image,
        &semantic_net,
        &instance_net,
        &classes,
        &bandwidths,
        &ms,
        gt.as_ref(),
    )?;
    io::write_segment_map(&args.out, &out.panoptic)?;
    io::write_segments(&segments_path(&args.out, args.segments), &out.panoptic.segments)?;
    if let Some(p) = &args.emb_out {
        io::write_embedding(p, &out.embedding)?;
    }
    if let Some(p) = &args.sem_out {
        io::write_semantic(p, &out.semantic)?;
    }
    if let Some(p) = &args.inst_out {
        io::write_instances(p, &out.instances)?;
    }
    println!(
        "segmented {}: {} segments, {} instances",
        args.image.display(),
        out.panoptic.segments.len(),
        out.instances.distinct_ids().len()
    );
    Ok(())
}

fn cmd_cluster(args: ClusterArgs) -> Result<()> {
    let classes = io::read_classes(&args.classes)?;
    let embedding = io::read_embedding(&args.embedding)?;
    let semantic = io::read_semantic(&args.semantic)?;
    let bandwidths = io::read_bandwidths(&args.bandwidths)?;
    let ms = MeanShiftConfig { seeding: args.seeding.into(), ..MeanShiftConfig::default() };
    let instances = panolab_core::clustering::classwise_cluster(
        &embedding, &semantic, &classes, &bandwidths, &ms,
    )?;
    io::write_instances(&args.out, &instances)?;
    println!("found {} instances", instances.distinct_ids().len());
    Ok(())
}

fn cmd_fuse(args: FuseArgs) -> Result<()> {
    let classes = io::read_classes(&args.classes)?;
    let semantic = io::read_semantic(&args.semantic)?;
    let instances = io::read_instances(&args.instances)?;
    let seg = fuse(&semantic, &instances, &classes, &FuseOptions {
        min_segment_area: args.min_area,
    })?;
    io::write_segment_map(&args.out, &seg)?;
    io::write_segments(&segments_path(&args.out, args.segments), &seg.segments)?;
    println!("fused {} segments", seg.segments.len());
    Ok(())
}

fn format_percent(v: f64) -> String {
    format!("{v:.4}")
}

fn report_key_values(pq: &PqReport, miou: f64, classes: &ClassTable) -> Vec<(String, String)> {
    let mut kv = vec![
        ("pq".to_string(), format_percent(pq.all.pq)),
        ("sq".to_string(), format_percent(pq.all.sq)),
        ("rq".to_string(), format_percent(pq.all.rq)),
        ("pq_things".to_string(), format_percent(pq.things.pq)),
        ("sq_things".to_string(), format_percent(pq.things.sq)),
        ("rq_things".to_string(), format_percent(pq.things.rq)),
        ("pq_stuff".to_string(), format_percent(pq.stuff.pq)),
        ("sq_stuff".to_string(), format_percent(pq.stuff.sq)),
        ("rq_stuff".to_string(), format_percent(pq.stuff.rq)),
        ("miou".to_string(), format_percent(miou)),
    ];
    for row in &pq.per_class {
        let name = classes.name(row.class_index).unwrap_or("?");
        kv.push((format!("class_{name}_pq"), format_percent(row.pq)));
        kv.push((format!("class_{name}_sq"), format_percent(row.sq)));
        kv.push((format!("class_{name}_rq"), format_percent(row.rq)));
        kv.push((format!("class_{name}_tp"), row.tp.to_string()));
        kv.push((format!("class_{name}_fp"), row.fp.to_string()));
        kv.push((format!("class_{name}_fn"), row.fn_count.to_string()));
    }
    kv
}

fn print_report_table(pq: &PqReport, miou: f64) {
    let header = [
        "PQ", "SQ", "RQ", "PQ^Th", "SQ^Th", "RQ^Th", "PQ^St", "SQ^St", "RQ^St", "mIoU",
    ];
    let values = [
        pq.all.pq, pq.all.sq, pq.all.rq, pq.things.pq, pq.things.sq, pq.things.rq, pq.stuff.pq,
        pq.stuff.sq, pq.stuff.rq, miou,
    ];
    let cells: Vec<String> = values.iter().map(|v| format!("{v:.1}")).collect();
    let width = header
        .iter()
        .map(|h| h.len())
        .chain(cells.iter().map(|c| c.len()))
        .max()
        .unwrap_or(5)
        + 2;
    let mut line = String::new();
    for h in header {
        line.push_str(&format!("{h:>width$}"));
    }
    println!("{line}");
    let mut line = String::new();
    for c in &cells {
        line.push_str(&format!("{c:>width$}"));
    }
    println!("{line}");
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let classes = io::read_classes(&args.classes)?;
    let mut names: Vec<String> = std::fs::read_dir(&args.pred)
        .with_context(|| format!("reading {}", args.pred.display()))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            name.strip_suffix("_seg.pgm").map(str::to_string)
        })
        .collect();
    names.sort();
    if names.is_empty() {
        bail!("{}: no *_seg.pgm predictions found", args.pred.display());
    }
    let mut pq_acc = PqAccumulator::new(&classes);
    let mut miou_acc = MiouAccumulator::new(classes.len());
    for name in &names {
        let pred = io::read_panoptic(
            &args.pred.join(format!("{name}_seg.pgm")),
            &args.pred.join(format!("{name}_seg.txt")),
        )?;
        let gt = io::read_panoptic(
            &args.gt.join(format!("{name}_seg.pgm")),
            &args.gt.join(format!("{name}_seg.txt")),
        )?;
        pq_acc.add(&pred, &gt)?;
        miou_acc.add(&pred.project_semantic(), &gt.project_semantic())?;
    }
    let pq = pq_acc.report();
    let miou = miou_acc.report();
    print_report_table(&pq, miou.mean);
    io::write_key_values(&args.out, &report_key_values(&pq, miou.mean, &classes))?;
    println!("evaluated {} scenes; report at {}", names.len(), args.out.display());
    Ok(())
}

fn cmd_bandwidth(args: BandwidthArgs) -> Result<()> {
    let classes = io::read_classes(&args.classes)?;
    let mut stems: Vec<String> = std::fs::read_dir(&args.data)
        .with_context(|| format!("reading {}", args.data.display()))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            name.strip_suffix("_emb.f32").map(str::to_string)
        })
        .collect();
    stems.sort();
    if stems.is_empty() {
        bail!("{}: no *_emb.f32 embeddings found", args.data.display());
    }
    let mut loaded = Vec::with_capacity(stems.len());
    for stem in &stems {
        loaded.push((
            io::read_embedding(&args.data.join(format!("{stem}_emb.f32")))?,
            io::read_semantic(&args.data.join(format!("{stem}_sem.pgm")))?,
            io::read_instances(&args.data.join(format!("{stem}_inst.pgm")))?,
        ));
    }
    let scenes: Vec<LabeledEmbedding<'_>> = loaded
        .iter()
        .map(|(e, s, i)| LabeledEmbedding { embedding: e, semantic: s, instances: i })
        .collect();
    let table = bandwidth_search(&scenes, &classes, &args.candidates, &MeanShiftConfig::default())?;
    io::write_bandwidths(&args.out, &table)?;
    for (name, value) in table.iter() {
        println!("{name} {value}");
    }
    Ok(())
}

fn cmd_bench(args: BenchArgs) -> Result<()> {
    let request = bench::BenchRequest {
        height: args.height,
        width: args.width,
        channels: args.channels,
        instances: args.instances,
        bandwidth: args.bandwidth,
        seeding: args.seeding.into(),
        runs: args.runs,
        seed: args.seed,
    };
    if let Some(dump) = &args.dump_embedding {
        io::write_embedding(dump, &bench::fixture_embedding(&request)?)?;
    }
    let (report, _) = bench::run_benchmark(request)?;
    io::write_key_values(&args.out, &report.deterministic_key_values())?;
    let times: Vec<String> = report.times_ms.iter().map(|t| format!("{t:.2}")).collect();
    println!(
        "{}x{}x{} instances={} seeding={} discovered={}",
        report.request.height,
        report.request.width,
        report.request.channels,
        report.request.instances,
        bench::seeding_name(report.request.seeding),
        report.discovered,
    );
    println!("times_ms [{}] median {:.2}", times.join(", "), report.median_ms);
    match report.peak_rss_bytes {
        Some(b) => println!("peak_rss_bytes {b}"),
        None => println!("peak_rss_bytes unavailable"),
    }
    Ok(())
}
