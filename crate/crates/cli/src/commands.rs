use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};

use diffusion_influence::diffusion::{
    gen_clusters, train, ClusterSpec, DataPoint, Denoiser, ForwardNoise, ModelShape, Schedule,
    TrainConfig,
};
use diffusion_influence::eval::{rank_correlation, recall_at_k, run_experiment, storage_report, ExperimentConfig};
use diffusion_influence::influence::{
    rank_order, GradientSetup, InfluenceRecord, NoiseConfig, NoiseMode, ScaleConstants,
    TimestepPlan,
};
use diffusion_influence::knn::{HnswIndex, IndexParams};
use diffusion_influence::sketch::SketchContext;
use diffusion_influence::store::{
    read_dataset, read_model, validate, write_cache, write_dataset, write_model, Cache, Manifest,
    ModelFile,
};
use diffusion_influence::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "dinf", version, about = "Gradient-cache influence scoring for toy diffusion models")]
pub struct Cli {
    /// Worker threads for parallel phases [env: DMIN_THREADS; default: all cores]
    #[arg(long, env = "DMIN_THREADS", value_name = "N")]
    pub threads: Option<usize>,

    /// `key = value` file whose entries are applied as subcommand flags;
    /// flags given on the command line take precedence
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a labelled Gaussian-cluster dataset
    GenData(GenDataArgs),
    /// Train the toy denoiser on a dataset
    Train(TrainArgs),
    /// Compute, compress and cache per-timestep training gradients
    CacheGrads(CacheGradsArgs),
    /// Build a KNN index over a gradient cache
    BuildIndex(BuildIndexArgs),
    /// Score every training sample against one query (exact or compressed scan)
    Score(ScoreArgs),
    /// Retrieve the top-k training samples for one query through the KNN index
    Query(QueryArgs),
    /// Run the end-to-end experiment, or compare two score files
    Eval(EvalArgs),
    /// Print storage figures of a cache
    Report(CacheDirArgs),
    /// Check a cache directory against its manifest
    Validate(CacheDirArgs),
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct GenDataArgs {
    /// Output dataset file
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub clusters: usize,
    #[arg(long, default_value_t = 300)]
    pub per_cluster: usize,
    #[arg(long, default_value_t = 8)]
    pub dim: usize,
    /// Distance of each cluster center from the origin
    #[arg(long, default_value_t = 3.0)]
    pub separation: f32,
    #[arg(long, default_value_t = 1.0)]
    pub stddev: f32,
    #[arg(long, default_value_t = 1)]
    pub data_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ForwardArg {
    Scaled,
    Unscaled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum NoiseArg {
    Shared,
    PerSample,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct TrainArgs {
    /// Training dataset file
    #[arg(long)]
    pub data: PathBuf,
    /// Output model file
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 142)]
    pub hidden: usize,
    /// Ignore labels (no class embedding)
    #[arg(long)]
    pub unconditional: bool,
    #[arg(long, default_value_t = 200)]
    pub timesteps: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub beta_start: f64,
    #[arg(long, default_value_t = 0.05)]
    pub beta_end: f64,
    #[arg(long, value_enum, default_value_t = ForwardArg::Scaled)]
    pub forward_noise: ForwardArg,
    #[arg(long, default_value_t = 200)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    #[arg(long, default_value_t = 2)]
    pub init_seed: u64,
    #[arg(long, default_value_t = 3)]
    pub train_seed: u64,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct CacheGradsArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Training dataset file; sample ids are row numbers
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub cache_dir: PathBuf,
    /// Sketch dimension per timestep
    #[arg(long = "v", default_value_t = 4096)]
    pub target_dim: usize,
    /// Number of evenly spaced timesteps cached
    #[arg(long = "s", default_value_t = 10)]
    pub steps: usize,
    #[arg(long, default_value_t = 5)]
    pub sketch_seed: u64,
    #[arg(long, default_value_t = 6)]
    pub noise_seed: u64,
    #[arg(long, value_enum, default_value_t = NoiseArg::Shared)]
    pub noise_mode: NoiseArg,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct BuildIndexArgs {
    #[arg(long)]
    pub cache_dir: PathBuf,
    /// Output index file
    #[arg(long)]
    pub out: PathBuf,
    /// Maximum links per node
    #[arg(long, default_value_t = 16)]
    pub m: usize,
    #[arg(long, default_value_t = 200)]
    pub ef_construction: usize,
    /// Default query beam stored with the index
    #[arg(long, default_value_t = 200)]
    pub ef: usize,
    #[arg(long, default_value_t = 7)]
    pub index_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScoreMode {
    Exact,
    Compressed,
}

#[derive(Debug, Args)]
pub struct QueryInput {
    #[arg(long)]
    pub cache_dir: PathBuf,
    /// Model the cache was built from
    #[arg(long)]
    pub model: PathBuf,
    /// Dataset file holding query points
    #[arg(long)]
    pub queries: PathBuf,
    /// Row of the query point in --queries
    #[arg(long, default_value_t = 0)]
    pub row: usize,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct ScoreArgs {
    #[command(flatten)]
    pub input: QueryInput,
    #[arg(long, value_enum, default_value_t = ScoreMode::Compressed)]
    pub mode: ScoreMode,
    /// Training dataset, needed by the exact mode
    #[arg(long, required_if_eq("mode", "exact"))]
    pub data: Option<PathBuf>,
    /// Output TSV file [default: stdout]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct QueryArgs {
    #[command(flatten)]
    pub input: QueryInput,
    #[arg(long)]
    pub index: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    #[arg(long, default_value_t = 200)]
    pub ef: usize,
    /// Output TSV file [default: stdout]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct EvalArgs {
    /// Experiment config (`key = value`); missing keys use defaults
    #[arg(long, conflicts_with = "compare")]
    pub experiment: Option<PathBuf>,
    /// Working directory for caches and indexes
    #[arg(long, default_value = "eval-work")]
    pub workdir: PathBuf,
    /// Directory for report.txt, summary.json and timings.tsv
    #[arg(long, default_value = "eval-report")]
    pub report_dir: PathBuf,
    /// Compare two score files instead of running the experiment
    #[arg(long, num_args = 2, value_names = ["A", "B"])]
    pub compare: Option<Vec<PathBuf>>,
    /// Cutoff for the top-k overlap in --compare
    #[arg(long, default_value_t = 10)]
    pub k: usize,
}

#[derive(Debug, Args)]
#[command(args_override_self = true)]
pub struct CacheDirArgs {
    #[arg(long)]
    pub cache_dir: PathBuf,
}

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_model(a),
        Command::CacheGrads(a) => cache_grads(a),
        Command::BuildIndex(a) => build_index(a),
        Command::Score(a) => score(a),
        Command::Query(a) => query(a),
        Command::Eval(a) => eval(a),
        Command::Report(a) => report(a),
        Command::Validate(a) => validate_cache(a),
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn tsv(records: &[InfluenceRecord]) -> String {
    let mut s = String::from("rank\tsample_id\tscore\n");
    for (i, r) in records.iter().enumerate() {
        let _ = writeln!(s, "{}\t{}\t{}", i + 1, r.sample_id, r.score);
    }
    s
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let spec = ClusterSpec::separated(a.clusters, a.per_cluster, a.dim, a.separation, a.stddev, a.data_seed)?;
    let data = gen_clusters(&spec)?;
    write_dataset(&a.out, &data)?;
    eprintln!("wrote {} points to {}", data.len(), a.out.display());
    Ok(())
}

fn train_model(a: TrainArgs) -> Result<()> {
    let sched = Schedule::linear(a.timesteps, a.beta_start, a.beta_end)?.with_forward(forward(a.forward_noise));
    let cfg = TrainConfig {
        epochs: a.epochs,
        lr: a.lr,
        batch: a.batch,
        seed: a.train_seed,
    };
    if a.hidden == 0 || a.batch == 0 {
        return Err(Error::InvalidConfig("--hidden and --batch must be positive".into()));
    }
    let data = read_dataset(&a.data)?;
    let dim = data
        .first()
        .map(|p| p.x.len())
        .ok_or_else(|| Error::InvalidConfig("training set is empty".into()))?;
    let n_classes = if a.unconditional {
        0
    } else {
        data.iter().filter_map(|p| p.label).max().map_or(0, |m| m as usize + 1)
    };
    let shape = ModelShape::new(dim, a.hidden, n_classes)?;
    let outcome = train(Denoiser::init(shape, a.init_seed), &data, &sched, &cfg)?;
    let file = ModelFile {
        model: outcome.model,
        num_timesteps: a.timesteps,
        beta_start: a.beta_start,
        beta_end: a.beta_end,
        forward_noise: sched.forward,
        epochs: outcome.epochs,
        lr: outcome.lr,
    };
    write_model(&a.out, &file)?;
    eprintln!(
        "trained {} parameters, final epoch loss {:.6}",
        file.model.param_count(),
        outcome.epoch_losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn forward(f: ForwardArg) -> ForwardNoise {
    match f {
        ForwardArg::Scaled => ForwardNoise::Scaled,
        ForwardArg::Unscaled => ForwardNoise::Unscaled,
    }
}

fn cache_grads(a: CacheGradsArgs) -> Result<()> {
    if a.target_dim == 0 || a.steps == 0 {
        return Err(Error::InvalidConfig("--v and --s must be positive".into()));
    }
    let mf = read_model(&a.model)?;
    let data = read_dataset(&a.data)?;
    let sched = mf.schedule()?;
    let plan = TimestepPlan::evenly_spaced(mf.num_timesteps, a.steps)?;
    let setup = GradientSetup {
        model: &mf.model,
        sched: &sched,
        plan: &plan,
        noise: NoiseConfig {
            seed: a.noise_seed,
            mode: match a.noise_mode {
                NoiseArg::Shared => NoiseMode::Shared,
                NoiseArg::PerSample => NoiseMode::PerSample,
            },
        },
    };
    let scale = ScaleConstants::new(mf.epochs as f64, mf.lr)?;
    let ctx = SketchContext::derive(mf.model.param_count(), a.target_dim, a.sketch_seed)?;
    let manifest = write_cache(&a.cache_dir, &setup, &ctx, &data, scale)?;
    eprintln!(
        "cached {} samples x {} timesteps at v={} ({} degenerate)",
        manifest.sample_count,
        manifest.steps.len(),
        manifest.target_dim,
        manifest.degenerate_ids.len()
    );
    Ok(())
}

fn build_index(a: BuildIndexArgs) -> Result<()> {
    let params = IndexParams {
        m: a.m,
        ef_construction: a.ef_construction,
        ef: a.ef,
    };
    params.check()?;
    let cache = Cache::open(&a.cache_dir)?;
    let start = Instant::now();
    let index = HnswIndex::build(&cache, params, a.index_seed)?;
    index.save(&a.out)?;
    eprintln!(
        "indexed {} vectors of dimension {} in {:.3} s",
        index.len(),
        index.dim(),
        start.elapsed().as_secs_f64()
    );
    Ok(())
}

struct Loaded {
    cache: Cache,
    model: ModelFile,
    sched: Schedule,
    plan: TimestepPlan,
    point: DataPoint,
}

impl Loaded {
    fn open(input: &QueryInput) -> Result<Self> {
        let cache = Cache::open(&input.cache_dir)?;
        let model = read_model(&input.model)?;
        cache.manifest().check_model(&model.model)?;
        let queries = read_dataset(&input.queries)?;
        let n = queries.len();
        let point = queries.into_iter().nth(input.row).ok_or_else(|| {
            Error::Input(format!("--row {} out of range for {n} query points", input.row))
        })?;
        Ok(Self {
            sched: cache.manifest().schedule()?,
            plan: cache.manifest().plan()?,
            cache,
            model,
            point,
        })
    }

    fn setup(&self) -> GradientSetup<'_> {
        GradientSetup {
            model: &self.model.model,
            sched: &self.sched,
            plan: &self.plan,
            noise: self.cache.manifest().noise(),
        }
    }

    fn manifest(&self) -> &Manifest {
        self.cache.manifest()
    }
}

fn score(a: ScoreArgs) -> Result<()> {
    let l = Loaded::open(&a.input)?;
    let scale = l.manifest().scale()?;
    let mut records = match a.mode {
        ScoreMode::Compressed => {
            let q = l.setup().query_sketches(&l.cache.context()?, &l.point)?;
            l.cache.score(&q, scale)?
        }
        ScoreMode::Exact => {
            let path = a.data.as_deref().expect("clap requires --data in exact mode");
            let data = read_dataset(path)?;
            if data.len() as u64 != l.manifest().sample_count {
                return Err(Error::CacheIncompatible(format!(
                    "dataset has {} points, cache has {} samples",
                    data.len(),
                    l.manifest().sample_count
                )));
            }
            l.setup().score_exact(&l.point, &data, scale)?
        }
    };
    records.sort_by(rank_order);
    emit(a.out.as_deref(), &tsv(&records))
}

fn query(a: QueryArgs) -> Result<()> {
    if a.k == 0 {
        return Err(Error::InvalidConfig("--k must be at least 1".into()));
    }
    if a.ef < a.k {
        return Err(Error::InvalidConfig(format!("--ef {} must be at least --k {}", a.ef, a.k)));
    }
    let l = Loaded::open(&a.input)?;
    let index = HnswIndex::load_for(&a.index, &l.cache)?;
    let q = l.setup().query_sketches(&l.cache.context()?, &l.point)?.concatenated();
    let start = Instant::now();
    let top = index.query(&q, a.k, a.ef)?;
    let elapsed = start.elapsed();
    emit(a.out.as_deref(), &tsv(&top))?;
    eprintln!("query wall time: {:.3} ms", elapsed.as_secs_f64() * 1e3);
    Ok(())
}

fn read_scores(path: &Path) -> Result<Vec<InfluenceRecord>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    let mut offset = 0u64;
    for (n, line) in text.lines().enumerate() {
        let at = offset;
        offset += line.len() as u64 + 1;
        if line.is_empty() || line.starts_with("rank\t") {
            continue;
        }
        let bad = || {
            Error::format(
                path,
                at,
                format!("line {}: expected rank<TAB>sample_id<TAB>score", n + 1),
            )
        };
        let mut parts = line.split('\t');
        let _rank = parts.next().ok_or_else(bad)?;
        let id = parts.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        let score = parts.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        out.push(InfluenceRecord { sample_id: id, score });
    }
    Ok(out)
}

fn compare(a: &Path, b: &Path, k: usize) -> Result<String> {
    let ra = read_scores(a)?;
    let rb = read_scores(b)?;
    let mut sa = ra.clone();
    let mut sb = rb.clone();
    sa.sort_by_key(|r| r.sample_id);
    sb.sort_by_key(|r| r.sample_id);
    if sa.len() != sb.len() || sa.iter().zip(&sb).any(|(x, y)| x.sample_id != y.sample_id) {
        return Err(Error::Input("score files cover different sample ids".into()));
    }
    let xa: Vec<f64> = sa.iter().map(|r| r.score).collect();
    let xb: Vec<f64> = sb.iter().map(|r| r.score).collect();
    let rho = rank_correlation(&xa, &xb)?;
    let ids = |v: &[InfluenceRecord]| -> Vec<u64> {
        let mut v = v.to_vec();
        v.sort_by(rank_order);
        v.iter().map(|r| r.sample_id).collect()
    };
    let overlap = recall_at_k(&ids(&ra), &ids(&rb), k);
    Ok(format!("samples\t{}\nspearman\t{rho}\ntop{k}_overlap\t{overlap}\n", sa.len()))
}

fn eval(a: EvalArgs) -> Result<()> {
    if let Some(files) = &a.compare {
        return emit(None, &compare(&files[0], &files[1], a.k)?);
    }
    let cfg = match &a.experiment {
        Some(p) => ExperimentConfig::parse(&fs::read_to_string(p)?)?,
        None => ExperimentConfig::default(),
    };
    let report = run_experiment(&cfg, &a.workdir)?;
    fs::create_dir_all(&a.report_dir)?;
    fs::write(a.report_dir.join("report.txt"), report.text())?;
    fs::write(a.report_dir.join("summary.json"), report.summary_json())?;
    fs::write(a.report_dir.join("timings.tsv"), report.timings_text())?;
    print!("{}", report.text());
    eprint!("{}", report.timings_text());
    Ok(())
}

fn report(a: CacheDirArgs) -> Result<()> {
    let manifest = Manifest::read(&a.cache_dir)?;
    let r = storage_report(&manifest, &a.cache_dir)?;
    let f = &r.figures;
    let mut s = String::new();
    let _ = writeln!(s, "param_count\t{}", f.param_count);
    let _ = writeln!(s, "padded_len\t{}", f.padded_len);
    let _ = writeln!(s, "target_dim\t{}", f.target_dim);
    let _ = writeln!(s, "steps\t{}", f.steps);
    let _ = writeln!(s, "samples\t{}", r.samples);
    let _ = writeln!(s, "uncompressed_bytes_per_sample\t{}", f.uncompressed_per_sample);
    let _ = writeln!(s, "compressed_bytes_per_sample\t{}", f.compressed_per_sample);
    let _ = writeln!(s, "record_bytes\t{}", f.record_bytes);
    let _ = writeln!(s, "shard_bytes_expected\t{}", r.shard_bytes_expected);
    let _ = writeln!(s, "shard_bytes_actual\t{}", r.shard_bytes_actual);
    let _ = writeln!(s, "perm_file_bytes\t{}", r.perm_file_bytes);
    let _ = writeln!(s, "sign_file_bytes\t{}", r.sign_file_bytes);
    let _ = writeln!(s, "ratio\t{}", f.ratio);
    emit(None, &s)
}

fn validate_cache(a: CacheDirArgs) -> Result<()> {
    let manifest = Manifest::read(&a.cache_dir)?;
    let report = validate(&manifest, &a.cache_dir);
    for f in &report.findings {
        println!("{f}");
    }
    if report.passed() {
        println!("ok: 0 findings");
        Ok(())
    } else {
        Err(Error::Integrity {
            path: a.cache_dir,
            offset: report.findings.iter().find_map(|f| f.offset).unwrap_or(0),
            msg: format!("{} finding(s)", report.findings.len()),
        })
    }
}
