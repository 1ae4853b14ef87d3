//! Command-line surface. Exit codes: 0 success, 1 usage error, 2 data error.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::aggregation::{attention_entropy, AttentionMaps, FeatureMap};
use crate::error::{Error, Result};
use crate::io::{
    rankings_to_tsv, read_checkpoint, read_codebook, read_codes, read_ground_truth, read_json, read_manifest,
    read_rankings_tsv, read_tkfm, read_tkgd, write_checkpoint, write_codebook, write_codes, write_ground_truth,
    write_json, write_manifest, write_tkfm, write_tkgd, CodeFile, DescriptorFile, Manifest, ManifestEntry,
};
use crate::model::{ModelConfig, ModelParams};
use crate::parallel;
use crate::pipeline::{extract_index, scale_pyramid};
use crate::quantization::KMeansOptions;
use crate::retrieval::{
    bench, evaluate_map, memory_bytes, search_batch, ApVariant, DescriptorIndex, Protocol, SearchMode,
};
use crate::training::{grad_check_full_model, synth_generate, train, GradCheckOptions, Split, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

const DESCRIPTORS_FILE: &str = "descriptors.tkgd";
const CODEBOOK_FILE: &str = "codebook.tkpq";
const CODES_FILE: &str = "codes.tkpc";

#[derive(Debug, Parser)]
#[command(
    name = "token-agg",
    version,
    about = "Aggregate local features into global descriptors, index them and evaluate retrieval"
)]
struct Cli {
    /// Seed for every random choice; overrides seeds in configuration files.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic corpus: per-scale feature maps, manifest and ground truth.
    Synth(SynthArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradcheckArgs),
    /// Compute multi-scale global descriptors for manifest entries.
    Extract(ExtractArgs),
    /// Build a search index, optionally with product-quantized codes.
    Index(IndexArgs),
    /// Rank the indexed database for each query descriptor.
    Search(SearchArgs),
    /// Score rankings against ground truth with the Revisited mAP protocol.
    Eval(EvalArgs),
    /// Write tokenizer and refinement attention maps with their entropies.
    Inspect(InspectArgs),
    /// Report per-query search latency and descriptor memory.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Training configuration JSON; its `data` and `model.scales` sections are used.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Training configuration JSON; defaults apply when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Manifest of labelled training maps (the output of `synth`); the corpus
    /// is generated from the configuration when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Also write the per-epoch loss curve as JSON.
    #[arg(long)]
    curve: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    /// Model configuration JSON; the toy configuration is used when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    height: usize,
    #[arg(long, default_value_t = 5)]
    width: usize,
    /// Checked coordinates per tensor; all when absent.
    #[arg(long)]
    max_coords: Option<usize>,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

#[derive(Debug, Args)]
struct ExtractArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Checkpoint.
    #[arg(long)]
    model: PathBuf,
    /// Restrict to one split, e.g. `database` or `query`.
    #[arg(long)]
    split: Option<String>,
    /// Descriptor file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct IndexArgs {
    #[arg(long)]
    descriptors: PathBuf,
    /// Index directory.
    #[arg(long)]
    out: PathBuf,
    /// Product-quantize with this subvector dimension (1 or 8 in the usual setups).
    #[arg(long)]
    pq: Option<usize>,
}

#[derive(Debug, Args)]
struct SearchArgs {
    /// Index directory.
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    /// Results per query; the whole database when absent.
    #[arg(long)]
    k: Option<usize>,
    /// Search the PQ codes with asymmetric distances.
    #[arg(long)]
    pq: bool,
    /// Rankings TSV; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    rankings: PathBuf,
    #[arg(long)]
    ground_truth: PathBuf,
    #[arg(long, default_value = "medium")]
    protocol: Protocol,
    /// Mean precision at each positive instead of the trapezoidal rule.
    #[arg(long)]
    naive_ap: bool,
    /// Also write the full report as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct InspectArgs {
    /// Checkpoint.
    #[arg(long)]
    model: PathBuf,
    /// Feature map.
    #[arg(long)]
    features: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct BenchArgs {
    /// Index directory.
    #[arg(long)]
    index: Option<PathBuf>,
    #[arg(long)]
    queries: Option<PathBuf>,
    /// Benchmark the PQ codes.
    #[arg(long)]
    pq: bool,
    /// Report only the memory arithmetic for this many descriptors.
    #[arg(long)]
    size: Option<u64>,
    /// Descriptor dimension for `--size`.
    #[arg(long, default_value_t = 1024)]
    dim: u64,
    /// PQ subvector dimension for `--size`.
    #[arg(long)]
    sub_dim: Option<u64>,
    /// Also write the report as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

/// Parses `argv` (program name first), runs the subcommand and returns the exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    parallel::init_from_env();
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_DATA
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::Synth(a) => synth_cmd(a, seed),
        Command::Train(a) => train_cmd(a, seed),
        Command::Gradcheck(a) => gradcheck_cmd(a, seed),
        Command::Extract(a) => extract_cmd(a),
        Command::Index(a) => index_cmd(a, seed),
        Command::Search(a) => search_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Inspect(a) => inspect_cmd(a),
        Command::Bench(a) => bench_cmd(a),
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn load_train_config(path: Option<&Path>, seed: Option<u64>) -> Result<TrainConfig> {
    let mut cfg: TrainConfig = match path {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
        cfg.data.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn synth_cmd(a: SynthArgs, seed: Option<u64>) -> Result<()> {
    let cfg = load_train_config(a.config.as_deref(), seed)?;
    let corpus = synth_generate(&cfg.data)?;
    let features = a.out.join("features");
    create_dir(&features)?;
    let mut images = Vec::with_capacity(corpus.images.len());
    for img in &corpus.images {
        let mut files = Vec::with_capacity(cfg.model.scales.len());
        for (k, map) in scale_pyramid(&img.map, &cfg.model.scales)?.iter().enumerate() {
            let rel = format!("features/{}_s{k}.tkfm", img.id);
            write_tkfm(a.out.join(&rel), map)?;
            files.push(rel);
        }
        images.push(ManifestEntry {
            id: img.id.clone(),
            split: Some(img.split.as_str().to_string()),
            label: Some(img.label),
            files,
            skipped: None,
        });
    }
    write_manifest(
        a.out.join("manifest.json"),
        &Manifest {
            scales: cfg.model.scales.clone(),
            images,
        },
    )?;
    write_ground_truth(a.out.join("ground_truth.json"), &corpus.ground_truth)?;
    write_json(a.out.join("config.json"), &cfg)?;
    println!(
        "wrote {} images ({} scales) to {}",
        corpus.images.len(),
        cfg.model.scales.len(),
        a.out.display()
    );
    Ok(())
}

fn manifest_base(path: &Path) -> &Path {
    path.parent().unwrap_or(Path::new("."))
}

/// Unit-scale maps and labels of the manifest's training split.
fn manifest_training_pairs(path: &Path) -> Result<Vec<(FeatureMap, usize)>> {
    let m = read_manifest(path)?;
    let unit = m.unit_scale();
    let base = manifest_base(path);
    m.entries(Some(Split::Train.as_str()))
        .map(|e| {
            let label = e
                .label
                .ok_or_else(|| Error::Input(format!("training entry {} has no label", e.id)))?;
            Ok((read_tkfm(Manifest::resolve(base, &e.files[unit]))?, label))
        })
        .collect()
}

fn train_cmd(a: TrainArgs, seed: Option<u64>) -> Result<()> {
    let cfg = load_train_config(a.config.as_deref(), seed)?;
    let corpus = match &a.data {
        Some(p) => manifest_training_pairs(p)?,
        None => synth_generate(&cfg.data)?.training_pairs(),
    };
    let init = ModelParams::init(&cfg.model, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    let report = train(&corpus, init, &cfg)?;
    write_checkpoint(&a.out, &report.params)?;
    if let Some(p) = &a.curve {
        write_json(p, &report.curve)?;
    }
    let last = report.curve.last();
    println!(
        "trained {} steps on {} maps; final train loss {:.6}; checkpoint {}",
        report.steps,
        corpus.len(),
        last.map_or(f64::NAN, |e| e.train_loss),
        a.out.display()
    );
    Ok(())
}

/// The configuration the gradient check is specified at.
pub fn gradcheck_toy_config() -> ModelConfig {
    ModelConfig {
        channels: 16,
        tokens: 4,
        blocks: 2,
        heads: 2,
        dim: 8,
        num_classes: 5,
        ..ModelConfig::desk(16, 5)
    }
}

fn gradcheck_cmd(a: GradcheckArgs, seed: Option<u64>) -> Result<()> {
    let config: ModelConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => gradcheck_toy_config(),
    };
    let opts = GradCheckOptions {
        height: a.height,
        width: a.width,
        max_coords: a.max_coords,
        ..GradCheckOptions::default()
    };
    let report = grad_check_full_model(&config, seed.unwrap_or(0), &opts)?;
    println!("tensor\tcoords\tmax_rel_err\tmax_abs_grad");
    for t in &report.tensors {
        println!(
            "{}\t{}\t{:.3e}\t{:.3e}",
            t.name, t.coords_checked, t.max_rel_err, t.grad_abs_max
        );
    }
    let worst = report.max_rel_err();
    println!("max_rel_err\t{worst:.3e}\tloss\t{:.6}", report.loss);
    if worst >= a.tolerance {
        return Err(Error::Evaluation(format!(
            "relative error {worst:.3e} exceeds tolerance {:.1e}",
            a.tolerance
        )));
    }
    Ok(())
}

fn extract_cmd(a: ExtractArgs) -> Result<()> {
    let model = read_checkpoint(&a.model)?;
    let m = read_manifest(&a.manifest)?;
    let base = manifest_base(&a.manifest);
    let items = m
        .entries(a.split.as_deref())
        .map(|e| {
            let maps = e
                .files
                .iter()
                .map(|f| read_tkfm(Manifest::resolve(base, f)))
                .collect::<Result<Vec<_>>>()?;
            Ok((e.id.clone(), maps))
        })
        .collect::<Result<Vec<_>>>()?;
    if items.is_empty() {
        return Err(Error::Input("no manifest entries selected".into()));
    }
    let index = extract_index(&model, &items)?;
    write_tkgd(
        &a.out,
        &DescriptorFile {
            ids: index.ids().to_vec(),
            dim: index.dim(),
            data: index.matrix().to_vec(),
        },
    )?;
    println!(
        "wrote {} descriptors of dimension {} to {}",
        index.len(),
        index.dim(),
        a.out.display()
    );
    Ok(())
}

fn load_descriptors(path: &Path) -> Result<DescriptorIndex> {
    let d = read_tkgd(path)?;
    DescriptorIndex::new(d.ids, d.dim, d.data)
}

fn index_cmd(a: IndexArgs, seed: Option<u64>) -> Result<()> {
    let mut index = load_descriptors(&a.descriptors)?;
    create_dir(&a.out)?;
    write_tkgd(
        a.out.join(DESCRIPTORS_FILE),
        &DescriptorFile {
            ids: index.ids().to_vec(),
            dim: index.dim(),
            data: index.matrix().to_vec(),
        },
    )?;
    println!("exact: {} bytes", index.memory_bytes(SearchMode::Exact)?);
    if let Some(s) = a.pq {
        let opts = KMeansOptions {
            seed: seed.unwrap_or(0),
            ..KMeansOptions::default()
        };
        index.build_pq(s, &opts)?;
        let pq = index.pq().expect("built above");
        write_codebook(a.out.join(CODEBOOK_FILE), &pq.codebook)?;
        write_codes(
            a.out.join(CODES_FILE),
            &CodeFile {
                count: index.len(),
                subquantizers: pq.codebook.num_subquantizers(),
                codes: pq.codes.clone(),
            },
        )?;
        println!("pq (s = {s}): {} bytes", index.memory_bytes(SearchMode::Pq)?);
    }
    Ok(())
}

fn load_index(dir: &Path, with_pq: bool) -> Result<DescriptorIndex> {
    let mut index = load_descriptors(&dir.join(DESCRIPTORS_FILE))?;
    if with_pq {
        let codebook = read_codebook(dir.join(CODEBOOK_FILE))?;
        let codes = read_codes(dir.join(CODES_FILE))?;
        if codes.count != index.len() {
            return Err(Error::Input(format!(
                "{} codes for {} descriptors",
                codes.count,
                index.len()
            )));
        }
        index.attach_pq(codebook, codes.codes)?;
    }
    Ok(index)
}

fn mode(pq: bool) -> SearchMode {
    if pq {
        SearchMode::Pq
    } else {
        SearchMode::Exact
    }
}

fn search_cmd(a: SearchArgs) -> Result<()> {
    let index = load_index(&a.index, a.pq)?;
    let queries = load_descriptors(&a.queries)?;
    let k = a.k.unwrap_or(index.len());
    let rankings = search_batch(&index, &queries, k, mode(a.pq))?;
    let tsv = rankings_to_tsv(&rankings);
    match &a.out {
        Some(p) => write_text(p, &tsv)?,
        None => print!("{tsv}"),
    }
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let rankings = read_rankings_tsv(&a.rankings)?;
    let gt = read_ground_truth(&a.ground_truth)?;
    let variant = if a.naive_ap {
        ApVariant::Naive
    } else {
        ApVariant::Trapezoidal
    };
    let report = evaluate_map(&rankings, &gt, a.protocol, variant)?;
    for q in &report.per_query {
        match q.ap {
            Some(ap) => println!("ap\t{}\t{ap:.6}", q.id),
            None => println!("ap\t{}\t-", q.id),
        }
    }
    let name = match a.protocol {
        Protocol::Medium => "medium",
        Protocol::Hard => "hard",
    };
    println!("mAP\t{name}\t{:.6}\t{} queries", report.map, report.evaluated);
    if let Some(p) = &a.json {
        write_json(p, &report)?;
    }
    Ok(())
}

/// `L×H×W` feature map with one channel per token.
fn maps_as_features(a: &AttentionMaps) -> Result<FeatureMap> {
    FeatureMap::new(a.tokens(), a.height, a.width, a.values.data().to_vec())
}

fn entropy_lines(label: &str, a: &AttentionMaps) -> String {
    attention_entropy(a)
        .iter()
        .enumerate()
        .map(|(i, h)| format!("{label}\t{i}\t{h:.6}\n"))
        .collect()
}

fn inspect_cmd(a: InspectArgs) -> Result<()> {
    let model = read_checkpoint(&a.model)?;
    let f = read_tkfm(&a.features)?;
    let (tokenizer, refined) = model.attention(&f)?;
    create_dir(&a.out)?;
    write_tkfm(a.out.join("attention.tkfm"), &maps_as_features(&tokenizer)?)?;
    let mut text = String::from("maps\ttoken\tentropy\n");
    text.push_str(&entropy_lines("tokenizer", &tokenizer));
    if let Some(r) = &refined {
        write_tkfm(a.out.join("refined_attention.tkfm"), &maps_as_features(r)?)?;
        text.push_str(&entropy_lines("refined", r));
    }
    write_text(&a.out.join("entropy.txt"), &text)?;
    print!("{text}");
    Ok(())
}

#[derive(Serialize)]
struct MemoryReport {
    descriptors: u64,
    dim: u64,
    sub_dim: Option<u64>,
    memory_bytes: u64,
}

fn bench_cmd(a: BenchArgs) -> Result<()> {
    if let Some(n) = a.size {
        if a.sub_dim.is_some_and(|s| s == 0 || !a.dim.is_multiple_of(s)) {
            return Err(Error::Config(format!("sub_dim must divide {}", a.dim)));
        }
        let bytes = memory_bytes(n, a.dim, a.sub_dim);
        println!("descriptors\tdim\tsub_dim\tmemory_bytes\tmemory_gb\tmemory_gib");
        println!(
            "{n}\t{}\t{}\t{bytes}\t{:.4}\t{:.4}",
            a.dim,
            a.sub_dim.map_or("-".to_string(), |s| s.to_string()),
            bytes as f64 / 1e9,
            bytes as f64 / (1u64 << 30) as f64
        );
        if let Some(p) = &a.json {
            write_json(
                p,
                &MemoryReport {
                    descriptors: n,
                    dim: a.dim,
                    sub_dim: a.sub_dim,
                    memory_bytes: bytes,
                },
            )?;
        }
        return Ok(());
    }
    let (Some(dir), Some(queries)) = (&a.index, &a.queries) else {
        return Err(Error::Config("bench needs --index and --queries, or --size".into()));
    };
    let index = load_index(dir, a.pq)?;
    let queries = load_descriptors(queries)?;
    let report = parallel::with_threads(1, || bench(&index, &queries, mode(a.pq)))?;
    print!("{}", report.to_text());
    if let Some(p) = &a.json {
        write_json(p, &report)?;
    }
    Ok(())
}
