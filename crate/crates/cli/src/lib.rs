//! `tli` command-line front end.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde_json::json;
use tli_core::{
    fixtures, match_models, read_store, select_best_teacher, transfer, write_store, GraphDoc,
    InjectionConfig, Model, NormPolicy, TransferConfig,
};

pub const GRAPH_EXT: &str = ".tligraph.json";
pub const TENSORS_EXT: &str = ".tlitensors";

#[derive(Parser, Debug)]
#[command(name = "tli", version, about = "Data-free weight transfer between neural network architectures")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Print the aggregate similarity of a student to a teacher
    Score(ScoreArgs),
    /// Initialize a student's weights from a teacher
    Transfer(TransferArgs),
    /// Directed similarity matrix for every model in a directory
    Matrix(MatrixArgs),
    /// Dump submodules and execution paths as JSON
    Inspect(InspectArgs),
    /// Pick the most similar teacher from a library
    Select(SelectArgs),
    /// Write the built-in toy architectures with random weights
    Fixtures(FixturesArgs),
}

#[derive(Args, Debug)]
pub struct MatchFlags {
    /// Number of teacher candidates kept per student tensor
    #[arg(long = "topk", default_value_t = 1)]
    pub topk: usize,
    /// Minimum match score for a candidate to count
    #[arg(long = "min-score", default_value_t = 0.0)]
    pub min_score: f64,
}

#[derive(Args, Debug)]
pub struct ScoreArgs {
    /// Student graph (.tligraph.json)
    pub student: PathBuf,
    /// Teacher graph (.tligraph.json)
    pub teacher: PathBuf,
    /// Student tensors; defaults to a sibling .tlitensors file if present
    #[arg(long)]
    pub student_tensors: Option<PathBuf>,
    /// Teacher tensors; defaults to a sibling .tlitensors file if present
    #[arg(long)]
    pub teacher_tensors: Option<PathBuf>,
    #[command(flatten)]
    pub matching: MatchFlags,
    /// Write the full match report as JSON
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TransferArgs {
    /// Student graph (.tligraph.json)
    pub student: PathBuf,
    /// Teacher graph; its tensors are required
    pub teacher: PathBuf,
    /// Student tensors; defaults to a sibling .tlitensors file if present
    #[arg(long)]
    pub student_tensors: Option<PathBuf>,
    /// Teacher tensors; defaults to a sibling .tlitensors file if present
    #[arg(long)]
    pub teacher_tensors: Option<PathBuf>,
    /// Output tensor store for the student
    #[arg(long, short)]
    pub out: PathBuf,
    /// Weight of the center crop in the crop/resize blend
    #[arg(long, default_value_t = 0.75)]
    pub lambda: f64,
    /// Softmax temperature when mixing top-k candidates
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    #[command(flatten)]
    pub matching: MatchFlags,
    /// transfer_all, skip_norm_params or skip_running_stats
    #[arg(long, default_value = "transfer_all")]
    pub norm_policy: NormPolicy,
    /// Write the transfer report as JSON
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct MatrixArgs {
    /// Directory holding *.tligraph.json files (and optional .tlitensors)
    pub models_dir: PathBuf,
    /// CSV output path
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    /// Model graph (.tligraph.json)
    pub model: PathBuf,
    /// Tensors supplying parameter shapes; defaults to a sibling .tlitensors file
    #[arg(long)]
    pub tensors: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SelectArgs {
    /// Student graph (.tligraph.json)
    pub student: PathBuf,
    /// Candidate teacher graphs
    #[arg(required = true)]
    pub teachers: Vec<PathBuf>,
    #[command(flatten)]
    pub matching: MatchFlags,
}

#[derive(Args, Debug)]
pub struct FixturesArgs {
    /// Output directory
    #[arg(long, short)]
    pub out: PathBuf,
    /// Base seed for the random weights
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn run(cli: Cli, stdout: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Score(a) => cmd_score(a, stdout),
        Command::Transfer(a) => cmd_transfer(a, stdout),
        Command::Matrix(a) => cmd_matrix(a, stdout),
        Command::Inspect(a) => cmd_inspect(a, stdout),
        Command::Select(a) => cmd_select(a, stdout),
        Command::Fixtures(a) => cmd_fixtures(a, stdout),
    }
}

/// `dir/name.tligraph.json` → `dir/name.tlitensors`.
pub fn sibling_tensors(graph: &Path) -> PathBuf {
    let name = graph
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let stem = name.strip_suffix(GRAPH_EXT).unwrap_or(&name);
    graph.with_file_name(format!("{stem}{TENSORS_EXT}"))
}

pub fn load_graph(path: &Path) -> Result<GraphDoc> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    GraphDoc::from_json(&text).with_context(|| format!("{}", path.display()))
}

/// Loads a graph with its tensors. An explicit tensor path must exist; the
/// sibling file is used only when present. `require_tensors` fails if neither.
pub fn load_model(graph: &Path, tensors: Option<&Path>, require_tensors: bool) -> Result<Model> {
    let g = load_graph(graph)?;
    let tensors_path = match tensors {
        Some(p) => Some(p.to_path_buf()),
        None => Some(sibling_tensors(graph)).filter(|p| p.is_file()),
    };
    let store = match &tensors_path {
        Some(p) => {
            let bytes = fs::read(p).with_context(|| format!("reading {}", p.display()))?;
            Some(read_store(&bytes).with_context(|| format!("{}", p.display()))?)
        }
        None if require_tensors => bail!(
            "{}: no tensor store (pass --*-tensors or place {} next to the graph)",
            graph.display(),
            sibling_tensors(graph).display()
        ),
        None => None,
    };
    Model::new(g, store).with_context(|| format!("{}", graph.display()))
}

fn config(matching: &MatchFlags) -> TransferConfig {
    TransferConfig {
        injection: InjectionConfig {
            k: matching.topk,
            ..Default::default()
        },
        min_score: matching.min_score,
        ..Default::default()
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    write_atomic(path, text.as_bytes())
}

/// Writes through a temporary file in the target directory, so a failure
/// leaves no partial output behind.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)
        .with_context(|| format!("creating temporary file in {}", dir.display()))?;
    tmp.write_all(bytes)?;
    tmp.persist(path)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn cmd_score(a: ScoreArgs, out: &mut dyn Write) -> Result<()> {
    let student = load_model(&a.student, a.student_tensors.as_deref(), false)?;
    let teacher = load_model(&a.teacher, a.teacher_tensors.as_deref(), false)?;
    let report = match_models(&student, &teacher, &config(&a.matching))?;
    if let Some(path) = &a.report {
        write_json(path, &report)?;
    }
    writeln!(out, "tli_score={:.4}", report.tli_score)?;
    Ok(())
}

fn cmd_transfer(a: TransferArgs, out: &mut dyn Write) -> Result<()> {
    let student = load_model(&a.student, a.student_tensors.as_deref(), true)?;
    let teacher = load_model(&a.teacher, a.teacher_tensors.as_deref(), true)?;
    let mut cfg = config(&a.matching);
    cfg.injection.lambda = a.lambda;
    cfg.injection.temperature = a.temperature;
    cfg.norm_policy = a.norm_policy;
    let outcome = transfer(&student, &teacher, &cfg)?;
    let bytes = write_store(&outcome.store);
    if let Some(path) = &a.report {
        write_json(path, &outcome.report)?;
    }
    write_atomic(&a.out, &bytes)?;
    writeln!(out, "tli_score={:.4}", outcome.report.matching.tli_score)?;
    Ok(())
}

/// Graph files in `dir`, sorted by model name.
pub fn list_models(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut models = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        if let Some(stem) = name.strip_suffix(GRAPH_EXT) {
            if path.is_file() {
                models.push((stem.to_string(), path));
            }
        }
    }
    models.sort();
    if models.is_empty() {
        bail!("{}: no *{GRAPH_EXT} files", dir.display());
    }
    Ok(models)
}

/// Rows are students, columns teachers, in sorted name order.
pub fn similarity_matrix(models: &[Model]) -> Result<Vec<Vec<f64>>> {
    let cfg = TransferConfig::default();
    models
        .par_iter()
        .map(|s| {
            models
                .iter()
                .map(|t| Ok(match_models(s, t, &cfg)?.tli_score))
                .collect()
        })
        .collect()
}

fn cmd_matrix(a: MatrixArgs, out: &mut dyn Write) -> Result<()> {
    let entries = list_models(&a.models_dir)?;
    let models = entries
        .iter()
        .map(|(_, path)| load_model(path, None, false))
        .collect::<Result<Vec<_>>>()?;
    let matrix = similarity_matrix(&models)?;

    let mut buf = Vec::new();
    writeln!(
        buf,
        "# directed tli_score: row = student, column = teacher; not symmetric in general"
    )?;
    {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::CRLF)
            .from_writer(&mut buf);
        let mut header = vec!["model".to_string()];
        header.extend(entries.iter().map(|(n, _)| n.clone()));
        w.write_record(&header)?;
        for ((name, _), row) in entries.iter().zip(&matrix) {
            let mut rec = vec![name.clone()];
            rec.extend(row.iter().map(|v| format!("{v:.4}")));
            w.write_record(&rec)?;
        }
        w.flush()?;
    }
    write_atomic(&a.out, &buf)?;
    writeln!(out, "wrote {}x{} matrix to {}", models.len(), models.len(), a.out.display())?;
    Ok(())
}

fn cmd_inspect(a: InspectArgs, out: &mut dyn Write) -> Result<()> {
    let model = load_model(&a.model, a.tensors.as_deref(), false)?;
    let dump = json!({
        "name": model.graph().name(),
        "topo_order": model.graph().topo_order(),
        "param_count": model.paths().len(),
        "submodules": model.submodules(),
        "paths": model.paths(),
    });
    writeln!(out, "{}", serde_json::to_string_pretty(&dump)?)?;
    Ok(())
}

fn cmd_select(a: SelectArgs, out: &mut dyn Write) -> Result<()> {
    let student = load_model(&a.student, None, false)?;
    let teachers = a
        .teachers
        .iter()
        .map(|p| load_model(p, None, false))
        .collect::<Result<Vec<_>>>()?;
    let (idx, score) = select_best_teacher(&student, &teachers, &config(&a.matching))?;
    writeln!(out, "best={} index={idx} tli_score={score:.4}", a.teachers[idx].display())?;
    Ok(())
}

fn cmd_fixtures(a: FixturesArgs, out: &mut dyn Write) -> Result<()> {
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    for (i, g) in fixtures::toy_zoo().iter().enumerate() {
        let graph_path = a.out.join(format!("{}{GRAPH_EXT}", g.name()));
        write_atomic(&graph_path, g.to_json().as_bytes())?;
        let store = fixtures::random_store(g, a.seed.wrapping_add(i as u64));
        write_atomic(&sibling_tensors(&graph_path), &write_store(&store))?;
        writeln!(out, "{}", graph_path.display())?;
    }
    Ok(())
}
