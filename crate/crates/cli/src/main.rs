use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cfx_core::data::{gen_shapes, write_idx, ShapeGrammar};
use cfx_core::eval::relaxation_fidelity;
use cfx_core::explain::{read_explanation, render_explanation, write_explanation, HighlightMode, ReceptiveFieldMap};
use cfx_core::image::Geometry;
use cfx_core::nn::{load_model, reference_extractor, reference_head, save_model, train};
use cfx_core::pipeline::{
    batch_explain, evaluate, explain_pair, fidelity_instances, parse_image_id, predict_all, run_pipeline,
    sample_pairs, write_reports, Pair, RunConfig,
};
use cfx_core::rng::substream;
use cfx_core::search::{ExclusionPolicy, StopRule, Strategy};
use cfx_core::{Error, Result};
use clap::{Args, Parser, Subcommand};
use rand::Rng;
use serde::de::DeserializeOwned;
use serde_json::json;

#[derive(Parser)]
#[command(name = "cfx", version, about = "Explain CNN decisions by swapping feature cells with a distractor image")]
struct Cli {
    /// Seed for every random stage.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic shapes dataset as IDX files.
    GenShapes(GenShapesArgs),
    /// Train the reference CNN.
    Train(TrainArgs),
    /// Explain one query image against a distractor.
    Explain(ExplainArgs),
    /// Explain sampled query/distractor pairs.
    BatchExplain(BatchArgs),
    /// Compute metric reports for a directory of records.
    Evaluate(EvaluateArgs),
    /// Compare relaxed and exhaustive best-edit search.
    Fidelity(FidelityArgs),
    /// Re-render rasters for existing records.
    Render(RenderArgs),
    /// Sample pairs, explain and evaluate in one go.
    Run(RunArgs),
}

fn parse_kebab<T: DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.into())).map_err(|e| e.to_string())
}

#[derive(Args)]
struct DataArgs {
    /// IDX image file.
    #[arg(long)]
    images: Option<PathBuf>,
    /// IDX label file.
    #[arg(long)]
    labels: Option<PathBuf>,
}

#[derive(Args)]
struct ModelArg {
    /// Model manifest (JSON).
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Args)]
struct SearchArgs {
    /// exhaustive | relaxed
    #[arg(long, value_parser = parse_kebab::<Strategy>)]
    strategy: Option<Strategy>,
    /// query-cells-only | query-and-distractor-cells
    #[arg(long, value_parser = parse_kebab::<ExclusionPolicy>)]
    exclusion: Option<ExclusionPolicy>,
    /// argmax | pairwise
    #[arg(long, value_parser = parse_kebab::<StopRule>)]
    stop_rule: Option<StopRule>,
    #[arg(long)]
    max_edits: Option<usize>,
    /// Evaluate candidates on one thread.
    #[arg(long)]
    serial: bool,
}

#[derive(Args)]
struct RenderFlags {
    /// Skip raster output.
    #[arg(long)]
    no_render: bool,
    /// hard-box | soft-box
    #[arg(long, value_parser = parse_kebab::<HighlightMode>)]
    mode: Option<HighlightMode>,
}

#[derive(Args)]
struct GenShapesArgs {
    #[arg(long, default_value_t = 1000)]
    count: usize,
    /// Size of an additional test split; 0 writes none.
    #[arg(long, default_value_t = 0)]
    test_count: usize,
    #[arg(long, default_value_t = 28)]
    height: usize,
    #[arg(long, default_value_t = 28)]
    width: usize,
    #[arg(long, default_value_t = 3)]
    channels: usize,
    /// single | position | kind | color
    #[arg(long, default_value = "position", value_parser = parse_kebab::<ShapeGrammar>)]
    grammar: ShapeGrammar,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    test_images: Option<PathBuf>,
    #[arg(long)]
    test_labels: Option<PathBuf>,
    /// Output model manifest path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Args)]
struct ExplainArgs {
    #[command(flatten)]
    model: ModelArg,
    #[command(flatten)]
    data: DataArgs,
    /// Dataset index of the query image.
    #[arg(long)]
    query: usize,
    /// Dataset index of the distractor image.
    #[arg(long, conflicts_with = "target", required_unless_present = "target")]
    distractor: Option<usize>,
    /// Target class; a distractor predicted as it is drawn at random.
    #[arg(long)]
    target: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    search: SearchArgs,
    #[command(flatten)]
    render: RenderFlags,
}

#[derive(Args)]
struct BatchArgs {
    #[command(flatten)]
    model: ModelArg,
    #[command(flatten)]
    data: DataArgs,
    /// Number of pairs.
    #[arg(long)]
    pairs: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    search: SearchArgs,
    #[command(flatten)]
    render: RenderFlags,
}

#[derive(Args)]
struct EvalFlags {
    #[arg(long)]
    annotations: Option<PathBuf>,
    /// Queries for the agreement metrics; 0 skips them.
    #[arg(long)]
    agreement_queries: Option<usize>,
    #[arg(long)]
    distractors_per_query: Option<usize>,
    /// Best-edit problems for relaxation fidelity; 0 skips it.
    #[arg(long)]
    fidelity_instances: Option<usize>,
    #[arg(long)]
    keypoint_radius: Option<f64>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    model: ModelArg,
    #[command(flatten)]
    data: DataArgs,
    /// Directory of explanation records.
    #[arg(long)]
    records: PathBuf,
    /// Report directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    eval: EvalFlags,
}

#[derive(Args)]
struct FidelityArgs {
    #[command(flatten)]
    model: ModelArg,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    instances: Option<usize>,
    /// Strategy compared against exhaustive search.
    #[arg(long, default_value = "relaxed", value_parser = parse_kebab::<Strategy>)]
    against: Strategy,
    /// Report directory; the report is printed either way.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RenderArgs {
    #[command(flatten)]
    model: ModelArg,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    records: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// hard-box | soft-box
    #[arg(long, value_parser = parse_kebab::<HighlightMode>)]
    mode: Option<HighlightMode>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    model: ModelArg,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    pairs: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    search: SearchArgs,
    #[command(flatten)]
    render: RenderFlags,
    #[command(flatten)]
    eval: EvalFlags,
}

fn base_config(cli: &Cli) -> Result<RunConfig> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
        config.train.seed = seed;
    }
    Ok(config)
}

fn apply_model(config: &mut RunConfig, m: &ModelArg) {
    if let Some(p) = &m.model {
        config.model = Some(p.clone());
    }
}

fn apply_data(config: &mut RunConfig, d: &DataArgs) {
    if let Some(p) = &d.images {
        config.data.images = Some(p.clone());
    }
    if let Some(p) = &d.labels {
        config.data.labels = Some(p.clone());
    }
}

fn apply_search(config: &mut RunConfig, s: &SearchArgs) -> Result<()> {
    let c = &mut config.search;
    if let Some(v) = s.strategy {
        c.strategy = v;
    }
    if let Some(v) = s.exclusion {
        c.exclusion = v;
    }
    if let Some(v) = s.stop_rule {
        c.stop_rule = v;
    }
    if s.max_edits.is_some() {
        c.max_edits = s.max_edits;
    }
    if s.serial {
        c.parallel = false;
    }
    c.relaxed.validate()
}

fn apply_render(config: &mut RunConfig, r: &RenderFlags) {
    if r.no_render {
        config.render.enabled = false;
    }
    if let Some(m) = r.mode {
        config.render.mode = m;
    }
}

fn apply_eval(config: &mut RunConfig, e: &EvalFlags) {
    let c = &mut config.eval;
    if let Some(p) = &e.annotations {
        config.data.annotations = Some(p.clone());
    }
    if let Some(v) = e.agreement_queries {
        c.agreement_queries = v;
    }
    if let Some(v) = e.distractors_per_query {
        c.distractors_per_query = v;
    }
    if let Some(v) = e.fidelity_instances {
        c.fidelity_instances = v;
    }
    if e.keypoint_radius.is_some() {
        c.keypoint_radius = e.keypoint_radius;
    }
}

fn print(value: serde_json::Value) {
    println!("{value}");
}

fn paths(ps: &[PathBuf]) -> Vec<String> {
    ps.iter().map(|p| p.display().to_string()).collect()
}

fn gen_shapes_cmd(cli: &Cli, a: &GenShapesArgs) -> Result<()> {
    let config = base_config(cli)?;
    let geometry = Geometry::new(a.height, a.width, a.channels);
    fs::create_dir_all(&a.out).map_err(|e| Error::Io {
        path: a.out.clone(),
        source: e,
    })?;
    let mut written = Vec::new();
    for (split, count, seed) in [
        ("train", a.count, config.seed),
        ("test", a.test_count, config.seed ^ 0x7465_7374),
    ] {
        if count == 0 {
            continue;
        }
        let data = gen_shapes(count, geometry, a.grammar, seed)?;
        let ip = a.out.join(format!("{split}-images.idx"));
        let lp = a.out.join(format!("{split}-labels.idx"));
        write_idx(&data, &ip, &lp)?;
        written.extend([ip, lp]);
    }
    print(json!({ "command": "gen-shapes", "files": paths(&written) }));
    Ok(())
}

fn train_cmd(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let mut config = base_config(cli)?;
    apply_data(&mut config, &a.data);
    if let Some(v) = a.epochs {
        config.train.epochs = v;
    }
    if let Some(v) = a.learning_rate {
        config.train.learning_rate = v;
    }
    if let Some(v) = a.batch_size {
        config.train.batch_size = v;
    }
    if let Some(p) = &a.test_images {
        config.data.test_images = Some(p.clone());
    }
    if let Some(p) = &a.test_labels {
        config.data.test_labels = Some(p.clone());
    }
    let train_set = config.dataset()?;
    let test_set = match (&config.data.test_images, &config.data.test_labels) {
        (Some(i), Some(l)) => Some(cfx_core::data::load_idx(i, l)?),
        (None, None) => None,
        _ => return Err(Error::Config("test set needs both `test_images` and `test_labels`".into())),
    };
    let classes = train_set.classes().max(test_set.as_ref().map_or(0, |t| t.classes()));
    let trained = train(
        &reference_extractor(),
        &reference_head(classes),
        classes,
        &train_set,
        test_set.as_ref(),
        &config.train,
    )?;
    save_model(&trained.model, &a.out)?;
    print(json!({
        "command": "train",
        "model": a.out.display().to_string(),
        "report": serde_json::to_value(&trained.report).expect("report serializes"),
    }));
    Ok(())
}

fn explain_cmd(cli: &Cli, a: &ExplainArgs) -> Result<()> {
    let mut config = base_config(cli)?;
    apply_model(&mut config, &a.model);
    apply_data(&mut config, &a.data);
    apply_search(&mut config, &a.search)?;
    apply_render(&mut config, &a.render);
    let out = a.out.clone().unwrap_or_else(|| config.output.clone());
    let model = load_model(config.model_path()?)?;
    let data = config.dataset()?;
    let in_range = |what: &'static str, i: usize| {
        if i < data.len() {
            Ok(i)
        } else {
            Err(Error::Bounds {
                what,
                index: i,
                len: data.len(),
            })
        }
    };
    let query = in_range("query index", a.query)?;
    let (distractor, target) = match (a.distractor, a.target) {
        (Some(d), _) => {
            let d = in_range("distractor index", d)?;
            (d, model.predict(&data.image(d))?)
        }
        (None, Some(t)) => {
            let predictions = predict_all(&model, &data)?;
            let pool: Vec<usize> = (0..data.len()).filter(|&i| predictions[i] == t && i != query).collect();
            if pool.is_empty() {
                return Err(Error::InvalidValue(format!("no image is predicted as class {t}")));
            }
            let mut rng = substream(config.seed, "explain");
            (pool[rng.gen_range(0..pool.len())], t)
        }
        (None, None) => unreachable!("clap requires one of --distractor / --target"),
    };
    let pair = Pair {
        query,
        distractor,
        target,
    };
    let result = explain_pair(&model, &data, pair, &config.search)?;
    let rf = ReceptiveFieldMap::for_model(&model)?;
    let record = cfx_core::explain::ExplanationRecord::new(&result, &rf, &config.search)?;
    let rendered = config
        .render
        .enabled
        .then(|| render_explanation(&result, &data.image(query), &data.image(distractor), &rf, config.render.mode))
        .transpose()?;
    let stem = format!("explain-{query:05}-{distractor:05}");
    let written = write_explanation(&record, rendered.as_ref(), &out, &stem)?;
    print(json!({
        "command": "explain",
        "record": written.record.display().to_string(),
        "rasters": paths(&written.rasters),
        "status": record.status,
        "edits": record.edits.len(),
    }));
    Ok(())
}

fn batch_cmd(cli: &Cli, a: &BatchArgs) -> Result<()> {
    let mut config = base_config(cli)?;
    apply_model(&mut config, &a.model);
    apply_data(&mut config, &a.data);
    apply_search(&mut config, &a.search)?;
    apply_render(&mut config, &a.render);
    if let Some(n) = a.pairs {
        config.pairs.count = n;
    }
    if let Some(o) = &a.out {
        config.output = o.clone();
    }
    let model = load_model(config.model_path()?)?;
    let data = config.dataset()?;
    let predictions = predict_all(&model, &data)?;
    let pairs = sample_pairs(&predictions, model.classes(), &config.pairs, None, None, config.seed)?;
    let render = config.render.enabled.then_some(config.render.mode);
    let out = batch_explain(&model, &data, &pairs, &config.search, render, &config.output)?;
    let flipped = out.results.iter().filter(|r| r.flipped()).count();
    print(json!({
        "command": "batch-explain",
        "records": out.files.len(),
        "flipped": flipped,
        "output": config.output.display().to_string(),
    }));
    Ok(())
}

fn record_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::InvalidValue(format!("no records in {}", dir.display())));
    }
    Ok(files)
}

fn evaluate_cmd(cli: &Cli, a: &EvaluateArgs) -> Result<()> {
    let mut config = base_config(cli)?;
    apply_model(&mut config, &a.model);
    apply_data(&mut config, &a.data);
    apply_eval(&mut config, &a.eval);
    let model = load_model(config.model_path()?)?;
    let data = config.dataset()?;
    let predictions = predict_all(&model, &data)?;
    let mut results = Vec::new();
    let mut pairs = Vec::new();
    for path in record_files(&a.records)? {
        let record = read_explanation(&path)?;
        let id = |v: &Option<String>| -> Result<usize> {
            let i = parse_image_id(v.as_deref().unwrap_or(""))?;
            if i >= data.len() {
                return Err(Error::Bounds {
                    what: "record image id",
                    index: i,
                    len: data.len(),
                });
            }
            Ok(i)
        };
        pairs.push(Pair {
            query: id(&record.query_id)?,
            distractor: id(&record.distractor_id)?,
            target: record.target_class,
        });
        config.search = record.config.clone();
        results.push(record.to_result());
    }
    let reports = evaluate(&model, &data, &predictions, &pairs, &results, &config)?;
    let out = a.out.clone().unwrap_or_else(|| config.output.join("reports"));
    let files = write_reports(&reports, &out)?;
    print(json!({
        "command": "evaluate",
        "reports": paths(&files),
        "values": reports.iter().map(|r| json!({ "metric": r.metric, "value": r.value })).collect::<Vec<_>>(),
    }));
    Ok(())
}

fn fidelity_cmd(cli: &Cli, a: &FidelityArgs) -> Result<()> {
    let mut config = base_config(cli)?;
    apply_model(&mut config, &a.model);
    apply_data(&mut config, &a.data);
    let n = a.instances.unwrap_or(config.eval.fidelity_instances);
    let model = load_model(config.model_path()?)?;
    let data = config.dataset()?;
    let predictions = predict_all(&model, &data)?;
    let mut pair_config = config.pairs.clone();
    pair_config.count = n;
    let pairs = sample_pairs(&predictions, model.classes(), &pair_config, None, None, config.seed)?;
    let instances = fidelity_instances(&model, &data, &pairs)?;
    let report = relaxation_fidelity(&model, &instances, a.against, &config.search.relaxed)?;
    if let Some(out) = &a.out {
        write_reports(std::slice::from_ref(&report), out)?;
    }
    print(json!({
        "command": "fidelity",
        "match_rate": report.value,
        "mean_probability_ratio": report.details.get("mean_probability_ratio"),
        "instances": report.samples,
    }));
    Ok(())
}

fn render_cmd(cli: &Cli, a: &RenderArgs) -> Result<()> {
    let mut config = base_config(cli)?;
    apply_model(&mut config, &a.model);
    apply_data(&mut config, &a.data);
    if let Some(m) = a.mode {
        config.render.mode = m;
    }
    let model = load_model(config.model_path()?)?;
    let data = config.dataset()?;
    let rf = ReceptiveFieldMap::for_model(&model)?;
    let mut written = Vec::new();
    for path in record_files(&a.records)? {
        let record = read_explanation(&path)?;
        let image = |v: &Option<String>| -> Result<_> {
            let i = parse_image_id(v.as_deref().unwrap_or(""))?;
            if i >= data.len() {
                return Err(Error::Bounds {
                    what: "record image id",
                    index: i,
                    len: data.len(),
                });
            }
            Ok(data.image(i))
        };
        let rendered = render_explanation(
            &record.to_result(),
            &image(&record.query_id)?,
            &image(&record.distractor_id)?,
            &rf,
            config.render.mode,
        )?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("record");
        written.extend(write_explanation(&record, Some(&rendered), &a.out, stem)?.rasters);
    }
    print(json!({ "command": "render", "rasters": paths(&written) }));
    Ok(())
}

fn run_cmd(cli: &Cli, a: &RunArgs) -> Result<()> {
    let mut config = base_config(cli)?;
    apply_model(&mut config, &a.model);
    apply_data(&mut config, &a.data);
    apply_search(&mut config, &a.search)?;
    apply_render(&mut config, &a.render);
    apply_eval(&mut config, &a.eval);
    if let Some(n) = a.pairs {
        config.pairs.count = n;
    }
    if let Some(o) = &a.out {
        config.output = o.clone();
    }
    let summary = run_pipeline(&config)?;
    print(json!({
        "command": "run",
        "records": summary.records.len(),
        "reports": paths(&summary.reports),
        "values": summary.metrics.iter().map(|r| json!({ "metric": r.metric, "value": r.value })).collect::<Vec<_>>(),
    }));
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenShapes(a) => gen_shapes_cmd(cli, a),
        Command::Train(a) => train_cmd(cli, a),
        Command::Explain(a) => explain_cmd(cli, a),
        Command::BatchExplain(a) => batch_cmd(cli, a),
        Command::Evaluate(a) => evaluate_cmd(cli, a),
        Command::Fidelity(a) => fidelity_cmd(cli, a),
        Command::Render(a) => render_cmd(cli, a),
        Command::Run(a) => run_cmd(cli, a),
    }
}

fn error_line(kind: &str, message: &str) {
    eprintln!("{}", json!({ "error": { "kind": kind, "message": message } }));
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            error_line("usage", e.to_string().trim());
            return ExitCode::from(2);
        }
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error_line(e.kind(), &e.to_string());
            ExitCode::from(match e {
                Error::Config(_) => 2,
                _ => 1,
            })
        }
    }
}
