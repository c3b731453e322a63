//! Command-line entry point: dataset generation, two-stage pretraining,
//! zero-shot evaluation, single-image grounding, and the gradient audit.
//!
//! Every command echoes its resolved configuration to stderr so runs are
//! reproducible from logs alone. Exit codes: 0 success, 2 input or usage
//! error, 3 numerical failure.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

use crate::audit::run_audit;
use crate::config::{ConfigError, GenConfig, PretrainConfig};
use crate::data::synth::generate_dataset;
use crate::data::{DataError, ImageSample, LoadedDataset, Manifest, SourceTag, TextSample};
use crate::eval::grounding::{map_to_pixels, rank_boxes, score_map, BoxProposal};
use crate::eval::metrics::{grounding_accuracy, retrieval_metrics};
use crate::eval::report::EvalReport;
use crate::eval::{
    embed_texts, image_text_retrieval, match_relevance, positive_decode, positive_mass_means,
    product_retrieval, zero_shot_classify, EvalError, EvalItem, MatchRule, NegativeQueries,
};
use crate::model::{EclipModel, ModelError};
use crate::objectives::LossBreakdown;
use crate::tensor::io::{load_tensor, write_pgm, TensorIoError};
use crate::tensor::TensorError;
use crate::train::checkpoint::{restore_params, CheckpointError, TrainState};
use crate::train::{TrainError, Trainer};

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad flags, paths, or file contents; exit code 2.
    #[error("{0}")]
    Input(String),
    /// Non-finite values or a failed gradient audit; exit code 3.
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn code(&self) -> u8 {
        match self {
            CliError::Input(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<TensorIoError> for CliError {
    fn from(e: TensorIoError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        match e {
            TensorError::NonFinite { .. } => CliError::Numerical(e.to_string()),
            _ => CliError::Input(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Tensor(t) => t.into(),
            _ => CliError::Input(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFiniteLoss { .. } => CliError::Numerical(e.to_string()),
            TrainError::Tensor(t) => t.into(),
            _ => CliError::Input(e.to_string()),
        }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "eclip",
    version,
    about = "Instance-aware image-text pretraining and zero-shot transfer at desk scale"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic multi-source product dataset.
    GenData(GenDataArgs),
    /// Run the two-stage pretraining loop.
    Pretrain(PretrainArgs),
    /// Evaluate a checkpoint on a zero-shot transfer task.
    Eval(EvalArgs),
    /// Rank box proposals for one image and export its score map.
    Ground(GroundArgs),
    /// Audit reverse-mode gradients against central finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    /// Output directory for tensors and manifests.
    #[arg(long)]
    out: PathBuf,
    /// Training products; overrides the config file.
    #[arg(long)]
    products: Option<usize>,
    /// Image sources per product; overrides the config file.
    #[arg(long)]
    sources: Option<usize>,
    /// Generator seed; overrides the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// JSON generator config; built-in defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Allow writing into an existing non-empty directory.
    #[arg(long)]
    force: bool,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    All,
}

#[derive(Args, Debug)]
struct PretrainArgs {
    /// Training manifest (JSONL) produced by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// JSON pretraining config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Stage to run; stage 2 requires --resume of a finished stage-1 run.
    #[arg(long, value_enum, default_value_t = StageArg::All)]
    stage: StageArg,
    /// Checkpoint written when the selected stage(s) finish.
    #[arg(long)]
    out: PathBuf,
    /// Continue from an earlier checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Per-step loss log; defaults to the checkpoint path plus .loss.csv.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum TaskArg {
    Classify,
    ItcRetrieval,
    ProductRetrieval,
    Grounding,
}

impl TaskArg {
    fn name(self) -> &'static str {
        match self {
            TaskArg::Classify => "classify",
            TaskArg::ItcRetrieval => "itc-retrieval",
            TaskArg::ProductRetrieval => "product-retrieval",
            TaskArg::Grounding => "grounding",
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum MatchRuleArg {
    Category,
    Product,
}

impl MatchRuleArg {
    fn name(self) -> &'static str {
        match self {
            MatchRuleArg::Category => "category",
            MatchRuleArg::Product => "product",
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum NegModeArg {
    Random,
    Text,
    Ema,
}

impl NegModeArg {
    fn name(self) -> &'static str {
        match self {
            NegModeArg::Random => "random",
            NegModeArg::Text => "text",
            NegModeArg::Ema => "ema",
        }
    }
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long, value_enum)]
    task: TaskArg,
    #[arg(long)]
    ckpt: PathBuf,
    /// Evaluation manifest (JSONL).
    #[arg(long)]
    data: PathBuf,
    /// JSON report output path.
    #[arg(long)]
    report: PathBuf,
    /// Relevance rule for product retrieval.
    #[arg(long, value_enum, default_value_t = MatchRuleArg::Product)]
    match_rule: MatchRuleArg,
    /// Source of the negative query embeddings.
    #[arg(long, value_enum, default_value_t = NegModeArg::Random)]
    neg_mode: NegModeArg,
    /// Seed for negative-query draws.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct GroundArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Patch-grid tensor (ETNS) of the image to ground into.
    #[arg(long)]
    image: PathBuf,
    /// Whitespace-separated token ids of the text prompt.
    #[arg(long, conflicts_with = "query_image", required_unless_present = "query_image")]
    text: Option<String>,
    /// Patch-grid tensor (ETNS) of a prompt image.
    #[arg(long)]
    query_image: Option<PathBuf>,
    /// JSON list of candidate boxes in grid coordinates.
    #[arg(long)]
    proposals: PathBuf,
    /// PGM score-map output path.
    #[arg(long)]
    out_map: PathBuf,
    /// Integer upsampling factor for the exported map.
    #[arg(long, default_value_t = 4)]
    scale: usize,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Maximum allowed relative error per coordinate.
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
}

/// Parse arguments from the process environment and run; returns the exit
/// code.
pub fn run() -> u8 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            e.print().expect("stderr is writable");
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.code()
        }
    }
}

fn dispatch(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::GenData(args) => cmd_gen_data(args),
        Command::Pretrain(args) => cmd_pretrain(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Ground(args) => cmd_ground(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
    }
}

fn echo_config(cmd: &str, value: &serde_json::Value) {
    eprintln!("[eclip {cmd}] resolved config: {value}");
}

fn cmd_gen_data(args: GenDataArgs) -> Result<(), CliError> {
    let mut cfg = match &args.config {
        Some(path) => GenConfig::load(path)?,
        None => GenConfig::default(),
    };
    if let Some(n) = args.products {
        cfg.products = n;
    }
    if let Some(s) = args.sources {
        cfg.sources_per_product = s;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    echo_config(
        "gen-data",
        &serde_json::to_value(&cfg).expect("generator config serializes"),
    );

    if args.out.exists() {
        let non_empty = std::fs::read_dir(&args.out)
            .map_err(|e| CliError::Input(format!("cannot read {}: {e}", args.out.display())))?
            .next()
            .is_some();
        if non_empty && !args.force {
            return Err(CliError::Input(format!(
                "{} already contains files; pass --force to write anyway",
                args.out.display()
            )));
        }
    }
    let out = generate_dataset(&cfg, &args.out)?;
    println!(
        "wrote {} training and {} held-out products under {}",
        out.train.len(),
        out.holdout.len(),
        args.out.display()
    );
    println!("train manifest: {}", out.train_path.display());
    println!("holdout manifest: {}", out.holdout_path.display());
    Ok(())
}

/// The stage flag narrows how many epochs the trainer is allowed to run.
fn effective_config(file: &PretrainConfig, stage: StageArg) -> PretrainConfig {
    let mut cfg = file.clone();
    if stage == StageArg::One {
        cfg.train.stage2_epochs = 0;
    }
    cfg
}

fn default_csv_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".loss.csv");
    out.with_file_name(name)
}

fn cmd_pretrain(args: PretrainArgs) -> Result<(), CliError> {
    let file_cfg = match &args.config {
        Some(path) => PretrainConfig::load(path)?,
        None => PretrainConfig::default(),
    };
    file_cfg.validate()?;
    let manifest = Manifest::load(&args.data)?;
    let dataset = LoadedDataset::load(manifest)?;

    let mut trainer = match &args.resume {
        Some(path) => {
            let mut state = TrainState::load(path)?;
            if state.config.model != file_cfg.model {
                return Err(CliError::Input(
                    "checkpoint model configuration differs from --config; resume with the \
                     configuration the run started on"
                        .into(),
                ));
            }
            match (args.stage, state.stage) {
                (StageArg::One, 2) => {
                    return Err(CliError::Input(
                        "checkpoint already finished stage 1; use --stage 2 or all".into(),
                    ))
                }
                (StageArg::Two, 1) => {
                    return Err(CliError::Input(
                        "--stage 2 needs a checkpoint that finished stage 1".into(),
                    ))
                }
                _ => {}
            }
            state.config = effective_config(&file_cfg, args.stage);
            Trainer::from_state(state)?
        }
        None => {
            if args.stage == StageArg::Two {
                return Err(CliError::Input(
                    "--stage 2 continues a finished stage-1 run; pass --resume CKPT".into(),
                ));
            }
            Trainer::new(effective_config(&file_cfg, args.stage), &dataset)?
        }
    };
    echo_config(
        "pretrain",
        &serde_json::to_value(&trainer.config).expect("pretrain config serializes"),
    );

    let csv_path = args.csv.clone().unwrap_or_else(|| default_csv_path(&args.out));
    let csv_file = std::fs::File::create(&csv_path)
        .map_err(|e| CliError::Input(format!("cannot create {}: {e}", csv_path.display())))?;
    let mut csv = std::io::BufWriter::new(csv_file);
    let write_err =
        |e: std::io::Error| CliError::Input(format!("cannot write {}: {e}", csv_path.display()));
    writeln!(csv, "{}", LossBreakdown::csv_header()).map_err(write_err)?;

    let mut steps_taken = 0u64;
    let mut final_total = None;
    let mut last_epoch = None;
    loop {
        match trainer.step(&dataset) {
            Ok(Some(record)) => {
                writeln!(csv, "{}", record.breakdown.csv_line(record.global_step))
                    .map_err(write_err)?;
                steps_taken += 1;
                final_total = Some(record.breakdown.total);
                let key = (record.stage, record.epoch);
                if last_epoch != Some(key) {
                    eprintln!(
                        "[eclip pretrain] stage {} epoch {} (step {})",
                        record.stage.as_u8(),
                        record.epoch,
                        record.global_step
                    );
                    last_epoch = Some(key);
                }
            }
            Ok(None) => break,
            Err(e @ TrainError::NonFiniteLoss { .. }) => {
                csv.flush().ok();
                return Err(e.into());
            }
            Err(e) => return Err(e.into()),
        }
    }
    csv.flush().map_err(write_err)?;

    trainer.to_state().save(&args.out)?;
    match final_total {
        Some(total) => println!("trained {steps_taken} steps; final total loss {total:.6}"),
        None => println!("nothing to train; checkpoint already covers the requested stages"),
    }
    println!("checkpoint: {}", args.out.display());
    println!("loss csv: {}", csv_path.display());
    Ok(())
}

/// Rebuild the model a checkpoint describes.
fn load_model(path: &Path) -> Result<(EclipModel, PretrainConfig), CliError> {
    let state = TrainState::load(path)?;
    let config = state.config.clone();
    let mut model = EclipModel::init_seeded(config.model.clone(), config.train.tau_init, 0)?;
    restore_params(&mut model.params, &state.base)?;
    Ok((model, config))
}

fn build_negatives(
    model: &EclipModel,
    dataset: &LoadedDataset,
    mode: NegModeArg,
    seed: u64,
) -> Result<NegativeQueries, CliError> {
    let count = model.config.num_queries - 1;
    let dim = model.config.embed_dim;
    match mode {
        NegModeArg::Random => Ok(NegativeQueries::random(count, dim, seed)),
        NegModeArg::Text => {
            let vocab = model.config.vocab_size as u32;
            let texts: Vec<TextSample> = (0..dataset.len())
                .map(|p| dataset.manifest.text_sample(p, vocab))
                .collect::<Result<_, _>>()?;
            let pool = embed_texts(model, &texts)?;
            Ok(NegativeQueries::from_text_pool(&pool, count, seed)?)
        }
        NegModeArg::Ema => Ok(NegativeQueries::ema(count, dim, 0.99)),
    }
}

/// Every (product, source) pair with its labels, in manifest order.
fn flat_items(dataset: &LoadedDataset, vocab: u32) -> Result<Vec<EvalItem>, CliError> {
    let mut items = Vec::new();
    for p in 0..dataset.len() {
        let rec = &dataset.manifest.products[p];
        let text = dataset.manifest.text_sample(p, vocab)?;
        for img in &dataset.images[p] {
            items.push(EvalItem {
                image: img.clone(),
                text: text.clone(),
                product_id: rec.product_id,
                category_id: rec.category_id,
            });
        }
    }
    Ok(items)
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    echo_config(
        "eval",
        &serde_json::json!({
            "task": args.task.name(),
            "ckpt": args.ckpt.display().to_string(),
            "data": args.data.display().to_string(),
            "report": args.report.display().to_string(),
            "match_rule": args.match_rule.name(),
            "neg_mode": args.neg_mode.name(),
            "seed": args.seed,
        }),
    );
    let (model, _) = load_model(&args.ckpt)?;
    let manifest = Manifest::load(&args.data)?;
    let dataset = LoadedDataset::load(manifest)?;
    if dataset.is_empty() {
        return Err(CliError::Input("evaluation manifest has no products".into()));
    }

    let mut report = match args.task {
        TaskArg::Classify => eval_classify(&model, &dataset, &args)?,
        TaskArg::ItcRetrieval => eval_itc_retrieval(&model, &dataset)?,
        TaskArg::ProductRetrieval => eval_product_retrieval(&model, &dataset, &args)?,
        TaskArg::Grounding => eval_grounding(&model, &dataset, &args)?,
    };
    report.setting("checkpoint", &args.ckpt.display().to_string());
    report.setting("data", &args.data.display().to_string());
    report.setting("neg_mode", args.neg_mode.name());
    report.setting("seed", &args.seed.to_string());
    report.save(&args.report)?;

    println!("{} report written to {}", args.task.name(), args.report.display());
    for (name, value) in &report.metrics {
        println!("  {name} = {value:.4}");
    }
    Ok(())
}

/// Zero-shot classification: instance representation against one text
/// prompt per category. Category prompts reuse the dataset convention that
/// category c is spoken by token 1 + c.
fn eval_classify(
    model: &EclipModel,
    dataset: &LoadedDataset,
    args: &EvalArgs,
) -> Result<EvalReport, CliError> {
    let vocab = model.config.vocab_size as u32;
    let items = flat_items(dataset, vocab)?;
    let num_classes = dataset
        .manifest
        .products
        .iter()
        .map(|p| p.category_id)
        .max()
        .expect("non-empty manifest") as usize
        + 1;
    if num_classes < 2 {
        return Err(CliError::Input(
            "classification needs at least two categories in the manifest".into(),
        ));
    }
    let cat_texts: Vec<TextSample> = (0..num_classes)
        .map(|c| TextSample::new(vec![1 + c as u32], vocab))
        .collect::<Result<_, _>>()?;
    let cat_embs = embed_texts(model, &cat_texts)?;

    let mut neg = build_negatives(model, dataset, args.neg_mode, args.seed)?;
    let mut correct = 0usize;
    for item in &items {
        let pred = zero_shot_classify(model, &item.image, &item.text, &cat_embs, &mut neg)?;
        if pred as u32 == item.category_id {
            correct += 1;
        }
    }
    let mut report = EvalReport::new("classify", items.len(), num_classes);
    report.metric("accuracy", correct as f64 / items.len() as f64);
    report.metric("chance", 1.0 / num_classes as f64);
    Ok(report)
}

/// Cross-modal retrieval over projected CLS embeddings; each image matches
/// its product's text and vice versa.
fn eval_itc_retrieval(model: &EclipModel, dataset: &LoadedDataset) -> Result<EvalReport, CliError> {
    let vocab = model.config.vocab_size as u32;
    let texts: Vec<TextSample> = (0..dataset.len())
        .map(|p| dataset.manifest.text_sample(p, vocab))
        .collect::<Result<_, _>>()?;
    let mut images = Vec::new();
    let mut image_product = Vec::new();
    for p in 0..dataset.len() {
        for img in &dataset.images[p] {
            images.push(img.clone());
            image_product.push(p);
        }
    }
    let (i2t, t2i) = image_text_retrieval(model, &images, &texts)?;
    let i2t_rel: Vec<Vec<usize>> = image_product.iter().map(|&p| vec![p]).collect();
    let t2i_rel: Vec<Vec<usize>> = (0..texts.len())
        .map(|p| {
            image_product
                .iter()
                .enumerate()
                .filter(|(_, &q)| q == p)
                .map(|(i, _)| i)
                .collect()
        })
        .collect();
    let ks = [1, 5, 10];
    let mut report = EvalReport::new("itc-retrieval", images.len(), texts.len());
    report.ranking_metrics("i2t_", &retrieval_metrics(&i2t, &i2t_rel, &ks));
    report.ranking_metrics("t2i_", &retrieval_metrics(&t2i, &t2i_rel, &ks));
    Ok(report)
}

/// Instance-level retrieval: the first source of each product queries a
/// gallery of the remaining sources.
fn eval_product_retrieval(
    model: &EclipModel,
    dataset: &LoadedDataset,
    args: &EvalArgs,
) -> Result<EvalReport, CliError> {
    let vocab = model.config.vocab_size as u32;
    let mut queries = Vec::new();
    let mut gallery = Vec::new();
    for p in 0..dataset.len() {
        let rec = &dataset.manifest.products[p];
        let text = dataset.manifest.text_sample(p, vocab)?;
        for (s, img) in dataset.images[p].iter().enumerate() {
            let item = EvalItem {
                image: img.clone(),
                text: text.clone(),
                product_id: rec.product_id,
                category_id: rec.category_id,
            };
            if s == 0 {
                queries.push(item);
            } else {
                gallery.push(item);
            }
        }
    }
    if gallery.is_empty() {
        return Err(CliError::Input(
            "product retrieval needs at least two sources per product".into(),
        ));
    }
    let rule = match args.match_rule {
        MatchRuleArg::Category => MatchRule::SameCategory,
        MatchRuleArg::Product => MatchRule::SameProduct,
    };
    let relevance = match_relevance(&queries, &gallery, rule);
    let mut neg = build_negatives(model, dataset, args.neg_mode, args.seed)?;
    let result = product_retrieval(model, &queries, &gallery, &mut neg)?;
    let rows = retrieval_metrics(&result, &relevance, &[1, 5, 10]);
    let mut report = EvalReport::new("product-retrieval", queries.len(), gallery.len());
    report.setting("match_rule", args.match_rule.name());
    report.ranking_metrics("", &rows);
    Ok(report)
}

fn all_grid_boxes(grid_h: usize, grid_w: usize) -> Vec<BoxProposal> {
    let mut boxes = Vec::new();
    for y1 in 0..grid_h {
        for y2 in y1 + 1..=grid_h {
            for x1 in 0..grid_w {
                for x2 in x1 + 1..=grid_w {
                    boxes.push(BoxProposal::new(x1, y1, x2, y2).expect("non-degenerate"));
                }
            }
        }
    }
    boxes
}

/// Grounding over the held-out boxes: box ranking accuracy from the score
/// map plus the rate at which the positive query's assignment mass
/// concentrates inside the annotated box.
fn eval_grounding(
    model: &EclipModel,
    dataset: &LoadedDataset,
    args: &EvalArgs,
) -> Result<EvalReport, CliError> {
    let vocab = model.config.vocab_size as u32;
    let mut neg = build_negatives(model, dataset, args.neg_mode, args.seed)?;
    let proposals = all_grid_boxes(model.config.grid_h, model.config.grid_w);
    let mut predictions = Vec::new();
    let mut truths = Vec::new();
    let mut margin_hits = 0usize;
    let mut total = 0usize;
    for p in 0..dataset.len() {
        let text = dataset.manifest.text_sample(p, vocab)?;
        let prompt = model.encode_text(&text)?.projected_cls;
        for (s, img) in dataset.images[p].iter().enumerate() {
            let gt = &dataset.manifest.products[p].sources[s].gt_box;

            let decoded = positive_decode(model, img, &text, &mut neg)?;
            let (inside, outside) = positive_mass_means(&decoded, gt, img.grid_w);
            if inside > outside {
                margin_hits += 1;
            }

            let enc = model.encode_image(img)?;
            let map = score_map(&enc, &prompt, img.grid_h, img.grid_w, 1)?;
            let ranked = rank_boxes(&map, &proposals)?;
            predictions.push(proposals[ranked[0].0].clone());
            truths.push(BoxProposal::new(gt.x1, gt.y1, gt.x2, gt.y2)?);
            total += 1;
        }
    }
    let accuracy = grounding_accuracy(&predictions, &truths, &[0.5, 0.7]);
    let mut report = EvalReport::new("grounding", total, proposals.len());
    for (threshold, acc) in accuracy {
        report.metric(&format!("acc@{threshold}"), acc);
    }
    report.metric("mass_margin_rate", margin_hits as f64 / total as f64);
    Ok(report)
}

fn parse_token_ids(text: &str) -> Result<Vec<u32>, CliError> {
    let ids: Result<Vec<u32>, _> = text.split_whitespace().map(str::parse).collect();
    let ids = ids.map_err(|e| CliError::Input(format!("bad token id in --text: {e}")))?;
    if ids.is_empty() {
        return Err(CliError::Input("--text needs at least one token id".into()));
    }
    Ok(ids)
}

/// Accepts both the stored h x w x d layout and a flat (h*w) x d matrix.
fn load_grid_tensor(path: &Path, model: &EclipModel) -> Result<ImageSample, CliError> {
    let tensor = load_tensor(path)?;
    let cfg = &model.config;
    let (h, w) = match *tensor.shape() {
        [h, w, _] => (h, w),
        _ => (cfg.grid_h, cfg.grid_w),
    };
    let d = *tensor.shape().last().expect("non-empty shape");
    let features = crate::tensor::Tensor::matrix(h * w, d, tensor.into_data())
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    Ok(ImageSample::new(h, w, features, SourceTag::DetailPage)?)
}

fn cmd_ground(args: GroundArgs) -> Result<(), CliError> {
    echo_config(
        "ground",
        &serde_json::json!({
            "ckpt": args.ckpt.display().to_string(),
            "image": args.image.display().to_string(),
            "text": args.text,
            "query_image": args.query_image.as_ref().map(|p| p.display().to_string()),
            "proposals": args.proposals.display().to_string(),
            "out_map": args.out_map.display().to_string(),
            "scale": args.scale,
        }),
    );
    let (model, _) = load_model(&args.ckpt)?;
    let image = load_grid_tensor(&args.image, &model)?;
    let prompt = match (&args.text, &args.query_image) {
        (Some(text), None) => {
            let ids = parse_token_ids(text)?;
            let sample = TextSample::new(ids, model.config.vocab_size as u32)?;
            model.encode_text(&sample)?.projected_cls
        }
        (None, Some(path)) => {
            let query = load_grid_tensor(path, &model)?;
            model.encode_image(&query)?.projected_cls
        }
        _ => unreachable!("clap enforces exactly one prompt source"),
    };

    let proposals_text = std::fs::read_to_string(&args.proposals).map_err(|e| {
        CliError::Input(format!("cannot read proposals {}: {e}", args.proposals.display()))
    })?;
    let proposals: Vec<BoxProposal> = serde_json::from_str(&proposals_text)
        .map_err(|e| CliError::Input(format!("bad proposals JSON: {e}")))?;

    let enc = model.encode_image(&image)?;
    let grid_map = score_map(&enc, &prompt, image.grid_h, image.grid_w, 1)?;
    let ranked = rank_boxes(&grid_map, &proposals)?;

    let up = score_map(&enc, &prompt, image.grid_h, image.grid_w, args.scale)?;
    let pixels = map_to_pixels(&up);
    let mut pgm = std::fs::File::create(&args.out_map).map_err(|e| {
        CliError::Input(format!("cannot create {}: {e}", args.out_map.display()))
    })?;
    write_pgm(&mut pgm, up.width(), up.height(), &pixels).map_err(|e| {
        CliError::Input(format!("cannot write {}: {e}", args.out_map.display()))
    })?;
    eprintln!("[eclip ground] score map written to {}", args.out_map.display());

    let rows: Vec<serde_json::Value> = ranked
        .iter()
        .enumerate()
        .map(|(rank, (index, score))| {
            serde_json::json!({
                "rank": rank,
                "proposal": index,
                "box": proposals[*index],
                "score": score,
            })
        })
        .collect();
    println!(
        "{}",
        serde_json::to_string_pretty(&rows).expect("ranking serializes")
    );
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<(), CliError> {
    echo_config(
        "gradcheck",
        &serde_json::json!({ "seed": args.seed, "tol": args.tol }),
    );
    if !(args.tol > 0.0) {
        return Err(CliError::Input("--tol must be positive".into()));
    }
    let outcome = run_audit(args.seed, args.tol)
        .map_err(|e| CliError::Numerical(format!("audit could not run: {e}")))?;
    let mut failures = 0;
    for c in &outcome.components {
        let ok = c.report.max_rel_err <= args.tol;
        if !ok {
            failures += 1;
        }
        println!(
            "{:<20} worst rel err {:.3e} over {} coordinates [{}]",
            c.name,
            c.report.max_rel_err,
            c.report.checked,
            if ok { "ok" } else { "FAIL" }
        );
    }
    if failures == 0 {
        Ok(())
    } else {
        Err(CliError::Numerical(format!(
            "{failures} gradient component(s) exceeded tolerance {}",
            args.tol
        )))
    }
}
