use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::CliError;
use crate::{
    EmbedArgs, EvalArgs, IndexChoice, ModelChoice, ReportArgs, RetrieveArgs, SynthArgs, TrainArgs,
};
use factspace::checkpoint::Checkpoint;
use factspace::datagen::{synth_generate, SynthSpec};
use factspace::evaluation::{write_bucket_csv, EvalReport, MetricFamily, RunMeta};
use factspace::fact::{load_dataset, write_dataset, Dataset, FactOrder};
use factspace::lang::{load_word_table, write_word_table, WordTable};
use factspace::pipeline::{
    embed_test, evaluate, fit_cca_checkpoint, fit_language, init_checkpoint, read_embeddings_jsonl,
    retrieve_all, train_checkpoint, training_pairs, write_embeddings_jsonl, Architecture,
    RetrievalConfig, RetrievalOutput, TestEmbeddings,
};
use factspace::retrieval::{
    build_index, read_ranked_jsonl, write_index, write_ranked_jsonl, IndexMode, Scope,
};
use factspace::training::{write_trace_csv, LossConfig, TrainConfig};
use factspace::ModelKind;

const CONFIG_SNAPSHOT: &str = "config.json";
const RUN_META: &str = "meta.json";

fn require(path: &Path) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::missing(path))
    }
}

fn out_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>, CliError> {
    let path = dir.join(name);
    Ok(BufWriter::new(File::create(&path).map_err(|e| {
        CliError::io(format!("{}: {e}", path.display()))
    })?))
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<(), CliError> {
    let mut w = create(dir, name)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn read_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    require(path)?;
    Ok(toml::from_str(&fs::read_to_string(path)?)?)
}

fn display(p: &Path) -> String {
    p.display().to_string()
}

#[derive(Serialize)]
struct SynthSnapshot<'a> {
    command: &'static str,
    spec: &'a SynthSpec,
}

pub fn synth(a: SynthArgs) -> Result<(), CliError> {
    let mut spec: SynthSpec = match &a.config {
        Some(p) => read_toml(p)?,
        None => SynthSpec::default(),
    };
    spec.seed = a.seed;
    macro_rules! set {
        ($($field:ident),*) => { $( if let Some(v) = a.$field { spec.$field = v; } )* };
    }
    set!(
        subjects,
        predicates,
        objects,
        images_per_fact,
        long_tail_exponent,
        min_images_per_fact,
        test_fraction,
        holdout_share,
        latent_dim,
        feature_dim,
        sigma
    );
    if let Some(v) = &a.facts_per_order {
        spec.facts_per_order = v.as_slice().try_into().map_err(|_| {
            CliError::validation(format!("--facts-per-order takes 3 counts, got {}", v.len()))
        })?;
    }
    spec.nonlinear |= a.nonlinear;
    let out = synth_generate(&spec)?;
    out_dir(&a.out_dir)?;
    write_dataset(&out.dataset, create(&a.out_dir, "dataset.jsonl")?)?;
    write_word_table(&out.table, create(&a.out_dir, "words.txt")?)?;
    write_json(&a.out_dir, "oracle.json", &out.oracle)?;
    write_json(
        &a.out_dir,
        CONFIG_SNAPSHOT,
        &SynthSnapshot {
            command: "synth",
            spec: &spec,
        },
    )?;
    println!(
        "synth: {} instances, {} held-out facts -> {}",
        out.dataset.len(),
        out.oracle.held_out.len(),
        a.out_dir.display()
    );
    Ok(())
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainFile {
    train: TrainConfig,
    loss: LossConfig,
    architecture: Architecture,
    cca: CcaSettings,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct CcaSettings {
    dim: Option<usize>,
    reg: f64,
}

impl Default for CcaSettings {
    fn default() -> Self {
        CcaSettings {
            dim: None,
            reg: 1e-4,
        }
    }
}

#[derive(Serialize)]
struct TrainSnapshot<'a> {
    command: &'static str,
    model: ModelChoice,
    seed: u64,
    dataset: String,
    words: String,
    #[serde(flatten)]
    settings: &'a TrainFile,
}

fn load_inputs(dataset: &Path, words: &Path) -> Result<(Dataset, WordTable), CliError> {
    require(dataset)?;
    require(words)?;
    Ok((load_dataset(dataset)?, load_word_table(words)?))
}

pub fn train(a: TrainArgs) -> Result<(), CliError> {
    let mut cfg: TrainFile = match &a.config {
        Some(p) => read_toml(p)?,
        None => TrainFile::default(),
    };
    let (dataset, table) = load_inputs(&a.dataset, &a.words)?;
    let t = &mut cfg.train;
    t.seed = a.seed;
    macro_rules! set {
        ($target:expr; $($flag:ident => $field:ident),*) => { $( if let Some(v) = a.$flag.clone() { $target.$field = v; } )* };
    }
    set!(t; lr => base_lr, new_param_lr_multiplier => new_param_lr_multiplier, momentum => momentum,
        weight_decay => weight_decay, lr_gamma => lr_gamma, lr_step_iters => lr_step_iters,
        batch_size => batch_size, max_iters => max_iters);
    t.validate()?;
    if let Some(d) = a.distance {
        cfg.loss.distance = d.into();
    }
    set!(cfg.loss; epsilon => epsilon);
    cfg.loss.validate()?;
    set!(cfg.architecture; trunk => trunk, shared => shared, s_branch => s_branch, po_branch => po_branch);
    if a.cca_dim.is_some() {
        cfg.cca.dim = a.cca_dim;
    }
    set!(cfg.cca; cca_reg => reg);

    let lang = fit_language(&dataset, table)?;
    out_dir(&a.out_dir)?;
    write_json(
        &a.out_dir,
        CONFIG_SNAPSHOT,
        &TrainSnapshot {
            command: "train",
            model: a.model,
            seed: a.seed,
            dataset: display(&a.dataset),
            words: display(&a.words),
            settings: &cfg,
        },
    )?;
    let kind = match a.model {
        ModelChoice::Model1 => ModelKind::Model1,
        ModelChoice::Model2 => ModelKind::Model2,
        ModelChoice::Cca => {
            let ckpt = fit_cca_checkpoint(&dataset, &lang, cfg.cca.dim, cfg.cca.reg, a.seed)?;
            ckpt.save(a.out_dir.join("checkpoint.json"))?;
            println!("train: fitted cca -> {}", a.out_dir.display());
            return Ok(());
        }
    };
    let init = init_checkpoint(kind, &cfg.architecture, &dataset, &lang, a.seed)?;
    init.save(a.out_dir.join("init.json"))?;
    let pairs = training_pairs(&dataset, &lang)?;
    let (ckpt, trace) = train_checkpoint(&init, &pairs, &cfg.train, &cfg.loss)?;
    ckpt.save(a.out_dir.join("checkpoint.json"))?;
    write_trace_csv(&trace, create(&a.out_dir, "trace.csv")?)?;
    let last = trace.last().map_or(f64::NAN, |r| r.loss);
    println!(
        "train: {kind}, {} iterations, final batch loss {last:.6} -> {}",
        trace.len(),
        a.out_dir.display()
    );
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EmbedMeta {
    model: String,
    seed: u64,
    #[serde(default)]
    representation: Option<String>,
}

#[derive(Serialize)]
struct EmbedSnapshot {
    command: &'static str,
    checkpoint: String,
    dataset: String,
    words: String,
}

pub fn embed(a: EmbedArgs) -> Result<(), CliError> {
    require(&a.checkpoint)?;
    let (dataset, table) = load_inputs(&a.dataset, &a.words)?;
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let emb = embed_test(&ckpt, &dataset, &table)?;
    out_dir(&a.out_dir)?;
    write_embeddings_jsonl(&emb.records(), create(&a.out_dir, "embeddings.jsonl")?)?;
    let meta = EmbedMeta {
        model: ckpt.model.label().to_string(),
        seed: ckpt.seed,
        representation: None,
    };
    write_json(&a.out_dir, RUN_META, &meta)?;
    write_json(
        &a.out_dir,
        CONFIG_SNAPSHOT,
        &EmbedSnapshot {
            command: "embed",
            checkpoint: display(&a.checkpoint),
            dataset: display(&a.dataset),
            words: display(&a.words),
        },
    )?;
    println!(
        "embed: {} facts, {} images -> {}",
        emb.facts.len(),
        emb.images.len(),
        a.out_dir.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct RetrieveSnapshot<'a> {
    command: &'static str,
    embeddings: String,
    retrieval: &'a RetrievalConfig,
}

fn metric2_file(order: FactOrder) -> String {
    format!("metric2_order{}.jsonl", order.as_u8())
}

fn sibling_meta(path: &Path) -> Option<EmbedMeta> {
    let meta = path.parent().unwrap_or(Path::new(".")).join(RUN_META);
    serde_json::from_reader(BufReader::new(File::open(meta).ok()?)).ok()
}

pub fn retrieve(a: RetrieveArgs) -> Result<(), CliError> {
    require(&a.embeddings)?;
    let emb = TestEmbeddings::from_records(read_embeddings_jsonl(BufReader::new(File::open(
        &a.embeddings,
    )?))?);
    if emb.facts.is_empty() || emb.images.is_empty() {
        return Err(CliError::validation(
            "embedding dump needs both language and visual records",
        ));
    }
    let mode = match a.index {
        IndexChoice::Exact => IndexMode::Exact,
        IndexChoice::Approximate => IndexMode::Approximate {
            target_recall: a.target_recall,
            seed: a.index_seed,
        },
    };
    let cfg = RetrievalConfig {
        mode,
        representation: a.representation,
        max_results: a.max_results.unwrap_or(usize::MAX),
    };
    let out = retrieve_all(&emb, &cfg)?;
    out_dir(&a.out_dir)?;
    write_ranked_jsonl(&out.metric1, create(&a.out_dir, "metric1.jsonl")?)?;
    for order in FactOrder::ALL {
        write_ranked_jsonl(
            &out.metric2[order.index()],
            create(&a.out_dir, &metric2_file(order))?,
        )?;
    }
    write_ranked_jsonl(&out.visual, create(&a.out_dir, "visual.jsonl")?)?;
    let index = build_index(emb.facts.clone(), mode, Scope::AllOrders)?;
    write_index(&index, create(&a.out_dir, "facts.fsix")?)?;
    let mut meta = sibling_meta(&a.embeddings).unwrap_or(EmbedMeta {
        model: "unknown".into(),
        seed: 0,
        representation: None,
    });
    meta.representation = Some(a.representation.to_string());
    write_json(&a.out_dir, RUN_META, &meta)?;
    write_json(
        &a.out_dir,
        CONFIG_SNAPSHOT,
        &RetrieveSnapshot {
            command: "retrieve",
            embeddings: display(&a.embeddings),
            retrieval: &cfg,
        },
    )?;
    println!(
        "retrieve: {} image queries, {} fact queries -> {}",
        out.metric1.len(),
        out.visual.len(),
        a.out_dir.display()
    );
    Ok(())
}

fn read_ranked(
    dir: &Path,
    name: &str,
) -> Result<Vec<factspace::retrieval::RankedRecord>, CliError> {
    let path = dir.join(name);
    require(&path)?;
    Ok(read_ranked_jsonl(BufReader::new(File::open(path)?))?)
}

#[derive(Serialize)]
struct EvalSnapshot {
    command: &'static str,
    dataset: String,
    ranked_dir: String,
    metric: u8,
}

pub fn eval(a: EvalArgs) -> Result<(), CliError> {
    require(&a.dataset)?;
    let dataset = load_dataset(&a.dataset)?;
    let out = RetrievalOutput {
        metric1: read_ranked(&a.ranked_dir, "metric1.jsonl")?,
        metric2: [
            read_ranked(&a.ranked_dir, &metric2_file(FactOrder::First))?,
            read_ranked(&a.ranked_dir, &metric2_file(FactOrder::Second))?,
            read_ranked(&a.ranked_dir, &metric2_file(FactOrder::Third))?,
        ],
        visual: read_ranked(&a.ranked_dir, "visual.jsonl")?,
    };
    let metric = MetricFamily::try_from(a.metric).map_err(CliError::validation)?;
    let run = sibling_meta(&a.ranked_dir.join("metric1.jsonl"));
    let meta = RunMeta {
        model: run
            .as_ref()
            .map_or_else(|| "unknown".into(), |m| m.model.clone()),
        metric,
        seed: run.as_ref().map_or(0, |m| m.seed),
        representation: run
            .and_then(|m| m.representation)
            .unwrap_or_else(|| "structured".into()),
        notes: Vec::new(),
    };
    let report = evaluate(&dataset, &out, meta)?;
    out_dir(&a.out_dir)?;
    let mut w = create(&a.out_dir, "report.json")?;
    w.write_all(report.to_json().as_bytes())?;
    w.write_all(b"\n")?;
    w.flush()?;
    write_bucket_csv(&report.buckets, create(&a.out_dir, "buckets.csv")?)?;
    write_json(
        &a.out_dir,
        CONFIG_SNAPSHOT,
        &EvalSnapshot {
            command: "eval",
            dataset: display(&a.dataset),
            ranked_dir: display(&a.ranked_dir),
            metric: a.metric,
        },
    )?;
    let lv = report.language_view.as_ref();
    let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.2}"));
    println!(
        "eval: metric {} top1 {} top5 {} top10 {} mrr {} map {} -> {}",
        a.metric,
        fmt(lv.and_then(|l| l.top1)),
        fmt(lv.and_then(|l| l.top5)),
        fmt(lv.and_then(|l| l.top10)),
        fmt(lv.and_then(|l| l.mrr)),
        fmt(report.visual_view.as_ref().and_then(|v| v.overall.map)),
        a.out_dir.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct ReportSnapshot {
    command: &'static str,
    reports: Vec<String>,
}

pub fn report(a: ReportArgs) -> Result<(), CliError> {
    let mut rows: Vec<(PathBuf, EvalReport)> = Vec::new();
    for p in &a.reports {
        require(p)?;
        rows.push((
            p.clone(),
            serde_json::from_reader(BufReader::new(File::open(p)?))?,
        ));
    }
    out_dir(&a.out_dir)?;
    let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.2}"));
    let header = [
        "report",
        "model",
        "metric",
        "representation",
        "seed",
        "top1",
        "top5",
        "top10",
        "mrr",
        "map",
        "map10",
        "map100",
    ];
    let mut csv_out = csv::Writer::from_writer(create(&a.out_dir, "summary.csv")?);
    csv_out.write_record(header)?;
    let mut md = String::new();
    md.push_str(&format!("| {} |\n", header.join(" | ")));
    md.push_str(&format!("|{}\n", "---|".repeat(header.len())));
    for (path, r) in &rows {
        let lv = r.language_view.as_ref();
        let vv = r.visual_view.as_ref().map(|v| &v.overall);
        let record = [
            display(path),
            r.meta.model.clone(),
            u8::from(r.meta.metric).to_string(),
            r.meta.representation.clone(),
            r.meta.seed.to_string(),
            fmt(lv.and_then(|l| l.top1)),
            fmt(lv.and_then(|l| l.top5)),
            fmt(lv.and_then(|l| l.top10)),
            fmt(lv.and_then(|l| l.mrr)),
            fmt(vv.and_then(|v| v.map)),
            fmt(vv.and_then(|v| v.map10)),
            fmt(vv.and_then(|v| v.map100)),
        ];
        md.push_str(&format!("| {} |\n", record.join(" | ")));
        csv_out.write_record(&record)?;
    }
    csv_out.flush()?;
    let mut w = create(&a.out_dir, "summary.md")?;
    w.write_all(md.as_bytes())?;
    w.flush()?;
    write_json(
        &a.out_dir,
        CONFIG_SNAPSHOT,
        &ReportSnapshot {
            command: "report",
            reports: a.reports.iter().map(|p| display(p)).collect(),
        },
    )?;
    print!("{md}");
    Ok(())
}
