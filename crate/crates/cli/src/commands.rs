// SPDX-License-Identifier: MIT OR Apache-2.0

//! The pipelines behind each subcommand. Every function takes resolved
//! settings, writes its artifacts and returns what it wrote.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use headscope::analysis::{correlation_csv, correlation_matrix, scatter_csv};
use headscope::bench::{
    build_mcq_pope, build_pope, chair, eval_discriminative, evaluate_captions, evaluate_short_answer,
    plant_model, planted_data, AnnotationRecord, ChairResult, DiscriminativeMetrics, Lexicon, ObjectVocab,
    PlantedSpec, PopeOptions, PromptTemplates, Strategy, ToyWorld,
};
use headscope::dataset::{read_jsonl, write_jsonl, Sample};
use headscope::intervene::{lambda_map, select_heads, HeadSelection, Intervention, LambdaMap, PathEdge, PathMaskSpec};
use headscope::model::{load_model, save_model, GenerateOptions, Model};
use headscope::probes::{score_dataset, ScoreTable};
use headscope::provenance::{hash_bytes, Provenance};
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, TaskKind};
use crate::error::{CliError, Result};

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    headscope::Error::io(path, e).into()
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value).expect("report serializes") + "\n"))
}

pub fn file_hash(path: &Path) -> Result<String> {
    Ok(hash_bytes(&fs::read(path).map_err(|e| io_err(path, e))?))
}

/// Hash of the configuration and every weight.
pub fn model_hash(model: &Model) -> String {
    let mut bytes = serde_json::to_vec(&model.config).expect("config serializes");
    for (name, _, data) in model.tensors() {
        bytes.extend_from_slice(name.as_bytes());
        for v in data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    hash_bytes(&bytes)
}

/// Path of the provenance file that accompanies a JSONL dataset.
pub fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".provenance.json");
    PathBuf::from(s)
}

/// Writes `records` as JSONL plus a `<path>.provenance.json` sidecar, so
/// that the dataset itself stays one record per line.
pub fn write_dataset<T: Serialize>(path: &Path, records: &[T], provenance: &Provenance) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    write_jsonl(path, records)?;
    write_json(&sidecar(path), provenance)
}

fn load_samples(path: &Path) -> Result<Vec<Sample>> {
    let samples: Vec<Sample> = read_jsonl(path)?;
    if samples.is_empty() {
        return Err(headscope::Error::Validation(format!("{} holds no samples", path.display())).into());
    }
    Ok(samples)
}

/// Value of `# input.<name>=` in a CSV provenance header.
fn recorded_input(csv_path: &Path, name: &str) -> Result<Option<String>> {
    let text = fs::read_to_string(csv_path).map_err(|e| io_err(csv_path, e))?;
    let key = format!("# input.{name}=");
    Ok(text
        .lines()
        .take_while(|l| l.starts_with('#'))
        .find_map(|l| l.strip_prefix(&key).map(str::to_string)))
}

fn check_overlap(probe_hash: Option<&str>, test_hash: &str, allow: bool) -> Result<()> {
    match probe_hash {
        Some(p) if p == test_hash => {
            if allow {
                log::warn!("probe and test splits are identical; continuing because overlap is allowed");
                Ok(())
            } else {
                Err(CliError::Overlap(test_hash.to_string()))
            }
        }
        _ => Ok(()),
    }
}

#[derive(Debug, Clone)]
pub struct ScoreOutcome {
    pub t2t: ScoreTable,
    pub i2t: ScoreTable,
    pub t2t_path: PathBuf,
    pub i2t_path: PathBuf,
    /// Forward passes spent on scoring.
    pub forward_calls: u64,
    pub samples: usize,
}

/// Scores every head on the probe split and writes `t2t.csv` and `i2t.csv`.
pub fn cmd_score(cfg: &RunConfig) -> Result<ScoreOutcome> {
    let model_path = cfg.require(&cfg.model, "model")?;
    let probe_path = cfg.require(&cfg.probe, "probe")?;
    let probe_hash = file_hash(probe_path)?;
    if let Some(test) = &cfg.test {
        check_overlap(Some(&probe_hash), &file_hash(test)?, cfg.allow_overlap)?;
    }
    let model = load_model(model_path)?;
    let probe = load_samples(probe_path)?;
    model.reset_forward_count();
    let (t2t, i2t) = score_dataset(&model, &probe, cfg.variant)?;
    let forward_calls = model.forward_count();
    log::info!("scored {} samples with {forward_calls} forward passes", probe.len());
    let prov = Provenance::new(cfg.hash())
        .input("model", model_hash(&model))
        .input("probe", probe_hash)
        .seed(cfg.seed);
    ensure_dir(&cfg.out)?;
    let t2t_path = cfg.out.join("t2t.csv");
    let i2t_path = cfg.out.join("i2t.csv");
    write_text(&t2t_path, &t2t.to_csv(&prov))?;
    write_text(&i2t_path, &i2t.to_csv(&prov))?;
    Ok(ScoreOutcome {
        t2t,
        i2t,
        t2t_path,
        i2t_path,
        forward_calls,
        samples: probe.len(),
    })
}

/// Metrics of one run. `percent` holds the headline numbers on a 0–100
/// scale, the unit in which differences are reported.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub percent: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub discriminative: Option<DiscriminativeMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub chair: Option<ChairResult>,
    pub responses: Vec<String>,
}

/// `after − before` for every shared metric, in points.
pub fn point_deltas(before: &RunMetrics, after: &RunMetrics) -> BTreeMap<String, f64> {
    before
        .percent
        .iter()
        .filter_map(|(k, b)| after.percent.get(k).map(|a| (k.clone(), a - b)))
        .collect()
}

fn evaluate(
    model: &Model,
    samples: &[Sample],
    lexicon: &Lexicon,
    intervention: &Intervention,
    opts: &GenerateOptions,
    kind: TaskKind,
) -> Result<RunMetrics> {
    match kind {
        TaskKind::ShortAnswer => {
            let r = evaluate_short_answer(model, samples, lexicon, intervention, opts)?;
            let m = &r.metrics;
            let percent = [
                ("accuracy", m.accuracy),
                ("precision", m.precision),
                ("recall", m.recall),
                ("f1", m.f1),
                ("macro_f1", m.macro_f1),
            ]
            .into_iter()
            .map(|(k, v)| (k.to_string(), 100.0 * v))
            .collect();
            Ok(RunMetrics {
                percent,
                discriminative: Some(r.metrics),
                chair: None,
                responses: r.responses,
            })
        }
        TaskKind::OpenEnded => {
            let names: BTreeSet<&str> = samples.iter().flat_map(|s| &s.objects).map(|o| o.name.as_str()).collect();
            let vocab = ObjectVocab::from_objects(names);
            let r = evaluate_captions(model, samples, lexicon, intervention, opts, &vocab)?;
            let percent = [
                ("slot_accuracy", r.slot_accuracy),
                ("chair_s", r.chair.c_s),
                ("chair_i", r.chair.c_i),
            ]
            .into_iter()
            .map(|(k, v)| (k.to_string(), 100.0 * v))
            .collect();
            Ok(RunMetrics {
                percent,
                discriminative: None,
                chair: Some(r.chair),
                responses: r.responses,
            })
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct InterveneReport {
    pub provenance: Provenance,
    pub task: TaskKind,
    pub selection: HeadSelection,
    pub lambda: LambdaMap,
    pub mask_edges: Vec<String>,
    pub baseline: RunMetrics,
    pub intervened: RunMetrics,
    /// Intervened minus baseline, in points.
    pub delta: BTreeMap<String, f64>,
}

/// Selects heads from stored score tables, runs the test split with and
/// without the intervention and writes `intervene.json`.
pub fn cmd_intervene(cfg: &RunConfig) -> Result<InterveneReport> {
    let model_path = cfg.require(&cfg.model, "model")?;
    let test_path = cfg.require(&cfg.test, "test")?;
    let lexicon_path = cfg.require(&cfg.lexicon, "lexicon")?;
    let t2t_path = cfg.t2t.clone().unwrap_or_else(|| cfg.out.join("t2t.csv"));
    let i2t_path = cfg.i2t.clone().unwrap_or_else(|| cfg.out.join("i2t.csv"));
    for p in [&t2t_path, &i2t_path] {
        if !p.exists() {
            return Err(headscope::Error::Validation(format!(
                "score table {} not found; run `headscope score` first",
                p.display()
            ))
            .into());
        }
    }
    let test_hash = file_hash(test_path)?;
    let probe_hash = match &cfg.probe {
        Some(p) => Some(file_hash(p)?),
        None => recorded_input(&t2t_path, "probe")?,
    };
    check_overlap(probe_hash.as_deref(), &test_hash, cfg.allow_overlap)?;

    let t2t = ScoreTable::read_csv(&t2t_path)?;
    let i2t = ScoreTable::read_csv(&i2t_path)?;
    let test = load_samples(test_path)?;
    let kind = cfg.task.unwrap_or_else(|| TaskKind::of_dataset(&test));
    // selection errors surface before any generation
    let selection = select_heads(&t2t, &i2t, cfg.xi_for(kind), cfg.zeta_for(kind))?;
    let lambda = lambda_map(&selection, cfg.gamma_plus, cfg.gamma_minus)?;
    let model = load_model(model_path)?;
    let lexicon = Lexicon::read(lexicon_path)?;
    let opts = cfg.generate_options(kind);
    let edges = cfg.all_edges();
    let baseline = evaluate(&model, &test, &lexicon, &Intervention::default(), &opts, kind)?;
    let intervention = Intervention {
        lambda: Some(lambda.clone()),
        mask: PathMaskSpec::new(edges.iter().copied()),
    };
    let intervened = evaluate(&model, &test, &lexicon, &intervention, &opts, kind)?;
    let report = InterveneReport {
        provenance: Provenance::new(cfg.hash())
            .input("model", model_hash(&model))
            .input("test", test_hash)
            .input("t2t", file_hash(&t2t_path)?)
            .input("i2t", file_hash(&i2t_path)?)
            .seed(cfg.seed),
        task: kind,
        selection,
        lambda,
        mask_edges: edges.iter().map(ToString::to_string).collect(),
        delta: point_deltas(&baseline, &intervened),
        baseline,
        intervened,
    };
    write_json(&cfg.out.join("intervene.json"), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub edges: Vec<String>,
    pub without_mask: BTreeMap<String, f64>,
    pub with_mask: BTreeMap<String, f64>,
    /// With minus without, in points.
    pub delta: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblateReport {
    pub provenance: Provenance,
    pub task: TaskKind,
    pub rows: Vec<AblationRow>,
}

/// `↓32.2`, `↑1.5` or `0.0`.
pub fn format_delta(d: f64) -> String {
    let r = (d * 10.0).round() / 10.0;
    if r < 0.0 {
        format!("↓{:.1}", -r)
    } else if r > 0.0 {
        format!("↑{r:.1}")
    } else {
        "0.0".into()
    }
}

/// Plain-text table with one line per edge set and metric.
pub fn ablation_table(report: &AblateReport) -> String {
    let mut s = format!("{:<28} {:<14} {:>9} {:>9} {:>8}\n", "edges", "metric", "w/o mask", "w/ mask", "delta");
    for row in &report.rows {
        let edges = if row.edges.is_empty() { "(none)".to_string() } else { row.edges.join(",") };
        for (k, before) in &row.without_mask {
            let after = row.with_mask[k];
            s.push_str(&format!(
                "{edges:<28} {k:<14} {before:>9.1} {after:>9.1} {:>8}\n",
                format_delta(row.delta[k])
            ));
        }
    }
    s
}

/// Evaluates the test split once unmasked and once per edge set; writes
/// `ablate.json` and `ablate.txt`.
pub fn cmd_ablate(cfg: &RunConfig) -> Result<AblateReport> {
    let model_path = cfg.require(&cfg.model, "model")?;
    let test_path = cfg.require(&cfg.test, "test")?;
    let lexicon_path = cfg.require(&cfg.lexicon, "lexicon")?;
    let model = load_model(model_path)?;
    let lexicon = Lexicon::read(lexicon_path)?;
    let test = load_samples(test_path)?;
    let kind = cfg.task.unwrap_or_else(|| TaskKind::of_dataset(&test));
    let opts = cfg.generate_options(kind);
    let base = evaluate(&model, &test, &lexicon, &Intervention::default(), &opts, kind)?;
    let sets: Vec<Vec<PathEdge>> = if cfg.edge_sets.is_empty() { vec![vec![]] } else { cfg.edge_sets.clone() };
    let mut rows = Vec::with_capacity(sets.len());
    for set in sets {
        let masked = if set.is_empty() {
            base.clone()
        } else {
            let mask = Intervention::masking(PathMaskSpec::new(set.iter().copied()));
            evaluate(&model, &test, &lexicon, &mask, &opts, kind)?
        };
        rows.push(AblationRow {
            edges: set.iter().map(ToString::to_string).collect(),
            delta: point_deltas(&base, &masked),
            without_mask: base.percent.clone(),
            with_mask: masked.percent,
        });
    }
    let report = AblateReport {
        provenance: Provenance::new(cfg.hash())
            .input("model", model_hash(&model))
            .input("test", file_hash(test_path)?)
            .seed(cfg.seed),
        task: kind,
        rows,
    };
    write_json(&cfg.out.join("ablate.json"), &report)?;
    write_text(&cfg.out.join("ablate.txt"), &ablation_table(&report))?;
    Ok(report)
}

/// `name=path`, or a bare path named after its file stem.
pub fn parse_named_table(spec: &str) -> (String, PathBuf) {
    match spec.split_once('=') {
        Some((name, path)) if !name.is_empty() => (name.to_string(), PathBuf::from(path)),
        _ => {
            let p = PathBuf::from(spec);
            let name = p.file_stem().and_then(|s| s.to_str()).unwrap_or(spec).to_string();
            (name, p)
        }
    }
}

#[derive(Debug, Clone)]
pub struct CorrelateOutcome {
    pub names: Vec<String>,
    pub matrix: Vec<Vec<f64>>,
    pub written: Vec<PathBuf>,
}

/// Pairwise rank correlations (`rho.csv`) and one scatter file per pair.
pub fn cmd_correlate(tables: &[(String, PathBuf)], out: &Path, seed: u64) -> Result<CorrelateOutcome> {
    if tables.is_empty() {
        return Err(CliError::Usage("correlate needs at least one --table".into()));
    }
    let mut named = Vec::with_capacity(tables.len());
    let mut prov = Provenance::new(headscope::provenance::hash_json(
        &tables.iter().map(|(n, _)| n.as_str()).collect::<Vec<_>>(),
    ))
    .seed(seed);
    for (name, path) in tables {
        named.push((name.clone(), ScoreTable::read_csv(path)?));
        prov = prov.input(name.clone(), file_hash(path)?);
    }
    let matrix = correlation_matrix(&named)?;
    let names: Vec<String> = named.iter().map(|(n, _)| n.clone()).collect();
    ensure_dir(out)?;
    let mut written = vec![out.join("rho.csv")];
    write_text(&written[0], &correlation_csv(&names, &matrix, &prov))?;
    for i in 0..named.len() {
        for j in i + 1..named.len() {
            let path = out.join(format!("scatter_{}__{}.csv", names[i], names[j]));
            write_text(&path, &scatter_csv(&named[i].1, &named[j].1, &prov)?)?;
            written.push(path);
        }
    }
    Ok(CorrelateOutcome { names, matrix, written })
}

/// Toy annotations plus the lexicon they are encoded with.
pub fn cmd_toy_annotations(images: usize, seed: u64, out: &Path, lexicon_out: Option<&Path>) -> Result<Vec<AnnotationRecord>> {
    let world = ToyWorld::new();
    let records = world.annotations(images, seed, "img-");
    let prov = Provenance::new(headscope::provenance::hash_json(&("toy-annotations", images)))
        .input("lexicon", headscope::provenance::hash_json(&world.lexicon))
        .seed(seed);
    write_dataset(out, &records, &prov)?;
    if let Some(l) = lexicon_out {
        if let Some(parent) = l.parent().filter(|p| !p.as_os_str().is_empty()) {
            ensure_dir(parent)?;
        }
        world.lexicon.write(l)?;
    }
    Ok(records)
}

fn read_templates(path: Option<&Path>) -> Result<PromptTemplates> {
    match path {
        None => Ok(PromptTemplates::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| io_err(p, e))?;
            serde_json::from_str(&text).map_err(|e| {
                headscope::Error::Parse {
                    path: p.to_path_buf(),
                    reason: e.to_string(),
                }
                .into()
            })
        }
    }
}

pub struct BuildPopeArgs<'a> {
    pub annotations: &'a Path,
    pub lexicon: &'a Path,
    pub templates: Option<&'a Path>,
    pub strategy: Strategy,
    pub per_image: usize,
    pub seed: u64,
    pub out: &'a Path,
}

pub fn cmd_build_pope(a: &BuildPopeArgs<'_>) -> Result<Vec<Sample>> {
    let records: Vec<AnnotationRecord> = read_jsonl(a.annotations)?;
    let lexicon = Lexicon::read(a.lexicon)?;
    let templates = read_templates(a.templates)?;
    let opts = PopeOptions {
        per_image_pos: a.per_image,
        per_image_neg: a.per_image,
        ..PopeOptions::new(a.strategy, a.seed)
    };
    let samples = build_pope(&records, &lexicon, &templates, &opts)?;
    let prov = Provenance::new(headscope::provenance::hash_json(&(&opts, &templates)))
        .input("annotations", file_hash(a.annotations)?)
        .input("lexicon", file_hash(a.lexicon)?)
        .seed(a.seed);
    write_dataset(a.out, &samples, &prov)?;
    Ok(samples)
}

pub fn cmd_build_mcq(pope: &Path, lexicon: &Path, templates: Option<&Path>, seed: u64, out: &Path) -> Result<Vec<Sample>> {
    let questions = load_samples(pope)?;
    let lex = Lexicon::read(lexicon)?;
    let templates = read_templates(templates)?;
    let samples = build_mcq_pope(&questions, &lex, &templates, seed)?;
    let prov = Provenance::new(headscope::provenance::hash_json(&templates))
        .input("pope", file_hash(pope)?)
        .input("lexicon", file_hash(lexicon)?)
        .seed(seed);
    write_dataset(out, &samples, &prov)?;
    Ok(samples)
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport<T> {
    pub provenance: Provenance,
    pub metrics: T,
}

/// Responses file: one JSON string per line.
pub fn cmd_eval(dataset: &Path, responses: &Path, out: &Path) -> Result<MetricsReport<DiscriminativeMetrics>> {
    let samples = load_samples(dataset)?;
    let answers: Vec<String> = read_jsonl(responses)?;
    let report = MetricsReport {
        provenance: Provenance::new(headscope::provenance::hash_json("eval"))
            .input("dataset", file_hash(dataset)?)
            .input("responses", file_hash(responses)?),
        metrics: eval_discriminative(&answers, &samples)?,
    };
    write_json(out, &report)?;
    Ok(report)
}

/// One captioned image for `bench chair`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub caption: String,
    pub objects: Vec<String>,
}

/// Vocabulary file: either a list of object names or a map from canonical
/// name to surface phrases.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum VocabFile {
    Names(Vec<String>),
    Synonyms(BTreeMap<String, Vec<String>>),
}

pub fn cmd_chair(captions: &Path, vocab: Option<&Path>, out: &Path) -> Result<MetricsReport<ChairResult>> {
    let records: Vec<CaptionRecord> = read_jsonl(captions)?;
    let mut v = ObjectVocab::from_objects(records.iter().flat_map(|r| &r.objects));
    let mut prov = Provenance::new(headscope::provenance::hash_json("chair")).input("captions", file_hash(captions)?);
    if let Some(p) = vocab {
        let text = fs::read_to_string(p).map_err(|e| io_err(p, e))?;
        let file: VocabFile = serde_json::from_str(&text).map_err(|e| headscope::Error::Parse {
            path: p.to_path_buf(),
            reason: e.to_string(),
        })?;
        match file {
            VocabFile::Names(names) => names.iter().for_each(|n| v.add(n, [n])),
            VocabFile::Synonyms(map) => map.iter().for_each(|(c, s)| v.add(c, s)),
        }
        prov = prov.input("vocab", file_hash(p)?);
    }
    let words: Vec<Vec<&str>> = records
        .iter()
        .map(|r| headscope::bench::split_words(&r.caption))
        .collect();
    let truth: Vec<BTreeSet<String>> = records.iter().map(|r| r.objects.iter().cloned().collect()).collect();
    let report = MetricsReport {
        provenance: prov,
        metrics: chair(&words, &truth, &v)?,
    };
    write_json(out, &report)?;
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct PlantOutcome {
    pub spec: PlantedSpec,
    pub model_path: PathBuf,
    pub lexicon_path: PathBuf,
    pub probe_path: PathBuf,
    pub test_path: PathBuf,
    pub captions_path: PathBuf,
    pub mcq_path: PathBuf,
}

/// Planted model, ground truth, lexicon and every split under `out`.
pub fn cmd_plant(spec_path: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<PlantOutcome> {
    let mut spec = match spec_path {
        None => PlantedSpec::default(),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| io_err(p, e))?;
            serde_json::from_str(&text).map_err(|e| headscope::Error::Parse {
                path: p.to_path_buf(),
                reason: e.to_string(),
            })?
        }
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    let model = plant_model(&spec)?;
    let data = planted_data(&spec)?;
    ensure_dir(out)?;
    let model_path = out.join("model.json");
    save_model(&model, &model_path)?;
    write_json(&out.join("spec.json"), &spec)?;
    write_json(&out.join("ground_truth.json"), &spec.ground_truth())?;
    let lexicon_path = out.join("lexicon.json");
    ToyWorld::new().lexicon.write(&lexicon_path)?;
    let prov = Provenance::new(headscope::provenance::hash_json(&spec))
        .input("model", model_hash(&model))
        .seed(spec.seed);
    let path = |n: &str| out.join(format!("{n}.jsonl"));
    for (name, samples) in [
        ("probe", &data.probe),
        ("test", &data.test),
        ("captions", &data.captions),
        ("mcq", &data.mcq),
    ] {
        write_dataset(&path(name), samples, &prov)?;
    }
    Ok(PlantOutcome {
        spec,
        model_path,
        lexicon_path,
        probe_path: path("probe"),
        test_path: path("test"),
        captions_path: path("captions"),
        mcq_path: path("mcq"),
    })
}
