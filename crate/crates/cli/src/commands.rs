use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde_json::{json, Map, Value};
use textgeo::cellgeo::level_stats;
use textgeo::dataset::{write_record, LabeledRecord, SourceRecord, SplitSide, SplitSpec};
use textgeo::decode::{beam_search, BeamConfig, LabelTrie, LoadedScorer, PredictionRecord, SequenceScorer};
use textgeo::metrics::{EvalPair, EvalReport};
use textgeo::partition::PartitionError;
use textgeo::{build_partition, AdaptivePartition, LabelString, LatLon, PartitionParams};
use textgeo_service::{serve as run_service, ServiceConfig, ServiceError};

use crate::io::{open_records, path_str, print_params, report_rejections, resolve_format, Output};
use crate::{CliError, EvaluateArgs, InspectArgs, LabelArgs, PartitionArgs, PredictArgs, ServeArgs, SplitArgs, TrainArgs};

/// Missing ids printed by `evaluate` before it only counts.
const MAX_LISTED_MISSING: usize = 100;

fn load_partition(path: &Path) -> Result<AdaptivePartition, CliError> {
    AdaptivePartition::load(path).map_err(CliError::data)
}

fn print_json(value: &Value) -> Result<(), CliError> {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{value}").map_err(CliError::internal)
}

/// Drains `reader` through `f`, stopping at the first read error.
fn for_each_record<R: std::io::BufRead>(
    reader: &mut textgeo::dataset::RecordReader<R>,
    mut f: impl FnMut(SourceRecord) -> Result<(), CliError>,
) -> Result<(), CliError> {
    for rec in reader {
        f(rec.map_err(CliError::data)?)?;
    }
    Ok(())
}

pub fn partition(a: PartitionArgs) -> Result<(), CliError> {
    let format = resolve_format(&a.input.input, a.input.format)?;
    print_params(
        "partition",
        json!({
            "input": path_str(&a.input.input),
            "format": format.to_string(),
            "max_cell_samples": a.max_cell_samples,
            "max_level": a.max_level,
            "output": path_str(&a.output),
        }),
    );
    let params = PartitionParams::new(a.max_cell_samples, a.max_level).map_err(|e| CliError::Usage(e.to_string()))?;
    let mut reader = open_records(&a.input.input, Some(format))?;
    let mut read_error = None;
    let points = reader.by_ref().map_while(|r| match r {
        Ok(rec) => Some(rec.record.loc()),
        Err(e) => {
            read_error = Some(e);
            None
        }
    });
    let partition = build_partition(points, params).map_err(CliError::data)?;
    if let Some(e) = read_error {
        return Err(CliError::data(e));
    }
    report_rejections(&a.input.input, reader.report());
    partition.save(&a.output).map_err(|e| match e {
        PartitionError::Io { .. } => CliError::internal(e),
        other => CliError::data(other),
    })?;
    print_json(&json!({
        "output": path_str(&a.output),
        "leaves": partition.len(),
        "total_points": partition.total_points(),
        "checksum": partition.checksum(),
    }))
}

pub fn label(a: LabelArgs) -> Result<(), CliError> {
    let format = resolve_format(&a.input.input, a.input.format)?;
    print_params(
        "label",
        json!({
            "input": path_str(&a.input.input),
            "format": format.to_string(),
            "partition": path_str(&a.partition),
            "output": a.output.as_deref().map(path_str),
        }),
    );
    let partition = load_partition(&a.partition)?;
    let mut reader = open_records(&a.input.input, Some(format))?;
    let mut out = Output::open(a.output.as_ref())?;
    let mut written = 0u64;
    for_each_record(&mut reader, |rec| {
        let label = LabelString::from(partition.leaf_for(rec.record.loc()));
        write_record(&mut out, &rec.record, Some(&label), format).map_err(CliError::internal)?;
        written += 1;
        Ok(())
    })?;
    out.finish()?;
    report_rejections(&a.input.input, reader.report());
    eprintln!("labeled {written} records against partition {}", partition.checksum());
    Ok(())
}

pub fn split(a: SplitArgs) -> Result<(), CliError> {
    let format = resolve_format(&a.input.input, a.input.format)?;
    print_params(
        "split",
        json!({
            "input": path_str(&a.input.input),
            "format": format.to_string(),
            "train": path_str(&a.train),
            "test": path_str(&a.test),
            "train_fraction": a.train_fraction,
            "seed": a.seed,
        }),
    );
    let spec = SplitSpec::new(a.train_fraction, a.seed).map_err(|e| CliError::Usage(e.to_string()))?;
    let mut reader = open_records(&a.input.input, Some(format))?;
    let mut train = Output::open(Some(&a.train))?;
    let mut test = Output::open(Some(&a.test))?;
    let (mut n_train, mut n_test) = (0u64, 0u64);
    for_each_record(&mut reader, |rec| {
        let (out, n) = match spec.assign(&rec.record.id) {
            SplitSide::Train => (&mut train, &mut n_train),
            SplitSide::Test => (&mut test, &mut n_test),
        };
        *n += 1;
        write_record(out, &rec.record, rec.label.as_ref(), format).map_err(CliError::internal)
    })?;
    train.finish()?;
    test.finish()?;
    report_rejections(&a.input.input, reader.report());
    print_json(&json!({ "train": n_train, "test": n_test }))
}

pub fn train_baseline(a: TrainArgs) -> Result<(), CliError> {
    let format = resolve_format(&a.input.input, a.input.format)?;
    print_params(
        "train-baseline",
        json!({
            "input": path_str(&a.input.input),
            "format": format.to_string(),
            "partition": path_str(&a.partition),
            "alpha": a.alpha,
            "output": path_str(&a.output),
        }),
    );
    if !(a.alpha > 0.0 && a.alpha.is_finite()) {
        return Err(CliError::Usage(format!("--alpha must be positive and finite, got {}", a.alpha)));
    }
    let partition = load_partition(&a.partition)?;
    let mut reader = open_records(&a.input.input, Some(format))?;
    let mut read_error = None;
    let records = reader.by_ref().map_while(|r| match r {
        Ok(SourceRecord { record, label }) => {
            let label = label.unwrap_or_else(|| partition.leaf_for(record.loc()).into());
            Some(LabeledRecord { record, label })
        }
        Err(e) => {
            read_error = Some(e);
            None
        }
    });
    let model = textgeo::decode::train_baseline(records, &partition, a.alpha).map_err(CliError::data)?;
    if let Some(e) = read_error {
        return Err(CliError::data(e));
    }
    report_rejections(&a.input.input, reader.report());
    model.save(&a.output).map_err(CliError::internal)?;
    print_json(&json!({
        "output": path_str(&a.output),
        "model_id": model.id(),
        "partition_checksum": model.partition_checksum(),
        "trained_leaves": model.trained_leaves().count(),
        "vocabulary": model.vocabulary_size(),
        "records": reader.report().accepted,
    }))
}

pub fn predict(a: PredictArgs) -> Result<(), CliError> {
    let format = a.input.as_deref().map(|p| resolve_format(p, a.format)).transpose()?;
    print_params(
        "predict",
        json!({
            "model": path_str(&a.model),
            "partition": path_str(&a.partition),
            "text": a.text,
            "input": a.input.as_deref().map(path_str),
            "format": format.map(|f| f.to_string()),
            "beam": a.beam,
            "top_k": a.top_k,
            "output": a.output.as_deref().map(path_str),
        }),
    );
    let config = BeamConfig::new(a.beam, a.top_k).map_err(|e| CliError::Usage(e.to_string()))?;
    if a.text.as_deref().is_some_and(|t| t.trim().is_empty()) {
        return Err(CliError::Usage("--text is empty".into()));
    }
    let partition = load_partition(&a.partition)?;
    let scorer = LoadedScorer::load(&a.model, &partition).map_err(CliError::data)?;
    let trie = LabelTrie::from_partition(&partition);
    eprintln!("scorer {} ({}) over {} leaves", scorer.id(), scorer.kind(), trie.leaf_count());

    let mut out = Output::open(a.output.as_ref())?;
    let mut emit = |id: &str, text: &str, gold: Option<LabelString>| -> Result<(), CliError> {
        let hyps = beam_search(&scorer, text, &trie, config).map_err(CliError::data)?;
        let line = serde_json::to_string(&PredictionRecord::new(id, text, gold, &hyps)).map_err(CliError::internal)?;
        writeln!(out, "{line}").map_err(CliError::internal)
    };
    match (&a.text, &a.input) {
        (Some(text), _) => emit("query", text, None)?,
        (None, Some(input)) => {
            let mut reader = open_records(input, format)?;
            for_each_record(&mut reader, |rec| {
                let gold = rec.label.unwrap_or_else(|| partition.leaf_for(rec.record.loc()).into());
                emit(&rec.record.id, &rec.record.text, Some(gold))
            })?;
            report_rejections(input, reader.report());
            eprintln!("decoded {} records", reader.report().accepted);
        }
        (None, None) => return Err(CliError::Usage("one of --text or --input is required".into())),
    }
    out.finish()
}

struct Gold {
    label: LabelString,
    loc: LatLon,
}

fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
    let mut seen = HashMap::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let rec: PredictionRecord = serde_json::from_str(line)
            .map_err(|e| CliError::Data(format!("{} line {}: {e}", path.display(), i + 1)))?;
        if rec.predictions.is_empty() {
            return Err(CliError::Data(format!("{} line {}: no predictions for id {:?}", path.display(), i + 1, rec.id)));
        }
        if let Some(first) = seen.insert(rec.id.clone(), i + 1) {
            return Err(CliError::Data(format!(
                "{}: id {:?} appears on lines {first} and {}",
                path.display(),
                rec.id,
                i + 1
            )));
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn evaluate(a: EvaluateArgs) -> Result<(), CliError> {
    let format = resolve_format(&a.gold, a.format)?;
    print_params(
        "evaluate",
        json!({
            "pred": path_str(&a.pred),
            "gold": path_str(&a.gold),
            "format": format.to_string(),
            "partition": a.partition.as_deref().map(path_str),
            "report": a.report.as_deref().map(path_str),
        }),
    );
    let partition = a.partition.as_deref().map(load_partition).transpose()?;
    let preds = read_predictions(&a.pred)?;

    let mut gold: HashMap<String, Gold> = HashMap::new();
    let mut reader = open_records(&a.gold, Some(format))?;
    for_each_record(&mut reader, |rec| {
        let loc = rec.record.loc();
        let label = match (rec.label, &partition) {
            (Some(l), _) => l,
            (None, Some(p)) => p.leaf_for(loc).into(),
            (None, None) => {
                return Err(CliError::Data(format!(
                    "gold record {:?} has no label; pass --partition to label it",
                    rec.record.id
                )))
            }
        };
        match gold.insert(rec.record.id.clone(), Gold { label, loc }) {
            Some(_) => Err(CliError::Data(format!("gold id {:?} appears more than once", rec.record.id))),
            None => Ok(()),
        }
    })?;
    report_rejections(&a.gold, reader.report());

    let mut pairs = Vec::with_capacity(preds.len());
    let mut missing = Vec::new();
    for p in &preds {
        match gold.get(&p.id) {
            Some(g) => pairs.push(EvalPair::new(p.predictions[0].label.clone(), g.label.clone()).with_location(g.loc)),
            None => missing.push(p.id.as_str()),
        }
    }
    let unpredicted = gold.len() - pairs.len();
    if unpredicted > 0 {
        eprintln!("{unpredicted} gold records have no prediction and are not scored");
    }
    if pairs.is_empty() {
        return Err(CliError::Data("no predicted id matches a gold record".into()));
    }
    let report = EvalReport::evaluate(&pairs).map_err(CliError::internal)?;
    let mut value = serde_json::to_value(&report).map_err(CliError::internal)?;
    value["missing_from_gold"] = json!(missing.len());
    if let Some(path) = &a.report {
        let mut out = Output::open(Some(path))?;
        writeln!(out, "{}", serde_json::to_string_pretty(&value).map_err(CliError::internal)?)
            .map_err(CliError::internal)?;
        out.finish()?;
    }
    print_json(&value)?;
    eprint!("{report}");
    if !missing.is_empty() {
        eprintln!("{} predicted ids are missing from gold:", missing.len());
        for id in missing.iter().take(MAX_LISTED_MISSING) {
            eprintln!("  {id}");
        }
        if missing.len() > MAX_LISTED_MISSING {
            eprintln!("  ... {} more", missing.len() - MAX_LISTED_MISSING);
        }
        return Err(CliError::Data(format!("{} predicted ids missing from gold", missing.len())));
    }
    Ok(())
}

pub fn serve(a: ServeArgs) -> Result<(), CliError> {
    let mut config = ServiceConfig::new(a.partition.unwrap_or_default(), a.model.unwrap_or_default());
    if let Some(bind) = a.bind {
        config.bind = bind;
    }
    if let Some(beam) = a.beam {
        config.beam_width = beam;
    }
    if let Some(k) = a.top_k {
        config.top_k = k;
    }
    config.cors_origins = a.cors_origins.into_iter().filter(|o| !o.is_empty()).collect();
    let config = config.with_process_env().map_err(|e| CliError::Usage(e.to_string()))?;
    print_params(
        "serve",
        json!({
            "bind": config.bind.to_string(),
            "partition": path_str(&config.partition),
            "model": path_str(&config.model),
            "beam": config.beam_width,
            "top_k": config.top_k,
            "cors_origins": config.cors_origins,
        }),
    );
    if config.partition == PathBuf::new() || config.model == PathBuf::new() {
        return Err(CliError::Usage("--partition and --model (or their environment variables) are required".into()));
    }
    config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let runtime = tokio::runtime::Runtime::new().map_err(CliError::internal)?;
    runtime.block_on(run_service(config)).map_err(|e| match e {
        ServiceError::Config(e) => CliError::Usage(e.to_string()),
        ServiceError::Partition(e) => CliError::data(e),
        ServiceError::Model(e) => CliError::data(e),
        ServiceError::Io(e) => CliError::internal(e),
    })
}

fn partition_summary(p: &AdaptivePartition) -> Value {
    let mut by_level: BTreeMap<u8, (u64, u64)> = BTreeMap::new();
    for (cell, count) in p.leaves() {
        let e = by_level.entry(cell.level()).or_default();
        e.0 += 1;
        e.1 += count;
    }
    json!({
        "checksum": p.checksum(),
        "max_cell_samples": p.params().max_cell_samples,
        "max_level": p.max_level(),
        "leaves": p.len(),
        "total_points": p.total_points(),
        "max_leaf_count": p.leaves().map(|(_, n)| n).max(),
        "by_level": by_level
            .into_iter()
            .map(|(level, (leaves, points))| json!({ "level": level, "leaves": leaves, "points": points }))
            .collect::<Vec<_>>(),
    })
}

fn label_summary(label: &LabelString, partition: Option<&AdaptivePartition>) -> Value {
    let cell = label.cell();
    let center = cell.center();
    let mut v = json!({
        "label": label,
        "face": cell.face_index(),
        "level": cell.level(),
        "center": { "lat": center.lat(), "lon": center.lon() },
        "area_km2": cell.area_km2(),
        "ancestors": label.ancestors(),
    });
    if let Some(p) = partition {
        v["is_leaf"] = json!(p.is_leaf(&cell));
        v["count"] = json!(p.count(&cell));
        v["leaf"] = json!(p.leaf_containing(&cell).map(LabelString::from));
    }
    v
}

pub fn inspect(a: InspectArgs) -> Result<(), CliError> {
    print_params(
        "inspect",
        json!({
            "partition": a.partition.as_deref().map(path_str),
            "label": a.label,
            "levels": a.levels,
        }),
    );
    let partition = a.partition.as_deref().map(load_partition).transpose()?;
    let mut out = Map::new();
    if let Some(p) = &partition {
        out.insert("partition".into(), partition_summary(p));
    }
    if let Some(raw) = &a.label {
        let max_level = partition.as_ref().map_or(textgeo::cellgeo::MAX_LEVEL, |p| p.max_level());
        let label = LabelString::parse_with_max_level(raw, max_level).map_err(|e| CliError::Usage(e.to_string()))?;
        out.insert("label".into(), label_summary(&label, partition.as_ref()));
    }
    if let Some(max) = a.levels {
        let rows = (0..=max)
            .map(|l| level_stats(l).map(|s| json!(s)))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| CliError::Usage(e.to_string()))?;
        out.insert("levels".into(), Value::Array(rows));
    }
    print_json(&Value::Object(out))
}
