//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit on any FAIL.

#[path = "../../service/tests/suite/mod.rs"]
mod suite;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use textgeo::cellgeo::{level_stats, sphere_area_km2};
use textgeo::dataset::{LabeledRecord, RawRecord};
use textgeo::decode::{beam_search, tokenize, train_baseline, BeamConfig, Hypothesis, LabelTrie};
use textgeo::labelcodec::{decode, encode};
use textgeo::metrics::{flat_accuracy, hierarchical_scores, EvalPair};
use textgeo::{build_partition, AdaptivePartition, CellId, LabelString, LatLon, PartitionParams};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn all_cells(level: u8) -> Vec<CellId> {
    let mut cells: Vec<CellId> = CellId::faces().collect();
    for _ in 0..level {
        cells = cells.iter().flat_map(|c| c.children().unwrap()).collect();
    }
    cells
}

fn area_ratio() -> Check {
    let areas: Vec<f64> = all_cells(6).iter().map(CellId::area_km2).collect();
    let max = areas.iter().copied().fold(f64::MIN, f64::max);
    let min = areas.iter().copied().fold(f64::MAX, f64::min);
    let ratio = max / min;
    ensure((1.9..=2.2).contains(&ratio), || format!("ratio {ratio}"))?;
    Ok(format!("{} cells, max/min = {ratio:.4}", areas.len()))
}

/// Printed value and one unit of its last significant digit.
const TABLE: [(u8, f64, f64, f64, f64); 11] = [
    (0, 85e6, 1e6, 6.0, 1.0),
    (1, 21e6, 1e6, 24.0, 1.0),
    (2, 5e6, 1e6, 96.0, 1.0),
    (3, 1.3e6, 0.1e6, 384.0, 1.0),
    (4, 330e3, 10e3, 1536.0, 1.0),
    (5, 83e3, 1e3, 6e3, 1e3),
    (6, 20e3, 1e3, 24e3, 1e3),
    (7, 5e3, 1e3, 98e3, 1e3),
    (8, 1297.0, 1.0, 393e3, 1e3),
    (9, 324.0, 1.0, 1573e3, 1e3),
    (10, 81.0, 1.0, 6e6, 1e6),
];

fn level_table() -> Check {
    let mut detail = String::new();
    for (level, area, area_unit, count, count_unit) in TABLE {
        let s = level_stats(level).map_err(|e| e.to_string())?;
        let n = s.cell_count as f64;
        ensure(n == 6.0 * 4f64.powi(level as i32), || format!("level {level} count {n}"))?;
        if level <= 6 {
            let summed: f64 = all_cells(level).iter().map(CellId::area_km2).sum::<f64>() / n;
            ensure((summed - s.avg_area_km2).abs() <= 1e-9 * s.avg_area_km2, || {
                format!("level {level}: summed exact areas {summed} vs {}", s.avg_area_km2)
            })?;
        }
        ensure((s.avg_area_km2 - area).abs() <= area_unit, || {
            format!("level {level}: area {} vs printed {area}", s.avg_area_km2)
        })?;
        ensure((n - count).abs() <= count_unit, || format!("level {level}: count {n} vs printed {count}"))?;
        let _ = write!(detail, "L{level}={:.0} ", s.avg_area_km2);
    }
    let l8 = level_stats(8).unwrap().avg_area_km2;
    ensure((l8 - 1297.0).abs() <= 0.01 * 1297.0, || format!("level 8 area {l8}"))?;
    ensure((sphere_area_km2() - 510_064_471.9).abs() < 1.0, || "sphere area".into())?;
    Ok(detail.trim_end().to_owned())
}

fn codec() -> Check {
    for (face, digits, want) in [(2u8, &[][..], "2"), (1, &[2][..], "12"), (4, &[3, 1][..], "431")] {
        let cell = CellId::new(face, digits).unwrap();
        ensure(encode(&cell).as_str() == want, || format!("{cell:?} encodes to {}", encode(&cell)))?;
        ensure(decode(want) == Ok(cell), || format!("{want} decodes wrong"))?;
    }
    let mut n = 0;
    for level in 0..=5 {
        for cell in all_cells(level) {
            let label = encode(&cell);
            ensure(label.len() == level as usize + 1, || format!("{label} length"))?;
            ensure(decode(label.as_str()) == Ok(cell), || format!("{label} round trip"))?;
            ensure(label.ancestors().iter().enumerate().all(|(k, a)| a.as_str() == &label.as_str()[..=k]), || {
                format!("{label} ancestors")
            })?;
            n += 1;
        }
    }
    ensure(n == 6 * (1 + 4 + 16 + 64 + 256 + 1024), || format!("{n} cells"))?;
    Ok(format!("goldens 2, 12, 431; {n} cells round-trip"))
}

fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<LatLon> {
    let centers: Vec<(f64, f64)> = (0..rng.gen_range(1..8)).map(|_| (rng.gen_range(-80.0..80.0), rng.gen_range(-179.0..179.0))).collect();
    let spread = rng.gen_range(0.01..10.0f64);
    (0..n)
        .map(|_| {
            if rng.gen_bool(0.3) {
                let z: f64 = rng.gen_range(-1.0..=1.0);
                return LatLon::new(z.asin().to_degrees(), rng.gen_range(-180.0..180.0)).unwrap();
            }
            let (lat, lon) = centers[rng.gen_range(0..centers.len())];
            let lat = (lat + rng.gen_range(-spread..spread)).clamp(-90.0, 90.0);
            let lon = (lon + rng.gen_range(-spread..spread) + 540.0).rem_euclid(360.0) - 180.0;
            LatLon::new(lat, lon).unwrap()
        })
        .collect()
}

fn partition_suite() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(20_240_601);
    let mut leaves_seen = Vec::new();
    for setting in 0..20 {
        let points = random_points(&mut rng, 10_000);
        let cap = (10f64.powf(rng.gen_range(0.0..3.0))).round() as u64;
        let max_level = rng.gen_range(0..=12u8);
        let params = PartitionParams::new(cap, max_level).unwrap();
        let p = build_partition(points.iter().copied(), params).unwrap();
        let leaves: BTreeMap<CellId, u64> = p.leaves().collect();
        let tag = |m: &str| format!("setting {setting} (cap {cap}, level {max_level}): {m}");

        let keys: Vec<&CellId> = leaves.keys().collect();
        ensure(keys.windows(2).all(|w| !w[0].contains_cell(w[1])), || tag("leaves overlap"))?;
        let cover: u128 = keys.iter().map(|c| 4u128.pow(u32::from(max_level - c.level()))).sum();
        ensure(cover == 6 * 4u128.pow(u32::from(max_level)), || tag("leaves do not cover the sphere"))?;

        let mut counted: BTreeMap<CellId, u64> = BTreeMap::new();
        for q in &points {
            let hits: Vec<CellId> =
                (0..=max_level).map(|l| CellId::from_latlon(*q, l).unwrap()).filter(|c| leaves.contains_key(c)).collect();
            ensure(hits.len() == 1, || tag(&format!("{q:?} lies in {} leaves", hits.len())))?;
            *counted.entry(hits[0]).or_default() += 1;
        }
        ensure(leaves.iter().all(|(c, n)| counted.get(c).copied().unwrap_or(0) == *n), || tag("counts disagree"))?;
        ensure(leaves.iter().all(|(c, n)| *n <= cap || c.level() == max_level), || tag("capacity exceeded"))?;

        let mut internal: BTreeMap<CellId, u64> = BTreeMap::new();
        for (c, n) in &leaves {
            for l in 0..c.level() {
                *internal.entry(c.ancestor(l).unwrap()).or_default() += n;
            }
        }
        ensure(internal.values().all(|n| *n > cap), || tag("a split was not needed"))?;

        let mut shuffled = points.clone();
        shuffled.shuffle(&mut rng);
        ensure(build_partition(shuffled, params).unwrap() == p, || tag("order changes the partition"))?;
        leaves_seen.push(p.len());
    }
    Ok(format!("20 settings x 10k points, leaves {:?}..{:?}", leaves_seen.iter().min(), leaves_seen.iter().max()))
}

fn partition_of(labels: &[String]) -> AdaptivePartition {
    let leaves: Vec<String> = labels.iter().map(|l| format!("{{\"label\":\"{l}\",\"count\":0}}")).collect();
    let text = format!(
        "{{\"version\":1,\"params\":{{\"max_cell_samples\":1,\"max_level\":9}},\"leaves\":[\n{}\n]}}\n",
        leaves.join(",\n")
    );
    AdaptivePartition::from_json_str(&text).unwrap()
}

fn labeled(id: usize, label: &str, text: String) -> LabeledRecord {
    let label = LabelString::parse(label).unwrap();
    let c = label.cell().center();
    LabeledRecord { record: RawRecord { id: id.to_string(), latitude: c.lat(), longitude: c.lon(), text }, label }
}

/// Posterior of every leaf computed directly from the training records.
fn exhaustive_posterior(records: &[LabeledRecord], leaves: &[String], alpha: f64, text: &str) -> Vec<(String, f64)> {
    let mut vocab = BTreeSet::new();
    let mut stats: BTreeMap<&str, (f64, f64, BTreeMap<String, f64>)> = BTreeMap::new();
    for r in records {
        let e = stats.entry(r.label.as_str()).or_default();
        e.0 += 1.0;
        for t in tokenize(&r.record.text) {
            e.1 += 1.0;
            *e.2.entry(t.clone()).or_default() += 1.0;
            vocab.insert(t);
        }
    }
    let v = vocab.len() as f64;
    let n = records.len() as f64;
    let query: Vec<String> = tokenize(text).into_iter().filter(|t| vocab.contains(t)).collect();
    let logs: Vec<Option<f64>> = leaves
        .iter()
        .map(|l| {
            stats.get(l.as_str()).map(|(docs, tokens, counts)| {
                (docs / n).ln()
                    + query.iter().map(|t| ((counts.get(t).copied().unwrap_or(0.0) + alpha) / (tokens + alpha * v)).ln()).sum::<f64>()
            })
        })
        .collect();
    let max = logs.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logs.iter().flatten().map(|s| (s - max).exp()).sum();
    let mut out: Vec<(String, f64)> =
        leaves.iter().zip(logs).map(|(l, s)| (l.clone(), s.map_or(0.0, |s| (s - max).exp() / z))).collect();
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    out
}

/// Equal label order, allowing swaps only among oracle ties.
fn same_ranking(got: &[Hypothesis], want: &[(String, f64)]) -> Result<(), String> {
    ensure(got.len() == want.len(), || format!("{} hypotheses for {} leaves", got.len(), want.len()))?;
    for (g, w) in got.iter().zip(want) {
        ensure((g.probability - w.1).abs() < 1e-9, || format!("{} {} vs {} {}", g.label, g.probability, w.0, w.1))?;
    }
    let tie = |a: f64, b: f64| (a - b).abs() <= 1e-12 * a.abs().max(b.abs());
    let mut i = 0;
    while i < want.len() {
        let mut j = i + 1;
        while j < want.len() && tie(want[j].1, want[i].1) {
            j += 1;
        }
        let a: BTreeSet<&str> = got[i..j].iter().map(|h| h.label.as_str()).collect();
        let b: BTreeSet<&str> = want[i..j].iter().map(|(l, _)| l.as_str()).collect();
        ensure(a == b, || format!("ranks {i}..{j} differ"))?;
        i = j;
    }
    Ok(())
}

fn decoder_oracle() -> Check {
    let mut queries = 0;
    let mut largest = 0;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let target = rng.gen_range(6..=256usize);
        let mut cells: BTreeSet<CellId> = CellId::faces().collect();
        while cells.len() + 3 <= target {
            let pick = *cells.iter().nth(rng.gen_range(0..cells.len())).unwrap();
            if pick.level() < 7 {
                cells.remove(&pick);
                cells.extend(pick.children().unwrap());
            }
        }
        let leaves: Vec<String> = cells.iter().map(CellId::to_string).collect();
        let partition = partition_of(&leaves);
        let vocab: Vec<String> = (0..rng.gen_range(3..50)).map(|i| format!("t{i}")).collect();
        let mut records = Vec::new();
        for l in &leaves {
            if rng.gen_bool(0.4) {
                continue;
            }
            for _ in 0..rng.gen_range(1..5) {
                let text: Vec<&str> = (0..rng.gen_range(1..7)).map(|_| vocab[rng.gen_range(0..vocab.len())].as_str()).collect();
                records.push(labeled(records.len(), l, text.join(" ")));
            }
        }
        if records.is_empty() {
            records.push(labeled(0, &leaves[0], vocab[0].clone()));
        }
        let alpha = rng.gen_range(0.01..3.0);
        let model = train_baseline(records.clone(), &partition, alpha).unwrap();
        let trie = LabelTrie::from_partition(&partition);
        let n = leaves.len();
        largest = largest.max(n);
        for _ in 0..5 {
            let q: Vec<&str> = (0..rng.gen_range(0..6)).map(|_| vocab[rng.gen_range(0..vocab.len())].as_str()).collect();
            let q = q.join(" ");
            let got = beam_search(&model, &q, &trie, BeamConfig::new(n, n).unwrap()).map_err(|e| e.to_string())?;
            same_ranking(&got, &exhaustive_posterior(&records, &leaves, alpha, &q))
                .map_err(|e| format!("corpus {seed}, query {q:?}: {e}"))?;
            queries += 1;
        }
    }
    Ok(format!("100 corpora, {queries} queries, up to {largest} leaves"))
}

fn pair(p: &str, g: &str) -> EvalPair {
    EvalPair::new(LabelString::parse(p).unwrap(), LabelString::parse(g).unwrap())
}

fn metrics_goldens() -> Check {
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-12;
    let s = hierarchical_scores(&[pair("431", "432")]).map_err(|e| e.to_string())?;
    ensure(close(s.hp, 2.0 / 3.0) && close(s.hr, 2.0 / 3.0) && close(s.hf, 2.0 / 3.0), || format!("{s:?}"))?;

    // (predicted, gold, shared prefix length)
    let rows = [
        ("21002321", "21002321", 8),
        ("20302303", "20302303", 8),
        ("20331122", "20331122", 8),
        ("210033112", "210033113", 8),
        ("1333313", "133302", 4),
        ("20331203", "20331022", 5),
    ];
    for (p, g, shared) in rows {
        let s = hierarchical_scores(&[pair(p, g)]).unwrap();
        let (hp, hr) = (shared as f64 / p.len() as f64, shared as f64 / g.len() as f64);
        ensure(close(s.hp, hp) && close(s.hr, hr) && close(s.hf, 2.0 * hp * hr / (hp + hr)), || format!("{p} vs {g}: {s:?}"))?;
    }
    let s = hierarchical_scores(&[pair("210033112", "210033113")]).unwrap();
    ensure(close(s.hf, 8.0 / 9.0), || format!("{s:?}"))?;
    let pairs: Vec<EvalPair> = rows.iter().map(|(p, g, _)| pair(p, g)).collect();
    let flat = flat_accuracy(&pairs).unwrap();
    ensure(close(flat, 0.5), || format!("flat {flat}"))?;
    Ok("2/3 case, six example rows, flat 0.5".into())
}

fn distances() -> Check {
    let at = |lat, lon| LatLon::new(lat, lon).unwrap();
    let quarter = at(0.0, 0.0).distance_km(&at(0.0, 90.0));
    let antipode = at(0.0, 0.0).distance_km(&at(0.0, 180.0));
    ensure((quarter - 10007.5).abs() / 10007.5 <= 1e-3, || format!("quarter {quarter}"))?;
    ensure((antipode - 20015.1).abs() / 20015.1 <= 1e-3, || format!("antipode {antipode}"))?;
    Ok(format!("{quarter:.2} km, {antipode:.2} km"))
}

fn cli(args: &[&str]) -> Result<Value, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_textgeo")).args(args).output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr)));
    }
    let text = String::from_utf8_lossy(&out.stdout);
    match text.lines().last() {
        Some(l) => serde_json::from_str(l).map_err(|e| e.to_string()),
        None => Ok(Value::Null),
    }
}

/// Places in a few regions. Each record names its place with a token unique
/// to that place plus one generic word, and sits within about a hundred
/// metres of the place.
fn synthetic_corpus(path: &Path) -> std::io::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let kinds = ["school", "lake", "church", "station", "farm", "hill", "bridge", "museum", "park", "mill"];
    let regions: Vec<(f64, f64)> = (0..12).map(|_| (rng.gen_range(-55.0..65.0), rng.gen_range(-170.0..170.0))).collect();
    let places: Vec<(f64, f64)> = (0..250)
        .map(|_| {
            let (lat, lon) = regions[rng.gen_range(0..regions.len())];
            (lat + rng.gen_range(-4.0..4.0), lon + rng.gen_range(-6.0..6.0))
        })
        .collect();
    let mut out = String::from("id\tlatitude\tlongitude\ttext\n");
    for i in 0..5000 {
        let k = rng.gen_range(0..places.len());
        let (lat, lon) = places[k];
        let kind = kinds[rng.gen_range(0..kinds.len())];
        let lat = lat + rng.gen_range(-0.001..0.001);
        let lon = lon + rng.gen_range(-0.001..0.001);
        let _ = writeln!(out, "rec{i:05}\t{lat:.6}\t{lon:.6}\t{kind} place{k}");
    }
    fs::write(path, out)
}

fn end_to_end() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let f = |name: &str| dir.path().join(name).to_str().unwrap().to_owned();
    synthetic_corpus(&dir.path().join("corpus.tsv")).map_err(|e| e.to_string())?;
    let part = cli(&["partition", "--input", &f("corpus.tsv"), "--max-cell-samples", "50", "--max-level", "9", "--output", &f("p.json")])?;
    cli(&["label", "--input", &f("corpus.tsv"), "--partition", &f("p.json"), "--output", &f("labeled.tsv")])?;
    let split = cli(&["split", "--input", &f("labeled.tsv"), "--train", &f("train.tsv"), "--test", &f("test.tsv"), "--seed", "1"])?;
    cli(&["train-baseline", "--input", &f("train.tsv"), "--partition", &f("p.json"), "--output", &f("model.json")])?;
    let mut scores = Vec::new();
    for side in ["train", "test"] {
        let input = f(&format!("{side}.tsv"));
        let pred = f(&format!("{side}_pred.jsonl"));
        cli(&["predict", "--model", &f("model.json"), "--partition", &f("p.json"), "--input", &input, "--output", &pred])?;
        scores.push(cli(&["evaluate", "--pred", &pred, "--gold", &input])?);
    }
    let num = |v: &Value, k: &str| v[k].as_f64().unwrap_or(f64::NAN);
    let (train_flat, test_flat, test_hf) = (num(&scores[0], "flat_accuracy"), num(&scores[1], "flat_accuracy"), num(&scores[1], "hF"));
    let detail = format!(
        "{} leaves, split {}/{}, train flat {train_flat:.4}, test flat {test_flat:.4}, test hF {test_hf:.4}",
        part["leaves"], split["train"], split["test"]
    );
    ensure(train_flat >= 0.95, || format!("train flat below 0.95: {detail}"))?;
    ensure(test_hf >= test_flat, || format!("test hF below flat: {detail}"))?;
    Ok(detail)
}

fn service() -> Check {
    let cassette = Path::new(env!("CARGO_MANIFEST_DIR")).join("../service/tests/fixtures/conformance.jsonl");
    let runtime = tokio::runtime::Runtime::new().map_err(|e| e.to_string())?;
    let n = runtime.block_on(suite::conformance(&cassette));
    Ok(format!("{n} recorded responses match"))
}

fn main() -> ExitCode {
    let criteria: [(&str, Option<u64>, fn() -> Check); 9] = [
        ("level-6 area ratio", Some(10), area_ratio),
        ("level table 0-10", None, level_table),
        ("label codec", None, codec),
        ("partition properties", Some(60), partition_suite),
        ("decoder oracle", None, decoder_oracle),
        ("metrics goldens", None, metrics_goldens),
        ("distance sanity", None, distances),
        ("end-to-end pipeline", Some(300), end_to_end),
        ("service conformance", None, service),
    ];
    let mut failed = 0;
    for (name, limit, f) in criteria {
        let start = Instant::now();
        let mut result = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let elapsed = start.elapsed();
        if let (Some(secs), Ok(detail)) = (limit, &result) {
            if elapsed > Duration::from_secs(secs) {
                result = Err(format!("took {elapsed:.1?}, limit {secs} s ({detail})"));
            }
        }
        match result {
            Ok(detail) => println!("PASS  {name}: {detail} [{elapsed:.2?}]"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name}: {why} [{elapsed:.2?}]");
            }
        }
    }
    println!("{} of {} criteria passed", 9 - failed, 9);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
