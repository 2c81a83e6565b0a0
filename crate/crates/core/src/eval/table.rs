//! Embedding records as a CSV table: `sample_id, level, class_id, fov_id,
//! well_id, labels, v0 … v{D-1}` with labels written as a `0`/`1` string.

use std::path::Path;

use super::embed::{EmbeddingRecord, Level};
use crate::error::{Error, Result};

const FIXED: [&str; 6] = ["sample_id", "level", "class_id", "fov_id", "well_id", "labels"];

fn level_name(l: Level) -> &'static str {
    match l {
        Level::Cell => "cell",
        Level::Fov => "fov",
        Level::Well => "well",
    }
}

pub fn encode_embeddings(records: &[EmbeddingRecord]) -> Result<String> {
    let dim = records.first().map_or(0, |r| r.vector.len());
    let mut w = csv::Writer::from_writer(Vec::new());
    let header: Vec<String> = FIXED.iter().map(|s| s.to_string()).chain((0..dim).map(|i| format!("v{i}"))).collect();
    let csv_err = |e: csv::Error| Error::Eval(format!("embedding table: {e}"));
    w.write_record(&header).map_err(csv_err)?;
    for r in records {
        if r.vector.len() != dim {
            return Err(Error::Eval(format!("{}: vector length {} differs from {dim}", r.sample_id, r.vector.len())));
        }
        let labels: String = r.multilabels.iter().map(|&b| if b { '1' } else { '0' }).collect();
        let mut row = vec![
            r.sample_id.clone(),
            level_name(r.level).to_string(),
            r.class_id.to_string(),
            r.fov_id.to_string(),
            r.well_id.to_string(),
            labels,
        ];
        // shortest round-trip representation
        row.extend(r.vector.iter().map(|v| format!("{v:?}")));
        w.write_record(&row).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Eval(format!("embedding table: {e}")))?;
    String::from_utf8(bytes).map_err(|e| Error::Eval(format!("embedding table: {e}")))
}

pub fn decode_embeddings(text: &str) -> Result<Vec<EmbeddingRecord>> {
    let bad = |line: u64, msg: String| Error::Eval(format!("embedding table line {line}: {msg}"));
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header = rdr.headers().map_err(|e| bad(1, e.to_string()))?.clone();
    if header.len() < FIXED.len() || header.iter().zip(FIXED).any(|(h, f)| h != f) {
        return Err(bad(1, format!("header must start with {}", FIXED.join(","))));
    }
    let dim = header.len() - FIXED.len();
    for (i, h) in header.iter().skip(FIXED.len()).enumerate() {
        if h != format!("v{i}") {
            return Err(bad(1, format!("column `{h}` should be `v{i}`")));
        }
    }
    let mut out = Vec::new();
    let mut n_labels = None;
    for (row, rec) in rdr.records().enumerate() {
        let line = row as u64 + 2;
        let rec = rec.map_err(|e| bad(line, e.to_string()))?;
        let int = |i: usize| -> Result<usize> {
            rec[i].parse().map_err(|_| bad(line, format!("{} `{}` is not a non-negative integer", FIXED[i], &rec[i])))
        };
        let level = match &rec[1] {
            "cell" => Level::Cell,
            "fov" => Level::Fov,
            "well" => Level::Well,
            other => return Err(bad(line, format!("unknown level `{other}`"))),
        };
        let multilabels = rec[5]
            .chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                _ => Err(bad(line, format!("labels `{}` must be a 0/1 string", &rec[5]))),
            })
            .collect::<Result<Vec<bool>>>()?;
        if *n_labels.get_or_insert(multilabels.len()) != multilabels.len() {
            return Err(bad(line, "label width differs from earlier rows".into()));
        }
        let vector = (FIXED.len()..FIXED.len() + dim)
            .map(|i| match rec[i].parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(bad(line, format!("`{}` is not a finite number", &rec[i]))),
            })
            .collect::<Result<Vec<f64>>>()?;
        out.push(EmbeddingRecord {
            sample_id: rec[0].to_string(),
            level,
            vector,
            multilabels,
            class_id: int(2)?,
            fov_id: int(3)?,
            well_id: int(4)?,
        });
    }
    Ok(out)
}

pub fn write_embeddings(records: &[EmbeddingRecord], path: &Path) -> Result<()> {
    std::fs::write(path, encode_embeddings(records)?).map_err(|e| Error::io(path, e))
}

pub fn read_embeddings(path: &Path) -> Result<Vec<EmbeddingRecord>> {
    decode_embeddings(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}
