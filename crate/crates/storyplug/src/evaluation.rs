//! Score CSVs and human-evaluation sheets.

use std::path::Path;

use serde::{Deserialize, Serialize};
use storyplug_core::eval::{human_eval_rows, HumanScore};

use crate::error::{Error, Result};
use crate::io;
use crate::story::StoryManifest;

/// Header of the score column; carries the valid range.
pub const SCORE_COLUMN: &str = "score_0_to_3";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub story: String,
    pub metric: String,
    pub value: f64,
}

/// `story,metric,value`
pub fn scores_csv(rows: &[ScoreRow]) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["story", "metric", "value"]).expect("in-memory csv");
    for r in rows {
        w.write_record([r.story.as_str(), r.metric.as_str(), &format!("{:.6}", r.value)]).expect("in-memory csv");
    }
    w.into_inner().expect("in-memory csv")
}

/// One row per (image, question) with a blank score column.
pub fn human_eval_sheet(manifest: &StoryManifest, questions: &[String]) -> Vec<u8> {
    let images: Vec<&str> = manifest.frames.iter().map(|f| f.image.as_str()).collect();
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["image", "question", SCORE_COLUMN]).expect("in-memory csv");
    for r in human_eval_rows(&images, questions) {
        w.write_record([r.image.as_str(), r.question.as_str(), ""]).expect("in-memory csv");
    }
    w.into_inner().expect("in-memory csv")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FilledRow {
    pub image: String,
    pub question: String,
    pub score: Option<HumanScore>,
}

/// Reads a filled-in sheet; blank scores stay `None`, scores outside 0..=3
/// are rejected.
pub fn read_sheet(bytes: &[u8]) -> Result<Vec<FilledRow>> {
    let mut r = csv::Reader::from_reader(bytes);
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| Error::Usage(format!("sheet row {}: {e}", i + 2)))?;
        let cell = rec.get(2).unwrap_or("").trim();
        let score = if cell.is_empty() {
            None
        } else {
            let v: u8 =
                cell.parse().map_err(|_| Error::Usage(format!("sheet row {}: score `{cell}` is not 0..=3", i + 2)))?;
            Some(HumanScore::new(v)?)
        };
        out.push(FilledRow {
            image: rec.get(0).unwrap_or("").into(),
            question: rec.get(1).unwrap_or("").into(),
            score,
        });
    }
    Ok(out)
}

pub fn write_sheet(path: &Path, manifest: &StoryManifest, questions: &[String]) -> Result<()> {
    io::write_atomic(path, &human_eval_sheet(manifest, questions))
}
