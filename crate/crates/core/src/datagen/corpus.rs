//! On-disk corpus: `images/<id>.png` plus a line-delimited `records.jsonl`
//! whose first line is a version comment.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CellRecord, DocumentSample, QaRecord};
use crate::error::{Error, Result};

pub const CORPUS_HEADER: &str = "# groundkie corpus v1";
pub const RECORDS_FILE: &str = "records.jsonl";

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusDocument {
    pub id: String,
    pub sample: DocumentSample,
    pub qas: Vec<QaRecord>,
}

#[derive(Serialize, Deserialize)]
struct Record {
    id: String,
    image: String,
    width: usize,
    height: usize,
    html: String,
    warped: bool,
    cells: Vec<CellRecord>,
    qas: Vec<QaRecord>,
}

fn valid_id(id: &str) -> bool {
    !id.is_empty()
        && id
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_')
}

pub fn write_dataset(docs: &[CorpusDocument], dir: &Path) -> Result<()> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let path = dir.join(RECORDS_FILE);
    let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut w = BufWriter::new(file);
    writeln!(w, "{CORPUS_HEADER}").map_err(|e| Error::io(&path, e))?;
    for doc in docs {
        if !valid_id(&doc.id) {
            return Err(Error::Invalid(format!("bad document id {:?}", doc.id)));
        }
        for q in &doc.qas {
            q.check()?;
        }
        let rel = format!("images/{}.png", doc.id);
        let img_path = dir.join(&rel);
        doc.sample.image.save(&img_path)?;
        let rec = Record {
            id: doc.id.clone(),
            image: rel,
            width: doc.sample.width(),
            height: doc.sample.height(),
            html: doc.sample.html.clone(),
            warped: doc.sample.warped,
            cells: doc.sample.cells.clone(),
            qas: doc.qas.clone(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        writeln!(w).map_err(|e| Error::io(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

pub fn read_dataset(dir: &Path) -> Result<Vec<CorpusDocument>> {
    let path = dir.join(RECORDS_FILE);
    let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let err = |line: usize, msg: String| Error::Record {
        path: path.clone(),
        line,
        msg,
    };
    let mut docs = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let n = i + 1;
        let line = line.map_err(|e| err(n, e.to_string()))?;
        if n == 1 {
            if line.trim_end() != CORPUS_HEADER {
                return Err(err(1, format!("expected header {CORPUS_HEADER:?}")));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| err(n, e.to_string()))?;
        if !valid_id(&rec.id) {
            return Err(err(n, format!("bad document id {:?}", rec.id)));
        }
        for q in &rec.qas {
            q.check().map_err(|e| err(n, e.to_string()))?;
        }
        let img_path = dir.join(&rec.image);
        let image = image::open(&img_path)
            .map_err(|e| err(n, format!("{}: {e}", img_path.display())))?
            .into_luma8();
        if (image.width() as usize, image.height() as usize) != (rec.width, rec.height) {
            return Err(err(n, "image size does not match record".into()));
        }
        docs.push(CorpusDocument {
            id: rec.id,
            sample: DocumentSample {
                image,
                cells: rec.cells,
                html: rec.html,
                warped: rec.warped,
            },
            qas: rec.qas,
        });
    }
    if docs.is_empty() && fs::metadata(&path).map(|m| m.len()).unwrap_or(0) == 0 {
        return Err(err(1, "missing header".into()));
    }
    Ok(docs)
}
