use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Query {
    pub id: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Judgment {
    pub query_id: String,
    pub doc_id: String,
    pub grade: u32,
}

/// Documents, queries and graded relevance judgments.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Corpus {
    pub docs: Vec<Document>,
    pub queries: Vec<Query>,
    pub qrels: Vec<Judgment>,
}

/// One JSON object per non-blank line.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Corpus(format!("{}:{}: {e}", path.display(), lineno + 1)))?,
        );
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut f = File::create(path)?;
    for item in items {
        serde_json::to_writer(&mut f, item)?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

impl Corpus {
    pub fn new(docs: Vec<Document>, queries: Vec<Query>, qrels: Vec<Judgment>) -> Result<Self> {
        let c = Self {
            docs,
            queries,
            qrels,
        };
        c.validate()?;
        Ok(c)
    }

    /// Reads `docs.jsonl`, `queries.jsonl` and, if present, `qrels.jsonl`.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let docs = read_jsonl(&dir.join("docs.jsonl"))?;
        let queries = read_jsonl(&dir.join("queries.jsonl"))?;
        let qrels_path = dir.join("qrels.jsonl");
        let qrels = if qrels_path.exists() {
            read_jsonl(&qrels_path)?
        } else {
            Vec::new()
        };
        Self::new(docs, queries, qrels)
    }

    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        write_jsonl(&dir.join("docs.jsonl"), &self.docs)?;
        write_jsonl(&dir.join("queries.jsonl"), &self.queries)?;
        write_jsonl(&dir.join("qrels.jsonl"), &self.qrels)
    }

    pub fn validate(&self) -> Result<()> {
        let unique = |ids: Vec<&str>, kind: &str| -> Result<HashSet<String>> {
            let mut seen = HashSet::new();
            for id in ids {
                if !seen.insert(id.to_string()) {
                    return Err(Error::Corpus(format!("duplicate {kind} id {id:?}")));
                }
            }
            Ok(seen)
        };
        let docs = unique(
            self.docs.iter().map(|d| d.id.as_str()).collect(),
            "document",
        )?;
        let queries = unique(
            self.queries.iter().map(|q| q.id.as_str()).collect(),
            "query",
        )?;
        for j in &self.qrels {
            if !queries.contains(&j.query_id) {
                return Err(Error::Corpus(format!(
                    "judgment for unknown query {:?}",
                    j.query_id
                )));
            }
            if !docs.contains(&j.doc_id) {
                return Err(Error::Corpus(format!(
                    "judgment for unknown document {:?}",
                    j.doc_id
                )));
            }
        }
        Ok(())
    }

    /// Grades per document for one query.
    pub fn judgments_for(&self, query_id: &str) -> HashMap<String, u32> {
        self.qrels
            .iter()
            .filter(|j| j.query_id == query_id)
            .map(|j| (j.doc_id.clone(), j.grade))
            .collect()
    }
}
