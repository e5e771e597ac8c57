//! Tab-separated embedding export: `hotel_id`, the enriched vector, then any
//! requested extra blocks. Values are written in shortest round-trip form.

use std::io::{BufRead, Write};

use crate::catalog::Vocabulary;
use crate::error::{Error, Result};
use crate::matrix::cosine;
use crate::model::{EmbeddingSet, VectorKind};

fn prefix(kind: VectorKind) -> &'static str {
    match kind {
        VectorKind::Enriched => "e",
        VectorKind::Click => "c",
        VectorKind::Amenity => "a",
        VectorKind::Geo => "g",
        VectorKind::Concatenated => "x",
    }
}

fn kind_of(prefix: &str) -> Option<VectorKind> {
    Some(match prefix {
        "e" => VectorKind::Enriched,
        "c" => VectorKind::Click,
        "a" => VectorKind::Amenity,
        "g" => VectorKind::Geo,
        "x" => VectorKind::Concatenated,
        _ => return None,
    })
}

/// Writes one row per hotel. `extra` blocks follow the enriched vector in the
/// order given; columns are named `e0..`, `c0..`, `a0..`, `g0..`, `x0..`.
pub fn write_embeddings<W: Write>(
    mut w: W,
    vocab: &Vocabulary,
    embeddings: &EmbeddingSet,
    extra: &[VectorKind],
) -> Result<()> {
    let mut kinds = vec![VectorKind::Enriched];
    kinds.extend(extra.iter().copied().filter(|k| *k != VectorKind::Enriched));
    let io = |e| Error::io("<embeddings>", e);
    let mut header = String::from("hotel_id");
    for &k in &kinds {
        for i in 0..embeddings.width(k) {
            header.push_str(&format!("\t{}{i}", prefix(k)));
        }
    }
    writeln!(w, "{header}").map_err(io)?;
    for h in 0..vocab.len() as u32 {
        let mut line = vocab.id(h).to_string();
        for &k in &kinds {
            for v in embeddings.vector(k, h) {
                line.push('\t');
                line.push_str(&v.to_string());
            }
        }
        writeln!(w, "{line}").map_err(io)?;
    }
    Ok(())
}

/// Vectors read back from an export.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportedEmbeddings {
    pub ids: Vec<String>,
    blocks: Vec<(VectorKind, usize, Vec<f64>)>,
}

impl ImportedEmbeddings {
    pub fn kinds(&self) -> Vec<VectorKind> {
        self.blocks.iter().map(|b| b.0).collect()
    }

    pub fn vector(&self, kind: VectorKind, index: usize) -> Option<&[f64]> {
        let (_, w, data) = self.blocks.iter().find(|b| b.0 == kind)?;
        data.get(index * w..(index + 1) * w)
    }

    /// Top `k` ids by cosine to `hotel_id` within the whole file, query
    /// excluded, ties by row order.
    pub fn most_similar(&self, hotel_id: &str, k: usize, kind: VectorKind) -> Result<Vec<(String, f64)>> {
        let q = self
            .ids
            .iter()
            .position(|i| i == hotel_id)
            .ok_or_else(|| Error::UnknownHotel(hotel_id.to_string()))?;
        let query = self
            .vector(kind, q)
            .ok_or_else(|| Error::Invalid(format!("export has no {kind} block")))?;
        let mut scored: Vec<(usize, f64)> = (0..self.ids.len())
            .filter(|&i| i != q)
            .map(|i| (i, cosine(query, self.vector(kind, i).unwrap())))
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        scored.truncate(k);
        Ok(scored.into_iter().map(|(i, s)| (self.ids[i].clone(), s)).collect())
    }
}

pub fn read_embeddings<R: BufRead>(reader: R, source: &str) -> Result<ImportedEmbeddings> {
    let parse_err = |line: u64, message: String| Error::Parse {
        file: source.to_string(),
        line,
        message,
    };
    let mut lines = reader.lines();
    let header = lines
        .next()
        .ok_or_else(|| parse_err(1, "empty file".into()))?
        .map_err(|e| Error::io(source, e))?;
    let cols: Vec<&str> = header.split('\t').collect();
    if cols.first() != Some(&"hotel_id") {
        return Err(parse_err(1, "first column must be hotel_id".into()));
    }
    let mut layout: Vec<(VectorKind, usize)> = Vec::new();
    for c in &cols[1..] {
        let split = c.find(|ch: char| ch.is_ascii_digit()).unwrap_or(c.len());
        let kind = kind_of(&c[..split]).ok_or_else(|| parse_err(1, format!("unknown column `{c}`")))?;
        match layout.last_mut() {
            Some((k, n)) if *k == kind => *n += 1,
            _ => {
                if layout.iter().any(|(k, _)| *k == kind) {
                    return Err(parse_err(1, format!("block `{kind}` is split")));
                }
                layout.push((kind, 1));
            }
        }
    }
    let mut ids = Vec::new();
    let mut blocks: Vec<(VectorKind, usize, Vec<f64>)> = layout.iter().map(|&(k, w)| (k, w, Vec::new())).collect();
    for (n, line) in lines.enumerate() {
        let lineno = n as u64 + 2;
        let line = line.map_err(|e| Error::io(source, e))?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != cols.len() {
            return Err(parse_err(lineno, format!("{} fields, expected {}", fields.len(), cols.len())));
        }
        ids.push(fields[0].to_string());
        let mut at = 1;
        for (_, w, data) in blocks.iter_mut() {
            for f in &fields[at..at + *w] {
                data.push(f.parse().map_err(|_| parse_err(lineno, format!("bad number `{f}`")))?);
            }
            at += *w;
        }
    }
    Ok(ImportedEmbeddings { ids, blocks })
}
