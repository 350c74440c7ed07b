//! Codes and index files.
//!
//! Both share one layout: a text header ending in a `data` line, then
//! little-endian binary sections. A codes file holds labels, bit-packed codes
//! and, when written by the solver, the class proxies `D` as raw `f64`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::ndtensor::Matrix;
use crate::retrieval::{BinaryCode, HashIndex};
use crate::solver::{CodeMatrix, SolveOutcome, SolverConfig};

pub const CODES_TAG: &str = "fghash-codes v1";
pub const INDEX_TAG: &str = "fghash-index v1";

/// Solver settings and result recorded alongside solved codes.
#[derive(Clone, Debug, PartialEq)]
pub struct SolverRecord {
    pub sigma: f64,
    pub seed: u64,
    pub iterations: usize,
    pub objective: f64,
    /// Class proxies `D`, `l x k`.
    pub proxies: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CodesFile {
    pub num_classes: usize,
    pub labels: Vec<usize>,
    pub codes: Vec<BinaryCode>,
    pub solver: Option<SolverRecord>,
}

fn words_per(k: usize) -> usize {
    k.div_ceil(64)
}

fn code_from_columns(codes: &CodeMatrix) -> Result<Vec<BinaryCode>> {
    codes.columns().map(BinaryCode::from_signs).collect()
}

impl CodesFile {
    pub fn from_solver(
        labels: &[usize],
        num_classes: usize,
        config: &SolverConfig,
        out: &SolveOutcome,
    ) -> Result<Self> {
        Ok(CodesFile {
            num_classes,
            labels: labels.to_vec(),
            codes: code_from_columns(&out.state.codes)?,
            solver: Some(SolverRecord {
                sigma: config.sigma,
                seed: config.seed,
                iterations: out.iterations,
                objective: out.final_objective(),
                proxies: out.state.proxies.clone(),
            }),
        })
    }

    pub fn k(&self) -> usize {
        self.codes.first().map_or(0, BinaryCode::k)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let k = self.k();
        let mut head = format!(
            "{CODES_TAG}\nk={k}\nn={}\nclasses={}\n",
            self.codes.len(),
            self.num_classes
        );
        if let Some(s) = &self.solver {
            head.push_str(&format!(
                "sigma={}\nseed={}\niterations={}\nobjective={}\nproxies={}x{}\n",
                s.sigma,
                s.seed,
                s.iterations,
                s.objective,
                s.proxies.rows(),
                s.proxies.cols()
            ));
        }
        head.push_str("data\n");
        let mut out = head.into_bytes();
        write_labels_and_codes(&mut out, &self.labels, &self.codes);
        if let Some(s) = &self.solver {
            for v in s.proxies.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], source: &Path) -> Result<Self> {
        let (fields, mut body) = split_header(bytes, CODES_TAG, source)?;
        let k: usize = field(&fields, "k", source)?;
        let n: usize = field(&fields, "n", source)?;
        let num_classes: usize = field(&fields, "classes", source)?;
        let (labels, codes) = read_labels_and_codes(&mut body, k, n, num_classes, source)?;
        let solver = if fields.contains_key("proxies") {
            let dims: String = field(&fields, "proxies", source)?;
            let (r, c) = dims
                .split_once('x')
                .and_then(|(r, c)| Some((r.parse::<usize>().ok()?, c.parse::<usize>().ok()?)))
                .ok_or_else(|| Error::format(source, "proxies", format!("bad shape `{dims}`")))?;
            if r != num_classes || c != k {
                return Err(Error::format(
                    source,
                    "proxies",
                    format!("shape {r}x{c}, expected {num_classes}x{k}"),
                ));
            }
            let data = take_f64(&mut body, r * c, source, "proxies")?;
            Some(SolverRecord {
                sigma: field(&fields, "sigma", source)?,
                seed: field(&fields, "seed", source)?,
                iterations: field(&fields, "iterations", source)?,
                objective: field(&fields, "objective", source)?,
                proxies: Matrix::from_vec(r, c, data)?,
            })
        } else {
            None
        };
        if !body.is_empty() {
            return Err(Error::format(
                source,
                "data",
                format!("{} trailing bytes", body.len()),
            ));
        }
        Ok(CodesFile {
            num_classes,
            labels,
            codes,
            solver,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(fs::write(path, self.to_bytes())?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?, path)
    }
}

pub fn index_to_bytes(index: &HashIndex, num_classes: usize) -> Vec<u8> {
    let head = format!(
        "{INDEX_TAG}\nk={}\nn={}\nclasses={num_classes}\ndata\n",
        index.k(),
        index.len()
    );
    let mut out = head.into_bytes();
    write_labels_and_codes(&mut out, index.labels(), index.codes());
    out
}

/// Returns the index and its class count.
pub fn index_from_bytes(bytes: &[u8], source: &Path) -> Result<(HashIndex, usize)> {
    let (fields, mut body) = split_header(bytes, INDEX_TAG, source)?;
    let k: usize = field(&fields, "k", source)?;
    let n: usize = field(&fields, "n", source)?;
    let num_classes: usize = field(&fields, "classes", source)?;
    let (labels, codes) = read_labels_and_codes(&mut body, k, n, num_classes, source)?;
    if !body.is_empty() {
        return Err(Error::format(
            source,
            "data",
            format!("{} trailing bytes", body.len()),
        ));
    }
    Ok((HashIndex::new(codes, labels)?, num_classes))
}

pub fn save_index(index: &HashIndex, num_classes: usize, path: &Path) -> Result<()> {
    Ok(fs::write(path, index_to_bytes(index, num_classes))?)
}

pub fn load_index(path: &Path) -> Result<(HashIndex, usize)> {
    index_from_bytes(&fs::read(path)?, path)
}

fn write_labels_and_codes(out: &mut Vec<u8>, labels: &[usize], codes: &[BinaryCode]) {
    for &l in labels {
        out.extend_from_slice(&(l as u32).to_le_bytes());
    }
    for c in codes {
        for w in c.words() {
            out.extend_from_slice(&w.to_le_bytes());
        }
    }
}

fn read_labels_and_codes(
    body: &mut &[u8],
    k: usize,
    n: usize,
    num_classes: usize,
    source: &Path,
) -> Result<(Vec<usize>, Vec<BinaryCode>)> {
    if k == 0 {
        return Err(Error::format(source, "k", "code length must be positive"));
    }
    let raw = take(body, 4 * n, source, "labels")?;
    let labels: Vec<usize> = raw
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    if let Some(bad) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::format(
            source,
            "labels",
            format!("label {bad} outside {num_classes} classes"),
        ));
    }
    let wpc = words_per(k);
    let raw = take(body, 8 * wpc * n, source, "codes")?;
    let words: Vec<u64> = raw
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let codes = words
        .chunks(wpc.max(1))
        .take(n)
        .map(|w| {
            BinaryCode::from_words(k, w.to_vec())
                .map_err(|e| Error::format(source, "codes", e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((labels, codes))
}

fn take<'a>(body: &mut &'a [u8], len: usize, source: &Path, what: &str) -> Result<&'a [u8]> {
    if body.len() < len {
        return Err(Error::format(source, what, "section truncated"));
    }
    let (head, rest) = body.split_at(len);
    *body = rest;
    Ok(head)
}

fn take_f64(body: &mut &[u8], count: usize, source: &Path, what: &str) -> Result<Vec<f64>> {
    Ok(take(body, 8 * count, source, what)?
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

fn split_header<'a>(
    bytes: &'a [u8],
    tag: &str,
    source: &Path,
) -> Result<(BTreeMap<String, String>, &'a [u8])> {
    let marker = b"\ndata\n";
    let split = bytes
        .windows(marker.len())
        .position(|w| w == marker)
        .ok_or_else(|| Error::format(source, "data", "missing `data` line"))?;
    let head = std::str::from_utf8(&bytes[..split])
        .map_err(|_| Error::format(source, "header", "header is not UTF-8"))?;
    let mut lines = head.lines();
    if lines.next() != Some(tag) {
        return Err(Error::format(
            source,
            "schema",
            format!("first line must be `{tag}`"),
        ));
    }
    let mut fields = BTreeMap::new();
    for line in lines {
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::format(source, "header", format!("unrecognised line `{line}`"))
        })?;
        fields.insert(k.to_string(), v.to_string());
    }
    Ok((fields, &bytes[split + marker.len()..]))
}

fn field<T: std::str::FromStr>(
    fields: &BTreeMap<String, String>,
    name: &str,
    source: &Path,
) -> Result<T> {
    let raw = fields
        .get(name)
        .ok_or_else(|| Error::format(source, name, "missing"))?;
    raw.parse()
        .map_err(|_| Error::format(source, name, format!("cannot parse `{raw}`")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::{solve, LabelMatrix};

    fn solved() -> CodesFile {
        let labels: Vec<usize> = (0..30).map(|i| i % 5).collect();
        let cfg = SolverConfig {
            seed: 3,
            ..SolverConfig::default()
        };
        let out = solve(&LabelMatrix::new(5, labels.clone()).unwrap(), 12, &cfg).unwrap();
        CodesFile::from_solver(&labels, 5, &cfg, &out).unwrap()
    }

    #[test]
    fn solver_codes_round_trip_byte_identical() {
        let f = solved();
        let bytes = f.to_bytes();
        let back = CodesFile::from_bytes(&bytes, Path::new("c")).unwrap();
        assert_eq!(back, f);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn index_round_trip() {
        let f = solved();
        let idx = HashIndex::new(f.codes.clone(), f.labels.clone()).unwrap();
        let bytes = index_to_bytes(&idx, 5);
        let (back, l) = index_from_bytes(&bytes, Path::new("i")).unwrap();
        assert_eq!(l, 5);
        assert_eq!(back.codes(), idx.codes());
        assert_eq!(index_to_bytes(&back, 5), bytes);
    }

    #[test]
    fn corrupt_files_name_the_field() {
        let bytes = solved().to_bytes();
        let field_of = |b: &[u8]| match CodesFile::from_bytes(b, Path::new("c")) {
            Err(Error::Format { field, .. }) => field,
            other => panic!("{other:?}"),
        };
        let edit = |from: &str, to: &str| {
            let at = bytes.windows(6).position(|w| w == b"\ndata\n").unwrap();
            let mut out = std::str::from_utf8(&bytes[..at])
                .unwrap()
                .replace(from, to)
                .into_bytes();
            out.extend_from_slice(&bytes[at..]);
            out
        };
        assert_eq!(field_of(&bytes[..bytes.len() - 1]), "proxies");
        assert_eq!(field_of(&edit("classes=5", "classes=2")), "labels");
        assert_eq!(field_of(&edit(CODES_TAG, "fghash-codes v0")), "schema");
        assert_eq!(field_of(&edit("k=12", "k=x")), "k");
        assert!(matches!(
            index_from_bytes(&bytes, Path::new("c")),
            Err(Error::Format { .. })
        ));
    }
}
