//! Record files and checkpoints.
//!
//! Every multi-record file is JSON Lines. Files that carry feature vectors
//! (pairs, patches, slides) start with a header line `{"dim": D}` and every
//! vector in the file must have length `D`.
//!
//! A checkpoint is one line of UTF-8 JSON (the header), a `\n`, then the
//! tensors as raw little-endian `f32` in header order.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::numerics::Tensor2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiseaseRecord {
    pub name: String,
    pub synonyms: Vec<String>,
    pub definitions: Vec<String>,
    pub histology: Vec<String>,
    pub cytology: Vec<String>,
    pub tissue: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cui: Option<String>,
    pub source: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OncoTreeRecord {
    pub name: String,
    pub cui: String,
    pub tissue: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<String>,
    pub level: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub id: String,
    pub image_features: Vec<f64>,
    pub caption: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub disease_label: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchRecord {
    pub id: String,
    pub features: Vec<f64>,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WsiRecord {
    pub slide_id: String,
    pub label: String,
    pub patch_features: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DimHeader {
    pub dim: usize,
}

/// Non-blank lines with their 1-based line numbers.
fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push((i + 1, line));
        }
    }
    Ok(out)
}

fn parse_line<T: DeserializeOwned>(path: &Path, line_no: usize, line: &str, required: &[&str]) -> Result<T> {
    let value: Value = serde_json::from_str(line).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: line_no,
        message: e.to_string(),
    })?;
    let Some(obj) = value.as_object() else {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message: "expected a JSON object".into(),
        });
    };
    if let Some(field) = required.iter().find(|f| !obj.contains_key(**f)) {
        return Err(Error::MissingField {
            path: path.to_path_buf(),
            line: line_no,
            field: field.to_string(),
        });
    }
    serde_json::from_value(value).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: line_no,
        message: e.to_string(),
    })
}

fn parse_error(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

const DISEASE_FIELDS: &[&str] = &[
    "name",
    "synonyms",
    "definitions",
    "histology",
    "cytology",
    "tissue",
    "source",
];

/// Trim every attribute text; empty names, tissues or attribute texts are
/// rejected. Records with no attributes at all are kept.
fn normalize_disease(mut r: DiseaseRecord, path: &Path, line: usize) -> Result<DiseaseRecord> {
    r.name = r.name.trim().to_string();
    r.tissue = r.tissue.trim().to_string();
    if r.name.is_empty() {
        return Err(parse_error(path, line, "empty \"name\""));
    }
    if r.tissue.is_empty() {
        return Err(parse_error(path, line, "empty \"tissue\""));
    }
    for (field, texts) in [
        ("synonyms", &mut r.synonyms),
        ("definitions", &mut r.definitions),
        ("histology", &mut r.histology),
        ("cytology", &mut r.cytology),
    ] {
        for t in texts.iter_mut() {
            *t = t.trim().to_string();
            if t.is_empty() {
                return Err(parse_error(path, line, format!("empty text in \"{field}\"")));
            }
        }
    }
    Ok(r)
}

pub fn load_disease_records(path: impl AsRef<Path>) -> Result<Vec<DiseaseRecord>> {
    let path = path.as_ref();
    read_lines(path)?
        .into_iter()
        .map(|(n, line)| {
            let r: DiseaseRecord = parse_line(path, n, &line, DISEASE_FIELDS)?;
            normalize_disease(r, path, n)
        })
        .collect()
}

pub fn load_oncotree_records(path: impl AsRef<Path>) -> Result<Vec<OncoTreeRecord>> {
    let path = path.as_ref();
    let mut records = Vec::new();
    for (n, line) in read_lines(path)? {
        let r: OncoTreeRecord = parse_line(path, n, &line, &["name", "cui", "tissue", "level"])?;
        if r.cui.trim().is_empty() {
            return Err(parse_error(path, n, "empty \"cui\""));
        }
        records.push(r);
    }
    validate_oncotree(&records)?;
    Ok(records)
}

/// Every `parent` must name another record.
pub fn validate_oncotree(records: &[OncoTreeRecord]) -> Result<()> {
    let names: HashSet<&str> = records.iter().map(|r| r.name.as_str()).collect();
    for r in records {
        if let Some(p) = &r.parent {
            if !names.contains(p.as_str()) {
                return Err(Error::InvalidRecord {
                    id: r.name.clone(),
                    message: format!("parent \"{p}\" is not an OncoTree node"),
                });
            }
        }
    }
    Ok(())
}

fn read_header(path: &Path, lines: &[(usize, String)]) -> Result<usize> {
    let Some((n, first)) = lines.first() else {
        return Err(parse_error(path, 1, "missing {\"dim\": D} header line"));
    };
    let header: DimHeader = parse_line(path, *n, first, &["dim"])?;
    Ok(header.dim)
}

fn check_dim(id: &str, got: usize, dim: usize) -> Result<()> {
    if got != dim {
        return Err(Error::InvalidRecord {
            id: id.to_string(),
            message: format!("feature dimension {got}, header declares {dim}"),
        });
    }
    Ok(())
}

pub fn load_pair_records(path: impl AsRef<Path>) -> Result<(usize, Vec<PairRecord>)> {
    let path = path.as_ref();
    let lines = read_lines(path)?;
    let dim = read_header(path, &lines)?;
    let mut out = Vec::with_capacity(lines.len().saturating_sub(1));
    for (n, line) in &lines[1..] {
        let r: PairRecord = parse_line(path, *n, line, &["id", "image_features", "caption"])?;
        check_dim(&r.id, r.image_features.len(), dim)?;
        if r.caption.trim().is_empty() {
            return Err(Error::InvalidRecord {
                id: r.id,
                message: "empty caption".into(),
            });
        }
        out.push(r);
    }
    Ok((dim, out))
}

pub fn load_patch_records(path: impl AsRef<Path>) -> Result<(usize, Vec<PatchRecord>)> {
    let path = path.as_ref();
    let lines = read_lines(path)?;
    let dim = read_header(path, &lines)?;
    let mut out = Vec::with_capacity(lines.len().saturating_sub(1));
    for (n, line) in &lines[1..] {
        let r: PatchRecord = parse_line(path, *n, line, &["id", "features", "label"])?;
        check_dim(&r.id, r.features.len(), dim)?;
        out.push(r);
    }
    Ok((dim, out))
}

pub fn load_wsi_records(path: impl AsRef<Path>) -> Result<(usize, Vec<WsiRecord>)> {
    let path = path.as_ref();
    let lines = read_lines(path)?;
    let dim = read_header(path, &lines)?;
    let mut out = Vec::with_capacity(lines.len().saturating_sub(1));
    for (n, line) in &lines[1..] {
        let r: WsiRecord = parse_line(path, *n, line, &["slide_id", "label", "patch_features"])?;
        if r.patch_features.is_empty() {
            return Err(Error::InvalidRecord {
                id: r.slide_id,
                message: "slide has no patches".into(),
            });
        }
        for p in &r.patch_features {
            check_dim(&r.slide_id, p.len(), dim)?;
        }
        out.push(r);
    }
    Ok((dim, out))
}

/// Reject labels that are not in `classes`.
pub fn validate_labels<'a>(
    labels: impl IntoIterator<Item = (&'a str, &'a str)>,
    classes: &[String],
) -> Result<()> {
    let known: HashSet<&str> = classes.iter().map(String::as_str).collect();
    for (id, label) in labels {
        if !known.contains(label) {
            return Err(Error::InvalidRecord {
                id: id.to_string(),
                message: format!("label \"{label}\" is not in the class file"),
            });
        }
    }
    Ok(())
}

fn create(path: &Path) -> Result<fs::File> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::File::create(path).map_err(|e| Error::io(path, e))
}

/// Write records as JSON Lines, optionally preceded by a `{"dim": D}` header.
pub fn write_jsonl<T: Serialize>(
    path: impl AsRef<Path>,
    header: Option<DimHeader>,
    records: &[T],
) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    if let Some(h) = header {
        serde_json::to_writer(&mut buf, &h).expect("header serializes");
        buf.push(b'\n');
    }
    for r in records {
        serde_json::to_writer(&mut buf, r)
            .map_err(|e| Error::Checkpoint(format!("serializing record: {e}")))?;
        buf.push(b'\n');
    }
    create(path)?.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let mut buf = serde_json::to_vec_pretty(value)
        .map_err(|e| Error::Checkpoint(format!("serializing {}: {e}", path.display())))?;
    buf.push(b'\n');
    create(path)?.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

// ---------------------------------------------------------------------------
// Checkpoints

pub const CHECKPOINT_VERSION: &str = "1";

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    /// What the tensors describe, e.g. `"text-encoder"`.
    pub kind: String,
    pub seed: u64,
    pub config: Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub token_buckets: Option<usize>,
    pub meta: RunMeta,
    pub tensors: Vec<NamedTensor>,
}

#[derive(Serialize, Deserialize)]
struct TensorShape {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format_version: String,
    kind: String,
    seed: u64,
    token_buckets: Option<usize>,
    config: Value,
    tensors: Vec<TensorShape>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor2> {
        self.tensors.iter().find(|t| t.name == name).map(|t| &t.tensor)
    }

    /// Header line, newline, then little-endian `f32` payload.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = CheckpointHeader {
            format_version: CHECKPOINT_VERSION.to_string(),
            kind: self.meta.kind.clone(),
            seed: self.meta.seed,
            token_buckets: self.token_buckets,
            config: self.meta.config.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| TensorShape {
                    name: t.name.clone(),
                    rows: t.tensor.rows(),
                    cols: t.tensor.cols(),
                })
                .collect(),
        };
        let mut out = serde_json::to_vec(&header).expect("checkpoint header serializes");
        out.push(b'\n');
        for t in &self.tensors {
            for &v in t.tensor.as_slice() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let split = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Checkpoint("no header line".into()))?;
        let header_value: Value =
            serde_json::from_slice(&bytes[..split]).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let found = header_value
            .get("format_version")
            .and_then(Value::as_str)
            .ok_or_else(|| Error::Checkpoint("header lacks format_version".into()))?;
        if found != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                found: found.to_string(),
                expected: CHECKPOINT_VERSION.to_string(),
            });
        }
        let header: CheckpointHeader =
            serde_json::from_value(header_value).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;

        let payload = &bytes[split + 1..];
        let expected: usize = header.tensors.iter().map(|t| t.rows * t.cols * 4).sum();
        if payload.len() < expected {
            return Err(Error::TruncatedPayload {
                expected,
                found: payload.len(),
            });
        }
        if payload.len() > expected {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after payload",
                payload.len() - expected
            )));
        }

        let mut chunks = payload.chunks_exact(4);
        let mut tensors = Vec::with_capacity(header.tensors.len());
        for shape in header.tensors {
            let values: Vec<f64> = chunks
                .by_ref()
                .take(shape.rows * shape.cols)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            tensors.push(NamedTensor {
                name: shape.name,
                tensor: Tensor2::from_vec(shape.rows, shape.cols, values)?,
            });
        }
        Ok(Checkpoint {
            token_buckets: header.token_buckets,
            meta: RunMeta {
                kind: header.kind,
                seed: header.seed,
                config: header.config,
            },
            tensors,
        })
    }
}

pub fn save_checkpoint(checkpoint: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    create(path)?
        .write_all(&checkpoint.to_bytes())
        .map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

/// `dir/name`, for the fixed file names used by the training verbs.
pub fn in_dir(dir: impl AsRef<Path>, name: &str) -> PathBuf {
    dir.as_ref().join(name)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn disease_line_parses() {
        let f = write_tmp(
            r#"{"name":"LUAD","synonyms":["lung adenocarcinoma"],"definitions":[],"histology":[],"cytology":[],"tissue":"lung","cui":"C0152013","source":"fixture"}"#,
        );
        let recs = load_disease_records(f.path()).unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].synonyms, vec!["lung adenocarcinoma"]);
        assert_eq!(recs[0].cui.as_deref(), Some("C0152013"));
    }

    #[test]
    fn empty_disease_file() {
        let f = write_tmp("");
        assert!(load_disease_records(f.path()).unwrap().is_empty());
    }

    #[test]
    fn missing_tissue_names_line_and_field() {
        let f = write_tmp(
            r#"{"name":"LUAD","synonyms":[],"definitions":[],"histology":[],"cytology":[],"source":"x"}"#,
        );
        match load_disease_records(f.path()) {
            Err(Error::MissingField { line, field, .. }) => {
                assert_eq!(line, 1);
                assert_eq!(field, "tissue");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_line_names_line_number() {
        let good = r#"{"name":"a","synonyms":["x"],"definitions":[],"histology":[],"cytology":[],"tissue":"t","source":"s"}"#;
        let f = write_tmp(&format!("{good}\n{{not json\n"));
        match load_disease_records(f.path()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn attribute_texts_are_trimmed_and_blank_rejected() {
        let f = write_tmp(
            r#"{"name":" a ","synonyms":["  x y "],"definitions":[],"histology":[],"cytology":[],"tissue":"t","source":"s"}"#,
        );
        let r = &load_disease_records(f.path()).unwrap()[0];
        assert_eq!(r.name, "a");
        assert_eq!(r.synonyms, vec!["x y"]);
        let f = write_tmp(
            r#"{"name":"a","synonyms":["   "],"definitions":[],"histology":[],"cytology":[],"tissue":"t","source":"s"}"#,
        );
        assert!(matches!(load_disease_records(f.path()), Err(Error::Parse { .. })));
    }

    #[test]
    fn pair_dimension_checks() {
        let ok = write_tmp("{\"dim\":4}\n{\"id\":\"p1\",\"image_features\":[1,2,3,4],\"caption\":\"c\"}\n");
        let (dim, recs) = load_pair_records(ok.path()).unwrap();
        assert_eq!((dim, recs.len()), (4, 1));

        let two = write_tmp(
            "{\"dim\":4}\n{\"id\":\"p1\",\"image_features\":[1,2,3,4],\"caption\":\"c\"}\n{\"id\":\"p2\",\"image_features\":[0,0,0,1],\"caption\":\"d\",\"disease_label\":\"L\"}\n",
        );
        assert_eq!(load_pair_records(two.path()).unwrap().1.len(), 2);

        let bad = write_tmp("{\"dim\":4}\n{\"id\":\"short\",\"image_features\":[1,2,3],\"caption\":\"c\"}\n");
        match load_pair_records(bad.path()) {
            Err(Error::InvalidRecord { id, .. }) => assert_eq!(id, "short"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn oncotree_parent_must_exist() {
        let f = write_tmp(
            "{\"name\":\"LUNG\",\"cui\":\"C1\",\"tissue\":\"lung\",\"level\":1}\n{\"name\":\"LUAD\",\"cui\":\"C2\",\"tissue\":\"lung\",\"parent\":\"NSCLC\",\"level\":2}\n",
        );
        assert!(matches!(
            load_oncotree_records(f.path()),
            Err(Error::InvalidRecord { .. })
        ));
    }

    fn two_param_checkpoint() -> Checkpoint {
        Checkpoint {
            token_buckets: Some(16),
            meta: RunMeta {
                kind: "test".into(),
                seed: 7,
                config: serde_json::json!({"lr": 0.01}),
            },
            tensors: vec![
                NamedTensor {
                    name: "w".into(),
                    tensor: Tensor2::from_vec(2, 2, vec![0.5, -1.25, 3.0, 1e-3]).unwrap(),
                },
                NamedTensor {
                    name: "b".into(),
                    tensor: Tensor2::from_vec(1, 2, vec![0.1, 0.2]).unwrap(),
                },
            ],
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.ckpt");
        let ckpt = two_param_checkpoint();
        save_checkpoint(&ckpt, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.meta, ckpt.meta);
        for (a, b) in loaded.tensors.iter().zip(&ckpt.tensors) {
            let want: Vec<u32> = b
                .tensor
                .as_slice()
                .iter()
                .map(|v| (*v as f32).to_bits())
                .collect();
            let got: Vec<u32> = a
                .tensor
                .as_slice()
                .iter()
                .map(|v| (*v as f32).to_bits())
                .collect();
            assert_eq!(got, want);
        }
        assert_eq!(loaded.to_bytes(), std::fs::read(&path).unwrap());
    }

    #[test]
    fn truncated_payload_detected() {
        let mut bytes = two_param_checkpoint().to_bytes();
        bytes.pop();
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::TruncatedPayload { .. })
        ));
    }

    #[test]
    fn version_mismatch_detected() {
        let bytes = two_param_checkpoint().to_bytes();
        let text = String::from_utf8_lossy(&bytes).into_owned();
        let patched = text.replacen("\"format_version\":\"1\"", "\"format_version\":\"2\"", 1);
        assert_ne!(text, patched);
        match Checkpoint::from_bytes(patched.as_bytes()) {
            Err(Error::VersionMismatch { found, .. }) => assert_eq!(found, "2"),
            other => panic!("unexpected {other:?}"),
        }
    }

    fn arb_pair() -> impl Strategy<Value = PairRecord> {
        (
            "[a-z0-9]{1,8}",
            prop::collection::vec(-1e6..1e6f64, 3),
            "[a-z ]{0,20}[a-z]",
            prop::option::of("[A-Z]{2,5}"),
        )
            .prop_map(|(id, image_features, caption, disease_label)| PairRecord {
                id,
                image_features,
                caption,
                disease_label,
            })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn pair_files_roundtrip(records in prop::collection::vec(arb_pair(), 0..6)) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("pairs.jsonl");
            write_jsonl(&path, Some(DimHeader { dim: 3 }), &records).unwrap();
            let (dim, back) = load_pair_records(&path).unwrap();
            prop_assert_eq!(dim, 3);
            prop_assert_eq!(back, records);
        }

        #[test]
        fn checkpoint_bytes_deterministic(values in prop::collection::vec(-10.0..10.0f64, 1..20)) {
            let n = values.len();
            let make = || Checkpoint {
                token_buckets: None,
                meta: RunMeta { kind: "k".into(), seed: 1, config: Value::Null },
                tensors: vec![NamedTensor {
                    name: "t".into(),
                    tensor: Tensor2::from_vec(1, n, values.clone()).unwrap(),
                }],
            };
            let bytes = make().to_bytes();
            prop_assert_eq!(&bytes, &make().to_bytes());
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes(), bytes);
        }
    }
}
