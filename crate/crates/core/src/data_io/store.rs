use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::network::{ArchSpec, Model, ModelKind, Weights};
use crate::tensor::Tensor;

/// Directory searched for relative dataset paths.
pub const CACHE_ENV: &str = "GALUPATH_CACHE";

const CHECKPOINT_MAGIC: &str = "galupath-checkpoint 1";
const LOCK_FILE: &str = ".galupath.lock";

pub fn cache_dir() -> Option<PathBuf> {
    std::env::var_os(CACHE_ENV).map(PathBuf::from)
}

/// Relative paths resolve against the cache directory when it is set.
pub fn resolve_data_path(p: &Path) -> PathBuf {
    match cache_dir() {
        Some(dir) if p.is_relative() => dir.join(p),
        _ => p.to_path_buf(),
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

fn shape_str(t: &Tensor) -> String {
    t.shape().iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

fn net_line(name: &str, w: Option<&Weights>) -> String {
    match w {
        None => format!("{name} none"),
        Some(w) => {
            let shapes: Vec<String> = w.tensors.iter().map(shape_str).collect();
            format!("{name} {} {}", w.tensors.len(), shapes.join(" ")).trim_end().to_string()
        }
    }
}

/// Writes a model as a text header followed by its parameters as
/// little-endian f64, value network first.
pub fn write_checkpoint(path: &Path, model: &Model) -> Result<()> {
    let spec = serde_json::to_string(&model.spec).expect("spec serialises");
    let kind = serde_json::to_string(&model.kind).expect("kind serialises");
    let nets = std::iter::once(&model.value).chain(model.gating.as_ref());
    let count: usize = nets.clone().map(Weights::num_params).sum();
    let mut out = format!(
        "{CHECKPOINT_MAGIC}\nspec {spec}\nkind {kind}\n{}\n{}\npayload {}\n",
        net_line("value", Some(&model.value)),
        net_line("gating", model.gating.as_ref()),
        count * 8
    )
    .into_bytes();
    for w in nets {
        for t in &w.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn fail<T>(&self, msg: impl Into<String>) -> Result<T> {
        Err(Error::Format {
            offset: self.pos as u64,
            msg: msg.into(),
        })
    }

    fn line(&mut self) -> Result<&'a str> {
        let rest = &self.bytes[self.pos..];
        let Some(end) = rest.iter().position(|&b| b == b'\n') else {
            return self.fail("truncated header");
        };
        let Ok(s) = std::str::from_utf8(&rest[..end]) else {
            return self.fail("header is not UTF-8");
        };
        self.pos += end + 1;
        Ok(s)
    }

    fn field(&mut self, key: &str) -> Result<&'a str> {
        let start = self.pos;
        let line = self.line()?;
        match line.strip_prefix(key).and_then(|r| r.strip_prefix(' ')) {
            Some(v) => Ok(v),
            None => {
                self.pos = start;
                self.fail(format!("expected `{key}` line"))
            }
        }
    }

    fn shapes(&mut self, key: &str) -> Result<Option<Vec<Vec<usize>>>> {
        let start = self.pos;
        let v = self.field(key)?;
        if v == "none" {
            return Ok(None);
        }
        let bad = |c: &mut Self| {
            c.pos = start;
            c.fail(format!("malformed `{key}` shape list"))
        };
        let mut parts = v.split(' ');
        let Some(Ok(k)) = parts.next().map(str::parse::<usize>) else {
            return bad(self);
        };
        let shapes: Option<Vec<Vec<usize>>> = parts
            .map(|s| s.split('x').map(|d| d.parse().ok()).collect())
            .collect();
        match shapes {
            Some(s) if s.len() == k => Ok(Some(s)),
            _ => bad(self),
        }
    }
}

/// Reads a checkpoint written by [`write_checkpoint`]. Parameters come back
/// bit for bit.
pub fn read_checkpoint(path: &Path) -> Result<Model> {
    let bytes = std::fs::read(path)?;
    let mut c = Cursor { bytes: &bytes, pos: 0 };
    if c.line()? != CHECKPOINT_MAGIC {
        c.pos = 0;
        return c.fail("not a galupath checkpoint");
    }
    let at = c.pos;
    let spec: ArchSpec = serde_json::from_str(c.field("spec")?).map_err(|e| Error::Format {
        offset: at as u64,
        msg: format!("spec: {e}"),
    })?;
    let at = c.pos;
    let kind: ModelKind = serde_json::from_str(c.field("kind")?).map_err(|e| Error::Format {
        offset: at as u64,
        msg: format!("kind: {e}"),
    })?;
    let Some(value_shapes) = c.shapes("value")? else {
        return c.fail("value network missing");
    };
    let gating_shapes = c.shapes("gating")?;
    let at = c.pos;
    let Ok(payload) = c.field("payload")?.parse::<usize>() else {
        c.pos = at;
        return c.fail("malformed payload length");
    };
    let data = &bytes[c.pos..];
    if data.len() != payload {
        c.pos = bytes.len();
        return c.fail(format!("payload has {} bytes, header says {payload}", data.len()));
    }
    let mut floats = data
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")));
    let mut take = |shapes: &[Vec<usize>]| -> Result<Weights> {
        let mut ts = Vec::with_capacity(shapes.len());
        for s in shapes {
            let n: usize = s.iter().product();
            let v: Vec<f64> = floats.by_ref().take(n).collect();
            if v.len() != n {
                return Err(Error::Format {
                    offset: bytes.len() as u64,
                    msg: "payload shorter than the declared shapes".into(),
                });
            }
            ts.push(Tensor::new(s.clone(), v)?);
        }
        Ok(Weights::new(ts))
    };
    let value = take(&value_shapes)?;
    let gating = gating_shapes.map(|s| take(&s)).transpose()?;
    if floats.next().is_some() {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            msg: "payload longer than the declared shapes".into(),
        });
    }
    Model::from_parts(spec, kind, value, gating)
}

/// One line of the results ledger.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerRow {
    pub run_id: String,
    pub subcommand: String,
    pub spec_hash: String,
    pub seed: u64,
    pub permutation_id: Option<usize>,
    pub mode: String,
    pub test_accuracy: f64,
    pub wall_seconds: f64,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
}

/// Appends rows to the ledger CSV, writing the header when the file is new.
pub fn append_ledger(path: &Path, rows: &[LedgerRow]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = OpenOptions::new().create(true).append(true).open(path)?;
    let mut w = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_ledger(path: &Path) -> Result<Vec<LedgerRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

/// Short content id from the parts that define a run.
pub fn run_id(parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.as_bytes());
        h.update([0x1f]);
    }
    hex::encode(h.finalize())[..16].to_string()
}

/// Writes `<dir>/<run_id>.json` and returns its path.
pub fn write_run_json<T: Serialize>(dir: &Path, run_id: &str, doc: &T) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let path = dir.join(format!("{run_id}.json"));
    let mut text = serde_json::to_string_pretty(doc).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    text.push('\n');
    std::fs::write(&path, text)?;
    Ok(path)
}

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(LOCK_FILE);
        let mut f: File = match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                return Err(Error::Config(format!(
                    "{} is in use by another run (remove {} if it is stale)",
                    dir.display(),
                    path.display()
                )))
            }
            Err(e) => return Err(e.into()),
        };
        writeln!(f, "{}", std::process::id())?;
        Ok(Self { path })
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}
