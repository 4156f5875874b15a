//! On-disk model format.
//!
//! ```text
//! "TRIN" | version: u32 LE | header_len: u32 LE | header (UTF-8 key=value lines) | payload
//! ```
//!
//! The payload holds, per layer, the raw little-endian `f64` arrays `packed`
//! (N·B·N), `v_diag_raw` (N·B), `a` (N·B) and `b` (N) — exactly the in-memory
//! storage, so parsing and re-serializing reproduces every bit.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};
use trinet::unit::stored_float_count;
use trinet::{FlowModel, ImageGeom, Mat, Nonlinearity, TriUnit};

use crate::error::{CliError, CliResult};

pub const MAGIC: &[u8; 4] = b"TRIN";
pub const FORMAT_VERSION: u32 = 1;
const PREFIX_LEN: usize = 12;

/// Run metadata stored next to the parameters.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelMeta {
    pub seed: u64,
    pub creator: String,
    /// Set when the model was trained on logit-transformed pixels.
    pub logit_lambda: Option<f64>,
    pub image_geom: Option<ImageGeom>,
    /// Seed of the dequantization noise used at training time.
    pub data_seed: Option<u64>,
    pub val_frac: Option<f64>,
    pub test_frac: Option<f64>,
    /// Unrecognized header keys, kept so they survive a round trip.
    pub extra: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile {
    pub model: FlowModel,
    pub meta: ModelMeta,
}

pub fn creator() -> String {
    format!("trinet {}", env!("CARGO_PKG_VERSION"))
}

const KNOWN_KEYS: [&str; 13] = [
    "n_dim",
    "block_size",
    "n_layers",
    "nonlinearity",
    "flip_after",
    "norm_absorbed",
    "seed",
    "creator",
    "logit_lambda",
    "image_geom",
    "data_seed",
    "val_frac",
    "test_frac",
];

impl ModelFile {
    pub fn new(model: FlowModel, meta: ModelMeta) -> Self {
        Self { model, meta }
    }

    /// Shared architecture of all layers, rejecting mixed stacks the header
    /// cannot describe.
    fn uniform_arch(&self) -> CliResult<(usize, usize, Nonlinearity)> {
        let layers = self.model.layers();
        let first = &layers[0];
        let key = (first.n_dim(), first.block_size(), first.nonlinearity());
        if layers
            .iter()
            .any(|l| (l.n_dim(), l.block_size(), l.nonlinearity()) != key)
        {
            return Err(CliError::config(
                "model layers differ in block size or nonlinearity; the file format needs a uniform stack",
            ));
        }
        Ok(key)
    }

    pub fn header_text(&self) -> CliResult<String> {
        let (n, b, nl) = self.uniform_arch()?;
        let m = &self.meta;
        let flips: Vec<&str> = self
            .model
            .flip_after()
            .iter()
            .map(|&f| if f { "1" } else { "0" })
            .collect();
        let mut h = String::new();
        let mut put = |k: &str, v: &dyn std::fmt::Display| {
            let _ = writeln!(h, "{k}={v}");
        };
        put("n_dim", &n);
        put("block_size", &b);
        put("n_layers", &self.model.layers().len());
        put("nonlinearity", &nl);
        put("flip_after", &flips.join(","));
        put("norm_absorbed", &self.model.norm_absorbed());
        put("seed", &m.seed);
        put("creator", &m.creator);
        // `{}` on f64 prints the shortest representation that parses back exactly
        if let Some(l) = m.logit_lambda {
            put("logit_lambda", &l);
        }
        if let Some(g) = m.image_geom {
            put("image_geom", &format!("{}x{}x{}", g.height, g.width, g.channels));
        }
        if let Some(s) = m.data_seed {
            put("data_seed", &s);
        }
        if let Some(f) = m.val_frac {
            put("val_frac", &f);
        }
        if let Some(f) = m.test_frac {
            put("test_frac", &f);
        }
        for (k, v) in &m.extra {
            if KNOWN_KEYS.contains(&k.as_str()) || k.contains(['=', '\n']) || k.is_empty() || v.contains('\n') {
                return Err(CliError::config(format!("invalid extra header entry '{k}'")));
            }
            put(k, v);
        }
        Ok(h)
    }

    pub fn payload(&self) -> Vec<u8> {
        let floats = self.model.param_count();
        let mut out = Vec::with_capacity(8 * floats);
        for blk in self.model.param_blocks() {
            for v in blk {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn to_bytes(&self) -> CliResult<Vec<u8>> {
        let header = self.header_text()?;
        let header_len = u32::try_from(header.len())
            .map_err(|_| CliError::config("header too long"))?;
        let payload = self.payload();
        let mut out = Vec::with_capacity(PREFIX_LEN + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&header_len.to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> CliResult<Self> {
        if bytes.len() < PREFIX_LEN {
            return Err(CliError::format(format!(
                "file is {} bytes, shorter than the {PREFIX_LEN}-byte prefix",
                bytes.len()
            )));
        }
        if &bytes[..4] != MAGIC {
            return Err(CliError::format(format!(
                "bad magic {:02x?}, expected \"TRIN\"",
                &bytes[..4]
            )));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(CliError::format(format!(
                "unsupported format version {version} (this build reads {FORMAT_VERSION})"
            )));
        }
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let header_end = PREFIX_LEN
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| {
                CliError::format(format!(
                    "header length {header_len} runs past the end of the {}-byte file",
                    bytes.len()
                ))
            })?;
        let header = std::str::from_utf8(&bytes[PREFIX_LEN..header_end])
            .map_err(|e| CliError::format(format!("header is not UTF-8: {e}")))?;
        let fields = parse_header(header)?;
        let payload = &bytes[header_end..];
        Self::assemble(fields, payload)
    }

    fn assemble(mut f: BTreeMap<String, String>, payload: &[u8]) -> CliResult<Self> {
        let n: usize = take_parsed(&mut f, "n_dim")?;
        let bs: usize = take_parsed(&mut f, "block_size")?;
        let l: usize = take_parsed(&mut f, "n_layers")?;
        let nl: Nonlinearity = take(&mut f, "nonlinearity")?
            .parse()
            .map_err(|e: trinet::Error| CliError::format(e.to_string()))?;
        let flips_text = take(&mut f, "flip_after")?;
        let flips = flips_text
            .split(',')
            .filter(|s| !s.is_empty())
            .map(|s| match s {
                "1" => Ok(true),
                "0" => Ok(false),
                other => Err(CliError::format(format!("flip_after entry '{other}' is not 0 or 1"))),
            })
            .collect::<CliResult<Vec<bool>>>()?;
        if flips.len() != l {
            return Err(CliError::format(format!(
                "flip_after lists {} layers, n_layers is {l}",
                flips.len()
            )));
        }
        let norm_absorbed: bool = take_parsed(&mut f, "norm_absorbed")?;
        if n == 0 || bs == 0 || l == 0 {
            return Err(CliError::format("n_dim, block_size and n_layers must be positive"));
        }
        let per_layer = stored_float_count(n, bs);
        let expected = l
            .checked_mul(per_layer)
            .and_then(|c| c.checked_mul(8))
            .ok_or_else(|| CliError::format("declared architecture overflows"))?;
        if payload.len() != expected {
            return Err(CliError::format(format!(
                "payload is {} bytes, expected {expected} (8 x {l} layers x {per_layer} floats)",
                payload.len()
            )));
        }

        let meta = ModelMeta {
            seed: take_parsed(&mut f, "seed")?,
            creator: take(&mut f, "creator")?,
            logit_lambda: take_opt(&mut f, "logit_lambda")?,
            image_geom: f
                .remove("image_geom")
                .map(|g| parse_geom(&g))
                .transpose()?,
            data_seed: take_opt(&mut f, "data_seed")?,
            val_frac: take_opt(&mut f, "val_frac")?,
            test_frac: take_opt(&mut f, "test_frac")?,
            extra: f,
        };

        let mut floats = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        let mut next = |len: usize| -> Vec<f64> { floats.by_ref().take(len).collect() };
        let nb = n * bs;
        let mut layers = Vec::with_capacity(l);
        for _ in 0..l {
            let packed = Mat::from_vec(nb, n, next(nb * n))?;
            let v = next(nb);
            let a = next(nb);
            let b = next(n);
            layers.push(TriUnit::from_raw(n, bs, packed, v, a, b, nl)?);
        }
        let model = FlowModel::new(layers, flips, norm_absorbed)?;
        Ok(Self { model, meta })
    }

    pub fn save(&self, path: &Path) -> CliResult<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| CliError::io(path, e))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| {
            CliError::new(e.category, format!("{}: {}", path.display(), e.message))
        })
    }
}

/// Hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn parse_header(text: &str) -> CliResult<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            CliError::format(format!("header line {} has no '=': {line:?}", i + 1))
        })?;
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(CliError::format(format!("duplicate header key '{k}'")));
        }
    }
    Ok(out)
}

fn take(f: &mut BTreeMap<String, String>, key: &str) -> CliResult<String> {
    f.remove(key)
        .ok_or_else(|| CliError::format(format!("header is missing '{key}'")))
}

fn take_parsed<T: std::str::FromStr>(f: &mut BTreeMap<String, String>, key: &str) -> CliResult<T> {
    let v = take(f, key)?;
    v.parse()
        .map_err(|_| CliError::format(format!("header value {key}={v:?} does not parse")))
}

fn take_opt<T: std::str::FromStr>(f: &mut BTreeMap<String, String>, key: &str) -> CliResult<Option<T>> {
    if f.contains_key(key) {
        take_parsed(f, key).map(Some)
    } else {
        Ok(None)
    }
}

pub fn parse_geom(s: &str) -> CliResult<ImageGeom> {
    let parts: Vec<usize> = s
        .split('x')
        .map(|p| p.parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|_| CliError::format(format!("image geometry {s:?} is not HxWxC")))?;
    match parts[..] {
        [height, width, channels] => Ok(ImageGeom {
            height,
            width,
            channels,
        }),
        _ => Err(CliError::format(format!("image geometry {s:?} is not HxWxC"))),
    }
}
