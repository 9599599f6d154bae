//! Bit-exact persistence formats.
//!
//! * Basis container (`STF1`): magic, version u16, endianness byte (1 =
//!   little), counts L / d_h / H_KV, the candidate rank lists, then per
//!   layer and rank a provenance tag byte followed by the key basis and the
//!   per-KV-head value bases as little-endian f64 column-major blocks, with
//!   a trailing CRC-32 (IEEE) of everything before it.
//! * Stack weights (`STW1`): same envelope carrying the decoder shape, the
//!   config fingerprint, and every layer's weight matrices column-major.
//! * Activation dump: bare header `n, d_model, L` (u32 little-endian) plus
//!   the raw f64 stream, layer-major then row-major — the ingestion format
//!   for externally dumped activations.
//! * Surfaces and allocations: pretty JSON documents embedding the config
//!   fingerprint.

use crate::decoder::{
    DecoderConfig, DecoderLayerParams, DecoderStack, MlpKind, MlpParams, NormKind, NormParams,
};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::store::{BasisStore, LayerBases, Method, TrainingLog};
use crate::surface::{ErrorSurface, RankAllocation};
use serde::{Deserialize, Serialize};

pub const BASIS_MAGIC: &[u8; 4] = b"STF1";
pub const WEIGHTS_MAGIC: &[u8; 4] = b"STW1";
pub const FORMAT_VERSION: u16 = 1;
const LITTLE_ENDIAN_TAG: u8 = 1;

/// CRC-32 (IEEE 802.3 polynomial, reflected), table-driven.
pub fn crc32(bytes: &[u8]) -> u32 {
    const fn table() -> [u32; 256] {
        let mut t = [0u32; 256];
        let mut i = 0;
        while i < 256 {
            let mut c = i as u32;
            let mut k = 0;
            while k < 8 {
                c = if c & 1 != 0 { 0xedb8_8320 ^ (c >> 1) } else { c >> 1 };
                k += 1;
            }
            t[i] = c;
            i += 1;
        }
        t
    }
    const TABLE: [u32; 256] = table();
    let mut crc = 0xffff_ffffu32;
    for &b in bytes {
        crc = TABLE[((crc ^ b as u32) & 0xff) as usize] ^ (crc >> 8);
    }
    crc ^ 0xffff_ffff
}

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, v: &[u8]) {
        self.buf.extend_from_slice(v);
    }
    fn matrix_col_major(&mut self, m: &Matrix) {
        for j in 0..m.cols() {
            for i in 0..m.rows() {
                self.f64(m.get(i, j));
            }
        }
    }
    fn finish_with_crc(mut self) -> Vec<u8> {
        let crc = crc32(&self.buf);
        self.u32(crc);
        self.buf
    }
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Reader<'a> {
    fn new(data: &'a [u8], path: &str) -> Self {
        Reader {
            data,
            pos: 0,
            path: path.to_string(),
        }
    }

    fn fail(&self, detail: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.clone(),
            offset: self.pos,
            detail: detail.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(self.fail(format!(
                "needs {n} bytes, {} remain",
                self.data.len() - self.pos
            )));
        }
        let out = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn matrix_col_major(&mut self, rows: usize, cols: usize) -> Result<Matrix> {
        let mut m = Matrix::zeros(rows, cols);
        for j in 0..cols {
            for i in 0..rows {
                let v = self.f64()?;
                m.set(i, j, v);
            }
        }
        Ok(m)
    }

    fn expect_magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != magic {
            return Err(self.fail(format!(
                "bad magic {:?}, expected {:?}",
                got,
                std::str::from_utf8(magic).unwrap()
            )));
        }
        Ok(())
    }

    fn check_envelope(&mut self) -> Result<()> {
        let version = self.u16()?;
        if version != FORMAT_VERSION {
            return Err(self.fail(format!("unsupported version {version}")));
        }
        let endian = self.u8()?;
        if endian != LITTLE_ENDIAN_TAG {
            return Err(self.fail(format!("unsupported endianness tag {endian}")));
        }
        Ok(())
    }

    /// Validates the trailing CRC over everything before it.
    fn verify_crc(&self) -> Result<()> {
        if self.data.len() < 4 {
            return Err(self.fail("file too short for a CRC trailer"));
        }
        let body = &self.data[..self.data.len() - 4];
        let stored = u32::from_le_bytes(self.data[self.data.len() - 4..].try_into().unwrap());
        let computed = crc32(body);
        if stored != computed {
            return Err(Error::Format {
                path: self.path.clone(),
                offset: self.data.len() - 4,
                detail: format!("CRC mismatch: stored {stored:#010x}, computed {computed:#010x}"),
            });
        }
        Ok(())
    }
}

pub fn write_basis_file(store: &BasisStore) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(BASIS_MAGIC);
    w.u16(FORMAT_VERSION);
    w.u8(LITTLE_ENDIAN_TAG);
    w.u32(store.layers.len() as u32);
    w.u32(store.d_h as u32);
    w.u32(store.n_heads_kv as u32);
    w.u32(store.ranks_k.len() as u32);
    for &r in &store.ranks_k {
        w.u32(r as u32);
    }
    w.u32(store.ranks_v.len() as u32);
    for &r in &store.ranks_v {
        w.u32(r as u32);
    }
    for layer in &store.layers {
        for basis in &layer.key {
            w.u8(store.method.tag_byte());
            w.matrix_col_major(basis);
        }
        for heads in &layer.value {
            w.u8(store.method.tag_byte());
            for basis in heads {
                w.matrix_col_major(basis);
            }
        }
    }
    w.finish_with_crc()
}

pub fn read_basis_file(data: &[u8], path: &str) -> Result<BasisStore> {
    let mut r = Reader::new(data, path);
    r.verify_crc()?;
    r.expect_magic(BASIS_MAGIC)?;
    r.check_envelope()?;
    let n_layers = r.u32()? as usize;
    let d_h = r.u32()? as usize;
    let n_heads_kv = r.u32()? as usize;
    let nk = r.u32()? as usize;
    let ranks_k: Vec<usize> = (0..nk)
        .map(|_| r.u32().map(|v| v as usize))
        .collect::<Result<_>>()?;
    let nv = r.u32()? as usize;
    let ranks_v: Vec<usize> = (0..nv)
        .map(|_| r.u32().map(|v| v as usize))
        .collect::<Result<_>>()?;
    let mut method: Option<Method> = None;
    let mut read_tag = |r: &mut Reader| -> Result<()> {
        let tag = Method::from_tag_byte(r.u8()?)?;
        match method {
            None => method = Some(tag),
            Some(m) if m == tag => {}
            Some(m) => {
                return Err(Error::Format {
                    path: path.to_string(),
                    offset: r.pos,
                    detail: format!("mixed provenance tags {m} and {tag}"),
                })
            }
        }
        Ok(())
    };
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let mut key = Vec::with_capacity(ranks_k.len());
        for &rank in &ranks_k {
            read_tag(&mut r)?;
            key.push(r.matrix_col_major(d_h, rank)?);
        }
        let mut value = Vec::with_capacity(ranks_v.len());
        for &rank in &ranks_v {
            read_tag(&mut r)?;
            let mut heads = Vec::with_capacity(n_heads_kv);
            for _ in 0..n_heads_kv {
                heads.push(r.matrix_col_major(d_h, rank)?);
            }
            value.push(heads);
        }
        layers.push(LayerBases {
            key,
            value,
            key_logs: vec![TrainingLog::default(); ranks_k.len()],
            value_logs: vec![TrainingLog::default(); ranks_v.len()],
        });
    }
    if r.pos != data.len() - 4 {
        return Err(r.fail("trailing bytes before CRC"));
    }
    Ok(BasisStore {
        method: method.ok_or_else(|| r.fail("empty basis file"))?,
        d_h,
        n_heads_kv,
        ranks_k,
        ranks_v,
        layers,
    })
}

fn norm_kind_byte(kind: NormKind) -> u8 {
    match kind {
        NormKind::LayerNorm => 0,
        NormKind::RmsNorm => 1,
    }
}

fn mlp_kind_byte(kind: MlpKind) -> u8 {
    match kind {
        MlpKind::SiluGated => 0,
        MlpKind::Gelu => 1,
    }
}

pub fn write_weights_file(stack: &DecoderStack, fingerprint: &str) -> Vec<u8> {
    let cfg = &stack.config;
    let mut w = Writer::default();
    w.bytes(WEIGHTS_MAGIC);
    w.u16(FORMAT_VERSION);
    w.u8(LITTLE_ENDIAN_TAG);
    w.u64(u64::from_str_radix(fingerprint, 16).unwrap_or(0));
    w.u32(cfg.d_model as u32);
    w.u32(cfg.n_heads_q as u32);
    w.u32(cfg.n_heads_kv as u32);
    w.u32(cfg.d_h as u32);
    w.u32(cfg.d_ff as u32);
    w.u32(cfg.n_layers as u32);
    w.u8(norm_kind_byte(cfg.norm_kind));
    w.u8(mlp_kind_byte(cfg.mlp_kind));
    w.u8(cfg.rope_enabled as u8);
    for layer in &stack.layers {
        w.matrix_col_major(&layer.w_q);
        w.matrix_col_major(&layer.w_k);
        w.matrix_col_major(&layer.w_v);
        w.matrix_col_major(&layer.w_o);
        match &layer.mlp {
            MlpParams::SiluGated {
                w_gate,
                w_up,
                w_down,
            } => {
                w.matrix_col_major(w_gate);
                w.matrix_col_major(w_up);
                w.matrix_col_major(w_down);
            }
            MlpParams::Gelu { w_in, w_out } => {
                w.matrix_col_major(w_in);
                w.matrix_col_major(w_out);
            }
        }
        for norm in [&layer.norm1, &layer.norm2] {
            w.matrix_col_major(&norm.gain);
            if let Some(offset) = &norm.offset {
                w.matrix_col_major(offset);
            }
        }
    }
    w.finish_with_crc()
}

pub fn read_weights_file(data: &[u8], path: &str) -> Result<(DecoderStack, String)> {
    let mut r = Reader::new(data, path);
    r.verify_crc()?;
    r.expect_magic(WEIGHTS_MAGIC)?;
    r.check_envelope()?;
    let fingerprint = format!("{:016x}", r.u64()?);
    let d_model = r.u32()? as usize;
    let n_heads_q = r.u32()? as usize;
    let n_heads_kv = r.u32()? as usize;
    let d_h = r.u32()? as usize;
    let d_ff = r.u32()? as usize;
    let n_layers = r.u32()? as usize;
    let norm_kind = match r.u8()? {
        0 => NormKind::LayerNorm,
        1 => NormKind::RmsNorm,
        other => return Err(r.fail(format!("unknown norm kind {other}"))),
    };
    let mlp_kind = match r.u8()? {
        0 => MlpKind::SiluGated,
        1 => MlpKind::Gelu,
        other => return Err(r.fail(format!("unknown mlp kind {other}"))),
    };
    let rope_enabled = r.u8()? != 0;
    let config = DecoderConfig {
        d_model,
        n_heads_q,
        n_heads_kv,
        d_h,
        d_ff,
        norm_kind,
        mlp_kind,
        rope_enabled,
        n_layers,
    };
    config.validate()?;
    let kv_width = n_heads_kv * d_h;
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let w_q = r.matrix_col_major(d_model, d_model)?;
        let w_k = r.matrix_col_major(d_model, kv_width)?;
        let w_v = r.matrix_col_major(d_model, kv_width)?;
        let w_o = r.matrix_col_major(d_model, d_model)?;
        let mlp = match mlp_kind {
            MlpKind::SiluGated => MlpParams::SiluGated {
                w_gate: r.matrix_col_major(d_model, d_ff)?,
                w_up: r.matrix_col_major(d_model, d_ff)?,
                w_down: r.matrix_col_major(d_ff, d_model)?,
            },
            MlpKind::Gelu => MlpParams::Gelu {
                w_in: r.matrix_col_major(d_model, d_ff)?,
                w_out: r.matrix_col_major(d_ff, d_model)?,
            },
        };
        let mut norms = Vec::with_capacity(2);
        for _ in 0..2 {
            let gain = r.matrix_col_major(1, d_model)?;
            let offset = match norm_kind {
                NormKind::LayerNorm => Some(r.matrix_col_major(1, d_model)?),
                NormKind::RmsNorm => None,
            };
            norms.push(NormParams { gain, offset });
        }
        let norm2 = norms.pop().unwrap();
        let norm1 = norms.pop().unwrap();
        layers.push(DecoderLayerParams {
            w_q,
            w_k,
            w_v,
            w_o,
            mlp,
            norm1,
            norm2,
        });
    }
    if r.pos != data.len() - 4 {
        return Err(r.fail("trailing bytes before CRC"));
    }
    Ok((DecoderStack { config, layers }, fingerprint))
}

/// Per-layer calibration inputs, each `n x d_model` with `n` total rows
/// across all sequences.
pub fn write_activations_file(layer_inputs: &[Matrix]) -> Result<Vec<u8>> {
    let first = layer_inputs
        .first()
        .ok_or_else(|| Error::degenerate("write_activations", "no layers"))?;
    let (n, d_model) = first.shape();
    let mut w = Writer::default();
    w.u32(n as u32);
    w.u32(d_model as u32);
    w.u32(layer_inputs.len() as u32);
    for m in layer_inputs {
        if m.shape() != (n, d_model) {
            return Err(Error::dimension(
                "write_activations",
                "layer blocks must share one shape",
            ));
        }
        for i in 0..n {
            for &v in m.row(i) {
                w.f64(v);
            }
        }
    }
    Ok(w.buf)
}

/// Reads the bare `(n, d_model, L)` header plus raw f64 stream.
pub fn read_activations_file(data: &[u8], path: &str) -> Result<Vec<Matrix>> {
    let mut r = Reader::new(data, path);
    let n = r.u32()? as usize;
    let d_model = r.u32()? as usize;
    let n_layers = r.u32()? as usize;
    let expected = 12 + n_layers * n * d_model * 8;
    if data.len() != expected {
        return Err(Error::Format {
            path: path.to_string(),
            offset: data.len().min(expected),
            detail: format!(
                "size {} does not match header: expected {expected} bytes for {n_layers} layers of {n}x{d_model}",
                data.len()
            ),
        });
    }
    let mut out = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let mut m = Matrix::zeros(n, d_model);
        for i in 0..n {
            for j in 0..d_model {
                let v = r.f64()?;
                m.set(i, j, v);
            }
        }
        out.push(m);
    }
    Ok(out)
}

/// JSON document carrying the per-layer error surfaces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceFile {
    pub fingerprint: String,
    pub method: Method,
    pub d_h: usize,
    pub surfaces: Vec<ErrorSurface>,
}

/// JSON document carrying one rank allocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationFile {
    pub fingerprint: String,
    pub method: Method,
    pub allocation: RankAllocation,
}

pub fn to_json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(value).expect("document serializes");
    s.push('\n');
    s.into_bytes()
}

pub fn from_json_bytes<T: for<'de> Deserialize<'de>>(data: &[u8], path: &str) -> Result<T> {
    let text = std::str::from_utf8(data).map_err(|e| Error::Format {
        path: path.to_string(),
        offset: e.valid_up_to(),
        detail: "not UTF-8".into(),
    })?;
    serde_json::from_str(text).map_err(|e| Error::Format {
        path: path.to_string(),
        offset: e.column(),
        detail: e.to_string(),
    })
}
