//! Binary named-tensor checkpoints.
//!
//! ```text
//! "HFKV" | version u32 | config_len u32 | config utf-8 ("key = value\n")*
//! | tensor_count u32
//! | (name_len u32 | name utf-8 | rank u32 | dims u64 × rank | f64 × prod(dims))*
//! | crc32 u32 over every preceding byte
//! ```
//!
//! All integers and floats are little-endian.

use std::path::Path;

use crate::adapters::{
    init_virtual_kv, AblationFlags, Adapter, HificlAdapter, LoraAdapter, ShiftAdapter, VirtualKvShape,
};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, TransformerParams};
use crate::numcore::{Matrix, Rng};
use crate::params::{load_named, named_clone};

pub const MAGIC: &[u8; 4] = b"HFKV";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    /// Ordered `key = value` pairs.
    pub config: Vec<(String, String)>,
    pub tensors: Vec<(String, Matrix)>,
}

fn ck_err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(ck_err(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn utf8(&mut self, n: usize) -> Result<&'a str> {
        std::str::from_utf8(self.take(n)?).map_err(|e| ck_err(format!("invalid utf-8: {e}")))
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| ck_err(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

impl Checkpoint {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.config.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key).ok_or_else(|| ck_err(format!("missing config key {key}")))
    }

    pub fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.require(key)?;
        raw.parse()
            .map_err(|_| ck_err(format!("config key {key} has unparsable value {raw:?}")))
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        match self.config.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value,
            None => self.config.push((key.to_string(), value)),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let mut block = String::new();
        for (k, v) in &self.config {
            if k.contains(['=', '\n']) || k.trim() != k || v.contains('\n') || v.trim() != v {
                return Err(ck_err(format!("config entry {k:?} = {v:?} cannot be stored")));
            }
            block.push_str(&format!("{k} = {v}\n"));
        }
        put_u32(&mut out, block.len())?;
        out.extend_from_slice(block.as_bytes());
        put_u32(&mut out, self.tensors.len())?;
        for (name, m) in &self.tensors {
            put_u32(&mut out, name.len())?;
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, 2)?;
            out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
            out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
            for v in m.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(ck_err("file too short"));
        }
        let (payload, trailer) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(trailer.try_into().expect("4 bytes"));
        let actual = crc32fast::hash(payload);
        if stored != actual {
            return Err(ck_err(format!("crc mismatch: stored {stored:08x}, computed {actual:08x}")));
        }
        let mut r = Reader { buf: payload, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(ck_err("bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(ck_err(format!("unsupported version {version}")));
        }
        let block_len = r.u32()? as usize;
        let block = r.utf8(block_len)?;
        let mut config = Vec::new();
        for line in block.lines() {
            let (k, v) = line
                .split_once(" = ")
                .ok_or_else(|| ck_err(format!("malformed config line {line:?}")))?;
            config.push((k.to_string(), v.to_string()));
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = r.utf8(name_len)?.to_string();
            let rank = r.u32()?;
            let (rows, cols) = match rank {
                1 => (1, r.u64()? as usize),
                2 => (r.u64()? as usize, r.u64()? as usize),
                _ => return Err(ck_err(format!("tensor {name} has unsupported rank {rank}"))),
            };
            let n = rows
                .checked_mul(cols)
                .filter(|n| n.checked_mul(8).is_some_and(|b| b <= payload.len()))
                .ok_or_else(|| ck_err(format!("tensor {name} has implausible shape {rows}x{cols}")))?;
            let raw = r.take(n * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((name, Matrix::from_vec(rows, cols, data)?));
        }
        if r.pos != payload.len() {
            return Err(ck_err(format!("{} trailing bytes", payload.len() - r.pos)));
        }
        Ok(Self { config, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn put_model_config(ck: &mut Checkpoint, cfg: &ModelConfig) {
    ck.set("model.vocab", cfg.vocab);
    ck.set("model.d_model", cfg.d_model);
    ck.set("model.num_heads", cfg.num_heads);
    ck.set("model.num_layers", cfg.num_layers);
    ck.set("model.d_ff", cfg.d_ff);
    ck.set("model.max_seq_len", cfg.max_seq_len);
}

pub fn model_config_of(ck: &Checkpoint) -> Result<ModelConfig> {
    Ok(ModelConfig {
        vocab: ck.parse("model.vocab")?,
        d_model: ck.parse("model.d_model")?,
        num_heads: ck.parse("model.num_heads")?,
        num_layers: ck.parse("model.num_layers")?,
        d_ff: ck.parse("model.d_ff")?,
        max_seq_len: ck.parse("model.max_seq_len")?,
    })
}

pub fn base_to_checkpoint(params: &TransformerParams) -> Checkpoint {
    let mut ck = Checkpoint::default();
    ck.set("kind", "base");
    put_model_config(&mut ck, &params.config);
    ck.tensors = named_clone(params);
    ck
}

pub fn base_from_checkpoint(ck: &Checkpoint) -> Result<TransformerParams> {
    if ck.require("kind")? != "base" {
        return Err(ck_err(format!("expected a base checkpoint, found {}", ck.require("kind")?)));
    }
    let cfg = model_config_of(ck)?;
    let mut params = TransformerParams::init(&cfg, &mut Rng::new(0))?;
    load_named(&mut params, &ck.tensors)?;
    Ok(params)
}

pub fn adapter_to_checkpoint(adapter: &Adapter, model: &ModelConfig) -> Checkpoint {
    let mut ck = Checkpoint::default();
    ck.set("kind", "adapter");
    ck.set("adapter.type", adapter.kind());
    put_model_config(&mut ck, model);
    match adapter {
        Adapter::Hificl(h) => {
            let s = &h.vkv.shape;
            ck.set("adapter.slots", s.slots);
            ck.set("adapter.rank", s.rank);
            let layers = match &s.layers {
                Some(ls) => ls.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(","),
                None => "all".to_string(),
            };
            ck.set("adapter.layers", layers);
            ck.set("adapter.no_lowrank_k", h.flags.no_lowrank_k);
            ck.set("adapter.no_lowrank_v", h.flags.no_lowrank_v);
            ck.set("adapter.alpha_one", h.flags.alpha_one);
            ck.set("adapter.teacher", h.flags.teacher);
        }
        Adapter::Lora(l) => {
            ck.set("adapter.rank", l.rank);
            ck.set("adapter.scale", format!("{:?}", l.scale));
        }
        Adapter::Shift(_) => {}
    }
    ck.tensors = named_clone(adapter);
    ck
}

pub fn adapter_from_checkpoint(ck: &Checkpoint) -> Result<(Adapter, ModelConfig)> {
    if ck.require("kind")? != "adapter" {
        return Err(ck_err(format!("expected an adapter checkpoint, found {}", ck.require("kind")?)));
    }
    let cfg = model_config_of(ck)?;
    let mut rng = Rng::new(0);
    let mut adapter = match ck.require("adapter.type")? {
        "hificl" => {
            let mut shape = VirtualKvShape::for_model(&cfg, ck.parse("adapter.slots")?, ck.parse("adapter.rank")?);
            let layers = ck.require("adapter.layers")?;
            if layers != "all" {
                let parsed = layers
                    .split(',')
                    .map(|s| s.parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| ck_err(format!("bad layer list {layers:?}")))?;
                shape.layers = Some(parsed);
            }
            let flags = AblationFlags {
                no_lowrank_k: ck.parse("adapter.no_lowrank_k")?,
                no_lowrank_v: ck.parse("adapter.no_lowrank_v")?,
                alpha_one: ck.parse("adapter.alpha_one")?,
                teacher: ck.parse("adapter.teacher")?,
            };
            Adapter::Hificl(HificlAdapter {
                vkv: init_virtual_kv(&mut rng, &shape, &flags)?,
                flags,
            })
        }
        "lora" => {
            let mut l = LoraAdapter::new(&mut rng, &cfg, ck.parse("adapter.rank")?)?;
            l.scale = ck.parse("adapter.scale")?;
            Adapter::Lora(l)
        }
        "shift" => Adapter::Shift(ShiftAdapter::new(&mut rng, &cfg)),
        other => return Err(ck_err(format!("unknown adapter type {other}"))),
    };
    load_named(&mut adapter, &ck.tensors)?;
    Ok((adapter, cfg))
}
