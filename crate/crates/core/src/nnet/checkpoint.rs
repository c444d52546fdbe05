//! On-disk checkpoint: named, shaped 32-bit tensors with unit-inventory
//! metadata, plus partial (name-mapped) transfer between models.
//!
//! Layout (all integers little-endian):
//!   magic "RNNTCKPT" | u32 version | meta strings (u32 len + UTF-8:
//!   unit family, vocabulary hash) | u32 tensor count | directory |
//!   raw f32 payload.
//! Directory entry: u16 name length | name | u8 dtype (0 = f32) |
//!   u8 ndim | u32 per dim | u64 payload byte offset.

use super::Parameterized;
use crate::error::{Error, Result};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"RNNTCKPT";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorData {
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CheckpointMeta {
    pub unit_family: String,
    pub vocab_hash: String,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub version: u32,
    pub meta: CheckpointMeta,
    /// Sorted by name, which makes serialization deterministic.
    pub tensors: BTreeMap<String, TensorData>,
}

impl Checkpoint {
    pub fn from_model(model: &impl Parameterized, meta: CheckpointMeta) -> Self {
        let mut tensors = BTreeMap::new();
        model.visit("", &mut |name, shape, data| {
            tensors.insert(
                name.to_string(),
                TensorData {
                    shape: shape.to_vec(),
                    values: data.iter().map(|&v| v as f32).collect(),
                },
            );
        });
        Self {
            version: FORMAT_VERSION,
            meta,
            tensors,
        }
    }

    /// Full restore: every model tensor must be present with its shape.
    pub fn apply_to_model(&self, model: &mut impl Parameterized) -> Result<()> {
        let mut missing = Vec::new();
        model.visit("", &mut |name, shape, _| {
            match self.tensors.get(name) {
                Some(t) if t.shape == shape => {}
                Some(t) => missing.push(format!(
                    "{name}: checkpoint shape {:?}, model shape {:?}",
                    t.shape, shape
                )),
                None => missing.push(format!("{name}: absent from checkpoint")),
            }
        });
        if !missing.is_empty() {
            return Err(Error::Transfer(missing.join("; ")));
        }
        model.visit_mut("", &mut |name, _, data| {
            let t = &self.tensors[name];
            for (d, &v) in data.iter_mut().zip(&t.values) {
                *d = v as f64;
            }
        });
        Ok(())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(self.version)?;
        for s in [&self.meta.unit_family, &self.meta.vocab_hash] {
            w.write_u32::<LittleEndian>(s.len() as u32)?;
            w.write_all(s.as_bytes())?;
        }
        w.write_u32::<LittleEndian>(self.tensors.len() as u32)?;
        let mut offset = 0u64;
        for (name, t) in &self.tensors {
            w.write_u16::<LittleEndian>(name.len() as u16)?;
            w.write_all(name.as_bytes())?;
            w.write_u8(0)?; // f32
            w.write_u8(t.shape.len() as u8)?;
            for &d in &t.shape {
                w.write_u32::<LittleEndian>(d as u32)?;
            }
            w.write_u64::<LittleEndian>(offset)?;
            offset += (t.values.len() * 4) as u64;
        }
        for t in self.tensors.values() {
            for &v in &t.values {
                w.write_f32::<LittleEndian>(v)?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let read_string = |r: &mut R| -> Result<String> {
            let len = r.read_u32::<LittleEndian>()? as usize;
            let mut buf = vec![0u8; len];
            r.read_exact(&mut buf)?;
            String::from_utf8(buf).map_err(|e| Error::Format(format!("bad UTF-8: {e}")))
        };
        let unit_family = read_string(&mut r)?;
        let vocab_hash = read_string(&mut r)?;
        let count = r.read_u32::<LittleEndian>()? as usize;
        let mut directory = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.read_u16::<LittleEndian>()? as usize;
            let mut buf = vec![0u8; name_len];
            r.read_exact(&mut buf)?;
            let name =
                String::from_utf8(buf).map_err(|e| Error::Format(format!("bad UTF-8: {e}")))?;
            let dtype = r.read_u8()?;
            if dtype != 0 {
                return Err(Error::Format(format!("unsupported dtype {dtype}")));
            }
            let ndim = r.read_u8()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.read_u32::<LittleEndian>()? as usize);
            }
            let offset = r.read_u64::<LittleEndian>()?;
            directory.push((name, shape, offset));
        }
        let mut tensors = BTreeMap::new();
        for (name, shape, _offset) in directory {
            let n: usize = shape.iter().product();
            let mut values = vec![0f32; n];
            r.read_f32_into::<LittleEndian>(&mut values)?;
            tensors.insert(name, TensorData { shape, values });
        }
        Ok(Self {
            version,
            meta: CheckpointMeta {
                unit_family,
                vocab_hash,
            },
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        // Atomic via temp-and-rename.
        let tmp = path.with_extension("tmp");
        let mut file = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
        self.write_to(&mut file)?;
        file.flush()?;
        drop(file);
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(file)
    }
}

/// Prefix-rewrite rules for transferring checkpoint tensors into a model,
/// with a discard list for tensors that must never transfer (softmax and
/// CTC tap heads).
#[derive(Debug, Clone, Default)]
pub struct NameMap {
    rules: Vec<(String, String)>,
    discard: Vec<String>,
}

impl NameMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Rewrite checkpoint prefix `src` to model prefix `dst`.
    pub fn rule(mut self, src: &str, dst: &str) -> Self {
        self.rules.push((src.to_string(), dst.to_string()));
        self
    }

    /// Checkpoint tensors under this prefix are dropped on transfer.
    pub fn discard(mut self, prefix: &str) -> Self {
        self.discard.push(prefix.to_string());
        self
    }

    fn map(&self, name: &str) -> Mapped {
        if self.discard.iter().any(|p| name.starts_with(p.as_str())) {
            return Mapped::Discarded;
        }
        for (src, dst) in &self.rules {
            if let Some(rest) = name.strip_prefix(src.as_str()) {
                return Mapped::To(format!("{dst}{rest}"));
            }
        }
        Mapped::Unmatched
    }
}

enum Mapped {
    To(String),
    Discarded,
    Unmatched,
}

/// What a partial transfer did, tensor by tensor.
#[derive(Debug, Clone, Default)]
pub struct TransferReport {
    /// (checkpoint name, model name) pairs that were copied.
    pub transferred: Vec<(String, String)>,
    /// Model tensors left at their fresh initialization.
    pub skipped: Vec<String>,
    /// Checkpoint tensors dropped by the discard list.
    pub discarded: Vec<String>,
    /// Checkpoint tensors no rule matched.
    pub unmatched: Vec<String>,
}

/// Copies name-mapped checkpoint tensors into the model. Unmapped model
/// tensors keep their initialization. Embedding tensors transfer only when
/// the unit vocabularies hash-match.
pub fn load_partial(
    checkpoint: &Checkpoint,
    model: &mut impl Parameterized,
    name_map: &NameMap,
    model_vocab_hash: Option<&str>,
) -> Result<TransferReport> {
    let mut report = TransferReport::default();
    let mut by_dst: HashMap<String, (&str, &TensorData)> = HashMap::new();
    for (name, tensor) in &checkpoint.tensors {
        match name_map.map(name) {
            Mapped::Discarded => report.discarded.push(name.clone()),
            Mapped::Unmatched => report.unmatched.push(name.clone()),
            Mapped::To(dst) => {
                if by_dst.insert(dst.clone(), (name, tensor)).is_some() {
                    return Err(Error::Transfer(format!(
                        "two checkpoint tensors map onto model tensor {dst}"
                    )));
                }
            }
        }
    }

    // Validate before mutating anything.
    let mut problems = Vec::new();
    model.visit("", &mut |name, shape, _| {
        if let Some((src, tensor)) = by_dst.get(name) {
            if tensor.shape != shape {
                problems.push(format!(
                    "shape conflict on {name} (from {src}): checkpoint {:?}, model {:?}",
                    tensor.shape, shape
                ));
            }
            if name.contains("embedding") {
                if let Some(hash) = model_vocab_hash {
                    if hash != checkpoint.meta.vocab_hash {
                        problems.push(format!(
                            "embedding transfer onto {name} with mismatched vocabulary hash \
                             (checkpoint {}, model {hash})",
                            checkpoint.meta.vocab_hash
                        ));
                    }
                }
            }
        }
    });
    if !problems.is_empty() {
        return Err(Error::Transfer(problems.join("; ")));
    }

    model.visit_mut("", &mut |name, _, data| {
        if let Some((src, tensor)) = by_dst.get(name) {
            for (d, &v) in data.iter_mut().zip(&tensor.values) {
                *d = v as f64;
            }
            report.transferred.push((src.to_string(), name.to_string()));
        } else {
            report.skipped.push(name.to_string());
        }
    });
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::LstmParams;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    struct Pair {
        a: LstmParams,
        b: LstmParams,
    }

    impl Parameterized for Pair {
        fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
            self.a.visit(&format!("{prefix}a/"), f);
            self.b.visit(&format!("{prefix}b/"), f);
        }
        fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &[usize], &mut [f64])) {
            self.a.visit_mut(&format!("{prefix}a/"), f);
            self.b.visit_mut(&format!("{prefix}b/"), f);
        }
    }

    fn pair(seed: u64) -> Pair {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Pair {
            a: LstmParams::init(3, 4, &mut rng),
            b: LstmParams::init(4, 4, &mut rng),
        }
    }

    #[test]
    fn roundtrip_bytes() {
        let model = pair(5);
        let ckpt = Checkpoint::from_model(
            &model,
            CheckpointMeta {
                unit_family: "grapheme".into(),
                vocab_hash: "abc".into(),
            },
        );
        let mut bytes = Vec::new();
        ckpt.write_to(&mut bytes).unwrap();
        let back = Checkpoint::read_from(&bytes[..]).unwrap();
        assert_eq!(back.meta, ckpt.meta);
        assert_eq!(back.tensors, ckpt.tensors);
    }

    #[test]
    fn empty_name_map_transfers_nothing() {
        let src = pair(1);
        let ckpt = Checkpoint::from_model(&src, CheckpointMeta::default());
        let mut dst = pair(2);
        let before = crate::nnet::collect_named(&dst);
        let report = load_partial(&ckpt, &mut dst, &NameMap::new(), None).unwrap();
        assert!(report.transferred.is_empty());
        assert_eq!(report.skipped.len(), 6);
        assert_eq!(report.unmatched.len(), 6);
        assert_eq!(crate::nnet::collect_named(&dst), before);
    }

    #[test]
    fn transfer_then_save_is_bit_identical() {
        let src = pair(1);
        let ckpt = Checkpoint::from_model(&src, CheckpointMeta::default());
        let mut dst = pair(2);
        let map = NameMap::new().rule("a/", "a/").discard("b/");
        let report = load_partial(&ckpt, &mut dst, &map, None).unwrap();
        assert_eq!(report.transferred.len(), 3);
        assert_eq!(report.discarded.len(), 3);
        let resaved = Checkpoint::from_model(&dst, CheckpointMeta::default());
        for (_, dst_name) in &report.transferred {
            assert_eq!(resaved.tensors[dst_name].values, ckpt.tensors[dst_name].values);
        }
    }

    #[test]
    fn shape_conflict_lists_both_shapes() {
        let src = pair(1);
        let ckpt = Checkpoint::from_model(&src, CheckpointMeta::default());
        let mut dst = pair(2);
        // a/w_x is [16, 3]; mapping b -> a pits [16, 4] against it.
        let map = NameMap::new().rule("b/", "a/");
        let err = load_partial(&ckpt, &mut dst, &map, None).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[16, 4]") && msg.contains("[16, 3]"), "{msg}");
    }
}
