use std::fmt;
use std::io::{BufRead, Read, Write};
use std::path::Path;

use rand::Rng;
use sha2::{Digest, Sha256};

use super::Tensor;
use crate::error::{Error, Result};

pub type ParamId = usize;

/// Which part of the pipeline a parameter belongs to. End-to-end training
/// updates exactly the components for which [`ParamTag::trainable`] is true.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamTag {
    LanguageEncoder,
    Fusion,
    AudioEncoder,
    AudioProjector,
    SpanDetector,
}

impl ParamTag {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamTag::SpanDetector)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ParamTag::LanguageEncoder => "language_encoder",
            ParamTag::Fusion => "fusion",
            ParamTag::AudioEncoder => "audio_encoder",
            ParamTag::AudioProjector => "audio_projector",
            ParamTag::SpanDetector => "span_detector",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "language_encoder" => ParamTag::LanguageEncoder,
            "fusion" => ParamTag::Fusion,
            "audio_encoder" => ParamTag::AudioEncoder,
            "audio_projector" => ParamTag::AudioProjector,
            "span_detector" => ParamTag::SpanDetector,
            other => return Err(Error::Parse(format!("unknown parameter tag {other:?}"))),
        })
    }
}

impl fmt::Display for ParamTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    name: String,
    tag: ParamTag,
    value: Tensor,
}

/// Named, tagged parameter tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn add(&mut self, name: impl Into<String>, tag: ParamTag, value: Tensor) -> ParamId {
        self.entries.push(Entry {
            name: name.into(),
            tag,
            value,
        });
        self.entries.len() - 1
    }

    /// Glorot-uniform weight matrix `fan_in × fan_out`.
    pub fn add_weight<R: Rng>(
        &mut self,
        name: impl Into<String>,
        tag: ParamTag,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> ParamId {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng.random_range(-limit..limit)).collect();
        self.add(name, tag, Tensor::matrix(fan_in, fan_out, data).expect("valid dims"))
    }

    /// Normal(0, std) table, used for embeddings.
    pub fn add_normal<R: Rng>(
        &mut self,
        name: impl Into<String>,
        tag: ParamTag,
        rows: usize,
        cols: usize,
        std: f64,
        rng: &mut R,
    ) -> ParamId {
        let normal = rand_distr::Normal::new(0.0, std).expect("positive std");
        let data = (0..rows * cols).map(|_| rng.sample(normal)).collect();
        self.add(name, tag, Tensor::matrix(rows, cols, data).expect("valid dims"))
    }

    pub fn add_const(&mut self, name: impl Into<String>, tag: ParamTag, shape: &[usize], v: f64) -> ParamId {
        self.add(name, tag, Tensor::full(shape, v))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id].name
    }

    pub fn tag(&self, id: ParamId) -> ParamTag {
        self.entries[id].tag
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        0..self.entries.len()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Serialized checkpoint bytes, optionally restricted to some tags.
    pub fn to_checkpoint(&self, only: Option<&[ParamTag]>) -> Checkpoint {
        let tensors = self
            .entries
            .iter()
            .filter(|e| only.is_none_or(|tags| tags.contains(&e.tag)))
            .map(|e| (e.name.clone(), e.tag, e.value.clone()))
            .collect();
        Checkpoint { tensors }
    }

    /// Overwrites values from a checkpoint; names and shapes must match.
    pub fn load(&mut self, ckpt: &Checkpoint) -> Result<()> {
        for (name, _, value) in &ckpt.tensors {
            let id = self
                .find(name)
                .ok_or_else(|| Error::Parse(format!("checkpoint tensor {name:?} not in model")))?;
            if self.entries[id].value.shape() != value.shape() {
                return Err(Error::Shape {
                    op: "checkpoint load",
                    lhs: self.entries[id].value.shape().to_vec(),
                    rhs: value.shape().to_vec(),
                });
            }
            self.entries[id].value = value.clone();
        }
        Ok(())
    }
}

/// Named flat tensors in the on-disk layout:
///
/// ```text
/// ITH-CKPT 1
/// <count>
/// <name>\t<tag>\t<d0>x<d1>...\t<byte offset>     (count lines)
/// ---
/// <little-endian f64 payload>
/// ```
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, ParamTag, Tensor)>,
}

const MAGIC: &str = "ITH-CKPT 1";

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut head = format!("{MAGIC}\n{}\n", self.tensors.len());
        let mut offset = 0usize;
        for (name, tag, t) in &self.tensors {
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            head.push_str(&format!("{name}\t{tag}\t{}\t{offset}\n", dims.join("x")));
            offset += t.len() * 8;
        }
        head.push_str("---\n");
        let mut out = head.into_bytes();
        out.reserve(offset);
        for (_, _, t) in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cursor = std::io::Cursor::new(bytes);
        let mut line = String::new();
        let mut next_line = |cursor: &mut std::io::Cursor<&[u8]>| -> Result<String> {
            line.clear();
            cursor.read_line(&mut line)?;
            Ok(line.trim_end_matches('\n').to_string())
        };
        if next_line(&mut cursor)? != MAGIC {
            return Err(Error::Parse("not a checkpoint (bad magic)".into()));
        }
        let count: usize = next_line(&mut cursor)?
            .parse()
            .map_err(|_| Error::Parse("bad tensor count".into()))?;
        let mut manifest = Vec::with_capacity(count);
        for _ in 0..count {
            let l = next_line(&mut cursor)?;
            let fields: Vec<&str> = l.split('\t').collect();
            if fields.len() != 4 {
                return Err(Error::Parse(format!("bad manifest line {l:?}")));
            }
            let shape = fields[2]
                .split('x')
                .map(|d| d.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| Error::Parse(format!("bad shape {:?}", fields[2])))?;
            let offset: usize = fields[3]
                .parse()
                .map_err(|_| Error::Parse(format!("bad offset {:?}", fields[3])))?;
            manifest.push((fields[0].to_string(), ParamTag::parse(fields[1])?, shape, offset));
        }
        if next_line(&mut cursor)? != "---" {
            return Err(Error::Parse("missing manifest terminator".into()));
        }
        let mut payload = Vec::new();
        cursor.read_to_end(&mut payload)?;
        let mut tensors = Vec::with_capacity(count);
        for (name, tag, shape, offset) in manifest {
            let n: usize = shape.iter().product();
            let bytes = payload
                .get(offset..offset + n * 8)
                .ok_or_else(|| Error::Parse(format!("payload truncated for {name}")))?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((name, tag, Tensor::new(shape, data)?));
        }
        Ok(Self { tensors })
    }

    /// Hex SHA-256 of the serialized form.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&ckpt.to_bytes())?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = ParamStore::new();
        s.add_weight("a.w", ParamTag::Fusion, 3, 4, &mut rng);
        s.add_const("a.b", ParamTag::SpanDetector, &[4], 0.5);
        let ck = s.to_checkpoint(None);
        let bytes = ck.to_bytes();
        let text_end = bytes.windows(4).position(|w| w == b"---\n").unwrap();
        let manifest = std::str::from_utf8(&bytes[..text_end]).unwrap();
        assert!(manifest.contains("a.w\tfusion\t3x4\t0"));
        assert!(manifest.contains("a.b\tspan_detector\t4\t96"));
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.digest(), ck.digest());

        let mut other = ParamStore::new();
        other.add_const("a.w", ParamTag::Fusion, &[3, 4], 0.0);
        other.add_const("a.b", ParamTag::SpanDetector, &[4], 0.0);
        other.load(&back).unwrap();
        assert_eq!(other, s);
    }

    #[test]
    fn rejects_garbage() {
        assert!(Checkpoint::from_bytes(b"hello\n").is_err());
        assert!(Checkpoint::from_bytes(b"ITH-CKPT 1\n1\nx\tfusion\t2\t0\n---\n\0\0").is_err());
    }
}
