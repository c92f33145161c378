//! Checkpoint files: a text header followed by raw little-endian `f32` data.
//!
//! ```text
//! stageprune-checkpoint v1
//! image_size=8
//! ...
//! meta.<key>=<value>          (optional, sorted)
//! tensor <name> <d0>x<d1> <byte offset> <byte length>
//! ...
//! end
//! <payload>
//! ```
//!
//! Tensors appear in the fixed parameter order of [`Denoiser::visit`]; their
//! byte ranges tile the payload without gaps.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use super::model::{Denoiser, ModelConfig};
use crate::error::{Error, Result};

const MAGIC: &str = "stageprune-checkpoint v1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Denoiser,
    /// Free-form annotations such as data normalization.
    pub meta: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(model: Denoiser) -> Self {
        Self { model, meta: BTreeMap::new() }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let c = self.model.config();
        let mut out = Vec::new();
        writeln!(out, "{MAGIC}")?;
        for (k, v) in arch_fields(c) {
            writeln!(out, "{k}={v}")?;
        }
        for (k, v) in &self.meta {
            if k.contains(['=', '\n']) || v.contains('\n') || k.is_empty() {
                return Err(Error::Checkpoint(format!("metadata key {k:?} cannot be stored")));
            }
            writeln!(out, "meta.{k}={v}")?;
        }
        let mut offset = 0usize;
        let mut payload = Vec::with_capacity(self.model.parameter_count() * 4);
        self.model.visit(|name, w, shape| {
            let dims: Vec<String> = shape.iter().map(usize::to_string).collect();
            let len = w.len() * 4;
            // Writing into a Vec cannot fail.
            let _ = writeln!(out, "tensor {name} {} {offset} {len}", dims.join("x"));
            offset += len;
            for v in w {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        });
        writeln!(out, "end")?;
        out.extend(payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut next_line = || -> Result<&str> {
            let rest = &bytes[pos..];
            let end = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
            pos += end + 1;
            std::str::from_utf8(&rest[..end]).map_err(|_| Error::Checkpoint("header is not UTF-8".into()))
        };
        if next_line()? != MAGIC {
            return Err(Error::Checkpoint("missing checkpoint magic line".into()));
        }
        let mut arch = BTreeMap::new();
        let mut meta = BTreeMap::new();
        let mut manifest = Vec::new();
        loop {
            let line = next_line()?;
            if line == "end" {
                break;
            }
            if let Some(rest) = line.strip_prefix("tensor ") {
                let parts: Vec<&str> = rest.split(' ').collect();
                if parts.len() != 4 {
                    return Err(Error::Checkpoint(format!("bad manifest line {line:?}")));
                }
                let dims = parts[1]
                    .split('x')
                    .map(str::parse)
                    .collect::<std::result::Result<Vec<usize>, _>>()
                    .map_err(|_| Error::Checkpoint(format!("bad shape in {line:?}")))?;
                let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Checkpoint(format!("bad number in {line:?}")));
                manifest.push((parts[0].to_string(), dims, num(parts[2])?, num(parts[3])?));
            } else if let Some((k, v)) = line.split_once('=') {
                match k.strip_prefix("meta.") {
                    Some(mk) => meta.insert(mk.to_string(), v.to_string()),
                    None => arch.insert(k.to_string(), v.to_string()),
                };
            } else {
                return Err(Error::Checkpoint(format!("unrecognized header line {line:?}")));
            }
        }
        let config = parse_arch(&arch)?;
        let payload = &bytes[pos..];
        let mut model = Denoiser::zeros(config)?;
        let mut expected_offset = 0usize;
        let mut idx = 0usize;
        let mut failure = None;
        model.visit_mut(|name, w, shape| {
            if failure.is_some() {
                return;
            }
            let Some((mname, dims, off, len)) = manifest.get(idx) else {
                failure = Some(format!("manifest lacks tensor {name}"));
                return;
            };
            idx += 1;
            if mname != name || dims != shape || *off != expected_offset || *len != w.len() * 4 {
                failure = Some(format!("manifest entry {mname} does not match expected tensor {name} {shape:?}"));
                return;
            }
            let Some(chunk) = payload.get(*off..off + len) else {
                failure = Some(format!("payload too short for {name}"));
                return;
            };
            for (dst, src) in w.iter_mut().zip(chunk.chunks_exact(4)) {
                *dst = f32::from_le_bytes([src[0], src[1], src[2], src[3]]);
            }
            expected_offset += len;
        });
        if let Some(msg) = failure {
            return Err(Error::Checkpoint(msg));
        }
        if idx != manifest.len() {
            return Err(Error::Checkpoint(format!("manifest has {} extra tensors", manifest.len() - idx)));
        }
        if expected_offset != payload.len() {
            return Err(Error::Checkpoint(format!(
                "payload is {} bytes but the manifest covers {expected_offset}",
                payload.len()
            )));
        }
        Ok(Self { model, meta })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn arch_fields(c: &ModelConfig) -> [(&'static str, usize); 8] {
    [
        ("image_size", c.image_size),
        ("channels", c.channels),
        ("patch", c.patch),
        ("d_model", c.d_model),
        ("heads", c.heads),
        ("blocks", c.blocks),
        ("mlp_ratio", c.mlp_ratio),
        ("classes", c.classes),
    ]
}

fn parse_arch(fields: &BTreeMap<String, String>) -> Result<ModelConfig> {
    let get = |k: &str| -> Result<usize> {
        fields
            .get(k)
            .ok_or_else(|| Error::Checkpoint(format!("header lacks {k}")))?
            .parse()
            .map_err(|_| Error::Checkpoint(format!("header field {k} is not an integer")))
    };
    let config = ModelConfig {
        image_size: get("image_size")?,
        channels: get("channels")?,
        patch: get("patch")?,
        d_model: get("d_model")?,
        heads: get("heads")?,
        blocks: get("blocks")?,
        mlp_ratio: get("mlp_ratio")?,
        classes: get("classes")?,
    };
    if let Some(k) = fields.keys().find(|k| !arch_fields(&config).iter().any(|(n, _)| n == k)) {
        return Err(Error::Checkpoint(format!("unknown header field {k}")));
    }
    Ok(config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model() -> Denoiser {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        Denoiser::init(ModelConfig { d_model: 16, heads: 2, blocks: 2, ..ModelConfig::default() }, &mut rng).unwrap()
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let mut ck = Checkpoint::new(model());
        ck.meta.insert("norm_mean".into(), "0.25".into());
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn manifest_tiles_payload() {
        let ck = Checkpoint::new(model());
        let bytes = ck.to_bytes().unwrap();
        let text = String::from_utf8_lossy(&bytes);
        let header_end = text.find("\nend\n").unwrap() + 5;
        let mut next = 0;
        for line in text[..header_end].lines().filter(|l| l.starts_with("tensor ")) {
            let p: Vec<&str> = line.split(' ').collect();
            assert_eq!(p[3].parse::<usize>().unwrap(), next);
            next += p[4].parse::<usize>().unwrap();
        }
        assert_eq!(next, bytes.len() - header_end);
        assert_eq!(next, ck.model.parameter_count() * 4);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let bytes = Checkpoint::new(model()).to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::from_bytes(b"not a checkpoint\n").is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }
}
