//! Checkpoint persistence: a plain-text header (version, config snapshot,
//! size histogram, parameter manifest) followed by a flat little-endian
//! 32-bit float body.  Parameters are kept 32-bit-representable throughout
//! training, so a save/load round trip reproduces forward passes bit for
//! bit.

use std::io::Write;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::diffusion::SizeSampler;
use crate::params::ParamStore;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "MOLDIFF-CKPT";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("size histogram: {0}")]
    Sizes(String),
}

pub struct Checkpoint {
    pub config: RunConfig,
    pub params: ParamStore,
    pub sizes: SizeSampler,
}

fn bad(msg: impl Into<String>) -> CheckpointError {
    CheckpointError::Format(msg.into())
}

pub fn save(path: &Path, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    let mut out: Vec<u8> = Vec::new();
    writeln!(out, "{MAGIC} {FORMAT_VERSION}")?;

    let config = ckpt.config.to_toml_string();
    writeln!(out, "config {}", config.len())?;
    out.extend_from_slice(config.as_bytes());
    writeln!(out)?;

    let entries = ckpt.sizes.entries();
    writeln!(out, "sizes {}", entries.len())?;
    for (label, size, count) in entries {
        let label = label.map_or("-".to_string(), |l| l.to_string());
        writeln!(out, "{label} {size} {count}")?;
    }

    let total: usize = ckpt.params.iter().map(|(_, a)| a.len()).sum();
    writeln!(out, "params {} {}", ckpt.params.len(), total)?;
    let mut offset = 0usize;
    for (name, array) in ckpt.params.iter() {
        let dims: Vec<String> = array.shape().iter().map(|d| d.to_string()).collect();
        writeln!(out, "{name} {} {offset}", dims.join("x"))?;
        offset += array.len();
    }
    writeln!(out, "body")?;
    for (_, array) in ckpt.params.iter() {
        for v in array.iter() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn line(&mut self) -> Result<&'a str, CheckpointError> {
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
            self.pos += 1;
        }
        if self.pos >= self.bytes.len() {
            return Err(bad("unexpected end of header"));
        }
        let s = std::str::from_utf8(&self.bytes[start..self.pos])
            .map_err(|_| bad("non-utf8 header line"))?;
        self.pos += 1;
        Ok(s)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.bytes.len() {
            return Err(bad("truncated file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = std::fs::read(path)?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
    };

    let head = r.line()?;
    let mut it = head.split_whitespace();
    if it.next() != Some(MAGIC) {
        return Err(bad(format!("not a checkpoint: '{head}'")));
    }
    let version: u32 = it
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| bad("missing version"))?;
    if version != FORMAT_VERSION {
        return Err(bad(format!(
            "version {version} unsupported (expected {FORMAT_VERSION})"
        )));
    }

    let cfg_line = r.line()?;
    let n_cfg: usize = cfg_line
        .strip_prefix("config ")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| bad(format!("bad config line '{cfg_line}'")))?;
    let cfg_bytes = r.take(n_cfg)?;
    let config = RunConfig::from_toml_str(
        std::str::from_utf8(cfg_bytes).map_err(|_| bad("non-utf8 config"))?,
    )?;
    if !r.line()?.is_empty() {
        return Err(bad("missing separator after config"));
    }

    let sizes_line = r.line()?;
    let n_sizes: usize = sizes_line
        .strip_prefix("sizes ")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| bad(format!("bad sizes line '{sizes_line}'")))?;
    let mut size_rows = Vec::with_capacity(n_sizes);
    for _ in 0..n_sizes {
        let row = r.line()?;
        let f: Vec<&str> = row.split_whitespace().collect();
        if f.len() != 3 {
            return Err(bad(format!("bad size row '{row}'")));
        }
        let label = if f[0] == "-" {
            None
        } else {
            Some(f[0].parse().map_err(|_| bad("bad size label"))?)
        };
        let size = f[1].parse().map_err(|_| bad("bad size value"))?;
        let count = f[2].parse().map_err(|_| bad("bad size count"))?;
        size_rows.push((label, size, count));
    }
    let sizes =
        SizeSampler::from_entries(&size_rows).map_err(|e| CheckpointError::Sizes(e.to_string()))?;

    let params_line = r.line()?;
    let mut it = params_line
        .strip_prefix("params ")
        .ok_or_else(|| bad(format!("bad params line '{params_line}'")))?
        .split_whitespace();
    let n_params: usize = it
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| bad("bad param count"))?;
    let total: usize = it
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| bad("bad body length"))?;

    let mut manifest = Vec::with_capacity(n_params);
    let mut next_offset = 0usize;
    for _ in 0..n_params {
        let row = r.line()?;
        let f: Vec<&str> = row.split_whitespace().collect();
        if f.len() != 3 {
            return Err(bad(format!("bad manifest row '{row}'")));
        }
        let shape: Vec<usize> = f[1]
            .split('x')
            .map(|d| d.parse().map_err(|_| bad("bad shape")))
            .collect::<Result<_, _>>()?;
        let offset: usize = f[2].parse().map_err(|_| bad("bad offset"))?;
        // offsets must tile the body exactly, in order
        if offset != next_offset {
            return Err(bad(format!(
                "manifest offset {offset} for '{}' leaves a gap or overlap",
                f[0]
            )));
        }
        next_offset += shape.iter().product::<usize>();
        manifest.push((f[0].to_string(), shape, offset));
    }
    if next_offset != total {
        return Err(bad(format!(
            "manifest covers {next_offset} floats, body declares {total}"
        )));
    }
    if r.line()? != "body" {
        return Err(bad("missing body marker"));
    }
    let body = r.take(total * 4)?;
    if r.pos != bytes.len() {
        return Err(bad("trailing bytes after body"));
    }

    let mut params = ParamStore::new();
    for (name, shape, offset) in manifest {
        let len: usize = shape.iter().product();
        let mut vals = Vec::with_capacity(len);
        for k in 0..len {
            let at = (offset + k) * 4;
            let v = f32::from_le_bytes(body[at..at + 4].try_into().unwrap());
            vals.push(v as f64);
        }
        let array = ArrayD::from_shape_vec(IxDyn(&shape), vals)
            .map_err(|e| bad(format!("shape mismatch for '{name}': {e}")))?;
        params.insert(&name, array);
    }

    Ok(Checkpoint {
        config,
        params,
        sizes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::SizeSampler;
    use crate::dit::dit_forward;
    use crate::encoding::ChannelTensor;
    use ndarray::ArrayD;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn micro_config() -> RunConfig {
        RunConfig {
            n_max: 6,
            model_dim: 16,
            depth: 1,
            heads: 2,
            patch: 3,
            t_embed: 16,
            t_max: 8,
            ..RunConfig::default()
        }
    }

    fn sizes() -> SizeSampler {
        SizeSampler::from_labeled_counts(&[(None, 3), (None, 4), (Some(1), 5)]).unwrap()
    }

    #[test]
    fn roundtrip_preserves_config_params_and_sizes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let cfg = micro_config();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut params = cfg.model_config().init_params(&mut rng);
        params.snap_to_f32();
        let ckpt = Checkpoint {
            config: cfg.clone(),
            params,
            sizes: sizes(),
        };
        save(&path, &ckpt).unwrap();
        let back = load(&path).unwrap();
        assert_eq!(back.config, cfg);
        assert_eq!(back.sizes, ckpt.sizes);
        assert_eq!(back.params.len(), ckpt.params.len());
        for (name, array) in ckpt.params.iter() {
            assert_eq!(back.params.get(name), array, "param {name}");
        }
    }

    #[test]
    fn forward_pass_is_bit_identical_after_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let cfg = micro_config();
        let model = cfg.model_config();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut params = model.init_params(&mut rng);
        // make the blocks non-trivial, then snap like the trainer does
        let names: Vec<String> = params.names().cloned().collect();
        for name in names {
            if name.contains("mod_") || name.contains("decode") {
                let shape = params.get(&name).shape().to_vec();
                *params.get_mut(&name) = crate::params::init_normal(&mut rng, &shape, 0.05);
            }
        }
        params.snap_to_f32();

        let mut x = ChannelTensor::zeros(6, 4);
        x.data = crate::diffusion::sample_noise(&x, &mut rng);
        let (eps_before, var_before) = dit_forward(&model, &params, &x, 3, None).unwrap();

        save(
            &path,
            &Checkpoint {
                config: cfg,
                params,
                sizes: sizes(),
            },
        )
        .unwrap();
        let back = load(&path).unwrap();
        let (eps_after, var_after) = dit_forward(&model, &back.params, &x, 3, None).unwrap();
        assert_eq!(eps_before.data, eps_after.data);
        assert_eq!(var_before.data, var_after.data);
    }

    #[test]
    fn save_is_byte_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = micro_config();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut params = cfg.model_config().init_params(&mut rng);
        params.snap_to_f32();
        let ckpt = Checkpoint {
            config: cfg,
            params,
            sizes: sizes(),
        };
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        save(&p1, &ckpt).unwrap();
        save(&p2, &ckpt).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn malformed_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut params = ParamStore::new();
        params.insert("w", ArrayD::zeros(ndarray::IxDyn(&[2, 2])));
        let ckpt = Checkpoint {
            config: micro_config(),
            params,
            sizes: sizes(),
        };
        save(&path, &ckpt).unwrap();
        let good = std::fs::read(&path).unwrap();

        let check = |bytes: Vec<u8>, what: &str| {
            let p = dir.path().join("bad.ckpt");
            std::fs::write(&p, bytes).unwrap();
            assert!(load(&p).is_err(), "accepted {what}");
        };
        check(b"NOT-A-CKPT 1\n".to_vec(), "wrong magic");
        check(
            good.iter()
                .map(|&b| if b == b'1' { b'9' } else { b })
                .collect(),
            "future version",
        );
        check(good[..good.len() - 3].to_vec(), "truncated body");
        check(
            {
                let mut b = good.clone();
                b.extend_from_slice(&[0, 0, 0, 0]);
                b
            },
            "trailing bytes",
        );
        // overlapping manifest: duplicate zero offset
        let text = String::from_utf8_lossy(&good).into_owned();
        let tampered = text.replacen("w 2x2 0", "w 2x2 1", 1);
        check(tampered.into_bytes(), "gapped offset");
    }
}
