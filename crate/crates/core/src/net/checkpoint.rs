//! Binary checkpoint format (little-endian throughout):
//!
//! ```text
//! "SBMK"                      magic
//! u32                         format version (1)
//! u8                          objective code
//! u32 x5                      state_dim, cond_dim, hidden, depth, time_dim
//! f64                         time_freq_max
//! u8                          flags (bit 0 double forward, bit 1 channel scale)
//! u32                         tensor count
//! per tensor: u32 rank, u64 dims[rank], f64 payload[prod(dims)]
//! u8                          training section present (0 / 1)
//!   u64 train step, u64 adam step,
//!   [u8; 32] rng seed, u64 rng stream, u128 rng word position,
//!   first-moment tensors, second-moment tensors (same layout as above)
//! u32                         CRC32 of every preceding byte
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{AdamState, ArchSpec, NetConfig, RegressorParams};
use crate::bridge::ObjectiveKind;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SBMK";
const VERSION: u32 = 1;

/// Optimizer and RNG state needed to resume training exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingState {
    pub step: u64,
    pub adam: AdamState,
    pub rng_seed: [u8; 32],
    pub rng_stream: u64,
    pub rng_word_pos: u128,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: RegressorParams,
    pub training: Option<TrainingState>,
}

struct Writer<W: Write> {
    inner: W,
    crc: crc32fast::Hasher,
}

impl<W: Write> Writer<W> {
    fn bytes(&mut self, b: &[u8]) -> Result<()> {
        self.crc.update(b);
        self.inner.write_all(b)?;
        Ok(())
    }
    fn u8(&mut self, v: u8) -> Result<()> {
        self.bytes(&[v])
    }
    fn u32(&mut self, v: u32) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }
    fn u64(&mut self, v: u64) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }
    fn f64(&mut self, v: f64) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }
    fn tensors(&mut self, p: &RegressorParams) -> Result<()> {
        for (shape, data) in p.tensor_shapes().iter().zip(p.tensors()) {
            self.u32(shape.len() as u32)?;
            for &d in shape {
                self.u64(d as u64)?;
            }
            for &v in data {
                self.f64(v)?;
            }
        }
        Ok(())
    }
}

struct Reader<R: Read> {
    inner: R,
    crc: crc32fast::Hasher,
}

impl<R: Read> Reader<R> {
    fn fill(&mut self, buf: &mut [u8]) -> Result<()> {
        self.inner.read_exact(buf).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => Error::Checkpoint("truncated file".into()),
            _ => Error::Io(e),
        })?;
        self.crc.update(buf);
        Ok(())
    }
    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.fill(&mut b)?;
        Ok(b)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.array::<1>()?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }
    fn tensors_into(&mut self, p: &mut RegressorParams) -> Result<()> {
        let shapes = p.tensor_shapes();
        for (k, (shape, data)) in shapes.iter().zip(p.tensors_mut()).enumerate() {
            let rank = self.u32()? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(self.u64()? as usize);
            }
            if &dims != shape {
                return Err(Error::Checkpoint(format!(
                    "tensor {k} has shape {dims:?}, architecture expects {shape:?}"
                )));
            }
            for v in data.iter_mut() {
                *v = self.f64()?;
            }
        }
        Ok(())
    }
}

fn dim_u32(what: &str, v: usize) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{what} = {v} does not fit the header")))
}

pub fn write_checkpoint<W: Write>(out: W, ckpt: &Checkpoint) -> Result<()> {
    let mut w = Writer {
        inner: out,
        crc: crc32fast::Hasher::new(),
    };
    let cfg = ckpt.params.config();
    w.bytes(MAGIC)?;
    w.u32(VERSION)?;
    w.u8(cfg.objective.code())?;
    w.u32(dim_u32("state_dim", cfg.state_dim)?)?;
    w.u32(dim_u32("cond_dim", cfg.cond_dim)?)?;
    w.u32(dim_u32("hidden", cfg.arch.hidden)?)?;
    w.u32(dim_u32("depth", cfg.arch.depth)?)?;
    w.u32(dim_u32("time_dim", cfg.arch.time_dim)?)?;
    w.f64(cfg.arch.time_freq_max)?;
    let flags = u8::from(cfg.arch.double_forward) | (u8::from(cfg.arch.channel_scale) << 1);
    w.u8(flags)?;
    w.u32(dim_u32("tensor count", ckpt.params.tensors().len())?)?;
    w.tensors(&ckpt.params)?;
    match &ckpt.training {
        None => w.u8(0)?,
        Some(ts) => {
            w.u8(1)?;
            w.u64(ts.step)?;
            w.u64(ts.adam.step)?;
            w.bytes(&ts.rng_seed)?;
            w.u64(ts.rng_stream)?;
            w.bytes(&ts.rng_word_pos.to_le_bytes())?;
            w.tensors(&ts.adam.m)?;
            w.tensors(&ts.adam.v)?;
        }
    }
    let crc = w.crc.clone().finalize();
    w.inner.write_all(&crc.to_le_bytes())?;
    w.inner.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(input: R) -> Result<Checkpoint> {
    let mut r = Reader {
        inner: input,
        crc: crc32fast::Hasher::new(),
    };
    if &r.array::<4>()? != MAGIC {
        return Err(Error::Checkpoint("bad magic (not an SBMK checkpoint)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let code = r.u8()?;
    let objective = ObjectiveKind::from_code(code)
        .ok_or_else(|| Error::Checkpoint(format!("unknown objective code {code}")))?;
    let state_dim = r.u32()? as usize;
    let cond_dim = r.u32()? as usize;
    let hidden = r.u32()? as usize;
    let depth = r.u32()? as usize;
    let time_dim = r.u32()? as usize;
    let time_freq_max = r.f64()?;
    let flags = r.u8()?;
    let arch = ArchSpec {
        hidden,
        depth,
        time_dim,
        time_freq_max,
        double_forward: flags & 1 != 0,
        channel_scale: flags & 2 != 0,
    };
    let config = NetConfig::new(state_dim, cond_dim, objective, arch)
        .map_err(|e| Error::Checkpoint(format!("invalid architecture header: {e}")))?;
    // Shapes come from the architecture; values are overwritten below.
    let mut params = RegressorParams::init(config, &mut ChaCha8Rng::seed_from_u64(0))?;
    let count = r.u32()? as usize;
    if count != params.tensors().len() {
        return Err(Error::Checkpoint(format!(
            "file has {count} tensors, architecture expects {}",
            params.tensors().len()
        )));
    }
    r.tensors_into(&mut params)?;
    let training = match r.u8()? {
        0 => None,
        1 => {
            let step = r.u64()?;
            let adam_step = r.u64()?;
            let rng_seed = r.array::<32>()?;
            let rng_stream = r.u64()?;
            let rng_word_pos = u128::from_le_bytes(r.array()?);
            let mut adam = AdamState::new(&params);
            adam.step = adam_step;
            r.tensors_into(&mut adam.m)?;
            r.tensors_into(&mut adam.v)?;
            Some(TrainingState {
                step,
                adam,
                rng_seed,
                rng_stream,
                rng_word_pos,
            })
        }
        other => return Err(Error::Checkpoint(format!("bad training-section flag {other}"))),
    };
    let computed = r.crc.clone().finalize();
    let mut stored = [0u8; 4];
    r.inner
        .read_exact(&mut stored)
        .map_err(|_| Error::Checkpoint("missing CRC32 trailer".into()))?;
    if u32::from_le_bytes(stored) != computed {
        return Err(Error::Checkpoint("CRC32 mismatch (file is corrupt)".into()));
    }
    let mut rest = [0u8; 1];
    if r.inner.read(&mut rest)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after CRC32".into()));
    }
    Ok(Checkpoint { params, training })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let file = File::create(path)?;
    write_checkpoint(BufWriter::new(file), ckpt)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = File::open(path)?;
    read_checkpoint(BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(objective: ObjectiveKind) -> RegressorParams {
        let arch = ArchSpec {
            hidden: 6,
            depth: 2,
            time_dim: 4,
            ..ArchSpec::default()
        };
        let cfg = NetConfig::new(2, 1, objective, arch).unwrap();
        let mut p = RegressorParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let last = p.tensors().len() - 2;
        for (i, v) in p.tensors_mut()[last].iter_mut().enumerate() {
            *v = 0.1 * i as f64 - 0.3;
        }
        p
    }

    fn to_bytes(ckpt: &Checkpoint) -> Vec<u8> {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, ckpt).unwrap();
        buf
    }

    #[test]
    fn header_layout() {
        let ckpt = Checkpoint {
            params: params(ObjectiveKind::PosteriorLength),
            training: None,
        };
        let buf = to_bytes(&ckpt);
        assert_eq!(&buf[..4], b"SBMK");
        assert_eq!(u32::from_le_bytes(buf[4..8].try_into().unwrap()), 1);
        assert_eq!(buf[8], ObjectiveKind::PosteriorLength.code());
        let crc = crc32fast::hash(&buf[..buf.len() - 4]);
        assert_eq!(u32::from_le_bytes(buf[buf.len() - 4..].try_into().unwrap()), crc);
    }

    #[test]
    fn round_trip_with_training_state() {
        let p = params(ObjectiveKind::EndpointWithScore);
        let mut adam = AdamState::new(&p);
        adam.step = 17;
        adam.m.tensors_mut()[0][0] = 0.25;
        adam.v.tensors_mut()[1][0] = 1e-9;
        let ckpt = Checkpoint {
            params: p,
            training: Some(TrainingState {
                step: 42,
                adam,
                rng_seed: [7; 32],
                rng_stream: 3,
                rng_word_pos: 123_456_789_012_345,
            }),
        };
        let back = read_checkpoint(to_bytes(&ckpt).as_slice()).unwrap();
        assert_eq!(back, ckpt);
    }

    #[test]
    fn corruption_is_detected() {
        let ckpt = Checkpoint {
            params: params(ObjectiveKind::Endpoint),
            training: None,
        };
        let mut buf = to_bytes(&ckpt);
        let mid = buf.len() / 2;
        buf[mid] ^= 0x10;
        let err = read_checkpoint(buf.as_slice()).unwrap_err();
        assert!(err.to_string().contains("CRC32"), "{err}");

        let buf = to_bytes(&ckpt);
        let err = read_checkpoint(&buf[..buf.len() - 9]).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)));

        let mut buf = to_bytes(&ckpt);
        buf[0] = b'X';
        assert!(read_checkpoint(buf.as_slice()).unwrap_err().to_string().contains("magic"));
    }
}
