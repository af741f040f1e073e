//! Binary checkpoints with a versioned header and a text manifest sidecar.
//!
//! Layout (little-endian): magic `TDSC`, u32 version, then
//! config TOML (u64 length + bytes), config hash (u64 length + bytes),
//! u64 step, RNG state (32-byte seed, u64 stream, u128 word position),
//! u64 usage length + u64 counts, u64 parameter count and per parameter:
//! name (u64 length + bytes), u64 rank, u64 dims, u64 Adam step count,
//! values, Adam first moments, Adam second moments (each as f64s).
//! The file ends with the SHA-256 of everything before it.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::pathway::CodeUsage;
use crate::train::TrainState;

const MAGIC: &[u8; 4] = b"TDSC";
pub const VERSION: u32 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.0.extend_from_slice(b);
    }
    fn f64s(&mut self, v: &[f64]) {
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.buf.len() - self.pos {
            return Err(Error::format(self.path, "truncated checkpoint"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn len(&mut self) -> Result<usize> {
        let n = self.u64()?;
        usize::try_from(n).map_err(|_| Error::format(self.path, "length overflow"))
    }
    fn string(&mut self) -> Result<String> {
        let n = self.len()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::format(self.path, "invalid utf-8"))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::format(self.path, "length overflow"))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

pub fn encode(state: &TrainState) -> Vec<u8> {
    let cfg = state.cfg();
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.0.extend_from_slice(&VERSION.to_le_bytes());
    w.bytes(cfg.to_toml().as_bytes());
    w.bytes(cfg.config_hash().as_bytes());
    w.u64(state.step);
    w.0.extend_from_slice(&state.rng.get_seed());
    w.u64(state.rng.get_stream());
    w.0.extend_from_slice(&state.rng.get_word_pos().to_le_bytes());
    w.u64(state.usage.counts.len() as u64);
    for &c in &state.usage.counts {
        w.u64(c);
    }
    w.u64(state.model.store.len() as u64);
    for p in state.model.store.iter() {
        w.bytes(p.name.as_bytes());
        w.u64(p.tensor.shape().len() as u64);
        for &d in p.tensor.shape() {
            w.u64(d as u64);
        }
        w.u64(p.step_count);
        w.f64s(p.tensor.data());
        w.f64s(&p.adam_m);
        w.f64s(&p.adam_v);
    }
    let digest = Sha256::digest(&w.0);
    w.0.extend_from_slice(&digest);
    w.0
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<TrainState> {
    if bytes.len() < 8 + 32 {
        return Err(Error::format(path, "truncated checkpoint"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    let mut r = Reader { buf: body, pos: 0, path };
    if r.take(4)? != MAGIC {
        return Err(Error::format(path, "not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported checkpoint version {version}")));
    }
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::format(path, "checksum mismatch"));
    }
    let cfg = TrainConfig::from_toml_str(&r.string()?)?;
    let hash = r.string()?;
    if hash != cfg.config_hash() {
        return Err(Error::format(path, "stored config hash does not match stored config"));
    }
    let step = r.u64()?;
    let seed: [u8; 32] = r.take(32)?.try_into().unwrap();
    let stream = r.u64()?;
    let word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);
    let n_usage = r.len()?;
    if n_usage != cfg.codebook_size {
        return Err(Error::format(path, "usage table does not match codebook size"));
    }
    let counts = (0..n_usage).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;

    let mut model = Model::new(&cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
    let n_params = r.len()?;
    if n_params != model.store.len() {
        return Err(Error::format(
            path,
            format!("{} parameters stored, model has {}", n_params, model.store.len()),
        ));
    }
    for p in model.store.iter_mut() {
        let name = r.string()?;
        if name != p.name {
            return Err(Error::format(path, format!("expected parameter `{}`, found `{name}`", p.name)));
        }
        let rank = r.len()?;
        let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        if shape != p.tensor.shape() {
            return Err(Error::format(
                path,
                format!("`{name}` has shape {shape:?}, expected {:?}", p.tensor.shape()),
            ));
        }
        p.step_count = r.u64()?;
        let n = p.tensor.numel();
        p.tensor = Tensor::new(shape, r.f64s(n)?)?;
        p.adam_m = r.f64s(n)?;
        p.adam_v = r.f64s(n)?;
        p.grad.iter_mut().for_each(|g| *g = 0.0);
    }
    if r.pos != body.len() {
        return Err(Error::format(path, "trailing bytes"));
    }
    Ok(TrainState {
        model,
        rng,
        step,
        usage: CodeUsage { counts },
    })
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest.txt");
    PathBuf::from(s)
}

/// Human-readable listing of the parameters in a checkpoint.
pub fn manifest(state: &TrainState) -> String {
    let cfg = state.cfg();
    let mut s = format!(
        "format TDSC v{VERSION}\nconfig_hash {}\nstep {}\nparameters {}\nscalars {}\n",
        cfg.config_hash(),
        state.step,
        state.model.store.len(),
        state.model.store.num_scalars()
    );
    for p in state.model.store.iter() {
        let dims: Vec<String> = p.tensor.shape().iter().map(|d| d.to_string()).collect();
        s.push_str(&format!("{} {}\n", p.name, dims.join("x")));
    }
    s
}

/// Writes the checkpoint and its manifest; returns both paths.
pub fn save(state: &TrainState, path: &Path) -> Result<[PathBuf; 2]> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, encode(state)).map_err(|e| Error::io(path, e))?;
    let m = manifest_path(path);
    fs::write(&m, manifest(state)).map_err(|e| Error::io(&m, e))?;
    Ok([path.to_path_buf(), m])
}

pub fn load(path: &Path) -> Result<TrainState> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Ablation;
    use crate::data::SceneSpec;
    use crate::train::{full_forward, run_training};

    fn tiny() -> TrainConfig {
        TrainConfig {
            slots: 2,
            codebook_size: 4,
            slot_dim: 4,
            decoder_blocks: 1,
            decoder_heads: 1,
            batch_size: 2,
            ablation: Ablation::FULL,
            data: SceneSpec {
                grid_h: 3,
                grid_w: 3,
                feat_dim: 4,
                min_objects: 1,
                max_objects: 1,
                ..SceneSpec::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn encode_decode_encode_is_identical() {
        let mut st = TrainState::new(&tiny()).unwrap();
        run_training(&mut st, 2, &full_forward, |_, _| Ok(())).unwrap();
        let a = encode(&st);
        let back = decode(&a, Path::new("mem")).unwrap();
        assert_eq!(encode(&back), a);
        assert_eq!(back.step, 2);
        assert_eq!(back.rng, st.rng);
    }

    #[test]
    fn corruption_is_detected() {
        let st = TrainState::new(&tiny()).unwrap();
        let mut a = encode(&st);
        a[40] ^= 1;
        assert!(decode(&a, Path::new("mem")).is_err());
        assert!(decode(&a[..20], Path::new("mem")).is_err());
    }
}
