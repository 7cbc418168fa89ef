//! Single-file checkpoint container.
//!
//! Layout: 8-byte magic, `u32` version, `u64` length of a JSON header, the
//! header, a `u32` array count, then per array a `u32`-prefixed UTF-8 name,
//! a dtype code (0 = f32, 1 = f64), a `u32` rank, `u64` dims and raw
//! little-endian data. All integers are little-endian.

use std::collections::HashMap;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Checkpoint, TrainConfig};
use crate::autograd::{DType, Scalar, Tensor};
use crate::error::{ensure, Result, YganError};
use crate::model::{Architecture, ModelBundle, ModelConfig};
use crate::nn::{Adam, AdamConfig};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"YGANCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct RngState {
    seed: String,
    stream: u64,
    word_pos: String,
}

#[derive(Serialize, Deserialize)]
struct OptimizerMeta {
    config: AdamConfig,
    step: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    dtype: u8,
    model_config: ModelConfig,
    architecture: Architecture,
    train_config: TrainConfig,
    epoch: usize,
    step: u64,
    rng: RngState,
    opt_g: OptimizerMeta,
    opt_d: Option<OptimizerMeta>,
}

fn push_array<T: Scalar>(out: &mut Vec<u8>, name: &str, t: &Tensor<T>) {
    out.extend((name.len() as u32).to_le_bytes());
    out.extend(name.as_bytes());
    out.push(T::DTYPE.code());
    out.extend((t.ndim() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend((d as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(out);
    }
}

fn push_optimizer<T: Scalar>(out: &mut Vec<u8>, prefix: &str, opt: &Adam<T>, bundle: &ModelBundle<T>) -> u32 {
    for (k, &pid) in opt.params.iter().enumerate() {
        let name = &bundle.store.entry(pid).name;
        push_array(out, &format!("{prefix}.m/{name}"), &opt.first_moment[k]);
        push_array(out, &format!("{prefix}.v/{name}"), &opt.second_moment[k]);
    }
    2 * opt.params.len() as u32
}

/// Writes the full training state to `path` (via a temporary file, so a
/// crash never leaves a truncated checkpoint behind).
pub fn save_checkpoint<T: Scalar>(ckpt: &Checkpoint<T>, path: &Path) -> Result<()> {
    let header = Header {
        dtype: T::DTYPE.code(),
        model_config: ckpt.bundle.config.clone(),
        architecture: ckpt.bundle.arch,
        train_config: ckpt.train_config.clone(),
        epoch: ckpt.epoch,
        step: ckpt.step,
        rng: RngState {
            seed: hex::encode(ckpt.rng.get_seed()),
            stream: ckpt.rng.get_stream(),
            word_pos: ckpt.rng.get_word_pos().to_string(),
        },
        opt_g: OptimizerMeta {
            config: ckpt.opt_g.config,
            step: ckpt.opt_g.step,
        },
        opt_d: ckpt.opt_d.as_ref().map(|o| OptimizerMeta {
            config: o.config,
            step: o.step,
        }),
    };
    let json = serde_json::to_vec(&header)?;
    let mut body = Vec::new();
    let mut count = 0u32;
    for entry in ckpt.bundle.store.entries() {
        push_array(&mut body, &format!("param/{}", entry.name), &entry.value);
        count += 1;
    }
    count += push_optimizer(&mut body, "opt_g", &ckpt.opt_g, &ckpt.bundle);
    if let Some(opt) = &ckpt.opt_d {
        count += push_optimizer(&mut body, "opt_d", opt, &ckpt.bundle);
    }

    let mut out = Vec::with_capacity(body.len() + json.len() + 32);
    out.extend(CHECKPOINT_MAGIC);
    out.extend(CHECKPOINT_VERSION.to_le_bytes());
    out.extend((json.len() as u64).to_le_bytes());
    out.extend(&json);
    out.extend(count.to_le_bytes());
    out.extend(body);

    let tmp = path.with_extension("ckpt.tmp");
    std::fs::write(&tmp, &out).map_err(|e| YganError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| YganError::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        ensure!(
            self.pos + n <= self.bytes.len(),
            Checkpoint,
            "file truncated at byte {} (needed {} more)",
            self.pos,
            n
        );
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn read_values<S: Scalar, T: Scalar>(raw: &[u8], shape: &[usize]) -> Result<Tensor<T>> {
    let width = S::DTYPE.size();
    let data: Vec<S> = raw.chunks_exact(width).map(S::read_le).collect();
    Ok(Tensor::from_vec(shape, data)?.cast())
}

fn read_arrays<T: Scalar>(r: &mut Reader) -> Result<HashMap<String, Tensor<T>>> {
    let count = r.u32()?;
    let mut arrays = HashMap::with_capacity(count as usize);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| YganError::Checkpoint("array name is not UTF-8".into()))?
            .to_string();
        let code = r.take(1)?[0];
        let dtype = DType::from_code(code).ok_or_else(|| YganError::Checkpoint(format!("unknown dtype code {code} for {name}")))?;
        let ndim = r.u32()? as usize;
        ensure!(ndim <= 8, Checkpoint, "array {} has implausible rank {}", name, ndim);
        let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(dtype.size()).ok_or_else(|| YganError::Checkpoint(format!("array {name} too large")))?)?;
        let t = match dtype {
            DType::F32 => read_values::<f32, T>(raw, &shape)?,
            DType::F64 => read_values::<f64, T>(raw, &shape)?,
        };
        arrays.insert(name, t);
    }
    ensure!(r.pos == r.bytes.len(), Checkpoint, "{} trailing bytes after the last array", r.bytes.len() - r.pos);
    Ok(arrays)
}

fn take_array<T: Scalar>(arrays: &mut HashMap<String, Tensor<T>>, name: &str, shape: &[usize]) -> Result<Tensor<T>> {
    let t = arrays
        .remove(name)
        .ok_or_else(|| YganError::Checkpoint(format!("missing array {name}")))?;
    ensure!(
        t.shape() == shape,
        Checkpoint,
        "array {} has shape {:?}, expected {:?}",
        name,
        t.shape(),
        shape
    );
    Ok(t)
}

fn restore_optimizer<T: Scalar>(
    opt: &mut Adam<T>,
    meta: &OptimizerMeta,
    prefix: &str,
    bundle: &ModelBundle<T>,
    arrays: &mut HashMap<String, Tensor<T>>,
) -> Result<()> {
    opt.config = meta.config;
    opt.step = meta.step;
    for (k, &pid) in opt.params.iter().enumerate() {
        let entry = bundle.store.entry(pid);
        let shape = entry.value.shape();
        opt.first_moment[k] = take_array(arrays, &format!("{prefix}.m/{}", entry.name), shape)?;
        opt.second_moment[k] = take_array(arrays, &format!("{prefix}.v/{}", entry.name), shape)?;
    }
    Ok(())
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| YganError::io(path, e))
}

fn parse_header<'a>(bytes: &'a [u8]) -> Result<(Header, Reader<'a>)> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(8).map_err(|_| YganError::Checkpoint("file too short for a checkpoint".into()))?;
    ensure!(magic == CHECKPOINT_MAGIC, Checkpoint, "bad magic header; not a Y-GAN checkpoint");
    let version = r.u32()?;
    ensure!(
        version == CHECKPOINT_VERSION,
        Checkpoint,
        "unsupported checkpoint version {} (this build reads version {})",
        version,
        CHECKPOINT_VERSION
    );
    let len = r.u64()? as usize;
    let header: Header = serde_json::from_slice(r.take(len)?)
        .map_err(|e| YganError::Checkpoint(format!("corrupt header: {e}")))?;
    Ok((header, r))
}

/// Element type the checkpoint's arrays were stored with.
pub fn checkpoint_dtype(path: &Path) -> Result<DType> {
    let bytes = read_file(path)?;
    let (header, _) = parse_header(&bytes)?;
    DType::from_code(header.dtype).ok_or_else(|| YganError::Checkpoint(format!("unknown dtype code {}", header.dtype)))
}

/// Reads a checkpoint written by [`save_checkpoint`], converting arrays to
/// `T` if they were stored with the other precision. Nothing is returned
/// unless the whole file validates.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = read_file(path)?;
    let (header, mut r) = parse_header(&bytes)?;
    let mut arrays = read_arrays::<T>(&mut r)?;

    let mut bundle = ModelBundle::<T>::build(&header.model_config, header.architecture, 0)
        .map_err(|e| YganError::Checkpoint(format!("stored model configuration is invalid: {e}")))?;
    for id in bundle.store.ids().collect::<Vec<_>>() {
        let entry = bundle.store.entry(id);
        let value = take_array(&mut arrays, &format!("param/{}", entry.name), entry.value.shape())?;
        *bundle.store.value_mut(id) = value;
    }

    let mut seed = [0u8; 32];
    hex::decode_to_slice(&header.rng.seed, &mut seed)
        .map_err(|e| YganError::Checkpoint(format!("corrupt random state: {e}")))?;
    let word_pos: u128 = header
        .rng
        .word_pos
        .parse()
        .map_err(|e| YganError::Checkpoint(format!("corrupt random state: {e}")))?;
    let mut rng = <ChaCha8Rng as rand::SeedableRng>::from_seed(seed);
    rng.set_stream(header.rng.stream);
    rng.set_word_pos(word_pos);

    let mut ckpt = Checkpoint::assemble(bundle, header.train_config, rng);
    restore_optimizer(&mut ckpt.opt_g, &header.opt_g, "opt_g", &ckpt.bundle, &mut arrays)?;
    match (ckpt.opt_d.as_mut(), &header.opt_d) {
        (Some(opt), Some(meta)) => restore_optimizer(opt, meta, "opt_d", &ckpt.bundle, &mut arrays)?,
        (None, None) => {}
        _ => return Err(YganError::Checkpoint("discriminator optimizer state does not match the architecture".into())),
    }
    ensure!(
        arrays.is_empty(),
        Checkpoint,
        "unexpected arrays in checkpoint: {:?}",
        arrays.keys().collect::<Vec<_>>()
    );
    ckpt.epoch = header.epoch;
    ckpt.step = header.step;
    Ok(ckpt)
}
