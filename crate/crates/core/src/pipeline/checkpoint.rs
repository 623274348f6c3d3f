//! Binary checkpoints.
//!
//! Layout: 8 magic bytes, a little-endian `u32` format version, a `u64` header
//! length, the JSON header, then the raw little-endian payload of every tensor
//! in parameter order. Header entries record `{name, dtype, shape, offset}`
//! with offsets relative to the start of the payload.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcore::Tensor;
use crate::lora::{AdapterSet, LoraAdapter};
use crate::model::{Model, ModelDims, ParamStore};
use crate::rng::SeedStream;
use crate::scalar::Real;

pub const MAGIC: &[u8; 8] = b"PXALCKPT";
pub const FORMAT_VERSION: u32 = 1;

/// Where a checkpoint came from.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub stage: String,
    pub recipe: Option<String>,
    pub config_hash: String,
    pub seed: u64,
    pub steps: usize,
}

/// Position of the training generator when the checkpoint was written.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(stream: &SeedStream, rng: &crate::rng::Rng) -> Self {
        Self {
            seed: stream.seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> crate::rng::Rng {
        use rand::SeedableRng;
        let mut rng = crate::rng::Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    dims: ModelDims,
    provenance: Provenance,
    rng_state: Option<RngState>,
    lora: Vec<LoraAdapter>,
    entries: Vec<TensorEntry>,
    payload_len: u64,
}

/// A model plus the metadata needed to resume or audit it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T: Real> {
    pub model: Model<T>,
    pub provenance: Provenance,
    pub rng_state: Option<RngState>,
}

impl<T: Real> Checkpoint<T> {
    pub fn new(model: Model<T>, provenance: Provenance) -> Self {
        Self {
            model,
            provenance,
            rng_state: None,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut entries = Vec::with_capacity(self.model.params.len());
        for (name, p) in self.model.params.iter() {
            entries.push(TensorEntry {
                name: name.to_string(),
                dtype: T::DTYPE.to_string(),
                shape: p.tensor.shape().to_vec(),
                offset: payload.len() as u64,
                trainable: p.trainable,
            });
            for &x in p.tensor.data() {
                x.write_le(&mut payload);
            }
        }
        let header = Header {
            format_version: FORMAT_VERSION,
            dims: self.model.dims,
            provenance: self.provenance.clone(),
            rng_state: self.rng_state,
            lora: self.model.adapters.iter().cloned().collect(),
            entries,
            payload_len: payload.len() as u64,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    /// Parses and fully validates a checkpoint. With `expected`, the stored
    /// dimensions must match exactly. Nothing is returned unless every check
    /// passes.
    pub fn from_bytes(bytes: &[u8], expected: Option<&ModelDims>) -> Result<Self> {
        let bad = |msg: String| Error::Checkpoint(msg);
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("bad magic bytes".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = &bytes[20..];
        if header_len > body.len() {
            return Err(bad("truncated header".into()));
        }
        let header: Header =
            serde_json::from_slice(&body[..header_len]).map_err(|e| bad(format!("malformed header: {e}")))?;
        let payload = &body[header_len..];
        if payload.len() as u64 != header.payload_len {
            return Err(bad(format!(
                "payload is {} bytes, header declares {}",
                payload.len(),
                header.payload_len
            )));
        }
        header
            .dims
            .validate()
            .map_err(|e| bad(format!("stored dims invalid: {e}")))?;
        if let Some(want) = expected {
            if *want != header.dims {
                return Err(bad(format!(
                    "dims mismatch: checkpoint {:?}, expected {:?}",
                    header.dims, want
                )));
            }
        }

        let mut adapters = AdapterSet::default();
        for a in header.lora {
            adapters.insert(a)?;
        }
        let template = Model::<T>::init(header.dims, &SeedStream::new(0))?;
        let mut want_shapes: Vec<(String, Vec<usize>)> = template
            .params
            .iter()
            .map(|(n, p)| (n.to_string(), p.tensor.shape().to_vec()))
            .collect();
        for a in adapters.iter() {
            want_shapes.push((a.a_name(), vec![a.rank, a.d_in]));
            want_shapes.push((a.b_name(), vec![a.d_out, a.rank]));
        }
        if want_shapes.len() != header.entries.len() {
            return Err(bad(format!(
                "{} tensors stored, {} expected for these dims",
                header.entries.len(),
                want_shapes.len()
            )));
        }

        let mut params = ParamStore::new();
        for entry in &header.entries {
            let want = want_shapes
                .iter()
                .find(|(n, _)| *n == entry.name)
                .ok_or_else(|| bad(format!("unexpected tensor `{}`", entry.name)))?;
            if want.1 != entry.shape {
                return Err(bad(format!(
                    "`{}` has shape {:?}, expected {:?}",
                    entry.name, entry.shape, want.1
                )));
            }
            if entry.dtype != T::DTYPE {
                return Err(bad(format!(
                    "`{}` is {}, loading as {}",
                    entry.name,
                    entry.dtype,
                    T::DTYPE
                )));
            }
            let n: usize = entry.shape.iter().product();
            let start = usize::try_from(entry.offset).map_err(|_| bad("offset overflow".into()))?;
            let end = start
                .checked_add(n * T::WIDTH)
                .filter(|&e| e <= payload.len())
                .ok_or_else(|| bad(format!("`{}` extends past the payload", entry.name)))?;
            let data: Vec<T> = payload[start..end].chunks_exact(T::WIDTH).map(T::read_le).collect();
            params
                .insert(
                    entry.name.clone(),
                    Tensor::new(entry.shape.clone(), data)?,
                    entry.trainable,
                )
                .map_err(|e| bad(e.to_string()))?;
        }
        Ok(Self {
            model: Model::from_parts(header.dims, params, adapters),
            provenance: header.provenance,
            rng_state: header.rng_state,
        })
    }

    /// Writes via a temporary sibling and a rename, so readers never see a
    /// half-written file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("ckpt.tmp");
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, expected: Option<&ModelDims>) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, expected)
    }
}

/// Short stable hash of any serializable value, used to tag provenance.
pub fn config_hash<S: Serialize>(value: &S) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    let h = bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    });
    Ok(format!("{h:016x}"))
}
