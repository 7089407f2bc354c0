//! Model files.
//!
//! Layout (little-endian): magic `CSCN`, version u32, architecture tag u8
//! (1 = CSRNet, 2 = ASRNet), block size u32, measurements u32, matrix seed
//! u64 (zero for ASRNet), then one record per layer in fixed order:
//! kind u8, four u32 dims, weights, then biases, as f32 row-major.
//!
//! Record kinds: 1 = FC with bias, 2 = FC without bias, 3 = conv. FC dims
//! are `[out, in, 1, 1]`, conv dims `[out, in, k, k]`.
//!
//! CSRNet order: initial FC, deep stack (3 convs), residual stack (3 convs).
//! ASRNet order: sampling FC, initial FC, residual stack (3 convs).

use std::path::Path;

use crate::error::{Error, FormatError, Result};
use crate::fileio::{put_f32s, read_file, write_atomic, ByteReader};
use crate::models::stack::{ConvLayer, ConvStackParams};
use crate::models::{Architecture, AsrNetParams, CsrNetParams, FcLayer, Model};
use crate::scalar::Scalar;
use crate::sensing::SensingConfig;
use crate::tensor::Tensor;

pub const MODEL_MAGIC: &[u8; 4] = b"CSCN";
pub const MODEL_VERSION: u32 = 1;

const KIND_FC_BIAS: u8 = 1;
const KIND_FC: u8 = 2;
const KIND_CONV: u8 = 3;

const WHAT: &str = "model file";

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_tensor<T: Scalar>(out: &mut Vec<u8>, t: &Tensor<T>) {
    put_f32s(out, t.data().iter().map(|v| v.to_f64_lossy() as f32));
}

fn put_fc<T: Scalar>(out: &mut Vec<u8>, fc: &FcLayer<T>) {
    out.push(if fc.bias.is_some() { KIND_FC_BIAS } else { KIND_FC });
    for d in [fc.out_dim(), fc.in_dim(), 1, 1] {
        put_u32(out, d);
    }
    put_tensor(out, &fc.weights);
    if let Some(b) = &fc.bias {
        put_tensor(out, b);
    }
}

fn put_stack<T: Scalar>(out: &mut Vec<u8>, stack: &ConvStackParams<T>) {
    for layer in &stack.layers {
        out.push(KIND_CONV);
        for &d in layer.kernels.shape() {
            put_u32(out, d);
        }
        put_tensor(out, &layer.kernels);
        put_tensor(out, &layer.bias);
    }
}

/// Serializes a model; parameters are stored as f32.
pub fn model_to_bytes<T: Scalar>(model: &Model<T>) -> Vec<u8> {
    let config = model.sensing();
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    out.push(model.architecture().tag());
    put_u32(&mut out, config.block_size);
    put_u32(&mut out, config.measurements);
    match model {
        Model::CsrNet(p) => {
            out.extend_from_slice(&p.matrix_seed.to_le_bytes());
            put_fc(&mut out, &p.initial_fc);
            put_stack(&mut out, &p.deep_stack);
            put_stack(&mut out, &p.residual_stack);
        }
        Model::AsrNet(p) => {
            out.extend_from_slice(&0u64.to_le_bytes());
            put_fc(&mut out, &p.sampling_fc);
            put_fc(&mut out, &p.initial_fc);
            put_stack(&mut out, &p.residual_stack);
        }
    }
    out
}

struct Record<T> {
    kind: u8,
    dims: [usize; 4],
    weights: Vec<T>,
    bias: Option<Vec<T>>,
}

fn read_record<T: Scalar>(r: &mut ByteReader<'_>) -> Result<Record<T>> {
    let kind = r.u8()?;
    let mut dims = [0usize; 4];
    for d in &mut dims {
        *d = r.u32()? as usize;
    }
    if !matches!(kind, KIND_FC_BIAS | KIND_FC | KIND_CONV) || dims.contains(&0) {
        return Err(FormatError::Malformed {
            what: WHAT,
            detail: format!("layer record kind {kind} with dims {dims:?}"),
        }
        .into());
    }
    let count = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
    let count = count.ok_or_else(|| FormatError::Malformed {
        what: WHAT,
        detail: format!("layer dims {dims:?} overflow"),
    })?;
    let convert = |v: Vec<f32>| v.into_iter().map(|x| T::of(f64::from(x))).collect::<Vec<T>>();
    let weights = convert(r.f32s(count)?);
    let bias = if kind == KIND_FC { None } else { Some(convert(r.f32s(dims[0])?)) };
    Ok(Record {
        kind,
        dims,
        weights,
        bias,
    })
}

fn fc_from<T: Scalar>(rec: Record<T>) -> Result<FcLayer<T>> {
    if rec.kind == KIND_CONV || rec.dims[2] != 1 || rec.dims[3] != 1 {
        return Err(FormatError::Malformed {
            what: WHAT,
            detail: format!("expected a fully-connected record, found kind {} {:?}", rec.kind, rec.dims),
        }
        .into());
    }
    let [out, inp, _, _] = rec.dims;
    Ok(FcLayer {
        weights: Tensor::from_vec(&[out, inp], rec.weights)?,
        bias: rec.bias.map(|b| Tensor::from_vec(&[out], b)).transpose()?,
    })
}

fn stack_from<T: Scalar>(r: &mut ByteReader<'_>) -> Result<ConvStackParams<T>> {
    let mut layer = || -> Result<ConvLayer<T>> {
        let rec = read_record::<T>(r)?;
        if rec.kind != KIND_CONV {
            return Err(FormatError::Malformed {
                what: WHAT,
                detail: format!("expected a conv record, found kind {}", rec.kind),
            }
            .into());
        }
        Ok(ConvLayer {
            kernels: Tensor::from_vec(&rec.dims, rec.weights)?,
            bias: Tensor::from_vec(&[rec.dims[0]], rec.bias.unwrap_or_default())?,
        })
    };
    let first = layer()?;
    let second = layer()?;
    let third = layer()?;
    Ok(ConvStackParams {
        layers: [first, second, third],
    })
}

/// Decodes a model file, optionally insisting on an architecture.
pub fn model_from_bytes<T: Scalar>(bytes: &[u8], expect: Option<Architecture>) -> Result<Model<T>> {
    let mut r = ByteReader::new(bytes, WHAT);
    r.magic(MODEL_MAGIC)?;
    let version = r.u32()?;
    if version != MODEL_VERSION {
        return Err(FormatError::UnsupportedVersion { what: "model", version }.into());
    }
    let tag = r.u8()?;
    let arch = Architecture::from_tag(tag).ok_or_else(|| FormatError::Malformed {
        what: WHAT,
        detail: format!("unknown architecture tag {tag}"),
    })?;
    if let Some(expected) = expect.filter(|&e| e != arch) {
        return Err(FormatError::Architecture {
            expected: expected.to_string(),
            found: arch.to_string(),
        }
        .into());
    }
    let block_size = r.u32()? as usize;
    let measurements = r.u32()? as usize;
    let matrix_seed = r.u64()?;
    let config = SensingConfig::from_measurements(block_size, measurements).map_err(|e| match e {
        Error::Config(detail) => Error::Format(FormatError::Malformed { what: WHAT, detail }),
        other => other,
    })?;

    let model = match arch {
        Architecture::CsrNet => {
            let initial_fc = fc_from(read_record(&mut r)?)?;
            let deep = stack_from(&mut r)?;
            let residual = stack_from(&mut r)?;
            r.finish()?;
            Model::CsrNet(CsrNetParams::from_parts(config, matrix_seed, initial_fc, deep, residual)?)
        }
        Architecture::AsrNet => {
            let sampling_fc = fc_from(read_record(&mut r)?)?;
            let initial_fc = fc_from(read_record(&mut r)?)?;
            let residual = stack_from(&mut r)?;
            r.finish()?;
            Model::AsrNet(AsrNetParams::from_parts(config, sampling_fc, initial_fc, residual)?)
        }
    };
    Ok(model)
}

pub fn save_model<T: Scalar>(model: &Model<T>, path: &Path) -> Result<()> {
    write_atomic(path, &model_to_bytes(model))
}

pub fn load_model<T: Scalar>(path: &Path) -> Result<Model<T>> {
    model_from_bytes(&read_file(path)?, None)
}

impl<T: Scalar> Model<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        model_to_bytes(self)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        model_from_bytes(bytes, None)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_model(self, path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        load_model(path)
    }
}

impl<T: Scalar> CsrNetParams<T> {
    pub fn load(path: &Path) -> Result<Self> {
        match model_from_bytes(&read_file(path)?, Some(Architecture::CsrNet))? {
            Model::CsrNet(p) => Ok(p),
            Model::AsrNet(_) => unreachable!("architecture checked while decoding"),
        }
    }
}

impl<T: Scalar> AsrNetParams<T> {
    pub fn load(path: &Path) -> Result<Self> {
        match model_from_bytes(&read_file(path)?, Some(Architecture::AsrNet))? {
            Model::AsrNet(p) => Ok(p),
            Model::CsrNet(_) => unreachable!("architecture checked while decoding"),
        }
    }
}
