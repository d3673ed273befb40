//! `HYDM` model artifacts.
//!
//! ```text
//! offset  size        field
//! 0       4           magic "HYDM"
//! 4       2           format version (u16, currently 1)
//! 6       8           plot_type_id (u64)
//! 14      4           label count L (u32)
//! 18      8·L         label_order (u64 each)
//! ..      4           kernel count K (u32)
//! ..      4           input channels C (u32)
//! ..      8·K·C·9     kernels, [k][c][dy][dx]
//! ..      8·K         convolution bias
//! ..      8·L·K       linear weights, [label][k]
//! ..      8·L         linear bias
//! ```
//!
//! Integers and `f64` parameters are little-endian. Trailing bytes are an
//! error.

use crate::domain::{LabelId, PlotTypeId};

use super::classifier::{BackendError, ReferenceClassifier, KERNEL};

pub const MAGIC: &[u8; 4] = b"HYDM";
pub const VERSION: u16 = 1;

pub fn encode(model: &ReferenceClassifier) -> Vec<u8> {
    let mut out = Vec::with_capacity(32 + 8 * (model.label_order.len() + model.param_count()));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&model.plot_type_id.0.to_le_bytes());
    out.extend_from_slice(&(model.label_order.len() as u32).to_le_bytes());
    for l in &model.label_order {
        out.extend_from_slice(&l.0.to_le_bytes());
    }
    out.extend_from_slice(&(model.num_kernels as u32).to_le_bytes());
    out.extend_from_slice(&(model.channels as u32).to_le_bytes());
    for v in model.params() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], BackendError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| BackendError::Artifact(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, BackendError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, BackendError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, BackendError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, BackendError> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| BackendError::Artifact("size overflow".into()))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

pub fn decode(bytes: &[u8]) -> Result<ReferenceClassifier, BackendError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(BackendError::Artifact("bad magic".into()));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(BackendError::Artifact(format!("unsupported version {version}")));
    }
    let plot_type_id = PlotTypeId(r.u64()?);
    let labels = r.u32()? as usize;
    if labels == 0 {
        return Err(BackendError::Artifact("no labels".into()));
    }
    let label_order = (0..labels).map(|_| r.u64().map(LabelId)).collect::<Result<Vec<_>, _>>()?;
    let num_kernels = r.u32()? as usize;
    let channels = r.u32()? as usize;
    if num_kernels == 0 || channels == 0 {
        return Err(BackendError::Artifact("empty layer".into()));
    }
    let kernels = r.f64s(num_kernels * channels * KERNEL * KERNEL)?;
    let conv_bias = r.f64s(num_kernels)?;
    let linear = r.f64s(labels * num_kernels)?;
    let linear_bias = r.f64s(labels)?;
    if r.pos != bytes.len() {
        return Err(BackendError::Artifact(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(ReferenceClassifier {
        plot_type_id,
        label_order,
        channels,
        num_kernels,
        kernels,
        conv_bias,
        linear,
        linear_bias,
    })
}
