//! Length-prefixed binary frames for inference orders and reports.
//!
//! All integers and floats are little-endian. Each frame is a `u32` body
//! length followed by the body. Timing lists are encoded as
//!
//! ```text
//! u16 count, then per entry: u16 name length, UTF-8 name, u64 nanoseconds
//! ```
//!
//! Order body:
//!
//! ```text
//! "HYOR" | u16 version | u64 order_id | u64 image_id | u64 plot_type_id |
//! i64 created_at_ms | timings | u32 width | u32 height | u32 channels |
//! f32 × width·height·channels (row-major, channels interleaved)
//! ```
//!
//! Report body:
//!
//! ```text
//! "HYRP" | u16 version | u64 order_id | u64 image_id | u64 plot_type_id |
//! u64 model_id | i64 inferred_at_ms | u64 classification |
//! u16 label count | (u64 label_id, f64 weight) × count |
//! u8 has_gradcam | [u32 width | u32 height | f64 × width·height] | timings
//! ```

use std::io::{Read, Write};

use thiserror::Error;

use crate::domain::*;
use crate::image::Image;
use crate::ingest::InferenceOrder;
use crate::predict::{GradCamMap, Report};
use crate::time::Timestamp;

pub const ORDER_MAGIC: &[u8; 4] = b"HYOR";
pub const REPORT_MAGIC: &[u8; 4] = b"HYRP";
pub const VERSION: u16 = 1;
/// Frames larger than this are refused on read.
pub const MAX_FRAME: u32 = 256 << 20;

#[derive(Debug, Error)]
pub enum WireError {
    #[error("frame truncated")]
    Truncated,
    #[error("bad frame magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported frame version {0}")]
    Version(u16),
    #[error("frame of {0} bytes exceeds the limit")]
    Oversize(u32),
    #[error("malformed frame: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

struct Enc(Vec<u8>);

impl Enc {
    fn new(magic: &[u8; 4]) -> Self {
        let mut v = Vec::with_capacity(256);
        v.extend_from_slice(magic);
        v.extend_from_slice(&VERSION.to_le_bytes());
        Enc(v)
    }
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn i64(&mut self, v: i64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32(&mut self, v: f32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn timings(&mut self, t: &StageTimings) {
        self.u16(t.len() as u16);
        for entry in &t.0 {
            self.u16(entry.stage.len() as u16);
            self.0.extend_from_slice(entry.stage.as_bytes());
            self.u64(entry.nanos);
        }
    }
    fn finish(self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.0.len() + 4);
        out.extend_from_slice(&(self.0.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.0);
        out
    }
}

struct Dec<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Dec<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WireError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.b.len()).ok_or(WireError::Truncated)?;
        let s = &self.b[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn arr<const N: usize>(&mut self) -> Result<[u8; N], WireError> {
        Ok(self.take(N)?.try_into().unwrap())
    }
    fn u8(&mut self) -> Result<u8, WireError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, WireError> {
        Ok(u16::from_le_bytes(self.arr()?))
    }
    fn u32(&mut self) -> Result<u32, WireError> {
        Ok(u32::from_le_bytes(self.arr()?))
    }
    fn u64(&mut self) -> Result<u64, WireError> {
        Ok(u64::from_le_bytes(self.arr()?))
    }
    fn i64(&mut self) -> Result<i64, WireError> {
        Ok(i64::from_le_bytes(self.arr()?))
    }
    fn f32(&mut self) -> Result<f32, WireError> {
        Ok(f32::from_le_bytes(self.arr()?))
    }
    fn f64(&mut self) -> Result<f64, WireError> {
        Ok(f64::from_le_bytes(self.arr()?))
    }
    fn header(&mut self, magic: &[u8; 4]) -> Result<(), WireError> {
        let got: [u8; 4] = self.arr()?;
        if &got != magic {
            return Err(WireError::BadMagic(got));
        }
        match self.u16()? {
            VERSION => Ok(()),
            v => Err(WireError::Version(v)),
        }
    }
    fn timings(&mut self) -> Result<StageTimings, WireError> {
        let n = self.u16()?;
        let mut t = StageTimings::new();
        for _ in 0..n {
            let len = self.u16()? as usize;
            let stage = std::str::from_utf8(self.take(len)?)
                .map_err(|_| WireError::Malformed("stage name is not UTF-8".into()))?
                .to_string();
            t.0.push(StageTiming { stage, nanos: self.u64()? });
        }
        Ok(t)
    }
    fn count(&mut self, n: usize, width: usize) -> Result<usize, WireError> {
        n.checked_mul(width)
            .filter(|&b| b <= self.b.len() - self.pos)
            .map(|_| n)
            .ok_or(WireError::Truncated)
    }
    fn done(&self) -> Result<(), WireError> {
        if self.pos == self.b.len() {
            Ok(())
        } else {
            Err(WireError::Malformed(format!("{} trailing bytes", self.b.len() - self.pos)))
        }
    }
}

/// Splits a buffer into (frame body, rest).
fn body(frame: &[u8]) -> Result<(&[u8], &[u8]), WireError> {
    let len: [u8; 4] = frame.get(..4).ok_or(WireError::Truncated)?.try_into().unwrap();
    let len = u32::from_le_bytes(len);
    if len > MAX_FRAME {
        return Err(WireError::Oversize(len));
    }
    let end = 4 + len as usize;
    if frame.len() < end {
        return Err(WireError::Truncated);
    }
    Ok((&frame[4..end], &frame[end..]))
}

pub fn encode_order(order: &InferenceOrder) -> Vec<u8> {
    let mut e = Enc::new(ORDER_MAGIC);
    e.u64(order.order_id.0);
    e.u64(order.image_id.0);
    e.u64(order.plot_type_id.0);
    e.i64(order.created_at.0);
    e.timings(&order.stage_timings);
    e.u32(order.payload.width());
    e.u32(order.payload.height());
    e.u32(order.payload.channels() as u32);
    for &v in order.payload.data() {
        e.f32(v);
    }
    e.finish()
}

/// Decodes one order frame, returning it and the remaining bytes.
pub fn decode_order(frame: &[u8]) -> Result<(InferenceOrder, &[u8]), WireError> {
    let (b, rest) = body(frame)?;
    let mut d = Dec { b, pos: 0 };
    d.header(ORDER_MAGIC)?;
    let order_id = OrderId(d.u64()?);
    let image_id = ImageId(d.u64()?);
    let plot_type_id = PlotTypeId(d.u64()?);
    let created_at = Timestamp(d.i64()?);
    let stage_timings = d.timings()?;
    let (w, h, c) = (d.u32()?, d.u32()?, d.u32()?);
    if c == 0 || c > u8::MAX as u32 {
        return Err(WireError::Malformed(format!("{c} channels")));
    }
    let n = d.count((w as usize).saturating_mul(h as usize).saturating_mul(c as usize), 4)?;
    let data = (0..n).map(|_| d.f32()).collect::<Result<Vec<_>, _>>()?;
    d.done()?;
    let payload = Image::new(w, h, c as u8, data).map_err(|e| WireError::Malformed(e.to_string()))?;
    Ok((InferenceOrder { order_id, image_id, plot_type_id, payload, stage_timings, created_at }, rest))
}

pub fn encode_report(report: &Report) -> Vec<u8> {
    let mut e = Enc::new(REPORT_MAGIC);
    e.u64(report.order_id.0);
    e.u64(report.image_id.0);
    e.u64(report.plot_type_id.0);
    e.u64(report.model_id.0);
    e.i64(report.inferred_at.0);
    e.u64(report.classification.0);
    e.u16(report.label_order.len() as u16);
    for (l, w) in report.label_order.iter().zip(&report.output_weights) {
        e.u64(l.0);
        e.f64(*w);
    }
    match &report.gradcam {
        Some(cam) => {
            e.u8(1);
            e.u32(cam.width as u32);
            e.u32(cam.height as u32);
            cam.values.iter().for_each(|&v| e.f64(v));
        }
        None => e.u8(0),
    }
    e.timings(&report.stage_timings);
    e.finish()
}

pub fn decode_report(frame: &[u8]) -> Result<(Report, &[u8]), WireError> {
    let (b, rest) = body(frame)?;
    let mut d = Dec { b, pos: 0 };
    d.header(REPORT_MAGIC)?;
    let order_id = OrderId(d.u64()?);
    let image_id = ImageId(d.u64()?);
    let plot_type_id = PlotTypeId(d.u64()?);
    let model_id = ModelId(d.u64()?);
    let inferred_at = Timestamp(d.i64()?);
    let classification = LabelId(d.u64()?);
    let n = d.u16()? as usize;
    let mut label_order = Vec::with_capacity(n);
    let mut output_weights = Vec::with_capacity(n);
    for _ in 0..n {
        label_order.push(LabelId(d.u64()?));
        output_weights.push(d.f64()?);
    }
    let gradcam = match d.u8()? {
        0 => None,
        1 => {
            let (w, h) = (d.u32()? as usize, d.u32()? as usize);
            let n = d.count(w.saturating_mul(h), 8)?;
            let values = (0..n).map(|_| d.f64()).collect::<Result<Vec<_>, _>>()?;
            Some(GradCamMap { width: w, height: h, values })
        }
        f => return Err(WireError::Malformed(format!("gradcam flag {f}"))),
    };
    let stage_timings = d.timings()?;
    d.done()?;
    Ok((
        Report {
            order_id,
            image_id,
            plot_type_id,
            model_id,
            label_order,
            output_weights,
            classification,
            gradcam,
            stage_timings,
            inferred_at,
        },
        rest,
    ))
}

fn read_frame(r: &mut impl Read) -> Result<Option<Vec<u8>>, WireError> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let n = u32::from_le_bytes(len);
    if n > MAX_FRAME {
        return Err(WireError::Oversize(n));
    }
    let mut frame = vec![0u8; 4 + n as usize];
    frame[..4].copy_from_slice(&len);
    r.read_exact(&mut frame[4..]).map_err(|_| WireError::Truncated)?;
    Ok(Some(frame))
}

/// Reads the next order from a stream; `None` at a clean end of stream.
pub fn read_order(r: &mut impl Read) -> Result<Option<InferenceOrder>, WireError> {
    read_frame(r)?.map(|f| decode_order(&f).map(|(o, _)| o)).transpose()
}

pub fn read_report(r: &mut impl Read) -> Result<Option<Report>, WireError> {
    read_frame(r)?.map(|f| decode_report(&f).map(|(o, _)| o)).transpose()
}

pub fn write_order(w: &mut impl Write, order: &InferenceOrder) -> Result<(), WireError> {
    w.write_all(&encode_order(order))?;
    Ok(())
}

pub fn write_report(w: &mut impl Write, report: &Report) -> Result<(), WireError> {
    w.write_all(&encode_report(report))?;
    Ok(())
}
