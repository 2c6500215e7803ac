//! Binary frames exchanged with a remote score server.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "SGSC"
//! 4       2     version (1)
//! 6       2     kind (1 = request, 2 = response)
//! 8       4     t (u32)
//! 12      4     height (u32)
//! 16      4     width (u32)
//! 20      4     batch (u32)
//! 24      4     prompt length P (u32), then P bytes UTF-8
//! ..      4     negative prompt length Q (u32), then Q bytes UTF-8
//! ..            float32 tensors, each batch-major B×H×W×C
//! ```
//!
//! A request carries `x_t` (C = 3), `d_t` (C = 1) and the pose map (C = 3).
//! A response carries rgb `eps_cond`, `eps_uncond`, `eps_neg` (C = 3) followed
//! by depth `eps_cond`, `eps_uncond`, `eps_neg` (C = 1). Response prompts may be empty.

use super::provider::{BranchEps, ScoreRequest, ScoreResponse};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SGSC";
pub const VERSION: u16 = 1;
pub const KIND_REQUEST: u16 = 1;
pub const KIND_RESPONSE: u16 = 2;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameHeader {
    pub kind: u16,
    pub t: u32,
    pub height: u32,
    pub width: u32,
    pub batch: u32,
    pub prompt: String,
    pub negative_prompt: String,
}

/// Decoded frame: header plus the raw float32 tensors in wire order.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub header: FrameHeader,
    pub tensors: Vec<Vec<f32>>,
}

pub fn tensor_channels(kind: u16) -> &'static [usize] {
    if kind == KIND_REQUEST {
        &[3, 1, 3]
    } else {
        &[3, 3, 3, 1, 1, 1]
    }
}

pub fn encode(frame: &Frame) -> Vec<u8> {
    let h = &frame.header;
    let floats: usize = frame.tensors.iter().map(Vec::len).sum();
    let mut out = Vec::with_capacity(32 + h.prompt.len() + h.negative_prompt.len() + 4 * floats);
    out.extend_from_slice(MAGIC);
    out.extend(VERSION.to_le_bytes());
    out.extend(h.kind.to_le_bytes());
    for v in [h.t, h.height, h.width, h.batch] {
        out.extend(v.to_le_bytes());
    }
    for s in [&h.prompt, &h.negative_prompt] {
        out.extend((s.len() as u32).to_le_bytes());
        out.extend(s.as_bytes());
    }
    for t in &frame.tensors {
        for v in t {
            out.extend(v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Protocol(format!("frame truncated while reading {what}")))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)? as usize;
        String::from_utf8(self.take(n, what)?.to_vec()).map_err(|_| Error::Protocol(format!("{what} is not UTF-8")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Frame> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Protocol("bad magic".into()));
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(Error::Protocol(format!("unsupported version {version}")));
    }
    let kind = r.u16("kind")?;
    if kind != KIND_REQUEST && kind != KIND_RESPONSE {
        return Err(Error::Protocol(format!("unknown frame kind {kind}")));
    }
    let header = FrameHeader {
        kind,
        t: r.u32("t")?,
        height: r.u32("height")?,
        width: r.u32("width")?,
        batch: r.u32("batch")?,
        prompt: r.string("prompt")?,
        negative_prompt: r.string("negative_prompt")?,
    };
    let px = (header.batch as usize)
        .checked_mul(header.height as usize)
        .and_then(|n| n.checked_mul(header.width as usize))
        .ok_or_else(|| Error::Protocol("tensor size overflows".into()))?;
    let mut tensors = Vec::new();
    for (i, &c) in tensor_channels(kind).iter().enumerate() {
        let raw = r.take(px * c * 4, &format!("tensor {i}"))?;
        tensors.push(raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect());
    }
    if r.at != bytes.len() {
        return Err(Error::Protocol(format!("{} trailing bytes after frame", bytes.len() - r.at)));
    }
    Ok(Frame { header, tensors })
}

fn to_f32(v: &[f64]) -> impl Iterator<Item = f32> + '_ {
    v.iter().map(|&x| x as f32)
}

/// Packs a batch of requests sharing one timestep and prompt pair.
pub fn request_frame(requests: &[ScoreRequest]) -> Result<Frame> {
    let first = requests.first().ok_or_else(|| Error::Parameter("empty score batch".into()))?;
    if requests.iter().any(|r| {
        r.t != first.t || r.width != first.width || r.height != first.height || r.prompt != first.prompt
    }) {
        return Err(Error::Parameter("a score batch must share t, resolution and prompt".into()));
    }
    let cat = |f: fn(&ScoreRequest) -> &Vec<f64>| requests.iter().flat_map(|r| to_f32(f(r))).collect::<Vec<f32>>();
    Ok(Frame {
        header: FrameHeader {
            kind: KIND_REQUEST,
            t: first.t as u32,
            height: first.height as u32,
            width: first.width as u32,
            batch: requests.len() as u32,
            prompt: first.prompt.clone(),
            negative_prompt: first.negative_prompt.clone(),
        },
        tensors: vec![cat(|r| &r.x_t), cat(|r| &r.d_t), cat(|r| &r.pose_map)],
    })
}

pub fn response_frame(request: &FrameHeader, responses: &[ScoreResponse]) -> Frame {
    let cat = |f: &dyn Fn(&ScoreResponse) -> &Vec<f64>| responses.iter().flat_map(|r| to_f32(f(r))).collect();
    Frame {
        header: FrameHeader {
            kind: KIND_RESPONSE,
            prompt: String::new(),
            negative_prompt: String::new(),
            batch: responses.len() as u32,
            ..request.clone()
        },
        tensors: vec![
            cat(&|r| &r.rgb.cond),
            cat(&|r| &r.rgb.uncond),
            cat(&|r| &r.rgb.neg),
            cat(&|r| &r.depth.cond),
            cat(&|r| &r.depth.uncond),
            cat(&|r| &r.depth.neg),
        ],
    }
}

/// Checks a response header against its request and splits it per view.
pub fn split_response(frame: &Frame, request: &FrameHeader) -> Result<Vec<ScoreResponse>> {
    let h = &frame.header;
    if h.kind != KIND_RESPONSE {
        return Err(Error::Protocol(format!("expected a response frame, got kind {}", h.kind)));
    }
    for (field, got, want) in [
        ("t", h.t, request.t),
        ("height", h.height, request.height),
        ("width", h.width, request.width),
        ("batch", h.batch, request.batch),
    ] {
        if got != want {
            return Err(Error::Protocol(format!("response {field} = {got}, expected {want}")));
        }
    }
    let px = (h.height * h.width) as usize;
    let part = |tensor: usize, c: usize, b: usize| -> Vec<f64> {
        frame.tensors[tensor][b * px * c..(b + 1) * px * c].iter().map(|&x| x as f64).collect()
    };
    Ok((0..h.batch as usize)
        .map(|b| ScoreResponse {
            rgb: BranchEps { cond: part(0, 3, b), uncond: part(1, 3, b), neg: part(2, 3, b) },
            depth: BranchEps { cond: part(3, 1, b), uncond: part(4, 1, b), neg: part(5, 1, b) },
        })
        .collect())
}
