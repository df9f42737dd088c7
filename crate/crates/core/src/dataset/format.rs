//! Little-endian episode file codec.
//!
//! ```text
//! magic "XVWM" | u16 version | u8 num_views | num_views x u8 view code
//! u16 height | u16 width | u8 channels | u16 fps*100 | u32 T
//! T x (f32 dx, f32 dy, f32 dphi)
//! T x (f32 x, f32 y, f32 yaw)
//! frames: view-major, then time-major, raw RGB rows
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{Episode, EpisodeMeta};
use crate::error::{Result, XvwmError};
use crate::sim::{Action, AgentState, Frame, ViewId};

pub const EPISODE_MAGIC: &[u8; 4] = b"XVWM";
pub const EPISODE_VERSION: u16 = 1;

pub fn encode_episode(ep: &Episode) -> Vec<u8> {
    let n = ep.size;
    let t = ep.len();
    let mut out = Vec::with_capacity(32 + t * 24 + ep.views.len() * t * n * n * 3);
    out.extend_from_slice(EPISODE_MAGIC);
    out.extend_from_slice(&EPISODE_VERSION.to_le_bytes());
    out.push(ep.views.len() as u8);
    out.extend(ep.views.iter().map(|v| v.code()));
    out.extend_from_slice(&(n as u16).to_le_bytes());
    out.extend_from_slice(&(n as u16).to_le_bytes());
    out.push(Frame::CHANNELS as u8);
    out.extend_from_slice(&ep.fps_x100.to_le_bytes());
    out.extend_from_slice(&(t as u32).to_le_bytes());
    for a in &ep.actions {
        for v in [a.dx, a.dy, a.dphi] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    for p in &ep.poses {
        for v in [p.x, p.y, p.yaw] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    for seq in &ep.frames {
        for f in seq {
            out.extend_from_slice(f.pixels());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(XvwmError::format(
                field,
                format!(
                    "truncated: need {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.buf.len()
                ),
            )),
        }
    }

    fn u8(&mut self, field: &'static str) -> Result<u8> {
        Ok(self.take(1, field)?[0])
    }

    fn u16(&mut self, field: &'static str) -> Result<u16> {
        let b = self.take(2, field)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, field: &'static str) -> Result<u32> {
        let b = self.take(4, field)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32s(&mut self, n: usize, field: &'static str) -> Result<Vec<f64>> {
        let b = self.take(n * 4, field)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect())
    }
}

pub fn decode_episode(bytes: &[u8], meta: EpisodeMeta) -> Result<Episode> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != EPISODE_MAGIC {
        return Err(XvwmError::format("magic", "not an episode file"));
    }
    let version = r.u16("version")?;
    if version != EPISODE_VERSION {
        return Err(XvwmError::format(
            "version",
            format!("unsupported version {version}, expected {EPISODE_VERSION}"),
        ));
    }
    let nv = r.u8("num_views")? as usize;
    if nv == 0 || nv > ViewId::ALL.len() {
        return Err(XvwmError::format("num_views", format!("{nv} views")));
    }
    let mut views = Vec::with_capacity(nv);
    for &c in r.take(nv, "view_codes")? {
        let v = ViewId::from_code(c)
            .ok_or_else(|| XvwmError::format("view_codes", format!("unknown view code {c}")))?;
        if views.contains(&v) {
            return Err(XvwmError::format("view_codes", format!("duplicate view {v}")));
        }
        views.push(v);
    }
    let h = r.u16("height")? as usize;
    let w = r.u16("width")? as usize;
    if w != h || w == 0 {
        return Err(XvwmError::format("width", format!("frames must be square, got {w}x{h}")));
    }
    let c = r.u8("channels")?;
    if c as usize != Frame::CHANNELS {
        return Err(XvwmError::format("channels", format!("expected 3, got {c}")));
    }
    let fps_x100 = r.u16("fps")?;
    if fps_x100 == 0 {
        return Err(XvwmError::format("fps", "zero frame rate"));
    }
    let t = r.u32("frame_count")? as usize;

    // Check the whole payload size before allocating anything.
    let frame_bytes = (w as u64) * (h as u64) * 3;
    let need = (t as u64) * 24 + (nv as u64) * (t as u64) * frame_bytes;
    let have = (bytes.len() - r.pos) as u64;
    if need > have {
        return Err(XvwmError::format(
            "frame_count",
            format!("header declares {t} frames needing {need} payload bytes, file has {have}"),
        ));
    }
    if need < have {
        return Err(XvwmError::format("trailing", format!("{} unexpected bytes", have - need)));
    }

    let a = r.f32s(t * 3, "actions")?;
    let actions = a.chunks_exact(3).map(|c| Action::new(c[0], c[1], c[2])).collect();
    let p = r.f32s(t * 3, "poses")?;
    let poses = p
        .chunks_exact(3)
        .map(|c| AgentState {
            x: c[0],
            y: c[1],
            yaw: c[2],
        })
        .collect();
    let mut frames = Vec::with_capacity(nv);
    for _ in 0..nv {
        let mut seq = Vec::with_capacity(t);
        for _ in 0..t {
            let px = r.take(frame_bytes as usize, "frames")?;
            seq.push(Frame::new(w, h, px.to_vec())?);
        }
        frames.push(seq);
    }
    Ok(Episode {
        id: meta.id,
        world_seed: meta.world_seed,
        sky_id: meta.sky_id,
        fps_x100,
        size: w,
        views,
        actions,
        poses,
        frames,
    })
}

pub fn write_episode(ep: &Episode, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_episode(ep))?;
    Ok(())
}

pub fn read_episode(path: &Path, meta: EpisodeMeta) -> Result<Episode> {
    decode_episode(&fs::read(path)?, meta)
}
