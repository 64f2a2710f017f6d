//! Binary trajectory and ensemble files.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic      8 bytes  "TAGDYNTR"
//! version    u32
//! dim        u32
//! side       f64
//! boundary   u32      0 free, 1 periodic
//! system     u32      0 gsd, 1 gsdad, 2 env, 3 coup, 0xFFFF_FFFF ensemble
//! dt         f64
//! stride     u64
//! seed       u64
//! potential  u32 length + UTF-8 descriptor
//! frames     repeated: t f64, n u64, [xi: dim f64 if coup], coords: n*dim f64
//! footer     frame count u64, FNV-1a 64 checksum of every preceding byte
//! ```

use std::fs;
use std::hash::Hasher;
use std::path::Path;

use fnv::FnvHasher;
use tagdyn_core::dynamics::{Frame, System, Trajectory};
use tagdyn_core::geometry::{BoundaryMode, Configuration, SimBox};
use tagdyn_core::potentials::PairPotential;

use crate::error::CliError;

pub const MAGIC: &[u8; 8] = b"TAGDYNTR";
pub const VERSION: u32 = 1;
const ENSEMBLE_TAG: u32 = u32::MAX;

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryHeader {
    pub dim: usize,
    pub side: f64,
    pub boundary: BoundaryMode,
    /// `None` marks an ensemble file.
    pub system: Option<System>,
    pub dt: f64,
    pub stride: u64,
    pub seed: u64,
    pub potential: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryFile {
    pub header: TrajectoryHeader,
    pub frames: Vec<Frame>,
}

impl TrajectoryFile {
    pub fn from_trajectory(traj: &Trajectory) -> Self {
        Self {
            header: TrajectoryHeader {
                dim: traj.sim_box.dim(),
                side: traj.sim_box.side(),
                boundary: traj.sim_box.mode(),
                system: Some(traj.system),
                dt: traj.params.dt,
                stride: traj.stride as u64,
                seed: traj.params.seed,
                potential: traj.potential.to_string(),
            },
            frames: traj.frames.clone(),
        }
    }

    /// An ensemble stored as frames with `t` equal to the sample index.
    pub fn from_ensemble(samples: &[Configuration], potential: &PairPotential, seed: u64) -> Result<Self, CliError> {
        let b = samples.first().map(|s| *s.sim_box()).ok_or_else(|| CliError::Format("empty ensemble".into()))?;
        Ok(Self {
            header: TrajectoryHeader {
                dim: b.dim(),
                side: b.side(),
                boundary: b.mode(),
                system: None,
                dt: 0.0,
                stride: 1,
                seed,
                potential: potential.to_string(),
            },
            frames: samples
                .iter()
                .enumerate()
                .map(|(k, s)| Frame { t: k as f64, xi: None, coords: s.coords().to_vec() })
                .collect(),
        })
    }

    pub fn sim_box(&self) -> Result<SimBox, CliError> {
        Ok(SimBox::new(self.header.dim, self.header.side, self.header.boundary)?)
    }

    /// The frames as validated configurations.
    pub fn configurations(&self) -> Result<Vec<Configuration>, CliError> {
        let b = self.sim_box()?;
        self.frames.iter().map(|f| Ok(Configuration::from_flat(b, f.coords.clone())?)).collect()
    }

    pub fn potential(&self) -> Result<PairPotential, CliError> {
        Ok(PairPotential::from_descriptor(&self.header.potential)?)
    }
}

fn system_tag(s: Option<System>) -> u32 {
    match s {
        Some(System::Gsd) => 0,
        Some(System::Gsdad) => 1,
        Some(System::Env) => 2,
        Some(System::Coup) => 3,
        None => ENSEMBLE_TAG,
    }
}

pub fn encode(file: &TrajectoryFile) -> Result<Vec<u8>, CliError> {
    let h = &file.header;
    let coupled = h.system == Some(System::Coup);
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(h.dim as u32).to_le_bytes());
    out.extend_from_slice(&h.side.to_le_bytes());
    out.extend_from_slice(&(h.boundary as u32).to_le_bytes());
    out.extend_from_slice(&system_tag(h.system).to_le_bytes());
    out.extend_from_slice(&h.dt.to_le_bytes());
    out.extend_from_slice(&h.stride.to_le_bytes());
    out.extend_from_slice(&h.seed.to_le_bytes());
    out.extend_from_slice(&(h.potential.len() as u32).to_le_bytes());
    out.extend_from_slice(h.potential.as_bytes());
    for (k, f) in file.frames.iter().enumerate() {
        if h.dim == 0 || f.coords.len() % h.dim != 0 {
            return Err(CliError::Format(format!("frame {k}: coordinate count is not a multiple of d")));
        }
        out.extend_from_slice(&f.t.to_le_bytes());
        out.extend_from_slice(&((f.coords.len() / h.dim) as u64).to_le_bytes());
        match (&f.xi, coupled) {
            (Some(xi), true) if xi.len() == h.dim => xi.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            (None, false) => {}
            _ => return Err(CliError::Format(format!("frame {k}: tagged position does not match the system"))),
        }
        f.coords.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    }
    out.extend_from_slice(&(file.frames.len() as u64).to_le_bytes());
    let sum = checksum(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    Ok(out)
}

pub fn checksum(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CliError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| CliError::Format("truncated file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CliError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CliError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64, CliError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, CliError> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| CliError::Format("frame too large".into()))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}

pub fn decode(bytes: &[u8]) -> Result<TrajectoryFile, CliError> {
    if bytes.len() < MAGIC.len() + 4 + 16 || &bytes[..8] != MAGIC {
        return Err(CliError::Format("not a trajectory file".into()));
    }
    let body = &bytes[..bytes.len() - 8];
    let stored = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().expect("8 bytes"));
    let computed = checksum(body);
    if stored != computed {
        return Err(CliError::Checksum { stored, computed });
    }
    let mut r = Reader { buf: body, pos: 8 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(CliError::Version { found: version, expected: VERSION });
    }
    let dim = r.u32()? as usize;
    let side = r.f64()?;
    let boundary = match r.u32()? {
        0 => BoundaryMode::Free,
        1 => BoundaryMode::Periodic,
        other => return Err(CliError::Format(format!("unknown boundary tag {other}"))),
    };
    let system = match r.u32()? {
        0 => Some(System::Gsd),
        1 => Some(System::Gsdad),
        2 => Some(System::Env),
        3 => Some(System::Coup),
        ENSEMBLE_TAG => None,
        other => return Err(CliError::Format(format!("unknown system tag {other}"))),
    };
    if dim == 0 {
        return Err(CliError::Format("dimension must be positive".into()));
    }
    let dt = r.f64()?;
    let stride = r.u64()?;
    let seed = r.u64()?;
    let len = r.u32()? as usize;
    let potential = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| CliError::Format("potential descriptor is not UTF-8".into()))?;
    let footer_at = body.len() - 8;
    let mut frames = Vec::new();
    while r.pos < footer_at {
        let t = r.f64()?;
        let n = usize::try_from(r.u64()?).map_err(|_| CliError::Format("particle count overflows".into()))?;
        let xi = if system == Some(System::Coup) { Some(r.f64s(dim)?) } else { None };
        let coords = r.f64s(n.checked_mul(dim).ok_or_else(|| CliError::Format("frame too large".into()))?)?;
        frames.push(Frame { t, xi, coords });
    }
    if r.pos != footer_at {
        return Err(CliError::Format("frame data overruns the footer".into()));
    }
    let count = r.u64()?;
    if count != frames.len() as u64 {
        return Err(CliError::Format(format!("footer lists {count} frames, file holds {}", frames.len())));
    }
    Ok(TrajectoryFile { header: TrajectoryHeader { dim, side, boundary, system, dt, stride, seed, potential }, frames })
}

pub fn write_trajectory(path: &Path, file: &TrajectoryFile) -> Result<(), CliError> {
    let bytes = encode(file)?;
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

pub fn read_trajectory(path: &Path) -> Result<TrajectoryFile, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    decode(&bytes)
}
