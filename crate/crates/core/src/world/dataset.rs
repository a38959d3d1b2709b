//! Little-endian demonstration file format.
//!
//! Layout: magic `AVL1`, version `u32`, demo count `u32`; per demo the scene
//! seed `u64`, difficulty `u8`, horizon `u16`, step count `u16`, then per step
//! the observation (grid `f32`s, instruction `u16`s, state `f32`s) followed by
//! the `H × 2` chunk as `f32`, and finally the success target as two `f32`.
//! Scenes are regenerated from their seed on read.

use std::fs;
use std::path::Path;

use super::expert::{ActionChunk, Demonstration};
use super::render::Observation;
use super::scene::{generate_scene, Difficulty};
use super::{FEATURES, GRID, INSTRUCTION_LEN};
use crate::error::{Error, Result};

pub const DATASET_MAGIC: &[u8; 4] = b"AVL1";
pub const DATASET_VERSION: u32 = 1;

pub fn encode_dataset(demos: &[Demonstration]) -> Result<Vec<u8>> {
    if demos.is_empty() {
        return Err(Error::usage("refusing to write an empty dataset"));
    }
    let mut out = Vec::new();
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.extend_from_slice(&len_u32(demos.len(), "demo count")?.to_le_bytes());
    for demo in demos {
        let horizon = demo.horizon();
        if demo.observations.len() != demo.action_chunks.len() {
            return Err(Error::usage("demonstration has mismatched observation and chunk counts"));
        }
        if demo.action_chunks.iter().any(|c| c.horizon() != horizon) {
            return Err(Error::usage("demonstration mixes chunk horizons"));
        }
        out.extend_from_slice(&demo.scene.seed.to_le_bytes());
        out.push(demo.scene.difficulty.code());
        out.extend_from_slice(&len_u16(horizon, "horizon")?.to_le_bytes());
        out.extend_from_slice(&len_u16(demo.len(), "step count")?.to_le_bytes());
        for (obs, chunk) in demo.observations.iter().zip(&demo.action_chunks) {
            if obs.visual_grid.len() != GRID * GRID * FEATURES {
                return Err(Error::usage("observation grid has the wrong size"));
            }
            for v in &obs.visual_grid {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
            for t in &obs.instruction_tokens {
                out.extend_from_slice(&t.to_le_bytes());
            }
            for v in &obs.robot_state {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
            for v in chunk.flat() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        for v in demo.success_target {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

fn len_u32(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::usage(format!("{what} {n} does not fit the format")))
}

fn len_u16(n: usize, what: &str) -> Result<u16> {
    u16::try_from(n).map_err(|_| Error::usage(format!("{what} {n} does not fit the format")))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.pos as u64,
                format!("truncated while reading {what}"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let raw = self.take(4 * n, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect())
    }
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Vec<Demonstration>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != DATASET_MAGIC {
        return Err(Error::format(0, "bad magic, expected AVL1"));
    }
    let version = r.u32("version")?;
    if version != DATASET_VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let count = r.u32("demo count")?;
    let mut demos = Vec::with_capacity(count.min(1 << 16) as usize);
    for _ in 0..count {
        let start = r.pos as u64;
        let seed = r.u64("scene seed")?;
        let code = r.u8("difficulty")?;
        let difficulty = Difficulty::from_code(code)
            .ok_or_else(|| Error::format(start + 8, format!("unknown difficulty code {code}")))?;
        let horizon = r.u16("horizon")? as usize;
        let steps = r.u16("step count")? as usize;
        let scene = generate_scene(seed, difficulty)
            .map_err(|e| Error::format(start, format!("scene seed does not regenerate: {e}")))?;
        let mut observations = Vec::with_capacity(steps);
        let mut action_chunks = Vec::with_capacity(steps);
        for _ in 0..steps {
            let visual_grid = r.f32s(GRID * GRID * FEATURES, "visual grid")?;
            let mut instruction_tokens = [0u16; INSTRUCTION_LEN];
            for t in instruction_tokens.iter_mut() {
                *t = r.u16("instruction token")?;
            }
            let s = r.f32s(3, "robot state")?;
            observations.push(Observation {
                visual_grid,
                instruction_tokens,
                robot_state: [s[0], s[1], s[2]],
            });
            action_chunks.push(ActionChunk::from_flat(&r.f32s(horizon * 2, "action chunk")?));
        }
        let t = r.f32s(2, "success target")?;
        demos.push(Demonstration {
            scene,
            observations,
            action_chunks,
            success_target: [t[0], t[1]],
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::format(r.pos as u64, "trailing bytes after last demo"));
    }
    Ok(demos)
}

pub fn write_dataset(demos: &[Demonstration], path: &Path) -> Result<()> {
    let bytes = encode_dataset(demos)?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<Demonstration>> {
    decode_dataset(&fs::read(path)?)
}
