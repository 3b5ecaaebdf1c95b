//! Per-pixel depth with confidence, and its `NR2D` file format.
//!
//! Layout, all little-endian:
//!
//! | bytes       | content                         |
//! |-------------|---------------------------------|
//! | 4           | magic `NR2D`                    |
//! | 4           | version `u32` = 1               |
//! | 4           | height `u32`                    |
//! | 4           | width `u32`                     |
//! | 4·H·W       | depth `f32`, row-major          |
//! | 4·H·W       | probability `f32`, row-major    |
//!
//! Ground-truth maps store their validity (1 or 0) as the probability.

use std::path::Path;

use crate::error::{MvsError, Result};

const MAGIC: &[u8; 4] = b"NR2D";
const VERSION: u32 = 1;
const HEADER: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub height: usize,
    pub width: usize,
    pub depth: Vec<f64>,
    pub prob: Vec<f64>,
}

impl DepthMap {
    pub fn new(height: usize, width: usize, depth: Vec<f64>, prob: Vec<f64>) -> Result<Self> {
        if depth.len() != height * width || prob.len() != height * width {
            return Err(MvsError::Invalid(format!(
                "depth map {height}x{width} with {} depths and {} probabilities",
                depth.len(),
                prob.len()
            )));
        }
        Ok(Self {
            height,
            width,
            depth,
            prob,
        })
    }

    pub fn len(&self) -> usize {
        self.depth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.depth.is_empty()
    }

    pub fn depth_at(&self, y: usize, x: usize) -> f64 {
        self.depth[y * self.width + x]
    }

    pub fn prob_at(&self, y: usize, x: usize) -> f64 {
        self.prob[y * self.width + x]
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER + 8 * self.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        for &v in self.depth.iter().chain(&self.prob) {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER || &bytes[..4] != MAGIC {
            return Err(MvsError::Format("not an NR2D depth map".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
        let version = word(4);
        if version != VERSION {
            return Err(MvsError::Format(format!("unsupported NR2D version {version}")));
        }
        let (h, w) = (word(8) as usize, word(12) as usize);
        let n = h
            .checked_mul(w)
            .ok_or_else(|| MvsError::Format("NR2D extent overflow".into()))?;
        if bytes.len() != HEADER + 8 * n {
            return Err(MvsError::Format(format!(
                "NR2D {h}x{w} expects {} bytes, found {}",
                HEADER + 8 * n,
                bytes.len()
            )));
        }
        let vals: Vec<f64> = bytes[HEADER..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        let (depth, prob) = vals.split_at(n);
        Self::new(h, w, depth.to_vec(), prob.to_vec())
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.encode()).map_err(|e| MvsError::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path.as_ref()).map_err(|e| MvsError::io(&path, e))?;
        Self::decode(&bytes).map_err(|e| match e {
            MvsError::Format(m) => MvsError::Format(format!("{}: {m}", path.as_ref().display())),
            other => other,
        })
    }
}
