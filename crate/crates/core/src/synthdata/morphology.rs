//! Binary morphology with a disk structuring element. Pixels outside the
//! grid count as background for every operation.

use serde::{Deserialize, Serialize};

/// Disk of integer radius `r`: offsets `(dy, dx)` with `dy^2 + dx^2 <= r^2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructuringElement {
    pub radius: usize,
}

impl StructuringElement {
    pub fn disk(radius: usize) -> Self {
        Self { radius }
    }

    pub fn offsets(&self) -> Vec<(isize, isize)> {
        let r = self.radius as isize;
        let mut out = Vec::new();
        for dy in -r..=r {
            for dx in -r..=r {
                if dy * dy + dx * dx <= r * r {
                    out.push((dy, dx));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MorphOp {
    Erode,
    Dilate,
    Open,
    Close,
}

fn at(label: &[u8], h: usize, w: usize, y: isize, x: isize) -> bool {
    y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && label[y as usize * w + x as usize] != 0
}

pub fn erode(label: &[u8], h: usize, w: usize, se: StructuringElement) -> Vec<u8> {
    let offs = se.offsets();
    let mut out = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let keep = offs
                .iter()
                .all(|&(dy, dx)| at(label, h, w, y as isize + dy, x as isize + dx));
            out[y * w + x] = keep as u8;
        }
    }
    out
}

pub fn dilate(label: &[u8], h: usize, w: usize, se: StructuringElement) -> Vec<u8> {
    let offs = se.offsets();
    let mut out = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let hit = offs
                .iter()
                .any(|&(dy, dx)| at(label, h, w, y as isize + dy, x as isize + dx));
            out[y * w + x] = hit as u8;
        }
    }
    out
}

/// Erosion followed by dilation.
pub fn open(label: &[u8], h: usize, w: usize, se: StructuringElement) -> Vec<u8> {
    dilate(&erode(label, h, w, se), h, w, se)
}

/// Dilation followed by erosion.
pub fn close(label: &[u8], h: usize, w: usize, se: StructuringElement) -> Vec<u8> {
    erode(&dilate(label, h, w, se), h, w, se)
}

pub fn morphology(label: &[u8], h: usize, w: usize, op: MorphOp, se: StructuringElement) -> Vec<u8> {
    if se.radius == 0 {
        return label.to_vec();
    }
    match op {
        MorphOp::Erode => erode(label, h, w, se),
        MorphOp::Dilate => dilate(label, h, w, se),
        MorphOp::Open => open(label, h, w, se),
        MorphOp::Close => close(label, h, w, se),
    }
}
