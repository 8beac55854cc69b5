//! Attention windows over a HEALPix mesh.
//!
//! Plain windows are the pixels of a coarser level: window `k` holds the
//! level-`n` descendants of coarse pixel `k` at level `n - w`. Shifted
//! windows are built by splitting every coarse pixel into its four
//! quadrants (level `n - w + 1`) and merging each quadrant with the three
//! neighbours lying outward from it:
//!
//! | quadrant | merged with  |
//! |----------|--------------|
//! | S        | SW, S, SE    |
//! | N        | NW, N, NE    |
//! | E        | NE, E, SE    |
//! | W        | NW, W, SW    |
//!
//! Away from the face corners all four rules name the same 2x2 block of
//! quadrants, centred on a corner of the original windows. Where a
//! diagonal neighbour does not exist the block keeps the quadrants that do.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::healpix::{Direction, MeshLevel, PixelId, Quadrant};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum WindowKind {
    Plain,
    Shifted,
    /// A single window spanning the whole mesh (used on level 0, where no
    /// coarser level exists to define windows).
    Global,
}

/// One quadrant of a window: a pixel at level `n - w + 1` and its position
/// inside the plain window it came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct WindowQuadrant {
    pub subpixel: PixelId,
    pub label: Quadrant,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WindowPartition {
    level: MeshLevel,
    window_param: u8,
    kind: WindowKind,
    windows: Vec<Vec<u32>>,
    quadrants: Vec<Vec<WindowQuadrant>>,
    window_of: Vec<u32>,
}

fn check_range(level: MeshLevel, w: u8) -> Result<()> {
    if w < 1 || w > level.n() {
        return Err(Error::WindowOutOfRange {
            level: level.n(),
            window: w,
        });
    }
    Ok(())
}

fn outward_directions(label: Quadrant) -> [Direction; 3] {
    use Direction::*;
    match label {
        Quadrant::S => [SW, S, SE],
        Quadrant::N => [NW, N, NE],
        Quadrant::E => [NE, E, SE],
        Quadrant::W => [NW, W, SW],
    }
}

/// Plain windows: descendants of each level `n - w` pixel.
pub fn build_windows(level: MeshLevel, w: u8) -> Result<WindowPartition> {
    check_range(level, w)?;
    let coarse = MeshLevel::new(level.n() - w);
    let span = 1u64 << (2 * w);
    let windows = coarse
        .pixels()
        .map(|c| {
            let start = c.index() * span;
            (start..start + span).map(|i| i as u32).collect()
        })
        .collect();
    let quadrants = coarse
        .pixels()
        .map(|c| {
            c.children()
                .into_iter()
                .map(|q| WindowQuadrant {
                    subpixel: q,
                    label: q.quadrant(),
                })
                .collect()
        })
        .collect();
    let window_of = (0..level.num_pixels()).map(|i| (i >> (2 * w)) as u32).collect();
    Ok(WindowPartition {
        level,
        window_param: w,
        kind: WindowKind::Plain,
        windows,
        quadrants,
        window_of,
    })
}

/// Shifted windows from the split-merge construction described in the module docs.
pub fn build_shifted_windows(level: MeshLevel, w: u8) -> Result<WindowPartition> {
    check_range(level, w)?;
    let quad_level = MeshLevel::new(level.n() - w + 1);
    let num_quads = quad_level.num_pixels() as usize;

    // Each quadrant proposes a group; identical proposals collapse into one window.
    let mut owner: Vec<Option<usize>> = vec![None; num_quads];
    let mut groups: Vec<Vec<PixelId>> = Vec::new();
    let mut by_members: HashMap<Vec<u64>, usize> = HashMap::new();
    for q in quad_level.pixels() {
        let mut members = vec![q];
        members.extend(outward_directions(q.quadrant()).iter().filter_map(|&d| q.neighbor(d)));
        let mut key: Vec<u64> = members.iter().map(|p| p.index()).collect();
        key.sort_unstable();
        key.dedup();
        if by_members.contains_key(&key) {
            continue;
        }
        let id = groups.len();
        let mut claimed = Vec::new();
        for &m in &key {
            // Earlier anchor (smaller sub-pixel index) keeps the quadrant;
            // the structure check below rejects any resulting malformed window.
            if owner[m as usize].is_none() {
                owner[m as usize] = Some(id);
                claimed.push(PixelId::new(quad_level, m));
            }
        }
        by_members.insert(key, id);
        groups.push(claimed);
    }
    let groups: Vec<Vec<PixelId>> = groups.into_iter().filter(|g| !g.is_empty()).collect();

    let shift = 2 * (w - 1);
    let mut windows = Vec::with_capacity(groups.len());
    let mut quadrants = Vec::with_capacity(groups.len());
    let mut window_of = vec![u32::MAX; level.num_pixels() as usize];
    for (k, group) in groups.iter().enumerate() {
        let mut pixels = Vec::with_capacity(group.len() << shift);
        for q in group {
            let start = q.index() << shift;
            for i in start..start + (1u64 << shift) {
                if window_of[i as usize] != u32::MAX {
                    return Err(Error::PartitionViolated(format!("pixel {i} in two windows")));
                }
                window_of[i as usize] = k as u32;
                pixels.push(i as u32);
            }
        }
        pixels.sort_unstable();
        windows.push(pixels);
        quadrants.push(
            group
                .iter()
                .map(|&q| WindowQuadrant {
                    subpixel: q,
                    label: q.quadrant(),
                })
                .collect(),
        );
    }
    if let Some(i) = window_of.iter().position(|&k| k == u32::MAX) {
        return Err(Error::PartitionViolated(format!("pixel {i} not covered")));
    }

    let partition = WindowPartition {
        level,
        window_param: w,
        kind: WindowKind::Shifted,
        windows,
        quadrants,
        window_of,
    };
    partition.check_shifted_structure()?;
    Ok(partition)
}

impl WindowPartition {
    /// One window containing every pixel of `level`.
    pub fn global(level: MeshLevel) -> Self {
        let n = level.num_pixels() as u32;
        WindowPartition {
            level,
            window_param: level.n(),
            kind: WindowKind::Global,
            windows: vec![(0..n).collect()],
            quadrants: vec![Vec::new()],
            window_of: vec![0; n as usize],
        }
    }

    pub fn level(&self) -> MeshLevel {
        self.level
    }

    pub fn window_param(&self) -> u8 {
        self.window_param
    }

    pub fn kind(&self) -> WindowKind {
        self.kind
    }

    pub fn windows(&self) -> &[Vec<u32>] {
        &self.windows
    }

    pub fn num_windows(&self) -> usize {
        self.windows.len()
    }

    pub fn num_pixels(&self) -> usize {
        self.window_of.len()
    }

    pub fn quadrants(&self, window: usize) -> &[WindowQuadrant] {
        &self.quadrants[window]
    }

    pub fn max_window_size(&self) -> usize {
        self.windows.iter().map(Vec::len).max().unwrap_or(0)
    }

    /// Number of windows built from only three quadrants.
    pub fn three_quadrant_windows(&self) -> usize {
        self.quadrants.iter().filter(|q| q.len() == 3).count()
    }

    /// Index of the window containing `p`.
    pub fn window_of(&self, p: PixelId) -> usize {
        assert_eq!(p.level(), self.level, "pixel level does not match partition");
        self.window_of[p.index() as usize] as usize
    }

    /// Quadrant label of the window quadrant containing pixel `index`.
    pub fn quadrant_label(&self, index: u64) -> Option<Quadrant> {
        if self.kind == WindowKind::Global {
            return None;
        }
        let up = self.window_param - 1;
        let q = PixelId::new(self.level, index).ancestor(up).ok()?;
        Some(q.quadrant())
    }

    /// Windows padded to a common width with a validity mask.
    pub fn padded(&self) -> PaddedWindows {
        let width = self.max_window_size();
        let mut members = Vec::with_capacity(width * self.windows.len());
        let mut mask = Vec::with_capacity(width * self.windows.len());
        for win in &self.windows {
            for slot in 0..width {
                match win.get(slot) {
                    Some(&p) => {
                        members.push(p);
                        mask.push(true);
                    }
                    None => {
                        members.push(0);
                        mask.push(false);
                    }
                }
            }
        }
        PaddedWindows {
            width,
            num_nodes: self.num_pixels(),
            members,
            mask,
        }
    }

    fn check_shifted_structure(&self) -> Result<()> {
        let w = self.window_param;
        let unit = 1usize << (2 * (w - 1));
        for (k, quads) in self.quadrants.iter().enumerate() {
            if quads.len() != 3 && quads.len() != 4 {
                return Err(Error::PartitionViolated(format!(
                    "window {k} has {} quadrants",
                    quads.len()
                )));
            }
            if self.windows[k].len() != quads.len() * unit {
                return Err(Error::PartitionViolated(format!("window {k} has wrong size")));
            }
            let mut origins: Vec<u64> = quads.iter().map(|q| q.subpixel.index() >> 2).collect();
            origins.sort_unstable();
            origins.dedup();
            if origins.len() != quads.len() {
                return Err(Error::PartitionViolated(format!(
                    "window {k} draws two quadrants from one plain window"
                )));
            }
        }
        Ok(())
    }
}

/// Windows laid out as a dense `num_windows x width` table. Slots past a
/// window's length are masked out.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PaddedWindows {
    pub width: usize,
    pub num_nodes: usize,
    pub members: Vec<u32>,
    pub mask: Vec<bool>,
}

impl PaddedWindows {
    pub fn num_windows(&self) -> usize {
        self.members.len().checked_div(self.width).unwrap_or(0)
    }

    /// Masks out a slot; masked members neither attend nor are attended to.
    pub fn mask_out(&mut self, window: usize, slot: usize) {
        self.mask[window * self.width + slot] = false;
    }

    /// Member ids and mask of one window.
    pub fn window(&self, k: usize) -> (&[u32], &[bool]) {
        let r = k * self.width..(k + 1) * self.width;
        (&self.members[r.clone()], &self.mask[r])
    }
}
