//! Bipartite graphs between the lat-lon grid and HEALPix meshes.
//!
//! | kind     | sources     | targets     | edges per target |
//! |----------|-------------|-------------|------------------|
//! | g2m      | grid nodes  | mesh pixels | pixel contents   |
//! | down     | level n     | level n-1   | 4 children       |
//! | up       | level n-1   | level n     | 4 nearest        |
//! | m2g      | mesh pixels | grid nodes  | 4 nearest        |
//!
//! Edge lists are sorted by `(target, source)`. Distances are great-circle
//! (haversine) between pixel centres and grid nodes; ties go to the smaller
//! source index.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::GridSpec;
use crate::healpix::{haversine, locate, MeshLevel, PixelId, SphericalPoint};

pub const EDGE_EMBEDDING_DIM: usize = 32;
const GRAPH_MAGIC: &[u8; 4] = b"HVGR";
const GRAPH_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GraphKind {
    GridToMesh,
    MeshToGrid,
    Downsample,
    Upsample,
}

impl FromStr for GraphKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "g2m" => Ok(GraphKind::GridToMesh),
            "m2g" => Ok(GraphKind::MeshToGrid),
            "down" => Ok(GraphKind::Downsample),
            "up" => Ok(GraphKind::Upsample),
            other => Err(Error::InvalidValue(format!(
                "unknown graph kind `{other}` (expected g2m, m2g, down or up)"
            ))),
        }
    }
}

impl fmt::Display for GraphKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GraphKind::GridToMesh => "g2m",
            GraphKind::MeshToGrid => "m2g",
            GraphKind::Downsample => "down",
            GraphKind::Upsample => "up",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BipartiteGraph {
    source_count: usize,
    target_count: usize,
    sources: Vec<u32>,
    targets: Vec<u32>,
    edge_embedding_dim: usize,
}

impl BipartiteGraph {
    /// Builds a graph from `(source, target)` pairs, validating ranges and
    /// rejecting duplicates. Edges are re-sorted by `(target, source)`.
    pub fn from_edges(source_count: usize, target_count: usize, mut edges: Vec<(u32, u32)>) -> Result<Self> {
        for &(s, t) in &edges {
            if s as usize >= source_count {
                return Err(Error::IndexOutOfRange {
                    index: s as usize,
                    bound: source_count,
                    context: "graph source",
                });
            }
            if t as usize >= target_count {
                return Err(Error::IndexOutOfRange {
                    index: t as usize,
                    bound: target_count,
                    context: "graph target",
                });
            }
        }
        edges.sort_unstable_by_key(|&(s, t)| (t, s));
        if edges.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidValue("duplicate edge".into()));
        }
        let (sources, targets) = edges.into_iter().unzip();
        Ok(BipartiteGraph {
            source_count,
            target_count,
            sources,
            targets,
            edge_embedding_dim: EDGE_EMBEDDING_DIM,
        })
    }

    pub fn source_count(&self) -> usize {
        self.source_count
    }

    pub fn target_count(&self) -> usize {
        self.target_count
    }

    pub fn num_edges(&self) -> usize {
        self.sources.len()
    }

    pub fn sources(&self) -> &[u32] {
        &self.sources
    }

    pub fn targets(&self) -> &[u32] {
        &self.targets
    }

    pub fn edge_embedding_dim(&self) -> usize {
        self.edge_embedding_dim
    }

    pub fn edges(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        self.sources.iter().copied().zip(self.targets.iter().copied())
    }

    pub fn in_degrees(&self) -> Vec<usize> {
        let mut d = vec![0; self.target_count];
        for &t in &self.targets {
            d[t as usize] += 1;
        }
        d
    }

    pub fn out_degrees(&self) -> Vec<usize> {
        let mut d = vec![0; self.source_count];
        for &s in &self.sources {
            d[s as usize] += 1;
        }
        d
    }

    /// Edge index of the single outgoing edge of every source. Fails unless
    /// every source has out-degree exactly one.
    pub fn edge_of_source(&self) -> Result<Vec<u32>> {
        let mut out = vec![u32::MAX; self.source_count];
        for (e, &s) in self.sources.iter().enumerate() {
            if out[s as usize] != u32::MAX {
                return Err(Error::InvalidValue(format!("source {s} has several edges")));
            }
            out[s as usize] = e as u32;
        }
        if let Some(s) = out.iter().position(|&e| e == u32::MAX) {
            return Err(Error::InvalidValue(format!("source {s} has no edge")));
        }
        Ok(out)
    }

    /// Writes the binary export: magic `HVGR`, u32 version, u64 source,
    /// target and edge counts, then little-endian u32 `(source, target)` pairs.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let mut buf = Vec::with_capacity(28 + 8 * self.num_edges());
        buf.extend_from_slice(GRAPH_MAGIC);
        buf.extend_from_slice(&GRAPH_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.source_count as u64).to_le_bytes());
        buf.extend_from_slice(&(self.target_count as u64).to_le_bytes());
        buf.extend_from_slice(&(self.num_edges() as u64).to_le_bytes());
        for (s, t) in self.edges() {
            buf.extend_from_slice(&s.to_le_bytes());
            buf.extend_from_slice(&t.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R, origin: &Path) -> Result<Self> {
        let bad = |message: &str| Error::Format {
            path: origin.to_path_buf(),
            message: message.to_string(),
        };
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        if bytes.len() < 32 || &bytes[..4] != GRAPH_MAGIC {
            return Err(bad("missing HVGR header"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        if u32_at(4) != GRAPH_VERSION {
            return Err(bad("unsupported graph version"));
        }
        let (sc, tc, ec) = (u64_at(8) as usize, u64_at(16) as usize, u64_at(24) as usize);
        if bytes.len() != 32 + 8 * ec {
            return Err(bad("edge payload length does not match header"));
        }
        let edges = (0..ec).map(|e| (u32_at(32 + 8 * e), u32_at(36 + 8 * e))).collect();
        let g = BipartiteGraph::from_edges(sc, tc, edges)?;
        Ok(g)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(file))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        BipartiteGraph::read_from(std::io::BufReader::new(file), path)
    }
}

/// Centres of every pixel at `level`.
pub fn pixel_centers(level: MeshLevel) -> Vec<SphericalPoint> {
    level.pixels().map(PixelId::center).collect()
}

/// Grid node -> containing mesh pixel. One edge per grid node.
pub fn build_grid2mesh(grid: &GridSpec, level: MeshLevel) -> BipartiteGraph {
    let edges: Vec<(u32, u32)> = (0..grid.num_nodes())
        .into_par_iter()
        .map(|g| (g as u32, locate(grid.node_point(g), level).index() as u32))
        .collect();
    BipartiteGraph::from_edges(grid.num_nodes(), level.num_pixels() as usize, edges)
        .expect("grid-to-mesh edges are in range and unique")
}

/// The four nearest mesh pixels -> each grid node.
pub fn build_mesh2grid(grid: &GridSpec, level: MeshLevel) -> BipartiteGraph {
    let index = NearestIndex::new(&pixel_centers(level));
    let queries = grid.node_points();
    let edges = nearest_edges(&index, &queries, 4);
    BipartiteGraph::from_edges(level.num_pixels() as usize, grid.num_nodes(), edges)
        .expect("mesh-to-grid edges are in range and unique")
}

/// Each fine pixel at `level` -> its parent at `level - 1`.
pub fn build_downsample(level: MeshLevel) -> Result<BipartiteGraph> {
    let coarse = level.coarser().ok_or(Error::LevelTooLow("downsample"))?;
    let edges = (0..level.num_pixels()).map(|p| (p as u32, (p >> 2) as u32)).collect();
    BipartiteGraph::from_edges(level.num_pixels() as usize, coarse.num_pixels() as usize, edges)
}

/// The four nearest pixels at `level - 1` -> each pixel at `level`.
pub fn build_upsample(level: MeshLevel) -> Result<BipartiteGraph> {
    let coarse = level.coarser().ok_or(Error::LevelTooLow("upsample"))?;
    let index = NearestIndex::new(&pixel_centers(coarse));
    let queries = pixel_centers(level);
    let edges = nearest_edges(&index, &queries, 4);
    BipartiteGraph::from_edges(coarse.num_pixels() as usize, level.num_pixels() as usize, edges)
}

pub fn build_graph(kind: GraphKind, grid: &GridSpec, level: MeshLevel) -> Result<BipartiteGraph> {
    match kind {
        GraphKind::GridToMesh => Ok(build_grid2mesh(grid, level)),
        GraphKind::MeshToGrid => Ok(build_mesh2grid(grid, level)),
        GraphKind::Downsample => build_downsample(level),
        GraphKind::Upsample => build_upsample(level),
    }
}

fn nearest_edges(index: &NearestIndex, queries: &[SphericalPoint], k: usize) -> Vec<(u32, u32)> {
    queries
        .par_iter()
        .enumerate()
        .flat_map_iter(|(t, q)| index.nearest(*q, k).into_iter().map(move |(_, s)| (s, t as u32)))
        .collect()
}

/// Brute-force `k` nearest points by `(distance, index)`.
pub fn brute_force_nearest(points: &[SphericalPoint], query: SphericalPoint, k: usize) -> Vec<(f64, u32)> {
    let (qlat, qlon) = (query.lat().to_radians(), query.lon().to_radians());
    let mut all: Vec<(f64, u32)> = points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            (
                haversine(qlat, qlon, p.lat().to_radians(), p.lon().to_radians()),
                i as u32,
            )
        })
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    all.truncate(k);
    all
}

/// Bucketed lookup of nearest points on the sphere. Points are binned into
/// latitude bands, each split into longitude bins of roughly equal width.
/// A query searches every bin that can hold a point within radius `r`,
/// doubling `r` until at least `k` points fall inside it.
pub struct NearestIndex {
    lat: Vec<f64>,
    lon: Vec<f64>,
    band_height: f64,
    bands: Vec<Band>,
    initial_radius: f64,
}

struct Band {
    bins: Vec<Vec<u32>>,
}

impl NearestIndex {
    pub fn new(points: &[SphericalPoint]) -> Self {
        let n = points.len().max(1);
        let spacing = (4.0 * std::f64::consts::PI / n as f64).sqrt();
        let band_count = ((std::f64::consts::PI / spacing).ceil() as usize).max(1);
        let band_height = std::f64::consts::PI / band_count as f64;
        let lat: Vec<f64> = points.iter().map(|p| p.lat().to_radians()).collect();
        let lon: Vec<f64> = points.iter().map(|p| p.lon().to_radians()).collect();
        let mut bands: Vec<Band> = (0..band_count)
            .map(|b| {
                let lo = -std::f64::consts::FRAC_PI_2 + b as f64 * band_height;
                let widest = lo.cos().max((lo + band_height).cos());
                let bins = ((std::f64::consts::TAU * widest / band_height).ceil() as usize).max(1);
                Band {
                    bins: vec![Vec::new(); bins],
                }
            })
            .collect();
        let mut index = NearestIndex {
            lat,
            lon,
            band_height,
            bands: Vec::new(),
            initial_radius: 1.5 * spacing,
        };
        for i in 0..points.len() {
            let b = index.band_of(index.lat[i]);
            let bins = bands[b].bins.len();
            let j = lon_bin(index.lon[i], bins);
            bands[b].bins[j].push(i as u32);
        }
        index.bands = bands;
        index
    }

    fn band_of(&self, lat: f64) -> usize {
        let b = ((lat + std::f64::consts::FRAC_PI_2) / self.band_height).floor() as isize;
        b.clamp(0, self.bands_len() as isize - 1) as usize
    }

    fn bands_len(&self) -> usize {
        (std::f64::consts::PI / self.band_height).round() as usize
    }

    /// The `k` nearest points as `(distance, index)`, sorted.
    pub fn nearest(&self, query: SphericalPoint, k: usize) -> Vec<(f64, u32)> {
        let k = k.min(self.lat.len());
        let (qlat, qlon) = (query.lat().to_radians(), query.lon().to_radians());
        let mut radius = self.initial_radius;
        let mut found: Vec<(f64, u32)> = Vec::new();
        loop {
            found.clear();
            let full = radius >= std::f64::consts::PI;
            let slack = 1e-9;
            let lat_lo = qlat - radius - slack;
            let lat_hi = qlat + radius + slack;
            let b_lo = self.band_of(lat_lo.max(-std::f64::consts::FRAC_PI_2));
            let b_hi = self.band_of(lat_hi.min(std::f64::consts::FRAC_PI_2));
            let all_lons = full || qlat.abs() + radius + slack >= std::f64::consts::FRAC_PI_2;
            let half_width = if all_lons {
                std::f64::consts::PI
            } else {
                (radius.sin() / qlat.cos()).min(1.0).asin() + slack
            };
            for band in &self.bands[b_lo..=b_hi] {
                let bins = band.bins.len();
                let mut visit = |j: usize| {
                    for &i in &band.bins[j] {
                        let d = haversine(qlat, qlon, self.lat[i as usize], self.lon[i as usize]);
                        if full || d <= radius {
                            found.push((d, i));
                        }
                    }
                };
                if all_lons || 2.0 * half_width >= std::f64::consts::TAU {
                    (0..bins).for_each(&mut visit);
                } else {
                    let width = std::f64::consts::TAU / bins as f64;
                    let start = ((qlon - half_width) / width).floor() as i64;
                    let end = ((qlon + half_width) / width).floor() as i64;
                    let span = (end - start + 1).min(bins as i64);
                    for s in 0..span {
                        visit((start + s).rem_euclid(bins as i64) as usize);
                    }
                }
            }
            if found.len() >= k || full {
                break;
            }
            radius *= 2.0;
        }
        found.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        found.truncate(k);
        found
    }
}

fn lon_bin(lon: f64, bins: usize) -> usize {
    let j = (lon / std::f64::consts::TAU * bins as f64).floor() as isize;
    j.clamp(0, bins as isize - 1) as usize
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn downsample_counts() {
        let g = build_downsample(MeshLevel::new(2)).unwrap();
        assert_eq!(g.num_edges(), 192);
        assert!(g.in_degrees().iter().all(|&d| d == 4));
        assert!(build_downsample(MeshLevel::new(0)).is_err());
        assert!(build_upsample(MeshLevel::new(0)).is_err());
    }

    #[test]
    fn edges_are_sorted_by_target_then_source() {
        let g = BipartiteGraph::from_edges(3, 2, vec![(2, 1), (0, 1), (1, 0)]).unwrap();
        assert_eq!(g.edges().collect::<Vec<_>>(), vec![(1, 0), (0, 1), (2, 1)]);
        assert!(BipartiteGraph::from_edges(3, 2, vec![(0, 0), (0, 0)]).is_err());
        assert!(BipartiteGraph::from_edges(3, 2, vec![(3, 0)]).is_err());
    }

    #[test]
    fn graph_kind_parses() {
        for s in ["g2m", "m2g", "down", "up"] {
            assert_eq!(s.parse::<GraphKind>().unwrap().to_string(), s);
        }
        assert!("x".parse::<GraphKind>().is_err());
    }

    #[test]
    fn grid_node_on_pixel_centre_picks_that_pixel() {
        let level = MeshLevel::new(2);
        let centers = pixel_centers(level);
        let index = NearestIndex::new(&centers);
        for (i, c) in centers.iter().enumerate() {
            let near = index.nearest(*c, 4);
            assert_eq!(near[0].1 as usize, i);
            assert_eq!(near[0].0, 0.0);
        }
    }
}
