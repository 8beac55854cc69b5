//! HEALPix pixelation of the sphere in the nested scheme.
//!
//! A pixel at refinement level `n` is addressed by its nested index
//! `face * 4^n + interleave(x, y)`, where `(x, y)` are the pixel's integer
//! coordinates inside one of the 12 base faces. Within a face, `x` grows
//! toward the north-east edge and `y` toward the north-west edge, so the
//! pixel's north corner sits at `(x + 1, y + 1)`.
//!
//! Angles are degrees at the public surface and radians internally.

use std::f64::consts::{FRAC_PI_2, PI, TAU};
use std::fmt;

use crate::error::{Error, Result};

/// Largest refinement level supported. `12 * 4^13` still fits a `u32`.
pub const MAX_LEVEL: u8 = 13;

/// Ring index (in units of face size) of the southern corner of each base face.
const FACE_RING: [i64; 12] = [2, 2, 2, 2, 3, 3, 3, 3, 4, 4, 4, 4];
/// Longitude index (in units of pi/4) of each base face centre.
const FACE_PHI: [i64; 12] = [1, 3, 5, 7, 0, 2, 4, 6, 1, 3, 5, 7];

/// Face reached when stepping off a face, indexed by `4 + dx + 3 * dy`
/// (`dx`, `dy` in `{-1, 0, 1}` describe which face edge was crossed).
const NEIGHBOR_FACE: [[i8; 12]; 9] = [
    [8, 9, 10, 11, -1, -1, -1, -1, 10, 11, 8, 9],
    [5, 6, 7, 4, 8, 9, 10, 11, 9, 10, 11, 8],
    [-1, -1, -1, -1, 5, 6, 7, 4, -1, -1, -1, -1],
    [4, 5, 6, 7, 11, 8, 9, 10, 11, 8, 9, 10],
    [0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11],
    [1, 2, 3, 0, 0, 1, 2, 3, 5, 6, 7, 4],
    [-1, -1, -1, -1, 7, 4, 5, 6, -1, -1, -1, -1],
    [3, 0, 1, 2, 3, 0, 1, 2, 4, 5, 6, 7],
    [2, 3, 0, 1, -1, -1, -1, -1, 0, 1, 2, 3],
];

/// Coordinate transform applied after crossing into a neighbouring face,
/// indexed like `NEIGHBOR_FACE` and by face row (north, equator, south).
/// Bit 1 flips x, bit 2 flips y, bit 4 swaps x and y.
const NEIGHBOR_SWAP: [[u8; 3]; 9] = [
    [0, 0, 3],
    [0, 0, 6],
    [0, 0, 0],
    [0, 0, 5],
    [0, 0, 0],
    [5, 0, 0],
    [0, 0, 0],
    [6, 0, 0],
    [3, 0, 0],
];

/// Refinement level `n` of a HEALPix mesh.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MeshLevel(u8);

impl MeshLevel {
    pub fn new(n: u8) -> Self {
        assert!(n <= MAX_LEVEL, "HEALPix level {n} exceeds {MAX_LEVEL}");
        MeshLevel(n)
    }

    pub fn try_new(n: u8) -> Result<Self> {
        if n > MAX_LEVEL {
            return Err(Error::InvalidValue(format!("HEALPix level {n} exceeds {MAX_LEVEL}")));
        }
        Ok(MeshLevel(n))
    }

    #[inline]
    pub fn n(self) -> u8 {
        self.0
    }

    /// Pixels along one side of a base face, `2^n`.
    #[inline]
    pub fn nside(self) -> u64 {
        1 << self.0
    }

    /// Pixels per base face, `4^n`.
    #[inline]
    pub fn face_pixels(self) -> u64 {
        1 << (2 * self.0)
    }

    #[inline]
    pub fn num_pixels(self) -> u64 {
        12 * self.face_pixels()
    }

    pub fn coarser(self) -> Option<MeshLevel> {
        self.0.checked_sub(1).map(MeshLevel)
    }

    pub fn finer(self) -> MeshLevel {
        MeshLevel::new(self.0 + 1)
    }

    /// Iterates every pixel of the level in nested order.
    pub fn pixels(self) -> impl Iterator<Item = PixelId> {
        (0..self.num_pixels()).map(move |i| PixelId::new(self, i))
    }
}

impl fmt::Display for MeshLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

pub fn num_pixels(level: MeshLevel) -> u64 {
    level.num_pixels()
}

/// A point on the unit sphere, latitude in `[-90, 90]` and longitude in `[0, 360)` degrees.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SphericalPoint {
    lat: f64,
    lon: f64,
}

impl SphericalPoint {
    /// Longitude is wrapped into `[0, 360)`; latitude must already be in range.
    pub fn new(lat_deg: f64, lon_deg: f64) -> Result<Self> {
        if !lat_deg.is_finite() || !lon_deg.is_finite() || lat_deg.abs() > 90.0 {
            return Err(Error::InvalidValue(format!(
                "invalid spherical point (lat {lat_deg}, lon {lon_deg})"
            )));
        }
        Ok(SphericalPoint {
            lat: lat_deg,
            lon: wrap_degrees(lon_deg),
        })
    }

    pub(crate) fn from_radians(lat: f64, lon: f64) -> Self {
        SphericalPoint {
            lat: lat.to_degrees().clamp(-90.0, 90.0),
            lon: wrap_degrees(lon.to_degrees()),
        }
    }

    #[inline]
    pub fn lat(self) -> f64 {
        self.lat
    }

    #[inline]
    pub fn lon(self) -> f64 {
        self.lon
    }

    pub fn to_unit_vector(self) -> [f64; 3] {
        let (lat, lon) = (self.lat.to_radians(), self.lon.to_radians());
        [lat.cos() * lon.cos(), lat.cos() * lon.sin(), lat.sin()]
    }

    /// Great-circle separation in radians (haversine form).
    pub fn distance(self, other: SphericalPoint) -> f64 {
        haversine(
            self.lat.to_radians(),
            self.lon.to_radians(),
            other.lat.to_radians(),
            other.lon.to_radians(),
        )
    }
}

fn wrap_degrees(lon: f64) -> f64 {
    let w = lon.rem_euclid(360.0);
    if w >= 360.0 {
        0.0
    } else {
        w
    }
}

/// Haversine great-circle distance in radians between two (lat, lon) pairs in radians.
#[inline]
pub fn haversine(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    let s_lat = ((lat2 - lat1) * 0.5).sin();
    let s_lon = ((lon2 - lon1) * 0.5).sin();
    let a = s_lat * s_lat + lat1.cos() * lat2.cos() * s_lon * s_lon;
    2.0 * a.sqrt().min(1.0).asin()
}

/// The eight compass directions around a pixel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Direction {
    N,
    NE,
    E,
    SE,
    S,
    SW,
    W,
    NW,
}

impl Direction {
    pub const ALL: [Direction; 8] = [
        Direction::N,
        Direction::NE,
        Direction::E,
        Direction::SE,
        Direction::S,
        Direction::SW,
        Direction::W,
        Direction::NW,
    ];

    /// Step in face coordinates.
    fn offset(self) -> (i64, i64) {
        match self {
            Direction::N => (1, 1),
            Direction::NE => (1, 0),
            Direction::E => (1, -1),
            Direction::SE => (0, -1),
            Direction::S => (-1, -1),
            Direction::SW => (-1, 0),
            Direction::W => (-1, 1),
            Direction::NW => (0, 1),
        }
    }

    pub fn opposite(self) -> Direction {
        match self {
            Direction::N => Direction::S,
            Direction::NE => Direction::SW,
            Direction::E => Direction::W,
            Direction::SE => Direction::NW,
            Direction::S => Direction::N,
            Direction::SW => Direction::NE,
            Direction::W => Direction::E,
            Direction::NW => Direction::SE,
        }
    }
}

/// Position of a child pixel inside its parent.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Quadrant {
    S,
    E,
    W,
    N,
}

impl Quadrant {
    /// Child slot `k` in `4i + k` maps to S, E, W, N.
    pub fn from_child_slot(k: u64) -> Quadrant {
        match k & 3 {
            0 => Quadrant::S,
            1 => Quadrant::E,
            2 => Quadrant::W,
            _ => Quadrant::N,
        }
    }

    pub fn label(self) -> char {
        match self {
            Quadrant::S => 'S',
            Quadrant::E => 'E',
            Quadrant::W => 'W',
            Quadrant::N => 'N',
        }
    }
}

/// A pixel in nested ordering at a given level.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PixelId {
    level: MeshLevel,
    index: u64,
}

impl PixelId {
    pub fn new(level: MeshLevel, index: u64) -> Self {
        assert!(
            index < level.num_pixels(),
            "pixel {index} out of range at level {level}"
        );
        PixelId { level, index }
    }

    #[inline]
    pub fn index(self) -> u64 {
        self.index
    }

    #[inline]
    pub fn level(self) -> MeshLevel {
        self.level
    }

    #[inline]
    pub fn face(self) -> u8 {
        (self.index >> (2 * self.level.n())) as u8
    }

    /// Within-face `(x, y)` recovered by de-interleaving the low `2n` bits.
    pub fn xy(self) -> (u64, u64) {
        let local = self.index & (self.level.face_pixels() - 1);
        (compact_bits(local), compact_bits(local >> 1))
    }

    pub fn from_xyf(level: MeshLevel, x: u64, y: u64, face: u8) -> Self {
        debug_assert!(x < level.nside() && y < level.nside() && face < 12);
        let index = ((face as u64) << (2 * level.n())) | spread_bits(x) | (spread_bits(y) << 1);
        PixelId { level, index }
    }

    /// Children in nested order `4i..4i+3`, i.e. S, E, W, N quadrants.
    pub fn children(self) -> [PixelId; 4] {
        let level = self.level.finer();
        let base = self.index << 2;
        [0, 1, 2, 3].map(|k| PixelId { level, index: base + k })
    }

    /// Which quadrant of its parent this pixel occupies.
    pub fn quadrant(self) -> Quadrant {
        Quadrant::from_child_slot(self.index)
    }

    pub fn parent(self) -> Result<PixelId> {
        let level = self.level.coarser().ok_or(Error::NoParent)?;
        Ok(PixelId {
            level,
            index: self.index >> 2,
        })
    }

    /// Ancestor `levels` steps up the hierarchy.
    pub fn ancestor(self, levels: u8) -> Result<PixelId> {
        if levels > self.level.n() {
            return Err(Error::NoParent);
        }
        Ok(PixelId {
            level: MeshLevel(self.level.n() - levels),
            index: self.index >> (2 * levels),
        })
    }

    pub fn center(self) -> SphericalPoint {
        let (x, y) = self.xy();
        let ns = self.level.nside() as f64;
        face_point((x as f64 + 0.5) / ns, (y as f64 + 0.5) / ns, self.face())
    }

    /// Corners in N, E, S, W order.
    pub fn corners(self) -> [SphericalPoint; 4] {
        let (x, y) = self.xy();
        let ns = self.level.nside() as f64;
        let (x0, y0) = (x as f64 / ns, y as f64 / ns);
        let (x1, y1) = ((x + 1) as f64 / ns, (y + 1) as f64 / ns);
        let f = self.face();
        [
            face_point(x1, y1, f),
            face_point(x1, y0, f),
            face_point(x0, y0, f),
            face_point(x0, y1, f),
        ]
    }

    /// Adjacent pixel in direction `d`, or `None` where the topology has no
    /// pixel there (the diagonal missing at the 8 three-face vertices).
    pub fn neighbor(self, d: Direction) -> Option<PixelId> {
        let ns = self.level.nside() as i64;
        let (x, y) = self.xy();
        let (dx, dy) = d.offset();
        let (mut nx, mut ny) = (x as i64 + dx, y as i64 + dy);
        let face = self.face() as usize;
        if (0..ns).contains(&nx) && (0..ns).contains(&ny) {
            return Some(PixelId::from_xyf(self.level, nx as u64, ny as u64, face as u8));
        }
        let mut slot = 4i64;
        if nx < 0 {
            nx += ns;
            slot -= 1;
        } else if nx >= ns {
            nx -= ns;
            slot += 1;
        }
        if ny < 0 {
            ny += ns;
            slot -= 3;
        } else if ny >= ns {
            ny -= ns;
            slot += 3;
        }
        let target = NEIGHBOR_FACE[slot as usize][face];
        if target < 0 {
            return None;
        }
        let bits = NEIGHBOR_SWAP[slot as usize][face >> 2];
        if bits & 1 != 0 {
            nx = ns - nx - 1;
        }
        if bits & 2 != 0 {
            ny = ns - ny - 1;
        }
        if bits & 4 != 0 {
            std::mem::swap(&mut nx, &mut ny);
        }
        Some(PixelId::from_xyf(self.level, nx as u64, ny as u64, target as u8))
    }

    /// All eight neighbours in `Direction::ALL` order.
    pub fn neighbors(self) -> [Option<PixelId>; 8] {
        Direction::ALL.map(|d| self.neighbor(d))
    }
}

/// Spreads the low 32 bits of `v` to the even bit positions.
fn spread_bits(v: u64) -> u64 {
    let mut v = v & 0xFFFF_FFFF;
    v = (v | (v << 16)) & 0x0000_FFFF_0000_FFFF;
    v = (v | (v << 8)) & 0x00FF_00FF_00FF_00FF;
    v = (v | (v << 4)) & 0x0F0F_0F0F_0F0F_0F0F;
    v = (v | (v << 2)) & 0x3333_3333_3333_3333;
    (v | (v << 1)) & 0x5555_5555_5555_5555
}

/// Inverse of `spread_bits`: gathers the even bits of `v`.
fn compact_bits(v: u64) -> u64 {
    let mut v = v & 0x5555_5555_5555_5555;
    v = (v | (v >> 1)) & 0x3333_3333_3333_3333;
    v = (v | (v >> 2)) & 0x0F0F_0F0F_0F0F_0F0F;
    v = (v | (v >> 4)) & 0x00FF_00FF_00FF_00FF;
    v = (v | (v >> 8)) & 0x0000_FFFF_0000_FFFF;
    (v | (v >> 16)) & 0x0000_0000_FFFF_FFFF
}

/// Maps continuous face coordinates `(x, y)` in `[0, 1]^2` to the sphere.
fn face_point(x: f64, y: f64, face: u8) -> SphericalPoint {
    let f = face as usize;
    let jr = FACE_RING[f] as f64 - x - y;
    let (r, z, polar_r) = if jr < 1.0 {
        (jr, 1.0 - jr * jr / 3.0, Some(jr))
    } else if jr > 3.0 {
        let r = 4.0 - jr;
        (r, r * r / 3.0 - 1.0, Some(r))
    } else {
        (1.0, (2.0 - jr) * 2.0 / 3.0, None)
    };
    let mut t = FACE_PHI[f] as f64 * r + x - y;
    if t < 0.0 {
        t += 8.0;
    }
    if t >= 8.0 {
        t -= 8.0;
    }
    let phi = if r < 1e-15 { 0.0 } else { 0.25 * PI * t / r };
    let lat = match polar_r {
        // cos(colat) = 1 - r^2/3, so sin(colat/2) = r / sqrt(6); avoids asin(z) near the poles.
        Some(pr) => {
            let colat = 2.0 * (pr / 6f64.sqrt()).min(1.0).asin();
            if z >= 0.0 {
                FRAC_PI_2 - colat
            } else {
                colat - FRAC_PI_2
            }
        }
        None => z.asin(),
    };
    SphericalPoint::from_radians(lat, phi)
}

/// The pixel at `level` whose quadrilateral contains `point` (nested `ang2pix`).
pub fn locate(point: SphericalPoint, level: MeshLevel) -> PixelId {
    let lat = point.lat.to_radians();
    let phi = point.lon.to_radians();
    let z = lat.sin();
    let za = z.abs();
    let ns = level.nside() as i64;
    let nsf = ns as f64;
    let tt = (phi / FRAC_PI_2).rem_euclid(4.0);

    if za <= 2.0 / 3.0 {
        let t1 = nsf * (0.5 + tt);
        let t2 = nsf * (z * 0.75);
        let jp = (t1 - t2) as i64;
        let jm = (t1 + t2) as i64;
        let ifp = jp >> level.n();
        let ifm = jm >> level.n();
        let face = if ifp == ifm {
            ifp | 4
        } else if ifp < ifm {
            ifp
        } else {
            ifm + 8
        };
        let ix = jm & (ns - 1);
        let iy = ns - (jp & (ns - 1)) - 1;
        PixelId::from_xyf(level, ix as u64, iy as u64, face as u8)
    } else {
        let ntt = (tt as i64).min(3);
        let tp = tt - ntt as f64;
        // sqrt(3 (1 - |z|)) computed from the colatitude to keep precision near the poles.
        let half_colat = 0.5 * (FRAC_PI_2 - lat.abs());
        let tmp = nsf * (6f64.sqrt() * half_colat.sin());
        let jp = ((tp * tmp) as i64).min(ns - 1);
        let jm = (((1.0 - tp) * tmp) as i64).min(ns - 1);
        if z >= 0.0 {
            PixelId::from_xyf(level, (ns - jm - 1) as u64, (ns - jp - 1) as u64, ntt as u8)
        } else {
            PixelId::from_xyf(level, jp as u64, jm as u64, (ntt + 8) as u8)
        }
    }
}

/// Solid angle of every pixel at `level`, in steradians.
pub fn pixel_solid_angle(level: MeshLevel) -> f64 {
    2.0 * TAU / level.num_pixels() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pixel_counts_follow_twelve_times_four_to_the_n() {
        let expected = [12u64, 48, 192, 768, 3_072, 12_288, 49_152, 196_608];
        for (n, &count) in expected.iter().enumerate() {
            assert_eq!(num_pixels(MeshLevel::new(n as u8)), count);
            assert_eq!(MeshLevel::new(n as u8).nside(), 1 << n);
        }
    }

    #[test]
    fn children_and_parent_arithmetic() {
        let p = PixelId::new(MeshLevel::new(0), 0);
        let kids: Vec<u64> = p.children().iter().map(|c| c.index()).collect();
        assert_eq!(kids, vec![0, 1, 2, 3]);

        let q = PixelId::new(MeshLevel::new(1), 7).parent().unwrap();
        assert_eq!((q.level().n(), q.index()), (0, 1));
        let q = PixelId::new(MeshLevel::new(2), 0).parent().unwrap();
        assert_eq!((q.level().n(), q.index()), (1, 0));

        assert!(matches!(
            PixelId::new(MeshLevel::new(0), 3).parent(),
            Err(Error::NoParent)
        ));
    }

    #[test]
    fn hierarchy_round_trips_and_partitions() {
        for n in 0..=4u8 {
            let level = MeshLevel::new(n);
            let mut seen = vec![false; level.finer().num_pixels() as usize];
            for p in level.pixels() {
                for (k, c) in p.children().into_iter().enumerate() {
                    assert_eq!(c.parent().unwrap(), p);
                    assert_eq!(c.face(), p.face());
                    assert_eq!(c.quadrant(), Quadrant::from_child_slot(k as u64));
                    assert!(!seen[c.index() as usize]);
                    seen[c.index() as usize] = true;
                }
            }
            assert!(seen.into_iter().all(|s| s));
        }
    }

    #[test]
    fn ancestor_matches_repeated_parent() {
        let level = MeshLevel::new(4);
        for p in level.pixels() {
            let mut q = p;
            for w in 1..=4u8 {
                q = q.parent().unwrap();
                let a = p.ancestor(w).unwrap();
                assert_eq!(a, q);
                assert_eq!(a.index(), p.index() / 4u64.pow(w as u32));
            }
        }
    }

    #[test]
    fn child_quadrants_sit_in_their_compass_position() {
        let level = MeshLevel::new(2);
        for p in level.pixels() {
            let c = p.children().map(|c| c.center());
            let [s, e, w, n] = c;
            assert!(n.lat() > s.lat());
            let de = angle_diff(e.lon(), p.center().lon());
            let dw = angle_diff(w.lon(), p.center().lon());
            // East/West are only meaningful away from the poles.
            if p.center().lat().abs() < 60.0 {
                assert!(de > 0.0 && dw < 0.0, "pixel {}", p.index());
            }
        }
    }

    fn angle_diff(a: f64, b: f64) -> f64 {
        (a - b + 540.0).rem_euclid(360.0) - 180.0
    }

    #[test]
    fn base_face_centres() {
        let level = MeshLevel::new(0);
        let north = (2.0f64 / 3.0).asin().to_degrees();
        for f in 0..12u64 {
            let c = PixelId::new(level, f).center();
            match f {
                0..=3 => assert!((c.lat() - north).abs() < 1e-12, "face {f}: {}", c.lat()),
                4..=7 => assert!(c.lat().abs() < 1e-12),
                _ => assert!((c.lat() + north).abs() < 1e-12),
            }
        }
        assert!((north - 41.8103).abs() < 1e-4);
    }

    #[test]
    fn locate_contains_pixel_centres() {
        for n in 0..=3u8 {
            let level = MeshLevel::new(n);
            for p in level.pixels() {
                assert_eq!(locate(p.center(), level), p);
            }
        }
    }

    #[test]
    fn locate_is_consistent_across_levels() {
        let points = [
            (90.0, 0.0),
            (-90.0, 123.0),
            (41.81, 0.0),
            (0.0, 359.999),
            (-12.5, 181.0),
            (67.3, 45.0),
        ];
        for &(lat, lon) in &points {
            let pt = SphericalPoint::new(lat, lon).unwrap();
            let fine = locate(pt, MeshLevel::new(6));
            for w in 1..=6u8 {
                assert_eq!(fine.ancestor(w).unwrap(), locate(pt, MeshLevel::new(6 - w)));
            }
        }
    }

    #[test]
    fn interior_neighbor_inverse() {
        let level = MeshLevel::new(3);
        for p in level.pixels() {
            let (x, y) = p.xy();
            if x == 0 || y == 0 || x == 7 || y == 7 {
                continue;
            }
            for d in Direction::ALL {
                let q = p.neighbor(d).unwrap();
                assert_eq!(q.neighbor(d.opposite()), Some(p));
            }
        }
    }

    #[test]
    fn invalid_points_are_rejected() {
        assert!(SphericalPoint::new(91.0, 0.0).is_err());
        assert!(SphericalPoint::new(f64::NAN, 0.0).is_err());
        assert_eq!(SphericalPoint::new(0.0, -90.0).unwrap().lon(), 270.0);
    }
}
