//! Mesh topology and geometry checked against independent oracles built
//! from pixel corner coordinates and equal-area sampling.

use std::collections::BTreeSet;

use healvit::healpix::{locate, pixel_solid_angle, MeshLevel, PixelId, SphericalPoint};

/// Two pixels are adjacent iff their boundaries share at least one corner.
fn geometric_neighbors(level: MeshLevel) -> Vec<BTreeSet<u64>> {
    let corners: Vec<[[f64; 3]; 4]> = level
        .pixels()
        .map(|p| p.corners().map(|c| c.to_unit_vector()))
        .collect();
    let close =
        |a: &[f64; 3], b: &[f64; 3]| (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2) < 1e-18;
    let n = corners.len();
    let mut out = vec![BTreeSet::new(); n];
    for i in 0..n {
        for j in (i + 1)..n {
            let touch = corners[i].iter().any(|a| corners[j].iter().any(|b| close(a, b)));
            if touch {
                out[i].insert(j as u64);
                out[j].insert(i as u64);
            }
        }
    }
    out
}

fn table_neighbors(p: PixelId) -> BTreeSet<u64> {
    p.neighbors().iter().flatten().map(|q| q.index()).collect()
}

#[test]
fn neighbor_table_matches_geometric_adjacency() {
    for n in 1..=3u8 {
        let level = MeshLevel::new(n);
        let oracle = geometric_neighbors(level);
        for p in level.pixels() {
            assert_eq!(
                table_neighbors(p),
                oracle[p.index() as usize],
                "level {n} pixel {}",
                p.index()
            );
        }
    }
}

#[test]
fn neighbor_relation_is_symmetric() {
    for n in 0..=3u8 {
        let level = MeshLevel::new(n);
        for p in level.pixels() {
            for q in p.neighbors().into_iter().flatten() {
                assert!(
                    q.neighbors().contains(&Some(p)),
                    "level {n}: {} -> {} not mirrored",
                    p.index(),
                    q.index()
                );
            }
        }
    }
}

#[test]
fn seven_neighbor_pixels_sit_at_three_face_vertices() {
    // Frozen from the geometric oracle: each of the 8 vertices where only
    // three faces meet is shared by three pixels, and each of them lacks
    // one diagonal neighbour.
    for n in 1..=3u8 {
        let level = MeshLevel::new(n);
        let oracle = geometric_neighbors(level);
        let mut sevens = 0;
        for p in level.pixels() {
            let count = oracle[p.index() as usize].len();
            assert!(count == 7 || count == 8, "pixel {} has {count}", p.index());
            let absent = p.neighbors().iter().filter(|q| q.is_none()).count();
            assert_eq!(absent, 8 - count);
            if count == 7 {
                sevens += 1;
            }
        }
        assert_eq!(sevens, 24, "level {n}");
    }
}

#[test]
fn pixels_have_equal_area_under_stratified_sampling() {
    // Jittered stratified sampling, uniform in (z, phi), i.e. equal-area.
    let rows = 1536usize;
    let cols = 3072usize;
    let mut state = 0x9E37_79B9_7F4A_7C15u64;
    let mut uniform = move || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 11) as f64 / (1u64 << 53) as f64
    };
    let levels: Vec<MeshLevel> = (0..=3).map(MeshLevel::new).collect();
    let mut counts: Vec<Vec<u64>> = levels.iter().map(|l| vec![0; l.num_pixels() as usize]).collect();
    for i in 0..rows {
        for j in 0..cols {
            let z = -1.0 + 2.0 * (i as f64 + uniform()) / rows as f64;
            let phi = 360.0 * (j as f64 + uniform()) / cols as f64;
            let pt = SphericalPoint::new(z.asin().to_degrees(), phi).unwrap();
            for (l, c) in levels.iter().zip(counts.iter_mut()) {
                c[locate(pt, *l).index() as usize] += 1;
            }
        }
    }
    let total = (rows * cols) as f64;
    for (l, c) in levels.iter().zip(counts.iter()) {
        let expected = pixel_solid_angle(*l);
        for (idx, &hits) in c.iter().enumerate() {
            let area = 4.0 * std::f64::consts::PI * hits as f64 / total;
            let rel = (area - expected).abs() / expected;
            assert!(rel < 0.01, "level {} pixel {idx}: rel {rel}", l.n());
        }
    }
}

#[test]
fn desk_grid_reaches_every_level_three_pixel() {
    let (n_lat, n_lon) = (46usize, 90usize);
    let level = MeshLevel::new(3);
    let mut hits = vec![0usize; level.num_pixels() as usize];
    for i in 0..n_lat {
        let lat = 90.0 - 180.0 * i as f64 / (n_lat - 1) as f64;
        for j in 0..n_lon {
            let lon = 360.0 * j as f64 / n_lon as f64;
            let p = locate(SphericalPoint::new(lat, lon).unwrap(), level);
            hits[p.index() as usize] += 1;
        }
    }
    assert!(hits.iter().all(|&h| h >= 1));
    assert_eq!(hits.iter().sum::<usize>(), n_lat * n_lon);
}

#[test]
fn corners_bound_their_centre() {
    // The centre lies inside the quadrilateral: latitude between S and N corners.
    for p in MeshLevel::new(3).pixels() {
        let [n, _, s, _] = p.corners();
        let c = p.center();
        assert!(c.lat() < n.lat() && c.lat() > s.lat());
    }
}
