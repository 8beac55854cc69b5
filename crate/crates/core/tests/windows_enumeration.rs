//! Exhaustive checks of plain and shifted window partitions.

use std::collections::BTreeSet;

use healvit::healpix::{MeshLevel, PixelId};
use healvit::windowing::{build_shifted_windows, build_windows, WindowPartition};

const CASES: [(u8, u8); 7] = [(1, 1), (2, 1), (2, 2), (3, 1), (3, 2), (4, 2), (4, 3)];

fn assert_partition(part: &WindowPartition) {
    let level = part.level();
    let mut hits = vec![0u32; level.num_pixels() as usize];
    for (k, win) in part.windows().iter().enumerate() {
        for &p in win {
            hits[p as usize] += 1;
            assert_eq!(part.window_of(PixelId::new(level, p as u64)), k);
        }
    }
    assert!(hits.iter().all(|&h| h == 1), "not a partition");
}

fn corner_vectors(p: PixelId) -> [[f64; 3]; 4] {
    p.corners().map(|c| c.to_unit_vector())
}

fn shared_corners(a: PixelId, b: PixelId) -> usize {
    let (ca, cb) = (corner_vectors(a), corner_vectors(b));
    ca.iter()
        .filter(|u| {
            cb.iter()
                .any(|v| (0..3).map(|i| (u[i] - v[i]).powi(2)).sum::<f64>() < 1e-18)
        })
        .count()
}

#[test]
fn plain_and_shifted_partitions_cover_every_pixel_once() {
    for &(n, w) in &CASES {
        let level = MeshLevel::new(n);
        let plain = build_windows(level, w).unwrap();
        assert_partition(&plain);
        assert_eq!(plain.num_windows() as u64, 12 * 4u64.pow((n - w) as u32));

        let shifted = build_shifted_windows(level, w).unwrap();
        assert_partition(&shifted);
        let unit = 4usize.pow((w - 1) as u32);
        for win in shifted.windows() {
            assert!(win.len() == 3 * unit || win.len() == 4 * unit);
        }
        assert_eq!(shifted.three_quadrant_windows(), 8, "n={n} w={w}");
        // 4 Q = 4 (W - 8) + 3 * 8 with Q plain windows.
        assert_eq!(shifted.num_windows(), plain.num_windows() + 2);
    }
}

#[test]
fn shifted_windows_mix_distinct_plain_windows() {
    for &(n, w) in &CASES {
        let level = MeshLevel::new(n);
        let plain = build_windows(level, w).unwrap();
        let shifted = build_shifted_windows(level, w).unwrap();
        for (k, win) in shifted.windows().iter().enumerate() {
            let origins: BTreeSet<usize> = win
                .iter()
                .map(|&p| plain.window_of(PixelId::new(level, p as u64)))
                .collect();
            assert_eq!(origins.len(), shifted.quadrants(k).len());
        }
    }
}

#[test]
fn shifted_quadrants_form_a_touching_block() {
    for &(n, w) in &CASES {
        let shifted = build_shifted_windows(MeshLevel::new(n), w).unwrap();
        for k in 0..shifted.num_windows() {
            let quads: Vec<PixelId> = shifted.quadrants(k).iter().map(|q| q.subpixel).collect();
            // Every pair touches; edge contacts connect the block.
            let mut edges = 0;
            for i in 0..quads.len() {
                for j in (i + 1)..quads.len() {
                    let s = shared_corners(quads[i], quads[j]);
                    assert!(s >= 1, "window {k} quadrants do not touch");
                    if s == 2 {
                        edges += 1;
                    }
                }
            }
            if quads.len() == 3 {
                assert_eq!(edges, 3, "3-quadrant window {k} should be edge-connected pairwise");
            } else {
                assert_eq!(edges, 4, "4-quadrant window {k} should be a 2x2 block");
            }
        }
    }
}

#[test]
fn three_quadrant_windows_sit_where_three_faces_meet() {
    for &(n, w) in &CASES {
        let shifted = build_shifted_windows(MeshLevel::new(n), w).unwrap();
        let mut seen = 0;
        for k in 0..shifted.num_windows() {
            let quads = shifted.quadrants(k);
            if quads.len() != 3 {
                continue;
            }
            seen += 1;
            let faces: BTreeSet<u8> = quads.iter().map(|q| q.subpixel.face()).collect();
            assert_eq!(faces.len(), 3);
            let equatorial = faces.iter().filter(|&&f| (4..8).contains(&f)).count();
            let north = faces.iter().filter(|&&f| f < 4).count();
            let south = faces.iter().filter(|&&f| f >= 8).count();
            assert_eq!(equatorial, 1);
            assert!(north == 2 || south == 2);
        }
        assert_eq!(seen, 8);
    }
}

#[test]
fn construction_is_deterministic() {
    for &(n, w) in &CASES {
        let a = build_shifted_windows(MeshLevel::new(n), w).unwrap();
        let b = build_shifted_windows(MeshLevel::new(n), w).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn full_scale_shifted_windows() {
    let level = MeshLevel::new(6);
    let shifted = build_shifted_windows(level, 3).unwrap();
    assert_partition(&shifted);
    assert_eq!(shifted.three_quadrant_windows(), 8);
    assert_eq!(shifted.num_windows(), 770);
}
