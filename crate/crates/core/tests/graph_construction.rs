use std::path::Path;

use healvit::graphs::{
    brute_force_nearest, build_downsample, build_graph, build_grid2mesh, build_mesh2grid, build_upsample,
    pixel_centers, BipartiteGraph, GraphKind,
};
use healvit::grid::GridSpec;
use healvit::healpix::MeshLevel;

fn desk_grid() -> GridSpec {
    GridSpec::new(46, 90).unwrap()
}

#[test]
fn grid_to_mesh_on_desk_grid() {
    let g = build_grid2mesh(&desk_grid(), MeshLevel::new(3));
    assert_eq!(g.num_edges(), 4_140);
    assert!(g.out_degrees().iter().all(|&d| d == 1));
    assert!(g.in_degrees().iter().all(|&d| d >= 1));
    assert!(g.edge_of_source().is_ok());
}

#[test]
fn mesh_to_grid_matches_brute_force() {
    let grid = desk_grid();
    let level = MeshLevel::new(3);
    let g = build_mesh2grid(&grid, level);
    assert_eq!(g.num_edges(), 4 * grid.num_nodes());
    assert!(g.in_degrees().iter().all(|&d| d == 4));

    let centers = pixel_centers(level);
    let mut expected = Vec::new();
    for (t, q) in grid.node_points().into_iter().enumerate() {
        let mut near: Vec<u32> = brute_force_nearest(&centers, q, 4).iter().map(|x| x.1).collect();
        near.sort_unstable();
        expected.extend(near.into_iter().map(|s| (s, t as u32)));
    }
    assert_eq!(g.edges().collect::<Vec<_>>(), expected);
}

#[test]
fn upsample_matches_brute_force_and_contains_parent() {
    for n in 1..=4u8 {
        let level = MeshLevel::new(n);
        let up = build_upsample(level).unwrap();
        assert_eq!(up.num_edges(), 4 * 12 * 4usize.pow(n as u32));
        assert!(up.in_degrees().iter().all(|&d| d == 4));

        let coarse = pixel_centers(level.coarser().unwrap());
        let fine = pixel_centers(level);
        for (t, q) in fine.iter().enumerate() {
            let mut near: Vec<u32> = brute_force_nearest(&coarse, *q, 4).iter().map(|x| x.1).collect();
            near.sort_unstable();
            let got: Vec<u32> = up.sources()[4 * t..4 * t + 4].to_vec();
            assert_eq!(got, near, "level {n} fine pixel {t}");
            assert!(
                got.contains(&((t as u32) >> 2)),
                "parent missing at level {n} pixel {t}"
            );
        }
    }
}

#[test]
fn down_then_up_reaches_every_fine_node() {
    for n in 1..=4u8 {
        let level = MeshLevel::new(n);
        let down = build_downsample(level).unwrap();
        let up = build_upsample(level).unwrap();
        let mut reached = vec![false; level.num_pixels() as usize];
        let mut coarse_hit = vec![false; down.target_count()];
        for (_, c) in down.edges() {
            coarse_hit[c as usize] = true;
        }
        for (c, f) in up.edges() {
            if coarse_hit[c as usize] {
                reached[f as usize] = true;
            }
        }
        assert!(reached.into_iter().all(|r| r));
        assert!(down.in_degrees().iter().all(|&d| d == 4));
    }
}

#[test]
fn construction_is_deterministic_and_round_trips() {
    let grid = GridSpec::new(12, 24).unwrap();
    for kind in [
        GraphKind::GridToMesh,
        GraphKind::MeshToGrid,
        GraphKind::Downsample,
        GraphKind::Upsample,
    ] {
        let a = build_graph(kind, &grid, MeshLevel::new(2)).unwrap();
        let b = build_graph(kind, &grid, MeshLevel::new(2)).unwrap();
        assert_eq!(a, b);
        let mut bytes = Vec::new();
        a.write_to(&mut bytes).unwrap();
        let back = BipartiteGraph::read_from(&bytes[..], Path::new("mem")).unwrap();
        assert_eq!(back, a);
        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        assert_eq!(bytes, again);
        assert_eq!(&bytes[..4], b"HVGR");
    }
}

#[test]
fn truncated_graph_file_is_rejected() {
    let g = build_downsample(MeshLevel::new(1)).unwrap();
    let mut bytes = Vec::new();
    g.write_to(&mut bytes).unwrap();
    bytes.truncate(bytes.len() - 3);
    assert!(BipartiteGraph::read_from(&bytes[..], Path::new("mem")).is_err());
}

#[test]
fn pole_rows_map_independently() {
    let grid = desk_grid();
    let level = MeshLevel::new(3);
    let m2g = build_mesh2grid(&grid, level);
    // All pole nodes of one row share one location, hence one set of sources.
    let first: Vec<u32> = m2g.sources()[0..4].to_vec();
    for j in 1..grid.n_lon() {
        assert_eq!(&m2g.sources()[4 * j..4 * j + 4], &first[..]);
    }
}
