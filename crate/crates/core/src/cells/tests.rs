use std::collections::{BTreeSet, VecDeque};

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn grid_from(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f32) -> ReflectivityGrid {
    let mut values = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            values.push(f(r, c));
        }
    }
    ReflectivityGrid::new(0, rows, cols, 1.0, 60.0, 24.0, values).unwrap()
}

/// 4-connected components of the above-threshold mask.
fn components(grid: &ReflectivityGrid, thr: f32) -> Vec<Vec<usize>> {
    let (rows, cols) = (grid.rows(), grid.cols());
    let above = |i: usize| grid.values()[i] >= thr && !is_no_data(grid.values()[i]);
    let mut seen = vec![false; rows * cols];
    let mut out = Vec::new();
    for start in 0..rows * cols {
        if seen[start] || !above(start) {
            continue;
        }
        let mut comp = Vec::new();
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(i) = queue.pop_front() {
            comp.push(i);
            let (r, c) = (i / cols, i % cols);
            let mut push = |j: usize| {
                if !seen[j] && above(j) {
                    seen[j] = true;
                    queue.push_back(j);
                }
            };
            if r > 0 {
                push(i - cols);
            }
            if r + 1 < rows {
                push(i + cols);
            }
            if c > 0 {
                push(i - 1);
            }
            if c + 1 < cols {
                push(i + 1);
            }
        }
        out.push(comp);
    }
    out
}

fn assert_simple_closed(poly: &[Point]) {
    assert!(poly.len() >= 4);
    assert_eq!(poly.first(), poly.last());
    let n = poly.len() - 1;
    let seg = |k: usize| (poly[k], poly[k + 1]);
    let orient = |a: Point, b: Point, c: Point| (b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0);
    for i in 0..n {
        for j in i + 2..n {
            if i == 0 && j == n - 1 {
                continue;
            }
            let ((a, b), (c, d)) = (seg(i), seg(j));
            let crosses = orient(a, b, c) * orient(a, b, d) < 0.0
                && orient(c, d, a) * orient(c, d, b) < 0.0;
            assert!(!crosses, "segments {i} and {j} intersect");
        }
    }
}

#[test]
fn uniform_below_threshold_has_no_objects() {
    let g = grid_from(12, 12, |_, _| 20.0);
    assert!(extract_storm_objects(&g, 35.0).is_empty());
}

#[test]
fn single_block() {
    let g = grid_from(20, 20, |r, c| {
        if (5..15).contains(&r) && (5..15).contains(&c) {
            45.0
        } else {
            0.0
        }
    });
    let objs = extract_storm_objects(&g, 35.0);
    assert_eq!(objs.len(), 1);
    let o = &objs[0];
    assert!((81.0..=121.0).contains(&o.area_km2), "area {}", o.area_km2);
    assert!((o.area_km2 - geo::signed_area(&o.polygon)).abs() <= 1e-9 * o.area_km2);
    assert_simple_closed(&o.polygon);
    let s = o.dbz_stats;
    assert_eq!((s.max, s.min, s.mean, s.median, s.std), (45.0, 45.0, 45.0, 45.0, 0.0));
    assert_eq!(cells_in_ring(&g, &o.polygon).len(), 100);
    // Block spans x, y in [5, 15] km.
    assert!((o.centroid.0 - 10.0).abs() < 1e-9 && (o.centroid.1 - 10.0).abs() < 1e-9);
}

#[test]
fn two_separated_blocks() {
    let g = grid_from(20, 30, |r, c| {
        if (5..15).contains(&r) && ((3..12).contains(&c) || (14..25).contains(&c)) {
            45.0
        } else {
            0.0
        }
    });
    assert_eq!(components(&g, 35.0).len(), 2);
    assert_eq!(extract_storm_objects(&g, 35.0).len(), 2);
}

#[test]
fn block_touching_grid_edge_is_closed() {
    let g = grid_from(6, 6, |r, _| if r < 3 { 50.0 } else { 10.0 });
    let objs = extract_storm_objects(&g, 35.0);
    assert_eq!(objs.len(), 1);
    assert_simple_closed(&objs[0].polygon);
    assert_eq!(cells_in_ring(&g, &objs[0].polygon).len(), 18);
}

#[test]
fn hole_is_discarded_and_island_kept() {
    // Ring of 45 dBZ with a weak interior and a strong island in the middle.
    let g = grid_from(15, 15, |r, c| {
        let d = (r as i32 - 7).abs().max((c as i32 - 7).abs());
        match d {
            0 => 50.0,
            1 | 2 => 10.0,
            3..=5 => 45.0,
            _ => 0.0,
        }
    });
    let objs = extract_storm_objects(&g, 35.0);
    assert_eq!(objs.len(), 2);
    let areas: Vec<f64> = objs.iter().map(|o| o.area_km2).collect();
    assert!(areas.iter().any(|&a| a < 2.0) && areas.iter().any(|&a| a > 100.0), "{areas:?}");
    for o in &objs {
        assert!(o.area_km2 > 0.0);
        assert_simple_closed(&o.polygon);
    }
}

#[test]
fn saddle_resolved_by_mean() {
    // Diagonal pair: mean of (45, 0, 45, 0) is below 35, so two objects.
    let g = grid_from(4, 4, |r, c| if (r, c) == (1, 1) || (r, c) == (2, 2) { 45.0 } else { 0.0 });
    assert_eq!(extract_storm_objects(&g, 35.0).len(), 2);
    // With strong corners the mean clears the threshold and they join.
    let g = grid_from(4, 4, |r, c| {
        if (r, c) == (1, 1) || (r, c) == (2, 2) {
            70.0
        } else if (r, c) == (1, 2) || (r, c) == (2, 1) {
            30.0
        } else {
            0.0
        }
    });
    assert_eq!(extract_storm_objects(&g, 35.0).len(), 1);
}

#[test]
fn sentinel_cells_are_below_threshold() {
    let g = grid_from(5, 5, |_, _| crate::NO_DATA);
    assert!(extract_storm_objects(&g, 35.0).is_empty());
    let g = grid_from(5, 5, |r, c| if (r, c) == (2, 2) { crate::NO_DATA } else { 40.0 });
    let objs = extract_storm_objects(&g, 35.0);
    assert_eq!(objs.len(), 1);
    assert_eq!(objs[0].dbz_stats.min, 40.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn objects_match_connected_components(seed in any::<u64>(), rows in 3usize..16, cols in 3usize..16) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = grid_from(rows, cols, |_, _| if rng.random_bool(0.45) { 45.0 } else { 0.0 });
        let comps = components(&g, 35.0);
        let objs = extract_storm_objects(&g, 35.0);
        prop_assert_eq!(objs.len(), comps.len());
        for o in &objs {
            prop_assert!(o.area_km2 > 0.0);
            prop_assert!((o.area_km2 - geo::signed_area(&o.polygon)).abs() <= 1e-9 * o.area_km2);
            assert_simple_closed(&o.polygon);
        }
        // Each component lies inside exactly one outer polygon that is not
        // nested inside another component's object.
        for comp in &comps {
            let (r, c) = (comp[0] / cols, comp[0] % cols);
            let p = g.cell_center(r, c);
            let holders = objs.iter().filter(|o| geo::point_in_ring(p, &o.polygon)).count();
            prop_assert!(holders >= 1);
        }
    }
}

// ---- clustering ----

fn obj(id: u32, x: f64, y: f64, area: f64) -> StormObject {
    StormObject {
        id,
        polygon: vec![(x, y), (x + 0.1, y), (x, y + 0.1), (x, y)],
        area_km2: area,
        centroid: (x, y),
        dbz_stats: DbzStats::default(),
    }
}

fn run(objects: &[StormObject], limit: f64, radius: f64) -> Clustering {
    cluster_storm_objects(objects, limit, radius, 0, Projection::new(0.0, 0.0))
}

/// Textbook expansion: visit each unvisited core point, grow the cluster by
/// breadth-first search over all pairs, then attach border points to the
/// nearest core point (ties to the lexicographically smaller core centroid).
fn oracle(objects: &[StormObject], limit: f64, radius: f64) -> (Vec<PointRole>, BTreeSet<BTreeSet<u32>>) {
    let n = objects.len();
    let near = |i: usize, j: usize| {
        let (a, b) = (objects[i].centroid, objects[j].centroid);
        ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt() <= radius
    };
    let core: Vec<bool> = (0..n)
        .map(|i| {
            let s: f64 = (0..n).filter(|&j| j == i || near(i, j)).map(|j| objects[j].area_km2).sum();
            s >= limit
        })
        .collect();
    let mut label: Vec<Option<usize>> = vec![None; n];
    let mut next = 0;
    for i in 0..n {
        if !core[i] || label[i].is_some() {
            continue;
        }
        label[i] = Some(next);
        let mut queue = VecDeque::from([i]);
        while let Some(p) = queue.pop_front() {
            for q in 0..n {
                if q != p && core[q] && label[q].is_none() && near(p, q) {
                    label[q] = Some(next);
                    queue.push_back(q);
                }
            }
        }
        next += 1;
    }
    let mut roles = vec![PointRole::Noise; n];
    let mut final_label = label.clone();
    for i in 0..n {
        if core[i] {
            roles[i] = PointRole::Core;
            continue;
        }
        let mut best: Option<usize> = None;
        for j in (0..n).filter(|&j| core[j] && near(i, j)) {
            let d = |k: usize| {
                let (a, b) = (objects[i].centroid, objects[k].centroid);
                (a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)
            };
            best = match best {
                None => Some(j),
                Some(b) => {
                    let key = |k: usize| (d(k), objects[k].centroid.0, objects[k].centroid.1);
                    if key(j).partial_cmp(&key(b)) == Some(std::cmp::Ordering::Less) {
                        Some(j)
                    } else {
                        Some(b)
                    }
                }
            };
        }
        if let Some(b) = best {
            roles[i] = PointRole::Outlier;
            final_label[i] = label[b];
        }
    }
    let mut parts = vec![BTreeSet::new(); next];
    for i in 0..n {
        if let Some(l) = final_label[i] {
            parts[l].insert(objects[i].id);
        }
    }
    (roles, parts.into_iter().collect())
}

fn partition(c: &Clustering) -> BTreeSet<BTreeSet<u32>> {
    c.cells.iter().map(|cell| cell.members.iter().copied().collect()).collect()
}

fn random_objects(rng: &mut impl Rng, n: usize, extent: f64) -> Vec<StormObject> {
    (0..n)
        .map(|i| {
            obj(
                i as u32,
                rng.random_range(0.0..extent),
                rng.random_range(0.0..extent),
                rng.random_range(0.5..15.0),
            )
        })
        .collect()
}

#[test]
fn lone_large_object_is_core() {
    let c = run(&[obj(0, 5.0, 5.0, 25.0)], 20.0, 2.0);
    assert_eq!(c.roles[&0], PointRole::Core);
    assert_eq!(c.cells.len(), 1);
    assert_eq!(c.cells[0].members, vec![0]);
}

#[test]
fn pair_summing_past_limit() {
    let objs = [obj(0, 0.0, 0.0, 12.0), obj(1, 1.5, 0.0, 10.0)];
    let c = run(&objs, 20.0, 2.0);
    assert_eq!(c.roles[&0], PointRole::Core);
    assert_eq!(c.roles[&1], PointRole::Core);
    assert_eq!(c.cells.len(), 1);
    assert_eq!(c.cells[0].members, vec![0, 1]);
    assert_eq!(c.cells[0].total_area_km2, 22.0);
    let (roles, parts) = oracle(&objs, 20.0, 2.0);
    assert_eq!(roles, vec![PointRole::Core, PointRole::Core]);
    assert_eq!(parts, partition(&c));
}

#[test]
fn isolated_small_object_is_noise() {
    let c = run(&[obj(0, 0.0, 0.0, 5.0)], 20.0, 2.0);
    assert_eq!(c.roles[&0], PointRole::Noise);
    assert!(c.cells.is_empty());
    assert_eq!(c.cell_of(0), None);
}

#[test]
fn outlier_fixture() {
    // A (15) and B (6) 1.5 km apart are both core (21). D (1) sits 1.9 km
    // from A only: 1 + 15 = 16 < 20, so an outlier. E is far away: noise.
    let objs = [
        obj(0, 0.0, 0.0, 15.0),
        obj(1, 1.5, 0.0, 6.0),
        obj(2, -1.9, 0.0, 1.0),
        obj(3, 20.0, 20.0, 4.0),
    ];
    let c = run(&objs, 20.0, 2.0);
    let (roles, parts) = oracle(&objs, 20.0, 2.0);
    let expected = [PointRole::Core, PointRole::Core, PointRole::Outlier, PointRole::Noise];
    assert_eq!(roles, expected);
    for (i, r) in expected.iter().enumerate() {
        assert_eq!(c.roles[&(i as u32)], *r);
    }
    assert_eq!(partition(&c), parts);
    assert_eq!(c.cells.len(), 1);
    assert_eq!(c.cells[0].members, vec![0, 1, 2]);
    assert_eq!(c.cells[0].point_roles[&2], PointRole::Outlier);
    // Area-weighted centroid.
    let cx = (-1.9 * 1.0 + 1.5 * 6.0) / 22.0;
    assert!((c.cells[0].centroid.0 - cx).abs() < 1e-12);
}

#[test]
fn exact_limit_counts_as_core() {
    let c = run(&[obj(0, 0.0, 0.0, 20.0)], 20.0, 2.0);
    assert_eq!(c.roles[&0], PointRole::Core);
}

#[test]
fn cell_ids_follow_smallest_member_centroid() {
    let objs = [obj(0, 50.0, 0.0, 30.0), obj(1, 10.0, 5.0, 30.0), obj(2, 10.0, -5.0, 30.0)];
    let c = run(&objs, 20.0, 2.0);
    let order: Vec<Vec<u32>> = c.cells.iter().map(|c| c.members.clone()).collect();
    assert_eq!(order, vec![vec![2], vec![1], vec![0]]);
    assert!(c.cells.iter().enumerate().all(|(i, c)| c.cell_id == i as u32));
}

#[test]
fn brute_force_equivalence_over_random_sets() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..200 {
        let n = rng.random_range(0..=50);
        let objs = random_objects(&mut rng, n, 15.0);
        let c = run(&objs, 20.0, 2.0);
        let (roles, parts) = oracle(&objs, 20.0, 2.0);
        for (o, r) in objs.iter().zip(&roles) {
            assert_eq!(c.roles[&o.id], *r);
        }
        assert_eq!(partition(&c), parts);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn permutation_invariance(seed in any::<u64>(), n in 0usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let objs = random_objects(&mut rng, n, 12.0);
        let base = run(&objs, 20.0, 2.0);
        let mut shuffled = objs.clone();
        rand::seq::SliceRandom::shuffle(shuffled.as_mut_slice(), &mut rng);
        let other = run(&shuffled, 20.0, 2.0);
        prop_assert_eq!(&base.roles, &other.roles);
        prop_assert_eq!(&base.cells, &other.cells);
    }

    #[test]
    fn raising_limit_never_creates_core(seed in any::<u64>(), n in 0usize..40, lo in 5.0f64..30.0, extra in 0.0f64..20.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let objs = random_objects(&mut rng, n, 12.0);
        let a = run(&objs, lo, 2.0);
        let b = run(&objs, lo + extra, 2.0);
        for o in &objs {
            if b.roles[&o.id] == PointRole::Core {
                prop_assert_eq!(a.roles[&o.id], PointRole::Core);
            }
        }
    }

    #[test]
    fn every_object_has_one_role(seed in any::<u64>(), n in 0usize..40) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let objs = random_objects(&mut rng, n, 12.0);
        let c = run(&objs, 20.0, 2.0);
        prop_assert_eq!(c.roles.len(), objs.len());
        let mut seen = BTreeSet::new();
        for cell in &c.cells {
            let area: f64 = cell.members.iter().map(|&m| objs[m as usize].area_km2).sum();
            prop_assert!((cell.total_area_km2 - area).abs() < 1e-9);
            for &m in &cell.members {
                prop_assert!(seen.insert(m));
                prop_assert_ne!(c.roles[&m], PointRole::Noise);
            }
        }
        for o in &objs {
            prop_assert_eq!(seen.contains(&o.id), c.roles[&o.id] != PointRole::Noise);
        }
    }
}

#[test]
fn records_round_trip() {
    let g = grid_from(20, 30, |r, c| {
        if (5..15).contains(&r) && ((3..12).contains(&c) || (20..25).contains(&c)) {
            45.0
        } else {
            0.0
        }
    });
    let objs = extract_storm_objects(&g, 35.0);
    let clus = cluster_storm_objects(&objs, 20.0, 2.0, 600, g.projection());
    let text = format_object_records(&objs, &clus);
    assert_eq!(text.lines().count(), objs.len());
    assert!(text.lines().next().unwrap().contains("POLYGON(("));
    let recs = parse_object_records(&text).unwrap();
    assert_eq!(recs.len(), objs.len());
    let cells = cells_from_records(&recs, 600, g.projection());
    assert_eq!(cells.len(), clus.cells.len());
    for (a, b) in cells.iter().zip(&clus.cells) {
        assert_eq!(a.members, b.members);
        assert!((a.total_area_km2 - b.total_area_km2).abs() < 1e-5);
    }
    assert_eq!(format_object_records(
        &recs.iter().map(|r| r.object.clone()).collect::<Vec<_>>(),
        &clus,
    ), text);
}
