//! Pixel-level brute-force oracle for patch assignment.
//!
//! The oracle maps every pixel to its patch by direct division (remainder
//! columns and rows clamp to the last index), accumulates per-patch
//! intersections by scanning region pixels one at a time, and applies the
//! dynamic-threshold rule directly. It shares no code with the assignment
//! path it checks.

use std::collections::BTreeSet;

use subjectforge_core::geometry::{BBox, RasterMask, Region};
use subjectforge_core::layout::{assign_patches, PlacedSubject};
use subjectforge_core::rng::Rng;

struct OracleScene {
    subjects: Vec<PlacedSubject>,
    width: u32,
    height: u32,
    m: u32,
    lambda: f64,
}

fn pixel_patch_index(x: u32, y: u32, width: u32, height: u32, m: u32) -> usize {
    let cell_w = width / m;
    let cell_h = height / m;
    let col = (x / cell_w).min(m - 1);
    let row = (y / cell_h).min(m - 1);
    (row * m + col) as usize
}

fn region_pixels(region: &Region, width: u32, height: u32) -> Vec<(u32, u32)> {
    let mut pixels = Vec::new();
    for y in 0..height {
        for x in 0..width {
            let inside = match region {
                Region::Box(b) => x >= b.x_min && x < b.x_max && y >= b.y_min && y < b.y_max,
                Region::Mask(mask) => mask.get(x, y),
            };
            if inside {
                pixels.push((x, y));
            }
        }
    }
    pixels
}

fn oracle_assign(scene: &OracleScene) -> Vec<BTreeSet<String>> {
    let cell_count = (scene.m * scene.m) as usize;
    let mut patch_areas = vec![0u64; cell_count];
    for y in 0..scene.height {
        for x in 0..scene.width {
            patch_areas[pixel_patch_index(x, y, scene.width, scene.height, scene.m)] += 1;
        }
    }

    let mut cells: Vec<BTreeSet<String>> = vec![BTreeSet::new(); cell_count];
    for subject in &scene.subjects {
        let pixels = region_pixels(&subject.region, scene.width, scene.height);
        let mut intersections = vec![0u64; cell_count];
        for &(x, y) in &pixels {
            intersections[pixel_patch_index(x, y, scene.width, scene.height, scene.m)] += 1;
        }
        let region_area = pixels.len() as u64;
        let mut ious = vec![0.0f64; cell_count];
        for i in 0..cell_count {
            if region_area == 0 {
                continue;
            }
            let union = region_area + patch_areas[i] - intersections[i];
            ious[i] = intersections[i] as f64 / union as f64;
        }
        let mut sum = 0.0;
        let mut k = 0u32;
        for &iou in &ious {
            if iou > 0.0 {
                sum += iou;
                k += 1;
            }
        }
        let tau = if k == 0 { 0.0 } else { scene.lambda * (sum / k as f64) };
        for i in 0..cell_count {
            if ious[i] > tau {
                cells[i].insert(subject.category.clone());
            }
        }
    }
    cells
}

fn random_scene(rng: &mut Rng, width: u32, height: u32) -> OracleScene {
    let m = [2u32, 4, 8][rng.next_below(3) as usize];
    let subject_count = rng.next_range(1, 6) as usize;
    let categories = ["vase", "lamp", "piano", "carpet", "person", "sports car"];
    let mut subjects = Vec::with_capacity(subject_count);
    for i in 0..subject_count {
        let w = rng.next_range(1, (width / 2) as u64) as u32;
        let h = rng.next_range(1, (height / 2) as u64) as u32;
        let x0 = rng.next_below((width - w) as u64 + 1) as u32;
        let y0 = rng.next_below((height - h) as u64 + 1) as u32;
        let bbox = BBox::new(x0, y0, x0 + w, y0 + h).unwrap();
        let region = if rng.next_bool(0.5) {
            Region::Box(bbox)
        } else {
            // Speckled mask inside the box; occasionally empty.
            let mut mask = RasterMask::empty(width, height);
            let density = rng.next_f64();
            for y in bbox.y_min..bbox.y_max {
                for x in bbox.x_min..bbox.x_max {
                    if rng.next_bool(density) {
                        mask.set(x, y, true);
                    }
                }
            }
            Region::Mask(mask)
        };
        subjects.push(PlacedSubject {
            category: categories[i % categories.len()].to_string(),
            region,
        });
    }
    OracleScene { subjects, width, height, m, lambda: 0.05 }
}

#[test]
fn assignment_matches_pixel_oracle_on_random_scenes() {
    let mut rng = Rng::new(0x9a5c_e11a);
    for case in 0..200 {
        let scene = random_scene(&mut rng, 64, 64);
        let grid = assign_patches(&scene.subjects, scene.width, scene.height, scene.m, scene.lambda)
            .unwrap();
        let expected = oracle_assign(&scene);
        for (i, cell) in expected.iter().enumerate() {
            assert_eq!(
                grid.cell(i),
                cell,
                "case {case}: cell {i} diverges (m = {})",
                scene.m
            );
        }
    }
}

#[test]
fn assignment_matches_oracle_on_uneven_dimensions() {
    let mut rng = Rng::new(0x51ab);
    for _ in 0..40 {
        let scene = random_scene(&mut rng, 66, 53);
        let grid = assign_patches(&scene.subjects, scene.width, scene.height, scene.m, scene.lambda)
            .unwrap();
        let expected = oracle_assign(&scene);
        for (i, cell) in expected.iter().enumerate() {
            assert_eq!(grid.cell(i), cell, "cell {i} diverges on 66x53");
        }
    }
}
