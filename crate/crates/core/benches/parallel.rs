//! Data-parallel vs. sequential throughput: the scene batch driver and the
//! mask-heavy patch-assignment inner loop.
//!
//! Run with `cargo bench -p subjectforge-core`.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use rayon::prelude::*;

use subjectforge_core::augment::{build_similarity_dict, SimilarityDict};
use subjectforge_core::forge::{
    run_batch_parallel, run_batch_sequential, ForgeConfig, ForgeContext, ScenePlan,
};
use subjectforge_core::gateway::mock::MockConfig;
use subjectforge_core::gateway::Gateway;
use subjectforge_core::geometry::{BBox, RasterMask, Region};
use subjectforge_core::layout::{assign_patches, PlacedSubject};
use subjectforge_core::rng::Rng;
use subjectforge_core::store::NullSink;

struct BenchSetup {
    gateway: Gateway,
    vocabulary: Vec<String>,
    simdict: SimilarityDict,
    config: ForgeConfig,
}

fn setup() -> BenchSetup {
    let gateway = Gateway::mock(MockConfig::default());
    let vocabulary: Vec<String> = [
        "microwave", "desk", "potted plant", "desk cabinet", "trolley", "vase", "carpet", "piano",
        "person", "flower", "chair", "stool", "frame", "cabinet", "blackboard", "ship",
        "sports car", "lamp", "pineapple", "plate", "couch", "toaster", "radiator", "book",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let simdict = build_similarity_dict(&gateway, &vocabulary, 3, 1).unwrap();
    BenchSetup { gateway, vocabulary, simdict, config: ForgeConfig::default() }
}

fn bench_forge_batch(c: &mut Criterion) {
    let setup = setup();
    let ctx = ForgeContext {
        gateway: &setup.gateway,
        vocabulary: &setup.vocabulary,
        simdict: &setup.simdict,
        config: &setup.config,
        global_seed: 77,
    };
    let plans = ScenePlan::for_indices(77, 0..48);

    let mut group = c.benchmark_group("forge_batch");
    group.sample_size(10);
    group.throughput(Throughput::Elements(plans.len() as u64));
    group.bench_function("sequential", |b| {
        b.iter(|| {
            let mut sink = NullSink::default();
            run_batch_sequential(&ctx, &plans, &mut sink).unwrap()
        })
    });
    for workers in [2usize, 4, 8] {
        group.bench_with_input(
            BenchmarkId::new("parallel", workers),
            &workers,
            |b, &workers| {
                b.iter(|| {
                    let mut sink = NullSink::default();
                    run_batch_parallel(&ctx, &plans, workers, &mut sink).unwrap()
                })
            },
        );
    }
    group.finish();
}

fn mask_scenes(count: usize) -> Vec<Vec<PlacedSubject>> {
    let mut rng = Rng::new(0xbe);
    let categories = ["vase", "lamp", "piano", "carpet", "person", "sports car"];
    (0..count)
        .map(|_| {
            (0..6)
                .map(|i| {
                    let w = rng.next_range(8, 40) as u32;
                    let h = rng.next_range(8, 40) as u32;
                    let x0 = rng.next_below((64 - w) as u64 + 1) as u32;
                    let y0 = rng.next_below((64 - h) as u64 + 1) as u32;
                    let bbox = BBox::new(x0, y0, x0 + w, y0 + h).unwrap();
                    let mut mask = RasterMask::empty(64, 64);
                    mask.fill_box(&bbox, true);
                    PlacedSubject {
                        category: categories[i % categories.len()].to_string(),
                        region: Region::Mask(mask),
                    }
                })
                .collect()
        })
        .collect()
}

fn bench_patch_assignment(c: &mut Criterion) {
    let scenes = mask_scenes(256);
    let mut group = c.benchmark_group("patch_assignment");
    group.throughput(Throughput::Elements(scenes.len() as u64));
    group.bench_function("sequential", |b| {
        b.iter(|| {
            scenes
                .iter()
                .map(|subjects| assign_patches(subjects, 64, 64, 8, 0.05).unwrap())
                .fold(0usize, |acc, grid| acc + grid.cell_count())
        })
    });
    group.bench_function("parallel", |b| {
        b.iter(|| {
            scenes
                .par_iter()
                .map(|subjects| assign_patches(subjects, 64, 64, 8, 0.05).unwrap())
                .map(|grid| grid.cell_count())
                .sum::<usize>()
        })
    });
    group.finish();
}

criterion_group!(benches, bench_forge_batch, bench_patch_assignment);
criterion_main!(benches);
