//! Subcommand implementations. Every function returns a process exit code:
//! 0 success, 1 domain failure, 2 usage or configuration error.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use serde_json::json;

use subjectforge_core::augment::{build_similarity_dict, reduce_subjects};
use subjectforge_core::evalkit::{
    render_metric_table, score_sample, sweep_by_subject_count, ScoredSample,
};
use subjectforge_core::forge::{run_batch, ForgeContext, ForgeError, ScenePlan};

use subjectforge_core::imaging::ImageData;
use subjectforge_core::rng::derive_seed;
use subjectforge_core::store::{
    read_manifest, report_stats, resume_plan, validate_manifest, CommitReceipt, ManifestSink,
    PipelineStats, RecordSink, Stage, StoreError, TrainingRecord,
};
use subjectforge_core::tts::{
    best_score_curve, generate_branches, realize_and_score, select_best, GatewayGenerator,
    GatewayPlanner, Generator, MockGenerator, MockPlanner, Planner,
};

use crate::config::{load_vocabulary, BackendMode, RunConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_DOMAIN: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

fn fail_usage(message: impl AsRef<str>) -> i32 {
    eprintln!("error: {}", message.as_ref());
    EXIT_USAGE
}

fn fail_domain(message: impl AsRef<str>) -> i32 {
    eprintln!("error: {}", message.as_ref());
    EXIT_DOMAIN
}

/// Wraps the manifest sink with optional JSON event logging.
struct LoggingSink<S> {
    inner: S,
    log_json: bool,
}

impl<S: RecordSink> RecordSink for LoggingSink<S> {
    fn commit(
        &mut self,
        record: &TrainingRecord,
        images: &[(String, ImageData)],
    ) -> Result<CommitReceipt, StoreError> {
        let receipt = self.inner.commit(record, images)?;
        if self.log_json {
            eprintln!(
                "{}",
                json!({"event": "scene", "scene_id": record.scene_id, "status": "committed",
                       "subjects": record.subjects.len()})
            );
        }
        Ok(receipt)
    }

    fn scene_failed(&mut self, scene_id: &str, stage: Stage, detail: &str) {
        if self.log_json {
            eprintln!(
                "{}",
                json!({"event": "scene", "scene_id": scene_id, "status": "failed",
                       "stage": stage.as_str(), "detail": detail})
            );
        }
    }
}

pub fn cmd_forge(config: &RunConfig, scenes: u64, log_json: bool) -> i32 {
    if let Err(e) = config.validate() {
        return fail_usage(e);
    }
    let vocabulary = match load_vocabulary(&config.vocabulary_path) {
        Ok(v) => v,
        Err(e) => return fail_usage(e),
    };
    let gateway = match config.build_gateway() {
        Ok(g) => g,
        Err(e) => return fail_usage(e),
    };
    let forge_config = config.forge_config();
    if let Err(e) = forge_config.validate(vocabulary.len()) {
        return fail_usage(e.to_string());
    }

    let simdict = match build_similarity_dict(
        &gateway,
        &vocabulary,
        3,
        derive_seed(config.global_seed, "simdict"),
    ) {
        Ok(d) => d,
        Err(e) => return fail_domain(format!("simdict stage failed: {e}")),
    };

    let sink = match ManifestSink::new(&config.output_root) {
        Ok(s) => s,
        Err(e) => return fail_usage(format!("output root: {e}")),
    };
    let manifest_path = sink.manifest_path().to_path_buf();

    // Persist the dictionary next to the dataset it conditions.
    let dict_path = config.output_root.join("similarity_dict.json");
    match serde_json::to_string_pretty(&simdict) {
        Ok(body) => {
            if let Err(e) = std::fs::write(&dict_path, body) {
                return fail_domain(format!("similarity dict write: {e}"));
            }
        }
        Err(e) => return fail_domain(format!("similarity dict serialize: {e}")),
    }

    let plans = ScenePlan::for_indices(config.global_seed, 0..scenes);
    let requested: Vec<String> = plans.iter().map(|p| p.scene_id.clone()).collect();
    let pending = match resume_plan(&manifest_path, &requested) {
        Ok(p) => p,
        Err(e) => return fail_domain(format!("resume: {e}")),
    };
    let pending_plans: Vec<ScenePlan> =
        plans.into_iter().filter(|p| pending.contains(&p.scene_id)).collect();
    eprintln!(
        "forging {} scene(s) ({} already committed) into {}",
        pending_plans.len(),
        scenes as usize - pending_plans.len(),
        config.output_root.display()
    );

    let ctx = ForgeContext {
        gateway: &gateway,
        vocabulary: &vocabulary,
        simdict: &simdict,
        config: &forge_config,
        global_seed: config.global_seed,
    };
    let mut sink = LoggingSink { inner: sink, log_json };
    let stats = match run_batch(&ctx, &pending_plans, config.workers, &mut sink) {
        Ok(s) => s,
        Err(ForgeError::InvalidConfig(e)) => return fail_usage(e),
        Err(ForgeError::Store(e)) => return fail_domain(format!("commit: {e}")),
    };

    let stats_path = config.output_root.join("stats.json");
    match serde_json::to_string_pretty(&stats) {
        Ok(body) => {
            if let Err(e) = std::fs::write(&stats_path, body) {
                return fail_domain(format!("stats write: {e}"));
            }
        }
        Err(e) => return fail_domain(format!("stats serialize: {e}")),
    }
    print!("{}", report_stats(&stats));

    let committed = match read_manifest(&manifest_path) {
        Ok(records) => records.len(),
        Err(e) => return fail_domain(format!("manifest readback: {e}")),
    };
    if committed >= 1 {
        EXIT_OK
    } else {
        fail_domain("no scene survived the pipeline")
    }
}

pub fn cmd_validate(manifest: &Path) -> i32 {
    if !manifest.exists() {
        return fail_usage(format!("manifest {} does not exist", manifest.display()));
    }
    match validate_manifest(manifest) {
        Ok(0) => {
            eprintln!("warning: manifest {} is empty", manifest.display());
            EXIT_OK
        }
        Ok(count) => {
            println!("{count} record(s) valid");
            EXIT_OK
        }
        Err(StoreError::Io(e)) => fail_usage(format!("manifest read: {e}")),
        Err(e) => fail_domain(e.to_string()),
    }
}

pub fn cmd_stats(stats_path: &Path) -> i32 {
    let body = match std::fs::read_to_string(stats_path) {
        Ok(b) => b,
        Err(e) => return fail_usage(format!("stats {}: {e}", stats_path.display())),
    };
    let stats: PipelineStats = match serde_json::from_str(&body) {
        Ok(s) => s,
        Err(e) => return fail_domain(format!("stats parse: {e}")),
    };
    if !stats.check_identity() {
        return fail_domain("stage counters violate attempted = passed + failed");
    }
    print!("{}", report_stats(&stats));
    EXIT_OK
}

pub fn cmd_augment(manifest: &Path, out_manifest: Option<&Path>, rewrite_cot: bool) -> i32 {
    let records = match read_manifest(manifest) {
        Ok(r) => r,
        Err(StoreError::Io(e)) => return fail_usage(format!("manifest read: {e}")),
        Err(e) => return fail_domain(e.to_string()),
    };
    let out_path: PathBuf = out_manifest.map(Path::to_path_buf).unwrap_or_else(|| {
        manifest.parent().unwrap_or_else(|| Path::new(".")).join("derived.jsonl")
    });

    let mut derived_all = Vec::new();
    for record in &records {
        if record.provenance.derivation_step.is_some() {
            continue;
        }
        match reduce_subjects(record, rewrite_cot) {
            Ok(mut derived) => derived_all.append(&mut derived),
            Err(e) => return fail_domain(e.to_string()),
        }
    }
    let derived_ids: Vec<String> = derived_all.iter().map(|r| r.scene_id.clone()).collect();
    let pending = match resume_plan(&out_path, &derived_ids) {
        Ok(p) => p,
        Err(e) => return fail_domain(format!("resume: {e}")),
    };
    let mut committed = 0usize;
    for record in &derived_all {
        if !pending.contains(&record.scene_id) {
            continue;
        }
        if let Err(e) = subjectforge_core::store::append_record(&out_path, record) {
            return fail_domain(e.to_string());
        }
        committed += 1;
    }
    println!(
        "{}",
        json!({"base_records": records.len(), "derived_committed": committed,
               "derived_total": derived_all.len(), "out_manifest": out_path})
    );
    EXIT_OK
}

fn load_image(path: &Path) -> Result<ImageData, String> {
    let bytes = std::fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
    ImageData::from_png(bytes).map_err(|e| format!("{}: {e}", path.display()))
}

/// Subject crops for plan selection: PNG files in the directory, sorted by
/// name. The category label is the file stem with any leading index digits
/// and separator stripped (`0_ship.png` -> "ship").
fn load_subjects(dir: &Path) -> Result<(Vec<ImageData>, Vec<String>), String> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| format!("{}: {e}", dir.display()))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|e| e == "png").unwrap_or(false))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(format!("no .png subject images in {}", dir.display()));
    }
    let mut images = Vec::with_capacity(paths.len());
    let mut categories = Vec::with_capacity(paths.len());
    for path in &paths {
        images.push(load_image(path)?);
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("subject");
        let label = stem
            .trim_start_matches(|c: char| c.is_ascii_digit())
            .trim_start_matches(['_', '-'])
            .replace('_', " ");
        categories.push(if label.is_empty() { stem.to_string() } else { label });
    }
    Ok((images, categories))
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_select(
    config: &RunConfig,
    n: usize,
    seed: u64,
    instruction_path: &Path,
    subjects_dir: &Path,
    out_dir: &Path,
    categories_override: Option<Vec<String>>,
) -> i32 {
    if n < 1 {
        return fail_usage("--n must be >= 1");
    }
    let instruction = match std::fs::read_to_string(instruction_path) {
        Ok(t) => t.trim().to_string(),
        Err(e) => return fail_usage(format!("instruction {}: {e}", instruction_path.display())),
    };
    if instruction.is_empty() {
        return fail_usage("instruction file is empty");
    }
    let (subjects, derived_categories) = match load_subjects(subjects_dir) {
        Ok(pair) => pair,
        Err(e) => return fail_usage(e),
    };
    let categories = categories_override.unwrap_or(derived_categories);
    let gateway = match config.build_gateway() {
        Ok(g) => g,
        Err(e) => return fail_usage(e),
    };

    let mock_planner;
    let gateway_planner;
    let planner: &dyn Planner = match config.backend {
        BackendMode::Mock => {
            mock_planner = MockPlanner {
                categories,
                image_size: config.mock_image_size,
                m: config.m,
                lambda: config.lambda,
            };
            &mock_planner
        }
        BackendMode::Live => {
            gateway_planner = GatewayPlanner { gateway: &gateway };
            &gateway_planner
        }
    };
    let mock_generator;
    let gateway_generator;
    let generator: &dyn Generator = match config.backend {
        BackendMode::Mock => {
            mock_generator = MockGenerator { image_size: config.mock_image_size };
            &mock_generator
        }
        BackendMode::Live => {
            gateway_generator = GatewayGenerator { gateway: &gateway };
            &gateway_generator
        }
    };

    let mut candidates = match generate_branches(planner, &instruction, &subjects, n, seed) {
        Ok(c) => c,
        Err(e) => return fail_domain(e.to_string()),
    };
    if let Err(e) = realize_and_score(&mut candidates, generator, &gateway, &instruction) {
        return fail_domain(e.to_string());
    }
    let (_, best) = match select_best(&candidates) {
        Ok(pair) => pair,
        Err(e) => return fail_domain(e.to_string()),
    };

    if let Err(e) = std::fs::create_dir_all(out_dir) {
        return fail_domain(format!("out dir: {e}"));
    }
    let mut selected_path = None;
    for candidate in &candidates {
        let Some(image) = &candidate.image else { continue };
        let path = out_dir.join(format!("candidate_{:02}.png", candidate.branch_index));
        if let Err(e) = std::fs::write(&path, &image.png) {
            return fail_domain(format!("write {}: {e}", path.display()));
        }
        if candidate.branch_index == best.branch_index {
            selected_path = Some(path);
        }
    }

    let standard_ns: Vec<usize> = {
        let mut ns: Vec<usize> = [2usize, 4, 8, 16].iter().copied().filter(|&v| v <= n).collect();
        if !ns.contains(&n) {
            ns.push(n);
        }
        ns
    };
    let curve = best_score_curve(&candidates, &standard_ns);
    let output = json!({
        "selected_index": best.branch_index,
        "selected_score": best.score,
        "selected_image": selected_path,
        "scores": candidates.iter().map(|c| json!({
            "branch": c.branch_index,
            "score": c.score,
        })).collect::<Vec<_>>(),
        "curve": curve.iter().map(|(n, best)| json!({"n": n, "best_score": best})).collect::<Vec<_>>(),
    });
    println!("{output:#}");
    EXIT_OK
}

#[derive(Debug, Deserialize)]
struct EvalEntry {
    generated: String,
    references: Vec<String>,
    instruction: String,
    subject_count: u32,
}

pub fn cmd_eval(config: &RunConfig, manifest: &Path, out: Option<&Path>) -> i32 {
    let text = match std::fs::read_to_string(manifest) {
        Ok(t) => t,
        Err(e) => return fail_usage(format!("eval manifest {}: {e}", manifest.display())),
    };
    let base_dir = manifest.parent().unwrap_or_else(|| Path::new("."));
    let embedder_a = match config.build_gateway() {
        Ok(g) => g,
        Err(e) => return fail_usage(e),
    };
    let embedder_b = match config.build_embedder_b() {
        Ok(g) => g,
        Err(e) => return fail_usage(e),
    };

    let mut samples = Vec::new();
    let mut skipped = 0usize;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entry: EvalEntry = match serde_json::from_str(line) {
            Ok(e) => e,
            Err(e) => return fail_domain(format!("eval manifest line {}: {e}", i + 1)),
        };
        let scored = (|| -> Result<ScoredSample, String> {
            let generated = load_image(&base_dir.join(&entry.generated))?;
            let references: Vec<ImageData> = entry
                .references
                .iter()
                .map(|r| load_image(&base_dir.join(r)))
                .collect::<Result<_, _>>()?;
            let metrics = score_sample(
                &generated,
                &references,
                &entry.instruction,
                &embedder_a,
                &embedder_b,
            )
            .map_err(|e| e.to_string())?;
            Ok(ScoredSample { subject_count: entry.subject_count, metrics })
        })();
        match scored {
            Ok(sample) => samples.push(sample),
            Err(e) => {
                eprintln!("warning: sample {} skipped: {e}", i + 1);
                skipped += 1;
            }
        }
    }

    let report = match sweep_by_subject_count(&samples) {
        Ok(r) => r,
        Err(e) => return fail_domain(e.to_string()),
    };
    print!("{}", render_metric_table(&report));
    if skipped > 0 {
        eprintln!("{skipped} sample(s) skipped");
    }
    if let Some(out) = out {
        let body = json!({"report": report, "skipped": skipped});
        if let Err(e) = std::fs::write(out, serde_json::to_string_pretty(&body).unwrap()) {
            return fail_domain(format!("report write: {e}"));
        }
    }
    if samples.is_empty() {
        fail_domain("no sample could be scored")
    } else {
        EXIT_OK
    }
}
