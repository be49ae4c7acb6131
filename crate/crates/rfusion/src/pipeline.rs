//! Subcommand implementations. Each function takes validated CLI arguments,
//! reads/writes artifacts through [`crate::formats`] and returns a
//! [`CliResult`] whose error variant decides the process exit code.

use std::path::Path;

use rfusion_core::distributed::{fuse_sequence, pixel_major_to_planar};
use rfusion_core::dynamics::{compute_q0, train, training_pairs, DynamicsParams, TrainHyper, TransitionModel};
use rfusion_core::eval::{misclassification, rmse};
use rfusion_core::raster::{GridImage, Modality};
use rfusion_core::sensor::Observation;
use rfusion_core::sim::{generate_history, generate_scene, inject_clouds, observe_schedule};

use crate::config::{DynVariant, RunConfig};
use crate::error::{runtime, validation, CliResult};
use crate::formats;

/// Validates the optional `RFUSE_THREADS` worker cap (0 = auto). The current
/// engine is sequential, so the value is only checked, not consumed.
pub fn worker_threads() -> CliResult<usize> {
    match std::env::var("RFUSE_THREADS") {
        Err(_) => Ok(0),
        Ok(s) => s
            .trim()
            .parse::<usize>()
            .map_err(|_| validation(format!("RFUSE_THREADS must be a non-negative integer, got {s:?}"))),
    }
}

/// `fuse` must never touch ground truth; any path with a `truth` component
/// is rejected.
fn reject_truth_path(path: &Path, what: &str) -> CliResult<()> {
    if path.components().any(|c| c.as_os_str() == "truth") {
        return Err(validation(format!(
            "{what} {} contains a 'truth' path component; fusion must not read ground truth",
            path.display()
        )));
    }
    Ok(())
}

fn ensure_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir)
        .map_err(|e| runtime(format!("cannot create {}: {e}", dir.display())))
}

/// Generates the synthetic sequence: degraded observations + manifest in
/// `out`, ground truth (latent frames and class maps) under `out/truth`.
pub fn simulate(config: &Path, out: &Path) -> CliResult<()> {
    let cfg = RunConfig::load(config)?;
    let sc = &cfg.scenario;
    let hr = sc.dims();
    ensure_dir(out)?;
    let truth_dir = out.join("truth");
    ensure_dir(&truth_dir)?;

    let scene = generate_scene(sc, cfg.engine.seeds.scene)?;
    let obs = observe_schedule(&scene, sc, cfg.engine.seeds.noise)?;
    let obs = inject_clouds(obs, &sc.clouds, hr)?;

    let mut entries = Vec::new();
    for (k, o) in obs.iter().enumerate() {
        let (nw, nh) = o.operator.out_dims(hr)?;
        let img = GridImage::new(nw, nh, o.operator.bands(), o.y.clone(), o.date, o.modality)?;
        let name = format!("obs_{k:03}.rfr");
        formats::write_raster(&img, &out.join(&name))?;
        entries.push((name, o.modality, o.date));
    }
    formats::SequenceManifest::new(entries).save(&out.join("manifest.json"))?;

    let mut truth_entries = Vec::new();
    for (k, frame) in scene.iter().enumerate() {
        let name = format!("truth_{k:03}.rfr");
        formats::write_raster(frame, &truth_dir.join(&name))?;
        let class: Vec<f64> = sc.class_map(frame.date).iter().map(|&c| c as f64).collect();
        let class_img = GridImage::new(sc.width, sc.height, 1, class, frame.date, Modality::Latent)?;
        formats::write_raster(&class_img, &truth_dir.join(format!("class_{k:03}.rfr")))?;
        truth_entries.push((name, Modality::Latent, frame.date));
    }
    formats::SequenceManifest::new(truth_entries).save(&truth_dir.join("manifest.json"))?;
    println!("simulate: wrote {} observations to {}", obs.len(), out.display());
    Ok(())
}

/// Trains the dynamics network on a generated historical sequence and writes
/// the weights file.
pub fn train_dynamics(config: &Path, out: &Path) -> CliResult<()> {
    let cfg = RunConfig::load(config)?;
    let sc = &cfg.scenario;
    if cfg.dynamics.history_days.len() < 2 {
        return Err(validation("dynamics.history_days needs at least 2 dates"));
    }
    let history = generate_history(sc, &cfg.dynamics.history_days, cfg.engine.seeds.scene)?;
    let q0 = compute_q0(&history)?;
    let pairs = training_pairs(&history, &q0)?;
    let init = DynamicsParams::seeded(sc.bands, cfg.dynamics.init_seed);
    let hyper = TrainHyper {
        lr: cfg.dynamics.lr,
        epochs: cfg.dynamics.epochs,
        lambda1: cfg.dynamics.lambda1,
        lambda2: cfg.dynamics.lambda2,
    };
    let (trained, trace) = train(&init, &pairs, sc.dims(), &hyper)?;
    formats::write_weights(&trained, out)?;
    println!(
        "train-dynamics: {} pairs, objective {:.6} -> {:.6} over {} accepted epochs, weights at {}",
        pairs.len(),
        trace.first().unwrap(),
        trace.last().unwrap(),
        trace.len() - 1,
        out.display()
    );
    Ok(())
}

fn load_observations(cfg: &RunConfig, manifest_path: &Path) -> CliResult<Vec<Observation>> {
    let sc = &cfg.scenario;
    let hr = sc.dims();
    let manifest = formats::SequenceManifest::load(manifest_path)?;
    if manifest.entries.is_empty() {
        return Err(validation("manifest has no entries"));
    }
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut observations = Vec::with_capacity(manifest.entries.len());
    let mut prev_day = manifest.entries[0].date;
    for entry in &manifest.entries {
        let modality = entry.modality()?;
        if modality == Modality::Latent {
            return Err(validation(format!("manifest entry {} is not an observation", entry.path)));
        }
        let path = base.join(&entry.path);
        reject_truth_path(&path, "observation")?;
        let img = formats::read_raster(&path)?;
        let operator = sc.operator(modality);
        let (nw, nh) = operator.out_dims(hr)?;
        if (img.width, img.height, img.bands) != (nw, nh, sc.bands) {
            return Err(validation(format!(
                "raster {} is {}x{}x{}, expected {nw}x{nh}x{} for {} observations",
                entry.path, img.width, img.height, img.bands, sc.bands, entry.modality
            )));
        }
        if img.modality != modality {
            return Err(validation(format!(
                "raster {} modality disagrees with the manifest",
                entry.path
            )));
        }
        observations.push(Observation {
            y: img.data,
            modality,
            date: entry.date,
            delta_days: entry.date - prev_day,
            operator,
            noise: sc.preset.noise(modality),
        });
        prev_day = entry.date;
    }
    Ok(observations)
}

/// Runs the filtering recursion over a manifest of observation rasters and
/// writes per-step mean/variance rasters plus `outliers.csv`.
pub fn fuse(config: &Path, manifest: &Path, weights: Option<&Path>, out: &Path) -> CliResult<()> {
    worker_threads()?;
    reject_truth_path(manifest, "manifest")?;
    let cfg = RunConfig::load(config)?;
    let sc = &cfg.scenario;
    let hr = sc.dims();
    let observations = load_observations(&cfg, manifest)?;

    let history = generate_history(sc, &cfg.dynamics.history_days, cfg.engine.seeds.scene)?;
    let q0 = compute_q0(&history)?;

    let model = match cfg.dynamics.variant {
        DynVariant::RandomWalk => TransitionModel::RandomWalk,
        DynVariant::Nn => {
            let path = weights
                .map(Path::to_path_buf)
                .or_else(|| cfg.dynamics.weights.clone())
                .ok_or_else(|| {
                    validation("dynamics.variant is nn but no weights file was given (--weights or config)")
                })?;
            reject_truth_path(&path, "weights")?;
            TransitionModel::Nn(formats::read_weights(&path)?)
        }
    };

    let results = fuse_sequence(&observations, hr, &model, &q0, &cfg.engine_config())?;

    ensure_dir(out)?;
    let mut entries = Vec::new();
    let mut outlier_rows = String::from("step,measurement_index,z_mean\n");
    for (k, step) in results.iter().enumerate() {
        let mean = pixel_major_to_planar(&step.belief.mean, hr);
        let var = pixel_major_to_planar(&step.belief.variance_diag(), hr);
        let mean_img = GridImage::new(sc.width, sc.height, sc.bands, mean, step.date, Modality::Latent)?;
        let var_img = GridImage::new(sc.width, sc.height, sc.bands, var, step.date, Modality::Latent)?;
        let mean_name = format!("mean_{k:03}.rfr");
        formats::write_raster(&mean_img, &out.join(&mean_name))?;
        formats::write_raster(&var_img, &out.join(format!("var_{k:03}.rfr")))?;
        entries.push((mean_name, Modality::Latent, step.date));
        if let Some(post) = &step.outliers {
            for (i, &z) in post.z_mean.iter().enumerate() {
                outlier_rows.push_str(&format!("{k},{i},{z}\n"));
            }
        }
    }
    formats::SequenceManifest::new(entries).save(&out.join("manifest.json"))?;
    formats::atomic_write(&out.join("outliers.csv"), outlier_rows.as_bytes())?;
    println!("fuse: {} steps written to {}", results.len(), out.display());
    Ok(())
}

/// Compares fused estimates against ground truth and writes `metrics.csv`
/// (`step,date,rmse,mp,notes`).
pub fn evaluate(est: &Path, truth: &Path, out: &Path) -> CliResult<()> {
    let est_manifest = formats::SequenceManifest::load(&est.join("manifest.json"))?;
    let truth_manifest = formats::SequenceManifest::load(&truth.join("manifest.json"))?;
    let mut csv = String::from("step,date,rmse,mp,notes\n");
    for (k, entry) in est_manifest.entries.iter().enumerate() {
        let partner = truth_manifest
            .entries
            .iter()
            .find(|t| t.date == entry.date)
            .ok_or_else(|| validation(format!("no ground-truth frame for date {}", entry.date)))?;
        let est_img = formats::read_raster(&est.join(&entry.path))?;
        let truth_img = formats::read_raster(&truth.join(&partner.path))?;
        let e = rmse(&est_img, &truth_img)?;
        let mp = misclassification(&est_img, &truth_img, 100)?;
        csv.push_str(&format!("{k},{},{e},{mp},\n", entry.date));
    }
    formats::atomic_write(out, csv.as_bytes())?;
    println!("evaluate: {} rows written to {}", est_manifest.entries.len(), out.display());
    Ok(())
}

/// Renders one band of a raster as a 16-bit PGM preview with a scale sidecar.
pub fn export_pgm(input: &Path, band: usize, out: &Path) -> CliResult<()> {
    let img = formats::read_raster(input)?;
    // record only the file name so reruns in different directories stay
    // bit-identical
    let source = input.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    formats::export_pgm(&img, band, &source, out)?;
    println!("export-pgm: {} band {band} -> {}", input.display(), out.display());
    Ok(())
}

/// Writes a ready-to-edit desk-scale configuration.
pub fn init_config(preset: rfusion_core::sensor::Preset, out: &Path) -> CliResult<()> {
    let cfg = RunConfig::desk(preset);
    let mut text = serde_json::to_string_pretty(&cfg)
        .map_err(|e| runtime(format!("config serialization: {e}")))?;
    text.push('\n');
    formats::atomic_write(out, text.as_bytes())?;
    println!("init-config: wrote {}", out.display());
    Ok(())
}
