use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use nlmvs_core::io::append_loss_csv;
use nlmvs_core::metrics::default_cap;
use nlmvs_core::inference::infer_with_features;
use nlmvs_core::sweep::compute_features;
use nlmvs_core::{
    evaluate, fuse, generate_scene, load_scene, sample_inverse_depth, save_scene, train,
    CheckpointMeta, DepthMap, FusionMode, MvsError, ParameterStore, PlyEncoding, PointCloud, Result, RunConfig, Scalar,
    Scene, SceneSpec,
};
use nlmvs_tensor::{decode_checkpoint, encode_checkpoint};
use serde::Serialize;

use crate::{Cli, Command, Eval, Fuse, GenScene, Infer, Mode, Precision, Train};

pub fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.global.threads {
        if n == 0 {
            return Err(MvsError::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| MvsError::Config(format!("thread pool: {e}")))?;
    }
    let cfg = match &cli.global.config {
        Some(path) => RunConfig::read(path)?,
        None => RunConfig::default(),
    };
    match (&cli.command, cli.global.precision) {
        (Command::GenScene(a), _) => gen_scene(a),
        (Command::Train(a), Precision::F32) => run_train::<f32>(a, cfg),
        (Command::Train(a), Precision::F64) => run_train::<f64>(a, cfg),
        (Command::Infer(a), Precision::F32) => run_infer::<f32>(a, cfg),
        (Command::Infer(a), Precision::F64) => run_infer::<f64>(a, cfg),
        (Command::Fuse(a), _) => run_fuse(a, cfg),
        (Command::Eval(a), _) => run_eval(a, cfg),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| MvsError::Format(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| io_error(path, e))
}

fn io_error(path: &Path, e: std::io::Error) -> MvsError {
    MvsError::Io {
        path: path.display().to_string(),
        source: e,
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn depth_file(i: usize) -> String {
    format!("depth_{i:03}.nr2d")
}

fn gen_scene(a: &GenScene) -> Result<()> {
    let text = fs::read_to_string(&a.spec).map_err(|e| io_error(&a.spec, e))?;
    let mut spec: SceneSpec =
        toml::from_str(&text).map_err(|e| MvsError::Config(format!("{}: {e}", a.spec.display())))?;
    if let Some(seed) = a.seed {
        spec.texture_seed = seed;
    }
    info!("scene spec:\n{}", toml::to_string(&spec).unwrap_or_default());
    let s = generate_scene::<f64>(&spec)?;
    fs::create_dir_all(&a.out).map_err(|e| io_error(&a.out, e))?;
    save_scene(&a.out, &s.scene, Some(&s.gt_cloud))?;
    info!(
        "wrote {} views and {} ground-truth points to {}",
        s.scene.len(),
        s.gt_cloud.len(),
        a.out.display()
    );
    Ok(())
}

/// Scene directories under `dir`: `dir` itself when it holds a manifest,
/// otherwise its immediate subdirectories that do, in name order.
fn scene_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    if dir.join("scene.toml").is_file() {
        return Ok(vec![dir.to_path_buf()]);
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| io_error(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("scene.toml").is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(MvsError::Invalid(format!("no scene directories under {}", dir.display())));
    }
    Ok(dirs)
}

fn read_params<T: Scalar>(path: &Path) -> Result<ParameterStore<T>> {
    let bytes = fs::read(path).map_err(|e| io_error(path, e))?;
    Ok(decode_checkpoint(&bytes)?)
}

fn write_params<T: Scalar>(path: &Path, store: &ParameterStore<T>) -> Result<()> {
    let tmp = with_suffix(path, ".tmp");
    fs::write(&tmp, encode_checkpoint(store)).map_err(|e| io_error(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io_error(path, e))
}

fn run_train<T: Scalar>(a: &Train, mut cfg: RunConfig) -> Result<()> {
    if let Some(e) = a.epochs {
        cfg.train.epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.train.lr = lr;
    }
    if let Some(p) = a.planes {
        cfg.train.planes = p;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if a.ablate_nonlocal {
        cfg.model.regularizer.nonlocal = false;
    }
    let (mut store, first_epoch) = match &a.resume {
        Some(ckpt) => {
            let meta = CheckpointMeta::read(CheckpointMeta::path_for(ckpt))?;
            if meta.model != cfg.model {
                if cli_model_given(a, &cfg) {
                    return Err(MvsError::Config(format!(
                        "model settings differ from those stored with {}",
                        ckpt.display()
                    )));
                }
                cfg.model = meta.model.clone();
            }
            let store = read_params::<T>(ckpt)?;
            cfg.model.check_compatible(&store)?;
            info!("resuming from {} after epoch {}", ckpt.display(), meta.epoch);
            (store, meta.epoch)
        }
        None => (cfg.model.init_params::<T>(cfg.train.seed)?, 0),
    };
    cfg.validate()?;
    info!("resolved configuration:\n{}", cfg.to_toml());

    let scenes: Vec<Scene<T>> = scene_dirs(&a.scenes)?
        .iter()
        .map(|d| load_scene::<T>(d).map(|l| l.scene))
        .collect::<Result<_>>()?;
    let loss_csv = a.loss_csv.clone().unwrap_or_else(|| with_suffix(&a.out, ".loss.csv"));
    if a.resume.is_none() && loss_csv.exists() {
        fs::remove_file(&loss_csv).map_err(|e| io_error(&loss_csv, e))?;
    }
    let meta_path = CheckpointMeta::path_for(&a.out);
    let model = cfg.model.clone();
    train(&mut store, &cfg.model, &cfg.train, &scenes, first_epoch, |epoch, loss, params| {
        write_params(&a.out, params)?;
        CheckpointMeta {
            epoch,
            model: model.clone(),
        }
        .write(&meta_path)?;
        append_loss_csv(&loss_csv, &[(epoch, loss)])
    })?;
    info!("checkpoint {} and loss log {}", a.out.display(), loss_csv.display());
    Ok(())
}

/// True when the run configuration sets model options explicitly, so that a
/// mismatch with a resumed checkpoint is an error rather than a default.
fn cli_model_given(a: &Train, cfg: &RunConfig) -> bool {
    a.ablate_nonlocal || cfg.model != nlmvs_core::ModelConfig::default()
}

fn run_infer<T: Scalar>(a: &Infer, mut cfg: RunConfig) -> Result<()> {
    if let Some(p) = a.planes {
        cfg.infer.planes = p;
    }
    let meta_path = CheckpointMeta::path_for(&a.ckpt);
    if meta_path.is_file() {
        cfg.model = CheckpointMeta::read(&meta_path)?.model;
    } else {
        warn!("{} not found; using the configured model", meta_path.display());
    }
    cfg.validate()?;
    info!("resolved configuration:\n{}", cfg.to_toml());
    let store = read_params::<T>(&a.ckpt)?;
    cfg.model.check_compatible(&store)?;
    let scene = load_scene::<T>(&a.scene)?.scene;
    let refs: Vec<usize> = match a.reference {
        Some(r) if r >= scene.len() => {
            return Err(MvsError::Invalid(format!("reference {r} out of range for {} views", scene.len())))
        }
        Some(r) => vec![r],
        None => (0..scene.len()).collect(),
    };
    let hyps = sample_inverse_depth(scene.d_min, scene.d_max, cfg.infer.planes)?;
    let features = compute_features(&store, &cfg.model.features, &scene.views)?;
    let maps: Vec<DepthMap> = refs
        .iter()
        .map(|&r| infer_with_features(&store, &cfg.model, &scene, &features, r, &hyps).map(|e| e.map))
        .collect::<Result<_>>()?;
    match a.reference {
        Some(_) => maps[0].write(&a.out)?,
        None => {
            fs::create_dir_all(&a.out).map_err(|e| io_error(&a.out, e))?;
            for (r, m) in refs.iter().zip(&maps) {
                m.write(a.out.join(depth_file(*r)))?;
            }
        }
    }
    info!("inferred {} depth maps with {} planes", maps.len(), hyps.len());
    Ok(())
}

fn run_fuse(a: &Fuse, mut cfg: RunConfig) -> Result<()> {
    match (a.mode, a.tau) {
        (Some(Mode::Dynamic), Some(_)) => {
            return Err(MvsError::Config("--tau applies to fixed mode only".into()));
        }
        (Some(Mode::Dynamic), None) => cfg.fusion.mode = FusionMode::Dynamic,
        (Some(Mode::Fixed), _) | (None, Some(_)) => cfg.fusion.mode = FusionMode::Fixed,
        (None, None) => {}
    }
    if let Some(t) = a.tau {
        cfg.fusion.fixed_tau = t;
    }
    cfg.validate()?;
    info!("resolved configuration:\n{}", cfg.to_toml());
    let scene = load_scene::<f64>(&a.scene)?.scene;
    let maps: Vec<DepthMap> = (0..scene.len())
        .map(|i| DepthMap::read(a.depths.join(depth_file(i))))
        .collect::<Result<_>>()?;
    let cameras = scene.cameras();
    let images: Vec<&[f64]> = scene.views.iter().map(|v| v.image.data()).collect();
    let fused = fuse(&cameras, &images, &maps, &cfg.fusion)?;
    if fused.cloud.is_empty() {
        warn!("writing an empty cloud");
    }
    let encoding = if a.ascii {
        PlyEncoding::Ascii
    } else {
        PlyEncoding::BinaryLittleEndian
    };
    fused.cloud.save_ply(&a.out, encoding)?;
    let report = a.report.clone().unwrap_or_else(|| with_suffix(&a.out, ".report.json"));
    write_json(&report, &fused.report)?;
    info!(
        "fused {} points ({:?} mode) into {}",
        fused.cloud.len(),
        cfg.fusion.mode,
        a.out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    accuracy: f64,
    completeness: f64,
    overall: f64,
    cap: f64,
    points: usize,
    gt_points: usize,
}

/// Median ground-truth depth over every valid pixel of every view, or over
/// the cloud's depths in the first view when no depth maps are stored.
fn median_depth(scene: &Scene<f64>, gt: &PointCloud) -> Result<f64> {
    let mut depths: Vec<f64> = scene
        .gt_depths
        .iter()
        .flatten()
        .flat_map(|m| m.depth.iter().zip(&m.prob).filter(|(_, &p)| p > 0.0).map(|(&d, _)| d))
        .collect();
    if depths.is_empty() {
        let cam = &scene.views[0].camera;
        depths = gt
            .points
            .iter()
            .filter_map(|p| cam.project(&(*p).into()).ok().map(|(_, d)| d))
            .collect();
    }
    if depths.is_empty() {
        return Err(MvsError::Invalid("no ground-truth depths to derive a distance cap".into()));
    }
    depths.sort_by(f64::total_cmp);
    Ok(depths[depths.len() / 2])
}

fn run_eval(a: &Eval, mut cfg: RunConfig) -> Result<()> {
    if let Some(c) = a.cap {
        cfg.eval.cap = Some(c);
    }
    cfg.validate()?;
    let cloud = PointCloud::load_ply(&a.cloud)?;
    let loaded = load_scene::<f64>(&a.gt)?;
    let gt = loaded.gt_cloud()?;
    let cap = match cfg.eval.cap {
        Some(c) => c,
        None => {
            let scene = &loaded.scene;
            let hyps = sample_inverse_depth(scene.d_min, scene.d_max, cfg.infer.planes)?;
            default_cap(&hyps, median_depth(scene, &gt)?)
        }
    };
    info!("distance cap {cap}");
    let m = evaluate(&cloud.points, &gt.points, cap)?;
    let report = EvalReport {
        accuracy: m.accuracy,
        completeness: m.completeness,
        overall: m.overall,
        cap: m.cap,
        points: cloud.len(),
        gt_points: gt.len(),
    };
    match &a.out {
        Some(path) => write_json(path, &report)?,
        None => println!(
            "{}",
            serde_json::to_string_pretty(&report).map_err(|e| MvsError::Format(e.to_string()))?
        ),
    }
    info!(
        "accuracy {:.5}, completeness {:.5}, overall {:.5}",
        m.accuracy, m.completeness, m.overall
    );
    Ok(())
}
