//! The subcommands. Each writes its artifacts and a copy of the effective
//! configuration into a fresh run directory and returns a one-line summary.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use sha2::{Digest, Sha256};
use vpcnet::datagen::{crop_to_visible_ratio, make_pair_with};
use vpcnet::geometry::{normalize_to_unit_box, sample_mesh_uniform, PointCloud};
use vpcnet::metrics::{evaluate, MetricReport, EVAL_EMD_MAX_POINTS};
use vpcnet::network::Network;
use vpcnet::registration::{
    registration_csv, registration_experiment, IcpConfig, RegistrationPair, RigidTransform, RotationMetric,
};
use vpcnet::tensor::ParamStore;
use vpcnet::training::{loss_csv, TrainState, TrainingPair};

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::io::{is_cloud_file, is_mesh_file, read_cloud, read_mesh, write_cloud};

/// What a finished command reports.
#[derive(Clone, Debug)]
pub struct Outcome {
    pub run_dir: PathBuf,
    pub summary: String,
}

pub const MANIFEST_HEADER: &str = "id,view,points,seed";
pub const ROBUSTNESS_HEADER: &str = "visible_ratio,trials,cd,emd,overlap_ratio";
pub const DEFAULT_RATIOS: [f64; 4] = [0.25, 0.4, 0.6, 0.8];

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

/// Creates `<root>/<command>-<timestamp>`, adding a counter if that name is
/// taken, and writes the configuration echo into it.
pub fn create_run_dir(root: &Path, command: &str, cfg: &RunConfig) -> Result<PathBuf> {
    create_dir(root)?;
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
    let base = format!("{command}-{stamp}");
    let mut dir = root.join(&base);
    let mut k = 1;
    while dir.exists() {
        k += 1;
        dir = root.join(format!("{base}-{k}"));
    }
    create_dir(&dir)?;
    write_file(&dir.join("config.txt"), format!("# vpcnet {command}\n{}", cfg.to_text()))?;
    Ok(dir)
}

/// Hash of `bytes` framed the way git frames a blob, as hex.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Seed for one instance: the run seed mixed with a hash of its id, so it
/// does not depend on which other files are present.
pub fn instance_seed(seed: u64, id: &str) -> u64 {
    let d = Sha256::digest(id.as_bytes());
    seed ^ u64::from_le_bytes(d[..8].try_into().unwrap())
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = std::fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
    let mut out = Vec::new();
    for entry in rd {
        out.push(entry.map_err(|e| CliError::io(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn load_network(path: &Path) -> Result<(Network, String)> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    let net = Network::from_params(ParamStore::from_bytes(&bytes)?)?;
    Ok((net, content_hash(&bytes)))
}

pub fn datagen(cfg: &RunConfig, meshes: &Path) -> Result<Outcome> {
    let files: Vec<PathBuf> = sorted_entries(meshes)?
        .into_iter()
        .filter(|p| p.is_file() && is_mesh_file(p))
        .collect();
    if files.is_empty() {
        return Err(CliError::EmptyInput(format!("no .obj or .ply meshes in {}", meshes.display())));
    }
    let ids: std::collections::HashSet<String> = files.iter().map(|p| stem(p)).collect();
    if ids.len() != files.len() {
        return Err(CliError::Mismatch("two meshes share a file stem".into()));
    }
    let run = create_run_dir(&cfg.out, "datagen", cfg)?;
    let gen = cfg.datagen();
    let results = files
        .par_iter()
        .map(|path| -> Result<Option<String>> {
            let id = stem(path);
            let seed = instance_seed(cfg.seed, &id);
            let pair = match read_mesh(path).and_then(|m| Ok(make_pair_with(&m, &gen, seed)?)) {
                Ok(p) => p,
                Err(e) => {
                    log::warn!("skipping {}: {e}", path.display());
                    return Ok(None);
                }
            };
            // everything is stored in the complete cloud's unit box
            let (complete, sim) = normalize_to_unit_box(&pair.complete, &pair.complete)?;
            let dir = run.join(&id);
            create_dir(&dir)?;
            write_cloud(&dir.join("complete.ply"), &complete)?;
            let mut rows = String::new();
            for (k, partial) in pair.partials.iter().enumerate() {
                write_cloud(&dir.join(format!("partial_{k}.ply")), &sim.apply_cloud(partial))?;
                let _ = writeln!(rows, "{id},{k},{},{seed}", partial.len());
            }
            Ok(Some(rows))
        })
        .collect::<Result<Vec<_>>>()?;
    let done = results.iter().flatten().count();
    if done == 0 {
        return Err(CliError::AllFailed(format!("no mesh in {} produced a scan", meshes.display())));
    }
    let manifest = results.into_iter().flatten().fold(format!("{MANIFEST_HEADER}\n"), |s, r| s + &r);
    write_file(&run.join("manifest.csv"), manifest)?;
    Ok(Outcome {
        summary: format!(
            "datagen: {done}/{} meshes, {} views each -> {}",
            files.len(),
            cfg.n_views,
            run.display()
        ),
        run_dir: run,
    })
}

/// One instance of a generated dataset.
#[derive(Clone, Debug)]
pub struct Instance {
    pub id: String,
    pub complete: PointCloud,
    /// Partial scans in view order.
    pub partials: Vec<PointCloud>,
}

/// Reads every `<id>/complete.ply` plus `<id>/partial_<k>.ply` under `dir`.
pub fn load_dataset(dir: &Path) -> Result<Vec<Instance>> {
    let dirs: Vec<PathBuf> = sorted_entries(dir)?
        .into_iter()
        .filter(|p| p.join("complete.ply").is_file())
        .collect();
    dirs.par_iter()
        .map(|d| {
            let mut views: Vec<(usize, PathBuf)> = sorted_entries(d)?
                .into_iter()
                .filter_map(|p| {
                    let k = stem(&p).strip_prefix("partial_")?.parse().ok()?;
                    Some((k, p))
                })
                .collect();
            views.sort();
            Ok(Instance {
                id: d.file_name().unwrap().to_string_lossy().into_owned(),
                complete: read_cloud(&d.join("complete.ply"))?,
                partials: views.iter().map(|(_, p)| read_cloud(p)).collect::<Result<_>>()?,
            })
        })
        .collect()
}

pub fn train(cfg: &RunConfig) -> Result<Outcome> {
    let data_dir = cfg
        .data
        .as_ref()
        .ok_or_else(|| CliError::Config("training needs a dataset (`data` key or --data)".into()))?;
    let instances = load_dataset(data_dir)?;
    let pairs = instances
        .par_iter()
        .flat_map_iter(|inst| {
            inst.partials
                .iter()
                .filter(|p| !p.is_empty())
                .map(move |p| Ok(TrainingPair::from_scan(p, &inst.complete, cfg.n_coarse)?))
        })
        .collect::<Result<Vec<_>>>()?;
    if pairs.is_empty() {
        return Err(CliError::EmptyInput(format!("no training pairs under {}", data_dir.display())));
    }
    let run = create_run_dir(&cfg.out, "train", cfg)?;
    let ckpt_dir = run.join("checkpoints");
    create_dir(&ckpt_dir)?;
    let tc = cfg.train();
    let mut state = TrainState::new(Network::new(cfg.net(), cfg.seed)?, tc);
    let every = (cfg.checkpoint_every > 0).then_some(cfg.checkpoint_every);
    log::info!("training on {} pairs for {} steps", pairs.len(), tc.steps);
    let result = state.run(&pairs, every, |s| {
        if s.step() < tc.steps {
            let path = ckpt_dir.join(format!("step_{:08}.ckpt", s.step()));
            std::fs::write(&path, s.net.params.to_bytes())?;
            if let Some(r) = s.log.last() {
                log::info!("step {} coarse_emd {:.6} dense_cd {:.6} refined_cd {:.6}", r.step, r.coarse_emd, r.dense_cd, r.refined_cd);
            }
        }
        Ok(())
    });
    write_file(&run.join("loss.csv"), loss_csv(&state.log))?;
    if let Err(e) = result {
        // keep the state that produced the bad step for inspection
        write_file(&run.join("diverged.ckpt"), state.net.params.to_bytes())?;
        write_file(&run.join("diverged.txt"), format!("{e}\n"))?;
        return Err(e.into());
    }
    let bytes = state.net.params.to_bytes();
    let hash = content_hash(&bytes);
    write_file(&run.join("model.ckpt"), &bytes)?;
    write_file(&run.join("checkpoint.sha256"), format!("{hash}  model.ckpt\n"))?;
    let (first, last) = match (state.log.first(), state.log.last()) {
        (Some(a), Some(b)) => (a.refined_cd, b.refined_cd),
        _ => (f64::NAN, f64::NAN),
    };
    Ok(Outcome {
        summary: format!(
            "train: {} steps on {} pairs, refined CD {first:.6} -> {last:.6}, model {} ({})",
            state.step(),
            pairs.len(),
            run.join("model.ckpt").display(),
            &hash[..12]
        ),
        run_dir: run,
    })
}

pub fn complete(
    cfg: &RunConfig,
    checkpoint: &Path,
    input: &Path,
    output: Option<&Path>,
    no_refiner_fps: bool,
) -> Result<Outcome> {
    let (mut net, hash) = load_network(checkpoint)?;
    if no_refiner_fps {
        net.set_refiner_fps(false)?;
    }
    let cloud = read_cloud(input)?;
    if cloud.is_empty() {
        return Err(CliError::EmptyInput(format!("{} has no points", input.display())));
    }
    let run = create_run_dir(&cfg.out, "complete", cfg)?;
    write_file(&run.join("checkpoint.sha256"), format!("{hash}  {}\n", checkpoint.display()))?;
    let out = net.complete(&cloud)?;
    let path = output.map_or_else(|| run.join("completed.ply"), Path::to_path_buf);
    write_cloud(&path, &out)?;
    Ok(Outcome {
        summary: format!("complete: {} -> {} points, {}", cloud.len(), out.len(), path.display()),
        run_dir: run,
    })
}

/// Point-cloud files under `dir`, keyed by their path relative to it.
pub fn collect_clouds(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, PathBuf>) -> Result<()> {
        for p in sorted_entries(dir)? {
            if p.is_dir() {
                walk(root, &p, out)?;
            } else if is_cloud_file(&p) {
                let rel = p.strip_prefix(root).unwrap().with_extension("");
                out.insert(rel.to_string_lossy().replace('\\', "/"), p);
            }
        }
        Ok(())
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out)?;
    Ok(out)
}

fn first_difference<'a>(a: &'a BTreeMap<String, PathBuf>, b: &BTreeMap<String, PathBuf>) -> Option<&'a str> {
    a.keys().find(|k| !b.contains_key(*k)).map(String::as_str)
}

fn check_same_keys(a: &BTreeMap<String, PathBuf>, b: &BTreeMap<String, PathBuf>, what: &str) -> Result<()> {
    if let Some(k) = first_difference(a, b).or_else(|| first_difference(b, a)) {
        return Err(CliError::Mismatch(format!("`{k}` is missing from one of the {what} directories")));
    }
    Ok(())
}

pub fn eval(cfg: &RunConfig, pred: &Path, gt: &Path, partial: Option<&Path>) -> Result<Outcome> {
    let preds = collect_clouds(pred)?;
    let gts = collect_clouds(gt)?;
    if preds.is_empty() && gts.is_empty() {
        return Err(CliError::EmptyInput("no point clouds to evaluate".into()));
    }
    check_same_keys(&preds, &gts, "prediction and ground-truth")?;
    let partials = partial.map(collect_clouds).transpose()?;
    if let Some(p) = &partials {
        check_same_keys(&preds, p, "prediction and partial")?;
    }
    let reports = preds
        .par_iter()
        .map(|(id, path)| {
            let p = read_cloud(path)?;
            let g = read_cloud(&gts[id])?;
            let input = partials.as_ref().map(|m| read_cloud(&m[id])).transpose()?;
            Ok(evaluate(id, &p, &g, input.as_ref(), EVAL_EMD_MAX_POINTS)?)
        })
        .collect::<Result<Vec<MetricReport>>>()?;
    let run = create_run_dir(&cfg.out, "eval", cfg)?;
    let mut csv = format!("{}\n", MetricReport::CSV_HEADER);
    for r in &reports {
        let _ = writeln!(csv, "{}", r.to_csv_row());
    }
    write_file(&run.join("metrics.csv"), csv)?;
    let n = reports.len() as f64;
    let mean_cd = reports.iter().map(|r| r.cd).sum::<f64>() / n;
    let mean_emd = reports.iter().map(|r| r.emd).sum::<f64>() / n;
    Ok(Outcome {
        summary: format!("eval: {} instances, mean CD {mean_cd:.6}, mean EMD {mean_emd:.6}", reports.len()),
        run_dir: run,
    })
}

/// One row of the visibility sweep, averaged over trials.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RobustnessRow {
    pub ratio: f64,
    pub trials: usize,
    pub cd: f64,
    pub emd: f64,
    pub overlap_ratio: f64,
}

/// Crops the complete cloud to each visible ratio along `trials` seeded
/// directions (the same directions for every ratio), completes each crop
/// and scores it against the complete cloud.
pub fn robustness_sweep(net: &Network, complete: &PointCloud, ratios: &[f64], trials: usize, seed: u64) -> Result<Vec<RobustnessRow>> {
    if trials == 0 || ratios.is_empty() {
        return Err(CliError::Config("robustness needs at least one ratio and one trial".into()));
    }
    ratios
        .iter()
        .map(|&ratio| {
            let mut acc = [0.0; 3];
            for t in 0..trials {
                let partial = crop_to_visible_ratio(complete, ratio, seed.wrapping_add(t as u64))?;
                let pred = net.complete(&partial)?;
                let r = evaluate("", &pred, complete, Some(&partial), EVAL_EMD_MAX_POINTS)?;
                acc[0] += r.cd;
                acc[1] += r.emd;
                acc[2] += r.overlap_ratio;
            }
            let k = trials as f64;
            Ok(RobustnessRow {
                ratio,
                trials,
                cd: acc[0] / k,
                emd: acc[1] / k,
                overlap_ratio: acc[2] / k,
            })
        })
        .collect()
}

pub fn robustness_csv(rows: &[RobustnessRow]) -> String {
    let mut s = format!("{ROBUSTNESS_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{}", r.ratio, r.trials, r.cd, r.emd, r.overlap_ratio);
    }
    s
}

pub fn robustness(cfg: &RunConfig, checkpoint: &Path, mesh: &Path, ratios: &[f64], trials: usize) -> Result<Outcome> {
    let (net, hash) = load_network(checkpoint)?;
    let mesh = read_mesh(mesh)?;
    let sampled = sample_mesh_uniform(&mesh, cfg.n_gt, cfg.seed)?;
    let (complete, _) = normalize_to_unit_box(&sampled, &sampled)?;
    let rows = robustness_sweep(&net, &complete, ratios, trials, cfg.seed)?;
    let run = create_run_dir(&cfg.out, "robustness", cfg)?;
    write_file(&run.join("checkpoint.sha256"), format!("{hash}  {}\n", checkpoint.display()))?;
    write_file(&run.join("robustness.csv"), robustness_csv(&rows))?;
    let cells: Vec<String> = rows.iter().map(|r| format!("{}: {:.6}", r.ratio, r.cd)).collect();
    Ok(Outcome {
        summary: format!("robustness: CD by visible ratio {}", cells.join(", ")),
        run_dir: run,
    })
}

/// Parses twelve numbers: the rotation row by row, then the translation.
pub fn parse_transform(text: &str) -> Result<RigidTransform> {
    let vals = text
        .split_whitespace()
        .map(|w| w.parse::<f64>().map_err(|_| CliError::Config(format!("bad transform entry `{w}`"))))
        .collect::<Result<Vec<_>>>()?;
    if vals.len() != 12 {
        return Err(CliError::Config(format!("transform needs 12 numbers, got {}", vals.len())));
    }
    let r = nalgebra::Matrix3::from_row_slice(&vals[..9]);
    let t = nalgebra::Vector3::new(vals[9], vals[10], vals[11]);
    Ok(RigidTransform::new(r, t))
}

pub fn format_transform(t: &RigidTransform) -> String {
    let mut s = String::new();
    for i in 0..3 {
        let _ = writeln!(s, "{} {} {}", t.r[(i, 0)], t.r[(i, 1)], t.r[(i, 2)]);
    }
    let _ = writeln!(s, "{} {} {}", t.t[0], t.t[1], t.t[2]);
    s
}

fn find_cloud(dir: &Path, name: &str) -> Result<PathBuf> {
    ["ply", "xyz", "txt"]
        .iter()
        .map(|ext| dir.join(format!("{name}.{ext}")))
        .find(|p| p.is_file())
        .ok_or_else(|| CliError::Mismatch(format!("{} has no `{name}` cloud", dir.display())))
}

/// Pairs stored as `<example>/a.ply`, `<example>/b.ply`; the true motion
/// from `a` to `b` is read from `<gt_root>/<example>/gt.txt`.
pub fn load_registration_pairs(dir: &Path, gt_root: &Path) -> Result<Vec<RegistrationPair>> {
    sorted_entries(dir)?
        .into_iter()
        .filter(|p| p.is_dir())
        .map(|d| {
            let example = d.file_name().unwrap().to_string_lossy().into_owned();
            let gt_path = gt_root.join(&example).join("gt.txt");
            let gt_text = std::fs::read_to_string(&gt_path).map_err(|e| CliError::io(&gt_path, e))?;
            Ok(RegistrationPair {
                a: read_cloud(&find_cloud(&d, "a")?)?,
                b: read_cloud(&find_cloud(&d, "b")?)?,
                gt: parse_transform(&gt_text)?,
                example,
            })
        })
        .collect()
}

pub fn register(cfg: &RunConfig, partial: &Path, completed: &Path, metric: RotationMetric) -> Result<Outcome> {
    let p = load_registration_pairs(partial, partial)?;
    let c = load_registration_pairs(completed, partial)?;
    if p.is_empty() {
        return Err(CliError::EmptyInput(format!("no pairs under {}", partial.display())));
    }
    if p.len() != c.len() || p.iter().zip(&c).any(|(a, b)| a.example != b.example) {
        return Err(CliError::Mismatch("partial and completed directories list different examples".into()));
    }
    let icp = IcpConfig::default();
    let tp = registration_experiment(&p, &icp, metric)?;
    let tc = registration_experiment(&c, &icp, metric)?;
    for row in tp.rows.iter().chain(&tc.rows).filter(|r| r.low_confidence) {
        log::warn!("{}: too few points for a reliable registration", row.example);
    }
    let run = create_run_dir(&cfg.out, "register", cfg)?;
    write_file(&run.join("registration.csv"), registration_csv(&tp, &tc)?)?;
    Ok(Outcome {
        summary: format!(
            "register: {} pairs, mean E_R partial {:.4} completed {:.4}, mean E_T partial {:.4} completed {:.4}",
            p.len(),
            tp.mean_rot_err,
            tc.mean_rot_err,
            tp.mean_trans_err,
            tc.mean_trans_err
        ),
        run_dir: run,
    })
}
