//! End-to-end orchestration: phantom/ingest → prefilter → template →
//! transport → pair/train → denoise → baselines → evaluate → export.
//!
//! Every stage writes a manifest with content hashes of its inputs and
//! outputs; a rerun whose hashes match is skipped, so slow stages (template
//! estimation, training) survive downstream iteration. A lock file guards
//! the output tree against concurrent runs.

use crate::error::{CoreError, Result};
use crate::io::{read_volume, write_field, write_slice_png, write_volume, IntensityWindow};
use crate::n2n::{build_pairs, denoise_volume, load_model, save_model, train, DenoiserNet, NetDescriptor, TrainConfig};
use crate::phantom::{generate_clean, make_repeats, MotionSpec, NoiseSpec, PhantomSpec};
use crate::prefilter::{prefilter_volume, PrefilterParams};
use crate::quality::{evaluate_methods, QualityParams, QualityReport};
use crate::registration::{register_affine, warp_affine, RegistrationParams};
use crate::template::{build_subject_template, voxelwise_mean};
use crate::volume::{Slice2D, Volume3D};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

/// Synthetic-data section: when present the pipeline generates its own
/// input repeats instead of reading them from disk.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSection {
    pub subjects: usize,
    pub repeats: usize,
    pub spec: PhantomSpec,
    pub motion: MotionSpec,
    pub noise: NoiseSpec,
}

impl Default for PhantomSection {
    fn default() -> Self {
        Self {
            subjects: 2,
            repeats: 3,
            spec: PhantomSpec::default(),
            motion: MotionSpec::default(),
            noise: NoiseSpec::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Synthetic input generation; mutually exclusive with `inputs`.
    pub phantom: Option<PhantomSection>,
    /// Per-subject lists of raw volume paths (used when `phantom` is absent).
    pub inputs: Vec<Vec<String>>,
    pub prefilter: PrefilterParams,
    pub registration: RegistrationParams,
    pub template_outer_iters: usize,
    /// Center-crop size for training slices (shrunk to fit small volumes,
    /// rounded down to the network's divisibility constraint).
    pub crop: usize,
    pub network: NetDescriptor,
    pub train: TrainConfig,
    pub quality: QualityParams,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            phantom: Some(PhantomSection::default()),
            inputs: Vec::new(),
            prefilter: PrefilterParams::default(),
            registration: RegistrationParams::default(),
            template_outer_iters: 3,
            crop: 128,
            network: NetDescriptor::default(),
            train: TrainConfig::default(),
            quality: QualityParams::default(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.prefilter.validate()?;
        self.registration.validate()?;
        self.network.validate()?;
        self.train.validate()?;
        if self.template_outer_iters == 0 {
            return Err(CoreError::InvalidParam("template_outer_iters must be >= 1".into()));
        }
        match &self.phantom {
            Some(p) => {
                if p.subjects == 0 || p.repeats < 2 {
                    return Err(CoreError::InvalidParam(format!(
                        "phantom section needs subjects >= 1 and repeats >= 2, got {}x{}",
                        p.subjects, p.repeats
                    )));
                }
                p.noise.validate()?;
            }
            None => {
                if self.inputs.is_empty() {
                    return Err(CoreError::InvalidParam(
                        "config needs either a phantom section or input paths".into(),
                    ));
                }
                if self.inputs.iter().any(|s| s.len() < 2) {
                    return Err(CoreError::InvalidParam(
                        "every subject needs >= 2 repeat volumes".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Strict JSON parse: unknown keys are rejected with the offending name.
pub fn load_config(path: &Path) -> Result<PipelineConfig> {
    let cfg: PipelineConfig = serde_json::from_str(&fs::read_to_string(path)?)?;
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageOutcome {
    pub stage: String,
    pub skipped: bool,
    pub wall_secs: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineReport {
    pub stages: Vec<StageOutcome>,
    pub out_dir: PathBuf,
}

#[derive(Debug, Serialize, Deserialize)]
struct FileHash {
    path: String,
    sha256: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct StageManifest {
    stage: String,
    /// Hash of the stage-relevant config subset plus all input hashes.
    key: String,
    /// Full config echoed for provenance.
    config: PipelineConfig,
    outputs: Vec<FileHash>,
    wall_secs: f64,
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Hash a set of input files into a stage key together with the relevant
/// config subset.
fn stage_key(subset: &serde_json::Value, input_files: &[PathBuf]) -> Result<String> {
    let mut hashes = Vec::with_capacity(input_files.len());
    for p in input_files {
        hashes.push(serde_json::json!({
            "file": p.file_name().map(|n| n.to_string_lossy().into_owned()),
            "sha256": sha256_file(p)?,
        }));
    }
    let combined = serde_json::json!({ "config": subset, "inputs": hashes });
    Ok(hex::encode(Sha256::digest(combined.to_string().as_bytes())))
}

struct LockGuard(PathBuf);

impl LockGuard {
    fn acquire(out_dir: &Path) -> Result<Self> {
        let path = out_dir.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self(path)),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(CoreError::Locked(path.display().to_string()))
            }
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

struct StageRunner<'a> {
    out_dir: &'a Path,
    cfg: &'a PipelineConfig,
    outcomes: Vec<StageOutcome>,
}

impl<'a> StageRunner<'a> {
    fn new(out_dir: &'a Path, cfg: &'a PipelineConfig) -> Self {
        Self {
            out_dir,
            cfg,
            outcomes: Vec::new(),
        }
    }

    fn manifest_path(&self, stage: &str) -> PathBuf {
        self.out_dir.join("manifests").join(format!("{stage}.json"))
    }

    fn can_skip(&self, stage: &str, key: &str) -> bool {
        let Ok(text) = fs::read_to_string(self.manifest_path(stage)) else {
            return false;
        };
        let Ok(m) = serde_json::from_str::<StageManifest>(&text) else {
            return false;
        };
        if m.stage != stage || m.key != key {
            return false;
        }
        m.outputs.iter().all(|f| {
            let p = self.out_dir.join(&f.path);
            matches!(sha256_file(&p), Ok(h) if h == f.sha256)
        })
    }

    /// Run (or skip) one stage. `f` returns the produced files, which are
    /// hashed into the manifest; paths are stored relative to the tree root.
    fn stage(
        &mut self,
        stage: &str,
        subset: serde_json::Value,
        input_files: &[PathBuf],
        f: impl FnOnce() -> Result<Vec<PathBuf>>,
    ) -> Result<()> {
        let key = stage_key(&subset, input_files)?;
        if self.can_skip(stage, &key) {
            self.outcomes.push(StageOutcome {
                stage: stage.to_string(),
                skipped: true,
                wall_secs: 0.0,
            });
            return Ok(());
        }
        let t0 = Instant::now();
        let produced = f().map_err(|e| CoreError::StageFailed {
            stage: stage.to_string(),
            message: e.to_string(),
        })?;
        let wall = t0.elapsed().as_secs_f64();
        let mut outputs = Vec::with_capacity(produced.len());
        for p in &produced {
            let rel = p
                .strip_prefix(self.out_dir)
                .unwrap_or(p)
                .to_string_lossy()
                .into_owned();
            outputs.push(FileHash {
                path: rel,
                sha256: sha256_file(p)?,
            });
        }
        let manifest = StageManifest {
            stage: stage.to_string(),
            key,
            config: self.cfg.clone(),
            outputs,
            wall_secs: wall,
        };
        fs::write(self.manifest_path(stage), serde_json::to_string_pretty(&manifest)?)?;
        self.outcomes.push(StageOutcome {
            stage: stage.to_string(),
            skipped: false,
            wall_secs: wall,
        });
        Ok(())
    }
}

/// Both .mhd header and .raw payload of a volume path, for hashing/manifests.
fn with_raw(paths: &[PathBuf]) -> Vec<PathBuf> {
    let mut all = Vec::with_capacity(paths.len() * 2);
    for p in paths {
        all.push(p.clone());
        all.push(p.with_extension("raw"));
    }
    all
}

fn subject_dir(base: &Path, s: usize) -> PathBuf {
    base.join(format!("s{s:02}"))
}

/// Largest training crop that fits the volumes and the network's 2^depth
/// divisibility constraint.
fn effective_crop(requested: usize, dims: (usize, usize, usize), depth: usize) -> Result<usize> {
    let div = 1usize << depth;
    let fit = requested.min(dims.0).min(dims.1);
    let crop = fit / div * div;
    if crop == 0 {
        return Err(CoreError::InvalidParam(format!(
            "no valid crop <= {requested} for {}x{} slices and depth {depth}",
            dims.0, dims.1
        )));
    }
    Ok(crop)
}

fn read_subject_volumes(paths: &[Vec<PathBuf>]) -> Result<Vec<Vec<Volume3D>>> {
    paths
        .iter()
        .map(|subject| subject.iter().map(|p| read_volume(p)).collect())
        .collect()
}

/// Execute the full pipeline into `out_dir`. Stages with up-to-date
/// manifests are skipped; any failure halts with the stage name.
pub fn run_pipeline(cfg: &PipelineConfig, out_dir: &Path) -> Result<PipelineReport> {
    cfg.validate()?;
    fs::create_dir_all(out_dir)?;
    fs::create_dir_all(out_dir.join("manifests"))?;
    let _lock = LockGuard::acquire(out_dir)?;

    let mut runner = StageRunner::new(out_dir, cfg);

    // ---- stage: phantom / ingest -------------------------------------
    let (subjects_n, repeats_n) = match &cfg.phantom {
        Some(p) => (p.subjects, p.repeats),
        None => (cfg.inputs.len(), cfg.inputs[0].len()),
    };
    let raw_paths: Vec<Vec<PathBuf>> = match &cfg.phantom {
        Some(_) => (0..subjects_n)
            .map(|s| {
                (0..repeats_n)
                    .map(|r| subject_dir(&out_dir.join("raw"), s).join(format!("r{r:02}.mhd")))
                    .collect()
            })
            .collect(),
        None => cfg
            .inputs
            .iter()
            .map(|subject| subject.iter().map(PathBuf::from).collect())
            .collect(),
    };
    let clean_paths: Vec<PathBuf> = (0..subjects_n)
        .map(|s| out_dir.join("clean").join(format!("s{s:02}.mhd")))
        .collect();

    if let Some(ph) = &cfg.phantom {
        let subset = serde_json::json!({ "phantom": ph, "seed": cfg.seed });
        let raw_dir = out_dir.join("raw");
        let clean_dir = out_dir.join("clean");
        let raw_paths = raw_paths.clone();
        let clean_paths = clean_paths.clone();
        runner.stage("phantom", subset, &[], move || {
            fs::create_dir_all(&clean_dir)?;
            let mut produced = Vec::new();
            for s in 0..ph.subjects {
                let spec = PhantomSpec {
                    seed: ph.spec.seed.wrapping_add(cfg.seed).wrapping_add(s as u64 * 7919),
                    ..ph.spec.clone()
                };
                let clean = generate_clean(&spec)?;
                write_volume(&clean, &clean_paths[s])?;
                produced.push(clean_paths[s].clone());
                let motion = MotionSpec {
                    seed: ph.motion.seed.wrapping_add(cfg.seed).wrapping_add(s as u64 * 104729),
                    ..ph.motion
                };
                let noise = NoiseSpec {
                    seed: ph.noise.seed.wrapping_add(cfg.seed).wrapping_add(s as u64 * 1299709),
                    ..ph.noise
                };
                let (repeats, _) = make_repeats(&clean, ph.repeats, &motion, &noise)?;
                fs::create_dir_all(subject_dir(&raw_dir, s))?;
                for (r, vol) in repeats.iter().enumerate() {
                    write_volume(vol, &raw_paths[s][r])?;
                    produced.push(raw_paths[s][r].clone());
                }
            }
            Ok(with_raw(&produced))
        })?;
    }

    let all_raw: Vec<PathBuf> = raw_paths.iter().flatten().cloned().collect();

    // ---- stage: prefilter --------------------------------------------
    let pre_dir = out_dir.join("prefiltered");
    let pre_paths: Vec<Vec<PathBuf>> = (0..subjects_n)
        .map(|s| {
            (0..repeats_n)
                .map(|r| subject_dir(&pre_dir, s).join(format!("r{r:02}.mhd")))
                .collect()
        })
        .collect();
    {
        let subset = serde_json::json!({ "prefilter": cfg.prefilter });
        let raw_paths = raw_paths.clone();
        let pre_paths = pre_paths.clone();
        let prefilter = cfg.prefilter;
        runner.stage("prefilter", subset, &with_raw(&all_raw), move || {
            let mut produced = Vec::new();
            for (s, subject) in raw_paths.iter().enumerate() {
                fs::create_dir_all(subject_dir(&pre_dir, s))?;
                for (r, path) in subject.iter().enumerate() {
                    let vol = read_volume(path)?;
                    let filtered = prefilter_volume(&vol, &prefilter)?;
                    write_volume(&filtered, &pre_paths[s][r])?;
                    produced.push(pre_paths[s][r].clone());
                }
            }
            Ok(with_raw(&produced))
        })?;
    }
    let all_pre: Vec<PathBuf> = pre_paths.iter().flatten().cloned().collect();

    // ---- stage: template ---------------------------------------------
    let tpl_dir = out_dir.join("template");
    let tpl_path = |s: usize| subject_dir(&tpl_dir, s).join("template.mhd");
    let aff_path = |s: usize| subject_dir(&tpl_dir, s).join("affines.json");
    let fwd_path = |s: usize, r: usize| subject_dir(&tpl_dir, s).join(format!("fwd_r{r:02}.mhd"));
    {
        let subset = serde_json::json!({
            "registration": cfg.registration,
            "template_outer_iters": cfg.template_outer_iters,
        });
        let pre_paths = pre_paths.clone();
        let registration = cfg.registration.clone();
        let outer = cfg.template_outer_iters;
        runner.stage("template", subset, &with_raw(&all_pre), move || {
            let mut produced = Vec::new();
            for (s, subject) in pre_paths.iter().enumerate() {
                let repeats: Vec<Volume3D> =
                    subject.iter().map(|p| read_volume(p)).collect::<Result<_>>()?;
                let st = build_subject_template(&repeats, &registration, outer)?;
                fs::create_dir_all(tpl_path(s).parent().unwrap())?;
                write_volume(&st.template, tpl_path(s))?;
                produced.push(tpl_path(s));
                produced.push(tpl_path(s).with_extension("raw"));
                fs::write(aff_path(s), serde_json::to_string_pretty(&st.affines)?)?;
                produced.push(aff_path(s));
                for (r, d) in st.diffeos.iter().enumerate() {
                    write_field(&d.forward_disp, fwd_path(s, r))?;
                    produced.push(fwd_path(s, r));
                    produced.push(fwd_path(s, r).with_extension("raw"));
                }
            }
            Ok(produced)
        })?;
    }

    // ---- stage: transport --------------------------------------------
    let warped_dir = out_dir.join("warped");
    let warped_paths: Vec<Vec<PathBuf>> = (0..subjects_n)
        .map(|s| {
            (0..repeats_n)
                .map(|r| subject_dir(&warped_dir, s).join(format!("r{r:02}.mhd")))
                .collect()
        })
        .collect();
    {
        let mut inputs = with_raw(&all_raw);
        for s in 0..subjects_n {
            inputs.push(tpl_path(s));
            inputs.push(tpl_path(s).with_extension("raw"));
            inputs.push(aff_path(s));
            for r in 0..repeats_n {
                inputs.push(fwd_path(s, r));
                inputs.push(fwd_path(s, r).with_extension("raw"));
            }
        }
        let raw_paths = raw_paths.clone();
        let warped_paths = warped_paths.clone();
        runner.stage("transport", serde_json::json!({}), &inputs, move || {
            use crate::registration::AffineTransform;
            use crate::template::transport_one;
            let mut produced = Vec::new();
            for (s, subject) in raw_paths.iter().enumerate() {
                let template = read_volume(tpl_path(s))?;
                let affines: Vec<AffineTransform> =
                    serde_json::from_str(&fs::read_to_string(aff_path(s))?)?;
                fs::create_dir_all(warped_paths[s][0].parent().unwrap())?;
                for (r, path) in subject.iter().enumerate() {
                    let raw = read_volume(path)?;
                    let disp = crate::io::read_field(
                        fwd_path(s, r),
                        crate::volume::FieldKind::Displacement,
                    )?;
                    let out = transport_one(&raw, &affines[r], &disp, &template)?;
                    write_volume(&out, &warped_paths[s][r])?;
                    produced.push(warped_paths[s][r].clone());
                }
            }
            Ok(with_raw(&produced))
        })?;
    }
    let all_warped: Vec<PathBuf> = warped_paths.iter().flatten().cloned().collect();

    // ---- stage: train ------------------------------------------------
    let model_dir = out_dir.join("model");
    let model_path = model_dir.join("model.json");
    let loss_path = model_dir.join("loss.csv");
    {
        let subset = serde_json::json!({
            "train": cfg.train,
            "network": cfg.network,
            "crop": cfg.crop,
            "seed": cfg.seed,
        });
        let warped_paths = warped_paths.clone();
        let network = cfg.network.clone();
        let train_cfg = cfg.train.clone();
        let crop = cfg.crop;
        let seed = cfg.seed;
        let model_path = model_path.clone();
        let loss_path = loss_path.clone();
        runner.stage("train", subset, &with_raw(&all_warped), move || {
            let subjects = read_subject_volumes(&warped_paths)?;
            let dims = subjects[0][0].dims;
            let crop = effective_crop(crop, dims, network.depth)?;
            let ds = build_pairs(&subjects, crop, seed)?;
            let mut net = DenoiserNet::<f32>::new_seeded(network, seed)?;
            let history = train(&mut net, &ds, &train_cfg)?;
            fs::create_dir_all(&model_dir)?;
            save_model(&net, &model_path)?;
            let mut csv = String::from("epoch,mean_loss\n");
            for (e, l) in history.iter().enumerate() {
                csv.push_str(&format!("{e},{l:.8}\n"));
            }
            fs::write(&loss_path, csv)?;
            Ok(vec![model_path.clone(), model_path.with_extension("bin"), loss_path.clone()])
        })?;
    }

    // ---- stage: denoise ----------------------------------------------
    let den_dir = out_dir.join("denoised");
    let den_path = |s: usize| den_dir.join(format!("s{s:02}.mhd"));
    {
        let mut inputs = with_raw(&all_warped);
        inputs.push(model_path.clone());
        inputs.push(model_path.with_extension("bin"));
        let warped_paths = warped_paths.clone();
        let model_path = model_path.clone();
        runner.stage("denoise", serde_json::json!({}), &inputs, move || {
            let net = load_model(&model_path)?;
            fs::create_dir_all(den_path(0).parent().unwrap())?;
            let mut produced = Vec::new();
            for (s, subject) in warped_paths.iter().enumerate() {
                let vol = read_volume(&subject[0])?;
                let out = denoise_volume(&net, &vol)?;
                write_volume(&out, den_path(s))?;
                produced.push(den_path(s));
            }
            Ok(with_raw(&produced))
        })?;
    }

    // ---- stage: baselines --------------------------------------------
    // The ablation comparators: affine-only alignment reused three ways.
    let base_dir = out_dir.join("baselines");
    let aligned_path = |s: usize, r: usize| {
        subject_dir(&base_dir.join("affine_aligned"), s).join(format!("r{r:02}.mhd"))
    };
    let avg_path = |s: usize| base_dir.join(format!("affine_avg_s{s:02}.mhd"));
    let nlm_path = |s: usize| base_dir.join(format!("nlm_s{s:02}.mhd"));
    let an2n_path = |s: usize| base_dir.join(format!("affine_n2n_s{s:02}.mhd"));
    let an2n_model_path = base_dir.join("affine_n2n_model.json");
    {
        let subset = serde_json::json!({
            "prefilter": cfg.prefilter,
            "registration": cfg.registration,
            "train": cfg.train,
            "network": cfg.network,
            "crop": cfg.crop,
            "seed": cfg.seed,
        });
        let mut input_files = with_raw(&all_raw);
        input_files.extend(with_raw(&all_pre));
        let raw_paths = raw_paths.clone();
        let pre_paths = pre_paths.clone();
        let prefilter = cfg.prefilter;
        let registration = cfg.registration.clone();
        let network = cfg.network.clone();
        let train_cfg = cfg.train.clone();
        let crop = cfg.crop;
        let seed = cfg.seed;
        let an2n_model_path = an2n_model_path.clone();
        runner.stage("baselines", subset, &input_files, move || {
            fs::create_dir_all(avg_path(0).parent().unwrap())?;
            let mut produced = Vec::new();
            let mut aligned_all: Vec<Vec<Volume3D>> = Vec::with_capacity(raw_paths.len());
            for (s, subject) in raw_paths.iter().enumerate() {
                // estimate affines on the prefiltered repeats, apply to raw
                let pre: Vec<Volume3D> =
                    pre_paths[s].iter().map(|p| read_volume(p)).collect::<Result<_>>()?;
                let raw: Vec<Volume3D> =
                    subject.iter().map(|p| read_volume(p)).collect::<Result<_>>()?;
                let reference = &pre[0];
                let mut aligned = vec![raw[0].clone()];
                for r in 1..raw.len() {
                    let res = register_affine(reference, &pre[r], &registration)?;
                    aligned.push(warp_affine(&raw[r], &res.transform, reference));
                }
                fs::create_dir_all(aligned_path(s, 0).parent().unwrap())?;
                for (r, vol) in aligned.iter().enumerate() {
                    write_volume(vol, aligned_path(s, r))?;
                    produced.push(aligned_path(s, r));
                }
                let avg = voxelwise_mean(&aligned)?;
                write_volume(&avg, avg_path(s))?;
                produced.push(avg_path(s));
                let nlm = prefilter_volume(&raw[0], &prefilter)?;
                write_volume(&nlm, nlm_path(s))?;
                produced.push(nlm_path(s));
                aligned_all.push(aligned);
            }
            // affine-only Noise2Noise: same net/seed/schedule, un-templated pairs
            let dims = aligned_all[0][0].dims;
            let crop = effective_crop(crop, dims, network.depth)?;
            let ds = build_pairs(&aligned_all, crop, seed)?;
            let mut net = DenoiserNet::<f32>::new_seeded(network, seed)?;
            train(&mut net, &ds, &train_cfg)?;
            save_model(&net, &an2n_model_path)?;
            for (s, aligned) in aligned_all.iter().enumerate() {
                let out = denoise_volume(&net, &aligned[0])?;
                write_volume(&out, an2n_path(s))?;
                produced.push(an2n_path(s));
            }
            let mut all = with_raw(&produced);
            all.push(an2n_model_path.clone());
            all.push(an2n_model_path.with_extension("bin"));
            Ok(all)
        })?;
    }

    // ---- stage: evaluate ---------------------------------------------
    let report_csv = out_dir.join("report.csv");
    let report_json = out_dir.join("report.json");
    {
        let subset = serde_json::json!({ "quality": cfg.quality });
        let mut inputs = with_raw(&all_raw);
        inputs.extend(with_raw(&all_warped));
        for s in 0..subjects_n {
            inputs.push(den_path(s));
            inputs.push(den_path(s).with_extension("raw"));
            inputs.push(avg_path(s));
            inputs.push(avg_path(s).with_extension("raw"));
            inputs.push(nlm_path(s));
            inputs.push(nlm_path(s).with_extension("raw"));
            inputs.push(an2n_path(s));
            inputs.push(an2n_path(s).with_extension("raw"));
            inputs.push(aligned_path(s, 0));
            inputs.push(aligned_path(s, 0).with_extension("raw"));
        }
        let have_clean = cfg.phantom.is_some();
        let clean_paths = clean_paths.clone();
        let raw_paths = raw_paths.clone();
        let warped_paths = warped_paths.clone();
        let quality = cfg.quality;
        let report_csv = report_csv.clone();
        let report_json = report_json.clone();
        runner.stage("evaluate", subset, &inputs, move || {
            let clean: Option<Vec<Volume3D>> = if have_clean {
                Some(clean_paths.iter().map(|p| read_volume(p)).collect::<Result<_>>()?)
            } else {
                None
            };
            // each method is scored against the noisy input in its own space
            let mut rows = Vec::new();
            let mut summaries = Vec::new();
            let mut add = |report: QualityReport| {
                rows.extend(report.rows);
                summaries.extend(report.summaries);
            };
            let load_each = |f: &dyn Fn(usize) -> PathBuf| -> Result<Vec<Volume3D>> {
                (0..subjects_n).map(|s| read_volume(f(s))).collect()
            };
            let warped0: Vec<Volume3D> = warped_paths
                .iter()
                .map(|s| read_volume(&s[0]))
                .collect::<Result<_>>()?;
            let raw0: Vec<Volume3D> = raw_paths
                .iter()
                .map(|s| read_volume(&s[0]))
                .collect::<Result<_>>()?;
            let aligned0: Vec<Volume3D> = load_each(&|s| aligned_path(s, 0))?;

            add(evaluate_methods(
                &[("ours".to_string(), load_each(&den_path)?)],
                &warped0,
                clean.as_deref(),
                &quality,
            )?);
            add(evaluate_methods(
                &[("affine-n2n".to_string(), load_each(&an2n_path)?)],
                &aligned0,
                clean.as_deref(),
                &quality,
            )?);
            add(evaluate_methods(
                &[("nlm".to_string(), load_each(&nlm_path)?)],
                &raw0,
                clean.as_deref(),
                &quality,
            )?);
            add(evaluate_methods(
                &[("affine-average".to_string(), load_each(&avg_path)?)],
                &aligned0,
                clean.as_deref(),
                &quality,
            )?);
            let report = QualityReport { rows, summaries };
            fs::write(&report_csv, report.to_csv())?;
            fs::write(&report_json, serde_json::to_string_pretty(&report)?)?;
            Ok(vec![report_csv.clone(), report_json.clone()])
        })?;
    }

    // ---- stage: export -----------------------------------------------
    {
        let views_dir = out_dir.join("views");
        let mut inputs = Vec::new();
        for s in 0..subjects_n {
            inputs.push(tpl_path(s));
            inputs.push(tpl_path(s).with_extension("raw"));
            inputs.push(den_path(s));
            inputs.push(den_path(s).with_extension("raw"));
        }
        runner.stage("export", serde_json::json!({}), &inputs, move || {
            fs::create_dir_all(&views_dir)?;
            let mut produced = Vec::new();
            for s in 0..subjects_n {
                let tpl = read_volume(tpl_path(s))?;
                produced.extend(export_views(&tpl, &views_dir, &format!("template_s{s:02}"))?);
                let den = read_volume(den_path(s))?;
                produced.extend(export_views(&den, &views_dir, &format!("denoised_s{s:02}"))?);
            }
            Ok(produced)
        })?;
    }

    Ok(PipelineReport {
        stages: runner.outcomes,
        out_dir: out_dir.to_path_buf(),
    })
}

/// Write the three standard views of a volume: center XY slice, center XZ
/// slice, and the en face mean projection over z. Each PNG gets an intensity
/// window sidecar so values can be recovered up to 8-bit quantization.
pub fn export_views(vol: &Volume3D, out_dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
    let (nx, ny, nz) = vol.dims;
    let (lo, hi) = vol.min_max();
    let window = IntensityWindow {
        min: lo,
        max: if hi > lo { hi } else { lo + 1.0 },
        bits: 8,
    };

    let xy = vol.slice_xy(nz / 2);

    let jmid = ny / 2;
    let mut xz_data = Vec::with_capacity(nx * nz);
    for k in 0..nz {
        for i in 0..nx {
            xz_data.push(vol.at(i, jmid, k));
        }
    }
    let xz = Slice2D::new((nx, nz), xz_data)?;

    let inv_nz = 1.0 / nz as f32;
    let mut enface_data = vec![0.0f32; nx * ny];
    for k in 0..nz {
        let base = nx * ny * k;
        for (acc, v) in enface_data.iter_mut().zip(&vol.data[base..base + nx * ny]) {
            *acc += v * inv_nz;
        }
    }
    let enface = Slice2D::new((nx, ny), enface_data)?;

    let mut produced = Vec::new();
    for (name, slice) in [("xy", &xy), ("xz", &xz), ("enface", &enface)] {
        let path = out_dir.join(format!("{stem}_{name}.png"));
        write_slice_png(slice, &path, window)?;
        produced.push(path.with_extension("png.window.json"));
        produced.push(path);
    }
    Ok(produced)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::read_slice_png;

    #[test]
    fn default_config_roundtrips_and_validates() {
        let cfg = PipelineConfig::default();
        cfg.validate().unwrap();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: PipelineConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_config_key_is_named_in_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        fs::write(&path, r#"{"seed": 1, "bogus_knob": 3}"#).unwrap();
        let err = load_config(&path).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("bogus_knob"), "error does not name the key: {msg}");
    }

    #[test]
    fn config_without_inputs_or_phantom_rejected() {
        let cfg = PipelineConfig {
            phantom: None,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn lock_excludes_second_owner() {
        let dir = tempfile::tempdir().unwrap();
        let g = LockGuard::acquire(dir.path()).unwrap();
        assert!(matches!(LockGuard::acquire(dir.path()), Err(CoreError::Locked(_))));
        drop(g);
        LockGuard::acquire(dir.path()).unwrap();
    }

    #[test]
    fn export_views_constant_volume_is_uniform() {
        let dir = tempfile::tempdir().unwrap();
        let vol = Volume3D::constant((8, 6, 4), (1.0, 1.0, 1.0), 0.7);
        let files = export_views(&vol, dir.path(), "flat").unwrap();
        assert_eq!(files.len(), 6);
        for f in files.iter().filter(|f| f.extension().unwrap() == "png") {
            let (slice, w) = read_slice_png(f).unwrap();
            let first = slice.data[0];
            assert!(slice.data.iter().all(|&v| v == first));
            assert!((first - 0.7).abs() <= (w.max - w.min) / 255.0);
        }
    }

    #[test]
    fn enface_projection_of_bright_slab() {
        // one bright z-slab of thickness 2 out of nz=8 at value 1, rest 0:
        // mean over z must be 1 * 2/8 = 0.25 everywhere
        let dims = (6, 5, 8);
        let mut vol = Volume3D::zeros(dims, (1.0, 1.0, 1.0));
        for k in 3..5 {
            for j in 0..dims.1 {
                for i in 0..dims.0 {
                    vol.set(i, j, k, 1.0);
                }
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let files = export_views(&vol, dir.path(), "slab").unwrap();
        let enface = files
            .iter()
            .find(|f| f.file_name().unwrap().to_str().unwrap() == "slab_enface.png")
            .unwrap();
        let (slice, w) = read_slice_png(enface).unwrap();
        let quant = (w.max - w.min) / 255.0;
        for &v in &slice.data {
            assert!((v - 0.25).abs() <= quant, "enface value {v} != 0.25");
        }
    }

    #[test]
    fn effective_crop_respects_divisibility() {
        assert_eq!(effective_crop(128, (96, 96, 32), 2).unwrap(), 96);
        assert_eq!(effective_crop(128, (96, 96, 32), 5).unwrap(), 96);
        assert_eq!(effective_crop(33, (96, 96, 32), 2).unwrap(), 32);
        assert!(effective_crop(128, (3, 3, 3), 2).is_err());
    }
}
