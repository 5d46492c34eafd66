//! `octden`: command-line front end for the repeat-acquisition denoising
//! pipeline. Exit codes: 0 success, 2 configuration error, 3 stage failure.

use clap::{Args, Parser, Subcommand};
use octden_core::io::{read_volume, write_field, write_volume};
use octden_core::n2n::{build_pairs, denoise_volume, load_model, pair_count, save_model, train, DenoiserNet};
use octden_core::phantom::{generate_clean, make_repeats, PhantomSpec};
use octden_core::pipeline::{export_views, load_config, run_pipeline, PipelineConfig};
use octden_core::prefilter::prefilter_volume;
use octden_core::quality::evaluate_methods;
use octden_core::registration::{register_affine, register_diffeo, warp_affine};
use octden_core::template::build_subject_template;
use octden_core::Volume3D;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "octden", version, about = "Self-supervised denoising of repeat volumetric acquisitions")]
struct Cli {
    #[command(flatten)]
    global: GlobalOpts,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalOpts {
    /// Pipeline config JSON; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the config's global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker thread count (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic noisy repeats with known ground truth.
    Phantom {
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Slicewise non-local means pre-filtering of one volume.
    Prefilter {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Affine + diffeomorphic registration of a moving volume onto a fixed one.
    Register {
        #[arg(long)]
        fixed: PathBuf,
        #[arg(long)]
        moving: PathBuf,
        /// Output directory for affine.json and forward/inverse fields.
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Estimate an unbiased subject template from >= 2 repeat volumes.
    Template {
        /// Pre-filtered repeat volumes, two or more.
        #[arg(long, required = true, num_args = 2..)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Enumerate the ordered training pairs of one or more subjects.
    Pair {
        /// One comma-separated list of repeat volumes per subject; repeatable.
        #[arg(long = "subject", required = true)]
        subjects: Vec<String>,
        #[arg(long)]
        manifest_out: PathBuf,
    },
    /// Train the denoiser on co-registered repeat volumes.
    Train {
        /// One comma-separated list of repeat volumes per subject; repeatable.
        #[arg(long = "subject", required = true)]
        subjects: Vec<String>,
        #[arg(long)]
        model_out: PathBuf,
        #[arg(long)]
        loss_csv: Option<PathBuf>,
    },
    /// Apply a trained model to a volume, slice by slice.
    Denoise {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Score denoised volumes with no-reference (and optional full-reference) metrics.
    Evaluate {
        #[arg(long)]
        method: String,
        #[arg(long, required = true, num_args = 1..)]
        noisy: Vec<PathBuf>,
        #[arg(long, required = true, num_args = 1..)]
        denoised: Vec<PathBuf>,
        #[arg(long, num_args = 1..)]
        clean: Vec<PathBuf>,
        #[arg(long)]
        report_out: PathBuf,
    },
    /// Export center XY/XZ slices and the en face mean projection as PNG.
    Export {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value = "volume")]
        stem: String,
    },
    /// Run every stage end to end with manifest-based resumption.
    Pipeline {
        #[arg(long)]
        out_dir: PathBuf,
    },
}

/// Errors carry the exit code they should produce.
struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn config(e: impl std::fmt::Display) -> Self {
        Self {
            code: 2,
            message: format!("configuration error: {e}"),
        }
    }

    fn stage(e: impl std::fmt::Display) -> Self {
        Self {
            code: 3,
            message: format!("{e}"),
        }
    }
}

fn effective_config(opts: &GlobalOpts) -> Result<PipelineConfig, CliError> {
    let mut cfg = match &opts.config {
        Some(path) => load_config(path).map_err(CliError::config)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = opts.seed {
        cfg.seed = seed;
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

fn read_volumes(paths: &[PathBuf]) -> Result<Vec<Volume3D>, CliError> {
    paths.iter().map(|p| read_volume(p).map_err(CliError::stage)).collect()
}

fn read_subjects(subjects: &[String]) -> Result<Vec<Vec<Volume3D>>, CliError> {
    subjects
        .iter()
        .map(|s| {
            let paths: Vec<PathBuf> = s.split(',').map(PathBuf::from).collect();
            read_volumes(&paths)
        })
        .collect()
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(CliError::stage)
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(threads) = cli.global.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(CliError::config)?;
    }
    let cfg = effective_config(&cli.global)?;
    cfg.validate().map_err(CliError::config)?;

    match cli.command {
        Command::Phantom { out_dir } => {
            let ph = cfg
                .phantom
                .clone()
                .ok_or_else(|| CliError::config("config has no phantom section"))?;
            ensure_dir(&out_dir)?;
            for s in 0..ph.subjects {
                let spec = PhantomSpec {
                    seed: ph.spec.seed.wrapping_add(cfg.seed).wrapping_add(s as u64 * 7919),
                    ..ph.spec.clone()
                };
                let clean = generate_clean(&spec).map_err(CliError::stage)?;
                write_volume(&clean, out_dir.join(format!("clean_s{s:02}.mhd")))
                    .map_err(CliError::stage)?;
                let (repeats, fields) =
                    make_repeats(&clean, ph.repeats, &ph.motion, &ph.noise).map_err(CliError::stage)?;
                for (r, (vol, field)) in repeats.iter().zip(&fields).enumerate() {
                    write_volume(vol, out_dir.join(format!("s{s:02}_r{r:02}.mhd")))
                        .map_err(CliError::stage)?;
                    write_field(field, out_dir.join(format!("s{s:02}_r{r:02}_gt.mhd")))
                        .map_err(CliError::stage)?;
                }
            }
            println!("wrote {} subjects x {} repeats to {}", ph.subjects, ph.repeats, out_dir.display());
        }
        Command::Prefilter { input, output } => {
            let vol = read_volume(&input).map_err(CliError::stage)?;
            let out = prefilter_volume(&vol, &cfg.prefilter).map_err(CliError::stage)?;
            write_volume(&out, &output).map_err(CliError::stage)?;
        }
        Command::Register { fixed, moving, out_dir } => {
            let fixed = read_volume(&fixed).map_err(CliError::stage)?;
            let moving = read_volume(&moving).map_err(CliError::stage)?;
            ensure_dir(&out_dir)?;
            let aff = register_affine(&fixed, &moving, &cfg.registration).map_err(CliError::stage)?;
            let aligned = warp_affine(&moving, &aff.transform, &fixed);
            let diff = register_diffeo(&fixed, &aligned, &cfg.registration).map_err(CliError::stage)?;
            std::fs::write(
                out_dir.join("affine.json"),
                serde_json::to_string_pretty(&aff.transform).map_err(CliError::stage)?,
            )
            .map_err(CliError::stage)?;
            write_field(&diff.forward_disp, out_dir.join("forward.mhd")).map_err(CliError::stage)?;
            write_field(&diff.inverse_disp, out_dir.join("inverse.mhd")).map_err(CliError::stage)?;
            println!(
                "similarity {:.4}, min Jacobian {:.4}",
                diff.final_similarity, diff.min_jacobian
            );
        }
        Command::Template { inputs, out_dir } => {
            let repeats = read_volumes(&inputs)?;
            let st = build_subject_template(&repeats, &cfg.registration, cfg.template_outer_iters)
                .map_err(CliError::stage)?;
            ensure_dir(&out_dir)?;
            write_volume(&st.template, out_dir.join("template.mhd")).map_err(CliError::stage)?;
            std::fs::write(
                out_dir.join("affines.json"),
                serde_json::to_string_pretty(&st.affines).map_err(CliError::stage)?,
            )
            .map_err(CliError::stage)?;
            for (r, d) in st.diffeos.iter().enumerate() {
                write_field(&d.forward_disp, out_dir.join(format!("fwd_r{r:02}.mhd")))
                    .map_err(CliError::stage)?;
            }
            println!(
                "template over {} repeats; mean-velocity max {:.4} voxels; min Jacobian {:.4}",
                repeats.len(),
                st.mean_velocity_max_voxel_magnitude(),
                st.min_jacobian()
            );
        }
        Command::Pair { subjects, manifest_out } => {
            let vols = read_subjects(&subjects)?;
            let dims = vols[0][0].dims;
            let crop = cfg.crop.min(dims.0).min(dims.1);
            let ds = build_pairs(&vols, crop, cfg.seed).map_err(CliError::stage)?;
            let expected: u64 = vols
                .iter()
                .map(|s| pair_count(1, s.len() as u64, s[0].dims.2 as u64).unwrap_or(0))
                .sum();
            let manifest = serde_json::json!({
                "pair_count": ds.pairs.len(),
                "expected": expected,
                "crop": ds.crop,
                "seed": ds.seed,
                "pairs": ds.pairs.iter().map(|(a, b)| {
                    serde_json::json!({ "input": a.provenance, "target": b.provenance })
                }).collect::<Vec<_>>(),
            });
            std::fs::write(
                &manifest_out,
                serde_json::to_string_pretty(&manifest).map_err(CliError::stage)?,
            )
            .map_err(CliError::stage)?;
            println!("{} ordered pairs", ds.pairs.len());
        }
        Command::Train { subjects, model_out, loss_csv } => {
            let vols = read_subjects(&subjects)?;
            let dims = vols[0][0].dims;
            let div = 1usize << cfg.network.depth;
            let crop = (cfg.crop.min(dims.0).min(dims.1)) / div * div;
            let ds = build_pairs(&vols, crop, cfg.seed).map_err(CliError::stage)?;
            let mut net =
                DenoiserNet::<f32>::new_seeded(cfg.network.clone(), cfg.seed).map_err(CliError::stage)?;
            let history = train(&mut net, &ds, &cfg.train).map_err(CliError::stage)?;
            save_model(&net, &model_out).map_err(CliError::stage)?;
            if let Some(path) = loss_csv {
                let mut csv = String::from("epoch,mean_loss\n");
                for (e, l) in history.iter().enumerate() {
                    csv.push_str(&format!("{e},{l:.8}\n"));
                }
                std::fs::write(path, csv).map_err(CliError::stage)?;
            }
            println!(
                "trained {} epochs on {} pairs; final loss {:.6}",
                history.len(),
                ds.pairs.len(),
                history.last().copied().unwrap_or(f64::NAN)
            );
        }
        Command::Denoise { model, input, output } => {
            let net = load_model(&model).map_err(CliError::stage)?;
            let vol = read_volume(&input).map_err(CliError::stage)?;
            let out = denoise_volume(&net, &vol).map_err(CliError::stage)?;
            write_volume(&out, &output).map_err(CliError::stage)?;
        }
        Command::Evaluate { method, noisy, denoised, clean, report_out } => {
            if noisy.len() != denoised.len() {
                return Err(CliError::config("noisy and denoised counts differ"));
            }
            let noisy = read_volumes(&noisy)?;
            let denoised = read_volumes(&denoised)?;
            let clean = if clean.is_empty() {
                None
            } else {
                Some(read_volumes(&clean)?)
            };
            let report = evaluate_methods(
                &[(method, denoised)],
                &noisy,
                clean.as_deref(),
                &cfg.quality,
            )
            .map_err(CliError::stage)?;
            std::fs::write(&report_out, report.to_csv()).map_err(CliError::stage)?;
            for s in &report.summaries {
                println!("{}: mean Q {:.4}, mean AD {:.4}", s.method, s.mean_q, s.mean_ad);
            }
        }
        Command::Export { input, out_dir, stem } => {
            let vol = read_volume(&input).map_err(CliError::stage)?;
            ensure_dir(&out_dir)?;
            let files = export_views(&vol, &out_dir, &stem).map_err(CliError::stage)?;
            println!("wrote {} files", files.len());
        }
        Command::Pipeline { out_dir } => {
            let report = run_pipeline(&cfg, &out_dir).map_err(CliError::stage)?;
            for s in &report.stages {
                if s.skipped {
                    println!("{:<12} skipped (up to date)", s.stage);
                } else {
                    println!("{:<12} {:.1}s", s.stage, s.wall_secs);
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("octden: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
