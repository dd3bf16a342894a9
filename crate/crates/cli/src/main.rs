use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use caricature_core::baselines::{
    build_linear_model, compare_methods, load_linear_model, save_linear_model, CompareConfig,
};
use caricature_core::basis_io::{load_basis, save_basis};
use caricature_core::collection::{caricature_tasks, face_dataset, CaricatureTask, FaceTemplate};
use caricature_core::deform::align_rigid;
use caricature_core::io::{read_landmarks, read_mesh, read_scalars, write_landmarks, write_mesh};
use caricature_core::pipeline::{blank_canvas, draw_overlay, AnchorPolicy, FitConfig};
use caricature_core::{
    fit_caricature, optimize_weights, reconstruct_from_weights, Anchor, BlendWeights,
    CameraDocument, DeformBasis, LmOptions, ProjectionParams, TriangleMesh,
};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "caricature",
    version,
    about = "Data-driven 3D caricature fitting from 2D landmarks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic face collection, its basis inputs and caricature tasks.
    Synth {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Number of caricature tasks written under `tasks/`.
        #[arg(long, default_value_t = 10)]
        tasks: usize,
        /// Use the ~11.5k-vertex template instead of the ~2k desk template.
        #[arg(long)]
        full_scale: bool,
    },
    /// Extract a deformation basis from a directory of example meshes.
    #[command(alias = "build-basis")]
    ExtractBasis {
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        examples: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reconstruct a mesh from blend weights.
    Reconstruct {
        #[arg(long)]
        basis: PathBuf,
        /// 2n scalars: all wR then all wS.
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Anchor vertex; defaults to the vertex nearest the reference centroid.
        #[arg(long)]
        anchor: Option<usize>,
    },
    /// Fit blend weights to a target mesh.
    FitWeights {
        #[arg(long)]
        basis: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        tie_weights: bool,
    },
    /// Fit a 3D caricature to 2D landmarks.
    Fit {
        #[arg(long)]
        basis: PathBuf,
        #[arg(long)]
        landmarks: PathBuf,
        /// Background for the overlay; a blank 512×512 canvas when omitted.
        #[arg(long)]
        image: Option<PathBuf>,
        #[arg(long, default_value_t = 0.01)]
        lambda: f64,
        #[arg(long, default_value_t = 4)]
        iters: usize,
        #[arg(long, default_value_t = 1e-2)]
        epsilon: f64,
        #[arg(long)]
        tie_weights: bool,
        #[arg(long)]
        anchor: Option<usize>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Build the linear (PCA) baseline model from example meshes.
    BuildLinear {
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        examples: PathBuf,
        /// Fraction of variance kept.
        #[arg(long, default_value_t = 1.0)]
        variance: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare our fit against the linear baselines on a task directory.
    Compare {
        #[arg(long)]
        basis: PathBuf,
        #[arg(long)]
        linear_model: PathBuf,
        #[arg(long)]
        tasks: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Fixed λ_reg; rescaled per task from the face-box size when omitted.
        #[arg(long)]
        lambda_reg: Option<f64>,
    },
    /// Run the local session service.
    Serve {
        #[arg(long)]
        basis: PathBuf,
        #[arg(long, default_value = "sessions")]
        sessions: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Synth {
            seed,
            out,
            tasks,
            full_scale,
        } => synth(seed, &out, tasks, full_scale),
        Command::ExtractBasis {
            reference,
            examples,
            out,
        } => {
            let reference_mesh: TriangleMesh<f64> = read_mesh(&reference)?;
            let meshes = read_mesh_dir(&examples)?;
            let basis = caricature_core::collection::build_basis(&reference_mesh, &meshes)?;
            let stored = fs::canonicalize(&reference)
                .with_context(|| format!("resolving {}", reference.display()))?;
            save_basis(&out, &basis, &stored.to_string_lossy())?;
            log::info!(
                "basis with {} examples over {} vertices -> {}",
                basis.len(),
                basis.num_vertices(),
                out.display()
            );
            Ok(())
        }
        Command::Reconstruct {
            basis,
            weights,
            out,
            anchor,
        } => {
            let basis: DeformBasis<f64> = load_basis(&basis)?;
            let w = BlendWeights::from_flat(&read_scalars(&weights)?)?;
            let a = resolve_anchor(&basis, anchor)?;
            let mesh =
                reconstruct_from_weights(&basis, &w, Anchor::at_vertex(&basis.reference, a))?;
            write_mesh(&out, &mesh)?;
            Ok(())
        }
        Command::FitWeights {
            basis,
            target,
            out,
            tie_weights,
        } => {
            let basis: DeformBasis<f64> = load_basis(&basis)?;
            let target: TriangleMesh<f64> = read_mesh(&target)?;
            let all: Vec<usize> = (0..basis.num_vertices()).collect();
            let aligned = align_rigid(&basis.reference, &target, &all)?.mesh;
            let opts = LmOptions {
                tie_weights,
                ..LmOptions::default()
            };
            let report =
                optimize_weights(&basis, &aligned, &BlendWeights::zeros(basis.len()), &opts)?;
            log::info!(
                "E_def {:.6e} -> {:.6e} ({:?})",
                report.initial_energy(),
                report.final_energy(),
                report.termination
            );
            write_text(&out, &report.weights().to_text())
        }
        Command::Fit {
            basis,
            landmarks,
            image,
            lambda,
            iters,
            epsilon,
            tie_weights,
            anchor,
            out_dir,
        } => {
            let basis: DeformBasis<f64> = load_basis(&basis)?;
            let lms = read_landmarks(&landmarks)?;
            let cfg = FitConfig {
                lambda,
                max_iterations: iters,
                epsilon,
                tie_weights,
                anchor: anchor.map(AnchorPolicy::Vertex).unwrap_or_default(),
                ..FitConfig::default()
            };
            let res = fit_caricature(&basis, &lms, &cfg)?;
            fs::create_dir_all(&out_dir)
                .with_context(|| format!("creating {}", out_dir.display()))?;
            write_mesh(out_dir.join("mesh.obj"), &res.mesh)?;
            write_text(&out_dir.join("weights.txt"), &res.weights.to_text())?;
            write_text(
                &out_dir.join("camera.json"),
                &serde_json::to_string_pretty(&res.proj.to_document())?,
            )?;
            write_text(&out_dir.join("energy.csv"), &res.energy_trace_csv())?;
            write_text(
                &out_dir.join("result.json"),
                &serde_json::to_string_pretty(&res.to_document(&lms))?,
            )?;
            let base = match &image {
                Some(p) => image::open(p)
                    .with_context(|| format!("reading {}", p.display()))?
                    .to_rgb8(),
                None => blank_canvas(512, 512),
            };
            draw_overlay(&base, &lms.points, &res.reprojected(&lms))
                .save(out_dir.join("overlay.png"))
                .context("writing overlay")?;
            println!(
                "E_error {:.6} px, E_def {:.6e}, {} iterations ({:?}) in {:.2?}",
                res.e_error,
                res.e_def,
                res.iterations.len(),
                res.stop,
                res.elapsed
            );
            Ok(())
        }
        Command::BuildLinear {
            reference,
            examples,
            variance,
            out,
        } => {
            let reference: TriangleMesh<f64> = read_mesh(&reference)?;
            let all: Vec<usize> = (0..reference.num_vertices()).collect();
            let mut train = read_mesh_dir(&examples)?
                .iter()
                .map(|m| Ok(align_rigid(&reference, m, &all)?.mesh))
                .collect::<caricature_core::Result<Vec<_>>>()?;
            train.push(reference);
            let model = build_linear_model(&train, variance)?;
            save_linear_model(&out, &model)?;
            log::info!(
                "linear model with {} modes -> {}",
                model.num_modes(),
                out.display()
            );
            Ok(())
        }
        Command::Compare {
            basis,
            linear_model,
            tasks,
            out,
            lambda_reg,
        } => {
            let basis: DeformBasis<f64> = load_basis(&basis)?;
            let model = load_linear_model(&linear_model)?;
            let tasks = load_tasks(&tasks, basis.len())?;
            let cfg = CompareConfig {
                lambda_reg,
                ..CompareConfig::default()
            };
            let table = compare_methods(&basis, &model, &tasks, &cfg)?;
            let csv = table.to_csv();
            write_text(&out, &csv)?;
            print!("{csv}");
            Ok(())
        }
        Command::Serve {
            basis,
            sessions,
            addr,
        } => {
            let basis: DeformBasis<f64> = load_basis(&basis)?;
            let state = caricature_service::AppState::new(sessions, basis, FitConfig::default())?;
            tokio::runtime::Runtime::new()?.block_on(caricature_service::serve(addr, state))?;
            Ok(())
        }
    }
}

fn resolve_anchor(basis: &DeformBasis<f64>, anchor: Option<usize>) -> Result<usize> {
    Ok(anchor
        .map(AnchorPolicy::Vertex)
        .unwrap_or_default()
        .resolve(&basis.reference)?)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Every `.obj` in `dir`, in file-name order.
fn read_mesh_dir(dir: &Path) -> Result<Vec<TriangleMesh<f64>>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "obj"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!("no .obj meshes in {}", dir.display());
    }
    paths
        .iter()
        .map(|p| {
            let mut m: TriangleMesh<f64> = read_mesh(p)?;
            m.name = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            Ok(m)
        })
        .collect()
}

fn synth(seed: u64, out: &Path, task_count: usize, full_scale: bool) -> Result<()> {
    let template = if full_scale {
        FaceTemplate::full_scale()
    } else {
        FaceTemplate::desk()
    };
    let dataset = face_dataset(&template, seed)?;
    let examples_dir = out.join("examples");
    let tasks_dir = out.join("tasks");
    fs::create_dir_all(&examples_dir)?;
    fs::create_dir_all(&tasks_dir)?;
    write_mesh(out.join("template.obj"), template.mesh())?;
    write_mesh(out.join("reference.obj"), &dataset.reference)?;
    let mut recipes = Vec::new();
    for (k, (mesh, recipe)) in dataset.examples().iter().zip(dataset.recipes()).enumerate() {
        let file = format!("{k:03}_{}.obj", mesh.name);
        write_mesh(examples_dir.join(&file), mesh)?;
        recipes.push(serde_json::json!({ "file": file, "recipe": recipe }));
    }
    let manifest = serde_json::json!({
        "seed": seed,
        "vertices": dataset.reference.num_vertices(),
        "landmark_indices": template.landmarks(),
        "nose_tip": template.nose_tip(),
        "examples": recipes,
    });
    write_text(
        &out.join("collection.json"),
        &serde_json::to_string_pretty(&manifest)?,
    )?;
    let basis: DeformBasis<f64> = dataset.basis()?;
    for task in caricature_tasks(
        &basis,
        template.landmarks(),
        template.nose_tip(),
        seed,
        task_count,
    )? {
        save_task(&tasks_dir, &task)?;
    }
    println!(
        "{} examples, {} tasks, {} vertices -> {}",
        basis.len(),
        task_count,
        basis.num_vertices(),
        out.display()
    );
    Ok(())
}

/// A task is `<name>.json` (landmarks) plus `<name>.camera.json`, `<name>.target.obj` and
/// `<name>.weights.txt` holding the ground truth.
fn save_task(dir: &Path, task: &CaricatureTask<f64>) -> Result<()> {
    write_landmarks(dir.join(format!("{}.json", task.name)), &task.landmarks)?;
    write_text(
        &dir.join(format!("{}.camera.json", task.name)),
        &serde_json::to_string_pretty(&task.camera.to_document())?,
    )?;
    write_mesh(dir.join(format!("{}.target.obj", task.name)), &task.target)?;
    write_text(
        &dir.join(format!("{}.weights.txt", task.name)),
        &task.weights.to_text(),
    )
}

fn load_tasks(dir: &Path, n: usize) -> Result<Vec<CaricatureTask<f64>>> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let f = e.file_name().to_string_lossy().into_owned();
            let stem = f.strip_suffix(".json")?;
            (!stem.contains('.')).then(|| stem.to_string())
        })
        .collect();
    names.sort();
    if names.is_empty() {
        bail!("no task landmark documents in {}", dir.display());
    }
    names
        .into_iter()
        .map(|name| {
            let landmarks = read_landmarks(dir.join(format!("{name}.json")))?;
            let cam_path = dir.join(format!("{name}.camera.json"));
            let cam: CameraDocument = serde_json::from_str(
                &fs::read_to_string(&cam_path)
                    .with_context(|| format!("reading {}", cam_path.display()))?,
            )?;
            let target = read_mesh(dir.join(format!("{name}.target.obj")))?;
            let weights =
                BlendWeights::from_flat(&read_scalars(dir.join(format!("{name}.weights.txt")))?)?;
            if weights.len() != n {
                bail!(
                    "task {name} has {} weights for a basis of {n}",
                    weights.len()
                );
            }
            Ok(CaricatureTask {
                name,
                landmarks,
                camera: ProjectionParams::from_document(&cam)?,
                target,
                weights,
            })
        })
        .collect()
}
