use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use featmim::analysis::{heatmap, pca_reduce, render_pgm};
use featmim::config::RunConfig;
use featmim::diversity::corpus_diversity;
use featmim::gradcheck::{grad_check, tiny_config};
use featmim::image::load_images;
use featmim::masking::generate_mask;
use featmim::teacher::{dump_features, read_features, FrozenTeacher, TeacherKind};
use featmim::tensor::io;
use featmim::trainer::{ablate_lambda, train};
use featmim::{Error, ErrorKind, Result, Tensor};

#[derive(Debug, Parser)]
#[command(
    name = "featmim",
    version,
    about = "Masked feature prediction against a frozen teacher"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Global {
    /// Run configuration (JSON); missing sections take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory, or output file for single-artifact commands.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides `train.seed` and `teacher.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `mask.seed`; `pretrain` also exports that mask to `<out>/mask.tvec`.
    #[arg(long, global = true)]
    mask_seed: Option<u64>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TeacherArg {
    Procedural,
    File,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the student on a directory of PPM/PGM images.
    Pretrain {
        #[arg(long)]
        images: PathBuf,
    },
    /// Write teacher features for every image as `<id>.tvec` plus a manifest.
    DumpFeatures {
        #[arg(long)]
        images: PathBuf,
        #[arg(long, value_enum)]
        teacher: Option<TeacherArg>,
        /// Source directory for `--teacher file`.
        #[arg(long)]
        features_dir: Option<PathBuf>,
    },
    /// Token diversity of a feature dump, as a JSON report.
    Diversity {
        #[arg(long)]
        features: PathBuf,
    },
    /// Similarity of every token to a query token, as a PGM heat-map.
    Heatmap {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        query: usize,
    },
    /// Project all tokens of a dump (or one file) onto their top principal components.
    Pca {
        #[arg(long)]
        features: PathBuf,
        #[arg(long, default_value_t = 128)]
        components: usize,
    },
    /// Compare analytic and finite-difference gradients on a tiny model.
    GradCheck {
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Train once per global-loss weight and tabulate the final losses.
    AblateLambda {
        #[arg(long)]
        images: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        lambdas: Vec<f64>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.kind() {
                ErrorKind::Config => 2,
                ErrorKind::Data => 3,
                ErrorKind::Numeric => 4,
            })
        }
    }
}

impl Global {
    fn out(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| Error::config("--out", "this command writes output and needs --out"))
    }

    /// Loads `--config` (or `fallback`), applies the seed overrides and validates.
    fn run_config(&self, fallback: impl FnOnce() -> RunConfig) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => fallback(),
        };
        if let Some(seed) = self.seed {
            cfg.train.seed = seed;
            cfg.teacher.seed = seed;
        }
        if let Some(seed) = self.mask_seed {
            cfg.mask.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    if let Some(n) = g.threads {
        if n == 0 {
            return Err(Error::config("--threads", "must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::config("--threads", e.to_string()))?;
    }
    match cli.command {
        Command::Pretrain { images } => pretrain(g, &images),
        Command::DumpFeatures {
            images,
            teacher,
            features_dir,
        } => dump(g, &images, teacher, features_dir),
        Command::Diversity { features } => diversity(g, &features),
        Command::Heatmap { features, query } => heat(g, &features, query),
        Command::Pca { features, components } => pca(g, &features, components),
        Command::GradCheck { tolerance } => check(g, tolerance),
        Command::AblateLambda { images, lambdas } => ablate(g, &images, &lambdas),
    }
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn pretrain(g: &Global, images: &Path) -> Result<()> {
    let cfg = g.run_config(RunConfig::default)?;
    let out = g.out()?;
    let images = load_images(images, &cfg.data)?;
    let outcome = train(&cfg, &images, out)?;
    write_file(&out.join("config.json"), cfg.to_json())?;
    if g.mask_seed.is_some() {
        generate_mask(&cfg.mask)?.save(out.join("mask.tvec"))?;
    }
    let last = outcome.metrics.last().expect("training runs at least one step");
    println!(
        "{} steps; final L_patch {} L_global {} L_total {}; metrics in {}",
        last.step + 1,
        last.l_patch,
        last.l_global,
        last.l_total,
        outcome.metrics_path.display()
    );
    Ok(())
}

fn dump(g: &Global, images: &Path, teacher: Option<TeacherArg>, features_dir: Option<PathBuf>) -> Result<()> {
    let cfg = g.run_config(RunConfig::default)?;
    let mut spec = cfg.teacher.clone();
    match teacher {
        Some(TeacherArg::Procedural) => spec.kind = TeacherKind::Procedural,
        Some(TeacherArg::File) => spec.kind = TeacherKind::File,
        None => {}
    }
    if features_dir.is_some() {
        spec.features_dir = features_dir;
    }
    spec.validate()?;
    spec.align_factor(cfg.model.patch_side)?;
    let out = g.out()?;
    let teacher = FrozenTeacher::new(&spec, cfg.model.in_channels)?;
    let images = load_images(images, &cfg.data)?;
    let manifest = dump_features(&teacher, &images, cfg.model.patch_side, out)?;
    println!("wrote {} feature files to {}", manifest.len(), out.display());
    Ok(())
}

fn diversity(g: &Global, features: &Path) -> Result<()> {
    let out = g.out()?;
    let dump = read_features(features)?;
    let report = corpus_diversity(dump.iter().map(|f| &f.tokens))?;
    write_file(out, serde_json::to_vec_pretty(&report)?)?;
    println!(
        "diver {} over {} samples of {} tokens",
        report.diver, report.n, report.k
    );
    Ok(())
}

fn heat(g: &Global, features: &Path, query: usize) -> Result<()> {
    let out = g.out()?;
    let tokens: Tensor = io::load(features)?;
    let (k, _) = tokens.dims2()?;
    let side = (k as f64).sqrt().round() as usize;
    if side * side != k {
        return Err(Error::Dimension(format!("{k} tokens do not form a square grid")));
    }
    if query >= k {
        return Err(Error::config(
            "--query",
            format!("{query} is out of range for {k} tokens"),
        ));
    }
    let map = heatmap(&tokens, side, query)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    render_pgm(&map, out)?;
    println!("{side}x{side} heat-map for token {query} written to {}", out.display());
    Ok(())
}

/// Rows of every token in a dump directory, or of a single `.tvec` file.
fn stacked_tokens(features: &Path) -> Result<Tensor> {
    if features.is_file() {
        return io::load(features);
    }
    let dump = read_features(features)?;
    let first = dump
        .first()
        .ok_or_else(|| Error::Format(format!("{} lists no features", features.display())))?;
    let dim = first.dim();
    let mut rows = 0;
    let mut data = Vec::new();
    for f in &dump {
        if f.dim() != dim {
            return Err(Error::Dimension(format!(
                "`{}` has width {}, expected {dim}",
                f.source_id,
                f.dim()
            )));
        }
        rows += f.num_tokens();
        data.extend_from_slice(f.tokens.data());
    }
    Tensor::new(vec![rows, dim], data)
}

fn pca(g: &Global, features: &Path, components: usize) -> Result<()> {
    if components == 0 {
        return Err(Error::config("--components", "must be at least 1"));
    }
    let out = g.out()?;
    let x = stacked_tokens(features)?;
    let (m, d) = x.dims2()?;
    let n = components.min(m).min(d);
    if n < components {
        eprintln!("note: {m} tokens of width {d} support at most {n} components");
    }
    let result = pca_reduce(&x, n)?;
    let embedding: Tensor = result.projected.cast();
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    io::save(out, &embedding)?;
    println!("{m} tokens reduced from {d} to {n} dimensions");
    Ok(())
}

fn check(g: &Global, tolerance: f64) -> Result<()> {
    let cfg = g.run_config(tiny_config)?;
    let report = grad_check(&cfg)?;
    if let Some(out) = &g.out {
        write_file(out, serde_json::to_vec_pretty(&report)?)?;
    }
    println!(
        "max relative error {:.3e} at {}[{}] over {} parameters",
        report.max_rel_err, report.worst_param, report.worst_index, report.checked
    );
    if report.max_rel_err.is_nan() || report.max_rel_err >= tolerance {
        return Err(Error::Numeric(format!(
            "gradient check exceeded tolerance {tolerance:e}"
        )));
    }
    Ok(())
}

fn ablate(g: &Global, images: &Path, lambdas: &[f64]) -> Result<()> {
    let cfg = g.run_config(RunConfig::default)?;
    if lambdas.len() < 2 {
        return Err(Error::config("--lambdas", "a sweep needs at least two values"));
    }
    let out = g.out()?;
    let images = load_images(images, &cfg.data)?;
    let rows = ablate_lambda(&cfg, lambdas, &images, out)?;
    for r in &rows {
        println!(
            "lambda {}: L_patch {} L_global {} L_total {}",
            r.lambda, r.last.l_patch, r.last.l_global, r.last.l_total
        );
    }
    Ok(())
}
