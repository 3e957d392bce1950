mod config;
mod io;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use aaams::agglomerator::write_diagnostics;
use aaams::baselines::{run_standard_ms, run_variable_ms};
use aaams::dataset::{build_index, compute_density, DensityField};
use aaams::dataset::io::write_csv;
use aaams::postprocess::{postprocess, postprocess_labels};
use aaams::synth::{random_mixture, sample, Mixture, RandomMixture};
use aaams::{metrics, run, Partition, RunConfig};
use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};

use crate::config::{Algo, Params};
use crate::io::{load, load_truth, write_json, write_labels, Dataset, Outputs, Summary};

#[derive(Parser)]
#[command(name = "aaams", version, about = "Agglomerative adaptive anisotropic mean-shift clustering")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Source {
    /// Points as CSV (one row per point) or the binary layout.
    #[arg(long)]
    input: Option<PathBuf>,
    /// RGB image, clustered in joint (L*a*b*, row, col) space.
    #[arg(long)]
    image: Option<PathBuf>,
    /// TOML file with parameter defaults; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Cluster points or segment an image.
    Cluster {
        #[command(flatten)]
        source: Source,
        /// Ground-truth labels for the metric report.
        #[arg(long)]
        truth: Option<PathBuf>,
        #[command(flatten)]
        params: Params,
    },
    /// Sample a seeded anisotropic Gaussian mixture.
    Synth {
        /// Mixture description (JSON) to sample instead of a random one.
        #[arg(long)]
        mixture: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        components: usize,
        #[arg(long, default_value_t = 2)]
        dim: usize,
        #[arg(long, short, default_value_t = 600)]
        n: usize,
        /// Smallest and largest major-axis standard deviation.
        #[arg(long, value_delimiter = ',', num_args = 2, default_values_t = [0.25, 1.0])]
        scale_range: Vec<f64>,
        #[arg(long, default_value_t = 10.0)]
        max_axis_ratio: f64,
        #[arg(long, default_value_t = 2.0)]
        separation: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
    },
    /// Vary one parameter over a grid, holding the others fixed.
    Sweep {
        #[command(flatten)]
        source: Source,
        #[arg(long, value_enum)]
        param: SweepParam,
        /// Domain block of the swept parameter.
        #[arg(long, default_value_t = 0)]
        block: usize,
        /// Squared values to try, comma separated.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        values: Vec<f64>,
        #[command(flatten)]
        params: Params,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SweepParam {
    SigmaBase,
    Epsilon,
}

/// Exit status 2 for bad input or configuration, 1 for failures afterwards.
enum Failure {
    Input(anyhow::Error),
    Run(anyhow::Error),
}

trait InputContext<T> {
    fn input(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> InputContext<T> for Result<T, E> {
    fn input(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Input(e.into()))
    }
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Run(e.into())
    }
}

struct Outcome {
    partition: Partition,
    raw_clusters: usize,
    iterations: Option<usize>,
    max_iterations_reached: Option<bool>,
    diagnostics: Option<Vec<aaams::agglomerator::IterationStats>>,
    postprocessed: bool,
}

fn resolve(source: &Source, params: Params) -> Result<(Dataset, Params), Failure> {
    let params = match &source.config {
        Some(path) => params.or(&Params::from_file(path).input()?),
        None => params,
    };
    let data = load(source.input.as_deref(), source.image.as_deref(), params.domains.as_deref()).input()?;
    Ok((data, params))
}

fn density(data: &Dataset, cfg: &RunConfig) -> aaams::Result<DensityField> {
    compute_density(&data.store, &cfg.sigma_base, &build_index(&data.store), &cfg.kernel)
}

fn execute(data: &Dataset, params: &Params, cfg: Option<&RunConfig>) -> anyhow::Result<Outcome> {
    let image = data.is_image();
    let raw = params.raw.unwrap_or(false);
    match params.algo() {
        Algo::Aaams => {
            let cfg = cfg.context("missing run configuration")?;
            let res = run(&data.store, cfg)?;
            let raw_clusters = res.clusters.len();
            let partition = if raw {
                res.partition()
            } else {
                postprocess(&data.store, &res, &params.postprocess_config(cfg, image))?
            };
            Ok(Outcome {
                partition,
                raw_clusters,
                iterations: Some(res.iterations),
                max_iterations_reached: Some(res.max_iterations_reached),
                diagnostics: Some(res.diagnostics),
                postprocessed: !raw,
            })
        }
        Algo::Ms | Algo::Vms => {
            let base = match params.algo() {
                Algo::Ms => run_standard_ms(&data.store, &params.standard_config(cfg.context("missing run configuration")?))?,
                _ => run_variable_ms(&data.store, &params.variable_config())?,
            };
            let raw_clusters = base.len();
            // post-processing needs the base-bandwidth density
            let (partition, postprocessed) = match cfg {
                Some(cfg) if !raw => {
                    let rho = density(data, cfg)?;
                    let pp = params.postprocess_config(cfg, image);
                    (postprocess_labels(&data.store, &base.labels, |k| base.modes[k].clone(), &rho, &pp)?, true)
                }
                _ => (base, false),
            };
            Ok(Outcome { partition, raw_clusters, iterations: None, max_iterations_reached: None, diagnostics: None, postprocessed })
        }
    }
}

/// Run configuration, optional only for the variable-bandwidth baseline.
fn run_config(data: &Dataset, params: &Params) -> Result<Option<RunConfig>, Failure> {
    let blocks = data.store.domains().block_count();
    let image = data.is_image();
    let given = params.sigma_base.is_some() || params.params.is_some() || image;
    if params.algo() == Algo::Vms && !given {
        return Ok(None);
    }
    let cfg = params.run_config(blocks, image).input()?;
    cfg.validate(&data.store).input()?;
    Ok(Some(cfg))
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display())).input()
}

fn cmd_cluster(source: Source, truth: Option<PathBuf>, params: Params) -> Result<(), Failure> {
    let (data, params) = resolve(&source, params)?;
    let cfg = run_config(&data, &params)?;
    let truth = truth.map(|p| load_truth(&p, &data)).transpose().input()?;
    create_dir(&source.out_dir)?;

    let start = Instant::now();
    let out = execute(&data, &params, cfg.as_ref())?;
    if params.algo() == Algo::Vms && !out.postprocessed && params.raw != Some(true) {
        eprintln!("note: post-processing skipped; it needs --sigma-base for the density field");
    }
    let outputs = Outputs { dir: &source.out_dir };
    outputs.partition(&out.partition, &data)?;
    if let Some(diag) = &out.diagnostics {
        let f = std::fs::File::create(source.out_dir.join("diagnostics.jsonl"))?;
        write_diagnostics(std::io::BufWriter::new(f), diag)?;
    }
    if let Some(truth) = &truth {
        outputs.metrics(&metrics::report(&out.partition.labels, truth, data.grid)?)?;
    }
    let algo = format!("{:?}", params.algo()).to_lowercase();
    write_json(
        &source.out_dir.join("summary.json"),
        &Summary {
            algo: &algo,
            points: data.store.len(),
            raw_cluster_count: out.raw_clusters,
            cluster_count: out.partition.len(),
            iterations: out.iterations,
            max_iterations_reached: out.max_iterations_reached,
            postprocessed: out.postprocessed,
        },
    )?;
    eprintln!(
        "{} points -> {} clusters ({} before post-processing) in {:.2?}",
        data.store.len(),
        out.partition.len(),
        out.raw_clusters,
        start.elapsed()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_synth(
    mixture: Option<PathBuf>,
    components: usize,
    dim: usize,
    n: usize,
    scale_range: Vec<f64>,
    max_axis_ratio: f64,
    separation: f64,
    seed: u64,
    out_dir: PathBuf,
) -> Result<(), Failure> {
    let mixture: Mixture = match mixture {
        Some(path) => {
            let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display())).input()?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display())).input()?
        }
        None => {
            let p = RandomMixture { components, dim, scale_range: (scale_range[0], scale_range[1]), max_axis_ratio, separation };
            random_mixture(&p, seed).input()?
        }
    };
    if n == 0 {
        return Err(Failure::Input(anyhow::anyhow!("-n must be positive")));
    }
    let (data, labels) = sample(&mixture, n, seed).input()?;
    create_dir(&out_dir)?;
    let d = mixture.components[0].dim();
    write_csv(&out_dir.join("points.csv"), &data, d)?;
    write_labels(&out_dir.join("truth.csv"), &labels)?;
    write_json(&out_dir.join("mixture.json"), &mixture)?;
    Ok(())
}

fn cmd_sweep(source: Source, param: SweepParam, block: usize, values: Vec<f64>, params: Params) -> Result<(), Failure> {
    if values.is_empty() {
        return Err(Failure::Input(anyhow::anyhow!("--values is empty")));
    }
    let (data, params) = resolve(&source, params)?;
    let blocks = data.store.domains().block_count();
    if block >= blocks {
        return Err(Failure::Input(anyhow::anyhow!("--block {block} out of range; data has {blocks} block(s)")));
    }
    let (sigma, eps) = params.squared_scales(blocks, data.is_image()).input()?;
    create_dir(&source.out_dir)?;
    let path = source.out_dir.join("sweep.csv");
    let mut rows = vec!["param,block,value,cluster_count,raw_cluster_count,mean_cluster_size,iterations_to_convergence,max_iterations_reached".to_string()];
    for &v in &values {
        let (mut s, mut e) = (sigma.clone(), eps.clone());
        let name = match param {
            SweepParam::SigmaBase => {
                s[block] = v;
                "sigma-base"
            }
            SweepParam::Epsilon => {
                e[block] = v;
                "epsilon"
            }
        };
        let setting = Params { sigma_base: Some(s), epsilon: Some(e), params: None, ..params.clone() };
        let cfg = run_config(&data, &setting)?;
        let out = execute(&data, &setting, cfg.as_ref())?;
        let k = out.partition.len();
        rows.push(format!(
            "{name},{block},{v},{k},{},{},{},{}",
            out.raw_clusters,
            data.store.len() as f64 / k as f64,
            out.iterations.map(|i| i.to_string()).unwrap_or_default(),
            out.max_iterations_reached.map(|b| b.to_string()).unwrap_or_default(),
        ));
        eprintln!("{name}[{block}] = {v}: {k} clusters");
    }
    std::fs::write(&path, rows.join("\n") + "\n").with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn configure_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("AAAMS_THREADS") {
        let n: usize = v.parse().with_context(|| format!("AAAMS_THREADS={v} is not a number"))?;
        if n == 0 {
            bail!("AAAMS_THREADS must be positive");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().input().and_then(|_| match cli.command {
        Command::Cluster { source, truth, params } => cmd_cluster(source, truth, params),
        Command::Synth { mixture, components, dim, n, scale_range, max_axis_ratio, separation, seed, out_dir } => {
            cmd_synth(mixture, components, dim, n, scale_range, max_axis_ratio, separation, seed, out_dir)
        }
        Command::Sweep { source, param, block, values, params } => cmd_sweep(source, param, block, values, params),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
