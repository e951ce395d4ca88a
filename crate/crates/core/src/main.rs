//! Command-line front end: clustering, merge p-values, K̂, stability, gap
//! statistic and the simulation studies.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::Array2;

use randclust::bench::{
    self, write_experiment, ExperimentSpec, FwerSpec, GeneratorSpec, KHistogramSpec,
    NullCalibrationSpec, PowerSpec, QualitySpec, StabilitySpec, Table,
};
use randclust::data::{load_csv, DataMatrix, Filter};
use randclust::engine::{run_clustering, MergeTrace, RandomizationConfig};
use randclust::inference::{
    p_value_chi, p_value_f, pooled_variance, Covariance, TestOptions, WeightMode,
};
use randclust::linkage::Linkage;
use randclust::metrics::{gap_statistic, GapConfig};
use randclust::quadrature::QuadratureConfig;
use randclust::selection::{estimate_k, SelectionConfig, SizeCutoff};
use randclust::{Error, Result};

#[derive(Parser)]
#[command(name = "randclust", version, about)]
struct Cli {
    /// Master random seed.
    #[arg(long, global = true, default_value_t = 1)]
    seed: u64,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Directory for CSV/JSON outputs.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Divide replication counts of simulations by this factor.
    #[arg(long, global = true, default_value_t = 1)]
    scale: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct DataArgs {
    /// CSV file with a header row.
    #[arg(long)]
    input: PathBuf,
    /// Comma-separated feature columns.
    #[arg(long, value_delimiter = ',', required = true)]
    features: Vec<String>,
    /// Keep rows with `column=value`; repeat for several values or columns.
    #[arg(long)]
    filter: Vec<Filter>,
    /// Z-score each feature column.
    #[arg(long)]
    standardize: bool,
}

impl DataArgs {
    fn load(&self) -> Result<DataMatrix> {
        let data = load_csv(&self.input, &self.features, &self.filter)?;
        log::info!("loaded {} rows from {}", data.matrix.n(), self.input.display());
        if self.standardize {
            data.matrix.standardized()
        } else {
            Ok(data.matrix)
        }
    }
}

#[derive(Args, Clone)]
struct ClusterArgs {
    #[arg(long, default_value_t = 0.1)]
    tau: f64,
    #[arg(long, default_value = "complete")]
    linkage: Linkage,
}

#[derive(Args, Clone)]
struct QuadArgs {
    #[arg(long, default_value_t = 64)]
    quad_panels: usize,
    #[arg(long, default_value_t = 16)]
    quad_nodes: usize,
    /// Plain F (or χ) test that ignores the selection.
    #[arg(long)]
    naive: bool,
}

impl QuadArgs {
    fn options(&self) -> Result<TestOptions> {
        Ok(TestOptions {
            quad: QuadratureConfig::new(self.quad_panels, self.quad_nodes)?,
            weight: if self.naive { WeightMode::Constant } else { WeightMode::Selective },
        })
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    F,
    Chi,
}

#[derive(Clone, Copy, ValueEnum)]
enum SimKind {
    NullCalibration,
    PowerCurve,
    Fwer,
    KHistogram,
    Stability,
    QualitySweep,
}

#[derive(Subcommand)]
enum Command {
    /// Run the randomized clusterer down to `k` clusters and print the trace.
    Cluster {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        cluster: ClusterArgs,
        #[arg(long, default_value_t = 2)]
        k: usize,
    },
    /// Selective p-value for the merge that joins two of `k` clusters.
    Pvalue {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        cluster: ClusterArgs,
        #[command(flatten)]
        quad: QuadArgs,
        /// Clusters present before the tested merge.
        #[arg(long, default_value_t = 2)]
        k: usize,
        /// Existing trace (JSON) instead of a fresh clustering run.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "f")]
        variant: VariantArg,
        /// χ test covariance: a p×p CSV file, or a scalar noise standard
        /// deviation. Omitted: pooled plug-in variance.
        #[arg(long)]
        sigma: Option<String>,
    },
    /// Estimate the number of clusters by α-spending over the merges.
    ChooseK {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        cluster: ClusterArgs,
        #[command(flatten)]
        quad: QuadArgs,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        #[arg(long, default_value_t = 0.5)]
        decay: f64,
        /// Integer (absolute) or fraction of n.
        #[arg(long, default_value = "0.1")]
        n_min: SizeCutoff,
        /// Integer (absolute) or fraction of n.
        #[arg(long, default_value = "0.4")]
        n_star: SizeCutoff,
    },
    /// Co-occurrence matrix over repeated randomized runs.
    Stability {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        cluster: ClusterArgs,
        #[arg(long, default_value_t = 2)]
        k: usize,
        #[arg(long, default_value_t = 500)]
        runs: usize,
    },
    /// Gap statistic with uniform reference data.
    Gap {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value = "complete")]
        linkage: Linkage,
        #[arg(long, default_value_t = 10)]
        k_max: usize,
        #[arg(long, default_value_t = 50)]
        refs: usize,
    },
    /// Run a simulation study and write its tables and manifest.
    Simulate {
        #[arg(value_enum)]
        kind: SimKind,
        /// JSON experiment spec; defaults to the study's standard settings.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
}

fn read_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let path = dir.join(name);
    std::fs::write(&path, contents).map_err(|source| Error::Io {
        path: path.clone(),
        source,
    })?;
    Ok(path)
}

fn covariance(sigma: Option<&str>, x: &DataMatrix) -> Result<Covariance> {
    let p = x.p();
    let Some(s) = sigma else {
        return Covariance::scaled_identity(p, pooled_variance(x));
    };
    if let Ok(sd) = s.parse::<f64>() {
        return Covariance::scaled_identity(p, sd * sd);
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(s)?;
    let mut values = Vec::new();
    for record in reader.records() {
        for field in record?.iter() {
            values.push(field.trim().parse::<f64>().map_err(|_| {
                Error::Schema(format!("non-numeric covariance entry {field:?} in {s}"))
            })?);
        }
    }
    if values.len() != p * p {
        return Err(Error::Schema(format!(
            "covariance file {s} has {} entries, expected {p}x{p}",
            values.len()
        )));
    }
    let m = Array2::from_shape_vec((p, p), values)
        .map_err(|e| Error::InvalidState(e.to_string()))?;
    Covariance::new(&m)
}

fn default_spec(kind: SimKind) -> ExperimentSpec {
    match kind {
        SimKind::NullCalibration => ExperimentSpec::NullCalibration(NullCalibrationSpec::default()),
        SimKind::PowerCurve => ExperimentSpec::PowerCurve(PowerSpec::default()),
        SimKind::Fwer => ExperimentSpec::Fwer(FwerSpec::default()),
        SimKind::KHistogram => ExperimentSpec::KHistogram(KHistogramSpec::default()),
        SimKind::Stability => ExperimentSpec::Stability {
            generator: GeneratorSpec::TwoCluster { n: 30, delta: 6.0, sigma: 1.0, p: 2 },
            spec: StabilitySpec::default(),
        },
        SimKind::QualitySweep => ExperimentSpec::QualitySweep(QualitySpec::default()),
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(t) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| Error::InvalidState(e.to_string()))?;
    }
    let seed = cli.seed;
    match cli.command {
        Command::Cluster { data, cluster, k } => {
            let x = data.load()?;
            let config = RandomizationConfig::new(cluster.tau, cluster.linkage, seed)?;
            let trace = run_clustering(&x, k, &config)?;
            println!("{}", trace.to_json()?);
        }
        Command::Pvalue { data, cluster, quad, k, trace, variant, sigma } => {
            let x = data.load()?;
            let n = x.n();
            if k < 2 || k > n {
                return Err(Error::InvalidArgument(format!("k must be in 2..={n}")));
            }
            let trace = match trace {
                Some(path) => MergeTrace::from_json(&read_file(&path)?)?,
                None => {
                    let config = RandomizationConfig::new(cluster.tau, cluster.linkage, seed)?;
                    run_clustering(&x, k - 1, &config)?
                }
            };
            let options = quad.options()?;
            let step = n - k + 1;
            let result = match variant {
                VariantArg::F => p_value_f(&x, &trace, step, &options)?,
                VariantArg::Chi => {
                    let cov = covariance(sigma.as_deref(), &x)?;
                    p_value_chi(&x, &trace, step, &cov, &options)?
                }
            };
            println!("{}", result.to_json()?);
        }
        Command::ChooseK { data, cluster, quad, alpha, decay, n_min, n_star } => {
            let x = data.load()?;
            let config = SelectionConfig { alpha, decay, n_min, n_star };
            let (estimate, trace) =
                estimate_k(&x, cluster.linkage, cluster.tau, &config, seed, &quad.options()?)?;
            let out = serde_json::json!({ "estimate": estimate, "trace": trace });
            println!("{}", serde_json::to_string_pretty(&out)?);
        }
        Command::Stability { data, cluster, k, runs } => {
            let x = data.load()?;
            let spec = StabilitySpec {
                runs,
                k,
                linkage: cluster.linkage,
                tau: cluster.tau,
                seed,
            };
            let c = bench::run_stability(&x, &spec)?;
            let path = write_file(&cli.out_dir, "cooccurrence.csv", &c.to_csv())?;
            println!("{}", path.display());
        }
        Command::Gap { data, linkage, k_max, refs } => {
            let x = data.load()?;
            let result = gap_statistic(&x, &GapConfig { k_max, b_refs: refs, linkage, seed })?;
            let path = write_file(&cli.out_dir, "gap.csv", &result.to_csv())?;
            println!("k_hat={} ({})", result.k_hat, path.display());
        }
        Command::Simulate { kind, spec } => {
            let spec = match spec {
                Some(path) => serde_json::from_str(&read_file(&path)?)?,
                None => default_spec(kind).with_seed(seed),
            };
            let spec = spec.scaled(cli.scale);
            let (tables, summary): (Vec<Table>, _) = spec.run()?;
            let manifest = write_experiment(&cli.out_dir, &spec, cli.scale, &tables, summary)?;
            println!("{}", manifest.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
