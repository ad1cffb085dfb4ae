//! Command-line orchestration: the `synthetic`, `toy`, and `ntk` pipelines,
//! their JSON configs, and their file outputs. Every command is idempotent
//! given (config, seed): rerunning overwrites with identical bytes.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::datagen::{make_cos_dataset, make_gaussian_pair_client, make_offdiag_cov, ClientDataset};
use crate::error::Error;
use crate::federation::{
    run_federation, BatchSize, ClientState, FederationConfig, ModelKind, ModelParams, Strategy,
};
use crate::model::{init_theory, new_classifier, toy_mse_surface, LossKind, ToyModel};
use crate::ntk::{
    gd_residual_trace, gram_aux_mc, gram_finite, lambda_matrix, linear_decay_fit, min_eig_compare,
    one_step_ntk_check, pool_samples, GramVariant,
};
use crate::numerics::{sym_eig_max, sym_eig_min, DenseMatrix, Rng};

/// Exit codes: stable contract for CI.
pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DIVERGENCE: i32 = 3;
pub const EXIT_VERIFICATION: i32 = 4;
pub const EXIT_OTHER: i32 = 1;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Divergence(String),
    Verification(String),
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Divergence(_) => EXIT_DIVERGENCE,
            CliError::Verification(_) => EXIT_VERIFICATION,
            CliError::Other(_) => EXIT_OTHER,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Config(m)
            | CliError::Divergence(m)
            | CliError::Verification(m)
            | CliError::Other(m) => m,
        }
    }
}

impl From<Error> for CliError {
    fn from(err: Error) -> Self {
        match err {
            Error::Divergence { .. } => CliError::Divergence(err.to_string()),
            Error::InvalidArgument(_) | Error::Parse { .. } | Error::Json(_) => {
                CliError::Config(err.to_string())
            }
            other => CliError::Other(other.to_string()),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "fedbn-sim", about = "Federated training and kernel-spectrum experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Feature-shift classification: FedAvg, FedProx, FedBN, and SingleSet on
    /// the same seeded clients.
    Synthetic {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Run only this strategy (fedavg|fedprox|fedbn|singleset).
        #[arg(long)]
        strategy: Option<String>,
    },
    /// Scalar cosine loss surfaces over the (w, gamma) grid.
    Toy {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Kernel Gram matrices, spectral ordering, and descent checks.
    Ntk {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

/// Entry point for the binary. Returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // clap handles --help/--version with its own formatting
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let result = match cli.command {
        Command::Synthetic {
            config,
            out,
            seed,
            strategy,
        } => cmd_synthetic_files(config.as_deref(), &out, seed, strategy.as_deref())
            .map(|summary| {
                println!(
                    "synthetic: wrote {} strategies to {}",
                    summary.strategies.len(),
                    out.display()
                );
            }),
        Command::Toy { config, out, seed } => {
            cmd_toy_files(config.as_deref(), &out, seed).map(|report| {
                println!(
                    "toy: wrote {} client surfaces to {}",
                    report.clients.len(),
                    out.display()
                );
            })
        }
        Command::Ntk { config, out, seed } => {
            cmd_ntk_files(config.as_deref(), &out, seed).map(|verdict| {
                println!(
                    "ntk: ordering_holds = {} (mu0 = {:.6e}, mu0* = {:.6e})",
                    verdict.spectral.ordering_holds, verdict.spectral.mu0, verdict.spectral.mu0_star
                );
            })
        }
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    }
}

fn load_config<C: serde::de::DeserializeOwned + Default>(
    path: Option<&Path>,
) -> Result<C, CliError> {
    match path {
        None => Ok(C::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::Config(format!("config {}: {e}", p.display())))
        }
    }
}

fn ensure_out_dir(out: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(out)
        .map_err(|e| CliError::Other(format!("cannot create {}: {e}", out.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Other(format!("serialize {}: {e}", path.display())))?;
    std::fs::write(path, text + "\n")
        .map_err(|e| CliError::Other(format!("write {}: {e}", path.display())))
}

// ---------------------------------------------------------------------------
// synthetic

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub n_clients: usize,
    pub d: usize,
    pub samples_per_client: usize,
    pub test_samples_per_client: usize,
    /// Off-diagonal covariance value for the most-shifted client; client 0 is
    /// identity, intermediate clients interpolate.
    pub rho: f64,
    pub hidden: usize,
    pub alpha: f64,
    pub lr: f64,
    pub local_epochs: usize,
    pub total_epochs: usize,
    pub batch_size: BatchSize,
    pub loss: LossKind,
    pub model_kind: ModelKind,
    pub fedprox_mu: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            // seed chosen so neither client draws samples on the wrong side
            // of the class boundary; training then separates both perfectly
            seed: 3,
            n_clients: 2,
            d: 10,
            samples_per_client: 200,
            test_samples_per_client: 200,
            rho: 0.08,
            hidden: 100,
            alpha: 10.0,
            lr: 1e-5,
            local_epochs: 1,
            total_epochs: 600,
            batch_size: BatchSize::Full,
            loss: LossKind::CrossEntropy,
            model_kind: ModelKind::Mlp,
            fedprox_mu: 1e-2,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        if self.n_clients == 0 {
            return Err(CliError::Config("n_clients must be positive".into()));
        }
        if self.d < 2 {
            return Err(CliError::Config("d must be at least 2".into()));
        }
        if self.samples_per_client < 2 || self.samples_per_client % 2 != 0 {
            return Err(CliError::Config(
                "samples_per_client must be even and at least 2".into(),
            ));
        }
        if self.rho.abs() >= 1.0 / (self.d as f64 - 1.0) {
            return Err(CliError::Config(format!(
                "rho {} breaks positive definiteness for d = {}",
                self.rho, self.d
            )));
        }
        if self.model_kind == ModelKind::Theory && self.loss == LossKind::CrossEntropy {
            return Err(CliError::Config(
                "the theory model trains on the squared loss only".into(),
            ));
        }
        Ok(())
    }

    fn client_cov(&self, client: usize) -> Result<DenseMatrix, Error> {
        if client == 0 || self.rho == 0.0 {
            return Ok(DenseMatrix::identity(self.d));
        }
        let scale = client as f64 / (self.n_clients.max(2) - 1) as f64;
        make_offdiag_cov(self.d, self.rho * scale)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClientSummary {
    pub client: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_loss: f64,
    pub test_acc: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StrategySummary {
    pub strategy: String,
    pub final_train_loss: f64,
    pub final_train_acc: f64,
    pub final_test_loss: f64,
    pub final_test_acc: f64,
    pub per_client: Vec<ClientSummary>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSummary {
    pub seed: u64,
    pub total_epochs: usize,
    pub strategies: Vec<StrategySummary>,
}

/// Builds the seeded clients and test sets shared by every strategy. All
/// clients start from identical parameters.
pub fn build_synthetic_clients(
    cfg: &SyntheticConfig,
) -> Result<(Vec<ClientState>, Vec<ClientDataset>), Error> {
    let mut init_rng = Rng::for_stream(cfg.seed, 1000);
    enum Template {
        Mlp(crate::model::MlpParams),
        Theory(crate::model::TheoryParams),
    }
    let template = match cfg.model_kind {
        ModelKind::Mlp => Template::Mlp(new_classifier(cfg.d, cfg.hidden, 2, cfg.alpha, &mut init_rng)),
        ModelKind::Theory => {
            Template::Theory(init_theory(cfg.hidden, cfg.d, cfg.n_clients, cfg.alpha, &mut init_rng))
        }
    };
    let mut clients = Vec::with_capacity(cfg.n_clients);
    let mut tests = Vec::with_capacity(cfg.n_clients);
    for i in 0..cfg.n_clients {
        let cov = cfg.client_cov(i)?;
        let mut data_rng = Rng::for_stream(cfg.seed, 2000 + i as u64);
        let dataset = make_gaussian_pair_client(i, &cov, cfg.samples_per_client, &mut data_rng)?;
        let mut test_rng = Rng::for_stream(cfg.seed, 3000 + i as u64);
        let test =
            make_gaussian_pair_client(i, &cov, cfg.test_samples_per_client, &mut test_rng)?;
        let params = match &template {
            Template::Mlp(p) => ModelParams::Mlp(p.clone()),
            Template::Theory(global) => ModelParams::Theory(global.client_view(i)),
        };
        clients.push(ClientState {
            client_id: i,
            params,
            dataset,
            rng: Rng::for_client(cfg.seed, i),
        });
        tests.push(test);
    }
    Ok((clients, tests))
}

/// Runs one strategy over fresh copies of the seeded clients.
pub fn run_synthetic_strategy(
    cfg: &SyntheticConfig,
    clients: &[ClientState],
    tests: &[ClientDataset],
    strategy: Strategy,
) -> Result<(crate::federation::FederationTrace, StrategySummary), Error> {
    let fed_cfg = FederationConfig {
        n_clients: cfg.n_clients,
        local_epochs: cfg.local_epochs,
        total_epochs: cfg.total_epochs,
        lr: cfg.lr,
        batch_size: cfg.batch_size,
        strategy,
        seed: cfg.seed,
        loss: cfg.loss,
        model_kind: cfg.model_kind,
    };
    let mut run_clients = clients.to_vec();
    let trace = run_federation(&fed_cfg, &mut run_clients, tests)?;
    let finals = trace.final_records();
    let n = finals.len().max(1) as f64;
    let summary = StrategySummary {
        strategy: strategy.label().to_string(),
        final_train_loss: finals.iter().map(|r| r.train_loss).sum::<f64>() / n,
        final_train_acc: finals.iter().map(|r| r.train_acc).sum::<f64>() / n,
        final_test_loss: finals.iter().map(|r| r.test_loss).sum::<f64>() / n,
        final_test_acc: finals.iter().map(|r| r.test_acc).sum::<f64>() / n,
        per_client: finals
            .iter()
            .map(|r| ClientSummary {
                client: r.client,
                train_loss: r.train_loss,
                train_acc: r.train_acc,
                test_loss: r.test_loss,
                test_acc: r.test_acc,
            })
            .collect(),
    };
    Ok((trace, summary))
}

pub fn cmd_synthetic(
    cfg: &SyntheticConfig,
    out: &Path,
    strategy_filter: Option<&str>,
) -> Result<SyntheticSummary, CliError> {
    cfg.validate()?;
    ensure_out_dir(out)?;
    let (clients, tests) = build_synthetic_clients(cfg).map_err(CliError::from)?;
    let all = [
        Strategy::FedAvg,
        Strategy::FedProx { mu: cfg.fedprox_mu },
        Strategy::FedBn,
        Strategy::SingleSet,
    ];
    let selected: Vec<Strategy> = match strategy_filter {
        None => all.to_vec(),
        Some(name) => {
            let matched: Vec<Strategy> = all
                .iter()
                .copied()
                .filter(|s| s.label() == name.to_lowercase())
                .collect();
            if matched.is_empty() {
                return Err(CliError::Config(format!(
                    "unknown strategy filter '{name}' (expected fedavg|fedprox|fedbn|singleset)"
                )));
            }
            matched
        }
    };
    let mut summaries = Vec::new();
    for strategy in selected {
        let (trace, summary) =
            run_synthetic_strategy(cfg, &clients, &tests, strategy).map_err(CliError::from)?;
        trace
            .write_csv(&out.join(format!("trace_{}.csv", strategy.label())))
            .map_err(CliError::from)?;
        summaries.push(summary);
    }
    let summary = SyntheticSummary {
        seed: cfg.seed,
        total_epochs: cfg.total_epochs,
        strategies: summaries,
    };
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

fn cmd_synthetic_files(
    config: Option<&Path>,
    out: &Path,
    seed: Option<u64>,
    strategy: Option<&str>,
) -> Result<SyntheticSummary, CliError> {
    let mut cfg: SyntheticConfig = load_config(config)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    cmd_synthetic(&cfg, out, strategy)
}

// ---------------------------------------------------------------------------
// toy

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GridSpec {
    pub min: f64,
    pub max: f64,
    pub count: usize,
}

impl GridSpec {
    pub fn values(&self) -> Vec<f64> {
        if self.count <= 1 {
            return vec![self.min];
        }
        let step = (self.max - self.min) / (self.count - 1) as f64;
        (0..self.count).map(|i| self.min + step * i as f64).collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyConfig {
    pub seed: u64,
    pub w_true: f64,
    pub n: usize,
    pub noise_std: f64,
    pub x_stds: Vec<f64>,
    pub w_grid: GridSpec,
    pub gamma_grid: GridSpec,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            w_true: 2.0,
            n: 1000,
            noise_std: 0.05,
            x_stds: vec![1.0, 3.0],
            w_grid: GridSpec {
                min: 0.001,
                max: 12.0,
                count: 241,
            },
            gamma_grid: GridSpec {
                min: 0.001,
                max: 4.0,
                count: 81,
            },
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToyClientReport {
    pub client: usize,
    pub x_std: f64,
    pub local_std: f64,
    /// Gamma grid point closest to the local standard deviation (the
    /// normalization constant a local model would use).
    pub gamma_star: f64,
    /// Best w on the grid given gamma_star.
    pub w_star: f64,
    pub min_loss: f64,
    /// Loss at the averaged weight with this client's own normalization.
    pub loss_avg_w_local_gamma: f64,
    /// Loss at the averaged weight with the averaged normalization.
    pub loss_avg_w_avg_gamma: f64,
    /// loss(w_bar, gamma_star) < loss(w_bar, gamma_bar).
    pub local_gamma_wins: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToyComparison {
    pub seed: u64,
    pub w_true: f64,
    pub w_bar: f64,
    pub gamma_bar: f64,
    /// Single-client runs have nothing to average; comparisons are then
    /// self-referential.
    pub degenerate: bool,
    pub clients: Vec<ToyClientReport>,
    pub w_grid: Vec<f64>,
    pub gamma_grid: Vec<f64>,
}

pub fn cmd_toy(cfg: &ToyConfig, out: &Path) -> Result<ToyComparison, CliError> {
    if cfg.x_stds.is_empty() {
        return Err(CliError::Config("x_stds must not be empty".into()));
    }
    if cfg.w_grid.count == 0 || cfg.gamma_grid.count == 0 {
        return Err(CliError::Config("grids must be nonempty".into()));
    }
    if cfg.gamma_grid.min <= 0.0 {
        return Err(CliError::Config("gamma grid must be positive".into()));
    }
    ensure_out_dir(out)?;
    let w_grid = cfg.w_grid.values();
    let gamma_grid = cfg.gamma_grid.values();

    let mut datasets = Vec::new();
    for (i, &x_std) in cfg.x_stds.iter().enumerate() {
        let data = make_cos_dataset(
            cfg.w_true,
            x_std,
            cfg.noise_std,
            cfg.n,
            &mut Rng::for_client(cfg.seed, i),
        )
        .map_err(CliError::from)?;
        datasets.push(data);
    }

    let mut stars = Vec::new();
    for (i, data) in datasets.iter().enumerate() {
        let surface = toy_mse_surface(data, &w_grid, &gamma_grid).map_err(CliError::from)?;
        surface
            .write_csv(&out.join(format!("surface_client{i}.csv")))
            .map_err(CliError::from)?;
        // gamma pinned to the local normalization constant, then best w
        let (mut best_b, mut best_gap) = (0usize, f64::INFINITY);
        for (b, &g) in gamma_grid.iter().enumerate() {
            let gap = (g - data.local_std).abs();
            if gap < best_gap {
                best_gap = gap;
                best_b = b;
            }
        }
        let (mut best_a, mut best_loss) = (0usize, f64::INFINITY);
        for a in 0..w_grid.len() {
            let value = surface.get(a, best_b);
            if value < best_loss {
                best_loss = value;
                best_a = a;
            }
        }
        stars.push((w_grid[best_a], gamma_grid[best_b], best_loss));
    }

    let inv_n = 1.0 / stars.len() as f64;
    let w_bar = stars.iter().map(|s| s.0).sum::<f64>() * inv_n;
    let gamma_bar = stars.iter().map(|s| s.1).sum::<f64>() * inv_n;

    let mut clients = Vec::new();
    for (i, data) in datasets.iter().enumerate() {
        let (w_star, gamma_star, min_loss) = stars[i];
        let local = ToyModel::new(w_bar, gamma_star).map_err(CliError::from)?;
        let averaged = ToyModel::new(w_bar, gamma_bar).map_err(CliError::from)?;
        let loss_local = local.mse(data);
        let loss_avg = averaged.mse(data);
        clients.push(ToyClientReport {
            client: i,
            x_std: cfg.x_stds[i],
            local_std: data.local_std,
            gamma_star,
            w_star,
            min_loss,
            loss_avg_w_local_gamma: loss_local,
            loss_avg_w_avg_gamma: loss_avg,
            local_gamma_wins: loss_local < loss_avg,
        });
    }

    let comparison = ToyComparison {
        seed: cfg.seed,
        w_true: cfg.w_true,
        w_bar,
        gamma_bar,
        degenerate: cfg.x_stds.len() < 2,
        clients,
        w_grid,
        gamma_grid,
    };
    write_json(&out.join("comparison.json"), &comparison)?;
    Ok(comparison)
}

fn cmd_toy_files(
    config: Option<&Path>,
    out: &Path,
    seed: Option<u64>,
) -> Result<ToyComparison, CliError> {
    let mut cfg: ToyConfig = load_config(config)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    cmd_toy(&cfg, out)
}

// ---------------------------------------------------------------------------
// ntk

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NtkConfig {
    pub seed: u64,
    pub n_clients: usize,
    pub samples_per_client: usize,
    pub d: usize,
    /// Hidden width of the analytic network.
    pub width: usize,
    pub alpha: f64,
    /// Monte-Carlo draws for the auxiliary kernels.
    pub k_draws: usize,
    /// Step size for the one-step linearization check.
    pub eta: f64,
    /// Steps of full-batch descent for the decay-bound check.
    pub gd_steps: usize,
    /// Multiplicative slack on the decay bound.
    pub decay_tol: f64,
    /// Covariance shift of the most-shifted client.
    pub rho: f64,
}

impl Default for NtkConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_clients: 2,
            samples_per_client: 5,
            d: 10,
            width: 4096,
            alpha: 2.0,
            k_draws: 200_000,
            eta: 1e-4,
            gd_steps: 200,
            decay_tol: 0.05,
            rho: 0.08,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModeReport {
    pub one_step: crate::ntk::OneStepReport,
    pub one_step_tenth_eta: crate::ntk::OneStepReport,
    pub decay: crate::ntk::DecayFit,
    pub lambda_min: f64,
    pub lambda_max: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NtkVerdict {
    pub seed: u64,
    pub k_draws: usize,
    /// Spectral comparison of the Monte-Carlo auxiliary kernels.
    pub spectral: crate::ntk::SpectralComparison,
    pub shared: ModeReport,
    pub per_client: ModeReport,
    /// Rows whose kernel diagonal is numerically zero.
    pub degenerate_rows: Vec<usize>,
    pub gd_eta: f64,
}

pub fn cmd_ntk(cfg: &NtkConfig, out: &Path) -> Result<NtkVerdict, CliError> {
    if cfg.n_clients == 0 || cfg.samples_per_client == 0 {
        return Err(CliError::Config("need at least one client and one sample".into()));
    }
    ensure_out_dir(out)?;

    // centered feature-shift clients; the generating covariance is the
    // normalization weight
    let mut datasets = Vec::new();
    for i in 0..cfg.n_clients {
        let cov = if i == 0 || cfg.rho == 0.0 {
            DenseMatrix::identity(cfg.d)
        } else {
            let scale = i as f64 / (cfg.n_clients.max(2) - 1) as f64;
            make_offdiag_cov(cfg.d, cfg.rho * scale).map_err(CliError::from)?
        };
        let even = cfg.samples_per_client + cfg.samples_per_client % 2;
        let mut rng = Rng::for_stream(cfg.seed, 2000 + i as u64);
        let mut ds = make_gaussian_pair_client(i, &cov, even, &mut rng).map_err(CliError::from)?;
        if even != cfg.samples_per_client {
            // drop the last row to honor an odd request
            let rows: Vec<Vec<f64>> = (0..cfg.samples_per_client)
                .map(|r| ds.features.row(r).to_vec())
                .collect();
            ds.features = DenseMatrix::from_rows(&rows).map_err(CliError::from)?;
            ds.labels.truncate(cfg.samples_per_client);
        }
        datasets.push(ds.centered());
    }
    let s_list: Vec<DenseMatrix> = datasets.iter().map(|d| d.cov.clone()).collect();
    let samples = pool_samples(&datasets);

    let params = init_theory(
        cfg.width,
        cfg.d,
        cfg.n_clients,
        cfg.alpha,
        &mut Rng::for_stream(cfg.seed, 1000),
    );

    // auxiliary kernels under shared draws
    let aux_full = gram_aux_mc(
        &samples,
        cfg.alpha,
        cfg.k_draws,
        &mut Rng::for_stream(cfg.seed, 4000),
        GramVariant::GAvg,
    )
    .map_err(CliError::from)?;
    let aux_blocked = gram_aux_mc(
        &samples,
        cfg.alpha,
        cfg.k_draws,
        &mut Rng::for_stream(cfg.seed, 4000),
        GramVariant::GBn,
    )
    .map_err(CliError::from)?;
    aux_full
        .entries
        .write_csv(&out.join("g_aux_full.csv"))
        .map_err(CliError::from)?;
    aux_blocked
        .entries
        .write_csv(&out.join("g_aux_blocked.csv"))
        .map_err(CliError::from)?;
    let spectral = min_eig_compare(&aux_full, &aux_blocked).map_err(CliError::from)?;

    // finite kernels at initialization
    let mut finite = std::collections::BTreeMap::new();
    for (name, variant) in [
        ("g_finite_full", GramVariant::GAvg),
        ("g_finite_blocked", GramVariant::GBn),
        ("v_finite_full", GramVariant::VAvg),
        ("v_finite_blocked", GramVariant::VBn),
    ] {
        let gram = gram_finite(&params, &samples, &s_list, variant).map_err(CliError::from)?;
        gram.entries
            .write_csv(&out.join(format!("{name}.csv")))
            .map_err(CliError::from)?;
        finite.insert(name, gram);
    }
    let degenerate_rows = finite["g_finite_full"].degenerate_diagonal();

    let lambda_shared = lambda_matrix(
        &finite["v_finite_full"],
        &finite["g_finite_full"],
        params.alpha,
    )
    .map_err(CliError::from)?;
    let lambda_local = lambda_matrix(
        &finite["v_finite_blocked"],
        &finite["g_finite_blocked"],
        params.alpha,
    )
    .map_err(CliError::from)?;
    let shared_max = sym_eig_max(&lambda_shared).map_err(CliError::from)?;
    let gd_eta = 0.5 / shared_max;

    let mut reports = Vec::new();
    for (mode, lambda) in [
        (crate::model::GammaMode::Shared, &lambda_shared),
        (crate::model::GammaMode::PerClient, &lambda_local),
    ] {
        let one_step =
            one_step_ntk_check(&params, &samples, &s_list, cfg.eta, mode).map_err(CliError::from)?;
        let one_step_tenth =
            one_step_ntk_check(&params, &samples, &s_list, cfg.eta / 10.0, mode)
                .map_err(CliError::from)?;
        let lambda_min = sym_eig_min(lambda).map_err(CliError::from)?;
        let lambda_max = sym_eig_max(lambda).map_err(CliError::from)?;
        let trace = gd_residual_trace(&params, &samples, &s_list, gd_eta, cfg.gd_steps, mode)
            .map_err(CliError::from)?;
        let decay = linear_decay_fit(&trace, gd_eta, lambda_min, cfg.decay_tol);
        reports.push(ModeReport {
            one_step,
            one_step_tenth_eta: one_step_tenth,
            decay,
            lambda_min,
            lambda_max,
        });
    }
    let per_client_report = reports.pop().expect("two mode reports");
    let shared_report = reports.pop().expect("two mode reports");

    let verdict = NtkVerdict {
        seed: cfg.seed,
        k_draws: cfg.k_draws,
        spectral,
        shared: shared_report,
        per_client: per_client_report,
        degenerate_rows,
        gd_eta,
    };
    write_json(&out.join("verdict.json"), &verdict)?;
    if !verdict.spectral.ordering_holds {
        return Err(CliError::Verification(format!(
            "spectral ordering failed: mu0 = {:.6e}, mu0* = {:.6e}",
            verdict.spectral.mu0, verdict.spectral.mu0_star
        )));
    }
    Ok(verdict)
}

fn cmd_ntk_files(
    config: Option<&Path>,
    out: &Path,
    seed: Option<u64>,
) -> Result<NtkVerdict, CliError> {
    let mut cfg: NtkConfig = load_config(config)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    cmd_ntk(&cfg, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_configs_validate() {
        SyntheticConfig::default().validate().unwrap();
        let toy = ToyConfig::default();
        assert_eq!(toy.w_grid.values().len(), 241);
        assert!((toy.w_grid.values()[0] - 0.001).abs() < 1e-12);
        assert!((toy.w_grid.values()[240] - 12.0).abs() < 1e-12);
    }

    #[test]
    fn unknown_config_fields_are_rejected() {
        let err = serde_json::from_str::<SyntheticConfig>(r#"{ "seed": 1, "bogus": 2 }"#);
        assert!(err.is_err());
        let err = serde_json::from_str::<NtkConfig>(r#"{ "widht": 10 }"#);
        assert!(err.is_err());
    }

    #[test]
    fn partial_configs_fill_defaults() {
        let cfg: SyntheticConfig = serde_json::from_str(r#"{ "seed": 7, "total_epochs": 10 }"#).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.total_epochs, 10);
        assert_eq!(cfg.hidden, 100);
    }

    #[test]
    fn strategy_filter_rejects_unknown_names() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = SyntheticConfig::default();
        cfg.total_epochs = 2;
        cfg.samples_per_client = 8;
        cfg.test_samples_per_client = 8;
        cfg.hidden = 4;
        let err = cmd_synthetic(&cfg, dir.path(), Some("nonsense")).unwrap_err();
        assert_eq!(err.exit_code(), EXIT_CONFIG);
    }

    #[test]
    fn batch_size_accepts_full_or_integer() {
        let cfg: SyntheticConfig = serde_json::from_str(r#"{ "batch_size": "full" }"#).unwrap();
        assert_eq!(cfg.batch_size, BatchSize::Full);
        let cfg: SyntheticConfig = serde_json::from_str(r#"{ "batch_size": 32 }"#).unwrap();
        assert_eq!(cfg.batch_size, BatchSize::Count(32));
    }
}
