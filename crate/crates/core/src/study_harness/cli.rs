//! Command-line front end.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::bootstrap::bootstrap_se;
use super::csv_input::{read_csv, CsvData};
use super::dgp::{DgpConfig, ErrorFamily};
use super::monte_carlo::run_monte_carlo;
use super::report::{
    bootstrap_text, fit_text, lasso_text, monte_carlo_text, tpr_text, BootstrapReport, FitReport, LassoReport,
};
use super::scaling::standardize;
use super::tpr::{run_tpr_study, TprSettings};
use crate::em_fitter::{fit_em, FitOptions, FitResult};
use crate::error::{Error, Result};
use crate::mal_dist::build_spec;
use crate::penalized_fitter::{cross_validate_with, fit_pem, lambda_grid, CvScore};

pub const EXIT_OK: i32 = 0;
pub const EXIT_NUMERICAL: i32 = 1;
pub const EXIT_INPUT: i32 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Format {
    #[default]
    Json,
    Text,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Errors {
    Normal,
    T,
}

impl From<Errors> for ErrorFamily {
    fn from(e: Errors) -> Self {
        match e {
            Errors::Normal => ErrorFamily::MalImpliedNormal,
            Errors::T => ErrorFamily::StudentT,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Score {
    CheckLoss,
    NegLogLik,
}

impl From<Score> for CvScore {
    fn from(s: Score) -> Self {
        match s {
            Score::CheckLoss => CvScore::CheckLoss,
            Score::NegLogLik => CvScore::NegLogLik,
        }
    }
}

/// Joint quantile regression under the constrained multivariate asymmetric
/// Laplace likelihood.
#[derive(Debug, Parser)]
#[command(name = "jointqr", version)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
struct GlobalArgs {
    /// Master seed for simulation, resampling and fold assignment [default: 0].
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    /// Worker threads [default: all cores].
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    threads: Option<usize>,
    /// Write the report here instead of standard output.
    #[arg(long, global = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    out: Option<PathBuf>,
    /// Report format [default: json].
    #[arg(long, global = true, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    format: Option<Format>,
    /// JSON file with defaults for any flag, keyed by flag name.
    #[arg(long, global = true)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit the joint model by EM.
    Fit(DataArgs),
    /// Fit the LASSO-penalized model on standardized covariates, choosing the
    /// penalty by cross-validation; coefficients are reported on the original
    /// scale.
    Lasso {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        cv: CvArgs,
        /// Fit at this penalty instead of cross-validating.
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Bootstrap standard errors of the joint fit.
    Bootstrap {
        #[command(flatten)]
        data: DataArgs,
        /// Number of resamples [default: 500].
        #[arg(long)]
        resamples: Option<usize>,
    },
    /// Monte-Carlo bias and RMSE of the joint and univariate fits.
    Simulate {
        #[command(flatten)]
        dgp: DgpArgs,
        #[command(flatten)]
        fit: FitArgs,
    },
    /// True-positive rate of the cross-validated LASSO on a sparse design.
    TprStudy {
        #[command(flatten)]
        dgp: DgpArgs,
        #[command(flatten)]
        cv: CvArgs,
        #[command(flatten)]
        fit: FitArgs,
    },
}

#[derive(Debug, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
struct FitArgs {
    /// EM iteration cap [default: 500].
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    max_iter: Option<usize>,
    /// Log-likelihood change below which EM stops [default: 1e-6].
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    tol: Option<f64>,
}

#[derive(Debug, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
struct DataArgs {
    /// CSV file with a header row.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    data: Option<PathBuf>,
    /// The first q columns are responses, the rest covariates.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    responses: Option<usize>,
    /// Comma-separated quantile level of each response.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    tau: Option<Vec<f64>>,
    /// Do not add an intercept column.
    #[arg(long)]
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    no_intercept: bool,
    #[command(flatten)]
    #[serde(flatten)]
    fit: FitArgs,
}

#[derive(Debug, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
struct CvArgs {
    /// Cross-validation folds [default: 10].
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    folds: Option<usize>,
    /// Number of penalty values [default: 100].
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    grid_size: Option<usize>,
    /// Smallest penalty as a fraction of the largest [default: 1e-3].
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    ratio: Option<f64>,
    /// Held-out score [default: check-loss].
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    score: Option<Score>,
}

#[derive(Debug, Args, Serialize)]
#[serde(rename_all = "kebab-case")]
struct DgpArgs {
    /// Named configuration, such as table1-panelA or table3-panelC-t.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    preset: Option<String>,
    /// JSON file holding a full data-generating configuration.
    #[arg(long, conflicts_with = "preset")]
    #[serde(skip_serializing_if = "Option::is_none")]
    dgp: Option<PathBuf>,
    /// Replications [default: 100 for simulate, 50 for tpr-study].
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    reps: Option<usize>,
    /// Override the error family.
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    errors: Option<Errors>,
    /// Override the sample size.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    n: Option<usize>,
    /// Override the t degrees of freedom.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    t_dof: Option<f64>,
}

/// Every flag after merging the config file with the command line.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(rename_all = "kebab-case", default, deny_unknown_fields)]
struct Settings {
    seed: u64,
    threads: Option<usize>,
    out: Option<PathBuf>,
    format: Format,
    data: Option<PathBuf>,
    responses: Option<usize>,
    tau: Option<Vec<f64>>,
    no_intercept: bool,
    max_iter: Option<usize>,
    tol: Option<f64>,
    folds: Option<usize>,
    grid_size: Option<usize>,
    ratio: Option<f64>,
    score: Option<Score>,
    lambda: Option<f64>,
    resamples: Option<usize>,
    preset: Option<String>,
    dgp: Option<PathBuf>,
    reps: Option<usize>,
    errors: Option<Errors>,
    n: Option<usize>,
    t_dof: Option<f64>,
}

impl Settings {
    fn fit_options(&self) -> Result<FitOptions> {
        let mut o = FitOptions::default();
        if let Some(m) = self.max_iter {
            o.max_iter = m;
        }
        if let Some(t) = self.tol {
            o.tol = t;
        }
        o.validate().map_err(|e| Error::Input(e.to_string()))?;
        Ok(o)
    }

    fn tpr_settings(&self) -> TprSettings {
        let d = TprSettings::default();
        TprSettings {
            folds: self.folds.unwrap_or(d.folds),
            grid_size: self.grid_size.unwrap_or(d.grid_size),
            ratio: self.ratio.unwrap_or(d.ratio),
            score: self.score.map_or(d.score, CvScore::from),
        }
    }

    fn csv(&self) -> Result<CsvData> {
        let path = self.data.as_ref().ok_or_else(|| Error::Input("--data is required".into()))?;
        let q = self.responses.ok_or_else(|| Error::Input("--responses is required".into()))?;
        read_csv(path, q, !self.no_intercept)
    }

    fn tau_for(&self, csv: &CsvData) -> Result<Vec<f64>> {
        let tau = self.tau.clone().ok_or_else(|| Error::Input("--tau is required".into()))?;
        if tau.len() != csv.response_names.len() {
            return Err(Error::Input(format!(
                "--tau has {} levels for {} responses",
                tau.len(),
                csv.response_names.len()
            )));
        }
        Ok(tau)
    }

    fn dgp_config(&self, default_preset: &str) -> Result<DgpConfig> {
        let mut config = match &self.dgp {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| Error::Input(format!("cannot read {}: {e}", path.display())))?;
                serde_json::from_str(&text).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?
            }
            None => DgpConfig::preset(self.preset.as_deref().unwrap_or(default_preset))?,
        };
        config.seed = self.seed;
        if let Some(e) = self.errors {
            config.error_family = e.into();
        }
        if let Some(n) = self.n {
            config.n = n;
        }
        if let Some(d) = self.t_dof {
            config.t_dof = d;
        }
        config.validate().map_err(|e| Error::Input(e.to_string()))?;
        Ok(config)
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                b.insert(k, v);
            }
        }
        (b, o) => *b = o,
    }
}

fn settings_from(cli: &Cli) -> Result<Settings> {
    let mut merged = match &cli.global.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Input(format!("cannot read {}: {e}", path.display())))?;
            serde_json::from_str(&text).map_err(|e| Error::Input(format!("{}: {e}", path.display())))?
        }
        None => Value::Object(Default::default()),
    };
    if !merged.is_object() {
        return Err(Error::Input("config file must hold a JSON object".into()));
    }
    merge(&mut merged, to_value(&cli.global));
    match &cli.command {
        Command::Fit(d) => merge(&mut merged, to_value(d)),
        Command::Lasso { data, cv, lambda } => {
            merge(&mut merged, to_value(data));
            merge(&mut merged, to_value(cv));
            if let Some(l) = lambda {
                merge(&mut merged, serde_json::json!({ "lambda": l }));
            }
        }
        Command::Bootstrap { data, resamples } => {
            merge(&mut merged, to_value(data));
            if let Some(b) = resamples {
                merge(&mut merged, serde_json::json!({ "resamples": b }));
            }
        }
        Command::Simulate { dgp, fit } => {
            merge(&mut merged, to_value(dgp));
            merge(&mut merged, to_value(fit));
        }
        Command::TprStudy { dgp, cv, fit } => {
            merge(&mut merged, to_value(dgp));
            merge(&mut merged, to_value(cv));
            merge(&mut merged, to_value(fit));
        }
    }
    serde_json::from_value(merged).map_err(|e| Error::Input(format!("config: {e}")))
}

fn to_value<T: Serialize>(flags: &T) -> Value {
    serde_json::to_value(flags).expect("flag structs serialize")
}

fn render<T: Serialize>(report: &T, text: impl FnOnce(&T) -> String, format: Format) -> String {
    match format {
        Format::Json => serde_json::to_string_pretty(report).expect("reports serialize") + "\n",
        Format::Text => text(report),
    }
}

fn warn_unconverged(fit: &FitResult) {
    if !fit.converged {
        eprintln!("warning: EM stopped after {} iterations without converging", fit.iterations);
    }
}

fn run(cli: &Cli, s: &Settings) -> Result<String> {
    let opts = s.fit_options()?;
    Ok(match &cli.command {
        Command::Fit(_) => {
            let csv = s.csv()?;
            let tau = s.tau_for(&csv)?;
            let spec = build_spec(&tau).map_err(|e| Error::Input(e.to_string()))?;
            let fit = fit_em(&csv.dataset, &spec, &opts)?;
            warn_unconverged(&fit);
            let report = FitReport::new(&fit, &tau, csv.response_names, csv.design_names);
            render(&report, fit_text, s.format)
        }
        Command::Lasso { .. } => {
            let csv = s.csv()?;
            let tau = s.tau_for(&csv)?;
            let spec = build_spec(&tau).map_err(|e| Error::Input(e.to_string()))?;
            let t = s.tpr_settings();
            let (data, scaling) = standardize(&csv.dataset)?;
            let original_scale = |mut fit: FitResult| {
                fit.params.beta = scaling.back_transform(&fit.params.beta);
                fit
            };
            let report = match s.lambda {
                Some(lambda) => {
                    if !(lambda >= 0.0) {
                        return Err(Error::Input(format!("--lambda must be non-negative, got {lambda}")));
                    }
                    let fit = original_scale(fit_pem(&data, &spec, lambda, &opts)?);
                    warn_unconverged(&fit);
                    let fit = FitReport::new(&fit, &tau, csv.response_names, csv.design_names);
                    LassoReport {
                        fit,
                        folds: 0,
                        score: t.score,
                        lambdas: vec![lambda],
                        mean_scores: vec![],
                        chosen_index: 0,
                        chosen_lambda: lambda,
                    }
                }
                None => {
                    let grid = lambda_grid(&data, &spec, t.grid_size, t.ratio, &opts)?;
                    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
                    let cv = cross_validate_with(&data, &spec, t.folds, &grid, &opts, &mut rng, t.score)?;
                    let final_fit = original_scale(cv.final_fit.clone());
                    warn_unconverged(&final_fit);
                    let fit = FitReport::new(&final_fit, &tau, csv.response_names, csv.design_names);
                    LassoReport::new(fit, &cv, t.score)
                }
            };
            render(&report, lasso_text, s.format)
        }
        Command::Bootstrap { .. } => {
            let csv = s.csv()?;
            let tau = s.tau_for(&csv)?;
            let spec = build_spec(&tau).map_err(|e| Error::Input(e.to_string()))?;
            let fit = fit_em(&csv.dataset, &spec, &opts)?;
            warn_unconverged(&fit);
            let boot = bootstrap_se(&csv.dataset, &spec, s.resamples.unwrap_or(500), &opts, s.seed)?;
            let report = BootstrapReport {
                fit: FitReport::new(&fit, &tau, csv.response_names, csv.design_names),
                bootstrap: boot,
            };
            render(&report, bootstrap_text, s.format)
        }
        Command::Simulate { .. } => {
            let config = s.dgp_config("table1-panelA")?;
            let spec = config.spec()?;
            let mc = run_monte_carlo(&config, s.reps.unwrap_or(100), &spec, &opts)?;
            render(&mc, monte_carlo_text, s.format)
        }
        Command::TprStudy { .. } => {
            let config = s.dgp_config("table3-panelA")?;
            let summary = run_tpr_study(&config, s.reps.unwrap_or(50), &s.tpr_settings(), &opts)?;
            render(&summary, tpr_text, s.format)
        }
    })
}

fn write_output(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => std::fs::write(path, text).map_err(Error::from),
        None => {
            use std::io::Write;
            std::io::stdout().write_all(text.as_bytes()).map_err(Error::from)
        }
    }
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code: 0 on success, 1 on numerical failure, 2 on bad input.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
        }
    };
    let outcome = settings_from(&cli).and_then(|s| {
        if let Some(t) = s.threads {
            if t == 0 {
                return Err(Error::Input("--threads must be positive".into()));
            }
            let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
        }
        let text = run(&cli, &s)?;
        write_output(s.out.as_deref(), &text)
    });
    match outcome {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_input() {
                EXIT_INPUT
            } else {
                EXIT_NUMERICAL
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Settings {
        let cli = Cli::try_parse_from(std::iter::once("jointqr").chain(args.iter().copied())).unwrap();
        settings_from(&cli).unwrap()
    }

    #[test]
    fn flags_reach_settings() {
        let s = parse(&["fit", "--data", "d.csv", "--responses", "2", "--tau", "0.75,0.25", "--seed", "3"]);
        assert_eq!(s.tau, Some(vec![0.75, 0.25]));
        assert_eq!(s.responses, Some(2));
        assert_eq!(s.seed, 3);
        assert_eq!(s.format, Format::Json);
        assert!(!s.no_intercept);
    }

    #[test]
    fn command_line_overrides_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"seed": 9, "folds": 4, "format": "text", "tau": [0.1, 0.9]}"#).unwrap();
        let p = path.to_str().unwrap();
        let s = parse(&["lasso", "--config", p, "--folds", "5", "--responses", "2"]);
        assert_eq!(s.seed, 9);
        assert_eq!(s.folds, Some(5));
        assert_eq!(s.format, Format::Text);
        assert_eq!(s.tau, Some(vec![0.1, 0.9]));
    }

    #[test]
    fn unknown_config_key_is_an_input_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"sede": 9}"#).unwrap();
        let code = cli_main(["jointqr", "fit", "--config", path.to_str().unwrap()]);
        assert_eq!(code, EXIT_INPUT);
    }

    #[test]
    fn bad_flags_exit_with_input_code() {
        assert_eq!(cli_main(["jointqr", "fit", "--bogus"]), EXIT_INPUT);
        assert_eq!(cli_main(["jointqr", "fit", "--responses", "1"]), EXIT_INPUT);
    }
}
