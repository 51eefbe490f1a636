//! Command-line front end: simulation, rank queries, t-separation tests,
//! statistical rank estimation, PAG discovery, ground truth, and the
//! synthetic experiment harness.

use std::fs;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use serde_json::json;

use rankcut::error::{Error, Result};
use rankcut::eval::{run_experiment, write_report, ExperimentConfig};
use rankcut::fci::{
    dsep_ci_oracle, fci, FciOptions, MeasurementClustering, RankCiOracle, RankSource,
};
use rankcut::graph::{augment, graph_from_json, Dag, NodeRole};
use rankcut::model::{model_from_json, LinearSem, SelectionConfig};
use rankcut::pag::pag_to_json;
use rankcut::rank::{estimate_rank, RankMethod, RankTestSpec};
use rankcut::sample::{sample, DataMatrix, SampleOptions};
use rankcut::trek::{graphical_rank, min_tsep, t_separates};

#[derive(Parser)]
#[command(
    name = "rankcut",
    version,
    about = "Rank constraints for linear-Gaussian causal models under selection bias"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw post-selection samples from a model and write them as CSV.
    Simulate {
        #[arg(long)]
        model: PathBuf,
        /// Number of accepted samples.
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Minimum tolerated acceptance rate.
        #[arg(long, default_value_t = 1e-4)]
        acceptance_floor: f64,
    },
    /// Graphical rank of a covariance submatrix under the model's selection
    /// configuration, with a witnessing t-separation cut.
    Grank {
        #[arg(long)]
        model: PathBuf,
        /// Comma-separated variable names of the row set.
        #[arg(long, value_delimiter = ',')]
        a: Vec<String>,
        /// Comma-separated variable names of the column set.
        #[arg(long, value_delimiter = ',')]
        b: Vec<String>,
    },
    /// Test t-separation of (A, B) by a given pair (C, D), or compute the
    /// minimum t-separation when no pair is given.
    Tsep {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long, value_delimiter = ',')]
        a: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        b: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        c: Option<Vec<String>>,
        #[arg(long, value_delimiter = ',')]
        d: Option<Vec<String>>,
    },
    /// Estimate the rank of a covariance submatrix from CSV data.
    Ranks {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',')]
        a: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        b: Vec<String>,
        /// "cca" (sequential canonical-correlation test) or "svd"
        /// (singular-value threshold).
        #[arg(long, default_value = "cca")]
        method: String,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        /// Relative singular-value threshold for the svd method.
        #[arg(long, default_value_t = 0.05)]
        rel_tol: f64,
    },
    /// Run rank-oracle FCI over latent variables from selection-biased data.
    Discover {
        #[arg(long)]
        data: PathBuf,
        /// JSON map from latent names to their measurement columns.
        #[arg(long)]
        clustering: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        max_cond_size: Option<usize>,
    },
    /// Ground-truth PAG from the exact d-separation oracle of a model.
    Truth {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Variables to run FCI over (default: all observed variables).
        #[arg(long, value_delimiter = ',')]
        vars: Option<Vec<String>>,
        #[arg(long)]
        max_cond_size: Option<usize>,
    },
    /// Run the synthetic experiment protocol from a JSON config.
    Eval {
        #[arg(long)]
        config: PathBuf,
        /// Output directory for report.json and summary.csv.
        #[arg(long)]
        out: PathBuf,
    },
}

fn read_to_string(path: &PathBuf) -> Result<String> {
    fs::read_to_string(path)
        .map_err(|e| Error::InvalidInput(format!("cannot read {}: {e}", path.display())))
}

fn load_model(path: &PathBuf) -> Result<(LinearSem, SelectionConfig)> {
    model_from_json(&read_to_string(path)?)
}

fn load_graph(path: &PathBuf) -> Result<Dag> {
    graph_from_json(&read_to_string(path)?)
}

fn load_data(path: &PathBuf) -> Result<DataMatrix> {
    let file = fs::File::open(path)
        .map_err(|e| Error::InvalidInput(format!("cannot read {}: {e}", path.display())))?;
    DataMatrix::read_csv(std::io::BufReader::new(file))
}

fn clean_names(names: &[String]) -> Vec<String> {
    names
        .iter()
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate {
            model,
            n,
            seed,
            out,
            acceptance_floor,
        } => {
            let (sem, config) = load_model(&model)?;
            let opts = SampleOptions {
                acceptance_floor,
                ..SampleOptions::default()
            };
            let data = sample(&sem, &config, n, seed, opts)?;
            let file = fs::File::create(&out)?;
            data.write_csv(std::io::BufWriter::new(file))?;
            eprintln!("wrote {} samples to {}", data.n_rows(), out.display());
        }
        Command::Grank { model, a, b } => {
            let (sem, config) = load_model(&model)?;
            let g = sem.graph();
            let a_names = clean_names(&a);
            let b_names = clean_names(&b);
            let result = graphical_rank(g, &config, &g.indices_of(&a_names)?, &g.indices_of(&b_names)?)?;
            let aug = augment(g, &config)?;
            let name = |set: &[usize]| -> Vec<String> {
                set.iter().map(|&v| aug.graph().name(v).to_string()).collect()
            };
            println!(
                "{}",
                serde_json::to_string_pretty(&json!({
                    "a": a_names,
                    "b": b_names,
                    "rank": result.rank,
                    "selection_count": result.adjustment,
                    "witness": { "c": name(&result.cut_c), "d": name(&result.cut_d) },
                }))
                .unwrap()
            );
        }
        Command::Tsep { graph, a, b, c, d } => {
            let g = load_graph(&graph)?;
            let ia = g.indices_of(&clean_names(&a))?;
            let ib = g.indices_of(&clean_names(&b))?;
            if c.is_some() || d.is_some() {
                let ic = g.indices_of(&clean_names(&c.unwrap_or_default()))?;
                let id = g.indices_of(&clean_names(&d.unwrap_or_default()))?;
                let separated = t_separates(&g, &ia, &ib, &ic, &id)?;
                println!("t-separated: {separated}");
            } else {
                let result = min_tsep(&g, &ia, &ib)?;
                let name = |set: &[usize]| -> Vec<String> {
                    set.iter().map(|&v| g.name(v).to_string()).collect()
                };
                println!(
                    "{}",
                    serde_json::to_string_pretty(&json!({
                        "min_tsep": result.rank,
                        "witness": { "c": name(&result.cut_c), "d": name(&result.cut_d) },
                    }))
                    .unwrap()
                );
            }
        }
        Command::Ranks {
            data,
            a,
            b,
            method,
            alpha,
            rel_tol,
        } => {
            let table = load_data(&data)?;
            let a_names = clean_names(&a);
            let b_names = clean_names(&b);
            let ia = table.indices_of(&a_names)?;
            let ib = table.indices_of(&b_names)?;
            let method = match method.as_str() {
                "cca" => RankMethod::CanonicalCorrelationTest,
                "svd" => RankMethod::SingularValueThreshold,
                other => {
                    return Err(Error::invalid(format!(
                        "unknown method '{other}' (expected 'cca' or 'svd')"
                    )))
                }
            };
            let spec = RankTestSpec {
                method,
                alpha,
                rel_tol,
            };
            let decision = estimate_rank(&table, &ia, &ib, &spec)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&json!({
                    "a": a_names,
                    "b": b_names,
                    "method": decision.method,
                    "rank": decision.rank,
                    "statistic": decision.statistic,
                    "p_values": decision.p_values,
                    "regularized": decision.regularized,
                }))
                .unwrap()
            );
        }
        Command::Discover {
            data,
            clustering,
            alpha,
            out,
            max_cond_size,
        } => {
            let table = load_data(&data)?;
            let clustering = MeasurementClustering::from_json(&read_to_string(&clustering)?)?;
            let oracle = RankCiOracle::new(
                RankSource::Data(&table),
                &clustering,
                RankTestSpec::cca(alpha),
            );
            let opts = FciOptions {
                max_cond_size,
                use_possible_dsep: true,
            };
            let pag = fci(&oracle, clustering.latents(), &opts)?;
            fs::write(&out, pag_to_json(&pag) + "\n")?;
            print!("{}", pag.render_text());
            eprintln!("wrote PAG to {}", out.display());
        }
        Command::Truth {
            model,
            out,
            vars,
            max_cond_size,
        } => {
            let (sem, config) = load_model(&model)?;
            let aug = augment(sem.graph(), &config)?;
            let vars = match vars {
                Some(v) => clean_names(&v),
                None => aug
                    .base()
                    .indices_with_role(NodeRole::Observed)
                    .into_iter()
                    .map(|v| aug.base().name(v).to_string())
                    .collect(),
            };
            if vars.is_empty() {
                return Err(Error::invalid(
                    "no observed variables; pass --vars explicitly".to_string(),
                ));
            }
            let oracle = dsep_ci_oracle(&aug, &vars)?;
            let opts = FciOptions {
                max_cond_size,
                use_possible_dsep: true,
            };
            let pag = fci(&oracle, vars, &opts)?;
            fs::write(&out, pag_to_json(&pag) + "\n")?;
            print!("{}", pag.render_text());
            eprintln!("wrote PAG to {}", out.display());
        }
        Command::Eval { config, out } => {
            let cfg = ExperimentConfig::from_json(&read_to_string(&config)?)?;
            let report = run_experiment(&cfg)?;
            write_report(&report, &out)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&json!({
                    "summary": report.summary,
                    "failures": report.failures,
                }))
                .unwrap()
            );
            eprintln!("wrote report to {}", out.display());
        }
    }
    Ok(())
}

fn main() {
    env_logger::init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
