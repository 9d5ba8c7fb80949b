use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use teeslice::data::{gen_dataset, Dataset};
use teeslice::fed::{compare, format_table, run, to_csv, ExperimentConfig, TrainingReport};
use teeslice::model::{save_checkpoint, TuningMode};
use teeslice::partition::{build_plan, simulate_cost, Method, Workload};
use teeslice::tensor::Precision;

#[derive(Parser)]
#[command(
    name = "teeslice",
    version,
    about = "Secure split and federated fine-tuning simulator"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic dataset a config runs on.
    GenData(Common),
    /// Train one scheme and write its report, audit, cost and checkpoint.
    Run(RunArgs),
    /// Tabulate reports, or run several schemes and tabulate them.
    Compare(CompareArgs),
    /// Run one scheme and report only its taint audit.
    Audit(RunArgs),
    /// Price the configured workload under every scheme.
    Bench(Common),
}

#[derive(Args, Clone)]
struct Common {
    /// TOML experiment config; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    method: Option<Method>,
    /// lora or ptuningv2.
    #[arg(long)]
    tuning: Option<TuningMode>,
    /// exact or simhalf.
    #[arg(long)]
    precision: Option<Precision>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
    /// Dataset written by gen-data; generated from the config when absent.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    common: Common,
    /// Comma-separated schemes to run under the config, e.g. `all` or
    /// `fl-llm,method1`.
    #[arg(long)]
    methods: Option<String>,
    /// Existing report.json files.
    reports: Vec<PathBuf>,
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text =
                    fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                ExperimentConfig::from_toml(&text)?
            }
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(m) = self.method {
            cfg.method = m;
        }
        if let Some(t) = self.tuning {
            cfg.tuning.mode = t;
        }
        if let Some(p) = self.precision {
            cfg.precision = p;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn out_dir(&self) -> Result<&Path> {
        fs::create_dir_all(&self.out)
            .with_context(|| format!("creating {}", self.out.display()))?;
        Ok(&self.out)
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")
        .with_context(|| format!("writing {}", path.display()))
}

fn dataset(cfg: &ExperimentConfig, path: Option<&Path>) -> Result<Dataset> {
    match path {
        Some(p) => {
            let d = Dataset::read(p)?;
            cfg.check_dataset(&d)?;
            Ok(d)
        }
        None => Ok(gen_dataset(&cfg.task(), cfg.seed)?),
    }
}

fn run_one(cfg: &ExperimentConfig, data: &Dataset, out: &Path) -> Result<TrainingReport> {
    let res = run(cfg, data)?;
    let r = &res.report;
    write_json(&out.join("report.json"), r)?;
    write_json(&out.join("audit.json"), &r.audit)?;
    write_json(&out.join("cost.json"), &r.cost)?;
    fs::write(
        out.join("table.csv"),
        to_csv(&compare(std::slice::from_ref(r))?),
    )?;
    let meta = serde_json::json!({
        "method": cfg.method.name(),
        "seed": cfg.seed,
        "rounds": cfg.rounds,
    });
    save_checkpoint(
        &out.join("adapters.tsck"),
        &res.artifacts.final_params,
        meta,
    )?;
    Ok(res.report)
}

fn parse_methods(s: &str) -> Result<Vec<Method>> {
    if s == "all" {
        return Ok(Method::ALL.to_vec());
    }
    s.split(',').map(|m| Ok(m.trim().parse()?)).collect()
}

fn main() -> ExitCode {
    match real_main() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn real_main() -> Result<ExitCode> {
    match Cli::parse().cmd {
        Cmd::GenData(c) => {
            let cfg = c.config()?;
            let d = gen_dataset(&cfg.task(), cfg.seed)?;
            let path = c.out_dir()?.join("dataset.json");
            d.write(&path)?;
            let sizes: Vec<usize> = d.shards.iter().map(Vec::len).collect();
            println!(
                "wrote {} (train {}, test {}, shards {sizes:?})",
                path.display(),
                d.train.len(),
                d.test.len()
            );
        }
        Cmd::Run(a) => {
            let cfg = a.common.config()?;
            let data = dataset(&cfg, a.data.as_deref())?;
            let r = run_one(&cfg, &data, a.common.out_dir()?)?;
            print!("{}", format_table(&compare(std::slice::from_ref(&r))?));
        }
        Cmd::Audit(a) => {
            let cfg = a.common.config()?;
            let data = dataset(&cfg, a.data.as_deref())?;
            let res = run(&cfg, &data)?;
            let r = &res.report;
            write_json(&a.common.out_dir()?.join("audit.json"), &r.audit)?;
            println!(
                "{}: {} ({} plaintext exposures, {} crossings, {} pads, {} reused)",
                cfg.method,
                r.audit_status,
                r.audit.plaintext_sightings,
                r.audit.crossings,
                r.audit.pads.issued,
                r.audit.pads.reused
            );
            if r.audit_status == "fail" {
                return Ok(ExitCode::from(1));
            }
        }
        Cmd::Compare(a) => {
            let mut reports = Vec::new();
            for p in &a.reports {
                let text =
                    fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                reports.push(serde_json::from_str::<TrainingReport>(&text)?);
            }
            if let Some(ms) = &a.methods {
                let base = a.common.config()?;
                let data = dataset(&base, None)?;
                let out = a.common.out_dir()?.to_path_buf();
                for m in parse_methods(ms)? {
                    let cfg = ExperimentConfig {
                        method: m,
                        ..base.clone()
                    };
                    let dir = out.join(m.name());
                    fs::create_dir_all(&dir)?;
                    reports.push(run_one(&cfg, &data, &dir)?);
                }
            }
            if reports.is_empty() {
                bail!("give report files or --methods");
            }
            let rows = compare(&reports)?;
            fs::write(a.common.out_dir()?.join("table.csv"), to_csv(&rows))?;
            print!("{}", format_table(&rows));
        }
        Cmd::Bench(c) => {
            let cfg = c.config()?;
            let workload = Workload {
                model: cfg.model.clone(),
                tuning: cfg.tuning.clone(),
                seq_len: cfg.data.seq_len,
                examples: 1,
                train: true,
            };
            let mut costs = Vec::new();
            let mut csv = String::from("method,trusted,untrusted,crossing,masking,offline,total\n");
            for m in Method::ALL {
                let split = (m == Method::Method2).then_some(cfg.tuning.split_layer);
                let plan = build_plan(&cfg.model, m, split)?;
                let r = simulate_cost(&plan, &workload, &cfg.cost)?;
                csv.push_str(&format!(
                    "{m},{:.1},{:.1},{:.1},{:.1},{:.1},{:.1}\n",
                    r.trusted, r.untrusted, r.crossing, r.masking, r.offline, r.total
                ));
                println!("{:<8} {:>14.1}", m.name(), r.total);
                costs.push(r);
            }
            let out = c.out_dir()?;
            write_json(&out.join("cost.json"), &costs)?;
            fs::write(out.join("table.csv"), csv)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}
