use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use xlane_core::explanation::{explain_super_features, ExplanationFile};
use xlane_core::ig::{integrated_gradients, IgConfig};
use xlane_core::lrp::{explain, LnRule, LrpConfig, OmegaVariant};
use xlane_core::lstm::{forward, InputScaler};
use xlane_core::model_io::{load_model, save_model};
use xlane_core::relevance::RelevanceFile;
use xlane_core::train::{train, TrainConfig};
use xlane_core::window::WindowFile;
use xlane_core::{Class, FillMode, Params, Window};
use xlane_eval::bench::timing_benchmark;
use xlane_eval::perturb::{perturbation_test, write_curves_csv, Method, PerturbConfig, Ranking};
use xlane_service::server::{start_service, ServiceConfig, Source};
use xlane_service::AdaptorConfig;
use xlane_twin::frame::FrameWriter;
use xlane_twin::{generate_dataset, Dataset, SimConfig, Simulator, Split};

#[derive(Parser)]
#[command(name = "xlane", version, about = "Explainable lane-change prediction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ExplainMethod {
    Lrp,
    Ig,
}

#[derive(Clone, Copy, ValueEnum)]
enum FillArg {
    Sentinel,
    Zero,
    Mean,
}

#[derive(Clone, Copy, ValueEnum)]
enum RankingArg {
    Signed,
    Magnitude,
}

#[derive(Subcommand)]
enum Command {
    /// Train an lnLSTM on a generated dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 20)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = xlane_core::lstm::DEFAULT_HIDDEN)]
        hidden: usize,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[arg(long, default_value_t = 3e-3)]
        lr: f64,
    },
    /// Predict the lane-change class of one window.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        window: PathBuf,
    },
    /// Explain one window with LRP or Integrated Gradients.
    Explain {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        window: PathBuf,
        /// Class to explain; defaults to the predicted class.
        #[arg(long)]
        class: Option<String>,
        #[arg(long, value_enum, default_value = "lrp")]
        method: ExplainMethod,
        #[arg(long, default_value = "omega")]
        ln_rule: String,
        #[arg(long, default_value = "literal")]
        omega_variant: String,
        #[arg(long, default_value_t = xlane_core::lrp::DEFAULT_EPSILON)]
        epsilon: f64,
        #[arg(long, default_value_t = xlane_core::ig::DEFAULT_STEPS)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
        /// Also write the super-feature explanation here.
        #[arg(long)]
        explanation_out: Option<PathBuf>,
    },
    /// Occlusion faithfulness test; writes accuracy curves as CSV.
    Perturb {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "lrp-omega,lrp-identity,ig,random")]
        methods: Vec<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Use at most this many windows of the split.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long, value_enum, default_value = "sentinel")]
        fill: FillArg,
        /// Rank once on the original window instead of after every occlusion.
        #[arg(long)]
        one_shot: bool,
        #[arg(long, value_enum, default_value = "signed")]
        ranking: RankingArg,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long, default_value_t = xlane_core::ig::DEFAULT_STEPS)]
        ig_steps: usize,
    },
    /// Time LRP against Integrated Gradients.
    Bench {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = xlane_core::ig::DEFAULT_STEPS)]
        ig_steps: usize,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Run the traffic twin and record frames.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        record: PathBuf,
        /// Simulated seconds to record.
        #[arg(long, default_value_t = 300.0)]
        duration: f64,
        #[arg(long, default_value_t = 0.0)]
        warm_up: f64,
    },
    /// Generate a balanced labeled dataset.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 2000)]
        n_per_class: usize,
        #[arg(long)]
        out: PathBuf,
        /// Also write this many test windows as `samples/<i>_<label>.json`.
        #[arg(long, default_value_t = 5)]
        samples: usize,
    },
    /// Run the streaming prediction service.
    Serve {
        #[arg(long)]
        model: PathBuf,
        /// `sim` or `replay:<file>`
        #[arg(long, default_value = "sim")]
        source: String,
        #[arg(long, default_value_t = 2)]
        workers: usize,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        /// Simulation config for `--source sim`.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Identity-cache snapshot file.
        #[arg(long)]
        snapshot: Option<PathBuf>,
        /// Stream seconds per wall second.
        #[arg(long, default_value_t = 1.0)]
        rate: f64,
    },
}

fn sim_config(path: &Option<PathBuf>) -> Result<SimConfig> {
    match path {
        Some(p) => SimConfig::load(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(SimConfig::default()),
    }
}

fn model(path: &Path) -> Result<Params> {
    load_model(path).with_context(|| format!("loading model {}", path.display()))
}

fn window(path: &Path) -> Result<(WindowFile, Window)> {
    let text = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let file: WindowFile = serde_json::from_slice(&text)?;
    let w = file.to_window()?;
    Ok((file, w))
}

fn instances(data: &Path, split: SplitArg, n: Option<usize>) -> Result<(Dataset, Vec<(Window, Class)>)> {
    let ds = Dataset::load(data).with_context(|| format!("loading dataset {}", data.display()))?;
    let mut inst = ds.samples(split.into());
    if let Some(n) = n {
        inst.truncate(n);
    }
    if inst.is_empty() {
        bail!("the selected split is empty");
    }
    Ok((ds, inst))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_vec_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            data,
            epochs,
            seed,
            out,
            hidden,
            batch_size,
            lr,
        } => {
            let ds = Dataset::load(&data)?;
            let cfg = TrainConfig {
                hidden,
                epochs,
                batch_size,
                learning_rate: lr,
                seed,
                ..TrainConfig::default()
            };
            let (p, report) = train(&ds.samples(Split::Train), &ds.samples(Split::Val), &cfg)?;
            save_model(&p, &out)?;
            println!("{}", serde_json::to_string(&report)?);
        }
        Command::Predict { model: m, window: w } => {
            let p = model(&m)?;
            let (_, w) = window(&w)?;
            let (pred, _) = forward(&w, &p)?;
            println!(
                "{}",
                serde_json::json!({
                    "probabilities": pred.probabilities,
                    "predicted_class": pred.predicted_class,
                    "horizon_s": pred.horizon_s,
                })
            );
        }
        Command::Explain {
            model: m,
            window: wpath,
            class,
            method,
            ln_rule,
            omega_variant,
            epsilon,
            steps,
            out,
            explanation_out,
        } => {
            let p = model(&m)?;
            let (file, w) = window(&wpath)?;
            let (pred, trace) = forward(&w, &p)?;
            let class: Class = match class {
                Some(c) => c.parse()?,
                None => pred.predicted_class,
            };
            let (relevance, ledger, name) = match method {
                ExplainMethod::Lrp => {
                    let cfg = LrpConfig {
                        epsilon,
                        ln_rule: ln_rule.parse::<LnRule>()?,
                        omega_variant: omega_variant.parse::<OmegaVariant>()?,
                    };
                    let e = explain(&w, &p, &trace, class, &cfg)?;
                    let name = match cfg.ln_rule {
                        LnRule::Omega => "lrp-omega",
                        LnRule::Identity => "lrp-identity",
                    };
                    (e.relevance, Some(e.ledger), name)
                }
                ExplainMethod::Ig => (integrated_gradients(&w, &p, class, &IgConfig::with_steps(steps))?, None, "ig"),
            };
            let rf = RelevanceFile::new(file.window_id.clone(), class, name, &relevance, ledger.as_ref());
            write_json(&out, &rf)?;
            let sf = explain_super_features(&relevance);
            let ef = ExplanationFile::new(&sf, |s| Some(s.name().to_string()));
            if let Some(path) = explanation_out {
                write_json(&path, &ef)?;
            }
            println!("{}", serde_json::to_string(&ef)?);
        }
        Command::Perturb {
            model: m,
            data,
            methods,
            seed,
            out,
            n,
            fill,
            one_shot,
            ranking,
            split,
            ig_steps,
        } => {
            let p = model(&m)?;
            let (ds, inst) = instances(&data, split, n)?;
            let fill = match fill {
                FillArg::Sentinel => FillMode::Sentinel,
                FillArg::Zero => FillMode::Zero,
                FillArg::Mean => {
                    let train = ds.samples(Split::Train);
                    FillMode::Mean(InputScaler::fit(train.iter().map(|s| &s.0)).mean)
                }
            };
            let cfg = PerturbConfig {
                fill,
                recompute: !one_shot,
                ranking: match ranking {
                    RankingArg::Signed => Ranking::Signed,
                    RankingArg::Magnitude => Ranking::Magnitude,
                },
                seed,
                max_instances: None,
            };
            let mut curves = Vec::new();
            for name in &methods {
                let method = match name.parse::<Method>()? {
                    Method::Ig { .. } => Method::Ig { steps: ig_steps },
                    m => m,
                };
                let t0 = Instant::now();
                let c = perturbation_test(&inst, &p, &method, &cfg)?;
                eprintln!(
                    "{:<15} n={}  mean(1..5)={:.3}  step14={:.3}  ({:.1?})",
                    c.method,
                    c.n,
                    c.mean_over(1, 5),
                    c.accuracy[14],
                    t0.elapsed()
                );
                curves.push(c);
            }
            let f = std::fs::File::create(&out).with_context(|| format!("creating {}", out.display()))?;
            write_curves_csv(&curves, f)?;
        }
        Command::Bench {
            model: m,
            data,
            ig_steps,
            n,
            split,
        } => {
            let p = model(&m)?;
            let (_, inst) = instances(&data, split, Some(n))?;
            let r = timing_benchmark(&inst, &p, ig_steps, 10.min(inst.len()))?;
            println!("{}", serde_json::to_string_pretty(&r)?);
        }
        Command::Simulate {
            config,
            record,
            duration,
            warm_up,
        } => {
            let cfg = sim_config(&config)?;
            let frames = (duration * cfg.frame_rate_hz).round() as usize;
            let mut sim = Simulator::new(cfg)?;
            sim.warm_up(warm_up);
            let file = std::fs::File::create(&record).with_context(|| format!("creating {}", record.display()))?;
            let mut w = FrameWriter::new(std::io::BufWriter::new(file));
            for _ in 0..frames {
                w.write(&sim.next_frame())?;
            }
            use std::io::Write;
            w.into_inner().flush()?;
            eprintln!("recorded {frames} frames, {} lane changes", sim.events().len());
        }
        Command::GenData {
            config,
            n_per_class,
            out,
            samples,
        } => {
            let cfg = sim_config(&config)?;
            let ds = generate_dataset(&cfg, n_per_class)?;
            ds.save(&out)?;
            if samples > 0 {
                let dir = out.join("samples");
                std::fs::create_dir_all(&dir)?;
                for (i, lw) in ds.split(Split::Test).take(samples).enumerate() {
                    let id = format!("{i}_{}", lw.label);
                    write_json(&dir.join(format!("{id}.json")), &WindowFile::from_window(&lw.window, Some(id)))?;
                }
            }
            eprintln!(
                "{} windows ({} simulated seconds) written to {}",
                ds.windows.len(),
                ds.manifest.simulated_seconds,
                out.display()
            );
        }
        Command::Serve {
            model: m,
            source,
            workers,
            port,
            config,
            snapshot,
            rate,
        } => {
            let p = Arc::new(model(&m)?);
            let mut source: Source = source.parse()?;
            if let (Source::Sim(c), Some(_)) = (&mut source, &config) {
                *c = sim_config(&config)?;
            }
            let lane_count = match &source {
                Source::Sim(c) => c.lane_count,
                Source::Replay(_) => sim_config(&config)?.lane_count,
            };
            let cfg = ServiceConfig {
                source,
                workers,
                port,
                rate,
                adaptor: AdaptorConfig {
                    lane_count,
                    snapshot_path: snapshot,
                    ..AdaptorConfig::default()
                },
                ..ServiceConfig::default()
            };
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async move {
                let svc = start_service(p, cfg).await?;
                eprintln!(
                    "broker on ws://{}/ws, workers on {:?}",
                    svc.addr,
                    svc.worker_addrs
                );
                tokio::select! {
                    r = svc.source => { r??; eprintln!("source exhausted"); }
                    _ = tokio::signal::ctrl_c() => { svc.broker.shutdown(); }
                }
                tokio::time::sleep(Duration::from_millis(200)).await;
                anyhow::Ok(())
            })?;
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
