use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use tsa_core::data::{generate_synthetic, load_features, save_dataset, SynthConfig};
use tsa_core::evaluation::DnMode;
use tsa_core::harness::{self, load_model, save_run, Evaluator, RunConfig, CONFIG_FILE};
use tsa_core::lexicon::Lexicon;
use tsa_core::model::{Cuts, QueryCuts};
use tsa_core::segmentation::segment;
use tsa_core::{checks, CoreError};
use tsa_diffcore::Graph;

#[derive(Parser)]
#[command(name = "tsa-aqa", version, about = "Procedure-aware action quality assessment")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset (annotations.json + features/*.fdft).
    SynthData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 800)]
        n: usize,
        #[arg(long, default_value_t = 48)]
        t: usize,
        #[arg(long, default_value_t = 32)]
        d: usize,
        #[arg(long, default_value_t = 1)]
        p: usize,
        #[arg(long, default_value_t = 0.1)]
        sigma: f64,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train from a JSON run config; writes run.json, model.tsaw and
    /// train_log.json into the output directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "run")]
        out_dir: PathBuf,
        /// Evaluate on the test split afterwards.
        #[arg(long)]
        eval: bool,
    },
    /// Evaluate a checkpoint on the test split of its run config.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 10)]
        m: usize,
        #[arg(long, default_value = "with_dn")]
        dn: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Cut every instance with ground-truth transitions.
        #[arg(long)]
        oracle: bool,
        /// Also write the report as JSON here.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Decode transitions of one feature file.
    Segment {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Print the sub-action steps of a dive number.
    ParseDive { code: String },
    /// Write per-step attention maps of one test/train pair as CSV.
    AttnDump {
        /// `<query video id>,<exemplar video id>`.
        #[arg(long)]
        pair: String,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "attn")]
        out_dir: PathBuf,
    },
    /// Finite-difference checks of the composite model functions.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        points: u64,
    },
}

fn run_dir(ckpt: &Path) -> &Path {
    ckpt.parent().unwrap_or(Path::new("."))
}

fn load_run(ckpt: &Path) -> Result<RunConfig> {
    let path = run_dir(ckpt).join(CONFIG_FILE);
    let json = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    Ok(RunConfig::from_json(&json)?)
}

fn run(cli: Cli) -> Result<()> {
    let lexicon = Lexicon::builtin();
    match cli.command {
        Command::SynthData {
            seed,
            n,
            t,
            d,
            p,
            sigma,
            out_dir,
        } => {
            let cfg = SynthConfig {
                seed,
                n,
                t,
                d,
                p,
                sigma,
                ..SynthConfig::default()
            };
            let samples = generate_synthetic(&cfg, lexicon)?;
            save_dataset(&out_dir, &samples)?;
            println!("wrote {} instances to {}", samples.len(), out_dir.display());
        }
        Command::Train { config, out_dir, eval } => {
            let json = fs::read_to_string(&config).with_context(|| format!("reading {}", config.display()))?;
            let cfg = RunConfig::from_json(&json)?;
            let base = config.parent().unwrap_or(Path::new("."));
            let (train, test) = cfg.data.load(lexicon, base)?;
            println!("train {} / test {}", train.len(), test.len());
            let (model, mut log) = harness::train(&cfg, &train, |e| {
                println!(
                    "epoch {:3}  J {:.4}  bce {:.4}  mse {:.4}  {:.1}s",
                    e.epoch, e.mean_j, e.mean_bce, e.mean_mse, e.wall_secs
                );
            })?;
            let mut saved = cfg.clone();
            if let harness::DataSpec::Files {
                annotations,
                features_dir,
                ..
            } = &mut saved.data
            {
                *annotations = fs::canonicalize(base.join(&*annotations))?;
                *features_dir = fs::canonicalize(base.join(&*features_dir))?;
            }
            save_run(&out_dir, &saved, &model, &mut log)?;
            println!("parameters {}  checkpoint {}", model.num_parameters(), out_dir.display());
            if eval {
                let ev = harness::evaluate(&model, &test, &train, cfg.m, cfg.dn_mode, cfg.eval_seed, cfg.oracle_transitions)?;
                println!("AIoU@0.5\tAIoU@0.75\trho\tR-l2x100");
                println!("{}", ev.report.table_row());
            }
        }
        Command::Evaluate {
            ckpt,
            m,
            dn,
            seed,
            oracle,
            json,
        } => {
            let cfg = load_run(&ckpt)?;
            let model = load_model(&ckpt)?;
            let (train, test) = cfg.data.load(lexicon, run_dir(&ckpt))?;
            let mode: DnMode = dn.parse()?;
            let ev = Evaluator::new(&model, &train, &test, oracle)?.run(m, mode, seed)?;
            println!("AIoU@0.5\tAIoU@0.75\trho\tR-l2x100");
            println!("{}", ev.report.table_row());
            if let Some(path) = json {
                fs::write(path, serde_json::to_string_pretty(&ev.report)?)?;
            }
        }
        Command::Segment { features, ckpt } => {
            let model = load_model(&ckpt)?;
            if !model.config.variant.segments() {
                bail!("variant {:?} has no segmenter", model.config.variant);
            }
            let f = load_features(&features)?;
            let out = segment(&model.params, &model.config.seg, &f.frame_tokens())?;
            println!("transitions {:?}", out.decoded);
            let mut stdout = std::io::stdout().lock();
            let header: Vec<String> = (1..=out.probs.rows()).map(|k| format!("p{k}")).collect();
            writeln!(stdout, "frame,{}", header.join(","))?;
            for t in 0..out.probs.cols() {
                let row: Vec<String> = (0..out.probs.rows()).map(|k| format!("{:.6}", out.probs.get(k, t))).collect();
                writeln!(stdout, "{},{}", t + 1, row.join(","))?;
            }
        }
        Command::ParseDive { code } => {
            let seq = lexicon.parse_dive_code(&code)?;
            println!("{code}: {} steps", seq.len());
            for (i, s) in seq.steps.iter().enumerate() {
                println!("{}\t{:?}\t{}", i + 1, s.phase, s.name);
            }
        }
        Command::AttnDump { pair, ckpt, out_dir } => {
            let (q_id, z_id) = pair.split_once(',').context("--pair expects <query>,<exemplar>")?;
            let cfg = load_run(&ckpt)?;
            let model = load_model(&ckpt)?;
            let (train, test) = cfg.data.load(lexicon, run_dir(&ckpt))?;
            let find = |id: &str| {
                test.iter()
                    .chain(&train)
                    .find(|s| s.annotation.video_id == id)
                    .with_context(|| format!("no instance {id}"))
            };
            let (query, exemplar) = (find(q_id)?, find(z_id)?);
            let mut g = Graph::no_grad();
            let p = model.params.bind(&mut g)?;
            let z_cuts: Cuts = model.predict_cuts(exemplar)?;
            let out = model.pair_forward(&mut g, &p, query, exemplar, &QueryCuts::Predicted, &z_cuts, false)?;
            if out.attention.is_empty() {
                bail!("variant {:?} has no attention", model.config.variant);
            }
            fs::create_dir_all(&out_dir)?;
            for (l, layers) in out.attention.iter().enumerate() {
                for (r, &node) in layers.iter().enumerate() {
                    for (h, w) in g.attention_weights(node).unwrap_or_default().iter().enumerate() {
                        let path = out_dir.join(format!("step{}_layer{}_head{}.csv", l + 1, r + 1, h + 1));
                        let mut csv = String::new();
                        for i in 0..w.rows() {
                            let row: Vec<String> = w.row(i).iter().map(|v| format!("{v:.6}")).collect();
                            csv.push_str(&row.join(","));
                            csv.push('\n');
                        }
                        fs::write(&path, csv)?;
                    }
                }
            }
            let pred = out.score.prediction(&g, exemplar.annotation.score)?;
            println!(
                "query {} exemplar {} predicted {:.4} (label {:.4}); maps in {}",
                q_id,
                z_id,
                pred.predicted_score,
                query.annotation.score,
                out_dir.display()
            );
        }
        Command::Gradcheck { points } => {
            let mut failed = false;
            let checks: [(&str, fn(u64) -> f64); 3] = [
                ("seg_forward", checks::check_seg_forward),
                ("decoder_forward", checks::check_decoder_forward),
                ("joint_loss", checks::check_joint_loss),
            ];
            for (name, f) in checks {
                let worst = (0..points).map(f).fold(0.0, f64::max);
                let ok = worst <= 1e-4;
                failed |= !ok;
                println!("{name}\tmax_rel_err {worst:.3e}\t{}", if ok { "ok" } else { "FAIL" });
            }
            if failed {
                bail!("gradient check above 1e-4");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = match e.downcast_ref::<CoreError>() {
                Some(c) => format!("{c:?}").split(['(', ' ', '{']).next().unwrap_or("Error").to_string(),
                None => "Error".to_string(),
            };
            eprintln!("{}", serde_json::json!({ "error": kind, "message": format!("{e:#}") }));
            ExitCode::FAILURE
        }
    }
}
