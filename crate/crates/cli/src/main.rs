//! `gtad`: generate scenes, train, evaluate, run ablations and export BEV
//! label images.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{value_parser, Arg, ArgMatches, Command};
use gtad_core::harness::{
    argmax_labels, eval_noise, evaluate, predict_logits, run_ablation, train, write_bev_image, Axis, BevMode, Dataset, Model,
    RunReport,
};
use gtad_core::numerics::{load_checkpoint, save_checkpoint};
use gtad_core::scenegen::{load_scene, save_scene, SceneData, CLASS_NAMES};
use gtad_core::PipelineConfig;

fn config_args() -> Vec<Arg> {
    let mut args = vec![Arg::new("config")
        .long("config")
        .value_name("FILE")
        .value_parser(value_parser!(PathBuf))
        .help("key = value file applied over the defaults, before any flag")];
    args.extend(PipelineConfig::KEYS.iter().map(|&k| {
        Arg::new(k)
            .long(k)
            .value_name("VALUE")
            .help_heading("Pipeline")
            .help(format!("default {}", PipelineConfig::default().get(k).expect("known key")))
    }));
    args
}

fn dir_arg(name: &'static str, help: &'static str) -> Arg {
    Arg::new(name)
        .long(name)
        .value_name("DIR")
        .value_parser(value_parser!(PathBuf))
        .help(help)
}

fn seed_required(cmd: Command) -> Command {
    cmd.mut_arg("seed", |a| a.required(true))
}

fn cli() -> Command {
    let scenes = dir_arg("scenes", "read scenes written by `gen` instead of generating them");
    Command::new("gtad")
        .about("Temporal occupancy prediction on synthetic driving scenes")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(
            Command::new("gen")
                .about("Write the train and eval scenes of a config")
                .arg(dir_arg("out", "output directory").required(true))
                .args(config_args()),
        )
        .subcommand(seed_required(
            Command::new("train")
                .about("Train, evaluate and write a run directory")
                .arg(dir_arg("out", "run directory").required(true))
                .arg(scenes.clone())
                .args(config_args()),
        ))
        .subcommand(
            Command::new("eval")
                .about("Evaluate a trained run on its eval scenes")
                .arg(dir_arg("run", "run directory written by `train`").required(true))
                .arg(dir_arg("out", "output directory (default: <run>/eval)"))
                .arg(scenes.clone())
                .args(config_args()),
        )
        .subcommand(seed_required(
            Command::new("ablate")
                .about("Sweep one switch over several seeds")
                .arg(
                    Arg::new("axis")
                        .required(true)
                        .value_parser(["local", "fusion", "steps", "corruption"]),
                )
                .arg(dir_arg("out", "output directory").required(true))
                .arg(
                    Arg::new("seeds")
                        .long("seeds")
                        .value_name("N")
                        .default_value("5")
                        .value_parser(value_parser!(u64).range(1..))
                        .help("number of consecutive seeds starting at --seed"),
                )
                .args(config_args()),
        ))
        .subcommand(
            Command::new("export")
                .about("Write ground-truth and predicted BEV images for one eval frame")
                .arg(dir_arg("run", "run directory written by `train`").required(true))
                .arg(dir_arg("out", "output directory (default: the run directory)"))
                .arg(Arg::new("scene").long("scene").default_value("0").value_parser(value_parser!(usize)))
                .arg(
                    Arg::new("frame")
                        .long("frame")
                        .value_parser(value_parser!(usize))
                        .help("newest frame of the window (default: last)"),
                )
                .arg(
                    Arg::new("mode")
                        .long("mode")
                        .default_value("top")
                        .help("`top` for the highest occupied cell, `slice:K` for layer K"),
                )
                .arg(scenes)
                .args(config_args()),
        )
}

/// Defaults, then `--config`, then individual flags.
fn build_config(m: &ArgMatches, base: PipelineConfig) -> Result<PipelineConfig> {
    let mut cfg = base;
    if let Some(path) = m.get_one::<PathBuf>("config") {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        cfg.apply_text(&text)?;
    }
    for &k in PipelineConfig::KEYS {
        if let Some(v) = m.get_one::<String>(k) {
            cfg.set(k, v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_split(dir: &Path, prefix: &str) -> Result<Vec<SceneData>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| {
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
        name.starts_with(prefix) && name.ends_with(".scene")
    });
    paths.sort();
    paths
        .iter()
        .map(|p| load_scene(p).with_context(|| format!("loading {}", p.display())))
        .collect()
}

fn dataset(m: &ArgMatches, cfg: &PipelineConfig) -> Result<Dataset> {
    match m.get_one::<PathBuf>("scenes") {
        Some(dir) => {
            let data = Dataset {
                train: load_split(dir, "train_")?,
                eval: load_split(dir, "eval_")?,
            };
            if data.train.is_empty() || data.eval.is_empty() {
                bail!("{} holds no train_*.scene or eval_*.scene files", dir.display());
            }
            Ok(data)
        }
        None => Ok(Dataset::generate(cfg)?),
    }
}

fn write_report(dir: &Path, report: &RunReport) -> Result<()> {
    write(&dir.join("report.csv"), &report.to_csv())?;
    write(&dir.join("per_class_iou.csv"), &report.summary().to_csv(&CLASS_NAMES))
}

/// Writes `bev_gt_*.ppm` and `bev_pred_*.ppm` for the window ending at
/// `end`.
fn export_frame(dir: &Path, model: &Model, data: &SceneData, tag: &str, end: usize, mode: BevMode) -> Result<()> {
    let cfg = &model.cfg;
    let k = cfg.queue_len;
    if end < k || end >= data.frames.len() {
        bail!("frame {end} needs {k} predecessors within {} frames", data.frames.len());
    }
    let fine = cfg.fine_grid()?;
    let window = &data.frames[end - k..=end];
    let logits = predict_logits(model, window, &data.scene.cameras, &mut eval_noise(cfg, end))?;
    write_bev_image(&dir.join(format!("bev_gt_{tag}.ppm")), &data.frames[end].gt_occupancy, &fine, mode)?;
    write_bev_image(&dir.join(format!("bev_pred_{tag}.ppm")), &argmax_labels(&logits), &fine, mode)?;
    Ok(())
}

fn load_run(run: &Path, m: &ArgMatches) -> Result<Model> {
    let echo = fs::read_to_string(run.join("config.echo")).with_context(|| format!("reading {}/config.echo", run.display()))?;
    let cfg = build_config(m, PipelineConfig::parse(&echo)?)?;
    let mut model = Model::new(&cfg)?;
    model.load_params(&load_checkpoint(&run.join("model.ckpt"))?)?;
    Ok(model)
}

fn print_summary(report: &RunReport) {
    println!(
        "miou {:.4}  miou_all {:.4}  probe_iou {:.4} over {} windows  final_loss {:.4}  {:.1}s",
        report.miou,
        report.miou_all,
        report.probe_iou,
        report.probe_windows,
        report.final_loss(),
        report.wall_clock_secs
    );
}

fn cmd_gen(m: &ArgMatches) -> Result<()> {
    let cfg = build_config(m, PipelineConfig::default())?;
    let out = m.get_one::<PathBuf>("out").expect("required");
    create_dir(out)?;
    let data = Dataset::generate(&cfg)?;
    for (split, scenes) in [("train", &data.train), ("eval", &data.eval)] {
        for (i, s) in scenes.iter().enumerate() {
            save_scene(s, &out.join(format!("{split}_{i:04}.scene")))?;
        }
    }
    write(&out.join("config.echo"), &cfg.echo())?;
    println!("wrote {} train and {} eval scenes to {}", data.train.len(), data.eval.len(), out.display());
    Ok(())
}

fn cmd_train(m: &ArgMatches) -> Result<()> {
    let cfg = build_config(m, PipelineConfig::default())?;
    let out = m.get_one::<PathBuf>("out").expect("required");
    create_dir(out)?;
    write(&out.join("config.echo"), &cfg.echo())?;
    let data = dataset(m, &cfg)?;
    let mut hook = |step: usize, loss: f64| {
        if step % 100 == 0 {
            eprintln!("step {step:>6}  loss {loss:.5}");
        }
    };
    let run = train(&cfg, &data, Some(&mut hook))?;
    save_checkpoint(&run.model.store, &out.join("model.ckpt"))?;
    write_report(out, &run.report)?;
    let scene = &data.eval[0];
    export_frame(out, &run.model, scene, "eval0", scene.frames.len() - 1, BevMode::TopDown)?;
    print_summary(&run.report);
    Ok(())
}

fn cmd_eval(m: &ArgMatches) -> Result<()> {
    let run = m.get_one::<PathBuf>("run").expect("required");
    let out = m.get_one::<PathBuf>("out").cloned().unwrap_or_else(|| run.join("eval"));
    let model = load_run(run, m)?;
    let cfg = model.cfg.clone();
    let data = dataset(m, &cfg)?;
    create_dir(&out)?;
    let start = std::time::Instant::now();
    let eval = evaluate(&model, &data.eval)?;
    let report = RunReport::new(&cfg, Vec::new(), 0, &eval, start.elapsed().as_secs_f64());
    write(&out.join("config.echo"), &cfg.echo())?;
    write_report(&out, &report)?;
    print_summary(&report);
    Ok(())
}

fn cmd_ablate(m: &ArgMatches) -> Result<()> {
    let base = build_config(m, PipelineConfig::default())?;
    let out = m.get_one::<PathBuf>("out").expect("required");
    let axis: Axis = m.get_one::<String>("axis").expect("required").parse()?;
    let n = *m.get_one::<u64>("seeds").expect("defaulted");
    let seeds: Vec<u64> = (0..n).map(|i| base.seed + i).collect();
    create_dir(out)?;
    write(&out.join("config.echo"), &base.echo())?;
    let mut hook = |label: &str, seed: u64, r: &RunReport| {
        eprintln!("{label:>8} seed {seed}: miou {:.4} probe_iou {:.4} ({:.1}s)", r.miou, r.probe_iou, r.wall_clock_secs);
        let _ = write(&out.join(format!("report_{label}_seed{seed}.csv")), &r.to_csv());
    };
    let table = run_ablation(&base, axis, &seeds, Some(&mut hook))?;
    write(&out.join("report.csv"), &table.to_csv())?;
    if let Some(reference) = table.reference_csv() {
        write(&out.join("reference.csv"), &reference)?;
    }
    print!("{}", table.to_csv());
    Ok(())
}

fn parse_mode(s: &str) -> Result<BevMode> {
    match s {
        "top" => Ok(BevMode::TopDown),
        _ => match s.strip_prefix("slice:").map(str::parse::<usize>) {
            Some(Ok(k)) => Ok(BevMode::Slice(k)),
            _ => bail!("mode must be `top` or `slice:K`, got {s:?}"),
        },
    }
}

fn cmd_export(m: &ArgMatches) -> Result<()> {
    let run = m.get_one::<PathBuf>("run").expect("required");
    let out = m.get_one::<PathBuf>("out").unwrap_or(run);
    let mode = parse_mode(m.get_one::<String>("mode").expect("defaulted"))?;
    let model = load_run(run, m)?;
    let data = dataset(m, &model.cfg)?;
    let i = *m.get_one::<usize>("scene").expect("defaulted");
    let scene = data.eval.get(i).with_context(|| format!("eval scene {i} of {}", data.eval.len()))?;
    let end = m.get_one::<usize>("frame").copied().unwrap_or(scene.frames.len() - 1);
    create_dir(out)?;
    let tag = match mode {
        BevMode::TopDown => format!("scene{i}_frame{end}"),
        BevMode::Slice(k) => format!("scene{i}_frame{end}_z{k}"),
    };
    export_frame(out, &model, scene, &tag, end, mode)?;
    println!("wrote bev_gt_{tag}.ppm and bev_pred_{tag}.ppm to {}", out.display());
    Ok(())
}

fn main() -> Result<()> {
    let m = cli().get_matches();
    match m.subcommand() {
        Some(("gen", s)) => cmd_gen(s),
        Some(("train", s)) => cmd_train(s),
        Some(("eval", s)) => cmd_eval(s),
        Some(("ablate", s)) => cmd_ablate(s),
        Some(("export", s)) => cmd_export(s),
        _ => unreachable!("subcommand required"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn command_is_well_formed() {
        cli().debug_assert();
    }

    #[test]
    fn flags_override_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.txt");
        fs::write(&path, "dim = 8\nc-bev = 8\nlr = 0.5\n").unwrap();
        let m = cli()
            .try_get_matches_from(["gtad", "gen", "--out", "x", "--config", path.to_str().unwrap(), "--lr", "0.25"])
            .unwrap();
        let cfg = build_config(m.subcommand_matches("gen").unwrap(), PipelineConfig::default()).unwrap();
        assert_eq!((cfg.dim, cfg.lr), (8, 0.25));
        assert_eq!(cfg.diff(&PipelineConfig::default()), ["dim", "c-bev", "lr"]);
    }

    #[test]
    fn seed_is_mandatory_for_training_commands() {
        assert!(cli().try_get_matches_from(["gtad", "train", "--out", "x"]).is_err());
        assert!(cli().try_get_matches_from(["gtad", "ablate", "steps", "--out", "x"]).is_err());
        assert!(cli().try_get_matches_from(["gtad", "train", "--out", "x", "--seed", "3"]).is_ok());
        assert!(cli().try_get_matches_from(["gtad", "gen", "--out", "x"]).is_ok());
    }

    #[test]
    fn bev_modes_parse() {
        assert_eq!(parse_mode("top").unwrap(), BevMode::TopDown);
        assert_eq!(parse_mode("slice:2").unwrap(), BevMode::Slice(2));
        assert!(parse_mode("slice:x").is_err());
        assert!(parse_mode("side").is_err());
    }
}
