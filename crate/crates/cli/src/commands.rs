use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Deserialize;
use swarmseg::config::{ExperimentConfig, Overrides};
use swarmseg::eval::{argmax_mask, evaluate, predict_global, predict_local, ModelView, Sampling, TrainedModels};
use swarmseg::rng::{stream, tag};
use swarmseg::selftest::{run_all, SelftestOptions};
use swarmseg::swarm::{audit_messages, run_baseline, RunOptions};
use swarmseg::synthdata::{read_dataset, write_dataset, write_pgm, Federation, SegSample};

use crate::svg::{self, Panel, Series};
use crate::{checkpoint, CliError, Common};

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn resolve(common: &Common) -> Result<ExperimentConfig, CliError> {
    let ov = Overrides {
        seed: common.seed,
        method: common.method,
        rounds: common.rounds,
        out_dir: common.out.clone(),
    };
    ExperimentConfig::resolve(common.config.as_deref(), &ov).map_err(|e| CliError::Validation(e.to_string()))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| runtime(format!("{}: {e}", parent.display())))?;
    }
    fs::write(path, contents).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn data_dir(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir.join("data")
}

/// Reads the dataset and checks it was generated from this configuration.
fn load_data(cfg: &ExperimentConfig) -> Result<Federation, CliError> {
    let dir = data_dir(cfg);
    let manifest = dir.join("manifest.json");
    if !manifest.is_file() {
        return Err(runtime(format!("dataset not found: {} (run gen-data first)", manifest.display())));
    }
    let fed = read_dataset(&dir).map_err(runtime)?;
    let specs: Vec<_> = fed.centers.iter().map(|c| c.spec.clone()).collect();
    if fed.seed != cfg.seed || fed.geom != cfg.geom() || specs != cfg.centers || fed.generic.len() != cfg.n_generic {
        return Err(CliError::Validation(format!(
            "dataset in {} was generated from a different seed, grid or center list",
            dir.display()
        )));
    }
    Ok(fed)
}

pub fn gen_data(common: &Common) -> Result<(), CliError> {
    let cfg = resolve(common)?;
    let fed = cfg.federation().map_err(runtime)?;
    let dir = data_dir(&cfg);
    let manifest = write_dataset(&dir, &fed).map_err(runtime)?;
    write_file(&dir.join("config.toml"), cfg.to_toml())?;
    println!(
        "wrote {} cases ({} centers + {} generic) to {}",
        manifest.cases.len(),
        fed.centers.len(),
        fed.generic.len(),
        dir.display()
    );
    Ok(())
}

pub fn train(common: &Common) -> Result<(), CliError> {
    let cfg = resolve(common)?;
    let fed = load_data(&cfg)?;
    let opts = RunOptions {
        jobs: common.jobs,
        keep_messages: false,
        log_dir: (common.log_messages && cfg.method.aggregates()).then(|| cfg.out_dir.join("messages")),
        track_dice: true,
    };
    let started = Instant::now();
    let run = run_baseline(&cfg.train_config(), &fed, cfg.method, &opts).map_err(runtime)?;
    audit_messages(&run.last_round, &run.centers).map_err(runtime)?;
    checkpoint::save(&cfg.out_dir.join("checkpoints"), &run, &cfg)?;
    write_file(&cfg.out_dir.join("history.csv"), run.history_csv())?;
    write_file(&cfg.out_dir.join("round_dice.csv"), run.round_dice_csv())?;
    write_file(&cfg.out_dir.join("config.toml"), cfg.to_toml())?;
    println!(
        "{}: {} rounds, {} messages, {:.1}s; checkpoints in {}",
        cfg.method,
        cfg.schedule.rounds,
        run.messages_sent,
        started.elapsed().as_secs_f64(),
        cfg.out_dir.join("checkpoints").display()
    );
    Ok(())
}

fn binary_pgm(mask: &[u8]) -> Vec<u8> {
    mask.iter().map(|&v| if v != 0 { 255 } else { 0 }).collect()
}

fn image_pgm(image: &[f64]) -> Vec<u8> {
    let (lo, hi) = image.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let span = (hi - lo).max(1e-12);
    image.iter().map(|&v| ((v - lo) / span * 255.0).round() as u8).collect()
}

fn dump_cases(dir: &Path, view: &ModelView, cases: &[SegSample], sampling: Sampling, seed: u64, stream_id: u64, local: bool) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
    let classes = view.net.classes;
    for s in cases {
        let (h, w) = (s.height, s.width);
        let name = |kind: &str| dir.join(format!("case_{:05}_{kind}.pgm", s.id));
        let image = s.image_tensor();
        let mut rng = stream(&[seed, tag::EVAL, stream_id, s.id]);
        let global = predict_global(view, &image, sampling, &mut rng).map_err(runtime)?;
        write_pgm(&name("image"), h, w, &image_pgm(&s.image)).map_err(runtime)?;
        write_pgm(&name("gt"), h, w, &binary_pgm(&s.label)).map_err(runtime)?;
        write_pgm(&name("global"), h, w, &binary_pgm(&argmax_mask(&global, classes))).map_err(runtime)?;
        if local {
            let mut rng = stream(&[seed, tag::EVAL, stream_id, s.id]);
            let pred = predict_local(view, &image, sampling, &mut rng).map_err(runtime)?;
            write_pgm(&name("local"), h, w, &binary_pgm(&argmax_mask(&pred, classes))).map_err(runtime)?;
        }
    }
    Ok(())
}

fn dump_pgms(dir: &Path, models: &TrainedModels, fed: &Federation, cfg: &ExperimentConfig) -> Result<(), CliError> {
    let view = |i: usize| {
        let c = &models.centers[i];
        ModelView {
            net: &models.net,
            method: models.method,
            global: &c.global,
            personal: (!c.personal.is_empty()).then_some(&c.personal),
        }
    };
    let local = models.method.uses_latent();
    dump_cases(&dir.join("generic"), &view(0), &fed.generic, cfg.sampling, cfg.seed, u64::MAX, false)?;
    for (i, c) in models.centers.iter().enumerate() {
        let Some(data) = fed.centers.iter().find(|d| d.spec.center_id == c.center_id) else {
            continue;
        };
        let dir = dir.join(format!("center_{}", c.center_id));
        dump_cases(&dir, &view(i), &data.test, cfg.sampling, cfg.seed, c.center_id as u64, local)?;
    }
    Ok(())
}

pub fn eval(common: &Common, dump_pgm: bool) -> Result<(), CliError> {
    let cfg = resolve(common)?;
    let fed = load_data(&cfg)?;
    let models = checkpoint::load(&cfg.out_dir.join("checkpoints"), &cfg)?;
    let report = evaluate(&models, &fed, &cfg.eval_config(), &cfg.digest()).map_err(runtime)?;
    let dir = cfg.out_dir.join("eval");
    write_file(&dir.join("report.csv"), report.to_csv())?;
    write_file(&dir.join("report.json"), report.to_json())?;
    write_file(&dir.join("config.toml"), cfg.to_toml())?;
    if dump_pgm {
        dump_pgms(&dir.join("pgm"), &models, &fed, &cfg)?;
    }
    for row in &report.rows {
        let who = row.center.map_or("generic".to_string(), |c| format!("center {c}"));
        println!("{:?} {:<10} dice {:.4} +- {:.4} (n={})", row.task, who, row.dice_mean, row.dice_std, row.n_cases);
    }
    Ok(())
}

#[derive(Debug, Deserialize)]
struct LossRow {
    round: u32,
    center: u32,
    total: f64,
}

#[derive(Debug, Deserialize)]
struct DiceRow {
    round: u32,
    center: u32,
    test_dice: f64,
}

fn read_rows<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, CliError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .collect::<Result<Vec<T>, _>>()
        .map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn per_center(rows: impl Iterator<Item = (u32, u32, f64)>) -> Vec<Series> {
    // center -> round -> (sum, count)
    let mut acc: BTreeMap<u32, BTreeMap<u32, (f64, usize)>> = BTreeMap::new();
    for (center, round, v) in rows {
        let e = acc.entry(center).or_default().entry(round).or_default();
        e.0 += v;
        e.1 += 1;
    }
    acc.into_iter()
        .map(|(c, rounds)| Series {
            label: format!("center {c}"),
            points: rounds.into_iter().map(|(r, (s, n))| (r as f64, s / n as f64)).collect(),
        })
        .collect()
}

pub fn report(common: &Common) -> Result<(), CliError> {
    let cfg = resolve(common)?;
    let losses: Vec<LossRow> = read_rows(&cfg.out_dir.join("history.csv"))?;
    let dice: Vec<DiceRow> = read_rows(&cfg.out_dir.join("round_dice.csv"))?;
    let panels = [
        Panel {
            title: "training loss (mean over local epochs)".into(),
            x_label: "round".into(),
            series: per_center(losses.iter().map(|r| (r.center, r.round, r.total))),
        },
        Panel {
            title: "local test Dice".into(),
            x_label: "round".into(),
            series: per_center(dice.iter().map(|r| (r.center, r.round, r.test_dice))),
        },
    ];
    let path = cfg.out_dir.join("report.svg");
    write_file(&path, svg::render(&panels))?;
    println!("wrote {}", path.display());
    Ok(())
}

pub fn selftest(points: usize, conv_grad_scale: f64) -> Result<(), CliError> {
    if points == 0 {
        return Err(CliError::Validation("--points must be positive".into()));
    }
    let opts = SelftestOptions {
        points,
        conv_grad_scale,
        ..Default::default()
    };
    let started = Instant::now();
    let checks = run_all(&opts);
    for c in &checks {
        println!("{c}");
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    println!(
        "{} checks, {failed} failed, {:.1}s",
        checks.len(),
        started.elapsed().as_secs_f64()
    );
    if failed > 0 {
        return Err(CliError::SelftestFailed(failed));
    }
    Ok(())
}
