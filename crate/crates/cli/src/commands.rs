use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use mmcaps::data::{generate_sample, Shape};
use mmcaps::decoder::export_pgm_frames;
use mmcaps::gradcheck;
use mmcaps::sentence::tokenize_and_pad;
use mmcaps::train::{evaluate, model_path, Dataset, Evaluation, Trainer};
use mmcaps::video::load_raw_video;
use mmcaps::{Conditioning, Error, EvalMode, Result, RunConfig};

use crate::{Command, Common};

pub enum Outcome {
    Success,
    Failed(String),
}

pub fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Dimension(_) => "dimension",
        Error::Contract(_) => "contract",
        Error::Numeric(_) => "numeric",
        Error::Config(_) => "config",
        Error::Format(_) => "format",
        Error::Io(_) => "io",
    }
}

pub const CONFIG_FILE: &str = "config.txt";
pub const CHECKPOINT_DIR: &str = "checkpoint";

pub fn dispatch(cmd: Command) -> Result<Outcome> {
    match cmd {
        Command::GenData { common } => gen_data(&common),
        Command::Train { common, conditioning, checkpoint } => train(&common, conditioning, checkpoint.as_deref()),
        Command::Eval { common, checkpoint, split, mode } => eval(&common, &checkpoint, &split, mode),
        Command::Infer { common, checkpoint, query, video, sample } => {
            infer(&common, &checkpoint, query, video.as_deref(), sample)
        }
        Command::Gradcheck { common, scope, list } => run_gradcheck(&common, &scope, list),
        Command::Ablate { common, seeds, conditioning } => ablate(&common, &seeds, &conditioning),
    }
}

fn prepare(common: &Common) -> Result<()> {
    if common.threads == 0 {
        return Err(Error::Config("--threads must be at least 1".into()));
    }
    fs::create_dir_all(&common.out)?;
    Ok(())
}

/// Config file (or defaults) with the command-line seed applied.
fn resolve_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.set("seed", &s.to_string())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn checkpoint_config(dir: &Path, seed: Option<u64>) -> Result<RunConfig> {
    let p = dir.join(CONFIG_FILE);
    if !p.exists() {
        return Err(Error::Contract(format!("{} has no {CONFIG_FILE}; not a checkpoint directory", dir.display())));
    }
    resolve_config(Some(&p), seed)
}

fn split<'a>(sets: &'a [Dataset; 3], name: &str) -> Result<&'a Dataset> {
    match name {
        "train" => Ok(&sets[0]),
        "val" => Ok(&sets[1]),
        "test" => Ok(&sets[2]),
        _ => Err(Error::Config(format!("unknown split {name:?}; expected train, val or test"))),
    }
}

fn gen_data(common: &Common) -> Result<Outcome> {
    prepare(common)?;
    let cfg = resolve_config(common.config.as_deref(), common.seed)?;
    let sets = cfg.datasets()?;
    let dir = common.out.join("manifests");
    fs::create_dir_all(&dir)?;
    for (name, d) in ["train", "val", "test"].iter().zip(&sets) {
        fs::write(dir.join(format!("{name}.tsv")), d.manifest.to_text())?;
        println!("{name}\t{}\t{}", d.len(), dir.join(format!("{name}.tsv")).display());
    }
    fs::write(common.out.join("vocab.txt"), sets[0].vocab.to_text())?;
    fs::write(common.out.join(CONFIG_FILE), cfg.to_text())?;
    Ok(Outcome::Success)
}

/// Writes to a log file and echoes to stdout.
struct Tee<W: Write>(W);

impl<W: Write> Write for Tee<W> {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.0.write_all(buf)?;
        std::io::stdout().write_all(buf)?;
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        self.0.flush()?;
        std::io::stdout().flush()
    }
}

/// Trains under `out` and returns the trainer and wall time.
pub fn train_into(cfg: &RunConfig, out: &Path, resume: Option<&Path>) -> Result<(Trainer, f64)> {
    fs::create_dir_all(out)?;
    let [train, val, _] = cfg.datasets()?;
    let mut trainer = match resume {
        Some(dir) => Trainer::resume(cfg.build_model()?, cfg.trainer()?.cfg, dir)?,
        None => cfg.trainer()?,
    };
    let mut log = BufWriter::new(File::create(out.join("train.log"))?);
    let mut val_log = Tee(BufWriter::new(File::create(out.join("val.log"))?));
    let start = Instant::now();
    trainer.run(&train, &val, &mut log, &mut val_log, Some(out))?;
    let secs = start.elapsed().as_secs_f64();
    let ck = out.join(CHECKPOINT_DIR);
    trainer.save(&ck)?;
    fs::write(ck.join(CONFIG_FILE), cfg.to_text())?;
    fs::write(out.join(CONFIG_FILE), cfg.to_text())?;
    fs::write(
        out.join("summary.txt"),
        format!("steps={}\nlambda={}\nelapsed_seconds={secs:.1}\nparameters={}\n", trainer.step, trainer.lambda, trainer.model.store.num_values()),
    )?;
    Ok((trainer, secs))
}

fn train(common: &Common, conditioning: Option<Conditioning>, resume: Option<&Path>) -> Result<Outcome> {
    prepare(common)?;
    let mut cfg = match (common.config.as_deref(), resume) {
        (None, Some(dir)) => checkpoint_config(dir, common.seed)?,
        (path, _) => resolve_config(path, common.seed)?,
    };
    if let Some(c) = conditioning {
        cfg.model.conditioning = c;
    }
    let (t, secs) = train_into(&cfg, &common.out, resume)?;
    println!("trained\tsteps={}\tseconds={secs:.1}\tcheckpoint={}", t.step, common.out.join(CHECKPOINT_DIR).display());
    Ok(Outcome::Success)
}

fn load_trained(dir: &Path, cfg: &RunConfig) -> Result<mmcaps::Model<f32>> {
    let mut model = cfg.build_model()?;
    model.store.load(model_path(dir))?;
    Ok(model)
}

fn report_text(e: &Evaluation) -> String {
    format!("{}accuracy={:.6}\nflagged={}\n", e.report.key_values(), e.accuracy, e.flagged)
}

fn eval(common: &Common, checkpoint: &Path, split_name: &str, mode: EvalMode) -> Result<Outcome> {
    prepare(common)?;
    let cfg = checkpoint_config(checkpoint, common.seed)?;
    let model = load_trained(checkpoint, &cfg)?;
    let sets = cfg.datasets()?;
    let e = evaluate(&model, split(&sets, split_name)?, mode)?;
    let path = common.out.join(format!("eval_{split_name}_{mode}.txt"));
    fs::write(&path, report_text(&e))?;
    print!("{}", e.report.table());
    println!("accuracy {:.1}  flagged {}", 100.0 * e.accuracy, e.flagged);
    println!("report\t{}", path.display());
    Ok(Outcome::Success)
}

fn class_name(c: Option<usize>) -> &'static str {
    c.map_or("background", |i| Shape::ALL[i].as_str())
}

fn infer(
    common: &Common,
    checkpoint: &Path,
    query: Option<String>,
    video: Option<&Path>,
    sample: Option<u64>,
) -> Result<Outcome> {
    prepare(common)?;
    let cfg = checkpoint_config(checkpoint, common.seed)?;
    let model = load_trained(checkpoint, &cfg)?;
    let (video, query) = match (video, sample) {
        (Some(p), _) => {
            let q = query.ok_or_else(|| Error::Config("--query is required with --video".into()))?;
            (load_raw_video(p)?, q)
        }
        (None, Some(seed)) => {
            let s = generate_sample(&cfg.scene, seed)?;
            (s.video, query.unwrap_or(s.query))
        }
        (None, None) => return Err(Error::Config("give --video or --sample".into())),
    };
    let vocab = mmcaps::data::vocabulary();
    let tokens = tokenize_and_pad(&query, &vocab);
    let p = model.predict(&video, &tokens)?;
    let (t, s) = (cfg.scene.frames, cfg.scene.size);
    let paths = export_pgm_frames(&common.out, "mask", &p.mask, t, s, s)?;
    let scores: Vec<String> = p.scores.iter().map(|v| format!("{v:.6}")).collect();
    let text = format!(
        "query={query}\nclass={}\nscores={}\nforeground_pixels={}\nmasks={}\n",
        class_name(p.class),
        scores.join(","),
        p.mask.iter().filter(|&&m| m).count(),
        paths.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(",")
    );
    fs::write(common.out.join("prediction.txt"), &text)?;
    print!("{text}");
    Ok(Outcome::Success)
}

fn run_gradcheck(common: &Common, scope: &str, list: bool) -> Result<Outcome> {
    if list {
        for (name, _) in gradcheck::catalogue() {
            println!("{name}");
        }
        return Ok(Outcome::Success);
    }
    prepare(common)?;
    let seed = common.seed.unwrap_or(0);
    let reports = gradcheck::run(scope, seed)?;
    let mut table = format!("{:<28}{:>14}{:>12}{:>10}  result\n", "check", "max_rel_err", "tolerance", "entries");
    let mut failed = Vec::new();
    for r in &reports {
        let ok = r.passed();
        if !ok {
            failed.push(r.name.clone());
        }
        table.push_str(&format!(
            "{:<28}{:>14.3e}{:>12.0e}{:>10}  {}\n",
            r.name,
            r.max_rel_err,
            r.tolerance,
            r.checked,
            if ok { "PASS" } else { "FAIL" }
        ));
    }
    print!("{table}");
    fs::write(common.out.join("gradcheck.txt"), &table)?;
    if failed.is_empty() {
        Ok(Outcome::Success)
    } else {
        Ok(Outcome::Failed(format!("gradient checks failed: {}", failed.join(","))))
    }
}

fn ablate(common: &Common, seeds: &[u64], methods: &[Conditioning]) -> Result<Outcome> {
    prepare(common)?;
    let base = resolve_config(common.config.as_deref(), common.seed)?;
    let seeds = if seeds.is_empty() { vec![base.seed] } else { seeds.to_vec() };
    let methods = if methods.is_empty() { Conditioning::ALL.to_vec() } else { methods.to_vec() };
    let mut rows = Vec::new();
    let mut table = String::from("method\tseed\tmean_iou\toverall_iou\tmAP\taccuracy\tseconds\n");
    for &seed in &seeds {
        for &method in &methods {
            let mut cfg = base.clone();
            cfg.set("seed", &seed.to_string())?;
            cfg.model.conditioning = method;
            let dir = run_dir(&common.out, method, seed);
            let (t, seconds) = train_into(&cfg, &dir, None)?;
            let [_, _, test] = cfg.datasets()?;
            let eval = evaluate(&t.model, &test, EvalMode::Frame)?;
            fs::write(dir.join("eval_test_frame.txt"), report_text(&eval))?;
            let line = format!(
                "{method}\t{seed}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{seconds:.1}\n",
                eval.report.mean, eval.report.overall, eval.report.map, eval.accuracy
            );
            print!("{line}");
            table.push_str(&line);
            rows.push((method, eval.report.mean));
        }
    }
    fs::write(common.out.join("ablation.tsv"), &table)?;
    let mut summary = String::from("method\tmean_of_seeds_mean_iou\n");
    for m in &methods {
        let v: Vec<f64> = rows.iter().filter(|r| r.0 == *m).map(|r| r.1).collect();
        summary.push_str(&format!("{m}\t{:.6}\n", v.iter().sum::<f64>() / v.len() as f64));
    }
    fs::write(common.out.join("ablation_summary.tsv"), &summary)?;
    print!("{summary}");
    Ok(Outcome::Success)
}

pub fn run_dir(out: &Path, method: Conditioning, seed: u64) -> PathBuf {
    out.join(method.as_str()).join(format!("seed{seed}"))
}
