use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anonflow::checkpoint::Checkpoint;
use anonflow::config::{Ablation, Config};
use anonflow::evalmetrics::{
    eval_ablation, eval_deid, eval_diversity, eval_key_sensitivity, eval_recovery, eval_secrets, svg_bar_chart,
    svg_line_chart, write_csv, write_json,
};
use anonflow::keygen::{Secret, SECRET_ENV};
use anonflow::numerics::Rng;
use anonflow::pipeline::{blend, PipelineModel};
use anonflow::synthdata::{gen_dataset, Split, SyntheticDataset};
use anonflow::training::{gradcheck_pipeline, run_phase, LogRecord, GRADCHECK_TOL};
use anonflow::Error;
use clap::{Args, Parser, Subcommand};
use ndarray::Array2;

#[derive(Parser)]
#[command(name = "anonflow", version, about = "Key-conditioned reversible identity anonymization on synthetic faces")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a synthetic dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        ids: usize,
        #[arg(long = "per-id", default_value_t = 10)]
        per_id: usize,
        #[arg(long, default_value_t = 2024)]
        seed: u64,
        /// Config whose `data` section sets the image and latent sizes.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run one training phase.
    Train {
        #[arg(long)]
        phase: u8,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        ablate: Option<String>,
    },
    /// Anonymize every image of a dataset file.
    Anonymize(Transform),
    /// Recover every image of an anonymized dataset file.
    Deanonymize(Transform),
    /// Write evaluation reports for one checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Keys per source for the diversity report.
        #[arg(long, default_value_t = 4)]
        keys: usize,
        /// Single-bit flips for the key-sensitivity report.
        #[arg(long, default_value_t = 8)]
        bitflips: usize,
    },
    /// Compare several checkpoints (e.g. ablations) on the same test split.
    Compare {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value_t = 4)]
        keys: usize,
        #[arg(required = true)]
        ckpts: Vec<PathBuf>,
    },
    /// Finite-difference check of every trainable network.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        points: usize,
    },
}

#[derive(Args)]
struct Transform {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Falls back to the IFADIT_SECRET environment variable.
    #[arg(long)]
    secret: Option<String>,
    #[arg(long)]
    out: PathBuf,
    /// JSON array of H rows of W weights in [0, 1]; 1 keeps the generated pixel.
    #[arg(long)]
    mask: Option<PathBuf>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Contract(_) => 1,
        Error::Io(_) | Error::Format(_) | Error::Version { .. } | Error::Dimension(_) => 2,
        Error::Numeric(_) => 3,
    }
}

fn load_config(path: Option<&Path>) -> anonflow::Result<Config> {
    path.map_or_else(|| Ok(Config::default()), Config::load)
}

fn log_line(r: &LogRecord) {
    eprintln!("{r}");
}

fn load_mask(path: &Path, h: usize, w: usize) -> anonflow::Result<Array2<f32>> {
    let rows: Vec<Vec<f32>> =
        serde_json::from_str(&fs::read_to_string(path)?).map_err(|e| Error::Format(format!("mask: {e}")))?;
    if rows.len() != h || rows.iter().any(|r| r.len() != w) {
        return Err(Error::Dimension(format!("mask must be {h}x{w}")));
    }
    if rows.iter().flatten().any(|m| !(0.0..=1.0).contains(m)) {
        return Err(Error::Format("mask weights must lie in [0, 1]".into()));
    }
    Ok(Array2::from_shape_vec((1, h * w), rows.concat()).expect("checked size"))
}

fn check_data(model: &PipelineModel<f32>, data: &SyntheticDataset) -> anonflow::Result<()> {
    if data.dims != model.dims() {
        return Err(Error::Dimension("dataset and checkpoint disagree on data dimensions".into()));
    }
    Ok(())
}

fn transform(t: &Transform, forward: bool) -> anonflow::Result<()> {
    let secret = Secret::from_flag_or_env(t.secret.as_deref())
        .ok_or_else(|| Error::Config(format!("no secret: pass --secret or set {SECRET_ENV}")))??;
    let ck = Checkpoint::load(&t.ckpt)?;
    let mut data = SyntheticDataset::load(&t.data)?;
    check_data(&ck.model, &data)?;
    let x = &data.images;
    let mut y = if forward { ck.model.anonymize(x, &secret)? } else { ck.model.deanonymize(x, &secret)? };
    if let Some(p) = &t.mask {
        let m = load_mask(p, data.dims.height, data.dims.width)?;
        let mask = m.broadcast(y.dim()).expect("one row").to_owned();
        y = blend(&y, x, &mask)?;
    }
    data.images = y;
    data.save(&t.out)
}

fn eval(ckpt: &Path, data: &Path, report: &Path, keys: usize, bitflips: usize) -> anonflow::Result<()> {
    let ck = Checkpoint::load(ckpt)?;
    let data = SyntheticDataset::load(data)?;
    check_data(&ck.model, &data)?;
    if keys < 2 {
        return Err(Error::Config("--keys must be at least 2".into()));
    }
    fs::create_dir_all(report)?;
    let m = &ck.model;
    let samples = data.samples(Split::Test);
    let mut rng = Rng::new(ck.config.training.seed).derive("eval-secrets");
    let secrets = eval_secrets(&mut rng, keys - 1);
    let s = &secrets[0];

    let deid = eval_deid(m, &data, &samples, s)?;
    write_json(&report.join("deid.json"), &deid)?;
    write_csv(&report.join("deid.csv"), &deid.rows)?;
    let cos: Vec<f64> = deid.rows.iter().map(|r| r.cosine).collect();
    fs::write(report.join("deid.svg"), svg_line_chart("identity cosine, anonymized vs original", &cos))?;

    let rec = eval_recovery(m, &data, &samples, s, &s.flip_bit(0))?;
    write_json(&report.join("recovery.json"), &rec)?;
    write_csv(&report.join("recovery.csv"), &rec.matching.rows)?;
    write_csv(&report.join("recovery_wrong_key.csv"), &rec.wrong_key.rows)?;
    write_csv(&report.join("recovery_reconstruction.csv"), &rec.reconstruction.rows)?;
    let bars = vec![
        ("matching".to_string(), rec.matching.mean_id_cosine),
        ("wrong key".to_string(), rec.wrong_key.mean_id_cosine),
        ("reconstruction".to_string(), rec.reconstruction.mean_id_cosine),
    ];
    fs::write(report.join("recovery.svg"), svg_bar_chart("identity cosine after recovery", &bars))?;

    let div = eval_diversity(m, &data, &samples, &secrets)?;
    write_json(&report.join("diversity.json"), &div)?;
    write_csv(&report.join("diversity.csv"), &div.rows)?;
    let ang: Vec<f64> = div.rows.iter().map(|r| r.mean_pair_angle_deg).collect();
    fs::write(report.join("diversity.svg"), svg_line_chart("KFFA-proxy angle per source (deg)", &ang))?;

    let sens = eval_key_sensitivity(m, &data, &samples, s, bitflips, &mut rng)?;
    write_json(&report.join("sensitivity.json"), &sens)?;
    write_csv(&report.join("sensitivity.csv"), &sens.rows)?;
    let bars = vec![
        ("min".to_string(), sens.min_gap),
        ("median".to_string(), sens.median_gap),
        ("mean".to_string(), sens.mean_gap),
        ("max".to_string(), sens.max_gap),
    ];
    fs::write(report.join("sensitivity.svg"), svg_bar_chart("recovery cosine gap, bit-flipped key", &bars))?;

    eprintln!(
        "anon_cos={:.4} rec_cos={:.4} wrong_key_cos={:.4} recon_cos={:.4} kffa_proxy_deg={:.2} mean_gap={:.4}",
        deid.mean_cosine,
        rec.matching.mean_id_cosine,
        rec.wrong_key.mean_id_cosine,
        rec.reconstruction.mean_id_cosine,
        div.kffa_proxy_deg,
        sens.mean_gap
    );
    Ok(())
}

fn compare(data: &Path, report: &Path, keys: usize, ckpts: &[PathBuf]) -> anonflow::Result<()> {
    let data = SyntheticDataset::load(data)?;
    let loaded: Vec<Checkpoint> = ckpts.iter().map(|p| Checkpoint::load(p)).collect::<anonflow::Result<_>>()?;
    for ck in &loaded {
        check_data(&ck.model, &data)?;
    }
    let models: Vec<(String, &PipelineModel<f32>)> =
        loaded.iter().map(|c| (c.config.ablation.label(), &c.model)).collect();
    let seed = loaded[0].config.training.seed;
    let rows = eval_ablation(&models, &data, keys, seed)?;
    fs::create_dir_all(report)?;
    write_json(&report.join("ablation.json"), &rows)?;
    write_csv(&report.join("ablation.csv"), &rows)?;
    let bars = |f: fn(&anonflow::evalmetrics::AblationRow) -> f64| -> Vec<(String, f64)> {
        rows.iter().map(|r| (r.label.clone(), f(r))).collect()
    };
    fs::write(report.join("ablation_recovery.svg"), svg_bar_chart("recovery cosine", &bars(|r| r.recovery_cosine)))?;
    fs::write(report.join("ablation_kffa.svg"), svg_bar_chart("KFFA-proxy (deg)", &bars(|r| r.kffa_proxy_deg)))?;
    fs::write(report.join("ablation_quality.svg"), svg_bar_chart("quality proxy", &bars(|r| r.quality_proxy)))?;
    Ok(())
}

fn run(cli: Cli) -> anonflow::Result<()> {
    match cli.cmd {
        Cmd::GenData { out, ids, per_id, seed, config } => {
            let cfg = load_config(config.as_deref())?;
            if ids < 2 || per_id == 0 {
                return Err(Error::Config("--ids must be >= 2 and --per-id >= 1".into()));
            }
            gen_dataset(ids, per_id, cfg.data, seed)?.save(&out)
        }
        Cmd::Train { phase, config, data, init, out, ablate } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(a) = ablate {
                cfg.ablation = Ablation::parse(&a)?;
            }
            let data = SyntheticDataset::load(&data)?;
            let init = init.map(|p| Checkpoint::load(&p)).transpose()?;
            let ck = run_phase(phase, &data, &cfg, init, &mut log_line)?;
            ck.save(&out)
        }
        Cmd::Anonymize(t) => transform(&t, true),
        Cmd::Deanonymize(t) => transform(&t, false),
        Cmd::Eval { ckpt, data, report, keys, bitflips } => eval(&ckpt, &data, &report, keys, bitflips),
        Cmd::Compare { data, report, keys, ckpts } => compare(&data, &report, keys, &ckpts),
        Cmd::Gradcheck { config, points } => {
            let cfg = load_config(config.as_deref())?;
            let rows = gradcheck_pipeline(&cfg, points, cfg.training.seed)?;
            let mut failed = 0;
            for r in &rows {
                println!(
                    "{:<16} coords={:<3} skipped={:<3} max_rel_error={:.3e} {}",
                    r.network,
                    r.coords_checked,
                    r.coords_skipped,
                    r.max_rel_error,
                    if r.passed() { "ok" } else { "FAIL" }
                );
                failed += usize::from(!r.passed());
            }
            if failed > 0 {
                return Err(Error::Numeric(format!("{failed} networks exceed relative error {GRADCHECK_TOL:e}")));
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
