use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::process::ExitCode;

use sha2::{Digest, Sha256};

use hatnet::analysis::{count_flops, count_params};
use hatnet::data::random_images;
use hatnet::gradcheck::{gradcheck as run_gradcheck, GradcheckOptions};
use hatnet::network::{
    load_weights, save_weights, stage_name, AttentionKind, GridSchedule, Model, ModelConfig,
    Variant,
};
use hatnet::train::{train, TrainConfig, METRICS_HEADER};
use hatnet::{Error, Result, Tensor};

use crate::{ModelArgs, TrainArgs};

fn resolve(m: &ModelArgs) -> Result<(String, ModelConfig)> {
    match (&m.variant, &m.config) {
        (Some(v), None) => {
            let v: Variant = v.parse()?;
            let grids = m
                .grids
                .map(GridSchedule::from)
                .unwrap_or(GridSchedule::Classification);
            Ok((format!("HAT-Net-{v}"), ModelConfig::variant(v, grids)))
        }
        (None, Some(path)) => {
            let mut cfg = ModelConfig::from_json_file(path)?;
            if let Some(g) = m.grids {
                cfg = cfg.with_schedule(g.into())?;
            }
            Ok((format!("custom ({})", path.display()), cfg))
        }
        _ => Err(Error::Config(
            "pass exactly one of --variant or --config".into(),
        )),
    }
}

fn ratio(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

pub fn describe(m: &ModelArgs) -> Result<ExitCode> {
    let (name, cfg) = resolve(m)?;
    let sizes = cfg.stage_sizes(m.input_size, m.input_size)?;
    let params = count_params(&cfg)?;
    println!(
        "{name}, input {0}x{0}, head_dim {1}",
        m.input_size, cfg.head_dim
    );
    println!(
        "stem: 3x3 convs, channels {}, strides {}",
        ratio(&[cfg.stem[0].channels, cfg.stem[1].channels]),
        ratio(&[cfg.stem[0].stride, cfg.stem[1].stride])
    );
    println!(
        "{:<8} {:>9} {:>8} {:>6} {:>6} {:>9} {:>3} {:>3} {:>3} {:>5}",
        "stage", "size", "channels", "blocks", "heads", "attention", "K", "E", "G1", "G2"
    );
    for (i, (s, (h, w))) in cfg.stages.iter().zip(sizes).enumerate() {
        let (kind, g1, g2) = match s.attention {
            AttentionKind::Hierarchical => ("H-MHSA", s.g1.to_string(), s.g2.to_string()),
            AttentionKind::Dense => ("MHSA", "-".into(), "-".into()),
        };
        println!(
            "{:<8} {:>9} {:>8} {:>6} {:>6} {:>9} {:>3} {:>3} {:>3} {:>5}",
            stage_name(i),
            format!("{h}x{w}"),
            s.channels,
            s.blocks,
            cfg.num_heads(i),
            kind,
            s.dw_kernel,
            s.expansion,
            g1,
            g2
        );
    }
    println!("classes: {}, parameters: {params}", cfg.num_classes);
    println!("params: {:.1}M", params as f64 / 1e6);
    Ok(ExitCode::SUCCESS)
}

pub fn flops(m: &ModelArgs, batch: usize) -> Result<ExitCode> {
    let (name, cfg) = resolve(m)?;
    if batch == 0 {
        return Err(Error::Config("--batch must be positive".into()));
    }
    let report = count_flops(&cfg, m.input_size, m.input_size, batch)?;
    print!("{}", report.to_csv());
    println!(
        "{name} @ {0}x{0}, batch {batch}: {1:.3} GFLOPs, {2:.3} M params",
        m.input_size,
        report.total_flops() as f64 / 1e9,
        report.total_params() as f64 / 1e6
    );
    Ok(ExitCode::SUCCESS)
}

/// SHA-256 over the shape (u64 LE) and values (f32 LE), hex encoded.
pub fn tensor_hash(t: &Tensor<f32>) -> String {
    let mut h = Sha256::new();
    for &d in t.shape() {
        h.update((d as u64).to_le_bytes());
    }
    for v in t.data() {
        h.update(v.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn forward(m: &ModelArgs, weights: Option<&Path>, batch: usize) -> Result<ExitCode> {
    let (_, cfg) = resolve(m)?;
    if batch == 0 {
        return Err(Error::Config("--batch must be positive".into()));
    }
    let model: Model<f32> = match weights {
        Some(p) => load_weights(cfg.clone(), p)?,
        None => Model::new(cfg.clone(), m.seed)?,
    };
    let images = random_images(
        m.seed,
        &[batch, m.input_size, m.input_size, cfg.in_channels],
    );
    let (logits, stages) = model.forward_with_stages(&images)?;
    let d = logits.data();
    let min = d.iter().copied().fold(f32::INFINITY, f32::min);
    let max = d.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mean = d.iter().map(|&v| f64::from(v)).sum::<f64>() / d.len() as f64;
    for (i, s) in stages.iter().enumerate() {
        println!("{}: {:?}", stage_name(i), s);
    }
    println!("logits: {:?}", logits.shape());
    println!("min: {min:.6}");
    println!("max: {max:.6}");
    println!("mean: {mean:.6}");
    println!("hash: {}", tensor_hash(&logits));
    Ok(ExitCode::SUCCESS)
}

pub fn gradcheck(
    config: Option<&Path>,
    input_size: usize,
    seed: u64,
    eps: f64,
    tol: f64,
    coords: usize,
) -> Result<ExitCode> {
    let cfg = match config {
        Some(p) => ModelConfig::from_json_file(p)?,
        None => ModelConfig::gradcheck_toy(),
    };
    let params = count_params(&cfg)?;
    if params > 100_000 {
        return Err(Error::Config(format!(
            "gradient check is limited to 100k parameters, this network has {params}"
        )));
    }
    let opts = GradcheckOptions {
        eps,
        tol,
        coords,
        seed,
        input_size,
        ..GradcheckOptions::default()
    };
    let report = run_gradcheck(&cfg, &opts, None)?;
    for t in &report.tensors {
        println!(
            "{:<40} {:>3} coords  max rel err {:.3e}",
            t.name, t.coords, t.max_rel_error
        );
    }
    println!(
        "{} parameters, {} coordinates in {} tensors, max relative error {:.3e} ({}), tol {:.1e}: {}",
        report.num_params,
        report.coords(),
        report.tensors.len(),
        report.max_rel_error,
        report.worst,
        tol,
        if report.passed() { "PASS" } else { "FAIL" }
    );
    Ok(if report.passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
}

pub fn train_toy(t: &TrainArgs) -> Result<ExitCode> {
    let cfg = TrainConfig {
        steps: t.steps,
        batch: t.batch,
        lr: t.lr,
        weight_decay: t.weight_decay,
        seed: t.seed,
        num_classes: t.classes,
        ..TrainConfig::default()
    };
    cfg.validate()?;
    let model_cfg = ModelConfig::toy(t.classes);
    let io = |e: std::io::Error| Error::Io {
        path: t.metrics.clone(),
        source: e,
    };
    // Fail on unwritable outputs before spending time on training.
    drop(create(&t.out)?);
    let mut csv = create(&t.metrics)?;
    writeln!(csv, "{METRICS_HEADER}").map_err(io)?;
    let out = train(&model_cfg, &cfg, |row| {
        writeln!(csv, "{}", row.csv_line()).map_err(io)?;
        csv.flush().map_err(io)?;
        println!("{}", row.csv_line());
        Ok(())
    })?;
    csv.flush().map_err(io)?;
    save_weights(&out.model, &t.out)?;
    match out.rows.last() {
        Some(r) => println!(
            "trained {} steps: loss {:.4}, train accuracy {:.4}; weights in {}",
            t.steps,
            r.loss,
            r.train_acc,
            t.out.display()
        ),
        None => println!("no logged steps; initial weights in {}", t.out.display()),
    }
    Ok(ExitCode::SUCCESS)
}
