use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use mklab::analysis::{self, AttentionRecord};
use mklab::gradcheck::{check_parameters, ParamCheckOptions};
use mklab::train::{self, evaluate, Precision, TrainOptions};
use mklab::{checkpoint, Error, Graph, KeyVariantSpec, Result, Rng, Scalar, Tensor, VitModel};
use serde_json::json;

use crate::config::RunConfig;
use crate::Common;

pub enum Outcome {
    Ok,
    CheckFailed,
}

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Diverged(_) | Error::Numeric(_) => 3,
        _ => 2,
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.output_dir = Some(out.clone());
    }
    Ok(cfg)
}

fn output_dir(cfg: &RunConfig) -> Result<Option<PathBuf>> {
    let Some(dir) = &cfg.output_dir else {
        return Ok(None);
    };
    fs::create_dir_all(dir)
        .map_err(|e| Error::Config(format!("cannot create output dir {}: {e}", dir.display())))?;
    Ok(Some(dir.clone()))
}

fn require_output_dir(cfg: &RunConfig) -> Result<PathBuf> {
    output_dir(cfg)?.ok_or_else(|| Error::Config("set `output_dir` or pass --out".into()))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)
        .map_err(|e| Error::Config(format!("cannot write {}: {e}", path.display())))
}

/// `params_M=52,flops_G=11.3` → pairs.
fn parse_expect(spec: &str) -> Result<Vec<(String, String)>> {
    spec.split(',')
        .map(|kv| {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--expect entry `{kv}` is not key=value")))?;
            let (k, v) = (k.trim(), v.trim());
            if !matches!(k, "params_M" | "flops_G") {
                return Err(Error::Config(format!(
                    "--expect key `{k}` is not params_M or flops_G"
                )));
            }
            v.parse::<f64>()
                .map_err(|_| Error::Config(format!("--expect value `{v}` is not a number")))?;
            Ok((k.to_string(), v.to_string()))
        })
        .collect()
}

/// Rounds `actual` to as many decimals as `expected` is written with.
fn matches_rounded(actual: f64, expected: &str) -> (bool, String) {
    let decimals = expected.split_once('.').map_or(0, |(_, f)| f.len());
    let shown = format!("{actual:.decimals$}");
    let want: f64 = expected.parse().expect("validated");
    (
        shown.parse::<f64>().expect("formatted number") == want,
        shown,
    )
}

pub fn count(common: &Common, expect: Option<&str>) -> Result<Outcome> {
    let cfg = load_config(common)?;
    let expectations = expect.map(parse_expect).transpose()?;
    let report = analysis::count_params(&cfg.model_config()?)?;
    println!("{report}");
    if let Some(dir) = output_dir(&cfg)? {
        fs::write(dir.join("cost.json"), report.to_json() + "\n")?;
    }
    let mut ok = true;
    for (key, want) in expectations.unwrap_or_default() {
        let actual = if key == "params_M" {
            report.params_millions()
        } else {
            report.flops_giga()
        };
        let (hit, shown) = matches_rounded(actual, &want);
        if !hit {
            ok = false;
            eprintln!("expect {key}: wanted {want}, got {shown} ({actual:.4})");
        }
    }
    Ok(if ok {
        Outcome::Ok
    } else {
        Outcome::CheckFailed
    })
}

pub fn train(common: &Common) -> Result<Outcome> {
    let cfg = load_config(common)?;
    let model_cfg = cfg.model_config()?;
    let data = cfg.dataset(&model_cfg)?;
    let dir = require_output_dir(&cfg)?;
    let started = Instant::now();
    let (history, params) = match cfg.train.precision {
        Precision::F32 => run_training::<f32>(&cfg, &model_cfg, &data, &dir)?,
        Precision::F64 => run_training::<f64>(&cfg, &model_cfg, &data, &dir)?,
    };
    let last = history.epochs.last().expect("at least one epoch");
    let summary = json!({
        "variant": model_cfg.variant,
        "seed": cfg.train.seed,
        "params": params,
        "total_steps": history.total_steps,
        "best_top1": history.best_top1,
        "best_epoch": history.best_epoch,
        "final_top1": last.top1,
        "final_top5": last.top5,
        "final_loss": last.loss,
        "wall_time_s": started.elapsed().as_secs_f64(),
    });
    write_json(&dir.join("summary.json"), &summary)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(Outcome::Ok)
}

fn run_training<T: Scalar>(
    cfg: &RunConfig,
    model_cfg: &mklab::ModelConfig,
    data: &train::LabeledDataset,
    dir: &Path,
) -> Result<(train::History, usize)> {
    let mut model = VitModel::<T>::init(model_cfg, cfg.train.seed)?;
    let opts = TrainOptions {
        out_dir: Some(dir.to_path_buf()),
        eval: None,
    };
    let history = train::train(&mut model, data, &cfg.train, &opts)?;
    Ok((history, model.param_count()))
}

fn checkpoint_path(cfg: &RunConfig, explicit: Option<PathBuf>) -> Result<PathBuf> {
    explicit
        .or_else(|| {
            cfg.output_dir
                .as_ref()
                .map(|d| d.join(train::BEST_CHECKPOINT))
        })
        .ok_or_else(|| Error::Config("pass --checkpoint or set `output_dir`".into()))
}

fn load_checkpoint<T: Scalar>(path: &Path) -> Result<VitModel<T>> {
    checkpoint::load(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

pub fn eval(common: &Common, ckpt: Option<PathBuf>) -> Result<Outcome> {
    let cfg = load_config(common)?;
    let model = load_checkpoint::<f32>(&checkpoint_path(&cfg, ckpt)?)?;
    let data = cfg.dataset(model.config())?;
    let m = evaluate(&model, &data, cfg.train.batch_size)?;
    let report = json!({ "samples": data.len(), "top1": m.top1, "top5": m.top5 });
    if let Some(out) = &common.out {
        fs::create_dir_all(out)?;
        write_json(&out.join("eval.json"), &report)?;
    }
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(Outcome::Ok)
}

pub fn gradcheck(common: &Common, corrupt: bool) -> Result<Outcome> {
    let cfg = load_config(common)?;
    let base = cfg.model_config()?;
    let gc = &cfg.gradcheck;
    let mut rng = Rng::seed(cfg.train.seed);
    let images: Tensor<f64> = rng.normal_tensor(
        &[gc.samples, base.channels, base.image_size, base.image_size],
        1.0,
    );
    let labels: Vec<usize> = (0..gc.samples).map(|i| i % base.num_classes).collect();
    let opts = ParamCheckOptions {
        step: gc.step,
        tol: gc.tol,
        corrupt_first: corrupt,
        max_coords: gc.max_coords,
    };
    let mut rows = Vec::new();
    let mut failing = Vec::new();
    println!(
        "{:<10} {:<36} {:>12} {:>8}  status",
        "variant", "parameter", "max_rel_err", "checked"
    );
    for &kind in &gc.variants {
        let mut model_cfg = base.clone();
        model_cfg.variant = KeyVariantSpec::standard(kind, gc.charts)?;
        let mut model = VitModel::<f64>::init(&model_cfg, cfg.train.seed)?;
        let layout = model.layout.clone();
        let reports = check_parameters(
            &mut model.store,
            |store| {
                let mut g = Graph::new();
                let out = layout.forward(&mut g, store, &images)?;
                let loss = g.cross_entropy(out.logits, &labels)?;
                Ok((g, loss))
            },
            &opts,
        )?;
        for (name, r) in reports {
            let status = if r.pass { "ok" } else { "FAIL" };
            println!(
                "{:<10} {:<36} {:>12.3e} {:>8}  {status}",
                kind.name(),
                name,
                r.max_rel_err,
                r.checked
            );
            if !r.pass {
                failing.push(format!("{}:{name}", kind.name()));
            }
            rows.push(json!({
                "variant": kind.name(),
                "parameter": name,
                "max_rel_err": r.max_rel_err,
                "checked": r.checked,
                "pass": r.pass,
            }));
        }
    }
    if let Some(dir) = output_dir(&cfg)? {
        write_json(&dir.join("gradcheck.json"), &rows)?;
    }
    if failing.is_empty() {
        println!("all {} parameters pass at tol {:e}", rows.len(), gc.tol);
        Ok(Outcome::Ok)
    } else {
        eprintln!("gradient check failed for: {}", failing.join(", "));
        Ok(Outcome::CheckFailed)
    }
}

pub struct AttnmapArgs {
    pub checkpoint: Option<PathBuf>,
    pub index: Option<usize>,
    pub image: Option<PathBuf>,
    pub heads: Option<Vec<usize>>,
    pub layers: Option<String>,
    pub uniform_attention: bool,
}

fn parse_layers(spec: Option<&str>, depth: usize) -> Result<(usize, usize)> {
    let bad = || {
        Error::Config(format!(
            "--layers `{}` is not a range within 0..{depth}",
            spec.unwrap_or("")
        ))
    };
    let (a, b) = match spec {
        None => (0, depth),
        Some(s) => match s.split_once("..") {
            Some((a, b)) => (
                a.trim().parse().map_err(|_| bad())?,
                b.trim().parse().map_err(|_| bad())?,
            ),
            None => {
                let l: usize = s.trim().parse().map_err(|_| bad())?;
                (l, l + 1)
            }
        },
    };
    if a >= b || b > depth {
        return Err(bad());
    }
    Ok((a, b))
}

/// Reads a binary P5 PGM into `[1, 1, rows, cols]` scaled to `[0, 1]`.
fn read_pgm(path: &Path) -> Result<Tensor<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let bad = || Error::Config(format!("{} is not an 8-bit P5 PGM", path.display()));
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if bytes.get(pos) == Some(&b'#') {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad());
        }
        fields.push(
            std::str::from_utf8(&bytes[start..pos])
                .map_err(|_| bad())?
                .to_string(),
        );
    }
    let nums: Vec<usize> = fields[1..]
        .iter()
        .map(|f| f.parse().map_err(|_| bad()))
        .collect::<Result<_>>()?;
    let (cols, rows, maxval) = (nums[0], nums[1], nums[2]);
    let pixels = bytes.get(pos + 1..).ok_or_else(bad)?;
    if fields[0] != "P5" || maxval == 0 || maxval > 255 || pixels.len() != rows * cols {
        return Err(bad());
    }
    let data = pixels.iter().map(|&p| p as f64 / maxval as f64).collect();
    Tensor::new(&[1, 1, rows, cols], data)
}

pub fn attnmap(common: &Common, args: &AttnmapArgs) -> Result<Outcome> {
    let cfg = load_config(common)?;
    let mut model = load_checkpoint::<f64>(&checkpoint_path(&cfg, args.checkpoint.clone())?)?;
    if args.uniform_attention {
        model.zero_queries();
    }
    let mc = model.config().clone();
    let heads = args
        .heads
        .clone()
        .unwrap_or_else(|| (0..mc.heads).collect());
    if let Some(&h) = heads.iter().find(|&&h| h >= mc.heads) {
        return Err(Error::Config(format!(
            "head {h} out of range; the model has {} heads",
            mc.heads
        )));
    }
    let (first, end) = parse_layers(args.layers.as_deref(), mc.depth)?;
    let image = match &args.image {
        Some(path) => {
            let img = read_pgm(path)?;
            if img.shape()[1..] != [mc.channels, mc.image_size, mc.image_size] {
                return Err(Error::Config(format!(
                    "{} is {:?} but the model expects {}x{}x{}",
                    path.display(),
                    &img.shape()[1..],
                    mc.channels,
                    mc.image_size,
                    mc.image_size
                )));
            }
            img
        }
        None => {
            let data = cfg.dataset(&mc)?;
            let i = args.index.unwrap_or(0);
            if i >= data.len() {
                return Err(Error::Config(format!(
                    "--index {i} but the dataset has {} samples",
                    data.len()
                )));
            }
            data.batch::<f64>(&[i]).0
        }
    };
    let mut g = Graph::new();
    let out = model.forward(&mut g, &image)?;
    let full = AttentionRecord::from_forward(&g, &out.attentions, 0)?;
    let record = AttentionRecord {
        depth: end - first,
        layers: full.layers[first..end].to_vec(),
    };
    let dir = require_output_dir(&cfg)?;
    let upscale = cfg.attnmap.upscale;
    for &h in &heads {
        let raw = analysis::class_token_map(&record.head_map(record.depth - 1, h)?)?;
        let rollout = analysis::attention_rollout(&record, h)?;
        let raw_path = dir.join(format!("attn_raw_h{h}.pgm"));
        let roll_path = dir.join(format!("attn_rollout_h{h}.pgm"));
        analysis::export_heatmap(&raw, &raw_path, upscale)?;
        analysis::export_heatmap(&rollout.heatmap, &roll_path, upscale)?;
        println!("{}\n{}", raw_path.display(), roll_path.display());
    }
    Ok(Outcome::Ok)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expect_rounding() {
        assert!(matches_rounded(52.47, "52").0);
        assert!(!matches_rounded(52.51, "52").0);
        assert!(matches_rounded(11.26, "11.3").0);
        assert!(!matches_rounded(8.47, "8.6").0);
        assert!(parse_expect("params_M=52,flops_G=11.3").is_ok());
        assert!(parse_expect("params=52").is_err());
        assert!(parse_expect("params_M=abc").is_err());
    }

    #[test]
    fn layer_ranges() {
        assert_eq!(parse_layers(None, 3).unwrap(), (0, 3));
        assert_eq!(parse_layers(Some("1..3"), 3).unwrap(), (1, 3));
        assert_eq!(parse_layers(Some("2"), 3).unwrap(), (2, 3));
        assert!(parse_layers(Some("2..2"), 3).is_err());
        assert!(parse_layers(Some("0..4"), 3).is_err());
    }
}
