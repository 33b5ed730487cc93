//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use mklab::analysis::{attention_rollout, count_flops, count_params, AttentionRecord};
use mklab::attention::{
    context_broadcast, key_forward, mhsa_forward, set_baseline_equivalent, AttentionParams,
};
use mklab::gradcheck::{check_parameters, ParamCheckOptions};
use mklab::train::{synth_dataset, train, TrainConfig, TrainOptions};
use mklab::{
    GammaInit, Graph, KeyKind, KeyVariantSpec, ModelConfig, ParamStore, Rng, Tensor, VitModel,
};

type Outcome = Result<String, String>;
type Preset = fn(KeyVariantSpec) -> ModelConfig;
type Criterion = (&'static str, fn() -> Outcome);

fn spec(kind: KeyKind, h: usize) -> KeyVariantSpec {
    KeyVariantSpec::standard(kind, h).unwrap()
}

fn millions(cfg: &ModelConfig) -> u64 {
    let p = count_params(cfg).unwrap().totals.params as f64 / 1e6;
    p.round() as u64
}

fn expect_params(preset: Preset, rows: &[(KeyVariantSpec, u64)]) -> Vec<String> {
    rows.iter()
        .filter_map(|&(s, want)| {
            let got = millions(&preset(s));
            (got != want).then(|| format!("{s}: {got}M != {want}M"))
        })
        .collect()
}

fn table1_params() -> Outcome {
    let kinds = [
        KeyKind::Baseline,
        KeyKind::SpatialK,
        KeyKind::Kua,
        KeyKind::SimpleK,
        KeyKind::VanillaK,
    ];
    let s = [22, 52, 52, 38, 38];
    let b = [87, 197, 197, 140, 140];
    let rows = |want: [u64; 5]| -> Vec<(KeyVariantSpec, u64)> {
        kinds
            .iter()
            .zip(want)
            .map(|(&k, w)| (spec(k, 8), w))
            .collect()
    };
    let mut bad = expect_params(ModelConfig::vit_s16, &rows(s));
    bad.extend(expect_params(ModelConfig::vit_b16, &rows(b)));
    if bad.is_empty() {
        Ok("ViT-S/16 22/52/52/38/38M, ViT-B/16 87/197/197/140/140M".into())
    } else {
        Err(bad.join("; "))
    }
}

fn table2_params() -> Outcome {
    let bad = expect_params(
        ModelConfig::vit_b16,
        &[
            (KeyVariantSpec::vanillak(4, false), 110),
            (KeyVariantSpec::vanillak(8, false), 140),
        ],
    );
    if bad.is_empty() {
        Ok("ViT-B/16 VanillaK without CB: H=4 110M, H=8 140M".into())
    } else {
        Err(bad.join("; "))
    }
}

fn table1_flops() -> Outcome {
    let kinds = [
        KeyKind::Baseline,
        KeyKind::SpatialK,
        KeyKind::Kua,
        KeyKind::SimpleK,
        KeyKind::VanillaK,
    ];
    let published: [(Preset, [f64; 5]); 2] = [
        (ModelConfig::vit_s16, [4.7, 11.3, 11.3, 8.6, 8.6]),
        (ModelConfig::vit_b16, [17.7, 41.5, 41.5, 30.4, 30.4]),
    ];
    let mut worst: f64 = 0.0;
    let mut bad = Vec::new();
    for (preset, want) in published {
        for (&k, w) in kinds.iter().zip(want) {
            let cfg = preset(spec(k, 8));
            let g = count_flops(&cfg, &[3, 224, 224]).unwrap().totals.flops as f64 / 1e9;
            let rel = (g - w) / w;
            worst = worst.max(rel.abs());
            if rel.abs() > 0.03 {
                bad.push(format!("{} {}: {g:.2}G vs {w}G", cfg.dim, spec(k, 8)));
            }
        }
    }
    if bad.is_empty() {
        Ok(format!(
            "all 10 cells within 3% (worst {:.1}%)",
            worst * 100.0
        ))
    } else {
        Err(bad.join("; "))
    }
}

fn counter_matches_constructor() -> Outcome {
    let mut checked = 0;
    for name in ["vit-s16", "vit-b16", "tiny", "gradcheck"] {
        for h in [1, 2, 4, 8] {
            let mut specs: Vec<KeyVariantSpec> = KeyKind::ALL.iter().map(|&k| spec(k, h)).collect();
            specs.push(KeyVariantSpec::vanillak(h, false));
            for s in specs {
                let cfg = ModelConfig::preset(name, s).unwrap();
                let built = VitModel::<f32>::new(&cfg).unwrap().param_count() as u64;
                let counted = count_params(&cfg).unwrap().totals.params;
                if built != counted {
                    return Err(format!(
                        "{name} {s}: constructed {built} vs counted {counted}"
                    ));
                }
                checked += 1;
            }
        }
    }
    Ok(format!(
        "{checked} preset/variant/H combinations agree exactly"
    ))
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut params = 0;
    let mut worst: f64 = 0.0;
    for kind in KeyKind::ALL {
        let cfg = ModelConfig::tiny(spec(kind, 2));
        let mut model = VitModel::<f64>::init(&cfg, 0).unwrap();
        let images: Tensor<f64> = Rng::seed(1).normal_tensor(&[2, 1, 16, 16], 1.0);
        let labels = [1, 3];
        let layout = model.layout.clone();
        let opts = ParamCheckOptions {
            max_coords: Some(16),
            ..ParamCheckOptions::default()
        };
        let reports = check_parameters(
            &mut model.store,
            |store| {
                let mut g = Graph::new();
                let out = layout.forward(&mut g, store, &images)?;
                let loss = g.cross_entropy(out.logits, &labels)?;
                Ok((g, loss))
            },
            &opts,
        )
        .map_err(|e| e.to_string())?;
        for (name, r) in reports {
            if !r.pass {
                return Err(format!("{kind:?} {name}: rel err {:.3e}", r.max_rel_err));
            }
            worst = worst.max(r.max_rel_err);
            params += 1;
        }
    }
    let elapsed = start.elapsed();
    if elapsed > Duration::from_secs(120) {
        return Err(format!("suite took {elapsed:.1?}"));
    }
    Ok(format!(
        "{params} parameter tensors over 5 variants, max rel err {worst:.2e}, {elapsed:.1?}"
    ))
}

fn degenerate_equivalences() -> Outcome {
    let (dim, tokens) = (16, 9);
    let mut worst: f64 = 0.0;
    for s in [
        KeyVariantSpec::spatialk(1),
        KeyVariantSpec::vanillak(2, false),
        KeyVariantSpec::simplek(1),
    ] {
        for seed in 0..10 {
            let mut store = ParamStore::<f64>::new();
            let p = AttentionParams::register(&mut store, "a", dim, tokens, s, GammaInit::Ones)
                .unwrap();
            store.initialize(&mut Rng::seed(seed));
            let mut rng = Rng::seed(100 + seed);
            let w_k: Tensor<f64> = rng.normal_tensor(&[dim, dim], 0.3);
            let x: Tensor<f64> = rng.normal_tensor(&[tokens, dim], 1.0);
            set_baseline_equivalent(&mut store, &p, &w_k).unwrap();
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let k = key_forward(&mut g, &store, xv, &p).unwrap();
            let d = g.value(k).max_abs_diff(&x.linear(&w_k, None).unwrap());
            worst = worst.max(d);
            if d > 1e-6 {
                return Err(format!("{s} seed {seed}: {d:.3e}"));
            }
        }
    }
    Ok(format!(
        "3 equivalences x 10 seeds, max deviation {worst:.2e}"
    ))
}

fn invariants() -> Outcome {
    let mut worst_row: f64 = 0.0;
    for kind in KeyKind::ALL {
        let model = VitModel::<f64>::init(&ModelConfig::tiny(spec(kind, 2)), 3).unwrap();
        let images: Tensor<f64> = Rng::seed(4).normal_tensor(&[2, 1, 16, 16], 1.0);
        let mut g = Graph::new();
        let out = model.forward(&mut g, &images).unwrap();
        for &a in &out.attentions {
            for row in g.value(a).data().chunks(17) {
                worst_row = worst_row.max((row.iter().sum::<f64>() - 1.0).abs());
            }
        }
        let rec = AttentionRecord::from_forward(&g, &out.attentions, 1).unwrap();
        for h in 0..2 {
            for row in attention_rollout(&rec, h).unwrap().joint.data().chunks(17) {
                worst_row = worst_row.max((row.iter().sum::<f64>() - 1.0).abs());
            }
        }
    }
    if worst_row > 1e-6 {
        return Err(format!("row sum off by {worst_row:.3e}"));
    }

    let mut store = ParamStore::<f64>::new();
    let p = AttentionParams::register(
        &mut store,
        "a",
        8,
        6,
        KeyVariantSpec::baseline(),
        GammaInit::Ones,
    )
    .unwrap();
    let mut rng = Rng::seed(0);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let shape = store.get(id).shape().to_vec();
        store.set(id, rng.normal_tensor(&shape, 0.5)).unwrap();
    }
    let x: Tensor<f64> = rng.normal_tensor(&[6, 8], 1.0);
    let perm = [3, 0, 5, 1, 4, 2];
    let permute = |t: &Tensor<f64>| Tensor::from_fn(&[6, 8], |i| t.data()[perm[i / 8] * 8 + i % 8]);
    let run = |x: &Tensor<f64>| {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let o = mhsa_forward(&mut g, &store, xv, &p, 2).unwrap().out;
        g.value(o).clone()
    };
    let perm_dev = run(&permute(&x)).max_abs_diff(&permute(&run(&x)));
    if perm_dev > 1e-9 {
        return Err(format!("baseline permutation deviation {perm_dev:.3e}"));
    }

    let k: Tensor<f64> = rng.normal_tensor(&[2, 3, 4], 1.0);
    let mut g = Graph::new();
    let kv = g.constant(k.clone());
    let zero = g.constant(Tensor::zeros(&[4]));
    let cb = context_broadcast(&mut g, kv, zero).unwrap();
    if g.value(cb) != &k.map(|v| v / 2.0) {
        return Err("CB with zero gain does not halve K exactly".into());
    }

    let logits: Tensor<f64> = rng.normal_tensor(&[5, 7], 4.0);
    let shifted = logits.map(|v| v + 123.456);
    let shift_dev = logits
        .softmax(1)
        .unwrap()
        .max_abs_diff(&shifted.softmax(1).unwrap());
    if shift_dev > 1e-9 {
        return Err(format!("softmax shift deviation {shift_dev:.3e}"));
    }
    Ok(format!(
        "row sums within {worst_row:.1e}, permutation {perm_dev:.1e}, CB halves exactly, softmax shift {shift_dev:.1e}"
    ))
}

fn smoke_training() -> Outcome {
    let data = synth_dataset(4, 32, 16, 0).unwrap();
    let cfg = TrainConfig {
        total_epochs: 50,
        batch_size: 32,
        lr_max: 1e-3,
        lr_min: 1e-5,
        seed: 0,
        ..TrainConfig::default()
    };
    let mut lines = Vec::new();
    for kind in KeyKind::ALL {
        let model_cfg = ModelConfig::tiny(spec(kind, 4));
        let run = || {
            let start = Instant::now();
            let mut m = VitModel::<f32>::init(&model_cfg, cfg.seed).unwrap();
            let h = train(&mut m, &data, &cfg, &TrainOptions::default()).unwrap();
            (h, m.store, start.elapsed())
        };
        let (h1, s1, t1) = run();
        let (h2, s2, _) = run();
        let top1 = h1.epochs.last().unwrap().top1;
        let identical = h1 == h2
            && s1
                .iter()
                .zip(s2.iter())
                .all(|((_, a), (_, b))| a.value == b.value);
        let ok =
            h1.total_steps <= 500 && top1 >= 0.95 && identical && t1 < Duration::from_secs(300);
        let line = format!(
            "{}: {} steps, train top-1 {:.3}, {:.1?}, rerun identical: {identical}",
            kind.name(),
            h1.total_steps,
            top1,
            t1
        );
        if !ok {
            return Err(line);
        }
        lines.push(line);
    }
    Ok(lines.join("; "))
}

fn cli_determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = dir.path().join("run.json");
    std::fs::write(
        &config,
        r#"{
  "preset": "tiny",
  "variant": {"kind": "kua", "charts": 2},
  "train": {"total_epochs": 3, "batch_size": 16, "lr_max": 0.001, "lr_min": 0.00001},
  "dataset": {"kind": "synthetic", "classes": 4, "samples_per_class": 8, "seed": 1}
}"#,
    )
    .map_err(|e| e.to_string())?;
    let run = |out: &Path| -> Result<Vec<Vec<u8>>, String> {
        let status = Command::new(env!("CARGO_BIN_EXE_mklab"))
            .args(["train", "--config"])
            .arg(&config)
            .args(["--seed", "7", "--out"])
            .arg(out)
            .output()
            .map_err(|e| e.to_string())?;
        if !status.status.success() {
            return Err(String::from_utf8_lossy(&status.stderr).into_owned());
        }
        ["last.ckpt", "best.ckpt", "metrics.csv"]
            .iter()
            .map(|f| std::fs::read(out.join(f)).map_err(|e| e.to_string()))
            .collect()
    };
    let a = run(&dir.path().join("a"))?;
    let b = run(&dir.path().join("b"))?;
    if a == b {
        Ok(format!(
            "two runs: checkpoints ({} bytes) and metrics CSV byte-identical",
            a[0].len()
        ))
    } else {
        Err("artifacts differ between identical runs".into())
    }
}

fn main() {
    let criteria: &[Criterion] = &[
        ("parameter totals, model-family table", table1_params),
        ("parameter totals, chart-count table", table2_params),
        ("FLOP totals within 3%", table1_flops),
        (
            "closed-form counter equals constructed model",
            counter_matches_constructor,
        ),
        ("finite-difference gradient suite", gradient_suite),
        ("degenerate key-path equivalences", degenerate_equivalences),
        (
            "stochasticity, equivariance, CB and softmax invariants",
            invariants,
        ),
        ("smoke training, all five variants", smoke_training),
        ("CLI training determinism", cli_determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        match check() {
            Ok(detail) => println!("criterion {}: PASS  {name} ({detail})", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {}: FAIL  {name} ({detail})", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
