//! Subcommand implementations.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sf2_core::data::{inject_label_noise, make_synthetic_split, read_dataset, write_dataset, SyntheticDataset, SyntheticSpec};
use sf2_core::eval::{
    best_threshold_accuracy, build_pairs, distribution_overlap, initial_bank, pair_scores, run_ablation,
    run_noise_sweep, split_scores, tar_at_far, write_metrics, write_scores, Benchmark,
};
use sf2_core::gradcheck::{gradcheck, GradcheckSpec, LossKind};
use sf2_core::loss::{bias_init, bias_init_direct, bias_residual_at_zero, AblationFlags};
use sf2_core::par::Exec;
use sf2_core::shard::{throughput_bench, BenchRow, BenchSpec};
use sf2_core::sphere::{ClassifierBank, Hyperparams, MarginVariant};
use sf2_core::train::{export_features, train, Validation, BiasInit, EncoderModel, ExportMeta, LossChoice, TrainConfig};

use crate::config::RunConfig;
use crate::curves;
use crate::CliError;

/// Everything `eval` needs to rebuild the embedding.
#[derive(Serialize, Deserialize)]
struct SavedModel {
    config: TrainConfig,
    model: EncoderModel,
    bank: ClassifierBank,
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let dir = PathBuf::from(cfg.text("out"));
    fs::create_dir_all(&dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
    Ok(dir)
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    let mut w = create(path)?;
    w.write_all(text.as_bytes())?;
    w.flush()?;
    Ok(())
}

/// Writes a table to `<out>/<name>` and echoes it on stdout.
fn emit(dir: &Path, name: &str, text: &str) -> Result<(), CliError> {
    write_text(&dir.join(name), text)?;
    print!("{text}");
    Ok(())
}

fn hyperparams(cfg: &RunConfig) -> Result<Hyperparams, CliError> {
    let hp = Hyperparams::new(cfg.get("lambda")?, cfg.get("r")?, cfg.get("m")?, cfg.get("t")?)?;
    let variant = match cfg.text("loss") {
        "arc" => MarginVariant::ArcAdditive,
        "mult" => MarginVariant::Multiplicative,
        _ => MarginVariant::CosineAdditive,
    };
    Ok(hp.with_variant(variant, hp.m_p)?)
}

fn softmax_choice(cfg: &RunConfig) -> Result<LossChoice, CliError> {
    Ok(LossChoice::Softmax { scale: cfg.get("softmax_s")?, margin: cfg.get("softmax_m")?, t: 1.0 })
}

fn loss_choice(cfg: &RunConfig) -> Result<LossChoice, CliError> {
    let flags = match cfg.text("loss") {
        "naive" => AblationFlags::NONE,
        "balanced" => AblationFlags::PN,
        "curvature" => AblationFlags::PN_EH,
        "margin" => AblationFlags::PN_EH_AM,
        "final" | "arc" | "mult" => AblationFlags::ALL,
        "softmax" => return softmax_choice(cfg),
        other => return Err(CliError::Config(format!("loss '{other}' cannot be trained"))),
    };
    Ok(LossChoice::OneVsAll(flags))
}

fn train_config(cfg: &RunConfig) -> Result<TrainConfig, CliError> {
    let config = TrainConfig {
        lr: cfg.get("lr")?,
        momentum: cfg.get("momentum")?,
        epochs: cfg.get("epochs")?,
        batch: cfg.get("batch")?,
        seed: cfg.get("seed")?,
        loss: loss_choice(cfg)?,
        hp: hyperparams(cfg)?,
        bias_init: cfg.text("bias_init").parse::<BiasInit>()?,
        weight_decay: cfg.get("weight_decay")?,
        lr_milestones: cfg.list("lr_milestones")?,
        lr_gamma: cfg.get("lr_gamma")?,
        hidden: cfg.list("hidden")?,
        feat_dim: cfg.get("feat_dim")?,
        exec: match cfg.text("exec") {
            "sequential" => Exec::Sequential,
            _ => Exec::Parallel,
        },
    };
    config.validate()?;
    Ok(config)
}

fn read_data(path: &Path) -> Result<SyntheticDataset, CliError> {
    let f = File::open(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    Ok(read_dataset(BufReader::new(f))?)
}

/// Train and held-out data, from `data_dir` when set, otherwise generated.
fn datasets(cfg: &RunConfig) -> Result<(SyntheticDataset, SyntheticDataset), CliError> {
    let dir = cfg.text("data_dir");
    if !dir.is_empty() {
        let dir = Path::new(dir);
        return Ok((read_data(&dir.join("train.csv"))?, read_data(&dir.join("test.csv"))?));
    }
    let spec = SyntheticSpec {
        classes: cfg.get("K")?,
        dim: cfg.get("d_in")?,
        per_class: cfg.get("per_class")?,
        concentration: cfg.get("concentration")?,
    };
    Ok(make_synthetic_split(&spec, cfg.get("test_per_class")?, cfg.get("seed")?)?)
}

fn benchmark(cfg: &RunConfig) -> Result<Benchmark, CliError> {
    let (train, test) = datasets(cfg)?;
    let seed: u64 = cfg.get("seed")?;
    let pairs = build_pairs(&test, cfg.get("n_pos")?, cfg.get("n_neg")?, seed.wrapping_add(1))?;
    Ok(Benchmark { train, test, pairs })
}

pub fn dispatch(name: &str, cfg: &RunConfig) -> Result<(), CliError> {
    match name {
        "gen-data" => gen_data(cfg),
        "train" => cmd_train(cfg),
        "eval" => eval(cfg),
        "gradcheck" => cmd_gradcheck(cfg),
        "bias-init" => cmd_bias_init(cfg),
        "bench-shard" => bench_shard(cfg),
        "ablate" => ablate(cfg),
        "noise" => noise(cfg),
        "plot-data" => plot_data(cfg),
        other => Err(CliError::Config(format!("unknown subcommand '{other}'"))),
    }
}

fn gen_data(cfg: &RunConfig) -> Result<(), CliError> {
    let dir = out_dir(cfg)?;
    let (train, test) = datasets(cfg)?;
    for (name, ds) in [("train.csv", &train), ("test.csv", &test)] {
        let mut w = create(&dir.join(name))?;
        write_dataset(ds, &mut w)?;
        w.flush()?;
    }
    println!("# file,samples,classes,dim");
    println!("train.csv,{},{},{}", train.len(), train.classes, train.dim);
    println!("test.csv,{},{},{}", test.len(), test.classes, test.dim);
    Ok(())
}

fn cmd_train(cfg: &RunConfig) -> Result<(), CliError> {
    let dir = out_dir(cfg)?;
    let config = train_config(cfg)?;
    let bench = benchmark(cfg)?;
    let rate: f64 = cfg.get("noise")?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ rate.to_bits());
    let train_set = inject_label_noise(&bench.train, rate, &mut rng)?;
    let bank = initial_bank(train_set.classes, config.feat_dim, config.seed)?;
    let val = Validation { dataset: &bench.test, pairs: &bench.pairs };
    let out = train(&config, &train_set, bank, Some(val))?;

    let mut history = String::from("# epoch,train_loss,val_accuracy\n");
    for r in &out.history {
        history.push_str(&format!("{},{},{}\n", r.epoch, r.train_loss, r.val_accuracy));
    }
    emit(&dir, "history.csv", &history)?;

    let meta = ExportMeta { r: config.hp.r, m: config.hp.m_p, lambda: config.hp.lambda, t: config.hp.t, b: out.bank.bias };
    let mut w = create(&dir.join("features.csv"))?;
    export_features(&out.model, &train_set, &out.bank, &meta, &mut w)?;
    w.flush()?;

    let saved = SavedModel { config, model: out.model, bank: out.bank };
    let json = serde_json::to_string(&saved).map_err(|e| CliError::Io(e.to_string()))?;
    write_text(&dir.join("model.json"), &json)?;
    write_text(&dir.join("config.txt"), &cfg.dump())?;
    Ok(())
}

fn eval(cfg: &RunConfig) -> Result<(), CliError> {
    let dir = out_dir(cfg)?;
    let path = match cfg.text("model") {
        "" => dir.join("model.json"),
        p => PathBuf::from(p),
    };
    let text = fs::read_to_string(&path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let saved: SavedModel =
        serde_json::from_str(&text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let bench = benchmark(cfg)?;
    let exec = train_config(cfg)?.exec;
    let scores = pair_scores(&saved.model, &bench.test, &bench.pairs, exec)?;
    let same = bench.pairs.same_flags();

    let mut w = create(&dir.join("scores.csv"))?;
    write_scores(&bench.pairs, &scores, &mut w)?;
    w.flush()?;

    let (threshold, accuracy) = best_threshold_accuracy(&scores, &same);
    let mut rows = vec![
        ("accuracy".to_string(), String::new(), accuracy),
        ("threshold".to_string(), String::new(), threshold),
    ];
    let resolution = 1.0 / bench.pairs.n_neg.max(1) as f64;
    let (levels, skipped): (Vec<f64>, Vec<f64>) = cfg.list::<f64>("far")?.into_iter().partition(|&f| f >= resolution);
    for f in skipped {
        eprintln!("note: FAR {f} is below the resolution 1/{} of this pair set; skipped", bench.pairs.n_neg);
    }
    for p in tar_at_far(&scores, &same, &levels)? {
        rows.push(("tar".to_string(), format!("far={}", p.far_level), p.tar));
    }
    let (pos, neg) = split_scores(&scores, &same);
    if !pos.is_empty() && !neg.is_empty() {
        let bins: usize = cfg.get("bins")?;
        rows.push(("overlap".to_string(), format!("bins={bins}"), distribution_overlap(&pos, &neg, bins)));
    }
    let mut buf = Vec::new();
    write_metrics(&rows, &mut buf)?;
    emit(&dir, "metrics.csv", &String::from_utf8_lossy(&buf))
}

fn cmd_gradcheck(cfg: &RunConfig) -> Result<(), CliError> {
    let dir = out_dir(cfg)?;
    let kinds = match cfg.text("loss") {
        "all" => LossKind::ALL.to_vec(),
        "margin" => return Err(CliError::Config("gradcheck covers final, not the margin-only row".into())),
        name => vec![name.parse::<LossKind>()?],
    };
    let spec = GradcheckSpec {
        trials: cfg.get("trials")?,
        step: cfg.get("step")?,
        seed: cfg.get("seed")?,
        hp: Hyperparams::new(cfg.get("lambda")?, cfg.get("r")?, cfg.get("m")?, cfg.get("t")?)?,
        ..GradcheckSpec::default()
    };
    let mut text = String::from("# loss,trials,checked,max_rel,max_abs,status\n");
    let mut failed = Vec::new();
    for kind in kinds {
        let r = gradcheck(kind, &spec)?;
        let status = if r.pass() { "PASS" } else { "FAIL" };
        if !r.pass() {
            failed.push(r.loss);
        }
        text.push_str(&format!("{},{},{},{:e},{:e},{status}\n", r.loss, r.trials, r.checked, r.max_rel, r.max_abs));
    }
    emit(&dir, "gradcheck.csv", &text)?;
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Check(format!("gradient check failed for {}", failed.join(" "))))
    }
}

fn cmd_bias_init(cfg: &RunConfig) -> Result<(), CliError> {
    let dir = out_dir(cfg)?;
    let hp = Hyperparams::new(cfg.get("lambda")?, cfg.get("r")?, cfg.get("m")?, cfg.get("t")?)?;
    let k: usize = cfg.get("K")?;
    let b = bias_init(&hp, k)?;
    let direct = bias_init_direct(&hp, k)?;
    let residual = bias_residual_at_zero(&hp, k, b)?.abs();
    let text = format!(
        "# lambda,K,r,m,t,b,b_direct,residual\n{},{k},{},{},{},{b},{direct},{residual:e}\n",
        hp.lambda, hp.r, hp.m_p, hp.t
    );
    emit(&dir, "bias_init.csv", &text)
}

fn bench_shard(cfg: &RunConfig) -> Result<(), CliError> {
    let dir = out_dir(cfg)?;
    let spec = BenchSpec {
        classes: cfg.get("bench_K")?,
        dim: cfg.get("bench_D")?,
        shard_counts: cfg.list("shards")?,
        batch: cfg.get("bench_batch")?,
        repetitions: cfg.get("reps")?,
        seed: cfg.get("seed")?,
        include_softmax: true,
    };
    let mut text = format!("{}\n", BenchRow::HEADER);
    for row in throughput_bench(&spec)? {
        text.push_str(&row.csv());
        text.push('\n');
    }
    emit(&dir, "bench_shard.csv", &text)
}

fn ablate(cfg: &RunConfig) -> Result<(), CliError> {
    let dir = out_dir(cfg)?;
    let base = train_config(cfg)?;
    let bench = benchmark(cfg)?;
    let mut text = String::from("# flags,accuracy,final_loss,diverged\n");
    for r in run_ablation(&bench, &AblationFlags::ladder(), &base)? {
        text.push_str(&format!("{},{},{},{}\n", r.flags.label(), r.accuracy, r.final_loss, r.diverged));
    }
    emit(&dir, "ablation.csv", &text)
}

fn noise(cfg: &RunConfig) -> Result<(), CliError> {
    let dir = out_dir(cfg)?;
    let mut base = train_config(cfg)?;
    if matches!(base.loss, LossChoice::Softmax { .. }) {
        base.loss = LossChoice::OneVsAll(AblationFlags::ALL);
    }
    let bench = benchmark(cfg)?;
    let losses = vec![("sphereface2".to_string(), base.loss), ("softmax".to_string(), softmax_choice(cfg)?)];
    let mut text = String::from("# loss,rate,accuracy,diverged\n");
    for r in run_noise_sweep(&bench, &cfg.list::<f64>("rates")?, &losses, &base)? {
        text.push_str(&format!("{},{},{},{}\n", r.loss, r.rate, r.accuracy, r.diverged));
    }
    emit(&dir, "noise.csv", &text)
}

fn plot_data(cfg: &RunConfig) -> Result<(), CliError> {
    let dir = out_dir(cfg)?;
    let points: usize = cfg.get("points")?;
    let curve = cfg.text("curve");
    let table = match curve {
        "easyhard" => curves::easy_hard(&cfg.list("s")?, cfg.get("cos_i")?, cfg.get("classes_plot")?, points)?,
        "curvature" => curves::curvature(&cfg.list("s")?, points),
        "simadjust" => curves::sim_adjust(&cfg.list("ts")?, points)?,
        "margin" => curves::margin(&hyperparams(cfg)?, points)?,
        _ => {
            let path = match cfg.text("scores") {
                "" => dir.join("scores.csv"),
                p => PathBuf::from(p),
            };
            let text = fs::read_to_string(&path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
            curves::histogram(&text, cfg.get("bins")?)?
        }
    };
    emit(&dir, &format!("curve_{curve}.csv"), &table.csv())
}
