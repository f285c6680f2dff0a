use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use super::bench::{run_bench, BenchReport};
use super::config::{flatten, Resolved, RunConfig};
use super::render::write_ppm;
use crate::decoding::{expand, inpaint, ExpandMode, GenerationOutput, GenerationState};
use crate::error::{ArpgError, Result};
use crate::model::{forward_train, ArpgModel, Checkpoint, ModelConfig};
use crate::numcore::Tape;
use crate::ordering::sample_permutation;
use crate::training::{
    arpg_grad_contrast, make_dataset, masked_baseline_grad_demo, ContrastReport, GradDemoReport, ToyDataset,
    ToyDatasetSpec, TokenGrid, TrainConfig, Trainer,
};

const PIXELS_PER_TOKEN: usize = 8;

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| ArpgError::io(path, e))
}

fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| ArpgError::io(path, e))
}

/// Creates the output directory and records the resolved configuration.
fn prepare_out(config: &RunConfig) -> Result<PathBuf> {
    let dir = config.out_dir.clone();
    fs::create_dir_all(&dir).map_err(|e| ArpgError::io(&dir, e))?;
    write_file(&dir.join("config.json"), config.to_flat_json())?;
    Ok(dir)
}

/// Loads a checkpoint, rejecting explicit `model.*` settings it contradicts.
fn load_model(path: &Path, resolved: &Resolved) -> Result<ArpgModel<f32>> {
    let ck = Checkpoint::<f32>::load(path)?;
    let have = flatten(&json!({ "model": serde_json::to_value(&ck.config).expect("serializable") }));
    let want = flatten(&json!({ "model": serde_json::to_value(&resolved.config.model).expect("serializable") }));
    for key in resolved.explicit.iter().filter(|k| k.starts_with("model.")) {
        if have.get(key) != want.get(key) {
            return Err(ArpgError::Config(format!(
                "config mismatch: checkpoint {} has {key} = {}, requested {}",
                path.display(),
                have.get(key).unwrap_or(&Value::Null),
                want.get(key).unwrap_or(&Value::Null)
            )));
        }
    }
    ck.model()
}

fn check_class(model: &ModelConfig, class_id: usize) -> Result<()> {
    if class_id > model.num_classes {
        return Err(ArpgError::Config(format!(
            "class {class_id} outside 0..={} ({} selects the null condition)",
            model.num_classes, model.num_classes
        )));
    }
    Ok(())
}

fn write_outputs(
    dir: &Path,
    name: &str,
    command: &str,
    config: &RunConfig,
    out: &GenerationOutput,
    extra: Value,
) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for (i, grid) in out.grids.iter().enumerate() {
        let stem = if out.grids.len() == 1 { name.to_string() } else { format!("{name}_{i:03}") };
        let txt = dir.join(format!("{stem}.txt"));
        write_file(&txt, grid.to_text())?;
        write_ppm(&dir.join(format!("{stem}.ppm")), grid, PIXELS_PER_TOKEN)?;
        files.push(txt);
    }
    let sidecar = json!({
        "command": command,
        "seed": config.decode.seed,
        "decode": config.decode,
        "classes": out.grids.iter().map(|g| g.class_id).collect::<Vec<_>>(),
        "height": out.grids[0].height,
        "width": out.grids[0].width,
        "order": out.order,
        "prefilled": out.prefilled,
        "step_counts": out.step_counts,
        "cache_scalars": out.cache_scalars,
        "extra": extra,
    });
    write_file(
        &dir.join(format!("{name}.json")),
        serde_json::to_string_pretty(&sidecar).expect("serializable") + "\n",
    )?;
    Ok(files)
}

fn training_data(model: &ModelConfig, train: &TrainConfig) -> Result<Vec<TokenGrid>> {
    let spec = ToyDatasetSpec::for_model(model, train.noise);
    spec.check_model(model)?;
    make_dataset(&spec, train.dataset_size, train.data_seed)
}

/// Trains from scratch or from `resume`; writes `metrics.jsonl`, periodic
/// `snapshot_<step>.ckpt` files and the final `model.ckpt`.
pub fn cmd_train(resolved: &Resolved, resume: Option<&Path>) -> Result<()> {
    let config = &resolved.config;
    let mut trainer = match resume {
        Some(path) => {
            let ck = Checkpoint::<f32>::load(path)?;
            let train: TrainConfig = ck
                .meta
                .get("train")
                .cloned()
                .map(serde_json::from_value)
                .transpose()
                .map_err(|e| ArpgError::Config(format!("snapshot training config: {e}")))?
                .ok_or_else(|| ArpgError::Config(format!("{} is not a training snapshot", path.display())))?;
            let data = training_data(&ck.config, &train)?;
            Trainer::resume(&ck, data)?
        }
        None => {
            let data = training_data(&config.model, &config.train)?;
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            let model = ArpgModel::<f32>::init(&config.model, &mut rng)?;
            Trainer::new(model, config.train.clone(), data)?
        }
    };
    let mut effective = config.clone();
    effective.model = trainer.model.config().clone();
    effective.train = trainer.config.clone();
    let dir = prepare_out(&effective)?;
    let metrics_path = dir.join("metrics.jsonl");
    let file = OpenOptions::new()
        .create(true)
        .write(true)
        .append(resume.is_some())
        .truncate(resume.is_none())
        .open(&metrics_path)
        .map_err(|e| ArpgError::io(&metrics_path, e))?;
    let mut metrics = BufWriter::new(file);
    let every = trainer.config.snapshot_every;
    let total = trainer.config.total_steps();
    let mut last_loss = f64::NAN;
    while !trainer.is_done() {
        let stats = trainer.train_step()?;
        last_loss = stats.loss;
        writeln!(metrics, "{}", serde_json::to_string(&stats).expect("serializable"))
            .and_then(|_| metrics.flush())
            .map_err(|e| ArpgError::io(&metrics_path, e))?;
        let done = trainer.step();
        if every > 0 && done % every == 0 && done < total {
            trainer.snapshot().save(&dir.join(format!("snapshot_{done:06}.ckpt")))?;
        }
    }
    let final_path = dir.join("model.ckpt");
    trainer.snapshot().save(&final_path)?;
    println!(
        "trained {} steps, final loss {last_loss:.4}, checkpoint {}",
        trainer.step(),
        final_path.display()
    );
    Ok(())
}

pub fn cmd_generate(resolved: &Resolved, checkpoint: &Path, class_id: usize, count: usize) -> Result<()> {
    let config = &resolved.config;
    let model = load_model(checkpoint, resolved)?;
    check_class(model.config(), class_id)?;
    if count == 0 {
        return Err(ArpgError::Config("count must be at least 1".into()));
    }
    let c = model.config();
    let out = GenerationState::new(&model, &vec![class_id; count], c.grid_height, c.grid_width, &[], &config.decode)?
        .finish()?;
    let dir = prepare_out(config)?;
    let files = write_outputs(&dir, "sample", "generate", config, &out, json!({ "checkpoint": checkpoint }))?;
    println!("wrote {} grid(s) to {}", files.len(), dir.display());
    Ok(())
}

/// Parses a 0/1 grid; 1 marks a known cell.
pub fn parse_known_mask(text: &str) -> Result<TokenGrid> {
    let grid = TokenGrid::from_text(text, 0)?;
    if grid.tokens.iter().any(|&t| t > 1) {
        return Err(ArpgError::Config("mask file must contain only 0 and 1".into()));
    }
    Ok(grid)
}

pub fn cmd_inpaint(resolved: &Resolved, checkpoint: &Path, input: &Path, mask: &Path, class_id: usize) -> Result<()> {
    let config = &resolved.config;
    let model = load_model(checkpoint, resolved)?;
    check_class(model.config(), class_id)?;
    let grid = TokenGrid::from_text(&read_file(input)?, class_id)?;
    let known = parse_known_mask(&read_file(mask)?)?;
    let c = model.config();
    if (grid.height, grid.width) != (c.grid_height, c.grid_width) || (known.height, known.width) != (grid.height, grid.width) {
        return Err(ArpgError::Config(format!(
            "config mismatch: checkpoint grid is {}×{}, input {}×{}, mask {}×{}",
            c.grid_height, c.grid_width, grid.height, grid.width, known.height, known.width
        )));
    }
    let known: Vec<bool> = known.tokens.iter().map(|&m| m == 1).collect();
    let out = inpaint(&model, &grid, &known, &config.decode)?;
    let dir = prepare_out(config)?;
    write_outputs(&dir, "inpaint", "inpaint", config, &out, json!({ "checkpoint": checkpoint, "known": known }))?;
    println!("inpainted {} of {} cells into {}", known.iter().filter(|k| !**k).count(), known.len(), dir.display());
    Ok(())
}

pub fn cmd_expand(
    resolved: &Resolved,
    checkpoint: &Path,
    input: &Path,
    height: usize,
    width: usize,
    mode: ExpandMode,
    class_id: usize,
) -> Result<()> {
    let config = &resolved.config;
    let model = load_model(checkpoint, resolved)?;
    check_class(model.config(), class_id)?;
    let base = TokenGrid::from_text(&read_file(input)?, class_id)?;
    let out = expand(&model, &base, height, width, mode, &config.decode)?;
    let dir = prepare_out(config)?;
    write_outputs(&dir, "expand", "expand", config, &out, json!({ "checkpoint": checkpoint, "mode": mode }))?;
    println!("expanded {}×{} to {height}×{width} into {}", base.height, base.width, dir.display());
    Ok(())
}

/// Sweeps a trained checkpoint or, without one, a freshly initialised model.
pub fn cmd_bench(resolved: &Resolved, checkpoint: Option<&Path>) -> Result<BenchReport> {
    let config = &resolved.config;
    let model = match checkpoint {
        Some(p) => load_model(p, resolved)?,
        None => ArpgModel::<f32>::init(&config.model, &mut ChaCha8Rng::seed_from_u64(config.seed))?,
    };
    let report = run_bench(&model, &config.bench, &config.decode)?;
    let dir = prepare_out(config)?;
    write_file(&dir.join("bench.json"), serde_json::to_string_pretty(&report).expect("serializable") + "\n")?;
    let table = report.to_table();
    write_file(&dir.join("bench.txt"), &table)?;
    print!("{table}");
    Ok(report)
}

/// Returns whether both gradient assertions hold.
pub fn cmd_grad_demo(resolved: &Resolved) -> Result<bool> {
    let config = &resolved.config;
    let baseline: GradDemoReport = masked_baseline_grad_demo(config.seed)?;
    let contrast: ContrastReport = arpg_grad_contrast(config.seed)?;
    let last = baseline.dq_norms.len() - 1;
    println!("masked baseline, final layer (loss {:.6}):", baseline.loss);
    for (i, (&m, &n)) in baseline.masked.iter().zip(&baseline.dq_norms[last]).enumerate() {
        println!("  row {i} {:<8} dq_norm {n}", if m { "masked" } else { "unmasked" });
    }
    println!("two-pass decoder, final Pass-2 layer (loss {:.6}):", contrast.loss);
    for (i, n) in contrast.dq_norms.iter().enumerate() {
        println!("  row {i} query    dq_norm {n}");
    }
    for (l, n) in contrast.wq_grad_norms.iter().enumerate() {
        println!("  pass2.layer{l}.wq grad_norm {n}");
    }
    let baseline_ok = baseline.sparsity_holds();
    let contrast_ok = contrast.wq_nonzero();
    println!("baseline unmasked dq exactly zero: {}", if baseline_ok { "PASS" } else { "FAIL" });
    println!("two-pass wq gradients all nonzero: {}", if contrast_ok { "PASS" } else { "FAIL" });
    let dir = prepare_out(config)?;
    let report = json!({ "baseline": baseline, "contrast": contrast, "baseline_ok": baseline_ok, "contrast_ok": contrast_ok });
    write_file(&dir.join("grad_demo.json"), serde_json::to_string_pretty(&report).expect("serializable") + "\n")?;
    Ok(baseline_ok && contrast_ok)
}

fn write_head_csv(path: &Path, probs: &[f32], rows: usize, cols: usize) -> Result<()> {
    let file = File::create(path).map_err(|e| ArpgError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in 0..rows {
        let line: Vec<String> = probs[r * cols..(r + 1) * cols].iter().map(|p| p.to_string()).collect();
        writeln!(w, "{}", line.join(",")).map_err(|e| ArpgError::io(path, e))?;
    }
    w.flush().map_err(|e| ArpgError::io(path, e))
}

/// Final-layer attention of both passes, one CSV per head, for a teacher
/// forced pass over `input` (or a dataset sample) in a random order.
pub fn cmd_attn_export(resolved: &Resolved, checkpoint: &Path, input: Option<&Path>, class_id: usize) -> Result<Vec<PathBuf>> {
    let config = &resolved.config;
    let model = load_model(checkpoint, resolved)?;
    let c = model.config().clone();
    if class_id >= c.num_classes {
        return Err(ArpgError::Config(format!("class {class_id} outside 0..{}", c.num_classes)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let grid = match input {
        Some(p) => TokenGrid::from_text(&read_file(p)?, class_id)?,
        None => ToyDataset::new(ToyDatasetSpec::for_model(&c, 0.0))?.sample(class_id, &mut rng),
    };
    if (grid.height, grid.width) != (c.grid_height, c.grid_width) {
        return Err(ArpgError::Config(format!(
            "config mismatch: checkpoint grid is {}×{}, input {}×{}",
            c.grid_height, c.grid_width, grid.height, grid.width
        )));
    }
    let order = sample_permutation(c.seq_len(), &mut rng);
    let mut tape = Tape::new();
    let out = forward_train(&mut tape, &model, &grid.tokens, c.class_token(class_id), &order, None)?;
    let dir = prepare_out(config)?;
    let t = c.seq_len();
    let mut files = Vec::new();
    let passes = [("pass1", out.pass1.attention.last()), ("pass2", out.pass2.attention.last())];
    for (name, node) in passes {
        let Some(&node) = node else { continue };
        let probs = tape
            .attention_probs(node)
            .ok_or_else(|| ArpgError::Contract("attention node without saved probabilities".into()))?;
        for h in 0..c.heads {
            let path = dir.join(format!("{name}_head{h}.csv"));
            write_head_csv(&path, &probs[h * t * t..(h + 1) * t * t], t, t)?;
            files.push(path);
        }
    }
    write_file(
        &dir.join("attn_export.json"),
        serde_json::to_string_pretty(&json!({
            "class": class_id,
            "tokens": grid.tokens,
            "order": order,
            "rows": t,
            "cols": t,
            "files": files,
        }))
        .expect("serializable")
            + "\n",
    )?;
    println!("wrote {} attention matrices to {}", files.len(), dir.display());
    Ok(files)
}
