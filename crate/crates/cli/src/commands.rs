use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use sdacd::checkpoint;
use sdacd::config::RunConfig;
use sdacd::data::{self, image_to_rgb, load_dataset, load_triples, synthesize_benchmark, write_dataset, Split, SyntheticConfig};
use sdacd::domain::{BiTemporalSample, Image, RangeTag};
use sdacd::experiments::{self, AblationKind, ArmResult};
use sdacd::metrics::{evaluate, write_per_image_csv, ChangePredictor, Summary};
use sdacd::raster::{self, PanelTile};
use sdacd::trainer::{self, TrainOptions};
use sdacd::Error;

use crate::{ConfigArgs, DataArgs, TrainArgs};

fn resolve(args: &ConfigArgs) -> Result<RunConfig> {
    let mut run = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for o in &args.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{o}` is not KEY=VALUE")))?;
        run.set(k.trim(), v.trim())?;
    }
    run.resolve_seed(args.seed)?;
    Ok(run)
}

fn apply_train(run: &mut RunConfig, t: &TrainArgs) -> Result<()> {
    let mut set = |k: &str, v: String| run.set(k, &v);
    if let Some(e) = t.epochs {
        set("train.epochs", e.to_string())?;
    }
    if let Some(lr) = t.lr {
        set("train.lr", format!("{lr:?}"))?;
    }
    if let Some(b) = t.batch_size {
        set("train.batch_size", b.to_string())?;
    }
    if let Some(tags) = &t.tags {
        run.train.active_tags = tags.parse()?;
    }
    if let Some(f) = &t.fusion {
        run.train.fusion = f.parse()?;
    }
    if let Some(g) = &t.gan_form {
        run.train.gan_form = g.parse()?;
    }
    if t.no_ia {
        run.train.ia = false;
        // explicit tags are kept so that a conflict is reported by validate
        if t.tags.is_none() {
            run.train.active_tags = sdacd::domain::TagSet::original_only();
        }
    }
    if t.no_fa {
        run.train.fa = false;
    }
    if t.replay {
        run.train.replay_buffer = true;
    }
    if t.no_augment {
        run.train.augment = false;
    }
    run.validate()?;
    Ok(())
}

fn apply_data(run: &mut RunConfig, d: &DataArgs) -> Result<()> {
    if let Some(root) = &d.data {
        run.data.root = root.to_string_lossy().into_owned();
    }
    if let Some(t) = d.tile {
        run.data.tile_size = t;
    }
    if d.resize {
        run.data.resize = true;
    }
    run.validate()?;
    Ok(())
}

fn test_synth(cfg: &SyntheticConfig) -> SyntheticConfig {
    // scenes are indexed from the seed, so this offset keeps them disjoint
    SyntheticConfig {
        seed: cfg.seed.wrapping_add(cfg.n_samples as u64),
        ..cfg.clone()
    }
}

fn split_data(run: &RunConfig, d: &DataArgs, split: Split) -> Result<Vec<BiTemporalSample>> {
    if d.synthetic {
        let cfg = match split {
            Split::Train => run.synth.clone(),
            _ => test_synth(&run.synth),
        };
        return Ok(synthesize_benchmark(&cfg)?);
    }
    Ok(load_dataset(&run.dataset(split)?)?)
}

fn write_run_files(run: &RunConfig, out: &Path, command: &str) -> Result<String> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    run.save(&out.join("run_config.toml"))?;
    let hash = run.hash();
    let manifest = format!("command = \"{command}\"\nconfig_hash = \"{hash}\"\n");
    std::fs::write(out.join("manifest.toml"), manifest).map_err(|e| Error::io(out.join("manifest.toml"), e))?;
    Ok(hash)
}

pub fn synth(
    cfg: &ConfigArgs,
    n: Option<usize>,
    tile: Option<usize>,
    shift: Option<f64>,
    change_rate: Option<f64>,
    split: &str,
    out: &Path,
) -> Result<()> {
    let mut run = resolve(cfg)?;
    if let Some(n) = n {
        run.synth.n_samples = n;
    }
    if let Some(t) = tile {
        run.synth.tile_size = t;
    }
    if let Some(s) = shift {
        run.synth.shift_strength = s;
    }
    if let Some(c) = change_rate {
        run.synth.change_rate = c;
    }
    run.validate()?;
    let split: Split = split.parse()?;
    let files = data::write_synthetic(&run.synth, out, split, &run.hash())?;
    println!("wrote {} files under {}", files.len(), out.join(split.name()).display());
    Ok(())
}

pub fn tile_scenes(input: &Path, out: &Path, split: &str, tile: usize, stride: usize) -> Result<()> {
    let split: Split = split.parse()?;
    let scenes = load_triples(input, None, false)?;
    let mut tiles = Vec::new();
    for s in &scenes {
        tiles.extend(data::tile_sample(s, tile, stride)?);
    }
    write_dataset(&tiles, out, split)?;
    println!("{} scenes -> {} tiles of {tile}x{tile}", scenes.len(), tiles.len());
    Ok(())
}

pub fn train(cfg: &ConfigArgs, t: &TrainArgs, d: &DataArgs, resume: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let mut run = resolve(cfg)?;
    apply_train(&mut run, t)?;
    apply_data(&mut run, d)?;
    if let Some(o) = out {
        run.output.dir = o.to_string_lossy().into_owned();
    }
    let out = run.output_dir();
    let train_set = split_data(&run, d, Split::Train)?;
    let val_set = match run.data.val_split {
        Some(split) => Some(split_data(&run, d, split)?),
        None => None,
    };
    let hash = write_run_files(&run, &out, "train")?;
    let opts = TrainOptions {
        out_dir: &out,
        validation: val_set.as_deref(),
        config_hash: Some(hash),
    };
    let report = match resume {
        Some(ckpt) => {
            let (mut state, _) = checkpoint::load(ckpt)?;
            state.set_epochs(run.train.epochs);
            log::info!("resuming at epoch {} step {}", state.epoch(), state.step());
            trainer::continue_training(&mut state, &train_set, &opts)?
        }
        None => trainer::train(&run.train_config(), &train_set, &opts)?.1,
    };
    println!("trained {} steps; final checkpoint {}", report.steps, report.final_checkpoint.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
pub fn eval(
    cfg: &ConfigArgs,
    ckpt: &Path,
    d: &DataArgs,
    split: &str,
    threshold: Option<f64>,
    aggregation: Option<&str>,
    fusion: Option<&str>,
    tags: Option<&str>,
    out: Option<&Path>,
) -> Result<()> {
    let mut run = resolve(cfg)?;
    apply_data(&mut run, d)?;
    let threshold = threshold.unwrap_or(run.eval.threshold);
    sdacd::domain::validate_threshold(threshold)?;
    let aggregation = match aggregation {
        Some(a) => a.parse()?,
        None => run.eval.aggregation,
    };
    let (state, header) = checkpoint::load(ckpt)?;
    let predictor = state.predictor_with(
        fusion.map(str::parse).transpose()?,
        tags.map(str::parse).transpose()?,
    )?;
    let samples = split_data(&run, d, split.parse()?)?;
    let e = evaluate(&predictor, &samples, threshold, aggregation)?;
    let out = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| ckpt.parent().unwrap_or(Path::new(".")).join("eval"));
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    write_per_image_csv(&out.join("per_image.csv"), &e)?;
    Summary::new(&e, header.config_hash).write(&out.join("summary.toml"))?;
    println!(
        "P = {:.4}  R = {:.4}  F1 = {:.4}  ({} images, threshold {threshold})",
        e.metrics.precision,
        e.metrics.recall,
        e.metrics.f1,
        e.per_image.len()
    );
    Ok(())
}

pub enum Ablation {
    Pairs,
    Fusion,
    Modules,
}

pub fn ablate(kind: Ablation, cfg: &ConfigArgs, t: &TrainArgs, d: &DataArgs, out: Option<&Path>) -> Result<()> {
    let mut run = resolve(cfg)?;
    apply_train(&mut run, t)?;
    apply_data(&mut run, d)?;
    if let Some(o) = out {
        run.output.dir = o.to_string_lossy().into_owned();
    }
    let out = run.output_dir();
    let train_set = split_data(&run, d, Split::Train)?;
    let test_set = split_data(&run, d, run.data.test_split)?;
    let (name, kind) = match kind {
        Ablation::Pairs => ("ablate-pairs", AblationKind::Pairs),
        Ablation::Fusion => ("ablate-fusion", AblationKind::Fusion),
        Ablation::Modules => ("ablate-modules", AblationKind::Modules),
    };
    write_run_files(&run, &out, name)?;
    let base = run.train_config();
    let agg = run.eval.aggregation;
    let rows: Vec<ArmResult> = match kind {
        AblationKind::Pairs => experiments::ablate_pairs(&base, &train_set, &test_set, &out, agg)?,
        AblationKind::Fusion => experiments::ablate_fusion(&base, &train_set, &test_set, &out, agg)?,
        AblationKind::Modules => experiments::ablate_modules(&base, &train_set, &test_set, &out, agg)?,
    };
    experiments::write_report(&out.join("report.csv"), kind, &rows)?;
    print!("{}", experiments::format_table(kind, &rows));
    Ok(())
}

fn tensor_png(t: &sdacd::grad::Tensor, path: &Path) -> Result<()> {
    let img = Image::from_tensor(t, 0, RangeTag::SignedUnit)?;
    data::save_png(&image_to_rgb(&img)?.into(), path)?;
    Ok(())
}

pub fn transform(ckpt: &Path, d: &DataArgs, split: &str, cycle: bool, out: &Path) -> Result<()> {
    let mut run = RunConfig::default();
    apply_data(&mut run, d)?;
    let (state, _) = checkpoint::load(ckpt)?;
    let ia = state
        .image_adaptation()
        .ok_or_else(|| Error::Checkpoint(format!("{} has no image adaptation generators", ckpt.display())))?;
    let samples = split_data(&run, d, split.parse()?)?;
    let originals = out.join("originals");
    std::fs::create_dir_all(&originals).map_err(|e| Error::io(&originals, e))?;
    for s in &samples {
        let t = ia.translations(&s.pre.to_tensor(), &s.post.to_tensor())?;
        tensor_png(&t.pre_to_post, &out.join(format!("{}_pre_to_post.png", s.id)))?;
        tensor_png(&t.post_to_pre, &out.join(format!("{}_post_to_pre.png", s.id)))?;
        if cycle {
            tensor_png(&t.pre_cycle, &out.join(format!("{}_pre_cycle.png", s.id)))?;
            tensor_png(&t.post_cycle, &out.join(format!("{}_post_cycle.png", s.id)))?;
        }
        data::save_png(&image_to_rgb(&s.pre)?.into(), &originals.join(format!("{}_pre.png", s.id)))?;
        data::save_png(&image_to_rgb(&s.post)?.into(), &originals.join(format!("{}_post.png", s.id)))?;
    }
    println!("translated {} pairs into {}", samples.len(), out.display());
    Ok(())
}

pub fn plot(
    log_path: Option<&Path>,
    ckpt: Option<&Path>,
    d: &DataArgs,
    split: &str,
    ids: Option<&str>,
    out: &Path,
) -> Result<()> {
    if log_path.is_none() && ckpt.is_none() {
        return Err(Error::Config("nothing to plot: pass --log and/or --checkpoint".into()).into());
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    if let Some(p) = log_path {
        if !p.exists() {
            return Err(Error::Config(format!("training log {} does not exist", p.display())).into());
        }
        let curves = raster::read_loss_log(p)?;
        raster::save_rgb(&raster::plot_loss_curves(&curves, 640, 400), &out.join("loss_curves.png"))?;
        println!("plotted {} series", curves.series.len());
    }
    if let Some(ckpt) = ckpt {
        let mut run = RunConfig::default();
        apply_data(&mut run, d)?;
        let (state, _) = checkpoint::load(ckpt)?;
        let samples = split_data(&run, d, split.parse()?)?;
        let by_id: BTreeMap<&str, &BiTemporalSample> = samples.iter().map(|s| (s.id.as_str(), s)).collect();
        let chosen: Vec<&BiTemporalSample> = match ids {
            Some(list) => list
                .split(',')
                .map(str::trim)
                .map(|id| {
                    by_id
                        .get(id)
                        .copied()
                        .ok_or_else(|| Error::Config(format!("no sample with id `{id}`")))
                })
                .collect::<std::result::Result<_, _>>()?,
            None => samples.iter().collect(),
        };
        let predictor = state.predictor();
        let mut written: Vec<PathBuf> = Vec::new();
        for s in chosen {
            let prob = predictor.predict(s)?;
            let translated = match state.image_adaptation() {
                Some(ia) => {
                    let t = ia.translations(&s.pre.to_tensor(), &s.post.to_tensor())?;
                    Some((
                        Image::from_tensor(&t.pre_to_post, 0, RangeTag::SignedUnit)?,
                        Image::from_tensor(&t.post_to_pre, 0, RangeTag::SignedUnit)?,
                    ))
                }
                None => None,
            };
            let mut tiles = vec![PanelTile::Image(&s.pre), PanelTile::Image(&s.post)];
            if let Some((a, b)) = &translated {
                tiles.push(PanelTile::Image(a));
                tiles.push(PanelTile::Image(b));
            }
            tiles.push(PanelTile::Mask(&s.gt));
            tiles.push(PanelTile::Prob(&prob));
            let p = out.join(format!("panel_{}.png", s.id));
            raster::save_rgb(&raster::panel(&tiles)?, &p)?;
            written.push(p);
        }
        println!("wrote {} panels", written.len());
    }
    Ok(())
}

pub fn oracle(gain: f32, out: &Path) -> Result<()> {
    let state = trainer::difference_oracle(gain)?;
    let hash = state.config().hash();
    checkpoint::save(&state, out, &hash)?;
    println!("wrote oracle checkpoint {}", out.display());
    Ok(())
}
