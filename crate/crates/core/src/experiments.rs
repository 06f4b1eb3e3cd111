//! Ablation protocols and the synthetic directional experiment.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{synthesize_benchmark, SyntheticConfig};
use crate::domain::{BiTemporalSample, DomainTag, TagSet};
use crate::error::{Error, Result};
use crate::feature_adaptation::FusionStrategy;
use crate::metrics::{evaluate, write_per_image_csv, Aggregation, Metrics, Summary};
use crate::trainer::{train, TrainConfig, TrainOptions};

/// One trained and evaluated configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmResult {
    pub label: String,
    pub config: TrainConfig,
    pub config_hash: String,
    pub metrics: Metrics,
    pub checkpoint: PathBuf,
}

/// Trains `cfg` into `dir`, evaluates on `test` and writes
/// `per_image.csv` and `summary.toml` next to the checkpoint.
pub fn run_arm(
    label: impl Into<String>,
    cfg: &TrainConfig,
    train_set: &[BiTemporalSample],
    test_set: &[BiTemporalSample],
    dir: &Path,
    aggregation: Aggregation,
) -> Result<ArmResult> {
    let label = label.into();
    let hash = cfg.hash();
    log::info!("arm `{label}`: training into {}", dir.display());
    let (state, report) = train(
        cfg,
        train_set,
        &TrainOptions {
            out_dir: dir,
            validation: None,
            config_hash: Some(hash.clone()),
        },
    )?;
    let eval = evaluate(&state.predictor(), test_set, cfg.threshold, aggregation)?;
    write_per_image_csv(&dir.join("per_image.csv"), &eval)?;
    Summary::new(&eval, hash.clone()).write(&dir.join("summary.toml"))?;
    log::info!("arm `{label}`: F1 {:.4}", eval.metrics.f1);
    Ok(ArmResult {
        label,
        config: cfg.clone(),
        config_hash: hash,
        metrics: eval.metrics,
        checkpoint: report.final_checkpoint,
    })
}

fn tag_slug(tags: &TagSet) -> String {
    tags.tags().iter().map(|t| t.name()).collect::<Vec<_>>().join("+")
}

/// One model per nonempty subset of the three pairs, in the order
/// original, pre-domain, post-domain, then pairs of them, then all three.
pub fn ablate_pairs(
    base: &TrainConfig,
    train_set: &[BiTemporalSample],
    test_set: &[BiTemporalSample],
    out: &Path,
    aggregation: Aggregation,
) -> Result<Vec<ArmResult>> {
    TagSet::nonempty_subsets()
        .into_iter()
        .enumerate()
        .map(|(i, tags)| {
            let cfg = TrainConfig {
                active_tags: tags.clone(),
                ia_enabled: base.ia_enabled || tags.needs_translation(),
                ..base.clone()
            };
            let dir = out.join(format!("{}_{}", i + 1, tag_slug(&tags)));
            run_arm(tags.to_string(), &cfg, train_set, test_set, &dir, aggregation)
        })
        .collect()
}

/// Output fusion then feature fusion, all three pairs, same seed and data.
pub fn ablate_fusion(
    base: &TrainConfig,
    train_set: &[BiTemporalSample],
    test_set: &[BiTemporalSample],
    out: &Path,
    aggregation: Aggregation,
) -> Result<Vec<ArmResult>> {
    [FusionStrategy::Output, FusionStrategy::Feature]
        .into_iter()
        .map(|fusion| {
            let cfg = TrainConfig {
                fusion,
                active_tags: TagSet::all(),
                ia_enabled: true,
                ..base.clone()
            };
            let label = format!("{fusion} fusion");
            run_arm(label, &cfg, train_set, test_set, &out.join(fusion.to_string()), aggregation)
        })
        .collect()
}

/// Baseline, baseline + image adaptation, baseline + both modules.
pub fn module_configs(base: &TrainConfig) -> [(&'static str, TrainConfig); 3] {
    [
        (
            "baseline",
            TrainConfig {
                ia_enabled: false,
                fa_enabled: false,
                active_tags: TagSet::original_only(),
                ..base.clone()
            },
        ),
        (
            "ia",
            TrainConfig {
                ia_enabled: true,
                fa_enabled: false,
                active_tags: TagSet::all(),
                ..base.clone()
            },
        ),
        (
            "ia_fa",
            TrainConfig {
                ia_enabled: true,
                fa_enabled: true,
                active_tags: TagSet::all(),
                ..base.clone()
            },
        ),
    ]
}

pub fn ablate_modules(
    base: &TrainConfig,
    train_set: &[BiTemporalSample],
    test_set: &[BiTemporalSample],
    out: &Path,
    aggregation: Aggregation,
) -> Result<Vec<ArmResult>> {
    module_configs(base)
        .into_iter()
        .map(|(label, cfg)| run_arm(label, &cfg, train_set, test_set, &out.join(label), aggregation))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationKind {
    Pairs,
    Fusion,
    Modules,
}

const CHECK: &str = "✓";

/// CSV report; indicator columns carry a check mark or stay empty.
pub fn write_report(path: &Path, kind: AblationKind, rows: &[ArmResult]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mark = |b: bool| if b { CHECK } else { "" };
    let header = match kind {
        AblationKind::Pairs => "original,pre_domain,post_domain",
        AblationKind::Fusion => "fusion",
        AblationKind::Modules => "baseline,ia,fa",
    };
    let mut text = format!("{header},precision,recall,f1,config_hash\n");
    for r in rows {
        let key = match kind {
            AblationKind::Pairs => DomainTag::ALL
                .iter()
                .map(|&t| mark(r.config.active_tags.contains(t)))
                .collect::<Vec<_>>()
                .join(","),
            AblationKind::Fusion => r.config.fusion.to_string(),
            AblationKind::Modules => format!(
                "{},{},{}",
                CHECK,
                mark(r.config.ia_enabled),
                mark(r.config.fa_enabled)
            ),
        };
        let m = r.metrics;
        text.push_str(&format!("{key},{:.6},{:.6},{:.6},{}\n", m.precision, m.recall, m.f1, r.config_hash));
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Percent table for terminal output.
pub fn format_table(kind: AblationKind, rows: &[ArmResult]) -> String {
    let mark = |b: bool| if b { CHECK } else { " " };
    let mut out = match kind {
        AblationKind::Pairs => String::from("I   II  III | P (%)  R (%)  F (%)\n"),
        AblationKind::Fusion => String::from("fusion   | P (%)  R (%)  F (%)\n"),
        AblationKind::Modules => String::from("base IA FA | P (%)  R (%)  F (%)\n"),
    };
    for r in rows {
        let key = match kind {
            AblationKind::Pairs => DomainTag::ALL
                .iter()
                .map(|&t| format!("{:<3}", mark(r.config.active_tags.contains(t))))
                .collect::<Vec<_>>()
                .join(" "),
            AblationKind::Fusion => format!("{:<8}", r.config.fusion.to_string()),
            AblationKind::Modules => format!(
                "{:<4} {:<2} {:<2}",
                CHECK,
                mark(r.config.ia_enabled),
                mark(r.config.fa_enabled)
            ),
        };
        let m = r.metrics;
        out.push_str(&format!(
            "{key} | {:6.2} {:6.2} {:6.2}\n",
            100.0 * m.precision,
            100.0 * m.recall,
            100.0 * m.f1
        ));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DirectionalConfig {
    pub seeds: Vec<u64>,
    pub n_train: usize,
    pub n_test: usize,
    pub tile_size: usize,
    pub shift_strength: f64,
    /// Training settings shared by every arm; seeds are overwritten.
    pub train: TrainConfig,
}

impl Default for DirectionalConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            n_train: 200,
            n_test: 50,
            tile_size: 64,
            shift_strength: 1.0,
            train: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub baseline_control: f64,
    pub baseline: f64,
    pub ia: f64,
    pub ia_fa: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionalReport {
    pub per_seed: Vec<SeedResult>,
    pub mean: SeedResult,
}

impl DirectionalReport {
    /// Control minus shifted baseline F1.
    pub fn shift_penalty(&self) -> f64 {
        self.mean.baseline_control - self.mean.baseline
    }
}

fn scene_sets(cfg: &DirectionalConfig, seed: u64, shift: f64) -> Result<(Vec<BiTemporalSample>, Vec<BiTemporalSample>)> {
    let base = SyntheticConfig {
        tile_size: cfg.tile_size,
        shift_strength: shift,
        ..Default::default()
    };
    // disjoint scene indices between train and test
    let train = synthesize_benchmark(&SyntheticConfig {
        n_samples: cfg.n_train,
        seed: seed.wrapping_mul(1_000_003),
        ..base.clone()
    })?;
    let test = synthesize_benchmark(&SyntheticConfig {
        n_samples: cfg.n_test,
        seed: seed.wrapping_mul(1_000_003).wrapping_add(cfg.n_train as u64),
        ..base
    })?;
    Ok((train, test))
}

/// Baseline on an unshifted control and baseline, IA and IA + FA on the
/// shifted benchmark, per seed. The control uses the same scenes.
pub fn directional_experiment(cfg: &DirectionalConfig, out: &Path) -> Result<DirectionalReport> {
    if cfg.seeds.is_empty() {
        return Err(Error::Config("directional experiment needs at least one seed".into()));
    }
    let mut per_seed = Vec::new();
    for &seed in &cfg.seeds {
        let base = TrainConfig {
            seed,
            ..cfg.train.clone()
        };
        let [(_, baseline), (_, ia), (_, ia_fa)] = module_configs(&base);
        let dir = out.join(format!("seed_{seed}"));
        let (ctrl_train, ctrl_test) = scene_sets(cfg, seed, 0.0)?;
        let control = run_arm("baseline_control", &baseline, &ctrl_train, &ctrl_test, &dir.join("baseline_control"), Aggregation::Micro)?;
        let (train_set, test_set) = scene_sets(cfg, seed, cfg.shift_strength)?;
        let f1 = |label: &str, c: &TrainConfig| -> Result<f64> {
            Ok(run_arm(label, c, &train_set, &test_set, &dir.join(label), Aggregation::Micro)?.metrics.f1)
        };
        let r = SeedResult {
            seed,
            baseline_control: control.metrics.f1,
            baseline: f1("baseline", &baseline)?,
            ia: f1("ia", &ia)?,
            ia_fa: f1("ia_fa", &ia_fa)?,
        };
        log::info!("seed {seed}: {r:?}");
        per_seed.push(r);
    }
    let n = per_seed.len() as f64;
    let mean = |f: fn(&SeedResult) -> f64| per_seed.iter().map(f).sum::<f64>() / n;
    let mean = SeedResult {
        seed: 0,
        baseline_control: mean(|r| r.baseline_control),
        baseline: mean(|r| r.baseline),
        ia: mean(|r| r.ia),
        ia_fa: mean(|r| r.ia_fa),
    };
    Ok(DirectionalReport { per_seed, mean })
}
