//! Alternating eight-phase optimisation of the full model, training loop,
//! inference and parameter census.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sdacd_grad::{clip_global_norm, Adam, Tensor, Var};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::canonical_hash;
use crate::data::augment;
use crate::domain::{BiTemporalSample, ChangeProbMap, DomainTag, TagSet};
use crate::error::{Error, Result};
use crate::feature_adaptation::{
    difference, domain_cross_entropy, uniform_cross_entropy, BackboneConfig, Classifier,
    DomainDiscriminator, Extractor, FusionStrategy,
};
use crate::image_adaptation::{
    DiscriminatorConfig, DiscriminatorRole, GanForm, Generator, GeneratorConfig, GeneratorRole,
    ImageAdaptation, ImagePool, PhaseObjective,
};
use crate::metrics::{evaluate, Aggregation, ChangePredictor, Metrics};
use crate::nn::{Bound, Network, ParamSet};
use crate::objectives::{class_weights, hybrid_loss_var, total_objective, FaTerm, LossBundle, LossWeights, DICE_SMOOTH};

pub const LOG_HEADER: &str = "step,epoch,cyc,adv_i,adv_f_disc,adv_f_conf,cd_0,cd_1,cd_2,cd_final,total";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Linear decay to zero over the configured epochs.
    LinearDecay,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub generator: GeneratorConfig,
    pub image_discriminator: DiscriminatorConfig,
    pub backbone: BackboneConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub loss_weights: LossWeights,
    pub gan_form: GanForm,
    pub fusion: FusionStrategy,
    pub active_tags: TagSet,
    pub ia_enabled: bool,
    pub fa_enabled: bool,
    /// Global gradient-norm bound per phase; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub replay_buffer: bool,
    pub lr_schedule: LrSchedule,
    pub augment: bool,
    /// Epochs between intermediate checkpoints; 0 writes only the final one.
    pub checkpoint_interval: usize,
    pub threshold: f64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            epochs: 10,
            batch_size: 4,
            seed: 0,
            loss_weights: LossWeights::default(),
            gan_form: GanForm::LeastSquares,
            fusion: FusionStrategy::Feature,
            active_tags: TagSet::all(),
            ia_enabled: true,
            fa_enabled: true,
            grad_clip: Some(5.0),
            replay_buffer: false,
            lr_schedule: LrSchedule::Constant,
            augment: true,
            checkpoint_interval: 0,
            threshold: crate::domain::DEFAULT_THRESHOLD,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Baseline: the backbone alone on the original pair.
    pub fn baseline() -> Self {
        Self {
            ia_enabled: false,
            fa_enabled: false,
            active_tags: TagSet::original_only(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("learning rate must be > 0, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::Config(format!("gradient clip must be > 0, got {c}")));
            }
        }
        if !self.ia_enabled && !self.active_tags.contains(DomainTag::Original) {
            return Err(Error::Config(
                "image adaptation is disabled, so the original pair must be active".into(),
            ));
        }
        let m = &self.model;
        if m.generator.width == 0 || m.image_discriminator.width == 0 || m.backbone.width == 0 || m.backbone.discriminator_width == 0 {
            return Err(Error::Config("network widths must be >= 1".into()));
        }
        crate::domain::validate_threshold(self.threshold)?;
        self.loss_weights.validate()
    }

    /// Pairs actually used: without image adaptation only the original pair
    /// exists.
    pub fn effective_tags(&self) -> TagSet {
        if self.ia_enabled {
            self.active_tags.clone()
        } else {
            TagSet::original_only()
        }
    }

    /// Generators are trained only when some active pair needs them.
    pub fn ia_active(&self) -> bool {
        self.ia_enabled && self.effective_tags().needs_translation()
    }

    /// The domain discriminator needs at least two pairs to tell apart.
    pub fn fa_active(&self) -> bool {
        self.fa_enabled && self.effective_tags().len() >= 2
    }

    pub fn hash(&self) -> String {
        canonical_hash(self)
    }
}

/// Independently updatable parameter groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Group {
    GPre,
    GPost,
    DPre,
    DPost,
    Extractor,
    /// Pair head and fusion head.
    Classifier,
    DomainDiscriminator,
}

impl Group {
    pub const ALL: [Group; 7] = [
        Group::GPre,
        Group::GPost,
        Group::DPre,
        Group::DPost,
        Group::Extractor,
        Group::Classifier,
        Group::DomainDiscriminator,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Group::GPre => "g_pre",
            Group::GPost => "g_post",
            Group::DPre => "d_pre",
            Group::DPost => "d_post",
            Group::Extractor => "extractor",
            Group::Classifier => "classifier",
            Group::DomainDiscriminator => "d_f",
        }
    }

    pub fn segments(self) -> &'static [Segment] {
        match self {
            Group::GPre => &[Segment::GPre],
            Group::GPost => &[Segment::GPost],
            Group::DPre => &[Segment::DPre],
            Group::DPost => &[Segment::DPost],
            Group::Extractor => &[Segment::Extractor],
            Group::Classifier => &[Segment::Classifier, Segment::FusionHead],
            Group::DomainDiscriminator => &[Segment::DomainDiscriminator],
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Storage unit of parameters and optimizer state; one per network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Segment {
    GPre,
    GPost,
    DPre,
    DPost,
    Extractor,
    Classifier,
    FusionHead,
    DomainDiscriminator,
}

impl Segment {
    pub const ALL: [Segment; 8] = [
        Segment::GPre,
        Segment::GPost,
        Segment::DPre,
        Segment::DPost,
        Segment::Extractor,
        Segment::Classifier,
        Segment::FusionHead,
        Segment::DomainDiscriminator,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Segment::GPre => "g_pre",
            Segment::GPost => "g_post",
            Segment::DPre => "d_pre",
            Segment::DPost => "d_post",
            Segment::Extractor => "extractor",
            Segment::Classifier => "classifier",
            Segment::FusionHead => "fusion_head",
            Segment::DomainDiscriminator => "domain_discriminator",
        }
    }

    pub fn from_name(name: &str) -> Option<Segment> {
        Segment::ALL.into_iter().find(|s| s.name() == name)
    }
}

/// The eight update phases, in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Phase {
    GPre,
    GPost,
    DPre,
    DPost,
    Extractor,
    PairHead,
    DomainDiscriminator,
    Fusion,
}

impl Phase {
    pub const ALL: [Phase; 8] = [
        Phase::GPre,
        Phase::GPost,
        Phase::DPre,
        Phase::DPost,
        Phase::Extractor,
        Phase::PairHead,
        Phase::DomainDiscriminator,
        Phase::Fusion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Phase::GPre => "g_pre",
            Phase::GPost => "g_post",
            Phase::DPre => "d_pre",
            Phase::DPost => "d_post",
            Phase::Extractor => "extractor",
            Phase::PairHead => "pair_head",
            Phase::DomainDiscriminator => "domain_discriminator",
            Phase::Fusion => "fusion",
        }
    }

    /// Groups this phase may modify.
    pub fn designated(self) -> &'static [Group] {
        match self {
            Phase::GPre => &[Group::GPre],
            Phase::GPost => &[Group::GPost],
            Phase::DPre => &[Group::DPre],
            Phase::DPost => &[Group::DPost],
            Phase::Extractor => &[Group::Extractor],
            Phase::PairHead => &[Group::Classifier],
            Phase::DomainDiscriminator => &[Group::DomainDiscriminator],
            Phase::Fusion => &[Group::Classifier, Group::Extractor],
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HookPoint {
    Before,
    After,
}

/// Observer called around every executed phase.
pub type PhaseHook<'a> = &'a mut dyn FnMut(Phase, HookPoint, &ModelState);

/// Which image of the batch feeds a pair slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Source {
    Pre,
    Post,
    PostToPre,
    PreToPost,
}

fn pair_sources(tag: DomainTag) -> (Source, Source) {
    match tag {
        DomainTag::Original => (Source::Pre, Source::Post),
        DomainTag::PreDomain => (Source::Pre, Source::PostToPre),
        DomainTag::PostDomain => (Source::PreToPost, Source::Post),
    }
}

struct ImageSet {
    pre: Tensor,
    post: Tensor,
    post_to_pre: Option<Tensor>,
    pre_to_post: Option<Tensor>,
}

impl ImageSet {
    fn get(&self, s: Source) -> Result<&Tensor> {
        let missing = || Error::PipelineOrder(format!("translated images {s:?} were not computed"));
        match s {
            Source::Pre => Ok(&self.pre),
            Source::Post => Ok(&self.post),
            Source::PostToPre => self.post_to_pre.as_ref().ok_or_else(missing),
            Source::PreToPost => self.pre_to_post.as_ref().ok_or_else(missing),
        }
    }
}

/// Samples stacked into NCHW tensors.
struct Batch {
    pre: Tensor,
    post: Tensor,
    labels: Vec<u8>,
}

fn stack_batch(samples: &[BiTemporalSample]) -> Result<Batch> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Config("training batch is empty".into()))?;
    let (h, w) = (first.height(), first.width());
    for s in samples {
        s.validate()?;
        if s.height() != h || s.width() != w {
            return Err(Error::Shape(format!(
                "batch mixes {h}x{w} and {}x{} samples (`{}`)",
                s.height(),
                s.width(),
                s.id
            )));
        }
    }
    Generator::check_input(h, w, first.pre.channels())?;
    Extractor::check_input(h, w)?;
    let pre: Vec<Tensor> = samples.iter().map(|s| s.pre.to_tensor()).collect();
    let post: Vec<Tensor> = samples.iter().map(|s| s.post.to_tensor()).collect();
    Ok(Batch {
        pre: Tensor::stack_batch(&pre.iter().collect::<Vec<_>>()),
        post: Tensor::stack_batch(&post.iter().collect::<Vec<_>>()),
        labels: samples.iter().flat_map(|s| s.gt.values().iter().copied()).collect(),
    })
}

fn segment_seed(seed: u64, segment: Segment) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 + segment as u64);
    rng
}

/// Replay pools for the two image discriminators (forward, reverse fakes).
#[derive(Debug, Clone)]
pub(crate) struct Pools {
    pub(crate) pre: [ImagePool; 2],
    pub(crate) post: [ImagePool; 2],
}

/// All networks, their optimizers, counters and the data RNG.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub(crate) config: TrainConfig,
    pub(crate) ia: Option<ImageAdaptation>,
    pub(crate) extractor: Extractor,
    pub(crate) classifier: Classifier,
    pub(crate) domain_discriminator: Option<DomainDiscriminator>,
    pub(crate) optimizers: BTreeMap<Segment, Adam>,
    pub(crate) epoch: usize,
    pub(crate) step: u64,
    pub(crate) rng: ChaCha8Rng,
    pub(crate) pools: Option<Pools>,
}

impl ModelState {
    /// Fresh Kaiming-initialised model. Every network draws from its own
    /// seeded stream, so configurations that share a network also share its
    /// initial weights.
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let m = &config.model;
        let tags = config.effective_tags();
        let ia = config.ia_active().then(|| ImageAdaptation {
            g_pre: Generator::new(GeneratorRole::ToPre, &m.generator, &mut segment_seed(config.seed, Segment::GPre)),
            g_post: Generator::new(GeneratorRole::ToPost, &m.generator, &mut segment_seed(config.seed, Segment::GPost)),
            d_pre: crate::image_adaptation::ImageDiscriminator::new(
                DiscriminatorRole::Pre,
                &m.image_discriminator,
                &mut segment_seed(config.seed, Segment::DPre),
            ),
            d_post: crate::image_adaptation::ImageDiscriminator::new(
                DiscriminatorRole::Post,
                &m.image_discriminator,
                &mut segment_seed(config.seed, Segment::DPost),
            ),
        });
        let extractor = Extractor::new(&m.backbone, &mut segment_seed(config.seed, Segment::Extractor));
        let classifier = Classifier::new(&m.backbone, tags.len(), &mut segment_seed(config.seed, Segment::Classifier));
        let domain_discriminator = config.fa_active().then(|| {
            DomainDiscriminator::new(tags.len(), &m.backbone, &mut segment_seed(config.seed, Segment::DomainDiscriminator))
        });
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(0);
        let mut state = Self {
            config: config.clone(),
            ia,
            extractor,
            classifier,
            domain_discriminator,
            optimizers: BTreeMap::new(),
            epoch: 0,
            step: 0,
            rng,
            pools: None,
        };
        state.reset_optimizers();
        state.reset_pools();
        Ok(state)
    }

    pub(crate) fn reset_optimizers(&mut self) {
        let lr = self.current_lr() as f32;
        self.optimizers = Segment::ALL
            .into_iter()
            .filter_map(|s| self.segment(s).map(|p| (s, Adam::new(lr, p.len()))))
            .collect();
    }

    pub(crate) fn reset_pools(&mut self) {
        self.pools = (self.config.replay_buffer && self.ia.is_some()).then(|| Pools {
            pre: [ImagePool::default(), ImagePool::default()],
            post: [ImagePool::default(), ImagePool::default()],
        });
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Changes the total epoch budget, e.g. before resuming.
    pub fn set_epochs(&mut self, epochs: usize) {
        self.config.epochs = epochs;
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn image_adaptation(&self) -> Option<&ImageAdaptation> {
        self.ia.as_ref()
    }

    pub fn extractor(&self) -> &Extractor {
        &self.extractor
    }

    pub fn classifier(&self) -> &Classifier {
        &self.classifier
    }

    pub fn domain_discriminator(&self) -> Option<&DomainDiscriminator> {
        self.domain_discriminator.as_ref()
    }

    pub fn segment(&self, s: Segment) -> Option<&ParamSet> {
        Some(match s {
            Segment::GPre => self.ia.as_ref()?.g_pre.params(),
            Segment::GPost => self.ia.as_ref()?.g_post.params(),
            Segment::DPre => self.ia.as_ref()?.d_pre.params(),
            Segment::DPost => self.ia.as_ref()?.d_post.params(),
            Segment::Extractor => self.extractor.params(),
            Segment::Classifier => self.classifier.pair_head.params(),
            Segment::FusionHead => self.classifier.fusion_head.params(),
            Segment::DomainDiscriminator => self.domain_discriminator.as_ref()?.params(),
        })
    }

    pub fn segment_mut(&mut self, s: Segment) -> Option<&mut ParamSet> {
        Some(match s {
            Segment::GPre => self.ia.as_mut()?.g_pre.params_mut(),
            Segment::GPost => self.ia.as_mut()?.g_post.params_mut(),
            Segment::DPre => self.ia.as_mut()?.d_pre.params_mut(),
            Segment::DPost => self.ia.as_mut()?.d_post.params_mut(),
            Segment::Extractor => self.extractor.params_mut(),
            Segment::Classifier => self.classifier.pair_head.params_mut(),
            Segment::FusionHead => self.classifier.fusion_head.params_mut(),
            Segment::DomainDiscriminator => self.domain_discriminator.as_mut()?.params_mut(),
        })
    }

    pub fn optimizer(&self, s: Segment) -> Option<&Adam> {
        self.optimizers.get(&s)
    }

    /// Groups present in this configuration.
    pub fn groups(&self) -> Vec<Group> {
        Group::ALL
            .into_iter()
            .filter(|g| g.segments().iter().all(|&s| self.segment(s).is_some()))
            .collect()
    }

    /// SHA-256 over a group's parameters.
    pub fn group_checksum(&self, g: Group) -> Option<[u8; 32]> {
        let mut h = Sha256::new();
        for &s in g.segments() {
            self.segment(s)?.feed_digest(&mut h);
        }
        Some(h.finalize().into())
    }

    /// SHA-256 over a group's optimizer moments and step count.
    pub fn optimizer_checksum(&self, g: Group) -> Option<[u8; 32]> {
        let mut h = Sha256::new();
        for s in g.segments() {
            let opt = self.optimizers.get(s)?;
            h.update(opt.t.to_le_bytes());
            for (i, m) in opt.moments.iter().enumerate() {
                h.update((i as u64).to_le_bytes());
                if let Some((m, v)) = m {
                    for x in m.data().iter().chain(v.data()) {
                        h.update(x.to_le_bytes());
                    }
                }
            }
        }
        Some(h.finalize().into())
    }

    fn current_lr(&self) -> f64 {
        let lr = self.config.learning_rate;
        match self.config.lr_schedule {
            LrSchedule::Constant => lr,
            LrSchedule::LinearDecay => {
                let e = self.config.epochs.max(1) as f64;
                lr * (1.0 - self.epoch as f64 / e).max(0.0)
            }
        }
    }

    fn set_lr(&mut self) {
        let lr = self.current_lr() as f32;
        for opt in self.optimizers.values_mut() {
            opt.lr = lr;
        }
    }

    /// Clips, applies and checks one phase's update.
    fn apply(&mut self, phase: Phase, loss: &Var, updates: Vec<(Segment, Vec<Option<Tensor>>)>) -> Result<()> {
        let abort = |reason: String| Error::TrainingAborted {
            phase: phase.name().to_string(),
            reason,
        };
        let value = loss.value().item();
        if !value.is_finite() {
            return Err(abort(format!("loss is {value}")));
        }
        let mut flat: Vec<Option<Tensor>> = updates.iter().flat_map(|(_, g)| g.iter().cloned()).collect();
        let norm = match self.config.grad_clip {
            Some(c) => clip_global_norm(&mut flat, c as f32),
            None => clip_global_norm(&mut flat, f32::INFINITY),
        };
        if !norm.is_finite() {
            return Err(abort(format!("gradient norm is {norm}")));
        }
        let mut rest = flat.into_iter();
        for (seg, grads) in updates {
            let grads: Vec<Option<Tensor>> = rest.by_ref().take(grads.len()).collect();
            let mut opt = self.optimizers.remove(&seg).expect("optimizer for every present segment");
            let params = self.segment_mut(seg).expect("segment present");
            let mut refs: Vec<&mut Tensor> = params.tensors_mut().iter_mut().collect();
            opt.step(&mut refs, &grads);
            let finite = params.all_finite();
            self.optimizers.insert(seg, opt);
            if !finite {
                return Err(abort(format!("non-finite parameter in `{}` after update", seg.name())));
            }
        }
        Ok(())
    }

    fn ia_phase(&mut self, phase: Phase, obj: PhaseObjective, seg: Segment) -> Result<()> {
        let grads = obj.loss.backward();
        let g = obj.bound.grads(&grads);
        self.apply(phase, &obj.loss, vec![(seg, g)])
    }

    /// Multi-scale features of every image a set of pairs needs.
    fn features(&self, bound: &Bound, images: &ImageSet, tags: &TagSet) -> Result<BTreeMap<Source, Vec<Var>>> {
        let mut out = BTreeMap::new();
        for &tag in tags.tags() {
            let (a, b) = pair_sources(tag);
            for s in [a, b] {
                if !out.contains_key(&s) {
                    let x = Var::constant(images.get(s)?.clone());
                    out.insert(s, self.extractor.forward(bound, &x));
                }
            }
        }
        Ok(out)
    }

    fn differences(feats: &BTreeMap<Source, Vec<Var>>, tags: &TagSet) -> Vec<Vec<Var>> {
        tags.tags()
            .iter()
            .map(|&t| {
                let (a, b) = pair_sources(t);
                difference(&feats[&a], &feats[&b])
            })
            .collect()
    }

    fn pair_probs(&self, bound: &Bound, diffs: &[Vec<Var>]) -> Vec<Var> {
        diffs
            .iter()
            .map(|d| self.classifier.pair_head.forward(bound, d).sigmoid())
            .collect()
    }

    fn fused_probs(&self, fusion: FusionStrategy, pair_bound: &Bound, fusion_bound: &Bound, diffs: &[Vec<Var>]) -> Var {
        match fusion {
            FusionStrategy::Feature => {
                let groups: Vec<&[Var]> = diffs.iter().map(Vec::as_slice).collect();
                self.classifier.fusion_head.forward(fusion_bound, &groups).sigmoid()
            }
            FusionStrategy::Output => {
                let probs = self.pair_probs(pair_bound, diffs);
                sdacd_grad::sum(&probs).scale(1.0 / probs.len() as f32)
            }
        }
    }

    fn images(&self, pre: &Tensor, post: &Tensor, tags: &TagSet) -> Result<ImageSet> {
        let mut set = ImageSet {
            pre: pre.clone(),
            post: post.clone(),
            post_to_pre: None,
            pre_to_post: None,
        };
        if tags.needs_translation() {
            let ia = self.ia.as_ref().ok_or_else(|| {
                Error::Checkpoint(format!("pairs {tags} need generators, but the model has none"))
            })?;
            if tags.contains(DomainTag::PreDomain) {
                set.post_to_pre = Some(ia.g_pre.apply(post)?);
            }
            if tags.contains(DomainTag::PostDomain) {
                set.pre_to_post = Some(ia.g_post.apply(pre)?);
            }
        }
        Ok(set)
    }

    /// One optimisation step over a batch; see [`Phase`] for the order.
    pub fn train_step(&mut self, batch: &[BiTemporalSample]) -> Result<LossBundle> {
        self.train_step_with_hook(batch, &mut |_, _, _| {})
    }

    pub fn train_step_with_hook(&mut self, batch: &[BiTemporalSample], hook: PhaseHook<'_>) -> Result<LossBundle> {
        let b = stack_batch(batch)?;
        let cfg = self.config.clone();
        let w = cfg.loss_weights;
        let tags = cfg.effective_tags();
        let mut bundle = LossBundle::default();
        let mut images = ImageSet {
            pre: b.pre.clone(),
            post: b.post.clone(),
            post_to_pre: None,
            pre_to_post: None,
        };

        if let Some(ia) = self.ia.clone() {
            hook(Phase::GPre, HookPoint::Before, self);
            let obj = ia.generator_objective(GeneratorRole::ToPre, &b.pre, &b.post, cfg.gan_form, &w)?;
            bundle.cyc = obj.cycle;
            bundle.adv_i = obj.adversarial;
            self.ia_phase(Phase::GPre, obj, Segment::GPre)?;
            hook(Phase::GPre, HookPoint::After, self);

            hook(Phase::GPost, HookPoint::Before, self);
            let ia = self.ia.clone().expect("present");
            let obj = ia.generator_objective(GeneratorRole::ToPost, &b.pre, &b.post, cfg.gan_form, &w)?;
            bundle.adv_i += obj.adversarial;
            self.ia_phase(Phase::GPost, obj, Segment::GPost)?;
            hook(Phase::GPost, HookPoint::After, self);

            let ia = self.ia.clone().expect("present");
            let t = ia.translations(&b.pre, &b.post)?;
            let (mut f_pre, mut r_pre) = (t.post_to_pre.clone(), t.pre_cycle.clone());
            let (mut f_post, mut r_post) = (t.pre_to_post.clone(), t.post_cycle.clone());
            if let Some(mut pools) = self.pools.take() {
                f_pre = pools.pre[0].query(&f_pre, &mut self.rng);
                r_pre = pools.pre[1].query(&r_pre, &mut self.rng);
                f_post = pools.post[0].query(&f_post, &mut self.rng);
                r_post = pools.post[1].query(&r_post, &mut self.rng);
                self.pools = Some(pools);
            }

            hook(Phase::DPre, HookPoint::Before, self);
            let obj = ia.discriminator_objective(DiscriminatorRole::Pre, &b.pre, &f_pre, &r_pre, cfg.gan_form, &w)?;
            self.ia_phase(Phase::DPre, obj, Segment::DPre)?;
            hook(Phase::DPre, HookPoint::After, self);

            hook(Phase::DPost, HookPoint::Before, self);
            let obj = ia.discriminator_objective(DiscriminatorRole::Post, &b.post, &f_post, &r_post, cfg.gan_form, &w)?;
            self.ia_phase(Phase::DPost, obj, Segment::DPost)?;
            hook(Phase::DPost, HookPoint::After, self);

            images.post_to_pre = Some(t.post_to_pre);
            images.pre_to_post = Some(t.pre_to_post);
        }

        let cw = class_weights(&b.labels);
        let cd = |p: &Var| hybrid_loss_var(p, &b.labels, cw, DICE_SMOOTH);
        let lambda_cd = w.lambda_cd as f32;
        let lambda_f = w.lambda_f as f32;
        let k = tags.len();
        let n = batch.len();
        let domain_labels: Vec<usize> = (0..k).flat_map(|i| std::iter::repeat_n(i, n)).collect();

        // extractor: per-pair change losses plus confusing the domain discriminator
        hook(Phase::Extractor, HookPoint::Before, self);
        {
            let e_bound = self.extractor.params().bind(true);
            let ph_bound = self.classifier.pair_head.params().bind(false);
            let feats = self.features(&e_bound, &images, &tags)?;
            let probs = self.pair_probs(&ph_bound, &Self::differences(&feats, &tags));
            let mut terms = Vec::with_capacity(k);
            for (tag, p) in tags.tags().iter().zip(&probs) {
                let l = cd(p);
                bundle.cd_per_pair[*tag as usize] = Some(l.value().item() as f64);
                terms.push(l);
            }
            let mut loss = sdacd_grad::sum(&terms).scale(lambda_cd);
            if let Some(d_f) = &self.domain_discriminator {
                let df_bound = d_f.params().bind(false);
                let dist = d_f.forward(&df_bound, &Var::cat(&probs, 0));
                let conf = uniform_cross_entropy(&dist)?;
                bundle.adv_f_conf = conf.value().item() as f64;
                loss = loss.add(&conf.scale(lambda_f));
            }
            let g = e_bound.grads(&loss.backward());
            self.apply(Phase::Extractor, &loss, vec![(Segment::Extractor, g)])?;
        }
        hook(Phase::Extractor, HookPoint::After, self);

        // pair head on the updated, now fixed, features
        hook(Phase::PairHead, HookPoint::Before, self);
        let fixed = self.features(&self.extractor.params().bind(false), &images, &tags)?;
        let fixed_diffs = Self::differences(&fixed, &tags);
        {
            let ph_bound = self.classifier.pair_head.params().bind(true);
            let probs = self.pair_probs(&ph_bound, &fixed_diffs);
            let terms: Vec<Var> = probs.iter().map(&cd).collect();
            let loss = sdacd_grad::sum(&terms).scale(lambda_cd);
            let g = ph_bound.grads(&loss.backward());
            self.apply(Phase::PairHead, &loss, vec![(Segment::Classifier, g)])?;
        }
        hook(Phase::PairHead, HookPoint::After, self);

        if self.domain_discriminator.is_some() {
            hook(Phase::DomainDiscriminator, HookPoint::Before, self);
            let ph_bound = self.classifier.pair_head.params().bind(false);
            let probs = self.pair_probs(&ph_bound, &fixed_diffs);
            let stacked = Var::constant(Var::cat(&probs, 0).value().clone());
            let d_f = self.domain_discriminator.as_ref().expect("present");
            let df_bound = d_f.params().bind(true);
            let ce = domain_cross_entropy(&d_f.forward(&df_bound, &stacked), &domain_labels)?;
            bundle.adv_f_disc = ce.value().item() as f64;
            let loss = ce.scale(lambda_f);
            let g = df_bound.grads(&loss.backward());
            self.apply(Phase::DomainDiscriminator, &loss, vec![(Segment::DomainDiscriminator, g)])?;
            hook(Phase::DomainDiscriminator, HookPoint::After, self);
        }

        // fused prediction, back through the classifier into the extractor
        hook(Phase::Fusion, HookPoint::Before, self);
        {
            let e_bound = self.extractor.params().bind(true);
            let ph_bound = self.classifier.pair_head.params().bind(cfg.fusion == FusionStrategy::Output);
            let fh_bound = self.classifier.fusion_head.params().bind(cfg.fusion == FusionStrategy::Feature);
            let feats = self.features(&e_bound, &images, &tags)?;
            let fused = self.fused_probs(cfg.fusion, &ph_bound, &fh_bound, &Self::differences(&feats, &tags));
            let l = cd(&fused);
            bundle.cd_final = l.value().item() as f64;
            let loss = l.scale(lambda_cd);
            let grads = loss.backward();
            let mut updates = vec![(Segment::Extractor, e_bound.grads(&grads))];
            match cfg.fusion {
                FusionStrategy::Feature => updates.push((Segment::FusionHead, fh_bound.grads(&grads))),
                FusionStrategy::Output => updates.push((Segment::Classifier, ph_bound.grads(&grads))),
            }
            self.apply(Phase::Fusion, &loss, updates)?;
        }
        hook(Phase::Fusion, HookPoint::After, self);

        bundle.total = total_objective(&bundle, &w, FaTerm::Confusion)?;
        bundle.check_finite().map_err(|e| Error::TrainingAborted {
            phase: "report".into(),
            reason: e.to_string(),
        })?;
        self.step += 1;
        Ok(bundle)
    }

    /// Change probabilities `[n, 1, H, W]` for stacked inputs.
    pub fn predict_tensor(&self, pre: &Tensor, post: &Tensor, fusion: FusionStrategy, tags: &TagSet) -> Result<Tensor> {
        let images = self.images(pre, post, tags)?;
        let feats = self.features(&self.extractor.params().bind(false), &images, tags)?;
        let diffs = Self::differences(&feats, tags);
        let ph = self.classifier.pair_head.params().bind(false);
        let fh = self.classifier.fusion_head.params().bind(false);
        Ok(self.fused_probs(fusion, &ph, &fh, &diffs).value().clone())
    }

    /// Inference with the trained fusion strategy and pairs.
    pub fn predictor(&self) -> Predictor<'_> {
        Predictor {
            state: self,
            fusion: self.config.fusion,
            tags: self.config.effective_tags(),
        }
    }

    /// Inference with overridden fusion strategy or pair subset, checked
    /// against what the model was built with.
    pub fn predictor_with(&self, fusion: Option<FusionStrategy>, tags: Option<TagSet>) -> Result<Predictor<'_>> {
        let fusion = fusion.unwrap_or(self.config.fusion);
        let tags = tags.unwrap_or_else(|| self.config.effective_tags());
        if tags.needs_translation() && self.ia.is_none() {
            return Err(Error::Checkpoint(format!("pairs {tags} need generators, but the model has none")));
        }
        if fusion == FusionStrategy::Feature && tags.len() != self.classifier.fusion_head.groups() {
            return Err(Error::Checkpoint(format!(
                "fusion head was built for {} pairs, {} requested ({tags})",
                self.classifier.fusion_head.groups(),
                tags.len()
            )));
        }
        Ok(Predictor {
            state: self,
            fusion,
            tags,
        })
    }
}

fn param_mut<'a>(ps: &'a mut ParamSet, name: &str) -> &'a mut Tensor {
    let i = ps.names().iter().position(|n| n == name).expect("parameter exists");
    ps.tensor_mut(i)
}

/// Hand-set baseline whose change logit is `gain * sum_c |pre_c - post_c| - 1`
/// per pixel. Exact on unshifted synthetic data, where unchanged pixels are
/// identical in both epochs.
pub fn difference_oracle(gain: f32) -> Result<ModelState> {
    let cfg = TrainConfig {
        fusion: FusionStrategy::Output,
        ..TrainConfig::baseline()
    };
    let w = cfg.model.backbone.width;
    if w < 6 {
        return Err(Error::Config("oracle needs a backbone width of at least 6".into()));
    }
    let mut s = ModelState::new(&cfg)?;
    let centre = |t: &mut Tensor, o: usize, i: usize, v: f32| {
        let (_, cin, kh, kw) = t.dims4();
        t.data_mut()[((o * cin + i) * kh + kh / 2) * kw + kw / 2] = v;
    };
    for ps in [s.extractor.params_mut(), s.classifier.pair_head.params_mut()] {
        for t in ps.tensors_mut() {
            t.scale_in_place(0.0);
        }
    }
    // channels c and 3 + c carry relu(x_c) and relu(-x_c)
    let e = s.extractor.params_mut();
    let a = param_mut(e, "scale0.a.weight");
    for c in 0..3 {
        centre(a, c, c, 1.0);
        centre(a, 3 + c, c, -1.0);
    }
    let b = param_mut(e, "scale0.b.weight");
    for i in 0..6 {
        centre(b, i, i, 1.0);
    }
    // finest decoder conv sees [upsampled state (w), difference (w)]
    let h = s.classifier.pair_head.params_mut();
    let d = param_mut(h, "dec0.weight");
    for c in 0..3 {
        for (o, sign) in [(2 * c, 1.0), (2 * c + 1, -1.0)] {
            centre(d, o, w + c, sign * gain);
            centre(d, o, w + 3 + c, -sign * gain);
        }
    }
    let l = param_mut(h, "logit.weight");
    l.data_mut()[..6].fill(1.0);
    param_mut(h, "logit.bias").data_mut()[0] = -1.0;
    s.reset_optimizers();
    Ok(s)
}

/// Full inference pipeline: translation, features, fusion.
pub struct Predictor<'a> {
    state: &'a ModelState,
    fusion: FusionStrategy,
    tags: TagSet,
}

impl ChangePredictor for Predictor<'_> {
    fn predict(&self, sample: &BiTemporalSample) -> Result<ChangeProbMap> {
        sample.validate()?;
        Generator::check_input(sample.height(), sample.width(), sample.pre.channels())?;
        let p = self
            .state
            .predict_tensor(&sample.pre.to_tensor(), &sample.post.to_tensor(), self.fusion, &self.tags)?;
        ChangeProbMap::from_tensor(&p, 0)
    }
}

/// Trainable parameter counts per present group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Census {
    pub groups: BTreeMap<Group, usize>,
    pub total: usize,
}

pub fn parameter_census(state: &ModelState) -> Census {
    let groups: BTreeMap<Group, usize> = state
        .groups()
        .into_iter()
        .map(|g| {
            let n = g.segments().iter().filter_map(|&s| state.segment(s)).map(ParamSet::count).sum();
            (g, n)
        })
        .collect();
    let total = groups.values().sum();
    Census { groups, total }
}

pub struct TrainOptions<'a> {
    pub out_dir: &'a Path,
    pub validation: Option<&'a [BiTemporalSample]>,
    /// Recorded in checkpoints; defaults to the training config's hash.
    pub config_hash: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub checkpoints: Vec<PathBuf>,
    pub final_checkpoint: PathBuf,
    pub log_path: PathBuf,
    pub validation: Vec<(usize, Metrics)>,
    pub steps: u64,
}

pub fn format_log_row(step: u64, epoch: usize, b: &LossBundle) -> String {
    let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    format!(
        "{step},{epoch},{},{},{},{},{},{},{},{},{}",
        b.cyc,
        b.adv_i,
        b.adv_f_disc,
        b.adv_f_conf,
        opt(b.cd_per_pair[0]),
        opt(b.cd_per_pair[1]),
        opt(b.cd_per_pair[2]),
        b.cd_final,
        b.total
    )
}

fn open_log(path: &Path, append: bool) -> Result<std::fs::File> {
    let exists = path.exists();
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(append)
        .write(true)
        .truncate(!append)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    if !append || !exists {
        writeln!(f, "{LOG_HEADER}").map_err(|e| Error::io(path, e))?;
    }
    Ok(f)
}

/// Trains a fresh model.
pub fn train(cfg: &TrainConfig, dataset: &[BiTemporalSample], opts: &TrainOptions<'_>) -> Result<(ModelState, TrainReport)> {
    if dataset.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    let mut state = ModelState::new(cfg)?;
    let report = continue_training(&mut state, dataset, opts)?;
    Ok((state, report))
}

/// Runs the remaining epochs of `state`, appending to an existing log when
/// resuming.
pub fn continue_training(state: &mut ModelState, dataset: &[BiTemporalSample], opts: &TrainOptions<'_>) -> Result<TrainReport> {
    if dataset.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    let out = opts.out_dir;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let hash = opts.config_hash.clone().unwrap_or_else(|| state.config.hash());
    let log_path = out.join("train_log.csv");
    let mut log = open_log(&log_path, state.step > 0)?;
    let val_path = out.join("val_metrics.csv");
    let mut val_log = match opts.validation {
        Some(_) => Some({
            let fresh = state.step == 0 || !val_path.exists();
            let mut f = std::fs::OpenOptions::new()
                .create(true)
                .append(!fresh)
                .write(true)
                .truncate(fresh)
                .open(&val_path)
                .map_err(|e| Error::io(&val_path, e))?;
            if fresh {
                writeln!(f, "epoch,precision,recall,f1").map_err(|e| Error::io(&val_path, e))?;
            }
            f
        }),
        None => None,
    };

    let mut report = TrainReport {
        checkpoints: Vec::new(),
        final_checkpoint: out.join("final.ckpt"),
        log_path: log_path.clone(),
        validation: Vec::new(),
        steps: 0,
    };
    let bs = state.config.batch_size;
    while state.epoch < state.config.epochs {
        state.set_lr();
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut state.rng);
        for chunk in order.chunks(bs) {
            let batch: Vec<BiTemporalSample> = chunk
                .iter()
                .map(|&i| {
                    if state.config.augment {
                        augment(&dataset[i], &mut state.rng)
                    } else {
                        dataset[i].clone()
                    }
                })
                .collect();
            let bundle = state.train_step(&batch)?;
            writeln!(log, "{}", format_log_row(state.step, state.epoch, &bundle)).map_err(|e| Error::io(&log_path, e))?;
            report.steps += 1;
        }
        state.epoch += 1;
        log::info!("epoch {}/{} done, step {}", state.epoch, state.config.epochs, state.step);
        if let (Some(val), Some(f)) = (opts.validation, val_log.as_mut()) {
            let m = evaluate(&state.predictor(), val, state.config.threshold, Aggregation::Micro)?.metrics;
            writeln!(f, "{},{},{},{}", state.epoch, m.precision, m.recall, m.f1).map_err(|e| Error::io(&val_path, e))?;
            log::info!("validation P={:.4} R={:.4} F1={:.4}", m.precision, m.recall, m.f1);
            report.validation.push((state.epoch, m));
        }
        let interval = state.config.checkpoint_interval;
        if interval > 0 && state.epoch % interval == 0 && state.epoch < state.config.epochs {
            let p = out.join(format!("epoch_{:04}.ckpt", state.epoch));
            crate::checkpoint::save(state, &p, &hash)?;
            report.checkpoints.push(p);
        }
    }
    crate::checkpoint::save(state, &report.final_checkpoint, &hash)?;
    report.checkpoints.push(report.final_checkpoint.clone());
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthesize_benchmark, SyntheticConfig};

    fn small_config() -> TrainConfig {
        TrainConfig {
            batch_size: 2,
            augment: false,
            model: ModelConfig {
                generator: GeneratorConfig {
                    width: 4,
                    res_blocks: 1,
                    identity_init: true,
                },
                image_discriminator: DiscriminatorConfig { width: 4 },
                backbone: BackboneConfig {
                    width: 4,
                    discriminator_width: 4,
                },
            },
            ..Default::default()
        }
    }

    fn data(n: usize) -> Vec<BiTemporalSample> {
        synthesize_benchmark(&SyntheticConfig {
            n_samples: n,
            tile_size: 16,
            shift_strength: 1.0,
            seed: 5,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            ia_enabled: false,
            active_tags: "pre_domain".parse().unwrap(),
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { learning_rate: 0.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn baseline_census_excludes_adaptation_groups() {
        let s = ModelState::new(&TrainConfig { ..TrainConfig::baseline() }).unwrap();
        let c = parameter_census(&s);
        assert_eq!(c.groups.keys().copied().collect::<Vec<_>>(), vec![Group::Extractor, Group::Classifier]);
        assert_eq!(c.total, c.groups.values().sum::<usize>());
        let full = parameter_census(&ModelState::new(&TrainConfig::default()).unwrap());
        assert_eq!(full.groups.len(), 7);
    }

    #[test]
    fn step_reports_finite_losses_and_keeps_census() {
        let mut s = ModelState::new(&small_config()).unwrap();
        let before = parameter_census(&s);
        let b = s.train_step(&data(2)).unwrap();
        b.check_finite().unwrap();
        assert!(b.cd_per_pair.iter().all(Option::is_some));
        assert_eq!(parameter_census(&s), before);
        assert_eq!(s.step(), 1);
    }

    #[test]
    fn empty_batch_is_rejected() {
        let mut s = ModelState::new(&small_config()).unwrap();
        assert!(matches!(s.train_step(&[]), Err(Error::Config(_))));
    }

    #[test]
    fn log_row_leaves_inactive_pairs_empty() {
        let b = LossBundle {
            cd_per_pair: [Some(0.5), None, None],
            ..Default::default()
        };
        assert_eq!(format_log_row(3, 1, &b), "3,1,0,0,0,0,0.5,,,0,0");
        assert_eq!(LOG_HEADER.split(',').count(), format_log_row(0, 0, &b).split(',').count());
    }

    #[test]
    fn oracle_is_perfect_without_shift() {
        let data = synthesize_benchmark(&SyntheticConfig {
            n_samples: 4,
            tile_size: 32,
            shift_strength: 0.0,
            ..Default::default()
        })
        .unwrap();
        let o = difference_oracle(100.0).unwrap();
        let e = evaluate(&o.predictor(), &data, 0.5, Aggregation::Micro).unwrap();
        assert!(e.counts.tp > 0);
        assert_eq!((e.counts.fp, e.counts.fn_), (0, 0));
    }
}
