//! Cross-domain style transfer between the pre-event and post-event
//! domains: two generators, two patch discriminators, adversarial and
//! cycle-consistency objectives.

use rand::Rng;
use sdacd_grad::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::domain::{BiTemporalSample, DomainTag, Image, PairSet, RangeTag, TagSet};
use crate::error::{Error, Result};
use crate::nn::{Bound, Conv, Network, ParamSet};
use crate::objectives::{LossWeights, PROB_FLOOR};

/// Image channels handled by every network.
pub const CHANNELS: usize = 3;

/// Spatial reduction of the generator encoder and the patch discriminator.
pub const DOWNSAMPLE_FACTOR: usize = 4;

/// Clamp applied before `atanh` on the generator's identity path.
const IDENTITY_LIMIT: f32 = 0.999;

/// Weight multiplier for the last generator layer when identity-biased.
const IDENTITY_HEAD_SCALE: f32 = 1e-2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorRole {
    /// `G_pre: I_post -> I_pre`
    ToPre,
    /// `G_post: I_pre -> I_post`
    ToPost,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscriminatorRole {
    Pre,
    Post,
}

/// Functional form of the adversarial objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GanForm {
    /// Log-likelihood; discriminator scores pass through a sigmoid.
    Vanilla,
    /// Squared error against targets 1 (real) and 0 (fake) on raw scores.
    LeastSquares,
}

impl std::str::FromStr for GanForm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(GanForm::Vanilla),
            "least_squares" | "lsgan" => Ok(GanForm::LeastSquares),
            other => Err(Error::Config(format!("unknown GAN form `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GanSide {
    Generator,
    Discriminator,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub width: usize,
    pub res_blocks: usize,
    pub identity_init: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            width: 8,
            res_blocks: 2,
            identity_init: true,
        }
    }
}

/// Residual encoder–decoder image-to-image map with a saturating output.
///
/// The output is `tanh(atanh(x) + r(x))`, so a near-zero residual head
/// makes the freshly initialised generator close to the identity.
#[derive(Debug, Clone)]
pub struct Generator {
    role: GeneratorRole,
    config: GeneratorConfig,
    params: ParamSet,
    stem: Conv,
    down: [Conv; 2],
    res: Vec<(Conv, Conv)>,
    up: [Conv; 2],
    head: Conv,
}

impl Generator {
    pub fn new(role: GeneratorRole, config: &GeneratorConfig, rng: &mut impl Rng) -> Self {
        let c = config.width;
        let mut ps = ParamSet::new();
        let stem = Conv::new(&mut ps, "stem", CHANNELS, c, 3, 1, rng);
        let down = [
            Conv::new(&mut ps, "down1", c, 2 * c, 3, 2, rng),
            Conv::new(&mut ps, "down2", 2 * c, 4 * c, 3, 2, rng),
        ];
        let res = (0..config.res_blocks)
            .map(|i| {
                (
                    Conv::new(&mut ps, &format!("res{i}.a"), 4 * c, 4 * c, 3, 1, rng),
                    Conv::new(&mut ps, &format!("res{i}.b"), 4 * c, 4 * c, 3, 1, rng),
                )
            })
            .collect();
        let up = [
            Conv::new(&mut ps, "up1", 4 * c, 2 * c, 3, 1, rng),
            Conv::new(&mut ps, "up2", 2 * c, c, 3, 1, rng),
        ];
        let head = Conv::new(&mut ps, "head", c, CHANNELS, 3, 1, rng);
        if config.identity_init {
            head.scale_weights(&mut ps, IDENTITY_HEAD_SCALE);
        }
        Self {
            role,
            config: config.clone(),
            params: ps,
            stem,
            down,
            res,
            up,
            head,
        }
    }

    pub fn role(&self) -> GeneratorRole {
        self.role
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn check_input(height: usize, width: usize, channels: usize) -> Result<()> {
        if channels != CHANNELS {
            return Err(Error::Shape(format!(
                "generators take {CHANNELS}-channel images, got {channels}"
            )));
        }
        if height % DOWNSAMPLE_FACTOR != 0 || width % DOWNSAMPLE_FACTOR != 0 {
            return Err(Error::Shape(format!(
                "{height}x{width} is not divisible by the generator downsampling factor {DOWNSAMPLE_FACTOR}"
            )));
        }
        Ok(())
    }

    pub fn forward(&self, bound: &Bound, x: &Var) -> Var {
        let mut h = self.stem.forward(bound, x).relu();
        for d in &self.down {
            h = d.forward(bound, &h).relu();
        }
        for (a, b) in &self.res {
            let r = b.forward(bound, &a.forward(bound, &h).relu());
            h = h.add(&r);
        }
        for u in &self.up {
            h = u.forward(bound, &h.upsample2x()).relu();
        }
        let residual = self.head.forward(bound, &h);
        x.atanh_clip(IDENTITY_LIMIT).add(&residual).tanh()
    }

    /// Frozen forward pass over an NCHW batch.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4();
        Self::check_input(h, w, c)?;
        let out = self.forward(&self.params.bind(false), &Var::constant(x.clone()));
        Ok(out.value().clone())
    }
}

impl Network for Generator {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }
}

/// Image-to-image map used to build translated pairs.
pub trait Translator {
    fn translate(&self, img: &Image) -> Result<Image>;
}

impl Translator for Generator {
    fn translate(&self, img: &Image) -> Result<Image> {
        if img.range() != RangeTag::SignedUnit {
            return Err(Error::Config(format!(
                "generators expect normalized [-1, 1] images, got {:?}",
                img.range()
            )));
        }
        let out = self.apply(&img.to_tensor())?;
        Image::from_tensor(&out, 0, RangeTag::SignedUnit)
    }
}

impl<F> Translator for F
where
    F: Fn(&Image) -> Result<Image>,
{
    fn translate(&self, img: &Image) -> Result<Image> {
        self(img)
    }
}

/// The identity map.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityTranslator;

impl Translator for IdentityTranslator {
    fn translate(&self, img: &Image) -> Result<Image> {
        Ok(img.clone())
    }
}

pub fn translate(gen: &Generator, img: &Image) -> Result<Image> {
    gen.translate(img)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub width: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self { width: 16 }
    }
}

/// Fully convolutional patch classifier producing a score map at 1/4
/// resolution.
#[derive(Debug, Clone)]
pub struct ImageDiscriminator {
    role: DiscriminatorRole,
    params: ParamSet,
    convs: [Conv; 3],
}

impl ImageDiscriminator {
    pub fn new(role: DiscriminatorRole, config: &DiscriminatorConfig, rng: &mut impl Rng) -> Self {
        let c = config.width;
        let mut ps = ParamSet::new();
        let convs = [
            Conv::new(&mut ps, "conv1", CHANNELS, c, 3, 2, rng),
            Conv::new(&mut ps, "conv2", c, 2 * c, 3, 2, rng),
            Conv::new(&mut ps, "score", 2 * c, 1, 3, 1, rng),
        ];
        Self {
            role,
            params: ps,
            convs,
        }
    }

    pub fn role(&self) -> DiscriminatorRole {
        self.role
    }

    /// Score map, passed through a sigmoid for [`GanForm::Vanilla`].
    pub fn forward(&self, bound: &Bound, x: &Var, form: GanForm) -> Var {
        let h = self.convs[0].forward(bound, x).leaky_relu(0.2);
        let h = self.convs[1].forward(bound, &h).leaky_relu(0.2);
        let s = self.convs[2].forward(bound, &h);
        match form {
            GanForm::Vanilla => s.sigmoid(),
            GanForm::LeastSquares => s,
        }
    }

    /// Sets the final layer to zero so every score is 0 (0.5 after sigmoid).
    pub fn zero_scores(&mut self) {
        self.convs[2].zero(&mut self.params);
    }
}

impl Network for ImageDiscriminator {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }
}

fn check_scores(scores: &Var, what: &str) -> Result<()> {
    let t = scores.value();
    let bad = t.data().iter().filter(|v| !v.is_finite()).count();
    if bad > 0 {
        return Err(Error::Numerical(format!(
            "{bad} of {} {what} discriminator scores are non-finite (shape {:?})",
            t.numel(),
            t.shape()
        )));
    }
    Ok(())
}

/// Adversarial loss on (activated) discriminator scores, negated so that
/// both sides minimise.
///
/// * discriminator, vanilla: `-mean[ln D(real)] - mean[ln(1 - D(fake))]`
/// * generator, vanilla: `-mean[ln D(fake)]`
/// * least squares: `mean[(D(real) - 1)^2] + mean[D(fake)^2]`, resp.
///   `mean[(D(fake) - 1)^2]`
pub fn adversarial_loss(real: Option<&Var>, fake: &Var, side: GanSide, form: GanForm) -> Result<Var> {
    check_scores(fake, "fake")?;
    match side {
        GanSide::Generator => Ok(match form {
            GanForm::Vanilla => fake.log_floor(PROB_FLOOR).mean_all().scale(-1.0),
            GanForm::LeastSquares => fake.add_scalar(-1.0).square().mean_all(),
        }),
        GanSide::Discriminator => {
            let real = real.ok_or_else(|| {
                Error::PipelineOrder("discriminator-side loss needs real-image scores".into())
            })?;
            check_scores(real, "real")?;
            Ok(match form {
                GanForm::Vanilla => {
                    let r = real.log_floor(PROB_FLOOR).mean_all();
                    let f = fake.scale(-1.0).add_scalar(1.0).log_floor(PROB_FLOOR).mean_all();
                    r.add(&f).scale(-1.0)
                }
                GanForm::LeastSquares => {
                    let r = real.add_scalar(-1.0).square().mean_all();
                    let f = fake.square().mean_all();
                    r.add(&f)
                }
            })
        }
    }
}

/// Single directional adversarial term evaluated on images with frozen
/// parameters.
pub fn ia_adversarial_loss(
    d: &ImageDiscriminator,
    real: &Image,
    fake: &Image,
    side: GanSide,
    form: GanForm,
) -> Result<f64> {
    if !real.same_dims(fake) {
        return Err(Error::Shape("real and fake images differ in dimensions".into()));
    }
    let bound = d.params.bind(false);
    let real_s = d.forward(&bound, &Var::constant(real.to_tensor()), form);
    let fake_s = d.forward(&bound, &Var::constant(fake.to_tensor()), form);
    Ok(adversarial_loss(Some(&real_s), &fake_s, side, form)?.value().item() as f64)
}

/// Mean absolute difference.
pub fn l1_mean(a: &Var, b: &Var) -> Var {
    a.sub(b).abs().mean_all()
}

/// Batch of real images plus the cached first-hop translations.
#[derive(Debug, Clone)]
pub struct IaBatch {
    pub pre: Tensor,
    pub post: Tensor,
    pub pre_to_post: Option<Tensor>,
    pub post_to_pre: Option<Tensor>,
}

/// The four directional terms of the full image-adaptation adversarial loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IaAdversarialTerms {
    /// `D_pre`: real `I_pre` vs `G_pre(I_post)`
    pub forward_pre: f64,
    /// `D_post`: real `I_post` vs `G_post(I_pre)`
    pub forward_post: f64,
    /// `D_pre`: real `I_pre` vs `G_pre(I_pre→post)`
    pub reverse_pre: f64,
    /// `D_post`: real `I_post` vs `G_post(I_post→pre)`
    pub reverse_post: f64,
}

impl IaAdversarialTerms {
    pub fn total(&self) -> f64 {
        self.forward_pre + self.forward_post + self.reverse_pre + self.reverse_post
    }
}

/// Forward plus reverse-cycle adversarial terms for both domains, with all
/// networks frozen.
pub fn full_ia_adversarial_loss(
    g_pre: &Generator,
    g_post: &Generator,
    d_pre: &ImageDiscriminator,
    d_post: &ImageDiscriminator,
    batch: &IaBatch,
    side: GanSide,
    form: GanForm,
) -> Result<IaAdversarialTerms> {
    let missing: Vec<&str> = [
        ("pre_to_post", batch.pre_to_post.is_none()),
        ("post_to_pre", batch.post_to_pre.is_none()),
    ]
    .iter()
    .filter(|(_, m)| *m)
    .map(|(n, _)| *n)
    .collect();
    if !missing.is_empty() {
        return Err(Error::PipelineOrder(format!(
            "cached translations missing: {}; translate before computing the full adversarial loss",
            missing.join(", ")
        )));
    }
    let pre_to_post = batch.pre_to_post.as_ref().expect("checked");
    let post_to_pre = batch.post_to_pre.as_ref().expect("checked");
    let reverse_pre = g_pre.apply(pre_to_post)?;
    let reverse_post = g_post.apply(post_to_pre)?;

    let term = |d: &ImageDiscriminator, real: &Tensor, fake: &Tensor| -> Result<f64> {
        let bound = d.params.bind(false);
        let r = d.forward(&bound, &Var::constant(real.clone()), form);
        let f = d.forward(&bound, &Var::constant(fake.clone()), form);
        Ok(adversarial_loss(Some(&r), &f, side, form)?.value().item() as f64)
    };
    Ok(IaAdversarialTerms {
        forward_pre: term(d_pre, &batch.pre, post_to_pre)?,
        forward_post: term(d_post, &batch.post, pre_to_post)?,
        reverse_pre: term(d_pre, &batch.pre, &reverse_pre)?,
        reverse_post: term(d_post, &batch.post, &reverse_post)?,
    })
}

/// Sum over both cycles of the per-pixel, per-channel mean absolute
/// reconstruction error.
pub fn cycle_loss(
    g_pre: &impl Translator,
    g_post: &impl Translator,
    i_pre: &Image,
    i_post: &Image,
) -> Result<f64> {
    let rec_pre = g_pre.translate(&g_post.translate(i_pre)?)?;
    let rec_post = g_post.translate(&g_pre.translate(i_post)?)?;
    let term = |rec: &Image, orig: &Image| -> Result<f64> {
        if !rec.same_dims(orig) {
            return Err(Error::Shape(format!(
                "reconstruction {}x{}x{} vs original {}x{}x{}",
                rec.height(),
                rec.width(),
                rec.channels(),
                orig.height(),
                orig.width(),
                orig.channels()
            )));
        }
        let sum: f64 = rec
            .values()
            .iter()
            .zip(orig.values())
            .map(|(&a, &b)| (a as f64 - b as f64).abs())
            .sum();
        Ok(sum / orig.values().len() as f64)
    };
    Ok(term(&rec_pre, i_pre)? + term(&rec_post, i_post)?)
}

/// All three pairs: original, pre-domain and post-domain.
pub fn build_pair_set(
    sample: &BiTemporalSample,
    g_pre: &impl Translator,
    g_post: &impl Translator,
) -> Result<PairSet> {
    build_pair_set_for(sample, g_pre, g_post, &TagSet::all())
}

/// Only the pairs in `tags`; translations are computed only when needed.
pub fn build_pair_set_for(
    sample: &BiTemporalSample,
    g_pre: &impl Translator,
    g_post: &impl Translator,
    tags: &TagSet,
) -> Result<PairSet> {
    sample.validate()?;
    let mut pairs = std::collections::BTreeMap::new();
    for &tag in tags.tags() {
        let pair = match tag {
            DomainTag::Original => (sample.pre.clone(), sample.post.clone()),
            DomainTag::PreDomain => (sample.pre.clone(), g_pre.translate(&sample.post)?),
            DomainTag::PostDomain => (g_post.translate(&sample.pre)?, sample.post.clone()),
        };
        pairs.insert(tag, pair);
    }
    PairSet::new(pairs, sample.gt.clone())
}

/// Translations of a batch under the current generators.
#[derive(Debug, Clone)]
pub struct Translations {
    /// `G_post(I_pre)`
    pub pre_to_post: Tensor,
    /// `G_pre(I_post)`
    pub post_to_pre: Tensor,
    /// `G_pre(G_post(I_pre))`
    pub pre_cycle: Tensor,
    /// `G_post(G_pre(I_post))`
    pub post_cycle: Tensor,
}

/// Loss graph for one update phase with its trainable parameters.
pub struct PhaseObjective {
    pub loss: Var,
    pub bound: Bound,
    /// Unweighted adversarial part.
    pub adversarial: f64,
    /// Unweighted cycle-consistency part (generator phases only).
    pub cycle: f64,
}

/// Generators and image discriminators for both domains.
#[derive(Debug, Clone)]
pub struct ImageAdaptation {
    pub g_pre: Generator,
    pub g_post: Generator,
    pub d_pre: ImageDiscriminator,
    pub d_post: ImageDiscriminator,
}

impl ImageAdaptation {
    pub fn new(gen: &GeneratorConfig, disc: &DiscriminatorConfig, rng: &mut impl Rng) -> Self {
        Self {
            g_pre: Generator::new(GeneratorRole::ToPre, gen, rng),
            g_post: Generator::new(GeneratorRole::ToPost, gen, rng),
            d_pre: ImageDiscriminator::new(DiscriminatorRole::Pre, disc, rng),
            d_post: ImageDiscriminator::new(DiscriminatorRole::Post, disc, rng),
        }
    }

    pub fn translations(&self, pre: &Tensor, post: &Tensor) -> Result<Translations> {
        let pre_to_post = self.g_post.apply(pre)?;
        let post_to_pre = self.g_pre.apply(post)?;
        Ok(Translations {
            pre_cycle: self.g_pre.apply(&pre_to_post)?,
            post_cycle: self.g_post.apply(&post_to_pre)?,
            pre_to_post,
            post_to_pre,
        })
    }

    /// Objective of one generator with every other network frozen:
    /// `λ_i · (forward + reverse adversarial) + λ_cyc · L_cyc`.
    pub fn generator_objective(
        &self,
        role: GeneratorRole,
        pre: &Tensor,
        post: &Tensor,
        form: GanForm,
        weights: &LossWeights,
    ) -> Result<PhaseObjective> {
        let (_, c, h, w) = pre.dims4();
        Generator::check_input(h, w, c)?;
        let x = Var::constant(pre.clone());
        let y = Var::constant(post.clone());
        let pre_bound = self.g_pre.params.bind(role == GeneratorRole::ToPre);
        let post_bound = self.g_post.params.bind(role == GeneratorRole::ToPost);

        let post_to_pre = self.g_pre.forward(&pre_bound, &y);
        let pre_to_post = self.g_post.forward(&post_bound, &x);
        let pre_cycle = self.g_pre.forward(&pre_bound, &pre_to_post);
        let post_cycle = self.g_post.forward(&post_bound, &post_to_pre);

        let (disc, fwd, rev) = match role {
            GeneratorRole::ToPre => (&self.d_pre, &post_to_pre, &pre_cycle),
            GeneratorRole::ToPost => (&self.d_post, &pre_to_post, &post_cycle),
        };
        let d_bound = disc.params.bind(false);
        let adv_fwd = adversarial_loss(None, &disc.forward(&d_bound, fwd, form), GanSide::Generator, form)?;
        let adv_rev = adversarial_loss(None, &disc.forward(&d_bound, rev, form), GanSide::Generator, form)?;
        let adv = adv_fwd.add(&adv_rev);
        let cyc = l1_mean(&pre_cycle, &x).add(&l1_mean(&post_cycle, &y));
        let loss = adv
            .scale(weights.lambda_i as f32)
            .add(&cyc.scale(weights.lambda_cyc as f32));
        Ok(PhaseObjective {
            adversarial: adv.value().item() as f64,
            cycle: cyc.value().item() as f64,
            loss,
            bound: match role {
                GeneratorRole::ToPre => pre_bound,
                GeneratorRole::ToPost => post_bound,
            },
        })
    }

    /// Objective of one discriminator on detached fakes:
    /// `λ_i · (forward term + reverse term)`.
    pub fn discriminator_objective(
        &self,
        role: DiscriminatorRole,
        real: &Tensor,
        fake_forward: &Tensor,
        fake_reverse: &Tensor,
        form: GanForm,
        weights: &LossWeights,
    ) -> Result<PhaseObjective> {
        let disc = match role {
            DiscriminatorRole::Pre => &self.d_pre,
            DiscriminatorRole::Post => &self.d_post,
        };
        let bound = disc.params.bind(true);
        let real_s = disc.forward(&bound, &Var::constant(real.clone()), form);
        let fwd_s = disc.forward(&bound, &Var::constant(fake_forward.clone()), form);
        let rev_s = disc.forward(&bound, &Var::constant(fake_reverse.clone()), form);
        let adv = adversarial_loss(Some(&real_s), &fwd_s, GanSide::Discriminator, form)?
            .add(&adversarial_loss(Some(&real_s), &rev_s, GanSide::Discriminator, form)?);
        Ok(PhaseObjective {
            adversarial: adv.value().item() as f64,
            cycle: 0.0,
            loss: adv.scale(weights.lambda_i as f32),
            bound,
        })
    }
}

/// History of generated images; a query returns, per sample, either the
/// new image or (with probability 1/2, once full) a stored one it replaces.
#[derive(Debug, Clone)]
pub struct ImagePool {
    capacity: usize,
    images: Vec<Tensor>,
}

impl Default for ImagePool {
    fn default() -> Self {
        Self::new(50)
    }
}

impl ImagePool {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            images: Vec::with_capacity(capacity),
        }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn query(&mut self, batch: &Tensor, rng: &mut impl Rng) -> Tensor {
        let n = batch.shape()[0];
        let out: Vec<Tensor> = (0..n)
            .map(|i| {
                let img = batch.batch_item(i);
                if self.images.len() < self.capacity {
                    self.images.push(img.clone());
                    img
                } else if rng.random::<f64>() < 0.5 {
                    let j = rng.random_range(0..self.capacity);
                    std::mem::replace(&mut self.images[j], img)
                } else {
                    img
                }
            })
            .collect();
        Tensor::stack_batch(&out.iter().collect::<Vec<_>>())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::ChangeMask;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    fn random_image(h: usize, w: usize, seed: u64) -> Image {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let v = (0..h * w * 3).map(|_| r.random_range(-1.0f32..=1.0)).collect();
        Image::new(h, w, 3, v, RangeTag::SignedUnit).unwrap()
    }

    fn scalar_image(v: f32) -> Image {
        Image::new(1, 1, 1, vec![v], RangeTag::SignedUnit).unwrap()
    }

    #[test]
    fn identity_initialised_generator_is_near_identity() {
        let g = Generator::new(GeneratorRole::ToPost, &GeneratorConfig::default(), &mut rng());
        let img = random_image(32, 32, 1);
        let out = g.translate(&img).unwrap();
        let dev = out
            .values()
            .iter()
            .zip(img.values())
            .fold(0.0f32, |m, (a, b)| m.max((a - b).abs()));
        assert!(dev < 0.05, "max deviation {dev}");
    }

    #[test]
    fn translate_shape_contract() {
        let g = Generator::new(GeneratorRole::ToPre, &GeneratorConfig::default(), &mut rng());
        let out = g.translate(&random_image(64, 64, 2)).unwrap();
        assert_eq!((out.height(), out.width(), out.channels()), (64, 64, 3));
        let odd = Image::filled(63, 63, 3, 0.0, RangeTag::SignedUnit).unwrap();
        assert!(matches!(g.translate(&odd), Err(Error::Shape(_))));
    }

    #[test]
    fn untrained_generator_output_stays_in_range() {
        let cfg = GeneratorConfig {
            identity_init: false,
            ..Default::default()
        };
        let g = Generator::new(GeneratorRole::ToPre, &cfg, &mut rng());
        let out = g.translate(&random_image(16, 16, 3)).unwrap();
        assert!(out.values().iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn vanilla_discriminator_loss_at_half() {
        let half = Var::constant(Tensor::full(&[1, 1, 4, 4], 0.5));
        let l = adversarial_loss(Some(&half), &half, GanSide::Discriminator, GanForm::Vanilla).unwrap();
        assert!((l.value().item() as f64 - 2.0 * 2f64.ln()).abs() < 1e-5);
    }

    #[test]
    fn vanilla_discriminator_loss_at_optimum() {
        let one = Var::constant(Tensor::full(&[1, 1, 2, 2], 1.0));
        let zero = Var::constant(Tensor::full(&[1, 1, 2, 2], 0.0));
        let l = adversarial_loss(Some(&one), &zero, GanSide::Discriminator, GanForm::Vanilla).unwrap();
        assert!(l.value().item().abs() < 1e-6);
    }

    #[test]
    fn least_squares_generator_loss_when_fooled() {
        let one = Var::constant(Tensor::full(&[1, 1, 2, 2], 1.0));
        let l = adversarial_loss(None, &one, GanSide::Generator, GanForm::LeastSquares).unwrap();
        assert_eq!(l.value().item(), 0.0);
    }

    #[test]
    fn non_finite_scores_are_reported() {
        let bad = Var::constant(Tensor::new(&[1, 1, 1, 2], vec![f32::NAN, 0.5]));
        let err = adversarial_loss(None, &bad, GanSide::Generator, GanForm::Vanilla).unwrap_err();
        assert!(matches!(err, Error::Numerical(ref m) if m.contains("1 of 2")));
    }

    #[test]
    fn discriminator_side_requires_real_scores() {
        let s = Var::constant(Tensor::full(&[1, 1, 1, 1], 0.5));
        assert!(adversarial_loss(None, &s, GanSide::Discriminator, GanForm::Vanilla).is_err());
    }

    fn zeroed_ia() -> ImageAdaptation {
        let mut ia = ImageAdaptation::new(&GeneratorConfig::default(), &DiscriminatorConfig::default(), &mut rng());
        ia.d_pre.zero_scores();
        ia.d_post.zero_scores();
        ia
    }

    #[test]
    fn full_adversarial_loss_sums_four_terms() {
        let ia = zeroed_ia();
        let pre = random_image(16, 16, 4).to_tensor();
        let post = random_image(16, 16, 5).to_tensor();
        let t = ia.translations(&pre, &post).unwrap();
        let batch = IaBatch {
            pre,
            post,
            pre_to_post: Some(t.pre_to_post),
            post_to_pre: Some(t.post_to_pre),
        };
        let terms = full_ia_adversarial_loss(
            &ia.g_pre,
            &ia.g_post,
            &ia.d_pre,
            &ia.d_post,
            &batch,
            GanSide::Discriminator,
            GanForm::Vanilla,
        )
        .unwrap();
        for v in [terms.forward_pre, terms.forward_post, terms.reverse_pre, terms.reverse_post] {
            assert!((v - 1.3863).abs() < 1e-4, "{v}");
        }
        assert!((terms.total() - 5.5452).abs() < 1e-3);
        let manual = terms.forward_pre + terms.forward_post + terms.reverse_pre + terms.reverse_post;
        assert!((terms.total() - manual).abs() < 1e-6);
    }

    #[test]
    fn full_adversarial_loss_needs_cached_translations() {
        let ia = zeroed_ia();
        let pre = random_image(16, 16, 4).to_tensor();
        let batch = IaBatch {
            pre: pre.clone(),
            post: pre.clone(),
            pre_to_post: Some(pre),
            post_to_pre: None,
        };
        let err = full_ia_adversarial_loss(
            &ia.g_pre,
            &ia.g_post,
            &ia.d_pre,
            &ia.d_post,
            &batch,
            GanSide::Generator,
            GanForm::LeastSquares,
        )
        .unwrap_err();
        assert!(matches!(err, Error::PipelineOrder(ref m) if m.contains("post_to_pre")));
    }

    #[test]
    fn cycle_loss_identity_is_zero() {
        let a = random_image(8, 8, 6);
        let b = random_image(8, 8, 7);
        assert_eq!(cycle_loss(&IdentityTranslator, &IdentityTranslator, &a, &b).unwrap(), 0.0);
    }

    #[test]
    fn cycle_loss_scalar_oracle() {
        let g_post = |x: &Image| {
            Image::new(1, 1, 1, vec![(x.values()[0] + 0.1).clamp(-1.0, 1.0)], RangeTag::SignedUnit)
        };
        let l = cycle_loss(&IdentityTranslator, &g_post, &scalar_image(0.2), &scalar_image(-0.4)).unwrap();
        assert!((l - 0.2).abs() < 1e-6, "{l}");
    }

    #[test]
    fn cycle_loss_rejects_shape_change() {
        let shrink = |_: &Image| Image::filled(1, 1, 3, 0.0, RangeTag::SignedUnit);
        let a = random_image(4, 4, 8);
        assert!(matches!(
            cycle_loss(&shrink, &IdentityTranslator, &a, &a),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn image_pool_fills_then_swaps() {
        let mut pool = ImagePool::new(2);
        let mut r = rng();
        let a = Tensor::full(&[2, 1, 1, 1], 1.0);
        assert_eq!(pool.query(&a, &mut r), a);
        assert_eq!(pool.len(), 2);
        let b = Tensor::full(&[2, 1, 1, 1], 2.0);
        let mut seen_old = false;
        for _ in 0..20 {
            let out = pool.query(&b, &mut r);
            seen_old |= out.data().contains(&1.0);
            assert!(out.data().iter().all(|&v| v == 1.0 || v == 2.0));
        }
        assert!(seen_old);
        assert_eq!(pool.len(), 2);
    }

    #[test]
    fn pair_set_contract() {
        let g = Generator::new(GeneratorRole::ToPre, &GeneratorConfig::default(), &mut rng());
        let h = Generator::new(GeneratorRole::ToPost, &GeneratorConfig::default(), &mut rng());
        let s = BiTemporalSample::new("s", random_image(16, 16, 9), random_image(16, 16, 10), ChangeMask::zeros(16, 16)).unwrap();
        let ps = build_pair_set(&s, &g, &h).unwrap();
        assert_eq!(ps.len(), 3);
        let (a, b) = ps.get(DomainTag::Original).unwrap();
        assert_eq!(a, &s.pre);
        assert_eq!(b, &s.post);
        assert_eq!(ps.gt(), &s.gt);
        assert_eq!(ps, build_pair_set(&s, &g, &h).unwrap());

        let id = build_pair_set(&s, &IdentityTranslator, &IdentityTranslator).unwrap();
        for (_, pair) in id.iter() {
            assert_eq!(pair, id.get(DomainTag::Original).unwrap());
        }
    }

    #[test]
    fn generator_phase_leaves_discriminators_untouched() {
        let ia = ImageAdaptation::new(&GeneratorConfig::default(), &DiscriminatorConfig::default(), &mut rng());
        let pre = random_image(16, 16, 11).to_tensor();
        let post = random_image(16, 16, 12).to_tensor();
        for form in [GanForm::Vanilla, GanForm::LeastSquares] {
            let obj = ia
                .generator_objective(GeneratorRole::ToPre, &pre, &post, form, &LossWeights::default())
                .unwrap();
            let g = obj.loss.backward();
            assert!(obj.bound.grads(&g).iter().all(Option::is_some));
            // every leaf in the graph belongs to the trainable generator
            assert_eq!(g.len(), ia.g_pre.params().len());

            let t = ia.translations(&pre, &post).unwrap();
            let obj = ia
                .discriminator_objective(DiscriminatorRole::Post, &post, &t.pre_to_post, &t.post_cycle, form, &LossWeights::default())
                .unwrap();
            let g = obj.loss.backward();
            assert_eq!(g.len(), ia.d_post.params().len());
        }
    }
}
