//! Siamese feature extractor, change classifier with per-pair and fusion
//! heads, and the domain-invariance discriminator over predictions.

use std::collections::BTreeMap;

use rand::Rng;
use sdacd_grad::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::domain::{ChangeProbMap, DomainTag, Image};
use crate::error::{Error, Result};
use crate::image_adaptation::CHANNELS;
use crate::nn::{Bound, Conv, Linear, Network, ParamSet};
use crate::objectives::PROB_FLOOR;

/// Reduction of the coarsest extractor scale.
pub const STRIDE: usize = 4;

/// Number of feature scales (full, 1/2, 1/4 resolution).
pub const SCALES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionStrategy {
    /// Concatenate the pair-difference features, decode once.
    Feature,
    /// Average the per-pair probability maps.
    Output,
}

impl std::str::FromStr for FusionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "feature" => Ok(FusionStrategy::Feature),
            "output" => Ok(FusionStrategy::Output),
            other => Err(Error::Config(format!("unknown fusion strategy `{other}`"))),
        }
    }
}

impl std::fmt::Display for FusionStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FusionStrategy::Feature => "feature",
            FusionStrategy::Output => "output",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    /// Channels at full resolution; doubled at each coarser scale.
    pub width: usize,
    pub discriminator_width: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            width: 8,
            discriminator_width: 8,
        }
    }
}

/// Channel count at scale `s`.
fn scale_channels(width: usize, s: usize) -> usize {
    width << s
}

/// Three-scale convolutional encoder applied to each image separately.
#[derive(Debug, Clone)]
pub struct Extractor {
    width: usize,
    params: ParamSet,
    blocks: Vec<(Conv, Conv)>,
}

impl Extractor {
    pub fn new(config: &BackboneConfig, rng: &mut impl Rng) -> Self {
        let mut ps = ParamSet::new();
        let mut blocks = Vec::with_capacity(SCALES);
        let mut cin = CHANNELS;
        for s in 0..SCALES {
            let c = scale_channels(config.width, s);
            let stride = if s == 0 { 1 } else { 2 };
            blocks.push((
                Conv::new(&mut ps, &format!("scale{s}.a"), cin, c, 3, stride, rng),
                Conv::new(&mut ps, &format!("scale{s}.b"), c, c, 3, 1, rng),
            ));
            cin = c;
        }
        Self {
            width: config.width,
            params: ps,
            blocks,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn check_input(height: usize, width: usize) -> Result<()> {
        if height % STRIDE != 0 || width % STRIDE != 0 {
            return Err(Error::Shape(format!(
                "{height}x{width} is not divisible by the extractor stride {STRIDE}"
            )));
        }
        Ok(())
    }

    /// Feature maps from finest to coarsest.
    pub fn forward(&self, bound: &Bound, x: &Var) -> Vec<Var> {
        let mut h = x.clone();
        self.blocks
            .iter()
            .map(|(a, b)| {
                h = b.forward(bound, &a.forward(bound, &h).relu()).relu();
                h.clone()
            })
            .collect()
    }

    pub fn apply(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let (_, c, h, w) = x.dims4();
        if c != CHANNELS {
            return Err(Error::Shape(format!("extractor takes {CHANNELS}-channel images, got {c}")));
        }
        Self::check_input(h, w)?;
        let feats = self.forward(&self.params.bind(false), &Var::constant(x.clone()));
        Ok(feats.iter().map(|f| f.value().clone()).collect())
    }
}

impl Network for Extractor {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }
}

/// Signed per-scale difference `pre - post`.
pub fn difference(pre: &[Var], post: &[Var]) -> Vec<Var> {
    pre.iter().zip(post).map(|(a, b)| a.sub(b)).collect()
}

/// Multi-scale features of both images of one pair.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePair {
    pub pre: Vec<Tensor>,
    pub post: Vec<Tensor>,
}

impl FeaturePair {
    pub fn differences(&self) -> Vec<Tensor> {
        self.pre
            .iter()
            .zip(&self.post)
            .map(|(a, b)| a.zip_map(b, |x, y| x - y))
            .collect()
    }
}

pub fn extract_pair(e: &Extractor, pair: &(Image, Image)) -> Result<FeaturePair> {
    if !pair.0.same_dims(&pair.1) {
        return Err(Error::Shape("pair images differ in dimensions".into()));
    }
    Ok(FeaturePair {
        pre: e.apply(&pair.0.to_tensor())?,
        post: e.apply(&pair.1.to_tensor())?,
    })
}

/// Coarse-to-fine decoder layout shared by the pair and fusion heads.
/// `groups` difference stacks enter at every scale, after the upsampled
/// decoder state.
#[derive(Debug, Clone)]
struct Decoder {
    width: usize,
    groups: usize,
    /// One conv per scale, coarsest first.
    convs: Vec<Conv>,
    out: Conv,
}

impl Decoder {
    fn new(ps: &mut ParamSet, width: usize, groups: usize, rng: &mut impl Rng) -> Self {
        let mut convs = Vec::with_capacity(SCALES);
        let mut up = 0;
        for s in (0..SCALES).rev() {
            let cin = up + groups * scale_channels(width, s);
            let cout = if s == 0 { width } else { scale_channels(width, s - 1) };
            convs.push(Conv::new(ps, &format!("dec{s}"), cin, cout, 3, 1, rng));
            up = cout;
        }
        let out = Conv::new(ps, "logit", width, 1, 1, 1, rng);
        Self {
            width,
            groups,
            convs,
            out,
        }
    }

    /// `diffs[g][s]`: group `g`, scale `s` (finest first).
    fn forward(&self, bound: &Bound, diffs: &[&[Var]]) -> Var {
        let mut h: Option<Var> = None;
        for (conv, s) in self.convs.iter().zip((0..SCALES).rev()) {
            let mut inputs = Vec::with_capacity(self.groups + 1);
            if let Some(prev) = &h {
                inputs.push(prev.upsample2x());
            }
            inputs.extend(diffs.iter().map(|g| g[s].clone()));
            let x = if inputs.len() == 1 {
                inputs.pop().expect("one input")
            } else {
                Var::cat(&inputs, 1)
            };
            h = Some(conv.forward(bound, &x).relu());
        }
        self.out.forward(bound, &h.expect("at least one scale"))
    }

    fn check(&self, diffs: &[&[Var]]) -> Result<()> {
        if diffs.len() != self.groups {
            return Err(Error::Config(format!(
                "head expects {} pair groups, got {}",
                self.groups,
                diffs.len()
            )));
        }
        for g in diffs {
            if g.len() != SCALES {
                return Err(Error::Shape(format!("expected {SCALES} feature scales, got {}", g.len())));
            }
            for (s, f) in g.iter().enumerate() {
                let c = f.shape()[1];
                if c != scale_channels(self.width, s) {
                    return Err(Error::Shape(format!(
                        "scale {s} features have {c} channels, head expects {}",
                        scale_channels(self.width, s)
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Decoder from one pair's difference features to change logits; shared
/// across all pairs.
#[derive(Debug, Clone)]
pub struct PairHead {
    params: ParamSet,
    decoder: Decoder,
}

impl PairHead {
    pub fn new(config: &BackboneConfig, rng: &mut impl Rng) -> Self {
        let mut ps = ParamSet::new();
        let decoder = Decoder::new(&mut ps, config.width, 1, rng);
        Self { params: ps, decoder }
    }

    /// Logits `[n, 1, H, W]`.
    pub fn forward(&self, bound: &Bound, diffs: &[Var]) -> Var {
        self.decoder.forward(bound, &[diffs])
    }

    pub fn check(&self, diffs: &[Var]) -> Result<()> {
        self.decoder.check(&[diffs])
    }

    /// Zeroes every parameter, so the head outputs logit 0 everywhere.
    pub fn zero(&mut self) {
        for t in self.params.tensors_mut() {
            t.scale_in_place(0.0);
        }
    }
}

impl Network for PairHead {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }
}

/// Decoder over the channel-wise concatenation of `K` pair-difference
/// groups.
#[derive(Debug, Clone)]
pub struct FusionHead {
    params: ParamSet,
    decoder: Decoder,
}

impl FusionHead {
    /// Built so that `K` identical difference groups reproduce the pair
    /// head's logits: group weight blocks are the pair head's divided by `K`.
    pub fn from_pair_head(pair: &PairHead, groups: usize) -> Self {
        let width = pair.decoder.width;
        let mut ps = ParamSet::new();
        // placeholder initialisation, overwritten below
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let decoder = Decoder::new(&mut ps, width, groups, &mut rng);
        let src = pair.params.tensors();
        let k = groups as f32;
        let mut up = 0;
        for (i, s) in (0..SCALES).rev().enumerate() {
            let pc = pair.decoder.convs[i];
            let fc = decoder.convs[i];
            let pw = &src[pc.weight];
            let gc = scale_channels(width, s);
            let (cout, pin, kh, kw) = pw.dims4();
            let area = kh * kw;
            let fin = up + groups * gc;
            let mut data = vec![0.0f32; cout * fin * area];
            for o in 0..cout {
                for ci in 0..fin {
                    let (src_c, scale) = if ci < up {
                        (ci, 1.0)
                    } else {
                        (up + (ci - up) % gc, 1.0 / k)
                    };
                    let from = (o * pin + src_c) * area;
                    let to = (o * fin + ci) * area;
                    for j in 0..area {
                        data[to + j] = pw.data()[from + j] * scale;
                    }
                }
            }
            *ps.tensor_mut(fc.weight) = Tensor::new(&[cout, fin, kh, kw], data);
            *ps.tensor_mut(fc.bias) = src[pc.bias].clone();
            up = cout;
        }
        *ps.tensor_mut(decoder.out.weight) = src[pair.decoder.out.weight].clone();
        *ps.tensor_mut(decoder.out.bias) = src[pair.decoder.out.bias].clone();
        Self { params: ps, decoder }
    }

    pub fn groups(&self) -> usize {
        self.decoder.groups
    }

    pub fn forward(&self, bound: &Bound, groups: &[&[Var]]) -> Var {
        self.decoder.forward(bound, groups)
    }

    pub fn check(&self, groups: &[&[Var]]) -> Result<()> {
        self.decoder.check(groups)
    }
}

impl Network for FusionHead {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }
}

/// Change classifier: shared pair head plus fusion head.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub pair_head: PairHead,
    pub fusion_head: FusionHead,
}

impl Classifier {
    pub fn new(config: &BackboneConfig, groups: usize, rng: &mut impl Rng) -> Self {
        let pair_head = PairHead::new(config, rng);
        let fusion_head = FusionHead::from_pair_head(&pair_head, groups);
        Self {
            pair_head,
            fusion_head,
        }
    }
}

fn tensor_vars(ts: &[Tensor]) -> Vec<Var> {
    ts.iter().cloned().map(Var::constant).collect()
}

fn probabilities(logits: &Var) -> Result<ChangeProbMap> {
    ChangeProbMap::from_tensor(logits.sigmoid().value(), 0)
}

pub fn predict_pair(head: &PairHead, f: &FeaturePair) -> Result<ChangeProbMap> {
    let diffs = tensor_vars(&f.differences());
    head.check(&diffs)?;
    probabilities(&head.forward(&head.params.bind(false), &diffs))
}

/// Pixelwise mean of probability maps.
pub fn output_fusion(maps: &[ChangeProbMap]) -> Result<ChangeProbMap> {
    let first = maps
        .first()
        .ok_or_else(|| Error::Config("output fusion needs at least one prediction".into()))?;
    if maps.iter().any(|m| m.height() != first.height() || m.width() != first.width()) {
        return Err(Error::Shape("fused predictions differ in dimensions".into()));
    }
    let k = maps.len() as f32;
    let values = (0..first.values().len())
        .map(|i| (maps.iter().map(|m| m.values()[i]).sum::<f32>() / k).clamp(0.0, 1.0))
        .collect();
    ChangeProbMap::new(first.height(), first.width(), values)
}

/// Final prediction from the configured pairs, in tag order.
pub fn fuse(
    c: &Classifier,
    features: &BTreeMap<DomainTag, FeaturePair>,
    strategy: FusionStrategy,
) -> Result<ChangeProbMap> {
    if features.is_empty() {
        return Err(Error::Config("fusion needs at least one pair".into()));
    }
    match strategy {
        FusionStrategy::Output => {
            let maps = features
                .values()
                .map(|f| predict_pair(&c.pair_head, f))
                .collect::<Result<Vec<_>>>()?;
            output_fusion(&maps)
        }
        FusionStrategy::Feature => {
            if features.len() != c.fusion_head.groups() {
                return Err(Error::Config(format!(
                    "fusion head was built for {} pairs, got {}",
                    c.fusion_head.groups(),
                    features.len()
                )));
            }
            let diffs: Vec<Vec<Var>> = features.values().map(|f| tensor_vars(&f.differences())).collect();
            let groups: Vec<&[Var]> = diffs.iter().map(Vec::as_slice).collect();
            c.fusion_head.check(&groups)?;
            probabilities(&c.fusion_head.forward(&c.fusion_head.params.bind(false), &groups))
        }
    }
}

/// `K`-way classifier telling which pair produced a prediction.
#[derive(Debug, Clone)]
pub struct DomainDiscriminator {
    classes: usize,
    params: ParamSet,
    convs: [Conv; 3],
    fc: Linear,
}

impl DomainDiscriminator {
    pub fn new(classes: usize, config: &BackboneConfig, rng: &mut impl Rng) -> Self {
        let c = config.discriminator_width;
        let mut ps = ParamSet::new();
        let convs = [
            Conv::new(&mut ps, "conv1", 1, c, 3, 2, rng),
            Conv::new(&mut ps, "conv2", c, 2 * c, 3, 2, rng),
            Conv::new(&mut ps, "conv3", 2 * c, 4 * c, 3, 2, rng),
        ];
        let fc = Linear::new(&mut ps, "fc", 4 * c, classes, rng);
        Self {
            classes,
            params: ps,
            convs,
            fc,
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// Class probabilities `[n, K]` for probability maps `[n, 1, H, W]`.
    pub fn forward(&self, bound: &Bound, probs: &Var) -> Var {
        let mut h = probs.scale(2.0).add_scalar(-1.0);
        for conv in &self.convs {
            h = conv.forward(bound, &h).leaky_relu(0.2);
        }
        self.fc.forward(bound, &h.global_avg_pool()).softmax_rows()
    }

    /// Zeroes the output layer so every output is uniform.
    pub fn make_uniform(&mut self) {
        self.fc.zero(&mut self.params);
    }
}

impl Network for DomainDiscriminator {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }
}

/// Every row of `[n, K]` is nonnegative and sums to 1 within `1e-6`.
pub fn check_simplex(probs: &Tensor) -> Result<()> {
    let k = probs.shape()[1];
    for (r, row) in probs.data().chunks(k).enumerate() {
        let sum: f64 = row.iter().map(|&v| v as f64).sum();
        if row.iter().any(|v| !v.is_finite() || *v < 0.0) || (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Numerical(format!(
                "domain discriminator row {r} is not a distribution: {row:?} (sum {sum})"
            )));
        }
    }
    Ok(())
}

/// Mean over rows of `-Σ_k target[r, k] · ln max(p[r, k], ε)`.
fn cross_entropy(probs: &Var, target: Tensor) -> Result<Var> {
    check_simplex(probs.value())?;
    let rows = probs.shape()[0] as f32;
    Ok(probs
        .log_floor(PROB_FLOOR)
        .mul(&Var::constant(target))
        .sum_all()
        .scale(-1.0 / rows))
}

/// Cross-entropy of `[n, K]` class probabilities against true labels.
pub fn domain_cross_entropy(probs: &Var, labels: &[usize]) -> Result<Var> {
    let (n, k) = (probs.shape()[0], probs.shape()[1]);
    if labels.len() != n || labels.iter().any(|&l| l >= k) {
        return Err(Error::Shape(format!("{} labels for {n} rows over {k} classes", labels.len())));
    }
    let mut target = vec![0.0f32; n * k];
    for (r, &l) in labels.iter().enumerate() {
        target[r * k + l] = 1.0;
    }
    cross_entropy(probs, Tensor::new(&[n, k], target))
}

/// Cross-entropy of `[n, K]` class probabilities against the uniform
/// distribution.
pub fn uniform_cross_entropy(probs: &Var) -> Result<Var> {
    let (n, k) = (probs.shape()[0], probs.shape()[1]);
    cross_entropy(probs, Tensor::full(&[n, k], 1.0 / k as f32))
}

fn stack_predictions(
    d_f: &DomainDiscriminator,
    preds: &BTreeMap<DomainTag, ChangeProbMap>,
) -> Result<(Tensor, Vec<usize>)> {
    if preds.len() != d_f.classes() {
        return Err(Error::Config(format!(
            "domain discriminator has {} classes, got {} predictions",
            d_f.classes(),
            preds.len()
        )));
    }
    let tensors: Vec<Tensor> = preds.values().map(ChangeProbMap::to_tensor).collect();
    let refs: Vec<&Tensor> = tensors.iter().collect();
    Ok((Tensor::stack_batch(&refs), (0..preds.len()).collect()))
}

/// Mean cross-entropy of the discriminator identifying each prediction's
/// pair; class `i` is the `i`-th tag in order.
pub fn fa_discriminator_loss(
    d_f: &DomainDiscriminator,
    preds: &BTreeMap<DomainTag, ChangeProbMap>,
) -> Result<f64> {
    let (x, labels) = stack_predictions(d_f, preds)?;
    let probs = d_f.forward(&d_f.params.bind(false), &Var::constant(x));
    Ok(domain_cross_entropy(&probs, &labels)?.value().item() as f64)
}

/// Mean cross-entropy between the discriminator output and the uniform
/// distribution over the active pairs.
pub fn fa_confusion_loss(
    d_f: &DomainDiscriminator,
    preds: &BTreeMap<DomainTag, ChangeProbMap>,
) -> Result<f64> {
    let (x, _) = stack_predictions(d_f, preds)?;
    let probs = d_f.forward(&d_f.params.bind(false), &Var::constant(x));
    Ok(uniform_cross_entropy(&probs)?.value().item() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::RangeTag;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_image(h: usize, w: usize, seed: u64) -> Image {
        let mut r = rng(seed);
        let v = (0..h * w * 3).map(|_| r.random_range(-1.0f32..=1.0)).collect();
        Image::new(h, w, 3, v, RangeTag::SignedUnit).unwrap()
    }

    #[test]
    fn extractor_shapes_and_symmetry() {
        let e = Extractor::new(&BackboneConfig::default(), &mut rng(1));
        let img = random_image(64, 64, 2);
        let f = extract_pair(&e, &(img.clone(), img)).unwrap();
        assert_eq!(f.pre, f.post);
        assert_eq!(f.pre[2].shape(), &[1, 32, 16, 16]);
        assert_eq!(f.pre[0].shape(), &[1, 8, 64, 64]);
        let odd = Image::filled(30, 30, 3, 0.0, RangeTag::SignedUnit).unwrap();
        assert!(matches!(extract_pair(&e, &(odd.clone(), odd)), Err(Error::Shape(_))));
    }

    #[test]
    fn pair_prediction_contract() {
        let cfg = BackboneConfig::default();
        let e = Extractor::new(&cfg, &mut rng(3));
        let c = Classifier::new(&cfg, 3, &mut rng(4));
        let a = random_image(32, 32, 5);
        let b = random_image(32, 32, 6);
        let p = predict_pair(&c.pair_head, &extract_pair(&e, &(a.clone(), b.clone())).unwrap()).unwrap();
        assert_eq!((p.height(), p.width()), (32, 32));
        let swapped = predict_pair(&c.pair_head, &extract_pair(&e, &(b, a)).unwrap()).unwrap();
        assert_ne!(p, swapped);
    }

    #[test]
    fn zero_head_gives_half() {
        let cfg = BackboneConfig::default();
        let mut head = PairHead::new(&cfg, &mut rng(7));
        head.zero();
        let zeros = (0..SCALES)
            .map(|s| Tensor::zeros(&[1, scale_channels(8, s), 16 >> s, 16 >> s]))
            .collect::<Vec<_>>();
        let f = FeaturePair {
            pre: zeros.clone(),
            post: zeros,
        };
        let p = predict_pair(&head, &f).unwrap();
        assert!(p.values().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn head_rejects_wrong_width() {
        let head = PairHead::new(&BackboneConfig::default(), &mut rng(8));
        let e = Extractor::new(&BackboneConfig { width: 4, ..Default::default() }, &mut rng(9));
        let img = random_image(16, 16, 10);
        let f = extract_pair(&e, &(img.clone(), img)).unwrap();
        assert!(matches!(predict_pair(&head, &f), Err(Error::Shape(_))));
    }

    #[test]
    fn fusion_of_identical_groups_equals_pair_prediction() {
        let cfg = BackboneConfig::default();
        let e = Extractor::new(&cfg, &mut rng(11));
        let c = Classifier::new(&cfg, 3, &mut rng(12));
        let f = extract_pair(&e, &(random_image(32, 32, 13), random_image(32, 32, 14))).unwrap();
        let features: BTreeMap<_, _> = DomainTag::ALL.iter().map(|&t| (t, f.clone())).collect();
        let groups: Vec<_> = features.values().map(FeaturePair::differences).collect();
        assert!(groups.windows(2).all(|w| w[0] == w[1]));
        let fused = fuse(&c, &features, FusionStrategy::Feature).unwrap();
        let single = predict_pair(&c.pair_head, &f).unwrap();
        for (a, b) in fused.values().iter().zip(single.values()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn fusion_requires_configured_pairs() {
        let cfg = BackboneConfig::default();
        let e = Extractor::new(&cfg, &mut rng(15));
        let c = Classifier::new(&cfg, 3, &mut rng(16));
        let f = extract_pair(&e, &(random_image(16, 16, 17), random_image(16, 16, 18))).unwrap();
        let two: BTreeMap<_, _> = [(DomainTag::Original, f.clone()), (DomainTag::PreDomain, f)].into();
        assert!(matches!(fuse(&c, &two, FusionStrategy::Feature), Err(Error::Config(_))));
        assert!(fuse(&c, &two, FusionStrategy::Output).is_ok());
        let c2 = Classifier::new(&cfg, 2, &mut rng(16));
        assert_eq!(fuse(&c2, &two, FusionStrategy::Feature).unwrap().height(), 16);
    }

    #[test]
    fn output_fusion_examples() {
        let m = |v: f32| ChangeProbMap::uniform(2, 2, v).unwrap();
        assert_eq!(output_fusion(&[m(0.3), m(0.3), m(0.3)]).unwrap().values(), m(0.3).values());
        assert_eq!(output_fusion(&[m(0.0), m(0.5), m(1.0)]).unwrap(), m(0.5));
    }

    fn preds(k: usize) -> BTreeMap<DomainTag, ChangeProbMap> {
        DomainTag::ALL[..k]
            .iter()
            .enumerate()
            .map(|(i, &t)| (t, ChangeProbMap::uniform(16, 16, 0.2 + 0.3 * i as f32).unwrap()))
            .collect()
    }

    #[test]
    fn uniform_discriminator_losses() {
        let mut d = DomainDiscriminator::new(3, &BackboneConfig::default(), &mut rng(20));
        d.make_uniform();
        let l = fa_discriminator_loss(&d, &preds(3)).unwrap();
        assert!((l - 3f64.ln()).abs() < 1e-6, "{l}");
        assert!((fa_confusion_loss(&d, &preds(3)).unwrap() - 3f64.ln()).abs() < 1e-6);
        let mut d2 = DomainDiscriminator::new(2, &BackboneConfig::default(), &mut rng(21));
        d2.make_uniform();
        assert!((fa_discriminator_loss(&d2, &preds(2)).unwrap() - 2f64.ln()).abs() < 1e-6);
        assert!(matches!(fa_discriminator_loss(&d2, &preds(3)), Err(Error::Config(_))));
    }

    #[test]
    fn one_hot_cross_entropies() {
        let eye = Var::constant(Tensor::new(&[3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]));
        assert_eq!(domain_cross_entropy(&eye, &[0, 1, 2]).unwrap().value().item(), 0.0);
        let conf = uniform_cross_entropy(&eye).unwrap().value().item() as f64;
        let expected = (2.0 / 3.0) * (1e7f64).ln();
        assert!((conf - expected).abs() < 1e-3, "{conf} vs {expected}");
    }

    #[test]
    fn simplex_violation_is_numerical_error() {
        let bad = Var::constant(Tensor::new(&[1, 2], vec![0.7, 0.7]));
        assert!(matches!(uniform_cross_entropy(&bad), Err(Error::Numerical(_))));
    }

    #[test]
    fn discriminator_outputs_are_distributions() {
        let d = DomainDiscriminator::new(3, &BackboneConfig::default(), &mut rng(22));
        let x = Tensor::new(&[4, 1, 8, 8], (0..256).map(|i| (i % 7) as f32 / 7.0).collect());
        let p = d.forward(&d.params.bind(false), &Var::constant(x));
        check_simplex(p.value()).unwrap();
    }
}
