//! Value types shared by every stage of the pipeline: images, masks,
//! probability maps, bi-temporal samples and the three-pair set.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use sdacd_grad::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default binarization threshold for probability maps.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Declared value interval of an [`Image`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RangeTag {
    /// `[0, 255]`
    Raw0To255,
    /// `[0, 1]`
    Unit,
    /// `[-1, 1]`
    SignedUnit,
}

impl RangeTag {
    pub fn bounds(self) -> (f32, f32) {
        match self {
            RangeTag::Raw0To255 => (0.0, 255.0),
            RangeTag::Unit => (0.0, 1.0),
            RangeTag::SignedUnit => (-1.0, 1.0),
        }
    }
}

/// Channel-major (`C×H×W`) real raster.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    values: Vec<f32>,
    range: RangeTag,
}

impl Image {
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        values: Vec<f32>,
        range: RangeTag,
    ) -> Result<Self> {
        if height == 0 || width == 0 || channels == 0 {
            return Err(Error::Shape(format!(
                "image dimensions must be positive, got {height}x{width}x{channels}"
            )));
        }
        if values.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "image {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                values.len()
            )));
        }
        let (lo, hi) = range.bounds();
        if let Some(bad) = values.iter().find(|v| !(lo..=hi).contains(*v)) {
            return Err(Error::Ingestion(format!(
                "value {bad} outside the {range:?} interval [{lo}, {hi}]"
            )));
        }
        Ok(Self {
            height,
            width,
            channels,
            values,
            range,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32, range: RangeTag) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels], range)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn range(&self) -> RangeTag {
        self.range
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.values[(c * self.height + y) * self.width + x]
    }

    /// `[1, C, H, W]` tensor view of the pixel values.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[1, self.channels, self.height, self.width], self.values.clone())
    }

    /// Extracts sample `index` of an NCHW tensor.
    pub fn from_tensor(t: &Tensor, index: usize, range: RangeTag) -> Result<Self> {
        let (_, c, h, w) = t.dims4();
        let (lo, hi) = range.bounds();
        let values = t.batch_item(index).into_data();
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite pixel {bad} in network output")));
        }
        // network outputs may overshoot by rounding only
        let values = values.into_iter().map(|v| v.clamp(lo, hi)).collect();
        Self::new(h, w, c, values, range)
    }

    pub fn same_dims(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }
}

/// Maps raw 8-bit intensities affinely onto `[-1, 1]`.
pub fn normalize_image(raw: &Image) -> Result<Image> {
    if raw.range != RangeTag::Raw0To255 {
        return Err(Error::Ingestion(format!(
            "normalize_image expects a raw [0, 255] image, got {:?}",
            raw.range
        )));
    }
    let values = raw
        .values
        .iter()
        .map(|&v| ((v as f64) / 127.5 - 1.0).clamp(-1.0, 1.0) as f32)
        .collect();
    Image::new(raw.height, raw.width, raw.channels, values, RangeTag::SignedUnit)
}

/// Inverse of [`normalize_image`].
pub fn denormalize_image(img: &Image) -> Result<Image> {
    if img.range != RangeTag::SignedUnit {
        return Err(Error::Ingestion(format!(
            "denormalize_image expects a [-1, 1] image, got {:?}",
            img.range
        )));
    }
    let values = img
        .values
        .iter()
        .map(|&v| (((v as f64) + 1.0) * 127.5).clamp(0.0, 255.0) as f32)
        .collect();
    Image::new(img.height, img.width, img.channels, values, RangeTag::Raw0To255)
}

/// Binary change map, `1` = changed.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ChangeMask {
    height: usize,
    width: usize,
    values: Vec<u8>,
}

impl ChangeMask {
    pub fn new(height: usize, width: usize, values: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || values.len() != height * width {
            return Err(Error::Shape(format!(
                "mask {height}x{width} with {} values",
                values.len()
            )));
        }
        if values.iter().any(|&v| v > 1) {
            return Err(Error::Ingestion("change mask values must be 0 or 1".into()));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            values: vec![0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.values[y * self.width + x]
    }

    pub fn count_changed(&self) -> usize {
        self.values.iter().filter(|&&v| v == 1).count()
    }

    /// The mask read back as a (degenerate) probability map.
    pub fn to_probabilities(&self) -> ChangeProbMap {
        ChangeProbMap {
            height: self.height,
            width: self.width,
            values: self.values.iter().map(|&v| v as f32).collect(),
        }
    }
}

/// Per-pixel change probabilities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChangeProbMap {
    height: usize,
    width: usize,
    values: Vec<f32>,
}

impl ChangeProbMap {
    pub fn new(height: usize, width: usize, values: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || values.len() != height * width {
            return Err(Error::Shape(format!(
                "probability map {height}x{width} with {} values",
                values.len()
            )));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite() || !(0.0..=1.0).contains(*v)) {
            return Err(Error::Numerical(format!("probability {bad} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn uniform(height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[1, 1, self.height, self.width], self.values.clone())
    }

    /// Extracts sample `index` of an `[n, 1, h, w]` tensor.
    pub fn from_tensor(t: &Tensor, index: usize) -> Result<Self> {
        let (_, c, h, w) = t.dims4();
        if c != 1 {
            return Err(Error::Shape(format!("probability maps have 1 channel, got {c}")));
        }
        Self::new(h, w, t.data()[index * h * w..(index + 1) * h * w].to_vec())
    }
}

/// Thresholds a probability map; a pixel is changed iff `p >= threshold`.
pub fn binarize(prob: &ChangeProbMap, threshold: f64) -> Result<ChangeMask> {
    validate_threshold(threshold)?;
    let values = prob
        .values
        .iter()
        .map(|&p| u8::from(p as f64 >= threshold))
        .collect();
    ChangeMask::new(prob.height, prob.width, values)
}

pub fn validate_threshold(threshold: f64) -> Result<()> {
    if threshold > 0.0 && threshold < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "binarization threshold must lie in (0, 1), got {threshold}"
        )))
    }
}

/// Which of the three bi-temporal pairs a prediction comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainTag {
    /// `(I_pre, I_post)`
    Original,
    /// `(I_pre, I_post→pre)`
    PreDomain,
    /// `(I_pre→post, I_post)`
    PostDomain,
}

impl DomainTag {
    pub const ALL: [DomainTag; 3] = [DomainTag::Original, DomainTag::PreDomain, DomainTag::PostDomain];

    pub fn name(self) -> &'static str {
        match self {
            DomainTag::Original => "original",
            DomainTag::PreDomain => "pre_domain",
            DomainTag::PostDomain => "post_domain",
        }
    }
}

impl fmt::Display for DomainTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DomainTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "original" | "orig" | "i" => Ok(DomainTag::Original),
            "pre_domain" | "pre" | "ii" => Ok(DomainTag::PreDomain),
            "post_domain" | "post" | "iii" => Ok(DomainTag::PostDomain),
            other => Err(Error::Config(format!("unknown domain tag `{other}`"))),
        }
    }
}

/// A sorted, duplicate-free, nonempty subset of [`DomainTag`].
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<DomainTag>", into = "Vec<DomainTag>")]
pub struct TagSet(Vec<DomainTag>);

impl TagSet {
    pub fn new(tags: impl IntoIterator<Item = DomainTag>) -> Result<Self> {
        let mut v: Vec<DomainTag> = tags.into_iter().collect();
        v.sort();
        v.dedup();
        if v.is_empty() {
            return Err(Error::Config("active tag set must be nonempty".into()));
        }
        Ok(TagSet(v))
    }

    pub fn all() -> Self {
        TagSet(DomainTag::ALL.to_vec())
    }

    pub fn original_only() -> Self {
        TagSet(vec![DomainTag::Original])
    }

    /// The seven nonempty subsets, singletons first, in pair-ablation table order.
    pub fn nonempty_subsets() -> Vec<TagSet> {
        use DomainTag::*;
        [
            vec![Original],
            vec![PreDomain],
            vec![PostDomain],
            vec![Original, PreDomain],
            vec![Original, PostDomain],
            vec![PreDomain, PostDomain],
            vec![Original, PreDomain, PostDomain],
        ]
        .into_iter()
        .map(TagSet)
        .collect()
    }

    pub fn tags(&self) -> &[DomainTag] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, tag: DomainTag) -> bool {
        self.0.contains(&tag)
    }

    /// Class index of `tag` for the domain discriminator.
    pub fn index_of(&self, tag: DomainTag) -> Option<usize> {
        self.0.iter().position(|&t| t == tag)
    }

    /// Whether any active pair uses a translated image.
    pub fn needs_translation(&self) -> bool {
        self.0.iter().any(|&t| t != DomainTag::Original)
    }
}

impl TryFrom<Vec<DomainTag>> for TagSet {
    type Error = Error;

    fn try_from(v: Vec<DomainTag>) -> Result<Self> {
        TagSet::new(v)
    }
}

impl From<TagSet> for Vec<DomainTag> {
    fn from(t: TagSet) -> Self {
        t.0
    }
}

impl fmt::Display for TagSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = self.0.iter().map(|t| t.name()).collect();
        f.write_str(&names.join(","))
    }
}

impl FromStr for TagSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let tags = s
            .split(|c| c == ',' || c == '+')
            .filter(|p| !p.trim().is_empty())
            .map(DomainTag::from_str)
            .collect::<Result<Vec<_>>>()?;
        TagSet::new(tags)
    }
}

/// Registered pre/post images with their shared ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct BiTemporalSample {
    pub id: String,
    pub pre: Image,
    pub post: Image,
    pub gt: ChangeMask,
}

impl BiTemporalSample {
    pub fn new(id: impl Into<String>, pre: Image, post: Image, gt: ChangeMask) -> Result<Self> {
        let s = Self {
            id: id.into(),
            pre,
            post,
            gt,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.pre.same_dims(&self.post) {
            return Err(Error::Shape(format!(
                "sample {}: pre {}x{}x{} vs post {}x{}x{}",
                self.id,
                self.pre.height,
                self.pre.width,
                self.pre.channels,
                self.post.height,
                self.post.width,
                self.post.channels
            )));
        }
        if self.gt.height != self.pre.height || self.gt.width != self.pre.width {
            return Err(Error::Shape(format!(
                "sample {}: ground truth {}x{} vs images {}x{}",
                self.id, self.gt.height, self.gt.width, self.pre.height, self.pre.width
            )));
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.pre.height
    }

    pub fn width(&self) -> usize {
        self.pre.width
    }
}

/// The bi-temporal pairs fed to feature adaptation, keyed by domain.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSet {
    pairs: BTreeMap<DomainTag, (Image, Image)>,
    gt: ChangeMask,
}

impl PairSet {
    pub fn new(pairs: BTreeMap<DomainTag, (Image, Image)>, gt: ChangeMask) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Config("a pair set needs at least one pair".into()));
        }
        let reference = &pairs.values().next().expect("nonempty").0;
        for (tag, (a, b)) in &pairs {
            if !a.same_dims(reference) || !b.same_dims(reference) {
                return Err(Error::Shape(format!("pair {tag} has mismatched image dimensions")));
            }
        }
        if gt.height != reference.height || gt.width != reference.width {
            return Err(Error::Shape("pair set ground truth does not match images".into()));
        }
        Ok(Self { pairs, gt })
    }

    pub fn get(&self, tag: DomainTag) -> Option<&(Image, Image)> {
        self.pairs.get(&tag)
    }

    pub fn tags(&self) -> impl Iterator<Item = DomainTag> + '_ {
        self.pairs.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn gt(&self) -> &ChangeMask {
        &self.gt
    }

    pub fn iter(&self) -> impl Iterator<Item = (DomainTag, &(Image, Image))> {
        self.pairs.iter().map(|(t, p)| (*t, p))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn probs(h: usize, w: usize, v: Vec<f32>) -> ChangeProbMap {
        ChangeProbMap::new(h, w, v).unwrap()
    }

    #[test]
    fn binarize_uniform_and_boundary() {
        let m = binarize(&ChangeProbMap::uniform(3, 3, 0.7).unwrap(), 0.5).unwrap();
        assert!(m.values().iter().all(|&v| v == 1));
        let m = binarize(&ChangeProbMap::uniform(3, 3, 0.5).unwrap(), 0.5).unwrap();
        assert!(m.values().iter().all(|&v| v == 1));
    }

    #[test]
    fn binarize_two_by_two() {
        let m = binarize(&probs(2, 2, vec![0.2, 0.9, 0.5, 0.49]), 0.5).unwrap();
        assert_eq!(m.values(), &[0, 1, 1, 0]);
    }

    #[test]
    fn binarize_rejects_bad_threshold() {
        let p = ChangeProbMap::uniform(1, 1, 0.3).unwrap();
        for t in [0.0, 1.0, -0.2, 1.5] {
            assert!(matches!(binarize(&p, t), Err(Error::Config(_))));
        }
    }

    #[test]
    fn normalize_endpoints_and_midpoint() {
        let raw = Image::new(1, 3, 1, vec![0.0, 255.0, 127.5], RangeTag::Raw0To255).unwrap();
        let n = normalize_image(&raw).unwrap();
        assert_eq!(n.values(), &[-1.0, 1.0, 0.0]);
        assert_eq!(n.range(), RangeTag::SignedUnit);
    }

    #[test]
    fn normalize_rejects_out_of_range() {
        assert!(Image::new(1, 1, 1, vec![256.0], RangeTag::Raw0To255).is_err());
        let unit = Image::new(1, 1, 1, vec![0.5], RangeTag::Unit).unwrap();
        assert!(matches!(normalize_image(&unit), Err(Error::Ingestion(_))));
    }

    #[test]
    fn image_invariants() {
        assert!(Image::new(0, 2, 3, vec![], RangeTag::Unit).is_err());
        assert!(Image::new(2, 2, 3, vec![0.0; 11], RangeTag::Unit).is_err());
        assert!(ChangeMask::new(1, 2, vec![0, 2]).is_err());
        assert!(ChangeProbMap::new(1, 1, vec![f32::NAN]).is_err());
    }

    #[test]
    fn sample_dimension_agreement() {
        let a = Image::filled(4, 4, 3, 0.0, RangeTag::SignedUnit).unwrap();
        let b = Image::filled(4, 5, 3, 0.0, RangeTag::SignedUnit).unwrap();
        assert!(BiTemporalSample::new("x", a.clone(), b, ChangeMask::zeros(4, 4)).is_err());
        assert!(BiTemporalSample::new("x", a.clone(), a.clone(), ChangeMask::zeros(4, 3)).is_err());
        assert!(BiTemporalSample::new("x", a.clone(), a, ChangeMask::zeros(4, 4)).is_ok());
    }

    #[test]
    fn tag_set_parsing_and_subsets() {
        let t: TagSet = "post_domain,original".parse().unwrap();
        assert_eq!(t.tags(), &[DomainTag::Original, DomainTag::PostDomain]);
        assert_eq!(t.index_of(DomainTag::PostDomain), Some(1));
        assert!("".parse::<TagSet>().is_err());
        let subsets = TagSet::nonempty_subsets();
        assert_eq!(subsets.len(), 7);
        let unique: std::collections::HashSet<_> = subsets.iter().collect();
        assert_eq!(unique.len(), 7);
    }

    proptest! {
        #[test]
        fn binarize_is_idempotent(vals in proptest::collection::vec(0.0f32..=1.0, 16), t in 0.01f64..0.99) {
            let p = probs(4, 4, vals);
            let once = binarize(&p, t).unwrap();
            let twice = binarize(&once.to_probabilities(), t).unwrap();
            prop_assert_eq!(once, twice);
        }

        #[test]
        fn normalization_round_trips(vals in proptest::collection::vec(-1.0f32..=1.0, 12)) {
            let img = Image::new(2, 2, 3, vals.clone(), RangeTag::SignedUnit).unwrap();
            let back = normalize_image(&denormalize_image(&img).unwrap()).unwrap();
            for (a, b) in back.values().iter().zip(&vals) {
                prop_assert!((a - b).abs() <= 1e-6);
            }
        }
    }
}
