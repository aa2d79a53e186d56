//! Synthetic chest-film-like images with geometric lesions.
//!
//! Every class owns a primitive shape with a size and intensity range. An
//! image gets a smooth background with two darker lung fields, one lesion per
//! active class added on top, then Gaussian noise and 8-bit quantization. The
//! segmentation mask is the union of the lesion footprints.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::manifest::{ClassificationEntry, ClassificationManifest, SegmentationEntry, SegmentationManifest};
use super::{Dataset, Image, Targets};
use crate::error::{config_err, Error, Result};
use crate::vit::keyed_rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Primitive {
    Disk,
    Square,
    Ring,
    Cross,
    Triangle,
    Bar,
}

impl Primitive {
    pub const ALL: [Primitive; 6] = [
        Primitive::Disk,
        Primitive::Square,
        Primitive::Ring,
        Primitive::Cross,
        Primitive::Triangle,
        Primitive::Bar,
    ];

    /// Whether offset `(dx, dy)` from the center lies inside a shape of size `r`.
    pub fn contains(self, dx: f64, dy: f64, r: f64) -> bool {
        match self {
            Primitive::Disk => dx * dx + dy * dy <= r * r,
            Primitive::Square => dx.abs() <= r * 0.85 && dy.abs() <= r * 0.85,
            Primitive::Ring => {
                let d2 = dx * dx + dy * dy;
                d2 <= r * r && d2 >= (0.55 * r) * (0.55 * r)
            }
            Primitive::Cross => {
                let w = (0.3 * r).max(1.0);
                (dx.abs() <= w && dy.abs() <= r) || (dy.abs() <= w && dx.abs() <= r)
            }
            Primitive::Triangle => dy <= r * 0.8 && dy >= -r && dx.abs() <= (dy + r) * 0.6,
            Primitive::Bar => dx.abs() <= r * 1.2 && dy.abs() <= (0.3 * r).max(1.0),
        }
    }
}

impl fmt::Display for Primitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).ok();
        write!(f, "{}", s.as_ref().and_then(|v| v.as_str()).unwrap_or("?"))
    }
}

impl FromStr for Primitive {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| config_err!("unknown primitive `{s}`"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LesionClass {
    pub name: String,
    pub primitive: Primitive,
    /// Radius-like size range in pixels.
    pub size: (f64, f64),
    /// Additive brightness range.
    pub intensity: (f64, f64),
    /// Box `(x0, y0, x1, y1)`, as fractions of the image side, in which the
    /// lesion center is placed.
    #[serde(default = "whole_image")]
    pub region: (f64, f64, f64, f64),
}

fn whole_image() -> (f64, f64, f64, f64) {
    (0.0, 0.0, 1.0, 1.0)
}

/// Default placement regions: each class favors one part of the lung fields.
const REGIONS: [(f64, f64, f64, f64); 6] = [
    (0.1, 0.1, 0.6, 0.6),
    (0.4, 0.1, 0.9, 0.6),
    (0.1, 0.4, 0.6, 0.9),
    (0.4, 0.4, 0.9, 0.9),
    (0.25, 0.1, 0.75, 0.6),
    (0.25, 0.4, 0.75, 0.9),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub image_size: usize,
    pub num_classes: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Standard deviation of the additive pixel noise.
    pub noise: f64,
    /// Probability that a given class is present.
    pub prevalence: f64,
    /// Probability that an image with exactly one lesion gets a second class.
    pub co_occurrence: f64,
    /// Explicit grammar; empty means the built-in one for `num_classes`.
    pub classes: Vec<LesionClass>,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            num_classes: 4,
            train: 2000,
            val: 250,
            test: 500,
            noise: 0.06,
            prevalence: 0.3,
            co_occurrence: 0.25,
            classes: Vec::new(),
            seed: 0,
        }
    }
}

fn default_grammar(n: usize) -> Vec<LesionClass> {
    Primitive::ALL
        .iter()
        .take(n)
        .enumerate()
        .map(|(i, &p)| LesionClass {
            name: p.to_string(),
            primitive: p,
            size: (3.5, 6.5),
            intensity: (0.12, 0.3),
            region: REGIONS[i],
        })
        .collect()
}

fn overlaps(a: (f64, f64), b: (f64, f64)) -> bool {
    a.0 <= b.1 && b.0 <= a.1
}

impl SyntheticConfig {
    /// The grammar in effect, explicit or built-in.
    pub fn grammar(&self) -> Vec<LesionClass> {
        if self.classes.is_empty() {
            default_grammar(self.num_classes)
        } else {
            self.classes.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 {
            return Err(config_err!("image_size must be at least 16"));
        }
        if self.num_classes == 0 {
            return Err(config_err!("num_classes must be positive"));
        }
        if self.classes.is_empty() && self.num_classes > Primitive::ALL.len() {
            return Err(config_err!(
                "the built-in grammar covers at most {} classes; give an explicit grammar",
                Primitive::ALL.len()
            ));
        }
        if !self.classes.is_empty() && self.classes.len() != self.num_classes {
            return Err(config_err!(
                "grammar has {} classes but num_classes is {}",
                self.classes.len(),
                self.num_classes
            ));
        }
        if !(self.noise >= 0.0) {
            return Err(config_err!("noise must be >= 0"));
        }
        for (name, p) in [("prevalence", self.prevalence), ("co_occurrence", self.co_occurrence)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(config_err!("{name} must lie in [0, 1]"));
            }
        }
        let g = self.grammar();
        let max_size = self.image_size as f64 / 4.0;
        for c in &g {
            if !(c.size.0 >= 1.0 && c.size.0 <= c.size.1 && c.size.1 <= max_size) {
                return Err(config_err!("class `{}`: size range must satisfy 1 <= lo <= hi <= {max_size}", c.name));
            }
            if !(c.intensity.0 > 0.0 && c.intensity.0 <= c.intensity.1 && c.intensity.1 <= 0.5) {
                return Err(config_err!("class `{}`: intensity range must satisfy 0 < lo <= hi <= 0.5", c.name));
            }
            let (x0, y0, x1, y1) = c.region;
            if !(0.0 <= x0 && x0 < x1 && x1 <= 1.0 && 0.0 <= y0 && y0 < y1 && y1 <= 1.0) {
                return Err(config_err!("class `{}`: region must be a box inside [0, 1]^2", c.name));
            }
        }
        for (i, a) in g.iter().enumerate() {
            for b in &g[i + 1..] {
                if a.name == b.name {
                    return Err(config_err!("duplicate class name `{}`", a.name));
                }
                if a.primitive == b.primitive && overlaps(a.size, b.size) && overlaps(a.intensity, b.intensity) {
                    return Err(config_err!(
                        "classes `{}` and `{}` use the same primitive with overlapping ranges",
                        a.name,
                        b.name
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Background parameters of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct Background {
    pub base: f64,
    pub gradient: f64,
    pub lung_dark: f64,
    /// Lung centers as fractions of the image side, and their radii.
    pub lungs: [(f64, f64, f64, f64); 2],
}

#[derive(Clone, Debug, PartialEq)]
pub struct LesionInstance {
    pub class: usize,
    pub cx: f64,
    pub cy: f64,
    pub size: f64,
    pub intensity: f64,
}

/// Everything needed to render one sample deterministically.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSpec {
    pub background: Background,
    pub lesions: Vec<LesionInstance>,
}

fn draw<R: Rng + ?Sized>(rng: &mut R, r: (f64, f64)) -> f64 {
    if r.1 > r.0 {
        rng.random_range(r.0..r.1)
    } else {
        r.0
    }
}

fn sample_spec<R: Rng + ?Sized>(cfg: &SyntheticConfig, grammar: &[LesionClass], rng: &mut R) -> SampleSpec {
    let s = cfg.image_size as f64;
    let background = Background {
        base: draw(rng, (0.45, 0.6)),
        gradient: draw(rng, (-0.1, 0.1)),
        lung_dark: draw(rng, (0.1, 0.2)),
        lungs: [
            (draw(rng, (0.28, 0.34)), draw(rng, (0.45, 0.55)), draw(rng, (0.14, 0.18)), draw(rng, (0.28, 0.34))),
            (draw(rng, (0.66, 0.72)), draw(rng, (0.45, 0.55)), draw(rng, (0.14, 0.18)), draw(rng, (0.28, 0.34))),
        ],
    };
    let mut active: Vec<usize> = (0..grammar.len()).filter(|_| rng.random::<f64>() < cfg.prevalence).collect();
    if active.len() == 1 && grammar.len() > 1 && rng.random::<f64>() < cfg.co_occurrence {
        let mut other = rng.random_range(0..grammar.len() - 1);
        if other >= active[0] {
            other += 1;
        }
        active.push(other);
        active.sort_unstable();
    }
    let lesions = active
        .into_iter()
        .map(|class| {
            let g = &grammar[class];
            let size = draw(rng, g.size);
            let margin = size * 1.3 + 1.0;
            let (x0, y0, x1, y1) = g.region;
            let span = |lo: f64, hi: f64| (margin.max(lo * s), (s - margin).min(hi * s).max(margin.max(lo * s)));
            LesionInstance {
                class,
                cx: draw(rng, span(x0, x1)),
                cy: draw(rng, span(y0, y1)),
                size,
                intensity: draw(rng, g.intensity),
            }
        })
        .collect();
    SampleSpec { background, lesions }
}

/// Renders a sample: returns the image before noise/quantization and the mask.
pub fn synth_render(spec: &SampleSpec, grammar: &[LesionClass], size: usize) -> (Image, Image) {
    let s = size as f64;
    let b = &spec.background;
    let mut img = Image::zeros(1, size, size);
    let mut mask = Image::zeros(1, size, size);
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = ((x as f64 + 0.5) / s, (y as f64 + 0.5) / s);
            let mut v = b.base + b.gradient * (fy - 0.5);
            for &(cx, cy, rx, ry) in &b.lungs {
                let d = ((fx - cx) / rx).powi(2) + ((fy - cy) / ry).powi(2);
                if d < 1.0 {
                    // soft-edged darkening
                    v -= b.lung_dark * (1.0 - d).sqrt();
                }
            }
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            for l in &spec.lesions {
                if grammar[l.class].primitive.contains(px - l.cx, py - l.cy, l.size) {
                    v += l.intensity;
                    mask.set(0, y, x, 1.0);
                }
            }
            img.set(0, y, x, v as f32);
        }
    }
    (img, mask)
}

fn finish<R: Rng + ?Sized>(clean: &Image, noise: f64, rng: &mut R) -> Image {
    let mut img = clean.clone();
    if noise > 0.0 {
        let n = Normal::new(0.0, noise).expect("noise validated");
        for v in &mut img.data {
            *v += n.sample(rng) as f32;
        }
    }
    img.quantized()
}

/// One generated split, in memory.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSplit {
    pub images: Vec<Image>,
    pub labels: Vec<Vec<u8>>,
    pub masks: Vec<Image>,
    pub specs: Vec<SampleSpec>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticOutput {
    pub config: SyntheticConfig,
    pub class_names: Vec<String>,
    pub train: SyntheticSplit,
    pub val: SyntheticSplit,
    pub test: SyntheticSplit,
}

fn generate_split(cfg: &SyntheticConfig, grammar: &[LesionClass], name: &str, n: usize) -> SyntheticSplit {
    let mut rng = keyed_rng(cfg.seed, &format!("synth/{name}"));
    let mut out = SyntheticSplit {
        images: Vec::with_capacity(n),
        labels: Vec::with_capacity(n),
        masks: Vec::with_capacity(n),
        specs: Vec::with_capacity(n),
    };
    for _ in 0..n {
        let spec = sample_spec(cfg, grammar, &mut rng);
        let (clean, mask) = synth_render(&spec, grammar, cfg.image_size);
        let img = finish(&clean, cfg.noise, &mut rng);
        let mut labels = vec![0u8; grammar.len()];
        for l in &spec.lesions {
            labels[l.class] = 1;
        }
        out.images.push(img);
        out.labels.push(labels);
        out.masks.push(mask);
        out.specs.push(spec);
    }
    out
}

/// Generates all three splits in memory.
pub fn synth_generate(cfg: &SyntheticConfig) -> Result<SyntheticOutput> {
    cfg.validate()?;
    let grammar = cfg.grammar();
    Ok(SyntheticOutput {
        config: cfg.clone(),
        class_names: grammar.iter().map(|c| c.name.clone()).collect(),
        train: generate_split(cfg, &grammar, "train", cfg.train),
        val: generate_split(cfg, &grammar, "val", cfg.val),
        test: generate_split(cfg, &grammar, "test", cfg.test),
    })
}

pub const SPLIT_NAMES: [&str; 3] = ["train", "val", "test"];

impl SyntheticOutput {
    pub fn split(&self, name: &str) -> Result<&SyntheticSplit> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(config_err!("unknown split `{other}`")),
        }
    }

    pub fn classification(&self, name: &str) -> Result<Dataset> {
        let s = self.split(name)?;
        Ok(Dataset {
            images: s.images.clone(),
            targets: Targets::Labels(s.labels.clone()),
            class_names: self.class_names.clone(),
            source: format!("synthetic-seed{}-{name}", self.config.seed),
        })
    }

    pub fn segmentation(&self, name: &str) -> Result<Dataset> {
        let s = self.split(name)?;
        Ok(Dataset {
            images: s.images.clone(),
            targets: Targets::Masks(s.masks.clone()),
            class_names: vec!["lesion".into()],
            source: format!("synthetic-seed{}-{name}", self.config.seed),
        })
    }

    /// Writes PNGs plus `{split}.tsv` (classification) and `{split}_seg.tsv`
    /// (segmentation) manifests under `dir`.
    pub fn write(&self, dir: &Path) -> Result<Vec<(ClassificationManifest, SegmentationManifest)>> {
        for sub in ["images", "masks"] {
            let d = dir.join(sub);
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        let mut out = Vec::new();
        for name in SPLIT_NAMES {
            let s = self.split(name)?;
            let mut cls = ClassificationManifest {
                class_names: self.class_names.clone(),
                entries: Vec::new(),
            };
            let mut seg = SegmentationManifest::default();
            for (i, (img, mask)) in s.images.iter().zip(&s.masks).enumerate() {
                let ip = format!("images/{name}_{i:05}.png");
                let mp = format!("masks/{name}_{i:05}.png");
                img.save_gray_png(dir.join(&ip))?;
                mask.save_gray_png(dir.join(&mp))?;
                cls.entries.push(ClassificationEntry {
                    image: ip.clone(),
                    labels: s.labels[i].clone(),
                });
                seg.entries.push(SegmentationEntry { image: ip, mask: mp });
            }
            cls.write(dir.join(format!("{name}.tsv")))?;
            seg.write(dir.join(format!("{name}_seg.tsv")))?;
            out.push((cls, seg));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SyntheticConfig {
        SyntheticConfig {
            train: 300,
            val: 10,
            test: 10,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn noise_free_images_are_pure_renderings() {
        let cfg = SyntheticConfig {
            noise: 0.0,
            ..small(3)
        };
        let out = synth_generate(&cfg).unwrap();
        let g = cfg.grammar();
        for i in 0..out.train.images.len() {
            let spec = &out.train.specs[i];
            let (clean, mask) = synth_render(spec, &g, 64);
            assert_eq!(out.train.images[i], clean.quantized());
            assert_eq!(out.train.masks[i], mask);
            // the mask is exactly where the lesions changed the background
            let bare = SampleSpec {
                background: spec.background.clone(),
                lesions: vec![],
            };
            let (bg, _) = synth_render(&bare, &g, 64);
            for (k, m) in mask.data.iter().enumerate() {
                assert_eq!(*m == 1.0, clean.data[k] != bg.data[k]);
            }
        }
    }

    #[test]
    fn mask_nonempty_iff_some_label_active() {
        let out = synth_generate(&small(1)).unwrap();
        for (labels, mask) in out.train.labels.iter().zip(&out.train.masks) {
            let any_label = labels.iter().any(|&l| l == 1);
            let any_mask = mask.data.iter().any(|&m| m > 0.0);
            assert_eq!(any_label, any_mask);
        }
    }

    #[test]
    fn deterministic_per_seed() {
        assert_eq!(synth_generate(&small(9)).unwrap(), synth_generate(&small(9)).unwrap());
    }

    #[test]
    fn seeds_give_different_images_with_matching_marginals() {
        let cfg = |seed| SyntheticConfig {
            train: 2000,
            val: 10,
            test: 10,
            seed,
            ..Default::default()
        };
        let a = synth_generate(&cfg(1)).unwrap();
        let b = synth_generate(&cfg(2)).unwrap();
        assert!(a.train.images.iter().zip(&b.train.images).all(|(x, y)| x != y));
        for c in 0..4 {
            let freq = |o: &SyntheticOutput| {
                o.train.labels.iter().filter(|l| l[c] == 1).count() as f64 / o.train.labels.len() as f64
            };
            let (fa, fb) = (freq(&a), freq(&b));
            // both near 0.3 + co-occurrence boost; the binomial sd is ~0.011 per estimate
            assert!((fa - fb).abs() < 0.06, "class {c}: {fa} vs {fb}");
        }
    }

    #[test]
    fn contradictory_grammar_is_rejected() {
        let mut cfg = SyntheticConfig {
            num_classes: 2,
            ..Default::default()
        };
        cfg.classes = default_grammar(2);
        cfg.classes[1].primitive = Primitive::Disk;
        assert_eq!(cfg.validate().unwrap_err().kind(), "config");
        cfg.classes[1].size = (7.0, 8.0);
        cfg.validate().unwrap();
    }

    #[test]
    fn manifests_round_trip_through_files() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SyntheticConfig {
            train: 6,
            val: 2,
            test: 2,
            ..Default::default()
        };
        let out = synth_generate(&cfg).unwrap();
        out.write(dir.path()).unwrap();
        let m = ClassificationManifest::read(dir.path().join("train.tsv")).unwrap();
        let ds = m.load(dir.path(), "x").unwrap();
        assert_eq!(ds.images, out.train.images);
        let seg = SegmentationManifest::read(dir.path().join("test_seg.tsv")).unwrap();
        let ds = seg.load(dir.path(), "x").unwrap();
        assert_eq!(ds.masks().unwrap(), out.test.masks.as_slice());
    }
}
