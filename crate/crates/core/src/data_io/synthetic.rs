//! Procedural image corpora.
//!
//! Two laws over `H × W` grayscale images replicated to three channels:
//! random-phase sinusoid mixtures whose distribution is invariant to
//! horizontal cyclic shifts, and blobs pinned near the horizontal center.
//! Every image is a pure function of `(spec, index)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::numerics::Tensor;
use crate::tokenizer::linear::IMAGE_CHANNELS;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticKind {
    ShiftInvariantTexture,
    CenterBiasedBlobs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub image_h: usize,
    pub image_w: usize,
    pub n_classes: usize,
    /// Number of images; indices wrap around the class list.
    pub size: usize,
    /// Sinusoid components per class.
    pub n_components: usize,
    /// Horizontal frequencies are drawn from `1..=max_h_freq` (cycles per width).
    pub max_h_freq: usize,
    /// Vertical frequencies are drawn from `0..=max_v_freq`.
    pub max_v_freq: usize,
    /// Per-component amplitude range; total amplitude is capped at 0.6.
    pub amplitude: (f64, f64),
    /// Class offsets are spread evenly over `±offset_range`.
    pub offset_range: f64,
    /// Blob standard deviation range as a fraction of the image width.
    pub blob_width: (f64, f64),
    /// Blob centers jitter uniformly within `±center_jitter · W` of `W/2`.
    pub center_jitter: f64,
    /// I.i.d. pixel noise.
    pub noise_std: f64,
    /// Fixes the class laws and, with `split`, every image.
    pub seed: u64,
    /// Selects an independent draw of images under the same class laws,
    /// e.g. 0 for training and 1 for a held-out probe set.
    pub split: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            kind: SyntheticKind::ShiftInvariantTexture,
            image_h: 64,
            image_w: 64,
            n_classes: 10,
            size: 2048,
            n_components: 3,
            max_h_freq: 4,
            max_v_freq: 3,
            amplitude: (0.1, 0.2),
            offset_range: 0.3,
            blob_width: (0.06, 0.12),
            center_jitter: 0.05,
            noise_std: 0.03,
            seed: 0,
            split: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let ok = self.image_h > 0
            && self.image_w > 0
            && self.n_classes > 0
            && self.max_h_freq > 0
            && self.amplitude.0 >= 0.0
            && self.amplitude.0 <= self.amplitude.1
            && self.blob_width.0 > 0.0
            && self.blob_width.0 <= self.blob_width.1
            && self.center_jitter >= 0.0
            && self.noise_std >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(contract(format!("invalid synthetic spec {self:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Component {
    amp: f64,
    fx: f64,
    fy: f64,
}

#[derive(Clone, Debug)]
struct ClassLaw {
    offset: f64,
    components: Vec<Component>,
    /// Blob: amplitude, horizontal and vertical widths (fractions of W, H).
    blob: (f64, f64, f64),
}

/// A deterministic corpus backed by a [`SyntheticSpec`].
#[derive(Clone, Debug)]
pub struct Corpus {
    spec: SyntheticSpec,
    classes: Vec<ClassLaw>,
}

impl Corpus {
    pub fn new(spec: SyntheticSpec) -> Result<Self> {
        spec.validate()?;
        let classes = (0..spec.n_classes).map(|c| class_law(&spec, c)).collect();
        Ok(Self { spec, classes })
    }

    pub fn spec(&self) -> &SyntheticSpec {
        &self.spec
    }

    pub fn len(&self) -> usize {
        self.spec.size
    }

    pub fn is_empty(&self) -> bool {
        self.spec.size == 0
    }

    pub fn label(&self, index: usize) -> usize {
        index % self.spec.n_classes
    }

    /// Image `[H, W, 3]` in roughly `[−1, 1]` and its class.
    pub fn get(&self, index: usize) -> Result<(Tensor<f32>, usize)> {
        if index >= self.spec.size {
            return Err(contract(format!("index {index} outside corpus of {}", self.spec.size)));
        }
        let class = self.label(index);
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed);
        rng.set_stream(((self.spec.split + 1) << 40) + index as u64);
        let gray = match self.spec.kind {
            SyntheticKind::ShiftInvariantTexture => self.texture(&self.classes[class], &mut rng),
            SyntheticKind::CenterBiasedBlobs => self.blob(&self.classes[class], &mut rng),
        };
        Ok((replicate(self.spec.image_h, self.spec.image_w, &gray), class))
    }

    /// Stack of images `[B, H, W, 3]` with labels.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
        let (h, w) = (self.spec.image_h, self.spec.image_w);
        let mut data = Vec::with_capacity(indices.len() * h * w * IMAGE_CHANNELS);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let (img, c) = self.get(i)?;
            data.extend_from_slice(img.data());
            labels.push(c);
        }
        Ok((Tensor::new([indices.len(), h, w, IMAGE_CHANNELS], data)?, labels))
    }

    fn texture(&self, law: &ClassLaw, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let s = &self.spec;
        let phases: Vec<f64> = law.components.iter().map(|_| rng.random::<f64>() * std::f64::consts::TAU).collect();
        let mut out = Vec::with_capacity(s.image_h * s.image_w);
        for y in 0..s.image_h {
            for x in 0..s.image_w {
                let mut v = law.offset;
                for (c, ph) in law.components.iter().zip(&phases) {
                    let arg = std::f64::consts::TAU * (c.fx * x as f64 / s.image_w as f64 + c.fy * y as f64 / s.image_h as f64) + ph;
                    v += c.amp * arg.sin();
                }
                out.push(v + noise(rng, s.noise_std));
            }
        }
        out
    }

    fn blob(&self, law: &ClassLaw, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let s = &self.spec;
        let (h, w) = (s.image_h as f64, s.image_w as f64);
        let cx = w / 2.0 + (rng.random::<f64>() * 2.0 - 1.0) * s.center_jitter * w;
        let cy = h * (0.35 + 0.3 * rng.random::<f64>());
        let stripe_phase = rng.random::<f64>() * std::f64::consts::TAU;
        let (amp, sx, sy) = (law.blob.0, law.blob.1 * w, law.blob.2 * h);
        let fy = law.components.first().map_or(1.0, |c| c.fy.max(1.0));
        let mut out = Vec::with_capacity(s.image_h * s.image_w);
        for y in 0..s.image_h {
            for x in 0..s.image_w {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                let g = (-0.5 * (dx * dx / (sx * sx) + dy * dy / (sy * sy))).exp();
                let stripes = 0.7 + 0.3 * (std::f64::consts::TAU * fy * y as f64 / h + stripe_phase).cos();
                out.push(law.offset + amp * g * stripes + noise(rng, s.noise_std));
            }
        }
        out
    }
}

fn noise(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    if std == 0.0 {
        return 0.0;
    }
    let e: f64 = StandardNormal.sample(rng);
    std * e
}

fn class_law(spec: &SyntheticSpec, class: usize) -> ClassLaw {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed_c1a5);
    rng.set_stream(class as u64 + 1);
    let offset = if spec.n_classes == 1 {
        0.0
    } else {
        spec.offset_range * (2.0 * class as f64 / (spec.n_classes - 1) as f64 - 1.0)
    };
    let mut components: Vec<Component> = (0..spec.n_components)
        .map(|_| Component {
            amp: spec.amplitude.0 + rng.random::<f64>() * (spec.amplitude.1 - spec.amplitude.0),
            fx: rng.random_range(1..=spec.max_h_freq) as f64,
            fy: rng.random_range(0..=spec.max_v_freq) as f64,
        })
        .collect();
    let total: f64 = components.iter().map(|c| c.amp).sum();
    if total > 0.6 {
        components.iter_mut().for_each(|c| c.amp *= 0.6 / total);
    }
    let bw = |r: &mut ChaCha8Rng| spec.blob_width.0 + r.random::<f64>() * (spec.blob_width.1 - spec.blob_width.0);
    let amp = 0.5 + 0.3 * rng.random::<f64>();
    let blob = (if class % 2 == 0 { amp } else { -amp }, bw(&mut rng), 2.0 * bw(&mut rng));
    ClassLaw { offset, components, blob }
}

fn replicate(h: usize, w: usize, gray: &[f64]) -> Tensor<f32> {
    let data = gray.iter().flat_map(|&v| [v as f32; IMAGE_CHANNELS]).collect();
    Tensor::new([h, w, IMAGE_CHANNELS], data).expect("sized by construction")
}

/// Horizontal flip of an `[H, W, 3]` or `[B, H, W, 3]` image.
pub fn flip_horizontal(img: &Tensor<f32>) -> Tensor<f32> {
    map_columns(img, |x, w| w - 1 - x)
}

/// Cyclic horizontal shift: output column `x` reads input column `x − s mod W`.
pub fn roll_horizontal(img: &Tensor<f32>, shift: usize) -> Tensor<f32> {
    map_columns(img, |x, w| (x + w - shift % w) % w)
}

fn map_columns(img: &Tensor<f32>, src: impl Fn(usize, usize) -> usize) -> Tensor<f32> {
    let r = img.rank();
    let (w, c) = (img.dim(r - 2), img.dim(r - 1));
    let row = w * c;
    let mut out = vec![0.0; img.data().len()];
    for (o, i) in out.chunks_mut(row).zip(img.data().chunks(row)) {
        for x in 0..w {
            let s = src(x, w);
            o[x * c..(x + 1) * c].copy_from_slice(&i[s * c..(s + 1) * c]);
        }
    }
    Tensor::new(img.shape().to_vec(), out).expect("same shape")
}

/// Training augmentation: flip with probability ½, then a uniform cyclic
/// shift when the corpus law allows it.
pub fn augment(img: &Tensor<f32>, kind: SyntheticKind, rng: &mut impl Rng) -> Tensor<f32> {
    let mut out = if rng.random::<bool>() { flip_horizontal(img) } else { img.clone() };
    if kind == SyntheticKind::ShiftInvariantTexture {
        let w = img.dim(img.rank() - 2);
        out = roll_horizontal(&out, rng.random_range(0..w));
    }
    out
}
