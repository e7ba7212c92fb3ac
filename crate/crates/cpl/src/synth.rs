//! Seeded procedural generation of clean images and the five parametric
//! degradation families (noise, rain, haze, blur, low-light) that define the
//! task set. Everything here is a pure function of (parameters, seed); the
//! same inputs always reproduce the same bytes.

use crate::error::{Error, Result};
use crate::seeds;
use crate::tensor::Tensor;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub const CHANNELS: usize = 3;
pub const NOISE_SIGMAS: [f64; 3] = [15.0, 25.0, 50.0];
pub const BLUR_SIZES: [usize; 3] = [3, 5, 7];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Noise,
    Rain,
    Haze,
    Blur,
    Lowlight,
}

impl Task {
    pub const ALL: [Task; 5] = [Task::Noise, Task::Rain, Task::Haze, Task::Blur, Task::Lowlight];

    pub fn name(self) -> &'static str {
        match self {
            Task::Noise => "noise",
            Task::Rain => "rain",
            Task::Haze => "haze",
            Task::Blur => "blur",
            Task::Lowlight => "lowlight",
        }
    }

    pub fn parse(s: &str) -> Result<Task> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown task {s:?}")))
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlurKind {
    Box,
    Motion,
}

/// Task-specific degradation parameters. Ranges are validated on use:
/// out-of-range parameters are rejected, not silently clamped.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DegradationParams {
    /// Additive Gaussian noise with σ in 8-bit units, one of {15, 25, 50}.
    Noise { sigma: f64 },
    /// Additive bright oriented streaks. Angle is in degrees with 90° exactly
    /// vertical; the permitted band [60°, 120°] spans ±30° around vertical.
    Rain { streaks: u32, angle_deg: f64, length_px: f64, intensity: f64 },
    /// Atmospheric blend I·t + A·(1−t) with constant transmission t ∈ (0, 1]
    /// and airlight A ∈ [0.7, 1.0]. t = 1 leaves the image unchanged.
    Haze { t: f64, airlight: f64 },
    /// Box or horizontal-motion kernel of odd size ∈ {3, 5, 7}, applied
    /// per channel with clamp-to-edge padding.
    Blur { size: usize, kind: BlurKind },
    /// clip((I^γ)·s) with γ ∈ [2, 3], s ∈ [0.1, 0.5]: strictly darkening.
    Lowlight { gamma: f64, scale: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "SpecWire", try_from = "SpecWire")]
pub struct DegradationSpec {
    pub params: DegradationParams,
    pub seed: u64,
}

/// Flat JSON form of a spec: a `task` discriminator, the parameter fields of
/// that task, and the seed. Typed (de)serialization keeps every float exact;
/// serde's tagged-enum path buffers numbers through a lossy any-typed stage.
#[derive(Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpecWire {
    task: Task,
    #[serde(skip_serializing_if = "Option::is_none")]
    sigma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    streaks: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    angle_deg: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    length_px: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    intensity: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    t: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    airlight: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    kind: Option<BlurKind>,
    #[serde(skip_serializing_if = "Option::is_none")]
    gamma: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    scale: Option<f64>,
    seed: u64,
}

impl From<DegradationSpec> for SpecWire {
    fn from(spec: DegradationSpec) -> Self {
        let mut w = SpecWire {
            task: spec.task(),
            sigma: None,
            streaks: None,
            angle_deg: None,
            length_px: None,
            intensity: None,
            t: None,
            airlight: None,
            size: None,
            kind: None,
            gamma: None,
            scale: None,
            seed: spec.seed,
        };
        match spec.params {
            DegradationParams::Noise { sigma } => w.sigma = Some(sigma),
            DegradationParams::Rain { streaks, angle_deg, length_px, intensity } => {
                w.streaks = Some(streaks);
                w.angle_deg = Some(angle_deg);
                w.length_px = Some(length_px);
                w.intensity = Some(intensity);
            }
            DegradationParams::Haze { t, airlight } => {
                w.t = Some(t);
                w.airlight = Some(airlight);
            }
            DegradationParams::Blur { size, kind } => {
                w.size = Some(size);
                w.kind = Some(kind);
            }
            DegradationParams::Lowlight { gamma, scale } => {
                w.gamma = Some(gamma);
                w.scale = Some(scale);
            }
        }
        w
    }
}

impl TryFrom<SpecWire> for DegradationSpec {
    type Error = String;

    fn try_from(w: SpecWire) -> std::result::Result<Self, String> {
        let need = |field: &str, v: Option<f64>| {
            v.ok_or_else(|| format!("{} spec is missing field {field}", w.task))
        };
        let params = match w.task {
            Task::Noise => DegradationParams::Noise { sigma: need("sigma", w.sigma)? },
            Task::Rain => DegradationParams::Rain {
                streaks: w.streaks.ok_or_else(|| "rain spec is missing field streaks".to_string())?,
                angle_deg: need("angle_deg", w.angle_deg)?,
                length_px: need("length_px", w.length_px)?,
                intensity: need("intensity", w.intensity)?,
            },
            Task::Haze => DegradationParams::Haze {
                t: need("t", w.t)?,
                airlight: need("airlight", w.airlight)?,
            },
            Task::Blur => DegradationParams::Blur {
                size: w.size.ok_or_else(|| "blur spec is missing field size".to_string())?,
                kind: w.kind.ok_or_else(|| "blur spec is missing field kind".to_string())?,
            },
            Task::Lowlight => DegradationParams::Lowlight {
                gamma: need("gamma", w.gamma)?,
                scale: need("scale", w.scale)?,
            },
        };
        let spec = DegradationSpec { params, seed: w.seed };
        // reject fields that belong to a different task
        let expect = SpecWire::from(spec);
        let count = |x: &SpecWire| {
            [
                x.sigma.is_some(),
                x.streaks.is_some(),
                x.angle_deg.is_some(),
                x.length_px.is_some(),
                x.intensity.is_some(),
                x.t.is_some(),
                x.airlight.is_some(),
                x.size.is_some(),
                x.kind.is_some(),
                x.gamma.is_some(),
                x.scale.is_some(),
            ]
            .into_iter()
            .filter(|b| *b)
            .count()
        };
        if count(&w) != count(&expect) {
            return Err(format!("{} spec carries fields of another task", w.task));
        }
        Ok(spec)
    }
}

impl DegradationSpec {
    pub fn task(&self) -> Task {
        match self.params {
            DegradationParams::Noise { .. } => Task::Noise,
            DegradationParams::Rain { .. } => Task::Rain,
            DegradationParams::Haze { .. } => Task::Haze,
            DegradationParams::Blur { .. } => Task::Blur,
            DegradationParams::Lowlight { .. } => Task::Lowlight,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        match self.params {
            DegradationParams::Noise { sigma } => {
                if !NOISE_SIGMAS.iter().any(|&s| (s - sigma).abs() < 1e-9) {
                    return bad(format!("noise sigma must be one of {NOISE_SIGMAS:?}, got {sigma}"));
                }
            }
            DegradationParams::Rain { streaks, angle_deg, length_px, intensity } => {
                if streaks == 0 {
                    return bad("rain needs at least one streak".into());
                }
                if !(60.0..=120.0).contains(&angle_deg) {
                    return bad(format!("rain angle {angle_deg}° outside [60°, 120°]"));
                }
                if !(length_px > 0.0 && length_px.is_finite()) {
                    return bad(format!("rain streak length must be positive, got {length_px}"));
                }
                if !(0.0 < intensity && intensity <= 1.0) {
                    return bad(format!("rain intensity {intensity} outside (0, 1]"));
                }
            }
            DegradationParams::Haze { t, airlight } => {
                if !(0.0 < t && t <= 1.0) {
                    return bad(format!("haze transmission {t} outside (0, 1]"));
                }
                if !(0.7..=1.0).contains(&airlight) {
                    return bad(format!("haze airlight {airlight} outside [0.7, 1.0]"));
                }
            }
            DegradationParams::Blur { size, kind: _ } => {
                if !BLUR_SIZES.contains(&size) {
                    return bad(format!("blur kernel size must be one of {BLUR_SIZES:?}, got {size}"));
                }
            }
            DegradationParams::Lowlight { gamma, scale } => {
                if !(2.0..=3.0).contains(&gamma) {
                    return bad(format!("lowlight gamma {gamma} outside [2, 3]"));
                }
                if !(0.1..=0.5).contains(&scale) {
                    return bad(format!("lowlight scale {scale} outside [0.1, 0.5]"));
                }
            }
        }
        Ok(())
    }
}

/// Draw a spec for `task` with parameters uniform over the default ranges.
pub fn sample_spec(task: Task, seed: u64) -> DegradationSpec {
    let mut rng = ChaCha12Rng::seed_from_u64(seeds::derive(seed, "params"));
    let params = match task {
        Task::Noise => {
            DegradationParams::Noise { sigma: NOISE_SIGMAS[rng.gen_range(0..NOISE_SIGMAS.len())] }
        }
        Task::Rain => DegradationParams::Rain {
            streaks: rng.gen_range(15..=45),
            angle_deg: rng.gen_range(60.0..=120.0),
            length_px: rng.gen_range(8.0..=20.0),
            intensity: rng.gen_range(0.3..=0.8),
        },
        Task::Haze => DegradationParams::Haze {
            t: rng.gen_range(0.3..=0.8),
            airlight: rng.gen_range(0.7..=1.0),
        },
        Task::Blur => DegradationParams::Blur {
            size: BLUR_SIZES[rng.gen_range(0..BLUR_SIZES.len())],
            kind: if rng.gen_bool(0.5) { BlurKind::Box } else { BlurKind::Motion },
        },
        Task::Lowlight => DegradationParams::Lowlight {
            gamma: rng.gen_range(2.0..=3.0),
            scale: rng.gen_range(0.1..=0.5),
        },
    };
    DegradationSpec { params, seed }
}

/// One training/eval example: a degraded view of a clean image, with the
/// task label and the exact spec that produced it.
#[derive(Debug, Clone)]
pub struct SampleTriple {
    pub degraded: Tensor,
    pub clean: Tensor,
    pub task: Task,
    pub spec: DegradationSpec,
}

/// Procedural clean image: smooth blurred-noise fields layered over a linear
/// gradient, with hard-edged shapes painted on top so every image carries
/// both low- and high-frequency content. Values in [0, 1], 3×size×size.
pub fn gen_clean(seed: u64, size: usize) -> Result<Tensor> {
    if size < 16 {
        return Err(Error::InvalidArgument(format!("image size must be ≥ 16, got {size}")));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seeds::derive(seed, "clean-image"));
    let hw = size * size;
    let mut data = vec![0.0; CHANNELS * hw];

    // Linear gradient with a random direction, per-channel offset.
    let theta: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let (gx, gy) = (theta.cos(), theta.sin());
    let offsets: [f64; CHANNELS] = [rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8)];
    for ch in 0..CHANNELS {
        for y in 0..size {
            for x in 0..size {
                let u = (x as f64 * gx + y as f64 * gy) / size as f64; // roughly [-1, 1]
                data[ch * hw + y * size + x] = offsets[ch] + 0.3 * u;
            }
        }
    }

    // Smooth field: white noise box-blurred a few times, added at ±0.15.
    let mut field: Vec<f64> = (0..hw).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let radius = (size / 8).max(1);
    for _ in 0..3 {
        field = box_blur_scalar(&field, size, size, radius);
    }
    let amp = field.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-9);
    for ch in 0..CHANNELS {
        for (d, f) in data[ch * hw..][..hw].iter_mut().zip(&field) {
            *d += 0.15 * f / amp;
        }
    }

    // Hard-edged shapes: filled rectangles and circles in flat colors.
    let shapes = rng.gen_range(3..=6);
    for _ in 0..shapes {
        let color: [f64; CHANNELS] =
            [rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95)];
        if rng.gen_bool(0.5) {
            let rw = rng.gen_range(size / 8..=size / 3);
            let rh = rng.gen_range(size / 8..=size / 3);
            let x0 = rng.gen_range(0..size - rw);
            let y0 = rng.gen_range(0..size - rh);
            for ch in 0..CHANNELS {
                for y in y0..y0 + rh {
                    for x in x0..x0 + rw {
                        data[ch * hw + y * size + x] = color[ch];
                    }
                }
            }
        } else {
            let r = rng.gen_range(size / 10..=size / 4) as f64;
            let cx = rng.gen_range(0.0..size as f64);
            let cy = rng.gen_range(0.0..size as f64);
            for ch in 0..CHANNELS {
                for y in 0..size {
                    for x in 0..size {
                        let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                        if dx * dx + dy * dy <= r * r {
                            data[ch * hw + y * size + x] = color[ch];
                        }
                    }
                }
            }
        }
    }

    for v in &mut data {
        *v = v.clamp(0.0, 1.0);
    }
    Tensor::new(vec![CHANNELS, size, size], data)
}

/// Additive Gaussian field ε ~ N(0, (σ/255)²), the pre-clip noise residual.
fn noise_field(len: usize, sigma: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha12Rng::seed_from_u64(seeds::derive(seed, "noise"));
    let dist = Normal::new(0.0, sigma / 255.0).expect("validated sigma");
    (0..len).map(|_| dist.sample(&mut rng)).collect()
}

/// Corrupt a clean image per the spec. Output is clipped to [0, 1].
pub fn apply_degradation(clean: &Tensor, spec: &DegradationSpec) -> Result<Tensor> {
    spec.validate()?;
    let [c, h, w] = *clean.shape() else {
        return Err(Error::shape("apply_degradation", format!("expects C×H×W, got {:?}", clean.shape())));
    };
    debug_assert!(clean.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    let hw = h * w;
    let mut out = clean.data().to_vec();

    match spec.params {
        DegradationParams::Noise { sigma } => {
            let eps = noise_field(out.len(), sigma, spec.seed);
            for (o, e) in out.iter_mut().zip(eps) {
                *o += e;
            }
        }
        DegradationParams::Rain { streaks, angle_deg, length_px, intensity } => {
            let mut rng = ChaCha12Rng::seed_from_u64(seeds::derive(spec.seed, "rain"));
            let theta = angle_deg.to_radians();
            let (dx, dy) = (theta.cos(), theta.sin());
            for _ in 0..streaks {
                let cx: f64 = rng.gen_range(0.0..w as f64);
                let cy: f64 = rng.gen_range(0.0..h as f64);
                let half = length_px / 2.0;
                let mut u = -half;
                while u <= half {
                    let (px, py) = (cx + u * dx, cy + u * dy);
                    let (xi, yi) = (px.round(), py.round());
                    if xi >= 0.0 && yi >= 0.0 && (xi as usize) < w && (yi as usize) < h {
                        let idx = yi as usize * w + xi as usize;
                        for ch in 0..c {
                            out[ch * hw + idx] += 0.5 * intensity;
                        }
                    }
                    u += 0.5;
                }
            }
        }
        DegradationParams::Haze { t, airlight } => {
            for o in out.iter_mut() {
                *o = *o * t + airlight * (1.0 - t);
            }
        }
        DegradationParams::Blur { size, kind } => {
            let kernel: Vec<f64> = match kind {
                BlurKind::Box => vec![1.0 / (size * size) as f64; size * size],
                BlurKind::Motion => {
                    // horizontal line through the kernel center
                    let mut k = vec![0.0; size * size];
                    for x in 0..size {
                        k[(size / 2) * size + x] = 1.0 / size as f64;
                    }
                    k
                }
            };
            for ch in 0..c {
                let blurred = conv_clamped(&out[ch * hw..][..hw], h, w, &kernel, size);
                out[ch * hw..][..hw].copy_from_slice(&blurred);
            }
        }
        DegradationParams::Lowlight { gamma, scale } => {
            for o in out.iter_mut() {
                *o = o.powf(gamma) * scale;
            }
        }
    }

    for v in &mut out {
        *v = v.clamp(0.0, 1.0);
    }
    Tensor::new(clean.shape().to_vec(), out)
}

/// Degrade-then-crop batches with paired augmentation. Task labels cycle
/// round-robin through `task_mix`; every sample draws independent seeds for
/// its clean image, its spec, and its augmentation from the batch seed.
pub fn make_batch(task_mix: &[Task], batch_size: usize, crop: usize, seed: u64) -> Result<Vec<SampleTriple>> {
    if task_mix.is_empty() {
        return Err(Error::InvalidArgument("task mix must not be empty".into()));
    }
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be ≥ 1".into()));
    }
    let gen_size = 2 * crop;
    (0..batch_size)
        .map(|i| {
            let task = task_mix[i % task_mix.len()];
            let clean_full = gen_clean(seeds::derive1(seed, "clean", i as u64), gen_size)?;
            let spec = sample_spec(task, seeds::derive1(seed, "spec", i as u64));
            let degraded_full = apply_degradation(&clean_full, &spec)?;

            let mut rng = ChaCha12Rng::seed_from_u64(seeds::derive1(seed, "aug", i as u64));
            let y0 = rng.gen_range(0..=gen_size - crop);
            let x0 = rng.gen_range(0..=gen_size - crop);
            let (fh, fv) = (rng.gen_bool(0.5), rng.gen_bool(0.5));
            let quarter_turns = rng.gen_range(0..4u8);

            let aug = |t: &Tensor| -> Result<Tensor> {
                let mut img = crop_image(t, y0, x0, crop)?;
                if fh {
                    img = flip_h(&img);
                }
                if fv {
                    img = flip_v(&img);
                }
                for _ in 0..quarter_turns {
                    img = rot90(&img);
                }
                Ok(img)
            };
            Ok(SampleTriple { degraded: aug(&degraded_full)?, clean: aug(&clean_full)?, task, spec })
        })
        .collect()
}

/// Box blur over a single H×W plane with clamp-to-edge sampling.
fn box_blur_scalar(src: &[f64], h: usize, w: usize, radius: usize) -> Vec<f64> {
    let r = radius as isize;
    let norm = 1.0 / ((2 * r + 1) * (2 * r + 1)) as f64;
    let mut out = vec![0.0; src.len()];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut acc = 0.0;
            for dy in -r..=r {
                let yy = (y + dy).clamp(0, h as isize - 1) as usize;
                for dx in -r..=r {
                    let xx = (x + dx).clamp(0, w as isize - 1) as usize;
                    acc += src[yy * w + xx];
                }
            }
            out[y as usize * w + x as usize] = acc * norm;
        }
    }
    out
}

/// Direct square-kernel convolution with clamp-to-edge padding.
fn conv_clamped(src: &[f64], h: usize, w: usize, kernel: &[f64], ksize: usize) -> Vec<f64> {
    let r = (ksize / 2) as isize;
    let mut out = vec![0.0; src.len()];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let mut acc = 0.0;
            for ky in 0..ksize as isize {
                let yy = (y + ky - r).clamp(0, h as isize - 1) as usize;
                for kx in 0..ksize as isize {
                    let xx = (x + kx - r).clamp(0, w as isize - 1) as usize;
                    acc += kernel[(ky * ksize as isize + kx) as usize] * src[yy * w + xx];
                }
            }
            out[y as usize * w + x as usize] = acc;
        }
    }
    out
}

fn crop_image(t: &Tensor, y0: usize, x0: usize, crop: usize) -> Result<Tensor> {
    let [c, h, w] = *t.shape() else {
        return Err(Error::shape("crop", format!("expects C×H×W, got {:?}", t.shape())));
    };
    if y0 + crop > h || x0 + crop > w {
        return Err(Error::InvalidArgument(format!(
            "crop {crop}×{crop} at ({y0},{x0}) exceeds {h}×{w}"
        )));
    }
    let mut data = Vec::with_capacity(c * crop * crop);
    for ch in 0..c {
        for y in 0..crop {
            let row = &t.data()[ch * h * w + (y0 + y) * w + x0..][..crop];
            data.extend_from_slice(row);
        }
    }
    Tensor::new(vec![c, crop, crop], data)
}

fn flip_h(t: &Tensor) -> Tensor {
    let [c, h, w] = *t.shape() else { unreachable!("flip on non-image") };
    let mut data = Vec::with_capacity(t.len());
    for ch in 0..c {
        for y in 0..h {
            let row = &t.data()[ch * h * w + y * w..][..w];
            data.extend(row.iter().rev());
        }
    }
    Tensor::new(t.shape().to_vec(), data).expect("same shape")
}

fn flip_v(t: &Tensor) -> Tensor {
    let [c, h, w] = *t.shape() else { unreachable!("flip on non-image") };
    let mut data = Vec::with_capacity(t.len());
    for ch in 0..c {
        for y in (0..h).rev() {
            data.extend_from_slice(&t.data()[ch * h * w + y * w..][..w]);
        }
    }
    Tensor::new(t.shape().to_vec(), data).expect("same shape")
}

/// Quarter turn clockwise; requires a square image.
fn rot90(t: &Tensor) -> Tensor {
    let [c, h, w] = *t.shape() else { unreachable!("rotate on non-image") };
    assert_eq!(h, w, "quarter turns need square crops");
    let mut data = vec![0.0; t.len()];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                data[ch * h * w + y * w + x] = t.data()[ch * h * w + (h - 1 - x) * w + y];
            }
        }
    }
    Tensor::new(t.shape().to_vec(), data).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_is_deterministic_and_bounded() {
        let a = gen_clean(7, 32).unwrap();
        let b = gen_clean(7, 32).unwrap();
        assert_eq!(a, b);
        assert!(a.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn clean_rejects_tiny_sizes() {
        assert!(gen_clean(0, 15).is_err());
        assert!(gen_clean(0, 16).is_ok());
    }

    #[test]
    fn different_seeds_differ_measurably() {
        let a = gen_clean(1, 32).unwrap();
        let b = gen_clean(2, 32).unwrap();
        assert!(a.mean_abs_diff(&b).unwrap() > 0.01);
    }

    #[test]
    fn haze_limits() {
        let clean = gen_clean(3, 32).unwrap();
        let identity = DegradationSpec {
            params: DegradationParams::Haze { t: 1.0, airlight: 0.8 },
            seed: 0,
        };
        assert_eq!(apply_degradation(&clean, &identity).unwrap(), clean);

        // t → 0 is outside (0,1], so probe just above: output ≈ A everywhere
        let full = DegradationSpec {
            params: DegradationParams::Haze { t: 1e-12, airlight: 0.8 },
            seed: 0,
        };
        let hazed = apply_degradation(&clean, &full).unwrap();
        assert!(hazed.data().iter().all(|v| (v - 0.8).abs() < 1e-11));
    }

    #[test]
    fn noise_field_std_matches_sigma() {
        // empirical std of the pre-clip residual on a 64×64 image: σ/255 ± 10%
        let eps = noise_field(3 * 64 * 64, 25.0, 99);
        let n = eps.len() as f64;
        let mean = eps.iter().sum::<f64>() / n;
        let var = eps.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / n;
        let target = 25.0 / 255.0;
        assert!((var.sqrt() - target).abs() < 0.1 * target, "std {} vs {}", var.sqrt(), target);
    }

    #[test]
    fn degradations_are_deterministic_and_bounded() {
        let clean = gen_clean(11, 32).unwrap();
        for task in Task::ALL {
            let spec = sample_spec(task, 42);
            spec.validate().unwrap();
            let a = apply_degradation(&clean, &spec).unwrap();
            let b = apply_degradation(&clean, &spec).unwrap();
            assert_eq!(a, b, "{task}");
            assert!(a.data().iter().all(|&v| (0.0..=1.0).contains(&v)), "{task}");
        }
    }

    #[test]
    fn out_of_range_params_are_rejected() {
        let cases = [
            DegradationParams::Noise { sigma: 30.0 },
            DegradationParams::Rain { streaks: 0, angle_deg: 90.0, length_px: 10.0, intensity: 0.5 },
            DegradationParams::Rain { streaks: 5, angle_deg: 45.0, length_px: 10.0, intensity: 0.5 },
            DegradationParams::Haze { t: 0.0, airlight: 0.8 },
            DegradationParams::Haze { t: 0.5, airlight: 0.5 },
            DegradationParams::Blur { size: 4, kind: BlurKind::Box },
            DegradationParams::Lowlight { gamma: 1.5, scale: 0.3 },
        ];
        for params in cases {
            let spec = DegradationSpec { params, seed: 0 };
            assert!(spec.validate().is_err(), "{params:?}");
        }
    }

    #[test]
    fn round_robin_covers_task_mix() {
        let mix = [Task::Noise, Task::Rain, Task::Haze];
        let batch = make_batch(&mix, 3, 16, 5).unwrap();
        let tasks: Vec<Task> = batch.iter().map(|s| s.task).collect();
        assert_eq!(tasks, mix);
    }

    #[test]
    fn batch_is_deterministic() {
        let mix = [Task::Noise, Task::Blur];
        let a = make_batch(&mix, 4, 16, 123).unwrap();
        let b = make_batch(&mix, 4, 16, 123).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.degraded, y.degraded);
            assert_eq!(x.clean, y.clean);
            assert_eq!(x.spec, y.spec);
        }
    }

    #[test]
    fn augmentation_is_paired() {
        // identical transform on both images ⇒ the residual transforms with
        // them, so its per-batch mean magnitude is crop-invariant under aug
        let batch = make_batch(&[Task::Haze], 2, 16, 77).unwrap();
        for s in &batch {
            assert_eq!(s.degraded.shape(), s.clean.shape());
            // haze with t<1, A fixed: residual = (1−t)(A−I), strictly tied to
            // the clean pixel under any point permutation
            let DegradationParams::Haze { t, airlight } = s.spec.params else { panic!() };
            for (d, c) in s.degraded.data().iter().zip(s.clean.data()) {
                let expect = (c * t + airlight * (1.0 - t)).clamp(0.0, 1.0);
                assert!((d - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn empty_mix_is_an_error() {
        assert!(make_batch(&[], 2, 16, 0).is_err());
    }

    #[test]
    fn rotations_and_flips_are_bijections() {
        let img = gen_clean(9, 16).unwrap();
        let r4 = rot90(&rot90(&rot90(&rot90(&img))));
        assert_eq!(r4, img);
        assert_eq!(flip_h(&flip_h(&img)), img);
        assert_eq!(flip_v(&flip_v(&img)), img);
    }

    #[test]
    fn spec_json_round_trip_is_bit_exact() {
        for task in Task::ALL {
            let spec = sample_spec(task, 31);
            let json = serde_json::to_string(&spec).unwrap();
            assert!(json.contains(&format!("\"task\":\"{task}\"")), "{json}");
            let back: DegradationSpec = serde_json::from_str(&json).unwrap();
            assert_eq!(back, spec, "{json}");
        }
    }

    #[test]
    fn spec_json_rejects_mixed_or_missing_fields() {
        let missing = r#"{"task":"haze","t":0.5,"seed":1}"#;
        assert!(serde_json::from_str::<DegradationSpec>(missing).is_err());
        let mixed = r#"{"task":"haze","t":0.5,"airlight":0.8,"sigma":25.0,"seed":1}"#;
        assert!(serde_json::from_str::<DegradationSpec>(mixed).is_err());
        let unknown = r#"{"task":"haze","t":0.5,"airlight":0.8,"frob":1,"seed":1}"#;
        assert!(serde_json::from_str::<DegradationSpec>(unknown).is_err());
    }
}
