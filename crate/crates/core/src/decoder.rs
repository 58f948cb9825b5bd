//! A small convolutional latent decoder (8x8x4 latents to 32x32x3 images),
//! uniform channel pruning, and decoder distillation against a frozen
//! teacher pipeline.
//!
//! Activations are NHWC, stored as `(batch * h * w, channels)` matrices.

use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::{silu, silu_backward, Linear, ParamSet};
use crate::optim::{AdamW, AdamWConfig};
use crate::sampler::{sample, AnalyticDenoiser, Condition, GaussianMixture, GuidanceScale};
use crate::schedule::NoiseSchedule;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderSpec {
    pub latent_channels: usize,
    pub latent_size: usize,
    /// Hidden conv widths. The feature map doubles in size after every hidden
    /// layer except the first.
    pub hidden: Vec<usize>,
    pub out_channels: usize,
}

impl Default for DecoderSpec {
    fn default() -> Self {
        DecoderSpec { latent_channels: 4, latent_size: 8, hidden: vec![64, 64, 64], out_channels: 3 }
    }
}

impl DecoderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.latent_channels == 0 || self.latent_size == 0 || self.out_channels == 0 || self.hidden.is_empty() {
            return Err(Error::InvalidArgument("decoder dimensions must be >= 1 with at least one hidden layer".into()));
        }
        if let Some(i) = self.hidden.iter().position(|&c| c == 0) {
            return Err(Error::InvalidArgument(format!("hidden layer {i} has zero channels")));
        }
        Ok(())
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_size * self.latent_size * self.latent_channels
    }

    pub fn image_size(&self) -> usize {
        self.latent_size << (self.hidden.len() - 1)
    }

    pub fn image_dim(&self) -> usize {
        self.image_size() * self.image_size() * self.out_channels
    }

    /// Hidden widths scaled by `ratio`; latent and image channels are kept.
    pub fn pruned(&self, ratio: f64) -> Result<DecoderSpec> {
        if !(ratio > 0.0 && ratio < 1.0) {
            return Err(Error::InvalidArgument(format!("prune ratio must lie in (0, 1), got {ratio}")));
        }
        let hidden: Vec<usize> = self.hidden.iter().map(|&c| (ratio * c as f64).round() as usize).collect();
        let spec = DecoderSpec { hidden, ..self.clone() };
        spec.validate()?;
        Ok(spec)
    }
}

/// 3x3 convolution, stride 1, zero padding 1. `lin.w` is `(9 * c_in, c_out)`
/// with the tap index outermost.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3x3 {
    pub lin: Linear,
}

enum ConvCache {
    /// Patch matrix, used when the layer does not shrink the channel count.
    Cols(Array2<f64>),
    /// Layer input, used with per-tap products for narrowing layers.
    Input(Array2<f64>),
}

impl Conv3x3 {
    fn taps(&self) -> Array2<f64> {
        let (cin, cout) = (self.lin.w.nrows() / 9, self.lin.w.ncols());
        Array2::from_shape_fn((cin, 9 * cout), |(c, j)| self.lin.w[[(j / cout) * cin + c, j % cout]])
    }

    fn forward(&self, h: &Array2<f64>, batch: usize, size: usize) -> (Array2<f64>, ConvCache) {
        let cout = self.lin.w.ncols();
        if cout >= h.ncols() {
            let cols = im2col(h, batch, size);
            return (self.lin.forward(&cols), ConvCache::Cols(cols));
        }
        let p = h.dot(&self.taps());
        let p = p.as_slice().expect("standard layout");
        let mut out = Array2::zeros((h.nrows(), cout));
        out += &self.lin.b;
        let o = out.as_slice_mut().expect("standard layout");
        neighbours(batch, size, |row, k, from| {
            let src = &p[from * 9 * cout + k * cout..from * 9 * cout + (k + 1) * cout];
            for (a, v) in o[row * cout..(row + 1) * cout].iter_mut().zip(src) {
                *a += v;
            }
        });
        (out, ConvCache::Input(h.clone()))
    }

    fn backward(&self, cache: &ConvCache, dy: &Array2<f64>, batch: usize, size: usize, grad: &mut Conv3x3) -> Array2<f64> {
        match cache {
            ConvCache::Cols(cols) => {
                let dcols = self.lin.backward(cols, dy, &mut grad.lin);
                col2im(&dcols, batch, size, dcols.ncols() / 9)
            }
            ConvCache::Input(h) => {
                let (cin, cout) = (h.ncols(), dy.ncols());
                let dy = dy.as_standard_layout();
                let d = dy.as_slice().expect("standard layout");
                let mut dp = vec![0.0; h.nrows() * 9 * cout];
                neighbours(batch, size, |row, k, from| {
                    let dst = &mut dp[from * 9 * cout + k * cout..from * 9 * cout + (k + 1) * cout];
                    for (a, v) in dst.iter_mut().zip(&d[row * cout..(row + 1) * cout]) {
                        *a += v;
                    }
                });
                let dp = Array2::from_shape_vec((h.nrows(), 9 * cout), dp).expect("tap gradient shape");
                let dtaps = h.t().dot(&dp);
                for ((r, o), g) in grad.lin.w.indexed_iter_mut() {
                    *g += dtaps[[r % cin, (r / cin) * cout + o]];
                }
                grad.lin.b += &dy.sum_axis(ndarray::Axis(0)).insert_axis(ndarray::Axis(0));
                dp.dot(&self.taps().t())
            }
        }
    }
}

fn neighbours(batch: usize, size: usize, mut f: impl FnMut(usize, usize, usize)) {
    for b in 0..batch {
        for y in 0..size {
            for x in 0..size {
                let row = (b * size + y) * size + x;
                for (k, (dy, dx)) in OFFSETS.iter().enumerate() {
                    let (sy, sx) = (y as isize + dy, x as isize + dx);
                    if sy >= 0 && sx >= 0 && sy < size as isize && sx < size as isize {
                        f(row, k, (b * size + sy as usize) * size + sx as usize);
                    }
                }
            }
        }
    }
}

fn im2col(x: &Array2<f64>, batch: usize, size: usize) -> Array2<f64> {
    let c = x.ncols();
    let x = x.as_standard_layout();
    let src = x.as_slice().expect("standard layout");
    let mut out = vec![0.0; x.nrows() * 9 * c];
    neighbours(batch, size, |row, k, from| {
        out[(row * 9 + k) * c..(row * 9 + k + 1) * c].copy_from_slice(&src[from * c..(from + 1) * c]);
    });
    Array2::from_shape_vec((x.nrows(), 9 * c), out).expect("im2col shape")
}

fn col2im(cols: &Array2<f64>, batch: usize, size: usize, c: usize) -> Array2<f64> {
    let cols = cols.as_standard_layout();
    let src = cols.as_slice().expect("standard layout");
    let mut out = vec![0.0; cols.nrows() * c];
    neighbours(batch, size, |row, k, to| {
        let s = &src[(row * 9 + k) * c..(row * 9 + k + 1) * c];
        for (o, v) in out[to * c..(to + 1) * c].iter_mut().zip(s) {
            *o += v;
        }
    });
    Array2::from_shape_vec((cols.nrows(), c), out).expect("col2im shape")
}

const OFFSETS: [(isize, isize); 9] = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 0), (0, 1), (1, -1), (1, 0), (1, 1)];

fn upsample2(x: &Array2<f64>, batch: usize, size: usize) -> Array2<f64> {
    let (big, c) = (2 * size, x.ncols());
    let x = x.as_standard_layout();
    let src = x.as_slice().expect("standard layout");
    let mut out = vec![0.0; batch * big * big * c];
    for (dst, chunk) in out.chunks_exact_mut(c).enumerate() {
        let (b, y, xx) = (dst / (big * big), (dst / big) % big, dst % big);
        let from = (b * size + y / 2) * size + xx / 2;
        chunk.copy_from_slice(&src[from * c..(from + 1) * c]);
    }
    Array2::from_shape_vec((batch * big * big, c), out).expect("upsample shape")
}

fn upsample2_backward(d: &Array2<f64>, batch: usize, size: usize) -> Array2<f64> {
    let (big, c) = (2 * size, d.ncols());
    let d = d.as_standard_layout();
    let src = d.as_slice().expect("standard layout");
    let mut out = vec![0.0; batch * size * size * c];
    for (from, chunk) in src.chunks_exact(c).enumerate() {
        let (b, y, xx) = (from / (big * big), (from / big) % big, from % big);
        let dst = (b * size + y / 2) * size + xx / 2;
        for (o, v) in out[dst * c..(dst + 1) * c].iter_mut().zip(chunk) {
            *o += v;
        }
    }
    Array2::from_shape_vec((batch * size * size, c), out).expect("upsample shape")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    pub spec: DecoderSpec,
    pub convs: Vec<Conv3x3>,
}

struct LayerCache {
    conv: ConvCache,
    pre: Option<Array2<f64>>,
    size: usize,
    upsampled_from: Option<usize>,
}

impl Decoder {
    pub fn new(spec: DecoderSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut widths = vec![spec.latent_channels];
        widths.extend(&spec.hidden);
        widths.push(spec.out_channels);
        let convs = widths
            .windows(2)
            .map(|w| Conv3x3 { lin: Linear::init(&mut rng, 9 * w[0], w[1], 1.0) })
            .collect();
        Ok(Decoder { spec, convs })
    }

    fn run(&self, latents: &Array2<f64>, mut caches: Option<&mut Vec<LayerCache>>) -> Result<Array2<f64>> {
        let spec = &self.spec;
        if latents.ncols() != spec.latent_dim() {
            return Err(Error::Shape(format!("latents have {} columns, expected {}", latents.ncols(), spec.latent_dim())));
        }
        let batch = latents.nrows();
        let mut size = spec.latent_size;
        let mut h = latents
            .to_shape((batch * size * size, spec.latent_channels))
            .map_err(|e| Error::Shape(e.to_string()))?
            .to_owned();
        let last = self.convs.len() - 1;
        for (i, conv) in self.convs.iter().enumerate() {
            let mut upsampled_from = None;
            if i >= 2 {
                h = upsample2(&h, batch, size);
                upsampled_from = Some(size);
                size *= 2;
            }
            let (pre, cache) = conv.forward(&h, batch, size);
            let (out, pre) = if i == last { (pre, None) } else { (silu(&pre), Some(pre)) };
            if let Some(c) = caches.as_deref_mut() {
                c.push(LayerCache { conv: cache, pre, size, upsampled_from });
            }
            h = out;
        }
        let img = h.into_shape_with_order((batch, spec.image_dim())).map_err(|e| Error::Shape(e.to_string()))?;
        Ok(img)
    }

    /// `(batch, 256)` latents to `(batch, 32*32*3)` images, both flattened NHWC.
    pub fn decode(&self, latents: &Array2<f64>) -> Result<Array2<f64>> {
        self.run(latents, None)
    }

    /// Mean squared error to `target` and its parameter gradient.
    pub fn mse_grad(&self, latents: &Array2<f64>, target: &Array2<f64>) -> Result<(f64, Decoder)> {
        let mut caches = Vec::new();
        let img = self.run(latents, Some(&mut caches))?;
        if img.dim() != target.dim() {
            return Err(Error::Shape(format!("target {:?} vs image {:?}", target.dim(), img.dim())));
        }
        let diff = &img - target;
        let loss = diff.mapv(|e| e * e).mean().unwrap_or(0.0);
        let batch = latents.nrows();
        let mut d = (diff * (2.0 / img.len() as f64))
            .into_shape_with_order((img.len() / self.spec.out_channels, self.spec.out_channels))
            .map_err(|e| Error::Shape(e.to_string()))?;
        let mut grad = self.clone();
        grad.fill_zero();
        for (i, conv) in self.convs.iter().enumerate().rev() {
            let c = &caches[i];
            if let Some(pre) = &c.pre {
                d = silu_backward(pre, &d);
            }
            d = conv.backward(&c.conv, &d, batch, c.size, &mut grad.convs[i]);
            if let Some(small) = c.upsampled_from {
                d = upsample2_backward(&d, batch, small);
            }
        }
        Ok((loss, grad))
    }
}

impl ParamSet for Decoder {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Array2<f64>)) {
        for (i, c) in self.convs.iter().enumerate() {
            c.lin.visit(&crate::nets::join_name(prefix, &format!("conv{i}")), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Array2<f64>)) {
        for (i, c) in self.convs.iter_mut().enumerate() {
            c.lin.visit_mut(&crate::nets::join_name(prefix, &format!("conv{i}")), f);
        }
    }
}

/// Freshly initialized student with every hidden width scaled by `ratio`.
pub fn prune_decoder(teacher: &Decoder, ratio: f64, seed: u64) -> Result<Decoder> {
    Decoder::new(teacher.spec.pruned(ratio)?, seed)
}

/// Produces decoder inputs: class-conditional latents sampled by DDIM from an
/// exact denoiser over a per-class Gaussian latent distribution.
pub struct LatentPipeline {
    pub oracle: AnalyticDenoiser,
    pub num_classes: usize,
    pub steps: usize,
    pub guidance: f64,
}

impl LatentPipeline {
    /// `num_classes` Gaussian classes over `dim` latent entries with random
    /// unit-variance means and per-entry standard deviation `std`.
    pub fn synthetic(dim: usize, num_classes: usize, std: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let classes = (0..num_classes)
            .map(|_| {
                let mean: Vec<f64> = (0..dim).map(|_| normal.sample(&mut rng)).collect();
                GaussianMixture::new(vec![1.0], vec![mean], vec![vec![std * std; dim]])
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(LatentPipeline {
            oracle: AnalyticDenoiser::new(NoiseSchedule::Cosine, classes)?,
            num_classes,
            steps: 50,
            guidance: 1.0,
        })
    }

    pub fn draw(&self, labels: &[usize], seed: u64) -> Result<Array2<f64>> {
        let cond: Vec<Condition> = labels.iter().map(|&l| Condition::Label(l)).collect();
        sample(&self.oracle, &NoiseSchedule::Cosine, self.steps, &cond, GuidanceScale::new(self.guidance)?, seed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecoderDistillConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub holdout: usize,
}

impl Default for DecoderDistillConfig {
    fn default() -> Self {
        DecoderDistillConfig { steps: 1500, batch_size: 16, learning_rate: 2e-3, seed: 0, holdout: 64 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecoderReport {
    pub teacher_params: usize,
    pub student_params: usize,
    pub param_ratio: f64,
    pub mse_before: f64,
    pub mse_after: f64,
    pub first_loss: f64,
    pub steps: usize,
}

pub struct DecoderOutcome {
    pub student: Decoder,
    pub report: DecoderReport,
    pub losses: Vec<f64>,
}

/// Held-out latents, disjoint from training draws by seed stream.
pub fn holdout_latents(pipeline: &LatentPipeline, n: usize, seed: u64) -> Result<Array2<f64>> {
    let labels: Vec<usize> = (0..n).map(|i| i % pipeline.num_classes).collect();
    pipeline.draw(&labels, seed ^ 0x0D0E_C0DE_0000_0000)
}

pub fn decoder_mse(student: &Decoder, teacher: &Decoder, latents: &Array2<f64>) -> Result<f64> {
    let d = student.decode(latents)? - teacher.decode(latents)?;
    Ok(d.mapv(|e| e * e).mean().unwrap_or(0.0))
}

/// Trains `student` to reproduce `teacher` images on latents from `pipeline`.
/// Every batch uses freshly sampled noise; the teacher is only read.
pub fn distill_decoder(
    pipeline: &LatentPipeline,
    teacher: &Decoder,
    mut student: Decoder,
    config: &DecoderDistillConfig,
) -> Result<DecoderOutcome> {
    if config.batch_size == 0 || config.holdout == 0 {
        return Err(Error::InvalidArgument("batch_size and holdout must be >= 1".into()));
    }
    let held = holdout_latents(pipeline, config.holdout, config.seed)?;
    let mse_before = decoder_mse(&student, teacher, &held)?;
    let mut opt = AdamW::new(AdamWConfig { learning_rate: config.learning_rate, weight_decay: 0.0, ..Default::default() })?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let labels: Vec<usize> = (0..config.batch_size).map(|_| rng.gen_range(0..pipeline.num_classes)).collect();
        let latents = pipeline.draw(&labels, rng.gen())?;
        let target = teacher.decode(&latents)?;
        let (loss, grad) = student.mse_grad(&latents, &target)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite { context: format!("in decoder loss at step {step}") });
        }
        losses.push(loss);
        opt.step(&mut student, &grad);
    }
    let mse_after = decoder_mse(&student, teacher, &held)?;
    let report = DecoderReport {
        teacher_params: teacher.param_count(),
        student_params: student.param_count(),
        param_ratio: student.param_count() as f64 / teacher.param_count() as f64,
        mse_before,
        mse_after,
        first_loss: losses.first().copied().unwrap_or(f64::NAN),
        steps: config.steps,
    };
    Ok(DecoderOutcome { student, report, losses })
}

#[derive(Serialize)]
struct ReportRow<'a> {
    teacher_params: usize,
    student_params: usize,
    param_ratio: f64,
    mse_before: f64,
    mse_after: f64,
    first_loss: f64,
    steps: usize,
    ratio: f64,
    seed: u64,
    config_hash: &'a str,
}

pub fn write_decoder_report(path: &Path, report: &DecoderReport, ratio: f64, seed: u64, config_hash: &str) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let r = report;
    w.serialize(ReportRow {
        teacher_params: r.teacher_params,
        student_params: r.student_params,
        param_ratio: r.param_ratio,
        mse_before: r.mse_before,
        mse_after: r.mse_after,
        first_loss: r.first_loss,
        steps: r.steps,
        ratio,
        seed,
        config_hash,
    })?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> DecoderSpec {
        DecoderSpec { latent_channels: 2, latent_size: 2, hidden: vec![3, 4, 2], out_channels: 2 }
    }

    #[test]
    fn default_shapes_and_prune_ratio() {
        let t = Decoder::new(DecoderSpec::default(), 0).unwrap();
        assert_eq!(t.spec.image_size(), 32);
        let p = prune_decoder(&t, 0.5, 1).unwrap();
        assert_eq!(p.spec.hidden, vec![32, 32, 32]);
        let ratio = p.param_count() as f64 / t.param_count() as f64;
        // conv weights scale with c_in * c_out, so halving hidden widths keeps about a quarter
        let expect = (4 * 9 * 32 + 32 + 2 * (32 * 9 * 32 + 32) + 32 * 9 * 3 + 3) as f64
            / (4 * 9 * 64 + 64 + 2 * (64 * 9 * 64 + 64) + 64 * 9 * 3 + 3) as f64;
        assert_eq!(ratio, expect);
        assert!((ratio - 0.25).abs() < 0.05);
        assert!(prune_decoder(&t, 1.0, 0).is_err());
        assert!(prune_decoder(&t, 0.0, 0).is_err());
        assert!(tiny_spec().pruned(0.1).is_err());
        let img = t.decode(&Array2::from_elem((2, 256), 0.3)).unwrap();
        assert_eq!(img.dim(), (2, 32 * 32 * 3));
    }

    #[test]
    fn conv_matches_direct_sum() {
        let spec = DecoderSpec { latent_channels: 2, latent_size: 3, hidden: vec![2], out_channels: 1 };
        let d = Decoder::new(spec, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Array2::from_shape_fn((1, 18), |_| rng.gen_range(-1.0..1.0));
        let c0 = &d.convs[0].lin;
        // direct evaluation of the first conv at the centre pixel
        let at = |y: usize, xx: usize, ch: usize| x[[0, (y * 3 + xx) * 2 + ch]];
        for o in 0..2 {
            let mut acc = c0.b[[0, o]];
            for (k, (dy, dx)) in OFFSETS.iter().enumerate() {
                for ch in 0..2 {
                    acc += at((1 + dy) as usize, (1 + dx) as usize, ch) * c0.w[[k * 2 + ch, o]];
                }
            }
            let cols = im2col(&x.to_shape((9, 2)).unwrap().to_owned(), 1, 3);
            assert!((c0.forward(&cols)[[4, o]] - acc).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let d = Decoder::new(tiny_spec(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let lat = Array2::from_shape_fn((2, 8), |_| rng.gen_range(-1.0..1.0));
        let target = Array2::from_shape_fn((2, tiny_spec().image_dim()), |_| rng.gen_range(-1.0..1.0));
        let (_, g) = d.mse_grad(&lat, &target).unwrap();
        let flat = d.flatten();
        let gf = g.flatten();
        let loss = |v: &[f64]| {
            let mut m = d.clone();
            m.assign_flat(v);
            (m.decode(&lat).unwrap() - &target).mapv(|e| e * e).mean().unwrap()
        };
        for i in 0..flat.len() {
            let h = 1e-6;
            let mut a = flat.clone();
            a[i] += h;
            let mut b = flat.clone();
            b[i] -= h;
            let fd = (loss(&a) - loss(&b)) / (2.0 * h);
            assert!((fd - gf[i]).abs() <= 1e-4 * fd.abs().max(gf[i].abs()).max(1e-6), "{i}: {fd} vs {}", gf[i]);
        }
    }

    #[test]
    fn copy_of_teacher_has_zero_loss_and_teacher_is_untouched() {
        let pipe = LatentPipeline { steps: 4, ..LatentPipeline::synthetic(8, 3, 0.5, 1).unwrap() };
        let teacher = Decoder::new(tiny_spec(), 2).unwrap();
        let before = teacher.checksum();
        let cfg = DecoderDistillConfig { steps: 3, batch_size: 4, holdout: 4, ..Default::default() };
        let out = distill_decoder(&pipe, &teacher, teacher.clone(), &cfg).unwrap();
        assert_eq!(out.report.first_loss, 0.0);
        assert_eq!(out.report.mse_before, 0.0);
        assert_eq!(teacher.checksum(), before);
    }

    #[test]
    fn latents_are_fresh_per_draw() {
        let pipe = LatentPipeline { steps: 4, ..LatentPipeline::synthetic(8, 2, 0.5, 1).unwrap() };
        let a = pipe.draw(&[0, 0], 1).unwrap();
        let b = pipe.draw(&[0, 0], 2).unwrap();
        assert_ne!(a.row(0), a.row(1));
        assert_ne!(a.row(0), b.row(0));
        assert_eq!(a, pipe.draw(&[0, 0], 1).unwrap());
    }
}
