//! Stochastic view generation for small RGB images.
//!
//! A view is produced by the fixed family order resized crop, horizontal
//! flip, color jitter, grayscale, gaussian blur. Each family fires on its own
//! probability draw; the four jitter sub-operations run in a random order.
//! Every stage draws its random numbers unconditionally so the stream layout
//! does not depend on which stages fire.

use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];
const CROP_ATTEMPTS: usize = 10;

/// HWC image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Dimension("image extents must be positive".into()));
        }
        if pixels.len() != height * width * 3 {
            return Err(Error::Dimension(format!(
                "{height}x{width}x3 image needs {} values, got {}",
                height * width * 3,
                pixels.len()
            )));
        }
        if pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Input("pixel values must lie in [0, 1]".into()));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let pixels = (0..height * width).flat_map(|_| rgb).collect();
        Self {
            height,
            width,
            pixels,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let o = (y * self.width + x) * 3;
        [self.pixels[o], self.pixels[o + 1], self.pixels[o + 2]]
    }

    /// Splits a `[N, H, W, 3]` tensor into images.
    pub fn batch_from_tensor(t: &Tensor<f64>) -> Result<Vec<Image>> {
        let s = t.shape();
        if s.len() != 4 || s[3] != 3 {
            return Err(Error::Dimension(format!(
                "expected [N, H, W, 3] images, got {s:?}"
            )));
        }
        t.iter_rows()
            .map(|row| Image::new(s[1], s[2], row.to_vec()))
            .collect()
    }

    /// Stacks equally sized images into `[N, H, W, 3]`.
    pub fn batch_to_tensor(images: &[Image]) -> Result<Tensor<f64>> {
        let first = images
            .first()
            .ok_or_else(|| Error::Usage("empty image batch".into()))?;
        let (h, w) = (first.height, first.width);
        if images.iter().any(|i| i.height != h || i.width != w) {
            return Err(Error::Dimension("images in a batch differ in size".into()));
        }
        let data = images.iter().flat_map(|i| i.pixels.iter().copied()).collect();
        Tensor::new(vec![images.len(), h, w, 3], data)
    }

    fn clamp(&mut self) {
        for p in &mut self.pixels {
            *p = p.clamp(0.0, 1.0);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub crop_scale_range: [f64; 2],
    pub crop_ratio_range: [f64; 2],
    pub flip_prob: f64,
    pub jitter_strength: f64,
    pub jitter_prob: f64,
    pub grayscale_prob: f64,
    pub blur_prob: f64,
    pub blur_sigma_range: [f64; 2],
    /// `(height, width)` of every view.
    pub output_size: (usize, usize),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop_scale_range: [0.08, 1.0],
            crop_ratio_range: [3.0 / 4.0, 4.0 / 3.0],
            flip_prob: 0.5,
            jitter_strength: 0.5,
            jitter_prob: 0.8,
            grayscale_prob: 0.2,
            blur_prob: 0.5,
            blur_sigma_range: [0.1, 2.0],
            output_size: (32, 32),
        }
    }
}

impl AugmentConfig {
    /// A pipeline that returns its input unchanged (for same-size output).
    pub fn identity(output_size: (usize, usize)) -> Self {
        let ratio = output_size.1 as f64 / output_size.0 as f64;
        Self {
            crop_scale_range: [1.0, 1.0],
            crop_ratio_range: [ratio, ratio],
            flip_prob: 0.0,
            jitter_strength: 0.0,
            jitter_prob: 0.0,
            grayscale_prob: 0.0,
            blur_prob: 0.0,
            blur_sigma_range: [0.1, 2.0],
            output_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.crop_scale_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!(
                "crop scale range must satisfy 0 < low <= high <= 1, got [{lo}, {hi}]"
            )));
        }
        let [rlo, rhi] = self.crop_ratio_range;
        if !(rlo > 0.0 && rlo <= rhi) {
            return Err(Error::Config(format!(
                "crop ratio range must satisfy 0 < low <= high, got [{rlo}, {rhi}]"
            )));
        }
        for (name, p) in [
            ("flip_prob", self.flip_prob),
            ("jitter_prob", self.jitter_prob),
            ("grayscale_prob", self.grayscale_prob),
            ("blur_prob", self.blur_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must be in [0, 1], got {p}")));
            }
        }
        if !(self.jitter_strength >= 0.0) {
            return Err(Error::Config("jitter strength must be >= 0".into()));
        }
        let [slo, shi] = self.blur_sigma_range;
        if !(slo > 0.0 && slo <= shi) {
            return Err(Error::Config("blur sigma range must satisfy 0 < low <= high".into()));
        }
        if self.output_size.0 == 0 || self.output_size.1 == 0 {
            return Err(Error::Config("output size must be positive".into()));
        }
        Ok(())
    }
}

/// Crop rectangle in source pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropWindow {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

/// Draws a resized-crop window: area fraction and log-uniform aspect ratio,
/// retried up to ten times, otherwise the full image.
pub fn sample_crop_window(height: usize, width: usize, cfg: &AugmentConfig, rng: &mut Rng) -> CropWindow {
    let area = (height * width) as f64;
    let [rlo, rhi] = cfg.crop_ratio_range;
    let mut chosen = None;
    for _ in 0..CROP_ATTEMPTS {
        let target = area * rng.uniform(cfg.crop_scale_range[0], cfg.crop_scale_range[1]);
        let ratio = if rlo == rhi {
            rlo
        } else {
            rng.uniform(rlo.ln(), rhi.ln()).exp()
        };
        let w = (target * ratio).sqrt().round() as usize;
        let h = (target / ratio).sqrt().round() as usize;
        if chosen.is_none() && w > 0 && h > 0 && w <= width && h <= height {
            chosen = Some((h, w));
        }
    }
    // Offsets are drawn even on fallback to keep the stream layout fixed.
    let (uy, ux) = (rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0));
    match chosen {
        Some((h, w)) => CropWindow {
            top: ((uy * (height - h + 1) as f64) as usize).min(height - h),
            left: ((ux * (width - w + 1) as f64) as usize).min(width - w),
            height: h,
            width: w,
        },
        None => CropWindow {
            top: 0,
            left: 0,
            height,
            width,
        },
    }
}

/// Bilinear resize of a window with half-pixel centers and edge clamping.
pub fn resize_window(img: &Image, win: CropWindow, out_h: usize, out_w: usize) -> Image {
    let sy = win.height as f64 / out_h as f64;
    let sx = win.width as f64 / out_w as f64;
    let mut pixels = Vec::with_capacity(out_h * out_w * 3);
    let max_y = (win.height - 1) as f64;
    let max_x = (win.width - 1) as f64;
    for oy in 0..out_h {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, max_y);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(win.height - 1);
        let wy = fy - y0 as f64;
        for ox in 0..out_w {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, max_x);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(win.width - 1);
            let wx = fx - x0 as f64;
            let p00 = img.pixel(win.top + y0, win.left + x0);
            let p01 = img.pixel(win.top + y0, win.left + x1);
            let p10 = img.pixel(win.top + y1, win.left + x0);
            let p11 = img.pixel(win.top + y1, win.left + x1);
            for c in 0..3 {
                let top = if wx == 0.0 { p00[c] } else { p00[c] * (1.0 - wx) + p01[c] * wx };
                let bot = if wx == 0.0 { p10[c] } else { p10[c] * (1.0 - wx) + p11[c] * wx };
                let v = if wy == 0.0 { top } else { top * (1.0 - wy) + bot * wy };
                pixels.push(v.clamp(0.0, 1.0));
            }
        }
    }
    Image {
        height: out_h,
        width: out_w,
        pixels,
    }
}

pub fn hflip(img: &Image) -> Image {
    let mut pixels = Vec::with_capacity(img.pixels.len());
    for y in 0..img.height {
        for x in (0..img.width).rev() {
            pixels.extend_from_slice(&img.pixel(y, x));
        }
    }
    Image {
        height: img.height,
        width: img.width,
        pixels,
    }
}

fn luma(p: &[f64]) -> f64 {
    LUMA[0] * p[0] + LUMA[1] * p[1] + LUMA[2] * p[2]
}

pub fn grayscale(img: &Image) -> Image {
    let mut out = img.clone();
    for p in out.pixels.chunks_exact_mut(3) {
        let l = luma(p).clamp(0.0, 1.0);
        p.fill(l);
    }
    out
}

pub fn adjust_brightness(img: &mut Image, factor: f64) {
    for p in &mut img.pixels {
        *p *= factor;
    }
    img.clamp();
}

/// Blends every pixel toward the image's mean luma.
pub fn adjust_contrast(img: &mut Image, factor: f64) {
    let n = (img.height * img.width) as f64;
    let mean = img.pixels.chunks_exact(3).map(luma).sum::<f64>() / n;
    for p in &mut img.pixels {
        *p = mean + factor * (*p - mean);
    }
    img.clamp();
}

/// Blends every pixel toward its own luma.
pub fn adjust_saturation(img: &mut Image, factor: f64) {
    for p in img.pixels.chunks_exact_mut(3) {
        let l = luma(p);
        for c in p.iter_mut() {
            *c = l + factor * (*c - l);
        }
    }
    img.clamp();
}

/// Rotates hue by `shift` turns (`shift` in `[-0.5, 0.5]`).
pub fn adjust_hue(img: &mut Image, shift: f64) {
    for p in img.pixels.chunks_exact_mut(3) {
        let (h, s, v) = rgb_to_hsv(p[0], p[1], p[2]);
        let (r, g, b) = hsv_to_rgb((h + shift).rem_euclid(1.0), s, v);
        p[0] = r;
        p[1] = g;
        p[2] = b;
    }
    img.clamp();
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let v = max;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    (h, s, v)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h * 6.0;
    let sector = (h6.floor() as i64).rem_euclid(6);
    let f = h6 - h6.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// Odd gaussian kernel size: a tenth of the shorter side, rounded up.
pub fn blur_kernel_size(height: usize, width: usize) -> usize {
    let size = (0.1 * height.min(width) as f64).ceil() as usize;
    size.max(1) | 1
}

/// Separable gaussian blur with edge clamping.
pub fn gaussian_blur(img: &Image, sigma: f64, kernel_size: usize) -> Image {
    let radius = (kernel_size / 2) as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= sum);

    let (h, w) = (img.height as isize, img.width as isize);
    let mut tmp = vec![0.0; img.pixels.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (ki, k) in kernel.iter().enumerate() {
                    let sx = (x + ki as isize - radius).clamp(0, w - 1);
                    acc += k * img.pixels[((y * w + sx) * 3) as usize + c];
                }
                tmp[((y * w + x) * 3) as usize + c] = acc;
            }
        }
    }
    let mut out = vec![0.0; img.pixels.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (ki, k) in kernel.iter().enumerate() {
                    let sy = (y + ki as isize - radius).clamp(0, h - 1);
                    acc += k * tmp[((sy * w + x) * 3) as usize + c];
                }
                out[((y * w + x) * 3) as usize + c] = acc.clamp(0.0, 1.0);
            }
        }
    }
    Image {
        height: img.height,
        width: img.width,
        pixels: out,
    }
}

fn color_jitter(img: &mut Image, strength: f64, rng: &mut Rng) {
    let spread = 0.8 * strength;
    let brightness = rng.uniform(1.0 - spread, 1.0 + spread).max(0.0);
    let contrast = rng.uniform(1.0 - spread, 1.0 + spread).max(0.0);
    let saturation = rng.uniform(1.0 - spread, 1.0 + spread).max(0.0);
    let hue = rng.uniform(-0.2 * strength, 0.2 * strength).clamp(-0.5, 0.5);
    let mut order = [0usize, 1, 2, 3];
    rng.shuffle(&mut order);
    for op in order {
        match op {
            0 => adjust_brightness(img, brightness),
            1 => adjust_contrast(img, contrast),
            2 => adjust_saturation(img, saturation),
            _ => adjust_hue(img, hue),
        }
    }
}

/// Draws one augmented view of `img`.
pub fn sample_view(img: &Image, cfg: &AugmentConfig, rng: &mut Rng) -> Result<Image> {
    cfg.validate()?;
    if img.height < 4 || img.width < 4 {
        return Err(Error::Input(format!(
            "image must be at least 4x4, got {}x{}",
            img.height, img.width
        )));
    }
    let (out_h, out_w) = cfg.output_size;

    let win = sample_crop_window(img.height, img.width, cfg, rng);
    let mut view = resize_window(img, win, out_h, out_w);

    if rng.bernoulli(cfg.flip_prob) {
        view = hflip(&view);
    }

    let mut jitter_rng = Rng::derive(rng.seed(), &[rng.stream(), 0x4A17]);
    if rng.bernoulli(cfg.jitter_prob) {
        color_jitter(&mut view, cfg.jitter_strength, &mut jitter_rng);
    }

    if rng.bernoulli(cfg.grayscale_prob) {
        view = grayscale(&view);
    }

    let sigma = rng.uniform(cfg.blur_sigma_range[0], cfg.blur_sigma_range[1]);
    if rng.bernoulli(cfg.blur_prob) {
        view = gaussian_blur(&view, sigma, blur_kernel_size(out_h, out_w));
    }
    Ok(view)
}

/// Two independently augmented views of the same image.
pub fn make_view_pair(
    img: &Image,
    cfg: &AugmentConfig,
    rng_a: &mut Rng,
    rng_b: &mut Rng,
) -> Result<(Image, Image)> {
    Ok((sample_view(img, cfg, rng_a)?, sample_view(img, cfg, rng_b)?))
}
