//! Synthetic low/normal-light pairs.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::nn::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct PairedSample {
    pub low: Image,
    pub normal: Image,
}

impl PairedSample {
    pub fn new(low: Image, normal: Image) -> Result<Self> {
        low.same_size(&normal, "paired_sample")?;
        Ok(Self { low, normal })
    }
}

/// Darkens `clean` as `clamp(clean^gamma · scale + N(0, sigma²))` with a
/// fixed exposure scale.
pub fn synth_pair_with_scale<R: Rng + ?Sized>(
    clean: &Image,
    gamma: f64,
    scale: f64,
    noise_sigma: f64,
    rng: &mut R,
) -> Result<PairedSample> {
    if gamma < 1.0 || noise_sigma < 0.0 || !(scale > 0.0 && scale <= 1.0) {
        return Err(Error::invalid(
            "synth_pair",
            format!("need gamma >= 1, sigma >= 0, scale in (0, 1]; got {gamma}, {noise_sigma}, {scale}"),
        ));
    }
    let normal = Normal::new(0.0, noise_sigma).map_err(|e| Error::invalid("synth_pair", e.to_string()))?;
    let mut low = clean.tensor().clone();
    for v in low.data_mut() {
        let mut x = (*v as f64).powf(gamma) * scale;
        if noise_sigma > 0.0 {
            x += normal.sample(rng);
        }
        *v = x.clamp(0.0, 1.0) as f32;
    }
    PairedSample::new(Image::new(low)?, clean.clone())
}

/// As [`synth_pair_with_scale`] with the exposure scale drawn from
/// `[0.1, 0.5]`.
pub fn synth_pair<R: Rng + ?Sized>(clean: &Image, gamma: f64, noise_sigma: f64, rng: &mut R) -> Result<PairedSample> {
    let scale = rng.gen_range(0.1..=0.5);
    synth_pair_with_scale(clean, gamma, scale, noise_sigma, rng)
}

/// A procedural scene: a smooth colour gradient with overlaid rectangles,
/// discs and a mild texture, values roughly in `[0.05, 0.95]`.
pub fn synthetic_scene<R: Rng + ?Sized>(h: usize, w: usize, rng: &mut R) -> Image {
    let mut data = vec![0.0f32; 3 * h * w];
    let corners: Vec<[f32; 3]> = (0..4).map(|_| [rng.gen_range(0.2..0.9), rng.gen_range(0.2..0.9), rng.gen_range(0.2..0.9)]).collect();
    for y in 0..h {
        for x in 0..w {
            let (u, v) = (x as f32 / w.max(2) as f32, y as f32 / h.max(2) as f32);
            for c in 0..3 {
                let top = corners[0][c] * (1.0 - u) + corners[1][c] * u;
                let bottom = corners[2][c] * (1.0 - u) + corners[3][c] * u;
                data[(c * h + y) * w + x] = top * (1.0 - v) + bottom * v;
            }
        }
    }
    let shapes = rng.gen_range(3..8);
    for _ in 0..shapes {
        let colour = [rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95), rng.gen_range(0.05..0.95)];
        let cy = rng.gen_range(0.0..h as f32);
        let cx = rng.gen_range(0.0..w as f32);
        let ry = rng.gen_range(0.1..0.35) * h as f32;
        let rx = rng.gen_range(0.1..0.35) * w as f32;
        let disc = rng.gen_bool(0.5);
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = ((y as f32 + 0.5 - cy) / ry, (x as f32 + 0.5 - cx) / rx);
                let inside = if disc { dy * dy + dx * dx <= 1.0 } else { dy.abs() <= 1.0 && dx.abs() <= 1.0 };
                if inside {
                    for c in 0..3 {
                        data[(c * h + y) * w + x] = colour[c];
                    }
                }
            }
        }
    }
    let (fy, fx, amp) = (rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8), rng.gen_range(0.0..0.05));
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let i = (c * h + y) * w + x;
                let tex = amp * ((y as f32 * fy).sin() * (x as f32 * fx).cos());
                data[i] = (data[i] + tex).clamp(0.05, 0.95);
            }
        }
    }
    Image::new(Tensor::from_vec(&[3, h, w], data).expect("dims match")).expect("finite scene")
}

/// A random `size × size` crop, or the image itself when it is not larger.
pub fn random_crop<R: Rng + ?Sized>(img: &Image, size: usize, rng: &mut R) -> Image {
    let (h, w) = (img.height(), img.width());
    if size == 0 || (size >= h && size >= w) {
        return img.clone();
    }
    let (ch, cw) = (size.min(h), size.min(w));
    let y0 = rng.gen_range(0..=h - ch);
    let x0 = rng.gen_range(0..=w - cw);
    let src = img.tensor().data();
    let mut out = Vec::with_capacity(3 * ch * cw);
    for c in 0..3 {
        for y in 0..ch {
            let row = (c * h + y0 + y) * w + x0;
            out.extend_from_slice(&src[row..row + cw]);
        }
    }
    Image::new(Tensor::from_vec(&[3, ch, cw], out).expect("dims match")).expect("crop of valid image")
}
