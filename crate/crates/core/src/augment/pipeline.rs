use octdistill_autodiff::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::image::ImageBuffer;
use crate::error::{Error, Result};

pub const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Every knob of one augmentation pipeline.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AugmentationProfile {
    pub resize_large: usize,
    pub crop_size: usize,
    pub randaugment_n: usize,
    pub randaugment_m: u32,
    pub rotation_deg: f64,
    pub shear_deg: f64,
    pub scale_range: (f64, f64),
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub p_hflip: f64,
    pub p_vflip: f64,
    pub p_blur: f64,
    pub p_posterize: f64,
    pub p_erase: f64,
    pub erase_scale: (f64, f64),
    pub posterize_bits: u32,
    pub blur_kernel: usize,
    pub blur_sigma: f64,
    pub mean: [f64; 3],
    pub std: [f64; 3],
    pub tta_rotation_deg: f64,
}

impl Default for AugmentationProfile {
    fn default() -> Self {
        Self {
            resize_large: 40,
            crop_size: 32,
            randaugment_n: 2,
            randaugment_m: 9,
            rotation_deg: 20.0,
            shear_deg: 10.0,
            scale_range: (0.9, 1.1),
            brightness: 0.2,
            contrast: 0.2,
            saturation: 0.2,
            hue: 0.05,
            p_hflip: 0.5,
            p_vflip: 0.5,
            p_blur: 0.2,
            p_posterize: 0.2,
            p_erase: 0.25,
            erase_scale: (0.02, 0.1),
            posterize_bits: 4,
            blur_kernel: 3,
            blur_sigma: 0.8,
            mean: IMAGENET_MEAN,
            std: IMAGENET_STD,
            tta_rotation_deg: 10.0,
        }
    }
}

impl AugmentationProfile {
    /// Heavy teacher augmentation.
    pub fn teacher() -> Self {
        Self::default()
    }

    /// Light student augmentation: milder RandAugment and rotation, no blur
    /// or posterize.
    pub fn student() -> Self {
        Self {
            randaugment_m: 7,
            rotation_deg: 15.0,
            p_blur: 0.0,
            p_posterize: 0.0,
            ..Self::default()
        }
    }

    /// A training profile whose every random step is the identity, so the
    /// training pipeline collapses to resize and normalize.
    pub fn minimal() -> Self {
        Self {
            resize_large: 32,
            randaugment_n: 0,
            randaugment_m: 0,
            rotation_deg: 0.0,
            shear_deg: 0.0,
            scale_range: (1.0, 1.0),
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            hue: 0.0,
            p_hflip: 0.0,
            p_vflip: 0.0,
            p_blur: 0.0,
            p_posterize: 0.0,
            p_erase: 0.0,
            ..Self::default()
        }
    }

    /// `minimal()` with the sizes of `self`.
    pub fn collapsed(&self) -> Self {
        Self {
            resize_large: self.crop_size,
            crop_size: self.crop_size,
            mean: self.mean,
            std: self.std,
            tta_rotation_deg: self.tta_rotation_deg,
            ..Self::minimal()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Augment(m));
        if self.crop_size == 0 || self.crop_size > self.resize_large {
            return bad(format!(
                "crop_size {} must be in 1..=resize_large ({})",
                self.crop_size, self.resize_large
            ));
        }
        if self.randaugment_m > 10 {
            return bad(format!("randaugment_m {} exceeds 10", self.randaugment_m));
        }
        for (name, p) in [
            ("p_hflip", self.p_hflip),
            ("p_vflip", self.p_vflip),
            ("p_blur", self.p_blur),
            ("p_posterize", self.p_posterize),
            ("p_erase", self.p_erase),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} = {p} is not a probability"));
            }
        }
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && lo <= hi) {
            return bad(format!("scale_range ({lo}, {hi}) must satisfy 0 < lo <= hi"));
        }
        let (lo, hi) = self.erase_scale;
        if !(lo > 0.0 && lo <= hi && hi < 1.0) {
            return bad(format!("erase_scale ({lo}, {hi}) must satisfy 0 < lo <= hi < 1"));
        }
        if !(1..=8).contains(&self.posterize_bits) {
            return bad(format!("posterize_bits {} must be in 1..=8", self.posterize_bits));
        }
        if self.blur_kernel % 2 == 0 || !(self.blur_sigma > 0.0) {
            return bad("blur_kernel must be odd and blur_sigma positive".into());
        }
        for (name, v) in [
            ("rotation_deg", self.rotation_deg),
            ("shear_deg", self.shear_deg),
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
            ("hue", self.hue),
        ] {
            if !(v >= 0.0) {
                return bad(format!("{name} must be nonnegative, got {v}"));
            }
        }
        if self.hue > 0.5 || self.brightness >= 1.0 || self.contrast >= 1.0 || self.saturation >= 1.0 {
            return bad("jitter factors must be below 1 and hue at most 0.5".into());
        }
        if self.std.iter().any(|s| !(*s > 0.0)) {
            return bad("normalization std must be positive".into());
        }
        Ok(())
    }
}

fn symmetric<R: Rng>(rng: &mut R, bound: f64) -> f64 {
    if bound == 0.0 {
        0.0
    } else {
        rng.gen_range(-bound..=bound)
    }
}

fn coin<R: Rng>(rng: &mut R, p: f64) -> bool {
    rng.gen::<f64>() < p
}

/// The six operations RandAugment draws from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RandOp {
    Brightness,
    Contrast,
    Saturation,
    Sharpness,
    Rotation,
    Translation,
}

pub const RAND_OPS: [RandOp; 6] = [
    RandOp::Brightness,
    RandOp::Contrast,
    RandOp::Saturation,
    RandOp::Sharpness,
    RandOp::Rotation,
    RandOp::Translation,
];

/// Applies one op at magnitude `m` in 0..=10 with the given sign.
pub fn apply_rand_op(image: &ImageBuffer, op: RandOp, m: u32, positive: bool, horizontal: bool) -> ImageBuffer {
    let sign = if positive { 1.0 } else { -1.0 };
    let m = m as f64;
    let factor = 1.0 + sign * 0.05 * m;
    match op {
        RandOp::Brightness => image.adjust_brightness(factor),
        RandOp::Contrast => image.adjust_contrast(factor),
        RandOp::Saturation => image.adjust_saturation(factor),
        RandOp::Sharpness => image.adjust_sharpness(factor),
        RandOp::Rotation => image.rotate(sign * 3.0 * m),
        RandOp::Translation => {
            let shift = sign * (m / 10.0) * 0.1 * image.width() as f64;
            let t = if horizontal { (shift, 0.0) } else { (0.0, shift) };
            image.affine(0.0, 0.0, 1.0, t).expect("unit scale")
        }
    }
}

/// `n` ops drawn uniformly with replacement, each at magnitude `m`.
pub fn rand_augment<R: Rng>(image: &ImageBuffer, n: usize, m: u32, rng: &mut R) -> Result<ImageBuffer> {
    if m > 10 {
        return Err(Error::Augment(format!("RandAugment magnitude {m} exceeds 10")));
    }
    let mut out = image.clone();
    for _ in 0..n {
        let op = RAND_OPS[rng.gen_range(0..RAND_OPS.len())];
        let positive = rng.gen_bool(0.5);
        let horizontal = rng.gen_bool(0.5);
        out = apply_rand_op(&out, op, m, positive, horizontal);
    }
    Ok(out)
}

/// Zeroes one rectangle of a `[C, H, W]` buffer with probability `p`.
/// Returns the rectangle as (left, top, width, height) when one is erased.
pub fn random_erasing<R: Rng>(
    data: &mut [f32],
    channels: usize,
    height: usize,
    width: usize,
    p: f64,
    scale: (f64, f64),
    rng: &mut R,
) -> Option<(usize, usize, usize, usize)> {
    if !coin(rng, p) {
        return None;
    }
    let area = (width * height) as f64;
    let fits = |w: usize, h: usize| {
        let frac = (w * h) as f64 / area;
        w >= 1 && h >= 1 && w <= width && h <= height && frac >= scale.0 && frac <= scale.1
    };
    let mut chosen = None;
    for _ in 0..10 {
        let target = rng.gen_range(scale.0..=scale.1) * area;
        let log_ratio = rng.gen_range((1.0f64 / 3.0).ln()..=3.0f64.ln());
        let ratio = log_ratio.exp();
        let w = (target * ratio).sqrt().round() as usize;
        let h = (target / ratio).sqrt().round() as usize;
        if fits(w, h) {
            chosen = Some((w, h));
            break;
        }
    }
    if chosen.is_none() {
        // the most square rectangle whose area fraction is in range
        chosen = (1..=width)
            .filter_map(|w| {
                let h = ((scale.0 * area) / w as f64).ceil() as usize;
                fits(w, h).then_some((w, h))
            })
            .min_by_key(|(w, h)| w.abs_diff(*h));
    }
    let (w, h) = chosen?;
    let left = rng.gen_range(0..=width - w);
    let top = rng.gen_range(0..=height - h);
    for c in 0..channels {
        for y in top..top + h {
            let row = (c * height + y) * width;
            data[row + left..row + left + w].fill(0.0);
        }
    }
    Some((left, top, w, h))
}

/// Replicates grayscale to 3 channels and standardizes per channel.
fn normalize(unit: Vec<f32>, channels: usize, size: usize, profile: &AugmentationProfile) -> Tensor {
    let plane = size * size;
    let rgb = if channels == 1 {
        unit.repeat(3)
    } else {
        unit
    };
    let mut out = rgb;
    for c in 0..3 {
        let (m, s) = (profile.mean[c] as f32, profile.std[c] as f32);
        for v in &mut out[c * plane..(c + 1) * plane] {
            *v = (*v - m) / s;
        }
    }
    Tensor::new(vec![3, size, size], out).expect("3 x size x size")
}

/// Resize to the crop size and normalize; no randomness.
pub fn val_pipeline(image: &ImageBuffer, profile: &AugmentationProfile) -> Result<Tensor> {
    profile.validate()?;
    let s = profile.crop_size;
    let resized = image.resize(s, s);
    Ok(normalize(resized.to_chw_unit(), resized.channels(), s, profile))
}

/// Random training augmentation, a pure function of its arguments.
pub fn train_pipeline(image: &ImageBuffer, profile: &AugmentationProfile, seed: u64) -> Result<Tensor> {
    profile.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (big, s) = (profile.resize_large, profile.crop_size);
    let mut img = image.resize(big, big);
    let left = rng.gen_range(0..=big - s);
    let top = rng.gen_range(0..=big - s);
    img = img.crop(left, top, s, s)?;
    img = rand_augment(&img, profile.randaugment_n, profile.randaugment_m, &mut rng)?;
    img = img.rotate(symmetric(&mut rng, profile.rotation_deg));
    let shear = symmetric(&mut rng, profile.shear_deg);
    let (lo, hi) = profile.scale_range;
    let scale = if lo == hi { lo } else { rng.gen_range(lo..=hi) };
    img = img.affine(0.0, shear, scale, (0.0, 0.0))?;
    img = img.adjust_brightness(1.0 + symmetric(&mut rng, profile.brightness));
    img = img.adjust_contrast(1.0 + symmetric(&mut rng, profile.contrast));
    img = img.adjust_saturation(1.0 + symmetric(&mut rng, profile.saturation));
    img = img.adjust_hue(symmetric(&mut rng, profile.hue));
    if coin(&mut rng, profile.p_hflip) {
        img = img.hflip();
    }
    if coin(&mut rng, profile.p_vflip) {
        img = img.vflip();
    }
    if coin(&mut rng, profile.p_blur) {
        img = img.gaussian_blur(profile.blur_kernel, profile.blur_sigma)?;
    }
    if coin(&mut rng, profile.p_posterize) {
        img = img.posterize(profile.posterize_bits)?;
    }
    let mut unit = img.to_chw_unit();
    random_erasing(
        &mut unit,
        img.channels(),
        s,
        s,
        profile.p_erase,
        profile.erase_scale,
        &mut rng,
    );
    Ok(normalize(unit, img.channels(), s, profile))
}

/// Side length of the TTA rescale variant: `round(crop * 256 / 224)`.
pub fn tta_resize(crop: usize) -> usize {
    (crop as f64 * 256.0 / 224.0).round() as usize
}

/// Original, horizontal flip, vertical flip, rescale + center crop, small
/// rotation; each normalized.
pub fn tta_variants(image: &ImageBuffer, profile: &AugmentationProfile) -> Result<Vec<Tensor>> {
    profile.validate()?;
    let s = profile.crop_size;
    let base = image.resize(s, s);
    let big = tta_resize(s);
    let rescaled = image.resize(big, big).center_crop(s, s)?;
    let views = [
        base.clone(),
        base.hflip(),
        base.vflip(),
        rescaled,
        base.rotate(profile.tta_rotation_deg),
    ];
    Ok(views
        .iter()
        .map(|v| normalize(v.to_chw_unit(), v.channels(), s, profile))
        .collect())
}
