//! Image decoding, short-side resize + center crop, and intensity
//! normalization into 3×H×W float tensors.

use std::path::Path;
use std::str::FromStr;

use image::imageops::{self, FilterType};
use image::{ImageBuffer, ImageReader, Luma, Rgb32FImage};
use serde::{Deserialize, Serialize};
use twox_hash::XxHash64;

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;
pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];
/// Lower bound on the MAD used as a divisor.
pub const MAD_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    #[serde(alias = "imagenet")]
    ImageNetConstants,
    #[serde(alias = "median-mad")]
    MedianMad,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PreprocessSpec {
    pub resize_short_side: u32,
    /// (height, width)
    pub center_crop: (u32, u32),
    pub normalization: Normalization,
}

impl PreprocessSpec {
    pub fn new(resize_short_side: u32, center_crop: (u32, u32), normalization: Normalization) -> Result<Self> {
        let spec = Self {
            resize_short_side,
            center_crop,
            normalization,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.resize_short_side == 0 {
            return Err(Error::Preprocess("resize_short_side must be positive".into()));
        }
        let (h, w) = self.center_crop;
        if h == 0 || w == 0 {
            return Err(Error::Preprocess("crop dimensions must be positive".into()));
        }
        // The long side depends on the image; only the short one is known here.
        if h.min(w) > self.resize_short_side {
            return Err(Error::Preprocess(format!(
                "crop {h}x{w} does not fit inside a short side of {}",
                self.resize_short_side
            )));
        }
        Ok(())
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (CHANNELS, self.center_crop.0 as usize, self.center_crop.1 as usize)
    }

    /// Stable 64-bit identity of this spec, including the normalization
    /// constants, used to key embedding caches.
    pub fn hash64(&self) -> u64 {
        let norm = match self.normalization {
            Normalization::ImageNetConstants => {
                format!("imagenet(mean={IMAGENET_MEAN:?},std={IMAGENET_STD:?})")
            }
            Normalization::MedianMad => format!("median-mad(eps={MAD_EPSILON:e})"),
        };
        let canonical = format!(
            "medembed-preprocess/v1;resize={};crop={}x{};channels={CHANNELS};interp=bilinear;norm={norm}",
            self.resize_short_side, self.center_crop.0, self.center_crop.1
        );
        XxHash64::oneshot(0, canonical.as_bytes())
    }
}

/// Dataset presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    CbisDdsm,
    Chexpert,
    Ham10000,
    PadUfes20,
    Odir,
}

impl Preset {
    pub fn spec(self) -> PreprocessSpec {
        let (side, norm) = match self {
            Preset::CbisDdsm => (1024, Normalization::MedianMad),
            Preset::Chexpert => (512, Normalization::ImageNetConstants),
            Preset::Ham10000 | Preset::PadUfes20 => (224, Normalization::ImageNetConstants),
            Preset::Odir => (224, Normalization::MedianMad),
        };
        PreprocessSpec {
            resize_short_side: side,
            center_crop: (side, side),
            normalization: norm,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::CbisDdsm => "cbis-ddsm",
            Preset::Chexpert => "chexpert",
            Preset::Ham10000 => "ham10000",
            Preset::PadUfes20 => "pad-ufes-20",
            Preset::Odir => "odir",
        }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cbis-ddsm" => Ok(Preset::CbisDdsm),
            "chexpert" => Ok(Preset::Chexpert),
            "ham10000" => Ok(Preset::Ham10000),
            "pad-ufes-20" => Ok(Preset::PadUfes20),
            "odir" => Ok(Preset::Odir),
            other => Err(Error::Config(format!(
                "unknown preset {other:?} (expected cbis-ddsm, chexpert, ham10000, pad-ufes-20 or odir)"
            ))),
        }
    }
}

/// Channel-major (C×H×W) float image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub data: Vec<f32>,
    pub height: usize,
    pub width: usize,
    pub sample_id: String,
    pub spec_hash: u64,
}

impl ImageTensor {
    pub fn zeros(sample_id: impl Into<String>, height: usize, width: usize, spec_hash: u64) -> Self {
        Self {
            data: vec![0.0; CHANNELS * height * width],
            height,
            width,
            sample_id: sample_id.into(),
            spec_hash,
        }
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Decode, resize the short side to `spec.resize_short_side` with bilinear
/// interpolation, then center-crop. Values are scaled to [0, 1]; grayscale
/// inputs are replicated to three channels. A missing image (`None`)
/// becomes an all-zero tensor of the spec's shape.
pub fn decode_resize_crop(
    sample_id: &str,
    image_ref: Option<&Path>,
    spec: &PreprocessSpec,
) -> Result<ImageTensor> {
    spec.validate()?;
    let (_, crop_h, crop_w) = spec.shape();
    let Some(path) = image_ref else {
        return Ok(ImageTensor::zeros(sample_id, crop_h, crop_w, spec.hash64()));
    };
    let decode_err = |message: String| Error::Decode {
        sample_id: sample_id.to_string(),
        message,
    };
    let img = ImageReader::open(path)
        .map_err(|e| decode_err(format!("{}: {e}", path.display())))?
        .with_guessed_format()
        .map_err(|e| decode_err(format!("{}: {e}", path.display())))?
        .decode()
        .map_err(|e| decode_err(format!("{}: {e}", path.display())))?;
    let rgb = img.to_rgb32f();
    let cropped = resize_and_crop(&rgb, spec).map_err(|m| decode_err(format!("{}: {m}", path.display())))?;
    Ok(to_chw(&cropped, sample_id, spec.hash64()))
}

fn resized_dims(width: u32, height: u32, short_side: u32) -> (u32, u32) {
    if width <= height {
        let h = (height as f64 * short_side as f64 / width as f64).round() as u32;
        (short_side, h.max(short_side))
    } else {
        let w = (width as f64 * short_side as f64 / height as f64).round() as u32;
        (w.max(short_side), short_side)
    }
}

fn resize_and_crop(img: &Rgb32FImage, spec: &PreprocessSpec) -> std::result::Result<Rgb32FImage, String> {
    let (w, h) = img.dimensions();
    let (nw, nh) = resized_dims(w, h, spec.resize_short_side);
    let (crop_h, crop_w) = spec.center_crop;
    if crop_h > nh || crop_w > nw {
        return Err(format!("crop {crop_h}x{crop_w} exceeds the resized image {nh}x{nw}"));
    }
    let resized = if (nw, nh) == (w, h) {
        img.clone()
    } else {
        imageops::resize(img, nw, nh, FilterType::Triangle)
    };
    let x = (nw - crop_w) / 2;
    let y = (nh - crop_h) / 2;
    Ok(imageops::crop_imm(&resized, x, y, crop_w, crop_h).to_image())
}

fn to_chw(img: &Rgb32FImage, sample_id: &str, spec_hash: u64) -> ImageTensor {
    let (w, h) = img.dimensions();
    let (w, h) = (w as usize, h as usize);
    let plane = w * h;
    let mut data = vec![0.0f32; CHANNELS * plane];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..CHANNELS {
            data[c * plane + i] = px.0[c].clamp(0.0, 1.0);
        }
    }
    ImageTensor {
        data,
        height: h,
        width: w,
        sample_id: sample_id.to_string(),
        spec_hash,
    }
}

/// Bilinearly resample every channel of `t` to `height`×`width`.
pub fn resize_tensor(t: &ImageTensor, height: usize, width: usize) -> ImageTensor {
    if (t.height, t.width) == (height, width) {
        return t.clone();
    }
    let plane_out = height * width;
    let mut data = Vec::with_capacity(CHANNELS * plane_out);
    for c in 0..CHANNELS {
        let src: ImageBuffer<Luma<f32>, Vec<f32>> =
            ImageBuffer::from_raw(t.width as u32, t.height as u32, t.plane(c).to_vec())
                .expect("plane length matches dimensions");
        let out = imageops::resize(&src, width as u32, height as u32, FilterType::Triangle);
        data.extend_from_slice(out.as_raw());
    }
    ImageTensor {
        data,
        height,
        width,
        sample_id: t.sample_id.clone(),
        spec_hash: t.spec_hash,
    }
}

pub fn normalize_imagenet(t: &ImageTensor) -> ImageTensor {
    let plane = t.height * t.width;
    let mut out = t.clone();
    for (c, chunk) in out.data.chunks_mut(plane).enumerate() {
        for v in chunk {
            *v = (*v - IMAGENET_MEAN[c]) / IMAGENET_STD[c];
        }
    }
    out
}

/// Inverse of [`normalize_imagenet`].
pub fn denormalize_imagenet(t: &ImageTensor) -> ImageTensor {
    let plane = t.height * t.width;
    let mut out = t.clone();
    for (c, chunk) in out.data.chunks_mut(plane).enumerate() {
        for v in chunk {
            *v = *v * IMAGENET_STD[c] + IMAGENET_MEAN[c];
        }
    }
    out
}

/// Median of `values` (mean of the two central order statistics for even
/// lengths). Reorders the slice.
pub fn median_in_place(values: &mut [f64]) -> f64 {
    let n = values.len();
    assert!(n > 0, "median of empty slice");
    let mid = n / 2;
    let (_, &mut upper, _) = values.select_nth_unstable_by(mid, f64::total_cmp);
    if n % 2 == 1 {
        upper
    } else {
        let lower = values[..mid]
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower + upper)
    }
}

/// Robust standardization over all pixels of all channels:
/// `(x - median) / max(MAD, ε)`.
pub fn normalize_median_mad(t: &ImageTensor) -> ImageTensor {
    let mut out = t.clone();
    if t.data.is_empty() {
        return out;
    }
    let mut scratch: Vec<f64> = t.data.iter().map(|&v| v as f64).collect();
    let m = median_in_place(&mut scratch);
    for (s, &v) in scratch.iter_mut().zip(&t.data) {
        *s = (v as f64 - m).abs();
    }
    let mad = median_in_place(&mut scratch).max(MAD_EPSILON);
    for v in &mut out.data {
        *v = ((*v as f64 - m) / mad) as f32;
    }
    out
}

pub fn normalize(t: &ImageTensor, normalization: Normalization) -> ImageTensor {
    match normalization {
        Normalization::ImageNetConstants => normalize_imagenet(t),
        Normalization::MedianMad => normalize_median_mad(t),
    }
}

/// Full per-sample transform: decode/resize/crop followed by normalization.
pub fn preprocess_sample(
    sample_id: &str,
    image_ref: Option<&Path>,
    spec: &PreprocessSpec,
) -> Result<ImageTensor> {
    let t = decode_resize_crop(sample_id, image_ref, spec)?;
    Ok(normalize(&t, spec.normalization))
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{GrayImage, RgbImage};

    fn tensor_from(values: &[f32], h: usize, w: usize) -> ImageTensor {
        assert_eq!(values.len(), CHANNELS * h * w);
        ImageTensor {
            data: values.to_vec(),
            height: h,
            width: w,
            sample_id: "t".into(),
            spec_hash: 0,
        }
    }

    #[test]
    fn grayscale_mammogram_resized_and_cropped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mammo.png");
        GrayImage::from_fn(2000, 1500, |x, y| Luma([((x + y) % 256) as u8]))
            .save(&path)
            .unwrap();
        let t = decode_resize_crop("m1", Some(&path), &Preset::CbisDdsm.spec()).unwrap();
        assert_eq!((t.height, t.width), (1024, 1024));
        assert_eq!(t.data.len(), 3 * 1024 * 1024);
        assert_eq!(t.plane(0), t.plane(1));
        assert_eq!(t.plane(1), t.plane(2));
        assert!(t.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn missing_image_is_zero_tensor() {
        let t = decode_resize_crop("r9", None, &Preset::Odir.spec()).unwrap();
        assert_eq!((t.height, t.width), (224, 224));
        assert!(t.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_geometry_only_rescales() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rgb.png");
        let img = RgbImage::from_fn(224, 224, |x, y| image::Rgb([x as u8, y as u8, 200]));
        img.save(&path).unwrap();
        let t = decode_resize_crop("s", Some(&path), &Preset::Ham10000.spec()).unwrap();
        for (x, y) in [(0usize, 0usize), (10, 20), (223, 100)] {
            let i = y * 224 + x;
            assert_eq!(t.plane(0)[i], x as f32 / 255.0);
            assert_eq!(t.plane(1)[i], y as f32 / 255.0);
            assert_eq!(t.plane(2)[i], 200.0 / 255.0);
        }
    }

    #[test]
    fn corrupt_file_names_sample() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.png");
        std::fs::write(&path, b"definitely not a png").unwrap();
        let err = decode_resize_crop("sample-42", Some(&path), &Preset::Ham10000.spec()).unwrap_err();
        assert!(matches!(err, Error::Decode { ref sample_id, .. } if sample_id == "sample-42"));
    }

    #[test]
    fn decode_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        RgbImage::from_fn(300, 257, |x, y| image::Rgb([(x * 7 % 256) as u8, (y * 3 % 256) as u8, 9]))
            .save(&path)
            .unwrap();
        let spec = PreprocessSpec::new(256, (224, 224), Normalization::ImageNetConstants).unwrap();
        let a = preprocess_sample("x", Some(&path), &spec).unwrap();
        let b = preprocess_sample("x", Some(&path), &spec).unwrap();
        assert_eq!(a.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                   b.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn imagenet_constants() {
        let mut values = vec![0.0f32; 3 * 4];
        for c in 0..3 {
            values[c * 4] = IMAGENET_MEAN[c];
        }
        let out = normalize_imagenet(&tensor_from(&values, 2, 2));
        for c in 0..3 {
            assert_eq!(out.plane(c)[0], 0.0);
            for &v in &out.plane(c)[1..] {
                assert_eq!(v, -IMAGENET_MEAN[c] / IMAGENET_STD[c]);
            }
        }
    }

    #[test]
    fn imagenet_round_trip() {
        let values: Vec<f32> = (0..48).map(|i| (i as f32 * 0.37).fract()).collect();
        let t = tensor_from(&values, 4, 4);
        let back = denormalize_imagenet(&normalize_imagenet(&t));
        for (a, b) in back.data.iter().zip(&t.data) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn median_mad_hand_example() {
        let mut scratch = vec![5.0, 1.0, 4.0, 2.0, 3.0];
        assert_eq!(median_in_place(&mut scratch), 3.0);
        let mut even = vec![4.0, 1.0, 3.0, 2.0];
        assert_eq!(median_in_place(&mut even), 2.5);

        // 1..5 padded by replication so the tensor is 3×1×5
        let values: Vec<f32> = [1.0, 2.0, 3.0, 4.0, 5.0].repeat(3);
        let out = normalize_median_mad(&tensor_from(&values, 1, 5));
        assert_eq!(out.plane(0), &[-2.0, -1.0, 0.0, 1.0, 2.0]);
    }

    #[test]
    fn constant_image_maps_to_zero() {
        let out = normalize_median_mad(&tensor_from(&[0.7; 27], 3, 3));
        assert!(out.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn spec_validation_and_hash() {
        assert!(PreprocessSpec::new(0, (1, 1), Normalization::MedianMad).is_err());
        assert!(PreprocessSpec::new(224, (256, 256), Normalization::MedianMad).is_err());
        // fits landscape images only; checked per image
        assert!(PreprocessSpec::new(224, (224, 256), Normalization::MedianMad).is_ok());
        let a = Preset::Ham10000.spec();
        let b = Preset::Odir.spec();
        assert_ne!(a.hash64(), b.hash64());
        assert_eq!(a.hash64(), Preset::PadUfes20.spec().hash64());
        assert_eq!("PAD-UFES-20".parse::<Preset>().unwrap(), Preset::PadUfes20);
        assert!("mnist".parse::<Preset>().is_err());
    }

    #[test]
    fn resize_tensor_shapes() {
        let t = ImageTensor::zeros("z", 512, 512, 1);
        let r = resize_tensor(&t, 224, 224);
        assert_eq!(r.data.len(), 3 * 224 * 224);
        assert_eq!(r.spec_hash, 1);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn sorted_median(v: &[f32]) -> f64 {
            let mut s: Vec<f64> = v.iter().map(|&x| x as f64).collect();
            s.sort_by(f64::total_cmp);
            let n = s.len();
            if n % 2 == 1 { s[n / 2] } else { 0.5 * (s[n / 2 - 1] + s[n / 2]) }
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]
            #[test]
            fn median_mad_output_is_standardized(values in proptest::collection::vec(0.0f32..1.0, 3 * 64 * 64)) {
                let t = tensor_from(&values, 64, 64);
                let out = normalize_median_mad(&t);
                let m = sorted_median(&out.data);
                prop_assert!(m.abs() <= 1e-6, "median {m}");
                let abs: Vec<f32> = out.data.iter().map(|v| v.abs()).collect();
                let mad = sorted_median(&abs);
                prop_assert!((mad - 1.0).abs() <= 1e-5, "mad {mad}");
            }

            #[test]
            fn grayscale_channels_identical(w in 1u32..40, h in 1u32..40, seed in any::<u8>()) {
                let img = image::DynamicImage::ImageLuma8(GrayImage::from_fn(w, h, |x, y| Luma([(x as u8).wrapping_mul(seed).wrapping_add(y as u8)])));
                let spec = PreprocessSpec::new(16, (16, 16), Normalization::ImageNetConstants).unwrap();
                let t = to_chw(&resize_and_crop(&img.to_rgb32f(), &spec).unwrap(), "g", 0);
                prop_assert_eq!((t.height, t.width), (16, 16));
                prop_assert_eq!(t.plane(0), t.plane(1));
                prop_assert_eq!(t.plane(0), t.plane(2));
            }
        }
    }
}
