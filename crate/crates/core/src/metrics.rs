//! PSNR and SSIM on images with data range `[0, 1]`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::{Image, ImageError};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("image dimensions {0}x{1} do not match {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("image {0}x{1} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")]
    ImageTooSmall(usize, usize),
    #[error("no views to summarise")]
    Empty,
}

fn check_same(a: &Image, b: &Image) -> Result<(), MetricError> {
    a.same_size(b).map_err(|e| match e {
        ImageError::DimensionMismatch(w0, h0, w1, h1) => {
            MetricError::DimensionMismatch(w0, h0, w1, h1)
        }
        other => unreachable!("same_size only reports dimension mismatches: {other}"),
    })
}

pub fn mse(a: &Image, b: &Image) -> Result<f64, MetricError> {
    check_same(a, b)?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(sum / a.data().len() as f64)
}

/// `−10·log10(MSE)`; identical images give `f64::INFINITY`.
pub fn psnr(a: &Image, b: &Image) -> Result<f64, MetricError> {
    let m = mse(a, b)?;
    Ok(if m == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * m.log10()
    })
}

/// Normalised separable Gaussian taps.
pub fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Mean SSIM over all fully contained windows and the three channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64, MetricError> {
    check_same(a, b)?;
    let (w, h) = (a.width(), a.height());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(MetricError::ImageTooSmall(w, h));
    }
    let g = gaussian_window();
    let (ow, oh) = (w - SSIM_WINDOW + 1, h - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for c in 0..3 {
        let (x, y) = (a.channel(c), b.channel(c));
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let [mx, my, sxx, syy, sxy] =
            [&x, &y, &xx, &yy, &xy].map(|plane| filter_valid(plane, w, h, &g));
        for i in 0..ow * oh {
            let (ma, mb) = (mx[i], my[i]);
            let va = sxx[i] - ma * ma;
            let vb = syy[i] - mb * mb;
            let cov = sxy[i] - ma * mb;
            let num = (2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2);
            let den = (ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2);
            total += num / den;
        }
    }
    Ok(total / (3 * ow * oh) as f64)
}

/// Separable valid-mode filtering of a row-major plane.
fn filter_valid(plane: &[f64], w: usize, h: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|k| g[k] * plane[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW)
                .map(|k| g[k] * rows[(y + k) * ow + x])
                .sum();
        }
    }
    out
}

/// Per-channel mean colour: the constant image with the lowest MSE.
pub fn best_constant(image: &Image) -> Image {
    let n = (image.width() * image.height()) as f64;
    let mean = [0, 1, 2].map(|c| image.channel(c).iter().sum::<f64>() / n);
    Image::filled(image.width(), image.height(), mean)
}

/// Metrics for one rendered view. Infinite PSNR serialises as `null`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewMetrics {
    pub scene: String,
    pub view: usize,
    #[serde(with = "finite_or_null")]
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_view: Vec<ViewMetrics>,
    #[serde(with = "finite_or_null")]
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    #[serde(with = "finite_or_null")]
    pub std_psnr: f64,
    pub std_ssim: f64,
}

impl MetricReport {
    pub fn from_views(per_view: Vec<ViewMetrics>) -> Result<Self, MetricError> {
        if per_view.is_empty() {
            return Err(MetricError::Empty);
        }
        let (mean_psnr, std_psnr) = mean_std(per_view.iter().map(|v| v.psnr));
        let (mean_ssim, std_ssim) = mean_std(per_view.iter().map(|v| v.ssim));
        Ok(Self {
            per_view,
            mean_psnr,
            mean_ssim,
            std_psnr,
            std_ssim,
        })
    }
}

/// Population mean and standard deviation.
fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    if !mean.is_finite() {
        return (mean, f64::NAN);
    }
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

mod finite_or_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    /// `null` reads back as `+∞`, the only non-finite value a report holds
    /// for a well-formed comparison.
    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise(w: usize, h: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(w, h, (0..w * h * 3).map(|_| rng.gen::<f64>()).collect()).unwrap()
    }

    #[test]
    fn psnr_examples() {
        let a = Image::filled(4, 4, [0.5; 3]);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let b = Image::filled(4, 4, [0.6; 3]);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        let c = Image::filled(4, 4, [0.51; 3]);
        assert!((psnr(&a, &c).unwrap() - 40.0).abs() < 1e-9);
        assert_eq!(
            psnr(&a, &Image::filled(4, 5, [0.5; 3])),
            Err(MetricError::DimensionMismatch(4, 4, 4, 5))
        );
    }

    #[test]
    fn ssim_of_identical_images_is_one() {
        let a = noise(16, 13, 1);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        assert_eq!(
            ssim(
                &Image::filled(10, 20, [0.0; 3]),
                &Image::filled(10, 20, [0.0; 3])
            ),
            Err(MetricError::ImageTooSmall(10, 20))
        );
    }

    #[test]
    fn ssim_of_offset_constants_is_bounded() {
        let a = Image::filled(12, 12, [0.2; 3]);
        let b = Image::filled(12, 12, [0.7; 3]);
        let s = ssim(&a, &b).unwrap();
        assert!(s < 1.0 && s > -1.0);
    }

    #[test]
    fn checkerboard_against_inverse_matches_direct_formula() {
        let n = SSIM_WINDOW;
        let mut a = Image::filled(n, n, [0.0; 3]);
        let mut b = Image::filled(n, n, [1.0; 3]);
        for y in 0..n {
            for x in 0..n {
                let v = ((x + y) % 2) as f64;
                a.set_pixel(x, y, [v; 3]);
                b.set_pixel(x, y, [1.0 - v; 3]);
            }
        }
        // One window: weighted moments from the 2-D Gaussian written out.
        let c = (n / 2) as f64;
        let mut wsum = 0.0;
        let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for y in 0..n {
            for x in 0..n {
                let d2 = (x as f64 - c).powi(2) + (y as f64 - c).powi(2);
                let wt = (-d2 / 4.5).exp();
                let (p, q) = (a.pixel(x, y)[0], b.pixel(x, y)[0]);
                wsum += wt;
                ma += wt * p;
                mb += wt * q;
                saa += wt * p * p;
                sbb += wt * q * q;
                sab += wt * p * q;
            }
        }
        let (ma, mb) = (ma / wsum, mb / wsum);
        let va = saa / wsum - ma * ma;
        let vb = sbb / wsum - mb * mb;
        let cov = sab / wsum - ma * mb;
        let expected = (2.0 * ma * mb + 1e-4) * (2.0 * cov + 9e-4)
            / ((ma * ma + mb * mb + 1e-4) * (va + vb + 9e-4));
        let got = ssim(&a, &b).unwrap();
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
        assert!(got < -0.99);
    }

    #[test]
    fn psnr_falls_with_noise_amplitude() {
        let base = Image::filled(32, 32, [0.5; 3]);
        let mut last = f64::INFINITY;
        for (seed, amp) in [(1, 0.05), (2, 0.1), (3, 0.2)] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let noisy = Image::new(
                32,
                32,
                base.data()
                    .iter()
                    .map(|v| v + amp * rng.gen_range(-1.0..1.0))
                    .collect(),
            )
            .unwrap();
            let p = psnr(&base, &noisy).unwrap();
            assert!(p < last);
            last = p;
        }
    }

    #[test]
    fn best_constant_minimises_mse() {
        let img = noise(8, 8, 4);
        let best = best_constant(&img);
        let m = mse(&img, &best).unwrap();
        for delta in [-0.01, 0.01] {
            let other = Image::filled(8, 8, best.pixel(0, 0).map(|v| v + delta));
            assert!(mse(&img, &other).unwrap() > m);
        }
    }

    #[test]
    fn report_serialisation() {
        let views = vec![
            ViewMetrics {
                scene: "scene_000".into(),
                view: 1,
                psnr: 20.0,
                ssim: 0.8,
            },
            ViewMetrics {
                scene: "scene_000".into(),
                view: 2,
                psnr: 24.0,
                ssim: 0.9,
            },
        ];
        let report = MetricReport::from_views(views).unwrap();
        assert!((report.mean_psnr - 22.0).abs() < 1e-12 && (report.std_psnr - 2.0).abs() < 1e-12);
        let json = serde_json::to_value(&report).unwrap();
        assert!(json["per_view"][0]["psnr"].is_number());
        let inf = MetricReport::from_views(vec![ViewMetrics {
            scene: "s".into(),
            view: 0,
            psnr: f64::INFINITY,
            ssim: 1.0,
        }])
        .unwrap();
        let json = serde_json::to_string(&inf).unwrap();
        assert!(json.contains(r#""psnr":null"#));
        let back: MetricReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back.per_view[0].psnr, f64::INFINITY);
        assert_eq!(MetricReport::from_views(vec![]), Err(MetricError::Empty));
    }

    proptest! {
        #[test]
        fn metrics_are_symmetric_and_bounded(sa in 0u64..1000, sb in 0u64..1000, w in 11usize..16, h in 11usize..16) {
            let (a, b) = (noise(w, h, sa), noise(w, h, sb + 1000));
            prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
            let (s, t) = (ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
            prop_assert!((s - t).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&s));
        }
    }
}
