//! Image regression: fit a field to pixel values at pixel-center
//! coordinates, with a fixed hold-out pattern for generalization checks.

use thiserror::Error;

use super::netpbm::RawImage;
use crate::grid::{Dataset, GridModel};

#[derive(Debug, Error)]
pub enum ImageTaskError {
    #[error("image must be at least 2x2, got {height}x{width}")]
    TooSmall { height: usize, width: usize },
    #[error("pixel ({r}, {c}) channel {ch} is {value}, outside [0, 1]")]
    OutOfRange {
        r: usize,
        c: usize,
        ch: usize,
        value: f64,
    },
    #[error("shape mismatch: {a_h}x{a_w}x{a_c} vs {b_h}x{b_w}x{b_c}")]
    ShapeMismatch {
        a_h: usize,
        a_w: usize,
        a_c: usize,
        b_h: usize,
        b_w: usize,
        b_c: usize,
    },
}

/// An image regression problem. Pixel (r, c) lives at coordinates
/// ((r + 0.5)/H, (c + 0.5)/W), so axis 0 of the model runs down rows.
/// Every pixel with odd row and odd column is held out (a quarter of the
/// image, spatially uniform), the rest train.
#[derive(Debug, Clone)]
pub struct ImageTask {
    image: RawImage,
}

impl ImageTask {
    pub fn new(image: RawImage) -> Result<Self, ImageTaskError> {
        if image.height < 2 || image.width < 2 {
            return Err(ImageTaskError::TooSmall {
                height: image.height,
                width: image.width,
            });
        }
        for r in 0..image.height {
            for c in 0..image.width {
                for (ch, &v) in image.pixel(r, c).iter().enumerate() {
                    if !(0.0..=1.0).contains(&v) {
                        return Err(ImageTaskError::OutOfRange { r, c, ch, value: v });
                    }
                }
            }
        }
        Ok(ImageTask { image })
    }

    pub fn image(&self) -> &RawImage {
        &self.image
    }

    pub fn channels(&self) -> usize {
        self.image.channels
    }

    /// Fraction of pixels held out by the fixed pattern.
    pub fn holdout_fraction(&self) -> f64 {
        let held = self.pixel_count(true);
        held as f64 / (self.image.height * self.image.width) as f64
    }

    fn is_holdout(r: usize, c: usize) -> bool {
        r % 2 == 1 && c % 2 == 1
    }

    fn pixel_count(&self, holdout: bool) -> usize {
        let mut n = 0;
        for r in 0..self.image.height {
            for c in 0..self.image.width {
                if Self::is_holdout(r, c) == holdout {
                    n += 1;
                }
            }
        }
        n
    }

    pub fn coordinate(&self, r: usize, c: usize) -> Vec<f64> {
        vec![
            (r as f64 + 0.5) / self.image.height as f64,
            (c as f64 + 0.5) / self.image.width as f64,
        ]
    }

    fn dataset(&self, holdout: bool) -> Dataset {
        let mut points = Vec::new();
        let mut targets = Vec::new();
        for r in 0..self.image.height {
            for c in 0..self.image.width {
                if Self::is_holdout(r, c) == holdout {
                    points.push(self.coordinate(r, c));
                    targets.push(self.image.pixel(r, c).to_vec());
                }
            }
        }
        Dataset::new(points, targets, 2, self.image.channels)
            .expect("validated image yields a well-formed dataset")
    }

    pub fn train_dataset(&self) -> Dataset {
        self.dataset(false)
    }

    pub fn holdout_dataset(&self) -> Dataset {
        self.dataset(true)
    }

    /// Render the model at every pixel center into a raster of the same
    /// shape as the source.
    pub fn render(&self, model: &GridModel) -> RawImage {
        let (h, w, ch) = (self.image.height, self.image.width, self.image.channels);
        assert_eq!(model.output_dim(), ch, "model channels");
        let mut data = vec![0.0; h * w * ch];
        let mut out = vec![0.0; ch];
        for r in 0..h {
            for c in 0..w {
                model.forward_into(&self.coordinate(r, c), &mut out);
                data[(r * w + c) * ch..(r * w + c) * ch + ch].copy_from_slice(&out);
            }
        }
        RawImage::new(h, w, ch, data)
    }
}

/// Peak signal-to-noise ratio between two equal-shape rasters on the unit
/// value range: `-10 log10(MSE)`, infinite for an exact match.
pub fn psnr_images(predicted: &RawImage, reference: &RawImage) -> Result<f64, ImageTaskError> {
    if (predicted.height, predicted.width, predicted.channels)
        != (reference.height, reference.width, reference.channels)
    {
        return Err(ImageTaskError::ShapeMismatch {
            a_h: predicted.height,
            a_w: predicted.width,
            a_c: predicted.channels,
            b_h: reference.height,
            b_w: reference.width,
            b_c: reference.channels,
        });
    }
    let mse = predicted
        .data
        .iter()
        .zip(&reference.data)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / predicted.data.len() as f64;
    Ok(psnr_from_mse(mse))
}

/// PSNR of a model's predictions over a dataset's targets.
pub fn psnr_model(model: &GridModel, data: &Dataset) -> f64 {
    let d = model.output_dim();
    let mut out = vec![0.0; d];
    let mut sq = 0.0;
    for i in 0..data.len() {
        model.forward_into(data.point(i), &mut out);
        for (p, y) in out.iter().zip(data.target(i)) {
            sq += (p - y) * (p - y);
        }
    }
    psnr_from_mse(sq / (data.len() * d) as f64)
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}
