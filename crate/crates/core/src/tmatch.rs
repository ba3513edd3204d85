//! Template matching with diversity-weighted nearest-neighbor patch votes
//! and a deformation penalty.

use crate::error::{Error, Result};
use crate::geom::BBox;
use crate::img::{crop_resample, to_gray, Image};

/// Template side in pixels.
pub const TEMPLATE_SIZE: usize = 64;
/// Patch side in pixels; the grid is `TEMPLATE_SIZE / PATCH`.
pub const PATCH: usize = 8;
pub const GRID: usize = TEMPLATE_SIZE / PATCH;
pub const GRID_CELLS: usize = GRID * GRID;

/// Maps a raw score onto the `[0, 25]` scale the switcher thresholds use.
pub fn rescale_score(raw: f64) -> f64 {
    raw * 25.0 / GRID_CELLS as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct Template {
    patch: Image,
    descriptors: Vec<Vec<f64>>,
}

/// Mean-subtracted, L2-normalized pixel vectors for each grid patch.
fn grid_descriptors(img: &Image) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(GRID_CELLS);
    for gy in 0..GRID {
        for gx in 0..GRID {
            let mut v: Vec<f64> = (0..PATCH * PATCH)
                .map(|k| img.get(gx * PATCH + k % PATCH, gy * PATCH + k / PATCH, 0))
                .collect();
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            v.iter_mut().for_each(|x| *x -= mean);
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-9 {
                v.iter_mut().for_each(|x| *x /= norm);
            } else {
                v.iter_mut().for_each(|x| *x = 0.0);
            }
            out.push(v);
        }
    }
    out
}

/// Crops `bbox` from `frame` and resamples it to the template resolution.
pub fn crop_candidate(frame: &Image, bbox: &BBox) -> Result<Image> {
    if !bbox.is_valid() {
        return Err(Error::InvalidBox {
            x: bbox.x,
            y: bbox.y,
            w: bbox.w,
            h: bbox.h,
        });
    }
    Ok(to_gray(&crop_resample(
        frame,
        bbox.center(),
        (bbox.w, bbox.h),
        (TEMPLATE_SIZE, TEMPLATE_SIZE),
    )))
}

impl Template {
    pub fn build(frame: &Image, bbox: &BBox) -> Result<Self> {
        Ok(Self::from_patch(crop_candidate(frame, bbox)?))
    }

    fn from_patch(patch: Image) -> Self {
        let descriptors = grid_descriptors(&patch);
        Template { patch, descriptors }
    }

    pub fn patch(&self) -> &Image {
        &self.patch
    }

    pub fn descriptors(&self) -> &[Vec<f64>] {
        &self.descriptors
    }

    /// Raw similarity in `[0, GRID_CELLS]`.
    pub fn similarity(&self, candidate: &Image) -> Result<f64> {
        if candidate.width() != TEMPLATE_SIZE || candidate.height() != TEMPLATE_SIZE {
            return Err(Error::DimensionMismatch(format!(
                "candidate is {}x{}, template is {TEMPLATE_SIZE}x{TEMPLATE_SIZE}",
                candidate.width(),
                candidate.height()
            )));
        }
        let cand = grid_descriptors(&to_gray(candidate));
        let nn: Vec<usize> = cand
            .iter()
            .map(|c| {
                let mut best = (f64::INFINITY, 0);
                for (j, t) in self.descriptors.iter().enumerate() {
                    let d: f64 = c.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum();
                    if d < best.0 {
                        best = (d, j);
                    }
                }
                best.1
            })
            .collect();
        let mut hits = vec![0usize; GRID_CELLS];
        nn.iter().for_each(|&j| hits[j] += 1);
        let score = nn
            .iter()
            .enumerate()
            .map(|(i, &j)| {
                let (dx, dy) = ((i % GRID) as f64 - (j % GRID) as f64, (i / GRID) as f64 - (j / GRID) as f64);
                let deform = 1.0 / (1.0 + dx.hypot(dy));
                deform / hits[j] as f64
            })
            .sum();
        Ok(score)
    }

    /// Rescaled similarity of the crop at `bbox`.
    pub fn score_box(&self, frame: &Image, bbox: &BBox) -> Result<f64> {
        Ok(rescale_score(self.similarity(&crop_candidate(frame, bbox)?)?))
    }
}
