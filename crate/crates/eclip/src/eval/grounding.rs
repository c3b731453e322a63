//! Grounding: prompt-to-token score maps, bilinear upsampling, and box
//! ranking by the area-normalized score sum.

use serde::{Deserialize, Serialize};

use crate::model::EncodedImage;
use crate::tensor::Tensor;

use super::EvalError;

/// Candidate region in score-map coordinates, half-open like the grid boxes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoxProposal {
    pub x1: usize,
    pub y1: usize,
    pub x2: usize,
    pub y2: usize,
}

impl BoxProposal {
    pub fn new(x1: usize, y1: usize, x2: usize, y2: usize) -> Result<Self, EvalError> {
        if x2 <= x1 || y2 <= y1 {
            return Err(EvalError::Input(format!(
                "degenerate box proposal [{x1}, {y1}, {x2}, {y2}]"
            )));
        }
        Ok(BoxProposal { x1, y1, x2, y2 })
    }

    pub fn area(&self) -> usize {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }
}

/// Dense prompt-similarity map at `scale x` the token grid resolution.
///
/// Upsampling convention: output pixel (x, y) samples the token scores at
/// fractional grid position (x/scale, y/scale) bilinearly, clamped at the
/// right and bottom edges. Pixel (scale*gx, scale*gy) therefore reproduces
/// token (gx, gy)'s score exactly.
#[derive(Debug, Clone)]
pub struct ScoreMap {
    pub grid_h: usize,
    pub grid_w: usize,
    /// h x w values, h = grid_h * scale.
    pub values: Tensor,
}

impl ScoreMap {
    pub fn height(&self) -> usize {
        self.values.rows()
    }

    pub fn width(&self) -> usize {
        self.values.cols()
    }
}

/// Per-token scores: dot product of each projected token with the prompt's
/// joint-space embedding. Returns a grid_h x grid_w matrix.
pub fn token_scores(
    encoded: &EncodedImage,
    prompt: &Tensor,
    grid_h: usize,
    grid_w: usize,
) -> Result<Tensor, EvalError> {
    let z = &encoded.projected_tokens;
    if z.rows() != grid_h * grid_w {
        return Err(EvalError::Input(format!(
            "{} projected tokens do not fill a {grid_h}x{grid_w} grid",
            z.rows()
        )));
    }
    if prompt.numel() != z.cols() {
        return Err(EvalError::Input(format!(
            "prompt dim {} != token dim {}",
            prompt.numel(),
            z.cols()
        )));
    }
    let p = prompt.data();
    let mut scores = Vec::with_capacity(z.rows());
    for i in 0..z.rows() {
        scores.push(z.row(i).iter().zip(p).map(|(a, b)| a * b).sum());
    }
    Ok(Tensor::matrix(grid_h, grid_w, scores)?)
}

/// Bilinear upsampling of the token-score grid by an integer factor.
pub fn score_map(
    encoded: &EncodedImage,
    prompt: &Tensor,
    grid_h: usize,
    grid_w: usize,
    scale: usize,
) -> Result<ScoreMap, EvalError> {
    if scale == 0 {
        return Err(EvalError::Input("scale must be >= 1".into()));
    }
    let tok = token_scores(encoded, prompt, grid_h, grid_w)?;
    let (h, w) = (grid_h * scale, grid_w * scale);
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let gy = y as f64 / scale as f64;
        let y0 = gy.floor() as usize;
        let y1 = (y0 + 1).min(grid_h - 1);
        let fy = gy - y0 as f64;
        for x in 0..w {
            let gx = x as f64 / scale as f64;
            let x0 = gx.floor() as usize;
            let x1 = (x0 + 1).min(grid_w - 1);
            let fx = gx - x0 as f64;
            let top = tok.get2(y0, x0) * (1.0 - fx) + tok.get2(y0, x1) * fx;
            let bot = tok.get2(y1, x0) * (1.0 - fx) + tok.get2(y1, x1) * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    Ok(ScoreMap {
        grid_h,
        grid_w,
        values: Tensor::matrix(h, w, out)?,
    })
}

/// Box score r(b): score-map sum over the box divided by sqrt(area).
pub fn box_score(map: &ScoreMap, b: &BoxProposal) -> Result<f64, EvalError> {
    if b.x2 > map.width() || b.y2 > map.height() {
        return Err(EvalError::Input(format!(
            "proposal [{}, {}, {}, {}] leaves the {}x{} map",
            b.x1,
            b.y1,
            b.x2,
            b.y2,
            map.width(),
            map.height()
        )));
    }
    let mut sum = 0.0;
    for y in b.y1..b.y2 {
        for x in b.x1..b.x2 {
            sum += map.values.get2(y, x);
        }
    }
    Ok(sum / (b.area() as f64).sqrt())
}

/// Score every proposal and sort descending; ties keep the lower input
/// index. The first entry is the grounding prediction.
pub fn rank_boxes(
    map: &ScoreMap,
    proposals: &[BoxProposal],
) -> Result<Vec<(usize, f64)>, EvalError> {
    if proposals.is_empty() {
        return Err(EvalError::Input("rank_boxes needs at least one proposal".into()));
    }
    let mut scored = Vec::with_capacity(proposals.len());
    for (i, b) in proposals.iter().enumerate() {
        scored.push((i, box_score(map, b)?));
    }
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(scored)
}

/// Min-max normalized 8-bit pixels for PGM export; a constant map becomes
/// mid-gray.
pub fn map_to_pixels(map: &ScoreMap) -> Vec<u8> {
    let data = map.values.data();
    let lo = data.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi - lo).is_finite() || hi - lo <= 0.0 {
        return vec![128; data.len()];
    }
    data.iter()
        .map(|&v| (255.0 * (v - lo) / (hi - lo)).round() as u8)
        .collect()
}
