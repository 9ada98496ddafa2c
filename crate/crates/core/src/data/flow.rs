//! Dense motion estimation used to weight patch sampling.
//!
//! Only the magnitude of motion matters here, so the bundled estimator is a
//! coarse-to-fine block matcher on luminance with integer displacements.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

/// Per-pixel displacement from the first frame to the second.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub dy: Array2<f32>,
    pub dx: Array2<f32>,
}

impl FlowField {
    pub fn zeros(height: usize, width: usize) -> Self {
        FlowField {
            dy: Array2::zeros((height, width)),
            dx: Array2::zeros((height, width)),
        }
    }

    pub fn size(&self) -> (usize, usize) {
        self.dy.dim()
    }

    pub fn magnitude(&self) -> Array2<f32> {
        ndarray::Zip::from(&self.dy)
            .and(&self.dx)
            .map_collect(|&y, &x| (y * y + x * x).sqrt())
    }

    /// Mean magnitude in pixels over the window at `(y, x)` of the given size.
    pub fn mean_magnitude(&self, y: usize, x: usize, height: usize, width: usize) -> Result<f64> {
        let (h, w) = self.size();
        if height == 0 || width == 0 || y + height > h || x + width > w {
            return Err(Error::dim(format!(
                "window {height}x{width}@({y},{x}) outside flow field {h}x{w}"
            )));
        }
        let mut s = 0.0f64;
        for r in y..y + height {
            for c in x..x + width {
                s += (self.dy[[r, c]].powi(2) + self.dx[[r, c]].powi(2)).sqrt() as f64;
            }
        }
        Ok(s / (height * width) as f64)
    }
}

/// Any dense optical-flow method.
pub trait FlowEstimator: Send + Sync {
    fn estimate(&self, first: &Image, second: &Image) -> Result<FlowField>;
}

/// Pyramidal block matching with a sum-of-absolute-differences cost. Ties
/// prefer the displacement closest to zero, so identical frames give zero flow.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockMatching {
    /// Block side in pixels at every pyramid level.
    pub block: usize,
    /// Search radius at the coarsest level. Finer levels search ±1 around
    /// the upsampled coarse estimates of the block and its neighbors, and
    /// around zero.
    pub radius: usize,
    pub levels: usize,
}

impl Default for BlockMatching {
    fn default() -> Self {
        BlockMatching {
            block: 8,
            radius: 4,
            levels: 4,
        }
    }
}

fn luminance(img: &Image) -> Array2<f32> {
    let (r, g, b) = (img.channel(0), img.channel(1), img.channel(2));
    ndarray::Zip::from(&r)
        .and(&g)
        .and(&b)
        .map_collect(|&r, &g, &b| 0.299 * r + 0.587 * g + 0.114 * b)
}

fn downsample(a: &Array2<f32>) -> Array2<f32> {
    let (h, w) = a.dim();
    let (oh, ow) = ((h / 2).max(1), (w / 2).max(1));
    Array2::from_shape_fn((oh, ow), |(y, x)| {
        let ys = [(2 * y).min(h - 1), (2 * y + 1).min(h - 1)];
        let xs = [(2 * x).min(w - 1), (2 * x + 1).min(w - 1)];
        0.25 * (a[[ys[0], xs[0]]] + a[[ys[0], xs[1]]] + a[[ys[1], xs[0]]] + a[[ys[1], xs[1]]])
    })
}

impl BlockMatching {
    fn validate(&self) -> Result<()> {
        if self.block == 0 || self.levels == 0 {
            return Err(Error::config(format!(
                "invalid block matching parameters {self:?}"
            )));
        }
        Ok(())
    }

    /// Best displacement per block at one level, searching `radius` around `guess`.
    fn match_level(
        &self,
        a: &Array2<f32>,
        b: &Array2<f32>,
        guesses: impl Fn(usize, usize) -> Vec<(i64, i64)>,
        radius: i64,
    ) -> Array2<(i64, i64)> {
        let (h, w) = a.dim();
        let bs = self.block;
        let (nby, nbx) = (h.div_ceil(bs), w.div_ceil(bs));
        Array2::from_shape_fn((nby, nbx), |(by, bx)| {
            let (y0, x0) = (by * bs, bx * bs);
            let (y1, x1) = ((y0 + bs).min(h), (x0 + bs).min(w));
            let mut cands: Vec<(i64, i64)> = Vec::new();
            for (gy, gx) in guesses(by, bx) {
                for dy in gy - radius..=gy + radius {
                    for dx in gx - radius..=gx + radius {
                        if !cands.contains(&(dy, dx)) {
                            cands.push((dy, dx));
                        }
                    }
                }
            }
            let mut best = (f32::INFINITY, i64::MAX, (0i64, 0i64));
            for (dy, dx) in cands {
                let inside = y0 as i64 + dy >= 0
                    && x0 as i64 + dx >= 0
                    && y1 as i64 + dy <= h as i64
                    && x1 as i64 + dx <= w as i64;
                if !inside {
                    continue;
                }
                let mut cost = 0.0f32;
                for y in y0..y1 {
                    let yb = (y as i64 + dy) as usize;
                    for x in x0..x1 {
                        cost += (a[[y, x]] - b[[yb, (x as i64 + dx) as usize]]).abs();
                    }
                }
                let norm = dy * dy + dx * dx;
                if cost < best.0 || (cost == best.0 && norm < best.1) {
                    best = (cost, norm, (dy, dx));
                }
            }
            best.2
        })
    }
}

/// Component-wise median over each block's 3x3 neighborhood, which removes
/// isolated mismatches before they are propagated to the next level.
fn median_filter(field: &Array2<(i64, i64)>) -> Array2<(i64, i64)> {
    let (h, w) = field.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let (mut ys, mut xs) = (Vec::with_capacity(9), Vec::with_capacity(9));
        for ny in y.saturating_sub(1)..(y + 2).min(h) {
            for nx in x.saturating_sub(1)..(x + 2).min(w) {
                ys.push(field[[ny, nx]].0);
                xs.push(field[[ny, nx]].1);
            }
        }
        ys.sort_unstable();
        xs.sort_unstable();
        (ys[ys.len() / 2], xs[xs.len() / 2])
    })
}

impl FlowEstimator for BlockMatching {
    fn estimate(&self, first: &Image, second: &Image) -> Result<FlowField> {
        self.validate()?;
        first.same_size(second).map_err(|e| Error::Flow {
            context: "block matching".into(),
            message: e.to_string(),
        })?;
        let (h, w) = first.size();
        let mut pyramid = vec![(luminance(first), luminance(second))];
        while pyramid.len() < self.levels {
            let (a, b) = pyramid.last().expect("non-empty");
            if a.nrows() < 4 * self.block || a.ncols() < 4 * self.block {
                break;
            }
            let next = (downsample(a), downsample(b));
            pyramid.push(next);
        }

        let mut prev: Option<Array2<(i64, i64)>> = None;
        for (level, (a, b)) in pyramid.iter().enumerate().rev() {
            let coarsest = level == pyramid.len() - 1;
            let radius = if coarsest { self.radius as i64 } else { 1 };
            let field = match &prev {
                None => self.match_level(a, b, |_, _| vec![(0, 0)], radius),
                Some(p) => {
                    let (py, px) = (p.nrows() as i64, p.ncols() as i64);
                    self.match_level(
                        a,
                        b,
                        |by, bx| {
                            let (cy, cx) = ((by / 2) as i64, (bx / 2) as i64);
                            let mut g = vec![(0, 0)];
                            for ny in cy - 1..=cy + 1 {
                                for nx in cx - 1..=cx + 1 {
                                    let (gy, gx) = p[[
                                        ny.clamp(0, py - 1) as usize,
                                        nx.clamp(0, px - 1) as usize,
                                    ]];
                                    g.push((2 * gy, 2 * gx));
                                }
                            }
                            g
                        },
                        radius,
                    )
                }
            };
            prev = Some(median_filter(&field));
        }

        let blocks = prev.expect("at least one level");
        let bs = self.block;
        let mut flow = FlowField::zeros(h, w);
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = blocks[[y / bs, x / bs]];
                flow.dy[[y, x]] = dy as f32;
                flow.dx[[y, x]] = dx as f32;
            }
        }
        Ok(flow)
    }
}

/// Mean flow magnitude in pixels between the outer frames of a triplet.
pub fn flow_score(first: &Image, last: &Image, estimator: &dyn FlowEstimator) -> Result<f64> {
    let flow = estimator.estimate(first, last)?;
    let (h, w) = flow.size();
    flow.mean_magnitude(0, 0, h, w)
}
