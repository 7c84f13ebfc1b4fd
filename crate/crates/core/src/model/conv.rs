//! Small convolutional stack turning 3×32×32 images into 64 features:
//! conv3×3(8) → relu → avgpool 2 → conv3×3(16) → relu → avgpool 8.

use vqg_tensor::init::Rng;
use vqg_tensor::{ParamStore, Var};

use super::layers::{Ctx, Linear};
use crate::dataset::synthetic::{IMAGE_CHANNELS, IMAGE_SIDE};
use crate::error::Result;

const C1: usize = 8;
const C2: usize = 16;
const POOL1: usize = 2;
const POOL2: usize = 8;
const MID: usize = IMAGE_SIDE / POOL1;
const OUT_SIDE: usize = MID / POOL2;
pub const CONV_OUT: usize = C2 * OUT_SIDE * OUT_SIDE;

/// im2col indices for a 3×3, padding-1 convolution over a `side×side`
/// map with `channels` channels. `src(b, c, y, x)` gives the flat input
/// index. Output layout `[B, side*side, channels*9]`.
fn im2col(batch: usize, channels: usize, side: usize, src: impl Fn(usize, usize, usize, usize) -> usize) -> Vec<Option<usize>> {
    let mut index = Vec::with_capacity(batch * side * side * channels * 9);
    for b in 0..batch {
        for y in 0..side {
            for x in 0..side {
                for c in 0..channels {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let (sy, sx) = (y + ky, x + kx);
                            let inside = (1..=side).contains(&sy) && (1..=side).contains(&sx);
                            index.push(inside.then(|| src(b, c, sy - 1, sx - 1)));
                        }
                    }
                }
            }
        }
    }
    index
}

/// Window gather for average pooling of a channels-last `[B, side², C]`
/// map; output `[B, (side/p)², C, p²]` before the mean over the last axis.
fn pool_index(batch: usize, side: usize, channels: usize, p: usize) -> Vec<Option<usize>> {
    let out = side / p;
    let mut index = Vec::with_capacity(batch * side * side * channels);
    for b in 0..batch {
        for oy in 0..out {
            for ox in 0..out {
                for c in 0..channels {
                    for dy in 0..p {
                        for dx in 0..p {
                            let pos = (oy * p + dy) * side + ox * p + dx;
                            index.push(Some((b * side * side + pos) * channels + c));
                        }
                    }
                }
            }
        }
    }
    index
}

#[derive(Clone, Debug)]
pub struct ConvStack {
    pub conv1: Linear,
    pub conv2: Linear,
}

impl ConvStack {
    pub fn new(store: &mut ParamStore, rng: &mut Rng) -> Self {
        Self {
            conv1: Linear::new(store, rng, "image.conv1", IMAGE_CHANNELS * 9, C1, true),
            conv2: Linear::new(store, rng, "image.conv2", C1 * 9, C2, true),
        }
    }

    /// `pixels[B, 3·32·32]` (channel-major) → `[B, 64]`.
    pub fn forward(&self, cx: &mut Ctx, pixels: Var) -> Result<Var> {
        let b = cx.g.shape(pixels)[0];
        let n = IMAGE_SIDE;
        let cols = im2col(b, IMAGE_CHANNELS, n, |b, c, y, x| ((b * IMAGE_CHANNELS + c) * n + y) * n + x);
        let h = cx.g.gather(pixels, cols, vec![b, n * n, IMAGE_CHANNELS * 9])?;
        let h = self.conv1.forward(cx, h)?;
        let h = cx.g.relu(h)?;
        let h = cx.g.gather(h, pool_index(b, n, C1, POOL1), vec![b, MID * MID, C1, POOL1 * POOL1])?;
        let h = cx.g.mean_last_axis(h)?;

        let cols = im2col(b, C1, MID, |b, c, y, x| (b * MID * MID + y * MID + x) * C1 + c);
        let h = cx.g.gather(h, cols, vec![b, MID * MID, C1 * 9])?;
        let h = self.conv2.forward(cx, h)?;
        let h = cx.g.relu(h)?;
        let h = cx.g.gather(h, pool_index(b, MID, C2, POOL2), vec![b, OUT_SIDE * OUT_SIDE, C2, POOL2 * POOL2])?;
        let h = cx.g.mean_last_axis(h)?;
        Ok(cx.g.reshape(h, &[b, CONV_OUT])?)
    }
}
