use rand::Rng;

use crate::nn::Tensor;

/// Random patch mask over the patch grid; `true` marks a masked patch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchMask {
    masked: Vec<bool>,
}

impl PatchMask {
    /// Masks exactly `round(ratio * n_patches)` patches, drawn uniformly
    /// without replacement.
    pub fn sample<R: Rng + ?Sized>(n_patches: usize, ratio: f64, rng: &mut R) -> Self {
        assert!((0.0..1.0).contains(&ratio), "mask ratio {ratio} outside [0, 1)");
        let n_masked = masked_count(n_patches, ratio);
        let mut masked = vec![false; n_patches];
        for i in rand::seq::index::sample(rng, n_patches, n_masked) {
            masked[i] = true;
        }
        Self { masked }
    }

    pub fn none(n_patches: usize) -> Self {
        Self {
            masked: vec![false; n_patches],
        }
    }

    pub fn from_bools(masked: Vec<bool>) -> Self {
        Self { masked }
    }

    pub fn len(&self) -> usize {
        self.masked.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masked.is_empty()
    }

    pub fn is_masked(&self, patch: usize) -> bool {
        self.masked[patch]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.masked
    }

    pub fn count(&self) -> usize {
        self.masked.iter().filter(|m| **m).count()
    }

    /// Positions of the visible patches in ascending order.
    pub fn visible(&self) -> Vec<usize> {
        (0..self.masked.len()).filter(|&i| !self.masked[i]).collect()
    }
}

pub fn masked_count(n_patches: usize, ratio: f64) -> usize {
    (ratio * n_patches as f64).round() as usize
}

/// Splits an `h x w x c` image into `(h/p * w/p) x (p*p*c)` patch rows,
/// row-major over the patch grid; each row is row-major `(y, x, channel)`.
pub fn patchify(pixels: &[f32], size: usize, channels: usize, patch: usize) -> Tensor {
    let grid = size / patch;
    let plen = patch * patch * channels;
    let mut out = Tensor::zeros(grid * grid, plen);
    for gy in 0..grid {
        for gx in 0..grid {
            let row = out.row_mut(gy * grid + gx);
            let mut k = 0;
            for y in 0..patch {
                let src = ((gy * patch + y) * size + gx * patch) * channels;
                let n = patch * channels;
                row[k..k + n].copy_from_slice(&pixels[src..src + n]);
                k += n;
            }
        }
    }
    out
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &Tensor, size: usize, channels: usize, patch: usize) -> Vec<f32> {
    let grid = size / patch;
    let mut pixels = vec![0.0; size * size * channels];
    for gy in 0..grid {
        for gx in 0..grid {
            let row = patches.row(gy * grid + gx);
            let mut k = 0;
            for y in 0..patch {
                let dst = ((gy * patch + y) * size + gx * patch) * channels;
                let n = patch * channels;
                pixels[dst..dst + n].copy_from_slice(&row[k..k + n]);
                k += n;
            }
        }
    }
    pixels
}

/// Fixed 2-D sine-cosine position table, `grid*grid x dim`. Half the
/// channels encode the row, half the column.
pub fn sincos_2d(grid: usize, dim: usize) -> Tensor {
    assert!(dim % 4 == 0, "sin-cos position dim must be divisible by 4");
    let quarter = dim / 4;
    let mut out = Tensor::zeros(grid * grid, dim);
    for gy in 0..grid {
        for gx in 0..grid {
            let row = out.row_mut(gy * grid + gx);
            for (axis, pos) in [(0, gy as f32), (1, gx as f32)] {
                for i in 0..quarter {
                    let omega = 1.0 / 10000f32.powf(i as f32 / quarter as f32);
                    row[axis * 2 * quarter + i] = (pos * omega).sin();
                    row[axis * 2 * quarter + quarter + i] = (pos * omega).cos();
                }
            }
        }
    }
    out
}
