//! Regular-grid tiling, overlap-averaged stitching and fold ensembling.

use sshs_tensor::Tensor;

use crate::bridge::PatchSpec;
use crate::error::{Error, Result};

/// Origins `0, s, 2s, ...` with the last window flush to the end.
pub fn axis_origins(len: usize, patch: usize, stride: usize) -> Result<Vec<usize>> {
    if patch == 0 || stride == 0 || len < patch {
        return Err(Error::Shape(format!("cannot tile length {len} with patch {patch}, stride {stride}")));
    }
    let mut out = Vec::new();
    let mut o = 0;
    while o + patch < len {
        out.push(o);
        o += stride;
    }
    out.push(len - patch);
    out.dedup();
    Ok(out)
}

/// Grid of patches covering `dims`, z-major.
pub fn tile_volume(dims: [usize; 3], patch: [usize; 3], stride: [usize; 3]) -> Result<Vec<PatchSpec>> {
    let zs = axis_origins(dims[0], patch[0], stride[0])?;
    let ys = axis_origins(dims[1], patch[1], stride[1])?;
    let xs = axis_origins(dims[2], patch[2], stride[2])?;
    let mut plan = Vec::with_capacity(zs.len() * ys.len() * xs.len());
    for &z in &zs {
        for &y in &ys {
            for &x in &xs {
                plan.push(PatchSpec { origin: [z, y, x], size: patch });
            }
        }
    }
    Ok(plan)
}

/// Streaming accumulator: sums `(C, Z, h, w)` blocks and divides by coverage.
pub struct Stitcher {
    channels: usize,
    dims: [usize; 3],
    sum: Vec<f64>,
    count: Vec<u32>,
}

impl Stitcher {
    pub fn new(channels: usize, dims: [usize; 3]) -> Self {
        let n = dims.iter().product::<usize>();
        Stitcher { channels, dims, sum: vec![0.0; channels * n], count: vec![0; n] }
    }

    pub fn add(&mut self, spec: &PatchSpec, block: &Tensor<f32>) -> Result<()> {
        let [d, h, w] = spec.size;
        if block.shape() != [self.channels, d, h, w] || !spec.fits(self.dims) {
            return Err(Error::Shape(format!("block {:?} for patch {spec:?} in volume {:?}", block.shape(), self.dims)));
        }
        let [_, vy, vx] = self.dims;
        let n = self.count.len();
        let [z0, y0, x0] = spec.origin;
        let src = block.data();
        for z in 0..d {
            for y in 0..h {
                let row = ((z + z0) * vy + y + y0) * vx + x0;
                for x in 0..w {
                    self.count[row + x] += 1;
                }
                for c in 0..self.channels {
                    let s = ((c * d + z) * h + y) * w;
                    let dst = &mut self.sum[c * n + row..c * n + row + w];
                    for (acc, &v) in dst.iter_mut().zip(&src[s..s + w]) {
                        *acc += v as f64;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn coverage(&self) -> &[u32] {
        &self.count
    }

    /// `(C, Z, Y, X)` averages; fails if any voxel is uncovered.
    pub fn finish(self) -> Result<Tensor<f32>> {
        if let Some(i) = self.count.iter().position(|&c| c == 0) {
            return Err(Error::Validation(format!("voxel {i} not covered by any patch")));
        }
        let n = self.count.len();
        let data = self.sum.iter().enumerate().map(|(i, &s)| (s / self.count[i % n] as f64) as f32).collect();
        let [z, y, x] = self.dims;
        Ok(Tensor::from_vec(vec![self.channels, z, y, x], data))
    }
}

pub fn stitch(plan: &[PatchSpec], blocks: &[Tensor<f32>], channels: usize, dims: [usize; 3]) -> Result<Tensor<f32>> {
    if plan.len() != blocks.len() {
        return Err(Error::Validation(format!("{} patches but {} blocks", plan.len(), blocks.len())));
    }
    let mut s = Stitcher::new(channels, dims);
    for (p, b) in plan.iter().zip(blocks) {
        s.add(p, b)?;
    }
    s.finish()
}

/// Mean probability over models, then argmax over channels.
pub fn ensemble_average(probs: &[Tensor<f32>]) -> Result<(Tensor<f32>, Vec<u8>)> {
    let first = probs.first().ok_or_else(|| Error::Validation("no probability volumes to ensemble".into()))?;
    if probs.iter().any(|p| p.shape() != first.shape()) {
        return Err(Error::Shape("ensemble members have different grids".into()));
    }
    let k = probs.len() as f64;
    let mut acc = vec![0.0f64; first.numel()];
    for p in probs {
        for (a, &v) in acc.iter_mut().zip(p.data()) {
            *a += v as f64;
        }
    }
    let mean = Tensor::from_vec(first.shape().to_vec(), acc.into_iter().map(|v| (v / k) as f32).collect());
    let labels = mean.argmax_axis(0).1.into_iter().map(|l| l as u8).collect();
    Ok((mean, labels))
}
