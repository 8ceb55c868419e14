//! Volumes, label maps, NIfTI IO and the preprocessing chain.
//!
//! Grids are stored row-major as `(z, y, x)`, where `x` is the NIfTI `i`
//! axis, `y` is `j` and `z` is `k`. That makes the in-memory order identical
//! to the on-disk (column-major `i, j, k`) order.

use std::path::{Path, PathBuf};

use ndarray::Array3;
use nifti::writer::WriterOptions;
use nifti::{IntoNdArray, NiftiHeader, NiftiObject, ReaderOptions};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub data: Vec<f32>,
    pub dims: [usize; 3],
    /// mm per voxel, `(z, y, x)`.
    pub spacing: [f64; 3],
    /// Voxel index of this grid inside the grid it was cropped from.
    pub origin_offset: [usize; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap {
    pub data: Vec<u8>,
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub num_classes: usize,
}

pub fn numel(dims: [usize; 3]) -> usize {
    dims[0] * dims[1] * dims[2]
}

#[inline]
pub fn idx(dims: [usize; 3], z: usize, y: usize, x: usize) -> usize {
    (z * dims[1] + y) * dims[2] + x
}

impl Volume {
    pub fn new(data: Vec<f32>, dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        ensure!(dims.iter().all(|&d| d > 0), Validation, "volume dims {dims:?} must be positive");
        ensure!(data.len() == numel(dims), Shape, "volume data has {} voxels, dims {dims:?}", data.len());
        ensure!(spacing.iter().all(|&s| s > 0.0 && s.is_finite()), Validation, "spacing {spacing:?} must be positive");
        Ok(Volume { data, dims, spacing, origin_offset: [0; 3] })
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> f32 {
        self.data[idx(self.dims, z, y, x)]
    }

    pub fn min(&self) -> f32 {
        self.data.iter().copied().fold(f32::INFINITY, f32::min)
    }
}

impl LabelMap {
    pub fn new(data: Vec<u8>, dims: [usize; 3], spacing: [f64; 3], num_classes: usize) -> Result<Self> {
        ensure!(data.len() == numel(dims), Shape, "label data has {} voxels, dims {dims:?}", data.len());
        if let Some(&bad) = data.iter().find(|&&v| v as usize >= num_classes) {
            return Err(Error::Validation(format!("label value {bad} outside [0, {}]", num_classes - 1)));
        }
        Ok(LabelMap { data, dims, spacing, num_classes })
    }

    pub fn get(&self, z: usize, y: usize, x: usize) -> u8 {
        self.data[idx(self.dims, z, y, x)]
    }

    /// Sorted distinct label values.
    pub fn present_classes(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        for &v in &self.data {
            seen[v as usize] = true;
        }
        (0..=255u8).filter(|&c| seen[c as usize]).collect()
    }
}

// ---------------------------------------------------------------- NIfTI IO

fn nifti_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Nifti { path: path.to_path_buf(), message: e.to_string() }
}

/// Reads a 3D NIfTI file as `f32`, returning data, dims `(z,y,x)`, spacing
/// `(z,y,x)` and the header for later writes.
pub fn read_nifti(path: &Path) -> Result<(Vec<f32>, [usize; 3], [f64; 3], NiftiHeader)> {
    if !path.exists() {
        return Err(Error::io(path, std::io::Error::from(std::io::ErrorKind::NotFound)));
    }
    let obj = ReaderOptions::new().read_file(path).map_err(|e| nifti_err(path, e))?;
    let header = obj.header().clone();
    let ndim = header.dim[0] as usize;
    ensure!((3..=4).contains(&ndim), Validation, "{}: expected a 3D volume, found {ndim} dims", path.display());
    if ndim == 4 && header.dim[4] > 1 {
        return Err(Error::Validation(format!("{}: 4D volumes are not supported", path.display())));
    }
    let (nx, ny, nz) = (header.dim[1] as usize, header.dim[2] as usize, header.dim[3] as usize);
    let pix = header.pixdim;
    let spacing = [pix[3] as f64, pix[2] as f64, pix[1] as f64];
    if !spacing.iter().all(|&s| s > 0.0 && s.is_finite()) {
        return Err(Error::Validation(format!("{}: spacing metadata absent or invalid ({spacing:?})", path.display())));
    }
    let arr = obj.into_volume().into_ndarray::<f32>().map_err(|e| nifti_err(path, e))?;
    let arr = if arr.ndim() == 4 { arr.index_axis_move(ndarray::Axis(3), 0) } else { arr };
    let arr = arr.into_dimensionality::<ndarray::Ix3>().map_err(|e| nifti_err(path, e))?;
    ensure!(arr.shape() == [nx, ny, nz], Shape, "{}: data shape {:?} disagrees with header", path.display(), arr.shape());
    // Reverse axes so logical order is (z, y, x); standard layout then matches our storage.
    let data: Vec<f32> = arr.reversed_axes().as_standard_layout().iter().copied().collect();
    Ok((data, [nz, ny, nx], spacing, header))
}

fn header_for(spacing: [f64; 3], reference: Option<&NiftiHeader>) -> NiftiHeader {
    let mut header = reference.cloned().unwrap_or_default();
    header.pixdim[1] = spacing[2] as f32;
    header.pixdim[2] = spacing[1] as f32;
    header.pixdim[3] = spacing[0] as f32;
    if reference.is_none() {
        header.pixdim[0] = 1.0;
        header.xyzt_units = 2;
    }
    header
}

macro_rules! writer {
    ($name:ident, $ty:ty, $doc:literal) => {
        #[doc = $doc]
        fn $name(path: &Path, data: &[$ty], dims: [usize; 3], spacing: [f64; 3], reference: Option<&NiftiHeader>) -> Result<()> {
            let header = header_for(spacing, reference);
            let arr = Array3::from_shape_vec((dims[0], dims[1], dims[2]), data.to_vec()).map_err(|e| nifti_err(path, e))?;
            let arr = arr.reversed_axes();
            WriterOptions::new(path).reference_header(&header).write_nifti(&arr).map_err(|e| nifti_err(path, e))
        }
    };
}

writer!(write_f32, f32, "Writes an `f32` grid.");
writer!(write_u8, u8, "Writes a `u8` grid.");

pub fn write_volume(path: &Path, v: &Volume, reference: Option<&NiftiHeader>) -> Result<()> {
    write_f32(path, &v.data, v.dims, v.spacing, reference)
}

pub fn write_labels(path: &Path, m: &LabelMap, reference: Option<&NiftiHeader>) -> Result<()> {
    write_u8(path, &m.data, m.dims, m.spacing, reference)
}

fn find_with_stem(dir: &Path, stem: &str) -> Option<PathBuf> {
    ["nii.gz", "nii"].iter().map(|ext| dir.join(format!("{stem}.{ext}"))).find(|p| p.exists())
}

/// Loads an intensity volume and, when a `mask.nii[.gz]` sits next to it,
/// its label map. `path` may be the image file or the subject directory.
pub fn load_volume(path: &Path, num_classes: usize) -> Result<(Volume, Option<LabelMap>)> {
    let image_path = if path.is_dir() {
        find_with_stem(path, "image")
            .ok_or_else(|| Error::io(path.join("image.nii.gz"), std::io::Error::from(std::io::ErrorKind::NotFound)))?
    } else {
        path.to_path_buf()
    };
    let (data, dims, spacing, _) = read_nifti(&image_path)?;
    let vol = Volume::new(data, dims, spacing)?;
    let dir = image_path.parent().unwrap_or(Path::new("."));
    let mask = match find_with_stem(dir, "mask") {
        Some(mp) if mp != image_path => Some(load_labels(&mp, num_classes, Some(dims))?),
        _ => None,
    };
    Ok((vol, mask))
}

/// Reads a label volume, checking every value is a class index and, when
/// given, that the grid matches `expect_dims`.
pub fn load_labels(path: &Path, num_classes: usize, expect_dims: Option<[usize; 3]>) -> Result<LabelMap> {
    let (md, dims, spacing, _) = read_nifti(path)?;
    if let Some(d) = expect_dims {
        ensure!(dims == d, Shape, "mask {} has dims {dims:?}, image has {d:?}", path.display());
    }
    let mut labels = Vec::with_capacity(md.len());
    for v in md {
        let r = v.round();
        if !(0.0..num_classes as f32).contains(&r) {
            return Err(Error::Validation(format!("{}: label value {v} outside [0, {}]", path.display(), num_classes - 1)));
        }
        labels.push(r as u8);
    }
    LabelMap::new(labels, dims, spacing, num_classes)
}

/// Reads the header of a NIfTI file, for writing outputs with the same geometry.
pub fn read_header(path: &Path) -> Result<NiftiHeader> {
    Ok(read_nifti(path)?.3)
}

// ------------------------------------------------------------- resampling

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Interp {
    Cubic,
    Nearest,
}

/// Keys cubic convolution kernel with a = -0.5 (Catmull-Rom).
fn keys(t: f64) -> f64 {
    let t = t.abs();
    if t <= 1.0 {
        1.5 * t * t * t - 2.5 * t * t + 1.0
    } else if t < 2.0 {
        -0.5 * t * t * t + 2.5 * t * t - 4.0 * t + 2.0
    } else {
        0.0
    }
}

fn nearest_src(o: usize, n_in: usize, n_out: usize) -> usize {
    (((o as f64 + 0.5) * n_in as f64 / n_out as f64).floor() as usize).min(n_in - 1)
}

fn cubic_taps(n_in: usize, n_out: usize) -> Vec<([usize; 4], [f32; 4])> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = (o as f64 + 0.5) * scale - 0.5;
            let i0 = src.floor();
            let t = src - i0;
            let mut idx = [0usize; 4];
            let mut w = [0f32; 4];
            for k in 0..4 {
                let p = i0 as i64 + k as i64 - 1;
                idx[k] = p.clamp(0, n_in as i64 - 1) as usize;
                w[k] = keys(t - (k as f64 - 1.0)) as f32;
            }
            (idx, w)
        })
        .collect()
}

/// Resamples one axis of a `(z, y, x)` grid to `n_out` samples.
fn resample_axis<T: Copy + Default + Into<f32> + FromF32>(data: &[T], dims: [usize; 3], axis: usize, n_out: usize, interp: Interp) -> Vec<T> {
    let n_in = dims[axis];
    let mut out_dims = dims;
    out_dims[axis] = n_out;
    if n_in == n_out {
        return data.to_vec();
    }
    let inner: usize = dims[axis + 1..].iter().product();
    let outer: usize = dims[..axis].iter().product();
    let mut out = vec![T::default(); numel(out_dims)];
    match interp {
        Interp::Nearest => {
            let src: Vec<usize> = (0..n_out).map(|o| nearest_src(o, n_in, n_out)).collect();
            for a in 0..outer {
                for (o, &s) in src.iter().enumerate() {
                    let d = (a * n_out + o) * inner;
                    let si = (a * n_in + s) * inner;
                    out[d..d + inner].copy_from_slice(&data[si..si + inner]);
                }
            }
        }
        Interp::Cubic => {
            let taps = cubic_taps(n_in, n_out);
            for a in 0..outer {
                for (o, (ix, w)) in taps.iter().enumerate() {
                    let d = (a * n_out + o) * inner;
                    for i in 0..inner {
                        let mut acc = 0f32;
                        for k in 0..4 {
                            acc += w[k] * data[(a * n_in + ix[k]) * inner + i].into();
                        }
                        out[d + i] = T::from_f32(acc);
                    }
                }
            }
        }
    }
    out
}

pub trait FromF32 {
    fn from_f32(v: f32) -> Self;
}

impl FromF32 for f32 {
    fn from_f32(v: f32) -> Self {
        v
    }
}

impl FromF32 for u8 {
    fn from_f32(v: f32) -> Self {
        v.round().clamp(0.0, 255.0) as u8
    }
}

/// Resamples a grid to an explicit shape, axis by axis.
pub fn resample_to_shape<T: Copy + Default + Into<f32> + FromF32>(data: &[T], dims: [usize; 3], out: [usize; 3], interp: Interp) -> Vec<T> {
    let mut cur = data.to_vec();
    let mut cd = dims;
    for axis in 0..3 {
        if cd[axis] != out[axis] {
            cur = resample_axis(&cur, cd, axis, out[axis], interp);
            cd[axis] = out[axis];
        }
    }
    cur
}

/// Output grid size for a spacing change: `round(n * in / out)` per axis.
pub fn resampled_dims(dims: [usize; 3], spacing: [f64; 3], target: [f64; 3]) -> Result<[usize; 3]> {
    ensure!(target.iter().all(|&s| s > 0.0), Validation, "target spacing {target:?} must be positive");
    let mut out = [0; 3];
    for a in 0..3 {
        out[a] = (dims[a] as f64 * spacing[a] / target[a]).round() as usize;
        ensure!(out[a] > 0, Validation, "resampling {dims:?} @ {spacing:?} to {target:?} gives an empty axis");
    }
    Ok(out)
}

pub fn resample(v: &Volume, target: [f64; 3]) -> Result<Volume> {
    let out = resampled_dims(v.dims, v.spacing, target)?;
    if out == v.dims && v.spacing == target {
        return Ok(v.clone());
    }
    Ok(Volume { data: resample_to_shape(&v.data, v.dims, out, Interp::Cubic), dims: out, spacing: target, origin_offset: [0; 3] })
}

pub fn resample_labels(m: &LabelMap, target: [f64; 3]) -> Result<LabelMap> {
    let out = resampled_dims(m.dims, m.spacing, target)?;
    Ok(LabelMap {
        data: resample_to_shape(&m.data, m.dims, out, Interp::Nearest),
        dims: out,
        spacing: target,
        num_classes: m.num_classes,
    })
}

// ------------------------------------------------------- crop / normalise

fn crop<T: Copy>(data: &[T], dims: [usize; 3], lo: [usize; 3], size: [usize; 3]) -> Vec<T> {
    let mut out = Vec::with_capacity(numel(size));
    for z in lo[0]..lo[0] + size[0] {
        for y in lo[1]..lo[1] + size[1] {
            let s = idx(dims, z, y, lo[2]);
            out.extend_from_slice(&data[s..s + size[2]]);
        }
    }
    out
}

/// Crops to the bounding box of voxels with intensity > 0.
pub fn remove_zero_background(v: &Volume, m: Option<&LabelMap>) -> Result<(Volume, Option<LabelMap>, [usize; 3])> {
    let mut lo = v.dims;
    let mut hi = [0usize; 3];
    let mut any = false;
    for z in 0..v.dims[0] {
        for y in 0..v.dims[1] {
            for x in 0..v.dims[2] {
                if v.get(z, y, x) > 0.0 {
                    any = true;
                    for (a, c) in [z, y, x].into_iter().enumerate() {
                        lo[a] = lo[a].min(c);
                        hi[a] = hi[a].max(c);
                    }
                }
            }
        }
    }
    if !any {
        return Err(Error::Validation("volume has no voxel above zero".into()));
    }
    let size = [hi[0] - lo[0] + 1, hi[1] - lo[1] + 1, hi[2] - lo[2] + 1];
    let out = Volume { data: crop(&v.data, v.dims, lo, size), dims: size, spacing: v.spacing, origin_offset: lo };
    let mask = match m {
        Some(m) => {
            ensure!(m.dims == v.dims, Shape, "mask dims {:?} differ from volume dims {:?}", m.dims, v.dims);
            Some(LabelMap { data: crop(&m.data, m.dims, lo, size), dims: size, spacing: m.spacing, num_classes: m.num_classes })
        }
        None => None,
    };
    Ok((out, mask, lo))
}

pub const ZSCORE_EPS: f64 = 1e-8;

/// `(x - mean) / max(std, 1e-8)` over the whole volume.
pub fn zscore_normalize(v: &Volume) -> Volume {
    let n = v.data.len() as f64;
    let mean = v.data.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = v.data.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt().max(ZSCORE_EPS);
    let data = v.data.iter().map(|&x| ((x as f64 - mean) / sd) as f32).collect();
    Volume { data, ..v.clone() }
}

/// How a volume was fitted to the fixed network grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitRecord {
    /// In-plane size before fitting.
    pub input_dims: [usize; 3],
    /// In-plane size after the optional shrink, before padding.
    pub resized_dims: [usize; 3],
    /// Padding added before each axis.
    pub pad_before: [usize; 3],
    pub pad_after: [usize; 3],
    pub pad_value: f32,
}

fn pad<T: Copy>(data: &[T], dims: [usize; 3], before: [usize; 3], out: [usize; 3], fill: T) -> Vec<T> {
    let mut res = vec![fill; numel(out)];
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            let s = idx(dims, z, y, 0);
            let d = idx(out, z + before[0], y + before[1], before[2]);
            res[d..d + dims[2]].copy_from_slice(&data[s..s + dims[2]]);
        }
    }
    res
}

/// Fits the in-plane grid to exactly `size` (shrinking uniformly when larger,
/// then centre-padding with the volume minimum) and pads z up to `min_slices`.
pub fn fit_to_grid(v: &Volume, m: Option<&LabelMap>, size: [usize; 2], min_slices: usize) -> (Volume, Option<LabelMap>, FitRecord) {
    let [nz, ny, nx] = v.dims;
    let scale = (size[0] as f64 / ny as f64).min(size[1] as f64 / nx as f64).min(1.0);
    let resized = if scale < 1.0 {
        [nz, ((ny as f64 * scale).round() as usize).clamp(1, size[0]), ((nx as f64 * scale).round() as usize).clamp(1, size[1])]
    } else {
        v.dims
    };
    let img = resample_to_shape(&v.data, v.dims, resized, Interp::Cubic);
    let lab = m.map(|m| resample_to_shape(&m.data, m.dims, resized, Interp::Nearest));
    let out = [nz.max(min_slices), size[0], size[1]];
    let before = [0, (out[1] - resized[1]) / 2, (out[2] - resized[2]) / 2];
    let after = [out[0] - resized[0], out[1] - resized[1] - before[1], out[2] - resized[2] - before[2]];
    let pad_value = v.min();
    let vol = Volume { data: pad(&img, resized, before, out, pad_value), dims: out, spacing: v.spacing, origin_offset: [0; 3] };
    let mask = lab.map(|l| {
        let m = m.unwrap();
        LabelMap { data: pad(&l, resized, before, out, 0u8), dims: out, spacing: m.spacing, num_classes: m.num_classes }
    });
    let rec = FitRecord { input_dims: v.dims, resized_dims: resized, pad_before: before, pad_after: after, pad_value };
    (vol, mask, rec)
}

/// Everything needed to map a prediction back to the raw grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub subject: String,
    pub raw_dims: [usize; 3],
    pub raw_spacing: [f64; 3],
    pub resampled_dims: [usize; 3],
    pub target_spacing: [f64; 3],
    pub crop_offset: [usize; 3],
    pub fit: FitRecord,
    pub intensity_mean: f64,
    pub intensity_std: f64,
}

/// Output of the preprocessing chain for one subject.
#[derive(Clone, Debug)]
pub struct Preprocessed {
    pub volume: Volume,
    pub labels: Option<LabelMap>,
    pub provenance: Provenance,
}

/// resample -> remove zero background -> z-score -> fit to grid.
pub fn preprocess(
    subject: &str,
    v: &Volume,
    m: Option<&LabelMap>,
    cfg: &crate::config::PreprocessConfig,
) -> Result<Preprocessed> {
    let target = cfg.target_spacing;
    let rv = resample(v, target)?;
    let rm = m.map(|m| resample_labels(m, target)).transpose()?;
    let (cv, cm, offset) = remove_zero_background(&rv, rm.as_ref())?;
    let n = cv.data.len() as f64;
    let mean = cv.data.iter().map(|&x| x as f64).sum::<f64>() / n;
    let sd = (cv.data.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n).sqrt();
    let zv = zscore_normalize(&cv);
    let (fv, fm, fit) = fit_to_grid(&zv, cm.as_ref(), cfg.inplane_size, cfg.min_slices);
    let provenance = Provenance {
        subject: subject.to_string(),
        raw_dims: v.dims,
        raw_spacing: v.spacing,
        resampled_dims: rv.dims,
        target_spacing: target,
        crop_offset: offset,
        fit,
        intensity_mean: mean,
        intensity_std: sd,
    };
    Ok(Preprocessed { volume: fv, labels: fm, provenance })
}

fn invert_grid<T: Copy + Default + Into<f32> + FromF32>(data: &[T], dims: [usize; 3], prov: &Provenance) -> Result<Vec<T>> {
    let fit = &prov.fit;
    let expected = [
        fit.resized_dims[0] + fit.pad_before[0] + fit.pad_after[0],
        fit.resized_dims[1] + fit.pad_before[1] + fit.pad_after[1],
        fit.resized_dims[2] + fit.pad_before[2] + fit.pad_after[2],
    ];
    ensure!(dims == expected, Shape, "prediction dims {dims:?}, provenance expects {expected:?}");
    let unpadded = crop(data, dims, fit.pad_before, fit.resized_dims);
    let unshrunk = resample_to_shape(&unpadded, fit.resized_dims, fit.input_dims, Interp::Nearest);
    let mut full = vec![T::default(); numel(prov.resampled_dims)];
    let d = fit.input_dims;
    let o = prov.crop_offset;
    for z in 0..d[0] {
        for y in 0..d[1] {
            let s = idx(d, z, y, 0);
            let t = idx(prov.resampled_dims, z + o[0], y + o[1], o[2]);
            full[t..t + d[2]].copy_from_slice(&unshrunk[s..s + d[2]]);
        }
    }
    Ok(resample_to_shape(&full, prov.resampled_dims, prov.raw_dims, Interp::Nearest))
}

/// Maps a label map from the preprocessed grid back to the raw grid:
/// un-pad, un-shrink, un-crop, then nearest resampling to the raw shape.
pub fn invert_labels(pred: &LabelMap, prov: &Provenance) -> Result<LabelMap> {
    let raw = invert_grid(&pred.data, pred.dims, prov)?;
    LabelMap::new(raw, prov.raw_dims, prov.raw_spacing, pred.num_classes)
}

/// Same mapping for one probability channel; voxels cropped away as
/// background get 0.
pub fn invert_channel(prob: &[f32], dims: [usize; 3], prov: &Provenance) -> Result<Volume> {
    Volume::new(invert_grid(prob, dims, prov)?, prov.raw_dims, prov.raw_spacing)
}

// -------------------------------------------------------------- triplets

/// Three adjacent slices `(z-1, z, z+1)` downsampled once in-plane.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceTriplet {
    pub subject: String,
    pub z: usize,
    /// `(3, h, w)` row-major.
    pub channels: Vec<f32>,
    pub size: [usize; 2],
}

fn slice(v: &Volume, z: usize) -> &[f32] {
    let n = v.dims[1] * v.dims[2];
    &v.data[z * n..(z + 1) * n]
}

/// In-plane half-resolution size.
pub fn half_size(dims: [usize; 3]) -> [usize; 2] {
    [(dims[1] / 2).max(1), (dims[2] / 2).max(1)]
}

/// One triplet per slice; edge slices are replicated at the boundaries.
pub fn make_slice_triplets(subject: &str, v: &Volume) -> Vec<SliceTriplet> {
    let [nz, ny, nx] = v.dims;
    let [h, w] = half_size(v.dims);
    let down: Vec<Vec<f32>> =
        (0..nz).map(|z| resample_to_shape(slice(v, z), [1, ny, nx], [1, h, w], Interp::Cubic)).collect();
    (0..nz)
        .map(|z| {
            let zs = [z.saturating_sub(1), z, (z + 1).min(nz - 1)];
            let mut channels = Vec::with_capacity(3 * h * w);
            for &s in &zs {
                channels.extend_from_slice(&down[s]);
            }
            SliceTriplet { subject: subject.to_string(), z, channels, size: [h, w] }
        })
        .collect()
}

/// Nearest-neighbour half-resolution labels of slice `z`.
pub fn half_res_labels(m: &LabelMap, z: usize) -> Vec<u8> {
    let [_, ny, nx] = m.dims;
    let [h, w] = half_size(m.dims);
    let n = ny * nx;
    resample_to_shape(&m.data[z * n..(z + 1) * n], [1, ny, nx], [1, h, w], Interp::Nearest)
}
