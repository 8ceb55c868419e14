//! Synthetic spine-like phantoms: ellipsoid vertebral bodies alternating
//! with slab discs along the cranio-caudal (y) axis.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::pipeline::{Manifest, SubjectEntry};
use crate::volume::{idx, write_labels, write_volume, LabelMap, Volume};

pub const PHANTOM_CLASSES: usize = 8;

#[derive(Clone, Debug)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    /// Zero-intensity margin around the body in-plane.
    pub border: usize,
    pub noise: f64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec { dims: [12, 224, 224], spacing: [4.4, 0.68, 0.68], border: 10, noise: 25.0 }
    }
}

const VB_MEAN: [f64; 4] = [420.0, 380.0, 340.0, 300.0];
const IVD_MEAN: [f64; 3] = [190.0, 230.0, 270.0];
const TISSUE_MEAN: f64 = 110.0;

/// One phantom. Labels: 0 background, 1..=4 vertebral bodies top to
/// bottom, 5..=7 the discs between them.
pub fn generate(spec: &PhantomSpec, seed: u64) -> (Volume, LabelMap) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [dz, dy, dx] = spec.dims;
    let n = dz * dy * dx;
    let mut labels = vec![0u8; n];
    let jitter = |rng: &mut ChaCha8Rng, s: f64| rng.random_range(1.0 - s..1.0 + s);
    let zc = (dz as f64 - 1.0) / 2.0 + rng.random_range(-0.5..0.5);
    let xc = dx as f64 / 2.0 + rng.random_range(-12.0..12.0);
    let tilt = rng.random_range(-0.15..0.15);
    let vb_h = 22.0 * jitter(&mut rng, 0.1);
    let ivd_h = 8.0 * jitter(&mut rng, 0.15);
    let total = 4.0 * vb_h + 3.0 * ivd_h;
    let mut y = (dy as f64 - total) / 2.0 + rng.random_range(-15.0..15.0);
    let mut parts = Vec::new();
    for k in 0..7 {
        let h = if k % 2 == 0 { vb_h } else { ivd_h };
        let class = if k % 2 == 0 { 1 + k / 2 } else { 5 + k / 2 };
        parts.push((class as u8, y + h / 2.0, h / 2.0));
        y += h;
    }
    let rz = dz as f64 / 2.0 * jitter(&mut rng, 0.1) - 0.5;
    let rx_vb = 22.0 * jitter(&mut rng, 0.1);
    let rx_ivd = 19.0 * jitter(&mut rng, 0.1);
    for z in 0..dz {
        for yy in 0..dy {
            for x in 0..dx {
                let fz = (z as f64 - zc) / rz;
                for &(class, yc, ry) in &parts {
                    let shift = tilt * (yy as f64 - dy as f64 / 2.0);
                    let fx = x as f64 - xc - shift;
                    let fy = yy as f64 - yc;
                    let inside = if class <= 4 {
                        fz * fz + (fy / ry).powi(2) + (fx / rx_vb).powi(2) <= 1.0
                    } else {
                        fy.abs() <= ry && fz * fz + (fx / rx_ivd).powi(2) <= 1.0
                    };
                    if inside {
                        labels[idx(spec.dims, z, yy, x)] = class;
                    }
                }
            }
        }
    }
    let scale = jitter(&mut rng, 0.05);
    let noise = Normal::new(0.0, spec.noise).expect("valid noise");
    let b = spec.border;
    let mut data = vec![0f32; n];
    for z in 0..dz {
        for yy in b..dy - b {
            for x in b..dx - b {
                let i = idx(spec.dims, z, yy, x);
                let mean = match labels[i] {
                    0 => TISSUE_MEAN,
                    c @ 1..=4 => VB_MEAN[c as usize - 1],
                    c => IVD_MEAN[c as usize - 5],
                };
                data[i] = ((mean * scale + noise.sample(&mut rng)).max(1.0)) as f32;
            }
        }
    }
    let v = Volume { data, dims: spec.dims, spacing: spec.spacing, origin_offset: [0; 3] };
    let m = LabelMap { data: labels, dims: spec.dims, spacing: spec.spacing, num_classes: PHANTOM_CLASSES };
    (v, m)
}

/// Writes `labeled` + `unlabeled` phantoms as NIfTI under `root` with a
/// manifest at `root/manifest.json`.
pub fn write_dataset(root: &Path, labeled: usize, unlabeled: usize, seed: u64) -> Result<Manifest> {
    let spec = PhantomSpec::default();
    let mut manifest = Manifest::default();
    for i in 0..labeled + unlabeled {
        let (v, m) = generate(&spec, seed.wrapping_mul(1000).wrapping_add(i as u64));
        let kind = if i < labeled { "labeled" } else { "unlabeled" };
        let id = format!("phantom{i:03}");
        let dir = root.join(kind).join(&id);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write_volume(&dir.join("image.nii.gz"), &v, None)?;
        let mut entry = SubjectEntry { image: PathBuf::from(kind).join(&id).join("image.nii.gz"), id, mask: None };
        if i < labeled {
            write_labels(&dir.join("mask.nii.gz"), &m, None)?;
            entry.mask = Some(entry.image.with_file_name("mask.nii.gz"));
            manifest.labeled.push(entry);
        } else {
            manifest.unlabeled.push(entry);
        }
    }
    manifest.save(&root.join("manifest.json"))?;
    Ok(manifest)
}
