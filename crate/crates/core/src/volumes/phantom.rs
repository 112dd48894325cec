//! Synthetic phantom volumes with known lung/infection geometry.
//!
//! A phantom is a body ellipsoid containing two lung ellipsoids; infection
//! is a union of irregular blobs grown around random seed points inside the
//! lung until a target fraction of the lung is covered. Voxel selection is
//! by rank over a jittered distance field, so the realized involvement
//! fraction matches the target to within one voxel.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng;
use crate::volumes::{
    severity_from_involvement, voxel_count, CtVolume, Dims3, MaskKind, MaskVolume, Severity,
};

/// Generator parameters. Intensities are in normalized [0,1] units:
/// air 0.0, lung tissue 0.2, infection 0.55, body 0.8, plus Gaussian noise
/// inside the body.
#[derive(Debug, Clone)]
pub struct PhantomSpec {
    pub shape: Dims3,
    pub spacing: (f32, f32, f32),
    /// Target infected fraction of the lung, in [0,1].
    pub target_involvement: f64,
    /// Number of infection seed points (blobs).
    pub blob_count: usize,
    /// Std-dev of intensity noise inside the body.
    pub noise: f32,
    /// Relative jitter applied to lung geometry (semi-axes and centers).
    pub geometry_jitter: f64,
    pub seed: u64,
    pub id: String,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            shape: (32, 64, 64),
            spacing: (5.0, 1.0, 1.0),
            target_involvement: 0.0,
            blob_count: 3,
            noise: 0.05,
            geometry_jitter: 0.10,
            seed: 0,
            id: "phantom".into(),
        }
    }
}

/// A generated phantom: normalized volume, ground-truth masks, label, and
/// the realized involvement fraction the label was derived from.
#[derive(Debug, Clone)]
pub struct Phantom {
    pub volume: CtVolume,
    pub lung: MaskVolume,
    pub infection: MaskVolume,
    pub severity: Severity,
    pub involvement: f64,
}

struct Ellipsoid {
    center: [f64; 3],
    semi: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, z: f64, y: f64, x: f64) -> bool {
        let dz = (z - self.center[0]) / self.semi[0];
        let dy = (y - self.center[1]) / self.semi[1];
        let dx = (x - self.center[2]) / self.semi[2];
        dz * dz + dy * dy + dx * dx <= 1.0
    }
}

fn jittered(base: f64, jitter: f64, rng: &mut impl Rng) -> f64 {
    base * (1.0 + rng.gen_range(-jitter..=jitter))
}

pub fn generate_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    if !(0.0..=1.0).contains(&spec.target_involvement) {
        return Err(Error::validation(format!(
            "target involvement {} outside [0,1]",
            spec.target_involvement
        )));
    }
    if spec.shape.0 == 0 || spec.shape.1 == 0 || spec.shape.2 == 0 {
        return Err(Error::validation(format!("phantom shape has zero dim: {:?}", spec.shape)));
    }
    let (t, h, w) = spec.shape;
    let n = voxel_count(spec.shape);
    let mut geom_rng = rng::stream(spec.seed, "phantom-geometry", 0);

    let td = t as f64;
    let hd = h as f64;
    let wd = w as f64;
    let j = spec.geometry_jitter;
    let body = Ellipsoid {
        center: [td * 0.5, hd * 0.5, wd * 0.5],
        semi: [td * 0.49, hd * 0.42, wd * 0.46],
    };
    let mut lungs = Vec::with_capacity(2);
    for side in [-1.0f64, 1.0] {
        lungs.push(Ellipsoid {
            center: [
                td * jittered(0.5, j * 0.4, &mut geom_rng),
                hd * jittered(0.5, j * 0.4, &mut geom_rng),
                wd * (0.5 + side * jittered(0.21, j, &mut geom_rng)),
            ],
            semi: [
                td * jittered(0.40, j, &mut geom_rng),
                hd * jittered(0.30, j, &mut geom_rng),
                wd * jittered(0.155, j, &mut geom_rng),
            ],
        });
    }

    let mut lung_mask = vec![0u8; n];
    let mut body_mask = vec![0u8; n];
    let mut lung_voxels = Vec::new();
    for z in 0..t {
        for y in 0..h {
            for x in 0..w {
                let idx = (z * h + y) * w + x;
                let (zf, yf, xf) = (z as f64 + 0.5, y as f64 + 0.5, x as f64 + 0.5);
                if body.contains(zf, yf, xf) {
                    body_mask[idx] = 1;
                    if lungs.iter().any(|l| l.contains(zf, yf, xf)) {
                        lung_mask[idx] = 1;
                        lung_voxels.push(idx);
                    }
                }
            }
        }
    }
    if lung_voxels.is_empty() {
        return Err(Error::validation(
            "phantom geometry produced an empty lung; target fraction infeasible".to_string(),
        ));
    }

    // Infection: rank-select lung voxels by jittered distance to blob seeds.
    let target = (spec.target_involvement * lung_voxels.len() as f64).round() as usize;
    let mut infection_mask = vec![0u8; n];
    if target > 0 {
        let mut blob_rng = rng::stream(spec.seed, "phantom-blobs", 0);
        let k = spec.blob_count.max(1);
        let mut seeds = Vec::with_capacity(k);
        for _ in 0..k {
            let idx = lung_voxels[blob_rng.gen_range(0..lung_voxels.len())];
            let z = idx / (h * w);
            let y = (idx / w) % h;
            let x = idx % w;
            // per-blob anisotropy and relative size
            let scale = [
                blob_rng.gen_range(0.6..1.6),
                blob_rng.gen_range(0.6..1.6),
                blob_rng.gen_range(0.6..1.6),
            ];
            let weight = blob_rng.gen_range(0.7..1.3);
            seeds.push((z as f64, y as f64, x as f64, scale, weight));
        }
        let surface_noise = Normal::new(0.0, 0.35).unwrap();
        let mut scored: Vec<(f64, usize)> = lung_voxels
            .iter()
            .map(|&idx| {
                let z = (idx / (h * w)) as f64;
                let y = ((idx / w) % h) as f64;
                let x = (idx % w) as f64;
                let mut best = f64::INFINITY;
                for (sz, sy, sx, scale, weight) in &seeds {
                    // anisotropic distance, z axis in slice units scaled to match in-plane
                    let dz = (z - sz) * (hd / td) / scale[0];
                    let dy = (y - sy) / scale[1];
                    let dx = (x - sx) / scale[2];
                    let d = (dz * dz + dy * dy + dx * dx).sqrt() / weight;
                    best = best.min(d);
                }
                (best + surface_noise.sample(&mut blob_rng), idx)
            })
            .collect();
        let cut = target.min(scored.len());
        scored.select_nth_unstable_by(cut - 1, |a, b| a.0.total_cmp(&b.0));
        for (_, idx) in &scored[..cut] {
            infection_mask[*idx] = 1;
        }
    }
    let realized_count = infection_mask.iter().filter(|v| **v == 1).count();
    let involvement = realized_count as f64 / lung_voxels.len() as f64;
    let severity = severity_from_involvement(involvement)?;

    // Intensities with noise inside the body, clean air outside.
    let mut noise_rng = rng::stream(spec.seed, "phantom-noise", 0);
    let gauss = Normal::new(0.0f32, spec.noise.max(0.0)).unwrap();
    let mut data = vec![0.0f32; n];
    for idx in 0..n {
        if body_mask[idx] == 1 {
            let base = if infection_mask[idx] == 1 {
                0.55
            } else if lung_mask[idx] == 1 {
                0.2
            } else {
                0.8
            };
            data[idx] = (base + gauss.sample(&mut noise_rng)).clamp(0.0, 1.0);
        }
    }

    Ok(Phantom {
        volume: CtVolume::new(data, spec.shape, spec.spacing, true, spec.id.clone())?,
        lung: MaskVolume::new(lung_mask, spec.shape, MaskKind::Lung)?,
        infection: MaskVolume::new(infection_mask, spec.shape, MaskKind::Infection)?,
        severity,
        involvement,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_target_gives_empty_infection_and_mild() {
        let spec = PhantomSpec { target_involvement: 0.0, seed: 3, ..Default::default() };
        let p = generate_phantom(&spec).unwrap();
        assert_eq!(p.infection.count_ones(), 0);
        assert_eq!(p.severity, Severity::Mild);
        assert_eq!(p.involvement, 0.0);
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let spec = PhantomSpec { target_involvement: 0.4, seed: 11, ..Default::default() };
        let a = generate_phantom(&spec).unwrap();
        let b = generate_phantom(&spec).unwrap();
        assert_eq!(a.volume.data, b.volume.data);
        assert_eq!(a.lung.data, b.lung.data);
        assert_eq!(a.infection.data, b.infection.data);
        assert_eq!(a.severity, b.severity);
    }

    #[test]
    fn realized_fraction_tracks_target() {
        // voxel-count oracle: recount mask voxels independently
        let spec = PhantomSpec { target_involvement: 0.6, seed: 21, ..Default::default() };
        let p = generate_phantom(&spec).unwrap();
        let inf = p.infection.data.iter().filter(|v| **v == 1).count() as f64;
        let lung = p.lung.data.iter().filter(|v| **v == 1).count() as f64;
        let f = inf / lung;
        assert!((0.58..=0.62).contains(&f), "realized {f}");
        assert_eq!(p.severity, Severity::Severe);
        assert!((p.involvement - f).abs() < 1e-12);
    }

    #[test]
    fn infection_is_subset_of_lung_and_label_matches_fraction() {
        for seed in 0..20u64 {
            let spec = PhantomSpec {
                target_involvement: (seed as f64 % 10.0) / 10.0,
                seed,
                shape: (12, 24, 24),
                ..Default::default()
            };
            let p = generate_phantom(&spec).unwrap();
            for (i, inf) in p.infection.data.iter().enumerate() {
                if *inf == 1 {
                    assert_eq!(p.lung.data[i], 1, "infection outside lung at {i}");
                }
            }
            assert_eq!(p.severity, severity_from_involvement(p.involvement).unwrap());
        }
    }

    #[test]
    fn rejects_bad_targets() {
        let spec = PhantomSpec { target_involvement: 1.2, ..Default::default() };
        assert!(generate_phantom(&spec).is_err());
    }

    #[test]
    fn infected_voxels_are_brighter_than_lung_on_average() {
        let spec = PhantomSpec { target_involvement: 0.5, seed: 5, ..Default::default() };
        let p = generate_phantom(&spec).unwrap();
        let mean_of = |sel: &dyn Fn(usize) -> bool| {
            let mut s = 0.0f64;
            let mut c = 0usize;
            for i in 0..p.volume.data.len() {
                if sel(i) {
                    s += p.volume.data[i] as f64;
                    c += 1;
                }
            }
            s / c as f64
        };
        let inf = mean_of(&|i| p.infection.data[i] == 1);
        let lung_bg = mean_of(&|i| p.lung.data[i] == 1 && p.infection.data[i] == 0);
        assert!(inf > lung_bg + 0.2, "infection {inf} vs lung {lung_bg}");
    }
}
