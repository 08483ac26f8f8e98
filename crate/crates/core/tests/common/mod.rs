//! Brute-force oracles shared by the integration tests. Each one is written
//! from the definitions alone and shares no code with the library.

#![allow(dead_code)]

use esoseg_core::{BinaryMask, Geometry};
use rand::Rng;

/// Spacings whose products and squares are exact in f64, so distance sums
/// do not depend on evaluation order.
pub const EXACT_SPACINGS: [[f64; 3]; 4] = [[1.0, 1.0, 3.0], [1.0, 1.0, 1.0], [0.5, 1.25, 2.0], [0.75, 0.75, 2.5]];

pub fn random_geometry<R: Rng>(rng: &mut R, max_dim: usize) -> Geometry {
    let dims = [
        rng.random_range(1..=max_dim),
        rng.random_range(1..=max_dim),
        rng.random_range(1..=max_dim),
    ];
    let spacing = EXACT_SPACINGS[rng.random_range(0..EXACT_SPACINGS.len())];
    Geometry::new(dims, spacing, [0.0; 3]).unwrap()
}

/// Salt noise of random density.
pub fn random_noise<R: Rng>(rng: &mut R, geom: Geometry) -> BinaryMask {
    let density = rng.random_range(0.02..0.5);
    BinaryMask::new(geom, (0..geom.len()).map(|_| rng.random_bool(density)).collect()).unwrap()
}

/// Noise or blobs with equal odds, never empty.
pub fn random_mask<R: Rng>(rng: &mut R, geom: Geometry) -> BinaryMask {
    loop {
        let m = if rng.random_bool(0.5) {
            random_noise(rng, geom)
        } else {
            random_blobs(rng, geom)
        };
        if m.voxels().iter().any(|&v| v) {
            return m;
        }
    }
}

/// Random blobs: a few boxes, so surfaces are not pure noise.
pub fn random_blobs<R: Rng>(rng: &mut R, geom: Geometry) -> BinaryMask {
    let [nx, ny, nz] = geom.dims;
    let mut v = vec![false; geom.len()];
    for _ in 0..rng.random_range(1..4) {
        let lo = [
            rng.random_range(0..nx),
            rng.random_range(0..ny),
            rng.random_range(0..nz),
        ];
        let hi = [
            rng.random_range(lo[0]..nx) + 1,
            rng.random_range(lo[1]..ny) + 1,
            rng.random_range(lo[2]..nz) + 1,
        ];
        for k in lo[2]..hi[2] {
            for j in lo[1]..hi[1] {
                for i in lo[0]..hi[0] {
                    v[i + nx * (j + ny * k)] = true;
                }
            }
        }
    }
    BinaryMask::new(geom, v).unwrap()
}

pub fn coords(dims: [usize; 3]) -> impl Iterator<Item = [usize; 3]> {
    let [nx, ny, nz] = dims;
    (0..nz).flat_map(move |k| (0..ny).flat_map(move |j| (0..nx).map(move |i| [i, j, k])))
}

fn at(mask: &BinaryMask, c: [i64; 3]) -> Option<bool> {
    let d = mask.dims();
    if (0..3).all(|a| c[a] >= 0 && (c[a] as usize) < d[a]) {
        Some(mask.get(c[0] as usize, c[1] as usize, c[2] as usize))
    } else {
        None
    }
}

/// Foreground voxels with a background (or out-of-volume) face neighbor.
pub fn boundary_voxels(mask: &BinaryMask) -> Vec<[usize; 3]> {
    coords(mask.dims())
        .filter(|&[i, j, k]| {
            mask.get(i, j, k) && {
                let c = [i as i64, j as i64, k as i64];
                let faces = [[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0], [0, 0, 1], [0, 0, -1]];
                faces
                    .iter()
                    .any(|f| at(mask, [c[0] + f[0], c[1] + f[1], c[2] + f[2]]) != Some(true))
            }
        })
        .collect()
}

pub fn world(geom: &Geometry, c: [usize; 3]) -> [f64; 3] {
    [0, 1, 2].map(|a| geom.origin[a] + c[a] as f64 * geom.spacing[a])
}

pub fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Signed distance to the nearest boundary voxel, negative inside.
pub fn brute_sdf(mask: &BinaryMask) -> Vec<f64> {
    let geom = mask.geometry();
    let b: Vec<[f64; 3]> = boundary_voxels(mask).iter().map(|&c| world(geom, c)).collect();
    coords(mask.dims())
        .map(|c| {
            let p = world(geom, c);
            let d = b.iter().map(|&q| dist(p, q)).fold(f64::INFINITY, f64::min);
            if mask.get(c[0], c[1], c[2]) {
                -d
            } else {
                d
            }
        })
        .collect()
}

/// Distances from every surface point of `from` to the surface of `to`.
pub fn brute_directed(from: &BinaryMask, to: &BinaryMask) -> Vec<f64> {
    let g = from.geometry();
    let a: Vec<[f64; 3]> = boundary_voxels(from).iter().map(|&c| world(g, c)).collect();
    let b: Vec<[f64; 3]> = boundary_voxels(to).iter().map(|&c| world(g, c)).collect();
    a.iter()
        .map(|&p| b.iter().map(|&q| dist(p, q)).fold(f64::INFINITY, f64::min))
        .collect()
}

/// Linear-interpolation percentile: rank `q·(n−1)` in the sorted sample.
pub fn brute_percentile(v: &[f64], q: f64) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rank = q * (s.len() - 1) as f64;
    let lo = rank.floor() as usize;
    if lo + 1 >= s.len() {
        return s[lo];
    }
    s[lo] * (1.0 - (rank - lo as f64)) + s[lo + 1] * (rank - lo as f64)
}

pub struct OracleMetrics {
    pub dsc: f64,
    pub msd: f64,
    pub hd95: f64,
    pub hd: f64,
    pub crd: f64,
    pub cad: f64,
}

/// All metrics for two non-empty masks.
pub fn brute_metrics(pred: &BinaryMask, gt: &BinaryMask) -> OracleMetrics {
    let s = pred.voxels().iter().filter(|&&v| v).count() as f64;
    let g = gt.voxels().iter().filter(|&&v| v).count() as f64;
    let both = pred.voxels().iter().zip(gt.voxels()).filter(|(&a, &b)| a && b).count() as f64;
    let a = brute_directed(pred, gt);
    let b = brute_directed(gt, pred);
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let zs = |m: &BinaryMask| -> Vec<usize> {
        coords(m.dims())
            .filter(|c| m.get(c[0], c[1], c[2]))
            .map(|c| c[2])
            .collect()
    };
    let (pz, gz) = (zs(pred), zs(gt));
    let sz = pred.geometry().spacing[2];
    let top = |z: &[usize]| *z.iter().max().unwrap() as f64;
    let bottom = |z: &[usize]| *z.iter().min().unwrap() as f64;
    OracleMetrics {
        dsc: 2.0 * both / (s + g),
        msd: (mean(&a) + mean(&b)) / 2.0,
        hd95: brute_percentile(&a, 0.95).max(brute_percentile(&b, 0.95)),
        hd: a.iter().chain(&b).cloned().fold(0.0, f64::max),
        crd: (top(&gz) - top(&pz)) * sz,
        cad: (bottom(&gz) - bottom(&pz)) * sz,
    }
}

/// 26-connected components by depth-first flood fill; each component is a
/// sorted list of flat indices, components ordered by their first index.
pub fn flood_components(mask: &BinaryMask) -> Vec<Vec<usize>> {
    let d = mask.dims();
    let mut seen = vec![false; mask.voxels().len()];
    let mut out = Vec::new();
    for start in coords(d) {
        let idx = mask.geometry().index(start[0], start[1], start[2]);
        if !mask.voxels()[idx] || seen[idx] {
            continue;
        }
        let mut comp = Vec::new();
        let mut stack = vec![start];
        seen[idx] = true;
        while let Some(c) = stack.pop() {
            comp.push(mask.geometry().index(c[0], c[1], c[2]));
            for dz in -1i64..=1 {
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let n = [c[0] as i64 + dx, c[1] as i64 + dy, c[2] as i64 + dz];
                        if at(mask, n) == Some(true) {
                            let nu = [n[0] as usize, n[1] as usize, n[2] as usize];
                            let ni = mask.geometry().index(nu[0], nu[1], nu[2]);
                            if !seen[ni] {
                                seen[ni] = true;
                                stack.push(nu);
                            }
                        }
                    }
                }
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

/// Directional derivative of `f` along `dir` by central differences.
pub fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], dir: &[f64], h: f64) -> f64 {
    let plus: Vec<f64> = x.iter().zip(dir).map(|(a, d)| a + h * d).collect();
    let minus: Vec<f64> = x.iter().zip(dir).map(|(a, d)| a - h * d).collect();
    (f(&plus) - f(&minus)) / (2.0 * h)
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

fn close(what: &str, got: f64, want: f64, tol: f64) -> Result<(), String> {
    if (got - want).abs() <= tol {
        Ok(())
    } else {
        Err(format!("{what}: got {got}, oracle {want}"))
    }
}

/// Compare the library metrics for a non-empty pair against the oracles.
pub fn check_metrics(pred: &BinaryMask, gt: &BinaryMask) -> Result<(), String> {
    use esoseg_core::metrics::{evaluate_scan, hausdorff};
    let want = brute_metrics(pred, gt);
    let got = evaluate_scan(pred, gt).map_err(|e| e.to_string())?;
    if got.dsc != want.dsc {
        return Err(format!("dsc: got {}, oracle {}", got.dsc, want.dsc));
    }
    close("msd", got.msd.unwrap(), want.msd, 1e-9)?;
    close("hd95", got.hd95.unwrap(), want.hd95, 1e-9)?;
    close("hd", hausdorff(pred, gt).map_err(|e| e.to_string())?, want.hd, 1e-9)?;
    if got.crd != Some(want.crd) || got.cad != Some(want.cad) {
        return Err(format!(
            "crd/cad: got {:?}/{:?}, oracle {}/{}",
            got.crd, got.cad, want.crd, want.cad
        ));
    }
    Ok(())
}

/// Compare the signed distance map against the oracle, bit for bit.
pub fn check_sdf(mask: &BinaryMask) -> Result<(), String> {
    let got = esoseg_core::losses::signed_distance_map(mask).map_err(|e| e.to_string())?;
    let want = brute_sdf(mask);
    for (idx, (&g, &w)) in got.values().iter().zip(&want).enumerate() {
        if g != w {
            return Err(format!("voxel {idx}: got {g}, oracle {w}"));
        }
    }
    Ok(())
}

/// Compare component labelling against flood fill.
pub fn check_components(mask: &BinaryMask) -> Result<(), String> {
    let (labels, sizes) = esoseg_core::inference::label_components(mask);
    let want = flood_components(mask);
    if sizes.len() != want.len() {
        return Err(format!("{} components, oracle {}", sizes.len(), want.len()));
    }
    for (n, comp) in want.iter().enumerate() {
        let label = n as u32 + 1;
        let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == label).collect();
        if &members != comp || sizes[n] != comp.len() {
            return Err(format!("component {label} differs from flood fill"));
        }
    }
    Ok(())
}
