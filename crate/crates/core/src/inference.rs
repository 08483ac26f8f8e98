//! Whole-volume inference, thresholding and connected-component cleanup.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::network::{receptive_field, Network, Tensor};
use crate::volgrid::{BinaryMask, VolumeGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InferenceOptions {
    /// Largest padded volume (in voxels) run in a single forward pass.
    pub max_voxels: usize,
    /// Force tiling with this core size `(x, y, z)`; rounded up to the
    /// network's size multiple.
    pub tile: Option<[usize; 3]>,
}

impl Default for InferenceOptions {
    fn default() -> Self {
        InferenceOptions {
            max_voxels: 1 << 21,
            tile: None,
        }
    }
}

fn round_up(v: usize, m: usize) -> usize {
    v.div_ceil(m) * m
}

/// Copy `src` (dims `sd`) region starting at `at` with dims `dd` into a
/// zero-initialized buffer; out-of-range voxels stay zero.
fn crop(src: &[f32], sd: [usize; 3], at: [usize; 3], dd: [usize; 3]) -> Vec<f32> {
    let mut out = vec![0.0; dd[0] * dd[1] * dd[2]];
    for k in 0..dd[2] {
        let z = at[2] + k;
        if z >= sd[2] {
            break;
        }
        for j in 0..dd[1] {
            let y = at[1] + j;
            if y >= sd[1] {
                break;
            }
            let w = dd[0].min(sd[0].saturating_sub(at[0]));
            let s = at[0] + sd[0] * (y + sd[1] * z);
            let d = dd[0] * (j + dd[1] * k);
            out[d..d + w].copy_from_slice(&src[s..s + w]);
        }
    }
    out
}

/// Tumor-channel probabilities for a block whose dims are multiples of the
/// network's size multiple.
fn run_block(net: &Network<f32>, data: Vec<f32>, dims: [usize; 3]) -> Result<Vec<f32>> {
    let [nx, ny, nz] = dims;
    let x = Tensor::from_vec(&[1, 1, nz, ny, nx], data);
    let y = net.predict(&x)?;
    let sp = nx * ny * nz;
    Ok(y.data()[sp..2 * sp].to_vec())
}

/// Tumor probability for every voxel of a normalized volume.
///
/// Dims are zero-padded up to the network's size multiple and cropped back.
/// Volumes above `max_voxels` are split into tiles that overlap by at least
/// half the receptive field; each tile contributes only its core. Tiling is
/// exact for networks without channel gates, whose global pooling sees only
/// the tile.
pub fn infer_volume(net: &Network<f32>, volume: &VolumeGrid, opts: &InferenceOptions) -> Result<VolumeGrid> {
    let m = net.config().size_multiple();
    let dims = volume.dims();
    let padded = dims.map(|d| round_up(d, m));
    let total: usize = padded.iter().product();
    let probs = if opts.tile.is_none() && total <= opts.max_voxels {
        let data = crop(volume.voxels(), dims, [0; 3], padded);
        run_block(net, data, padded)?
    } else {
        let rf = receptive_field(net.config());
        let margin = [rf.0, rf.1, rf.2].map(|r| round_up(r.div_ceil(2), m));
        let core = match opts.tile {
            Some(t) => [0, 1, 2].map(|a| round_up(t[a].max(1), m).min(padded[a])),
            None => choose_core(padded, margin, m, opts.max_voxels),
        };
        let mut out = vec![0.0f32; total];
        let starts = |a: usize| (0..padded[a]).step_by(core[a]).collect::<Vec<_>>();
        for &z0 in &starts(2) {
            for &y0 in &starts(1) {
                for &x0 in &starts(0) {
                    let c0 = [x0, y0, z0];
                    let lo = [0, 1, 2].map(|a| c0[a].saturating_sub(margin[a]));
                    let hi = [0, 1, 2].map(|a| (c0[a] + core[a] + margin[a]).min(padded[a]));
                    let td = [0, 1, 2].map(|a| hi[a] - lo[a]);
                    let tile = run_block(net, crop(volume.voxels(), dims, lo, td), td)?;
                    let ce = [0, 1, 2].map(|a| (c0[a] + core[a]).min(padded[a]));
                    for z in c0[2]..ce[2] {
                        for y in c0[1]..ce[1] {
                            let s = (c0[0] - lo[0]) + td[0] * ((y - lo[1]) + td[1] * (z - lo[2]));
                            let d = c0[0] + padded[0] * (y + padded[1] * z);
                            let w = ce[0] - c0[0];
                            out[d..d + w].copy_from_slice(&tile[s..s + w]);
                        }
                    }
                }
            }
        }
        out
    };
    VolumeGrid::new(*volume.geometry(), crop(&probs, padded, [0; 3], dims))
}

/// Halve the largest core axis until a tile with margins fits the budget.
fn choose_core(padded: [usize; 3], margin: [usize; 3], m: usize, budget: usize) -> [usize; 3] {
    let mut core = padded;
    loop {
        let tile: usize = (0..3).map(|a| (core[a] + 2 * margin[a]).min(padded[a])).product();
        if tile <= budget || core.iter().all(|&c| c == m) {
            return core;
        }
        let a = (0..3).max_by_key(|&a| core[a]).expect("three axes");
        core[a] = round_up(core[a] / 2, m).max(m);
    }
}

/// Voxels whose probability strictly exceeds `tau`.
pub fn binarize(prob: &VolumeGrid, tau: f64) -> Result<BinaryMask> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::Parameter(format!("threshold {tau} outside [0, 1]")));
    }
    BinaryMask::new(
        *prob.geometry(),
        prob.voxels().iter().map(|&p| p as f64 > tau).collect(),
    )
}

/// 26-connected component labels (0 = background, components numbered from
/// 1 in raster order of their first voxel) and each component's size.
pub fn label_components(mask: &BinaryMask) -> (Vec<u32>, Vec<usize>) {
    let [nx, ny, nz] = mask.dims();
    let vox = mask.voxels();
    let mut labels = vec![0u32; vox.len()];
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for seed in 0..vox.len() {
        if !vox[seed] || labels[seed] != 0 {
            continue;
        }
        sizes.push(0);
        let label = sizes.len() as u32;
        labels[seed] = label;
        queue.push_back(seed);
        while let Some(idx) = queue.pop_front() {
            sizes[label as usize - 1] += 1;
            let (i, j, k) = (idx % nx, (idx / nx) % ny, idx / (nx * ny));
            for dk in -1i64..=1 {
                let z = k as i64 + dk;
                if z < 0 || z >= nz as i64 {
                    continue;
                }
                for dj in -1i64..=1 {
                    let y = j as i64 + dj;
                    if y < 0 || y >= ny as i64 {
                        continue;
                    }
                    for di in -1i64..=1 {
                        let x = i as i64 + di;
                        if x < 0 || x >= nx as i64 {
                            continue;
                        }
                        let n = x as usize + nx * (y as usize + ny * z as usize);
                        if vox[n] && labels[n] == 0 {
                            labels[n] = label;
                            queue.push_back(n);
                        }
                    }
                }
            }
        }
    }
    (labels, sizes)
}

/// Keep only the largest 26-connected component; ties go to the component
/// met first in raster order.
pub fn largest_component(mask: &BinaryMask) -> BinaryMask {
    let (labels, sizes) = label_components(mask);
    let Some(best) = sizes
        .iter()
        .enumerate()
        .rev()
        .max_by_key(|(_, &s)| s)
        .map(|(i, _)| i as u32 + 1)
    else {
        return BinaryMask::empty(*mask.geometry());
    };
    BinaryMask::new(*mask.geometry(), labels.iter().map(|&l| l == best).collect()).expect("same geometry")
}

/// Threshold at `tau`, then keep the largest component.
pub fn postprocess(prob: &VolumeGrid, tau: f64) -> Result<BinaryMask> {
    Ok(largest_component(&binarize(prob, tau)?))
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::network::{NetworkConfig, Variant};
    use crate::volgrid::Geometry;

    fn geom(dims: [usize; 3]) -> Geometry {
        Geometry::new(dims, [1.0, 1.0, 3.0], [0.0; 3]).unwrap()
    }

    fn mask(dims: [usize; 3], on: &[[usize; 3]]) -> BinaryMask {
        let g = geom(dims);
        let mut m = BinaryMask::empty(g);
        for &[i, j, k] in on {
            m.voxels_mut()[g.index(i, j, k)] = true;
        }
        m
    }

    #[test]
    fn binarize_is_strict() {
        let g = geom([2, 2, 2]);
        let at = |v: f32| VolumeGrid::filled(g, v);
        assert!(binarize(&at(0.6), 0.5).unwrap().voxels().iter().all(|&b| b));
        assert!(binarize(&at(0.5), 0.5).unwrap().is_all_background());
        assert!(binarize(&at(0.0), 0.0).unwrap().is_all_background());
        assert!(matches!(binarize(&at(0.5), 1.5), Err(Error::Parameter(_))));
        assert!(matches!(binarize(&at(0.5), -0.1), Err(Error::Parameter(_))));
    }

    #[test]
    fn larger_blob_wins() {
        let five = [[0, 0, 0], [1, 0, 0], [2, 0, 0], [3, 0, 0], [4, 0, 0]];
        let three = [[0, 5, 5], [1, 5, 5], [2, 6, 6]];
        let all: Vec<[usize; 3]> = five.iter().chain(&three).copied().collect();
        assert_eq!(largest_component(&mask([8, 8, 8], &all)), mask([8, 8, 8], &five));
    }

    #[test]
    fn tie_keeps_raster_first_blob() {
        let a = [[0, 0, 4], [1, 0, 4], [2, 0, 4], [3, 0, 4]];
        let b = [[0, 4, 0], [0, 5, 0], [0, 6, 0], [0, 7, 0]];
        let all: Vec<[usize; 3]> = a.iter().chain(&b).copied().collect();
        // b starts at z = 0, so it is met first.
        assert_eq!(largest_component(&mask([8, 8, 8], &all)), mask([8, 8, 8], &b));
    }

    #[test]
    fn diagonal_neighbors_connect() {
        let m = mask([4, 4, 4], &[[0, 0, 0], [1, 1, 1], [2, 2, 2]]);
        assert_eq!(label_components(&m).1, vec![3]);
        assert!(largest_component(&mask([3, 3, 3], &[])).is_all_background());
    }

    #[test]
    fn random_masks_obey_component_laws() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..30 {
            let dims = [rng.random_range(1..9), rng.random_range(1..9), rng.random_range(1..9)];
            let g = geom(dims);
            let m = BinaryMask::new(g, (0..g.len()).map(|_| rng.random_bool(0.2)).collect()).unwrap();
            let l = largest_component(&m);
            assert!(l.voxels().iter().zip(m.voxels()).all(|(&a, &b)| !a || b));
            assert_eq!(largest_component(&l), l);
            assert!(label_components(&l).1.len() <= 1);
        }
    }

    fn small(variant: Variant) -> NetworkConfig {
        NetworkConfig {
            stem_channels: 4,
            growth: 4,
            bottleneck: 4,
            sub_ddbs: 1,
            ..NetworkConfig::for_variant(variant)
        }
    }

    fn random_volume(dims: [usize; 3], seed: u64) -> VolumeGrid {
        let g = geom(dims);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        VolumeGrid::new(g, (0..g.len()).map(|_| rng.random::<f32>()).collect()).unwrap()
    }

    #[test]
    fn output_matches_input_geometry_after_padding() {
        let net = Network::build(&small(Variant::DDAUnet), 0).unwrap();
        let v = random_volume([10, 9, 5], 0);
        let p = infer_volume(&net, &v, &InferenceOptions::default()).unwrap();
        assert_eq!(p.geometry(), v.geometry());
        assert!(p.voxels().iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn tiled_matches_untiled_without_channel_gates() {
        let cfg = NetworkConfig {
            sub_ddbs: 1,
            ..small(Variant::DUnet)
        };
        let net = Network::build(&cfg, 1).unwrap();
        let rf = receptive_field(&cfg).0;
        let n = 2 * rf + 8;
        let v = random_volume([n, 12, 8], 2);
        let whole = infer_volume(&net, &v, &InferenceOptions::default()).unwrap();
        let tiled = infer_volume(
            &net,
            &v,
            &InferenceOptions {
                tile: Some([8, 8, 8]),
                ..InferenceOptions::default()
            },
        )
        .unwrap();
        let diff = whole
            .voxels()
            .iter()
            .zip(tiled.voxels())
            .fold(0.0f32, |m, (a, b)| m.max((a - b).abs()));
        assert!(diff < 1e-4, "max diff {diff}");
    }
}
