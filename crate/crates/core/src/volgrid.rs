//! Volume containers, file I/O and resampling.
//!
//! Volumes are stored x-fastest: the flat index of voxel `(i, j, k)` is
//! `i + nx * (j + ny * k)`. The `k` axis is the slice axis; a higher slice
//! index is more cranial.
//!
//! The on-disk format is a small MetaImage-style text header followed
//! directly by a little-endian raw payload in the same file:
//!
//! ```text
//! ObjectType = Image
//! NDims = 3
//! DimSize = 96 96 48
//! ElementSpacing = 1 1 3
//! Offset = 0 0 0
//! ElementType = MET_FLOAT
//! ElementDataFile = LOCAL
//! <payload>
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower and upper bound of the soft-tissue intensity window, in HU.
pub const HU_WINDOW: (f32, f32) = (-200.0, 300.0);

/// Working voxel size in mm used throughout the experiments.
pub const WORKING_SPACING: [f64; 3] = [1.0, 1.0, 3.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub dims: [usize; 3],
    /// Voxel size in mm.
    pub spacing: [f64; 3],
    /// World coordinate of voxel (0, 0, 0) in mm.
    pub origin: [f64; 3],
}

impl Geometry {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::Parameter(format!("dims must be positive, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::Parameter(format!(
                "spacing must be positive and finite, got {spacing:?}"
            )));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::Parameter(format!("origin must be finite, got {origin:?}")));
        }
        Ok(Geometry { dims, spacing, origin })
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [idx % nx, (idx / nx) % ny, idx / (nx * ny)]
    }

    /// World coordinate (mm) of a voxel center.
    #[inline]
    pub fn world(&self, ijk: [usize; 3]) -> [f64; 3] {
        [
            self.origin[0] + ijk[0] as f64 * self.spacing[0],
            self.origin[1] + ijk[1] as f64 * self.spacing[1],
            self.origin[2] + ijk[2] as f64 * self.spacing[2],
        ]
    }

    pub fn voxel_volume(&self) -> f64 {
        self.spacing[0] * self.spacing[1] * self.spacing[2]
    }

    /// Physical extent `dims * spacing` per axis.
    pub fn extent(&self) -> [f64; 3] {
        [
            self.dims[0] as f64 * self.spacing[0],
            self.dims[1] as f64 * self.spacing[1],
            self.dims[2] as f64 * self.spacing[2],
        ]
    }
}

/// Dense scalar volume, typically CT intensities in HU.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeGrid {
    geom: Geometry,
    voxels: Vec<f32>,
}

impl VolumeGrid {
    pub fn new(geom: Geometry, voxels: Vec<f32>) -> Result<Self> {
        if voxels.len() != geom.len() {
            return Err(Error::Shape(format!(
                "voxel count {} does not match dims {:?}",
                voxels.len(),
                geom.dims
            )));
        }
        Ok(VolumeGrid { geom, voxels })
    }

    pub fn filled(geom: Geometry, value: f32) -> Self {
        VolumeGrid {
            voxels: vec![value; geom.len()],
            geom,
        }
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geom
    }

    pub fn dims(&self) -> [usize; 3] {
        self.geom.dims
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    pub fn voxels_mut(&mut self) -> &mut [f32] {
        &mut self.voxels
    }

    pub fn into_voxels(self) -> Vec<f32> {
        self.voxels
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.voxels[self.geom.index(i, j, k)]
    }

    /// Intensities mapped through [`normalize_intensity`].
    pub fn normalized(&self) -> VolumeGrid {
        VolumeGrid {
            geom: self.geom,
            voxels: self.voxels.iter().map(|&v| normalize_intensity(v)).collect(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut payload = Vec::with_capacity(self.voxels.len() * 4);
        for v in &self.voxels {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        write_file(path.as_ref(), &self.geom, ElementType::Float, &payload)
    }
}

/// Binary label volume sharing geometry with an image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    geom: Geometry,
    voxels: Vec<bool>,
}

// Geometry holds floats; masks compare them exactly, which is what we want.
impl Eq for Geometry {}

impl BinaryMask {
    pub fn new(geom: Geometry, voxels: Vec<bool>) -> Result<Self> {
        if voxels.len() != geom.len() {
            return Err(Error::Shape(format!(
                "voxel count {} does not match dims {:?}",
                voxels.len(),
                geom.dims
            )));
        }
        Ok(BinaryMask { geom, voxels })
    }

    pub fn empty(geom: Geometry) -> Self {
        BinaryMask {
            voxels: vec![false; geom.len()],
            geom,
        }
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geom
    }

    pub fn dims(&self) -> [usize; 3] {
        self.geom.dims
    }

    pub fn voxels(&self) -> &[bool] {
        &self.voxels
    }

    pub fn voxels_mut(&mut self) -> &mut [bool] {
        &mut self.voxels
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> bool {
        self.voxels[self.geom.index(i, j, k)]
    }

    pub fn count(&self) -> usize {
        self.voxels.iter().filter(|&&v| v).count()
    }

    pub fn is_all_background(&self) -> bool {
        !self.voxels.iter().any(|&v| v)
    }

    /// Inclusive `[min, max]` slice range that contains foreground, if any.
    pub fn slice_range(&self) -> Option<(usize, usize)> {
        let plane = self.geom.dims[0] * self.geom.dims[1];
        let mut range: Option<(usize, usize)> = None;
        for (k, slice) in self.voxels.chunks(plane).enumerate() {
            if slice.iter().any(|&v| v) {
                range = Some(match range {
                    None => (k, k),
                    Some((lo, _)) => (lo, k),
                });
            }
        }
        range
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let payload: Vec<u8> = self.voxels.iter().map(|&v| v as u8).collect();
        write_file(path.as_ref(), &self.geom, ElementType::UChar, &payload)
    }
}

/// Clip to the soft-tissue window and scale linearly to `[0, 1]`.
#[inline]
pub fn normalize_intensity(hu: f32) -> f32 {
    let (lo, hi) = HU_WINDOW;
    (hu.clamp(lo, hi) - lo) / (hi - lo)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VolumeKind {
    Scalar,
    Mask,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LoadedVolume {
    Scalar(VolumeGrid),
    Mask(BinaryMask),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementType {
    Short,
    Float,
    UChar,
}

impl ElementType {
    pub fn tag(self) -> &'static str {
        match self {
            ElementType::Short => "MET_SHORT",
            ElementType::Float => "MET_FLOAT",
            ElementType::UChar => "MET_UCHAR",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "MET_SHORT" => Some(ElementType::Short),
            "MET_FLOAT" => Some(ElementType::Float),
            "MET_UCHAR" => Some(ElementType::UChar),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            ElementType::Short => 2,
            ElementType::Float => 4,
            ElementType::UChar => 1,
        }
    }
}

/// Render the text header for a volume file.
pub fn format_header(geom: &Geometry, element: ElementType) -> String {
    let join = |v: &[f64; 3]| format!("{} {} {}", v[0], v[1], v[2]);
    format!(
        "ObjectType = Image\nNDims = 3\nDimSize = {} {} {}\nElementSpacing = {}\nOffset = {}\nElementType = {}\nElementDataFile = LOCAL\n",
        geom.dims[0],
        geom.dims[1],
        geom.dims[2],
        join(&geom.spacing),
        join(&geom.origin),
        element.tag()
    )
}

/// Write header plus raw little-endian payload.
pub fn write_file(path: &Path, geom: &Geometry, element: ElementType, payload: &[u8]) -> Result<()> {
    let mut bytes = format_header(geom, element).into_bytes();
    bytes.extend_from_slice(payload);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct Header {
    geom: Geometry,
    element: ElementType,
    payload_offset: usize,
}

fn parse_triple<T: std::str::FromStr>(key: &str, value: &str) -> Result<[T; 3]> {
    let parts: Vec<&str> = value.split_whitespace().collect();
    if parts.len() != 3 {
        return Err(Error::Format(format!("{key} needs 3 components, got {value:?}")));
    }
    let mut out = Vec::with_capacity(3);
    for p in parts {
        out.push(
            p.parse::<T>()
                .map_err(|_| Error::Format(format!("{key}: cannot parse {p:?}")))?,
        );
    }
    out.try_into().map_err(|_| Error::Format(format!("{key}: bad arity")))
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    let mut dims: Option<[usize; 3]> = None;
    let mut spacing: Option<[f64; 3]> = None;
    let mut origin = [0.0; 3];
    let mut element: Option<ElementType> = None;
    let mut ndims_seen = false;
    let mut pos = 0;
    loop {
        let rest = &bytes[pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Format("header ended before ElementDataFile".into()))?;
        let line = std::str::from_utf8(&rest[..end])
            .map_err(|_| Error::Format("header is not valid UTF-8".into()))?
            .trim_end_matches('\r');
        pos += end + 1;
        if line.trim().is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("expected `Key = value`, got {line:?}")))?;
        let key = key.trim();
        let value = value.trim();
        match key {
            "ObjectType" => {
                if value != "Image" {
                    return Err(Error::Format(format!("unsupported ObjectType {value}")));
                }
            }
            "NDims" => {
                if value != "3" {
                    return Err(Error::Format(format!("only NDims = 3 is supported, got {value}")));
                }
                ndims_seen = true;
            }
            "DimSize" => dims = Some(parse_triple(key, value)?),
            "ElementSpacing" => spacing = Some(parse_triple(key, value)?),
            "Offset" => origin = parse_triple(key, value)?,
            "ElementType" => {
                element = Some(
                    ElementType::parse(value)
                        .ok_or_else(|| Error::Format(format!("unsupported ElementType {value}")))?,
                )
            }
            "BinaryDataByteOrderMSB" => {
                if value != "False" {
                    return Err(Error::Format("only little-endian payloads are supported".into()));
                }
            }
            "ElementDataFile" => {
                if value != "LOCAL" {
                    return Err(Error::Format(format!(
                        "only ElementDataFile = LOCAL is supported, got {value}"
                    )));
                }
                break;
            }
            other => return Err(Error::Format(format!("unknown header key {other:?}"))),
        }
    }
    if !ndims_seen {
        return Err(Error::Format("missing NDims".into()));
    }
    let dims = dims.ok_or_else(|| Error::Format("missing DimSize".into()))?;
    let spacing = spacing.ok_or_else(|| Error::Format("missing ElementSpacing".into()))?;
    let element = element.ok_or_else(|| Error::Format("missing ElementType".into()))?;
    let geom = Geometry::new(dims, spacing, origin).map_err(|e| Error::Format(e.to_string()))?;
    Ok(Header {
        geom,
        element,
        payload_offset: pos,
    })
}

/// Load a volume file as either a scalar image or a binary mask.
pub fn load_volume(path: impl AsRef<Path>, kind: VolumeKind) -> Result<LoadedVolume> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_volume(&bytes, kind)
}

pub fn load_scalar(path: impl AsRef<Path>) -> Result<VolumeGrid> {
    match load_volume(path, VolumeKind::Scalar)? {
        LoadedVolume::Scalar(v) => Ok(v),
        LoadedVolume::Mask(_) => unreachable!(),
    }
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<BinaryMask> {
    match load_volume(path, VolumeKind::Mask)? {
        LoadedVolume::Mask(m) => Ok(m),
        LoadedVolume::Scalar(_) => unreachable!(),
    }
}

pub fn decode_volume(bytes: &[u8], kind: VolumeKind) -> Result<LoadedVolume> {
    let header = parse_header(bytes)?;
    let payload = &bytes[header.payload_offset..];
    let n = header.geom.len();
    let expected = n * header.element.size();
    if payload.len() != expected {
        return Err(Error::Truncated {
            expected,
            found: payload.len(),
        });
    }
    let values: Vec<f32> = match header.element {
        ElementType::Float => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
        ElementType::Short => payload
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]) as f32)
            .collect(),
        ElementType::UChar => payload.iter().map(|&b| b as f32).collect(),
    };
    match kind {
        VolumeKind::Scalar => Ok(LoadedVolume::Scalar(VolumeGrid {
            geom: header.geom,
            voxels: values,
        })),
        VolumeKind::Mask => {
            let mut voxels = Vec::with_capacity(n);
            for (index, &v) in values.iter().enumerate() {
                if v == 0.0 {
                    voxels.push(false);
                } else if v == 1.0 {
                    voxels.push(true);
                } else {
                    return Err(Error::Label { value: v as f64, index });
                }
            }
            Ok(LoadedVolume::Mask(BinaryMask {
                geom: header.geom,
                voxels,
            }))
        }
    }
}

fn check_target(target: [f64; 3]) -> Result<()> {
    if target.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
        return Err(Error::Parameter(format!(
            "target spacing must be positive, got {target:?}"
        )));
    }
    Ok(())
}

fn resampled_geometry(geom: &Geometry, target: [f64; 3]) -> Geometry {
    let extent = geom.extent();
    let mut dims = [0; 3];
    for a in 0..3 {
        dims[a] = ((extent[a] / target[a]).round() as usize).max(1);
    }
    Geometry {
        dims,
        spacing: target,
        origin: geom.origin,
    }
}

/// Continuous input index sampled by output voxel `o` along one axis.
///
/// Output voxel centers are placed so the output grid tiles the input extent,
/// then clamped to the valid index range.
#[inline]
fn source_coord(o: usize, src_spacing: f64, dst_spacing: f64, n: usize) -> f64 {
    let x = (o as f64 + 0.5) * dst_spacing / src_spacing - 0.5;
    x.clamp(0.0, (n - 1) as f64)
}

/// Trilinear resampling of a scalar volume to a new voxel size.
pub fn resample_volume(grid: &VolumeGrid, target_spacing: [f64; 3]) -> Result<VolumeGrid> {
    check_target(target_spacing)?;
    let src = &grid.geom;
    let dst = resampled_geometry(src, target_spacing);
    let [nx, ny, nz] = src.dims;
    // Per-axis (lower index, upper index, upper weight).
    let axis = |a: usize| -> Vec<(usize, usize, f64)> {
        (0..dst.dims[a])
            .map(|o| {
                let x = source_coord(o, src.spacing[a], dst.spacing[a], src.dims[a]);
                let i0 = x.floor() as usize;
                let i1 = (i0 + 1).min(src.dims[a] - 1);
                (i0, i1, x - i0 as f64)
            })
            .collect()
    };
    let (ax, ay, az) = (axis(0), axis(1), axis(2));
    let v = |i: usize, j: usize, k: usize| grid.voxels[i + nx * (j + ny * k)] as f64;
    let mut out = Vec::with_capacity(dst.len());
    debug_assert!(nz > 0);
    for &(k0, k1, wz) in &az {
        for &(j0, j1, wy) in &ay {
            for &(i0, i1, wx) in &ax {
                let c00 = v(i0, j0, k0) * (1.0 - wx) + v(i1, j0, k0) * wx;
                let c10 = v(i0, j1, k0) * (1.0 - wx) + v(i1, j1, k0) * wx;
                let c01 = v(i0, j0, k1) * (1.0 - wx) + v(i1, j0, k1) * wx;
                let c11 = v(i0, j1, k1) * (1.0 - wx) + v(i1, j1, k1) * wx;
                let c0 = c00 * (1.0 - wy) + c10 * wy;
                let c1 = c01 * (1.0 - wy) + c11 * wy;
                out.push((c0 * (1.0 - wz) + c1 * wz) as f32);
            }
        }
    }
    VolumeGrid::new(dst, out)
}

/// Nearest-neighbour resampling of a mask; the result stays binary.
pub fn resample_mask(mask: &BinaryMask, target_spacing: [f64; 3]) -> Result<BinaryMask> {
    check_target(target_spacing)?;
    let src = &mask.geom;
    let dst = resampled_geometry(src, target_spacing);
    let axis = |a: usize| -> Vec<usize> {
        (0..dst.dims[a])
            .map(|o| {
                let x = source_coord(o, src.spacing[a], dst.spacing[a], src.dims[a]);
                ((x + 0.5).floor() as usize).min(src.dims[a] - 1)
            })
            .collect()
    };
    let (ax, ay, az) = (axis(0), axis(1), axis(2));
    let mut out = Vec::with_capacity(dst.len());
    for &k in &az {
        for &j in &ay {
            for &i in &ax {
                out.push(mask.voxels[src.index(i, j, k)]);
            }
        }
    }
    BinaryMask::new(dst, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom(dims: [usize; 3], spacing: [f64; 3]) -> Geometry {
        Geometry::new(dims, spacing, [0.0; 3]).unwrap()
    }

    #[test]
    fn float_file_round_trips_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.mha");
        let g = VolumeGrid::new(geom([2, 2, 1], [1.0, 1.0, 3.0]), vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        g.save(&path).unwrap();
        let text = fs::read(&path).unwrap();
        let header = String::from_utf8_lossy(&text[..text.len() - 16]);
        assert!(header.contains("ElementSpacing = 1 1 3\n"));
        assert_eq!(load_scalar(&path).unwrap(), g);
    }

    #[test]
    fn mask_with_value_two_is_rejected() {
        let g = geom([2, 1, 1], [1.0; 3]);
        let mut bytes = format_header(&g, ElementType::UChar).into_bytes();
        bytes.extend_from_slice(&[1, 2]);
        let err = decode_volume(&bytes, VolumeKind::Mask).unwrap_err();
        assert!(matches!(err, Error::Label { index: 1, .. }), "{err}");
    }

    #[test]
    fn short_payload_widens_without_change() {
        let g = geom([1, 1, 1], [1.0; 3]);
        let mut bytes = format_header(&g, ElementType::Short).into_bytes();
        bytes.extend_from_slice(&(-1024i16).to_le_bytes());
        match decode_volume(&bytes, VolumeKind::Scalar).unwrap() {
            LoadedVolume::Scalar(v) => assert_eq!(v.voxels(), &[-1024.0]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn payload_length_mismatch_is_truncation() {
        let g = geom([2, 2, 2], [1.0; 3]);
        let mut bytes = format_header(&g, ElementType::Float).into_bytes();
        bytes.extend_from_slice(&[0u8; 12]);
        assert!(matches!(
            decode_volume(&bytes, VolumeKind::Scalar),
            Err(Error::Truncated {
                expected: 32,
                found: 12
            })
        ));
    }

    #[test]
    fn malformed_headers_are_format_errors() {
        for text in [
            "NDims = 3\nDimSize = 1 1\nElementSpacing = 1 1 1\nElementType = MET_FLOAT\nElementDataFile = LOCAL\n",
            "NDims = 3\nDimSize = 1 1 1\nElementSpacing = 1 1 1\nElementType = MET_DOUBLE\nElementDataFile = LOCAL\n",
            "NDims = 3\nDimSize = 1 1 1\nElementSpacing = 1 0 1\nElementType = MET_FLOAT\nElementDataFile = LOCAL\n",
            "ndims = 3\n",
            "NDims = 3\nDimSize = 1 1 1\n",
        ] {
            let r = decode_volume(text.as_bytes(), VolumeKind::Scalar);
            assert!(matches!(r, Err(Error::Format(_))), "{text:?} -> {r:?}");
        }
    }

    #[test]
    fn zero_dims_rejected_at_construction() {
        assert!(Geometry::new([0, 4, 4], [1.0; 3], [0.0; 3]).is_err());
        assert!(Geometry::new([4, 4, 4], [1.0, -1.0, 1.0], [0.0; 3]).is_err());
    }

    #[test]
    fn world_coordinates_follow_origin_and_spacing() {
        let g = Geometry::new([4, 4, 4], [0.5, 1.0, 3.0], [10.0, -2.0, 1.0]).unwrap();
        assert_eq!(g.world([2, 3, 1]), [11.0, 1.0, 4.0]);
        assert_eq!(g.coords(g.index(3, 2, 1)), [3, 2, 1]);
    }

    #[test]
    fn resample_identity_and_constant() {
        let g = geom([5, 4, 3], [1.0, 1.0, 3.0]);
        let vals: Vec<f32> = (0..g.len()).map(|i| (i * 7 % 11) as f32).collect();
        let v = VolumeGrid::new(g, vals).unwrap();
        assert_eq!(resample_volume(&v, [1.0, 1.0, 3.0]).unwrap(), v);

        let c = VolumeGrid::filled(g, 42.5);
        let r = resample_volume(&c, [0.7, 2.3, 1.1]).unwrap();
        assert!(r.voxels().iter().all(|&x| x == 42.5));
    }

    #[test]
    fn resample_ramp_matches_pointwise_trilinear() {
        // Independent sampler: direct trilinear evaluation at world points.
        let g = geom([4, 4, 4], [1.0; 3]);
        let f = |i: usize, j: usize, k: usize| (i as f64) + 10.0 * (j as f64) + 100.0 * (k as f64) * (k as f64);
        let vals: Vec<f32> = (0..64)
            .map(|n| {
                let [i, j, k] = g.coords(n);
                f(i, j, k) as f32
            })
            .collect();
        let v = VolumeGrid::new(g, vals).unwrap();
        let r = resample_volume(&v, [2.0; 3]).unwrap();
        assert_eq!(r.dims(), [2, 2, 2]);
        let sample = |p: [f64; 3]| -> f64 {
            let mut acc = 0.0;
            for (di, dj, dk) in itertools_corners() {
                let ci = p[0].floor() as usize + di;
                let cj = p[1].floor() as usize + dj;
                let ck = p[2].floor() as usize + dk;
                let w = (1.0 - (p[0] - ci as f64).abs())
                    * (1.0 - (p[1] - cj as f64).abs())
                    * (1.0 - (p[2] - ck as f64).abs());
                acc += w * f(ci, cj, ck);
            }
            acc
        };
        for k in 0..2 {
            for j in 0..2 {
                for i in 0..2 {
                    let p = [0.5 + 2.0 * i as f64, 0.5 + 2.0 * j as f64, 0.5 + 2.0 * k as f64];
                    let got = r.get(i, j, k) as f64;
                    assert!((got - sample(p)).abs() < 1e-3, "({i},{j},{k}) {got} vs {}", sample(p));
                }
            }
        }
    }

    fn itertools_corners() -> impl Iterator<Item = (usize, usize, usize)> {
        (0..8).map(|c| (c & 1, (c >> 1) & 1, (c >> 2) & 1))
    }

    #[test]
    fn resampled_mask_stays_binary_and_keeps_extent() {
        let g = geom([7, 9, 5], [0.9, 1.3, 2.5]);
        let mask = BinaryMask::new(g, (0..g.len()).map(|i| i % 3 == 0).collect()).unwrap();
        let r = resample_mask(&mask, [1.0, 1.0, 3.0]).unwrap();
        let (e0, e1) = (g.extent(), r.geometry().extent());
        for a in 0..3 {
            assert!((e0[a] - e1[a]).abs() <= r.geometry().spacing[a]);
        }
        assert_eq!(r.geometry().origin, g.origin);
    }

    #[test]
    fn normalization_window() {
        assert_eq!(normalize_intensity(-1000.0), 0.0);
        assert_eq!(normalize_intensity(300.0), 1.0);
        assert_eq!(normalize_intensity(50.0), 0.5);
    }
}
