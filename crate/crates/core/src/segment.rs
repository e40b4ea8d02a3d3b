//! Valve mask extraction: per-frame diffusion and thresholding inside the
//! ROI, then morphological opening and 3D component filtering.

use ndarray::{Array2, Array3, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::WindowRect;
use crate::video::SparseSignal;

/// Perona-Malik diffusion with exponential conduction `exp(-(g/kappa)^2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiffusionParams {
    pub iterations: usize,
    pub kappa: f64,
    pub step: f64,
}

impl Default for DiffusionParams {
    fn default() -> Self {
        Self {
            iterations: 10,
            kappa: 0.3,
            step: 0.2,
        }
    }
}

impl DiffusionParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0 && self.step <= 0.25) {
            return Err(Error::Config(format!("diffusion step {} must be in (0, 0.25]", self.step)));
        }
        if !(self.kappa > 0.0) {
            return Err(Error::Config("diffusion kappa must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Connectivity {
    /// Face neighbors: +-1 in row, column or frame.
    #[default]
    Six,
    /// Every voxel of the surrounding 3x3x3 cube.
    TwentySix,
}

impl std::str::FromStr for Connectivity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "6" => Ok(Self::Six),
            "26" => Ok(Self::TwentySix),
            other => Err(Error::Config(format!("connectivity must be 6 or 26, got `{other}`"))),
        }
    }
}

/// Binary volume in `(t, row, col)` layout with the ROI it was cut from.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskVolume {
    pub data: Array3<bool>,
    pub roi: WindowRect,
}

impl MaskVolume {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|v| **v).count()
    }
}

/// Explicit flux-form scheme with 4 neighbors and zero flux across the
/// frame border, so the pixel sum is preserved.
pub fn anisotropic_diffuse(frame: ArrayView2<'_, f64>, p: &DiffusionParams) -> Array2<f64> {
    let mut u = frame.to_owned();
    let (h, w) = u.dim();
    let conduct = |g: f64| (-(g / p.kappa).powi(2)).exp() * g;
    let mut du = Array2::<f64>::zeros((h, w));
    for _ in 0..p.iterations {
        du.fill(0.0);
        for r in 0..h {
            for c in 0..w {
                if c + 1 < w {
                    let f = conduct(u[[r, c + 1]] - u[[r, c]]);
                    du[[r, c]] += f;
                    du[[r, c + 1]] -= f;
                }
                if r + 1 < h {
                    let f = conduct(u[[r + 1, c]] - u[[r, c]]);
                    du[[r, c]] += f;
                    du[[r + 1, c]] -= f;
                }
            }
        }
        u.scaled_add(p.step, &du);
    }
    u
}

/// Diffuses every frame and keeps pixels above `tau_s` inside `roi`.
pub fn threshold_mask(sparse: &SparseSignal, roi: WindowRect, tau_s: f64, p: &DiffusionParams) -> Result<MaskVolume> {
    p.validate()?;
    let (h, w, frames) = sparse.shape();
    if !roi.fits_in(h, w) {
        return Err(Error::Dimension(format!("ROI {roi:?} outside {h}x{w} frame")));
    }
    let mut data = Array3::from_elem((frames, h, w), false);
    for t in 0..frames {
        let diffused = anisotropic_diffuse(sparse.frame(t), p);
        for r in roi.top..roi.bottom() {
            for c in roi.left..roi.right() {
                data[[t, r, c]] = diffused[[r, c]] > tau_s;
            }
        }
    }
    Ok(MaskVolume { data, roi })
}

/// Offsets of the digital disk `dx^2 + dy^2 <= (radius + 0.5)^2`; radius 1
/// is the 3x3 square.
pub fn disk_offsets(radius: usize) -> Vec<(isize, isize)> {
    let r = radius as isize;
    let lim = (radius as f64 + 0.5).powi(2);
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if ((dx * dx + dy * dy) as f64) <= lim {
                out.push((dy, dx));
            }
        }
    }
    out
}

fn in_domain(domain: &WindowRect, r: isize, c: isize) -> bool {
    r >= 0 && c >= 0 && domain.contains(r as usize, c as usize)
}

/// Erosion over the `domain` rectangle. Element offsets that leave the
/// domain are ignored, so a shape cut by the domain edge is not eaten from
/// that side.
fn erode(frame: ArrayView2<'_, bool>, se: &[(isize, isize)], domain: &WindowRect) -> Array2<bool> {
    Array2::from_shape_fn(frame.dim(), |(r, c)| {
        frame[[r, c]]
            && se.iter().all(|(dy, dx)| {
                let (rr, cc) = (r as isize + dy, c as isize + dx);
                !in_domain(domain, rr, cc) || frame[[rr as usize, cc as usize]]
            })
    })
}

/// Dilation clipped to the `domain` rectangle.
fn dilate(frame: ArrayView2<'_, bool>, se: &[(isize, isize)], domain: &WindowRect) -> Array2<bool> {
    let (h, w) = frame.dim();
    let mut out = Array2::from_elem((h, w), false);
    for ((r, c), on) in frame.indexed_iter() {
        if *on {
            for (dy, dx) in se {
                let (rr, cc) = (r as isize + dy, c as isize + dx);
                if in_domain(domain, rr, cc) {
                    out[[rr as usize, cc as usize]] = true;
                }
            }
        }
    }
    out
}

/// Per-frame opening (erosion then dilation) with a disk element, taking the
/// mask's ROI as the image domain. Erosion ignores neighbors outside the
/// domain and dilation is clipped to it, which keeps the pair adjoint and the
/// opening idempotent.
pub fn morphological_open(mask: &MaskVolume, radius: usize) -> MaskVolume {
    let se = disk_offsets(radius);
    let domain = mask.roi;
    let mut data = Array3::from_elem(mask.data.dim(), false);
    for (t, frame) in mask.data.axis_iter(Axis(0)).enumerate() {
        let opened = dilate(erode(frame, &se, &domain).view(), &se, &domain);
        data.index_axis_mut(Axis(0), t).assign(&opened);
    }
    MaskVolume { data, roi: mask.roi }
}

struct DisjointSet {
    parent: Vec<u32>,
}

impl DisjointSet {
    fn find(&mut self, mut i: u32) -> u32 {
        while self.parent[i as usize] != i {
            let p = self.parent[i as usize];
            self.parent[i as usize] = self.parent[p as usize];
            i = p;
        }
        i
    }

    fn union(&mut self, a: u32, b: u32) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi as usize] = lo;
        }
    }
}

/// Preceding neighbors in raster order for a single union-find pass.
fn backward_offsets(conn: Connectivity) -> Vec<(isize, isize, isize)> {
    let mut out = Vec::new();
    for dt in -1..=0isize {
        for dr in -1..=1isize {
            for dc in -1..=1isize {
                if (dt, dr, dc) >= (0, 0, 0) {
                    continue;
                }
                let manhattan = dt.abs() + dr.abs() + dc.abs();
                if conn == Connectivity::TwentySix || manhattan == 1 {
                    out.push((dt, dr, dc));
                }
            }
        }
    }
    out
}

/// Component labels (`0` background, `1..` in raster order of first voxel)
/// and the voxel count of each label.
pub fn label_components_3d(mask: &Array3<bool>, conn: Connectivity) -> (Array3<u32>, Vec<usize>) {
    let (frames, h, w) = mask.dim();
    let idx = |t: usize, r: usize, c: usize| ((t * h + r) * w + c) as u32;
    let mut ds = DisjointSet {
        parent: (0..(frames * h * w) as u32).collect(),
    };
    let offsets = backward_offsets(conn);
    for ((t, r, c), on) in mask.indexed_iter() {
        if !*on {
            continue;
        }
        for (dt, dr, dc) in &offsets {
            let (tt, rr, cc) = (t as isize + dt, r as isize + dr, c as isize + dc);
            if tt < 0 || rr < 0 || cc < 0 || rr as usize >= h || cc as usize >= w {
                continue;
            }
            let (tt, rr, cc) = (tt as usize, rr as usize, cc as usize);
            if mask[[tt, rr, cc]] {
                ds.union(idx(t, r, c), idx(tt, rr, cc));
            }
        }
    }
    let mut labels = Array3::<u32>::zeros((frames, h, w));
    let mut root_label = std::collections::HashMap::new();
    let mut sizes = Vec::new();
    for ((t, r, c), on) in mask.indexed_iter() {
        if *on {
            let root = ds.find(idx(t, r, c));
            let label = *root_label.entry(root).or_insert_with(|| {
                sizes.push(0);
                sizes.len() as u32
            });
            sizes[label as usize - 1] += 1;
            labels[[t, r, c]] = label;
        }
    }
    (labels, sizes)
}

/// Removes 3D components with fewer than `min_voxels` voxels.
pub fn filter_components_3d(mask: &MaskVolume, min_voxels: usize, conn: Connectivity) -> MaskVolume {
    if min_voxels == 0 {
        return mask.clone();
    }
    let (labels, sizes) = label_components_3d(&mask.data, conn);
    let data = labels.mapv(|l| l > 0 && sizes[l as usize - 1] >= min_voxels);
    MaskVolume { data, roi: mask.roi }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentParams {
    pub tau_s: f64,
    pub diffusion: DiffusionParams,
    pub postprocess: bool,
    pub open_radius: usize,
    /// Minimum component size as a fraction of `roi area * T`.
    pub min_voxel_fraction: f64,
    pub connectivity: Connectivity,
}

impl Default for SegmentParams {
    fn default() -> Self {
        Self {
            tau_s: 0.12,
            diffusion: DiffusionParams::default(),
            postprocess: true,
            open_radius: 1,
            min_voxel_fraction: 0.005,
            connectivity: Connectivity::Six,
        }
    }
}

impl SegmentParams {
    pub fn min_voxels(&self, roi: &WindowRect, frames: usize) -> usize {
        (self.min_voxel_fraction * (roi.area() * frames) as f64).round() as usize
    }
}

/// Thresholded mask, optionally followed by opening and component filtering.
pub fn segment(sparse: &SparseSignal, roi: WindowRect, params: &SegmentParams) -> Result<MaskVolume> {
    let mask = threshold_mask(sparse, roi, params.tau_s, &params.diffusion)?;
    if !params.postprocess {
        return Ok(mask);
    }
    let opened = morphological_open(&mask, params.open_radius);
    let min_voxels = params.min_voxels(&roi, sparse.frames());
    Ok(filter_components_3d(&opened, min_voxels, params.connectivity))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::video::Video;

    fn frame_mask(h: usize, w: usize, on: impl Fn(usize, usize) -> bool) -> MaskVolume {
        MaskVolume {
            data: Array3::from_shape_fn((1, h, w), |(_, r, c)| on(r, c)),
            roi: WindowRect::new(0, 0, h, w),
        }
    }

    #[test]
    fn diffusion_no_ops() {
        let c = Array2::from_elem((5, 7), 0.42);
        let out = anisotropic_diffuse(c.view(), &DiffusionParams::default());
        assert!(out.iter().all(|v| (v - 0.42).abs() < 1e-12));
        let f = Array2::from_shape_fn((4, 4), |(r, c)| (r * 4 + c) as f64 / 16.0);
        let p = DiffusionParams { iterations: 0, ..Default::default() };
        assert_eq!(anisotropic_diffuse(f.view(), &p), f);
    }

    #[test]
    fn threshold_geometry() {
        let v = Video::new(Array3::from_elem((3, 8, 9), 1.0), 25.0).unwrap();
        let roi = WindowRect::new(2, 3, 4, 5);
        let m = threshold_mask(&v, roi, 0.5, &DiffusionParams::default()).unwrap();
        for ((_, r, c), on) in m.data.indexed_iter() {
            assert_eq!(*on, roi.contains(r, c));
        }
        assert_eq!(threshold_mask(&v, roi, 1.5, &DiffusionParams::default()).unwrap().count(), 0);
    }

    #[test]
    fn opening_removes_specks_and_keeps_squares() {
        let speck = frame_mask(9, 9, |r, c| r == 4 && c == 4);
        assert_eq!(morphological_open(&speck, 1).count(), 0);
        let square = frame_mask(16, 16, |r, c| (3..13).contains(&r) && (3..13).contains(&c));
        assert_eq!(morphological_open(&square, 1), square);
    }

    #[test]
    fn opening_keeps_shapes_cut_by_the_roi_edge() {
        // A 2-wide band along the left edge of the ROI survives; the same
        // band one column in from the edge is too thin and is removed.
        let roi = WindowRect::new(2, 2, 6, 6);
        let band = |c0: usize| MaskVolume {
            data: Array3::from_shape_fn((1, 10, 10), |(_, r, c)| roi.contains(r, c) && (c0..c0 + 2).contains(&c)),
            roi,
        };
        let edge = band(2);
        assert_eq!(morphological_open(&edge, 1), edge);
        assert_eq!(morphological_open(&band(4), 1).count(), 0);
        let outside = MaskVolume {
            data: Array3::from_elem((1, 10, 10), true),
            roi,
        };
        assert_eq!(morphological_open(&outside, 1).count(), 36);
    }

    #[test]
    fn component_size_rule() {
        let mut data = Array3::from_elem((2, 20, 20), false);
        for t in 0..1 {
            for r in 0..10 {
                for c in 0..10 {
                    data[[t, r, c]] = true;
                }
            }
        }
        data[[1, 15, 15]] = true;
        data[[1, 15, 16]] = true;
        data[[1, 16, 15]] = true;
        let m = MaskVolume { data, roi: WindowRect::new(0, 0, 20, 20) };
        let f = filter_components_3d(&m, 10, Connectivity::Six);
        assert_eq!(f.count(), 100);
        assert_eq!(filter_components_3d(&m, 0, Connectivity::Six), m);
    }

    #[test]
    fn diagonal_voxels_join_only_under_26_connectivity() {
        let mut data = Array3::from_elem((2, 3, 3), false);
        data[[0, 0, 0]] = true;
        data[[1, 1, 1]] = true;
        assert_eq!(label_components_3d(&data, Connectivity::Six).1, vec![1, 1]);
        assert_eq!(label_components_3d(&data, Connectivity::TwentySix).1, vec![2]);
    }

    #[test]
    fn radius_one_disk_is_square() {
        assert_eq!(disk_offsets(1).len(), 9);
        assert_eq!(disk_offsets(0), vec![(0, 0)]);
    }
}
