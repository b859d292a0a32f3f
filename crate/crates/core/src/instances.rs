//! Connected-component labeling and per-grain crops.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{self, BinaryMask, RgbImage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Connectivity {
    Four,
    Eight,
}

impl Connectivity {
    pub fn from_number(n: u8) -> Result<Self> {
        match n {
            4 => Ok(Connectivity::Four),
            8 => Ok(Connectivity::Eight),
            _ => Err(Error::InvalidConfig(format!(
                "connectivity must be 4 or 8, got {n}"
            ))),
        }
    }
}

/// Component labels, row-major; 0 is background, components are 1..=count
/// in order of their first pixel in raster order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub width: u32,
    pub height: u32,
    pub labels: Vec<u32>,
    pub count: u32,
}

impl LabelMap {
    pub fn get(&self, row: u32, col: u32) -> u32 {
        self.labels[(row * self.width + col) as usize]
    }
}

fn find(parent: &mut [u32], mut x: u32) -> u32 {
    while parent[x as usize] != x {
        parent[x as usize] = parent[parent[x as usize] as usize];
        x = parent[x as usize];
    }
    x
}

fn union(parent: &mut [u32], a: u32, b: u32) {
    let (ra, rb) = (find(parent, a), find(parent, b));
    if ra != rb {
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        parent[hi as usize] = lo;
    }
}

/// Two-pass union-find labeling.
pub fn connected_components(mask: &BinaryMask, connectivity: Connectivity) -> LabelMap {
    let (w, h) = (mask.width(), mask.height());
    let mut provisional = vec![0u32; (w * h) as usize];
    let mut parent = vec![0u32];
    let neighbors: &[(i64, i64)] = match connectivity {
        Connectivity::Four => &[(0, -1), (-1, 0)],
        Connectivity::Eight => &[(0, -1), (-1, -1), (-1, 0), (-1, 1)],
    };
    for r in 0..h {
        for c in 0..w {
            if !mask.get(r, c) {
                continue;
            }
            let mut label = 0;
            for &(dr, dc) in neighbors {
                let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                if nr < 0 || nc < 0 || nc >= w as i64 {
                    continue;
                }
                let l = provisional[(nr as u32 * w + nc as u32) as usize];
                if l == 0 {
                    continue;
                }
                if label == 0 {
                    label = l;
                } else {
                    union(&mut parent, label, l);
                }
            }
            if label == 0 {
                label = parent.len() as u32;
                parent.push(label);
            }
            provisional[(r * w + c) as usize] = label;
        }
    }

    let mut remap = vec![0u32; parent.len()];
    let mut count = 0;
    let labels = provisional
        .iter()
        .map(|&l| {
            if l == 0 {
                return 0;
            }
            let root = find(&mut parent, l) as usize;
            if remap[root] == 0 {
                count += 1;
                remap[root] = count;
            }
            remap[root]
        })
        .collect();
    LabelMap {
        width: w,
        height: h,
        labels,
        count,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractParams {
    /// 4 or 8.
    pub connectivity: u8,
    pub min_area: usize,
    pub pad: u32,
    /// Grow padded crops to at least this many pixels per side, centered on
    /// the grain and shifted to stay inside the image (0 disables).
    pub min_side: u32,
}

impl Default for ExtractParams {
    fn default() -> Self {
        Self {
            connectivity: 8,
            min_area: 30,
            pad: 4,
            min_side: 0,
        }
    }
}

impl ExtractParams {
    pub fn validate(&self) -> Result<Connectivity> {
        if self.min_area == 0 {
            return Err(Error::InvalidConfig("min_area must be at least 1".into()));
        }
        Connectivity::from_number(self.connectivity)
    }
}

/// Half-open (row0, col0, row1, col1).
pub type BoundingBox = (u32, u32, u32, u32);

#[derive(Debug, Clone, PartialEq)]
pub struct GrainInstance {
    pub component_id: u32,
    pub pixel_count: usize,
    pub bounding_box: BoundingBox,
    pub crop: RgbImage,
}

/// One crop per component of at least `min_area` pixels, in label order.
/// Crops span the bounding box grown by `pad` (clamped to the image), then
/// widened to `min_side` where needed. Pixels
/// of other components inside the crop are replaced by the median of the
/// crop border's background pixels; true background is kept as is.
pub fn extract_grains(
    image: &RgbImage,
    mask: &BinaryMask,
    params: &ExtractParams,
) -> Result<Vec<GrainInstance>> {
    let connectivity = params.validate()?;
    if imaging::shape_of(image) != mask.shape() {
        return Err(Error::shape(
            "image vs mask",
            imaging::shape_of(image),
            mask.shape(),
        ));
    }
    let labels = connected_components(mask, connectivity);
    let n = labels.count as usize;
    let mut areas = vec![0usize; n + 1];
    let mut boxes = vec![(u32::MAX, u32::MAX, 0u32, 0u32); n + 1];
    for r in 0..labels.height {
        for c in 0..labels.width {
            let l = labels.get(r, c) as usize;
            if l == 0 {
                continue;
            }
            areas[l] += 1;
            let b = &mut boxes[l];
            *b = (b.0.min(r), b.1.min(c), b.2.max(r + 1), b.3.max(c + 1));
        }
    }

    let mut out = Vec::new();
    for l in 1..=n {
        if areas[l] < params.min_area {
            continue;
        }
        let (r0, c0, r1, c1) = boxes[l];
        let (pr0, pr1) = crop_span(r0, r1, params, labels.height);
        let (pc0, pc1) = crop_span(c0, c1, params, labels.width);
        let fill = crop_fill(image, mask, (pr0, pc0, pr1, pc1));
        let crop = RgbImage::from_fn(pc1 - pc0, pr1 - pr0, |x, y| {
            let (r, c) = (pr0 + y, pc0 + x);
            let owner = labels.get(r, c) as usize;
            if owner == 0 || owner == l {
                *image.get_pixel(c, r)
            } else {
                image::Rgb(fill)
            }
        });
        out.push(GrainInstance {
            component_id: l as u32,
            pixel_count: areas[l],
            bounding_box: (r0, c0, r1, c1),
            crop,
        });
    }
    Ok(out)
}

/// Padded span along one axis of length `len`.
fn crop_span(lo: u32, hi: u32, params: &ExtractParams, len: u32) -> (u32, u32) {
    let mut a = lo.saturating_sub(params.pad);
    let mut b = (hi + params.pad).min(len);
    let want = params.min_side.min(len);
    if b - a < want {
        let start = (lo + hi).saturating_sub(want) / 2;
        a = start.min(len - want);
        b = a + want;
    }
    (a, b)
}

fn crop_fill(image: &RgbImage, mask: &BinaryMask, (r0, c0, r1, c1): BoundingBox) -> [u8; 3] {
    let mut border = Vec::new();
    for r in r0..r1 {
        for c in c0..c1 {
            if r == r0 || r + 1 == r1 || c == c0 || c + 1 == c1 {
                border.push((r, c));
            }
        }
    }
    let background: Vec<_> = border
        .iter()
        .copied()
        .filter(|&(r, c)| !mask.get(r, c))
        .collect();
    let source = if background.is_empty() {
        &border
    } else {
        &background
    };
    let mut channels: [Vec<u8>; 3] = Default::default();
    for &(r, c) in source {
        let p = image.get_pixel(c, r).0;
        for k in 0..3 {
            channels[k].push(p[k]);
        }
    }
    channels.map(|mut v| imaging::median_u8(&mut v))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_from(rows: &[&str]) -> BinaryMask {
        let h = rows.len() as u32;
        let w = rows[0].len() as u32;
        let values = rows
            .iter()
            .flat_map(|r| r.bytes().map(|b| u8::from(b == b'#')))
            .collect();
        BinaryMask::from_values(w, h, values)
    }

    #[test]
    fn empty_mask_has_no_components() {
        let m = BinaryMask::new(5, 4);
        assert_eq!(connected_components(&m, Connectivity::Eight).count, 0);
    }

    #[test]
    fn separated_squares() {
        let m = mask_from(&["###.###", "###.###", "###.###"]);
        let l = connected_components(&m, Connectivity::Four);
        assert_eq!(l.count, 2);
        for id in 1..=2 {
            assert_eq!(l.labels.iter().filter(|&&v| v == id).count(), 9);
        }
        assert_eq!(l.get(0, 0), 1);
        assert_eq!(l.get(0, 4), 2);
    }

    #[test]
    fn corner_touch_depends_on_connectivity() {
        let m = mask_from(&["##..", "##..", "..##", "..##"]);
        assert_eq!(connected_components(&m, Connectivity::Eight).count, 1);
        assert_eq!(connected_components(&m, Connectivity::Four).count, 2);
    }

    #[test]
    fn u_shape_merges_into_one_label() {
        let m = mask_from(&["#.#", "#.#", "###"]);
        let l = connected_components(&m, Connectivity::Four);
        assert_eq!(l.count, 1);
        assert!(l.labels.iter().all(|&v| v <= 1));
    }

    #[test]
    fn labels_follow_raster_order() {
        let m = mask_from(&["...#", "#...", "...."]);
        let l = connected_components(&m, Connectivity::Eight);
        assert_eq!((l.get(0, 3), l.get(1, 0)), (1, 2));
    }

    #[test]
    fn five_by_five_blob() {
        let mut m = BinaryMask::new(12, 10);
        for r in 2..7 {
            for c in 3..8 {
                m.set(r, c, true);
            }
        }
        let img = RgbImage::from_pixel(12, 10, image::Rgb([9, 9, 9]));
        let p = ExtractParams {
            pad: 0,
            min_area: 1,
            ..Default::default()
        };
        let g = extract_grains(&img, &m, &p).unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(g[0].pixel_count, 25);
        assert_eq!(g[0].bounding_box, (2, 3, 7, 8));
        assert_eq!(g[0].crop.dimensions(), (5, 5));
    }

    #[test]
    fn small_blobs_filtered_and_crops_clamped() {
        let mut m = BinaryMask::new(10, 10);
        for c in 0..10 {
            m.set(0, c, true);
        }
        let img = RgbImage::new(10, 10);
        let p = ExtractParams::default();
        assert!(extract_grains(&img, &m, &p).unwrap().is_empty());
        let p = ExtractParams { min_area: 10, ..p };
        let g = extract_grains(&img, &m, &p).unwrap();
        assert_eq!(g[0].crop.dimensions(), (10, 5));
    }

    #[test]
    fn neighbors_are_masked_out_of_crops() {
        let m = mask_from(&["........", ".##..##.", ".##..##.", "........"]);
        let img = RgbImage::from_fn(8, 4, |x, y| {
            if m.get(y, x) {
                image::Rgb([if x < 4 { 200 } else { 100 }, 0, 0])
            } else {
                image::Rgb([10, 10, 10])
            }
        });
        let p = ExtractParams {
            min_area: 1,
            pad: 4,
            ..Default::default()
        };
        let g = extract_grains(&img, &m, &p).unwrap();
        assert_eq!(g.len(), 2);
        assert!(g[0].crop.pixels().all(|px| px.0[0] != 100));
        assert!(g[1].crop.pixels().all(|px| px.0[0] != 200));
        assert_eq!(*g[0].crop.get_pixel(5, 1), image::Rgb([10, 10, 10]));
    }

    #[test]
    fn min_side_grows_and_shifts_inside() {
        let m = mask_from(&["..........", "##........", "##........", ".........."]);
        let p = ExtractParams {
            min_area: 1,
            pad: 0,
            min_side: 6,
            ..Default::default()
        };
        let g = extract_grains(&RgbImage::new(10, 4), &m, &p).unwrap();
        assert_eq!(g[0].crop.dimensions(), (6, 4));
        assert_eq!(g[0].bounding_box, (1, 0, 3, 2));
        assert_eq!(crop_span(4, 6, &p, 10), (2, 8));
        assert_eq!(crop_span(8, 10, &p, 10), (4, 10));
    }

    #[test]
    fn shape_mismatch_reports_both() {
        let err = extract_grains(
            &RgbImage::new(4, 4),
            &BinaryMask::new(5, 4),
            &ExtractParams::default(),
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(4, 4)") && msg.contains("(4, 5)"), "{msg}");
    }

    #[test]
    fn invalid_params() {
        let p = ExtractParams {
            connectivity: 6,
            ..Default::default()
        };
        assert!(p.validate().is_err());
        let p = ExtractParams {
            min_area: 0,
            ..Default::default()
        };
        assert!(p.validate().is_err());
    }
}
