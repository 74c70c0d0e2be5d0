//! Object localization from a pixel-space attention map: mean thresholding,
//! binary morphological closing, connected-component labeling, and box
//! selection, plus high-resolution object cropping.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::image::{resize_plane, Image, ResizeFilter};
use crate::rollout::{AttentionMap, MapProvenance, MapSpace};

/// Boolean foreground mask with the same dims as its source map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub bits: Array2<bool>,
}

impl BinaryMask {
    pub fn new(bits: Array2<bool>) -> Self {
        BinaryMask { bits }
    }

    pub fn height(&self) -> usize {
        self.bits.nrows()
    }

    pub fn width(&self) -> usize {
        self.bits.ncols()
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// True when every set bit of `self` is also set in `other`.
    pub fn subset_of(&self, other: &BinaryMask) -> bool {
        self.bits
            .iter()
            .zip(other.bits.iter())
            .all(|(&a, &b)| !a || b)
    }
}

/// Axis-aligned rectangle, half-open on the max edge: pixels with
/// `x0 <= x < x1` and `y0 <= y < y1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundingBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BoundingBox {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Result<Self> {
        if x0 >= x1 || y0 >= y1 {
            return Err(Error::Validation(format!(
                "degenerate box ({x0},{y0},{x1},{y1})"
            )));
        }
        Ok(BoundingBox { x0, y0, x1, y1 })
    }

    pub fn full_frame(height: usize, width: usize) -> Result<Self> {
        BoundingBox::new(0, 0, width, height)
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.y0 && y < self.y1 && x >= self.x0 && x < self.x1
    }

    pub fn intersection_area(&self, other: &BoundingBox) -> usize {
        let w = self.x1.min(other.x1).saturating_sub(self.x0.max(other.x0));
        let h = self.y1.min(other.y1).saturating_sub(self.y0.max(other.y0));
        w * h
    }

    /// Intersection over union. Valid boxes have positive area, so the
    /// denominator never vanishes.
    pub fn iou(&self, other: &BoundingBox) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        inter as f64 / union as f64
    }

    /// Scale all coordinates by an integer factor.
    pub fn scaled(&self, factor: usize) -> BoundingBox {
        BoundingBox {
            x0: self.x0 * factor,
            y0: self.y0 * factor,
            x1: self.x1 * factor,
            y1: self.y1 * factor,
        }
    }

    /// Grow the box to at least `min_w`×`min_h`, extending the max edge first
    /// and falling back to the min edge at the frame border.
    pub fn expand_to_min(
        &self,
        min_w: usize,
        min_h: usize,
        frame_h: usize,
        frame_w: usize,
    ) -> BoundingBox {
        let mut b = *self;
        while b.width() < min_w && b.width() < frame_w {
            if b.x1 < frame_w {
                b.x1 += 1;
            } else {
                b.x0 -= 1;
            }
        }
        while b.height() < min_h && b.height() < frame_h {
            if b.y1 < frame_h {
                b.y1 += 1;
            } else {
                b.y0 -= 1;
            }
        }
        b
    }

    /// `x0 y0 x1 y1 score` text form used by the CLI.
    pub fn to_line(&self, score: f64) -> String {
        format!("{} {} {} {} {}", self.x0, self.y0, self.x1, self.y1, score)
    }
}

/// Neighborhood used by component labeling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Connectivity {
    Four,
    #[default]
    Eight,
}

/// How the object component is chosen among the labeled foreground.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ComponentSelect {
    /// Component containing the foreground pixel of globally maximum
    /// attention (first in row-major order on ties).
    #[default]
    MaxPixel,
    /// Component with the highest mean attention (lowest label on ties).
    MaxMean,
}

/// Localization knobs with the defaults used by the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LocalizeConfig {
    pub close_radius: usize,
    pub connectivity: Connectivity,
    pub select: ComponentSelect,
}

impl Default for LocalizeConfig {
    fn default() -> Self {
        LocalizeConfig {
            close_radius: 1,
            connectivity: Connectivity::Eight,
            select: ComponentSelect::MaxPixel,
        }
    }
}

/// Foreground = strictly greater than the arithmetic mean of all values.
pub fn threshold_mean(map: &AttentionMap) -> BinaryMask {
    let mean = map.values.sum() / map.values.len() as f64;
    BinaryMask::new(map.values.mapv(|v| v > mean))
}

/// Binary closing: dilation then erosion with a `(2r+1)`-sided square
/// structuring element. Computed on a mask padded by `r` on every side, so
/// the result equals closing against an infinite empty background restricted
/// to the frame — which keeps the operation extensive and idempotent.
pub fn binary_close(mask: &BinaryMask, se_radius: usize) -> BinaryMask {
    if se_radius == 0 || mask.is_empty() {
        return mask.clone();
    }
    let r = se_radius;
    let (h, w) = (mask.height(), mask.width());
    let (ph, pw) = (h + 2 * r, w + 2 * r);
    let mut padded = Array2::from_elem((ph, pw), false);
    for ((y, x), &b) in mask.bits.indexed_iter() {
        padded[(y + r, x + r)] = b;
    }

    let mut dilated = Array2::from_elem((ph, pw), false);
    for y in 0..ph {
        for x in 0..pw {
            let y_lo = y.saturating_sub(r);
            let x_lo = x.saturating_sub(r);
            'win: for yy in y_lo..=(y + r).min(ph - 1) {
                for xx in x_lo..=(x + r).min(pw - 1) {
                    if padded[(yy, xx)] {
                        dilated[(y, x)] = true;
                        break 'win;
                    }
                }
            }
        }
    }

    // Erosion windows for the cropped-back region lie fully inside the
    // padded array, so no border convention is needed here.
    let mut out = Array2::from_elem((h, w), false);
    for y in 0..h {
        for x in 0..w {
            let cy = y + r;
            let cx = x + r;
            let mut all = true;
            'ewin: for yy in cy - r..=cy + r {
                for xx in cx - r..=cx + r {
                    if !dilated[(yy, xx)] {
                        all = false;
                        break 'ewin;
                    }
                }
            }
            out[(y, x)] = all;
        }
    }
    BinaryMask::new(out)
}

/// Label connected foreground components. Returns a label grid (0 =
/// background, components numbered 1..=count in order of first row-major
/// appearance) and the component count.
pub fn label_components(mask: &BinaryMask, connectivity: Connectivity) -> (Array2<usize>, usize) {
    let (h, w) = (mask.height(), mask.width());
    let mut parent: Vec<usize> = Vec::new();
    let mut raw = Array2::from_elem((h, w), 0usize); // 0 = background, else id+1

    fn find(parent: &mut Vec<usize>, mut i: usize) -> usize {
        while parent[i] != i {
            parent[i] = parent[parent[i]];
            i = parent[i];
        }
        i
    }
    fn union(parent: &mut Vec<usize>, a: usize, b: usize) {
        let ra = find(parent, a);
        let rb = find(parent, b);
        if ra != rb {
            // anchor to the smaller root so earlier pixels win
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            parent[hi] = lo;
        }
    }

    for y in 0..h {
        for x in 0..w {
            if !mask.bits[(y, x)] {
                continue;
            }
            let mut neighbors: Vec<usize> = Vec::with_capacity(4);
            let mut push = |yy: isize, xx: isize, raw: &Array2<usize>| {
                if yy >= 0 && xx >= 0 && (xx as usize) < w {
                    let id = raw[(yy as usize, xx as usize)];
                    if id != 0 {
                        neighbors.push(id - 1);
                    }
                }
            };
            let (yi, xi) = (y as isize, x as isize);
            push(yi - 1, xi, &raw);
            push(yi, xi - 1, &raw);
            if connectivity == Connectivity::Eight {
                push(yi - 1, xi - 1, &raw);
                push(yi - 1, xi + 1, &raw);
            }
            let id = match neighbors.first() {
                None => {
                    parent.push(parent.len());
                    parent.len() - 1
                }
                Some(&first) => {
                    for &n in &neighbors[1..] {
                        union(&mut parent, first, n);
                    }
                    first
                }
            };
            raw[(y, x)] = id + 1;
        }
    }

    // Compact labels in order of first appearance of each root.
    let mut remap: Vec<usize> = vec![0; parent.len()];
    let mut count = 0;
    let mut labels = Array2::from_elem((h, w), 0usize);
    for y in 0..h {
        for x in 0..w {
            let id = raw[(y, x)];
            if id == 0 {
                continue;
            }
            let root = find(&mut parent, id - 1);
            if remap[root] == 0 {
                count += 1;
                remap[root] = count;
            }
            labels[(y, x)] = remap[root];
        }
    }
    (labels, count)
}

/// Tight box of the component holding the chosen pixel/statistic. An empty
/// mask falls back to the full frame so downstream stages keep working.
pub fn select_object_box(
    mask: &BinaryMask,
    map: &AttentionMap,
    connectivity: Connectivity,
    select: ComponentSelect,
) -> Result<BoundingBox> {
    if (mask.height(), mask.width()) != (map.height(), map.width()) {
        return Err(Error::Shape(format!(
            "mask {}x{} does not match map {}x{}",
            mask.height(),
            mask.width(),
            map.height(),
            map.width()
        )));
    }
    if mask.is_empty() {
        return BoundingBox::full_frame(map.height(), map.width());
    }
    let (labels, count) = label_components(mask, connectivity);
    let target = match select {
        ComponentSelect::MaxPixel => {
            let mut best = 0usize;
            let mut best_val = f64::NEG_INFINITY;
            for ((y, x), &label) in labels.indexed_iter() {
                if label != 0 && map.values[(y, x)] > best_val {
                    best_val = map.values[(y, x)];
                    best = label;
                }
            }
            best
        }
        ComponentSelect::MaxMean => {
            let mut sums = vec![0.0; count + 1];
            let mut sizes = vec![0usize; count + 1];
            for ((y, x), &label) in labels.indexed_iter() {
                if label != 0 {
                    sums[label] += map.values[(y, x)];
                    sizes[label] += 1;
                }
            }
            (1..=count)
                .max_by(|&a, &b| {
                    let ma = sums[a] / sizes[a] as f64;
                    let mb = sums[b] / sizes[b] as f64;
                    ma.partial_cmp(&mb)
                        .unwrap()
                        .then(b.cmp(&a)) // lower label wins ties
                })
                .unwrap_or(0)
        }
    };
    let (mut y0, mut x0, mut y1, mut x1) = (usize::MAX, usize::MAX, 0usize, 0usize);
    for ((y, x), &label) in labels.indexed_iter() {
        if label == target {
            y0 = y0.min(y);
            x0 = x0.min(x);
            y1 = y1.max(y + 1);
            x1 = x1.max(x + 1);
        }
    }
    BoundingBox::new(x0, y0, x1, y1)
}

/// threshold → close → select in one call; returns the closed mask too.
pub fn localize_object(
    map: &AttentionMap,
    config: &LocalizeConfig,
) -> Result<(BoundingBox, BinaryMask)> {
    let mask = binary_close(&threshold_mean(map), config.close_radius);
    let bbox = select_object_box(&mask, map, config.connectivity, config.select)?;
    Ok((bbox, mask))
}

/// Re-crop a box found at map scale from the high-resolution source, and crop
/// the map itself over the same region. Both are resized to
/// `working_side`×`working_side` (bilinear).
///
/// The high-res image must be an integer multiple of the map's pixel space
/// with the same factor on both axes. A box thinner than 2 px after rescale
/// is widened before cropping so bilinear resampling stays well-posed.
pub fn crop_object(
    image_highres: &Image,
    map: &AttentionMap,
    box_at_map_scale: &BoundingBox,
    working_side: usize,
) -> Result<(Image, AttentionMap)> {
    let (mh, mw) = (map.height(), map.width());
    let (ih, iw) = (image_highres.height(), image_highres.width());
    if ih % mh != 0 || iw % mw != 0 || ih / mh != iw / mw {
        return Err(Error::Shape(format!(
            "high-res image {ih}x{iw} is not an integer multiple of map {mh}x{mw}"
        )));
    }
    if box_at_map_scale.x1 > mw || box_at_map_scale.y1 > mh {
        return Err(Error::Validation(format!(
            "box ({},{},{},{}) exceeds map {mh}x{mw}",
            box_at_map_scale.x0, box_at_map_scale.y0, box_at_map_scale.x1, box_at_map_scale.y1
        )));
    }
    if working_side == 0 {
        return Err(Error::Config("working side must be >= 1".into()));
    }
    let factor = ih / mh;
    let pixel_box = box_at_map_scale
        .scaled(factor)
        .expand_to_min(2, 2, ih, iw);
    let crop = image_highres.crop(pixel_box.x0, pixel_box.y0, pixel_box.x1, pixel_box.y1)?;
    let object_image = crop.resize(working_side, working_side, ResizeFilter::Bilinear)?;

    let map_box = box_at_map_scale.expand_to_min(2, 2, mh, mw);
    let map_crop = map
        .values
        .slice(ndarray::s![map_box.y0..map_box.y1, map_box.x0..map_box.x1]);
    let resized = resize_plane(map_crop, working_side, working_side, ResizeFilter::Bilinear);
    // Bilinear interpolation of non-negative values stays non-negative.
    let object_map = AttentionMap::new(resized, MapSpace::Pixel, MapProvenance::ObjectCrop)?;
    Ok((object_image, object_map))
}
