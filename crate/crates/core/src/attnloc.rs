//! Attention-guided localization.
//!
//! Turns a stack of per-token, per-layer, per-head cross-attention maps into a
//! pair of crops (one from the source image, one from the rendering) covering
//! the region the model attended to most:
//!
//! 1. average the stack over heads, layers and tokens ([`reduce_attention`]);
//! 2. min-max scale to 0..=255 ([`normalize_u8`]);
//! 3. keep cells at or above a percentile ([`threshold_percentile`]);
//! 4. label 8-connected regions and keep the largest ([`extract_components`], [`largest_component`]);
//! 5. dilate with a square kernel ([`dilate`]) and take its bounding box ([`bounding_box`]);
//! 6. map the grid box onto each image and crop ([`crop_regions`]).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{PixelRect, RasterImage};

/// Attention maps indexed by (token, layer, head), each `grid_h × grid_w`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionStack {
    n_tokens: usize,
    layers: Vec<usize>,
    n_heads: usize,
    grid_h: usize,
    grid_w: usize,
    /// Layout: `[token][layer][head][row][col]`.
    values: Vec<f64>,
}

impl AttentionStack {
    pub fn new(
        n_tokens: usize,
        layers: Vec<usize>,
        n_heads: usize,
        grid_h: usize,
        grid_w: usize,
        values: Vec<f64>,
    ) -> Result<Self> {
        if grid_h == 0 || grid_w == 0 {
            return Err(Error::InvalidAttention(format!("empty grid {grid_h}x{grid_w}")));
        }
        let expected = n_tokens * layers.len() * n_heads * grid_h * grid_w;
        if values.len() != expected {
            return Err(Error::InvalidAttention(format!(
                "expected {expected} values for dims ({n_tokens}, {}, {n_heads}, {grid_h}, {grid_w}), got {}",
                layers.len(),
                values.len()
            )));
        }
        if let Some(bad) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::InvalidAttention(format!("attention weight {bad} is not a finite non-negative value")));
        }
        Ok(Self {
            n_tokens,
            layers,
            n_heads,
            grid_h,
            grid_w,
            values,
        })
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    pub fn layers(&self) -> &[usize] {
        &self.layers
    }

    pub fn n_heads(&self) -> usize {
        self.n_heads
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.grid_h, self.grid_w)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_empty(&self) -> bool {
        self.n_tokens == 0 || self.layers.is_empty() || self.n_heads == 0
    }

    /// The map for one (token, layer slot, head) triple.
    pub fn map(&self, token: usize, layer_slot: usize, head: usize) -> &[f64] {
        let cells = self.grid_h * self.grid_w;
        let idx = (token * self.layers.len() + layer_slot) * self.n_heads + head;
        &self.values[idx * cells..(idx + 1) * cells]
    }
}

/// Real-valued `grid_h × grid_w` matrix, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    pub grid_h: usize,
    pub grid_w: usize,
    pub values: Vec<f64>,
}

impl SaliencyMap {
    pub fn new(grid_h: usize, grid_w: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), grid_h * grid_w, "saliency shape mismatch");
        Self { grid_h, grid_w, values }
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.grid_w + col]
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    pub grid_h: usize,
    pub grid_w: usize,
    /// Each entry is 0 or 255.
    pub values: Vec<u8>,
}

impl BinaryMask {
    pub fn empty(grid_h: usize, grid_w: usize) -> Self {
        Self {
            grid_h,
            grid_w,
            values: vec![0; grid_h * grid_w],
        }
    }

    #[inline]
    pub fn is_set(&self, row: usize, col: usize) -> bool {
        self.values[row * self.grid_w + col] != 0
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize) {
        self.values[row * self.grid_w + col] = 255;
    }

    pub fn count(&self) -> usize {
        self.values.iter().filter(|v| **v != 0).count()
    }

    pub fn white_pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let w = self.grid_w;
        self.values
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0)
            .map(move |(i, _)| (i / w, i % w))
    }
}

/// An 8-connected set of white cells.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Component {
    /// Cells in row-major order.
    pub pixels: Vec<(usize, usize)>,
    /// Lexicographically smallest (row, col) of the component.
    pub seed: (usize, usize),
}

impl Component {
    pub fn area(&self) -> usize {
        self.pixels.len()
    }
}

/// Axis-aligned box in grid cells.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

impl BoundingBox {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        col >= self.x && col < self.x + self.w && row >= self.y && row < self.y + self.h
    }
}

/// Mean over every (token, layer, head) map: per-token means first, then the mean over tokens.
pub fn reduce_attention(stack: &AttentionStack) -> Result<SaliencyMap> {
    if stack.is_empty() {
        return Err(Error::InvalidAttention("attention stack is empty".into()));
    }
    let cells = stack.grid_h * stack.grid_w;
    let per_token = (stack.layers.len() * stack.n_heads) as f64;
    let mut total = vec![0.0; cells];
    let mut token_sum = vec![0.0; cells];
    for token in 0..stack.n_tokens {
        token_sum.iter_mut().for_each(|v| *v = 0.0);
        for slot in 0..stack.layers.len() {
            for head in 0..stack.n_heads {
                for (acc, v) in token_sum.iter_mut().zip(stack.map(token, slot, head)) {
                    *acc += v;
                }
            }
        }
        for (acc, v) in total.iter_mut().zip(&token_sum) {
            *acc += v / per_token;
        }
    }
    let n = stack.n_tokens as f64;
    Ok(SaliencyMap::new(
        stack.grid_h,
        stack.grid_w,
        total.into_iter().map(|v| v / n).collect(),
    ))
}

/// Min-max scales to integers in 0..=255, rounding half away from zero.
/// A constant (or non-finite) range maps every cell to 0.
pub fn normalize_u8(map: &SaliencyMap) -> SaliencyMap {
    let (min, max) = map
        .values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = max - min;
    let values = if !(range.is_finite() && range > 0.0) {
        vec![0.0; map.values.len()]
    } else {
        map.values
            .iter()
            .map(|v| (255.0 * (v - min) / range).round().clamp(0.0, 255.0))
            .collect()
    };
    SaliencyMap::new(map.grid_h, map.grid_w, values)
}

/// Linear-interpolation percentile at rank `p/100 · (N−1)`.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let rank = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// White (255) where the value is at least the `p`-th percentile.
pub fn threshold_percentile(map: &SaliencyMap, p: f64) -> BinaryMask {
    let tau = percentile(&map.values, p);
    BinaryMask {
        grid_h: map.grid_h,
        grid_w: map.grid_w,
        values: map.values.iter().map(|&v| if v >= tau { 255 } else { 0 }).collect(),
    }
}

/// Maximal 8-connected components of the white cells, ordered by seed.
pub fn extract_components(mask: &BinaryMask) -> Vec<Component> {
    let (h, w) = (mask.grid_h, mask.grid_w);
    let mut visited = vec![false; h * w];
    let mut components = Vec::new();
    let mut stack = Vec::new();
    for start in 0..h * w {
        if visited[start] || mask.values[start] == 0 {
            continue;
        }
        visited[start] = true;
        stack.push(start);
        let mut cells = Vec::new();
        while let Some(i) = stack.pop() {
            cells.push(i);
            let (r, c) = (i / w, i % w);
            for nr in r.saturating_sub(1)..=(r + 1).min(h - 1) {
                for nc in c.saturating_sub(1)..=(c + 1).min(w - 1) {
                    let j = nr * w + nc;
                    if !visited[j] && mask.values[j] != 0 {
                        visited[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        cells.sort_unstable();
        components.push(Component {
            seed: (start / w, start % w),
            pixels: cells.into_iter().map(|i| (i / w, i % w)).collect(),
        });
    }
    components
}

/// Largest component by area; ties go to the smallest seed.
pub fn largest_component(components: &[Component]) -> Result<&Component> {
    components
        .iter()
        .min_by(|a, b| b.area().cmp(&a.area()).then(a.seed.cmp(&b.seed)))
        .ok_or(Error::NoSalientRegion)
}

/// Union of the `kernel × kernel` neighbourhoods of the component's cells, clipped to the grid.
pub fn dilate(component: &Component, kernel: usize, grid_h: usize, grid_w: usize) -> Result<BinaryMask> {
    if kernel == 0 || kernel % 2 == 0 {
        return Err(Error::Config(format!("dilation kernel must be odd and positive, got {kernel}")));
    }
    let radius = kernel / 2;
    let mut out = BinaryMask::empty(grid_h, grid_w);
    for &(r, c) in &component.pixels {
        for nr in r.saturating_sub(radius)..=(r + radius).min(grid_h - 1) {
            for nc in c.saturating_sub(radius)..=(c + radius).min(grid_w - 1) {
                out.set(nr, nc);
            }
        }
    }
    Ok(out)
}

pub fn bounding_box(mask: &BinaryMask) -> Result<BoundingBox> {
    let mut cells = mask.white_pixels();
    let (r0, c0) = cells.next().ok_or(Error::NoSalientRegion)?;
    let (mut top, mut bottom, mut left, mut right) = (r0, r0, c0, c0);
    for (r, c) in cells {
        top = top.min(r);
        bottom = bottom.max(r);
        left = left.min(c);
        right = right.max(c);
    }
    Ok(BoundingBox {
        x: left,
        y: top,
        w: right - left + 1,
        h: bottom - top + 1,
    })
}

/// Maps a grid box onto an image of the given size, rounding outward and clamping.
pub fn grid_box_to_pixels(bbox: BoundingBox, grid: (usize, usize), width: usize, height: usize) -> PixelRect {
    let (grid_h, grid_w) = grid;
    let floor_div = |a: usize, b: usize| a / b;
    let ceil_div = |a: usize, b: usize| a.div_ceil(b);
    PixelRect {
        left: floor_div(bbox.x * width, grid_w).min(width),
        top: floor_div(bbox.y * height, grid_h).min(height),
        right: ceil_div((bbox.x + bbox.w) * width, grid_w).min(width),
        bottom: ceil_div((bbox.y + bbox.h) * height, grid_h).min(height),
    }
}

/// Crops the same grid region out of the source image and the rendering.
pub fn crop_regions(
    source: &RasterImage,
    rendered: &RasterImage,
    bbox: BoundingBox,
    grid: (usize, usize),
) -> Result<(RasterImage, RasterImage, PixelRect, PixelRect)> {
    if bbox.w == 0 || bbox.h == 0 || bbox.x + bbox.w > grid.1 || bbox.y + bbox.h > grid.0 {
        return Err(Error::Precondition(format!("box {bbox:?} outside grid {grid:?}")));
    }
    let rect_a = grid_box_to_pixels(bbox, grid, source.width(), source.height());
    let rect_b = grid_box_to_pixels(bbox, grid, rendered.width(), rendered.height());
    if rect_a.is_empty() || rect_b.is_empty() {
        return Err(Error::NoSalientRegion);
    }
    Ok((source.crop(rect_a)?, rendered.crop(rect_b)?, rect_a, rect_b))
}

#[derive(Clone, Copy, Debug)]
pub struct LocalizeParams {
    pub percentile: f64,
    pub dilation_kernel: usize,
}

/// Every intermediate of one localization, kept for debugging overlays.
#[derive(Clone, Debug)]
pub struct Localization {
    pub saliency: SaliencyMap,
    pub normalized: SaliencyMap,
    pub mask: BinaryMask,
    pub component: Component,
    pub dilated: BinaryMask,
    pub bbox: BoundingBox,
    pub rect_source: PixelRect,
    pub rect_rendered: PixelRect,
    pub region_source: RasterImage,
    pub region_rendered: RasterImage,
}

pub fn localize(
    source: &RasterImage,
    rendered: &RasterImage,
    stack: &AttentionStack,
    params: LocalizeParams,
) -> Result<Localization> {
    let saliency = reduce_attention(stack)?;
    let normalized = normalize_u8(&saliency);
    let mask = threshold_percentile(&normalized, params.percentile);
    let components = extract_components(&mask);
    let component = largest_component(&components)?.clone();
    let dilated = dilate(&component, params.dilation_kernel, mask.grid_h, mask.grid_w)?;
    let bbox = bounding_box(&dilated)?;
    let grid = stack.grid();
    let (region_source, region_rendered, rect_source, rect_rendered) = crop_regions(source, rendered, bbox, grid)?;
    Ok(Localization {
        saliency,
        normalized,
        mask,
        component,
        dilated,
        bbox,
        rect_source,
        rect_rendered,
        region_source,
        region_rendered,
    })
}

/// RGB debug overlay: dilated mask tinted red, bounding box outlined in blue.
pub fn overlay(image: &RasterImage, loc: &Localization) -> image::RgbImage {
    let (w, h) = (image.width(), image.height());
    let grid = (loc.dilated.grid_h, loc.dilated.grid_w);
    let mut out = image::RgbImage::new(w as u32, h as u32);
    for row in 0..h {
        for col in 0..w {
            let v = image.get(row, col);
            let gr = row * grid.0 / h;
            let gc = col * grid.1 / w;
            let px = if loc.dilated.is_set(gr, gc) {
                [v / 2 + 127, v / 2, v / 2]
            } else {
                [v, v, v]
            };
            out.put_pixel(col as u32, row as u32, image::Rgb(px));
        }
    }
    let r = loc.rect_source;
    if !r.is_empty() {
        let blue = image::Rgb([0, 0, 255]);
        for col in r.left..r.right {
            out.put_pixel(col as u32, r.top as u32, blue);
            out.put_pixel(col as u32, (r.bottom - 1) as u32, blue);
        }
        for row in r.top..r.bottom {
            out.put_pixel(r.left as u32, row as u32, blue);
            out.put_pixel((r.right - 1) as u32, row as u32, blue);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(rows: &[&[f64]]) -> SaliencyMap {
        SaliencyMap::new(rows.len(), rows[0].len(), rows.iter().flat_map(|r| r.iter().copied()).collect())
    }

    fn mask_from(h: usize, w: usize, cells: &[(usize, usize)]) -> BinaryMask {
        let mut m = BinaryMask::empty(h, w);
        for &(r, c) in cells {
            m.set(r, c);
        }
        m
    }

    fn single(cells: &[(usize, usize)]) -> Component {
        let mut pixels = cells.to_vec();
        pixels.sort_unstable();
        Component { seed: pixels[0], pixels }
    }

    #[test]
    fn reduce_identity_and_average() {
        let m: Vec<f64> = (0..6).map(|v| v as f64 * 0.5).collect();
        let stack = AttentionStack::new(1, vec![0], 1, 2, 3, m.clone()).unwrap();
        assert_eq!(reduce_attention(&stack).unwrap().values, m);

        let mut vals = vec![0.0; 4];
        vals.extend([2.0; 4]);
        let stack = AttentionStack::new(1, vec![3], 2, 2, 2, vals).unwrap();
        assert_eq!(reduce_attention(&stack).unwrap().values, vec![1.0; 4]);
    }

    #[test]
    fn reduce_rejects_empty() {
        let stack = AttentionStack::new(0, vec![0], 1, 2, 2, vec![]).unwrap();
        assert!(reduce_attention(&stack).is_err());
        assert!(AttentionStack::new(1, vec![0], 1, 1, 1, vec![-1.0]).is_err());
        assert!(AttentionStack::new(1, vec![0], 1, 1, 2, vec![1.0]).is_err());
    }

    #[test]
    fn normalize_examples() {
        let out = normalize_u8(&map(&[&[0.0, 2.0], &[1.0, 2.0]]));
        assert_eq!(out.values, vec![0.0, 255.0, 128.0, 255.0]);
        let out = normalize_u8(&map(&[&[3.0, 3.0], &[3.0, 3.0]]));
        assert_eq!(out.values, vec![0.0; 4]);
    }

    #[test]
    fn threshold_examples() {
        let grid = SaliencyMap::new(4, 4, (0..16).map(f64::from).collect());
        assert_eq!(percentile(&grid.values, 75.0), 11.25);
        let mask = threshold_percentile(&grid, 75.0);
        let white: Vec<_> = mask.values.iter().enumerate().filter(|(_, v)| **v == 255).map(|(i, _)| i).collect();
        assert_eq!(white, [12, 13, 14, 15]);

        let constant = SaliencyMap::new(3, 3, vec![7.0; 9]);
        assert_eq!(threshold_percentile(&constant, 75.0).count(), 9);

        let mut vals = vec![0.0; 12];
        vals.extend([255.0; 4]);
        let grid = SaliencyMap::new(4, 4, vals);
        assert_eq!(percentile(&grid.values, 75.0), 63.75);
        let mask = threshold_percentile(&grid, 75.0);
        assert_eq!(mask.values[12..], [255; 4]);
        assert_eq!(mask.count(), 4);
    }

    #[test]
    fn components_use_eight_connectivity() {
        let comps = extract_components(&mask_from(4, 4, &[(2, 2)]));
        assert_eq!(comps.len(), 1);
        assert_eq!(comps[0].area(), 1);

        let comps = extract_components(&mask_from(4, 4, &[(0, 0), (1, 1)]));
        assert_eq!(comps.len(), 1);
        assert_eq!(comps[0].pixels, vec![(0, 0), (1, 1)]);

        assert!(extract_components(&BinaryMask::empty(3, 3)).is_empty());
    }

    #[test]
    fn largest_prefers_area_then_seed() {
        let small = single(&[(0, 0), (0, 1), (1, 0), (1, 1)]);
        let big = single(&[(5, 5), (5, 6), (5, 7), (6, 5), (6, 6), (6, 7), (7, 5), (7, 6), (7, 7)]);
        let comps = [small, big.clone()];
        assert_eq!(largest_component(&comps).unwrap(), &big);

        let a = single(&[(0, 5), (0, 6)]);
        let b = single(&[(0, 0), (0, 1)]);
        let comps = [a, b.clone()];
        assert_eq!(largest_component(&comps).unwrap(), &b);

        assert!(matches!(largest_component(&[]), Err(Error::NoSalientRegion)));
    }

    #[test]
    fn dilate_examples() {
        let out = dilate(&single(&[(5, 5)]), 3, 16, 16).unwrap();
        let cells: Vec<_> = out.white_pixels().collect();
        let expected: Vec<_> = (4..=6).flat_map(|r| (4..=6).map(move |c| (r, c))).collect();
        assert_eq!(cells, expected);

        let out = dilate(&single(&[(0, 0)]), 3, 16, 16).unwrap();
        assert_eq!(out.white_pixels().collect::<Vec<_>>(), vec![(0, 0), (0, 1), (1, 0), (1, 1)]);

        assert!(dilate(&single(&[(0, 0)]), 2, 4, 4).is_err());
    }

    #[test]
    fn bounding_box_examples() {
        let m = mask_from(8, 8, &[(2, 3), (4, 7)]);
        assert_eq!(bounding_box(&m).unwrap(), BoundingBox { x: 3, y: 2, w: 5, h: 3 });
        let m = mask_from(8, 8, &[(6, 1)]);
        assert_eq!(bounding_box(&m).unwrap(), BoundingBox { x: 1, y: 6, w: 1, h: 1 });
        assert!(matches!(bounding_box(&BinaryMask::empty(2, 2)), Err(Error::NoSalientRegion)));
    }

    #[test]
    fn crop_scaling() {
        let a = RasterImage::from_fn(256, 256, |r, c| ((r + c) % 256) as u8).unwrap();
        let bbox = BoundingBox { x: 2, y: 1, w: 2, h: 1 };
        let (ra, rb, rect, _) = crop_regions(&a, &a, bbox, (8, 8)).unwrap();
        assert_eq!(rect, PixelRect { left: 64, top: 32, right: 128, bottom: 64 });
        assert_eq!((ra.width(), ra.height()), (64, 32));
        assert_eq!(ra, rb);

        let b = RasterImage::white(250, 100).unwrap();
        let (_, rb, _, rect) = crop_regions(&a, &b, bbox, (8, 8)).unwrap();
        assert_eq!(rect, PixelRect { left: 62, top: 12, right: 125, bottom: 25 });
        assert_eq!((rb.width(), rb.height()), (63, 13));

        let full = BoundingBox { x: 0, y: 0, w: 8, h: 8 };
        let (ra, rb, _, _) = crop_regions(&a, &b, full, (8, 8)).unwrap();
        assert_eq!(ra, a);
        assert_eq!(rb, b);
    }

    #[test]
    fn crop_rejects_degenerate_rect() {
        // a 1-pixel-wide image mapped from a wide grid still gets a non-empty column
        let thin = RasterImage::white(1, 10).unwrap();
        let bbox = BoundingBox { x: 3, y: 0, w: 1, h: 1 };
        let (r, _, _, _) = crop_regions(&thin, &thin, bbox, (4, 8)).unwrap();
        assert_eq!(r.width(), 1);
        assert!(crop_regions(&thin, &thin, BoundingBox { x: 8, y: 0, w: 1, h: 1 }, (4, 8)).is_err());
    }

    #[test]
    fn localize_constant_stack_gives_full_image() {
        let stack = AttentionStack::new(2, vec![0, 1], 2, 4, 6, vec![0.3; 2 * 2 * 2 * 24]).unwrap();
        let img = RasterImage::from_fn(60, 40, |r, c| (r * c % 256) as u8).unwrap();
        let loc = localize(
            &img,
            &img,
            &stack,
            LocalizeParams {
                percentile: 75.0,
                dilation_kernel: 3,
            },
        )
        .unwrap();
        assert_eq!(loc.bbox, BoundingBox { x: 0, y: 0, w: 6, h: 4 });
        assert_eq!(loc.region_source, img);
    }

    #[test]
    fn localize_sharp_peak() {
        let (h, w) = (8, 8);
        let mut vals = vec![0.01; h * w];
        vals[3 * w + 5] = 1.0;
        let stack = AttentionStack::new(1, vec![13], 1, h, w, vals).unwrap();
        let img = RasterImage::white(80, 80).unwrap();
        let loc = localize(
            &img,
            &img,
            &stack,
            LocalizeParams {
                percentile: 75.0,
                dilation_kernel: 3,
            },
        )
        .unwrap();
        // the 75th percentile of a one-peak grid is the background level, so the
        // whole grid is white; a peak that dominates needs a higher percentile
        assert_eq!(loc.bbox, BoundingBox { x: 0, y: 0, w: 8, h: 8 });

        let loc = localize(
            &img,
            &img,
            &stack,
            LocalizeParams {
                percentile: 99.0,
                dilation_kernel: 3,
            },
        )
        .unwrap();
        assert_eq!(loc.bbox, BoundingBox { x: 4, y: 2, w: 3, h: 3 });
    }
}
