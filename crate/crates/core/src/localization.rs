//! One bounding box per image from a saliency map, scored with IoU.

use crate::error::{Error, Result};
use crate::saliency::SaliencyMap;

/// Axis-aligned pixel box, half-open: rows [row0, row1), cols [col0, col1).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BBox {
    pub row0: usize,
    pub col0: usize,
    pub row1: usize,
    pub col1: usize,
}

impl BBox {
    pub fn new(row0: usize, col0: usize, row1: usize, col1: usize) -> Result<Self> {
        if row0 >= row1 || col0 >= col1 {
            return Err(Error::validation(format!(
                "degenerate box rows [{row0},{row1}) cols [{col0},{col1})"
            )));
        }
        Ok(BBox { row0, col0, row1, col1 })
    }

    pub fn area(&self) -> usize {
        (self.row1 - self.row0) * (self.col1 - self.col0)
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.row0..self.row1).contains(&row) && (self.col0..self.col1).contains(&col)
    }
}

/// Intersection over union with half-open pixel areas.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ih = a.row1.min(b.row1).saturating_sub(a.row0.max(b.row0));
    let iw = a.col1.min(b.col1).saturating_sub(a.col0.max(b.col0));
    let inter = ih * iw;
    if inter == 0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    inter as f64 / union as f64
}

/// A derived box plus whether the degenerate (constant-map) rule fired.
#[derive(Clone, Copy, Debug)]
pub struct LocalizedBox {
    pub bbox: BBox,
    pub degenerate: bool,
}

/// Binarizes the map at `threshold_fraction * max`, labels 4-connected
/// components, and returns the tight box of the largest one (ties broken by
/// smallest (row0, col0)). The component containing the global argmax wins
/// over a larger one so the argmax pixel is always inside the returned box.
/// A constant map yields the full-image box flagged `degenerate`.
pub fn saliency_to_bbox(map: &SaliencyMap, threshold_fraction: f64) -> Result<LocalizedBox> {
    if !(0.0 < threshold_fraction && threshold_fraction < 1.0) {
        return Err(Error::validation(format!(
            "threshold fraction must be in (0, 1), got {threshold_fraction}"
        )));
    }
    let (h, w) = (map.height(), map.width());
    let values = map.values();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let mut argmax = 0usize;
    for (i, &v) in values.iter().enumerate() {
        lo = lo.min(v);
        if v > hi {
            hi = v;
            argmax = i;
        }
    }
    if hi == lo {
        return Ok(LocalizedBox {
            bbox: BBox::new(0, 0, h, w)?,
            degenerate: true,
        });
    }

    let threshold = threshold_fraction * hi;
    let mask: Vec<bool> = values.iter().map(|&v| v >= threshold).collect();

    struct Component {
        area: usize,
        bbox: BBox,
        has_argmax: bool,
    }
    let mut components: Vec<Component> = Vec::new();
    let mut visited = vec![false; h * w];
    let mut stack = Vec::new();
    for start in 0..h * w {
        if !mask[start] || visited[start] {
            continue;
        }
        let (mut r0, mut c0, mut r1, mut c1) = (h, w, 0usize, 0usize);
        let mut area = 0usize;
        let mut has_argmax = false;
        visited[start] = true;
        stack.push(start);
        while let Some(idx) = stack.pop() {
            let (r, c) = (idx / w, idx % w);
            area += 1;
            r0 = r0.min(r);
            c0 = c0.min(c);
            r1 = r1.max(r);
            c1 = c1.max(c);
            has_argmax |= idx == argmax;
            let mut visit = |n: usize| {
                if mask[n] && !visited[n] {
                    visited[n] = true;
                    stack.push(n);
                }
            };
            if r > 0 {
                visit(idx - w);
            }
            if r + 1 < h {
                visit(idx + w);
            }
            if c > 0 {
                visit(idx - 1);
            }
            if c + 1 < w {
                visit(idx + 1);
            }
        }
        components.push(Component {
            area,
            bbox: BBox::new(r0, c0, r1 + 1, c1 + 1)?,
            has_argmax,
        });
    }

    // The argmax always clears the threshold, so its component exists.
    let best = components
        .iter()
        .max_by(|a, b| {
            a.area
                .cmp(&b.area)
                .then_with(|| (b.bbox.row0, b.bbox.col0).cmp(&(a.bbox.row0, a.bbox.col0)))
        })
        .expect("non-constant map has at least one component");
    let chosen = if best.has_argmax {
        best
    } else {
        components
            .iter()
            .find(|c| c.has_argmax)
            .expect("argmax pixel clears the threshold")
    };
    Ok(LocalizedBox {
        bbox: chosen.bbox,
        degenerate: false,
    })
}
