//! Patch-SaliMap: pick the m highest-scoring saliency points with spatial
//! suppression between picks, then crop label-inheriting patches centered on
//! them.

use crate::error::{Error, Result};
use crate::mil::{Bag, Dataset};
use crate::saliency::SaliencyMap;
use crate::tensor::Tensor;

/// How many patches per bag, how large, and how far apart the picks must be.
#[derive(Clone, Copy, Debug)]
pub struct PatchSpec {
    /// Instances per bag.
    pub m: usize,
    /// Square patch side, in image pixels.
    pub patch_size: usize,
    /// Side of the square suppressed around each pick, in image pixels.
    pub suppression_window: usize,
}

impl PatchSpec {
    pub fn new(m: usize, patch_size: usize, suppression_window: usize) -> Result<Self> {
        if m == 0 {
            return Err(Error::validation("need at least one instance per bag"));
        }
        if patch_size == 0 || suppression_window == 0 {
            return Err(Error::validation("patch and suppression sizes must be positive"));
        }
        Ok(PatchSpec {
            m,
            patch_size,
            suppression_window,
        })
    }
}

/// A saliency-ranked pick on the upscaled map, in image coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SelectedPoint {
    pub row: usize,
    pub col: usize,
    pub score: f64,
}

/// A labeled patch cut from a bag.
#[derive(Clone, Debug)]
pub struct Instance {
    pub pixels: Tensor,
    pub label: u8,
    pub bag_id: String,
    /// 1..=m by descending saliency score.
    pub rank: usize,
    /// Effective crop center in source-image coordinates (shifted inward at
    /// borders so the patch fits).
    pub center: (usize, usize),
    pub score: f64,
}

/// Iteratively picks the global maximum (ties broken by smallest row, then
/// smallest column), suppressing a square of side `suppression_window`
/// around each pick before the next one. If suppression exhausts the map
/// before m picks, the remaining picks are the first positions not yet taken,
/// in row-major order, with score 0.
pub fn select_points(map: &SaliencyMap, spec: &PatchSpec) -> Result<Vec<SelectedPoint>> {
    if spec.m == 0 {
        return Err(Error::validation("need at least one instance per bag"));
    }
    let (h, w) = (map.height(), map.width());
    let mut work = map.values().to_vec();
    let radius = spec.suppression_window / 2;
    let mut picks: Vec<SelectedPoint> = Vec::with_capacity(spec.m);

    for _ in 0..spec.m {
        let mut best: Option<(usize, f64)> = None;
        for (idx, &v) in work.iter().enumerate() {
            if v == f64::NEG_INFINITY {
                continue;
            }
            match best {
                // strict > keeps the row-major earliest among ties
                Some((_, bv)) if v <= bv => {}
                _ => best = Some((idx, v)),
            }
        }
        match best {
            Some((idx, score)) => {
                let (r, c) = (idx / w, idx % w);
                picks.push(SelectedPoint { row: r, col: c, score });
                let r0 = r.saturating_sub(radius);
                let r1 = (r + radius).min(h - 1);
                let c0 = c.saturating_sub(radius);
                let c1 = (c + radius).min(w - 1);
                for rr in r0..=r1 {
                    for v in &mut work[rr * w + c0..=rr * w + c1] {
                        *v = f64::NEG_INFINITY;
                    }
                }
            }
            None => break,
        }
    }

    // Exhausted map: fill with untaken positions in row-major order.
    if picks.len() < spec.m {
        let taken: std::collections::HashSet<(usize, usize)> =
            picks.iter().map(|p| (p.row, p.col)).collect();
        'fill: for r in 0..h {
            for c in 0..w {
                if picks.len() == spec.m {
                    break 'fill;
                }
                if !taken.contains(&(r, c)) {
                    picks.push(SelectedPoint { row: r, col: c, score: 0.0 });
                }
            }
        }
        // Maps smaller than m: repeat positions row-major so the cardinality
        // contract still holds.
        let mut idx = 0;
        while picks.len() < spec.m {
            picks.push(SelectedPoint {
                row: idx / w,
                col: idx % w,
                score: 0.0,
            });
            idx = (idx + 1) % (h * w);
        }
    }
    Ok(picks)
}

/// Top-left corner of a `size`-sided square nominally centered at `center`,
/// shifted inward the minimal amount so it fits in an h×w image. The nominal
/// window for center r is rows [r - floor(size/2), r + ceil(size/2) - 1].
pub fn crop_window(h: usize, w: usize, center: (usize, usize), size: usize) -> Result<(usize, usize)> {
    if size == 0 {
        return Err(Error::validation("patch size must be positive"));
    }
    if size > h || size > w {
        return Err(Error::validation(format!(
            "patch size {size} exceeds image {h}x{w}"
        )));
    }
    let half = size / 2;
    let r0 = center.0.saturating_sub(half).min(h - size);
    let c0 = center.1.saturating_sub(half).min(w - size);
    Ok((r0, c0))
}

/// Square crop of a `[c, H, W]` image centered at `center`, border-shifted.
pub fn crop_patch(image: &Tensor, center: (usize, usize), size: usize) -> Result<Tensor> {
    let shape = image.shape();
    if shape.len() != 3 {
        return Err(Error::dimension(format!(
            "crop_patch expects [c, h, w], got {shape:?}"
        )));
    }
    let (ch, h, w) = (shape[0], shape[1], shape[2]);
    let (r0, c0) = crop_window(h, w, center, size)?;
    let mut out = vec![0.0; ch * size * size];
    let data = image.data();
    for ci in 0..ch {
        for r in 0..size {
            let src = ci * h * w + (r0 + r) * w + c0;
            let dst = ci * size * size + r * size;
            out[dst..dst + size].copy_from_slice(&data[src..src + size]);
        }
    }
    Tensor::new(vec![ch, size, size], out)
}

/// The instance set for one bag: m ranked, label-inheriting patches.
pub fn instances_for_bag(bag: &Bag, map: &SaliencyMap, spec: &PatchSpec) -> Result<Vec<Instance>> {
    let shape = bag.image.shape();
    let (h, w) = (shape[1], shape[2]);
    if (map.height(), map.width()) != (h, w) {
        return Err(Error::dimension(format!(
            "saliency map {}x{} does not match image {h}x{w}",
            map.height(),
            map.width()
        )));
    }
    let points = select_points(map, spec)?;
    let half = spec.patch_size / 2;
    let mut out = Vec::with_capacity(points.len());
    for (j, p) in points.iter().enumerate() {
        let pixels = crop_patch(&bag.image, (p.row, p.col), spec.patch_size)?;
        let (r0, c0) = crop_window(h, w, (p.row, p.col), spec.patch_size)?;
        out.push(Instance {
            pixels,
            label: bag.label,
            bag_id: bag.id.clone(),
            rank: j + 1,
            center: (r0 + half, c0 + half),
            score: p.score,
        });
    }
    Ok(out)
}

/// Runs saliency + selection + cropping over every bag. Output order is
/// deterministic: bag order, then rank.
pub fn build_instance_dataset<F>(
    bags: &Dataset,
    mut saliency_fn: F,
    spec: &PatchSpec,
) -> Result<Vec<Instance>>
where
    F: FnMut(&Bag) -> Result<SaliencyMap>,
{
    let mut out = Vec::with_capacity(bags.len() * spec.m);
    for bag in &bags.bags {
        let map = saliency_fn(bag).map_err(|e| {
            Error::state(format!("saliency failed on bag {}: {e}", bag.id))
        })?;
        out.extend(instances_for_bag(bag, &map, spec)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mil::Split;

    fn map(h: usize, w: usize, values: Vec<f64>) -> SaliencyMap {
        SaliencyMap::new(h, w, values).unwrap()
    }

    #[test]
    fn constant_map_row_major_tie_break() {
        let m = map(3, 3, vec![0.5; 9]);
        let spec = PatchSpec::new(2, 1, 1).unwrap();
        let picks = select_points(&m, &spec).unwrap();
        assert_eq!((picks[0].row, picks[0].col), (0, 0));
        assert_eq!((picks[1].row, picks[1].col), (0, 1));
    }

    #[test]
    fn two_largest_entries() {
        let m = map(2, 2, vec![0.1, 0.9, 0.8, 0.2]);
        let spec = PatchSpec::new(2, 1, 1).unwrap();
        let picks = select_points(&m, &spec).unwrap();
        assert_eq!(picks[0], SelectedPoint { row: 0, col: 1, score: 0.9 });
        assert_eq!(picks[1], SelectedPoint { row: 1, col: 0, score: 0.8 });
    }

    #[test]
    fn plateau_with_suppression() {
        // 3x3 plateau of 1.0 centered at (5,5) in an 11x11 map
        let mut values = vec![0.0; 121];
        for r in 4..=6 {
            for c in 4..=6 {
                values[r * 11 + c] = 1.0;
            }
        }
        let m = map(11, 11, values);
        let spec = PatchSpec::new(2, 3, 3).unwrap();
        let picks = select_points(&m, &spec).unwrap();
        assert_eq!((picks[0].row, picks[0].col), (4, 4));
        // second pick must be outside the suppressed square rows/cols 3..=5
        let (r, c) = (picks[1].row, picks[1].col);
        assert!(r > 5 || c > 5, "second pick ({r},{c}) inside suppressed square");
        assert_eq!(picks[1].score, 1.0);
    }

    #[test]
    fn exhausted_map_fills_row_major() {
        let m = map(1, 2, vec![0.3, 0.7]);
        // window 5 suppresses the whole 1x2 map after the first pick
        let spec = PatchSpec::new(3, 1, 5).unwrap();
        let picks = select_points(&m, &spec).unwrap();
        assert_eq!((picks[0].row, picks[0].col, picks[0].score), (0, 1, 0.7));
        assert_eq!((picks[1].row, picks[1].col, picks[1].score), (0, 0, 0.0));
        // all positions taken: wraps around row-major
        assert_eq!((picks[2].row, picks[2].col, picks[2].score), (0, 0, 0.0));
    }

    #[test]
    fn crop_full_image() {
        let img = Tensor::new(vec![1, 4, 4], (0..16).map(f64::from).collect()).unwrap();
        let out = crop_patch(&img, (2, 2), 4).unwrap();
        assert_eq!(out.data(), img.data());
    }

    #[test]
    fn crop_corner_shifts_inward() {
        let img = Tensor::new(vec![1, 10, 10], (0..100).map(f64::from).collect()).unwrap();
        let out = crop_patch(&img, (0, 0), 4).unwrap();
        // rows 0..=3, cols 0..=3
        assert_eq!(out.data()[0], 0.0);
        assert_eq!(out.data()[15], 33.0);
        assert_eq!(crop_window(10, 10, (0, 0), 4).unwrap(), (0, 0));
    }

    #[test]
    fn crop_even_window_convention() {
        // center (5,5), size 4 covers rows/cols 3..=6
        let img = Tensor::new(vec![1, 10, 10], (0..100).map(f64::from).collect()).unwrap();
        let out = crop_patch(&img, (5, 5), 4).unwrap();
        assert_eq!(out.data()[0], 33.0);
        assert_eq!(out.data()[15], 66.0);
    }

    #[test]
    fn crop_rejects_oversized_patch() {
        let img = Tensor::zeros(vec![1, 4, 4]).unwrap();
        assert!(crop_patch(&img, (2, 2), 5).is_err());
    }

    fn gradient_bag(id: &str, label: u8) -> Bag {
        let data: Vec<f64> = (0..64).map(|i| i as f64 / 63.0).collect();
        Bag::new(id, Tensor::new(vec![1, 8, 8], data).unwrap(), label).unwrap()
    }

    fn gradient_saliency(_bag: &Bag) -> Result<SaliencyMap> {
        let values: Vec<f64> = (0..64).map(|i| i as f64 / 63.0).collect();
        SaliencyMap::new(8, 8, values)
    }

    #[test]
    fn dataset_has_m_instances_per_bag_in_order() {
        let bags = Dataset::new(
            vec![gradient_bag("a", 1), gradient_bag("b", 0)],
            Split::Train,
        )
        .unwrap();
        let spec = PatchSpec::new(3, 4, 3).unwrap();
        let insts = build_instance_dataset(&bags, gradient_saliency, &spec).unwrap();
        assert_eq!(insts.len(), 6);
        assert_eq!(insts[0].bag_id, "a");
        assert_eq!(insts[3].bag_id, "b");
        for chunk in insts.chunks(3) {
            assert_eq!(
                chunk.iter().map(|i| i.rank).collect::<Vec<_>>(),
                vec![1, 2, 3]
            );
            // scores non-increasing in rank
            assert!(chunk.windows(2).all(|w| w[0].score >= w[1].score));
            // labels inherited
            assert!(chunk.iter().all(|i| i.label == chunk[0].label));
        }
    }

    #[test]
    fn identical_bags_give_identical_instances() {
        let bags = Dataset::new(
            vec![gradient_bag("a", 1), gradient_bag("b", 1)],
            Split::Train,
        )
        .unwrap();
        let spec = PatchSpec::new(2, 4, 3).unwrap();
        let insts = build_instance_dataset(&bags, gradient_saliency, &spec).unwrap();
        for j in 0..2 {
            assert_eq!(insts[j].pixels.data(), insts[j + 2].pixels.data());
            assert_eq!(insts[j].center, insts[j + 2].center);
        }
    }

    #[test]
    fn saliency_failure_names_the_bag() {
        let bags = Dataset::new(vec![gradient_bag("bad-bag", 1)], Split::Train).unwrap();
        let spec = PatchSpec::new(1, 4, 3).unwrap();
        let err = build_instance_dataset(
            &bags,
            |_| Err(Error::numeric("boom")),
            &spec,
        )
        .unwrap_err();
        assert!(err.to_string().contains("bad-bag"));
    }
}
