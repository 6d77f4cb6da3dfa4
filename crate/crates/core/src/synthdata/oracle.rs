//! Class-agnostic region proposals standing in for a promptable segmenter:
//! connected components of each instance plus one background region, with
//! optionally perturbed boundaries.

use rand::Rng;

use crate::image::{BinaryMask, IdMap, InstanceMap};

/// Relabels `ids` so that every 4-connected region of equal id gets its own
/// label `0..n`, numbered in raster order of first pixel. Pixels whose id is
/// in `merge` are pooled into a single region regardless of connectivity.
pub fn split_components(ids: &IdMap<u16>, merge: Option<u16>) -> (IdMap<u16>, usize) {
    let (h, w) = (ids.height, ids.width);
    let mut out = IdMap::filled(h, w, u16::MAX);
    let mut next = 0u16;
    let mut merged_label = None;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if out.data[start] != u16::MAX {
            continue;
        }
        let id = ids.data[start];
        if Some(id) == merge {
            let l = *merged_label.get_or_insert_with(|| {
                next += 1;
                next - 1
            });
            out.data[start] = l;
            continue;
        }
        let label = next;
        next += 1;
        out.data[start] = label;
        stack.push(start);
        while let Some(p) = stack.pop() {
            let (y, x) = (p / w, p % w);
            let mut visit = |q: usize| {
                if out.data[q] == u16::MAX && ids.data[q] == id {
                    out.data[q] = label;
                    stack.push(q);
                }
            };
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
        }
    }
    (out, next as usize)
}

/// Region map before jitter: background (instance 0) is one region, every
/// connected piece of every instance is another.
pub fn oracle_regions(instances: &InstanceMap) -> (IdMap<u16>, usize) {
    split_components(instances, Some(0))
}

/// Moves region boundaries by a smooth random displacement field of
/// amplitude `jitter` pixels. Each output pixel copies the region of a
/// nearby input pixel, so the result is still a partition.
pub fn jitter_regions<R: Rng>(regions: &IdMap<u16>, jitter: f64, rng: &mut R) -> IdMap<u16> {
    if jitter <= 0.0 {
        return regions.clone();
    }
    const CELL: usize = 4;
    let (h, w) = (regions.height, regions.width);
    let gh = h.div_ceil(CELL) + 1;
    let gw = w.div_ceil(CELL) + 1;
    let field: Vec<(f64, f64)> = (0..gh * gw)
        .map(|_| {
            (
                rng.random_range(-jitter..=jitter),
                rng.random_range(-jitter..=jitter),
            )
        })
        .collect();
    let mut out = IdMap::new(h, w);
    for y in 0..h {
        let fy = y as f64 / CELL as f64;
        let (y0, ty) = (fy.floor() as usize, fy.fract());
        for x in 0..w {
            let fx = x as f64 / CELL as f64;
            let (x0, tx) = (fx.floor() as usize, fx.fract());
            let at = |yy: usize, xx: usize| field[yy * gw + xx];
            let lerp = |a: (f64, f64), b: (f64, f64), t: f64| {
                (a.0 + (b.0 - a.0) * t, a.1 + (b.1 - a.1) * t)
            };
            let top = lerp(at(y0, x0), at(y0, x0 + 1), tx);
            let bot = lerp(at(y0 + 1, x0), at(y0 + 1, x0 + 1), tx);
            let (dy, dx) = lerp(top, bot, ty);
            let sy = (y as f64 + dy).round().clamp(0.0, (h - 1) as f64) as usize;
            let sx = (x as f64 + dx).round().clamp(0.0, (w - 1) as f64) as usize;
            out.set(y, x, regions.get(sy, sx));
        }
    }
    out
}

/// Renumbers a region map to `0..n` in order of first appearance, dropping
/// labels that no longer occur.
pub fn compact(regions: &IdMap<u16>) -> (IdMap<u16>, usize) {
    let mut map = std::collections::HashMap::new();
    let mut out = IdMap::new(regions.height, regions.width);
    for (o, &r) in out.data.iter_mut().zip(&regions.data) {
        let n = map.len() as u16;
        *o = *map.entry(r).or_insert(n);
    }
    (out, map.len())
}

/// Oracle id-map for an instance map: jittered, compacted regions.
pub fn oracle_map<R: Rng>(instances: &InstanceMap, jitter: f64, rng: &mut R) -> IdMap<u16> {
    let (regions, _) = oracle_regions(instances);
    compact(&jitter_regions(&regions, jitter, rng)).0
}

/// Splits an id-map into one binary mask per id (ids assumed `0..n`).
pub fn masks_from_map(map: &IdMap<u16>) -> Vec<BinaryMask> {
    let n = map.data.iter().map(|&v| v as usize + 1).max().unwrap_or(0);
    let mut out = vec![vec![0u8; map.len()]; n];
    for (p, &v) in map.data.iter().enumerate() {
        out[v as usize][p] = 1;
    }
    out.retain(|m| m.iter().any(|&v| v == 1));
    out
}

/// One mask per instance component plus one background mask, boundaries
/// jittered by up to `jitter` pixels.
pub fn oracle_masks<R: Rng>(instances: &InstanceMap, jitter: f64, rng: &mut R) -> Vec<BinaryMask> {
    masks_from_map(&oracle_map(instances, jitter, rng))
}

pub fn iou(a: &[u8], b: &[u8]) -> f64 {
    let inter = a
        .iter()
        .zip(b)
        .filter(|(x, y)| **x == 1 && **y == 1)
        .count();
    let union = a
        .iter()
        .zip(b)
        .filter(|(x, y)| **x == 1 || **y == 1)
        .count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::rng;

    fn map(h: usize, w: usize, v: &[u16]) -> IdMap<u16> {
        IdMap {
            height: h,
            width: w,
            data: v.to_vec(),
        }
    }

    #[test]
    fn components_split_disconnected_instances() {
        #[rustfmt::skip]
        let inst = map(3, 4, &[
            1, 1, 0, 1,
            0, 0, 0, 1,
            2, 0, 0, 0,
        ]);
        let (r, n) = oracle_regions(&inst);
        assert_eq!(n, 4);
        // both pieces of instance 1 are separate, background is one region
        assert_ne!(r.get(0, 0), r.get(0, 3));
        assert_eq!(r.get(0, 2), r.get(2, 3));
        assert_eq!(r.get(1, 0), r.get(0, 2));
    }

    #[test]
    fn zero_jitter_masks_equal_supports() {
        let mut inst = IdMap::new(8, 8);
        for y in 2..5 {
            for x in 1..6 {
                inst.set(y, x, 3);
            }
        }
        let masks = oracle_masks(&inst, 0.0, &mut rng(1));
        assert_eq!(masks.len(), 2);
        let support: Vec<u8> = inst.data.iter().map(|&v| (v == 3) as u8).collect();
        assert!(masks.contains(&support));
        let total: Vec<u8> = (0..64).map(|p| masks.iter().map(|m| m[p]).sum()).collect();
        assert!(total.iter().all(|&c| c == 1));
    }

    #[test]
    fn jitter_keeps_partition() {
        let mut inst = IdMap::new(16, 16);
        for y in 3..11 {
            for x in 4..12 {
                inst.set(y, x, 1);
            }
        }
        let masks = oracle_masks(&inst, 1.5, &mut rng(7));
        for p in 0..256 {
            assert_eq!(masks.iter().map(|m| m[p]).sum::<u8>(), 1);
        }
    }

    #[test]
    fn compact_and_iou() {
        let (c, n) = compact(&map(1, 4, &[5, 9, 5, 2]));
        assert_eq!((c.data, n), (vec![0, 1, 0, 2], 3));
        assert!((iou(&[1, 1, 0, 0], &[0, 1, 1, 0]) - 1.0 / 3.0).abs() < 1e-15);
    }
}
