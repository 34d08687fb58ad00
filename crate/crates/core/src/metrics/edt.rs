//! Exact Euclidean distance transform with nearest-site tracking.
//!
//! Column sweep first (nearest foreground row per column), then a pruned
//! scan across columns per pixel. Exact for arbitrary masks; complexity is
//! O(W^2 H) worst case, which is fine at the image sizes this crate handles.

/// For each pixel, the Euclidean distance to the nearest foreground pixel
/// and that pixel's flat index. Distance ties resolve to the smallest flat
/// index, so results are independent of scan strategy. Returns `None` when
/// the mask has no foreground at all.
pub fn distance_to_foreground(mask: &[bool], width: usize, height: usize) -> Option<(Vec<f64>, Vec<usize>)> {
    assert_eq!(mask.len(), width * height);
    if !mask.iter().any(|&m| m) {
        return None;
    }

    // Nearest foreground row within each column, for every (row, column).
    let mut col_row = vec![usize::MAX; width * height];
    let mut col_dist2 = vec![f64::INFINITY; width * height];
    for x in 0..width {
        let mut last: Option<usize> = None;
        for y in 0..height {
            if mask[y * width + x] {
                last = Some(y);
            }
            if let Some(r) = last {
                let d = (y - r) as f64;
                col_dist2[y * width + x] = d * d;
                col_row[y * width + x] = r;
            }
        }
        last = None;
        for y in (0..height).rev() {
            if mask[y * width + x] {
                last = Some(y);
            }
            if let Some(r) = last {
                let d = (r - y) as f64;
                let d2 = d * d;
                if d2 < col_dist2[y * width + x] {
                    col_dist2[y * width + x] = d2;
                    col_row[y * width + x] = r;
                }
            }
        }
    }

    let mut dist = vec![0.0; width * height];
    let mut site = vec![0usize; width * height];
    for y in 0..height {
        let row_base = y * width;
        for x in 0..width {
            let mut best = f64::INFINITY;
            let mut best_site = usize::MAX;
            // scan columns outward from x; stop once dx^2 alone exceeds best
            for radius in 0..width {
                let dx2 = (radius * radius) as f64;
                if dx2 > best {
                    break;
                }
                let mut candidates = [usize::MAX; 2];
                if x >= radius {
                    candidates[0] = x - radius;
                }
                if radius > 0 && x + radius < width {
                    candidates[1] = x + radius;
                }
                for &cx in &candidates {
                    if cx == usize::MAX || col_row[row_base + cx] == usize::MAX {
                        continue;
                    }
                    let d2 = dx2 + col_dist2[row_base + cx];
                    if d2 > best {
                        continue;
                    }
                    let s = col_row[row_base + cx] * width + cx;
                    if d2 < best || s < best_site {
                        best = d2;
                        best_site = s;
                    }
                }
            }
            dist[row_base + x] = best.sqrt();
            site[row_base + x] = best_site;
        }
    }
    Some((dist, site))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Row-major scan with strict improvement: the reported site is the
    /// smallest flat index among equidistant foreground pixels.
    fn brute_force(mask: &[bool], width: usize, height: usize) -> (Vec<f64>, Vec<usize>) {
        let mut dist = vec![f64::INFINITY; width * height];
        let mut site = vec![usize::MAX; width * height];
        for y in 0..height {
            for x in 0..width {
                for sy in 0..height {
                    for sx in 0..width {
                        if mask[sy * width + sx] {
                            let d2 = (y as f64 - sy as f64).powi(2)
                                + (x as f64 - sx as f64).powi(2);
                            if d2 < dist[y * width + x] {
                                dist[y * width + x] = d2;
                                site[y * width + x] = sy * width + sx;
                            }
                        }
                    }
                }
            }
        }
        (dist.iter().map(|d| d.sqrt()).collect(), site)
    }

    #[test]
    fn empty_mask_returns_none() {
        assert!(distance_to_foreground(&[false; 9], 3, 3).is_none());
    }

    #[test]
    fn single_site_distances() {
        let mut mask = vec![false; 25];
        mask[2 * 5 + 2] = true;
        let (dist, site) = distance_to_foreground(&mask, 5, 5).unwrap();
        assert_eq!(dist[2 * 5 + 2], 0.0);
        assert!((dist[0] - (8.0f64).sqrt()).abs() < 1e-12);
        assert!(site.iter().all(|&s| s == 2 * 5 + 2));
    }

    #[test]
    fn matches_brute_force_on_random_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let (w, h) = (rng.random_range(2..12), rng.random_range(2..12));
            let mask: Vec<bool> = (0..w * h).map(|_| rng.random_range(0.0..1.0) < 0.2).collect();
            if !mask.iter().any(|&m| m) {
                continue;
            }
            let (dist, site) = distance_to_foreground(&mask, w, h).unwrap();
            let (expect, expect_site) = brute_force(&mask, w, h);
            for i in 0..w * h {
                assert!((dist[i] - expect[i]).abs() < 1e-9, "pixel {i}: {} vs {}", dist[i], expect[i]);
                assert_eq!(site[i], expect_site[i], "site mismatch at pixel {i}");
            }
        }
    }
}
