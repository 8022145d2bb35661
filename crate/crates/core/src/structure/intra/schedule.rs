use crate::structure::intra::dynconv::{build_mask, MaskRule};
use crate::structure::intra::TopologyField;

/// Nodes grouped into sequential decoding stages, ascending by index.
///
/// Node ids follow [`TopologyField::node`]. Within a stage nodes are sorted
/// and mutually independent; stages are strict barriers.
pub fn decode_schedule(topo: &TopologyField) -> Vec<Vec<usize>> {
    let values = topo.distinct();
    let mut stages = vec![Vec::new(); values.len()];
    for (node, t) in topo.indices().iter().enumerate() {
        let s = values.binary_search(t).expect("value collected above");
        stages[s].push(node);
    }
    stages
}

/// Checks a mask laid out as by [`build_mask`] with one channel per group:
/// every kept tap must go from a strictly smaller to a larger index.
pub fn mask_is_causal(topo: &TopologyField, mask: &[f32], kernel: usize) -> bool {
    let (groups, h, w) = (topo.groups(), topo.height(), topo.width());
    let rows = groups * kernel * kernel;
    if mask.len() != groups * rows * h * w {
        return false;
    }
    let pad = (kernel / 2) as isize;
    for c in 0..groups {
        for ch in 0..groups {
            for kh in 0..kernel {
                for kw in 0..kernel {
                    let row = (ch * kernel + kh) * kernel + kw;
                    for y in 0..h {
                        for x in 0..w {
                            if mask[(c * rows + row) * h * w + y * w + x] == 0.0 {
                                continue;
                            }
                            let sy = y as isize + kh as isize - pad;
                            let sx = x as isize + kw as isize - pad;
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                return false;
                            }
                            if topo.get(ch, sy as usize, sx as usize) >= topo.get(c, y, x) {
                                return false;
                            }
                        }
                    }
                }
            }
        }
    }
    true
}

/// True when the strict mask builder yields no dependency `u → v` with `T(u) ≥ T(v)`.
pub fn verify_acyclic(topo: &TopologyField, kernel: usize) -> bool {
    let mask = build_mask(topo, kernel, 0, topo.groups(), MaskRule::Strict);
    mask_is_causal(topo, &mask, kernel)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_counts() {
        let zero = TopologyField::zeros(4, 4, 4).unwrap();
        let s = decode_schedule(&zero);
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].len(), 64);

        assert_eq!(decode_schedule(&TopologyField::checkerboard(8, 8).unwrap()).len(), 2);
        let four = TopologyField::from_tile(6, &[0, 2, 5, 3], 4, 4).unwrap();
        assert_eq!(decode_schedule(&four).len(), 4);
    }

    #[test]
    fn every_node_scheduled_once() {
        let topo = TopologyField::from_tile(4, &[0, 1, 2, 3, 1, 1, 0, 2], 5, 3).unwrap();
        let mut seen: Vec<usize> = decode_schedule(&topo).into_iter().flatten().collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..2 * 5 * 3).collect::<Vec<_>>());
    }

    #[test]
    fn acyclicity_tripwire() {
        let topo = TopologyField::from_tile(3, &[0, 1, 2, 1, 2, 0, 1, 1], 6, 6).unwrap();
        assert!(verify_acyclic(&topo, 5));
        assert!(verify_acyclic(&TopologyField::raster(5, 5).unwrap(), 5));

        let mut mask = build_mask(&topo, 5, 0, 2, MaskRule::Strict);
        assert!(mask_is_causal(&topo, &mask, 5));
        let (h, w, k, groups) = (6, 6, 5, 2);
        let rows = groups * k * k;
        let centre = (0 * k + 2) * k + 2;
        mask[centre * h * w + 2 * w + 2] = 1.0;
        assert!(!mask_is_causal(&topo, &mask, 5));
        let _ = rows;
    }
}
