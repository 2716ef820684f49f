use std::cmp::Ordering;

use super::{CrystalStructure, GraphConfig};

/// A periodic image of atom `index`, displaced by `image` lattice vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub distance: f64,
    pub image: [i32; 3],
}

impl Neighbor {
    /// Ascending distance, then neighbor index, then image offset.
    pub fn order(&self, other: &Self) -> Ordering {
        self.distance
            .total_cmp(&other.distance)
            .then(self.index.cmp(&other.index))
            .then(self.image.cmp(&other.image))
    }
}

/// Number of lattice translations to scan along each axis.
///
/// An image at offset `n` sits `(n + df) * spacing` away from the centre
/// atom's lattice plane, with `|df| < 1`, so `|n| <= ceil(cutoff / spacing) + 1`
/// covers every image within the cutoff.
pub fn image_range(s: &CrystalStructure, cutoff: f64) -> [i32; 3] {
    s.plane_spacings()
        .map(|d| (cutoff / d).ceil() as i32 + 1)
}

/// For each atom, its nearest periodic images (including images of itself)
/// within `cfg.cutoff`, sorted by [`Neighbor::order`] and truncated to
/// `cfg.max_neighbors`.
pub fn periodic_neighbors(s: &CrystalStructure, cfg: &GraphConfig) -> Vec<Vec<Neighbor>> {
    let range = image_range(s, cfg.cutoff);
    let mut offsets = Vec::new();
    for a in -range[0]..=range[0] {
        for b in -range[1]..=range[1] {
            for c in -range[2]..=range[2] {
                let n = [a, b, c];
                let shift = s.to_cartesian(n.map(f64::from));
                offsets.push((n, shift));
            }
        }
    }
    let cart: Vec<[f64; 3]> = s.frac_coords.iter().map(|&f| s.to_cartesian(f)).collect();
    let cutoff_sq = cfg.cutoff * cfg.cutoff;

    cart.iter()
        .enumerate()
        .map(|(i, ri)| {
            let mut found = Vec::new();
            for (j, rj) in cart.iter().enumerate() {
                let base = [rj[0] - ri[0], rj[1] - ri[1], rj[2] - ri[2]];
                for (n, shift) in &offsets {
                    if i == j && *n == [0, 0, 0] {
                        continue;
                    }
                    let d = [base[0] + shift[0], base[1] + shift[1], base[2] + shift[2]];
                    let d2 = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
                    if d2 <= cutoff_sq {
                        found.push(Neighbor {
                            index: j,
                            distance: d2.sqrt(),
                            image: *n,
                        });
                    }
                }
            }
            // sqrt is monotone, but recheck the cutoff on the rounded distance
            found.retain(|nb| nb.distance <= cfg.cutoff);
            found.sort_by(Neighbor::order);
            found.truncate(cfg.max_neighbors);
            found
        })
        .collect()
}
