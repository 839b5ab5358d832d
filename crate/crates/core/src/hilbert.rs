//! Pseudo-Hilbert tile ordering and subdomain decomposition.
//!
//! Both the tomogram `(x, z)` plane and the sinogram `(theta, rho)` plane are
//! cut into square tiles, the tiles are ordered along a pseudo-Hilbert curve,
//! and the curve is cut into equal contiguous segments. Within a tile the
//! elements follow the same curve at element granularity, so a subdomain's
//! element list is itself curve-ordered and can be split again for thread
//! blocks.
//!
//! Non-power-of-two grids are handled by padding to the enclosing
//! power-of-two square and skipping cells outside the domain.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sparse::CsrMatrix;

/// Default process-level tile side, in elements.
pub const DEFAULT_TILE_SIZE: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    /// `n x n` voxels of one slice.
    Tomogram,
    /// `angles x detector columns` of one slice.
    Sinogram,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Tomogram subdomain to the sinogram rows it touches.
    Projection,
    /// Sinogram subdomain to the tomogram voxels it touches.
    Backprojection,
}

/// Maps curve index `d` to `(x, z)` on a `2^order` square. Base motif:
/// 0 -> (0,0), 1 -> (0,1), 2 -> (1,1), 3 -> (1,0).
pub fn hilbert_d2xy(order: u32, d: u64) -> Result<(u64, u64)> {
    if order > 31 {
        return Err(Error::InvalidDimension(format!("curve order {order}")));
    }
    let side = 1u64 << order;
    if d >= side * side {
        return Err(Error::OutOfRange {
            what: "curve index",
            index: d as usize,
            limit: (side * side) as usize,
        });
    }
    let (mut x, mut z) = (0u64, 0u64);
    let mut t = d;
    let mut s = 1u64;
    while s < side {
        let rx = 1 & (t / 2);
        let rz = 1 & (t ^ rx);
        if rz == 0 {
            if rx == 1 {
                x = s - 1 - x;
                z = s - 1 - z;
            }
            std::mem::swap(&mut x, &mut z);
        }
        x += s * rx;
        z += s * rz;
        t /= 4;
        s *= 2;
    }
    Ok((x, z))
}

/// Order of the `tiles_x x tiles_z` tiles along the padded Hilbert curve.
pub fn pseudo_hilbert_order(tiles_x: usize, tiles_z: usize) -> Result<Vec<(usize, usize)>> {
    if tiles_x == 0 || tiles_z == 0 {
        return Err(Error::InvalidDimension(format!(
            "{tiles_x}x{tiles_z} tiles"
        )));
    }
    let side = tiles_x.max(tiles_z).next_power_of_two();
    let order = side.trailing_zeros();
    let mut out = Vec::with_capacity(tiles_x * tiles_z);
    for d in 0..(side * side) as u64 {
        let (x, z) = hilbert_d2xy(order, d)?;
        let (x, z) = (x as usize, z as usize);
        if x < tiles_x && z < tiles_z {
            out.push((x, z));
        }
    }
    Ok(out)
}

/// Part sizes for splitting `total` items into `parts`: the first
/// `total % parts` parts get one extra item.
pub fn split_counts(total: usize, parts: usize) -> Result<Vec<usize>> {
    if parts == 0 || parts > total {
        return Err(Error::TooManyParts {
            parts,
            available: total,
        });
    }
    let (base, extra) = (total / parts, total % parts);
    Ok((0..parts).map(|i| base + usize::from(i < extra)).collect())
}

/// Contiguous ranges matching [`split_counts`].
pub fn split_ranges(total: usize, parts: usize) -> Result<Vec<Range<usize>>> {
    let mut start = 0;
    Ok(split_counts(total, parts)?
        .into_iter()
        .map(|c| {
            let r = start..start + c;
            start += c;
            r
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileGrid {
    pub domain: Domain,
    /// Elements along the fast (column) axis.
    pub width: usize,
    /// Elements along the slow (row) axis.
    pub height: usize,
    pub tile_size: usize,
    pub tiles_x: usize,
    pub tiles_z: usize,
}

impl TileGrid {
    pub fn new(domain: Domain, width: usize, height: usize, tile_size: usize) -> Result<Self> {
        if width == 0 || height == 0 || tile_size == 0 {
            return Err(Error::InvalidDimension(format!(
                "{width}x{height} domain with tile size {tile_size}"
            )));
        }
        Ok(Self {
            domain,
            width,
            height,
            tile_size,
            tiles_x: width.div_ceil(tile_size),
            tiles_z: height.div_ceil(tile_size),
        })
    }

    pub fn tomogram(n: usize, tile_size: usize) -> Result<Self> {
        Self::new(Domain::Tomogram, n, n, tile_size)
    }

    /// Sinogram plane: `num_angles` rows of `num_cols` detector columns.
    pub fn sinogram(num_angles: usize, num_cols: usize, tile_size: usize) -> Result<Self> {
        Self::new(Domain::Sinogram, num_cols, num_angles, tile_size)
    }

    pub fn num_tiles(&self) -> usize {
        self.tiles_x * self.tiles_z
    }

    pub fn num_elements(&self) -> usize {
        self.width * self.height
    }

    /// Elements of tile `(tx, tz)` in curve order, clipped to the domain.
    pub fn tile_elements(&self, tx: usize, tz: usize) -> Vec<usize> {
        let x0 = tx * self.tile_size;
        let z0 = tz * self.tile_size;
        let w = self.tile_size.min(self.width - x0);
        let h = self.tile_size.min(self.height - z0);
        pseudo_hilbert_order(w, h)
            .expect("tile is non-empty")
            .into_iter()
            .map(|(x, z)| (z0 + z) * self.width + x0 + x)
            .collect()
    }

    /// Every element of the domain, in two-level curve order.
    pub fn curve_order(&self) -> Vec<usize> {
        pseudo_hilbert_order(self.tiles_x, self.tiles_z)
            .expect("grid is non-empty")
            .into_iter()
            .flat_map(|(tx, tz)| self.tile_elements(tx, tz))
            .collect()
    }

    /// Position of every element along [`curve_order`](Self::curve_order).
    pub fn curve_rank(&self) -> Vec<usize> {
        let mut rank = vec![0; self.num_elements()];
        for (i, e) in self.curve_order().into_iter().enumerate() {
            rank[e] = i;
        }
        rank
    }
}

/// A contiguous segment of the tile curve owned by one process.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subdomain {
    pub id: usize,
    pub owner: usize,
    pub domain: Domain,
    pub tiles: Vec<(usize, usize)>,
    /// Flat element indices in curve order.
    pub elements: Vec<usize>,
}

/// Cut the tile curve of `grid` into `parts` contiguous, size-balanced
/// subdomains. Subdomain `i` is owned by process `i`.
pub fn decompose(grid: &TileGrid, parts: usize) -> Result<Vec<Subdomain>> {
    let order = pseudo_hilbert_order(grid.tiles_x, grid.tiles_z)?;
    let ranges = split_ranges(order.len(), parts)?;
    Ok(ranges
        .into_iter()
        .enumerate()
        .map(|(id, r)| {
            let tiles = order[r].to_vec();
            let elements = tiles
                .iter()
                .flat_map(|&(tx, tz)| grid.tile_elements(tx, tz))
                .collect();
            Subdomain {
                id,
                owner: id,
                domain: grid.domain,
                tiles,
                elements,
            }
        })
        .collect())
}

/// Split a subdomain's curve-ordered elements among `block_count` thread
/// blocks with the same contiguity and remainder rule as [`decompose`].
pub fn block_decompose(subdomain: &Subdomain, block_count: usize) -> Result<Vec<Vec<usize>>> {
    Ok(split_ranges(subdomain.elements.len(), block_count)?
        .into_iter()
        .map(|r| subdomain.elements[r].to_vec())
        .collect())
}

/// Target-domain elements touched by one subdomain, sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Footprint {
    pub source: usize,
    pub target: Domain,
    pub elements: Vec<usize>,
}

fn check_subdomain(subdomain: &Subdomain, matrix: &CsrMatrix, direction: Direction) -> Result<()> {
    let (expected, limit) = match direction {
        Direction::Projection => (Domain::Tomogram, matrix.ncols()),
        Direction::Backprojection => (Domain::Sinogram, matrix.nrows()),
    };
    if subdomain.domain != expected {
        return Err(Error::ShapeMismatch(format!(
            "{:?} subdomain used for {direction:?}",
            subdomain.domain
        )));
    }
    if let Some(&e) = subdomain.elements.iter().find(|&&e| e >= limit) {
        return Err(Error::ShapeMismatch(format!(
            "element {e} outside a {limit}-element domain"
        )));
    }
    Ok(())
}

pub fn compute_footprint(
    subdomain: &Subdomain,
    matrix: &CsrMatrix,
    direction: Direction,
) -> Result<Footprint> {
    check_subdomain(subdomain, matrix, direction)?;
    let elements = match direction {
        Direction::Projection => {
            let mut member = vec![false; matrix.ncols()];
            subdomain.elements.iter().for_each(|&e| member[e] = true);
            (0..matrix.nrows())
                .filter(|&r| matrix.row(r).any(|(c, _)| member[c]))
                .collect()
        }
        Direction::Backprojection => {
            let mut touched = vec![false; matrix.ncols()];
            for &r in &subdomain.elements {
                matrix.row(r).for_each(|(c, _)| touched[c] = true);
            }
            (0..matrix.ncols()).filter(|&c| touched[c]).collect()
        }
    };
    Ok(Footprint {
        source: subdomain.id,
        target: match direction {
            Direction::Projection => Domain::Sinogram,
            Direction::Backprojection => Domain::Tomogram,
        },
        elements,
    })
}

/// Footprints of every subdomain in one pass over the matrix.
pub fn compute_footprints(
    subdomains: &[Subdomain],
    matrix: &CsrMatrix,
    direction: Direction,
) -> Result<Vec<Footprint>> {
    match direction {
        Direction::Projection => {
            let mut owner = vec![usize::MAX; matrix.ncols()];
            for (p, s) in subdomains.iter().enumerate() {
                check_subdomain(s, matrix, direction)?;
                s.elements.iter().for_each(|&e| owner[e] = p);
            }
            let mut out: Vec<Vec<usize>> = vec![Vec::new(); subdomains.len()];
            let mut seen: Vec<usize> = Vec::new();
            for r in 0..matrix.nrows() {
                seen.clear();
                seen.extend(
                    matrix
                        .row(r)
                        .map(|(c, _)| owner[c])
                        .filter(|&p| p != usize::MAX),
                );
                seen.sort_unstable();
                seen.dedup();
                seen.iter().for_each(|&p| out[p].push(r));
            }
            Ok(out
                .into_iter()
                .zip(subdomains)
                .map(|(elements, s)| Footprint {
                    source: s.id,
                    target: Domain::Sinogram,
                    elements,
                })
                .collect())
        }
        Direction::Backprojection => subdomains
            .iter()
            .map(|s| compute_footprint(s, matrix, direction))
            .collect(),
    }
}

/// Mean Manhattan distance over all unordered pairs of tiles.
pub fn mean_pairwise_manhattan(tiles: &[(usize, usize)]) -> f64 {
    let n = tiles.len();
    if n < 2 {
        return 0.0;
    }
    let mut total = 0usize;
    for i in 0..n {
        for j in i + 1..n {
            total += tiles[i].0.abs_diff(tiles[j].0) + tiles[i].1.abs_diff(tiles[j].1);
        }
    }
    total as f64 / (n * (n - 1) / 2) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_system_matrix, make_geometry};
    use proptest::prelude::*;
    use std::collections::BTreeSet;
    use std::f64::consts::PI;

    fn check_curve(order: u32) {
        let side = 1u64 << order;
        let cells: Vec<(u64, u64)> = (0..side * side)
            .map(|d| hilbert_d2xy(order, d).unwrap())
            .collect();
        let distinct: BTreeSet<_> = cells.iter().collect();
        assert_eq!(distinct.len() as u64, side * side);
        assert!(cells.iter().all(|&(x, z)| x < side && z < side));
        for w in cells.windows(2) {
            assert_eq!(w[0].0.abs_diff(w[1].0) + w[0].1.abs_diff(w[1].1), 1);
        }
    }

    #[test]
    fn order_one_motif() {
        let cells: Vec<_> = (0..4).map(|d| hilbert_d2xy(1, d).unwrap()).collect();
        assert_eq!(cells, vec![(0, 0), (0, 1), (1, 1), (1, 0)]);
    }

    #[test]
    fn curve_bijection_and_adjacency() {
        for order in 0..=6 {
            check_curve(order);
        }
    }

    #[test]
    fn curve_index_out_of_range() {
        assert!(matches!(hilbert_d2xy(2, 16), Err(Error::OutOfRange { .. })));
    }

    #[test]
    fn pseudo_order_small_cases() {
        assert_eq!(
            pseudo_hilbert_order(2, 2).unwrap(),
            vec![(0, 0), (0, 1), (1, 1), (1, 0)]
        );
        assert_eq!(pseudo_hilbert_order(1, 1).unwrap(), vec![(0, 0)]);
        let six = pseudo_hilbert_order(3, 2).unwrap();
        let set: BTreeSet<_> = six.iter().collect();
        assert_eq!(set.len(), 6);
        assert!(six.iter().all(|&(x, z)| x < 3 && z < 2));
        assert!(pseudo_hilbert_order(0, 3).is_err());
    }

    #[test]
    fn pseudo_order_matches_curve_on_powers_of_two() {
        let p = pseudo_hilbert_order(8, 8).unwrap();
        for (d, &(x, z)) in p.iter().enumerate() {
            assert_eq!(hilbert_d2xy(3, d as u64).unwrap(), (x as u64, z as u64));
        }
    }

    proptest! {
        #[test]
        fn pseudo_order_is_bijection(tx in 1usize..64, tz in 1usize..64) {
            let p = pseudo_hilbert_order(tx, tz).unwrap();
            prop_assert_eq!(p.len(), tx * tz);
            let set: BTreeSet<_> = p.iter().collect();
            prop_assert_eq!(set.len(), tx * tz);
        }

        #[test]
        fn decompose_partitions(tx in 1usize..20, tz in 1usize..20, parts in 1usize..30) {
            let grid = TileGrid::new(Domain::Tomogram, tx * 3, tz * 3, 3).unwrap();
            prop_assume!(parts <= grid.num_tiles());
            let subs = decompose(&grid, parts).unwrap();
            let mut all: Vec<usize> = subs.iter().flat_map(|s| s.elements.clone()).collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..grid.num_elements()).collect::<Vec<_>>());
            let sizes: Vec<usize> = subs.iter().map(|s| s.tiles.len()).collect();
            prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        }
    }

    #[test]
    fn decompose_examples() {
        let grid = TileGrid::tomogram(64, 8).unwrap();
        let subs = decompose(&grid, 4).unwrap();
        assert!(subs.iter().all(|s| s.tiles.len() == 16));
        // Power-of-two square: each quarter of the curve is a quadrant.
        for s in &subs {
            let xs: BTreeSet<_> = s.tiles.iter().map(|t| t.0 / 4).collect();
            let zs: BTreeSet<_> = s.tiles.iter().map(|t| t.1 / 4).collect();
            assert_eq!((xs.len(), zs.len()), (1, 1));
        }

        let one = decompose(&grid, 1).unwrap();
        assert_eq!(one[0].elements.len(), 64 * 64);

        let g4 = TileGrid::tomogram(16, 4).unwrap();
        let sizes: Vec<usize> = decompose(&g4, 3)
            .unwrap()
            .iter()
            .map(|s| s.tiles.len())
            .collect();
        assert_eq!(sizes, vec![6, 5, 5]);

        assert!(matches!(
            decompose(&g4, 17),
            Err(Error::TooManyParts {
                parts: 17,
                available: 16
            })
        ));
    }

    #[test]
    fn block_decompose_examples() {
        let grid = TileGrid::tomogram(16, 4).unwrap();
        let sub = &decompose(&grid, 4).unwrap()[1];
        let blocks = block_decompose(sub, 4).unwrap();
        assert!(blocks.iter().all(|b| b.len() == 16));
        assert_eq!(block_decompose(sub, 1).unwrap()[0], sub.elements);
        let odd = block_decompose(sub, 3).unwrap();
        assert_eq!(
            odd.iter().map(Vec::len).collect::<Vec<_>>(),
            vec![22, 21, 21]
        );
        assert_eq!(odd.concat(), sub.elements);
        assert!(block_decompose(sub, 65).is_err());
    }

    #[test]
    fn element_order_is_two_level_curve() {
        let grid = TileGrid::tomogram(8, 4).unwrap();
        let order = grid.curve_order();
        // The first tile is (0,0); its elements follow the order-2 curve.
        for (d, &e) in order.iter().take(16).enumerate() {
            let (x, z) = hilbert_d2xy(2, d as u64).unwrap();
            assert_eq!(e, z as usize * 8 + x as usize);
        }
        let rank = grid.curve_rank();
        for (i, &e) in order.iter().enumerate() {
            assert_eq!(rank[e], i);
        }
    }

    #[test]
    fn locality_beats_row_major() {
        let order = pseudo_hilbert_order(16, 16).unwrap();
        let row_major: Vec<(usize, usize)> = (0..256).map(|i| (i % 16, i / 16)).collect();
        let mean = |tiles: &[(usize, usize)]| -> f64 {
            tiles.chunks(64).map(mean_pairwise_manhattan).sum::<f64>() / 4.0
        };
        let hilbert = mean(&order);
        let rows = mean(&row_major);
        // Quadrants of 8x8 vs. strips of 4x16; with-replacement means
        // rescaled to distinct pairs by 64/63.
        let distinct = 64.0 / 63.0;
        assert!((hilbert - 2.0 * 63.0 / 24.0 * distinct).abs() < 1e-12);
        assert!((rows - (255.0 / 48.0 + 15.0 / 12.0) * distinct).abs() < 1e-12);
        assert!(hilbert < rows);
    }

    #[test]
    fn footprints_on_built_matrix() {
        let g = make_geometry(24, 1, 32, 0.0, PI).unwrap();
        let a = build_system_matrix(&g).unwrap();
        let grid = TileGrid::tomogram(32, 8).unwrap();
        let nonempty: Vec<usize> = (0..a.nrows()).filter(|&r| a.row_len(r) > 0).collect();

        let whole = decompose(&grid, 1).unwrap();
        let fp = compute_footprint(&whole[0], &a, Direction::Projection).unwrap();
        assert_eq!(fp.elements, nonempty);
        assert_eq!(fp.target, Domain::Sinogram);

        let subs = decompose(&grid, 4).unwrap();
        let fps = compute_footprints(&subs, &a, Direction::Projection).unwrap();
        for (s, f) in subs.iter().zip(&fps) {
            assert_eq!(f, &compute_footprint(s, &a, Direction::Projection).unwrap());
        }
        let union: BTreeSet<usize> = fps.iter().flat_map(|f| f.elements.clone()).collect();
        assert_eq!(union.into_iter().collect::<Vec<_>>(), nonempty);
        let total: usize = fps.iter().map(|f| f.elements.len()).sum();
        assert!(total > nonempty.len(), "neighbouring footprints overlap");

        let sgrid = TileGrid::sinogram(24, 32, 8).unwrap();
        let ssubs = decompose(&sgrid, 4).unwrap();
        let back = compute_footprints(&ssubs, &a, Direction::Backprojection).unwrap();
        let union: BTreeSet<usize> = back.iter().flat_map(|f| f.elements.clone()).collect();
        assert_eq!(union.len(), 32 * 32);
    }

    #[test]
    fn empty_coupling_gives_empty_footprint() {
        let a = CsrMatrix::from_rows(4, vec![vec![(0, 1.0)], vec![(1, 1.0)]]).unwrap();
        let sub = Subdomain {
            id: 0,
            owner: 0,
            domain: Domain::Tomogram,
            tiles: vec![],
            elements: vec![2, 3],
        };
        let fp = compute_footprint(&sub, &a, Direction::Projection).unwrap();
        assert!(fp.elements.is_empty());
        let bad = Subdomain {
            elements: vec![9],
            ..sub
        };
        assert!(compute_footprint(&bad, &a, Direction::Projection).is_err());
    }
}
