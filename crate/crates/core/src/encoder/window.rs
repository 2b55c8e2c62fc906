//! Window partitioning, latent-token replication and the index maps that the
//! encoder's graph ops are built from.

use crate::autodiff::SparseMap;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Value added to attention scores between tokens from different regions of
/// a cyclically shifted grid.
pub const SHIFT_MASK_VALUE: f64 = -100.0;

/// Flattened patch tokens on a `grid_h × grid_w` grid, row-major, `[grid_h·grid_w, C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchTokens {
    pub grid_h: usize,
    pub grid_w: usize,
    pub tensor: Tensor,
}

impl PatchTokens {
    pub fn new(grid_h: usize, grid_w: usize, tensor: Tensor) -> Result<Self> {
        if tensor.ndim() != 2 || tensor.shape()[0] != grid_h * grid_w {
            return Err(Error::dim(format!(
                "{grid_h}x{grid_w} grid needs [{}, C] tokens, got {:?}",
                grid_h * grid_w,
                tensor.shape()
            )));
        }
        Ok(Self {
            grid_h,
            grid_w,
            tensor,
        })
    }

    pub fn channels(&self) -> usize {
        self.tensor.shape()[1]
    }
}

/// Latent tokens, `[T, C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentTokens {
    pub tensor: Tensor,
}

impl LatentTokens {
    pub fn count(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.tensor.shape()[1]
    }
}

/// For each row of the window-major output, the grid row it reads.
///
/// Windows are enumerated row-major over the window grid and tokens
/// row-major within a window. With `shift > 0` the grid is first rolled by
/// `−shift` on both axes.
pub fn partition_order(grid_h: usize, grid_w: usize, m: usize, shift: usize) -> Result<Vec<usize>> {
    if m == 0 || !grid_h.is_multiple_of(m) || !grid_w.is_multiple_of(m) {
        return Err(Error::config(format!(
            "{grid_h}x{grid_w} grid is not divisible by window size {m}"
        )));
    }
    let (nh, nw) = (grid_h / m, grid_w / m);
    let mut order = Vec::with_capacity(grid_h * grid_w);
    for wy in 0..nh {
        for wx in 0..nw {
            for a in 0..m {
                for b in 0..m {
                    let y = (wy * m + a + shift) % grid_h;
                    let x = (wx * m + b + shift) % grid_w;
                    order.push(y * grid_w + x);
                }
            }
        }
    }
    Ok(order)
}

pub fn invert_order(order: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; order.len()];
    for (i, &o) in order.iter().enumerate() {
        inv[o] = i;
    }
    inv
}

/// Splits patch tokens into `(grid_h/M)·(grid_w/M)` windows of `M²` tokens.
pub fn window_partition(patches: &PatchTokens, m: usize) -> Result<Vec<Tensor>> {
    let order = partition_order(patches.grid_h, patches.grid_w, m, 0)?;
    let c = patches.channels();
    order
        .chunks(m * m)
        .map(|win| {
            let data = win
                .iter()
                .flat_map(|&r| patches.tensor.row(r).iter().copied())
                .collect();
            Tensor::new(vec![m * m, c], data)
        })
        .collect()
}

/// Inverse of [`window_partition`].
pub fn window_reverse(
    windows: &[Tensor],
    grid_h: usize,
    grid_w: usize,
    m: usize,
) -> Result<PatchTokens> {
    let order = partition_order(grid_h, grid_w, m, 0)?;
    if windows.len() * m * m != order.len() {
        return Err(Error::dim(format!(
            "{} windows of {m}x{m} do not tile a {grid_h}x{grid_w} grid",
            windows.len()
        )));
    }
    let c = windows.first().map_or(0, |w| w.shape()[1]);
    let mut data = vec![0.0; order.len() * c];
    for (i, &dst) in order.iter().enumerate() {
        let w = &windows[i / (m * m)];
        if w.shape() != [m * m, c] {
            return Err(Error::dim(format!("window shape {:?}", w.shape())));
        }
        data[dst * c..(dst + 1) * c].copy_from_slice(w.row(i % (m * m)));
    }
    PatchTokens::new(grid_h, grid_w, Tensor::new(vec![grid_h * grid_w, c], data)?)
}

/// Appends the same latent rows after the patch rows of every window.
pub fn attach_latent_tokens(windows: &[Tensor], lat: &LatentTokens) -> Result<Vec<Tensor>> {
    windows
        .iter()
        .map(|w| {
            if w.ndim() != 2 || w.shape()[1] != lat.channels() {
                return Err(Error::dim(format!(
                    "window {:?} vs latent tokens {:?}",
                    w.shape(),
                    lat.tensor.shape()
                )));
            }
            let mut data = w.data().to_vec();
            data.extend_from_slice(lat.tensor.data());
            Tensor::new(vec![w.shape()[0] + lat.count(), w.shape()[1]], data)
        })
        .collect()
}

/// Row gather `[G, C] → [N·M², C]` for a (possibly shifted) partition.
pub fn partition_map(grid: usize, m: usize, shift: usize, c: usize) -> Result<SparseMap> {
    let order = partition_order(grid, grid, m, shift)?;
    let src: Vec<Option<usize>> = order.iter().map(|&r| Some(r)).collect();
    Ok(SparseMap::gather_rows(order.len(), c, &src))
}

/// Row gather `[N·M², C] → [G, C]` undoing [`partition_map`].
pub fn reverse_map(grid: usize, m: usize, shift: usize, c: usize) -> Result<SparseMap> {
    let inv = invert_order(&partition_order(grid, grid, m, shift)?);
    let src: Vec<Option<usize>> = inv.iter().map(|&r| Some(r)).collect();
    Ok(SparseMap::gather_rows(inv.len(), c, &src))
}

/// `[T, C] → [N·T, C]`: one copy of the latent tokens per window.
pub fn replicate_map(t: usize, n: usize, c: usize) -> SparseMap {
    let src: Vec<Option<usize>> = (0..n * t).map(|r| Some(r % t)).collect();
    SparseMap::gather_rows(t, c, &src)
}

/// `[N·T, C] → [T, C]`: sums the replicas in window order.
pub fn merge_map(t: usize, n: usize, c: usize) -> SparseMap {
    let rows: Vec<Vec<(usize, f64)>> = (0..t * c)
        .map(|j| {
            let (row, col) = (j / c, j % c);
            (0..n).map(|w| ((w * t + row) * c + col, 1.0)).collect()
        })
        .collect();
    SparseMap::weighted(n * t * c, vec![t, c], &rows)
}

/// Selects rows `[start, start+len)` of each block of `n` rows out of `N·n`.
pub fn block_rows_map(windows: usize, n: usize, start: usize, len: usize, c: usize) -> SparseMap {
    let src: Vec<Option<usize>> = (0..windows)
        .flat_map(|w| (start..start + len).map(move |r| Some(w * n + r)))
        .collect();
    SparseMap::gather_rows(windows * n, c, &src)
}

/// Maps a relative-position table `[(2M−1)², heads]` into `[heads, n, n]`
/// biases for windows of `M²` patches plus `t` latent tokens. Pairs that
/// involve a latent token get no bias.
pub fn relative_bias_map(m: usize, t: usize, heads: usize) -> SparseMap {
    let p = m * m;
    let n = p + t;
    let side = 2 * m - 1;
    let mut src = Vec::with_capacity(heads * n * n);
    for h in 0..heads {
        for i in 0..n {
            for j in 0..n {
                if i < p && j < p {
                    let (yi, xi) = (i / m, i % m);
                    let (yj, xj) = (j / m, j % m);
                    let rel = (yi + m - 1 - yj) * side + (xi + m - 1 - xj);
                    src.push(Some(rel * heads + h));
                } else {
                    src.push(None);
                }
            }
        }
    }
    SparseMap::gather(side * side * heads, vec![heads, n, n], &src)
}

/// Additive mask `[N, heads, n, n]` keeping attention inside the original
/// contiguous regions of a shifted grid. Latent tokens are never masked.
pub fn shift_mask(grid: usize, m: usize, shift: usize, t: usize, heads: usize) -> Tensor {
    let region = |v: usize| {
        if v < grid - m {
            0
        } else if v < grid - shift {
            1
        } else {
            2
        }
    };
    let nw = grid / m;
    let p = m * m;
    let n = p + t;
    let mut data = Vec::with_capacity(nw * nw * heads * n * n);
    for wy in 0..nw {
        for wx in 0..nw {
            let labels: Vec<usize> = (0..p)
                .map(|k| {
                    let (y, x) = (wy * m + k / m, wx * m + k % m);
                    region(y) * 3 + region(x)
                })
                .collect();
            for _ in 0..heads {
                for i in 0..n {
                    for j in 0..n {
                        let masked = i < p && j < p && labels[i] != labels[j];
                        data.push(if masked { SHIFT_MASK_VALUE } else { 0.0 });
                    }
                }
            }
        }
    }
    Tensor::new(vec![nw * nw, heads, n, n], data).expect("mask shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid_tokens(h: usize, w: usize, c: usize) -> PatchTokens {
        let t = Tensor::from_fn(vec![h * w, c], |i| i as f64);
        PatchTokens::new(h, w, t).unwrap()
    }

    #[test]
    fn single_window_is_row_major() {
        let p = grid_tokens(4, 4, 2);
        let w = window_partition(&p, 4).unwrap();
        assert_eq!(w.len(), 1);
        assert!(w[0].exact_eq(&p.tensor));
    }

    #[test]
    fn token_lands_in_expected_window() {
        let p = grid_tokens(4, 4, 1);
        let w = window_partition(&p, 2).unwrap();
        assert_eq!(w.len(), 4);
        // token (row 0, col 2) has value 2
        assert_eq!(w[1].get(&[0, 0]), 2.0);
        assert_eq!(w[2].get(&[0, 0]), 8.0);
        assert!(matches!(window_partition(&p, 3), Err(Error::Config(_))));
    }

    #[test]
    fn latent_attachment() {
        let p = grid_tokens(4, 4, 3);
        let lat = LatentTokens {
            tensor: Tensor::from_fn(vec![2, 3], |i| -(i as f64)),
        };
        let aug = attach_latent_tokens(&window_partition(&p, 2).unwrap(), &lat).unwrap();
        assert_eq!(aug.len(), 4);
        for w in &aug {
            assert_eq!(w.shape(), &[6, 3]);
            assert_eq!(&w.data()[12..], lat.tensor.data());
        }
        let one = attach_latent_tokens(&window_partition(&p, 4).unwrap(), &lat).unwrap();
        assert_eq!(one[0].shape(), &[18, 3]);
        let bad = LatentTokens {
            tensor: Tensor::zeros(vec![2, 4]),
        };
        assert!(matches!(
            attach_latent_tokens(&window_partition(&p, 2).unwrap(), &bad),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn shifted_partition_rolls_grid() {
        let order = partition_order(4, 4, 2, 1).unwrap();
        // first window starts at rolled position (0,0) = original (1,1)
        assert_eq!(&order[..4], &[5, 6, 9, 10]);
        let inv = invert_order(&order);
        for (i, &o) in order.iter().enumerate() {
            assert_eq!(inv[o], i);
        }
    }

    #[test]
    fn mask_separates_wrapped_regions() {
        let mask = shift_mask(4, 2, 1, 1, 1);
        assert_eq!(mask.shape(), &[4, 1, 5, 5]);
        // window 0 covers rolled rows/cols 0..2, one region: nothing masked
        assert!((0..25).all(|k| mask.data()[k] == 0.0));
        // last window mixes regions 1 and 2 on both axes
        let last = &mask.data()[3 * 25..4 * 25];
        assert_eq!(last[1], SHIFT_MASK_VALUE);
        // latent row and column stay open
        assert!((0..5).all(|j| last[4 * 5 + j] == 0.0 && last[j * 5 + 4] == 0.0));
    }

    #[test]
    fn relative_bias_layout() {
        let map = relative_bias_map(2, 1, 1);
        let table: Vec<f64> = (0..9).map(|i| i as f64 + 1.0).collect();
        let bias = map.apply(&table);
        // diagonal pairs share the centre entry (index 4)
        assert_eq!(bias[0], 5.0);
        assert_eq!(bias[6], 5.0);
        // pair involving the latent token is zero
        assert_eq!(bias[4], 0.0);
        assert_eq!(bias[4 * 5], 0.0);
    }

    #[test]
    fn merge_sums_replicas() {
        let map = merge_map(1, 2, 2);
        assert_eq!(map.apply(&[1.0, 3.0, 3.0, 1.0]), vec![4.0, 4.0]);
    }

    proptest! {
        #[test]
        fn partition_roundtrip(seed in 0u64..1000, m in prop::sample::select(vec![1usize, 2, 4]), k in 1usize..3) {
            let g = m * k * 2;
            let t = Tensor::from_fn(vec![g * g, 3], |i| ((i as u64 * 2654435761 + seed) % 1000) as f64 / 7.0);
            let p = PatchTokens::new(g, g, t).unwrap();
            let w = window_partition(&p, m).unwrap();
            let back = window_reverse(&w, g, g, m).unwrap();
            prop_assert!(back.tensor.exact_eq(&p.tensor));
            for shift in [0, m / 2] {
                let fwd = partition_map(g, m, shift, 3).unwrap().apply(p.tensor.data());
                let rev = reverse_map(g, m, shift, 3).unwrap().apply(&fwd);
                prop_assert_eq!(&rev[..], p.tensor.data());
            }
        }
    }
}
