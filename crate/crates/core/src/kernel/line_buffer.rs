//! Line buffer and sliding window of the streaming convolution datapath.
//!
//! The line buffer is a ring of `K` rows, each `Wp` pixels of `N` channels
//! (`Wp` includes the padding columns). The window is a `K×K×N` register
//! block. For every incoming pixel at padded coordinate `(r, c)`:
//!
//! 1. the window shifts one column left;
//! 2. the top `K−1` entries of its right column are copied from the line
//!    buffer (rows `r−K+1 … r−1`, column `c`);
//! 3. the new pixel enters the bottom-right slot;
//! 4. the new pixel is written to ring row `r mod K`, replacing row `r−K`.
//!
//! After step 3 the window holds the padded patch whose bottom-right
//! corner is `(r, c)`.

#[derive(Debug, Clone)]
pub struct LineBuffer {
    k: usize,
    wp: usize,
    n: usize,
    rows: Vec<i32>,
    window: Vec<i32>,
    row: usize,
    col: usize,
}

impl LineBuffer {
    pub fn new(k: usize, wp: usize, n: usize) -> Self {
        LineBuffer {
            k,
            wp,
            n,
            rows: vec![0; k * wp * n],
            window: vec![0; k * k * n],
            row: 0,
            col: 0,
        }
    }

    /// Storage in elements.
    pub fn ring_len(&self) -> usize {
        self.rows.len()
    }

    /// `K×K×N` window, laid out `[ky][kx][channel]`.
    pub fn window(&self) -> &[i32] {
        &self.window
    }

    /// Padded coordinate the next pixel will occupy.
    pub fn position(&self) -> (usize, usize) {
        (self.row, self.col)
    }

    /// Shifts `px` (one pixel, `N` channels) in and returns its padded
    /// coordinate.
    pub fn push(&mut self, px: &[i32]) -> (usize, usize) {
        debug_assert_eq!(px.len(), self.n);
        let (k, n) = (self.k, self.n);
        let (r, c) = (self.row, self.col);
        let row_len = k * n;
        for ky in 0..k {
            let base = ky * row_len;
            self.window.copy_within(base + n..base + row_len, base);
        }
        for ky in 0..k - 1 {
            let slot = (r + 1 + ky) % k;
            let src = (slot * self.wp + c) * n;
            let dst = ky * row_len + (k - 1) * n;
            self.window[dst..dst + n].copy_from_slice(&self.rows[src..src + n]);
        }
        let dst = (k - 1) * row_len + (k - 1) * n;
        self.window[dst..dst + n].copy_from_slice(px);
        let slot = (r % k) * self.wp + c;
        self.rows[slot * n..(slot + 1) * n].copy_from_slice(px);
        self.col += 1;
        if self.col == self.wp {
            self.col = 0;
            self.row += 1;
        }
        (r, c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_tracks_the_patch() {
        let (k, wp, hp, n) = (3, 6, 5, 2);
        let img: Vec<i32> = (0..(wp * hp * n) as i32).collect();
        let mut lb = LineBuffer::new(k, wp, n);
        assert_eq!(lb.ring_len(), k * wp * n);
        for r in 0..hp {
            for c in 0..wp {
                let px = &img[(r * wp + c) * n..(r * wp + c + 1) * n];
                assert_eq!(lb.push(px), (r, c));
                if r + 1 >= k && c + 1 >= k {
                    for ky in 0..k {
                        for kx in 0..k {
                            for ch in 0..n {
                                let want = img[((r + 1 - k + ky) * wp + (c + 1 - k + kx)) * n + ch];
                                assert_eq!(lb.window()[(ky * k + kx) * n + ch], want);
                            }
                        }
                    }
                }
            }
        }
    }
}
