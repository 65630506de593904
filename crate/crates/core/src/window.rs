//! Non-overlapping `K×K` windows over a feature map.
//!
//! Inputs are zero-padded on the right and bottom up to a multiple of `K`,
//! optionally rolled by `-shift` in both directions, then cut into windows in
//! row-major window order. Every op here is a gather, so the backward pass is
//! a scatter-add through the same index map.

use std::rc::Rc;

use serde::Serialize;

use crate::autodiff::{Tape, Var, GATHER_PAD};
use crate::error::{Error, Result};
use crate::tensor::{Layout, Tensor};

/// Additive score for forbidden attention pairs.
pub const MASK_NEG: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct WindowLayout {
    pub window_size: usize,
    pub height: usize,
    pub width: usize,
    pub padded_height: usize,
    pub padded_width: usize,
    pub windows_h: usize,
    pub windows_w: usize,
    pub pad_bottom: usize,
    pub pad_right: usize,
    pub shift: usize,
}

impl WindowLayout {
    /// `shift` must be 0 or `⌊K/2⌋`.
    pub fn new(height: usize, width: usize, window_size: usize, shift: usize) -> Result<Self> {
        if window_size == 0 {
            return Err(Error::Config("window size must be at least 1".into()));
        }
        if height == 0 || width == 0 {
            return Err(Error::invalid("window_partition", format!("empty feature map {height}x{width}")));
        }
        if shift != 0 && shift != window_size / 2 {
            return Err(Error::Config(format!(
                "shift must be 0 or {} for window size {window_size}, got {shift}",
                window_size / 2
            )));
        }
        let padded_height = height.div_ceil(window_size) * window_size;
        let padded_width = width.div_ceil(window_size) * window_size;
        Ok(WindowLayout {
            window_size,
            height,
            width,
            padded_height,
            padded_width,
            windows_h: padded_height / window_size,
            windows_w: padded_width / window_size,
            pad_bottom: padded_height - height,
            pad_right: padded_width - width,
            shift,
        })
    }

    pub fn num_windows(&self) -> usize {
        self.windows_h * self.windows_w
    }

    pub fn tokens_per_window(&self) -> usize {
        self.window_size * self.window_size
    }

    pub fn is_padded(&self) -> bool {
        self.pad_bottom > 0 || self.pad_right > 0
    }

    /// Whether [`WindowLayout::mask`] has any non-zero entry.
    pub fn needs_mask(&self) -> bool {
        self.is_padded() || self.shift > 0
    }

    /// Padded-grid coordinates of window `w`, slot `i`, after the roll.
    fn grid(&self, w: usize, i: usize) -> (usize, usize) {
        let k = self.window_size;
        ((w / self.windows_w) * k + i / k, (w % self.windows_w) * k + i % k)
    }

    /// Flat `y·W + x` position in the original map feeding window `w`,
    /// slot `i`, or `None` for padding.
    pub fn source(&self, w: usize, i: usize) -> Option<usize> {
        let (gy, gx) = self.grid(w, i);
        let y = (gy + self.shift) % self.padded_height;
        let x = (gx + self.shift) % self.padded_width;
        (y < self.height && x < self.width).then_some(y * self.width + x)
    }

    /// `(window, slot)` holding original position `(y, x)`.
    pub fn slot_of(&self, y: usize, x: usize) -> (usize, usize) {
        let k = self.window_size;
        let gy = (y + self.padded_height - self.shift) % self.padded_height;
        let gx = (x + self.padded_width - self.shift) % self.padded_width;
        ((gy / k) * self.windows_w + gx / k, (gy % k) * k + gx % k)
    }

    /// Region label used to keep wrapped-around pieces of a shifted window apart.
    fn region(&self, w: usize, i: usize) -> usize {
        if self.shift == 0 {
            return 0;
        }
        let (gy, gx) = self.grid(w, i);
        let band = |g: usize, len: usize| {
            if g < len - self.window_size {
                0
            } else if g < len - self.shift {
                1
            } else {
                2
            }
        };
        band(gy, self.padded_height) * 3 + band(gx, self.padded_width)
    }

    /// Additive attention mask `(nW, K², K²)`: 0 for allowed pairs,
    /// [`MASK_NEG`] when either slot is padding or the pair straddles a
    /// wrap-around boundary.
    pub fn mask(&self) -> Tensor {
        let (nw, t) = (self.num_windows(), self.tokens_per_window());
        let mut data = vec![0.0; nw * t * t];
        if self.needs_mask() {
            for w in 0..nw {
                let info: Vec<(bool, usize)> = (0..t)
                    .map(|i| (self.source(w, i).is_some(), self.region(w, i)))
                    .collect();
                for i in 0..t {
                    for j in 0..t {
                        let ok = info[i].0 && info[j].0 && info[i].1 == info[j].1;
                        if !ok {
                            data[(w * t + i) * t + j] = MASK_NEG;
                        }
                    }
                }
            }
        }
        Tensor::from_parts(vec![nw, t, t], data)
    }

    fn check_map(&self, op: &'static str, h: usize, w: usize) -> Result<()> {
        if (h, w) != (self.height, self.width) {
            return Err(Error::invalid(
                op,
                format!("feature map {h}x{w} does not match layout {}x{}", self.height, self.width),
            ));
        }
        Ok(())
    }

    fn check_windows(&self, shape: &[usize]) -> Result<(usize, usize)> {
        let [b, t, c] = match *shape {
            [b, t, c] => [b, t, c],
            _ => return Err(Error::invalid("window_reverse", format!("expected (B, K², C), got {shape:?}"))),
        };
        let nw = self.num_windows();
        if t != self.tokens_per_window() || b % nw != 0 {
            return Err(Error::invalid(
                "window_reverse",
                format!("windows {shape:?} inconsistent with {nw} windows of {} tokens", self.tokens_per_window()),
            ));
        }
        Ok((b / nw, c))
    }
}

impl Tape {
    /// `(N, H·W, C)` tokens to `(N·nW, K², C)` windows.
    pub fn partition_tokens(&self, x: Var, layout: &WindowLayout) -> Result<Var> {
        let shape = self.shape(x);
        let [n, l, c] = match *shape {
            [n, l, c] => [n, l, c],
            _ => return Err(Error::invalid("window_partition", format!("expected (N, L, C), got {shape:?}"))),
        };
        if l != layout.height * layout.width {
            return Err(Error::invalid(
                "window_partition",
                format!("sequence length {l} != {}x{}", layout.height, layout.width),
            ));
        }
        let (nw, t) = (layout.num_windows(), layout.tokens_per_window());
        let mut index = Vec::with_capacity(n * nw * t * c);
        for b in 0..n {
            for w in 0..nw {
                for i in 0..t {
                    match layout.source(w, i) {
                        Some(p) => index.extend((b * l + p) * c..(b * l + p + 1) * c),
                        None => index.extend(std::iter::repeat_n(GATHER_PAD, c)),
                    }
                }
            }
        }
        self.gather(x, Rc::new(index), &[n * nw, t, c])
    }

    /// Inverse of [`Tape::partition_tokens`]: drops padding, undoes the roll.
    pub fn reverse_tokens(&self, windows: Var, layout: &WindowLayout) -> Result<Var> {
        let (n, c) = layout.check_windows(&self.shape(windows))?;
        let (nw, t) = (layout.num_windows(), layout.tokens_per_window());
        let l = layout.height * layout.width;
        let mut index = Vec::with_capacity(n * l * c);
        for b in 0..n {
            for y in 0..layout.height {
                for x in 0..layout.width {
                    let (w, i) = layout.slot_of(y, x);
                    let base = ((b * nw + w) * t + i) * c;
                    index.extend(base..base + c);
                }
            }
        }
        self.gather(windows, Rc::new(index), &[n, l, c])
    }

    /// NCHW map to `(N·nW, K², C)` windows.
    pub fn window_partition(&self, x: Var, layout: &WindowLayout) -> Result<Var> {
        let shape = self.shape(x);
        let [n, c, h, w] = match *shape {
            [n, c, h, w] => [n, c, h, w],
            _ => return Err(Error::invalid("window_partition", format!("expected NCHW, got {shape:?}"))),
        };
        layout.check_map("window_partition", h, w)?;
        let (nw, t, hw) = (layout.num_windows(), layout.tokens_per_window(), h * w);
        let mut index = Vec::with_capacity(n * nw * t * c);
        for b in 0..n {
            for win in 0..nw {
                for i in 0..t {
                    let src = layout.source(win, i);
                    index.extend((0..c).map(|ch| src.map_or(GATHER_PAD, |p| (b * c + ch) * hw + p)));
                }
            }
        }
        self.gather(x, Rc::new(index), &[n * nw, t, c])
    }

    /// `(N·nW, K², C)` windows back to an NCHW map.
    pub fn window_reverse(&self, windows: Var, layout: &WindowLayout) -> Result<Var> {
        let (n, c) = layout.check_windows(&self.shape(windows))?;
        let (nw, t) = (layout.num_windows(), layout.tokens_per_window());
        let (h, w) = (layout.height, layout.width);
        let mut index = Vec::with_capacity(n * c * h * w);
        for b in 0..n {
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let (win, i) = layout.slot_of(y, x);
                        index.push(((b * nw + win) * t + i) * c + ch);
                    }
                }
            }
        }
        self.gather(windows, Rc::new(index), &[n, c, h, w])
    }
}

/// Plain-tensor partition: returns the windows, their layout and the mask.
pub fn window_partition(x: &Tensor, window_size: usize, shift: usize) -> Result<(Tensor, WindowLayout, Tensor)> {
    let [_, _, h, w] = match *x.shape() {
        [n, c, h, w] => [n, c, h, w],
        _ => return Err(Error::invalid("window_partition", format!("expected NCHW, got {:?}", x.shape()))),
    };
    let layout = WindowLayout::new(h, w, window_size, shift)?;
    let tape = Tape::new();
    let v = tape.constant(x.clone());
    let out = tape.window_partition(v, &layout)?;
    Ok((Rc::unwrap_or_clone(tape.value(out)), layout, layout.mask()))
}

pub fn window_reverse(windows: &Tensor, layout: &WindowLayout) -> Result<Tensor> {
    let tape = Tape::new();
    let v = tape.constant(windows.clone());
    let out = tape.window_reverse(v, layout)?;
    Ok(Rc::unwrap_or_clone(tape.value(out)).with_layout(Layout::Nchw))
}
