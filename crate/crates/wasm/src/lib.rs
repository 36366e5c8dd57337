//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Each function returns plain typed arrays so the page can draw them on a
//! canvas without any framework.

use hieratt::analysis::{count_macs, dense_attention_macs, fcsa_attention_macs, ggsa_attention_macs};
use hieratt::attention::{ggsa_workspace, GgsaParams};
use hieratt::harness::synth_image;
use hieratt::network::ModelConfig;
use hieratt::partition::{cyclic_shift, effective_size, grid_partition, window_partition, GridLayout};
use hieratt::{Dims, Error, Tensor4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

fn js(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Pixel-index tensor `1×1×h×w`, values 0..h·w.
fn pixel_ids(h: usize, w: usize) -> Tensor4 {
    Tensor4::arange(Dims::new(1, 1, h, w))
}

/// For every pixel of `ids` after partitioning, which group it landed in.
fn group_of(parts: &Tensor4, group_len: usize, pixels: usize) -> Vec<u32> {
    let mut out = vec![0; pixels];
    for (pos, &id) in parts.data().iter().enumerate() {
        out[id as usize] = (pos / group_len) as u32;
    }
    out
}

/// Window index of every pixel (row-major) for a window partition after a
/// cyclic shift by `shift`. The window is reduced to the largest size that
/// tiles the map.
pub fn window_ids(h: usize, w: usize, window: usize, shift: usize) -> Result<Vec<u32>, Error> {
    let p = effective_size(window, h, w);
    let shifted = cyclic_shift(&pixel_ids(h, w), shift as isize);
    Ok(group_of(&window_partition(&shifted, p)?, p * p, h * w))
}

/// Grid group of every pixel; pixels sharing a group attend to each other.
pub fn grid_ids(h: usize, w: usize, grid: usize) -> Result<Vec<u32>, Error> {
    let g = effective_size(grid, h, w);
    Ok(group_of(&grid_partition(&pixel_ids(h, w), g)?, g * g, h * w))
}

#[wasm_bindgen(js_name = windowMap)]
pub fn window_map(h: usize, w: usize, window: usize, shift: usize) -> Result<Vec<u32>, JsError> {
    window_ids(h, w, window, shift).map_err(js)
}

#[wasm_bindgen(js_name = gridMap)]
pub fn grid_map(h: usize, w: usize, grid: usize) -> Result<Vec<u32>, JsError> {
    grid_ids(h, w, grid).map_err(js)
}

/// Window and grid sizes actually used at `h×w`: `[window, grid]`.
#[wasm_bindgen(js_name = effectiveSizes)]
pub fn effective_sizes(h: usize, w: usize, window: usize, grid: usize) -> Vec<u32> {
    vec![effective_size(window, h, w) as u32, effective_size(grid, h, w) as u32]
}

/// Rows of `[side, fcsa, ggsa, dense, model_total]` MACs for square inputs,
/// flattened. Attention columns use one layer at the first level of
/// `preset` (small, base, base+, toy); the last column is the whole fused
/// model.
pub fn mac_rows(preset: &str, sides: &[u32]) -> Result<Vec<f64>, Error> {
    let cfg = ModelConfig::named(preset).ok_or_else(|| Error::Usage(format!("unknown preset `{preset}`")))?;
    let c = cfg.channels(0);
    let heads = cfg.heads.at(0);
    let mut out = Vec::with_capacity(sides.len() * 5);
    for &s in sides {
        let s = s as usize;
        out.extend([
            s as f64,
            fcsa_attention_macs(c, heads, s, s, cfg.window) as f64,
            ggsa_attention_macs(c, heads, s, s, cfg.grid) as f64,
            dense_attention_macs(c, s, s) as f64,
            count_macs(&cfg, s, s, true) as f64,
        ]);
    }
    Ok(out)
}

#[wasm_bindgen(js_name = macCurves)]
pub fn mac_curves(preset: &str, sides: Vec<u32>) -> Result<Vec<f64>, JsError> {
    mac_rows(preset, &sides).map_err(js)
}

/// A random grid-attention layer applied to a synthetic picture, kept so
/// that attention rows can be queried interactively.
#[wasm_bindgen]
pub struct GgsaDemo {
    size: usize,
    grid: usize,
    image: Tensor4,
    /// `groups×heads×t×t`
    attn: Tensor4,
    /// pixel → (group, token)
    slot: Vec<(usize, usize)>,
    /// (group, token) → pixel
    pixel: Vec<usize>,
}

#[wasm_bindgen]
impl GgsaDemo {
    #[wasm_bindgen(constructor)]
    pub fn new(size: usize, grid: usize, seed: u64) -> Result<GgsaDemo, JsError> {
        Self::build(size, grid, seed).map_err(js)
    }

    fn build(size: usize, grid: usize, seed: u64) -> Result<Self, Error> {
        if size == 0 {
            return Err(Error::Usage("size must be positive".into()));
        }
        let grid = effective_size(grid, size, size);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let image = synth_image(&mut rng, 3, size, size);
        // three colour channels plus a constant one, so two heads split evenly
        let x = Tensor4::from_fn(Dims::new(1, 4, size, size), |_, c, y, xx| {
            if c < 3 {
                image.at(0, c, y, xx)
            } else {
                1.0
            }
        });
        let params = GgsaParams::random(4, 2, grid, &mut rng)?;
        let ws = ggsa_workspace(&x, &params, GridLayout::new(grid))?;
        let parts = grid_partition(&pixel_ids(size, size), grid)?;
        let t = grid * grid;
        let mut slot = vec![(0, 0); size * size];
        let mut pixel = vec![0; size * size];
        for (pos, &id) in parts.data().iter().enumerate() {
            slot[id as usize] = (pos / t, pos % t);
            pixel[pos] = id as usize;
        }
        Ok(Self {
            size,
            grid,
            image,
            attn: ws.attn,
            slot,
            pixel,
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn grid(&self) -> usize {
        self.grid
    }

    /// RGBA bytes of the input picture.
    pub fn rgba(&self) -> Vec<u8> {
        let n = self.size * self.size;
        let mut out = Vec::with_capacity(4 * n);
        for i in 0..n {
            for c in 0..3 {
                out.push((self.image.data()[c * n + i].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
            out.push(255);
        }
        out
    }

    /// Attention weights from pixel `(y, x)` to every pixel, averaged over
    /// heads; zero outside the query's grid group.
    #[wasm_bindgen(js_name = attentionRow)]
    pub fn attention_row(&self, y: usize, x: usize) -> Vec<f64> {
        let n = self.size * self.size;
        let mut out = vec![0.0; n];
        if y >= self.size || x >= self.size {
            return out;
        }
        let (group, token) = self.slot[y * self.size + x];
        let d = self.attn.dims();
        let t = d.w;
        for h in 0..d.c {
            for j in 0..t {
                out[self.pixel[group * t + j]] += self.attn.at(group, h, token, j) / d.c as f64;
            }
        }
        out
    }
}
