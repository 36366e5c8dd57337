//! The U-shaped restoration network: a 3×3 stem, three encoder levels with
//! downsampling, a latent stage, three decoder levels with upsampling and
//! skips, optional refinement blocks, a 3×3 head and a global residual.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{self, AlphaMode};
use crate::autodiff::{Tape, Var};
use crate::error::{config_err, shape_err, Error, Result};
use crate::ffn;
use crate::nn;
use crate::params::{join, Bound, ParamStore, Scope};
use crate::partition::{effective_size, GridLayout, WindowLayout};
use crate::tensor::{DType, Scalar, Tensor4};

pub const LEVELS: usize = 4;

/// Heads per U-level.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum HeadSchedule {
    /// `base · 2^level`
    Doubling { base: usize },
    Constant { heads: usize },
    Explicit { heads: [usize; LEVELS] },
}

impl HeadSchedule {
    pub fn at(&self, level: usize) -> usize {
        match self {
            HeadSchedule::Doubling { base } => base << level,
            HeadSchedule::Constant { heads } => *heads,
            HeadSchedule::Explicit { heads } => heads[level],
        }
    }

    pub fn label(&self) -> String {
        match self {
            HeadSchedule::Doubling { base } => format!("doubling({base})"),
            HeadSchedule::Constant { heads } => format!("constant({heads})"),
            HeadSchedule::Explicit { heads } => format!("explicit{heads:?}"),
        }
    }
}

/// How the per-level block counts map onto encoder/decoder stages.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BlockMode {
    /// Each count is a number of FGTBs; decoder repeats the encoder count.
    #[default]
    MirroredFgtb,
    /// Each count is a number of transformer layers (two per FGTB);
    /// decoder repeats the encoder count.
    MirroredLayers,
    /// Each count is a per-level FGTB total shared by encoder and decoder
    /// (encoder takes the larger half).
    Split,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SkipMode {
    /// Concatenate, then a pointwise conv back to the level width.
    #[default]
    Concat,
    Add,
}

/// FGTB counts per stage after applying a [`BlockMode`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageBlocks {
    pub encoder: [usize; 3],
    pub latent: usize,
    pub decoder: [usize; 3],
    pub refine: usize,
}

fn default_expansion() -> f64 {
    2.0
}
fn default_heads() -> HeadSchedule {
    HeadSchedule::Doubling { base: 1 }
}
fn default_image_channels() -> usize {
    3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub base_channels: usize,
    pub block_counts: [usize; LEVELS],
    pub refinement_blocks: usize,
    pub window: usize,
    pub grid: usize,
    #[serde(default = "default_expansion")]
    pub expansion: f64,
    #[serde(default = "default_heads")]
    pub heads: HeadSchedule,
    #[serde(default)]
    pub block_mode: BlockMode,
    #[serde(default)]
    pub skip: SkipMode,
    #[serde(default)]
    pub alpha: AlphaMode,
    #[serde(default = "default_image_channels")]
    pub image_channels: usize,
    #[serde(default)]
    pub dtype: DType,
    #[serde(default)]
    pub seed: u64,
}

impl ModelConfig {
    fn preset(c: usize, blocks: [usize; 4], r: usize, p: usize, g: usize) -> Self {
        Self {
            base_channels: c,
            block_counts: blocks,
            refinement_blocks: r,
            window: p,
            grid: g,
            expansion: default_expansion(),
            heads: default_heads(),
            block_mode: BlockMode::default(),
            skip: SkipMode::default(),
            alpha: AlphaMode::default(),
            image_channels: 3,
            dtype: DType::F64,
            seed: 0,
        }
    }

    /// Published sizes with the hyperparameters picked by
    /// [`crate::analysis::calibrate`].
    fn published(c: usize, blocks: [usize; 4], r: usize, g: usize) -> Self {
        Self {
            heads: HeadSchedule::Constant { heads: 8 },
            block_mode: BlockMode::Split,
            ..Self::preset(c, blocks, r, 32, g)
        }
    }

    pub fn small() -> Self {
        Self::published(32, [4, 6, 6, 8], 0, 8)
    }

    pub fn base() -> Self {
        Self::published(48, [4, 6, 6, 8], 4, 16)
    }

    pub fn base_plus() -> Self {
        Self::published(48, [6, 8, 8, 10], 6, 16)
    }

    /// Desk-scale model for the synthetic denoising run.
    pub fn toy() -> Self {
        Self::preset(8, [1, 1, 1, 1], 0, 8, 4)
    }

    /// `small`, `base`, `base+` or `toy`.
    pub fn named(name: &str) -> Option<Self> {
        match name {
            "small" => Some(Self::small()),
            "base" => Some(Self::base()),
            "base+" | "base-plus" => Some(Self::base_plus()),
            "toy" => Some(Self::toy()),
            _ => None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    pub fn hidden(&self, level: usize) -> usize {
        ffn::hidden_width(self.channels(level), self.expansion)
    }

    pub fn stage_blocks(&self) -> StageBlocks {
        let b = self.block_counts;
        let r = self.refinement_blocks;
        match self.block_mode {
            BlockMode::MirroredFgtb => StageBlocks {
                encoder: [b[0], b[1], b[2]],
                latent: b[3],
                decoder: [b[0], b[1], b[2]],
                refine: r,
            },
            BlockMode::MirroredLayers => {
                let f = |n: usize| n.div_ceil(2);
                StageBlocks {
                    encoder: [f(b[0]), f(b[1]), f(b[2])],
                    latent: f(b[3]),
                    decoder: [f(b[0]), f(b[1]), f(b[2])],
                    refine: f(r),
                }
            }
            BlockMode::Split => StageBlocks {
                encoder: [b[0].div_ceil(2), b[1].div_ceil(2), b[2].div_ceil(2)],
                latent: b[3],
                decoder: [b[0] / 2, b[1] / 2, b[2] / 2],
                refine: r,
            },
        }
    }

    /// Padding multiple for input sizes: every level halves cleanly and the
    /// top level can hold a full grid.
    pub fn size_multiple(&self) -> usize {
        lcm(1 << (LEVELS - 1), self.grid.max(1))
    }

    pub fn validate(&self) -> Result<()> {
        let field = |name: &str, msg: &str| Err(config_err!("{name}: {msg}"));
        if self.base_channels == 0 || self.base_channels % 2 != 0 {
            return field("base_channels", "must be a positive even number");
        }
        if self.window == 0 {
            return field("window", "must be ≥ 1");
        }
        if self.grid == 0 {
            return field("grid", "must be ≥ 1");
        }
        if !(self.expansion.is_finite() && self.expansion >= 1.0) {
            return field("expansion", "must be a finite value ≥ 1");
        }
        if self.image_channels == 0 {
            return field("image_channels", "must be ≥ 1");
        }
        for level in 0..LEVELS {
            let h = self.heads.at(level);
            if h == 0 || self.channels(level) % h != 0 {
                return Err(config_err!(
                    "heads: {h} heads do not divide {} channels at level {level}",
                    self.channels(level)
                ));
            }
        }
        Ok(())
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn lcm(a: usize, b: usize) -> usize {
    a / gcd(a, b) * b
}

/// Everything an FGTB needs besides its parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockGeometry {
    pub heads: usize,
    pub window: usize,
    pub grid: usize,
}

impl BlockGeometry {
    /// Layouts actually used on an h×w map.
    pub fn layouts(&self, h: usize, w: usize) -> (WindowLayout, GridLayout) {
        let p = effective_size(self.window, h, w);
        (WindowLayout::shifted(p), GridLayout::new(effective_size(self.grid, h, w)))
    }
}

/// Prefix of every FGTB, in forward order.
pub fn block_prefixes(cfg: &ModelConfig) -> Vec<(String, usize)> {
    let sb = cfg.stage_blocks();
    let mut out = Vec::new();
    for l in 0..3 {
        out.extend((0..sb.encoder[l]).map(|i| (format!("enc{l}.block{i}"), l)));
    }
    out.extend((0..sb.latent).map(|i| (format!("latent.block{i}"), 3)));
    for l in (0..3).rev() {
        out.extend((0..sb.decoder[l]).map(|i| (format!("dec{l}.block{i}"), l)));
    }
    out.extend((0..sb.refine).map(|i| (format!("refine.block{i}"), 0)));
    out
}

pub fn init_fgtb<R: rand::Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    c: usize,
    hidden: usize,
    geom: BlockGeometry,
    alpha: AlphaMode,
    rng: &mut R,
) -> Result<()> {
    let n = |s: &str| join(prefix, s);
    nn::init_layer_norm(store, &n("norm1"), c)?;
    attention::init_fcsa(store, &n("fcsa"), c, geom.heads, geom.window, alpha, rng)?;
    nn::init_layer_norm(store, &n("norm2"), c)?;
    ffn::init_rep_leffn(store, &n("ffn1"), c, hidden, rng)?;
    nn::init_layer_norm(store, &n("norm3"), c)?;
    attention::init_ggsa(store, &n("ggsa"), c, geom.heads, geom.grid, rng)?;
    nn::init_layer_norm(store, &n("norm4"), c)?;
    ffn::init_rep_leffn(store, &n("ffn2"), c, hidden, rng)
}

/// Four pre-norm residual sub-layers: FCSA, FFN, GGSA, FFN.
pub fn fgtb<T: Scalar>(tape: &mut Tape<T>, x: Var, s: &Scope, geom: BlockGeometry) -> Result<Var> {
    let d = tape.dims(x);
    let (wl, gl) = geom.layouts(d.h, d.w);
    let h = nn::layer_norm(tape, x, s, "norm1")?;
    let h = attention::fcsa(tape, h, &s.child("fcsa"), geom.heads, wl)?;
    let x = tape.add(x, h)?;
    let h = nn::layer_norm(tape, x, s, "norm2")?;
    let h = ffn::ffn(tape, h, &s.child("ffn1"))?;
    let x = tape.add(x, h)?;
    let h = nn::layer_norm(tape, x, s, "norm3")?;
    let h = attention::ggsa(tape, h, &s.child("ggsa"), geom.heads, gl)?;
    let x = tape.add(x, h)?;
    let h = nn::layer_norm(tape, x, s, "norm4")?;
    let h = ffn::ffn(tape, h, &s.child("ffn2"))?;
    tape.add(x, h)
}

fn with_store<T: Scalar>(
    x: &Tensor4<T>,
    store: &ParamStore,
    run: impl FnOnce(&mut Tape<T>, Var, &Scope) -> Result<Var>,
) -> Result<Tensor4<T>> {
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let y = run(&mut tape, xv, &bound.scope(""))?;
    Ok(tape.value(y).clone())
}

pub fn fgtb_forward<T: Scalar>(
    x: &Tensor4<T>,
    store: &ParamStore,
    prefix: &str,
    geom: BlockGeometry,
) -> Result<Tensor4<T>> {
    with_store(x, store, |t, x, s| fgtb(t, x, &s.child(prefix), geom))
}

/// Pointwise conv to half the channels, then pixel-unshuffle:
/// (C, H, W) → (2C, H/2, W/2).
pub fn down<T: Scalar>(tape: &mut Tape<T>, x: Var, s: &Scope, name: &str) -> Result<Var> {
    let d = tape.dims(x);
    if d.h % 2 != 0 || d.w % 2 != 0 {
        return Err(shape_err!("downsample needs even spatial dims, got {d}"));
    }
    let y = nn::pointwise(tape, x, s, name)?;
    tape.pixel_unshuffle(y, 2)
}

/// Pixel-shuffle, then pointwise conv: (2C, H, W) → (C, 2H, 2W).
pub fn up<T: Scalar>(tape: &mut Tape<T>, x: Var, s: &Scope, name: &str) -> Result<Var> {
    let y = tape.pixel_shuffle(x, 2)?;
    nn::pointwise(tape, y, s, name)
}

pub fn downsample<T: Scalar>(x: &Tensor4<T>, store: &ParamStore, name: &str) -> Result<Tensor4<T>> {
    with_store(x, store, |t, x, s| down(t, x, s, name))
}

pub fn upsample<T: Scalar>(x: &Tensor4<T>, store: &ParamStore, name: &str) -> Result<Tensor4<T>> {
    with_store(x, store, |t, x, s| up(t, x, s, name))
}

/// Original size of a padded image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropRecord {
    pub h: usize,
    pub w: usize,
}

pub fn padded_size(h: usize, w: usize, cfg: &ModelConfig) -> (usize, usize) {
    let m = cfg.size_multiple();
    (h.max(1).div_ceil(m) * m, w.max(1).div_ceil(m) * m)
}

/// Reflect-pads bottom/right up to the next valid size.
pub fn pad_to_valid<T: Scalar>(image: &Tensor4<T>, cfg: &ModelConfig) -> Result<(Tensor4<T>, CropRecord)> {
    let d = image.dims();
    let (h, w) = padded_size(d.h, d.w, cfg);
    let padded = crate::ops::pad_reflect(image, h, w)?;
    Ok((padded, CropRecord { h: d.h, w: d.w }))
}

pub fn crop_to<T: Scalar>(x: &Tensor4<T>, rec: CropRecord) -> Result<Tensor4<T>> {
    crate::ops::crop(x, rec.h, rec.w)
}

/// Builds the whole network on `tape` for an `n×image_channels×H×W` input.
pub fn forward_graph<T: Scalar>(tape: &mut Tape<T>, bound: &Bound, cfg: &ModelConfig, image: Var) -> Result<Var> {
    let d = tape.dims(image);
    if d.c != cfg.image_channels {
        return Err(shape_err!(
            "model expects {} image channels, got input {d}",
            cfg.image_channels
        ));
    }
    if d.h == 0 || d.w == 0 {
        return Err(shape_err!("empty image {d}"));
    }
    let s = bound.scope("");
    let (ph, pw) = padded_size(d.h, d.w, cfg);
    let input = if (ph, pw) == (d.h, d.w) { image } else { tape.pad_reflect(image, ph, pw)? };
    let sb = cfg.stage_blocks();
    let geom = |l: usize| BlockGeometry {
        heads: cfg.heads.at(l),
        window: cfg.window,
        grid: cfg.grid,
    };
    let run_blocks = |tape: &mut Tape<T>, mut x: Var, stage: &str, n: usize, l: usize| -> Result<Var> {
        for i in 0..n {
            x = fgtb(tape, x, &s.child(&format!("{stage}.block{i}")), geom(l))?;
        }
        Ok(x)
    };

    let mut x = nn::dense(tape, input, &s, "stem")?;
    let mut skips = Vec::with_capacity(3);
    for l in 0..3 {
        x = run_blocks(tape, x, &format!("enc{l}"), sb.encoder[l], l)?;
        skips.push(x);
        x = down(tape, x, &s, &format!("down{l}"))?;
    }
    x = run_blocks(tape, x, "latent", sb.latent, 3)?;
    for l in (0..3).rev() {
        x = up(tape, x, &s, &format!("up{l}"))?;
        if l > 0 {
            x = match cfg.skip {
                SkipMode::Concat => {
                    let cat = tape.concat_channels(x, skips[l])?;
                    nn::pointwise(tape, cat, &s, &format!("skip{l}"))?
                }
                SkipMode::Add => tape.add(x, skips[l])?,
            };
        }
        x = run_blocks(tape, x, &format!("dec{l}"), sb.decoder[l], l)?;
    }
    x = run_blocks(tape, x, "refine", sb.refine, 0)?;
    let y = nn::dense(tape, x, &s, "head")?;
    let y = tape.add(y, input)?;
    if (ph, pw) == (d.h, d.w) {
        Ok(y)
    } else {
        tape.crop(y, d.h, d.w)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    /// Deterministic initialization from `config.seed`.
    pub fn build(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new(config.dtype);
        let c0 = config.base_channels;
        nn::init_dense(&mut store, "stem", config.image_channels, c0, 3, &mut rng)?;
        let sb = config.stage_blocks();
        let block = |store: &mut ParamStore, rng: &mut ChaCha8Rng, name: String, l: usize| {
            let geom = BlockGeometry {
                heads: config.heads.at(l),
                window: config.window,
                grid: config.grid,
            };
            init_fgtb(store, &name, config.channels(l), config.hidden(l), geom, config.alpha, rng)
        };
        for l in 0..3 {
            for i in 0..sb.encoder[l] {
                block(&mut store, &mut rng, format!("enc{l}.block{i}"), l)?;
            }
            let c = config.channels(l);
            nn::init_pointwise(&mut store, &format!("down{l}"), c, c / 2, &mut rng)?;
        }
        for i in 0..sb.latent {
            block(&mut store, &mut rng, format!("latent.block{i}"), 3)?;
        }
        for l in (0..3).rev() {
            let c = config.channels(l);
            nn::init_pointwise(&mut store, &format!("up{l}"), c / 2, c, &mut rng)?;
            if l > 0 && config.skip == SkipMode::Concat {
                nn::init_pointwise(&mut store, &format!("skip{l}"), 2 * c, c, &mut rng)?;
            }
            for i in 0..sb.decoder[l] {
                block(&mut store, &mut rng, format!("dec{l}.block{i}"), l)?;
            }
        }
        for i in 0..sb.refine {
            block(&mut store, &mut rng, format!("refine.block{i}"), 0)?;
        }
        nn::init_dense(&mut store, "head", c0, config.image_channels, 3, &mut rng)?;
        Ok(Self {
            config: config.clone(),
            params: store,
        })
    }

    pub fn is_fused(&self) -> bool {
        ffn::is_fused(&self.params)
    }

    /// Collapses every training-form FFN.
    pub fn fused(&self) -> Result<Self> {
        Ok(Self {
            config: self.config.clone(),
            params: ffn::fuse_store(&self.params)?,
        })
    }

    pub fn num_params(&self) -> usize {
        self.params.num_elements()
    }

    pub fn forward<T: Scalar>(&self, image: &Tensor4<T>) -> Result<Tensor4<T>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let x = tape.constant(image.clone());
        let y = forward_graph(&mut tape, &bound, &self.config, x)?;
        Ok(tape.value(y).clone())
    }

    /// Zeroes the output head, making the network an exact identity.
    pub fn zero_head(&mut self) -> Result<()> {
        nn::zero_layer(&mut self.params, "head")
    }

    /// Path of the JSON config stored next to a weight file.
    pub fn sidecar_path(weights: &Path) -> PathBuf {
        let mut s = weights.as_os_str().to_owned();
        s.push(".json");
        PathBuf::from(s)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut store = self.params.clone();
        store.set_dtype(self.config.dtype);
        store.save(path)?;
        std::fs::write(Self::sidecar_path(path), self.config.to_json())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let side = Self::sidecar_path(path);
        let text = std::fs::read_to_string(&side).map_err(|e| {
            Error::Usage(format!("cannot read config sidecar {}: {e}", side.display()))
        })?;
        let config = ModelConfig::from_json(&text)?;
        let params = ParamStore::load(path)?;
        let model = Self { config, params };
        model.check_names()?;
        Ok(model)
    }

    /// Verifies that the stored names are exactly those of a freshly built
    /// model (training or fused form).
    pub fn check_names(&self) -> Result<()> {
        let mut fresh = Self::build(&self.config)?;
        if self.is_fused() {
            fresh = fresh.fused()?;
        }
        for (name, t) in fresh.params.iter() {
            let have = self.params.get(name)?;
            if have.dims() != t.dims() {
                return Err(shape_err!("`{name}` is {}, expected {}", have.dims(), t.dims()));
            }
        }
        if fresh.params.len() != self.params.len() {
            let extra = self.params.names().find(|n| !fresh.params.contains(n)).unwrap_or("?");
            return Err(config_err!("unexpected parameter `{extra}`"));
        }
        Ok(())
    }
}
