//! Multi-scale per-image feature pyramids and the bilinear sampling
//! primitive used by deformable attention.
//!
//! Level `i` (1-based) of a pyramid over an `H x W` image has spatial size
//! `H / 2^(i+2) x W / 2^(i+2)`: level 1 comes from an 8x8 strided patch
//! projection, deeper levels from learned 2x strided reductions.

pub mod ppm;

use crate::error::{Error, Result};
use crate::numcore::{Binding, Graph, ParamStore, Prng, Real, Tensor, Var};

pub const PATCH: usize = 8;

/// Raw input image, pixel values in `[0, 1]`, channels-last `(H, W, ch)`.
#[derive(Debug, Clone)]
pub struct RawImage {
    pub pixels: Tensor<f64>,
}

impl RawImage {
    pub fn new(pixels: Tensor<f64>) -> Result<Self> {
        if pixels.rank() != 3 {
            return Err(Error::Dimension("RawImage expects (H, W, ch)".to_string()));
        }
        let ch = pixels.shape[2];
        if ch != 1 && ch != 3 {
            return Err(Error::Dimension(format!("RawImage channels must be 1 or 3, got {ch}")));
        }
        Ok(RawImage { pixels })
    }

    pub fn height(&self) -> usize {
        self.pixels.shape[0]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape[1]
    }

    pub fn channels(&self) -> usize {
        self.pixels.shape[2]
    }

    /// Divisibility required to build an `levels`-deep pyramid.
    pub fn check_divisible(&self, levels: usize) -> Result<()> {
        let f = 1usize << (levels + 2);
        if self.height() % f != 0 || self.width() % f != 0 {
            return Err(Error::Dimension(format!(
                "image {}x{} not divisible by 2^(L+2) = {f}",
                self.height(),
                self.width()
            )));
        }
        Ok(())
    }
}

/// Materialized multi-scale feature maps for one image.
#[derive(Debug, Clone)]
pub struct ImagePyramid<F: Real> {
    /// Level `i` at index `i-1`, each `(H_i, W_i, C)`.
    pub levels: Vec<Tensor<F>>,
}

impl<F: Real> ImagePyramid<F> {
    pub fn level_count(&self) -> usize {
        self.levels.len()
    }

    pub fn channels(&self) -> usize {
        self.levels[0].shape[2]
    }

    pub fn cast<G: Real>(&self) -> ImagePyramid<G> {
        ImagePyramid {
            levels: self.levels.iter().map(|l| l.cast()).collect(),
        }
    }
}

/// Graph-resident pyramid (levels are differentiable nodes).
#[derive(Debug, Clone)]
pub struct PyramidVars {
    pub levels: Vec<Var>,
}

impl PyramidVars {
    pub fn from_values<F: Real>(g: &mut Graph<F>, p: &ImagePyramid<F>) -> Self {
        PyramidVars {
            levels: p.levels.iter().map(|l| g.constant(l.clone())).collect(),
        }
    }

    pub fn to_values<F: Real>(&self, g: &Graph<F>) -> ImagePyramid<F> {
        ImagePyramid {
            levels: self.levels.iter().map(|v| g.value(*v).clone()).collect(),
        }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize, PartialEq)]
pub struct EncoderConfig {
    /// Number of pyramid levels L.
    pub levels: usize,
    /// Feature channel width C (shared with the rest of the model).
    pub channels: usize,
    /// Image channel count the encoder was built for.
    pub image_channels: usize,
}

pub fn init_encoder_params<F: Real>(
    store: &mut ParamStore<F>,
    prefix: &str,
    cfg: &EncoderConfig,
    rng: &mut Prng,
) {
    let c = cfg.channels;
    let mut r = rng.split_str("encoder");
    let gauss = |shape: &[usize], sigma: f64, r: &mut Prng| {
        Tensor::from_fn(shape, |_| F::from_f64(r.normal() * sigma))
    };
    let fan_in = (PATCH * PATCH * cfg.image_channels) as f64;
    store.add(
        &format!("{prefix}.patch.w"),
        gauss(&[PATCH, PATCH, cfg.image_channels, c], 1.0 / fan_in.sqrt(), &mut r),
    );
    store.add(&format!("{prefix}.patch.b"), Tensor::zeros(&[c]));
    for lvl in 2..=cfg.levels {
        let sigma = 1.0 / ((4 * c) as f64).sqrt();
        store.add(
            &format!("{prefix}.reduce{lvl}.w"),
            gauss(&[2, 2, c, c], sigma, &mut r),
        );
        store.add(&format!("{prefix}.reduce{lvl}.b"), Tensor::zeros(&[c]));
    }
}

/// Build the pyramid of one image inside a graph (differentiable through the
/// encoder parameters).
pub fn encode_pyramid<F: Real>(
    g: &mut Graph<F>,
    img: &RawImage,
    store: &ParamStore<F>,
    binding: &Binding,
    prefix: &str,
    cfg: &EncoderConfig,
) -> Result<PyramidVars> {
    img.check_divisible(cfg.levels)?;
    if img.channels() != cfg.image_channels {
        return Err(Error::Dimension(format!(
            "encoder built for {} image channels, got {}",
            cfg.image_channels,
            img.channels()
        )));
    }
    let x = g.constant(img.pixels.cast());
    let w = binding.var(store, &format!("{prefix}.patch.w"));
    let b = binding.var(store, &format!("{prefix}.patch.b"));
    let mut level = g.conv2d(x, w, b, PATCH, 0)?;
    let mut levels = vec![level];
    for lvl in 2..=cfg.levels {
        let w = binding.var(store, &format!("{prefix}.reduce{lvl}.w"));
        let b = binding.var(store, &format!("{prefix}.reduce{lvl}.b"));
        let reduced = g.conv2d(level, w, b, 2, 0)?;
        let act = g.tanh(reduced);
        levels.push(act);
        level = act;
    }
    Ok(PyramidVars { levels })
}

/// Convenience wrapper producing plain tensors.
pub fn encode_pyramid_value<F: Real>(
    img: &RawImage,
    store: &ParamStore<F>,
    prefix: &str,
    cfg: &EncoderConfig,
) -> Result<ImagePyramid<F>> {
    let mut g = Graph::new();
    let binding = store.bind(&mut g);
    let vars = encode_pyramid(&mut g, img, store, &binding, prefix, cfg)?;
    Ok(vars.to_values(&g))
}

/// Expected spatial extent of level `i` (1-based) for base size `h`.
pub fn level_extent(h: usize, i: usize) -> usize {
    h >> (i + 2)
}
