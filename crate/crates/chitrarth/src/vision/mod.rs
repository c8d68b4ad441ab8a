//! ViT-style patch encoder with config-selectable variants.

pub mod ppm;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ImageRef, ShapeSpec};
use crate::error::{Error, Result};
use crate::nn::{Block, BoundBlock, BoundLayerNorm, BoundLinear, LayerNorm, Linear};
use crate::params::{Binder, ParamTensor, ParamVisitor, ParamVisitorMut};
use crate::tensor::{Scalar, Tape, TensorRef};
use ppm::RawImage;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub variant_name: String,
    pub image_size: usize,
    pub patch_size: usize,
    pub d_vision: usize,
    pub n_layers: usize,
    pub n_heads: usize,
}

impl EncoderConfig {
    /// Registered variants, selectable purely by name. The desk-scale pair
    /// mirrors the CLIP-vs-SigLIP swap; the paper-geometry pair keeps the
    /// 576- and 729-token patch grids as valid configs.
    pub fn variant(name: &str) -> Result<Self> {
        let (image_size, patch_size, d_vision) = match name {
            "clip-like" => (48, 8, 64),
            "siglip-like" => (48, 6, 80),
            "clip-vit-l-336" => (336, 14, 64),
            "siglip-so400m-378" => (378, 14, 80),
            other => {
                return Err(Error::Config(format!(
                    "unknown encoder variant {other:?}; registered: clip-like, siglip-like, clip-vit-l-336, siglip-so400m-378"
                )))
            }
        };
        Ok(EncoderConfig {
            variant_name: name.to_string(),
            image_size,
            patch_size,
            d_vision,
            n_layers: 2,
            n_heads: 4,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image_size {} must be divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.n_heads == 0 || self.d_vision % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_vision {} must be divisible by n_heads {}",
                self.d_vision, self.n_heads
            )));
        }
        Ok(())
    }

    /// Number of visual tokens: the full patch grid, no CLS token.
    pub fn token_count(&self) -> usize {
        let per_side = self.image_size / self.patch_size;
        per_side * per_side
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }
}

/// A square, normalized image ready for patching: `size`×`size`×3 values
/// in [-1, 1], row-major (y, x, channel).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageInput {
    pub size: usize,
    pub pixels: Vec<f32>,
}

impl ImageInput {
    /// Normalizes an already-square RGB8 raster: 0 → -1.0, 255 → 1.0.
    pub fn from_rgb8(size: usize, rgb: &[u8]) -> Result<Self> {
        if rgb.len() != size * size * 3 {
            return Err(Error::ImageFormat(format!(
                "expected {} bytes for {size}x{size}, got {}",
                size * size * 3,
                rgb.len()
            )));
        }
        Ok(ImageInput {
            size,
            pixels: rgb.iter().map(|&v| v as f32 / 127.5 - 1.0).collect(),
        })
    }
}

fn bilinear_sample(raw: &RawImage, x: f64, y: f64, c: usize) -> f64 {
    let x = x.clamp(0.0, raw.width as f64 - 1.0);
    let y = y.clamp(0.0, raw.height as f64 - 1.0);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(raw.width - 1);
    let y1 = (y0 + 1).min(raw.height - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let at = |xx: usize, yy: usize| raw.rgb[(yy * raw.width + xx) * 3 + c] as f64;
    let top = at(x0, y0) * (1.0 - fx) + at(x1, y0) * fx;
    let bottom = at(x0, y1) * (1.0 - fx) + at(x1, y1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Bilinear-resizes the short side to `image_size` (half-pixel-center
/// convention), center-crops to a square, and normalizes to [-1, 1].
pub fn preprocess(raw: &RawImage, image_size: usize) -> Result<ImageInput> {
    if raw.width == 0 || raw.height == 0 {
        return Err(Error::ImageFormat(format!(
            "zero-dimension image {}x{}",
            raw.width, raw.height
        )));
    }
    let short = raw.width.min(raw.height) as f64;
    let scale = image_size as f64 / short;
    let new_w = ((raw.width as f64 * scale).round() as usize).max(image_size);
    let new_h = ((raw.height as f64 * scale).round() as usize).max(image_size);
    let off_x = (new_w - image_size) / 2;
    let off_y = (new_h - image_size) / 2;

    let mut pixels = vec![0f32; image_size * image_size * 3];
    for y in 0..image_size {
        let src_y = (((y + off_y) as f64 + 0.5) * raw.height as f64 / new_h as f64) - 0.5;
        for x in 0..image_size {
            let src_x = (((x + off_x) as f64 + 0.5) * raw.width as f64 / new_w as f64) - 0.5;
            for c in 0..3 {
                let v = bilinear_sample(raw, src_x, src_y, c);
                pixels[(y * image_size + x) * 3 + c] = (v / 127.5 - 1.0) as f32;
            }
        }
    }
    Ok(ImageInput {
        size: image_size,
        pixels,
    })
}

/// Loads any image reference into the encoder's input form: procedural
/// specs render at the exact encoder size, paths go through [`preprocess`].
pub fn load_image(image: &ImageRef, cfg: &EncoderConfig) -> Result<ImageInput> {
    match image {
        ImageRef::Spec(spec) => render_spec(spec, cfg.image_size),
        ImageRef::Path(path) => {
            let raw = ppm::read_ppm(std::path::Path::new(path))?;
            preprocess(&raw, cfg.image_size)
        }
    }
}

pub fn render_spec(spec: &ShapeSpec, image_size: usize) -> Result<ImageInput> {
    let rgb = crate::data::synth::render_shape(spec, image_size);
    ImageInput::from_rgb8(image_size, &rgb)
}

/// Flattens the patch grid row-major; within a patch the order is
/// (y, x, channel). Returns `[token_count, patch_dim]` data.
pub fn patchify(image: &ImageInput, patch_size: usize) -> Vec<f32> {
    let per_side = image.size / patch_size;
    let patch_dim = patch_size * patch_size * 3;
    let mut out = Vec::with_capacity(per_side * per_side * patch_dim);
    for gy in 0..per_side {
        for gx in 0..per_side {
            for py in 0..patch_size {
                for px in 0..patch_size {
                    let y = gy * patch_size + py;
                    let x = gx * patch_size + px;
                    let at = (y * image.size + x) * 3;
                    out.extend_from_slice(&image.pixels[at..at + 3]);
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub patch_embed: Linear,
    pub pos_embed: ParamTensor,
    pub blocks: Vec<Block>,
    pub ln_f: LayerNorm,
}

impl EncoderParams {
    pub fn init(cfg: &EncoderConfig, rng: &mut ChaCha8Rng) -> Self {
        EncoderParams {
            patch_embed: Linear::init(cfg.patch_dim(), cfg.d_vision, rng),
            pos_embed: ParamTensor::trunc_normal(&[cfg.token_count(), cfg.d_vision], crate::nn::INIT_STD, rng),
            blocks: (0..cfg.n_layers).map(|_| Block::init(cfg.d_vision, rng)).collect(),
            ln_f: LayerNorm::init(cfg.d_vision),
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut ParamVisitor) {
        self.patch_embed.visit(&format!("{prefix}.patch_embed"), f);
        f(&format!("{prefix}.pos_embed"), &self.pos_embed);
        for (i, block) in self.blocks.iter().enumerate() {
            block.visit(&format!("{prefix}.block{i}"), f);
        }
        self.ln_f.visit(&format!("{prefix}.ln_f"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut ParamVisitorMut) {
        self.patch_embed.visit_mut(&format!("{prefix}.patch_embed"), f);
        f(&format!("{prefix}.pos_embed"), &mut self.pos_embed);
        for (i, block) in self.blocks.iter_mut().enumerate() {
            block.visit_mut(&format!("{prefix}.block{i}"), f);
        }
        self.ln_f.visit_mut(&format!("{prefix}.ln_f"), f);
    }

    pub fn bind<T: Scalar>(&self, binder: &mut Binder<T>, prefix: &str) -> Result<BoundEncoder> {
        Ok(BoundEncoder {
            patch_embed: self.patch_embed.bind(binder, &format!("{prefix}.patch_embed"))?,
            pos_embed: binder.bind(&format!("{prefix}.pos_embed"), &self.pos_embed)?,
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(i, b)| b.bind(binder, &format!("{prefix}.block{i}")))
                .collect::<Result<_>>()?,
            ln_f: self.ln_f.bind(binder, &format!("{prefix}.ln_f"))?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct BoundEncoder {
    pub patch_embed: BoundLinear,
    pub pos_embed: TensorRef,
    pub blocks: Vec<BoundBlock>,
    pub ln_f: BoundLayerNorm,
}

/// Per-patch embedding + learned positions + pre-norm attention blocks.
/// Output row i is patch i in row-major grid order.
pub fn encode_image<T: Scalar>(
    tape: &mut Tape<T>,
    encoder: &BoundEncoder,
    cfg: &EncoderConfig,
    image: &ImageInput,
) -> Result<TensorRef> {
    if image.size != cfg.image_size {
        return Err(Error::ShapeMismatch {
            op: "encode_image",
            lhs: vec![image.size, image.size],
            rhs: vec![cfg.image_size, cfg.image_size],
        });
    }
    let patches = patchify(image, cfg.patch_size);
    let x = tape.leaf_from_f32(&patches, &[cfg.token_count(), cfg.patch_dim()], false)?;
    let mut h = encoder.patch_embed.forward(tape, x)?;
    h = tape.add(h, encoder.pos_embed)?;
    for block in &encoder.blocks {
        h = block.forward(tape, h, cfg.n_heads, false)?;
    }
    encoder.ln_f.forward(tape, h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn micro_cfg() -> EncoderConfig {
        EncoderConfig {
            variant_name: "test".into(),
            image_size: 16,
            patch_size: 8,
            d_vision: 8,
            n_layers: 1,
            n_heads: 2,
        }
    }

    fn encode_with(params: &EncoderParams, cfg: &EncoderConfig, image: &ImageInput) -> Vec<f32> {
        let mut tape = Tape::<f32>::new();
        let mut binder = Binder::new(&mut tape);
        let bound = params.bind(&mut binder, "enc").unwrap();
        let out = encode_image(binder.tape, &bound, cfg, image).unwrap();
        binder.tape.data(out).to_vec()
    }

    #[test]
    fn token_counts_match_patch_grids() {
        let mut cfg = micro_cfg();
        cfg.image_size = 48;
        cfg.patch_size = 8;
        assert_eq!(cfg.token_count(), 36);
        assert_eq!(EncoderConfig::variant("clip-vit-l-336").unwrap().token_count(), 576);
        assert_eq!(EncoderConfig::variant("siglip-so400m-378").unwrap().token_count(), 729);
    }

    #[test]
    fn variants_differ_only_by_config() {
        let clip = EncoderConfig::variant("clip-like").unwrap();
        let siglip = EncoderConfig::variant("siglip-like").unwrap();
        assert_eq!(clip.token_count(), 36);
        assert_eq!(siglip.token_count(), 64);
        assert!(siglip.d_vision > clip.d_vision);
        assert!(EncoderConfig::variant("dino").is_err());
        clip.validate().unwrap();
        siglip.validate().unwrap();
    }

    #[test]
    fn encoder_output_shape_is_tokens_by_d_vision() {
        let cfg = micro_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = EncoderParams::init(&cfg, &mut rng);
        let image = ImageInput {
            size: 16,
            pixels: vec![0.1; 16 * 16 * 3],
        };
        let mut tape = Tape::<f32>::new();
        let mut binder = Binder::new(&mut tape);
        let bound = params.bind(&mut binder, "enc").unwrap();
        let out = encode_image(binder.tape, &bound, &cfg, &image).unwrap();
        assert_eq!(binder.tape.shape(out), &[4, 8]);
    }

    #[test]
    fn full_white_pixel_normalizes_to_one() {
        let img = ImageInput::from_rgb8(2, &[255u8; 12]).unwrap();
        assert!(img.pixels.iter().all(|&v| v == 1.0));
        let img0 = ImageInput::from_rgb8(2, &[0u8; 12]).unwrap();
        assert!(img0.pixels.iter().all(|&v| v == -1.0));
    }

    #[test]
    fn preprocess_keeps_exact_square_input() {
        let raw = RawImage::new(4, 4, vec![255; 48]).unwrap();
        let img = preprocess(&raw, 4).unwrap();
        assert!(img.pixels.iter().all(|&v| v == 1.0));
    }

    /// 1×2 input upsampled to 4×4: the half-pixel-center weights for the
    /// cropped rows are 0.125, 0.375, 0.625, 0.875, worked out by hand.
    #[test]
    fn tiny_image_upsamples_with_hand_traced_weights() {
        let raw = RawImage::new(1, 2, vec![0, 0, 0, 255, 255, 255]).unwrap();
        let img = preprocess(&raw, 4).unwrap();
        let expected_rows = [-0.75f32, -0.25, 0.25, 0.75];
        for (y, &want) in expected_rows.iter().enumerate() {
            for x in 0..4 {
                for c in 0..3 {
                    let got = img.pixels[(y * 4 + x) * 3 + c];
                    assert!((got - want).abs() < 1e-6, "pixel ({y},{x},{c}): {got} vs {want}");
                }
            }
        }
    }

    #[test]
    fn zero_dimension_image_is_format_error() {
        let raw = RawImage {
            width: 0,
            height: 0,
            rgb: vec![],
        };
        assert!(matches!(preprocess(&raw, 4), Err(Error::ImageFormat(_))));
    }

    #[test]
    fn encode_rejects_wrong_image_size() {
        let cfg = micro_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = EncoderParams::init(&cfg, &mut rng);
        let image = ImageInput {
            size: 8,
            pixels: vec![0.0; 8 * 8 * 3],
        };
        let mut tape = Tape::<f32>::new();
        let mut binder = Binder::new(&mut tape);
        let bound = params.bind(&mut binder, "enc").unwrap();
        assert!(encode_image(binder.tape, &bound, &cfg, &image).is_err());
    }

    #[test]
    fn encoding_is_deterministic() {
        let cfg = micro_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let params = EncoderParams::init(&cfg, &mut rng);
        let image = ImageInput {
            size: 16,
            pixels: (0..16 * 16 * 3).map(|i| ((i as f32) * 0.01).sin()).collect(),
        };
        let a = encode_with(&params, &cfg, &image);
        let b = encode_with(&params, &cfg, &image);
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    /// With zeroed position embeddings, swapping two input patches swaps
    /// the corresponding output rows.
    #[test]
    fn patch_permutation_equivariance_without_positions() {
        let cfg = micro_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut params = EncoderParams::init(&cfg, &mut rng);
        params.pos_embed = ParamTensor::zeros(&[cfg.token_count(), cfg.d_vision]);

        // Patches are 8x8 blocks of a 16x16 image: fill each block with a
        // distinct pattern, then swap blocks 0 and 3.
        let mut pixels = vec![0f32; 16 * 16 * 3];
        for y in 0..16 {
            for x in 0..16 {
                let block = (y / 8) * 2 + (x / 8);
                for c in 0..3 {
                    pixels[(y * 16 + x) * 3 + c] =
                        0.1 * block as f32 + 0.01 * (y % 8) as f32 - 0.02 * (x % 8) as f32 + 0.005 * c as f32;
                }
            }
        }
        let swap_blocks = |pixels: &[f32]| {
            let mut out = pixels.to_vec();
            for py in 0..8 {
                for px in 0..8 {
                    for c in 0..3 {
                        let a = ((py) * 16 + px) * 3 + c;
                        let b = ((py + 8) * 16 + (px + 8)) * 3 + c;
                        out.swap(a, b);
                    }
                }
            }
            out
        };
        let img_a = ImageInput {
            size: 16,
            pixels: pixels.clone(),
        };
        let img_b = ImageInput {
            size: 16,
            pixels: swap_blocks(&pixels),
        };
        let out_a = encode_with(&params, &cfg, &img_a);
        let out_b = encode_with(&params, &cfg, &img_b);
        let d = cfg.d_vision;
        for j in 0..d {
            assert!((out_a[j] - out_b[3 * d + j]).abs() < 1e-5, "row swap 0->3 col {j}");
            assert!((out_a[3 * d + j] - out_b[j]).abs() < 1e-5, "row swap 3->0 col {j}");
            assert!((out_a[d + j] - out_b[d + j]).abs() < 1e-5, "row 1 fixed col {j}");
        }
    }
}
