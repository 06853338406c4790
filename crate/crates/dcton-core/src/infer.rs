//! Inference: load a trained checkpoint, run single-pass try-on, and
//! compose image grids for visual inspection.

use std::path::Path;

use crate::data;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::nets::{self, GenInputs, Generator, ModelConfig, Params};
use crate::tensor::Tensor;

/// A generator restored from disk together with its weights and the
/// configuration echo stored beside them.
pub struct LoadedGenerator {
    pub params: Params<f32>,
    pub generator: Generator,
    pub config: Vec<(String, String)>,
}

/// Load generator weights from a checkpoint. Accepts either the training
/// checkpoint root (containing `model/`) or the model directory itself.
pub fn load_generator(checkpoint: &Path) -> Result<LoadedGenerator> {
    let model_dir =
        if checkpoint.join("model").join("manifest.txt").exists() {
            checkpoint.join("model")
        } else {
            checkpoint.to_path_buf()
        };
    let (config, _) = nets::read_manifest(&model_dir)?;
    let skin_encoder = nets::config_value(&config, "ablate_skin_encoder")
        .map(|v| v != "true")
        .unwrap_or(true);
    let mut params = Params::with_namespace(1);
    let generator = Generator::build(&mut params, ModelConfig { skin_encoder }, 0);
    nets::load_into(&model_dir, &mut params)?;
    Ok(LoadedGenerator { params, generator, config })
}

/// Products of one inference pass, all plain tensors.
pub struct TryOnResult {
    /// Rendered person wearing the garment, (3, H, W) in [-1, 1].
    pub image: Tensor<f32>,
    /// Predicted clothes mask, (1, H, W).
    pub mask_clothes: Tensor<f32>,
    /// Predicted skin mask, (1, H, W).
    pub mask_skin: Tensor<f32>,
    /// Garment after the predicted warp, (3, H, W).
    pub warped_clothes: Tensor<f32>,
}

/// Put `clothes` on the person in a single generator pass.
///
/// `person`/`clothes` are (3, H, W) images in [-1, 1], `parse` the
/// per-pixel labels of the person, `descriptor` the (7, H, W) pose
/// descriptor.
pub fn try_on(
    loaded: &mut LoadedGenerator,
    person: &Tensor<f32>,
    parse: &[u8],
    clothes: &Tensor<f32>,
    descriptor: &Tensor<f32>,
) -> Result<TryOnResult> {
    if person.shape().len() != 3 || person.dim(0) != 3 {
        return Err(Error::InvalidArgument(format!(
            "person must be (3, H, W), got {:?}",
            person.shape()
        )));
    }
    let (h, w) = (person.dim(1), person.dim(2));
    if parse.len() != h * w {
        return Err(Error::InvalidArgument(format!(
            "parse has {} labels for a {h}x{w} image",
            parse.len()
        )));
    }
    let skin = data::extract_skin(person, parse);
    let mut g = Graph::<f32>::new();
    let inputs = GenInputs {
        person: g.leaf(person.reshaped(&[1, 3, h, w])),
        skin: g.leaf(skin.reshaped(&[1, 3, h, w])),
        clothes: g.leaf(clothes.reshaped(&[1, 3, h, w])),
        descriptor: g.leaf(descriptor.reshaped(&[1, descriptor.dim(0), h, w])),
    };
    let pass = loaded.generator.forward(&mut g, &loaded.params, &inputs, true)?;
    Ok(TryOnResult {
        image: g.value(pass.image).reshaped(&[3, h, w]),
        mask_clothes: g.value(pass.mask_clothes).reshaped(&[1, h, w]),
        mask_skin: g.value(pass.mask_skin).reshaped(&[1, h, w]),
        warped_clothes: g.value(pass.warped_clothes).reshaped(&[3, h, w]),
    })
}

/// Arrange equally sized RGB images into a row-major grid with white
/// gutters between cells and around the border.
pub fn compose_grid(
    images: &[Tensor<f32>],
    columns: usize,
    gutter: usize,
) -> Result<Tensor<f32>> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("grid needs at least one image".into()));
    }
    if columns == 0 {
        return Err(Error::InvalidArgument("grid needs at least one column".into()));
    }
    let shape = images[0].shape().to_vec();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(Error::InvalidArgument(format!(
            "grid images must be (3, H, W), got {shape:?}"
        )));
    }
    for (i, img) in images.iter().enumerate() {
        if img.shape() != shape {
            return Err(Error::InvalidArgument(format!(
                "image {i} has shape {:?}, expected {shape:?}",
                img.shape()
            )));
        }
    }
    let (h, w) = (shape[1], shape[2]);
    let cols = columns.min(images.len());
    let rows = images.len().div_ceil(cols);
    let out_h = rows * h + (rows + 1) * gutter;
    let out_w = cols * w + (cols + 1) * gutter;
    let mut out = Tensor::full(&[3, out_h, out_w], 1.0f32);
    let data = out.data_mut();
    for (i, img) in images.iter().enumerate() {
        let (r, c) = (i / cols, i % cols);
        let oy = gutter + r * (h + gutter);
        let ox = gutter + c * (w + gutter);
        let src = img.data();
        for ch in 0..3 {
            for y in 0..h {
                let drow = ch * out_h * out_w + (oy + y) * out_w + ox;
                let srow = ch * h * w + y * w;
                data[drow..drow + w].copy_from_slice(&src[srow..srow + w]);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DatasetSpec;

    fn fresh_checkpoint(dir: &Path, skin_encoder: bool) {
        let mut params = Params::<f32>::with_namespace(1);
        let _ = Generator::build(&mut params, ModelConfig { skin_encoder }, 21);
        let entries: Vec<(&str, &Tensor<f32>)> = params.entries().collect();
        nets::save_checkpoint(
            &dir.join("model"),
            &entries,
            &[(
                "ablate_skin_encoder".to_string(),
                if skin_encoder { "false" } else { "true" }.to_string(),
            )],
        )
        .unwrap();
    }

    fn sample() -> crate::data::RenderedSample {
        let spec = DatasetSpec { count: 1, height: 32, width: 32, seed: 9, clothes_styles: 2 };
        crate::data::render_sample(&spec, 0).unwrap()
    }

    #[test]
    fn try_on_is_single_pass_and_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        fresh_checkpoint(dir.path(), true);
        let s = sample();

        let mut loaded = load_generator(dir.path()).unwrap();
        assert_eq!(loaded.generator.passes(), 0);
        let out = try_on(&mut loaded, &s.person, &s.parse, &s.target, &s.descriptor).unwrap();
        assert_eq!(loaded.generator.passes(), 1);
        assert_eq!(out.image.shape(), &[3, 32, 32]);
        assert_eq!(out.mask_clothes.shape(), &[1, 32, 32]);
        assert!(out.image.data().iter().all(|v| (-1.0..=1.0).contains(v)));

        // Same checkpoint, fresh load: bit-identical output.
        let mut again = load_generator(dir.path()).unwrap();
        let out2 = try_on(&mut again, &s.person, &s.parse, &s.target, &s.descriptor).unwrap();
        assert!(out.image.bit_eq(&out2.image));
    }

    #[test]
    fn model_dir_is_accepted_directly() {
        let dir = tempfile::tempdir().unwrap();
        fresh_checkpoint(dir.path(), true);
        let via_root = load_generator(dir.path()).unwrap();
        let via_model = load_generator(&dir.path().join("model")).unwrap();
        for (a, b) in via_root.params.entries().zip(via_model.params.entries()) {
            assert!(a.1.bit_eq(b.1));
        }
    }

    #[test]
    fn ablated_checkpoint_restores_reduced_model() {
        let dir = tempfile::tempdir().unwrap();
        fresh_checkpoint(dir.path(), false);
        let mut loaded = load_generator(dir.path()).unwrap();
        assert!(loaded.params.id_of("gen.enc_skin.s0.w").is_none());
        let s = sample();
        let out = try_on(&mut loaded, &s.person, &s.parse, &s.target, &s.descriptor).unwrap();
        assert_eq!(out.image.shape(), &[3, 32, 32]);
    }

    #[test]
    fn missing_checkpoint_is_not_found() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_generator(&dir.path().join("nope")),
            Err(Error::NotFound { .. })
        ));
    }

    #[test]
    fn input_validation() {
        let dir = tempfile::tempdir().unwrap();
        fresh_checkpoint(dir.path(), true);
        let mut loaded = load_generator(dir.path()).unwrap();
        let s = sample();
        let bad_parse = vec![0u8; 10];
        assert!(matches!(
            try_on(&mut loaded, &s.person, &bad_parse, &s.target, &s.descriptor),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn grid_layout_and_gutters() {
        let a = Tensor::full(&[3, 4, 6], -1.0f32);
        let b = Tensor::full(&[3, 4, 6], 0.0f32);
        let c = Tensor::full(&[3, 4, 6], 0.5f32);
        let grid = compose_grid(&[a.clone(), b, c], 2, 2).unwrap();
        // 2 rows x 2 cols: width 2*6 + 3*2 = 18, height 2*4 + 3*2 = 14.
        assert_eq!(grid.shape(), &[3, 14, 18]);
        let d = grid.data();
        let at = |ch: usize, y: usize, x: usize| d[ch * 14 * 18 + y * 18 + x];
        // Border gutter is white.
        assert_eq!(at(0, 0, 0), 1.0);
        assert_eq!(at(1, 13, 17), 1.0);
        // First image body.
        assert_eq!(at(0, 2, 2), -1.0);
        // Gutter between columns.
        assert_eq!(at(0, 2, 8), 1.0);
        // Second image body.
        assert_eq!(at(0, 2, 10), 0.0);
        // Fourth cell (empty) stays white.
        assert_eq!(at(0, 8, 10), 1.0);
        // Third image on the second row.
        assert_eq!(at(0, 8, 2), 0.5);

        // Single column collapse and validation.
        let one = compose_grid(&[a], 5, 1).unwrap();
        assert_eq!(one.shape(), &[3, 6, 8]);
        assert!(compose_grid(&[], 2, 1).is_err());
        let odd = Tensor::full(&[3, 5, 6], 0.0f32);
        assert!(compose_grid(&[odd, Tensor::full(&[3, 4, 6], 0.0f32)], 2, 1).is_err());
    }
}
