//! Browser demo: the synthetic clothing data, the fade-in blend the
//! discriminator sees during growth, and FID between two Gaussians.

use nalgebra::{DMatrix, DVector};
use ogan_core::gan::{fade_reals, StageState};
use ogan_core::metrics::{fid, GaussianFit};
use ogan_core::synthdata::{example_ontology, images_to_tensor, render_example, tensor_to_images, DatasetSpec, Image};
use wasm_bindgen::prelude::*;

const SEARCH: u64 = 10_000;

fn spec(res: usize) -> Result<DatasetSpec, String> {
    let s = DatasetSpec::new(example_ontology(), 1, res, 0);
    s.validate().map_err(|e| e.to_string())?;
    Ok(s)
}

fn rgba(images: &[Image]) -> Vec<u8> {
    // Side by side, one row.
    let r = images[0].res;
    let w = r * images.len();
    let mut out = vec![255u8; w * r * 4];
    for (k, im) in images.iter().enumerate() {
        let rgb = im.to_rgb8();
        for y in 0..r {
            for x in 0..r {
                let o = (y * w + k * r + x) * 4;
                out[o..o + 3].copy_from_slice(&rgb[(y * r + x) * 3..(y * r + x) * 3 + 3]);
            }
        }
    }
    out
}

/// Sub-category names in label order, as a JSON array.
#[wasm_bindgen]
pub fn labels() -> String {
    let ont = example_ontology();
    let names: Vec<&str> = ont.sub_categories.iter().map(|s| s.name.as_str()).collect();
    serde_json::to_string(&names).unwrap_or_default()
}

/// The first `count` examples with sub-category `label`, scanning example
/// seeds upwards from `seed`. Returns (images, captions).
pub fn examples_of(label: usize, seed: u64, count: usize, res: usize) -> Result<(Vec<Image>, Vec<String>), String> {
    let spec = spec(res)?;
    if label >= spec.ontology.num_sub() {
        return Err(format!("label {label} out of range"));
    }
    let mut images = Vec::new();
    let mut texts = Vec::new();
    for s in seed..seed + SEARCH {
        if images.len() == count {
            break;
        }
        let ex = render_example(&spec, s);
        if ex.sub_index == label {
            images.push(ex.image);
            texts.push(ex.text);
        }
    }
    if images.is_empty() {
        return Err("no examples found".into());
    }
    Ok((images, texts))
}

/// RGBA strip of `count` examples of one sub-category.
#[wasm_bindgen]
pub fn render_examples(label: usize, seed: u64, count: usize, res: usize) -> Result<Vec<u8>, JsError> {
    examples_of(label, seed, count, res).map(|(im, _)| rgba(&im)).map_err(|e| JsError::new(&e))
}

/// Captions of the examples drawn by [`render_examples`], as a JSON array.
#[wasm_bindgen]
pub fn example_texts(label: usize, seed: u64, count: usize, res: usize) -> Result<String, JsError> {
    let (_, texts) = examples_of(label, seed, count, res).map_err(|e| JsError::new(&e))?;
    Ok(serde_json::to_string(&texts).unwrap_or_default())
}

/// One example at `res` blended with its half-resolution version, as the
/// discriminator sees reals at fade-in weight `alpha`.
pub fn fade_image(label: usize, seed: u64, res: usize, alpha: f64) -> Result<Image, String> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(format!("alpha {alpha} outside [0, 1]"));
    }
    if res < 8 {
        return Err("fade needs a resolution of at least 8".into());
    }
    let (images, _) = examples_of(label, seed, 1, res)?;
    let t = images_to_tensor(&[&images[0]]);
    let faded = fade_reals(&t, StageState::new(1, alpha));
    Ok(tensor_to_images(&faded).remove(0))
}

#[wasm_bindgen]
pub fn render_fade(label: usize, seed: u64, res: usize, alpha: f64) -> Result<Vec<u8>, JsError> {
    fade_image(label, seed, res, alpha).map(|im| rgba(&[im])).map_err(|e| JsError::new(&e))
}

/// FID between N(0, I) and N(shift·1, ratio·I) in `d` dimensions.
pub fn isotropic_fid(d: usize, shift: f64, ratio: f64) -> Result<f64, String> {
    if d == 0 || !(ratio >= 0.0) || !shift.is_finite() {
        return Err("need d > 0, a finite shift and a non-negative variance ratio".into());
    }
    let a = GaussianFit { mean: DVector::zeros(d), cov: DMatrix::identity(d, d) };
    let b = GaussianFit { mean: DVector::from_element(d, shift), cov: DMatrix::identity(d, d) * ratio };
    fid(&a, &b).map_err(|e| e.to_string())
}

#[wasm_bindgen]
pub fn gaussian_fid(d: usize, shift: f64, ratio: f64) -> Result<f64, JsError> {
    isotropic_fid(d, shift, ratio).map_err(|e| JsError::new(&e))
}
