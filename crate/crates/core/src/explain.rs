//! Explainability probes: gradient-weighted class activation maps on the
//! token grid and deep feature factorization via non-negative matrix
//! factorization. Both target the same two components that distillation
//! method 2 imitates.

use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::vit::{CaptureSite, ImageBatch, TinyViT, IMAGE_CHANNELS};

/// A class activation heatmap: the normalized token grid plus its bilinear
/// upsampling to image resolution.
#[derive(Debug, Clone)]
pub struct HeatMap {
    pub grid: Array2<f32>,
    pub upsampled: Array2<f32>,
    pub target_class: usize,
    pub site: CaptureSite,
    /// Pre-normalization bounds of the rectified map, kept for sidecars.
    pub raw_min: f64,
    pub raw_max: f64,
}

/// Gradient-weighted class activation map for one image.
///
/// The class token is discarded; spatial tokens reshape to the patch grid.
/// Channel weights are the spatial mean of the target-logit gradient, the
/// map is the rectified weighted sum, min-max normalized (all-zero maps
/// stay zero) and bilinearly upsampled.
pub fn grad_cam<F: Scalar>(
    model: &TinyViT<F>,
    image: &Array3<F>,
    target_class: usize,
    site: CaptureSite,
) -> Result<HeatMap> {
    let cfg = model.config();
    if target_class >= cfg.num_classes {
        return Err(Error::Input(format!(
            "class {target_class} out of range for {} classes",
            cfg.num_classes
        )));
    }
    let (c, h, w) = image.dim();
    if c != IMAGE_CHANNELS || h != cfg.image_size || w != cfg.image_size {
        return Err(Error::Input(format!(
            "image shape {c}x{h}x{w} does not match config image size {}",
            cfg.image_size
        )));
    }
    let mut pixels = Array4::zeros((1, c, h, w));
    pixels.index_axis_mut(Axis(0), 0).assign(image);
    let batch = ImageBatch {
        pixels,
        labels: vec![target_class],
    };

    let (logits, captures) = model.forward(&batch, &[site])?;
    let mut d_logits = Array2::<F>::zeros(logits.raw_dim());
    d_logits[[0, target_class]] = F::one();
    let (_, cache) = model.forward_cached(&batch.pixels)?;
    let (_, grad_caps) = model.backward(&cache, &d_logits, &[site]);

    let act = &captures[0].states;
    let grad = &grad_caps[0].states;
    let (_, t, hidden) = act.dim();
    let spatial = t - 1;
    let grid = int_sqrt(spatial).ok_or_else(|| {
        Error::Geometry(format!("{spatial} spatial tokens do not form a square grid"))
    })?;

    // channel weights: spatial mean of the gradient
    let mut weights = vec![F::zero(); hidden];
    for p in 0..spatial {
        for k in 0..hidden {
            weights[k] += grad[[0, 1 + p, k]];
        }
    }
    let inv = F::cast(1.0 / spatial as f64);
    for w in weights.iter_mut() {
        *w *= inv;
    }

    let mut raw = Array2::<f64>::zeros((grid, grid));
    for p in 0..spatial {
        let mut acc = F::zero();
        for k in 0..hidden {
            acc += weights[k] * act[[0, 1 + p, k]];
        }
        let rectified = acc.max(F::zero()).as_f64();
        raw[[p / grid, p % grid]] = rectified;
    }

    let (normalized, raw_min, raw_max) = min_max_normalize(&raw);
    let upsampled = upsample_bilinear(&normalized, cfg.image_size);
    Ok(HeatMap {
        grid: normalized,
        upsampled,
        target_class,
        site,
        raw_min,
        raw_max,
    })
}

fn int_sqrt(n: usize) -> Option<usize> {
    let r = (n as f64).sqrt().round() as usize;
    (r * r == n).then_some(r)
}

/// Min-max to [0, 1]. A constant map collapses to all-ones when positive
/// and stays zero when zero.
fn min_max_normalize(raw: &Array2<f64>) -> (Array2<f32>, f64, f64) {
    let min = raw.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let out = if max > min {
        raw.mapv(|v| ((v - min) / (max - min)) as f32)
    } else if max > 0.0 {
        Array2::ones(raw.raw_dim())
    } else {
        Array2::zeros(raw.raw_dim())
    };
    (out, min, max)
}

/// Bilinear upsampling with half-pixel centers, clamped at the borders.
pub fn upsample_bilinear(grid: &Array2<f32>, out_size: usize) -> Array2<f32> {
    let (h, w) = grid.dim();
    let mut out = Array2::zeros((out_size, out_size));
    let sy = h as f32 / out_size as f32;
    let sx = w as f32 / out_size as f32;
    for oy in 0..out_size {
        let fy = ((oy as f32 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f32);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f32;
        for ox in 0..out_size {
            let fx = ((ox as f32 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f32);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f32;
            let top = grid[[y0, x0]] * (1.0 - wx) + grid[[y0, x1]] * wx;
            let bot = grid[[y1, x0]] * (1.0 - wx) + grid[[y1, x1]] * wx;
            out[[oy, ox]] = top * (1.0 - wy) + bot * wy;
        }
    }
    out
}

/// Non-negative factorization result: `A (P x D) ~= W (P x k) * H (k x D)`.
#[derive(Debug, Clone)]
pub struct NmfResult {
    pub w: Array2<f64>,
    pub h: Array2<f64>,
    /// Frobenius reconstruction error after initialization and after each
    /// multiplicative-update iteration; non-increasing.
    pub objective: Vec<f64>,
}

impl NmfResult {
    pub fn final_error(&self) -> f64 {
        *self.objective.last().expect("objective never empty")
    }
}

/// Multiplicative-update NMF minimizing the Frobenius reconstruction error.
///
/// W rows are initialized from the corresponding row means of `A`, so
/// identical input rows follow identical update trajectories; H is seeded
/// uniform. Stops at `tol` relative improvement or after `max_iters`.
pub fn nmf(a: &Array2<f64>, k: usize, max_iters: usize, tol: f64, seed: u64) -> Result<NmfResult> {
    let (p, d) = a.dim();
    if a.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::Input("matrix entries must be finite and non-negative".into()));
    }
    if k < 1 || k > p.min(d) {
        return Err(Error::Parameter(format!(
            "rank {k} outside [1, min({p}, {d})]"
        )));
    }

    // all-zero input factorizes exactly at iteration 0
    if a.iter().all(|&v| v == 0.0) {
        return Ok(NmfResult {
            w: Array2::zeros((p, k)),
            h: Array2::zeros((k, d)),
            objective: vec![0.0],
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let col_factors: Vec<f64> = (0..k).map(|_| rng.gen_range(0.5..1.5)).collect();
    let mut w = Array2::zeros((p, k));
    for (i, mut row) in w.rows_mut().into_iter().enumerate() {
        let mean = a.row(i).sum() / d as f64;
        for (j, v) in row.iter_mut().enumerate() {
            *v = (mean + 1e-6) * col_factors[j];
        }
    }
    let mut h = Array2::from_shape_fn((k, d), |_| rng.gen_range(0.5..1.5) / k as f64);

    const EPS: f64 = 1e-12;
    let mut objective = vec![frobenius_error(a, &w, &h)];
    for _ in 0..max_iters {
        // H <- H .* (W^T A) ./ (W^T W H)
        let wt_a = w.t().dot(a);
        let wt_w_h = w.t().dot(&w).dot(&h);
        ndarray::Zip::from(&mut h).and(&wt_a).and(&wt_w_h).for_each(|hv, &n, &dn| {
            *hv *= n / (dn + EPS);
        });
        // W <- W .* (A H^T) ./ (W H H^T)
        let a_ht = a.dot(&h.t());
        let w_h_ht = w.dot(&h.dot(&h.t()));
        ndarray::Zip::from(&mut w).and(&a_ht).and(&w_h_ht).for_each(|wv, &n, &dn| {
            *wv *= n / (dn + EPS);
        });

        let err = frobenius_error(a, &w, &h);
        let prev = *objective.last().expect("non-empty");
        objective.push(err);
        if prev - err < tol * prev.max(f64::MIN_POSITIVE) {
            break;
        }
    }
    Ok(NmfResult { w, h, objective })
}

fn frobenius_error(a: &Array2<f64>, w: &Array2<f64>, h: &Array2<f64>) -> f64 {
    let approx = w.dot(h);
    let mut acc = 0.0;
    for (&x, &y) in a.iter().zip(approx.iter()) {
        let d = x - y;
        acc += d * d;
    }
    acc.sqrt()
}

/// Concept decomposition of a batch of images.
#[derive(Debug, Clone)]
pub struct ConceptMaps {
    /// `k x hidden` concept basis vectors (the NMF H factor).
    pub basis: Array2<f64>,
    /// Per image, `k` upsampled concept maps in `[0, 1]`.
    pub maps: Vec<Vec<Array2<f32>>>,
    /// Relative Frobenius residual `|A - WH| / |A|`.
    pub residual: f64,
    pub site: CaptureSite,
}

/// Deep feature factorization: rectified spatial-token activations from all
/// images are stacked into one matrix and factorized; the W rows reshape to
/// per-image concept maps.
pub fn dff<F: Scalar>(
    model: &TinyViT<F>,
    images: &Array4<F>,
    k: usize,
    site: CaptureSite,
    seed: u64,
) -> Result<ConceptMaps> {
    let n = images.dim().0;
    if n == 0 {
        return Err(Error::Input("need at least one image".into()));
    }
    let batch = ImageBatch {
        pixels: images.clone(),
        labels: vec![0; n],
    };
    let (_, captures) = model.forward(&batch, &[site])?;
    let act = &captures[0].states;
    let (_, t, hidden) = act.dim();
    let spatial = t - 1;
    let grid = int_sqrt(spatial).ok_or_else(|| {
        Error::Geometry(format!("{spatial} spatial tokens do not form a square grid"))
    })?;

    let mut a = Array2::<f64>::zeros((n * spatial, hidden));
    for bi in 0..n {
        for p in 0..spatial {
            for c in 0..hidden {
                a[[bi * spatial + p, c]] = act[[bi, 1 + p, c]].as_f64().max(0.0);
            }
        }
    }
    let norm_a = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let result = nmf(&a, k, 300, 1e-6, seed)?;

    let mut maps = Vec::with_capacity(n);
    for bi in 0..n {
        let mut per_image = Vec::with_capacity(k);
        for j in 0..k {
            let mut raw = Array2::<f64>::zeros((grid, grid));
            for p in 0..spatial {
                raw[[p / grid, p % grid]] = result.w[[bi * spatial + p, j]];
            }
            let (normalized, _, _) = min_max_normalize(&raw);
            per_image.push(upsample_bilinear(&normalized, model.config().image_size));
        }
        maps.push(per_image);
    }
    let residual = if norm_a > 0.0 {
        result.final_error() / norm_a
    } else {
        0.0
    };
    Ok(ConceptMaps {
        basis: result.h,
        maps,
        residual,
        site,
    })
}

#[derive(Serialize)]
struct MapSidecar<'a> {
    format_version: u32,
    site: &'a str,
    kind: &'a str,
    target_class: Option<usize>,
    concept: Option<usize>,
    k: Option<usize>,
    raw_min: Option<f64>,
    raw_max: Option<f64>,
}

/// Write a map as an 8-bit grayscale PNG; values are clamped to [0, 1].
fn save_gray_png(map: &Array2<f32>, path: &Path) -> Result<()> {
    let (h, w) = map.dim();
    let mut img = image::GrayImage::new(w as u32, h as u32);
    for (x, y, p) in img.enumerate_pixels_mut() {
        p.0[0] = (map[[y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8;
    }
    img.save(path).map_err(|e| Error::io(path, e.to_string()))
}

fn save_sidecar(sidecar: &MapSidecar<'_>, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(sidecar)
        .map_err(|e| Error::io(path, e.to_string()))?;
    std::fs::write(path, json).map_err(|e| Error::io(path, e.to_string()))
}

/// Export a heatmap as `<stem>.png` plus a JSON sidecar. Returns the image
/// path.
pub fn export_heatmap(map: &HeatMap, dir: &Path, stem: &str) -> Result<PathBuf> {
    let png = dir.join(format!("{stem}.png"));
    save_gray_png(&map.upsampled, &png)?;
    save_sidecar(
        &MapSidecar {
            format_version: 1,
            site: map.site.as_str(),
            kind: "grad_cam",
            target_class: Some(map.target_class),
            concept: None,
            k: None,
            raw_min: Some(map.raw_min),
            raw_max: Some(map.raw_max),
        },
        &dir.join(format!("{stem}.json")),
    )?;
    Ok(png)
}

/// Export every concept map of every image as
/// `<stem>_img<i>_concept<j>.png` plus JSON sidecars. Returns the image
/// paths.
pub fn export_concept_maps(maps: &ConceptMaps, dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
    let k = maps.basis.nrows();
    let mut out = Vec::new();
    for (i, per_image) in maps.maps.iter().enumerate() {
        for (j, map) in per_image.iter().enumerate() {
            let name = format!("{stem}_img{i}_concept{j}");
            let png = dir.join(format!("{name}.png"));
            save_gray_png(map, &png)?;
            save_sidecar(
                &MapSidecar {
                    format_version: 1,
                    site: maps.site.as_str(),
                    kind: "dff",
                    target_class: None,
                    concept: Some(j),
                    k: Some(k),
                    raw_min: None,
                    raw_max: None,
                },
                &dir.join(format!("{name}.json")),
            )?;
            out.push(png);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vit::ViTConfig;
    use ndarray::Array1;

    fn cfg() -> ViTConfig {
        ViTConfig {
            image_size: 32,
            patch_size: 8,
            hidden_size: 16,
            intermediate_size: 32,
            num_layers: 2,
            num_heads: 4,
            num_classes: 4,
            seed: 2,
        }
    }

    fn test_image(seed: u64) -> Array3<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn((3, 32, 32), |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn cam_geometry_and_bounds() {
        let model = TinyViT::<f64>::init(&cfg()).unwrap();
        let map = grad_cam(&model, &test_image(1), 2, CaptureSite::FinalNorm).unwrap();
        assert_eq!(map.grid.dim(), (4, 4));
        assert_eq!(map.upsampled.dim(), (32, 32));
        assert!(map.upsampled.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(map.grid.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn zero_gradients_give_zero_map() {
        let mut model = TinyViT::<f64>::init(&cfg()).unwrap();
        model.params_mut().head.weight.fill(0.0);
        model.params_mut().head.bias.fill(0.0);
        let map = grad_cam(&model, &test_image(2), 0, CaptureSite::FinalNorm).unwrap();
        assert!(map.grid.iter().all(|&v| v == 0.0));
        assert!(map.upsampled.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn invalid_class_is_input_error() {
        let model = TinyViT::<f64>::init(&cfg()).unwrap();
        assert!(matches!(
            grad_cam(&model, &test_image(3), 9, CaptureSite::FinalNorm),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn constant_positive_map_normalizes_to_one() {
        let raw = Array2::from_elem((3, 3), 2.5);
        let (n, min, max) = min_max_normalize(&raw);
        assert_eq!(min, 2.5);
        assert_eq!(max, 2.5);
        assert!(n.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn nmf_rejects_negative_entries() {
        let mut a = Array2::from_elem((4, 3), 1.0);
        a[[1, 1]] = -0.5;
        assert!(matches!(nmf(&a, 2, 10, 1e-6, 0), Err(Error::Input(_))));
    }

    #[test]
    fn nmf_zero_matrix_is_exact_at_iteration_zero() {
        let a = Array2::zeros((4, 3));
        let r = nmf(&a, 2, 10, 1e-6, 0).unwrap();
        assert_eq!(r.objective, vec![0.0]);
        assert!(r.w.iter().all(|&v| v == 0.0));
        assert!(r.h.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn nmf_recovers_rank_one() {
        let u = Array1::from_vec(vec![1.0, 2.0, 0.5, 1.5]);
        let v = Array1::from_vec(vec![0.3, 1.0, 2.0]);
        let a = Array2::from_shape_fn((4, 3), |(i, j)| u[i] * v[j]);
        let r = nmf(&a, 1, 500, 1e-12, 7).unwrap();
        let norm = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(r.final_error() / norm <= 1e-3, "residual {}", r.final_error() / norm);
    }

    #[test]
    fn nmf_objective_is_nonincreasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Array2::from_shape_fn((8, 6), |_| rng.gen_range(0.0..1.0));
        let r = nmf(&a, 3, 100, 0.0, 11).unwrap();
        for pair in r.objective.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-10, "{} -> {}", pair[0], pair[1]);
        }
    }

    #[test]
    fn nmf_error_shrinks_with_rank() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = Array2::from_shape_fn((6, 6), |_| rng.gen_range(0.1..1.0));
        let lo = nmf(&a, 5, 400, 1e-12, 2).unwrap();
        let hi = nmf(&a, 6, 400, 1e-12, 2).unwrap();
        assert!(hi.final_error() <= lo.final_error() + 1e-9);
    }

    #[test]
    fn dff_shapes_bounds_and_duplicates() {
        let model = TinyViT::<f64>::init(&cfg()).unwrap();
        let img = test_image(4);
        let mut images = Array4::zeros((2, 3, 32, 32));
        images.index_axis_mut(Axis(0), 0).assign(&img);
        images.index_axis_mut(Axis(0), 1).assign(&img);
        let concepts = dff(&model, &images, 3, CaptureSite::PenultimateLinear, 0).unwrap();
        assert_eq!(concepts.basis.dim(), (3, 16));
        assert_eq!(concepts.maps.len(), 2);
        assert_eq!(concepts.maps[0].len(), 3);
        assert!(concepts.basis.iter().all(|&v| v >= 0.0));
        for per_image in &concepts.maps {
            for m in per_image {
                assert!(m.iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
        // identical images produce identical rows of A, hence identical maps
        for j in 0..3 {
            assert_eq!(concepts.maps[0][j], concepts.maps[1][j]);
        }
    }

    #[test]
    fn dff_single_image_single_concept() {
        let model = TinyViT::<f64>::init(&cfg()).unwrap();
        let mut images = Array4::zeros((1, 3, 32, 32));
        images.index_axis_mut(Axis(0), 0).assign(&test_image(6));
        let concepts = dff(&model, &images, 1, CaptureSite::FinalNorm, 0).unwrap();
        assert_eq!(concepts.maps.len(), 1);
        assert_eq!(concepts.maps[0].len(), 1);
        assert!(concepts.maps[0][0].iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn exports_write_png_and_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let model = TinyViT::<f64>::init(&cfg()).unwrap();
        let map = grad_cam(&model, &test_image(8), 1, CaptureSite::FinalNorm).unwrap();
        let png = export_heatmap(&map, dir.path(), "cam_test").unwrap();
        assert!(png.exists());
        assert!(dir.path().join("cam_test.json").exists());
        let sidecar: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("cam_test.json")).unwrap())
                .unwrap();
        assert_eq!(sidecar["site"], "final_norm");
        assert_eq!(sidecar["target_class"], 1);
    }
}
