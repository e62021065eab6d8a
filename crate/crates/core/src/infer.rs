//! Checkpoint inference over single images or directories.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, Rgb, RgbImage};
use log::{info, warn};

use crate::config::RunConfig;
use crate::data::{self, normalize, resize_image, resize_mask, write_mask};
use crate::error::{Error, Result};
use crate::label::{argmax_channels, LabelMap};
use crate::network::{predict, NetworkSpec, ParamStore};
use crate::postproc::clean_mask;

/// Name of the effective-config file written next to training checkpoints.
pub const SIDECAR_CONFIG: &str = "config.toml";

/// Overlay colours for background, sclera, iris, pupil.
pub const CLASS_COLORS: [[u8; 3]; 4] = [[0, 0, 0], [255, 80, 80], [80, 200, 80], [80, 120, 255]];

#[derive(Clone, Debug, PartialEq)]
pub struct InferOptions {
    /// Network input size; images are resized to it and masks back from it.
    pub height: usize,
    pub width: usize,
    pub postproc: bool,
    pub composite: bool,
}

impl Default for InferOptions {
    fn default() -> Self {
        InferOptions {
            height: data::TARGET_HEIGHT,
            width: data::TARGET_WIDTH,
            postproc: false,
            composite: false,
        }
    }
}

/// A loaded model ready for inference.
pub struct Model {
    pub spec: NetworkSpec,
    pub params: ParamStore<f32>,
    /// Input size the model was trained at, if recorded.
    pub input_size: Option<(usize, usize)>,
}

impl Model {
    /// Loads a checkpoint. The network shape comes from a `config.toml` next
    /// to it when present, otherwise it is read off the tensor shapes.
    pub fn load(checkpoint: &Path) -> Result<Self> {
        let params = crate::checkpoint::load(checkpoint)?;
        let sidecar = checkpoint
            .parent()
            .map(|d| d.join(SIDECAR_CONFIG))
            .filter(|p| p.is_file());
        let (spec, input_size) = match sidecar {
            Some(path) => {
                let cfg = RunConfig::load(&path)?;
                (
                    cfg.network,
                    Some((cfg.train.resize_height, cfg.train.resize_width)),
                )
            }
            None => (spec_from_store(&params)?, None),
        };
        params.check_layout(&spec)?;
        Ok(Model {
            spec,
            params,
            input_size,
        })
    }
}

fn entry_dims(store: &ParamStore<f32>, name: &str) -> Result<[usize; 4]> {
    store
        .get(name)
        .map(|e| e.value.dims().to_array())
        .ok_or_else(|| Error::Checkpoint(format!("missing entry {name}")))
}

/// Widths, CBAM ratio and kernel recovered from tensor shapes; dilations and
/// side scales keep their defaults.
pub fn spec_from_store(store: &ParamStore<f32>) -> Result<NetworkSpec> {
    let stem = entry_dims(store, "stem.weight")?[0];
    let mut enc = [0; 3];
    for (i, c) in enc.iter_mut().enumerate() {
        *c = entry_dims(store, &format!("enc{}.down.weight", i + 1))?[0];
    }
    let hidden = entry_dims(store, "cbam.w0.weight")?[0];
    let kernel = entry_dims(store, "cbam.spatial.weight")?[2];
    if hidden == 0 || enc[2] % hidden != 0 {
        return Err(Error::Checkpoint(format!(
            "cbam.w0 width {hidden} does not divide {}",
            enc[2]
        )));
    }
    Ok(NetworkSpec {
        stem_channels: stem,
        enc_channels: enc,
        cbam_ratio: enc[2] / hidden,
        cbam_kernel: kernel,
        param_budget: usize::MAX,
        ..NetworkSpec::default()
    })
}

/// Segments one 8-bit image; the mask has the image's own size.
pub fn segment(model: &Model, raw: &GrayImage, opts: &InferOptions) -> Result<LabelMap> {
    let (w, h) = raw.dimensions();
    let x = resize_image(&normalize(raw), opts.height, opts.width)?;
    let out = predict(&model.params, &model.spec, &x)?;
    if !out.fused.all_finite() {
        return Err(Error::Numeric("network produced non-finite logits".into()));
    }
    let mut mask = argmax_channels(&out.fused).remove(0);
    if opts.postproc {
        mask = clean_mask(&mask)?;
    }
    resize_mask(&mask, h as usize, w as usize)
}

/// Input on the left, class colours blended over it on the right.
pub fn composite(raw: &GrayImage, mask: &LabelMap) -> RgbImage {
    let (w, h) = raw.dimensions();
    let mut out = RgbImage::new(2 * w, h);
    for (x, y, p) in raw.enumerate_pixels() {
        let g = p.0[0];
        out.put_pixel(x, y, Rgb([g, g, g]));
        let label = mask.get(y as usize, x as usize) as usize;
        let px = if label == 0 {
            [g, g, g]
        } else {
            let c = CLASS_COLORS[label];
            [0, 1, 2].map(|i| ((g as u16 + c[i] as u16) / 2) as u8)
        };
        out.put_pixel(w + x, y, Rgb(px));
    }
    out
}

#[derive(Debug, Default)]
pub struct InferSummary {
    pub written: Vec<PathBuf>,
    pub failures: Vec<(PathBuf, Error)>,
}

/// Image files under `input` (or `input` itself), sorted.
pub fn list_inputs(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    let entries = fs::read_dir(input).map_err(|e| Error::file(input, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::file(input, e))?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        if path.is_file() && ext.is_some_and(|e| data::IMAGE_EXTENSIONS.contains(&e.as_str())) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn infer_one(
    model: &Model,
    path: &Path,
    out_dir: &Path,
    opts: &InferOptions,
) -> Result<Vec<PathBuf>> {
    let raw = data::read_gray(path)?;
    let mask = segment(model, &raw, opts)?;
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
    let mask_path = out_dir.join(format!("{stem}.png"));
    write_mask(&mask, &mask_path)?;
    let mut written = vec![mask_path];
    if opts.composite {
        let comp_path = out_dir.join(format!("{stem}_composite.png"));
        composite(&raw, &mask)
            .save(&comp_path)
            .map_err(|e| Error::file(&comp_path, e))?;
        written.push(comp_path);
    }
    Ok(written)
}

/// Segments every image under `input` into `out_dir`. Failures are
/// collected per file and do not stop the run.
pub fn infer_paths(
    model: &Model,
    input: &Path,
    out_dir: &Path,
    opts: &InferOptions,
) -> Result<InferSummary> {
    let inputs = list_inputs(input)?;
    if inputs.is_empty() {
        return Err(Error::Data(format!(
            "no images found at {}",
            input.display()
        )));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::file(out_dir, e))?;
    let mut summary = InferSummary::default();
    for path in inputs {
        match infer_one(model, &path, out_dir, opts) {
            Ok(files) => {
                info!("segmented {}", path.display());
                summary.written.extend(files);
            }
            Err(e) => {
                warn!("{}: {e}", path.display());
                summary.failures.push((path, e));
            }
        }
    }
    Ok(summary)
}
