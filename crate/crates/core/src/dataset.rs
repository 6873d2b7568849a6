//! Posed image sequences on disk.
//!
//! Layout: `color/%06d.png`, `poses/%06d.txt`, `intrinsics.txt`, and
//! optionally `depth/%06d.png` (16-bit millimeters) and `label/%06d.png`.

use std::path::{Path, PathBuf};

use cdr_tensor::Tensor;
use image::{GrayImage, ImageBuffer, Luma, RgbImage};

use crate::camera::{read_intrinsics, read_pose, write_intrinsics, write_pose, Intrinsics, Pose};
use crate::error::{CdrError, Result};
use crate::fragments::PosedFrame;
use crate::synth::RenderedView;

pub const SCENE_FILE: &str = "scene.txt";
pub const GT_MESH_FILE: &str = "gt_mesh.ply";

#[derive(Clone, Debug)]
pub struct Dataset {
    root: PathBuf,
    intrinsics: Intrinsics,
    frames: Vec<PosedFrame>,
}

fn frame_name(i: usize, ext: &str) -> String {
    format!("{i:06}.{ext}")
}

fn image_err(path: &Path, source: image::ImageError) -> CdrError {
    CdrError::Image {
        path: path.to_path_buf(),
        source,
    }
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let intrinsics = read_intrinsics(&root.join("intrinsics.txt"))?;
        let pose_dir = root.join("poses");
        let entries = std::fs::read_dir(&pose_dir).map_err(|e| CdrError::io(&pose_dir, e))?;
        let mut indices = Vec::new();
        for entry in entries {
            let entry = entry.map_err(|e| CdrError::io(&pose_dir, e))?;
            let name = entry.file_name();
            let name = name.to_string_lossy();
            if let Some(stem) = name.strip_suffix(".txt") {
                let i = stem
                    .parse::<usize>()
                    .map_err(|_| CdrError::Data(format!("unexpected pose file {name:?}")))?;
                indices.push(i);
            }
        }
        if indices.is_empty() {
            return Err(CdrError::Data(format!("{}: no poses", pose_dir.display())));
        }
        indices.sort_unstable();
        let frames = indices
            .into_iter()
            .map(|index| {
                Ok(PosedFrame {
                    index,
                    intrinsics,
                    pose: read_pose(&pose_dir.join(frame_name(index, "txt")))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            root: root.to_path_buf(),
            intrinsics,
            frames,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn intrinsics(&self) -> &Intrinsics {
        &self.intrinsics
    }

    pub fn frames(&self) -> &[PosedFrame] {
        &self.frames
    }

    pub fn has_depth(&self) -> bool {
        self.frames.iter().all(|f| self.root.join("depth").join(frame_name(f.index, "png")).exists())
    }

    pub fn has_label(&self) -> bool {
        self.frames.iter().all(|f| self.root.join("label").join(frame_name(f.index, "png")).exists())
    }

    /// Color image as a `[3, H, W]` tensor in `[0, 1]`.
    pub fn load_color(&self, index: usize) -> Result<Tensor> {
        let path = self.root.join("color").join(frame_name(index, "png"));
        let img = image::open(&path).map_err(|e| image_err(&path, e))?.to_rgb8();
        self.check_size(&path, img.width(), img.height())?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        Ok(rgb_tensor(&img.into_raw(), w, h))
    }

    /// Depth in meters, row-major; 0 marks invalid pixels.
    pub fn load_depth(&self, index: usize) -> Result<Vec<f64>> {
        let path = self.root.join("depth").join(frame_name(index, "png"));
        let img = image::open(&path).map_err(|e| image_err(&path, e))?.to_luma16();
        self.check_size(&path, img.width(), img.height())?;
        Ok(img.into_raw().into_iter().map(|mm| mm as f64 / 1000.0).collect())
    }

    pub fn load_label(&self, index: usize) -> Result<Vec<u8>> {
        let path = self.root.join("label").join(frame_name(index, "png"));
        let img = image::open(&path).map_err(|e| image_err(&path, e))?.to_luma8();
        self.check_size(&path, img.width(), img.height())?;
        Ok(img.into_raw())
    }

    fn check_size(&self, path: &Path, w: u32, h: u32) -> Result<()> {
        if (w, h) != (self.intrinsics.width, self.intrinsics.height) {
            return Err(CdrError::Data(format!(
                "{}: image is {w}x{h}, intrinsics say {}x{}",
                path.display(),
                self.intrinsics.width,
                self.intrinsics.height
            )));
        }
        Ok(())
    }
}

/// Interleaved RGB bytes to a `[3, h, w]` tensor in [0, 1].
pub fn rgb_tensor(raw: &[u8], w: usize, h: usize) -> Tensor {
    Tensor::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        raw[p * 3 + c] as f64 / 255.0
    })
}

fn mkdir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| CdrError::io(path, e))
}

/// Writes one rendered frame into the dataset layout under `root`.
pub fn write_frame(root: &Path, index: usize, k: &Intrinsics, pose: &Pose, view: &RenderedView) -> Result<()> {
    for sub in ["color", "poses", "depth", "label"] {
        mkdir(&root.join(sub))?;
    }
    if index == 0 || !root.join("intrinsics.txt").exists() {
        write_intrinsics(&root.join("intrinsics.txt"), k)?;
    }
    write_pose(&root.join("poses").join(frame_name(index, "txt")), pose)?;
    let (w, h) = (view.width, view.height);
    let path = root.join("color").join(frame_name(index, "png"));
    RgbImage::from_raw(w, h, view.rgb.clone())
        .ok_or_else(|| CdrError::InvalidArgument("rgb buffer size".into()))?
        .save(&path)
        .map_err(|e| image_err(&path, e))?;
    let mm: Vec<u16> = view.depth.iter().map(|d| (d * 1000.0).round().clamp(0.0, 65535.0) as u16).collect();
    let path = root.join("depth").join(frame_name(index, "png"));
    ImageBuffer::<Luma<u16>, _>::from_raw(w, h, mm)
        .ok_or_else(|| CdrError::InvalidArgument("depth buffer size".into()))?
        .save(&path)
        .map_err(|e| image_err(&path, e))?;
    let path = root.join("label").join(frame_name(index, "png"));
    GrayImage::from_raw(w, h, view.label.clone())
        .ok_or_else(|| CdrError::InvalidArgument("label buffer size".into()))?
        .save(&path)
        .map_err(|e| image_err(&path, e))?;
    Ok(())
}
