//! Dataset sources and image output: the two-blob synthetic corpus, the
//! CIFAR-10 binary reader, and P5/P6 pixmap writing.

use crate::error::{Error, Result};
use crate::rng::Rng;
use std::fs;
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone)]
pub struct Dataset {
    /// N×C×H×W, every pixel in [−1,1]
    pub images: Vec<f32>,
    pub labels: Option<Vec<usize>>,
    pub num_classes: usize,
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Dataset {
    pub fn pixels(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn image(&self, i: usize) -> &[f32] {
        &self.images[i * self.pixels()..(i + 1) * self.pixels()]
    }

    pub fn check(&self) -> Result<()> {
        if self.images.len() != self.n * self.pixels() {
            return Err(Error::Data("image buffer size mismatch".into()));
        }
        if let Some(l) = &self.labels {
            if l.len() != self.n {
                return Err(Error::Data("label count mismatch".into()));
            }
            if let Some(&bad) = l.iter().find(|&&c| c >= self.num_classes) {
                return Err(Error::Data(format!("label {bad} ≥ num_classes {}", self.num_classes)));
            }
        }
        if let Some(bad) = self.images.iter().find(|v| !(-1.0..=1.0).contains(*v)) {
            return Err(Error::Data(format!("pixel {bad} outside [−1,1]")));
        }
        Ok(())
    }
}

/// Two-class toy corpus: class 0 is a bright square on a dark ground, class 1
/// the inverse. Positions jitter, additive noise σ=0.05, classes alternate
/// (n/2 each for even n). Single channel. The square spans ¾ of each side so
/// it wins the mean-pixel vote: class-0 images average brighter than class-1.
pub fn synth_two_blobs(n: usize, h: usize, w: usize, seed: u64) -> Result<Dataset> {
    if h < 4 || w < 4 {
        return Err(Error::Data(format!("two_blobs needs h,w ≥ 4, got {h}×{w}")));
    }
    let mut rng = Rng::new(seed);
    let (sq_h, sq_w) = (3 * h / 4, 3 * w / 4);
    let mut images = Vec::with_capacity(n * h * w);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 2;
        let (ground, square) = if class == 0 { (-0.8f32, 0.8f32) } else { (0.8, -0.8) };
        let y0 = rng.below(h - sq_h + 1);
        let x0 = rng.below(w - sq_w + 1);
        let base = images.len();
        images.resize(base + h * w, ground);
        for y in y0..y0 + sq_h {
            for x in x0..x0 + sq_w {
                images[base + y * w + x] = square;
            }
        }
        for v in &mut images[base..] {
            *v = (*v + 0.05 * rng.normal()).clamp(-1.0, 1.0);
        }
        labels.push(class);
    }
    let ds = Dataset { images, labels: Some(labels), num_classes: 2, n, c: 1, h, w };
    ds.check()?;
    Ok(ds)
}

const CIFAR_RECORD: usize = 3073; // 1 label byte + 3·1024 pixel bytes

fn cifar_append(bytes: &[u8], images: &mut Vec<f32>, labels: &mut Vec<usize>) -> Result<()> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Data(format!("CIFAR file size {} not a multiple of {CIFAR_RECORD}", bytes.len())));
    }
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        let label = rec[0] as usize;
        if label > 9 {
            return Err(Error::Data(format!("CIFAR label {label} > 9")));
        }
        labels.push(label);
        images.extend(rec[1..].iter().map(|&b| b as f32 / 127.5 - 1.0));
    }
    Ok(())
}

/// Read CIFAR-10 binary batches: a single .bin file, or a directory holding
/// data_batch_*.bin (sorted). 3072 pixel bytes per record laid out planar
/// R,G,B row-major; bytes map to byte/127.5 − 1.
pub fn cifar10_load(path: &Path) -> Result<Dataset> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    if path.is_dir() {
        let mut files: Vec<_> = fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.file_name()
                    .and_then(|n| n.to_str())
                    .is_some_and(|n| n.starts_with("data_batch_") && n.ends_with(".bin"))
            })
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::Data(format!("no data_batch_*.bin under {}", path.display())));
        }
        for f in files {
            cifar_append(&fs::read(&f)?, &mut images, &mut labels)?;
        }
    } else {
        cifar_append(&fs::read(path)?, &mut images, &mut labels)?;
    }
    let n = labels.len();
    let ds = Dataset { images, labels: Some(labels), num_classes: 10, n, c: 3, h: 32, w: 32 };
    ds.check()?;
    Ok(ds)
}

/// In-place horizontal flip of one C×H×W image.
pub fn hflip(img: &mut [f32], c: usize, h: usize, w: usize) {
    for ch in 0..c {
        for y in 0..h {
            let row = ch * h * w + y * w;
            img[row..row + w].reverse();
        }
    }
}

/// Write a [−1,1] image as a binary pixmap: P5 for C=1, P6 for C=3.
/// Pixels map via round((x+1)·127.5), clamped.
pub fn image_write(path: &Path, image: &[f32], c: usize, h: usize, w: usize) -> Result<()> {
    if c != 1 && c != 3 {
        return Err(Error::Data(format!("pixmap supports C∈{{1,3}}, got {c}")));
    }
    if image.len() != c * h * w {
        return Err(Error::Data("image buffer size mismatch".into()));
    }
    let mut buf = Vec::with_capacity(32 + c * h * w);
    let magic = if c == 1 { "P5" } else { "P6" };
    buf.extend_from_slice(format!("{magic}\n{w} {h}\n255\n").as_bytes());
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                let v = image[ch * h * w + y * w + x];
                buf.push(((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    f.flush()?;
    Ok(())
}
