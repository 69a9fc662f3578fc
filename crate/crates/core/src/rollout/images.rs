use std::path::Path;

use image::{Rgb, RgbImage};

use crate::envs::Observation;
use crate::error::{Error, Result};

/// One labelled row of frames in an image strip.
#[derive(Clone, Debug)]
pub struct StripRow {
    pub label: String,
    pub frames: Vec<Observation>,
}

const GAP: u32 = 2;

/// Lay the rows out as a grid (one row per entry, frames left to right,
/// separated by grey gutters) and save as PNG.
pub fn write_strip_png(rows: &[StripRow], path: &Path) -> Result<()> {
    let first = rows
        .iter()
        .flat_map(|r| r.frames.first())
        .next()
        .ok_or_else(|| Error::InvalidInput("no frames to draw".into()))?;
    let (fh, fw) = (first.height() as u32, first.width() as u32);
    let cols = rows.iter().map(|r| r.frames.len()).max().unwrap_or(0) as u32;
    let width = cols * (fw + GAP) + GAP;
    let height = rows.len() as u32 * (fh + GAP) + GAP;
    let mut img = RgbImage::from_pixel(width, height, Rgb([96, 96, 96]));
    for (ri, row) in rows.iter().enumerate() {
        for (ci, frame) in row.frames.iter().enumerate() {
            if frame.height() as u32 != fh || frame.width() as u32 != fw {
                return Err(Error::Shape(format!(
                    "frame in row '{}' has a different size",
                    row.label
                )));
            }
            let (ox, oy) = (GAP + ci as u32 * (fw + GAP), GAP + ri as u32 * (fh + GAP));
            for (i, px) in frame.bytes().chunks(3).enumerate() {
                let (y, x) = (i as u32 / fw, i as u32 % fw);
                img.put_pixel(ox + x, oy + y, Rgb([px[0], px[1], px[2]]));
            }
        }
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    img.save(path).map_err(|e| Error::Render(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_dimensions() {
        let f = Observation::new(8, 16, vec![255; 8 * 16 * 3]).unwrap();
        let rows = vec![
            StripRow {
                label: "a".into(),
                frames: vec![f.clone(); 3],
            },
            StripRow {
                label: "b".into(),
                frames: vec![f; 2],
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.png");
        write_strip_png(&rows, &p).unwrap();
        let img = image::open(&p).unwrap().to_rgb8();
        assert_eq!(img.dimensions(), (3 * 18 + 2, 2 * 10 + 2));
        assert_eq!(img.get_pixel(2, 2), &Rgb([255, 255, 255]));
        assert!(write_strip_png(&[], &p).is_err());
    }
}
