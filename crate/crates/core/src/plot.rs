//! Image grids: one row per test image, columns for the input, the raters
//! and the sampled masks.

use std::path::Path;

use image::{GrayImage, Luma};

use crate::error::{Error, Result};
use crate::metrics::BinaryMask;
use crate::tensor::Tensor;

const GAP: u8 = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Column {
    /// First channel of the prior image.
    Input,
    GroundTruth(usize),
    Sample(usize),
}

/// Input, then `raters` ground truths, then `samples` draws.
pub fn standard_columns(raters: usize, samples: usize) -> Vec<Column> {
    std::iter::once(Column::Input)
        .chain((0..raters).map(Column::GroundTruth))
        .chain((0..samples).map(Column::Sample))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlotSpec {
    pub image_ids: Vec<String>,
    pub columns: Vec<Column>,
    /// Integer upscaling factor per pixel.
    pub scale: u32,
}

/// What one row draws from.
#[derive(Debug, Clone, Copy)]
pub struct PlotRow<'a> {
    pub image: &'a Tensor,
    pub ground_truth: &'a [BinaryMask],
    pub samples: &'a [BinaryMask],
}

pub fn render_grid(spec: &PlotSpec, rows: &[PlotRow]) -> Result<GrayImage> {
    if spec.columns.is_empty() || spec.scale == 0 {
        return Err(Error::invalid("a plot needs at least one column and a positive scale"));
    }
    if rows.len() != spec.image_ids.len() || rows.is_empty() {
        return Err(Error::invalid(format!(
            "{} rows for {} image ids",
            rows.len(),
            spec.image_ids.len()
        )));
    }
    let (_, _, h, w) = rows[0].image.dims4();
    let s = spec.scale;
    let (cw, ch) = (w as u32 * s, h as u32 * s);
    let width = spec.columns.len() as u32 * (cw + 1) + 1;
    let height = rows.len() as u32 * (ch + 1) + 1;
    let mut img = GrayImage::from_pixel(width, height, Luma([GAP]));
    for (r, (row, id)) in rows.iter().zip(&spec.image_ids).enumerate() {
        if row.image.dims4().2 != h || row.image.dims4().3 != w {
            return Err(Error::invalid(format!("image {id} has a different size")));
        }
        for (c, col) in spec.columns.iter().enumerate() {
            let cell = cell_pixels(row, *col, h, w).ok_or_else(|| {
                Error::invalid(format!("image {id} has no data for column {col:?}"))
            })?;
            let (x0, y0) = (1 + c as u32 * (cw + 1), 1 + r as u32 * (ch + 1));
            for y in 0..ch {
                for x in 0..cw {
                    let v = cell[(y / s) as usize * w + (x / s) as usize];
                    img.put_pixel(x0 + x, y0 + y, Luma([v]));
                }
            }
        }
    }
    Ok(img)
}

fn cell_pixels(row: &PlotRow, col: Column, h: usize, w: usize) -> Option<Vec<u8>> {
    let mask = |m: &BinaryMask| {
        (m.height(), m.width()) == (h, w)
    };
    match col {
        Column::Input => Some(
            row.image.data()[..h * w]
                .iter()
                .map(|v| ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8)
                .collect(),
        ),
        Column::GroundTruth(k) => row.ground_truth.get(k).filter(|m| mask(m)).map(mask_pixels),
        Column::Sample(k) => row.samples.get(k).filter(|m| mask(m)).map(mask_pixels),
    }
}

fn mask_pixels(m: &BinaryMask) -> Vec<u8> {
    m.bits().iter().map(|&b| b * 255).collect()
}

pub fn save_grid(path: &Path, spec: &PlotSpec, rows: &[PlotRow]) -> Result<()> {
    render_grid(spec, rows)?
        .save(path)
        .map_err(|e| Error::format(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_geometry_and_content() {
        let image = Tensor::full([1, 1, 2, 2], 1.0);
        let gt = vec![BinaryMask::new(2, 2, vec![1, 0, 0, 0]).unwrap()];
        let samples = vec![BinaryMask::empty(2, 2), BinaryMask::new(2, 2, vec![1; 4]).unwrap()];
        let row = PlotRow {
            image: &image,
            ground_truth: &gt,
            samples: &samples,
        };
        let spec = PlotSpec {
            image_ids: vec!["a".into()],
            columns: standard_columns(1, 2),
            scale: 3,
        };
        let img = render_grid(&spec, &[row]).unwrap();
        assert_eq!(img.dimensions(), (4 * 7 + 1, 7 + 1));
        assert_eq!(img.get_pixel(0, 0)[0], GAP);
        assert_eq!(img.get_pixel(1, 1)[0], 255);
        // Ground truth: top-left pixel on, the rest off.
        assert_eq!(img.get_pixel(8 + 2, 1 + 2)[0], 255);
        assert_eq!(img.get_pixel(8 + 3, 1 + 3)[0], 0);
        assert_eq!(img.get_pixel(15, 1)[0], 0);
        assert_eq!(img.get_pixel(22, 6)[0], 255);
    }

    #[test]
    fn missing_column_data_rejected() {
        let image = Tensor::zeros([1, 1, 2, 2]);
        let row = PlotRow {
            image: &image,
            ground_truth: &[],
            samples: &[],
        };
        let spec = PlotSpec {
            image_ids: vec!["a".into()],
            columns: standard_columns(1, 0),
            scale: 1,
        };
        assert!(render_grid(&spec, &[row]).is_err());
        let empty = PlotSpec { columns: vec![], ..spec };
        assert!(render_grid(&empty, &[row]).is_err());
    }
}
