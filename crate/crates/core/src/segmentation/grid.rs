use crate::error::{Error, Result};
use crate::imaging::ImageRgb;
use crate::segmentation::LabelMap;

/// Splits `len` into `parts` strips, the `len % parts` longer strips last.
fn strip_index(len: usize, parts: usize) -> Vec<usize> {
    let base = len / parts;
    let longer_from = parts - len % parts;
    let mut index = Vec::with_capacity(len);
    for part in 0..parts {
        let size = if part < longer_from { base } else { base + 1 };
        index.extend(std::iter::repeat_n(part, size));
    }
    index
}

/// Uniform `rows x cols` rectangles, numbered row-major.
pub fn grid_labels(width: usize, height: usize, rows: usize, cols: usize) -> Result<LabelMap> {
    if rows == 0 || cols == 0 || rows * cols < 2 || rows > height || cols > width {
        return Err(Error::InvalidSegmentation(format!(
            "cannot cut a {width}x{height} image into {rows}x{cols} cells"
        )));
    }
    let row_of = strip_index(height, rows);
    let col_of = strip_index(width, cols);
    let labels = row_of
        .iter()
        .flat_map(|&r| col_of.iter().map(move |&c| (r * cols + c) as u32))
        .collect();
    LabelMap::new(width, height, labels)
}

pub fn grid_segment(image: &ImageRgb, rows: usize, cols: usize) -> Result<LabelMap> {
    grid_labels(image.width(), image.height(), rows, cols)
}
