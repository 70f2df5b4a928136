//! Result rendering: CSV tables, JSONL records, markdown summaries and
//! side-by-side PNG comparison grids with caption strips.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::harness::{EvalRecord, TransferMatrix};
use crate::metrics::format_psnr;
use crate::tensor::Image;

/// `+inf` serializes as the string "inf" in all report formats; JSON has
/// no native infinity.
pub mod psnr_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_infinite() {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(v),
            Raw::Str(s) if s == "inf" => Ok(f64::INFINITY),
            Raw::Str(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// Records as JSON lines (the raw artifact other outputs derive from).
pub fn write_records_jsonl(path: &Path, records: &[EvalRecord]) -> Result<()> {
    let mut body = String::new();
    for r in records {
        let mut value = serde_json::to_value(r)?;
        if r.psnr.is_infinite() {
            value["psnr"] = serde_json::Value::String("inf".into());
        }
        body.push_str(&serde_json::to_string(&value)?);
        body.push('\n');
    }
    fs::write(path, body)?;
    Ok(())
}

pub fn read_records_jsonl(path: &Path) -> Result<Vec<EvalRecord>> {
    if !path.is_file() {
        return Err(Error::NotFound(path.to_path_buf()));
    }
    let mut out = Vec::new();
    for line in fs::read_to_string(path)?.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let mut value: serde_json::Value = serde_json::from_str(line)?;
        if value["psnr"] == serde_json::Value::String("inf".into()) {
            value["psnr"] = serde_json::Value::from(f64::MAX);
            let mut rec: EvalRecord = serde_json::from_value(value)?;
            rec.psnr = f64::INFINITY;
            out.push(rec);
        } else {
            out.push(serde_json::from_value(value)?);
        }
    }
    Ok(out)
}

/// The `psnr,ssim,acc` table (plus identifying columns).
pub fn write_records_csv(path: &Path, records: &[EvalRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record([
        "processor",
        "transformer",
        "recognizer",
        "task",
        "psnr",
        "ssim",
        "acc",
        "n_samples",
    ])
    .map_err(csv_err)?;
    for r in records {
        w.write_record([
            r.processor_id.clone(),
            r.transformer_id.clone().unwrap_or_default(),
            r.recognizer_id.clone(),
            r.task.clone(),
            format_psnr(r.psnr),
            format!("{}", r.ssim),
            format!("{}", r.accuracy),
            format!("{}", r.n_samples),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records_csv(path: &Path) -> Result<Vec<EvalRecord>> {
    if !path.is_file() {
        return Err(Error::NotFound(path.to_path_buf()));
    }
    let mut rdr = csv::Reader::from_path(path).map_err(csv_err)?;
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row.map_err(csv_err)?;
        let parse = |i: usize| -> Result<f64> {
            row.get(i)
                .unwrap_or_default()
                .parse()
                .map_err(|e| Error::ConfigError(format!("bad csv number: {e}")))
        };
        out.push(EvalRecord {
            processor_id: row.get(0).unwrap_or_default().to_string(),
            transformer_id: match row.get(1) {
                Some("") | None => None,
                Some(s) => Some(s.to_string()),
            },
            recognizer_id: row.get(2).unwrap_or_default().to_string(),
            task: row.get(3).unwrap_or_default().to_string(),
            psnr: parse(4)?,
            ssim: parse(5)?,
            accuracy: parse(6)?,
            n_samples: parse(7)? as usize,
        });
    }
    Ok(out)
}

fn csv_err(e: csv::Error) -> Error {
    Error::ConfigError(format!("csv: {e}"))
}

/// Transfer matrix as CSV: a baseline row then one row per loss model.
pub fn write_matrix_csv(path: &Path, m: &TransferMatrix) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header = vec!["loss_model".to_string()];
    header.extend(m.col_ids.iter().cloned());
    w.write_record(&header).map_err(csv_err)?;
    let mut base = vec!["plain".to_string()];
    base.extend(m.baseline.iter().map(|v| format!("{v}")));
    w.write_record(&base).map_err(csv_err)?;
    for (row_id, row) in m.row_ids.iter().zip(m.cells.iter()) {
        let mut rec = vec![row_id.clone()];
        rec.extend(row.iter().map(|v| format!("{v}")));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Markdown summary: one table of records, `psnr/ssim/acc` per row.
pub fn write_summary_md(path: &Path, title: &str, records: &[EvalRecord]) -> Result<()> {
    let mut body = format!("# {title}\n\n");
    body.push_str("| processor | transformer | recognizer | task | psnr | ssim | acc | n |\n");
    body.push_str("|---|---|---|---|---|---|---|---|\n");
    for r in records {
        body.push_str(&format!(
            "| {} | {} | {} | {} | {} | {:.4} | {:.4} | {} |\n",
            r.processor_id,
            r.transformer_id.clone().unwrap_or_else(|| "-".into()),
            r.recognizer_id,
            r.task,
            format_psnr_rounded(r.psnr),
            r.ssim,
            r.accuracy,
            r.n_samples
        ));
    }
    fs::write(path, body)?;
    Ok(())
}

fn format_psnr_rounded(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.2}")
    }
}

// ---------------------------------------------------------------------------
// Image grids
// ---------------------------------------------------------------------------

/// One tile of a comparison grid: the image plus its caption line.
pub struct GridCell {
    pub image: Image,
    pub caption: String,
}

const GLYPH_W: usize = 5;
const GLYPH_H: usize = 7;

/// 5x7 bitmap glyphs; each byte is one row, low 5 bits used (MSB left).
fn glyph(c: char) -> [u8; 7] {
    match c.to_ascii_uppercase() {
        'A' => [0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'B' => [0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E],
        'C' => [0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E],
        'D' => [0x1E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x1E],
        'E' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F],
        'F' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10],
        'G' => [0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F],
        'H' => [0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'I' => [0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E],
        'J' => [0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C],
        'K' => [0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11],
        'L' => [0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F],
        'M' => [0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11],
        'N' => [0x11, 0x19, 0x15, 0x13, 0x11, 0x11, 0x11],
        'O' => [0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'P' => [0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10],
        'Q' => [0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D],
        'R' => [0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11],
        'S' => [0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E],
        'T' => [0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04],
        'U' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'V' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04],
        'W' => [0x11, 0x11, 0x11, 0x15, 0x15, 0x1B, 0x11],
        'X' => [0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11],
        'Y' => [0x11, 0x11, 0x0A, 0x04, 0x04, 0x04, 0x04],
        'Z' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F],
        '0' => [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E],
        '1' => [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E],
        '2' => [0x0E, 0x11, 0x01, 0x06, 0x08, 0x10, 0x1F],
        '3' => [0x0E, 0x11, 0x01, 0x06, 0x01, 0x11, 0x0E],
        '4' => [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02],
        '5' => [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E],
        '6' => [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E],
        '7' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
        '8' => [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E],
        '9' => [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C],
        '.' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C],
        '/' => [0x01, 0x01, 0x02, 0x04, 0x08, 0x10, 0x10],
        '-' => [0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00],
        '=' => [0x00, 0x00, 0x1F, 0x00, 0x1F, 0x00, 0x00],
        ':' => [0x00, 0x0C, 0x0C, 0x00, 0x0C, 0x0C, 0x00],
        '+' => [0x00, 0x04, 0x04, 0x1F, 0x04, 0x04, 0x00],
        '_' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x1F],
        _ => [0x00; 7],
    }
}

fn draw_text(canvas: &mut [u8], canvas_w: usize, x0: usize, y0: usize, text: &str) {
    let mut x = x0;
    for c in text.chars() {
        let g = glyph(c);
        for (dy, row) in g.iter().enumerate() {
            for dx in 0..GLYPH_W {
                if row & (1 << (GLYPH_W - 1 - dx)) != 0 {
                    let px = x + dx;
                    let py = y0 + dy;
                    let idx = (py * canvas_w + px) * 3;
                    if idx + 2 < canvas.len() {
                        canvas[idx] = 0;
                        canvas[idx + 1] = 0;
                        canvas[idx + 2] = 0;
                    }
                }
            }
        }
        x += GLYPH_W + 1;
    }
}

fn paste_nearest(
    canvas: &mut [u8],
    canvas_w: usize,
    x0: usize,
    y0: usize,
    img: &Image,
    cell: usize,
) {
    // Integer nearest-neighbor upscale to fill a cell x cell box,
    // centered when aspect leaves a margin.
    let scale = (cell / img.w.max(img.h)).max(1);
    let (dw, dh) = (img.w * scale, img.h * scale);
    let ox = x0 + (cell - dw) / 2;
    let oy = y0 + (cell - dh) / 2;
    let rgb = img.to_rgb8();
    for y in 0..dh {
        for x in 0..dw {
            let src = ((y / scale) * img.w + x / scale) * 3;
            let dst = ((oy + y) * canvas_w + ox + x) * 3;
            canvas[dst] = rgb[src];
            canvas[dst + 1] = rgb[src + 1];
            canvas[dst + 2] = rgb[src + 2];
        }
    }
}

/// Render a comparison grid: one column per title, one row per sample,
/// captions under every tile. Returns the column count actually drawn.
pub fn render_grid(
    path: &Path,
    col_titles: &[String],
    rows: &[Vec<GridCell>],
    cell_px: usize,
) -> Result<usize> {
    if rows.is_empty() || col_titles.is_empty() {
        return Err(Error::ConfigError("empty grid".into()));
    }
    for row in rows {
        if row.len() != col_titles.len() {
            return Err(Error::ConfigError(format!(
                "grid row holds {} cells, expected {}",
                row.len(),
                col_titles.len()
            )));
        }
    }
    let margin = 6usize;
    let caption_h = GLYPH_H + 4;
    let title_h = GLYPH_H + 6;
    let cols = col_titles.len();
    let cell_w = cell_px;
    let cell_h = cell_px + caption_h;
    let width = margin + cols * (cell_w + margin);
    let height = title_h + margin + rows.len() * (cell_h + margin);
    let mut canvas = vec![235u8; width * height * 3];

    for (c, title) in col_titles.iter().enumerate() {
        let x = margin + c * (cell_w + margin);
        draw_text(&mut canvas, width, x, 4, title);
    }
    for (r, row) in rows.iter().enumerate() {
        let y = title_h + margin + r * (cell_h + margin);
        for (c, cell) in row.iter().enumerate() {
            let x = margin + c * (cell_w + margin);
            paste_nearest(&mut canvas, width, x, y, &cell.image, cell_px);
            draw_text(&mut canvas, width, x, y + cell_px + 2, &cell.caption);
        }
    }

    let buf: image::RgbImage =
        image::ImageBuffer::from_raw(width as u32, height as u32, canvas).expect("sized buffer");
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::InvalidParam(format!("png encode: {e}")))?;
    Ok(cols)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    fn sample_records() -> Vec<EvalRecord> {
        vec![
            EvalRecord {
                processor_id: "plain".into(),
                transformer_id: None,
                recognizer_id: "r_a".into(),
                task: "super_resolution".into(),
                psnr: 26.29,
                ssim: 0.795,
                accuracy: 0.526,
                n_samples: 200,
            },
            EvalRecord {
                processor_id: "identity".into(),
                transformer_id: Some("t_a".into()),
                recognizer_id: "r_a".into(),
                task: "gaussian_noise".into(),
                psnr: f64::INFINITY,
                ssim: 1.0,
                accuracy: 0.9,
                n_samples: 10,
            },
        ]
    }

    #[test]
    fn csv_roundtrip_including_inf() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("table.csv");
        let records = sample_records();
        write_records_csv(&path, &records).unwrap();
        let body = std::fs::read_to_string(&path).unwrap();
        assert!(body.contains("psnr,ssim,acc"));
        assert!(body.contains("inf"));
        let back = read_records_csv(&path).unwrap();
        assert_eq!(back, records);
    }

    #[test]
    fn jsonl_roundtrip_including_inf() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("records.jsonl");
        let records = sample_records();
        write_records_jsonl(&path, &records).unwrap();
        let body = std::fs::read_to_string(&path).unwrap();
        assert!(body.lines().count() == 2);
        assert!(body.contains("\"inf\""));
        let back = read_records_jsonl(&path).unwrap();
        assert_eq!(back, records);
    }

    #[test]
    fn single_record_csv_has_header_plus_one_row() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("one.csv");
        write_records_csv(&path, &sample_records()[..1]).unwrap();
        let body = std::fs::read_to_string(&path).unwrap();
        assert_eq!(body.trim().lines().count(), 2);
    }

    #[test]
    fn summary_md_written() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("summary.md");
        write_summary_md(&path, "toy", &sample_records()).unwrap();
        let body = std::fs::read_to_string(&path).unwrap();
        assert!(body.starts_with("# toy"));
        assert!(body.contains("| plain |"));
        assert!(body.contains("inf"));
    }

    #[test]
    fn grid_has_k_plus_2_columns() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("grid.png");
        let k = 3usize; // lambda columns
        let titles: Vec<String> = ["TARGET", "INPUT", "L=0"]
            .iter()
            .map(|s| s.to_string())
            .chain((1..k).map(|i| format!("L=1E-{i}")))
            .collect();
        assert_eq!(titles.len(), k + 2);
        let img = Image::constant(3, 16, 16, 0.5);
        let row: Vec<GridCell> = (0..k + 2)
            .map(|i| GridCell {
                image: img.clone(),
                caption: format!("25.1/0.80/C{i}"),
            })
            .collect();
        let cols = render_grid(&path, &titles, &[row], 48).unwrap();
        assert_eq!(cols, k + 2);
        let decoded = image::open(&path).unwrap().to_rgb8();
        let margin = 6;
        assert_eq!(decoded.width() as usize, margin + (k + 2) * (48 + margin));
    }

    #[test]
    fn grid_rejects_ragged_rows() {
        let dir = TempDir::new().unwrap();
        let img = Image::constant(3, 8, 8, 0.5);
        let row = vec![GridCell {
            image: img,
            caption: "x".into(),
        }];
        assert!(render_grid(
            &dir.path().join("g.png"),
            &["A".into(), "B".into()],
            &[row],
            32
        )
        .is_err());
    }
}
