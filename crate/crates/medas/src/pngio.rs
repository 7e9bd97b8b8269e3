//! PNG encoding of grayscale and RGB rasters, and mask overlays.

use medas_core::image::Image;

/// Overlay opacity of the mask color.
pub const OVERLAY_ALPHA: f64 = 0.5;
pub const OVERLAY_COLOR: [u8; 3] = [0xFF, 0x00, 0x00];

fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Encodes `[h, w]` (grayscale) or `[h, w, 3]` (RGB) samples in 0..=255.
pub fn encode(img: &Image) -> Result<Vec<u8>, String> {
    let (h, w, color) = match img.shape.as_slice() {
        [h, w] => (*h, *w, png::ColorType::Grayscale),
        [h, w, 3] => (*h, *w, png::ColorType::Rgb),
        other => return Err(format!("cannot encode shape {other:?} as PNG")),
    };
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| e.to_string())?;
        let data: Vec<u8> = img.data.iter().map(|v| to_u8(*v)).collect();
        writer.write_image_data(&data).map_err(|e| e.to_string())?;
    }
    Ok(out)
}

/// Decodes 8-bit grayscale, RGB or RGBA (alpha dropped).
pub fn decode(bytes: &[u8]) -> Result<Image, String> {
    let mut dec = png::Decoder::new(std::io::Cursor::new(bytes));
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(|e| e.to_string())?;
    let size = reader.output_buffer_size().ok_or("PNG too large")?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| e.to_string())?;
    let (w, h) = (info.width as usize, info.height as usize);
    let buf = &buf[..info.buffer_size()];
    let (shape, data): (Vec<usize>, Vec<f64>) = match info.color_type {
        png::ColorType::Grayscale => (vec![h, w], buf.iter().map(|&v| v as f64).collect()),
        png::ColorType::GrayscaleAlpha => (vec![h, w], buf.chunks(2).map(|c| c[0] as f64).collect()),
        png::ColorType::Rgb => (vec![h, w, 3], buf.iter().map(|&v| v as f64).collect()),
        png::ColorType::Rgba => (
            vec![h, w, 3],
            buf.chunks(4).flat_map(|c| c[..3].iter().map(|&v| v as f64)).collect(),
        ),
        other => return Err(format!("unsupported PNG color type {other:?}")),
    };
    Image::new(shape, data).map_err(|e| e.to_string())
}

/// Linearly maps the image's own range onto 0..=255.
pub fn to_display(img: &Image) -> Image {
    match img.min_max() {
        Some((lo, hi)) if hi > lo => img.map(|v| (v - lo) / (hi - lo) * 255.0),
        _ => img.map(|_| 0.0),
    }
}

/// Grayscale image with the mask alpha-blended in the overlay color.
pub fn overlay(img: &Image, mask: &Image) -> Result<Image, String> {
    let gray = match img.shape.as_slice() {
        [_, _] => to_display(img),
        [h, w, 3] => {
            let lum = img.data.chunks(3).map(|c| (c[0] + c[1] + c[2]) / 3.0).collect();
            to_display(&Image::new(vec![*h, *w], lum).map_err(|e| e.to_string())?)
        }
        other => return Err(format!("cannot overlay shape {other:?}")),
    };
    if mask.len() != gray.len() {
        return Err("mask and image sizes differ".into());
    }
    let mut data = Vec::with_capacity(gray.len() * 3);
    for (g, m) in gray.data.iter().zip(&mask.data) {
        for c in OVERLAY_COLOR {
            data.push(if *m != 0.0 {
                (1.0 - OVERLAY_ALPHA) * g + OVERLAY_ALPHA * c as f64
            } else {
                *g
            });
        }
    }
    Image::new(vec![gray.shape[0], gray.shape[1], 3], data).map_err(|e| e.to_string())
}

/// Renders a series as a white-on-black line chart.
pub fn line_chart(values: &[f64], width: usize, height: usize) -> Image {
    let mut img = Image::filled(vec![height, width], 0.0);
    if values.is_empty() {
        return img;
    }
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let point = |i: usize| {
        let x = if values.len() == 1 {
            0.0
        } else {
            i as f64 / (values.len() - 1) as f64 * (width - 1) as f64
        };
        let y = (1.0 - (values[i] - lo) / span) * (height - 1) as f64;
        (x, y)
    };
    for i in 0..values.len() {
        let (x0, y0) = point(i);
        let (x1, y1) = point((i + 1).min(values.len() - 1));
        let steps = ((x1 - x0).abs().max((y1 - y0).abs()) as usize).max(1);
        for s in 0..=steps {
            let t = s as f64 / steps as f64;
            let x = (x0 + t * (x1 - x0)).round() as usize;
            let y = (y0 + t * (y1 - y0)).round() as usize;
            img.data[y * width + x] = 255.0;
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip() {
        let img = Image::new(vec![2, 3, 3], (0..18).map(|v| (v * 10) as f64).collect()).unwrap();
        assert_eq!(decode(&encode(&img).unwrap()).unwrap(), img);
        let gray = Image::new(vec![1, 2], vec![0.0, 255.0]).unwrap();
        assert_eq!(decode(&encode(&gray).unwrap()).unwrap(), gray);
    }

    #[test]
    fn overlay_blends_red() {
        let img = Image::new(vec![1, 2], vec![0.0, 1.0]).unwrap();
        let mask = Image::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let o = overlay(&img, &mask).unwrap();
        assert_eq!(o.data, vec![127.5, 0.0, 0.0, 255.0, 255.0, 255.0]);
    }
}
