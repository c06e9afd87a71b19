//! Binary PPM (P6, 8-bit) export of `3×H×W` images and side-by-side
//! original | masked | condensed triptychs, plus a checker for the latter.

use pr2r_core::condense::Roi;
use pr2r_core::Tensor;

/// Minimum mean absolute ROI difference, in 8-bit units, between a stored
/// image and any raw image of its identity.
pub const MIN_ROI_DIFF: f64 = 0.005 * 255.0;

#[derive(Clone, Debug, PartialEq)]
pub struct Ppm {
    pub width: usize,
    pub height: usize,
    /// Row-major interleaved RGB.
    pub rgb: Vec<u8>,
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn check_image(image: &Tensor) -> Result<(usize, usize), String> {
    match image.shape() {
        [3, h, w] => Ok((*h, *w)),
        s => Err(format!("expected a 3×H×W image, got shape {s:?}")),
    }
}

impl Ppm {
    pub fn from_image(image: &Tensor) -> Result<Ppm, String> {
        Ppm::from_panels(&[image])
    }

    /// Panels placed left to right; all must share one shape.
    pub fn from_panels(panels: &[&Tensor]) -> Result<Ppm, String> {
        let first = panels.first().ok_or("no panels")?;
        let (h, w) = check_image(first)?;
        for p in panels {
            if check_image(p)? != (h, w) {
                return Err("panels differ in shape".into());
            }
        }
        let width = w * panels.len();
        let mut rgb = Vec::with_capacity(width * h * 3);
        for r in 0..h {
            for p in panels {
                let d = p.data();
                for c in 0..w {
                    for ch in 0..3 {
                        rgb.push(quantize(d[(ch * h + r) * w + c]));
                    }
                }
            }
        }
        Ok(Ppm { width, height: h, rgb })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.rgb);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Ppm, String> {
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err("truncated header".into());
            }
            fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
        }
        if fields[0] != "P6" {
            return Err(format!("unsupported magic `{}`", fields[0]));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|_| format!("bad header field `{s}`"));
        let (width, height, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
        if max != 255 {
            return Err(format!("max value {max}, expected 255"));
        }
        let body = &bytes[(pos + 1).min(bytes.len())..];
        if body.len() != width * height * 3 {
            return Err(format!("expected {} pixel bytes, found {}", width * height * 3, body.len()));
        }
        Ok(Ppm {
            width,
            height,
            rgb: body.to_vec(),
        })
    }

    /// Panel `i` of `n` equal-width panels, as row-major interleaved RGB.
    pub fn panel(&self, i: usize, n: usize) -> Vec<u8> {
        let w = self.width / n;
        let mut out = Vec::with_capacity(w * self.height * 3);
        for r in 0..self.height {
            let row = (r * self.width + i * w) * 3;
            out.extend_from_slice(&self.rgb[row..row + w * 3]);
        }
        out
    }
}

fn roi_mean_abs_diff(a: &[u8], b: &[u8], width: usize, roi: Roi) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    for r in roi.row0..roi.row1 {
        for c in roi.col0..roi.col1 {
            for ch in 0..3 {
                let i = (r * width + c) * 3 + ch;
                total += (a[i] as f64 - b[i] as f64).abs();
                n += 1;
            }
        }
    }
    total / n as f64
}

/// Checks an exported triptych: the masked panel equals the original
/// outside the ROI, and the condensed panel's ROI differs from the original
/// and from every image in `raw_identity_images` by more than
/// [`MIN_ROI_DIFF`]. Returns the smallest such difference.
pub fn verify_triptych(bytes: &[u8], roi: Roi, raw_identity_images: &[&Tensor]) -> Result<f64, String> {
    let ppm = Ppm::decode(bytes)?;
    if ppm.width % 3 != 0 {
        return Err(format!("width {} is not three panels", ppm.width));
    }
    let w = ppm.width / 3;
    if roi.row1 > ppm.height || roi.col1 > w {
        return Err("ROI outside the image".into());
    }
    let (original, masked, condensed) = (ppm.panel(0, 3), ppm.panel(1, 3), ppm.panel(2, 3));
    for r in 0..ppm.height {
        for c in 0..w {
            if roi.contains(r, c) {
                continue;
            }
            let i = (r * w + c) * 3;
            if original[i..i + 3] != masked[i..i + 3] {
                return Err(format!("masked panel differs from the original outside the ROI at row {r}, col {c}"));
            }
        }
    }
    let mut raws = vec![original];
    for img in raw_identity_images {
        let p = Ppm::from_image(img)?;
        if (p.width, p.height) != (w, ppm.height) {
            return Err("raw image shape differs from the panels".into());
        }
        raws.push(p.rgb);
    }
    let mut min = f64::INFINITY;
    for (k, raw) in raws.iter().enumerate() {
        let d = roi_mean_abs_diff(&condensed, raw, w, roi);
        if d <= MIN_ROI_DIFF {
            return Err(format!("condensed ROI too close to raw image {k}: mean abs diff {d:.3}"));
        }
        min = min.min(d);
    }
    Ok(min)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn image(f: impl Fn(usize, usize, usize) -> f64) -> Tensor {
        let mut d = Vec::new();
        for ch in 0..3 {
            for r in 0..32 {
                for c in 0..16 {
                    d.push(f(ch, r, c));
                }
            }
        }
        Tensor::new(vec![3, 32, 16], d).unwrap()
    }

    #[test]
    fn quantization_rule() {
        assert_eq!(quantize(0.0), 0);
        assert_eq!(quantize(1.0), 255);
        assert_eq!(quantize(0.5), 128);
        assert_eq!(quantize(1.7), 255);
        assert_eq!(quantize(-0.2), 0);
    }

    #[test]
    fn encode_decode_round_trip() {
        let img = image(|ch, r, c| ((ch * 7 + r * 3 + c) % 11) as f64 / 10.0);
        let p = Ppm::from_image(&img).unwrap();
        let bytes = p.encode();
        assert!(bytes.starts_with(b"P6\n16 32\n255\n"));
        assert_eq!(Ppm::decode(&bytes).unwrap(), p);
        assert!(Ppm::decode(&bytes[..bytes.len() - 1]).is_err());
        assert!(Ppm::decode(b"P3\n1 1\n255\n").is_err());
    }

    #[test]
    fn triptych_checks() {
        let roi = Roi::face();
        let raw = image(|_, r, c| if (r + c) % 2 == 0 { 0.9 } else { 0.1 });
        let masked = image(|_, r, c| if roi.contains(r, c) { 0.5 } else if (r + c) % 2 == 0 { 0.9 } else { 0.1 });
        let bytes = Ppm::from_panels(&[&raw, &masked, &masked]).unwrap().encode();
        let d = verify_triptych(&bytes, roi, &[]).unwrap();
        assert!((d - (0.4 * 255.0f64).round()).abs() <= 1.0, "{d}");
        let leaked = Ppm::from_panels(&[&raw, &masked, &raw]).unwrap().encode();
        assert!(verify_triptych(&leaked, roi, &[]).is_err());
        let bad_mask = Ppm::from_panels(&[&raw, &image(|_, _, _| 0.5), &masked]).unwrap().encode();
        assert!(verify_triptych(&bad_mask, roi, &[]).is_err());
        assert!(verify_triptych(&bytes, roi, &[&masked]).is_err());
    }
}
