//! Heatmap export: upscales a lesion activation map, blends it over the
//! source image with a fixed colormap and writes a raw-values sidecar so the
//! PNG can be reproduced or re-thresholded exactly.

use crate::error::Result;
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Viridis-like 5-stop colormap, linearly interpolated.
const STOPS: [(f64, [f64; 3]); 5] = [
    (0.00, [0.267, 0.005, 0.329]),
    (0.25, [0.229, 0.322, 0.546]),
    (0.50, [0.128, 0.567, 0.551]),
    (0.75, [0.369, 0.789, 0.383]),
    (1.00, [0.993, 0.906, 0.144]),
];

fn colormap(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    for w in STOPS.windows(2) {
        let (a, ca) = w[0];
        let (b, cb) = w[1];
        if v <= b {
            let t = if b > a { (v - a) / (b - a) } else { 0.0 };
            return [
                ca[0] + (cb[0] - ca[0]) * t,
                ca[1] + (cb[1] - ca[1]) * t,
                ca[2] + (cb[2] - ca[2]) * t,
            ];
        }
    }
    STOPS[4].1
}

/// Raw activation values stored next to the rendered overlay.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeatmapSidecar {
    pub height: usize,
    pub width: usize,
    /// Row-major activation values before upscaling or colorization.
    pub values: Vec<f64>,
}

/// Bilinear upscale of a single-channel map (half-pixel centers).
pub fn upscale(map: &Array2<f64>, oh: usize, ow: usize) -> Array2<f64> {
    let (h, w) = map.dim();
    Array2::from_shape_fn((oh, ow), |(y, x)| {
        let sy = ((y as f64 + 0.5) * h as f64 / oh as f64 - 0.5).clamp(0.0, (h - 1) as f64);
        let sx = ((x as f64 + 0.5) * w as f64 / ow as f64 - 0.5).clamp(0.0, (w - 1) as f64);
        let y0 = sy.floor() as usize;
        let x0 = sx.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let x1 = (x0 + 1).min(w - 1);
        let wy = sy - y0 as f64;
        let wx = sx - x0 as f64;
        let top = map[[y0, x0]] * (1.0 - wx) + map[[y0, x1]] * wx;
        let bot = map[[y1, x0]] * (1.0 - wx) + map[[y1, x1]] * wx;
        top * (1.0 - wy) + bot * wy
    })
}

/// Writes `<path>` (PNG overlay) and `<path>.values.json` (sidecar).
///
/// The overlay is `(1-alpha) * image + alpha * colormap(activation)`,
/// with the activation bilinearly upscaled to the image size. Output bytes
/// are a pure function of the inputs.
pub fn export_heatmap(
    path: &Path,
    image: &Array3<f64>,
    activation: &Array2<f64>,
    alpha: f64,
) -> Result<()> {
    let (c, h, w) = image.dim();
    let up = upscale(activation, h, w);
    let mut overlay = Array3::<f64>::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            let base: [f64; 3] = if c >= 3 {
                [image[[0, y, x]], image[[1, y, x]], image[[2, y, x]]]
            } else {
                [image[[0, y, x]]; 3]
            };
            let heat = colormap(up[[y, x]]);
            for ch in 0..3 {
                overlay[[ch, y, x]] = (1.0 - alpha) * base[ch] + alpha * heat[ch];
            }
        }
    }
    crate::data::save_image(path, &overlay)?;

    let (ah, aw) = activation.dim();
    let sidecar = HeatmapSidecar {
        height: ah,
        width: aw,
        values: activation.iter().copied().collect(),
    };
    let sidecar_path = path.with_extension("values.json");
    std::fs::write(&sidecar_path, serde_json::to_string(&sidecar)?)?;
    Ok(())
}

/// Reads a sidecar back into an array.
pub fn load_sidecar(path: &Path) -> Result<Array2<f64>> {
    let bytes = std::fs::read(path)?;
    let sc: HeatmapSidecar = serde_json::from_slice(&bytes)?;
    Array2::from_shape_vec((sc.height, sc.width), sc.values)
        .map_err(|e| crate::error::Error::Dimension(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn colormap_endpoints() {
        assert_eq!(colormap(0.0), STOPS[0].1);
        assert_eq!(colormap(1.0), STOPS[4].1);
        let mid = colormap(0.5);
        assert!((mid[1] - 0.567).abs() < 1e-12);
    }

    #[test]
    fn export_is_deterministic_and_sidecar_round_trips() {
        let image = Array3::from_shape_fn((1, 16, 16), |(_, y, x)| ((y + x) % 5) as f64 / 4.0);
        let act = Array2::from_shape_fn((4, 4), |(y, x)| (y * 4 + x) as f64 / 15.0);
        let dir = tempdir().unwrap();
        let p1 = dir.path().join("a.png");
        let p2 = dir.path().join("b.png");
        export_heatmap(&p1, &image, &act, 0.5).unwrap();
        export_heatmap(&p2, &image, &act, 0.5).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());

        let back = load_sidecar(&dir.path().join("a.values.json")).unwrap();
        assert_eq!(back, act);
    }

    #[test]
    fn upscale_preserves_constant_maps() {
        let act = Array2::from_elem((3, 3), 0.7);
        let up = upscale(&act, 12, 12);
        assert!(up.iter().all(|&v| (v - 0.7).abs() < 1e-12));
    }
}
