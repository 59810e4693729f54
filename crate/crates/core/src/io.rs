//! On-disk formats.
//!
//! Arrays are stored as raw little-endian `f64` in row-major order next to a
//! TOML sidecar (`<stem>.toml`) describing the shape and, where relevant, the
//! grid extent, acquisition geometry or display window.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{Extent, Grid, ScalarField, VectorField};
use crate::projector::{Geometry, Sinogram};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub shape: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extent: Option<Extent>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub geometry: Option<Geometry>,
    /// Intensity range mapped to black and white in an image export.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window: Option<[f64; 2]>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".toml");
    path.with_file_name(name)
}

fn write_sidecar(path: &Path, sidecar: &Sidecar) -> Result<()> {
    let text = toml::to_string(sidecar).map_err(|e| Error::format(path, e.to_string()))?;
    let side = sidecar_path(path);
    fs::write(&side, text).map_err(|e| Error::io(side, e))
}

pub fn read_sidecar(path: &Path) -> Result<Sidecar> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    toml::from_str(&text).map_err(|e| Error::format(side, e.to_string()))
}

/// Writes `values` followed by its sidecar.
pub fn write_raw<'a>(path: &Path, sidecar: &Sidecar, values: impl IntoIterator<Item = &'a f64>) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut n = 0;
    for v in values {
        w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(path, e))?;
        n += 1;
    }
    if n != sidecar.shape.iter().product::<usize>() {
        return Err(Error::format(path, format!("{n} values do not match shape {:?}", sidecar.shape)));
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    write_sidecar(path, sidecar)
}

pub fn read_raw(path: &Path) -> Result<(Sidecar, Vec<f64>)> {
    let sidecar = read_sidecar(path)?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let expected = sidecar.shape.iter().product::<usize>() * 8;
    if bytes.len() != expected {
        return Err(Error::format(path, format!("{} bytes, expected {expected}", bytes.len())));
    }
    let values = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Ok((sidecar, values))
}

pub fn write_field(path: &Path, f: &ScalarField) -> Result<()> {
    let g = f.grid();
    let sidecar = Sidecar { shape: vec![g.nx(), g.ny()], extent: Some(g.extent()), geometry: None, window: None };
    write_raw(path, &sidecar, f.values().iter())
}

fn grid_of(path: &Path, sidecar: &Sidecar, rank: usize) -> Result<Grid> {
    let extent = sidecar.extent.ok_or_else(|| Error::format(path, "sidecar has no extent"))?;
    let s = &sidecar.shape;
    if s.len() != rank {
        return Err(Error::format(path, format!("expected rank {rank}, found shape {s:?}")));
    }
    Grid::new(s[rank - 2], s[rank - 1], extent)
}

pub fn read_field(path: &Path) -> Result<ScalarField> {
    let (sidecar, values) = read_raw(path)?;
    let grid = grid_of(path, &sidecar, 2)?;
    let arr = Array2::from_shape_vec(grid.shape(), values).map_err(|e| Error::format(path, e.to_string()))?;
    ScalarField::from_values(grid, arr)
}

/// Components stacked as shape `(2, nx, ny)`.
pub fn write_vector_field(path: &Path, u: &VectorField) -> Result<()> {
    let g = u.grid();
    let sidecar =
        Sidecar { shape: vec![2, g.nx(), g.ny()], extent: Some(g.extent()), geometry: None, window: None };
    write_raw(path, &sidecar, u.ux().iter().chain(u.uy().iter()))
}

pub fn read_vector_field(path: &Path) -> Result<VectorField> {
    let (sidecar, mut values) = read_raw(path)?;
    let grid = grid_of(path, &sidecar, 3)?;
    let uy = values.split_off(grid.len());
    let shape = grid.shape();
    let to_arr = |v| Array2::from_shape_vec(shape, v).map_err(|e| Error::format(path, e.to_string()));
    VectorField::from_components(grid, to_arr(values)?, to_arr(uy)?)
}

pub fn write_sinogram(path: &Path, g: &Sinogram) -> Result<()> {
    let geom = g.geometry();
    let sidecar = Sidecar {
        shape: vec![geom.num_views(), geom.num_bins()],
        extent: None,
        geometry: Some(geom.clone()),
        window: None,
    };
    write_raw(path, &sidecar, g.values().iter())
}

pub fn read_sinogram(path: &Path) -> Result<Sinogram> {
    let (sidecar, values) = read_raw(path)?;
    let geom = sidecar.geometry.ok_or_else(|| Error::format(path, "sidecar has no geometry"))?;
    let arr = Array2::from_shape_vec((geom.num_views(), geom.num_bins()), values)
        .map_err(|e| Error::format(path, e.to_string()))?;
    Sinogram::from_values(geom, arr)
}

/// 16-bit grayscale PNG with `window` mapped linearly onto `0..=65535`.
/// The image x axis runs left to right and y bottom to top.
pub fn write_png16(path: &Path, f: &ScalarField, window: [f64; 2]) -> Result<()> {
    let g = f.grid();
    let (lo, hi) = (window[0], window[1]);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut data = Vec::with_capacity(g.len() * 2);
    for iy in (0..g.ny()).rev() {
        for ix in 0..g.nx() {
            let t = ((f.get(ix, iy) - lo) / span).clamp(0.0, 1.0);
            data.extend_from_slice(&((t * 65535.0).round() as u16).to_be_bytes());
        }
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), g.nx() as u32, g.ny() as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Sixteen);
    let mut w = enc.write_header().map_err(|e| Error::format(path, e.to_string()))?;
    w.write_image_data(&data).map_err(|e| Error::format(path, e.to_string()))?;
    w.finish().map_err(|e| Error::format(path, e.to_string()))?;
    let sidecar = Sidecar { shape: vec![g.nx(), g.ny()], extent: Some(g.extent()), geometry: None, window: Some(window) };
    write_sidecar(path, &sidecar)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::projector::{forward, gate_geometry};

    #[test]
    fn field_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let g = Grid::new(7, 5, Extent::new(-1.0, 2.0, 0.5, 3.0)).unwrap();
        let f = ScalarField::from_fn(g, |x, y| (x * 1.7).sin() + y.powi(3) / 7.0);
        let p = dir.path().join("f.raw");
        write_field(&p, &f).unwrap();
        assert_eq!(read_field(&p).unwrap(), f);
        let u = VectorField::from_fn(g, |x, y| [x / 3.0, -y]);
        let q = dir.path().join("u.raw");
        write_vector_field(&q, &u).unwrap();
        assert_eq!(read_vector_field(&q).unwrap(), u);
    }

    #[test]
    fn sinogram_round_trip_keeps_geometry() {
        let dir = tempfile::tempdir().unwrap();
        let g = Grid::new(16, 16, Extent::centered(1.0)).unwrap();
        let geom = gate_geometry(2, 3, 11, (-1.5, 1.5), 0.1).unwrap();
        let s = forward(&ScalarField::constant(g, 0.3), &geom);
        let p = dir.path().join("s.raw");
        write_sinogram(&p, &s).unwrap();
        assert_eq!(read_sinogram(&p).unwrap(), s);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let g = Grid::new(4, 4, Extent::centered(1.0)).unwrap();
        let p = dir.path().join("f.raw");
        write_field(&p, &ScalarField::constant(g, 1.0)).unwrap();
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(read_field(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn png_records_window() {
        let dir = tempfile::tempdir().unwrap();
        let g = Grid::new(9, 6, Extent::centered(1.0)).unwrap();
        let p = dir.path().join("img.png");
        write_png16(&p, &ScalarField::from_fn(g, |x, _| x), [-1.0, 1.0]).unwrap();
        assert_eq!(read_sidecar(&p).unwrap().window, Some([-1.0, 1.0]));
        let decoder = png::Decoder::new(std::io::BufReader::new(fs::File::open(&p).unwrap()));
        let reader = decoder.read_info().unwrap();
        let info = reader.info();
        assert_eq!((info.width, info.height, info.bit_depth), (9, 6, png::BitDepth::Sixteen));
    }
}
