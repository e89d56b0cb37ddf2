//! Adapter from the public SEVIR distribution (CSV catalog + HDF5 files) to
//! the internal archive format.
//!
//! Image modalities are stored per file as `(N, H, W, T)` arrays under a
//! dataset named after the image type; the catalog row's `file_index` picks
//! the event. Lightning is stored as one `(n_flashes, 5)` dataset per event id
//! with columns `(t_seconds, lat, lon, x, y)`, where `x, y` index a 48x48 grid.
//! The visible channel is never read. Only exercised against small
//! synthetic fixtures here, not against the full archive.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Array3};

use super::{write_archive, ArchiveManifest, EventTensor, ModalitySchema};
use crate::error::{arg_err, Error, Result};

pub const SEVIR_FRAMES: usize = 49;
const IMAGE_TYPES: [&str; 3] = ["ir069", "ir107", "vil"];
const LIGHTNING: &str = "lght";
const LIGHTNING_GRID: usize = 48;
/// Frame edges in seconds relative to the event reference time.
const FIRST_EDGE_S: f64 = -120.0 * 60.0;
const FRAME_STEP_S: f64 = 5.0 * 60.0;

#[derive(Clone, Debug)]
struct CatalogRow {
    file_name: String,
    file_index: usize,
}

fn ingestion(msg: impl std::fmt::Display) -> Error {
    Error::Ingestion(msg.to_string())
}

fn read_catalog(path: &Path) -> Result<Vec<(String, HashMap<String, CatalogRow>)>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| ingestion(format!("{}: {e}", path.display())))?;
    let headers = reader.headers().map_err(ingestion)?.clone();
    let col = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| ingestion(format!("catalog lacks column {name:?}")))
    };
    let (c_id, c_file, c_index, c_type) = (col("id")?, col("file_name")?, col("file_index")?, col("img_type")?);

    let mut order: Vec<String> = Vec::new();
    let mut rows: HashMap<String, HashMap<String, CatalogRow>> = HashMap::new();
    for rec in reader.records() {
        let rec = rec.map_err(ingestion)?;
        let id = rec.get(c_id).unwrap_or_default().to_string();
        let img_type = rec.get(c_type).unwrap_or_default().to_string();
        if img_type == "vis" {
            continue;
        }
        let file_index = rec
            .get(c_index)
            .unwrap_or_default()
            .parse::<usize>()
            .map_err(|e| ingestion(format!("bad file_index for {id}: {e}")))?;
        let row = CatalogRow { file_name: rec.get(c_file).unwrap_or_default().to_string(), file_index };
        if !rows.contains_key(&id) {
            order.push(id.clone());
        }
        rows.entry(id).or_default().insert(img_type, row);
    }
    Ok(order.into_iter().map(|id| {
        let r = rows.remove(&id).unwrap_or_default();
        (id, r)
    }).collect())
}

fn resolve(catalog: &Path, file_name: &str) -> PathBuf {
    let base = catalog.parent().unwrap_or_else(|| Path::new("."));
    let under_data = base.join("data").join(file_name);
    if under_data.exists() {
        under_data
    } else {
        base.join(file_name)
    }
}

/// Reads one event of an image modality as `(T, H, W)`.
fn read_image(path: &Path, img_type: &str, index: usize) -> Result<Array3<f32>> {
    let file = hdf5::File::open(path).map_err(|e| ingestion(format!("{}: {e}", path.display())))?;
    let ds = file.dataset(img_type).map_err(|e| ingestion(format!("{}: no dataset {img_type}: {e}", path.display())))?;
    let shape = ds.shape();
    if shape.len() != 4 {
        return Err(Error::Schema(format!("{img_type} in {} has shape {shape:?}, expected (N, H, W, T)", path.display())));
    }
    if index >= shape[0] {
        return Err(ingestion(format!("file_index {index} out of range for {}", path.display())));
    }
    let hwt: Array3<f32> = ds.read_slice(s![index, .., .., ..]).map_err(ingestion)?;
    Ok(hwt.permuted_axes([2, 0, 1]).as_standard_layout().to_owned())
}

fn read_flashes(path: &Path, event_id: &str) -> Result<Array2<f32>> {
    let file = hdf5::File::open(path).map_err(|e| ingestion(format!("{}: {e}", path.display())))?;
    let ds = file.dataset(event_id).map_err(|e| ingestion(format!("{}: no lightning for {event_id}: {e}", path.display())))?;
    let shape = ds.shape();
    if shape.len() != 2 || shape[1] != 5 {
        return Err(Error::Schema(format!("lightning for {event_id} has shape {shape:?}, expected (n, 5)")));
    }
    ds.read_2d().map_err(ingestion)
}

fn frame_source(t: usize, available: usize) -> usize {
    if available == SEVIR_FRAMES {
        t
    } else {
        ((t as f64) * (available - 1) as f64 / (SEVIR_FRAMES - 1) as f64).round() as usize
    }
}

/// Writes `plane` (`h x w`) into a `res x res` slot with nearest-neighbour upsampling.
fn place_plane(dst: &mut [f32], res: usize, src: ndarray::ArrayView2<f32>) -> Result<()> {
    let (h, w) = src.dim();
    if h == 0 || w == 0 || res % h != 0 || res % w != 0 {
        return Err(Error::Schema(format!("{h}x{w} raster does not divide target resolution {res}")));
    }
    let (fy, fx) = (res / h, res / w);
    for y in 0..res {
        for x in 0..res {
            dst[y * res + x] = src[[y / fy, x / fx]];
        }
    }
    Ok(())
}

/// Counts flashes per pixel and frame on the `res x res` grid.
fn rasterize_flashes(flashes: &Array2<f32>, res: usize) -> Vec<f32> {
    let plane = res * res;
    let mut out = vec![0.0f32; SEVIR_FRAMES * plane];
    let scale = res as f64 / LIGHTNING_GRID as f64;
    for row in flashes.rows() {
        let (t, x, y) = (row[0] as f64, row[3] as f64, row[4] as f64);
        if !(x >= 0.0 && y >= 0.0 && x < LIGHTNING_GRID as f64 && y < LIGHTNING_GRID as f64) {
            continue;
        }
        let edges_passed = ((t - FIRST_EDGE_S) / FRAME_STEP_S).floor();
        let frame = edges_passed.clamp(0.0, (SEVIR_FRAMES - 1) as f64) as usize;
        let px = ((x * scale) as usize).min(res - 1);
        let py = ((y * scale) as usize).min(res - 1);
        out[frame * plane + py * res + px] += 1.0;
    }
    out
}

/// Converts up to `event_limit` complete events (all of ir069, ir107, lght, vil)
/// listed in the SEVIR catalog into an archive under `out`.
pub fn ingest_sevir(catalog: &Path, out: &Path, event_limit: usize) -> Result<ArchiveManifest> {
    if event_limit == 0 {
        return arg_err("event_limit must be positive; an empty archive is not allowed");
    }
    let schema = ModalitySchema::default();
    let catalog_rows = read_catalog(catalog)?;
    let mut events = Vec::new();
    for (event_id, rows) in catalog_rows {
        if events.len() == event_limit {
            break;
        }
        let present = IMAGE_TYPES.iter().chain(std::iter::once(&LIGHTNING)).filter(|t| rows.contains_key(**t)).count();
        if present != IMAGE_TYPES.len() + 1 {
            return Err(Error::Schema(format!(
                "event {event_id} provides {present} of the {} expected modalities",
                IMAGE_TYPES.len() + 1
            )));
        }
        let mut images = BTreeMap::new();
        for t in IMAGE_TYPES {
            let row = &rows[t];
            images.insert(t, read_image(&resolve(catalog, &row.file_name), t, row.file_index)?);
        }
        let vil = &images["vil"];
        let res = vil.shape()[1];
        if vil.shape()[2] != res {
            return Err(Error::Schema(format!("event {event_id}: non-square vil raster {:?}", vil.shape())));
        }
        let flashes = read_flashes(&resolve(catalog, &rows[LIGHTNING].file_name), &event_id)?;
        let lightning = rasterize_flashes(&flashes, res);

        let plane = res * res;
        let mut data = vec![0.0f32; SEVIR_FRAMES * 4 * plane];
        for frame in 0..SEVIR_FRAMES {
            for (channel, name) in schema.names.iter().enumerate() {
                let dst = &mut data[(frame * 4 + channel) * plane..(frame * 4 + channel + 1) * plane];
                if name == "lightning" {
                    dst.copy_from_slice(&lightning[frame * plane..(frame + 1) * plane]);
                    continue;
                }
                let img = &images[name.as_str()];
                let t = frame_source(frame, img.shape()[0]);
                place_plane(dst, res, img.slice(s![t, .., ..]))?;
            }
        }
        let safe_id: String =
            event_id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect();
        events.push(EventTensor::new(safe_id, [SEVIR_FRAMES, 4, res, res], data)?);
        log::info!("ingested SEVIR event {event_id}");
    }
    if events.is_empty() {
        return Err(ingestion("catalog lists no events"));
    }
    write_archive(&events, &schema, out, None)
}
