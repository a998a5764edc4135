//! CSV manifest (`relative_image_path,stack_id,slice_index,label`) and
//! grayscale image I/O.

use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, Luma};

use super::{Dataset, Label, Slice, Split};
use crate::error::{Error, Result};
use crate::grid::{Grid, Mask};

const HEADER: [&str; 4] = ["relative_image_path", "stack_id", "slice_index", "label"];
const UNLABELED: &str = "UNLABELED";
const IMAGE_DIR: &str = "images";

/// Reads a manifest; image paths are resolved relative to the manifest's
/// directory. Rows labeled `UNLABELED` go to the unlabeled pool, others to
/// the labeled pool, each in row order.
pub fn load_manifest(path: &Path, split: Split) -> Result<Dataset> {
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let row_err = |row: usize, msg: String| Error::Manifest {
        path: path.to_path_buf(),
        row,
        msg,
    };
    let headers = reader.headers().map_err(|e| row_err(1, e.to_string()))?;
    if headers.iter().ne(HEADER.iter().copied()) {
        return Err(row_err(
            1,
            format!("expected header {:?}, found {:?}", HEADER, headers),
        ));
    }

    let mut dataset = Dataset::empty(split);
    let mut size: Option<(usize, usize)> = None;
    for (i, record) in reader.records().enumerate() {
        // Row numbers count the header as row 1.
        let row = i + 2;
        let record = record.map_err(|e| row_err(row, e.to_string()))?;
        if record.len() != 4 {
            return Err(row_err(row, format!("expected 4 fields, found {}", record.len())));
        }
        let slice_index: usize = record[2]
            .parse()
            .map_err(|_| row_err(row, format!("bad slice_index {:?}", &record[2])))?;
        let label = match &record[3] {
            UNLABELED => None,
            s => Some(
                s.parse::<Label>()
                    .map_err(|_| row_err(row, format!("unknown label {s:?}")))?,
            ),
        };
        let image_path = base.join(&record[0]);
        let pixels = load_image(&image_path).map_err(|e| row_err(row, e.to_string()))?;
        match size {
            None => size = Some(pixels.shape()),
            Some(s) if s != pixels.shape() => {
                return Err(row_err(
                    row,
                    format!("image is {:?}, expected {:?}", pixels.shape(), s),
                ))
            }
            _ => {}
        }
        let slice = Slice::new(pixels, &record[1], slice_index);
        match label {
            Some(l) => dataset.labeled.push((slice, l)),
            None => dataset.unlabeled.push(slice),
        }
    }
    Ok(dataset)
}

/// Writes the dataset's slices as 16-bit PGM files under `images/` next to
/// the manifest, then the manifest itself (labeled rows first).
pub fn save_manifest(dataset: &Dataset, path: &Path) -> Result<()> {
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let image_dir = base.join(IMAGE_DIR);
    fs::create_dir_all(&image_dir).map_err(|e| Error::io(&image_dir, e))?;
    let mut writer = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    writer.write_record(HEADER).map_err(|e| csv_io(path, e))?;
    let rows = dataset
        .labeled
        .iter()
        .map(|(s, l)| (s, l.as_str()))
        .chain(dataset.unlabeled.iter().map(|s| (s, UNLABELED)));
    for (slice, label) in rows {
        let rel = PathBuf::from(IMAGE_DIR).join(format!(
            "{}_{:04}.pgm",
            sanitize(&slice.stack_id),
            slice.slice_index
        ));
        save_image_u16(&slice.pixels, &base.join(&rel))?;
        writer
            .write_record([
                rel.to_string_lossy().as_ref(),
                slice.stack_id.as_str(),
                slice.slice_index.to_string().as_str(),
                label,
            ])
            .map_err(|e| csv_io(path, e))?;
    }
    writer
        .flush()
        .map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e.to_string()))
}

fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Loads a grayscale image, normalizing 8-bit and 16-bit intensities to [0, 1].
pub fn load_image(path: &Path) -> Result<Grid<f32>> {
    let img_err = |msg: String| Error::Image {
        path: path.to_path_buf(),
        msg,
    };
    if !path.exists() {
        return Err(img_err("file not found".into()));
    }
    let img = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| img_err(e.to_string()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f32> = match img {
        DynamicImage::ImageLuma8(buf) => buf.into_raw().into_iter().map(|v| v as f32 / 255.0).collect(),
        DynamicImage::ImageLuma16(buf) => buf
            .into_raw()
            .into_iter()
            .map(|v| v as f32 / 65535.0)
            .collect(),
        other => other
            .to_luma16()
            .into_raw()
            .into_iter()
            .map(|v| v as f32 / 65535.0)
            .collect(),
    };
    Grid::from_vec(h, w, data)
}

/// Saves intensities in [0, 1] as a 16-bit grayscale image; the format is
/// chosen from the file extension.
pub fn save_image_u16(pixels: &Grid<f32>, path: &Path) -> Result<()> {
    let raw: Vec<u16> = pixels
        .as_slice()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) as f64 * 65535.0).round() as u16)
        .collect();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(pixels.cols() as u32, pixels.rows() as u32, raw)
            .ok_or_else(|| Error::Shape("image buffer size".into()))?;
    buf.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

/// Saves a mask as an 8-bit grayscale image with raw values {0, 1}.
pub fn save_mask(mask: &Mask, path: &Path) -> Result<()> {
    let raw: Vec<u8> = mask.as_slice().iter().map(|&b| b as u8).collect();
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_raw(mask.cols() as u32, mask.rows() as u32, raw)
            .ok_or_else(|| Error::Shape("mask buffer size".into()))?;
    buf.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{generate_synthetic, SynthConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ten_slices() -> Dataset {
        let cfg = SynthConfig {
            n_stacks: 2,
            slices_per_stack: 5,
            image_size: 16,
            seed: 3,
            ..SynthConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        generate_synthetic(&cfg).unwrap().with_label_budget(6, &mut rng)
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let d = ten_slices();
        save_manifest(&d, &path).unwrap();
        let back = load_manifest(&path, Split::Train).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn unknown_label_names_row() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        save_manifest(&ten_slices(), &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        let fields: Vec<&str> = lines[3].split(',').collect();
        lines[3] = format!("{},{},{},X", fields[0], fields[1], fields[2]);
        fs::write(&path, lines.join("\n")).unwrap();
        match load_manifest(&path, Split::Train) {
            Err(Error::Manifest { row, msg, .. }) => {
                assert_eq!(row, 4);
                assert!(msg.contains("\"X\""), "{msg}");
            }
            other => panic!("expected manifest error, got {other:?}"),
        }
    }

    #[test]
    fn empty_manifest_is_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        fs::write(&path, "relative_image_path,stack_id,slice_index,label\n").unwrap();
        let d = load_manifest(&path, Split::Test).unwrap();
        assert!(d.is_empty());
        assert_eq!(d.split, Split::Test);
    }

    #[test]
    fn missing_image_and_bad_rows_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        fs::write(
            &path,
            "relative_image_path,stack_id,slice_index,label\nimages/nope.pgm,a,0,D\n",
        )
        .unwrap();
        assert!(matches!(
            load_manifest(&path, Split::Train),
            Err(Error::Manifest { row: 2, .. })
        ));
        fs::write(
            &path,
            "relative_image_path,stack_id,slice_index,label\nimages/nope.pgm,a,zero,D\n",
        )
        .unwrap();
        assert!(matches!(
            load_manifest(&path, Split::Train),
            Err(Error::Manifest { row: 2, .. })
        ));
    }

    #[test]
    fn eight_bit_images_normalize() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        let mask = Grid::from_fn(3, 4, |r, c| (r + c) % 2 == 0);
        save_mask(&mask, &path).unwrap();
        let back = load_image(&path).unwrap();
        assert_eq!(back.shape(), (3, 4));
        for (m, v) in mask.as_slice().iter().zip(back.as_slice()) {
            assert_eq!(*v, if *m { 1.0 / 255.0 } else { 0.0 });
        }
    }
}
