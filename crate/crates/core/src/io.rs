//! On-disk formats: model checkpoints, `.occgrid` label volumes, binary PPM
//! images and generated sample directories.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::classes::NUM_CLASSES;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::geometry::{BBox3D, OccupancyGrid};
use crate::model::OccModel;
use crate::synth::{SceneSpec, Sample};

const CKPT_MAGIC: &[u8; 4] = b"OCKP";
const GRID_MAGIC: &[u8; 4] = b"OCCG";
const VERSION: u32 = 1;

fn read_array<const N: usize>(r: &mut impl Read, what: &'static str) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(|_| Error::format(what, "truncated"))?;
    Ok(b)
}

fn read_u32(r: &mut impl Read, what: &'static str) -> Result<u32> {
    read_array(r, what).map(u32::from_le_bytes)
}

fn read_u64(r: &mut impl Read, what: &'static str) -> Result<u64> {
    read_array(r, what).map(u64::from_le_bytes)
}

fn read_bytes(r: &mut impl Read, n: usize, what: &'static str) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    r.take(n as u64).read_to_end(&mut buf)?;
    if buf.len() != n {
        return Err(Error::format(what, "truncated"));
    }
    Ok(buf)
}

fn expect_header(r: &mut impl Read, magic: &[u8; 4], what: &'static str) -> Result<()> {
    if &read_array::<4>(r, what)? != magic {
        return Err(Error::format(what, "bad magic"));
    }
    let v = read_u32(r, what)?;
    if v != VERSION {
        return Err(Error::format(what, format!("unsupported version {v}")));
    }
    Ok(())
}

/// One stored tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Run configuration plus every named parameter and buffer of a model.
///
/// Layout: `OCKP`, version u32, config JSON (u64 length + bytes), tensor
/// count u32, then per tensor: name (u32 length + UTF-8), rank u32, dims
/// u64 each, f32 values. All little-endian.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn from_model(config: &RunConfig, model: &OccModel) -> Self {
        let tensors = model
            .store
            .named_tensors()
            .map(|(name, t)| NamedTensor { name: name.clone(), shape: t.shape().to_vec(), data: t.to_vec() })
            .collect();
        Checkpoint { config: config.clone(), tensors }
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(CKPT_MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let cfg = serde_json::to_vec(&self.config)?;
        w.write_all(&(cfg.len() as u64).to_le_bytes())?;
        w.write_all(&cfg)?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for t in &self.tensors {
            w.write_all(&(t.name.len() as u32).to_le_bytes())?;
            w.write_all(t.name.as_bytes())?;
            w.write_all(&(t.shape.len() as u32).to_le_bytes())?;
            for &d in &t.shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in &t.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        const WHAT: &str = "checkpoint";
        expect_header(r, CKPT_MAGIC, WHAT)?;
        let n = read_u64(r, WHAT)? as usize;
        let config = RunConfig::from_json(
            std::str::from_utf8(&read_bytes(r, n, WHAT)?).map_err(|_| Error::format(WHAT, "config is not UTF-8"))?,
        )?;
        let count = read_u32(r, WHAT)?;
        let mut tensors = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let len = read_u32(r, WHAT)? as usize;
            let name =
                String::from_utf8(read_bytes(r, len, WHAT)?).map_err(|_| Error::format(WHAT, "tensor name is not UTF-8"))?;
            let rank = read_u32(r, WHAT)?;
            let shape = (0..rank).map(|_| read_u64(r, WHAT).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let raw = read_bytes(r, numel * 4, WHAT)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            tensors.push(NamedTensor { name, shape, data });
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::format(WHAT, "trailing bytes"));
        }
        Ok(Checkpoint { config, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }

    /// Copies the stored values into `model`. Every model tensor must be
    /// present with the same shape and every stored tensor must exist in
    /// the model; the first offender is named in the error.
    pub fn apply(&self, model: &OccModel) -> Result<()> {
        for (name, t) in model.store.named_tensors() {
            let stored = self.tensors.iter().find(|s| &s.name == name).ok_or_else(|| Error::Checkpoint {
                tensor: name.clone(),
                msg: "missing from checkpoint".into(),
            })?;
            if stored.shape != t.shape() {
                return Err(Error::Checkpoint {
                    tensor: name.clone(),
                    msg: format!("shape {:?} in checkpoint, model expects {:?}", stored.shape, t.shape()),
                });
            }
        }
        for s in &self.tensors {
            if model.store.get(&s.name).is_none() {
                return Err(Error::Checkpoint { tensor: s.name.clone(), msg: "not part of the configured model".into() });
            }
        }
        for s in &self.tensors {
            model.store.get(&s.name).unwrap().set_data(s.data.clone())?;
        }
        Ok(())
    }

    /// Builds the model described by the stored config and loads the values.
    pub fn into_model(&self) -> Result<OccModel> {
        let rig = self.config.scene.rig();
        let model = OccModel::new(&self.config.model, &self.config.scene.grid, &rig, self.config.seed)?;
        self.apply(&model)?;
        Ok(model)
    }
}

/// Writes `grid` as `.occgrid`: `OCCG`, version u32, X, Y, Z u32, class
/// count u32, then the labels in x-major order.
pub fn write_occgrid(w: &mut impl Write, grid: &OccupancyGrid) -> Result<()> {
    if let Some(&bad) = grid.labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
        return Err(Error::Contract(format!("label {bad} outside {NUM_CLASSES} classes")));
    }
    w.write_all(GRID_MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for d in grid.resolution {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    w.write_all(&(NUM_CLASSES as u32).to_le_bytes())?;
    w.write_all(&grid.labels)?;
    Ok(())
}

pub fn read_occgrid(r: &mut impl Read) -> Result<OccupancyGrid> {
    const WHAT: &str = "occgrid";
    expect_header(r, GRID_MAGIC, WHAT)?;
    let mut res = [0usize; 3];
    for d in &mut res {
        *d = read_u32(r, WHAT)? as usize;
    }
    let classes = read_u32(r, WHAT)? as usize;
    if classes == 0 || classes > 256 {
        return Err(Error::format(WHAT, format!("class count {classes}")));
    }
    let labels = read_bytes(r, res.iter().product(), WHAT)?;
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
        return Err(Error::format(WHAT, format!("label {bad} outside {classes} classes")));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::format(WHAT, "trailing bytes"));
    }
    OccupancyGrid::new(res, labels)
}

pub fn save_occgrid(path: &Path, grid: &OccupancyGrid) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_occgrid(&mut w, grid)?;
    w.flush()?;
    Ok(())
}

pub fn load_occgrid(path: &Path) -> Result<OccupancyGrid> {
    read_occgrid(&mut BufReader::new(File::open(path)?))
}

/// 8-bit RGB image, interleaved row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Rgb8 {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

pub fn write_ppm(w: &mut impl Write, img: &Rgb8) -> Result<()> {
    if img.data.len() != img.width * img.height * 3 {
        return Err(Error::Contract(format!("{} bytes for a {}x{} image", img.data.len(), img.width, img.height)));
    }
    write!(w, "P6\n{} {}\n255\n", img.width, img.height)?;
    w.write_all(&img.data)?;
    Ok(())
}

/// Reads a binary PPM with maxval 255; `#` comments in the header are
/// skipped.
pub fn read_ppm(r: &mut impl Read) -> Result<Rgb8> {
    const WHAT: &str = "PPM";
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::format(WHAT, "truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| Error::format(WHAT, "bad header"))?);
    }
    if fields[0] != "P6" {
        return Err(Error::format(WHAT, format!("magic {:?}", fields[0])));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| Error::format(WHAT, format!("bad number {s:?}")));
    let (width, height, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval != 255 {
        return Err(Error::format(WHAT, format!("maxval {maxval}")));
    }
    let data = bytes.get(pos + 1..).unwrap_or_default().to_vec();
    if data.len() != width * height * 3 {
        return Err(Error::format(WHAT, format!("{} pixel bytes for {width}x{height}", data.len())));
    }
    Ok(Rgb8 { width, height, data })
}

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    /// Sample directory relative to the manifest.
    pub path: String,
    pub seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub samples: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(dir.join(MANIFEST))?)?)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(dir.join(MANIFEST), text)?;
        Ok(())
    }
}

/// Directory name of the `i`-th generated sample.
pub fn sample_dir_name(i: usize) -> String {
    format!("sample_{i:04}")
}

/// Writes `scene.json`, `boxes.json`, `occupancy.occgrid` and one
/// `cam{n}.ppm` per camera into `dir`.
pub fn save_sample(dir: &Path, spec: &SceneSpec, sample: &Sample) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut scene = serde_json::to_string_pretty(spec)?;
    scene.push('\n');
    fs::write(dir.join("scene.json"), scene)?;
    let mut boxes = serde_json::to_string_pretty(&sample.boxes)?;
    boxes.push('\n');
    fs::write(dir.join("boxes.json"), boxes)?;
    save_occgrid(&dir.join("occupancy.occgrid"), &sample.occupancy)?;
    let (width, height) = sample.rig.image_size()?;
    for n in 0..sample.rig.len() {
        let img = Rgb8 { width, height, data: sample.camera_rgb8(n)? };
        let mut w = BufWriter::new(File::create(dir.join(format!("cam{n}.ppm")))?);
        write_ppm(&mut w, &img)?;
        w.flush()?;
    }
    Ok(())
}

/// Reads a sample directory back; images come from the PPM files.
pub fn load_sample(dir: &Path) -> Result<(SceneSpec, Sample)> {
    let spec: SceneSpec = serde_json::from_slice(&fs::read(dir.join("scene.json"))?)?;
    spec.validate()?;
    let boxes: Vec<BBox3D> = serde_json::from_slice(&fs::read(dir.join("boxes.json"))?)?;
    let occupancy = load_occgrid(&dir.join("occupancy.occgrid"))?;
    if occupancy.resolution != spec.grid.resolution {
        return Err(Error::format(
            "sample",
            format!("grid {:?} but scene resolution {:?}", occupancy.resolution, spec.grid.resolution),
        ));
    }
    let rig = spec.rig();
    let (w, h) = rig.image_size()?;
    let mut images = vec![0f32; rig.len() * 3 * h * w];
    for n in 0..rig.len() {
        let img = read_ppm(&mut BufReader::new(File::open(dir.join(format!("cam{n}.ppm")))?))?;
        if (img.width, img.height) != (w, h) {
            return Err(Error::format("sample", format!("cam{n}.ppm is {}x{}, rig expects {w}x{h}", img.width, img.height)));
        }
        let out = &mut images[n * 3 * h * w..(n + 1) * 3 * h * w];
        for (p, px) in img.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * h * w + p] = px[c] as f32 / 255.0;
            }
        }
    }
    Ok((spec, Sample { images, occupancy, boxes, rig }))
}

/// Loads every sample listed in the manifest of `dir`, in order.
pub fn load_dataset(dir: &Path) -> Result<Vec<Sample>> {
    Manifest::load(dir)?
        .samples
        .iter()
        .map(|e| load_sample(&dir.join(&e.path)).map(|(_, s)| s))
        .collect()
}

/// Paths of the listed samples.
pub fn sample_paths(dir: &Path) -> Result<Vec<PathBuf>> {
    Ok(Manifest::load(dir)?.samples.iter().map(|e| dir.join(&e.path)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::GridSpec;
    use crate::synth::generate;
    use proptest::prelude::*;

    #[test]
    fn all_free_2x2x2_is_32_bytes() {
        let mut buf = Vec::new();
        write_occgrid(&mut buf, &OccupancyGrid::empty([2, 2, 2])).unwrap();
        assert_eq!(buf.len(), 32);
        assert_eq!(&buf[..4], b"OCCG");
        assert_eq!(buf[4..8], 1u32.to_le_bytes());
        assert_eq!(buf[8..12], 2u32.to_le_bytes());
        assert_eq!(buf[20..24], 17u32.to_le_bytes());
        assert!(buf[24..].iter().all(|&b| b == 0));
    }

    #[test]
    fn occgrid_header_reads_full_scale_dims() {
        let mut buf = Vec::new();
        write_occgrid(&mut buf, &OccupancyGrid::empty([200, 200, 16])).unwrap();
        let dims: Vec<u32> = buf[8..20].chunks(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect();
        assert_eq!(dims, [200, 200, 16]);
    }

    #[test]
    fn occgrid_rejects_bad_labels_and_truncation() {
        let g = OccupancyGrid { resolution: [1, 1, 2], labels: vec![0, 17] };
        assert!(write_occgrid(&mut Vec::new(), &g).is_err());
        let mut buf = Vec::new();
        write_occgrid(&mut buf, &OccupancyGrid::empty([2, 1, 1])).unwrap();
        assert!(read_occgrid(&mut &buf[..buf.len() - 1]).is_err());
        buf[24] = 40;
        assert!(read_occgrid(&mut &buf[..]).is_err());
    }

    proptest! {
        #[test]
        fn occgrid_round_trip(x in 1usize..6, y in 1usize..6, z in 1usize..4, seed in any::<u64>()) {
            let n = x * y * z;
            let labels = (0..n).map(|i| ((seed >> (i % 60)) as usize + i) as u8 % 17).collect();
            let g = OccupancyGrid::new([x, y, z], labels).unwrap();
            let mut buf = Vec::new();
            write_occgrid(&mut buf, &g).unwrap();
            prop_assert_eq!(buf.len(), 24 + n);
            prop_assert_eq!(read_occgrid(&mut &buf[..]).unwrap(), g);
        }

        #[test]
        fn ppm_round_trip(w in 1usize..9, h in 1usize..9, fill in any::<u8>()) {
            let img = Rgb8 { width: w, height: h, data: (0..w * h * 3).map(|i| fill.wrapping_add(i as u8)).collect() };
            let mut buf = Vec::new();
            write_ppm(&mut buf, &img).unwrap();
            prop_assert_eq!(read_ppm(&mut &buf[..]).unwrap(), img);
        }
    }

    #[test]
    fn ppm_header_comments() {
        let mut buf = b"P6 # made by hand\n2 1\n# max\n255\n".to_vec();
        buf.extend([1, 2, 3, 4, 5, 6]);
        let img = read_ppm(&mut &buf[..]).unwrap();
        assert_eq!((img.width, img.height, img.data), (2, 1, vec![1, 2, 3, 4, 5, 6]));
        assert!(read_ppm(&mut &b"P3\n1 1\n255\n"[..]).is_err());
    }

    fn small_spec(seed: u64) -> SceneSpec {
        SceneSpec {
            seed,
            grid: GridSpec::new([-8.0, -8.0, -2.0], [8.0, 8.0, 2.0], [16, 16, 8]).unwrap(),
            image_size: [64, 64],
            ..Default::default()
        }
    }

    #[test]
    fn sample_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = small_spec(5);
        let s = generate(&spec).unwrap();
        save_sample(dir.path(), &spec, &s).unwrap();
        let (spec2, s2) = load_sample(dir.path()).unwrap();
        assert_eq!(spec2, spec);
        assert_eq!(s2, s);
    }

    #[test]
    fn checkpoint_round_trip_and_mismatch() {
        let mut cfg = RunConfig { scene: small_spec(0), ..Default::default() };
        cfg.model.det.queries = 8;
        cfg.model.det.layers = 1;
        let model = OccModel::new(&cfg.model, &cfg.scene.grid, &cfg.scene.rig(), 3).unwrap();
        let ck = Checkpoint::from_model(&cfg, &model);
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        let back = Checkpoint::read_from(&mut &buf[..]).unwrap();
        assert_eq!(back, ck);
        let rebuilt = back.into_model().unwrap();
        for ((n1, a), (n2, b)) in model.store.named_tensors().zip(rebuilt.store.named_tensors()) {
            assert_eq!(n1, n2);
            assert_eq!(a.to_vec(), b.to_vec());
        }
        assert!(Checkpoint::read_from(&mut &buf[..buf.len() - 2]).is_err());

        let mut other = cfg.clone();
        other.model.det.queries = 9;
        let wrong = OccModel::new(&other.model, &other.scene.grid, &other.scene.rig(), 3).unwrap();
        match ck.apply(&wrong) {
            Err(Error::Checkpoint { tensor, .. }) => assert_eq!(tensor, "det.queries"),
            other => panic!("{other:?}"),
        }
        let mut no_aux = cfg.clone();
        no_aux.model.aux = false;
        let small = OccModel::new(&no_aux.model, &no_aux.scene.grid, &no_aux.scene.rig(), 3).unwrap();
        match ck.apply(&small) {
            Err(Error::Checkpoint { tensor, .. }) => assert!(tensor.starts_with("det.")),
            other => panic!("{other:?}"),
        }
    }
}
