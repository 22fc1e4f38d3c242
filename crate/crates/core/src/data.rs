//! Synthetic paired scenes, binary PPM files and the dataset manifest.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor4;

/// Light label of every normal-light image.
pub const NORMAL_LABEL: i64 = 0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DegradeParams {
    pub gamma: f64,
    pub gain: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl DegradeParams {
    /// Low-light label from the gamma bucket: 1 for mild, 2 for strong darkening.
    pub fn light_label(&self) -> i64 {
        if self.gamma < 2.4 {
            1
        } else {
            2
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImagePair {
    pub low: Tensor4,
    pub normal: Tensor4,
    pub light_label_low: i64,
    pub light_label_normal: i64,
    pub scene_id: usize,
    pub degrade: DegradeParams,
}

/// Deterministic sub-seed for stream `salt`.
pub fn derive_seed(seed: u64, salt: u64) -> u64 {
    // splitmix64 finaliser
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A `(1, 3, h, w)` scene of smooth gradients, rectangles, ellipses and texture bands.
pub fn synth_scene(seed: u64, h: usize, w: usize) -> Tensor4 {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1));
    let mut img = vec![0.0; 3 * h * w];
    let (fh, fw) = (h as f64, w as f64);

    let base: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.25..0.75));
    let gx: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.3..0.3));
    let gy: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.3..0.3));
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let u = x as f64 / fw - 0.5;
                let v = y as f64 / fh - 0.5;
                img[(c * h + y) * w + x] = base[c] + gx[c] * u + gy[c] * v;
            }
        }
    }

    let n_shapes = rng.random_range(2..=4);
    for _ in 0..n_shapes {
        let color: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.05..0.95));
        let cx = rng.random_range(0.0..fw);
        let cy = rng.random_range(0.0..fh);
        let rx = rng.random_range(0.1..0.35) * fw;
        let ry = rng.random_range(0.1..0.35) * fh;
        let ellipse = rng.random_bool(0.5);
        for y in 0..h {
            for x in 0..w {
                let dx = (x as f64 + 0.5 - cx) / rx;
                let dy = (y as f64 + 0.5 - cy) / ry;
                let inside = if ellipse {
                    dx * dx + dy * dy <= 1.0
                } else {
                    dx.abs() <= 1.0 && dy.abs() <= 1.0
                };
                if inside {
                    for c in 0..3 {
                        img[(c * h + y) * w + x] = color[c];
                    }
                }
            }
        }
    }

    let theta = rng.random_range(0.0..std::f64::consts::PI);
    let freq = rng.random_range(0.15..0.4);
    let amp = rng.random_range(0.03..0.08);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let (s, co) = theta.sin_cos();
    for y in 0..h {
        for x in 0..w {
            let t = amp * (std::f64::consts::TAU * freq * (x as f64 * co + y as f64 * s) + phase).sin();
            for c in 0..3 {
                img[(c * h + y) * w + x] += t;
            }
        }
    }

    let target = rng.random_range(0.42..0.58);
    let mean = img.iter().sum::<f64>() / img.len() as f64;
    for v in &mut img {
        *v = (*v + target - mean).clamp(0.0, 1.0);
    }
    Tensor4::new([1, 3, h, w], img).expect("scene dims")
}

/// `clamp(gain * I^gamma + noise, 0, 1)`.
pub fn degrade(image: &Tensor4, p: &DegradeParams) -> Tensor4 {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(p.seed, 2));
    let noise = (p.noise_sigma > 0.0).then(|| Normal::new(0.0, p.noise_sigma).expect("sigma"));
    let mut out = image.clone();
    for v in out.data_mut() {
        let n = noise.as_ref().map_or(0.0, |d| d.sample(&mut rng));
        *v = (p.gain * v.max(0.0).powf(p.gamma) + n).clamp(0.0, 1.0);
    }
    out
}

/// Round to the nearest multiple of 1/255 after clamping.
pub fn quantize_8bit(image: &Tensor4) -> Tensor4 {
    image.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
}

/// `n` scenes with randomised degradations, 8-bit quantised so that files round-trip exactly.
pub fn synth_dataset(seed: u64, n: usize, size: usize) -> Vec<ImagePair> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 3));
    (0..n)
        .map(|i| {
            let normal = quantize_8bit(&synth_scene(derive_seed(seed, 100 + i as u64), size, size));
            let p = DegradeParams {
                gamma: rng.random_range(1.8..3.0),
                gain: rng.random_range(0.4..0.7),
                noise_sigma: rng.random_range(0.005..0.02),
                seed: derive_seed(seed, 10_000 + i as u64),
            };
            let low = quantize_8bit(&degrade(&normal, &p));
            ImagePair {
                low,
                normal,
                light_label_low: p.light_label(),
                light_label_normal: NORMAL_LABEL,
                scene_id: i,
                degrade: p,
            }
        })
        .collect()
}

/// Binary P6 with maxval 255; values clamped then rounded.
pub fn encode_ppm(image: &Tensor4) -> Result<Vec<u8>> {
    let [b, c, h, w] = image.dims();
    if b != 1 || c != 3 {
        return Err(Error::shape("write_image", &image.dims(), &[1, 3]));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * h * w);
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                let v = image.at(0, ch, y, x).clamp(0.0, 1.0);
                out.push((v * 255.0).round() as u8);
            }
        }
    }
    Ok(out)
}

struct HeaderCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderCursor<'_> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            offset: self.pos,
            msg: msg.into(),
        }
    }

    fn skip_space(&mut self) {
        loop {
            match self.bytes.get(self.pos) {
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(b'#') => {
                    while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                        self.pos += 1;
                    }
                }
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err(format!("expected {what}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Parse {
                offset: start,
                msg: format!("{what} out of range"),
            })
    }
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor4> {
    let mut cur = HeaderCursor { bytes, pos: 0 };
    if !bytes.starts_with(b"P6") {
        return Err(cur.err("missing P6 magic"));
    }
    cur.pos = 2;
    let w = cur.number("width")?;
    let h = cur.number("height")?;
    let maxval = cur.number("maxval")?;
    if maxval != 255 {
        return Err(cur.err(format!("unsupported maxval {maxval}")));
    }
    if w == 0 || h == 0 {
        return Err(cur.err("zero image dimension"));
    }
    if !bytes.get(cur.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(cur.err("expected single whitespace before pixel data"));
    }
    cur.pos += 1;
    let need = w
        .checked_mul(h)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| cur.err("image too large"))?;
    let data = &bytes[cur.pos..];
    if data.len() < need {
        return Err(Error::Parse {
            offset: bytes.len(),
            msg: format!("pixel data truncated: {} of {need} bytes", data.len()),
        });
    }
    let mut img = Tensor4::zeros([1, 3, h, w]);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                img.set(0, c, y, x, data[(y * w + x) * 3 + c] as f64 / 255.0);
            }
        }
    }
    Ok(img)
}

pub fn write_image(path: &Path, image: &Tensor4) -> Result<()> {
    fs::write(path, encode_ppm(image)?)?;
    Ok(())
}

pub fn read_image(path: &Path) -> Result<Tensor4> {
    decode_ppm(&fs::read(path)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    pub scene_id: usize,
    pub low_path: String,
    pub normal_path: String,
    pub gamma: f64,
    pub gain: f64,
    pub sigma: f64,
}

pub const MANIFEST_HEADER: &str = "scene_id,low_path,normal_path,gamma,gain,sigma";

/// Write every pair as PPM files plus `manifest.csv` into `dir`.
pub fn write_dataset(dir: &Path, pairs: &[ImagePair]) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let mut csv = String::new();
    csv.push_str(MANIFEST_HEADER);
    csv.push('\n');
    for p in pairs {
        let low = format!("scene_{:04}_low.ppm", p.scene_id);
        let normal = format!("scene_{:04}_normal.ppm", p.scene_id);
        write_image(&dir.join(&low), &p.low)?;
        write_image(&dir.join(&normal), &p.normal)?;
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            p.scene_id, low, normal, p.degrade.gamma, p.degrade.gain, p.degrade.noise_sigma
        ));
    }
    let path = dir.join("manifest.csv");
    fs::File::create(&path)?.write_all(csv.as_bytes())?;
    Ok(path)
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestRow>> {
    let mut rows = Vec::new();
    let mut offset = 0;
    for (i, line) in text.split_inclusive('\n').enumerate() {
        let start = offset;
        offset += line.len();
        let line = line.trim_end_matches(['\n', '\r']);
        if i == 0 {
            if line != MANIFEST_HEADER {
                return Err(Error::Parse {
                    offset: start,
                    msg: "unexpected manifest header".into(),
                });
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let bad = |msg: &str| Error::Parse {
            offset: start,
            msg: format!("manifest line {}: {msg}", i + 1),
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(bad("expected 6 fields"));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad("bad number"));
        rows.push(ManifestRow {
            scene_id: f[0].parse().map_err(|_| bad("bad scene_id"))?,
            low_path: f[1].to_string(),
            normal_path: f[2].to_string(),
            gamma: num(f[3])?,
            gain: num(f[4])?,
            sigma: num(f[5])?,
        });
    }
    if rows.is_empty() && !text.starts_with(MANIFEST_HEADER) {
        return Err(Error::Parse {
            offset: 0,
            msg: "empty manifest".into(),
        });
    }
    Ok(rows)
}

/// Load the pairs listed in `dir/manifest.csv`.
pub fn load_dataset(dir: &Path) -> Result<Vec<ImagePair>> {
    let text = fs::read_to_string(dir.join("manifest.csv"))?;
    parse_manifest(&text)?
        .into_iter()
        .map(|r| {
            let low = read_image(&dir.join(&r.low_path))?;
            let normal = read_image(&dir.join(&r.normal_path))?;
            if low.dims() != normal.dims() {
                return Err(Error::shape("load_dataset", &low.dims(), &normal.dims()));
            }
            let degrade = DegradeParams {
                gamma: r.gamma,
                gain: r.gain,
                noise_sigma: r.sigma,
                seed: 0,
            };
            Ok(ImagePair {
                low,
                normal,
                light_label_low: degrade.light_label(),
                light_label_normal: NORMAL_LABEL,
                scene_id: r.scene_id,
                degrade,
            })
        })
        .collect()
}
