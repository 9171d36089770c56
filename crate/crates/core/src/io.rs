//! File formats: PGM/PPM images, the weight container, match dumps, loss
//! curves and homography CSVs. Every writer goes through [`write_atomic`].

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use semidense_tensor::Tensor;
use sha2::{Digest, Sha256};

use crate::coarse::MatchMode;
use crate::error::{Error, Result};
use crate::fine::FineMatch;
use crate::geometry::Homography;
use crate::params::Params;
use crate::synth::SynthPair;

pub const SCHEMA_VERSION: u32 = 1;
const CONTAINER_MAGIC: &str = "SDWC 1";

/// Writes `bytes` to a temporary file next to `path`, then renames it over
/// `path`. A failed write leaves no file behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(path, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

// ---- images ----

struct Pnm<'a> {
    magic: [u8; 2],
    width: usize,
    height: usize,
    payload: &'a [u8],
}

fn parse_pnm<'a>(bytes: &'a [u8], path: &Path) -> Result<Pnm<'a>> {
    let bad = |d: &str| Error::format(path, d.to_string());
    if bytes.len() < 2 || bytes[0] != b'P' || !(bytes[1] == b'5' || bytes[1] == b'6') {
        return Err(bad("not a binary PGM (P5) or PPM (P6) file"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for f in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&c| c != b'\n') {
                        pos += 1;
                    }
                }
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        let text = std::str::from_utf8(&bytes[start..pos]).unwrap_or("");
        *f = text.parse().map_err(|_| bad("malformed header"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(bad("malformed header"));
    }
    pos += 1;
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(bad(&format!("unsupported maxval {maxval} (only 255)")));
    }
    if width == 0 || height == 0 {
        return Err(bad("zero image dimension"));
    }
    let channels = if bytes[1] == b'5' { 1 } else { 3 };
    let need = width * height * channels;
    let payload = &bytes[pos..];
    if payload.len() < need {
        return Err(bad(&format!("truncated payload: {} of {need} bytes", payload.len())));
    }
    Ok(Pnm { magic: [bytes[0], bytes[1]], width, height, payload: &payload[..need] })
}

/// Decodes a P5 or P6 image to a `[1, H, W]` map in `[0, 1]`. Colour is
/// converted with luma weights `0.299, 0.587, 0.114`.
pub fn decode_image(bytes: &[u8], path: &Path) -> Result<Tensor<f32>> {
    let p = parse_pnm(bytes, path)?;
    let data = if p.magic[1] == b'5' {
        p.payload.iter().map(|&v| v as f32 / 255.0).collect()
    } else {
        p.payload
            .chunks_exact(3)
            .map(|c| ((0.299 * c[0] as f64 + 0.587 * c[1] as f64 + 0.114 * c[2] as f64) / 255.0) as f32)
            .collect()
    };
    Ok(Tensor::new([1, p.height, p.width], data)?)
}

pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    decode_image(&read_bytes(path)?, path)
}

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode_pgm(img: &Tensor<f32>) -> Result<Vec<u8>> {
    let (c, h, w) = img.dims3()?;
    if c != 1 {
        return Err(Error::Input(format!("PGM needs one channel, got {c}")));
    }
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(img.data().iter().map(|&v| to_byte(v)));
    Ok(out)
}

pub fn save_pgm(path: &Path, img: &Tensor<f32>) -> Result<()> {
    write_atomic(path, &encode_pgm(img)?)
}

/// 8-bit RGB raster.
#[derive(Clone, Debug, PartialEq)]
pub struct Rgb {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Rgb {
    pub fn new(width: usize, height: usize) -> Self {
        Rgb { width, height, data: vec![0; width * height * 3] }
    }

    pub fn put(&mut self, x: i64, y: i64, c: [u8; 3]) {
        if x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height {
            let o = (y as usize * self.width + x as usize) * 3;
            self.data[o..o + 3].copy_from_slice(&c);
        }
    }

    pub fn line(&mut self, p: (i64, i64), q: (i64, i64), c: [u8; 3]) {
        let (dx, dy) = ((q.0 - p.0).abs(), -(q.1 - p.1).abs());
        let (sx, sy) = ((q.0 - p.0).signum(), (q.1 - p.1).signum());
        let (mut x, mut y, mut err) = (p.0, p.1, dx + dy);
        loop {
            self.put(x, y, c);
            if (x, y) == q {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }
}

/// Side-by-side rendering of A and B with one line per match, coloured from
/// red (lowest confidence) to green (highest).
pub fn render_matches(a: &Tensor<f32>, b: &Tensor<f32>, matches: &[FineMatch]) -> Result<Rgb> {
    let (_, ha, wa) = a.dims3()?;
    let (_, hb, wb) = b.dims3()?;
    let mut img = Rgb::new(wa + wb, ha.max(hb));
    for (t, off, w) in [(a, 0, wa), (b, wa, wb)] {
        for (k, &v) in t.data().iter().enumerate() {
            let g = to_byte(v);
            img.put((off + k % w) as i64, (k / w) as i64, [g, g, g]);
        }
    }
    let (lo, hi) = matches.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), m| (l.min(m.confidence), h.max(m.confidence)));
    for m in matches {
        let t = if hi > lo { (m.confidence - lo) / (hi - lo) } else { 1.0 };
        let c = [(255.0 * (1.0 - t)) as u8, (255.0 * t) as u8, 0];
        let p = (m.pt_a.0.round() as i64, m.pt_a.1.round() as i64);
        let q = ((m.pt_b.0 + wa as f32).round() as i64, m.pt_b.1.round() as i64);
        img.line(p, q, c);
    }
    Ok(img)
}

// ---- weight container ----

#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightContainer {
    pub meta: BTreeMap<String, String>,
    pub params: Params<f32>,
}

fn check_token(s: &str, what: &str) -> Result<()> {
    if s.is_empty() || s.chars().any(|c| c.is_whitespace()) {
        return Err(Error::Input(format!("{what} `{s}` must be non-empty without whitespace")));
    }
    Ok(())
}

/// Layout:
///
/// ```text
/// SDWC 1
/// meta <key> <value>          (zero or more)
/// tensors <count>
/// <name> f32 <d0>x<d1>... <byte offset> <byte length>
/// end
/// <payload: little-endian f32>
/// ```
pub fn encode_weights(wc: &WeightContainer) -> Result<Vec<u8>> {
    let mut head = format!("{CONTAINER_MAGIC}\n");
    for (k, v) in &wc.meta {
        check_token(k, "meta key")?;
        check_token(v, "meta value")?;
        writeln!(head, "meta {k} {v}").expect("string write");
    }
    writeln!(head, "tensors {}", wc.params.len()).expect("string write");
    let mut payload = Vec::with_capacity(wc.params.numel() * 4);
    for (name, t) in wc.params.iter() {
        check_token(name, "tensor name")?;
        if t.rank() == 0 {
            return Err(Error::Input(format!("tensor `{name}` has rank 0")));
        }
        let dims = t.shape().iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x");
        writeln!(head, "{name} f32 {dims} {} {}", payload.len(), t.numel() * 4).expect("string write");
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    head.push_str("end\n");
    let mut out = head.into_bytes();
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn decode_weights(bytes: &[u8], path: &Path) -> Result<WeightContainer> {
    let bad = |d: String| Error::format(path, d);
    let mut pos = 0;
    let mut next_line = || -> Result<&str> {
        let rest = &bytes[pos..];
        let n = rest.iter().position(|&c| c == b'\n').ok_or_else(|| bad("header ends early".into()))?;
        pos += n + 1;
        std::str::from_utf8(&rest[..n]).map_err(|_| bad("header is not UTF-8".into()))
    };
    if next_line()? != CONTAINER_MAGIC {
        return Err(bad("not a weight container (bad magic line)".into()));
    }
    let mut meta = BTreeMap::new();
    let count = loop {
        let line = next_line()?;
        let f: Vec<&str> = line.split(' ').collect();
        match f.as_slice() {
            ["meta", k, v] => {
                meta.insert(k.to_string(), v.to_string());
            }
            ["tensors", n] => break n.parse::<usize>().map_err(|_| bad(format!("bad tensor count `{n}`")))?,
            _ => return Err(bad(format!("unexpected header line `{line}`"))),
        }
    };
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let line = next_line()?;
        let f: Vec<&str> = line.split(' ').collect();
        let [name, dtype, dims, off, len] = f.as_slice() else {
            return Err(bad(format!("malformed tensor entry `{line}`")));
        };
        if *dtype != "f32" {
            return Err(bad(format!("tensor `{name}`: unsupported dtype `{dtype}`")));
        }
        let shape: Vec<usize> = dims.split('x').map(|d| d.parse()).collect::<std::result::Result<_, _>>().map_err(|_| bad(format!("tensor `{name}`: bad shape `{dims}`")))?;
        let off: usize = off.parse().map_err(|_| bad(format!("tensor `{name}`: bad offset")))?;
        let len: usize = len.parse().map_err(|_| bad(format!("tensor `{name}`: bad length")))?;
        if shape.iter().product::<usize>() * 4 != len {
            return Err(bad(format!("tensor `{name}`: length {len} does not match shape {shape:?}")));
        }
        entries.push((name.to_string(), shape, off, len));
    }
    if next_line()? != "end" {
        return Err(bad("missing `end` after tensor entries".into()));
    }
    let payload = &bytes[pos..];
    let mut spans: Vec<(usize, usize, &str)> = entries.iter().map(|(n, _, o, l)| (*o, *l, n.as_str())).collect();
    spans.sort();
    let mut end = 0;
    for &(o, l, n) in &spans {
        if o < end {
            return Err(bad(format!("tensor `{n}` overlaps the previous tensor")));
        }
        end = o.checked_add(l).filter(|&e| e <= payload.len()).ok_or_else(|| bad(format!("tensor `{n}` runs past the payload")))?;
    }
    let mut params = Params::new();
    for (name, shape, off, len) in entries {
        if params.contains(&name) {
            return Err(bad(format!("duplicate tensor `{name}`")));
        }
        let data = payload[off..off + len].chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        params.insert(name, Tensor::new(shape, data)?);
    }
    Ok(WeightContainer { meta, params })
}

pub fn save_weights(path: &Path, wc: &WeightContainer) -> Result<()> {
    write_atomic(path, &encode_weights(wc)?)
}

pub fn load_weights(path: &Path) -> Result<WeightContainer> {
    decode_weights(&read_bytes(path)?, path)
}

/// First 16 hex digits of the SHA-256 of a container's bytes.
pub fn model_hash(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().take(8).map(|b| format!("{b:02x}")).collect()
}

// ---- match dumps ----

#[derive(Clone, Debug, PartialEq)]
pub struct MatchDump {
    pub dims_a: (usize, usize),
    pub dims_b: (usize, usize),
    pub mode: MatchMode,
    pub model_hash: String,
    /// `(x_a, y_a, x_b, y_b, confidence)`.
    pub rows: Vec<[f32; 5]>,
}

impl MatchDump {
    pub fn new(dims_a: (usize, usize), dims_b: (usize, usize), mode: MatchMode, model_hash: String, matches: &[FineMatch]) -> Self {
        let rows = matches.iter().map(|m| [m.pt_a.0, m.pt_a.1, m.pt_b.0, m.pt_b.1, m.confidence]).collect();
        MatchDump { dims_a, dims_b, mode, model_hash, rows }
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("# schema_version={SCHEMA_VERSION}\n");
        writeln!(s, "# image_a={}x{}", self.dims_a.0, self.dims_a.1).expect("string write");
        writeln!(s, "# image_b={}x{}", self.dims_b.0, self.dims_b.1).expect("string write");
        writeln!(s, "# mode={}", self.mode).expect("string write");
        writeln!(s, "# model_hash={}", self.model_hash).expect("string write");
        s.push_str("x_a,y_a,x_b,y_b,confidence\n");
        for r in &self.rows {
            writeln!(s, "{},{},{},{},{}", r[0], r[1], r[2], r[3], r[4]).expect("string write");
        }
        s
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let bad = |d: String| Error::format(path, d);
        let mut header = BTreeMap::new();
        let mut rows = Vec::new();
        let mut saw_columns = false;
        for line in text.lines() {
            if let Some(c) = line.strip_prefix("# ") {
                let (k, v) = c.split_once('=').ok_or_else(|| bad(format!("bad header line `{line}`")))?;
                header.insert(k.to_string(), v.to_string());
            } else if line == "x_a,y_a,x_b,y_b,confidence" {
                saw_columns = true;
            } else if !line.is_empty() {
                let v: Vec<f32> = line.split(',').map(str::parse).collect::<std::result::Result<_, _>>().map_err(|_| bad(format!("bad row `{line}`")))?;
                rows.push(<[f32; 5]>::try_from(v).map_err(|_| bad(format!("row `{line}` needs five fields")))?);
            }
        }
        let get = |k: &str| header.get(k).ok_or_else(|| bad(format!("missing header `{k}`")));
        if get("schema_version")? != &SCHEMA_VERSION.to_string() || !saw_columns {
            return Err(bad("unsupported schema".into()));
        }
        let dims = |k: &str| -> Result<(usize, usize)> {
            let v = get(k)?;
            v.split_once('x').and_then(|(w, h)| Some((w.parse().ok()?, h.parse().ok()?))).ok_or_else(|| bad(format!("bad dims `{v}`")))
        };
        Ok(MatchDump {
            dims_a: dims("image_a")?,
            dims_b: dims("image_b")?,
            mode: get("mode")?.parse().map_err(|e: Error| bad(e.to_string()))?,
            model_hash: get("model_hash")?.clone(),
            rows,
        })
    }
}

// ---- loss curves ----

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub l_c: f64,
    pub l_f1: f64,
    pub l_f2: f64,
    pub total: f64,
}

pub fn loss_curve_csv(records: &[LossRecord]) -> String {
    let mut s = format!("# schema_version={SCHEMA_VERSION}\nstep,l_c,l_f1,l_f2,total\n");
    for r in records {
        writeln!(s, "{},{},{},{},{}", r.step, r.l_c, r.l_f1, r.l_f2, r.total).expect("string write");
    }
    s
}

pub fn parse_loss_curve(text: &str, path: &Path) -> Result<Vec<LossRecord>> {
    let bad = |d: String| Error::format(path, d);
    let mut lines = text.lines();
    if lines.next() != Some("# schema_version=1") || lines.next() != Some("step,l_c,l_f1,l_f2,total") {
        return Err(bad("not a loss curve".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let num = |i: usize| f.get(i).and_then(|v| v.parse::<f64>().ok()).ok_or_else(|| bad(format!("bad row `{l}`")));
            Ok(LossRecord {
                step: f[0].parse().map_err(|_| bad(format!("bad step in `{l}`")))?,
                l_c: num(1)?,
                l_f1: num(2)?,
                l_f2: num(3)?,
                total: num(4)?,
            })
        })
        .collect()
}

// ---- homographies and datasets ----

/// Three comma-separated rows; values print in shortest round-trip form.
pub fn homography_csv(h: &Homography) -> String {
    h.rows().iter().map(|r| format!("{},{},{}\n", r[0], r[1], r[2])).collect()
}

pub fn parse_homography_csv(text: &str, path: &Path) -> Result<Homography> {
    let bad = |d: String| Error::format(path, d);
    let mut rows = [[0.0; 3]; 3];
    let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#')).collect();
    if lines.len() != 3 {
        return Err(bad(format!("expected 3 rows, found {}", lines.len())));
    }
    for (r, line) in rows.iter_mut().zip(lines) {
        let v: Vec<f64> = line.split(',').map(|x| x.trim().parse()).collect::<std::result::Result<_, _>>().map_err(|_| bad(format!("bad row `{line}`")))?;
        *r = v.try_into().map_err(|_| bad(format!("row `{line}` needs three values")))?;
    }
    Homography::from_rows(rows).map_err(|e| bad(e.to_string()))
}

/// File names of the `index`-th pair in a dataset directory.
pub fn pair_paths(dir: &Path, index: usize) -> (PathBuf, PathBuf, PathBuf) {
    (dir.join(format!("{index:05}_a.pgm")), dir.join(format!("{index:05}_b.pgm")), dir.join(format!("{index:05}_H.csv")))
}

pub fn save_pair(dir: &Path, index: usize, a: &Tensor<f32>, b: &Tensor<f32>, h: &Homography) -> Result<()> {
    let (pa, pb, ph) = pair_paths(dir, index);
    save_pgm(&pa, a)?;
    save_pgm(&pb, b)?;
    write_atomic(&ph, homography_csv(h).as_bytes())
}

/// Loads every `NNNNN_a.pgm` / `NNNNN_b.pgm` / `NNNNN_H.csv` triple in `dir`, in index order.
pub fn load_dataset(dir: &Path) -> Result<Vec<SynthPair>> {
    let mut idx: Vec<usize> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().to_str()?.strip_suffix("_a.pgm")?.parse().ok())
        .collect();
    idx.sort_unstable();
    idx.iter()
        .map(|&i| {
            let (pa, pb, ph) = pair_paths(dir, i);
            let text = std::fs::read_to_string(&ph).map_err(|e| Error::io(&ph, e))?;
            Ok(SynthPair { a: load_image(&pa)?, b: load_image(&pb)?, h: parse_homography_csv(&text, &ph)? })
        })
        .collect()
}
