//! File formats: grid tensors (`HVGT`), run configs, dataset directories
//! and CSV exports of the mesh and window partitions.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::grid::{state_manifest, static_manifest, GridField, GridSpec};
use crate::healpix::MeshLevel;
use crate::model::ModelConfig;
use crate::training::{parse_phases, CurriculumPhase, Dataset, OptimizerConfig};
use crate::windowing::WindowPartition;

const GRID_MAGIC: &[u8; 4] = b"HVGT";
const GRID_VERSION: u32 = 1;

/// Header, manifest table (u32 length + UTF-8 per channel), then f32
/// little-endian values, channel-major, rows north to south.
pub fn write_grid_field<W: Write>(f: &GridField, mut w: W) -> Result<()> {
    let g = f.grid();
    let mut buf = Vec::with_capacity(20 + 4 * f.data().len());
    buf.extend_from_slice(GRID_MAGIC);
    for v in [GRID_VERSION, f.channels() as u32, g.n_lat() as u32, g.n_lon() as u32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for name in f.manifest() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
    }
    for &v in f.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}

pub fn read_grid_field<R: Read>(mut r: R, origin: &Path) -> Result<GridField> {
    let bad = |m: String| Error::Format {
        path: origin.to_path_buf(),
        message: m,
    };
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() < 20 || &bytes[..4] != GRID_MAGIC {
        return Err(bad("missing HVGT header".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    if u32_at(4) != GRID_VERSION as usize {
        return Err(bad(format!("unsupported grid tensor version {}", u32_at(4))));
    }
    let (channels, n_lat, n_lon) = (u32_at(8), u32_at(12), u32_at(16));
    let grid = GridSpec::new(n_lat, n_lon).map_err(|e| bad(e.to_string()))?;
    let mut pos = 20;
    let mut manifest = Vec::with_capacity(channels);
    for c in 0..channels {
        if pos + 4 > bytes.len() {
            return Err(bad(format!("truncated manifest at channel {c}")));
        }
        let len = u32_at(pos);
        pos += 4;
        if pos + len > bytes.len() {
            return Err(bad(format!("truncated manifest at channel {c}")));
        }
        let name = std::str::from_utf8(&bytes[pos..pos + len]).map_err(|_| bad("manifest is not UTF-8".into()))?;
        manifest.push(name.to_string());
        pos += len;
    }
    let n = channels * grid.num_nodes();
    if bytes.len() - pos != 4 * n {
        return Err(bad(format!(
            "payload has {} bytes, header implies {}",
            bytes.len() - pos,
            4 * n
        )));
    }
    let data = bytes[pos..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    GridField::new(grid, manifest, data).map_err(|e| bad(e.to_string()))
}

pub fn save_grid_field(f: &GridField, path: &Path) -> Result<()> {
    let file = fs::File::create(path)?;
    write_grid_field(f, std::io::BufWriter::new(file))
}

pub fn load_grid_field(path: &Path) -> Result<GridField> {
    let bytes = fs::read(path).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    read_grid_field(&bytes[..], path)
}

/// Sorted `*.gt` files in a directory.
pub fn grid_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::Format {
            path: dir.to_path_buf(),
            message: e.to_string(),
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "gt"))
        .collect();
    out.sort();
    Ok(out)
}

/// Writes `dir/statics.gt` and `dir/states/state_NNNN.gt`.
pub fn save_dataset(data: &Dataset, dir: &Path) -> Result<()> {
    let states = dir.join("states");
    fs::create_dir_all(&states)?;
    save_grid_field(&data.statics, &dir.join("statics.gt"))?;
    for (t, s) in data.states.iter().enumerate() {
        save_grid_field(s, &states.join(format!("state_{t:04}.gt")))?;
    }
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let statics = load_grid_field(&dir.join("statics.gt"))?;
    statics.expect_manifest(&static_manifest(), "statics.gt")?;
    let manifest = state_manifest();
    let states = grid_files(&dir.join("states"))?
        .iter()
        .map(|p| {
            let f = load_grid_field(p)?;
            f.expect_manifest(&manifest, &p.display().to_string())?;
            if f.grid() != statics.grid() {
                return Err(Error::InvalidGrid(format!(
                    "{} is on a {} grid, statics on {}",
                    p.display(),
                    f.grid(),
                    statics.grid()
                )));
            }
            f.check_finite(&p.display().to_string())?;
            Ok(f)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { states, statics })
}

/// One row per pixel: index, face, centre and the N, E, S, W corners.
pub fn mesh_csv(level: MeshLevel) -> String {
    let mut s = String::from("index,face,lat,lon,n_lat,n_lon,e_lat,e_lon,s_lat,s_lon,w_lat,w_lon\n");
    for p in level.pixels() {
        let c = p.center();
        let _ = write!(s, "{},{},{:.9},{:.9}", p.index(), p.face(), c.lat(), c.lon());
        for k in p.corners() {
            let _ = write!(s, ",{:.9},{:.9}", k.lat(), k.lon());
        }
        s.push('\n');
    }
    s
}

/// One row per pixel: window id and quadrant label (`-` under the global window).
pub fn windows_csv(p: &WindowPartition) -> String {
    let mut s = String::from("pixel,window,quadrant\n");
    for px in p.level().pixels() {
        let label = p.quadrant_label(px.index()).map_or('-', |q| q.label());
        let _ = writeln!(s, "{},{},{}", px.index(), p.window_of(px), label);
    }
    s
}

/// Everything a run needs besides data: model, optimizer, curriculum, seed and paths.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub optimizer: OptimizerConfig,
    pub peak_lr: f64,
    pub fine_tune_lr: f64,
    pub phases: Vec<CurriculumPhase>,
    pub warmup: usize,
    pub seed: u64,
    pub synth_length: usize,
    pub data_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub trace: Option<PathBuf>,
}

const KEYS: &[&str] = &[
    "grid",
    "fine_level",
    "window",
    "coarse_window",
    "latent",
    "processor_depth",
    "head_dim",
    "tie_edge_embeddings",
    "beta1",
    "beta2",
    "weight_decay",
    "epsilon",
    "peak_lr",
    "fine_tune_lr",
    "phases",
    "warmup",
    "seed",
    "synth_length",
    "data_dir",
    "checkpoint",
    "trace",
];

impl RunConfig {
    /// Desk defaults: 46x90 grid, n=3, C=16, four coarse blocks.
    pub fn desk() -> Self {
        RunConfig {
            model: ModelConfig::desk(),
            optimizer: OptimizerConfig::default(),
            peak_lr: 2.5e-3,
            fine_tune_lr: 2e-4,
            phases: desk_phases(2.5e-3, 2e-4),
            warmup: 50,
            seed: 0,
            synth_length: 160,
            data_dir: None,
            checkpoint: None,
            trace: None,
        }
    }

    /// `key = value` lines; `#` starts a comment; unknown keys are errors.
    /// Keys left out keep their desk defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut values: BTreeMap<&str, (usize, String)> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config {
                line: line_no,
                message: format!("expected `key = value`, got `{line}`"),
            })?;
            let k = k.trim();
            let key = KEYS.iter().find(|&&x| x == k).ok_or_else(|| Error::Config {
                line: line_no,
                message: format!("unknown key `{k}`"),
            })?;
            if values.insert(key, (line_no, v.trim().to_string())).is_some() {
                return Err(Error::Config {
                    line: line_no,
                    message: format!("key `{k}` given twice"),
                });
            }
        }

        let mut cfg = RunConfig::desk();
        let mut phases_given = false;
        for (key, (line, v)) in &values {
            let err = |m: String| Error::Config {
                line: *line,
                message: m,
            };
            let num = |what: &str| -> Result<f64> {
                v.parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| err(format!("`{what}` expects a number, got `{v}`")))
            };
            let int = |what: &str| -> Result<usize> {
                v.parse::<usize>()
                    .map_err(|_| err(format!("`{what}` expects a non-negative integer, got `{v}`")))
            };
            let small = |what: &str| -> Result<u8> {
                v.parse::<u8>()
                    .map_err(|_| err(format!("`{what}` expects a small integer, got `{v}`")))
            };
            match *key {
                "grid" => cfg.model.grid = v.parse().map_err(|e: Error| err(e.to_string()))?,
                "fine_level" => cfg.model.fine_level = small(key)?,
                "window" => cfg.model.window = small(key)?,
                "coarse_window" => cfg.model.coarse_window = small(key)?,
                "latent" => cfg.model.latent = int(key)?,
                "processor_depth" => cfg.model.processor_depth = int(key)?,
                "head_dim" => cfg.model.head_dim = int(key)?,
                "tie_edge_embeddings" => {
                    cfg.model.tie_edge_embeddings = v
                        .parse()
                        .map_err(|_| err(format!("`{key}` expects true or false, got `{v}`")))?
                }
                "beta1" => cfg.optimizer.beta1 = num(key)?,
                "beta2" => cfg.optimizer.beta2 = num(key)?,
                "weight_decay" => cfg.optimizer.weight_decay = num(key)?,
                "epsilon" => cfg.optimizer.epsilon = num(key)?,
                "peak_lr" => cfg.peak_lr = num(key)?,
                "fine_tune_lr" => cfg.fine_tune_lr = num(key)?,
                "phases" => {
                    cfg.phases = parse_phases(v).map_err(|e| err(e.to_string()))?;
                    phases_given = true;
                }
                "warmup" => cfg.warmup = int(key)?,
                "seed" => cfg.seed = v.parse().map_err(|_| err(format!("bad seed `{v}`")))?,
                "synth_length" => cfg.synth_length = int(key)?,
                "data_dir" => cfg.data_dir = Some(PathBuf::from(v)),
                "checkpoint" => cfg.checkpoint = Some(PathBuf::from(v)),
                "trace" => cfg.trace = Some(PathBuf::from(v)),
                _ => unreachable!("key list and match agree"),
            }
        }
        if !phases_given {
            cfg.phases = desk_phases(cfg.peak_lr, cfg.fine_tune_lr);
        }
        cfg.model.validate()?;
        cfg.optimizer.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        RunConfig::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let m = &self.model;
        let o = &self.optimizer;
        let mut s = String::new();
        let _ = writeln!(s, "grid = {}", m.grid);
        let _ = writeln!(s, "fine_level = {}", m.fine_level);
        let _ = writeln!(s, "window = {}", m.window);
        let _ = writeln!(s, "coarse_window = {}", m.coarse_window);
        let _ = writeln!(s, "latent = {}", m.latent);
        let _ = writeln!(s, "processor_depth = {}", m.processor_depth);
        let _ = writeln!(s, "head_dim = {}", m.head_dim);
        let _ = writeln!(s, "tie_edge_embeddings = {}", m.tie_edge_embeddings);
        let _ = writeln!(s, "beta1 = {:e}", o.beta1);
        let _ = writeln!(s, "beta2 = {:e}", o.beta2);
        let _ = writeln!(s, "weight_decay = {:e}", o.weight_decay);
        let _ = writeln!(s, "epsilon = {:e}", o.epsilon);
        let _ = writeln!(s, "peak_lr = {:e}", self.peak_lr);
        let _ = writeln!(s, "fine_tune_lr = {:e}", self.fine_tune_lr);
        let phases: Vec<String> = self.phases.iter().map(|p| p.to_string()).collect();
        let _ = writeln!(s, "phases = {}", phases.join(","));
        let _ = writeln!(s, "warmup = {}", self.warmup);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "synth_length = {}", self.synth_length);
        for (k, v) in [
            ("data_dir", &self.data_dir),
            ("checkpoint", &self.checkpoint),
            ("trace", &self.trace),
        ] {
            if let Some(p) = v {
                let _ = writeln!(s, "{k} = {}", p.display());
            }
        }
        s
    }
}

/// One-step cosine phase of 500 steps, then 50 steps each at 2, 3 and 4 steps.
pub fn desk_phases(peak: f64, fine_tune: f64) -> Vec<CurriculumPhase> {
    parse_phases(&format!(
        "1x500@cosine:{peak:e},2x50@fixed:{fine_tune:e},3x50@fixed:{fine_tune:e},4x50@fixed:{fine_tune:e}"
    ))
    .expect("valid")
}
