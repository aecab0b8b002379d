use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Reads a JSON config; schema errors name the offending field path.
pub fn read_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        anyhow::anyhow!("{}: field '{}': {}", path.display(), field, e.into_inner())
    })
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    read_config(path)
}

/// Output directory, created if missing. Records what was written.
pub struct OutDir {
    root: PathBuf,
    written: Vec<String>,
}

impl OutDir {
    pub fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).with_context(|| format!("cannot create {}", root.display()))?;
        Ok(Self { root: root.to_path_buf(), written: Vec::new() })
    }

    pub fn path(&mut self, name: &str) -> PathBuf {
        self.written.push(name.to_string());
        self.root.join(name)
    }

    pub fn file(&mut self, name: &str) -> Result<BufWriter<File>> {
        let p = self.path(name);
        let f = File::create(&p).with_context(|| format!("cannot create {}", p.display()))?;
        Ok(BufWriter::new(f))
    }

    pub fn json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut w = self.file(name)?;
        serde_json::to_writer_pretty(&mut w, value)?;
        writeln!(w)?;
        w.flush()?;
        Ok(())
    }

    /// Writes `run.json`: command, seed, inputs, configuration echo and the
    /// list of files produced. Thread count and timings are left out so the
    /// manifest is as reproducible as the outputs.
    pub fn finish(mut self, command: &str, seed: u64, inputs: BTreeMap<&str, String>, config: serde_json::Value) -> Result<()> {
        let manifest = serde_json::json!({
            "command": command,
            "tool": "tbcure",
            "version": env!("CARGO_PKG_VERSION"),
            "seed": seed,
            "inputs": inputs,
            "config": config,
            "outputs": self.written,
        });
        self.json("run.json", &manifest)
    }
}

pub fn parse_list(s: &str, what: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|t| {
            let v: f64 = t.trim().parse().with_context(|| format!("{what}: cannot parse '{t}'"))?;
            if !v.is_finite() {
                bail!("{what}: '{t}' is not finite");
            }
            Ok(v)
        })
        .collect()
}

pub fn parse_vec4(s: &str, what: &str) -> Result<nalgebra::Vector4<f64>> {
    let v = parse_list(s, what)?;
    if v.len() != 4 {
        bail!("{what} needs 4 comma-separated values, got {}", v.len());
    }
    Ok(nalgebra::Vector4::from_column_slice(&v))
}

/// `start,stop,step` into grid points, rounded to 1e-12 so that decimal
/// steps print cleanly.
pub fn parse_grid(s: &str) -> Result<Vec<f64>> {
    let v = parse_list(s, "grid")?;
    let [start, stop, step] = v[..] else {
        bail!("grid needs start,stop,step, got '{s}'");
    };
    if !(step > 0.0) || stop < start || start < 0.0 {
        bail!("grid needs 0 <= start <= stop and step > 0, got '{s}'");
    }
    let count = ((stop - start) / step + 1e-9).floor() as usize + 1;
    if count > 100_000 {
        bail!("grid '{s}' has {count} points; at most 100000 are allowed");
    }
    Ok((0..count)
        .map(|k| ((start + k as f64 * step) * 1e12).round() / 1e12)
        .collect())
}
