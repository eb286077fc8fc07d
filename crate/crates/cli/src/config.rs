//! Run configuration: defaults, then a `key=value` file, then command-line flags.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use elastic_warp::align::{AlignConfig, WarpMode};
use elastic_warp::warp::BlendMode;
use elastic_warp::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    /// Every field except the iteration counts, which may be swept.
    pub align: AlignConfig,
    /// Global-stage iteration counts; more than one value runs a sweep.
    pub iters_h: Vec<usize>,
    /// Local-stage iteration counts; more than one value runs a sweep.
    pub iters_t: Vec<usize>,
    pub blend: BlendMode,
    pub warp: WarpMode,
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub trace: Option<PathBuf>,
    pub timing: bool,
    pub verbosity: u8,
}

impl Default for Config {
    fn default() -> Self {
        let align = AlignConfig::default();
        Self {
            iters_h: vec![align.iters_h],
            iters_t: vec![align.iters_t],
            align,
            blend: BlendMode::Linear,
            warp: WarpMode::HomographyTps,
            seed: 0,
            out: None,
            trace: None,
            timing: false,
            verbosity: 0,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::InvalidArgument(format!("bad value '{value}' for '{key}'")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    let list: Vec<usize> = value.split(',').map(|v| parse(key, v)).collect::<Result<_>>()?;
    if list.is_empty() {
        return Err(Error::InvalidArgument(format!("'{key}' needs at least one value")));
    }
    Ok(list)
}

impl Config {
    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('-', "_");
        let a = &mut self.align;
        match key.as_str() {
            "iters_h" => self.iters_h = parse_list(&key, value)?,
            "iters_t" => self.iters_t = parse_list(&key, value)?,
            "alpha" => a.alpha = parse(&key, value)?,
            "lambda_local" => a.lambda_local = parse(&key, value)?,
            "max_step_h" => a.max_step_h = parse(&key, value)?,
            "max_step_t" => a.max_step_t = parse(&key, value)?,
            "pyramid_levels" => a.pyramid_levels = parse(&key, value)?,
            "grid" | "control_grid_n" => a.grid_n = parse(&key, value)?,
            "area_cap" => a.area_cap = parse(&key, value)?,
            "blend" | "blend_mode" => self.blend = value.trim().parse()?,
            "warp" => self.warp = value.trim().parse()?,
            "seed" => self.seed = parse(&key, value)?,
            "out" => self.out = Some(PathBuf::from(value.trim())),
            "trace" => self.trace = Some(PathBuf::from(value.trim())),
            "timing" => self.timing = parse(&key, value)?,
            "verbosity" => self.verbosity = parse(&key, value)?,
            _ => return Err(Error::InvalidArgument(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    /// Applies a flat `key=value` text; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (no, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("config line {}: expected key=value", no + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        self.apply_text(&text)
    }

    /// One alignment configuration per `(iters_h, iters_t)` pair, in sweep order.
    pub fn align_configs(&self) -> Result<Vec<AlignConfig>> {
        let mut out = Vec::new();
        for &k in &self.iters_h {
            for &n in &self.iters_t {
                let cfg = AlignConfig { iters_h: k, iters_t: n, ..self.align.clone() };
                cfg.validate()?;
                out.push(cfg);
            }
        }
        Ok(out)
    }

    /// The single configuration of a non-sweeping command.
    pub fn single(&self) -> Result<AlignConfig> {
        let mut all = self.align_configs()?;
        if all.len() != 1 {
            return Err(Error::InvalidArgument("iteration sweeps are only supported by eval".into()));
        }
        Ok(all.remove(0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_method() {
        let c = Config::default();
        assert_eq!((c.iters_h.clone(), c.iters_t.clone()), (vec![6], vec![3]));
        assert_eq!((c.align.alpha, c.align.grid_n, c.align.lambda_local, c.align.area_cap), (0.85, 12, 1.0, 16.0));
        assert_eq!(c.single().unwrap(), AlignConfig::default());
    }

    #[test]
    fn file_then_overrides() {
        let mut c = Config::default();
        c.apply_text("# comment\niters_h = 1,3,6\nalpha=0.5\n\nblend=average # trailing\nwarp=h\n").unwrap();
        assert_eq!(c.iters_h, vec![1, 3, 6]);
        assert_eq!(c.blend, BlendMode::Average);
        assert_eq!(c.warp, WarpMode::Homography);
        c.set("alpha", "0.9").unwrap();
        assert_eq!(c.align.alpha, 0.9);
        assert_eq!(c.align_configs().unwrap().len(), 3);
        assert!(c.single().is_err());
    }

    #[test]
    fn rejects_bad_input() {
        let mut c = Config::default();
        assert!(c.apply_text("nonsense").is_err());
        assert!(c.set("colour", "red").is_err());
        assert!(c.set("grid", "twelve").is_err());
        assert!(c.set("iters_h", "").is_err());
        c.set("alpha", "2").unwrap();
        assert!(c.align_configs().is_err());
    }
}
