//! Run configuration: every tunable of both training stages plus paths,
//! stored as `key = value` lines.

use std::fmt::{self, Write as _};
use std::path::PathBuf;
use std::str::FromStr;

use nf_core::gvo::GvoConfig;
use nf_core::ngl::NglConfig;

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum StageChoice {
    Coarse,
    #[default]
    Refined,
}

impl FromStr for StageChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "coarse" => Ok(StageChoice::Coarse),
            "refined" => Ok(StageChoice::Refined),
            other => Err(format!("unknown stage '{other}' (expected coarse or refined)")),
        }
    }
}

impl fmt::Display for StageChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StageChoice::Coarse => "coarse",
            StageChoice::Refined => "refined",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Preset {
    /// Budgets sized for a single CPU core.
    #[default]
    Desk,
    /// Full-size networks and budgets.
    Full,
}

impl FromStr for Preset {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "desk" => Ok(Preset::Desk),
            "full" => Ok(Preset::Full),
            other => Err(format!("unknown preset '{other}' (expected desk or full)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub input: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub ngl_checkpoint: Option<PathBuf>,
    pub gvo_checkpoint: Option<PathBuf>,
    pub stage: StageChoice,
    /// Neighbors of the plane-fit baseline.
    pub pca_k: usize,
    /// Graph degree of the orientation baseline.
    pub mst_k: usize,
    pub ngl: NglConfig,
    pub gvo: GvoConfig,
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        let (ngl, gvo) = match p {
            Preset::Desk => (NglConfig::desk(), GvoConfig::desk()),
            Preset::Full => (NglConfig::default(), GvoConfig::default()),
        };
        RunConfig {
            seed: 0,
            input: None,
            output_dir: PathBuf::from("out"),
            ngl_checkpoint: None,
            gvo_checkpoint: None,
            stage: StageChoice::Refined,
            pca_k: 24,
            mst_k: 12,
            ngl,
            gvo,
        }
    }

    /// Applies `key = value` lines on top of the current values. Blank lines
    /// and `#` comments are ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<(), CliError> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("config line {}: expected 'key = value'", n + 1)))?;
            self.set(key.trim(), value.trim())
                .map_err(|e| CliError::Usage(format!("config line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    #[cfg(test)]
    pub fn parse(text: &str, base: Preset) -> Result<Self, CliError> {
        let mut cfg = RunConfig::preset(base);
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T, String> {
            v.parse().map_err(|_| format!("bad value '{v}' for {key}"))
        }
        fn flag(key: &str, v: &str) -> Result<bool, String> {
            match v {
                "true" => Ok(true),
                "false" => Ok(false),
                _ => Err(format!("bad value '{v}' for {key} (expected true or false)")),
            }
        }
        fn path(v: &str) -> Option<PathBuf> {
            (!v.is_empty()).then(|| PathBuf::from(v))
        }
        fn core<T>(r: Result<T, nf_core::Error>) -> Result<T, String> {
            r.map_err(|e| e.to_string())
        }
        let ngl = &mut self.ngl;
        let gvo = &mut self.gvo;
        match key {
            "seed" => self.seed = num(key, value)?,
            "input" => self.input = path(value),
            "output_dir" => self.output_dir = PathBuf::from(value),
            "ngl_checkpoint" => self.ngl_checkpoint = path(value),
            "gvo_checkpoint" => self.gvo_checkpoint = path(value),
            "stage" => self.stage = value.parse()?,
            "pca_k" => self.pca_k = num(key, value)?,
            "mst_k" => self.mst_k = num(key, value)?,
            "ngl.k" => ngl.k = num(key, value)?,
            "ngl.batch" => ngl.batch = num(key, value)?,
            "ngl.iterations" => ngl.iterations = num(key, value)?,
            "ngl.loss" => ngl.loss = core(value.parse())?,
            "ngl.distance" => ngl.distance = core(value.parse())?,
            "ngl.sigma_rank" => ngl.sigma_rank = num(key, value)?,
            "ngl.sigma_floor" => ngl.sigma_floor = num(key, value)?,
            "ngl.width" => ngl.width = num(key, value)?,
            "ngl.init" => ngl.init = core(value.parse())?,
            "ngl.init_radius" => ngl.init_radius = num(key, value)?,
            "ngl.lr" => ngl.adam.lr = num(key, value)?,
            "ngl.beta1" => ngl.adam.beta1 = num(key, value)?,
            "ngl.beta2" => ngl.adam.beta2 = num(key, value)?,
            "ngl.eps" => ngl.adam.eps = num(key, value)?,
            "gvo.m" => gvo.m = num(key, value)?,
            "gvo.train_vectors" => gvo.train_vectors = num(key, value)?,
            "gvo.test_vectors" => gvo.test_vectors = num(key, value)?,
            "gvo.eta" => gvo.eta = num(key, value)?,
            "gvo.lambda" => gvo.lambda = num(key, value)?,
            "gvo.disable_score" => gvo.disable_score = flag(key, value)?,
            "gvo.disable_kernel_weight" => gvo.disable_kernel_weight = flag(key, value)?,
            "gvo.hemisphere_filter" => gvo.hemisphere_filter = flag(key, value)?,
            "gvo.widths" => gvo.widths = value.split(',').map(|w| num(key, w.trim())).collect::<Result<_, _>>()?,
            "gvo.head_width" => gvo.head_width = num(key, value)?,
            "gvo.epochs" => gvo.epochs = num(key, value)?,
            "gvo.patches_per_shape" => gvo.patches_per_shape = num(key, value)?,
            "gvo.batch" => gvo.batch = num(key, value)?,
            "gvo.lr" => gvo.adam.lr = num(key, value)?,
            "gvo.beta1" => gvo.adam.beta1 = num(key, value)?,
            "gvo.beta2" => gvo.adam.beta2 = num(key, value)?,
            "gvo.eps" => gvo.adam.eps = num(key, value)?,
            other => return Err(format!("unknown key '{other}'")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.ngl.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        self.gvo.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        if self.pca_k < 3 || self.mst_k == 0 {
            return Err(CliError::Usage("pca_k must be >= 3 and mst_k >= 1".into()));
        }
        Ok(())
    }
}

fn opt_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut s = String::new();
        let n = &self.ngl;
        let g = &self.gvo;
        let widths: Vec<String> = g.widths.iter().map(|w| w.to_string()).collect();
        let lines: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("input", opt_path(&self.input)),
            ("output_dir", self.output_dir.display().to_string()),
            ("ngl_checkpoint", opt_path(&self.ngl_checkpoint)),
            ("gvo_checkpoint", opt_path(&self.gvo_checkpoint)),
            ("stage", self.stage.to_string()),
            ("pca_k", self.pca_k.to_string()),
            ("mst_k", self.mst_k.to_string()),
            ("ngl.k", n.k.to_string()),
            ("ngl.batch", n.batch.to_string()),
            ("ngl.iterations", n.iterations.to_string()),
            ("ngl.loss", n.loss.to_string()),
            ("ngl.distance", n.distance.to_string()),
            ("ngl.sigma_rank", n.sigma_rank.to_string()),
            ("ngl.sigma_floor", n.sigma_floor.to_string()),
            ("ngl.width", n.width.to_string()),
            ("ngl.init", n.init.to_string()),
            ("ngl.init_radius", n.init_radius.to_string()),
            ("ngl.lr", n.adam.lr.to_string()),
            ("ngl.beta1", n.adam.beta1.to_string()),
            ("ngl.beta2", n.adam.beta2.to_string()),
            ("ngl.eps", n.adam.eps.to_string()),
            ("gvo.m", g.m.to_string()),
            ("gvo.train_vectors", g.train_vectors.to_string()),
            ("gvo.test_vectors", g.test_vectors.to_string()),
            ("gvo.eta", g.eta.to_string()),
            ("gvo.lambda", g.lambda.to_string()),
            ("gvo.disable_score", g.disable_score.to_string()),
            ("gvo.disable_kernel_weight", g.disable_kernel_weight.to_string()),
            ("gvo.hemisphere_filter", g.hemisphere_filter.to_string()),
            ("gvo.widths", widths.join(",")),
            ("gvo.head_width", g.head_width.to_string()),
            ("gvo.epochs", g.epochs.to_string()),
            ("gvo.patches_per_shape", g.patches_per_shape.to_string()),
            ("gvo.batch", g.batch.to_string()),
            ("gvo.lr", g.adam.lr.to_string()),
            ("gvo.beta1", g.adam.beta1.to_string()),
            ("gvo.beta2", g.adam.beta2.to_string()),
            ("gvo.eps", g.adam.eps.to_string()),
        ];
        for (k, v) in lines {
            let _ = writeln!(s, "{k} = {v}");
        }
        f.write_str(&s)
    }
}
