//! Flat `key = value` configuration.
//!
//! One assignment per line, `#` starts a comment, values may be quoted.
//! Every key must appear in [`CONFIG_KEYS`]; anything else is rejected.
//! Relative paths are resolved against the config file's directory.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::retrieval::DEFAULT_TAU;
use crate::train::TrainRun;

/// Every accepted key with a one-line description.
pub const CONFIG_KEYS: &[(&str, &str)] = &[
    ("seed", "initialization and shuffling seed"),
    ("epochs", "training epochs"),
    ("batch_size", "images per optimizer step"),
    ("learning_rate", "Adam step size"),
    ("beta1", "Adam first-moment decay"),
    ("beta2", "Adam second-moment decay"),
    ("epsilon", "Adam denominator offset"),
    ("checkpoint_every", "epochs between checkpoints, 0 for final only"),
    ("weight_cls", "classification loss weight"),
    ("weight_loc", "localization loss weight"),
    ("weight_div", "divergence loss weight"),
    ("input_height", "image height, multiple of 8"),
    ("input_width", "image width, multiple of 8"),
    ("channels", "backbone block widths, three comma-separated integers"),
    ("steps", "attention steps T"),
    ("hidden", "LSTM hidden size"),
    ("region_height", "sampled region height"),
    ("region_width", "sampled region width"),
    ("codewords", "texture codewords K"),
    ("classes", "label vocabulary size C"),
    ("tau", "recommendation score threshold"),
    ("k", "neighbors per query"),
    ("train_manifest", "training manifest path"),
    ("test_manifest", "evaluation manifest path"),
    ("checkpoint", "checkpoint path"),
    ("output_dir", "directory for training outputs"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub run: TrainRun,
    pub tau: f64,
    pub k: usize,
    pub train_manifest: Option<PathBuf>,
    pub test_manifest: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            run: TrainRun::default(),
            tau: DEFAULT_TAU,
            k: 20,
            train_manifest: None,
            test_manifest: None,
            checkpoint: None,
            output_dir: None,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn unquote(v: &str) -> &str {
    for q in ['"', '\''] {
        if v.len() >= 2 && v.starts_with(q) && v.ends_with(q) {
            return &v[1..v.len() - 1];
        }
    }
    v
}

/// Cuts the line at the first `#` outside quotes.
fn strip_comment(line: &str) -> &str {
    let mut quote = None;
    for (i, ch) in line.char_indices() {
        match (ch, quote) {
            ('"' | '\'', None) => quote = Some(ch),
            (c, Some(q)) if c == q => quote = None,
            ('#', None) => return &line[..i],
            _ => {}
        }
    }
    line
}

impl Config {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut c = Config::default();
        let r = &mut c.run;
        for (n, raw) in text.lines().enumerate() {
            let line = strip_comment(raw).trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let (key, v) = (key.trim(), unquote(value.trim()));
            let path = || Some(base_dir.join(v));
            match key {
                "seed" => r.seed = parse_num(key, v)?,
                "epochs" => r.epochs = parse_num(key, v)?,
                "batch_size" => r.optim.batch_size = parse_num(key, v)?,
                "learning_rate" => r.optim.learning_rate = parse_num(key, v)?,
                "beta1" => r.optim.beta1 = parse_num(key, v)?,
                "beta2" => r.optim.beta2 = parse_num(key, v)?,
                "epsilon" => r.optim.epsilon = parse_num(key, v)?,
                "checkpoint_every" => r.checkpoint_every = parse_num(key, v)?,
                "weight_cls" => r.weights.cls = parse_num(key, v)?,
                "weight_loc" => r.weights.loc = parse_num(key, v)?,
                "weight_div" => r.weights.div = parse_num(key, v)?,
                "input_height" => r.model.backbone.input_height = parse_num(key, v)?,
                "input_width" => r.model.backbone.input_width = parse_num(key, v)?,
                "channels" => {
                    let parts = v
                        .split(',')
                        .map(|s| parse_num::<usize>(key, s.trim()))
                        .collect::<Result<Vec<_>>>()?;
                    r.model.backbone.channels = parts
                        .try_into()
                        .map_err(|_| Error::Config("channels: expected three values".into()))?;
                }
                "steps" => r.model.attention.steps = parse_num(key, v)?,
                "hidden" => r.model.attention.hidden = parse_num(key, v)?,
                "region_height" => r.model.attention.region_height = parse_num(key, v)?,
                "region_width" => r.model.attention.region_width = parse_num(key, v)?,
                "codewords" => r.model.codewords = parse_num(key, v)?,
                "classes" => r.model.classes = parse_num(key, v)?,
                "tau" => c.tau = parse_num(key, v)?,
                "k" => c.k = parse_num(key, v)?,
                "train_manifest" => c.train_manifest = path(),
                "test_manifest" => c.test_manifest = path(),
                "checkpoint" => c.checkpoint = path(),
                "output_dir" => c.output_dir = path(),
                _ => return Err(Error::Config(format!("line {}: unknown key {key:?}", n + 1))),
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Config::parse(&text, base).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.run.validate()?;
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Config(format!("tau must lie in [0, 1], got {}", self.tau)));
        }
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        Ok(())
    }

    /// Serializes every non-path key; `parse(to_text())` restores the config.
    pub fn to_text(&self) -> String {
        let r = &self.run;
        let b = &r.model.backbone;
        let a = &r.model.attention;
        let mut lines = vec![
            format!("seed = {}", r.seed),
            format!("epochs = {}", r.epochs),
            format!("batch_size = {}", r.optim.batch_size),
            format!("learning_rate = {:e}", r.optim.learning_rate),
            format!("beta1 = {}", r.optim.beta1),
            format!("beta2 = {}", r.optim.beta2),
            format!("epsilon = {:e}", r.optim.epsilon),
            format!("checkpoint_every = {}", r.checkpoint_every),
            format!("weight_cls = {}", r.weights.cls),
            format!("weight_loc = {}", r.weights.loc),
            format!("weight_div = {}", r.weights.div),
            format!("input_height = {}", b.input_height),
            format!("input_width = {}", b.input_width),
            format!("channels = {},{},{}", b.channels[0], b.channels[1], b.channels[2]),
            format!("steps = {}", a.steps),
            format!("hidden = {}", a.hidden),
            format!("region_height = {}", a.region_height),
            format!("region_width = {}", a.region_width),
            format!("codewords = {}", r.model.codewords),
            format!("classes = {}", r.model.classes),
            format!("tau = {}", self.tau),
            format!("k = {}", self.k),
        ];
        for (key, p) in [
            ("train_manifest", &self.train_manifest),
            ("test_manifest", &self.test_manifest),
            ("checkpoint", &self.checkpoint),
            ("output_dir", &self.output_dir),
        ] {
            if let Some(p) = p {
                lines.push(format!("{key} = \"{}\"", p.display()));
            }
        }
        lines.join("\n") + "\n"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_reference_values() {
        let c = Config::parse("", Path::new(".")).unwrap();
        assert_eq!(c.run.optim.batch_size, 64);
        assert_eq!(c.run.optim.learning_rate, 1e-5);
        assert_eq!(c.run.epochs, 40);
        assert_eq!(c.run.model.codewords, 32);
        assert_eq!((c.run.weights.cls, c.run.weights.loc, c.run.weights.div), (1.0, 1.0, 0.01));
    }

    #[test]
    fn parses_comments_quotes_and_paths() {
        let text = "# header\nepochs = 3  # trailing\nchannels = 8, 16,16\ntrain_manifest = \"data/#1.jsonl\" # note\n";
        let c = Config::parse(text, Path::new("/base")).unwrap();
        assert_eq!(c.run.epochs, 3);
        assert_eq!(c.run.model.backbone.channels, [8, 16, 16]);
        assert_eq!(c.train_manifest, Some(PathBuf::from("/base/data/#1.jsonl")));
    }

    #[test]
    fn unknown_and_invalid_rejected() {
        let e = Config::parse("colour = red", Path::new(".")).unwrap_err().to_string();
        assert!(e.contains("colour"), "{e}");
        assert!(Config::parse("epochs = 0", Path::new(".")).is_err());
        assert!(Config::parse("epochs = many", Path::new(".")).is_err());
        assert!(Config::parse("channels = 1,2", Path::new(".")).is_err());
        assert!(Config::parse("justakey", Path::new(".")).is_err());
    }

    #[test]
    fn text_round_trip() {
        let mut c = Config::default();
        c.run.optim.learning_rate = 1e-3;
        c.run.model.classes = 4;
        c.tau = 0.25;
        assert_eq!(Config::parse(&c.to_text(), Path::new(".")).unwrap(), c);
    }

    #[test]
    fn every_key_is_accepted() {
        for (k, _) in CONFIG_KEYS {
            let v = match *k {
                "channels" => "8,16,16",
                "input_height" | "input_width" => "64",
                "learning_rate" | "beta1" | "beta2" | "epsilon" | "tau" => "0.5",
                k if k.ends_with("manifest") || k == "checkpoint" || k == "output_dir" => "x",
                _ => "2",
            };
            Config::parse(&format!("{k} = {v}"), Path::new(".")).unwrap();
        }
    }
}
