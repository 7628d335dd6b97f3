use crate::error::{Error, Result};
use crate::lif::LifParams;
use crate::tsbn::{WindowPolicy, DEFAULT_EPS, DEFAULT_MOMENTUM};

/// Architecture and neuron settings. Serialized as `key=value` lines.
#[derive(Clone, Debug, PartialEq)]
pub struct RtformerConfig {
    pub steps: usize,
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub window: usize,
    pub window_policy: WindowPolicy,
    pub seed: u64,
    pub dataset: String,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub mlp_ratio: usize,
    pub encoder_stride: usize,
    pub attn_scale: f64,
    /// Threshold of the LIF layer after attention.
    pub attn_v_th: f64,
    /// Threshold of the stateless spike units behind fold-eligible norms.
    pub fold_v_th: f64,
    pub lif: LifParams,
    pub tsbn_momentum: f64,
    pub tsbn_eps: f64,
}

impl Default for RtformerConfig {
    fn default() -> Self {
        RtformerConfig {
            steps: 4,
            depth: 2,
            dim: 64,
            heads: 4,
            window: 2,
            window_policy: WindowPolicy::Shifted,
            seed: 0,
            dataset: "toy-events".into(),
            in_channels: 2,
            height: 16,
            width: 16,
            classes: 4,
            mlp_ratio: 2,
            encoder_stride: 2,
            attn_scale: 0.125,
            attn_v_th: 0.5,
            fold_v_th: 1.0,
            lif: LifParams::default(),
            tsbn_momentum: DEFAULT_MOMENTUM,
            tsbn_eps: DEFAULT_EPS,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
}

impl RtformerConfig {
    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn hidden(&self) -> usize {
        self.dim * self.mlp_ratio
    }

    /// Token grid after the encoder.
    pub fn token_grid(&self) -> (usize, usize) {
        let k = 3;
        (
            crate::tensor::ops::conv_out_extent(self.height, k, self.encoder_stride),
            crate::tensor::ops::conv_out_extent(self.width, k, self.encoder_stride),
        )
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.steps == 0 {
            return fail("steps must be >= 1".into());
        }
        if self.window == 0 || self.window > self.steps {
            return fail(format!(
                "window {} must satisfy 1 <= w <= steps = {}",
                self.window, self.steps
            ));
        }
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return fail(format!(
                "dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            ));
        }
        if self.in_channels == 0 || self.height == 0 || self.width == 0 {
            return fail("input extents must be positive".into());
        }
        if self.classes == 0 || self.mlp_ratio == 0 {
            return fail("classes and mlp_ratio must be positive".into());
        }
        if self.encoder_stride != 1 && self.encoder_stride != 2 {
            return fail(format!("encoder_stride must be 1 or 2, got {}", self.encoder_stride));
        }
        if !(self.attn_scale.is_finite() && self.attn_scale > 0.0) {
            return fail("attn_scale must be positive".into());
        }
        if !(self.attn_v_th.is_finite() && self.fold_v_th.is_finite()) {
            return fail("thresholds must be finite".into());
        }
        if !(self.tsbn_momentum > 0.0 && self.tsbn_momentum <= 1.0) {
            return fail("tsbn_momentum must lie in (0, 1]".into());
        }
        if !(self.tsbn_eps > 0.0 && self.tsbn_eps.is_finite()) {
            return fail("tsbn_eps must be positive".into());
        }
        self.lif.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.lif
            .with_threshold(self.attn_v_th)
            .validate()
            .map_err(|e| Error::Config(format!("attn_v_th: {e}")))
    }

    /// Set one key. Returns `Ok(false)` for keys this struct does not own.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "steps" | "T" => self.steps = parse(key, value)?,
            "depth" => self.depth = parse(key, value)?,
            "dim" => self.dim = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "window" | "w" => self.window = parse(key, value)?,
            "window_policy" => {
                self.window_policy = WindowPolicy::parse(value.trim()).map_err(|e| Error::Config(e.to_string()))?
            }
            "seed" => self.seed = parse(key, value)?,
            "dataset" => self.dataset = value.trim().to_string(),
            "in_channels" => self.in_channels = parse(key, value)?,
            "height" => self.height = parse(key, value)?,
            "width" => self.width = parse(key, value)?,
            "classes" => self.classes = parse(key, value)?,
            "mlp_ratio" => self.mlp_ratio = parse(key, value)?,
            "encoder_stride" => self.encoder_stride = parse(key, value)?,
            "attn_scale" => self.attn_scale = parse(key, value)?,
            "attn_v_th" => self.attn_v_th = parse(key, value)?,
            "fold_v_th" => self.fold_v_th = parse(key, value)?,
            "k_tau" => self.lif.k_tau = parse(key, value)?,
            "v_th" => self.lif.v_th = parse(key, value)?,
            "v_reset" => self.lif.v_reset = parse(key, value)?,
            "surrogate_alpha" => self.lif.surrogate_alpha = parse(key, value)?,
            "tsbn_momentum" => self.tsbn_momentum = parse(key, value)?,
            "tsbn_eps" => self.tsbn_eps = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Deterministic `key=value` pairs; feeding them back through
    /// [`apply`](Self::apply) reproduces the config.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let p = |k: &str, v: String| (k.to_string(), v);
        vec![
            p("steps", self.steps.to_string()),
            p("depth", self.depth.to_string()),
            p("dim", self.dim.to_string()),
            p("heads", self.heads.to_string()),
            p("window", self.window.to_string()),
            p("window_policy", self.window_policy.as_str().to_string()),
            p("seed", self.seed.to_string()),
            p("dataset", self.dataset.clone()),
            p("in_channels", self.in_channels.to_string()),
            p("height", self.height.to_string()),
            p("width", self.width.to_string()),
            p("classes", self.classes.to_string()),
            p("mlp_ratio", self.mlp_ratio.to_string()),
            p("encoder_stride", self.encoder_stride.to_string()),
            p("attn_scale", self.attn_scale.to_string()),
            p("attn_v_th", self.attn_v_th.to_string()),
            p("fold_v_th", self.fold_v_th.to_string()),
            p("k_tau", self.lif.k_tau.to_string()),
            p("v_th", self.lif.v_th.to_string()),
            p("v_reset", self.lif.v_reset.to_string()),
            p("surrogate_alpha", self.lif.surrogate_alpha.to_string()),
            p("tsbn_momentum", self.tsbn_momentum.to_string()),
            p("tsbn_eps", self.tsbn_eps.to_string()),
        ]
    }

    /// Build from pairs, rejecting unknown keys.
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut c = RtformerConfig::default();
        for (k, v) in pairs {
            if !c.apply(k, v)? {
                return Err(Error::Config(format!("unknown key `{k}`")));
            }
        }
        c.validate()?;
        Ok(c)
    }
}

/// Split `key=value` text into pairs. Blank lines and `#` comments are
/// skipped.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "line {}: expected key=value, got `{line}`",
                i + 1
            )));
        };
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}
