//! Shared plumbing: seed derivation, float formatting, and delimited-text output.

use std::io::{self, Write};

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

/// Salt namespace for per-purpose random streams. Values are arbitrary but
/// frozen: changing them changes every generated dataset.
pub mod salt {
    pub const UNIT: u64 = 0x01;
    pub const OBS_TIMES: u64 = 0x02;
    pub const TREATMENT: u64 = 0x03;
    pub const NOISE: u64 = 0x04;
    pub const PATH: u64 = 0x05;
    pub const SHUFFLE: u64 = 0x06;
    pub const VALIDATION: u64 = 0x07;
    pub const INIT: u64 = 0x08;
    pub const TRIM: u64 = 0x09;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a master seed with a list of salts into a single 64-bit seed.
/// Pure integer arithmetic, so identical on every platform.
pub fn derive_seed(master: u64, salts: &[u64]) -> u64 {
    let mut state = splitmix64(master ^ 0xA076_1D64_78BD_642F);
    for &s in salts {
        state = splitmix64(state ^ splitmix64(s));
    }
    state
}

/// Independent random stream for (master, salts). Every stochastic draw in
/// the workspace goes through here so that reruns are bit-identical.
pub fn rng_from(master: u64, salts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, salts))
}

/// Formats a float with 17 significant digits, enough to reconstruct the
/// exact f64 bit pattern on parse.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

struct SigDigitFormatter;

impl serde_json::ser::Formatter for SigDigitFormatter {
    fn write_f64<W>(&mut self, writer: &mut W, value: f64) -> io::Result<()>
    where
        W: ?Sized + Write,
    {
        write!(writer, "{value:.16e}")
    }
}

/// Serializes to JSON with all floats at 17 significant digits and object
/// keys sorted, so equal values produce byte-identical text.
pub fn to_json_string<T: Serialize>(value: &T) -> serde_json::Result<String> {
    // Round-trip through Value to get sorted map keys regardless of how the
    // source struct orders its fields' nested maps.
    let value = serde_json::to_value(value)?;
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, SigDigitFormatter);
    value.serialize(&mut ser)?;
    Ok(String::from_utf8(out).expect("serde_json emits utf8"))
}

/// Writer for the delimited-text tables emitted by evaluation commands:
/// optional `#`-prefixed metadata lines, one header row, then data rows.
pub struct Table {
    columns: Vec<String>,
    comments: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(columns: &[&str]) -> Self {
        Table {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            comments: Vec::new(),
            rows: Vec::new(),
        }
    }

    pub fn comment(&mut self, text: &str) {
        self.comments.push(text.to_string());
    }

    pub fn row(&mut self, cells: Vec<String>) {
        assert_eq!(cells.len(), self.columns.len(), "row width != header width");
        self.rows.push(cells);
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in &self.comments {
            out.push_str("# ");
            out.push_str(c);
            out.push('\n');
        }
        out.push_str(&self.columns.join("\t"));
        out.push('\n');
        for r in &self.rows {
            out.push_str(&r.join("\t"));
            out.push('\n');
        }
        out
    }

    pub fn write_to(&self, path: &std::path::Path) -> io::Result<()> {
        std::fs::write(path, self.render())
    }
}

/// Cell helper: floats at full precision.
pub fn cell(v: f64) -> String {
    fmt_f64(v)
}

/// Sample mean.
pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation with the n-1 denominator; 0 for n < 2.
pub fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    let ss: f64 = xs.iter().map(|x| (x - m) * (x - m)).sum();
    (ss / (xs.len() - 1) as f64).sqrt()
}
