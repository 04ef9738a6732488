use std::collections::BTreeMap;
use std::str::FromStr;

use super::layers::{decoder_block_params, encoder_block_params};
use super::ModelError;

/// Shared shape of a transformer encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    pub max_len: usize,
    pub dropout: f64,
}

impl EncoderConfig {
    pub fn new(vocab_size: usize) -> Self {
        Self { vocab_size, d_model: 64, num_layers: 2, num_heads: 4, ff_dim: 128, max_len: 64, dropout: 0.1 }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        check_common(self.vocab_size, self.d_model, self.num_heads, self.ff_dim, self.max_len, self.dropout)?;
        if self.max_len < 3 {
            return Err(ModelError::InvalidConfig("max_len must leave room for CLS and SEP".into()));
        }
        Ok(())
    }

    /// Embeddings, blocks and final norm.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        self.vocab_size * d + self.max_len * d + self.num_layers * encoder_block_params(d, self.ff_dim) + 2 * d
    }

    pub(crate) fn write_fields(&self, out: &mut Fields) {
        out.set("vocab_size", self.vocab_size);
        out.set("d_model", self.d_model);
        out.set("num_layers", self.num_layers);
        out.set("num_heads", self.num_heads);
        out.set("ff_dim", self.ff_dim);
        out.set("max_len", self.max_len);
        out.set("dropout", self.dropout);
    }

    pub(crate) fn read_fields(f: &Fields) -> Result<Self, ModelError> {
        let c = Self {
            vocab_size: f.get("vocab_size")?,
            d_model: f.get("d_model")?,
            num_layers: f.get("num_layers")?,
            num_heads: f.get("num_heads")?,
            ff_dim: f.get("ff_dim")?,
            max_len: f.get("max_len")?,
            dropout: f.get("dropout")?,
        };
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderClassifierConfig {
    pub encoder: EncoderConfig,
    pub num_classes: usize,
}

impl EncoderClassifierConfig {
    pub fn new(vocab_size: usize, num_classes: usize) -> Self {
        Self { encoder: EncoderConfig::new(vocab_size), num_classes }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.encoder.validate()?;
        if self.num_classes < 2 {
            return Err(ModelError::InvalidConfig("num_classes must be at least 2".into()));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.encoder.param_count() + self.encoder.d_model * self.num_classes + self.num_classes
    }

    pub fn to_text(&self) -> String {
        let mut f = Fields::default();
        self.encoder.write_fields(&mut f);
        f.set("num_classes", self.num_classes);
        f.to_text()
    }

    pub fn from_text(text: &str) -> Result<Self, ModelError> {
        let f = Fields::parse(text)?;
        let c = Self { encoder: EncoderConfig::read_fields(&f)?, num_classes: f.get("num_classes")? };
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Seq2SeqConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    pub max_len: usize,
    pub dropout: f64,
}

impl Seq2SeqConfig {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 64,
            encoder_layers: 2,
            decoder_layers: 2,
            num_heads: 4,
            ff_dim: 128,
            max_len: 64,
            dropout: 0.1,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        check_common(self.vocab_size, self.d_model, self.num_heads, self.ff_dim, self.max_len, self.dropout)?;
        if self.max_len < 2 {
            return Err(ModelError::InvalidConfig("max_len must be at least 2".into()));
        }
        Ok(())
    }

    /// Tied embedding, output bias, two position tables, both stacks and their final norms.
    pub fn param_count(&self) -> usize {
        let (d, f) = (self.d_model, self.ff_dim);
        self.vocab_size * d
            + self.vocab_size
            + 2 * self.max_len * d
            + self.encoder_layers * encoder_block_params(d, f)
            + 2 * d
            + self.decoder_layers * decoder_block_params(d, f)
            + 2 * d
    }

    pub fn to_text(&self) -> String {
        let mut f = Fields::default();
        f.set("vocab_size", self.vocab_size);
        f.set("d_model", self.d_model);
        f.set("encoder_layers", self.encoder_layers);
        f.set("decoder_layers", self.decoder_layers);
        f.set("num_heads", self.num_heads);
        f.set("ff_dim", self.ff_dim);
        f.set("max_len", self.max_len);
        f.set("dropout", self.dropout);
        f.to_text()
    }

    pub fn from_text(text: &str) -> Result<Self, ModelError> {
        let f = Fields::parse(text)?;
        let c = Self {
            vocab_size: f.get("vocab_size")?,
            d_model: f.get("d_model")?,
            encoder_layers: f.get("encoder_layers")?,
            decoder_layers: f.get("decoder_layers")?,
            num_heads: f.get("num_heads")?,
            ff_dim: f.get("ff_dim")?,
            max_len: f.get("max_len")?,
            dropout: f.get("dropout")?,
        };
        c.validate()?;
        Ok(c)
    }
}

fn check_common(vocab: usize, d: usize, heads: usize, ff: usize, max_len: usize, dropout: f64) -> Result<(), ModelError> {
    let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
    if vocab == 0 || d == 0 || heads == 0 || ff == 0 || max_len == 0 {
        return bad("dimensions must be positive");
    }
    if d % heads != 0 {
        return bad("d_model must be divisible by num_heads");
    }
    if !(0.0..1.0).contains(&dropout) {
        return bad("dropout must lie in [0, 1)");
    }
    Ok(())
}

/// Ordered `key = value` lines.
#[derive(Debug, Clone, Default, PartialEq)]
pub(crate) struct Fields(BTreeMap<String, String>);

impl Fields {
    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.0.insert(key.to_string(), value.to_string());
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, ModelError> {
        let raw = self.0.get(key).ok_or_else(|| ModelError::InvalidConfig(format!("missing field {key}")))?;
        raw.parse().map_err(|_| ModelError::InvalidConfig(format!("field {key}: cannot parse {raw:?}")))
    }

    pub fn to_text(&self) -> String {
        self.0.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn parse(text: &str) -> Result<Self, ModelError> {
        let mut out = Self::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| ModelError::InvalidConfig(format!("bad config line {line:?}")))?;
            out.set(k.trim(), v.trim());
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_text_round_trips() {
        let c = EncoderClassifierConfig::new(80, 2);
        assert_eq!(EncoderClassifierConfig::from_text(&c.to_text()).unwrap(), c);
        let s = Seq2SeqConfig { dropout: 0.25, ..Seq2SeqConfig::new(50) };
        assert_eq!(Seq2SeqConfig::from_text(&s.to_text()).unwrap(), s);
    }

    #[test]
    fn heads_must_divide_width() {
        let mut c = EncoderClassifierConfig::new(10, 2);
        c.encoder.num_heads = 5;
        assert!(c.validate().is_err());
    }
}
