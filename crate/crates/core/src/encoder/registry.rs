use std::io::{BufRead, Write};

use indexmap::IndexMap;

use crate::error::{Error, Result};

/// Structural role of a parameter; the freeze policy is expressed in these terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Embedding,
    LayerNorm,
    Attention { layer: usize },
    FeedForward { layer: usize },
    Adapter { layer: usize },
    Head,
}

impl ParamGroup {
    /// Derives the group from a parameter name of the registry naming scheme.
    pub fn classify(name: &str) -> Option<Self> {
        if name.starts_with("head.") {
            return Some(ParamGroup::Head);
        }
        if let Some(rest) = name.strip_prefix("embeddings.") {
            return Some(if rest.starts_with("norm.") {
                ParamGroup::LayerNorm
            } else {
                ParamGroup::Embedding
            });
        }
        let rest = name.strip_prefix("layer.")?;
        let (index, tail) = rest.split_once('.')?;
        let layer: usize = index.parse().ok()?;
        if tail.contains("norm.") {
            Some(ParamGroup::LayerNorm)
        } else if tail.contains("adapter.") {
            Some(ParamGroup::Adapter { layer })
        } else if tail.starts_with("attention.") {
            Some(ParamGroup::Attention { layer })
        } else if tail.starts_with("ffn.") {
            Some(ParamGroup::FeedForward { layer })
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub shape: Vec<usize>,
    /// Row-major values; empty in a shape-only registry.
    pub values: Vec<f64>,
    pub trainable: bool,
    pub group: ParamGroup,
}

impl Parameter {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Named parameters in insertion order, each with a trainable flag.
///
/// A registry is either materialized (every entry holds its values) or
/// shape-only, which is enough for all counting queries at any scale.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterRegistry {
    entries: IndexMap<String, Parameter>,
    materialized: bool,
}

/// Answer to "how many parameters, and which ones train?".
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainableSummary {
    pub trainable_names: Vec<String>,
    pub total_count: u64,
    pub trainable_count: u64,
}

impl TrainableSummary {
    pub fn frozen_count(&self) -> u64 {
        self.total_count - self.trainable_count
    }
}

impl ParameterRegistry {
    pub fn new() -> Self {
        Self {
            entries: IndexMap::new(),
            materialized: true,
        }
    }

    pub fn shape_only() -> Self {
        Self {
            entries: IndexMap::new(),
            materialized: false,
        }
    }

    pub fn is_materialized(&self) -> bool {
        self.materialized
    }

    /// Adds a trainable parameter; `values` must be empty iff the registry is shape-only.
    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) -> Result<()> {
        let name = name.into();
        let group = ParamGroup::classify(&name)
            .ok_or_else(|| Error::Config(format!("parameter name `{name}` does not follow the naming scheme")))?;
        let numel: usize = shape.iter().product();
        let expected = if self.materialized { numel } else { 0 };
        if values.len() != expected || shape.is_empty() || numel == 0 {
            return Err(Error::Config(format!(
                "parameter `{name}` with shape {shape:?} got {} values",
                values.len()
            )));
        }
        if self.entries.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        self.entries.insert(
            name,
            Parameter {
                shape,
                values,
                trainable: true,
                group,
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Parameter> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Parameter> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Parameter)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Parameter)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn total_count(&self) -> u64 {
        self.entries.values().map(|p| p.numel() as u64).sum()
    }

    pub fn trainable_count(&self) -> u64 {
        self.entries
            .values()
            .filter(|p| p.trainable)
            .map(|p| p.numel() as u64)
            .sum()
    }

    pub fn frozen_count(&self) -> u64 {
        self.total_count() - self.trainable_count()
    }

    pub fn count_group(&self, pred: impl Fn(ParamGroup) -> bool) -> u64 {
        self.entries
            .values()
            .filter(|p| pred(p.group))
            .map(|p| p.numel() as u64)
            .sum()
    }

    pub fn trainable_parameters(&self) -> TrainableSummary {
        TrainableSummary {
            trainable_names: self
                .entries
                .iter()
                .filter(|(_, p)| p.trainable)
                .map(|(n, _)| n.clone())
                .collect(),
            total_count: self.total_count(),
            trainable_count: self.trainable_count(),
        }
    }

    /// Exact fingerprint of every frozen value, for before/after comparisons.
    pub fn frozen_fingerprint(&self) -> Vec<(String, Vec<u64>)> {
        self.entries
            .iter()
            .filter(|(_, p)| !p.trainable)
            .map(|(n, p)| (n.clone(), p.values.iter().map(|v| v.to_bits()).collect()))
            .collect()
    }

    /// Writes one line per parameter: `name dims trainable values...`.
    ///
    /// `dims` joins the shape with `x`; `trainable` is `1` or `0`; values
    /// are shortest round-trip decimals, so reading back is exact.
    pub fn write_text(&self, mut out: impl Write) -> Result<()> {
        if !self.materialized {
            return Err(Error::Unmaterialized("<registry>".into()));
        }
        for (name, p) in &self.entries {
            let dims: Vec<String> = p.shape.iter().map(usize::to_string).collect();
            write!(out, "{name} {} {}", dims.join("x"), u8::from(p.trainable))?;
            for v in &p.values {
                write!(out, " {v}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }

    pub fn read_text(input: impl BufRead) -> Result<Self> {
        let mut reg = Self::new();
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            let lineno = i + 1;
            let err = |message: String| Error::Parse { line: lineno, message };
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split_ascii_whitespace();
            let name = fields.next().ok_or_else(|| err("missing name".into()))?;
            let dims = fields.next().ok_or_else(|| err("missing shape".into()))?;
            let shape = dims
                .split('x')
                .map(|d| d.parse::<usize>().map_err(|e| err(format!("bad dimension `{d}`: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            let trainable = match fields.next() {
                Some("1") => true,
                Some("0") => false,
                other => return Err(err(format!("bad trainable flag {other:?}"))),
            };
            let values = fields
                .map(|v| v.parse::<f64>().map_err(|e| err(format!("bad value `{v}`: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            reg.insert(name, shape, values).map_err(|e| err(e.to_string()))?;
            reg.get_mut(name)?.trainable = trainable;
        }
        Ok(reg)
    }
}

impl Default for ParameterRegistry {
    fn default() -> Self {
        Self::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classify_names() {
        use ParamGroup::*;
        let cases = [
            ("embeddings.word", Embedding),
            ("embeddings.norm.gain", LayerNorm),
            ("layer.3.attention.query.weight", Attention { layer: 3 }),
            ("layer.3.attention.norm.bias", LayerNorm),
            ("layer.0.attention.adapter.up.weight", Adapter { layer: 0 }),
            ("layer.11.ffn.output.bias", FeedForward { layer: 11 }),
            ("layer.11.ffn.adapter.down.bias", Adapter { layer: 11 }),
            ("head.span.weight", Head),
        ];
        for (name, group) in cases {
            assert_eq!(ParamGroup::classify(name), Some(group), "{name}");
        }
        assert_eq!(ParamGroup::classify("layer.x.ffn.output.bias"), None);
        assert_eq!(ParamGroup::classify("pooler.dense.weight"), None);
    }

    #[test]
    fn insert_validates() {
        let mut r = ParameterRegistry::new();
        r.insert("head.span.bias", vec![2], vec![0.0, 0.0]).unwrap();
        assert!(r.insert("head.span.bias", vec![2], vec![0.0, 0.0]).is_err());
        assert!(r.insert("head.span.weight", vec![2, 2], vec![0.0]).is_err());
        assert!(r.insert("bogus", vec![1], vec![0.0]).is_err());
        let mut s = ParameterRegistry::shape_only();
        s.insert("head.span.weight", vec![768, 2], vec![]).unwrap();
        assert_eq!(s.total_count(), 1536);
    }

    #[test]
    fn counts_partition() {
        let mut r = ParameterRegistry::new();
        r.insert("embeddings.word", vec![3, 2], vec![0.0; 6]).unwrap();
        r.insert("head.span.bias", vec![2], vec![0.0; 2]).unwrap();
        assert_eq!(r.trainable_count(), r.total_count());
        r.get_mut("embeddings.word").unwrap().trainable = false;
        let s = r.trainable_parameters();
        assert_eq!(s.trainable_names, vec!["head.span.bias"]);
        assert_eq!(s.trainable_count + s.frozen_count(), s.total_count);
        assert_eq!(r.frozen_count(), 6);
    }

    #[test]
    fn text_roundtrip_is_exact() {
        let mut r = ParameterRegistry::new();
        r.insert("embeddings.word", vec![2, 2], vec![0.1, -1e-300, 1.0 / 3.0, 12345.678])
            .unwrap();
        r.insert("head.span.bias", vec![2], vec![0.0, -0.0]).unwrap();
        r.get_mut("embeddings.word").unwrap().trainable = false;
        let mut buf = Vec::new();
        r.write_text(&mut buf).unwrap();
        let back = ParameterRegistry::read_text(buf.as_slice()).unwrap();
        assert_eq!(back, r);
        assert_eq!(back.frozen_fingerprint(), r.frozen_fingerprint());
    }

    #[test]
    fn read_reports_line_numbers() {
        let text = "head.span.bias 2 1 0 0\nhead.span.weight 2x2 maybe 0 0 0 0\n";
        match ParameterRegistry::read_text(text.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }
}
