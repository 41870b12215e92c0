//! Two-layer category hierarchy and the canonical one-hot label encoding.
//!
//! Label indices are file positions: the i-th entry of `sub_categories` has
//! label index i. Nothing is sorted.

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubCategory {
    pub name: String,
    pub parent: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ontology {
    pub main_categories: Vec<String>,
    pub sub_categories: Vec<SubCategory>,
    #[serde(default)]
    pub version: String,
}

/// Which layer of the hierarchy feeds the one-hot encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LabelLayer {
    Sub,
    Main,
}

/// Raw file form, so we can report which field/entry is wrong before the
/// structural checks run. `parent` is signed so negative indices are caught
/// as dangling rather than as a type error.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOntology {
    main_categories: Vec<String>,
    sub_categories: Vec<RawSub>,
    #[serde(default)]
    version: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSub {
    name: String,
    parent: serde_json::Value,
}

impl Ontology {
    /// Builds and validates an ontology from (name, parent) pairs.
    pub fn new(mains: &[&str], subs: &[(&str, usize)]) -> Result<Ontology> {
        let o = Ontology {
            main_categories: mains.iter().map(|s| s.to_string()).collect(),
            sub_categories: subs
                .iter()
                .map(|(n, p)| SubCategory { name: n.to_string(), parent: *p })
                .collect(),
            version: String::new(),
        };
        o.validate()?;
        Ok(o)
    }

    pub fn load(path: &Path) -> Result<Ontology> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ontology::from_json(&text).map_err(|e| match e {
            Error::Ontology(msg) => Error::Ontology(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn from_json(text: &str) -> Result<Ontology> {
        let raw: RawOntology = serde_json::from_str(text).map_err(|e| {
            Error::Ontology(format!("parse error at line {} column {}: {e}", e.line(), e.column()))
        })?;
        let mut subs = Vec::with_capacity(raw.sub_categories.len());
        for (i, s) in raw.sub_categories.into_iter().enumerate() {
            let parent = match &s.parent {
                serde_json::Value::Number(n) => match n.as_i64() {
                    Some(p) if p >= 0 => p as usize,
                    Some(p) => {
                        return Err(Error::Ontology(format!(
                            "sub_categories[{i}] ({}): dangling parent reference {p}",
                            s.name
                        )))
                    }
                    None => {
                        return Err(Error::Ontology(format!(
                            "sub_categories[{i}] ({}): parent must be an integer index, got {n}",
                            s.name
                        )))
                    }
                },
                serde_json::Value::Object(_) | serde_json::Value::Array(_) => {
                    return Err(Error::Ontology(format!(
                        "sub_categories[{i}] ({}): nested categories are not supported; the ontology has exactly two layers",
                        s.name
                    )))
                }
                other => {
                    return Err(Error::Ontology(format!(
                        "sub_categories[{i}] ({}): parent must be an integer index, got {other}",
                        s.name
                    )))
                }
            };
            subs.push(SubCategory { name: s.name, parent });
        }
        let o = Ontology {
            main_categories: raw.main_categories,
            sub_categories: subs,
            version: raw.version,
        };
        o.validate()?;
        Ok(o)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("ontology serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        if self.main_categories.is_empty() {
            return Err(Error::Ontology("main_categories is empty".into()));
        }
        if self.sub_categories.is_empty() {
            return Err(Error::Ontology("sub_categories is empty".into()));
        }
        let mut seen = HashSet::new();
        for (i, m) in self.main_categories.iter().enumerate() {
            if m.trim().is_empty() {
                return Err(Error::Ontology(format!("main_categories[{i}]: empty name")));
            }
            if !seen.insert(m.as_str()) {
                return Err(Error::Ontology(format!("main_categories[{i}]: duplicate name {m:?}")));
            }
        }
        let mut seen = HashSet::new();
        for (i, s) in self.sub_categories.iter().enumerate() {
            if s.name.trim().is_empty() {
                return Err(Error::Ontology(format!("sub_categories[{i}]: empty name")));
            }
            if !seen.insert(s.name.as_str()) {
                return Err(Error::Ontology(format!(
                    "sub_categories[{i}]: duplicate name {:?}",
                    s.name
                )));
            }
            if s.parent >= self.main_categories.len() {
                return Err(Error::Ontology(format!(
                    "sub_categories[{i}] ({}): dangling parent reference {} (only {} main categories)",
                    s.name,
                    s.parent,
                    self.main_categories.len()
                )));
            }
        }
        for (m, name) in self.main_categories.iter().enumerate() {
            let n = self.sub_categories.iter().filter(|s| s.parent == m).count();
            if n < 2 {
                log::warn!("main category {name:?} has {n} sub-categories; at least 2 are recommended");
            }
        }
        Ok(())
    }

    /// Number of sub-categories (K).
    pub fn num_sub(&self) -> usize {
        self.sub_categories.len()
    }

    pub fn num_main(&self) -> usize {
        self.main_categories.len()
    }

    pub fn num_labels(&self, layer: LabelLayer) -> usize {
        match layer {
            LabelLayer::Sub => self.num_sub(),
            LabelLayer::Main => self.num_main(),
        }
    }

    pub fn parent_of(&self, sub_index: i64) -> Result<usize> {
        self.check_sub(sub_index).map(|i| self.sub_categories[i].parent)
    }

    pub fn sub_name(&self, sub_index: usize) -> &str {
        &self.sub_categories[sub_index].name
    }

    pub fn sub_index(&self, name: &str) -> Option<usize> {
        self.sub_categories.iter().position(|s| s.name == name)
    }

    pub fn encode_sub_onehot(&self, sub_index: i64) -> Result<Vec<f64>> {
        let i = self.check_sub(sub_index)?;
        Ok(onehot(self.num_sub(), i))
    }

    pub fn encode_main_onehot(&self, main_index: i64) -> Result<Vec<f64>> {
        if main_index < 0 || main_index as usize >= self.num_main() {
            return Err(Error::IndexOutOfRange { index: main_index, len: self.num_main() });
        }
        Ok(onehot(self.num_main(), main_index as usize))
    }

    /// Label index of a sub-category in the chosen layer.
    pub fn label_of(&self, sub_index: usize, layer: LabelLayer) -> usize {
        match layer {
            LabelLayer::Sub => sub_index,
            LabelLayer::Main => self.sub_categories[sub_index].parent,
        }
    }

    /// One-hot of a sub-category's label in the chosen layer.
    pub fn encode_label(&self, sub_index: usize, layer: LabelLayer) -> Result<Vec<f64>> {
        match layer {
            LabelLayer::Sub => self.encode_sub_onehot(sub_index as i64),
            LabelLayer::Main => {
                let p = self.parent_of(sub_index as i64)?;
                self.encode_main_onehot(p as i64)
            }
        }
    }

    fn check_sub(&self, sub_index: i64) -> Result<usize> {
        if sub_index < 0 || sub_index as usize >= self.num_sub() {
            return Err(Error::IndexOutOfRange { index: sub_index, len: self.num_sub() });
        }
        Ok(sub_index as usize)
    }
}

fn onehot(len: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; len];
    v[i] = 1.0;
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tops_bottoms() -> Ontology {
        Ontology::new(&["TOPS", "BOTTOMS"], &[("tshirt", 0), ("hoodie", 0), ("jeans", 1)]).unwrap()
    }

    #[test]
    fn loads_valid_file() {
        let o = Ontology::from_json(
            r#"{"main_categories":["TOPS","BOTTOMS"],
                "sub_categories":[{"name":"tshirt","parent":0},{"name":"hoodie","parent":0},{"name":"jeans","parent":1}]}"#,
        )
        .unwrap();
        assert_eq!(o.num_sub(), 3);
        assert_eq!(o, tops_bottoms());
    }

    #[test]
    fn rejects_dangling_parent() {
        let err = Ontology::from_json(
            r#"{"main_categories":["TOPS","BOTTOMS"],"sub_categories":[{"name":"skirt","parent":7}]}"#,
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("dangling parent"), "{msg}");
        assert!(msg.contains("sub_categories[0]"), "{msg}");
    }

    #[test]
    fn rejects_negative_parent() {
        let err = Ontology::from_json(r#"{"main_categories":["A"],"sub_categories":[{"name":"x","parent":-1}]}"#)
            .unwrap_err();
        assert!(err.to_string().contains("dangling"));
    }

    #[test]
    fn rejects_duplicate_names() {
        let err = Ontology::from_json(
            r#"{"main_categories":["TOPS"],"sub_categories":[{"name":"tshirt","parent":0},{"name":"tshirt","parent":0}]}"#,
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("duplicate name"), "{msg}");
        assert!(msg.contains("sub_categories[1]"), "{msg}");
        assert!(Ontology::new(&["A", "A"], &[("x", 0)]).is_err());
    }

    #[test]
    fn rejects_deeper_trees_and_empty_layers() {
        let nested = r#"{"main_categories":["A"],"sub_categories":[{"name":"x","parent":{"name":"y","parent":0}}]}"#;
        assert!(Ontology::from_json(nested).unwrap_err().to_string().contains("two layers"));
        assert!(Ontology::from_json(r#"{"main_categories":[],"sub_categories":[]}"#).is_err());
        assert!(Ontology::from_json(r#"{"main_categories":["A"],"sub_categories":[]}"#).is_err());
        let err = Ontology::from_json("{\n  \"main_categories\": [\"A\",\n").unwrap_err();
        assert!(err.to_string().contains("line"), "{err}");
    }

    #[test]
    fn onehot_encodings() {
        let o = Ontology::new(&["A", "B"], &[("a", 0), ("b", 0), ("c", 1), ("d", 1)]).unwrap();
        assert_eq!(o.encode_sub_onehot(2).unwrap(), vec![0.0, 0.0, 1.0, 0.0]);
        assert!(o.encode_sub_onehot(4).is_err());
        assert!(o.encode_sub_onehot(-1).is_err());
        assert_eq!(o.encode_main_onehot(0).unwrap(), vec![1.0, 0.0]);
        assert_eq!(o.encode_main_onehot(1).unwrap(), vec![0.0, 1.0]);
        assert!(o.encode_main_onehot(2).is_err());
        let single = Ontology::new(&["A"], &[("a", 0)]).unwrap();
        assert_eq!(single.encode_sub_onehot(0).unwrap(), vec![1.0]);
        assert_eq!(o.encode_label(3, LabelLayer::Main).unwrap(), vec![0.0, 1.0]);
    }

    #[test]
    fn parent_lookup() {
        let o = Ontology::new(&["TOPS", "BOTTOMS"], &[("tshirt", 0), ("jeans", 1)]).unwrap();
        assert_eq!(o.parent_of(1).unwrap(), 1);
        assert_eq!(o.parent_of(0).unwrap(), 0);
        assert!(o.parent_of(-1).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("o.json");
        let mut o = tops_bottoms();
        o.version = "v3".into();
        o.save(&path).unwrap();
        assert_eq!(Ontology::load(&path).unwrap(), o);
    }

    proptest! {
        #[test]
        fn onehot_columns_partition(k in 1usize..12, mains in 1usize..4) {
            let names: Vec<String> = (0..k).map(|i| format!("s{i}")).collect();
            let main_names: Vec<String> = (0..mains).map(|i| format!("M{i}")).collect();
            let o = Ontology {
                main_categories: main_names,
                sub_categories: names.iter().enumerate().map(|(i, n)| SubCategory { name: n.clone(), parent: i % mains }).collect(),
                version: String::new(),
            };
            o.validate().unwrap();
            let mut col = vec![0.0; k];
            for i in 0..k {
                let v = o.encode_sub_onehot(i as i64).unwrap();
                prop_assert_eq!(v.iter().sum::<f64>(), 1.0);
                for j in 0..k { col[j] += v[j]; }
                prop_assert!(o.parent_of(i as i64).unwrap() < mains);
            }
            prop_assert!(col.iter().all(|&c| c == 1.0));
            let back = Ontology::from_json(&o.to_json()).unwrap();
            prop_assert_eq!(back, o);
        }
    }
}
