//! Two-platform datasets and their text manifest format.
//!
//! Manifest layout: a header line `C d` (class count, feature dimension),
//! then one line per item: `label platform item_id v_1 … v_d` where
//! `platform` is `sat` or `drone`. Values are written in shortest
//! round-trip decimal form, so `parse(write(ds)) == ds`.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;

pub type ItemId = u64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Platform {
    Satellite,
    Drone,
}

impl fmt::Display for Platform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Platform::Satellite => "sat",
            Platform::Drone => "drone",
        })
    }
}

impl FromStr for Platform {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "sat" => Ok(Platform::Satellite),
            "drone" => Ok(Platform::Drone),
            other => Err(format!("unknown platform `{other}` (expected sat or drone)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Item {
    pub id: ItemId,
    pub label: usize,
    pub platform: Platform,
    pub features: Vec<f64>,
}

/// One geo-tag with its items on each platform.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GeoClass {
    pub label: usize,
    pub satellite_items: Vec<ItemId>,
    pub drone_items: Vec<ItemId>,
}

#[derive(Clone, Debug)]
pub struct CrossViewDataset {
    dim: usize,
    classes: Vec<GeoClass>,
    items: Vec<Item>,
    index: HashMap<ItemId, usize>,
}

impl PartialEq for CrossViewDataset {
    fn eq(&self, other: &Self) -> bool {
        self.dim == other.dim && self.classes == other.classes && self.items == other.items
    }
}

impl CrossViewDataset {
    /// Groups items into classes and checks the dataset invariants: distinct
    /// item ids, a uniform feature dimension, finite values, and at least one
    /// item per platform in every class. Classes are ordered by label; items
    /// keep their input order.
    pub fn from_items(dim: usize, items: Vec<Item>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Data("feature dimension must be positive".into()));
        }
        let mut index = HashMap::with_capacity(items.len());
        let mut grouped: BTreeMap<usize, GeoClass> = BTreeMap::new();
        for (i, item) in items.iter().enumerate() {
            if item.features.len() != dim {
                return Err(Error::Data(format!(
                    "item {} has {} features, expected {dim}",
                    item.id,
                    item.features.len()
                )));
            }
            if item.features.iter().any(|v| !v.is_finite()) {
                return Err(Error::Data(format!("item {} has non-finite features", item.id)));
            }
            if index.insert(item.id, i).is_some() {
                return Err(Error::Data(format!("duplicate item id {}", item.id)));
            }
            let class = grouped.entry(item.label).or_insert_with(|| GeoClass {
                label: item.label,
                satellite_items: Vec::new(),
                drone_items: Vec::new(),
            });
            match item.platform {
                Platform::Satellite => class.satellite_items.push(item.id),
                Platform::Drone => class.drone_items.push(item.id),
            }
        }
        let classes: Vec<GeoClass> = grouped.into_values().collect();
        for c in &classes {
            if c.satellite_items.is_empty() || c.drone_items.is_empty() {
                return Err(Error::Data(format!(
                    "class {} needs at least one item on each platform",
                    c.label
                )));
            }
        }
        Ok(Self {
            dim,
            classes,
            items,
            index,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> &[GeoClass] {
        &self.classes
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    pub fn labels(&self) -> Vec<usize> {
        self.classes.iter().map(|c| c.label).collect()
    }

    pub fn class(&self, label: usize) -> Option<&GeoClass> {
        self.classes
            .binary_search_by_key(&label, |c| c.label)
            .ok()
            .map(|i| &self.classes[i])
    }

    pub fn item(&self, id: ItemId) -> Option<&Item> {
        self.index.get(&id).map(|&i| &self.items[i])
    }

    pub fn num_drone_items(&self) -> usize {
        self.classes.iter().map(|c| c.drone_items.len()).sum()
    }

    pub fn num_satellite_items(&self) -> usize {
        self.classes.iter().map(|c| c.satellite_items.len()).sum()
    }

    pub fn items_on(&self, platform: Platform) -> impl Iterator<Item = &Item> {
        self.items.iter().filter(move |i| i.platform == platform)
    }

    /// Feature rows for `ids`, in order.
    pub fn features(&self, ids: &[ItemId]) -> Result<DenseMatrix> {
        let mut data = Vec::with_capacity(ids.len() * self.dim);
        for id in ids {
            let item = self
                .item(*id)
                .ok_or_else(|| Error::Data(format!("unknown item id {id}")))?;
            data.extend_from_slice(&item.features);
        }
        DenseMatrix::from_vec(ids.len(), self.dim, data)
    }

    /// The sub-dataset holding only the given labels.
    pub fn restrict(&self, labels: &[usize]) -> Result<Self> {
        let keep: std::collections::HashSet<usize> = labels.iter().copied().collect();
        let items = self
            .items
            .iter()
            .filter(|i| keep.contains(&i.label))
            .cloned()
            .collect();
        Self::from_items(self.dim, items)
    }

    pub fn write_manifest<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{} {}", self.num_classes(), self.dim)?;
        for item in &self.items {
            write!(w, "{} {} {}", item.label, item.platform, item.id)?;
            for v in &item.features {
                write!(w, " {v}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn manifest_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_manifest(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("manifest is ASCII")
    }

    pub fn read_manifest<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines().enumerate();
        let (classes, dim) = loop {
            let Some((n, line)) = lines.next() else {
                return Err(Error::Parse { line: 1, msg: "missing header `C d`".into() });
            };
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 2 {
                return Err(Error::Parse { line: n + 1, msg: "header must be `C d`".into() });
            }
            let c = parse_field::<usize>(fields[0], n + 1, "class count")?;
            let d = parse_field::<usize>(fields[1], n + 1, "dimension")?;
            break (c, d);
        };
        let mut items = Vec::new();
        for (n, line) in lines {
            let line = line?;
            let lineno = n + 1;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 3 + dim {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("expected {} fields, found {}", 3 + dim, fields.len()),
                });
            }
            let label = parse_field::<usize>(fields[0], lineno, "label")?;
            let platform = fields[1]
                .parse::<Platform>()
                .map_err(|msg| Error::Parse { line: lineno, msg })?;
            let id = parse_field::<ItemId>(fields[2], lineno, "item id")?;
            let features = fields[3..]
                .iter()
                .map(|f| parse_field::<f64>(f, lineno, "feature value"))
                .collect::<Result<Vec<_>>>()?;
            items.push(Item { id, label, platform, features });
        }
        let ds = Self::from_items(dim, items)?;
        if ds.num_classes() != classes {
            return Err(Error::Parse {
                line: 1,
                msg: format!("header declares {classes} classes, found {}", ds.num_classes()),
            });
        }
        Ok(ds)
    }
}

fn parse_field<T: FromStr>(s: &str, line: usize, what: &str) -> Result<T> {
    s.parse::<T>()
        .map_err(|_| Error::Parse { line, msg: format!("invalid {what} `{s}`") })
}
