use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::supervision::keypoints::{joint_ids, COCO_JOINTS, NUM_JOINTS};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attribute {
    pub name: String,
    /// Global attributes are pooled with GAP and carry no keypoints.
    pub is_global: bool,
    /// COCO joint indices assigned to a local attribute, sorted and unique.
    pub keypoint_ids: Vec<usize>,
}

impl Attribute {
    pub fn global(name: &str) -> Self {
        Attribute {
            name: name.to_string(),
            is_global: true,
            keypoint_ids: Vec::new(),
        }
    }

    pub fn local(name: &str, joints: &[&str]) -> Result<Self> {
        let mut ids = Vec::new();
        for j in joints {
            ids.extend(joint_ids(j).ok_or_else(|| {
                Error::SchemaMismatch(format!("attribute {name}: unknown joint {j:?}"))
            })?);
        }
        ids.sort_unstable();
        ids.dedup();
        Ok(Attribute {
            name: name.to_string(),
            is_global: false,
            keypoint_ids: ids,
        })
    }
}

/// Ordered attribute list with the global/local partition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Attribute>", into = "Vec<Attribute>")]
pub struct AttributeSchema {
    attributes: Vec<Attribute>,
}

impl TryFrom<Vec<Attribute>> for AttributeSchema {
    type Error = Error;

    fn try_from(attributes: Vec<Attribute>) -> Result<Self> {
        AttributeSchema::new(attributes)
    }
}

impl From<AttributeSchema> for Vec<Attribute> {
    fn from(s: AttributeSchema) -> Self {
        s.attributes
    }
}

impl AttributeSchema {
    pub fn new(attributes: Vec<Attribute>) -> Result<Self> {
        let mut seen = HashSet::new();
        for a in &attributes {
            if a.name.is_empty() || a.name.contains([',', '\n', '\r']) {
                return Err(Error::SchemaMismatch(format!(
                    "invalid attribute name {:?}",
                    a.name
                )));
            }
            if !seen.insert(a.name.as_str()) {
                return Err(Error::SchemaMismatch(format!(
                    "duplicate attribute name {:?}",
                    a.name
                )));
            }
            if a.is_global != a.keypoint_ids.is_empty() {
                return Err(Error::SchemaMismatch(format!(
                    "attribute {:?}: global attributes have no keypoints and local ones need at least one",
                    a.name
                )));
            }
            if let Some(&bad) = a.keypoint_ids.iter().find(|&&k| k >= NUM_JOINTS) {
                return Err(Error::SchemaMismatch(format!(
                    "attribute {:?}: joint index {bad} out of range",
                    a.name
                )));
            }
        }
        Ok(AttributeSchema { attributes })
    }

    /// Builds a schema from attribute names plus a name → joint-names
    /// assignment; attributes absent from the assignment are global.
    pub fn from_assignment(
        names: &[String],
        assignment: &BTreeMap<String, Vec<String>>,
    ) -> Result<Self> {
        if let Some(unknown) = assignment.keys().find(|k| !names.contains(k)) {
            return Err(Error::SchemaMismatch(format!(
                "assignment names unknown attribute {unknown:?}"
            )));
        }
        let attrs = names
            .iter()
            .map(|n| match assignment.get(n) {
                Some(joints) if !joints.is_empty() => {
                    let js: Vec<&str> = joints.iter().map(String::as_str).collect();
                    Attribute::local(n, &js)
                }
                _ => Ok(Attribute::global(n)),
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(attrs)
    }

    /// Inverse of [`AttributeSchema::from_assignment`]; joints are listed by
    /// their COCO names.
    pub fn assignment(&self) -> BTreeMap<String, Vec<String>> {
        self.attributes
            .iter()
            .filter(|a| !a.is_global)
            .map(|a| {
                let joints = a
                    .keypoint_ids
                    .iter()
                    .map(|&k| COCO_JOINTS[k].to_string())
                    .collect();
                (a.name.clone(), joints)
            })
            .collect()
    }

    /// Twelve attributes (three global, nine local) used by the synthetic
    /// generator. Keypoint assignments follow human prior knowledge, e.g.
    /// calling → hands and ears.
    pub fn synthetic_default() -> Self {
        let local = |n, j: &[&str]| Attribute::local(n, j).expect("valid joints");
        Self::new(vec![
            Attribute::global("Female"),
            local("Glasses", &["nose", "eyes", "ears"]),
            local("Jacket", &["shoulders", "elbows", "wrists", "hips"]),
            Attribute::global("AgeOver60"),
            local("Trousers", &["hips", "knees", "feet"]),
            local("SportShoes", &["feet"]),
            local("Attachments", &["hands"]),
            Attribute::global("BodyFat"),
            local("Calling", &["hands", "ears"]),
            local("Backpack", &["shoulders"]),
            local("ShortSleeve", &["elbows"]),
            local("Skirt", &["hips", "knees"]),
        ])
        .expect("default schema is valid")
    }

    pub fn attributes(&self) -> &[Attribute] {
        &self.attributes
    }

    pub fn get(&self, j: usize) -> &Attribute {
        &self.attributes[j]
    }

    /// Total attribute count J.
    pub fn len(&self) -> usize {
        self.attributes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.attributes.is_empty()
    }

    pub fn num_global(&self) -> usize {
        self.attributes.iter().filter(|a| a.is_global).count()
    }

    pub fn num_local(&self) -> usize {
        self.len() - self.num_global()
    }

    pub fn global_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&j| self.attributes[j].is_global).collect()
    }

    pub fn local_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&j| !self.attributes[j].is_global).collect()
    }

    pub fn names(&self) -> Vec<String> {
        self.attributes.iter().map(|a| a.name.clone()).collect()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.attributes.iter().position(|a| a.name == name)
    }

    /// Reorders attributes: new attribute `k` is old attribute `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let mut sorted = perm.to_vec();
        sorted.sort_unstable();
        if sorted != (0..self.len()).collect::<Vec<_>>() {
            return Err(Error::InvalidArgument(format!(
                "{perm:?} is not a permutation of 0..{}",
                self.len()
            )));
        }
        Self::new(perm.iter().map(|&p| self.attributes[p].clone()).collect())
    }

    /// Human-readable list of differences against another schema.
    pub fn diff(&self, other: &AttributeSchema) -> Vec<String> {
        let mut out = Vec::new();
        let n = self.len().max(other.len());
        for j in 0..n {
            match (self.attributes.get(j), other.attributes.get(j)) {
                (Some(a), Some(b)) if a == b => {}
                (Some(a), Some(b)) => out.push(format!("#{j}: {} vs {}", a.name, b.name)),
                (Some(a), None) => out.push(format!("#{j}: {} vs <missing>", a.name)),
                (None, Some(b)) => out.push(format!("#{j}: <missing> vs {}", b.name)),
                (None, None) => {}
            }
        }
        out
    }
}
