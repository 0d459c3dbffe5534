use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::fields::{as_array, as_bool, as_object, as_str, as_u32, field, violation};
use super::json_extract::json_objects;
use super::NavError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionGroup {
    pub name: String,
    pub region_ids: Vec<u32>,
    pub needs_high_mag: bool,
}

/// Stage-1 output: named region groups and the viewing order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionSelection {
    pub groups: Vec<RegionGroup>,
    pub priority: Vec<u32>,
}

impl RegionSelection {
    pub fn all_region_ids(&self) -> BTreeSet<u32> {
        self.groups.iter().flat_map(|g| g.region_ids.iter().copied()).collect()
    }

    pub fn group_of(&self, region_id: u32) -> Option<&RegionGroup> {
        self.groups.iter().find(|g| g.region_ids.contains(&region_id))
    }

    /// Checks that ids are unique across groups and that the priority list is
    /// a duplicate-free ordering of grouped ids.
    pub fn validate(&self) -> Result<(), NavError> {
        let mut seen = BTreeSet::new();
        for g in &self.groups {
            for &id in &g.region_ids {
                if !seen.insert(id) {
                    return Err(NavError::DuplicateRegionId(id));
                }
            }
        }
        let mut prio = BTreeSet::new();
        for (i, &id) in self.priority.iter().enumerate() {
            if !prio.insert(id) {
                return Err(NavError::DuplicateRegionId(id));
            }
            if !seen.contains(&id) {
                return Err(violation(
                    format!("priority[{i}]"),
                    format!("region {id} is not in any group"),
                ));
            }
        }
        Ok(())
    }
}

fn decode(obj: &Map<String, Value>) -> Result<RegionSelection, NavError> {
    let groups_v = as_array(field(obj, "groups", "")?, "groups")?;
    let mut groups = Vec::with_capacity(groups_v.len());
    for (gi, gv) in groups_v.iter().enumerate() {
        let path = format!("groups[{gi}]");
        let g = as_object(gv, &path)?;
        let name = as_str(field(g, "name", &path)?, &format!("{path}.name"))?.to_string();
        let ids_path = format!("{path}.region_ids");
        let region_ids = as_array(field(g, "region_ids", &path)?, &ids_path)?
            .iter()
            .enumerate()
            .map(|(i, v)| as_u32(v, &format!("{ids_path}[{i}]")))
            .collect::<Result<Vec<_>, _>>()?;
        let needs_high_mag = as_bool(field(g, "needs_high_mag", &path)?, &format!("{path}.needs_high_mag"))?;
        groups.push(RegionGroup {
            name,
            region_ids,
            needs_high_mag,
        });
    }
    let priority = as_array(field(obj, "priority", "")?, "priority")?
        .iter()
        .enumerate()
        .map(|(i, v)| as_u32(v, &format!("priority[{i}]")))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(RegionSelection { groups, priority })
}

/// Extracts the first JSON object that decodes as a region selection, then
/// validates it.
pub fn parse_region_selection(text: &str) -> Result<RegionSelection, NavError> {
    let objects = json_objects(text);
    let mut first_err = None;
    for obj in &objects {
        match decode(obj) {
            Ok(sel) => {
                sel.validate()?;
                return Ok(sel);
            }
            Err(e) => {
                first_err.get_or_insert(e);
            }
        }
    }
    Err(first_err.unwrap_or(NavError::NoJsonFound))
}
