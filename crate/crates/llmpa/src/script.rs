//! Scripted replies keyed by role and prompt marker.
//!
//! Script files map role tags to marker keys to reply lists:
//! `{"action_pred": {"flight/1": ["CLICK Log in"]}}`. The key `*` matches
//! any prompt. Replies under a key are handed out in order; the last one
//! repeats once the list is used up.

use std::collections::BTreeMap;
use std::fmt;
use std::marker::PhantomData;
use std::path::Path;
use std::sync::Mutex;

use llmpa_core::backend::{prompt_keys, BackendError, BackendRequest, LlmBackend, RoleTag};
use serde::de::{Deserializer, MapAccess, Visitor};
use serde::Deserialize;

use crate::formats::{read_json, FormatError};

/// Matches any prompt when no marker key has an entry.
pub const WILDCARD: &str = "*";

/// A JSON object that rejects repeated keys.
struct UniqueMap<K, V>(BTreeMap<K, V>);

impl<'de, K, V> Deserialize<'de> for UniqueMap<K, V>
where
    K: Deserialize<'de> + Ord + fmt::Debug,
    V: Deserialize<'de>,
{
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct V_<K, V>(PhantomData<(K, V)>);

        impl<'de, K, V> Visitor<'de> for V_<K, V>
        where
            K: Deserialize<'de> + Ord + fmt::Debug,
            V: Deserialize<'de>,
        {
            type Value = UniqueMap<K, V>;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("an object without repeated keys")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<Self::Value, A::Error> {
                let mut out = BTreeMap::new();
                while let Some(key) = map.next_key::<K>()? {
                    if out.contains_key(&key) {
                        return Err(serde::de::Error::custom(format!("duplicate key {key:?}")));
                    }
                    let value = map.next_value()?;
                    out.insert(key, value);
                }
                Ok(UniqueMap(out))
            }
        }

        deserializer.deserialize_map(V_(PhantomData))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ScriptTable {
    entries: BTreeMap<RoleTag, BTreeMap<String, Vec<String>>>,
}

impl<'de> Deserialize<'de> for ScriptTable {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = UniqueMap::<RoleTag, UniqueMap<String, Vec<String>>>::deserialize(deserializer)?;
        let entries = raw.0.into_iter().map(|(role, keys)| (role, keys.0)).collect();
        Ok(Self { entries })
    }
}

impl ScriptTable {
    pub fn insert(&mut self, role: RoleTag, key: impl Into<String>, replies: Vec<String>) -> Option<Vec<String>> {
        self.entries.entry(role).or_default().insert(key.into(), replies)
    }

    /// Number of (role, key) entries.
    pub fn len(&self) -> usize {
        self.entries.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn replies(&self, role: RoleTag, key: &str) -> Option<&[String]> {
        self.entries.get(&role)?.get(key).map(Vec::as_slice)
    }
}

pub fn load_script(path: &Path) -> Result<ScriptTable, FormatError> {
    let table: ScriptTable = read_json(path)?;
    for (role, keys) in &table.entries {
        if let Some((key, _)) = keys.iter().find(|(_, replies)| replies.is_empty()) {
            return Err(FormatError::invalid(path, format!("{role}.{key}: reply list is empty")));
        }
    }
    Ok(table)
}

/// Replays a [`ScriptTable`]. Safe to share across threads; each key has its own cursor.
#[derive(Debug, Default)]
pub struct ScriptedBackend {
    table: ScriptTable,
    cursors: Mutex<BTreeMap<(RoleTag, String), usize>>,
}

impl ScriptedBackend {
    pub fn new(table: ScriptTable) -> Self {
        Self { table, cursors: Mutex::new(BTreeMap::new()) }
    }

    pub fn table(&self) -> &ScriptTable {
        &self.table
    }
}

impl LlmBackend for ScriptedBackend {
    fn complete(&self, request: &BackendRequest) -> Result<String, BackendError> {
        let mut keys: Vec<&str> = prompt_keys(&request.prompt);
        keys.push(WILDCARD);
        let hit = keys.iter().find_map(|k| self.table.replies(request.role, k).map(|r| (*k, r)));
        let Some((key, replies)) = hit else {
            let keys = keys[..keys.len() - 1].iter().map(|k| k.to_string()).collect();
            return Err(BackendError::ScriptGap { role: request.role, keys });
        };
        let mut cursors = self.cursors.lock().unwrap_or_else(|e| e.into_inner());
        let cursor = cursors.entry((request.role, key.to_string())).or_insert(0);
        let reply = replies[(*cursor).min(replies.len() - 1)].clone();
        *cursor += 1;
        Ok(reply)
    }
}
