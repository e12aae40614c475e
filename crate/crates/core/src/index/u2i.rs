use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use arc_swap::ArcSwap;

use crate::error::{Error, Result};
use crate::{ItemId, UserId};

/// Ranked recommendations for one user at one point in time.
#[derive(Clone, Debug, PartialEq)]
pub struct U2iEntry {
    pub timestamp: u64,
    pub items: Vec<(ItemId, f64)>,
}

/// User-to-items store. Readers load an immutable snapshot of the whole
/// map, so a lookup never waits on a writer and never sees a partial entry.
#[derive(Debug)]
pub struct U2iIndex {
    max_items: usize,
    map: ArcSwap<HashMap<UserId, Arc<U2iEntry>>>,
}

impl U2iIndex {
    pub fn new(max_items: usize) -> Self {
        Self {
            max_items,
            map: ArcSwap::from_pointee(HashMap::new()),
        }
    }

    pub fn max_items(&self) -> usize {
        self.max_items
    }

    /// Stores `items` (sorted by probability, descending) unless a newer
    /// entry already exists. Returns whether the entry was written.
    pub fn put(&self, user: UserId, items: Vec<(ItemId, f64)>, timestamp: u64) -> Result<bool> {
        if items.windows(2).any(|w| w[1].1 > w[0].1) {
            return Err(Error::invalid("u2i results must be sorted by probability"));
        }
        let mut items = items;
        items.truncate(self.max_items);
        let entry = Arc::new(U2iEntry { timestamp, items });
        let mut written = false;
        self.map.rcu(|current| {
            written = false;
            if current.get(&user).is_some_and(|e| e.timestamp > timestamp) {
                return Arc::clone(current);
            }
            let mut next = HashMap::clone(current);
            next.insert(user, Arc::clone(&entry));
            written = true;
            Arc::new(next)
        });
        Ok(written)
    }

    /// Latest snapshot for `user`, if any.
    pub fn get(&self, user: UserId) -> Option<Arc<U2iEntry>> {
        self.map.load().get(&user).cloned()
    }

    pub fn len(&self) -> usize {
        self.map.load().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `user_id<TAB>item_id<TAB>rank<TAB>probability`, users ascending, rank 1-based.
    pub fn export(&self) -> String {
        let snap = self.map.load_full();
        let mut users: Vec<&UserId> = snap.keys().collect();
        users.sort_unstable();
        let mut out = String::new();
        for u in users {
            for (rank, (item, p)) in snap[u].items.iter().enumerate() {
                out.push_str(&format!("{u}\t{item}\t{}\t{p:e}\n", rank + 1));
            }
        }
        out
    }

    pub fn export_to(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        w.write_all(self.export().as_bytes())?;
        w.flush()?;
        Ok(())
    }
}
