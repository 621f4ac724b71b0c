//! Name-keyed registries for interchangeable algorithm variants.
//!
//! Sampling strategies and alignment modes are both exposed through a
//! [`Registry`]: each variant implements a common trait and is registered
//! under a stable name that configs and CLI flags refer to.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};

type Factory<T> = Box<dyn Fn() -> Box<T> + Send + Sync>;

pub struct Registry<T: ?Sized> {
    kind: &'static str,
    entries: BTreeMap<&'static str, Factory<T>>,
    order: Vec<&'static str>,
}

impl<T: ?Sized> Registry<T> {
    pub fn new(kind: &'static str) -> Self {
        Self {
            kind,
            entries: BTreeMap::new(),
            order: Vec::new(),
        }
    }

    /// Registers a factory under `name`. Re-registering a name replaces the
    /// previous factory but keeps its original position.
    pub fn register<F>(&mut self, name: &'static str, factory: F) -> &mut Self
    where
        F: Fn() -> Box<T> + Send + Sync + 'static,
    {
        if self.entries.insert(name, Box::new(factory)).is_none() {
            self.order.push(name);
        }
        self
    }

    pub fn create(&self, name: &str) -> Result<Box<T>> {
        self.entries.get(name).map(|f| f()).ok_or_else(|| {
            Error::Config(format!(
                "unknown {} '{}' (known: {})",
                self.kind,
                name,
                self.order.join(", ")
            ))
        })
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Names in registration order.
    pub fn names(&self) -> &[&'static str] {
        &self.order
    }
}

impl<T: ?Sized> fmt::Debug for Registry<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Registry")
            .field("kind", &self.kind)
            .field("names", &self.order)
            .finish()
    }
}
