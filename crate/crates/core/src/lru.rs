//! Slab-backed LRU map with O(1) touch, removal and in-place replacement.

use std::collections::HashMap;
use std::hash::Hash;

const NIL: usize = usize::MAX;

#[derive(Debug, Clone)]
struct Node<K, V> {
    key: K,
    value: V,
    prev: usize,
    next: usize,
}

/// Ordered map where iteration runs from least- to most-recently used.
#[derive(Debug, Clone)]
pub struct LruMap<K, V> {
    nodes: Vec<Option<Node<K, V>>>,
    free: Vec<usize>,
    index: HashMap<K, usize>,
    head: usize,
    tail: usize,
}

impl<K: Hash + Eq + Clone, V> Default for LruMap<K, V> {
    fn default() -> Self {
        Self::new()
    }
}

impl<K: Hash + Eq + Clone, V> LruMap<K, V> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            free: Vec::new(),
            index: HashMap::new(),
            head: NIL,
            tail: NIL,
        }
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn contains(&self, key: &K) -> bool {
        self.index.contains_key(key)
    }

    fn node(&self, i: usize) -> &Node<K, V> {
        self.nodes[i].as_ref().expect("live node")
    }

    fn node_mut(&mut self, i: usize) -> &mut Node<K, V> {
        self.nodes[i].as_mut().expect("live node")
    }

    fn unlink(&mut self, i: usize) {
        let (prev, next) = {
            let n = self.node(i);
            (n.prev, n.next)
        };
        if prev == NIL {
            self.head = next;
        } else {
            self.node_mut(prev).next = next;
        }
        if next == NIL {
            self.tail = prev;
        } else {
            self.node_mut(next).prev = prev;
        }
    }

    fn link_before(&mut self, i: usize, at: usize) {
        if at == NIL {
            let tail = self.tail;
            {
                let n = self.node_mut(i);
                n.prev = tail;
                n.next = NIL;
            }
            if tail == NIL {
                self.head = i;
            } else {
                self.node_mut(tail).next = i;
            }
            self.tail = i;
        } else {
            let prev = self.node(at).prev;
            {
                let n = self.node_mut(i);
                n.prev = prev;
                n.next = at;
            }
            self.node_mut(at).prev = i;
            if prev == NIL {
                self.head = i;
            } else {
                self.node_mut(prev).next = i;
            }
        }
    }

    fn alloc(&mut self, key: K, value: V) -> usize {
        let node = Node {
            key,
            value,
            prev: NIL,
            next: NIL,
        };
        match self.free.pop() {
            Some(i) => {
                self.nodes[i] = Some(node);
                i
            }
            None => {
                self.nodes.push(Some(node));
                self.nodes.len() - 1
            }
        }
    }

    /// Inserts or refreshes `key` as most recently used. Returns the previous value.
    pub fn insert(&mut self, key: K, value: V) -> Option<V> {
        if let Some(&i) = self.index.get(&key) {
            self.unlink(i);
            self.link_before(i, NIL);
            return Some(std::mem::replace(&mut self.node_mut(i).value, value));
        }
        let i = self.alloc(key.clone(), value);
        self.index.insert(key, i);
        self.link_before(i, NIL);
        None
    }

    /// Marks `key` most recently used; returns false if absent.
    pub fn touch(&mut self, key: &K) -> bool {
        match self.index.get(key) {
            Some(&i) => {
                self.unlink(i);
                self.link_before(i, NIL);
                true
            }
            None => false,
        }
    }

    /// Looks up and refreshes.
    pub fn get(&mut self, key: &K) -> Option<&V> {
        let i = *self.index.get(key)?;
        self.unlink(i);
        self.link_before(i, NIL);
        Some(&self.node(i).value)
    }

    /// Looks up without changing recency.
    pub fn peek(&self, key: &K) -> Option<&V> {
        self.index.get(key).map(|&i| &self.node(i).value)
    }

    pub fn remove(&mut self, key: &K) -> Option<V> {
        let i = self.index.remove(key)?;
        self.unlink(i);
        self.free.push(i);
        self.nodes[i].take().map(|n| n.value)
    }

    pub fn peek_lru(&self) -> Option<(&K, &V)> {
        (self.head != NIL).then(|| {
            let n = self.node(self.head);
            (&n.key, &n.value)
        })
    }

    pub fn pop_lru(&mut self) -> Option<(K, V)> {
        if self.head == NIL {
            return None;
        }
        let key = self.node(self.head).key.clone();
        let v = self.remove(&key)?;
        Some((key, v))
    }

    /// Replaces `old` with `new` entries occupying its position in recency order.
    pub fn replace_in_place(&mut self, old: &K, new: impl IntoIterator<Item = (K, V)>) -> bool {
        let Some(&at) = self.index.get(old) else {
            return false;
        };
        let successor = self.node(at).next;
        self.remove(old);
        for (k, v) in new {
            if let Some(&i) = self.index.get(&k) {
                self.unlink(i);
                self.node_mut(i).value = v;
                self.link_before(i, successor);
            } else {
                let i = self.alloc(k.clone(), v);
                self.index.insert(k, i);
                self.link_before(i, successor);
            }
        }
        true
    }

    /// Iterates from least to most recently used.
    pub fn iter(&self) -> LruIter<'_, K, V> {
        LruIter {
            map: self,
            cur: self.head,
        }
    }

    pub fn keys_lru_order(&self) -> Vec<K> {
        self.iter().map(|(k, _)| k.clone()).collect()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
        self.free.clear();
        self.index.clear();
        self.head = NIL;
        self.tail = NIL;
    }
}

pub struct LruIter<'a, K, V> {
    map: &'a LruMap<K, V>,
    cur: usize,
}

impl<'a, K: Hash + Eq + Clone, V> Iterator for LruIter<'a, K, V> {
    type Item = (&'a K, &'a V);

    fn next(&mut self) -> Option<Self::Item> {
        if self.cur == NIL {
            return None;
        }
        let n = self.map.nodes[self.cur].as_ref().expect("live node");
        self.cur = n.next;
        Some((&n.key, &n.value))
    }
}
