//! Splitting labels into 4-connected regions and absorbing small ones.

use std::collections::{BTreeSet, VecDeque};

/// Region adjacency graph over the 4-connected components of a raw labelling.
pub(crate) struct RegionGraph {
    width: usize,
    /// Component id per pixel.
    component: Vec<usize>,
    parent: Vec<usize>,
    size: Vec<usize>,
    neighbors: Vec<BTreeSet<usize>>,
}

impl RegionGraph {
    pub(crate) fn new(width: usize, height: usize, raw: &[usize]) -> Self {
        let n = width * height;
        assert_eq!(raw.len(), n);
        let mut component = vec![usize::MAX; n];
        let mut size = Vec::new();
        let mut queue = VecDeque::new();
        for start in 0..n {
            if component[start] != usize::MAX {
                continue;
            }
            let id = size.len();
            let label = raw[start];
            component[start] = id;
            queue.push_back(start);
            let mut count = 0;
            while let Some(p) = queue.pop_front() {
                count += 1;
                let (x, y) = (p % width, p / width);
                let mut visit = |q: usize| {
                    if component[q] == usize::MAX && raw[q] == label {
                        component[q] = id;
                        queue.push_back(q);
                    }
                };
                if x > 0 {
                    visit(p - 1);
                }
                if x + 1 < width {
                    visit(p + 1);
                }
                if y > 0 {
                    visit(p - width);
                }
                if y + 1 < height {
                    visit(p + width);
                }
            }
            size.push(count);
        }
        let mut neighbors = vec![BTreeSet::new(); size.len()];
        for p in 0..n {
            let (x, y) = (p % width, p / width);
            let a = component[p];
            for q in [(x + 1 < width).then(|| p + 1), (y + 1 < height).then(|| p + width)]
                .into_iter()
                .flatten()
            {
                let b = component[q];
                if a != b {
                    neighbors[a].insert(b);
                    neighbors[b].insert(a);
                }
            }
        }
        Self {
            width,
            component,
            parent: (0..size.len()).collect(),
            size,
            neighbors,
        }
    }

    fn find(&mut self, mut c: usize) -> usize {
        while self.parent[c] != c {
            self.parent[c] = self.parent[self.parent[c]];
            c = self.parent[c];
        }
        c
    }

    fn roots(&mut self) -> Vec<usize> {
        (0..self.parent.len()).filter(|&c| self.parent[c] == c).collect()
    }

    #[cfg(test)]
    fn region_count(&mut self) -> usize {
        self.roots().len()
    }

    /// Largest adjacent region of `root` (lowest id on ties).
    fn largest_neighbor(&mut self, root: usize) -> Option<usize> {
        let candidates: Vec<usize> = self.neighbors[root].iter().copied().collect();
        let mut best: Option<usize> = None;
        for c in candidates {
            let r = self.find(c);
            if r == root {
                continue;
            }
            best = match best {
                Some(b) if self.size[b] > self.size[r] || (self.size[b] == self.size[r] && b < r) => Some(b),
                _ => Some(r),
            };
        }
        best
    }

    fn merge_into(&mut self, small: usize, big: usize) {
        self.parent[small] = big;
        self.size[big] += self.size[small];
        let moved = std::mem::take(&mut self.neighbors[small]);
        self.neighbors[big].extend(moved);
        self.neighbors[big].remove(&big);
        self.neighbors[big].remove(&small);
    }

    /// Absorbs every region smaller than `min_size` pixels into its largest
    /// neighbour, smallest regions first.
    pub(crate) fn merge_small(&mut self, min_size: usize) {
        let mut order: Vec<usize> = self.roots();
        order.sort_by_key(|&c| (self.size[c], c));
        for c in order {
            let root = self.find(c);
            if self.size[root] >= min_size {
                continue;
            }
            if let Some(target) = self.largest_neighbor(root) {
                self.merge_into(root, target);
            }
        }
    }

    /// Merges the smallest region into its largest neighbour until at most
    /// `max_regions` remain.
    pub(crate) fn merge_down_to(&mut self, max_regions: usize) {
        loop {
            let mut roots = self.roots();
            if roots.len() <= max_regions.max(1) {
                return;
            }
            roots.sort_by_key(|&c| (self.size[c], c));
            let merged = roots.iter().any(|&r| match self.largest_neighbor(r) {
                Some(target) => {
                    self.merge_into(r, target);
                    true
                }
                None => false,
            });
            if !merged {
                return;
            }
        }
    }

    /// Canonical labels: regions numbered by first appearance in row-major order.
    pub(crate) fn labels(&mut self) -> Vec<u32> {
        let mut remap = vec![u32::MAX; self.parent.len()];
        let mut next = 0u32;
        let mut out = Vec::with_capacity(self.component.len());
        for p in 0..self.component.len() {
            let root = self.find(self.component[p]);
            if remap[root] == u32::MAX {
                remap[root] = next;
                next += 1;
            }
            out.push(remap[root]);
        }
        debug_assert!(self.width > 0);
        out
    }
}

/// Splits every label into 4-connected components, absorbs components
/// smaller than `min_size` pixels and returns canonical labels.
pub fn enforce_connectivity(width: usize, height: usize, raw: &[usize], min_size: usize) -> Vec<u32> {
    let mut graph = RegionGraph::new(width, height, raw);
    graph.merge_small(min_size);
    graph.labels()
}
