use super::graph::State;

/// Lookup of OR states by (OR id, cell) and by OR id.
///
/// Cells hold a compact, OR-sorted slice of `(or id, state index)` pairs;
/// a layer has at most one OR state per (OR id, cell).
#[derive(Debug, Clone, Default)]
pub struct LayerIndex {
    width: usize,
    height: usize,
    cell_start: Vec<u32>,
    entries: Vec<(u32, u32)>,
    by_or: Vec<Vec<u32>>,
}

impl LayerIndex {
    pub fn new(states: &[State], width: usize, height: usize, or_count: usize) -> Self {
        let cells = width * height;
        let mut counts = vec![0u32; cells + 1];
        for s in states {
            counts[(s.loc[1] as usize) * width + s.loc[0] as usize + 1] += 1;
        }
        for i in 1..=cells {
            counts[i] += counts[i - 1];
        }
        let cell_start = counts.clone();
        let mut fill = counts;
        let mut entries = vec![(0u32, 0u32); states.len()];
        let mut by_or = vec![Vec::new(); or_count];
        for (i, s) in states.iter().enumerate() {
            let c = (s.loc[1] as usize) * width + s.loc[0] as usize;
            entries[fill[c] as usize] = (s.id, i as u32);
            fill[c] += 1;
            if let Some(list) = by_or.get_mut(s.id as usize) {
                list.push(i as u32);
            }
        }
        for c in 0..cells {
            entries[cell_start[c] as usize..cell_start[c + 1] as usize].sort_unstable();
        }
        LayerIndex {
            width,
            height,
            cell_start,
            entries,
            by_or,
        }
    }

    /// Index of the state of OR `or` at `(x, y)`.
    #[inline]
    pub fn at(&self, or: u32, x: i32, y: i32) -> Option<u32> {
        if x < 0 || y < 0 || x as usize >= self.width || y as usize >= self.height {
            return None;
        }
        let c = y as usize * self.width + x as usize;
        let cell = &self.entries[self.cell_start[c] as usize..self.cell_start[c + 1] as usize];
        if cell.len() <= 8 {
            cell.iter().find(|e| e.0 == or).map(|e| e.1)
        } else {
            cell.binary_search_by_key(&or, |e| e.0)
                .ok()
                .map(|i| cell[i].1)
        }
    }

    /// Indices of all states of one OR node, in state order.
    pub fn of_or(&self, or: u32) -> &[u32] {
        self.by_or.get(or as usize).map(|v| v.as_slice()).unwrap_or(&[])
    }

    /// All states whose cell lies in the square `[x-r, x+r] x [y-r, y+r]`.
    pub fn in_square(&self, x: i32, y: i32, r: i32) -> impl Iterator<Item = (u32, u32)> + '_ {
        let x0 = (x - r).max(0);
        let x1 = (x + r).min(self.width as i32 - 1);
        let y0 = (y - r).max(0);
        let y1 = (y + r).min(self.height as i32 - 1);
        (y0..=y1).flat_map(move |yy| {
            (x0..=x1).flat_map(move |xx| {
                let c = yy as usize * self.width + xx as usize;
                self.entries[self.cell_start[c] as usize..self.cell_start[c + 1] as usize]
                    .iter()
                    .copied()
            })
        })
    }
}
