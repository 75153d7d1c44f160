//! Dense row-major 2D grids used for masks, label images and scalar fields.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

impl<T: Clone> Grid<T> {
    pub fn new(width: usize, height: usize, fill: T) -> Self {
        Grid {
            width,
            height,
            data: vec![fill; width * height],
        }
    }
}

impl<T> Grid<T> {
    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), width * height, "grid data length mismatch");
        Grid {
            width,
            height,
            data,
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Grid {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    /// `(height, width)`, matching the image convention used by the file formats.
    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn in_bounds(&self, x: i64, y: i64) -> bool {
        x >= 0 && y >= 0 && (x as usize) < self.width && (y as usize) < self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> &T {
        &self.data[y * self.width + x]
    }

    #[inline]
    pub fn get_mut(&mut self, x: usize, y: usize) -> &mut T {
        &mut self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: T) {
        self.data[y * self.width + x] = value;
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Grid<U> {
        Grid {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(f).collect(),
        }
    }

    /// Iterates `(x, y, &value)` in row-major order.
    pub fn iter_xy(&self) -> impl Iterator<Item = (usize, usize, &T)> {
        let w = self.width;
        self.data
            .iter()
            .enumerate()
            .map(move |(i, v)| (i % w, i / w, v))
    }
}

impl<T: Copy + Default> Grid<T> {
    /// Value at `(x, y)`, or `T::default()` outside the grid.
    #[inline]
    pub fn get_or_default(&self, x: i64, y: i64) -> T {
        if self.in_bounds(x, y) {
            self.data[y as usize * self.width + x as usize]
        } else {
            T::default()
        }
    }
}

pub type Mask = Grid<bool>;

impl Grid<bool> {
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty_mask(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }
}

/// The eight neighbours in the order N, NE, E, SE, S, SW, W, NW (y grows downward).
pub const NEIGHBORS8: [(i64, i64); 8] = [
    (0, -1),
    (1, -1),
    (1, 0),
    (1, 1),
    (0, 1),
    (-1, 1),
    (-1, 0),
    (-1, -1),
];

/// Labels 8-connected foreground components; returns the label grid (0 = background)
/// and the pixel count of each component (index `label - 1`).
pub fn label_components(mask: &Mask) -> (Grid<u32>, Vec<usize>) {
    let (w, h) = (mask.width(), mask.height());
    let mut labels = Grid::new(w, h, 0u32);
    let mut sizes = Vec::new();
    let mut stack = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !*mask.get(x, y) || *labels.get(x, y) != 0 {
                continue;
            }
            let label = sizes.len() as u32 + 1;
            let mut size = 0;
            labels.set(x, y, label);
            stack.push((x, y));
            while let Some((cx, cy)) = stack.pop() {
                size += 1;
                for (dx, dy) in NEIGHBORS8 {
                    let (nx, ny) = (cx as i64 + dx, cy as i64 + dy);
                    if mask.get_or_default(nx, ny) && *labels.get(nx as usize, ny as usize) == 0 {
                        labels.set(nx as usize, ny as usize, label);
                        stack.push((nx as usize, ny as usize));
                    }
                }
            }
            sizes.push(size);
        }
    }
    (labels, sizes)
}

/// Number of 8-connected foreground components.
pub fn count_components(mask: &Mask) -> usize {
    label_components(mask).1.len()
}

/// Keeps only the largest 8-connected component (lowest label on ties).
pub fn largest_component(mask: &Mask) -> Mask {
    let (labels, sizes) = label_components(mask);
    let Some(best) = sizes
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
        .map(|(i, _)| i as u32 + 1)
    else {
        return mask.clone();
    };
    labels.map(|&l| l == best)
}
