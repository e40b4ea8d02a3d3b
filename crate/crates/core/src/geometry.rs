use serde::{Deserialize, Serialize};

/// Axis-aligned rectangle in frame coordinates (rows grow downwards).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WindowRect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl WindowRect {
    pub fn new(top: usize, left: usize, height: usize, width: usize) -> Self {
        Self {
            top,
            left,
            height,
            width,
        }
    }

    pub fn bottom(&self) -> usize {
        self.top + self.height
    }

    pub fn right(&self) -> usize {
        self.left + self.width
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        row >= self.top && row < self.bottom() && col >= self.left && col < self.right()
    }

    pub fn fits_in(&self, height: usize, width: usize) -> bool {
        self.height >= 1 && self.width >= 1 && self.bottom() <= height && self.right() <= width
    }

    pub fn overlaps(&self, other: &WindowRect) -> bool {
        self.top < other.bottom()
            && other.top < self.bottom()
            && self.left < other.right()
            && other.left < self.right()
    }

    pub fn intersection_area(&self, other: &WindowRect) -> usize {
        let rows = self.bottom().min(other.bottom()).saturating_sub(self.top.max(other.top));
        let cols = self.right().min(other.right()).saturating_sub(self.left.max(other.left));
        rows * cols
    }
}
