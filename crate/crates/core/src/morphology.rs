//! Binary morphology and connected components on `width x height` boolean grids.

/// Offsets inside a disk of the given radius (Euclidean, inclusive).
fn disk_offsets(radius: usize) -> Vec<(isize, isize)> {
    let r = radius as isize;
    let mut out = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r * r {
                out.push((dx, dy));
            }
        }
    }
    out
}

/// Dilation by a disk; pixels outside the grid are ignored.
pub fn dilate(grid: &[bool], width: usize, height: usize, radius: usize) -> Vec<bool> {
    if radius == 0 {
        return grid.to_vec();
    }
    let offs = disk_offsets(radius);
    let mut out = vec![false; grid.len()];
    for y in 0..height {
        for x in 0..width {
            if !grid[y * width + x] {
                continue;
            }
            for &(dx, dy) in &offs {
                let (nx, ny) = (x as isize + dx, y as isize + dy);
                if nx >= 0 && ny >= 0 && (nx as usize) < width && (ny as usize) < height {
                    out[ny as usize * width + nx as usize] = true;
                }
            }
        }
    }
    out
}

/// Erosion adjoint to [`dilate`]: a pixel survives when every in-grid pixel
/// of its disk is set.
pub fn erode(grid: &[bool], width: usize, height: usize, radius: usize) -> Vec<bool> {
    if radius == 0 {
        return grid.to_vec();
    }
    let offs = disk_offsets(radius);
    let mut out = vec![false; grid.len()];
    for y in 0..height {
        for x in 0..width {
            out[y * width + x] = offs.iter().all(|&(dx, dy)| {
                let (nx, ny) = (x as isize + dx, y as isize + dy);
                nx < 0
                    || ny < 0
                    || nx as usize >= width
                    || ny as usize >= height
                    || grid[ny as usize * width + nx as usize]
            });
        }
    }
    out
}

pub fn close(grid: &[bool], width: usize, height: usize, radius: usize) -> Vec<bool> {
    erode(&dilate(grid, width, height, radius), width, height, radius)
}

/// 8-connected component labels (0 = background, components numbered from 1
/// in raster order of their first pixel). Returns `(labels, count)`.
pub fn label_components(grid: &[bool], width: usize, height: usize) -> (Vec<u32>, u32) {
    let mut labels = vec![0u32; grid.len()];
    let mut next = 0u32;
    let mut stack = Vec::new();
    for start in 0..grid.len() {
        if !grid[start] || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        stack.push(start);
        while let Some(p) = stack.pop() {
            let (x, y) = ((p % width) as isize, (p / width) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx as usize >= width || ny as usize >= height {
                        continue;
                    }
                    let q = ny as usize * width + nx as usize;
                    if grid[q] && labels[q] == 0 {
                        labels[q] = next;
                        stack.push(q);
                    }
                }
            }
        }
    }
    (labels, next)
}

/// Clears 8-connected components with fewer than `min_area` pixels.
pub fn remove_small_components(grid: &[bool], width: usize, height: usize, min_area: usize) -> Vec<bool> {
    if min_area <= 1 {
        return grid.to_vec();
    }
    let (labels, n) = label_components(grid, width, height);
    let mut area = vec![0usize; n as usize + 1];
    for &l in &labels {
        area[l as usize] += 1;
    }
    labels
        .iter()
        .map(|&l| l != 0 && area[l as usize] >= min_area)
        .collect()
}

/// Sets background pixels that are not 4-connected to the grid border.
pub fn fill_holes(grid: &[bool], width: usize, height: usize) -> Vec<bool> {
    let mut outside = vec![false; grid.len()];
    let mut stack: Vec<usize> = Vec::new();
    let seed = |p: usize, outside: &mut Vec<bool>, stack: &mut Vec<usize>| {
        if !grid[p] && !outside[p] {
            outside[p] = true;
            stack.push(p);
        }
    };
    for x in 0..width {
        seed(x, &mut outside, &mut stack);
        seed((height - 1) * width + x, &mut outside, &mut stack);
    }
    for y in 0..height {
        seed(y * width, &mut outside, &mut stack);
        seed(y * width + width - 1, &mut outside, &mut stack);
    }
    while let Some(p) = stack.pop() {
        let (x, y) = (p % width, p / width);
        let mut push = |q: usize| {
            if !grid[q] && !outside[q] {
                outside[q] = true;
                stack.push(q);
            }
        };
        if x > 0 {
            push(p - 1);
        }
        if x + 1 < width {
            push(p + 1);
        }
        if y > 0 {
            push(p - width);
        }
        if y + 1 < height {
            push(p + width);
        }
    }
    outside.iter().map(|&o| !o).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn from_rows(rows: &[&str]) -> (Vec<bool>, usize, usize) {
        let w = rows[0].len();
        let g = rows
            .iter()
            .flat_map(|r| r.chars().map(|c| c == '#'))
            .collect();
        (g, w, rows.len())
    }

    #[test]
    fn closing_bridges_a_one_pixel_gap() {
        let (g, w, h) = from_rows(&[
            ".......", //
            ".##.##.", //
            ".......",
        ]);
        let c = close(&g, w, h, 2);
        assert!(c[w + 3]);
        for (a, b) in g.iter().zip(&c) {
            assert!(!a || *b, "closing must be extensive");
        }
    }

    #[test]
    fn closing_is_idempotent() {
        let (g, w, h) = from_rows(&[
            "#...#....", //
            ".#.#..##.", //
            "..#...#..", //
            ".....##.#",
        ]);
        let once = close(&g, w, h, 2);
        assert_eq!(close(&once, w, h, 2), once);
    }

    #[test]
    fn components_are_eight_connected() {
        let (g, w, h) = from_rows(&[
            "#...", //
            ".#..", //
            "...#",
        ]);
        let (_, n) = label_components(&g, w, h);
        assert_eq!(n, 2);
        let kept = remove_small_components(&g, w, h, 2);
        assert_eq!(kept.iter().filter(|&&v| v).count(), 2);
    }

    #[test]
    fn holes_are_filled_but_border_bays_are_not() {
        let (g, w, h) = from_rows(&[
            "#####.", //
            "#...#.", //
            "#####.", //
            "..#..#",
        ]);
        let f = fill_holes(&g, w, h);
        assert!(f[w + 1] && f[w + 2] && f[w + 3]);
        assert!(!f[5] && !f[3 * w]);
    }
}
