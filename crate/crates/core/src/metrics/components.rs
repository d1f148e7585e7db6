//! Two-pass 8-connected component labeling.

use ndarray::Array2;

fn find(parent: &mut [u32], mut x: u32) -> u32 {
    while parent[x as usize] != x {
        let p = parent[x as usize];
        parent[x as usize] = parent[p as usize];
        x = p;
    }
    x
}

fn union(parent: &mut [u32], a: u32, b: u32) {
    let (ra, rb) = (find(parent, a), find(parent, b));
    if ra != rb {
        let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
        parent[hi as usize] = lo;
    }
}

/// Labels nonzero pixels of `mask` by 8-connected component. Background is 0
/// and components are numbered `1..=count` in raster order of their first
/// pixel.
pub fn label_components(mask: &Array2<u8>) -> (Array2<u32>, usize) {
    let (h, w) = mask.dim();
    let mut labels = Array2::<u32>::zeros((h, w));
    let mut parent: Vec<u32> = vec![0];
    for y in 0..h {
        for x in 0..w {
            if mask[[y, x]] == 0 {
                continue;
            }
            let mut neighbors = [0u32; 4];
            let mut n = 0;
            let mut push = |l: u32| {
                if l != 0 {
                    neighbors[n] = l;
                    n += 1;
                }
            };
            if x > 0 {
                push(labels[[y, x - 1]]);
            }
            if y > 0 {
                if x > 0 {
                    push(labels[[y - 1, x - 1]]);
                }
                push(labels[[y - 1, x]]);
                if x + 1 < w {
                    push(labels[[y - 1, x + 1]]);
                }
            }
            labels[[y, x]] = if n == 0 {
                let l = parent.len() as u32;
                parent.push(l);
                l
            } else {
                let first = neighbors[0];
                for &other in &neighbors[1..n] {
                    union(&mut parent, first, other);
                }
                first
            };
        }
    }
    let mut remap = vec![0u32; parent.len()];
    let mut count = 0u32;
    for l in 1..parent.len() as u32 {
        let root = find(&mut parent, l);
        if remap[root as usize] == 0 {
            count += 1;
            remap[root as usize] = count;
        }
        remap[l as usize] = remap[root as usize];
    }
    labels.mapv_inplace(|l| remap[l as usize]);
    (labels, count as usize)
}
