use selfir::imaging::Image;
use selfir::sharpmask::SharpMask;
use selfir::Result;

const SELECTED_TINT: [f32; 3] = [0.1, 0.9, 0.2];
const GRID_COLOR: [f32; 3] = [1.0, 0.85, 0.0];

/// Patch-grid overlay: selected patches tinted green, rejected ones dimmed,
/// patch borders drawn in yellow. Pixels outside the grid are left as-is.
pub fn render(base: &Image, mask: &SharpMask) -> Result<Image> {
    let (h, w, c) = base.dims();
    let grid = mask.grid();
    let (oy, ox) = grid.center_offset(h, w);
    let p = grid.patch_size;
    let mut data = base.clamped().into_data();
    for n in 0..grid.len() {
        let (py, px) = grid.origin(n);
        let selected = mask.get(n) == 1;
        for y in oy + py..oy + py + p {
            for x in ox + px..ox + px + p {
                let border = y == oy + py || x == ox + px || y + 1 == oy + py + p || x + 1 == ox + px + p;
                for ch in 0..c {
                    let v = &mut data[[y, x, ch]];
                    let k = ch.min(2);
                    *v = if border {
                        GRID_COLOR[k]
                    } else if selected {
                        0.6 * *v + 0.4 * SELECTED_TINT[k]
                    } else {
                        0.45 * *v
                    };
                }
            }
        }
    }
    Image::new(data, base.colorspace())
}
