use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::schema::{caption_from_variant, AttributeSchema, Attributes, PALETTE};
use crate::tensor::Tensor;

pub const IMAGE_SIDE: usize = 32;
pub const CHANNELS: usize = 3;
const CELL: usize = IMAGE_SIDE / 4;

/// Grid cells `(row, col)` owned by each axis. The color axis takes the
/// central 2×2 block; every other axis takes a pair of border cells.
pub const REGIONS: [(&str, &[(usize, usize)]); 7] = [
    ("category", &[(0, 0), (0, 1)]),
    ("subcategory", &[(0, 2), (0, 3)]),
    ("color", &[(1, 1), (1, 2), (2, 1), (2, 2)]),
    ("pattern", &[(3, 0), (3, 1)]),
    ("sleeve", &[(3, 2), (3, 3)]),
    ("length", &[(1, 0), (2, 0)]),
    ("fit", &[(1, 3), (2, 3)]),
];

/// Grayscale texture for pattern value `index` at pixel `(y, x)`.
fn texture(index: usize, y: usize, x: usize) -> f32 {
    match index {
        0 => 0.5,
        1 => ((y % 4) < 2) as u8 as f32,
        2 => (y % 4 == 1 && x % 4 == 1) as u8 as f32,
        _ => ((y / 2 + x / 2) % 2) as f32,
    }
}

/// The region-block image plus uniform noise in `[−noise, noise)` drawn
/// from `seed`. `[32, 32, 3]`, channels last.
pub fn render_image(
    schema: &AttributeSchema,
    attrs: &Attributes,
    seed: u64,
    noise: f32,
) -> Result<Tensor<f32>, String> {
    schema.check(attrs)?;
    let mut img = vec![0.0f32; IMAGE_SIDE * IMAGE_SIDE * CHANNELS];
    for (axis, cells) in REGIONS {
        let index = schema.value_index(attrs, axis)?;
        for &(row, col) in cells {
            for y in row * CELL..(row + 1) * CELL {
                for x in col * CELL..(col + 1) * CELL {
                    let px = &mut img[(y * IMAGE_SIDE + x) * CHANNELS..][..CHANNELS];
                    if axis == "pattern" {
                        px.fill(texture(index, y, x));
                    } else {
                        px.copy_from_slice(&PALETTE[index]);
                    }
                }
            }
        }
    }
    if noise > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in &mut img {
            *v += rng.gen_range(-noise..noise);
        }
    }
    Ok(Tensor::from_vec(vec![IMAGE_SIDE, IMAGE_SIDE, CHANNELS], img).expect("fixed image shape"))
}

/// Caption of an item; the grammar variant is drawn from `seed`.
pub fn render_caption(attrs: &Attributes, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6361_7074_696f_6e00);
    caption_from_variant(attrs, rng.gen_range(0..6))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::schema::AXES;

    fn attrs(values: [&str; 7]) -> Attributes {
        AXES.iter().zip(values).map(|(a, v)| (a.to_string(), v.to_string())).collect()
    }

    const RED: [&str; 7] = ["dress", "wrap", "red", "striped", "sleeveless", "midi", "slim"];
    const BLUE: [&str; 7] = ["dress", "wrap", "blue", "striped", "sleeveless", "midi", "slim"];

    #[test]
    fn regions_tile_the_grid() {
        let mut seen = [[0; 4]; 4];
        for (_, cells) in REGIONS {
            for &(r, c) in cells {
                seen[r][c] += 1;
            }
        }
        assert_eq!(seen, [[1; 4]; 4]);
    }

    #[test]
    fn color_change_stays_in_color_region() {
        let s = AttributeSchema::default();
        let a = render_image(&s, &attrs(RED), 5, 0.0).unwrap();
        let b = render_image(&s, &attrs(BLUE), 5, 0.0).unwrap();
        for y in 0..IMAGE_SIDE {
            for x in 0..IMAGE_SIDE {
                let inside = (CELL..3 * CELL).contains(&y) && (CELL..3 * CELL).contains(&x);
                let i = (y * IMAGE_SIDE + x) * CHANNELS;
                let same = a.data()[i..i + 3] == b.data()[i..i + 3];
                assert_eq!(same, !inside, "pixel ({y}, {x})");
            }
        }
    }

    #[test]
    fn noise_is_seeded_and_bounded() {
        let s = AttributeSchema::default();
        let clean = render_image(&s, &attrs(RED), 1, 0.0).unwrap();
        let a = render_image(&s, &attrs(RED), 1, 0.05).unwrap();
        let b = render_image(&s, &attrs(RED), 1, 0.05).unwrap();
        assert_eq!(a, b);
        assert!(a.data().iter().zip(clean.data()).all(|(x, y)| (x - y).abs() <= 0.05));
        assert_ne!(a, clean);
    }

    #[test]
    fn unknown_value_is_an_error() {
        let s = AttributeSchema::default();
        let mut bad = attrs(RED);
        bad.insert("color".into(), "mauve".into());
        assert!(render_image(&s, &bad, 0, 0.0).is_err());
        bad.insert("color".into(), "red".into());
        bad.insert("subcategory".into(), "parka".into());
        assert!(render_image(&s, &bad, 0, 0.0).is_err());
    }

    #[test]
    fn caption_names_each_attribute_once() {
        let a = attrs(RED);
        for seed in 0..20 {
            let cap = render_caption(&a, seed);
            let toks = crate::model::tokenize(&cap);
            for v in RED {
                assert_eq!(toks.iter().filter(|t| *t == v).count(), 1, "{cap}");
            }
            assert_eq!(cap, render_caption(&a, seed));
        }
    }
}
