//! Procedural stroke glyphs: each class is a random arrangement of curved strokes,
//! each instance a jittered, shifted and rescaled rendering of it.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::episodes::{ClassIndexedDataset, ClassRecord};
use crate::rng::seeded;

type Point = (f64, f64);

/// Quadratic Bezier strokes in unit coordinates.
#[derive(Debug, Clone)]
struct Glyph {
    strokes: Vec<[Point; 3]>,
}

fn random_glyph(rng: &mut impl Rng) -> Glyph {
    let n = rng.random_range(2..=4);
    let mut p = || (rng.random_range(0.15..0.85), rng.random_range(0.15..0.85));
    Glyph {
        strokes: (0..n).map(|_| [p(), p(), p()]).collect(),
    }
}

fn segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt()
}

fn render(glyph: &Glyph, side: usize, rng: &mut impl Rng) -> Vec<f64> {
    let jitter = Normal::new(0.0, 0.025).expect("valid sd");
    let scale = rng.random_range(0.9..1.1);
    let shift = (rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05));
    let place = |p: Point, rng: &mut dyn rand::RngCore| -> Point {
        let q = (p.0 + jitter.sample(rng), p.1 + jitter.sample(rng));
        (
            ((q.0 - 0.5) * scale + 0.5 + shift.0) * side as f64,
            ((q.1 - 0.5) * scale + 0.5 + shift.1) * side as f64,
        )
    };
    let mut polylines = Vec::new();
    for stroke in &glyph.strokes {
        let [a, b, c] = stroke.map(|p| place(p, rng));
        let pts: Vec<Point> = (0..=12)
            .map(|i| {
                let t = i as f64 / 12.0;
                let u = 1.0 - t;
                (u * u * a.0 + 2.0 * u * t * b.0 + t * t * c.0, u * u * a.1 + 2.0 * u * t * b.1 + t * t * c.1)
            })
            .collect();
        polylines.push(pts);
    }
    let half_width = 0.04 * side as f64;
    let mut img = vec![0.0; side * side];
    for (i, px) in img.iter_mut().enumerate() {
        let p = ((i % side) as f64 + 0.5, (i / side) as f64 + 0.5);
        let d = polylines
            .iter()
            .flat_map(|pts| pts.windows(2).map(move |w| segment_distance(p, w[0], w[1])))
            .fold(f64::INFINITY, f64::min);
        *px = (1.0 + half_width - d).clamp(0.0, 1.0);
    }
    img
}

/// `classes` glyph classes with `per_class` renderings each, `side x side` pixels.
pub fn strokes_dataset(classes: usize, per_class: usize, side: usize, seed: u64) -> ClassIndexedDataset {
    let mut rng = seeded(seed);
    let records = (0..classes)
        .map(|c| {
            let glyph = random_glyph(&mut rng);
            ClassRecord {
                class_id: format!("glyph{c:04}"),
                images: (0..per_class).map(|_| render(&glyph, side, &mut rng)).collect(),
            }
        })
        .collect();
    ClassIndexedDataset::new(records, side, side).expect("rendered glyphs are valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn glyphs_are_valid_and_reproducible() {
        let a = strokes_dataset(5, 4, 28, 3);
        assert_eq!(a, strokes_dataset(5, 4, 28, 3));
        assert_eq!(a.len(), 5);
        for c in a.classes() {
            for im in &c.images {
                let ink = im.iter().sum::<f64>() / im.len() as f64;
                assert!(ink > 0.03 && ink < 0.6, "ink {ink}");
            }
        }
    }

    #[test]
    fn instances_resemble_their_class() {
        let ds = strokes_dataset(2, 6, 28, 4);
        let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
        let c0 = &ds.classes()[0].images;
        let c1 = &ds.classes()[1].images;
        let within: f64 = (1..6).map(|i| dist(&c0[0], &c0[i])).sum::<f64>() / 5.0;
        let between: f64 = (0..6).map(|i| dist(&c0[0], &c1[i])).sum::<f64>() / 6.0;
        assert!(within < between, "{within} vs {between}");
    }
}
