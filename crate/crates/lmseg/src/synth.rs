//! Procedural labeled terrain tiles: Delaunay-triangulated height fields of
//! gently undulating ground crossed by narrow ridges. Ridge faces carry
//! label 1, everything else label 0; face colors correlate weakly with the
//! label so geometry stays the decisive signal.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use spade::{DelaunayTriangulation, Point2, Triangulation};

use crate::mesh::TriMesh;
use crate::rng::{derive_seed, rng_from_seed};

/// Tile side length in generator units.
const TILE_SIZE: f64 = 30.0;
/// Ridge contribution above which a face counts as ridge.
const LABEL_THRESHOLD: f64 = 0.15;

struct Ridge {
    a: [f64; 2],
    b: [f64; 2],
    width: f64,
    height: f64,
}

impl Ridge {
    fn profile(&self, x: f64, y: f64) -> f64 {
        // distance from (x, y) to the segment a-b
        let dx = self.b[0] - self.a[0];
        let dy = self.b[1] - self.a[1];
        let len_sq = dx * dx + dy * dy;
        let t = (((x - self.a[0]) * dx + (y - self.a[1]) * dy) / len_sq).clamp(0.0, 1.0);
        let px = self.a[0] + t * dx;
        let py = self.a[1] + t * dy;
        let d = ((x - px).powi(2) + (y - py).powi(2)).sqrt();
        if d >= self.width {
            0.0
        } else {
            let u = 1.0 - (d / self.width).powi(2);
            self.height * u * u
        }
    }
}

/// Round unlabeled bump with the same height range as the ridges, so the
/// elongated shape is what separates wall from mound, not elevation.
struct Mound {
    center: [f64; 2],
    radius: f64,
    height: f64,
}

impl Mound {
    fn profile(&self, x: f64, y: f64) -> f64 {
        let d = ((x - self.center[0]).powi(2) + (y - self.center[1]).powi(2)).sqrt();
        if d >= self.radius {
            0.0
        } else {
            let u = 1.0 - (d / self.radius).powi(2);
            self.height * u * u
        }
    }
}

struct Terrain {
    waves: Vec<(f64, f64, f64, f64, f64)>, // amplitude, kx, ky, phase_x, phase_y
    ridges: Vec<Ridge>,
    /// Unlabeled clutter: short wall stubs with the same cross-section as
    /// the real walls, plus a few round mounds. Only structure length and
    /// shape separate the classes.
    distractors: Vec<Ridge>,
    mounds: Vec<Mound>,
}

fn random_segment(rng: &mut ChaCha8Rng, min_len: f64, max_len: f64) -> ([f64; 2], [f64; 2]) {
    loop {
        let a = [
            rng.gen_range(2.0..TILE_SIZE - 2.0),
            rng.gen_range(2.0..TILE_SIZE - 2.0),
        ];
        let angle = rng.gen_range(0.0..std::f64::consts::TAU);
        let len = rng.gen_range(min_len..max_len);
        let b = [a[0] + len * angle.cos(), a[1] + len * angle.sin()];
        if (2.0..TILE_SIZE - 2.0).contains(&b[0]) && (2.0..TILE_SIZE - 2.0).contains(&b[1]) {
            return (a, b);
        }
    }
}

fn make_terrain(rng: &mut ChaCha8Rng) -> Terrain {
    let waves = (0..4)
        .map(|_| {
            let amplitude = rng.gen_range(0.06..0.18);
            let wavelength_x = rng.gen_range(5.0..16.0);
            let wavelength_y = rng.gen_range(5.0..16.0);
            let kx = std::f64::consts::TAU / wavelength_x;
            let ky = std::f64::consts::TAU / wavelength_y;
            let phase_x = rng.gen_range(0.0..std::f64::consts::TAU);
            let phase_y = rng.gen_range(0.0..std::f64::consts::TAU);
            (amplitude, kx, ky, phase_x, phase_y)
        })
        .collect();
    let mut ridges = Vec::new();
    let mut distractors: Vec<Ridge> = Vec::new();
    for _ in 0..4 {
        let (a, b) = random_segment(rng, 15.0, 24.0);
        let width = rng.gen_range(0.8..1.1);
        let height = rng.gen_range(0.45..0.7);
        ridges.push(Ridge { a, b, width, height });
        // most walls get a parallel row of broken stubs with the same
        // cross-section; continuity along the structure is then the only
        // cue separating wall from clutter
        if rng.gen_bool(0.75) {
            let dx = b[0] - a[0];
            let dy = b[1] - a[1];
            let len = (dx * dx + dy * dy).sqrt();
            let (nx, ny) = (-dy / len, dx / len);
            let side = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let gap = side * rng.gen_range(1.6..2.6);
            let mut t = rng.gen_range(0.0..0.1);
            while t < 1.0 {
                let stub_len = rng.gen_range(1.0..2.0) / len;
                let stub_end = (t + stub_len).min(1.0);
                let sa = [a[0] + t * dx + nx * gap, a[1] + t * dy + ny * gap];
                let sb = [
                    a[0] + stub_end * dx + nx * gap,
                    a[1] + stub_end * dy + ny * gap,
                ];
                distractors.push(Ridge {
                    a: sa,
                    b: sb,
                    width,
                    height,
                });
                t = stub_end + rng.gen_range(1.5..3.0) / len;
            }
        }
    }
    for _ in 0..rng.gen_range(3..6) {
        let (a, b) = random_segment(rng, 1.5, 3.5);
        distractors.push(Ridge {
            a,
            b,
            width: rng.gen_range(0.8..1.1),
            height: rng.gen_range(0.45..0.7),
        });
    }
    let mounds = (0..rng.gen_range(2..5))
        .map(|_| Mound {
            center: [
                rng.gen_range(2.0..TILE_SIZE - 2.0),
                rng.gen_range(2.0..TILE_SIZE - 2.0),
            ],
            radius: rng.gen_range(1.2..2.2),
            height: rng.gen_range(0.35..0.6),
        })
        .collect();
    Terrain {
        waves,
        ridges,
        distractors,
        mounds,
    }
}

fn ground_height(terrain: &Terrain, x: f64, y: f64) -> f64 {
    let waves: f64 = terrain
        .waves
        .iter()
        .map(|&(a, kx, ky, px, py)| a * (kx * x + px).sin() * (ky * y + py).sin())
        .sum();
    let clutter = terrain
        .distractors
        .iter()
        .map(|r| r.profile(x, y))
        .chain(terrain.mounds.iter().map(|m| m.profile(x, y)))
        .fold(0.0, f64::max);
    waves + clutter
}

fn ridge_height(terrain: &Terrain, x: f64, y: f64) -> f64 {
    terrain
        .ridges
        .iter()
        .map(|r| r.profile(x, y))
        .fold(0.0, f64::max)
}

/// One labeled, colored tile. Deterministic in the seed; always contains
/// both classes.
pub fn synth_tile(seed: u64, n_points: usize) -> TriMesh {
    let mut salt = 0u64;
    loop {
        let mesh = synth_tile_attempt(derive_seed(seed, 0x711e, salt), n_points);
        let labels = mesh.face_labels.as_ref().expect("generator labels faces");
        let positives = labels.iter().filter(|&&l| l == 1).count();
        if positives > 0 && positives < labels.len() {
            return mesh;
        }
        salt += 1;
        assert!(salt < 16, "generator failed to place ridges");
    }
}

fn synth_tile_attempt(seed: u64, n_points: usize) -> TriMesh {
    let mut rng = rng_from_seed(seed);
    let terrain = make_terrain(&mut rng);

    let mut triangulation: DelaunayTriangulation<Point2<f64>> = DelaunayTriangulation::new();
    for _ in 0..n_points {
        let x = rng.gen_range(0.0..TILE_SIZE);
        let y = rng.gen_range(0.0..TILE_SIZE);
        // NaN-free by construction
        let _ = triangulation.insert(Point2::new(x, y));
    }

    let vertices: Vec<[f64; 3]> = triangulation
        .vertices()
        .map(|v| {
            let p = v.position();
            let z = ground_height(&terrain, p.x, p.y)
                + ridge_height(&terrain, p.x, p.y)
                + rng.gen_range(-0.03..0.03); // scan-like surface roughness
            [p.x, p.y, z]
        })
        .collect();
    let faces: Vec<[u32; 3]> = triangulation
        .inner_faces()
        .map(|f| {
            let [a, b, c] = f.vertices();
            [
                a.fix().index() as u32,
                b.fix().index() as u32,
                c.fix().index() as u32,
            ]
        })
        .collect();

    let mut labels = Vec::with_capacity(faces.len());
    let mut colors = Vec::with_capacity(faces.len());
    for f in &faces {
        let bx = (vertices[f[0] as usize][0] + vertices[f[1] as usize][0] + vertices[f[2] as usize][0]) / 3.0;
        let by = (vertices[f[0] as usize][1] + vertices[f[1] as usize][1] + vertices[f[2] as usize][1]) / 3.0;
        let ridge = ridge_height(&terrain, bx, by);
        let label = (ridge > LABEL_THRESHOLD) as u16;
        labels.push(label);
        // weak color cue: greenish ground, brownish ridges, heavy noise
        let (h0, s0, v0) = if label == 1 {
            (0.18, 0.40, 0.52)
        } else {
            (0.30, 0.45, 0.45)
        };
        colors.push([
            (h0 + rng.gen_range(-0.10..0.10f64)).clamp(0.0, 1.0),
            (s0 + rng.gen_range(-0.12..0.12f64)).clamp(0.0, 1.0),
            (v0 + rng.gen_range(-0.12..0.12f64)).clamp(0.0, 1.0),
        ]);
    }

    let mut mesh = TriMesh::new(vertices, faces).expect("triangulation is valid");
    mesh.face_colors = Some(colors);
    mesh.face_labels = Some(labels);
    mesh
}

/// A deterministic list of tiles, one derived seed per tile.
pub fn synth_dataset(n_tiles: usize, seed: u64, n_points: usize) -> Vec<TriMesh> {
    (0..n_tiles)
        .map(|i| synth_tile(derive_seed(seed, i as u64, 0xda7a), n_points))
        .collect()
}
