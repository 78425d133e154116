use rand::Rng;
use serde::{Deserialize, Serialize};

/// Object categories; the first four mirror the category-selective ROIs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Face,
    Word,
    Place,
    Body,
    Food,
    Vehicle,
}

impl Category {
    pub const ALL: [Category; 6] = [
        Category::Face,
        Category::Word,
        Category::Place,
        Category::Body,
        Category::Food,
        Category::Vehicle,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::Face => "face",
            Category::Word => "word",
            Category::Place => "place",
            Category::Body => "body",
            Category::Food => "food",
            Category::Vehicle => "vehicle",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Size {
    Small,
    Large,
}

impl Size {
    pub const ALL: [Size; 2] = [Size::Small, Size::Large];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SceneObject {
    pub category: Category,
    /// 1..=3
    pub intensity: u8,
    /// 1 = top-left, 2 = top-right, 3 = bottom-left, 4 = bottom-right.
    pub quadrant: u8,
    pub size: Size,
}

impl SceneObject {
    pub fn is_valid(&self) -> bool {
        (1..=3).contains(&self.intensity) && (1..=4).contains(&self.quadrant)
    }

    /// All 144 single-object attribute combinations at a given quadrant order.
    pub fn enumerate() -> Vec<SceneObject> {
        let mut out = Vec::with_capacity(144);
        for quadrant in 1..=4 {
            for category in Category::ALL {
                for intensity in 1..=3 {
                    for size in Size::ALL {
                        out.push(SceneObject {
                            category,
                            intensity,
                            quadrant,
                            size,
                        });
                    }
                }
            }
        }
        out
    }
}

/// Width of the semantic multi-hot: 6 categories, 3 intensities,
/// 4 quadrants, 2 sizes.
pub const SEMANTIC_DIM: usize = 15;
pub const CAT_OFFSET: usize = 0;
pub const INTENSITY_OFFSET: usize = 6;
pub const QUADRANT_OFFSET: usize = 9;
pub const SIZE_OFFSET: usize = 13;

/// A synthetic stimulus: one or two objects in distinct quadrants, sorted by
/// quadrant.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Scene {
    pub objects: Vec<SceneObject>,
    pub seed: u64,
}

impl Scene {
    pub fn new(mut objects: Vec<SceneObject>, seed: u64) -> Option<Self> {
        objects.sort_by_key(|o| o.quadrant);
        let ok = matches!(objects.len(), 1 | 2)
            && objects.iter().all(SceneObject::is_valid)
            && objects.windows(2).all(|w| w[0].quadrant != w[1].quadrant);
        ok.then_some(Self { objects, seed })
    }

    pub fn is_valid(&self) -> bool {
        Scene::new(self.objects.clone(), self.seed).as_ref() == Some(self)
    }

    /// Union multi-hot over all object attributes.
    pub fn semantics(&self) -> [f64; SEMANTIC_DIM] {
        let mut s = [0.0; SEMANTIC_DIM];
        for o in &self.objects {
            s[CAT_OFFSET + o.category.index()] = 1.0;
            s[INTENSITY_OFFSET + o.intensity as usize - 1] = 1.0;
            s[QUADRANT_OFFSET + o.quadrant as usize - 1] = 1.0;
            s[SIZE_OFFSET + o.size.index()] = 1.0;
        }
        s
    }

    pub fn contains(&self, c: Category) -> bool {
        self.objects.iter().any(|o| o.category == c)
    }
}

/// Draws a scene uniformly: object count 1 or 2 with equal probability, then
/// independent uniform attributes, quadrants without replacement.
pub fn sample_scene<R: Rng + ?Sized>(rng: &mut R) -> Scene {
    let seed: u64 = rng.random();
    let count = if rng.random_bool(0.5) { 1 } else { 2 };
    let mut quads = vec![1u8, 2, 3, 4];
    let mut objects = Vec::with_capacity(count);
    for _ in 0..count {
        let qi = rng.random_range(0..quads.len());
        let quadrant = quads.remove(qi);
        objects.push(SceneObject {
            category: Category::ALL[rng.random_range(0..6)],
            intensity: rng.random_range(1..=3),
            quadrant,
            size: Size::ALL[rng.random_range(0..2)],
        });
    }
    Scene::new(objects, seed).expect("sampled scene is valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn deterministic_per_seed() {
        let a = sample_scene(&mut ChaCha8Rng::seed_from_u64(3));
        let b = sample_scene(&mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
        assert!(a.is_valid());
    }

    #[test]
    fn uniform_categories_and_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 10_000;
        let mut cats = [0usize; 6];
        let mut objects = 0usize;
        let mut singles = 0usize;
        for _ in 0..n {
            let s = sample_scene(&mut rng);
            if s.objects.len() == 1 {
                singles += 1;
            }
            for o in &s.objects {
                cats[o.category.index()] += 1;
                objects += 1;
            }
        }
        let p = 1.0 / 6.0;
        let sd = (objects as f64 * p * (1.0 - p)).sqrt();
        for c in cats {
            assert!((c as f64 - objects as f64 * p).abs() < 3.0 * sd, "{cats:?}");
        }
        let sd = (n as f64 * 0.25).sqrt();
        assert!((singles as f64 - n as f64 / 2.0).abs() < 3.0 * sd);
    }

    #[test]
    fn rejects_shared_quadrant() {
        let o = SceneObject {
            category: Category::Face,
            intensity: 1,
            quadrant: 2,
            size: Size::Small,
        };
        assert!(Scene::new(vec![o, o], 0).is_none());
        assert!(Scene::new(vec![], 0).is_none());
        assert!(Scene::new(vec![SceneObject { intensity: 4, ..o }], 0).is_none());
    }
}
