//! Corpus generation.
//!
//! Each subset is built around a base scene `B` and three shape-preserving
//! "units" `a`, `b`, `c` (background change, recolor, resize, or restyle of
//! distinct objects). Its six members are `B`, `B+a`, `B+b`, `B+c`, `B+ab` and
//! `B+abc`. Triplets target `B+ab` or `B+abc`; their references are `B` with up
//! to two shape-changing differences that the script undoes. Applying only part
//! of a script therefore lands on another member of the same subset.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::{
    apply_edits, Attribute, Corpus, Edit, EditScript, Object, RenderConfig, Scene, Selector, Triplet,
    MAX_OBJECTS, MAX_SCRIPT_LEN, N_BACKGROUNDS, N_COLORS, N_SHAPES, N_SIZES, SUBSET_SIZE,
};
use crate::error::{Error, Result};
use crate::rng::Rng;

const TAG_GENERATE: u64 = 0x6765_6E65;
/// Reference renders use nonces above every candidate id.
pub const REFERENCE_NONCE_BASE: u64 = 1 << 32;
const MAX_ATTEMPTS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    /// Number of candidate scenes; a multiple of 6.
    pub candidates: usize,
    pub triplets_per_subset: usize,
    pub val_subsets: usize,
    pub test_subsets: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Upper bound on shape-changing edits per script (0..=2).
    pub max_shape_edits: usize,
    pub render: RenderConfig,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            candidates: 3000,
            triplets_per_subset: 8,
            val_subsets: 10,
            test_subsets: 10,
            min_objects: 1,
            max_objects: 4,
            max_shape_edits: 2,
            render: RenderConfig::default(),
        }
    }
}

impl CorpusConfig {
    pub fn subsets(&self) -> usize {
        self.candidates / SUBSET_SIZE
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.candidates == 0 || self.candidates % SUBSET_SIZE != 0 {
            return bad("candidates must be a positive multiple of 6");
        }
        if self.triplets_per_subset == 0 {
            return bad("triplets_per_subset must be positive");
        }
        if self.val_subsets + self.test_subsets >= self.subsets() {
            return bad("val_subsets + test_subsets must leave at least one training subset");
        }
        if self.min_objects == 0 || self.max_objects > MAX_OBJECTS || self.min_objects > self.max_objects {
            return bad("object counts must satisfy 1 <= min_objects <= max_objects <= 4");
        }
        if self.max_shape_edits > MAX_SCRIPT_LEN - 2 {
            return bad("max_shape_edits must be at most 2");
        }
        if self.render.d_raw == 0 {
            return bad("render.d_raw must be positive");
        }
        if !(self.render.noise_std >= 0.0 && self.render.noise_std.is_finite()) {
            return bad("render.noise_std must be finite and non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Unit {
    Background(u8),
    Color { slot: usize, value: u8 },
    Size { slot: usize, value: u8 },
    Restyle { slot: usize, color: u8, size: u8 },
}

impl Unit {
    fn slot(&self) -> Option<usize> {
        match *self {
            Unit::Background(_) => None,
            Unit::Color { slot, .. } | Unit::Size { slot, .. } | Unit::Restyle { slot, .. } => Some(slot),
        }
    }

    fn conflicts(&self, other: &Unit) -> bool {
        use Unit::*;
        match (self, other) {
            (Background(_), Background(_)) => true,
            (Color { slot: a, .. }, Color { slot: b, .. }) | (Size { slot: a, .. }, Size { slot: b, .. }) => a == b,
            (Restyle { slot: a, .. }, o) | (o, Restyle { slot: a, .. }) => o.slot() == Some(*a),
            _ => false,
        }
    }

    fn apply(&self, objects: &mut [Object], background: &mut u8) {
        match *self {
            Unit::Background(v) => *background = v,
            Unit::Color { slot, value } => objects[slot].color = value,
            Unit::Size { slot, value } => objects[slot].size = value,
            Unit::Restyle { slot, color, size } => {
                objects[slot].color = color;
                objects[slot].size = size;
            }
        }
    }
}

fn random_object(rng: &mut Rng) -> Object {
    Object::new(
        rng.below(N_SHAPES as u64) as u8,
        rng.below(N_COLORS as u64) as u8,
        rng.below(N_SIZES as u64) as u8,
    )
}

fn other_value(rng: &mut Rng, n: u8, old: u8) -> u8 {
    (old + 1 + rng.below(n as u64 - 1) as u8) % n
}

fn apply_units(base: &[Object], bg: u8, units: &[Unit]) -> Result<Scene> {
    let mut objs = base.to_vec();
    let mut b = bg;
    for u in units {
        u.apply(&mut objs, &mut b);
    }
    Scene::new(objs, b)
}

struct SubsetPlan {
    base: Vec<Object>,
    background: u8,
    units: [Unit; 3],
    members: Vec<Scene>,
}

fn plan_subset(cfg: &CorpusConfig, rng: &mut Rng, taken: &HashSet<Scene>) -> Option<SubsetPlan> {
    let n = cfg.min_objects + rng.below_usize(cfg.max_objects - cfg.min_objects + 1);
    let base: Vec<Object> = (0..n).map(|_| random_object(rng)).collect();
    let background = rng.below(N_BACKGROUNDS as u64) as u8;
    let b_scene = Scene::new(base.clone(), background).ok()?;
    if b_scene.has_duplicate_objects() {
        return None;
    }
    // Keep slot indices aligned with the canonical order of B.
    let base = b_scene.objects().to_vec();

    let mut pool = vec![Unit::Background(other_value(rng, N_BACKGROUNDS, background))];
    for (slot, o) in base.iter().enumerate() {
        pool.push(Unit::Color {
            slot,
            value: other_value(rng, N_COLORS, o.color),
        });
        pool.push(Unit::Size {
            slot,
            value: other_value(rng, N_SIZES, o.size),
        });
        pool.push(Unit::Restyle {
            slot,
            color: other_value(rng, N_COLORS, o.color),
            size: other_value(rng, N_SIZES, o.size),
        });
    }
    rng.shuffle(&mut pool);
    let mut units = Vec::with_capacity(3);
    for u in pool {
        if units.len() == 3 {
            break;
        }
        if units.iter().all(|x: &Unit| !x.conflicts(&u)) {
            units.push(u);
        }
    }
    if units.len() < 3 {
        return None;
    }
    let units = [units[0], units[1], units[2]];
    let combos: [&[Unit]; SUBSET_SIZE] = [
        &[],
        &units[0..1],
        &units[1..2],
        &units[2..3],
        &units[0..2],
        &units[0..3],
    ];
    let mut members = Vec::with_capacity(SUBSET_SIZE);
    let mut local = HashSet::new();
    for c in combos {
        let s = apply_units(&base, background, c).ok()?;
        if s.has_duplicate_objects() || taken.contains(&s) || !local.insert(s.clone()) {
            return None;
        }
        members.push(s);
    }
    Some(SubsetPlan {
        base,
        background,
        units,
        members,
    })
}

/// A script step before its selector is fixed.
#[derive(Debug, Clone, Copy)]
enum Step {
    Add { slot: usize },
    Remove { slot: usize },
    Replace { slot: usize },
    ModifyShape { slot: usize },
    Unit(Unit),
}

/// Builds one triplet script turning a perturbed copy of `B` into `B + units`.
fn plan_triplet(
    cfg: &CorpusConfig,
    rng: &mut Rng,
    plan: &SubsetPlan,
    units: &[Unit],
    target: &Scene,
) -> Option<(Scene, EditScript)> {
    let max_shape = cfg.max_shape_edits.min(MAX_SCRIPT_LEN - units.len());
    let n_shape = rng.below_usize(max_shape + 1);
    // Per tracked slot: state in the reference and state after the script.
    let mut target_objs = plan.base.clone();
    let mut bg_t = plan.background;
    for u in units {
        u.apply(&mut target_objs, &mut bg_t);
    }
    let mut reference: Vec<Option<Object>> = plan.base.iter().copied().map(Some).collect();
    let mut after: Vec<Option<Object>> = target_objs.iter().copied().map(Some).collect();
    let touched: HashSet<usize> = units.iter().filter_map(Unit::slot).collect();
    let mut free: Vec<usize> = (0..plan.base.len()).filter(|s| !touched.contains(s)).collect();
    rng.shuffle(&mut free);

    let mut steps: Vec<Step> = units.iter().copied().map(Step::Unit).collect();
    for _ in 0..n_shape {
        let kind = rng.below(4);
        if kind == 1 {
            reference.push(Some(random_object(rng)));
            after.push(None);
            steps.push(Step::Remove {
                slot: reference.len() - 1,
            });
            continue;
        }
        let slot = free.pop()?;
        let orig = plan.base[slot];
        match kind {
            0 => {
                reference[slot] = None;
                steps.push(Step::Add { slot });
            }
            2 => {
                let mut x = random_object(rng);
                x.shape = other_value(rng, N_SHAPES, orig.shape);
                reference[slot] = Some(x);
                steps.push(Step::Replace { slot });
            }
            _ => {
                reference[slot] = Some(orig.with(Attribute::Shape, other_value(rng, N_SHAPES, orig.shape)));
                steps.push(Step::ModifyShape { slot });
            }
        }
    }
    let ref_objs: Vec<Object> = reference.iter().flatten().copied().collect();
    if ref_objs.is_empty() || ref_objs.len() > MAX_OBJECTS {
        return None;
    }
    let ref_scene = Scene::new(ref_objs, plan.background).ok()?;
    if ref_scene.has_duplicate_objects() {
        return None;
    }

    rng.shuffle(&mut steps);
    let mut current = reference.clone();
    let mut edits = Vec::with_capacity(steps.len());
    for step in steps {
        let edit = match step {
            Step::Add { slot } => {
                current[slot] = after[slot];
                Edit::Add {
                    object: after[slot]?,
                }
            }
            Step::Remove { slot } => {
                let sel = Selector::exact(current[slot]?);
                current[slot] = None;
                Edit::Remove { selector: sel }
            }
            Step::Replace { slot } => {
                let sel = Selector::exact(current[slot]?);
                current[slot] = after[slot];
                Edit::Replace {
                    selector: sel,
                    object: after[slot]?,
                }
            }
            Step::ModifyShape { slot } => {
                let sel = Selector::exact(current[slot]?);
                let new_shape = plan.base[slot].shape;
                current[slot] = current[slot].map(|o| o.with(Attribute::Shape, new_shape));
                Edit::Modify {
                    selector: sel,
                    attribute: Attribute::Shape,
                    value: new_shape,
                }
            }
            Step::Unit(u) => match u {
                Unit::Background(v) => Edit::ChangeBackground { background: v },
                Unit::Color { slot, value } => {
                    let sel = Selector::exact(current[slot]?);
                    current[slot] = current[slot].map(|o| o.with(Attribute::Color, value));
                    Edit::Modify {
                        selector: sel,
                        attribute: Attribute::Color,
                        value,
                    }
                }
                Unit::Size { slot, value } => {
                    let sel = Selector::exact(current[slot]?);
                    current[slot] = current[slot].map(|o| o.with(Attribute::Size, value));
                    Edit::Modify {
                        selector: sel,
                        attribute: Attribute::Size,
                        value,
                    }
                }
                Unit::Restyle { slot, color, size } => {
                    let sel = Selector::exact(current[slot]?);
                    let new = Object::new(current[slot]?.shape, color, size);
                    current[slot] = Some(new);
                    Edit::Replace {
                        selector: sel,
                        object: new,
                    }
                }
            },
        };
        edits.push(edit);
    }
    let script = EditScript::new(edits).ok()?;
    // Intermediate duplicates can make a selector ambiguous; the interpreter is the judge.
    match apply_edits(&ref_scene, &script) {
        Ok(s) if &s == target => Some((ref_scene, script)),
        _ => None,
    }
}

/// Generates a corpus; a pure function of `(config, seed)`.
pub fn gen_corpus(config: &CorpusConfig, seed: u64) -> Result<Corpus> {
    config.validate()?;
    let mut rng = Rng::with_tag(seed, TAG_GENERATE);
    let n_subsets = config.subsets();
    let mut taken = HashSet::new();
    let mut candidates = Vec::with_capacity(config.candidates);
    let mut subsets = Vec::with_capacity(n_subsets);
    let mut per_subset_triplets = Vec::with_capacity(n_subsets);
    let mut nonce = REFERENCE_NONCE_BASE;

    for _ in 0..n_subsets {
        let plan = (0..MAX_ATTEMPTS)
            .find_map(|_| plan_subset(config, &mut rng, &taken))
            .ok_or_else(|| Error::InvalidConfig("could not construct a valid subset".into()))?;
        let mut order: Vec<usize> = (0..SUBSET_SIZE).collect();
        rng.shuffle(&mut order);
        let first_id = candidates.len();
        let mut ids = [0usize; SUBSET_SIZE];
        for (pos, &m) in order.iter().enumerate() {
            ids[m] = first_id + pos;
        }
        for &m in &order {
            taken.insert(plan.members[m].clone());
            candidates.push(plan.members[m].clone());
        }
        subsets.push((first_id..first_id + SUBSET_SIZE).collect::<Vec<_>>());

        let mut triplets = Vec::with_capacity(config.triplets_per_subset);
        for t in 0..config.triplets_per_subset {
            // Members 4 and 5 are B+ab and B+abc.
            let (member, units): (usize, &[Unit]) = if t % 2 == 0 {
                (4, &plan.units[0..2])
            } else {
                (5, &plan.units[0..3])
            };
            let target = &plan.members[member];
            let (reference, edits) = (0..MAX_ATTEMPTS)
                .find_map(|_| plan_triplet(config, &mut rng, &plan, units, target))
                .ok_or_else(|| Error::InvalidConfig("could not construct a valid triplet".into()))?;
            triplets.push(Triplet {
                reference,
                edits,
                target_id: ids[member],
                nonce,
            });
            nonce += 1;
        }
        per_subset_triplets.push(triplets);
    }

    let mut order: Vec<usize> = (0..n_subsets).collect();
    rng.shuffle(&mut order);
    let mut split_of = vec![0u8; n_subsets];
    for (rank, &s) in order.iter().enumerate() {
        split_of[s] = if rank < config.test_subsets {
            2
        } else if rank < config.test_subsets + config.val_subsets {
            1
        } else {
            0
        };
    }
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for (s, triplets) in per_subset_triplets.into_iter().enumerate() {
        match split_of[s] {
            0 => train.extend(triplets),
            1 => val.extend(triplets),
            _ => test.extend(triplets),
        }
    }
    Ok(Corpus {
        config: *config,
        seed,
        candidates,
        subsets,
        train,
        val,
        test,
    })
}
