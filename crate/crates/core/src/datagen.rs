//! Parametric synthetic skeletal motion with exact composite ground truth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::{Matrix, MotionSequence, Part, Skeleton};
use crate::vae::BodyMask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ActionPart {
    Upper,
    Lower,
    Still,
}

/// Motion of one joint relative to its rest position:
/// `amplitude * sin(2 pi frequency t + phase) + drift * frame`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JointMotion {
    /// Per axis, mm.
    pub amplitude: [f64; 3],
    /// Hz.
    pub frequency: f64,
    /// Radians.
    pub phase: f64,
    /// Per axis, mm per frame.
    pub drift: [f64; 3],
}

impl JointMotion {
    fn is_still(&self) -> bool {
        self.amplitude == [0.0; 3] && self.drift == [0.0; 3]
    }

    /// Offset from rest at frame `k` sampled at `fps`.
    pub fn offset(&self, k: usize, fps: f64) -> [f64; 3] {
        let s = (2.0 * std::f64::consts::PI * self.frequency * k as f64 / fps + self.phase).sin();
        [0, 1, 2].map(|a| self.amplitude[a] * s + self.drift[a] * k as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActionSpec {
    pub name: String,
    pub part: ActionPart,
    /// Moving joints by index; every other joint holds its rest position.
    pub joints: Vec<(usize, JointMotion)>,
    /// Gaussian noise added to every non-root coordinate, mm.
    pub noise_std: f64,
}

impl ActionSpec {
    pub fn validate(&self, skeleton: &Skeleton) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(format!("action {}: {msg}", self.name)));
        if self.name.is_empty() || self.name.contains(char::is_whitespace) || self.name.contains('+') {
            return bad("names must be non-empty without whitespace or '+'".into());
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad(format!("noise_std {}", self.noise_std));
        }
        for (j, m) in &self.joints {
            if *j >= skeleton.joint_count() {
                return bad(format!("joint {j} out of range"));
            }
            if m.amplitude.iter().any(|&a| !(a >= 0.0 && a.is_finite()))
                || !(m.frequency >= 0.0 && m.frequency.is_finite())
                || !m.phase.is_finite()
                || m.drift.iter().any(|d| !d.is_finite())
            {
                return bad(format!("joint {j} needs finite non-negative amplitude and frequency"));
            }
            if m.is_still() {
                continue;
            }
            if *j == 0 {
                return bad("the root joint cannot move".into());
            }
            let part = skeleton.part_of(*j);
            let allowed = match self.part {
                ActionPart::Upper => part == Part::Upper,
                ActionPart::Lower => part == Part::Lower,
                ActionPart::Still => false,
            };
            if !allowed {
                return bad(format!("joint {j} is outside the {:?} part", self.part));
            }
        }
        Ok(())
    }
}

/// Skeleton with rest positions (mm, root at the origin).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SkeletonSpec {
    pub names: Vec<String>,
    pub parents: Vec<usize>,
    pub parts: Vec<Part>,
    pub rest: Vec<[f64; 3]>,
}

impl SkeletonSpec {
    pub fn desk8() -> Self {
        let sk = Skeleton::desk8();
        SkeletonSpec {
            names: sk.names().to_vec(),
            parents: (0..sk.joint_count()).map(|j| sk.parent(j)).collect(),
            parts: (0..sk.joint_count()).map(|j| sk.part_of(j)).collect(),
            rest: vec![
                [0.0, 0.0, 0.0],
                [0.0, 0.0, 250.0],
                [0.0, 0.0, 500.0],
                [0.0, 0.0, 650.0],
                [0.0, 250.0, 300.0],
                [0.0, -250.0, 300.0],
                [0.0, 100.0, -850.0],
                [0.0, -100.0, -850.0],
            ],
        }
    }

    pub fn skeleton(&self) -> Result<Skeleton> {
        if self.rest.len() != self.names.len() {
            return Err(Error::Config(format!(
                "{} rest positions for {} joints",
                self.rest.len(),
                self.names.len()
            )));
        }
        if self.rest.first() != Some(&[0.0; 3]) {
            return Err(Error::Config("root rest position must be the origin".into()));
        }
        if self.rest.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Config("rest positions must be finite".into()));
        }
        Skeleton::new(self.parents.clone(), self.parts.clone(), self.names.clone())
    }
}

/// One sequence of `spec`: moving joints follow their sinusoid plus drift,
/// every other joint stays at rest, and the root is fixed at the origin.
pub fn generate_atomic(spec: &ActionSpec, skeleton: &SkeletonSpec, length: usize, fps: f64, seed: u64) -> Result<MotionSequence> {
    let sk = skeleton.skeleton()?;
    spec.validate(&sk)?;
    if length < 2 {
        return Err(Error::Config(format!("sequence length {length} is below 2")));
    }
    if !(fps > 0.0 && fps.is_finite()) {
        return Err(Error::Config(format!("fps {fps} must be positive")));
    }
    let j = sk.joint_count();
    let mut motions = vec![JointMotion::default(); j];
    for (idx, m) in &spec.joints {
        motions[*idx] = *m;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let mut data = Matrix::zeros(length, 3 * j);
    for k in 0..length {
        for joint in 1..j {
            let off = motions[joint].offset(k, fps);
            for a in 0..3 {
                let eps = if spec.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                data.set(k, 3 * joint + a, skeleton.rest[joint][a] + off[a] + eps);
            }
        }
    }
    MotionSequence::new(data, fps, spec.name.clone())
}

/// Exact composite: `M * seq_upper + (1 - M) * seq_lower` per coordinate.
pub fn compose_oracle(seq_upper_action: &MotionSequence, seq_lower_action: &MotionSequence, mask: &BodyMask) -> Result<MotionSequence> {
    if seq_upper_action.frames() != seq_lower_action.frames() {
        return Err(Error::shape(format!(
            "composing {} and {} frames",
            seq_upper_action.frames(),
            seq_lower_action.frames()
        )));
    }
    let data = mask.blend(seq_upper_action.data(), seq_lower_action.data())?;
    MotionSequence::new(
        data,
        seq_upper_action.fps(),
        format!("{}+{}", seq_upper_action.label(), seq_lower_action.label()),
    )
}

/// Seeds `[seed_base, seed_base + count)` of a split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub seed_base: u64,
    /// Atomic sequences per action (the Still action included).
    pub atomic_per_action: usize,
    /// Composite sequences per (upper, lower) pair of actions.
    pub composites_per_pair: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub skeleton: SkeletonSpec,
    pub actions: Vec<ActionSpec>,
    pub fps: f64,
    pub seq_len: usize,
    /// Per-sequence amplitude factor drawn from `[1 - j, 1 + j]`.
    pub amplitude_jitter: f64,
    /// Per-sequence phase shift drawn from `[-j, j]` radians.
    pub phase_jitter: f64,
    pub train: SplitSpec,
    pub val: SplitSpec,
    pub test: SplitSpec,
}

fn joint(idx: usize, amplitude: [f64; 3], frequency: f64, phase: f64) -> (usize, JointMotion) {
    (
        idx,
        JointMotion {
            amplitude,
            frequency,
            phase,
            drift: [0.0; 3],
        },
    )
}

fn action(name: &str, part: ActionPart, joints: Vec<(usize, JointMotion)>) -> ActionSpec {
    ActionSpec {
        name: name.into(),
        part,
        joints,
        noise_std: 1.0,
    }
}

impl DatasetManifest {
    /// Six upper-body actions, three lower-body actions and a still action
    /// on the 8-joint desk skeleton; 30 frames at 10 fps.
    pub fn desk_default() -> Self {
        use ActionPart::{Lower, Still, Upper};
        let pi = std::f64::consts::PI;
        let mut reach_r = joint(5, [0.0, 0.0, 20.0], 0.5, 0.0);
        reach_r.1.drift = [12.0, 0.0, 3.0];
        let actions = vec![
            action("wave_right", Upper, vec![joint(5, [0.0, 60.0, 120.0], 0.8, 0.0)]),
            action("wave_left", Upper, vec![joint(4, [0.0, 60.0, 120.0], 0.8, pi / 2.0)]),
            action(
                "clap",
                Upper,
                vec![joint(4, [30.0, 150.0, 0.0], 1.0, 0.0), joint(5, [30.0, 150.0, 0.0], 1.0, pi)],
            ),
            action("reach", Upper, vec![reach_r, joint(3, [15.0, 0.0, 0.0], 0.5, 0.0)]),
            action(
                "nod",
                Upper,
                vec![joint(3, [60.0, 0.0, 30.0], 0.6, 0.0), joint(2, [20.0, 0.0, 0.0], 0.6, 0.0)],
            ),
            action(
                "shrug",
                Upper,
                vec![
                    joint(4, [0.0, 0.0, 80.0], 0.7, 0.0),
                    joint(5, [0.0, 0.0, 80.0], 0.7, 0.0),
                    joint(2, [0.0, 0.0, 30.0], 0.7, 0.0),
                ],
            ),
            action(
                "march",
                Lower,
                vec![joint(6, [40.0, 0.0, 150.0], 0.5, 0.0), joint(7, [40.0, 0.0, 150.0], 0.5, pi)],
            ),
            action(
                "squat",
                Lower,
                vec![joint(6, [60.0, 0.0, 250.0], 0.4, 0.0), joint(7, [60.0, 0.0, 250.0], 0.4, 0.0)],
            ),
            action("kick", Lower, vec![joint(7, [250.0, 0.0, 120.0], 0.7, 0.0)]),
            action("still", Still, vec![]),
        ];
        DatasetManifest {
            skeleton: SkeletonSpec::desk8(),
            actions,
            fps: 10.0,
            seq_len: 30,
            amplitude_jitter: 0.2,
            phase_jitter: 0.5,
            train: SplitSpec {
                seed_base: 0,
                atomic_per_action: 20,
                composites_per_pair: 0,
            },
            val: SplitSpec {
                seed_base: 10_000,
                atomic_per_action: 2,
                composites_per_pair: 1,
            },
            test: SplitSpec {
                seed_base: 20_000,
                atomic_per_action: 3,
                composites_per_pair: 2,
            },
        }
    }

    pub fn actions_of(&self, part: ActionPart) -> impl Iterator<Item = &ActionSpec> {
        self.actions.iter().filter(move |a| a.part == part)
    }

    fn split_count(&self, split: &SplitSpec) -> u64 {
        let pairs = self.actions_of(ActionPart::Upper).count() * self.actions_of(ActionPart::Lower).count();
        (self.actions.len() * split.atomic_per_action + pairs * split.composites_per_pair) as u64
    }

    pub fn validate(&self) -> Result<()> {
        let sk = self.skeleton.skeleton()?;
        for a in &self.actions {
            a.validate(&sk)?;
        }
        for (i, a) in self.actions.iter().enumerate() {
            if self.actions[..i].iter().any(|b| b.name == a.name) {
                return Err(Error::Manifest(format!("duplicate action {}", a.name)));
            }
        }
        if self.seq_len < 2 || !(self.fps > 0.0 && self.fps.is_finite()) {
            return Err(Error::Manifest("seq_len must be at least 2 and fps positive".into()));
        }
        if !(0.0..1.0).contains(&self.amplitude_jitter) || !(self.phase_jitter >= 0.0 && self.phase_jitter.is_finite()) {
            return Err(Error::Manifest("amplitude_jitter must lie in [0, 1) and phase_jitter be non-negative".into()));
        }
        if self.train.composites_per_pair != 0 {
            return Err(Error::Manifest("the training split holds atomic actions only".into()));
        }
        let splits = [("train", &self.train), ("val", &self.val), ("test", &self.test)];
        let ranges: Vec<(&str, u64, u64)> = splits
            .iter()
            .map(|(n, s)| {
                let end = s
                    .seed_base
                    .checked_add(self.split_count(s))
                    .ok_or_else(|| Error::Manifest(format!("{n} seed range overflows")))?;
                Ok((*n, s.seed_base, end))
            })
            .collect::<Result<_>>()?;
        for (i, a) in ranges.iter().enumerate() {
            for b in &ranges[i + 1..] {
                if a.1 < b.2 && b.1 < a.2 {
                    return Err(Error::Manifest(format!(
                        "seed ranges of {} [{}, {}) and {} [{}, {}) overlap",
                        a.0, a.1, a.2, b.0, b.1, b.2
                    )));
                }
            }
        }
        Ok(())
    }

    /// `spec` with this sequence's amplitude and phase jitter applied.
    fn jittered(&self, spec: &ActionSpec, rng: &mut ChaCha8Rng) -> ActionSpec {
        let gain = 1.0 + self.amplitude_jitter * rng.gen_range(-1.0..=1.0);
        let shift = self.phase_jitter * rng.gen_range(-1.0..=1.0);
        let mut out = spec.clone();
        for (_, m) in &mut out.joints {
            m.amplitude = m.amplitude.map(|a| a * gain);
            m.drift = m.drift.map(|d| d * gain);
            m.phase += shift;
        }
        out
    }

    fn atomic(&self, spec: &ActionSpec, seed: u64) -> Result<MotionSequence> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = self.jittered(spec, &mut rng);
        generate_atomic(&spec, &self.skeleton, self.seq_len, self.fps, rng.gen())
    }

    fn build_split(&self, split: &SplitSpec) -> Result<Vec<MotionSequence>> {
        let mut seed = split.seed_base;
        let mut out = Vec::new();
        for spec in &self.actions {
            for _ in 0..split.atomic_per_action {
                out.push(self.atomic(spec, seed)?);
                seed += 1;
            }
        }
        let mask = BodyMask::upper(&self.skeleton.skeleton()?.layout());
        for up in self.actions_of(ActionPart::Upper) {
            for low in self.actions_of(ActionPart::Lower) {
                for _ in 0..split.composites_per_pair {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    let a = self.atomic(up, rng.gen())?;
                    let b = self.atomic(low, rng.gen())?;
                    out.push(compose_oracle(&a, &b, &mask)?);
                    seed += 1;
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<MotionSequence>,
    pub val: Vec<MotionSequence>,
    pub test: Vec<MotionSequence>,
}

/// All three splits; a pure function of the manifest.
pub fn build_dataset(manifest: &DatasetManifest) -> Result<Dataset> {
    manifest.validate()?;
    Ok(Dataset {
        train: manifest.build_split(&manifest.train)?,
        val: manifest.build_split(&manifest.val)?,
        test: manifest.build_split(&manifest.test)?,
    })
}
