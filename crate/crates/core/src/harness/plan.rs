use std::fmt;
use std::fs;
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attacks::{OganConfig, PgdConfig};
use crate::faceswap::{Architecture, TrainConfig};
use crate::synthdata::{PartitionSizes, Target, DEFAULT_PROTECTED};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    None,
    Pgd,
    Ogan,
}

impl AttackKind {
    pub fn id(self) -> &'static str {
        match self {
            AttackKind::None => "none",
            AttackKind::Pgd => "pgd",
            AttackKind::Ogan => "ogan",
        }
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(AttackKind::None),
            "pgd" => Ok(AttackKind::Pgd),
            "ogan" => Ok(AttackKind::Ogan),
            other => Err(Error::Invalid(format!("unknown attack {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SwapDirection {
    #[serde(rename = "A->B")]
    AToB,
    #[serde(rename = "A->C")]
    AToC,
}

impl SwapDirection {
    pub fn target(self) -> Target {
        match self {
            SwapDirection::AToB => Target::B,
            SwapDirection::AToC => Target::C,
        }
    }

    pub fn id(self) -> &'static str {
        match self {
            SwapDirection::AToB => "a2b",
            SwapDirection::AToC => "a2c",
        }
    }
}

impl FromStr for SwapDirection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "a->b" | "a2b" | "b" => Ok(SwapDirection::AToB),
            "a->c" | "a2c" | "c" => Ok(SwapDirection::AToC),
            other => Err(Error::Invalid(format!("unknown swap direction {other:?}"))),
        }
    }
}

/// One cell of the experiment grid.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ArmSpec {
    pub attack: AttackKind,
    pub victim_arch: Architecture,
    pub swap_direction: SwapDirection,
    /// Victim trains on D'_A (true) or on D_A∖P_A (false).
    pub include_adversarial_in_training: bool,
    pub retrain_iterations: u64,
    /// Curve spacing; equal to `retrain_iterations` for a single point.
    pub eval_every: u64,
}

impl ArmSpec {
    pub fn new(attack: AttackKind, arch: Architecture, dir: SwapDirection, include: bool, iterations: u64) -> Self {
        ArmSpec {
            attack,
            victim_arch: arch,
            swap_direction: dir,
            include_adversarial_in_training: include,
            retrain_iterations: iterations,
            eval_every: iterations,
        }
    }

    pub fn with_curve(mut self, eval_every: u64) -> Self {
        self.eval_every = eval_every;
        self
    }

    pub fn is_curve(&self) -> bool {
        self.eval_every < self.retrain_iterations
    }

    pub fn id(&self) -> String {
        let mut id = format!(
            "{}-{}-{}-{}-{}",
            self.attack,
            self.victim_arch,
            self.swap_direction.id(),
            if self.include_adversarial_in_training { "inc" } else { "exc" },
            self.retrain_iterations
        );
        if self.is_curve() {
            id.push_str(&format!("-every{}", self.eval_every));
        }
        id
    }

    /// Evaluation points: every `eval_every` up to `retrain_iterations`.
    pub fn eval_points(&self) -> Vec<u64> {
        (1..=self.retrain_iterations / self.eval_every).map(|k| k * self.eval_every).collect()
    }

    /// The training set the victim of this arm sees.
    pub fn training_set(&self) -> TrainingSet {
        match (self.include_adversarial_in_training, self.attack) {
            (false, _) => TrainingSet::Exclusion,
            (true, AttackKind::None) => TrainingSet::Clean,
            (true, AttackKind::Pgd) => TrainingSet::Adversarial(AttackKind::Pgd),
            (true, AttackKind::Ogan) => TrainingSet::Adversarial(AttackKind::Ogan),
        }
    }

    pub fn victim(&self) -> VictimKey {
        VictimKey {
            arch: self.victim_arch,
            direction: self.swap_direction,
            set: self.training_set(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.eval_every == 0 || self.retrain_iterations == 0 || !self.retrain_iterations.is_multiple_of(self.eval_every) {
            return Err(Error::Invalid(format!(
                "arm {}: eval_every must divide retrain_iterations",
                self.id()
            )));
        }
        Ok(())
    }
}

/// What a retrained victim's A side is trained on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TrainingSet {
    /// All of D_A, unattacked.
    Clean,
    /// D_A∖P_A: the protected frames are left out.
    Exclusion,
    /// D'_A: P_A replaced by the attack's adversarial frames.
    Adversarial(AttackKind),
}

impl TrainingSet {
    pub fn id(self) -> String {
        match self {
            TrainingSet::Clean => "clean".into(),
            TrainingSet::Exclusion => "exclusion".into(),
            TrainingSet::Adversarial(k) => format!("adv-{k}"),
        }
    }
}

/// A retrained victim; arms with equal keys share one training run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct VictimKey {
    pub arch: Architecture,
    pub direction: SwapDirection,
    pub set: TrainingSet,
}

impl VictimKey {
    pub fn id(&self) -> String {
        format!("{}-{}-{}", self.arch, self.direction.id(), self.set.id())
    }
}

/// Scale of every phase. Seeds in the nested configs are overridden by the
/// run seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeskSettings {
    pub resolution: usize,
    pub sizes: PartitionSizes,
    pub protected: Range<usize>,
    /// Pretraining of the attacked model; `iterations` is T.
    pub pretrain: TrainConfig,
    /// Victim retraining; `iterations` is ignored in favour of the arm's.
    pub retrain: TrainConfig,
    pub pgd: PgdConfig,
    pub ogan: OganConfig,
    /// Architecture of the model the attacks are built against.
    pub source_arch: Architecture,
    pub eval_batch: usize,
    /// Trainer checkpoints are written this often for crash recovery.
    pub save_every: u64,
}

impl Default for DeskSettings {
    fn default() -> Self {
        DeskSettings {
            resolution: 32,
            sizes: PartitionSizes::default(),
            protected: DEFAULT_PROTECTED,
            pretrain: TrainConfig::default(),
            retrain: TrainConfig::default(),
            pgd: PgdConfig::default(),
            ogan: OganConfig::default(),
            source_arch: Architecture::H128Mini,
            eval_batch: 16,
            save_every: 500,
        }
    }
}

impl DeskSettings {
    /// A seconds-scale configuration for smoke tests.
    pub fn tiny() -> Self {
        let mut s = DeskSettings {
            resolution: 16,
            sizes: PartitionSizes { a: 12, b: 8, c: 8 },
            protected: 0..4,
            ..DeskSettings::default()
        };
        s.pretrain.iterations = 4;
        s.pretrain.batch_size = 4;
        s.retrain.batch_size = 4;
        s.pgd.iterations = 3;
        s.ogan.epochs = 1;
        s.ogan.batch_size = 4;
        s.ogan.batch_iters = 2;
        s.save_every = 3;
        s
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        let mut s = self.clone();
        s.pretrain.seed = seed;
        s.retrain.seed = seed;
        s.pgd.seed = seed;
        s.ogan.seed = seed;
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.pretrain.validate()?;
        self.retrain.validate()?;
        self.pgd.validate()?;
        self.ogan.validate()?;
        if self.protected.start >= self.protected.end || self.protected.end > self.sizes.a {
            return Err(Error::Invalid(format!("protected range {:?} outside D_A", self.protected)));
        }
        if self.save_every == 0 || self.eval_batch == 0 {
            return Err(Error::Invalid("save_every and eval_batch must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub seeds: Vec<u64>,
    pub arms: Vec<ArmSpec>,
    #[serde(default)]
    pub settings: DeskSettings,
}

impl ExperimentPlan {
    /// The full desk grid: training resistance, exclusion, transfer and
    /// extra-training curves.
    pub fn desk() -> Self {
        use AttackKind::*;
        use SwapDirection::*;
        let h = Architecture::H128Mini;
        let s = Architecture::SaeMini;
        let mut arms = Vec::new();
        for include in [true, false] {
            for attack in [None, Ogan, Pgd] {
                arms.push(ArmSpec::new(attack, h, AToB, include, 3000));
            }
        }
        for attack in [Ogan, Pgd] {
            arms.push(ArmSpec::new(attack, s, AToB, true, 3000));
            arms.push(ArmSpec::new(attack, h, AToC, true, 3000));
        }
        for attack in [Ogan, Pgd] {
            arms.push(ArmSpec::new(attack, h, AToB, true, 7500).with_curve(375));
        }
        ExperimentPlan {
            seeds: vec![0, 1, 2],
            arms,
            settings: DeskSettings::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() || self.arms.is_empty() {
            return Err(Error::Invalid("plan needs at least one seed and one arm".into()));
        }
        self.settings.validate()?;
        for arm in &self.arms {
            arm.validate()?;
        }
        for none in self.arms.iter().filter(|a| a.attack == AttackKind::None) {
            let serves = self.arms.iter().any(|a| {
                a.attack != AttackKind::None
                    && a.victim_arch == none.victim_arch
                    && a.swap_direction == none.swap_direction
                    && a.include_adversarial_in_training == none.include_adversarial_in_training
            });
            if !serves {
                return Err(Error::Invalid(format!("baseline arm {} matches no attacked arm", none.id())));
            }
        }
        let mut ids: Vec<String> = self.arms.iter().map(ArmSpec::id).collect();
        ids.sort();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Invalid("plan lists an arm twice".into()));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let plan: ExperimentPlan = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}
