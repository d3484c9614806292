//! Cached, resumable phases of one seed's run. Every phase lives in its own
//! directory with a `phase.json` record; a phase whose record exists is
//! loaded instead of recomputed.

use std::cell::{OnceCell, RefCell};
use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::plan::{AttackKind, DeskSettings, SwapDirection, TrainingSet, VictimKey};
use crate::attacks::{
    load_distortions, load_protected, ogan_train, pgd_protect, save_distortions, save_protected, AdvGenerator,
    FrameDistortion,
};
use crate::diffengine::{Checkpoint, SeededRng};
use crate::faceswap::{evaluate_loss, Architecture, Side, SwapModel, TrainConfig, Trainer};
use crate::metrics::{e_tmp, TemporalReport};
use crate::synthdata::{build_partition, write_frames, DatasetPartition, FaceSample, SequenceSidecar, SynthIdentitySpec};
use crate::{Error, Result};

pub const PHASE_FILE: &str = "phase.json";

/// What a phase read, what it produced and how long it took.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub phase: String,
    pub seed: u64,
    pub seconds: f64,
    /// Workspace-relative paths read while computing the phase.
    pub inputs: Vec<String>,
    /// Checkpoint digests and scalar outcomes.
    pub outputs: BTreeMap<String, String>,
}

impl PhaseRecord {
    pub fn load(dir: &Path) -> Result<Option<Self>> {
        let path = dir.join(PHASE_FILE);
        if !path.is_file() {
            return Ok(None);
        }
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map(Some).map_err(|e| Error::format(&path, e.to_string()))
    }

    fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(PHASE_FILE);
        fs::write(&path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&path, e))
    }
}

/// Parameter-value digests shared between a retrained victim's
/// initialisation and the models an attack was built against.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Lineage {
    pub victim_init_digest: String,
    pub sources: BTreeMap<String, String>,
    pub shared_parameters: Vec<String>,
}

/// Output of the OGAN phase.
pub struct OganArtifacts {
    pub generator: AdvGenerator,
    pub distortions: Vec<FrameDistortion>,
    pub cotrained: SwapModel,
    pub protected: Vec<FaceSample>,
}

/// One seed's directory tree under `<out>/seed<k>`.
pub struct Workspace {
    root: PathBuf,
    seed: u64,
    settings: DeskSettings,
    partition: OnceCell<DatasetPartition>,
    reads: RefCell<BTreeSet<String>>,
}

fn rel_id(arch: Architecture, dir: SwapDirection) -> String {
    format!("{arch}-{}", dir.id())
}

impl Workspace {
    pub fn new(out: &Path, seed: u64, settings: &DeskSettings) -> Result<Self> {
        settings.validate()?;
        Ok(Workspace {
            root: out.join(format!("seed{seed}")),
            seed,
            settings: settings.with_seed(seed),
            partition: OnceCell::new(),
            reads: RefCell::new(BTreeSet::new()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn settings(&self) -> &DeskSettings {
        &self.settings
    }

    fn rel(&self, p: &Path) -> String {
        p.strip_prefix(&self.root).unwrap_or(p).to_string_lossy().into_owned()
    }

    fn note(&self, p: &Path) {
        self.reads.borrow_mut().insert(self.rel(p));
    }

    fn begin(&self) -> Instant {
        self.reads.borrow_mut().clear();
        Instant::now()
    }

    fn finish(&self, dir: &Path, phase: String, start: Instant, outputs: BTreeMap<String, String>) -> Result<PhaseRecord> {
        let rec = PhaseRecord {
            phase,
            seed: self.seed,
            seconds: start.elapsed().as_secs_f64(),
            inputs: self.reads.borrow().iter().cloned().collect(),
            outputs,
        };
        rec.save(dir)?;
        Ok(rec)
    }

    /// The three synthetic identities; generated in memory, deterministic.
    pub fn partition(&self) -> Result<&DatasetPartition> {
        if let Some(p) = self.partition.get() {
            return Ok(p);
        }
        let specs = [0, 1, 2].map(SynthIdentitySpec::preset);
        let p = build_partition(
            [&specs[0], &specs[1], &specs[2]],
            &self.settings.sizes,
            self.settings.protected.clone(),
            self.settings.resolution,
            self.seed,
        )?;
        Ok(self.partition.get_or_init(|| p))
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }

    /// Writes D_A, D_B and D_C as frame directories with sidecars.
    pub fn write_data(&self) -> Result<PathBuf> {
        let p = self.partition()?;
        let dir = self.data_dir();
        let specs = [0, 1, 2].map(SynthIdentitySpec::preset);
        for (set, spec) in [&p.d_a, &p.d_b, &p.d_c].into_iter().zip(&specs) {
            let sub = dir.join(&spec.name);
            write_frames(set, &sub)?;
            SequenceSidecar {
                identity: spec.name.clone(),
                spec: Some(spec.clone()),
                seed: self.seed,
                resolution: self.settings.resolution,
                frames: set.len(),
                protected_range: (spec.name == p.d_a[0].identity)
                    .then_some([self.settings.protected.start, self.settings.protected.end]),
            }
            .write(&sub)?;
        }
        Ok(dir)
    }

    pub fn pretrain_dir(&self, arch: Architecture, dir: SwapDirection) -> PathBuf {
        self.root.join("pretrain").join(rel_id(arch, dir))
    }

    /// The model the attacks are built against, trained from scratch for T
    /// iterations. Resumes from its trainer checkpoint after interruption.
    pub fn pretrained(&self, arch: Architecture, dir: SwapDirection) -> Result<SwapModel> {
        let pdir = self.pretrain_dir(arch, dir);
        let stem = pdir.join("model");
        if PhaseRecord::load(&pdir)?.is_some() {
            self.note(&stem);
            return SwapModel::load(&stem);
        }
        let start = self.begin();
        let part = self.partition()?;
        let target = part.target(dir.target());
        let cfg = self.settings.pretrain.clone();
        let fresh = || -> Result<Trainer> {
            let mut init = SeededRng::substream(cfg.seed, &format!("pretrain-init/{arch}"));
            let model = SwapModel::new(arch, self.settings.resolution, &mut init)?
                .with_identities(&part.d_a[0].identity, &target[0].identity);
            Trainer::new(model, cfg.clone(), part.d_a.len(), target.len(), "pretrain")
        };
        let trainer = run_resumable(&pdir.join("trainer"), fresh, &part.d_a, target, cfg.iterations, self.settings.save_every, |_| Ok(()))?;
        trainer.model.save(&stem)?;
        fs::write(pdir.join("log.json"), serde_json::to_string(&trainer.log)?).map_err(|e| Error::io(&pdir, e))?;
        let mut out = BTreeMap::new();
        out.insert("model".into(), trainer.model.digest()?);
        let l = evaluate_loss(&trainer.model, Side::A, &part.d_a, self.settings.eval_batch)?;
        out.insert("loss_rec_a".into(), format!("{l}"));
        self.finish(&pdir, format!("pretrain {}", rel_id(arch, dir)), start, out)?;
        Ok(trainer.model)
    }

    fn source(&self) -> Result<SwapModel> {
        self.pretrained(self.settings.source_arch, SwapDirection::AToB)
    }

    pub fn attack_dir(&self, kind: AttackKind) -> PathBuf {
        self.root.join("attacks").join(kind.id())
    }

    fn protected_dir(&self, kind: AttackKind) -> PathBuf {
        self.attack_dir(kind).join("protected")
    }

    /// PGD against the pretrained source model.
    pub fn pgd(&self) -> Result<Vec<FaceSample>> {
        let dir = self.attack_dir(AttackKind::Pgd);
        if PhaseRecord::load(&dir)?.is_none() {
            let model = self.source()?;
            let start = self.begin();
            let (adv, report) = pgd_protect(&model, self.partition()?.p_a(), &self.settings.pgd)?;
            save_protected(&self.protected_dir(AttackKind::Pgd), &adv)?;
            fs::write(dir.join("report.json"), serde_json::to_string_pretty(&report)?).map_err(|e| Error::io(&dir, e))?;
            let mut out = BTreeMap::new();
            out.insert("protected".into(), samples_digest(&adv));
            out.insert("source_model".into(), model.digest()?);
            self.finish(&dir, "attack pgd".into(), start, out)?;
        }
        self.load_protected(AttackKind::Pgd)
    }

    /// OGAN trained against (a copy of) the pretrained source model.
    pub fn ogan(&self) -> Result<OganArtifacts> {
        let dir = self.attack_dir(AttackKind::Ogan);
        if PhaseRecord::load(&dir)?.is_none() {
            let model = self.source()?;
            let start = self.begin();
            let part = self.partition()?;
            let outcome = ogan_train(part, &model, &self.settings.ogan)?;
            let adv = crate::attacks::ogan_protect(&outcome.generator, &outcome.distortions, part.p_a(), self.settings.eval_batch)?;
            outcome.generator.save(&dir.join("generator"))?;
            outcome.model.save(&dir.join("cotrained"))?;
            save_distortions(&dir.join("distortions.json"), &outcome.distortions)?;
            save_protected(&self.protected_dir(AttackKind::Ogan), &adv)?;
            fs::write(dir.join("log.json"), serde_json::to_string(&outcome.log)?).map_err(|e| Error::io(&dir, e))?;
            let mut out = BTreeMap::new();
            out.insert("generator".into(), outcome.generator.digest()?);
            out.insert("cotrained".into(), outcome.model.digest()?);
            out.insert("protected".into(), samples_digest(&adv));
            out.insert("source_model".into(), model.digest()?);
            self.finish(&dir, "attack ogan".into(), start, out)?;
        }
        self.note(&dir.join("generator"));
        Ok(OganArtifacts {
            generator: AdvGenerator::load(&dir.join("generator"))?,
            distortions: load_distortions(&dir.join("distortions.json"))?,
            cotrained: SwapModel::load(&dir.join("cotrained"))?,
            protected: self.load_protected(AttackKind::Ogan)?,
        })
    }

    fn load_protected(&self, kind: AttackKind) -> Result<Vec<FaceSample>> {
        let dir = self.protected_dir(kind);
        self.note(&dir);
        load_protected(&dir)
    }

    /// The adversarial P_A of `kind`, running the attack when needed; for
    /// `none` the pristine P_A.
    pub fn protected(&self, kind: AttackKind) -> Result<Vec<FaceSample>> {
        match kind {
            AttackKind::None => Ok(self.partition()?.p_a().to_vec()),
            AttackKind::Pgd => self.pgd(),
            AttackKind::Ogan => Ok(self.ogan()?.protected),
        }
    }

    pub fn victim_dir(&self, key: &VictimKey) -> PathBuf {
        self.root.join("victims").join(key.id())
    }

    pub fn snapshot_stem(&self, key: &VictimKey, iteration: u64) -> PathBuf {
        self.victim_dir(key).join(format!("snap_{iteration:05}"))
    }

    fn victim_training_set(&self, key: &VictimKey) -> Result<Vec<FaceSample>> {
        let part = self.partition()?;
        match key.set {
            TrainingSet::Clean => Ok(part.d_a.clone()),
            TrainingSet::Exclusion => Ok(part.unprotected()),
            TrainingSet::Adversarial(kind) => {
                let adv = self.protected(kind)?;
                part.with_protected_replaced(&adv)
            }
        }
    }

    fn victim_init(&self, key: &VictimKey) -> Result<SwapModel> {
        let part = self.partition()?;
        let target = part.target(key.direction.target());
        let mut init = SeededRng::substream(self.seed, &format!("victim-init/{}", key.id()));
        Ok(SwapModel::new(key.arch, self.settings.resolution, &mut init)?
            .with_identities(&part.d_a[0].identity, &target[0].identity))
    }

    /// Compares the victim's initial weights with every model the attacks
    /// were built against; any shared parameter value is an error.
    fn lineage(&self, key: &VictimKey, init: &SwapModel) -> Result<Lineage> {
        let mut sources = BTreeMap::new();
        let mut source_digests = BTreeSet::new();
        let mut add = |name: &str, m: &SwapModel| -> Result<()> {
            sources.insert(name.to_string(), m.digest()?);
            source_digests.extend(m.weight_digests().into_iter().map(|(_, d)| d));
            Ok(())
        };
        if let TrainingSet::Adversarial(kind) = key.set {
            add("source", &self.source()?)?;
            if kind == AttackKind::Ogan {
                add("cotrained", &self.ogan()?.cotrained)?;
            }
        } else if PhaseRecord::load(&self.pretrain_dir(self.settings.source_arch, SwapDirection::AToB))?.is_some() {
            add("source", &self.source()?)?;
        }
        let shared: Vec<String> = init
            .weight_digests()
            .into_iter()
            .filter(|(_, d)| source_digests.contains(d))
            .map(|(n, _)| n)
            .collect();
        let lineage = Lineage {
            victim_init_digest: init.digest()?,
            sources,
            shared_parameters: shared,
        };
        if !lineage.shared_parameters.is_empty() {
            return Err(Error::Invalid(format!(
                "victim {} shares parameters with an attacked model: {:?}",
                key.id(),
                lineage.shared_parameters
            )));
        }
        Ok(lineage)
    }

    /// Trains (or resumes) a fresh victim until `until`, saving model
    /// snapshots at every iteration in `snapshots`.
    pub fn victim(&self, key: &VictimKey, until: u64, snapshots: &[u64]) -> Result<PhaseRecord> {
        let vdir = self.victim_dir(key);
        if let Some(rec) = PhaseRecord::load(&vdir)? {
            let done: u64 = rec.outputs.get("iteration").and_then(|s| s.parse().ok()).unwrap_or(0);
            let have_all = snapshots.iter().all(|&k| Checkpoint::exists(&self.snapshot_stem(key, k)));
            if done >= until && have_all {
                return Ok(rec);
            }
        }
        let prev_seconds = PhaseRecord::load(&vdir)?.map(|r| r.seconds).unwrap_or(0.0);
        // Materialise upstream phases first so their records stay separate.
        self.victim_training_set(key)?;
        let start = self.begin();
        let d_a = self.victim_training_set(key)?;
        let part = self.partition()?;
        let target = part.target(key.direction.target());
        let init = self.victim_init(key)?;
        let lineage = self.lineage(key, &init)?;
        fs::create_dir_all(&vdir).map_err(|e| Error::io(&vdir, e))?;
        fs::write(vdir.join("lineage.json"), serde_json::to_string_pretty(&lineage)?).map_err(|e| Error::io(&vdir, e))?;
        let cfg = TrainConfig { iterations: until, ..self.settings.retrain.clone() };
        let label = format!("victim/{}", key.id());
        let fresh = || Trainer::new(init.clone(), cfg.clone(), d_a.len(), target.len(), &label);
        let wanted: BTreeSet<u64> = snapshots.iter().copied().collect();
        let trainer = run_resumable(&vdir.join("trainer"), fresh, &d_a, target, until, self.settings.save_every, |t| {
            if wanted.contains(&t.iteration()) {
                t.model.save(&self.snapshot_stem(key, t.iteration()))?;
            }
            Ok(())
        })?;
        let missing: Vec<u64> = wanted
            .iter()
            .copied()
            .filter(|&k| k <= until && !Checkpoint::exists(&self.snapshot_stem(key, k)))
            .collect();
        if !missing.is_empty() {
            // Snapshots requested behind the trainer's position: replay.
            fs::remove_dir_all(&vdir).map_err(|e| Error::io(&vdir, e))?;
            return self.victim(key, until, snapshots);
        }
        let mut out = BTreeMap::new();
        out.insert("iteration".into(), trainer.iteration().to_string());
        out.insert("model".into(), trainer.model.digest()?);
        for &k in &wanted {
            out.insert(format!("snap_{k:05}"), Checkpoint::load(&self.snapshot_stem(key, k))?.digest());
        }
        let rec = self.finish(&vdir, format!("victim {}", key.id()), start, out)?;
        let rec = PhaseRecord { seconds: rec.seconds + prev_seconds, ..rec };
        rec.save(&vdir)?;
        Ok(rec)
    }

    pub fn snapshot(&self, key: &VictimKey, iteration: u64) -> Result<SwapModel> {
        SwapModel::load(&self.snapshot_stem(key, iteration))
    }

    /// Swaps the attacked and the pristine protected sequence with `model`.
    pub fn evaluate(&self, model: &SwapModel, attacked: &[FaceSample]) -> Result<TemporalReport> {
        let b = self.settings.eval_batch;
        let pristine = self.partition()?.p_a();
        let ea = e_tmp(&model.swap_samples(attacked, b)?)?;
        let eb = e_tmp(&model.swap_samples(pristine, b)?)?;
        TemporalReport::from_scores(ea, eb, attacked.len())
    }

    /// Exclusion victims must never have read adversarial frames.
    pub fn audit_hygiene(&self) -> Result<Vec<String>> {
        let mut audited = Vec::new();
        let vroot = self.root.join("victims");
        if !vroot.is_dir() {
            return Ok(audited);
        }
        for entry in fs::read_dir(&vroot).map_err(|e| Error::io(&vroot, e))? {
            let dir = entry.map_err(|e| Error::io(&vroot, e))?.path();
            let name = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            if !name.ends_with("-exclusion") {
                continue;
            }
            if let Some(rec) = PhaseRecord::load(&dir)? {
                if let Some(bad) = rec.inputs.iter().find(|p| p.starts_with("attacks")) {
                    return Err(Error::Invalid(format!("exclusion victim {name} read {bad}")));
                }
                audited.push(name);
            }
        }
        Ok(audited)
    }
}

/// Digest over the exact f32 contents of a sample set.
pub fn samples_digest(samples: &[FaceSample]) -> String {
    let mut ck = Checkpoint::new();
    for (i, s) in samples.iter().enumerate() {
        ck.insert(format!("{i}/image"), s.image.clone());
        ck.insert(format!("{i}/mask"), s.mask.clone());
    }
    ck.digest()
}

/// Runs a trainer to `until`, resuming from `stem` when a checkpoint exists
/// and saving it every `save_every` iterations. `after_step` runs after
/// each iteration.
fn run_resumable(
    stem: &Path,
    fresh: impl FnOnce() -> Result<Trainer>,
    d_a: &[FaceSample],
    d_t: &[FaceSample],
    until: u64,
    save_every: u64,
    mut after_step: impl FnMut(&Trainer) -> Result<()>,
) -> Result<Trainer> {
    let mut trainer = if Checkpoint::exists(stem) { Trainer::load(stem)? } else { fresh()? };
    while trainer.iteration() < until {
        trainer.step(d_a, d_t)?;
        after_step(&trainer)?;
        if trainer.iteration() % save_every == 0 || trainer.iteration() == until {
            if let Some(parent) = stem.parent() {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            trainer.save(stem)?;
        }
    }
    Ok(trainer)
}
