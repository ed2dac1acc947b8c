"""Joint adversarial training with the hierarchy constraints, in four modes.

The objective couples three parts: a per-stage conditional GAN loss, a
hierarchical-classification penalty on generated images weighted by
``lambda1`` (the post constraint), and the class-embedding margin loss
weighted by ``lambda2`` (the prior control). Modes:

  TREEGAN  embeddings train jointly; lambda1 penalty active
  NPC      embeddings train jointly; lambda1 forced to 0
  SEG      embeddings pre-trained and frozen; lambda1 = 0
  FLAT     random frozen embeddings; lambda1 = 0

Each step runs strict alternation: discriminator Adam step, generator Adam
step, then (joint modes only) an embedding Adam step whose gradient is
lambda2 * margin loss plus whatever reached the class embedding through the
generator pathway. When lambda1 == 0 the penalty branch is skipped outright,
which makes TREEGAN with lambda1=0 bit-identical to NPC, not merely close.

Stage 1 trains the 8x8 generator against its discriminator and classifier;
its weights then freeze while stage 2 trains the 16x16 generator. One rng
seeded from the config drives every step in a fixed order (real-batch
indices, then noise, then negative sampling in joint modes), so runs replay
exactly from the seed.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field, asdict

import numpy as np

from .autodiff import AdamState, NonFiniteError, Tape, Tensor, adam_step
from .embed import (
    ClassEmbeddingTable,
    TableParams,
    leaf_condition_vector,
    margin_loss_graph,
    sample_negatives,
    save_table,
)
from .hierarchy import ClassHierarchy
from .metrics import MetricsReport, evaluate, report_csv, report_json
from .models import (
    HierClassifier,
    ModelSet,
    ModelConfig,
    build_models,
    save_models,
)
from .synthdata import Dataset


class TrainingError(ValueError):
    """Invalid training configuration or inputs."""


class TrainMode(enum.Enum):
    TREEGAN = "treegan"
    NPC = "npc"
    SEG = "seg"
    FLAT = "flat"

    @classmethod
    def from_string(cls, s: str) -> "TrainMode":
        try:
            return cls(s.lower())
        except ValueError:
            raise TrainingError(
                f"unknown mode {s!r}; expected one of {', '.join(m.value for m in cls)}"
            ) from None

    @property
    def joint_embeddings(self) -> bool:
        return self in (TrainMode.TREEGAN, TrainMode.NPC)


@dataclass
class TrainConfig:
    mode: TrainMode = TrainMode.TREEGAN
    lambda1: float = 15.0
    lambda2: float = 1.0
    batch_size: int = 64
    gan_lr: float = 0.0002
    emb_lr: float = 0.01
    beta1: float = 0.5
    beta2: float = 0.999
    steps_per_stage: int = 3000
    eval_every: int = 500
    eval_n_per_class: int = 500
    che_margin: float = 0.2
    che_negatives: int = 10
    embed_dim: int = 16
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.mode, str):
            self.mode = TrainMode.from_string(self.mode)
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise TrainingError("lambda1 and lambda2 must be non-negative")
        if min(self.gan_lr, self.emb_lr) <= 0:
            raise TrainingError("learning rates must be positive")
        if min(self.batch_size, self.steps_per_stage, self.eval_every, self.eval_n_per_class) < 1:
            raise TrainingError("batch_size, steps_per_stage, eval_every, eval_n_per_class must be >= 1")
        if not 0 < self.che_margin < 0.25:
            raise TrainingError("che_margin must lie in (0, 0.25)")
        if self.che_negatives < 1 or self.embed_dim < 1:
            raise TrainingError("che_negatives and embed_dim must be >= 1")
        if self.seed < 0:
            raise TrainingError("seed must be non-negative")

    @property
    def effective_lambda1(self) -> float:
        # only the full mode applies the generated-image penalty
        return self.lambda1 if self.mode == TrainMode.TREEGAN else 0.0


@dataclass
class GeneratedBatch:
    samples: np.ndarray  # (n, side, side)
    leaf: int
    stage: int


@dataclass
class StepLosses:
    d_loss: float
    g_loss: float
    h_penalty: float
    che_loss: float


@dataclass
class TraceRow:
    step: int
    stage: int
    class_id: int
    d_loss: float
    g_loss: float
    h_penalty: float
    che_loss: float


@dataclass
class RunArtifacts:
    mode: TrainMode
    config: TrainConfig
    models: ModelSet
    table: ClassEmbeddingTable
    trace: list[TraceRow] = field(default_factory=list)
    reports: list[tuple[int, MetricsReport]] = field(default_factory=list)
    aborted: bool = False
    abort_step: int | None = None
    abort_reason: str = ""


def hierarchy_penalty(clf: HierClassifier, batch: GeneratedBatch, h: ClassHierarchy) -> float:
    """Mean stacked cross-entropy of a generated batch against its leaf."""
    images = np.asarray(batch.samples, dtype=np.float64)
    n = images.shape[0]
    if n == 0:
        raise TrainingError("hierarchy_penalty needs a non-empty batch")
    if not h.is_leaf(batch.leaf):
        raise TrainingError(f"node id {batch.leaf} is not a leaf")
    tape = Tape()
    x = Tensor(images.reshape(n, -1))
    return float(clf.loss(tape, x, [batch.leaf] * n).item()) / n


def generate_set(models: ModelSet, embeddings: ClassEmbeddingTable, c: int, n: int, seed) -> GeneratedBatch:
    """n stage-2 images for leaf c from fresh seeded noise."""
    e_row = leaf_condition_vector(embeddings, c)
    if n == 0:
        return GeneratedBatch(samples=np.zeros((0, 16, 16)), leaf=c, stage=2)
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n, models.g1.noise_dim))
    e = np.tile(e_row, (n, 1))
    tape = Tape()
    lo = models.g1.forward(tape, Tensor(e), Tensor(z))
    hi = models.g2.forward(tape, Tensor(e), lo)
    return GeneratedBatch(samples=hi.data.reshape(n, 16, 16), leaf=c, stage=2)


class Trainer:
    """Owns the per-run mutable state: models, embedding parameters, Adam
    states, and the step rng. One instance serves one run."""

    def __init__(
        self,
        dataset: Dataset,
        h: ClassHierarchy,
        cfg: TrainConfig,
        clf_lo: HierClassifier,
        clf_hi: HierClassifier,
        embeddings: ClassEmbeddingTable | None = None,
    ):
        if dataset.spec.hierarchy.serialize() != h.serialize():
            raise TrainingError("dataset was generated for a different hierarchy")
        for clf, side in ((clf_lo, 8), (clf_hi, 16)):
            if clf.pixels != side * side:
                raise TrainingError(f"classifier for {side}x{side} has {clf.pixels} inputs")
            if clf.hierarchy.serialize() != h.serialize():
                raise TrainingError("classifier was trained for a different hierarchy")
            if any(p.requires_grad for p in clf.params()):
                raise TrainingError("classifiers must be frozen before GAN training")
        if cfg.mode == TrainMode.SEG:
            if embeddings is None:
                raise TrainingError("SEG mode requires pre-trained embeddings")
            if embeddings.dim != cfg.embed_dim:
                raise TrainingError(f"embedding dim {embeddings.dim} != config embed_dim {cfg.embed_dim}")
        elif embeddings is not None:
            raise TrainingError(f"{cfg.mode.value} mode does not accept external embeddings")

        self.h = h
        self.cfg = cfg
        self.dataset = dataset
        self.rng = np.random.default_rng([cfg.seed, 2])

        if cfg.mode.joint_embeddings:
            self.table_params = TableParams.init(len(h), cfg.embed_dim, np.random.default_rng([cfg.seed, 1]))
            table0 = self.table_params.to_table(h)
        else:
            self.table_params = None
            if cfg.mode == TrainMode.FLAT:
                table0 = TableParams.init(len(h), cfg.embed_dim, np.random.default_rng([cfg.seed, 3])).to_table(h)
            else:
                table0 = embeddings

        self.models = build_models(h, table0, ModelConfig(embed_dim=cfg.embed_dim, seed=cfg.seed))
        self.models.clf_lo = clf_lo
        self.models.clf_hi = clf_hi

        self.by_leaf = {y: [] for y in h.leaves}
        for s in dataset.train:
            self.by_leaf[s.leaf].append(s)
        for y, rows in self.by_leaf.items():
            if not rows:
                raise TrainingError(f"leaf {h.name_of(y)!r} has no training samples")

        self.pairs = np.asarray(h.parent_child_pairs())
        self.emb_states = (
            [AdamState.for_param(p) for p in self.table_params.params()] if self.table_params else None
        )
        self.stage = 1
        self._enter_stage(1)

    # ------------------------------------------------------------- stages

    def _enter_stage(self, stage: int) -> None:
        self.stage = stage
        if stage == 1:
            self.g_params = self.models.g1.params()
            self.d_params = self.models.d_lo.params()
            self.clf = self.models.clf_lo
            self.disc = self.models.d_lo
        else:
            for p in self.models.g1.params() + self.models.d_lo.params():
                p.requires_grad = False  # stage-1 weights freeze for stage 2
            self.g_params = self.models.g2.params()
            self.d_params = self.models.d_hi.params()
            self.clf = self.models.clf_hi
            self.disc = self.models.d_hi
        self.g_states = [AdamState.for_param(p) for p in self.g_params]
        self.d_states = [AdamState.for_param(p) for p in self.d_params]

    def current_table(self) -> ClassEmbeddingTable:
        if self.table_params is not None:
            return self.table_params.to_table(self.h)
        return self.models.table

    # -------------------------------------------------------- conditioning

    def _condition(self, tape: Tape, y: int, n: int) -> Tensor:
        """Class-embedding rows for leaf y; a graph gather in joint modes so
        gradients reach the table, a constant otherwise."""
        if self.table_params is not None:
            idx = np.full(n, y)
            re = tape.slice(self.table_params.class_re, idx)
            im = tape.slice(self.table_params.class_im, idx)
            return tape.concat([re, im], axis=1)
        return Tensor(np.tile(leaf_condition_vector(self.models.table, y), (n, 1)))

    def _fake_graph(self, tape: Tape, e_c: Tensor, z: Tensor) -> Tensor:
        lo = self.models.g1.forward(tape, e_c, z)
        if self.stage == 1:
            return lo
        return self.models.g2.forward(tape, e_c, lo)

    # -------------------------------------------------------------- steps

    def joint_step(self, real_images: np.ndarray, y: int, z: np.ndarray) -> StepLosses:
        """One alternating round for class y: D step, G step, embedding step."""
        cfg = self.cfg
        n = real_images.shape[0]
        real_flat = real_images.reshape(n, -1)

        # --- discriminator step (generator and embeddings held fixed)
        tape_detached = Tape()
        e_const = self._condition(Tape(), y, n)
        e_const = Tensor(e_const.data)
        fake_flat = self._fake_graph(tape_detached, e_const, Tensor(z)).data
        tape_d = Tape()
        real_logit = self.disc.forward(tape_d, Tensor(real_flat), e_const)
        fake_logit = self.disc.forward(tape_d, Tensor(fake_flat), e_const)
        d_loss = tape_d.add(
            tape_d.binary_cross_entropy_with_logits(real_logit, np.ones(real_logit.shape)),
            tape_d.binary_cross_entropy_with_logits(fake_logit, np.zeros(fake_logit.shape)),
        )
        d_grads = tape_d.backward(d_loss)
        adam_step(
            self.d_params,
            [d_grads[p] for p in self.d_params],
            self.d_states,
            lr=cfg.gan_lr,
            beta1=cfg.beta1,
            beta2=cfg.beta2,
        )

        # --- generator step (discriminator held fixed)
        tape_g = Tape()
        e_c = self._condition(tape_g, y, n)
        fake = self._fake_graph(tape_g, e_c, Tensor(z))
        g_adv = tape_g.binary_cross_entropy_with_logits(
            self.disc.forward(tape_g, fake, e_c), np.ones((n, 1))
        )
        lam1 = cfg.effective_lambda1
        if lam1 > 0:
            penalty = tape_g.scale(self.clf.loss(tape_g, fake, [y] * n), 1.0 / n)
            g_obj = tape_g.add(g_adv, tape_g.scale(penalty, lam1))
            h_penalty = float(penalty.item())
        else:
            g_obj = g_adv
            h_penalty = 0.0
        g_grads = tape_g.backward(g_obj)
        adam_step(
            self.g_params,
            [g_grads[p] for p in self.g_params],
            self.g_states,
            lr=cfg.gan_lr,
            beta1=cfg.beta1,
            beta2=cfg.beta2,
        )

        # --- embedding step (joint modes): lambda2 * margin loss plus the
        # gradient that reached the class embedding through the generator
        che_loss = 0.0
        if self.table_params is not None:
            neg = np.stack(
                [
                    np.asarray(
                        sample_negatives(self.h, tuple(pair), cfg.che_negatives, self.rng)
                    )
                    for pair in self.pairs
                ]
            )
            tape_e = Tape()
            margin = margin_loss_graph(tape_e, self.table_params, self.pairs, neg, cfg.che_margin)
            che_obj = tape_e.scale(margin, cfg.lambda2)
            che_loss = float(margin.item())
            e_grads = tape_e.backward(che_obj)
            emb_params = self.table_params.params()
            combined = [
                e_grads.get(p, np.zeros_like(p.data)) + g_grads.get(p, np.zeros_like(p.data))
                for p in emb_params
            ]
            adam_step(
                emb_params,
                combined,
                self.emb_states,
                lr=cfg.emb_lr,
                beta1=cfg.beta1,
                beta2=cfg.beta2,
            )

        return StepLosses(
            d_loss=float(d_loss.item()), g_loss=float(g_adv.item()), h_penalty=h_penalty, che_loss=che_loss
        )

    def real_batch(self, y: int) -> np.ndarray:
        """batch_size training images of leaf y, drawn with replacement."""
        rows = self.by_leaf[y]
        idx = self.rng.integers(0, len(rows), size=self.cfg.batch_size)
        if self.stage == 1:
            return np.stack([rows[i].lo for i in idx])
        return np.stack([rows[i].hi for i in idx])


def run_training(
    dataset: Dataset,
    h: ClassHierarchy,
    cfg: TrainConfig,
    clf_lo: HierClassifier,
    clf_hi: HierClassifier,
    embeddings: ClassEmbeddingTable | None = None,
) -> RunArtifacts:
    """Stage 1 then stage 2, round-robin over leaves, with stage-2 metric
    checkpoints every ``eval_every`` steps and at the end. Replayable from
    the config seed; a non-finite loss aborts with parameters as of the last
    completed step."""
    trainer = Trainer(dataset, h, cfg, clf_lo, clf_hi, embeddings)
    art = RunArtifacts(mode=cfg.mode, config=cfg, models=trainer.models, table=trainer.current_table())
    leaves = h.leaves
    step = 0
    try:
        for stage in (1, 2):
            if stage == 2:
                trainer._enter_stage(2)
            for t in range(cfg.steps_per_stage):
                y = leaves[t % len(leaves)]
                real = trainer.real_batch(y)
                z = trainer.rng.standard_normal((cfg.batch_size, trainer.models.g1.noise_dim))
                losses = trainer.joint_step(real, int(y), z)
                step += 1
                art.trace.append(
                    TraceRow(
                        step=step,
                        stage=stage,
                        class_id=int(y),
                        d_loss=losses.d_loss,
                        g_loss=losses.g_loss,
                        h_penalty=losses.h_penalty,
                        che_loss=losses.che_loss,
                    )
                )
                if stage == 2 and ((t + 1) % cfg.eval_every == 0 or t + 1 == cfg.steps_per_stage):
                    table = trainer.current_table()
                    report = evaluate(
                        trainer.models,
                        table,
                        dataset,
                        h,
                        n_per_class=cfg.eval_n_per_class,
                        seed=(cfg.seed << 20) ^ step,
                    )
                    art.reports.append((step, report))
    except NonFiniteError as err:
        art.aborted = True
        art.abort_step = step + 1
        art.abort_reason = str(err)
    art.table = trainer.current_table()
    art.models.table = art.table
    return art


# ---------------------------------------------------------------- artifacts


def trace_csv(rows: list[TraceRow]) -> str:
    lines = ["step,stage,class_id,d_loss,g_loss,h_penalty,che_loss"]
    for r in rows:
        lines.append(
            f"{r.step},{r.stage},{r.class_id},{r.d_loss!r},{r.g_loss!r},{r.h_penalty!r},{r.che_loss!r}"
        )
    return "\n".join(lines) + "\n"


def save_run(art: RunArtifacts, out_dir, extra_manifest: dict | None = None) -> None:
    """Write checkpoints, loss trace, per-checkpoint metric reports, and a
    manifest sufficient to replay the run."""
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_models(art.models, out / "models.hgck")
    save_table(out / "embeddings.hgck", art.table)
    (out / "trace.csv").write_text(trace_csv(art.trace))
    for step, report in art.reports:
        (out / f"metrics_step{step:06d}.csv").write_text(report_csv(report))
        (out / f"metrics_step{step:06d}.json").write_text(report_json(report))
    cfg_dict = asdict(art.config)
    cfg_dict["mode"] = art.config.mode.value
    manifest = {
        "mode": art.config.mode.value,
        "seed": art.config.seed,
        "config": cfg_dict,
        "aborted": art.aborted,
        "abort_step": art.abort_step,
        "abort_reason": art.abort_reason,
        "checkpoints": sorted(step for step, _ in art.reports),
    }
    if extra_manifest:
        manifest.update(extra_manifest)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
