"""Generator stages, discriminators, and hierarchical classifiers.

All networks are small dense MLPs over flattened pixels, sized for the
16x16/8x8 desk resolutions. The generator runs in two conditional stages
(class embedding + noise -> 8x8, then class embedding + 8x8 -> 16x16), each
with its own discriminator. The hierarchical classifier shares one trunk and
puts a linear head on every level of the class tree; its loss is the sum of
per-level softmax cross-entropies against the leaf's ancestor path. Once
trained the classifier is frozen: its parameters stop collecting gradients,
but gradients still flow through it to the *image*, which is the path the
generated-image consistency penalty trains the generator through.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .autodiff import AdamState, Tape, Tensor, adam_step, load_checkpoint, save_checkpoint
from .embed import ClassEmbeddingTable, leaf_condition_vector
from .hierarchy import ClassHierarchy, parse_hierarchy
from .synthdata import Dataset, batch_iter

LO_PIXELS = 64
HI_PIXELS = 256


class ModelError(ValueError):
    """Shape or resolution mismatch in a model forward pass."""


def _init_layer(rng, fan_in: int, fan_out: int, prefix: str, idx: int):
    bound = 1.0 / np.sqrt(fan_in)
    w = Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)), requires_grad=True, name=f"{prefix}.w{idx}")
    b = Tensor(np.zeros(fan_out), requires_grad=True, name=f"{prefix}.b{idx}")
    return w, b


@dataclass
class Mlp:
    layers: list[tuple[Tensor, Tensor]]
    hidden: str  # "leaky_relu" | "relu"
    out: str  # "sigmoid" | "linear"

    @classmethod
    def init(cls, sizes: list[int], rng, prefix: str, hidden: str, out: str) -> "Mlp":
        layers = [_init_layer(rng, sizes[i], sizes[i + 1], prefix, i) for i in range(len(sizes) - 1)]
        return cls(layers=layers, hidden=hidden, out=out)

    @property
    def in_dim(self) -> int:
        return self.layers[0][0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.layers[-1][0].shape[1]

    def forward(self, tape: Tape, x: Tensor) -> Tensor:
        if x.data.ndim != 2 or x.shape[1] != self.in_dim:
            raise ModelError(f"expected input (n, {self.in_dim}), got {x.shape}")
        h = x
        for i, (w, b) in enumerate(self.layers):
            h = tape.add(tape.matmul(h, w), b)
            if i < len(self.layers) - 1:
                h = tape.leaky_relu(h) if self.hidden == "leaky_relu" else tape.relu(h)
        if self.out == "sigmoid":
            h = tape.sigmoid(h)
        return h

    def params(self) -> list[Tensor]:
        return [t for pair in self.layers for t in pair]


@dataclass
class ModelConfig:
    embed_dim: int = 16
    gen_hidden: int = 128
    disc_hidden: int = 128
    clf_hidden: int = 64
    feature_width: int = 32
    seed: int = 0

    @property
    def cond_dim(self) -> int:
        # conditioning vector is the leaf embedding flattened as (re || im)
        return 2 * self.embed_dim

    @property
    def noise_dim(self) -> int:
        return 2 * self.embed_dim


@dataclass
class GeneratorStage1:
    net: Mlp
    cond_dim: int
    noise_dim: int

    @classmethod
    def init(cls, cfg: ModelConfig, rng) -> "GeneratorStage1":
        sizes = [cfg.cond_dim + cfg.noise_dim, cfg.gen_hidden, cfg.gen_hidden, LO_PIXELS]
        return cls(net=Mlp.init(sizes, rng, "g1", "leaky_relu", "sigmoid"), cond_dim=cfg.cond_dim, noise_dim=cfg.noise_dim)

    def forward(self, tape: Tape, e_c: Tensor, z: Tensor) -> Tensor:
        if e_c.shape[1] != self.cond_dim or z.shape[1] != self.noise_dim:
            raise ModelError(
                f"stage-1 generator wants cond {self.cond_dim} and noise {self.noise_dim}, got {e_c.shape} and {z.shape}"
            )
        return self.net.forward(tape, tape.concat([e_c, z], axis=1))

    def params(self) -> list[Tensor]:
        return self.net.params()


@dataclass
class GeneratorStage2:
    net: Mlp
    cond_dim: int

    @classmethod
    def init(cls, cfg: ModelConfig, rng) -> "GeneratorStage2":
        sizes = [cfg.cond_dim + LO_PIXELS, cfg.gen_hidden, cfg.gen_hidden, HI_PIXELS]
        return cls(net=Mlp.init(sizes, rng, "g2", "leaky_relu", "sigmoid"), cond_dim=cfg.cond_dim)

    def forward(self, tape: Tape, e_c: Tensor, lo: Tensor) -> Tensor:
        if e_c.shape[1] != self.cond_dim or lo.shape[1] != LO_PIXELS:
            raise ModelError(f"stage-2 generator wants cond {self.cond_dim} and lo {LO_PIXELS}, got {e_c.shape} and {lo.shape}")
        return self.net.forward(tape, tape.concat([e_c, lo], axis=1))

    def params(self) -> list[Tensor]:
        return self.net.params()


@dataclass
class Discriminator:
    net: Mlp
    pixels: int
    cond_dim: int

    @classmethod
    def init(cls, cfg: ModelConfig, pixels: int, rng) -> "Discriminator":
        prefix = "d_lo" if pixels == LO_PIXELS else "d_hi"
        sizes = [pixels + cfg.cond_dim, cfg.disc_hidden, cfg.disc_hidden, 1]
        return cls(net=Mlp.init(sizes, rng, prefix, "leaky_relu", "linear"), pixels=pixels, cond_dim=cfg.cond_dim)

    def forward(self, tape: Tape, x: Tensor, e_c: Tensor) -> Tensor:
        if x.shape[1] != self.pixels:
            raise ModelError(f"discriminator expects {self.pixels} pixels, got {x.shape}")
        return self.net.forward(tape, tape.concat([x, e_c], axis=1))

    def params(self) -> list[Tensor]:
        return self.net.params()


@dataclass
class HierClassifier:
    hierarchy: ClassHierarchy
    pixels: int
    trunk: Mlp
    heads: list[tuple[Tensor, Tensor]]
    # position of a_k(y) within level_classes(k), per leaf, precomputed
    targets: dict[int, tuple[int, ...]] = field(default_factory=dict)

    @classmethod
    def init(cls, h: ClassHierarchy, pixels: int, cfg: ModelConfig, rng) -> "HierClassifier":
        if h.K < 1:
            raise ModelError("classifier needs a hierarchy with at least one level")
        prefix = "clf_lo" if pixels == LO_PIXELS else "clf_hi"
        trunk = Mlp.init([pixels, cfg.clf_hidden, cfg.clf_hidden, cfg.feature_width], rng, prefix, "relu", "linear")
        heads = [
            _init_layer(rng, cfg.feature_width, h.num_classes(k), f"{prefix}.head{k}", 0)
            for k in range(1, h.K + 1)
        ]
        targets = {
            y: tuple(h.level_classes(k).index(h.ancestor(y, k)) for k in range(1, h.K + 1))
            for y in h.leaves
        }
        return cls(hierarchy=h, pixels=pixels, trunk=trunk, heads=heads, targets=targets)

    def features(self, tape: Tape, x: Tensor) -> Tensor:
        if x.shape[1] != self.pixels:
            raise ModelError(f"classifier expects {self.pixels} pixels, got {x.shape}")
        return tape.relu(self.trunk.forward(tape, x))

    def logits(self, tape: Tape, x: Tensor) -> list[Tensor]:
        feat = self.features(tape, x)
        return [tape.add(tape.matmul(feat, w), b) for w, b in self.heads]

    def loss(self, tape: Tape, x: Tensor, leaves) -> Tensor:
        """Sum over the batch of the per-level cross-entropy stack."""
        leaves = np.atleast_1d(np.asarray(leaves, dtype=np.int64))
        for y in leaves:
            if int(y) not in self.targets:
                raise ModelError(f"node id {int(y)} is not a leaf of the classifier's hierarchy")
        per_level = np.array([self.targets[int(y)] for y in leaves])  # (n, K)
        logits = self.logits(tape, x)
        total = None
        for k, head_logits in enumerate(logits):
            term = tape.softmax_cross_entropy(head_logits, per_level[:, k])
            total = term if total is None else tape.add(total, term)
        return total

    def params(self) -> list[Tensor]:
        return self.trunk.params() + [t for pair in self.heads for t in pair]

    def freeze(self) -> None:
        for p in self.params():
            p.requires_grad = False


def _flatten_images(x, pixels: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    side = int(np.sqrt(pixels))
    if x.shape == (side, side):
        return x.reshape(1, pixels)
    if x.ndim == 3 and x.shape[1:] == (side, side):
        return x.reshape(x.shape[0], pixels)
    if x.ndim == 2 and x.shape[1] == pixels:
        return x
    raise ModelError(f"expected {side}x{side} images, got shape {x.shape}")


def classifier_logits(clf: HierClassifier, x) -> list[np.ndarray]:
    """Per-level logits for an image or image batch, as plain arrays."""
    side = int(np.sqrt(clf.pixels))
    single = np.asarray(x).shape == (side, side)
    flat = _flatten_images(x, clf.pixels)
    tape = Tape()
    out = [t.data for t in clf.logits(tape, Tensor(flat))]
    return [o[0] for o in out] if single else out


def hier_loss(clf: HierClassifier, x, y: int, h: ClassHierarchy) -> float:
    """Stacked per-level cross-entropy of one image against leaf y's path."""
    if not h.is_leaf(y):
        raise ModelError(f"node id {y} is not a leaf")
    flat = _flatten_images(x, clf.pixels)
    if flat.shape[0] != 1:
        raise ModelError("hier_loss scores one image; use HierClassifier.loss for batches")
    tape = Tape()
    return float(clf.loss(tape, Tensor(flat), [y]).item())


def predict_path(clf: HierClassifier, x) -> tuple[int, ...]:
    """Per-level argmax class ids, ties broken toward the lowest id."""
    logits = classifier_logits(clf, x)
    h = clf.hierarchy
    if logits[0].ndim != 1:
        raise ModelError("predict_path takes a single image; use predict_paths for batches")
    return tuple(h.level_classes(k + 1)[int(np.argmax(l))] for k, l in enumerate(logits))


def predict_paths(clf: HierClassifier, x) -> np.ndarray:
    """Batched predict_path: (n, K) class ids."""
    flat = _flatten_images(x, clf.pixels)
    tape = Tape()
    logits = clf.logits(tape, Tensor(flat))
    h = clf.hierarchy
    cols = []
    for k, t in enumerate(logits):
        level = np.asarray(h.level_classes(k + 1))
        cols.append(level[np.argmax(t.data, axis=1)])
    return np.stack(cols, axis=1)


def generate(g1: GeneratorStage1, g2: GeneratorStage2, e_c, z):
    """Run both stages; returns (lo 8x8, hi 16x16) or batched versions."""
    e_c = np.asarray(e_c, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    single = e_c.ndim == 1
    e2, z2 = np.atleast_2d(e_c), np.atleast_2d(z)
    if e2.shape[0] != z2.shape[0]:
        raise ModelError(f"batch mismatch: {e2.shape[0]} embeddings vs {z2.shape[0]} noise rows")
    tape = Tape()
    ec_t, z_t = Tensor(e2), Tensor(z2)
    lo = g1.forward(tape, ec_t, z_t)
    hi = g2.forward(tape, ec_t, lo)
    lo_img = lo.data.reshape(-1, 8, 8)
    hi_img = hi.data.reshape(-1, 16, 16)
    return (lo_img[0], hi_img[0]) if single else (lo_img, hi_img)


def adversarial_losses(d: Discriminator, real_batch, fake_batch, e_c) -> tuple[float, float]:
    """Non-saturating GAN losses: d_loss = BCE(D(real),1) + BCE(D(fake),0),
    g_loss = BCE(D(fake),1)."""
    real = _flatten_images(real_batch, d.pixels)
    fake = _flatten_images(fake_batch, d.pixels)
    if real.shape != fake.shape:
        raise ModelError(f"real and fake batches differ in shape: {real.shape} vs {fake.shape}")
    e2 = np.atleast_2d(np.asarray(e_c, dtype=np.float64))
    if e2.shape[0] == 1 and real.shape[0] > 1:
        e2 = np.repeat(e2, real.shape[0], axis=0)
    tape = Tape()
    ec_t = Tensor(e2)
    real_logit = d.forward(tape, Tensor(real), ec_t)
    fake_logit = d.forward(tape, Tensor(fake), ec_t)
    d_loss = tape.add(
        tape.binary_cross_entropy_with_logits(real_logit, np.ones(real_logit.shape)),
        tape.binary_cross_entropy_with_logits(fake_logit, np.zeros(fake_logit.shape)),
    )
    g_loss = tape.binary_cross_entropy_with_logits(fake_logit, np.ones(fake_logit.shape))
    return float(d_loss.item()), float(g_loss.item())


# ----------------------------------------------------------------- training


@dataclass
class ClassifierConfig:
    epochs: int = 80
    batch_size: int = 64
    lr: float = 0.003
    beta1: float = 0.5
    beta2: float = 0.999
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ModelError("classifier config needs epochs >= 1, batch_size >= 1, lr > 0")


def train_classifier(clf: HierClassifier, dataset: Dataset, resolution: int, cfg: ClassifierConfig) -> HierClassifier:
    """Adam on mean stacked cross-entropy over the train split; freezes and
    returns the classifier. Deterministic for a given config."""
    if resolution not in (8, 16):
        raise ModelError(f"resolution must be 8 or 16, got {resolution}")
    if resolution * resolution != clf.pixels:
        raise ModelError(f"classifier expects {clf.pixels} pixels but resolution {resolution} was requested")
    params = clf.params()
    states = [AdamState.for_param(p) for p in params]
    for b in batch_iter(dataset, "train", cfg.batch_size, seed=cfg.seed, num_epochs=cfg.epochs):
        imgs = b.lo if resolution == 8 else b.hi
        tape = Tape()
        x = Tensor(imgs.reshape(imgs.shape[0], -1))
        loss = tape.scale(clf.loss(tape, x, b.leaf), 1.0 / imgs.shape[0])
        grads = tape.backward(loss)
        adam_step(params, [grads[p] for p in params], states, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2)
    clf.freeze()
    return clf


def evaluate_classifier(clf: HierClassifier, samples) -> dict:
    """Leaf and per-level accuracy over a list of dataset samples."""
    h = clf.hierarchy
    imgs = np.stack([s.lo if clf.pixels == LO_PIXELS else s.hi for s in samples])
    leaves = np.array([s.leaf for s in samples])
    paths = predict_paths(clf, imgs)
    true = np.array([h.ancestor_path(int(y)) for y in leaves])
    per_level = (paths == true).mean(axis=0)
    return {
        "leaf": float(per_level[-1]),
        "levels": tuple(float(a) for a in per_level),
        "path_consistent": float(
            np.mean([h.nodes[int(p[-1])].parent == int(p[-2]) for p in paths]) if h.K >= 2 else 1.0
        ),
    }


# ------------------------------------------------------------ the model set


@dataclass
class ModelSet:
    config: ModelConfig
    hierarchy: ClassHierarchy
    g1: GeneratorStage1
    g2: GeneratorStage2
    d_lo: Discriminator
    d_hi: Discriminator
    clf_lo: HierClassifier
    clf_hi: HierClassifier
    table: ClassEmbeddingTable

    def __post_init__(self):
        if self.table.dim != self.config.embed_dim:
            raise ModelError(f"embedding table dim {self.table.dim} != config embed_dim {self.config.embed_dim}")
        if self.d_lo.pixels != LO_PIXELS or self.d_hi.pixels != HI_PIXELS:
            raise ModelError("discriminator resolutions are swapped")
        if self.clf_lo.pixels != LO_PIXELS or self.clf_hi.pixels != HI_PIXELS:
            raise ModelError("classifier resolutions are swapped")

    def condition(self, y: int) -> np.ndarray:
        return leaf_condition_vector(self.table, y)


def build_models(h: ClassHierarchy, table: ClassEmbeddingTable, cfg: ModelConfig) -> ModelSet:
    rng = np.random.default_rng(cfg.seed)
    return ModelSet(
        config=cfg,
        hierarchy=h,
        g1=GeneratorStage1.init(cfg, rng),
        g2=GeneratorStage2.init(cfg, rng),
        d_lo=Discriminator.init(cfg, LO_PIXELS, rng),
        d_hi=Discriminator.init(cfg, HI_PIXELS, rng),
        clf_lo=HierClassifier.init(h, LO_PIXELS, cfg, rng),
        clf_hi=HierClassifier.init(h, HI_PIXELS, cfg, rng),
        table=table,
    )


_MANIFEST_KEY = "__manifest__"


def _named_params(ms: ModelSet) -> dict[str, Tensor]:
    named = {}
    for component in (ms.g1, ms.g2, ms.d_lo, ms.d_hi, ms.clf_lo, ms.clf_hi):
        for p in component.params():
            named[p.name] = p
    return named


def save_models(ms: ModelSet, path) -> None:
    """Checkpoint all network parameters plus a manifest entry holding the
    architecture config as JSON (utf-8 bytes stored as float64 values)."""
    manifest = json.dumps(
        {
            "embed_dim": ms.config.embed_dim,
            "gen_hidden": ms.config.gen_hidden,
            "disc_hidden": ms.config.disc_hidden,
            "clf_hidden": ms.config.clf_hidden,
            "feature_width": ms.config.feature_width,
            "seed": ms.config.seed,
            "hierarchy": ms.hierarchy.serialize(),
        },
        sort_keys=True,
    ).encode("utf-8")
    named: dict[str, np.ndarray] = {k: v.data for k, v in _named_params(ms).items()}
    named[_MANIFEST_KEY] = np.frombuffer(manifest, dtype=np.uint8).astype(np.float64)
    save_checkpoint(path, named)


def load_models(path, table: ClassEmbeddingTable) -> ModelSet:
    """Rebuild a ModelSet from a checkpoint; shapes are validated against the
    manifest's architecture config. Classifiers come back frozen."""
    blobs = load_checkpoint(path)
    if _MANIFEST_KEY not in blobs:
        raise ModelError(f"{path} has no architecture manifest")
    manifest = json.loads(bytes(blobs.pop(_MANIFEST_KEY).astype(np.uint8)).decode("utf-8"))
    cfg = ModelConfig(
        embed_dim=manifest["embed_dim"],
        gen_hidden=manifest["gen_hidden"],
        disc_hidden=manifest["disc_hidden"],
        clf_hidden=manifest["clf_hidden"],
        feature_width=manifest["feature_width"],
        seed=manifest["seed"],
    )
    h = parse_hierarchy(manifest["hierarchy"])
    ms = build_models(h, table, cfg)
    for name, param in _named_params(ms).items():
        if name not in blobs:
            raise ModelError(f"checkpoint {path} is missing parameter {name!r}")
        if blobs[name].shape != param.data.shape:
            raise ModelError(
                f"checkpoint {path}: parameter {name!r} has shape {blobs[name].shape}, expected {param.data.shape}"
            )
        param.data = blobs[name]
    extras = set(blobs) - {p.name for p in _named_params(ms).values()}
    if extras:
        raise ModelError(f"checkpoint {path} has unknown parameters {sorted(extras)}")
    ms.clf_lo.freeze()
    ms.clf_hi.freeze()
    return ms


def save_classifier(clf: HierClassifier, path) -> None:
    """Checkpoint a single classifier with enough manifest to rebuild it."""
    manifest = json.dumps(
        {
            "pixels": clf.pixels,
            "clf_hidden": clf.trunk.layers[0][0].shape[1],
            "feature_width": clf.trunk.layers[-1][0].shape[1],
            "hierarchy": clf.hierarchy.serialize(),
        },
        sort_keys=True,
    ).encode("utf-8")
    named: dict[str, np.ndarray] = {p.name: p.data for p in clf.params()}
    named[_MANIFEST_KEY] = np.frombuffer(manifest, dtype=np.uint8).astype(np.float64)
    save_checkpoint(path, named)


def load_classifier(path) -> HierClassifier:
    """Rebuild a frozen classifier from its checkpoint."""
    blobs = load_checkpoint(path)
    if _MANIFEST_KEY not in blobs:
        raise ModelError(f"{path} has no architecture manifest")
    manifest = json.loads(bytes(blobs.pop(_MANIFEST_KEY).astype(np.uint8)).decode("utf-8"))
    h = parse_hierarchy(manifest["hierarchy"])
    cfg = ModelConfig(clf_hidden=manifest["clf_hidden"], feature_width=manifest["feature_width"])
    clf = HierClassifier.init(h, manifest["pixels"], cfg, np.random.default_rng(0))
    for p in clf.params():
        if p.name not in blobs:
            raise ModelError(f"checkpoint {path} is missing parameter {p.name!r}")
        if blobs[p.name].shape != p.data.shape:
            raise ModelError(
                f"checkpoint {path}: parameter {p.name!r} has shape {blobs[p.name].shape}, expected {p.data.shape}"
            )
        p.data = blobs[p.name]
    extras = set(blobs) - {p.name for p in clf.params()}
    if extras:
        raise ModelError(f"checkpoint {path} has unknown parameters {sorted(extras)}")
    clf.freeze()
    return clf
