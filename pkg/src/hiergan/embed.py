"""Complex-valued class embeddings trained to rank true parent-child pairs.

Every class in a hierarchy gets a complex vector, and a single shared
relation vector represents the "is A" edge. A pair (p, c) is scored by
rotating both class vectors with the relation (componentwise complex
multiplication) and taking the cosine between the rotated vectors, flattened
to real coordinates. Training minimizes a hinge ranking loss that pushes
every true pair above sampled corruptions by a margin.

The differentiable graph builders at the bottom are shared with the joint
GAN objective, which keeps refining the same table while the generator
trains.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import AdamState, Tape, Tensor, adam_step, load_checkpoint, save_checkpoint
from .hierarchy import ClassHierarchy

PAPER_SCALE_D = 100  # full-scale embedding width; desk default is 16


class EmbeddingError(ValueError):
    """Invalid embedding inputs: dimension mismatch, degenerate vectors,
    unknown ids, or a hierarchy too small to corrupt."""


@dataclass
class ComplexVec:
    """One complex vector split into real and imaginary parts."""

    re: np.ndarray
    im: np.ndarray

    def __post_init__(self):
        self.re = np.asarray(self.re, dtype=np.float64)
        self.im = np.asarray(self.im, dtype=np.float64)
        if self.re.ndim != 1 or self.re.shape != self.im.shape or self.re.size < 1:
            raise EmbeddingError(
                f"ComplexVec needs equal-length 1-D parts, got re {self.re.shape}, im {self.im.shape}"
            )

    @property
    def dim(self) -> int:
        return self.re.size


def complex_transform(v: ComplexVec, rel: ComplexVec) -> ComplexVec:
    """Componentwise complex product of a class vector with the relation."""
    if v.dim != rel.dim:
        raise EmbeddingError(f"dimension mismatch: {v.dim} vs {rel.dim}")
    return ComplexVec(
        re=v.re * rel.re - v.im * rel.im,
        im=v.re * rel.im + v.im * rel.re,
    )


def _flat(v: ComplexVec) -> np.ndarray:
    return np.concatenate([v.re, v.im])


def pair_score(p: ComplexVec, rel: ComplexVec, c: ComplexVec) -> float:
    """Cosine compatibility of a candidate (p, c) edge, in [-1, 1].

    Both vectors are rotated by the relation first; the cosine is taken over
    the 2D-length real flattening of the rotated vectors.
    """
    fp = _flat(complex_transform(p, rel))
    fc = _flat(complex_transform(c, rel))
    norm_p, norm_c = float(np.linalg.norm(fp)), float(np.linalg.norm(fc))
    if norm_p == 0.0 or norm_c == 0.0:
        raise EmbeddingError("degenerate embedding: zero-norm transformed vector")
    return float(fp @ fc / (norm_p * norm_c))


@dataclass
class CheConfig:
    # margin must stay below 0.25: scores are cosines, and satisfying both
    # "true pair beats its corruptions" and "deeper pair beats the shallower
    # pair's corruptions" by m requires s(1-s) >= m for some s in [0, 1]
    dim: int = 16
    margin: float = 0.2
    negatives_per_positive: int = 10
    lr: float = 0.01
    epochs: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.dim < 1 or self.negatives_per_positive < 1 or self.epochs < 1:
            raise EmbeddingError("dim, negatives_per_positive, and epochs must be positive")
        if self.margin <= 0 or self.lr <= 0:
            raise EmbeddingError("margin and lr must be positive")


@dataclass
class ClassEmbeddingTable:
    """Finished embeddings: one complex vector per class plus the relation.

    ``names`` and ``leaves`` mirror the hierarchy the table was trained on so
    the table is self-describing for export and conditioning.
    """

    class_re: np.ndarray  # (N, D)
    class_im: np.ndarray  # (N, D)
    rel_re: np.ndarray  # (D,)
    rel_im: np.ndarray  # (D,)
    names: tuple[str, ...]
    leaves: tuple[int, ...]

    def __post_init__(self):
        n, d = self.class_re.shape
        if self.class_im.shape != (n, d) or self.rel_re.shape != (d,) or self.rel_im.shape != (d,):
            raise EmbeddingError("inconsistent table shapes")
        if len(self.names) != n:
            raise EmbeddingError(f"{len(self.names)} names for {n} classes")
        for arr in (self.class_re, self.class_im, self.rel_re, self.rel_im):
            if not np.all(np.isfinite(arr)):
                raise EmbeddingError("table contains non-finite values")
        if not (np.any(self.rel_re != 0.0) or np.any(self.rel_im != 0.0)):
            raise EmbeddingError("relation embedding is all-zero")

    @property
    def dim(self) -> int:
        return self.class_re.shape[1]

    @property
    def num_classes(self) -> int:
        return self.class_re.shape[0]

    def vec(self, class_id: int) -> ComplexVec:
        if not 0 <= class_id < self.num_classes:
            raise EmbeddingError(f"unknown class id {class_id}")
        return ComplexVec(self.class_re[class_id], self.class_im[class_id])

    def relation(self) -> ComplexVec:
        return ComplexVec(self.rel_re, self.rel_im)

    def score(self, p: int, c: int) -> float:
        return pair_score(self.vec(p), self.relation(), self.vec(c))


def leaf_condition_vector(table: ClassEmbeddingTable, y: int) -> np.ndarray:
    """Flattened (re || im) conditioning vector for a leaf class, length 2D."""
    if y not in table.leaves:
        raise EmbeddingError(f"id {y} is not a leaf of this table's hierarchy")
    return np.concatenate([table.class_re[y], table.class_im[y]])


def save_table(path, table: ClassEmbeddingTable) -> None:
    save_checkpoint(
        path,
        {
            "class_re": table.class_re,
            "class_im": table.class_im,
            "rel_re": table.rel_re,
            "rel_im": table.rel_im,
        },
    )


def load_table(path, h: ClassHierarchy) -> ClassEmbeddingTable:
    arrays = load_checkpoint(path)
    missing = {"class_re", "class_im", "rel_re", "rel_im"} - set(arrays)
    if missing:
        raise EmbeddingError(f"embedding checkpoint is missing {sorted(missing)}")
    if arrays["class_re"].shape[0] != len(h):
        raise EmbeddingError(
            f"checkpoint has {arrays['class_re'].shape[0]} classes, hierarchy has {len(h)}"
        )
    return ClassEmbeddingTable(
        class_re=arrays["class_re"],
        class_im=arrays["class_im"],
        rel_re=arrays["rel_re"],
        rel_im=arrays["rel_im"],
        names=tuple(n.name for n in h.nodes),
        leaves=h.leaves,
    )


# ----------------------------------------------------------------- sampling


def sample_negatives(
    h: ClassHierarchy, pair: tuple[int, int], n: int, rng: np.random.Generator
) -> list[tuple[int, int]]:
    """Corrupt one side of a true pair, n times.

    A corruption is valid when its two classes have no parent-child relation
    in either direction and are distinct (the score is symmetric, so a
    reversed true pair would tie with a positive and make ranking
    unsatisfiable). Each draw picks the side uniformly, then a replacement
    uniformly from that side's valid classes; a draw whose side admits no
    corruption falls back to the other side.
    """
    p, c = pair
    if not h.is_parent_child(p, c):
        raise EmbeddingError(f"({p}, {c}) is not a parent-child pair")
    if n < 1:
        raise EmbeddingError("need n >= 1 negatives")
    if len(h) < 3:
        raise EmbeddingError(f"hierarchy with {len(h)} nodes admits no negative pairs")
    ids = range(len(h))

    def unrelated(a: int, b: int) -> bool:
        return a != b and not h.is_parent_child(a, b) and not h.is_parent_child(b, a)

    parent_side = [q for q in ids if unrelated(q, c)]
    child_side = [q for q in ids if unrelated(p, q)]
    out: list[tuple[int, int]] = []
    for _ in range(n):
        side = int(rng.integers(2))
        cands = parent_side if side == 0 else child_side
        if not cands:
            side = 1 - side
            cands = parent_side if side == 0 else child_side
        pick = cands[int(rng.integers(len(cands)))]
        out.append((pick, c) if side == 0 else (p, pick))
    return out


def che_margin_loss(pos_scores, neg_scores, margin: float) -> float:
    """Sum over (positive, paired negative) of max(0, margin + neg - pos).

    ``neg_scores`` has one row of corruption scores per positive. Zero
    exactly when every positive beats each of its negatives by the margin.
    """
    pos = np.asarray(pos_scores, dtype=np.float64)
    neg = np.asarray(neg_scores, dtype=np.float64)
    if pos.ndim != 1 or neg.ndim != 2 or neg.shape[0] != pos.shape[0]:
        raise EmbeddingError(f"expected pos (P,) and neg (P, n), got {pos.shape} and {neg.shape}")
    return float(np.maximum(0.0, margin + neg - pos[:, None]).sum())


# ------------------------------------------------------ differentiable graph


@dataclass
class TableParams:
    """The four trainable tensors behind a ClassEmbeddingTable."""

    class_re: Tensor
    class_im: Tensor
    rel_re: Tensor
    rel_im: Tensor

    @classmethod
    def init(cls, num_classes: int, dim: int, rng: np.random.Generator) -> "TableParams":
        scale = 0.5 / np.sqrt(dim)

        def draw(shape, name):
            return Tensor(rng.uniform(-scale, scale, size=shape), requires_grad=True, name=name)

        return cls(
            class_re=draw((num_classes, dim), "emb.class_re"),
            class_im=draw((num_classes, dim), "emb.class_im"),
            rel_re=draw((dim,), "emb.rel_re"),
            rel_im=draw((dim,), "emb.rel_im"),
        )

    @classmethod
    def from_table(cls, table: ClassEmbeddingTable, requires_grad: bool = True) -> "TableParams":
        return cls(
            class_re=Tensor(table.class_re.copy(), requires_grad, name="emb.class_re"),
            class_im=Tensor(table.class_im.copy(), requires_grad, name="emb.class_im"),
            rel_re=Tensor(table.rel_re.copy(), requires_grad, name="emb.rel_re"),
            rel_im=Tensor(table.rel_im.copy(), requires_grad, name="emb.rel_im"),
        )

    def params(self) -> list[Tensor]:
        return [self.class_re, self.class_im, self.rel_re, self.rel_im]

    def to_table(self, h: ClassHierarchy) -> ClassEmbeddingTable:
        return ClassEmbeddingTable(
            class_re=self.class_re.data.copy(),
            class_im=self.class_im.data.copy(),
            rel_re=self.rel_re.data.copy(),
            rel_im=self.rel_im.data.copy(),
            names=tuple(n.name for n in h.nodes),
            leaves=h.leaves,
        )


def pair_scores_graph(tape: Tape, tp: TableParams, pairs: np.ndarray) -> Tensor:
    """Differentiable batch of pair scores; ``pairs`` is int (B, 2) -> (B,)."""
    pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    dim = tp.rel_re.shape[0]
    ones = Tensor(np.ones((dim, 1)))
    rp = tape.slice(tp.class_re, pairs[:, 0])
    ip = tape.slice(tp.class_im, pairs[:, 0])
    rc = tape.slice(tp.class_re, pairs[:, 1])
    ic = tape.slice(tp.class_im, pairs[:, 1])

    def rotate(re, im):
        rot_re = tape.sub(tape.mul(re, tp.rel_re), tape.mul(im, tp.rel_im))
        rot_im = tape.add(tape.mul(re, tp.rel_im), tape.mul(im, tp.rel_re))
        return rot_re, rot_im

    def row_dot(a_re, a_im, b_re, b_im):
        return tape.add(
            tape.matmul(tape.mul(a_re, b_re), ones),
            tape.matmul(tape.mul(a_im, b_im), ones),
        )

    tp_re, tp_im = rotate(rp, ip)
    tc_re, tc_im = rotate(rc, ic)
    dots = row_dot(tp_re, tp_im, tc_re, tc_im)  # (B, 1)
    norm_p = tape.sqrt(row_dot(tp_re, tp_im, tp_re, tp_im))
    norm_c = tape.sqrt(row_dot(tc_re, tc_im, tc_re, tc_im))
    scores = tape.div(dots, tape.mul(norm_p, norm_c))
    return tape.reshape(scores, (pairs.shape[0],))


def margin_loss_graph(
    tape: Tape, tp: TableParams, pos_pairs: np.ndarray, neg_pairs: np.ndarray, margin: float
) -> Tensor:
    """Differentiable hinge ranking loss; ``neg_pairs`` is int (P, n, 2)."""
    pos_pairs = np.asarray(pos_pairs, dtype=np.int64)
    neg_pairs = np.asarray(neg_pairs, dtype=np.int64)
    num_pos, num_neg = neg_pairs.shape[0], neg_pairs.shape[1]
    pos = tape.reshape(pair_scores_graph(tape, tp, pos_pairs), (num_pos, 1))
    neg = tape.reshape(pair_scores_graph(tape, tp, neg_pairs.reshape(-1, 2)), (num_pos, num_neg))
    hinge = tape.relu(tape.add_const(tape.sub(neg, pos), margin))
    return tape.sum(hinge)


def train_che(h: ClassHierarchy, cfg: CheConfig) -> ClassEmbeddingTable:
    """Fit the table with full-batch Adam, resampling negatives each epoch."""
    pos_pairs = np.asarray(h.parent_child_pairs(), dtype=np.int64)
    if pos_pairs.size == 0:
        raise EmbeddingError("hierarchy has no parent-child pairs to train on")
    if len(h) < 3:
        raise EmbeddingError("hierarchy too small to sample negative pairs")
    rng = np.random.default_rng(cfg.seed)
    tp = TableParams.init(len(h), cfg.dim, rng)
    params = tp.params()
    states = [AdamState.for_param(p) for p in params]
    for _ in range(cfg.epochs):
        negs = np.asarray(
            [
                sample_negatives(h, (int(p), int(c)), cfg.negatives_per_positive, rng)
                for p, c in pos_pairs
            ],
            dtype=np.int64,
        )
        tape = Tape()
        loss = margin_loss_graph(tape, tp, pos_pairs, negs, cfg.margin)
        grads = tape.backward(loss)
        adam_step(
            params,
            [grads.get(p, np.zeros_like(p.data)) for p in params],
            states,
            lr=cfg.lr,
        )
    return tp.to_table(h)


# ----------------------------------------------------------------- analysis


def ranking_accuracy(
    table: ClassEmbeddingTable,
    h: ClassHierarchy,
    negatives_per_positive: int = 10,
    seed: int = 0,
) -> float:
    """Fraction of true pairs scoring above all their sampled corruptions."""
    rng = np.random.default_rng(seed)
    pairs = h.parent_child_pairs()
    wins = 0
    for p, c in pairs:
        s_pos = table.score(p, c)
        negs = sample_negatives(h, (p, c), negatives_per_positive, rng)
        if all(s_pos > table.score(np_, nc) for np_, nc in negs):
            wins += 1
    return wins / len(pairs)


def _flat_rows(table: ClassEmbeddingTable) -> np.ndarray:
    return np.concatenate([table.class_re, table.class_im], axis=1)


def similarity_matrix(table: ClassEmbeddingTable) -> np.ndarray:
    """Cosine similarities between all class vectors (flattened re || im)."""
    rows = _flat_rows(table)
    norms = np.linalg.norm(rows, axis=1)
    if np.any(norms == 0.0):
        raise EmbeddingError("degenerate embedding: zero-norm class vector")
    unit = rows / norms[:, None]
    return unit @ unit.T


def similarity_csv(table: ClassEmbeddingTable) -> str:
    """CSV rendering of the similarity matrix: name header, 6 decimals."""
    sim = similarity_matrix(table)
    lines = ["class," + ",".join(table.names)]
    for name, row in zip(table.names, sim):
        lines.append(name + "," + ",".join(f"{v:.6f}" for v in row))
    return "\n".join(lines) + "\n"


def sibling_similarity_gap(table: ClassEmbeddingTable, h: ClassHierarchy) -> float:
    """Mean leaf-pair cosine among siblings minus the mean among non-siblings."""
    sim = similarity_matrix(table)
    sib, non = [], []
    for i, a in enumerate(h.leaves):
        for b in h.leaves[i + 1 :]:
            value = sim[a, b]
            if h.nodes[a].parent == h.nodes[b].parent:
                sib.append(value)
            else:
                non.append(value)
    if not sib or not non:
        raise EmbeddingError("hierarchy has no sibling/non-sibling leaf contrast")
    return float(np.mean(sib) - np.mean(non))
