import json

import numpy as np
import pytest

from hiergan.autodiff import NonFiniteError, Tensor, grad_check
from hiergan.embed import CheConfig, train_che
from hiergan.hierarchy import FIXTURE_TREE, parse_hierarchy
from hiergan.models import ModelConfig, build_models, hier_loss
from hiergan.synthdata import default_dataset_spec, generate_dataset
from hiergan.training import (
    GeneratedBatch,
    TrainConfig,
    TrainMode,
    Trainer,
    TrainingError,
    generate_set,
    hierarchy_penalty,
    run_training,
    save_run,
    trace_csv,
)


@pytest.fixture(scope="module")
def tree():
    return parse_hierarchy(FIXTURE_TREE)


@pytest.fixture(scope="module")
def corpus(tree):
    return generate_dataset(default_dataset_spec(tree, samples_per_leaf=30, seed=0))


@pytest.fixture(scope="module")
def frozen_clfs(tree, corpus):
    # GAN training needs frozen classifiers; accuracy is irrelevant here
    ms = build_models(tree, train_che(tree, CheConfig(seed=0, epochs=50)), ModelConfig(seed=0))
    ms.clf_lo.freeze()
    ms.clf_hi.freeze()
    return ms.clf_lo, ms.clf_hi


@pytest.fixture(scope="module")
def seg_table(tree):
    return train_che(tree, CheConfig(seed=1, epochs=50))


def tiny_cfg(**kw):
    base = dict(
        mode=TrainMode.TREEGAN,
        steps_per_stage=6,
        eval_every=3,
        eval_n_per_class=4,
        batch_size=8,
        seed=0,
    )
    base.update(kw)
    return TrainConfig(**base)


# ------------------------------------------------------------ config / mode


def test_mode_parsing():
    assert TrainMode.from_string("TreeGAN") is TrainMode.TREEGAN
    assert TrainMode.from_string("npc") is TrainMode.NPC
    with pytest.raises(TrainingError, match="unknown mode"):
        TrainMode.from_string("stylegan")


def test_joint_embedding_modes():
    assert TrainMode.TREEGAN.joint_embeddings and TrainMode.NPC.joint_embeddings
    assert not TrainMode.SEG.joint_embeddings and not TrainMode.FLAT.joint_embeddings


def test_config_validation():
    with pytest.raises(TrainingError):
        TrainConfig(lambda1=-1.0)
    with pytest.raises(TrainingError):
        TrainConfig(gan_lr=0.0)
    with pytest.raises(TrainingError):
        TrainConfig(che_margin=0.3)
    with pytest.raises(TrainingError):
        TrainConfig(batch_size=0)
    with pytest.raises(TrainingError):
        TrainConfig(seed=-1)


def test_only_full_mode_applies_penalty():
    assert TrainConfig(mode="treegan", lambda1=15.0).effective_lambda1 == 15.0
    for mode in ("npc", "seg", "flat"):
        assert TrainConfig(mode=mode, lambda1=15.0).effective_lambda1 == 0.0


def test_config_accepts_mode_strings():
    cfg = TrainConfig(mode="flat")
    assert cfg.mode is TrainMode.FLAT


# -------------------------------------------------------- hierarchy penalty


def test_penalty_single_sample_equals_hier_loss(tree, frozen_clfs):
    clf_lo, _ = frozen_clfs
    img = np.random.default_rng(0).uniform(size=(1, 8, 8))
    y = int(tree.leaves[2])
    batch = GeneratedBatch(samples=img, leaf=y, stage=1)
    assert hierarchy_penalty(clf_lo, batch, tree) == pytest.approx(
        hier_loss(clf_lo, img[0], y, tree), abs=1e-12
    )


def test_penalty_matches_loop_average(tree, frozen_clfs):
    clf_lo, _ = frozen_clfs
    imgs = np.random.default_rng(1).uniform(size=(7, 8, 8))
    y = int(tree.leaves[4])
    batch = GeneratedBatch(samples=imgs, leaf=y, stage=1)
    want = np.mean([hier_loss(clf_lo, img, y, tree) for img in imgs])
    assert hierarchy_penalty(clf_lo, batch, tree) == pytest.approx(want, abs=1e-12)


def test_penalty_rejects_bad_input(tree, frozen_clfs):
    clf_lo, _ = frozen_clfs
    with pytest.raises(TrainingError, match="non-empty"):
        hierarchy_penalty(clf_lo, GeneratedBatch(np.zeros((0, 8, 8)), int(tree.leaves[0]), 1), tree)
    with pytest.raises(TrainingError, match="leaf"):
        hierarchy_penalty(clf_lo, GeneratedBatch(np.zeros((2, 8, 8)), tree.id_of("canine"), 1), tree)
    with pytest.raises(ValueError):
        hierarchy_penalty(clf_lo, GeneratedBatch(np.zeros((2, 16, 16)), int(tree.leaves[0]), 2), tree)


# -------------------------------------------------------------- generate_set


def test_generate_set_shapes_and_determinism(tree, seg_table):
    ms = build_models(tree, seg_table, ModelConfig(seed=2))
    y = int(tree.leaves[1])
    a = generate_set(ms, seg_table, y, 5, seed=42)
    b = generate_set(ms, seg_table, y, 5, seed=42)
    assert a.samples.shape == (5, 16, 16) and a.leaf == y and a.stage == 2
    assert np.array_equal(a.samples, b.samples)
    c = generate_set(ms, seg_table, y, 5, seed=43)
    assert not np.array_equal(a.samples, c.samples)


def test_generate_set_empty(tree, seg_table):
    ms = build_models(tree, seg_table, ModelConfig(seed=3))
    batch = generate_set(ms, seg_table, int(tree.leaves[0]), 0, seed=0)
    assert batch.samples.shape == (0, 16, 16)


def test_generate_set_rejects_non_leaf(tree, seg_table):
    ms = build_models(tree, seg_table, ModelConfig(seed=4))
    with pytest.raises(ValueError):
        generate_set(ms, seg_table, tree.id_of("canine"), 3, seed=0)


# ------------------------------------------------- composite objective check


def test_composite_generator_objective_gradcheck(tree, corpus):
    # tiny configuration: D=2 embeddings, 2-unit layers everywhere
    cfg = ModelConfig(embed_dim=2, gen_hidden=2, disc_hidden=2, clf_hidden=2, feature_width=2, seed=5)
    tcfg = tiny_cfg(embed_dim=2, batch_size=3, lambda1=15.0)
    ms = build_models(tree, train_che(tree, CheConfig(dim=2, seed=2, epochs=30)), cfg)
    ms.clf_lo.freeze()
    ms.clf_hi.freeze()
    trainer = Trainer(corpus, tree, tcfg, ms.clf_lo, ms.clf_hi)
    # swap the trainer's models for the tiny set so every layer is 2 units
    trainer.models.g1 = ms.g1
    trainer.models.g2 = ms.g2
    trainer.models.d_lo = ms.d_lo
    trainer.models.d_hi = ms.d_hi
    trainer.models.clf_lo = ms.clf_lo
    trainer.models.clf_hi = ms.clf_hi
    trainer._enter_stage(2)
    y = int(tree.leaves[0])
    z = np.random.default_rng(6).standard_normal((3, 4))
    params = ms.g1.params() + ms.g2.params() + trainer.table_params.params()
    for p in ms.g1.params():
        p.requires_grad = True  # stage switch froze them; re-enable for the check

    def objective(tape, ps):
        e_c = trainer._condition(tape, y, 3)
        fake = trainer._fake_graph(tape, e_c, Tensor(z))
        g_adv = tape.binary_cross_entropy_with_logits(
            trainer.disc.forward(tape, fake, e_c), np.ones((3, 1))
        )
        penalty = tape.scale(trainer.clf.loss(tape, fake, [y] * 3), 1.0 / 3)
        return tape.add(g_adv, tape.scale(penalty, 15.0))

    report = grad_check(objective, params, step=1e-6, max_per_param=25)
    assert report.passed, report


# -------------------------------------------------------------- run_training


def test_run_replays_exactly(tree, corpus, frozen_clfs):
    clf_lo, clf_hi = frozen_clfs
    runs = [run_training(corpus, tree, tiny_cfg(), clf_lo, clf_hi) for _ in range(2)]
    assert trace_csv(runs[0].trace) == trace_csv(runs[1].trace)
    for a, b in zip(runs[0].models.g2.params(), runs[1].models.g2.params()):
        assert np.array_equal(a.data, b.data)


def test_lambda_zero_matches_npc_bitwise(tree, corpus, frozen_clfs):
    clf_lo, clf_hi = frozen_clfs
    a = run_training(corpus, tree, tiny_cfg(mode="treegan", lambda1=0.0), clf_lo, clf_hi)
    b = run_training(corpus, tree, tiny_cfg(mode="npc", lambda1=15.0), clf_lo, clf_hi)
    assert trace_csv(a.trace) == trace_csv(b.trace)
    for pa, pb in zip(
        a.models.g1.params() + a.models.g2.params(), b.models.g1.params() + b.models.g2.params()
    ):
        assert np.array_equal(pa.data, pb.data)


def test_seg_table_bit_unchanged(tree, corpus, frozen_clfs, seg_table, tmp_path):
    clf_lo, clf_hi = frozen_clfs
    before = {
        "class_re": seg_table.class_re.copy(),
        "class_im": seg_table.class_im.copy(),
        "rel_re": seg_table.rel_re.copy(),
        "rel_im": seg_table.rel_im.copy(),
    }
    art = run_training(corpus, tree, tiny_cfg(mode="seg"), clf_lo, clf_hi, embeddings=seg_table)
    assert np.array_equal(art.table.class_re, before["class_re"])
    assert np.array_equal(art.table.class_im, before["class_im"])
    assert np.array_equal(art.table.rel_re, before["rel_re"])
    assert np.array_equal(art.table.rel_im, before["rel_im"])


def test_classifiers_untouched_by_training(tree, corpus, frozen_clfs):
    clf_lo, clf_hi = frozen_clfs
    before = [p.data.copy() for p in clf_lo.params() + clf_hi.params()]
    run_training(corpus, tree, tiny_cfg(mode="treegan"), clf_lo, clf_hi)
    after = [p.data for p in clf_lo.params() + clf_hi.params()]
    assert all(np.array_equal(x, y) for x, y in zip(before, after))


def test_mode_embedding_requirements(tree, corpus, frozen_clfs, seg_table):
    clf_lo, clf_hi = frozen_clfs
    with pytest.raises(TrainingError, match="SEG mode requires"):
        run_training(corpus, tree, tiny_cfg(mode="seg"), clf_lo, clf_hi)
    with pytest.raises(TrainingError, match="does not accept"):
        run_training(corpus, tree, tiny_cfg(mode="flat"), clf_lo, clf_hi, embeddings=seg_table)
    with pytest.raises(TrainingError, match="does not accept"):
        run_training(corpus, tree, tiny_cfg(mode="treegan"), clf_lo, clf_hi, embeddings=seg_table)


def test_rejects_unfrozen_classifier(tree, corpus, seg_table):
    ms = build_models(tree, seg_table, ModelConfig(seed=7))
    with pytest.raises(TrainingError, match="frozen"):
        run_training(corpus, tree, tiny_cfg(mode="flat"), ms.clf_lo, ms.clf_hi)


def test_rejects_hierarchy_mismatch(tree, corpus, frozen_clfs):
    clf_lo, clf_hi = frozen_clfs
    other = parse_hierarchy("root\nroot/a\nroot/b\n")
    other_corpus = generate_dataset(default_dataset_spec(other, samples_per_leaf=10, seed=0))
    with pytest.raises(TrainingError, match="different hierarchy"):
        run_training(other_corpus, tree, tiny_cfg(), clf_lo, clf_hi)


def test_trace_structure(tree, corpus, frozen_clfs):
    clf_lo, clf_hi = frozen_clfs
    art = run_training(corpus, tree, tiny_cfg(steps_per_stage=7), clf_lo, clf_hi)
    steps = [r.step for r in art.trace]
    assert steps == list(range(1, 15))  # strictly increasing across stages
    assert [r.stage for r in art.trace] == [1] * 7 + [2] * 7
    # round-robin over leaves in id order
    want = [int(tree.leaves[t % 6]) for t in range(7)]
    assert [r.class_id for r in art.trace[:7]] == want
    header = trace_csv(art.trace).splitlines()[0]
    assert header == "step,stage,class_id,d_loss,g_loss,h_penalty,che_loss"


def test_eval_checkpoints_during_stage_two(tree, corpus, frozen_clfs):
    clf_lo, clf_hi = frozen_clfs
    art = run_training(corpus, tree, tiny_cfg(steps_per_stage=6, eval_every=3), clf_lo, clf_hi)
    # stage 2 spans steps 7..12; evals at its steps 3 and 6 -> global 9 and 12
    assert [s for s, _ in art.reports] == [9, 12]


def test_joint_modes_record_che_loss(tree, corpus, frozen_clfs):
    clf_lo, clf_hi = frozen_clfs
    joint = run_training(corpus, tree, tiny_cfg(mode="npc"), clf_lo, clf_hi)
    frozen = run_training(corpus, tree, tiny_cfg(mode="flat"), clf_lo, clf_hi)
    assert any(r.che_loss != 0.0 for r in joint.trace)
    assert all(r.che_loss == 0.0 for r in frozen.trace)
    assert all(r.h_penalty == 0.0 for r in joint.trace)  # npc skips the penalty


def test_aborts_on_non_finite(tree, corpus, frozen_clfs, monkeypatch):
    clf_lo, clf_hi = frozen_clfs
    calls = {"n": 0}
    original = Trainer.joint_step

    def explode(self, real, y, z):
        calls["n"] += 1
        if calls["n"] == 4:
            raise NonFiniteError("op 'exp' produced non-finite values")
        return original(self, real, y, z)

    monkeypatch.setattr(Trainer, "joint_step", explode)
    art = run_training(corpus, tree, tiny_cfg(), clf_lo, clf_hi)
    assert art.aborted
    assert art.abort_step == 4
    assert len(art.trace) == 3
    assert "non-finite" in art.abort_reason


# ---------------------------------------------------------------- artifacts


def test_save_run_writes_everything(tree, corpus, frozen_clfs, tmp_path):
    clf_lo, clf_hi = frozen_clfs
    art = run_training(corpus, tree, tiny_cfg(), clf_lo, clf_hi)
    out = tmp_path / "run"
    save_run(art, out, extra_manifest={"dataset_checksum": "abc123"})
    names = sorted(p.name for p in out.iterdir())
    assert names == [
        "embeddings.hgck",
        "manifest.json",
        "metrics_step000009.csv",
        "metrics_step000009.json",
        "metrics_step000012.csv",
        "metrics_step000012.json",
        "models.hgck",
        "trace.csv",
    ]
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["mode"] == "treegan"
    assert manifest["seed"] == 0
    assert manifest["dataset_checksum"] == "abc123"
    assert manifest["config"]["lambda1"] == 15.0
    assert manifest["checkpoints"] == [9, 12]
    assert (out / "trace.csv").read_text() == trace_csv(art.trace)


def test_save_run_reproducible_bytes(tree, corpus, frozen_clfs, tmp_path):
    clf_lo, clf_hi = frozen_clfs
    blobs = []
    for name in ("a", "b"):
        art = run_training(corpus, tree, tiny_cfg(), clf_lo, clf_hi)
        out = tmp_path / name
        save_run(art, out)
        blobs.append({p.name: p.read_bytes() for p in out.iterdir()})
    assert blobs[0] == blobs[1]
