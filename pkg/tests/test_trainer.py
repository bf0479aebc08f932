import numpy as np
import pytest

from ceat.autodiff import precision
from ceat.config import RunConfig
from ceat.data import generate_synthetic
from ceat.trainer import ContinualTrainer, DataAccessLedger, ProtocolViolation, digest, split_dataset

TINY = dict(
    synthetic_classes=6, base_classes=2, per_task=2, patch_size=4, embed_dim=32, depth=3,
    num_heads=4, mlp_ratio=4, plain_blocks=1, batch_size=16, epochs_base=30, epochs_incremental=30,
    probe_inputs=8,
)


@pytest.fixture(scope="module")
def data():
    return generate_synthetic(num_classes=6, train_per_class=24, test_per_class=10, size=8)


def tiny(**kw):
    return RunConfig(**{**TINY, **kw})


@pytest.fixture(scope="module")
def ceat_run(data, tmp_path_factory):
    tr = ContinualTrainer(tiny(), *data, "ceat")
    ckpt = tmp_path_factory.mktemp("ck")
    report = tr.run(checkpoint_dir=ckpt)
    return tr, report, ckpt


def test_split_dataset():
    labels = np.repeat(np.arange(10), 3)
    s = split_dataset(labels, 4, 2, seed=1993)
    assert len(s.base) == 4 and [len(x) for x in s.increments] == [2, 2, 2]
    assert sorted(s.class_order) == list(range(10))
    assert split_dataset(labels, 4, 2, seed=1993) == s
    assert split_dataset(labels, 4, 2, seed=1) != s
    assert len(split_dataset(labels, 4, 2, 0, num_tasks=2).increments) == 2
    with pytest.raises(ValueError, match="insufficient"):
        split_dataset(labels, 4, 2, 0, num_tasks=4)
    with pytest.raises(ValueError, match="insufficient"):
        split_dataset(labels, 10, 2, 0)


def test_ledger_flags_old_samples(data):
    train, _ = data
    ledger = DataAccessLedger(np.array([0, 0, 1, 1]))
    ledger.begin_task(1)
    ledger.fetch(train, np.array([2, 3]))
    assert ledger.violations == []
    ledger.fetch(train, np.array([0, 2]))
    assert ledger.violations == [{"task": 1, "count": 1}]


def test_task_order_enforced(data):
    tr = ContinualTrainer(tiny(), *data)
    with pytest.raises(ProtocolViolation):
        tr.train_task(1)


def test_protocol_invariants(ceat_run):
    tr, rep, _ = ceat_run
    assert rep["tasks_completed"] == 3
    assert rep["backbone_frozen"] == [True, True]
    assert len(set(rep["backbone_param_counts"])) == 1
    assert rep["prototype_counts"] == [2, 4, 6]
    assert all(rep["prototypes_immutable"])
    assert rep["ledger"]["violations"] == [] and rep["ledger"]["accesses"] == 6 * 24
    assert all(r <= 1e-5 for r in rep["absorption_residuals"])
    assert all(not b.exfusion for b in tr.model.blocks)
    assert tr.model.head_widths == [2, 2, 2]


def test_evaluate_matches_brute_force(ceat_run, data):
    tr, _, _ = ceat_run
    _, test = data
    col = tr.schedule.column_of()
    with precision("float32"):
        correct, total = tr.evaluate(2)
        for j, classes in enumerate(tr.schedule.tasks):
            idx = np.flatnonzero(np.isin(test.labels, classes))
            logits = tr.model(test.pixels(idx).astype(np.float32))[1].data
            want = sum(int(np.argmax(logits[k]) == col[int(test.labels[i])]) for k, i in enumerate(idx))
            assert correct[j] == want and total[j] == len(idx)
            perm = np.random.default_rng(j).permutation(idx)
            preds = tr.predict(test.pixels(perm))
            assert int((preds == np.array([col[int(c)] for c in test.labels[perm]])).sum()) == want


def test_random_model_is_near_chance(data):
    _, test = data
    tr = ContinualTrainer(tiny(), *data)
    tr.model.expand_classifier(6, np.random.default_rng(0))
    with precision("float32"):
        preds = tr.predict(test.pixels())
    acc = float(np.mean(preds == np.array([tr.schedule.column_of()[int(c)] for c in test.labels])))
    # 60 samples, 6 classes; a random net may collapse onto few classes
    assert acc < 0.4


@pytest.fixture(scope="module")
def finetune_run(data):
    return ContinualTrainer(tiny(), *data, "finetune").run()


def test_current_task_learned(ceat_run, finetune_run):
    # Two classes per task, so chance is 0.5. The base task is trained from scratch
    # and must clear the margin for both methods; later tasks on this tiny model
    # can stall at chance even for plain fine-tuning because the base-trained
    # features barely vary on unseen classes.
    assert ceat_run[1]["accuracy_matrix"][0][0] > 0.5 + 0.25
    assert finetune_run["accuracy_matrix"][0][0] > 0.5 + 0.25


def test_shared_init_and_schedule(data):
    a = ContinualTrainer(tiny(), *data, "ceat")
    b = ContinualTrainer(tiny(), *data, "finetune")
    assert a.schedule == b.schedule
    assert digest(v.data for v in a.model.named_params().values()) == digest(
        v.data for v in b.model.named_params().values()
    )


def test_finetune_baseline_shape(finetune_run):
    rep = finetune_run
    assert rep["prototype_counts"] == [0, 0, 0]
    assert rep["absorption_residuals"] == []
    assert any("baseline" in d for d in rep["deviations"])


def test_deterministic_and_resumable(ceat_run, data):
    _, rep, ckpt = ceat_run
    again = ContinualTrainer(tiny(), *data, "ceat").run()
    assert again["parameter_digest"] == rep["parameter_digest"]
    assert again["accuracy_matrix"] == rep["accuracy_matrix"]
    resumed = ContinualTrainer.from_checkpoint(ckpt / "task0.ckpt", *data)
    out = resumed.run()
    assert out["parameter_digest"] == rep["parameter_digest"]
    assert out["correct"] == rep["correct"]
    assert out["final_loss"] == rep["final_loss"]


def test_report_echoes_config(ceat_run):
    _, rep, _ = ceat_run
    assert rep["config"] == tiny().to_dict()
    text = " ".join(rep["deviations"])
    for needle in ("tau=0.1", "L2-normalised", "ground-truth", "epochs"):
        assert needle in text
