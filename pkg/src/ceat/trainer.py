"""Exemplar-free class-incremental protocol: base task, then expand -> train -> absorb per task."""
from __future__ import annotations

import hashlib
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import absorb as ab
from .autodiff import Tape, Tensor, backward, concat, no_grad, precision
from .autodiff.kernels import BACKEND
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import Dataset
from .losses import (
    LossWeights,
    classification_loss,
    feature_distillation,
    ipf_loss,
    logit_distillation,
    pcl,
    total_loss,
)
from .metrics import AccuracyMatrix, average_forgetting, average_incremental_accuracy
from .model import IncrementalViT, ViTConfig
from .optim import AdamW
from .prototypes import PrototypeStore, compute_prototypes, generate_pseudo_batch

log = logging.getLogger(__name__)


class AbsorptionError(RuntimeError):
    pass


class ProtocolViolation(RuntimeError):
    pass


@dataclass
class NECILSchedule:
    base: list[int]
    increments: list[list[int]]
    seed: int

    @property
    def tasks(self) -> list[list[int]]:
        return [self.base] + self.increments

    @property
    def num_incremental(self) -> int:
        return len(self.increments)

    @property
    def class_order(self) -> list[int]:
        return [c for task in self.tasks for c in task]

    def column_of(self) -> dict[int, int]:
        return {c: i for i, c in enumerate(self.class_order)}

    def to_dict(self) -> dict:
        return {"base": self.base, "increments": self.increments, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "NECILSchedule":
        return cls(list(d["base"]), [list(x) for x in d["increments"]], d["seed"])


def split_dataset(labels, base_count: int, per_task: int, seed: int, num_tasks: int = 0) -> NECILSchedule:
    """Seeded class permutation cut into a base split and equal-size increments.

    ``num_tasks`` counts incremental tasks; 0 takes as many as fit.
    """
    classes = np.unique(np.asarray(labels))
    available = (len(classes) - base_count) // per_task if len(classes) >= base_count else -1
    if num_tasks == 0:
        num_tasks = available
    if available < 1 or num_tasks > available:
        raise ValueError(
            f"insufficient classes: {len(classes)} for base {base_count} + {num_tasks} x {per_task}"
        )
    order = np.random.default_rng(seed).permutation(classes).tolist()
    base = order[:base_count]
    incs = [order[base_count + k * per_task : base_count + (k + 1) * per_task] for k in range(num_tasks)]
    return NECILSchedule([int(c) for c in base], [[int(c) for c in t] for t in incs], seed)


class DataAccessLedger:
    """Gatekeeper for training images; flags any read of a past task's samples."""

    def __init__(self, sample_task: np.ndarray):
        self.sample_task = sample_task
        self.current_task = 0
        self.accesses = 0
        self.violations: list[dict] = []

    def begin_task(self, t: int) -> None:
        self.current_task = t

    def fetch(self, dataset: Dataset, indices: np.ndarray) -> np.ndarray:
        tasks = self.sample_task[indices]
        if (tasks < 0).any():
            raise ProtocolViolation("requested samples outside the schedule")
        old = tasks < self.current_task
        self.accesses += len(indices)
        if old.any():
            self.violations.append({"task": self.current_task, "count": int(old.sum())})
        return dataset.pixels(indices)


def digest(arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


def augment(images: np.ndarray, rng: np.random.Generator, pad: int = 4) -> np.ndarray:
    """Random crop from a zero-padded copy plus random horizontal flip."""
    n, h, w, _ = images.shape
    padded = np.pad(images, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    offs = rng.integers(0, 2 * pad + 1, size=(n, 2))
    flips = rng.random(n) < 0.5
    out = np.empty_like(images)
    for i in range(n):
        crop = padded[i, offs[i, 0] : offs[i, 0] + h, offs[i, 1] : offs[i, 1] + w]
        out[i] = crop[:, ::-1] if flips[i] else crop
    return out


DESIGN_DEFAULTS = [
    "layer-norm epsilon 1e-5; exact erf GELU",
    "ex-fusion branches on attention projection and both MLP linears of the incremental blocks only",
    "feature z is the class-token output of the final block (no final norm)",
    "truncated-normal(0.02) weight init, zero biases",
    "ex-fusion branches initialised to zero; absorption computed in float64 then cast",
    "pseudo-feature count equals the real batch size; nearest-center ties go to the lowest class id",
    "pseudo-features carry the label of the sampled prototype",
    "prototype drawn uniformly over stored classes",
    "zeta anchored at incremental tasks 1..T, endpoints inclusive",
    "prototypes computed after absorption",
    "logit distillation: T^2-scaled KL on temperature-softened old-class logits",
    "feature distillation compares final features z with mean L1",
    "alpha and mu count every class seen so far, base classes included",
    "augmented view: 4-pixel zero-pad random crop + horizontal flip",
    "backbone layer-norm parameters and biases frozen during incremental tasks",
    "AdamW with cosine decay; weight decay on matrices only",
]


class ContinualTrainer:
    def __init__(self, cfg: RunConfig, train: Dataset, test: Dataset, method: str | None = None):
        self.cfg = cfg
        self.method = method or cfg.method
        self.train_set, self.test_set = train, test
        self.schedule = split_dataset(train.labels, cfg.base_classes, cfg.per_task, cfg.seed, cfg.num_tasks)
        self.num_tasks = 1 + self.schedule.num_incremental
        col = self.schedule.column_of()
        self._train_cols = np.array([col.get(int(c), -1) for c in train.labels])
        self._test_cols = np.array([col.get(int(c), -1) for c in test.labels])
        task_of_col = np.concatenate([np.full(len(t), i) for i, t in enumerate(self.schedule.tasks)])
        self._train_task = np.where(self._train_cols >= 0, task_of_col[np.maximum(self._train_cols, 0)], -1)
        self._test_task = np.where(self._test_cols >= 0, task_of_col[np.maximum(self._test_cols, 0)], -1)
        self.ledger = DataAccessLedger(self._train_task)

        h, w, c = train.shape
        if h != w:
            raise ValueError("square images required")
        self.vit_config = ViTConfig(
            image_size=h, channels=c, patch_size=cfg.patch_size, embed_dim=cfg.embed_dim,
            depth=cfg.depth, num_heads=cfg.num_heads, mlp_ratio=cfg.mlp_ratio, plain_blocks=cfg.plain_blocks,
        )
        with precision(cfg.precision):
            self.model = IncrementalViT(self.vit_config, np.random.default_rng([cfg.seed, 0]))
        self.rng = np.random.default_rng([cfg.seed, 1])
        self.store = PrototypeStore()
        self._proto_digest: dict[int, str] = {}
        self.old_model: IncrementalViT | None = None
        self.last_expanded: IncrementalViT | None = None  # pre-absorption copy of the latest task
        self.matrix = AccuracyMatrix(self.num_tasks)
        self.next_task = 0
        self.history: dict[str, list] = {
            "backbone_param_counts": [],
            "total_param_counts": [],
            "absorption_residuals": [],
            "backbone_frozen": [],
            "prototype_counts": [],
            "prototypes_immutable": [],
            "final_loss": [],
        }

    # helpers ----------------------------------------------------------
    def task_classes(self, t: int) -> list[int]:
        return self.schedule.tasks[t]

    def columns_before(self, t: int) -> int:
        return sum(len(x) for x in self.schedule.tasks[:t])

    def _features(self, model, images):
        with no_grad():
            return model.forward_features(images).data

    def _probe_images(self, n: int) -> np.ndarray:
        h, w, c = self.train_set.shape
        rng = np.random.default_rng([self.cfg.seed, 2])
        return rng.uniform(size=(n, h, w, c))

    # protocol ---------------------------------------------------------
    def train_task(self, t: int) -> None:
        if t != self.next_task:
            raise ProtocolViolation(f"task {t} requested but task {self.next_task} is next")
        cfg = self.cfg
        ceat = self.method == "ceat"
        self.ledger.begin_task(t)
        idx = np.flatnonzero(self._train_task == t)
        images = self.ledger.fetch(self.train_set, idx).astype(self.model.embed["cls"].dtype)
        labels = self._train_cols[idx]
        new = self.task_classes(t)

        plan = None
        frozen_digest = None
        if t == 0:
            ab.unfreeze_backbone(self.model)
        elif ceat:
            if self.old_model is None:
                raise ProtocolViolation("old model snapshot missing")
            ab.freeze_backbone(self.model, t)
            plan = ab.expand(self.model, t, len(new))
            frozen_digest = digest(self.model.backbone_params()[k].data for k in sorted(self.model.backbone_params()))
        self.model.expand_classifier(len(new), self.rng)

        epochs = cfg.epochs_base if t == 0 else cfg.epochs_incremental
        lr = cfg.lr_base if t == 0 else cfg.lr_incremental
        n = len(idx)
        steps = epochs * -(-n // cfg.batch_size)
        params = self.model.trainable_params()
        heads = {k: v for k, v in params.items() if k.startswith("head.")}
        body = {k: v for k, v in params.items() if k not in heads}
        opts = [AdamW(body, lr, steps, cfg.weight_decay), AdamW(heads, cfg.lr_head, steps, cfg.weight_decay)]
        last = float("nan")
        for _ in range(epochs):
            perm = self.rng.permutation(n)
            for s in range(0, n, cfg.batch_size):
                b = perm[s : s + cfg.batch_size]
                if len(b) < 2:
                    continue
                last = self._step(t, images[b], labels[b], opts, plan is not None)
        self.history["final_loss"].append(last)

        if plan is not None:
            now = digest(self.model.backbone_params()[k].data for k in sorted(self.model.backbone_params()))
            self.history["backbone_frozen"].append(now == frozen_digest)
            if now != frozen_digest:
                raise ProtocolViolation(f"backbone changed during task {t}")
            expanded = self.model.copy()
            self.last_expanded = expanded
            ab.absorb_all(self.model, plan)
            residual = ab.verify_equivalence(expanded, self.model, self._probe_images(cfg.probe_inputs))
            self.history["absorption_residuals"].append(residual)
            if residual > cfg.tolerance:
                raise AbsorptionError(f"absorption residual {residual:.3e} exceeds {cfg.tolerance:.1e}")
        ab.unfreeze_backbone(self.model)

        if ceat:
            protos = compute_prototypes(lambda x: self._features(self.model, x), images, labels, sorted(set(labels.tolist())))
            for cidx, vec in protos.items():
                self.store.add(cidx, vec, t)
                self._proto_digest[cidx] = digest([vec])
            self.old_model = self.model.copy()
            for p in self.old_model.named_params().values():
                p.requires_grad = False
        self.history["prototypes_immutable"].append(
            all(digest([self.store.get(c).vector]) == d for c, d in self._proto_digest.items())
        )
        self.history["prototype_counts"].append(len(self.store))
        self.history["backbone_param_counts"].append(self.model.backbone_param_count())
        self.history["total_param_counts"].append(sum(p.size for p in self.model.named_params().values()))
        correct, total = self.evaluate(t)
        self.matrix.record(t, correct, total)
        self.next_task = t + 1
        log.info("%s task %d: acc %s", self.method, t, [round(x, 3) for x in self.matrix.rows()[t]])

    def _step(self, t, images, labels, opts: list[AdamW], incremental: bool) -> float:
        cfg = self.cfg
        model = self.model
        use_pcl = (t > 0 and self.method == "ceat") or (t == 0 and cfg.pcl_base and self.method == "ceat")
        b = len(labels)
        with Tape() as tape:
            if use_pcl and cfg.augment:
                view = augment(images, self.rng)
                z_all = model.forward_features(np.concatenate([images, view]))
                z, z2 = z_all[:b], z_all[b:]
            else:
                z = model.forward_features(images)
                z2 = None
            logits = model.classify(z)
            parts = {"bce": classification_loss(logits, labels)}
            weights = LossWeights(alpha=0.0, mu=0.0, delta=cfg.delta, tau=cfg.tau)
            pseudo = None
            if incremental:
                n_old = self.columns_before(t)
                seen = self.columns_before(t + 1)
                weights = LossWeights.for_task(len(self.task_classes(t)), seen, cfg.tau, cfg.delta)
                with no_grad():
                    old_z, old_logits = self.old_model(images)
                parts["ld"] = logit_distillation(old_logits.data, logits[:, :n_old], cfg.kd_temperature)
                parts["fd"] = feature_distillation(old_z.data, z)
                pseudo = self._pseudo(t, z.data, labels)
                if pseudo is not None:
                    parts["ipf"] = ipf_loss(pseudo[0], pseudo[1], model.classify, n_old)
            if use_pcl:
                feats = [z] + ([z2] if z2 is not None else [])
                labs = [labels] * len(feats)
                if pseudo is not None:
                    feats.append(Tensor(pseudo[0], dtype=z.dtype))
                    labs.append(pseudo[1])
                allz = concat(feats, axis=0) if len(feats) > 1 else feats[0]
                all_labels = np.concatenate(labs)
                if cfg.positive_mode == "predicted":
                    with no_grad():
                        all_labels = np.argmax(model.classify(Tensor(allz.data, dtype=z.dtype)).data, axis=1)
                protos, pids = self.store.matrix() if len(self.store) else (None, None)
                parts["pcl"] = pcl(allz, all_labels, protos, pids, cfg.tau, cfg.pcl_normalize, cfg.pcl_reduction)
            loss = total_loss(parts, weights)
        grads = backward(tape, loss)
        for opt in opts:
            opt.step(grads)
        return float(loss.data)

    def _pseudo(self, t, feats: np.ndarray, labels: np.ndarray):
        mode = self.cfg.pseudo_mode
        if mode == "none" or len(self.store) == 0:
            return None
        if mode == "gaussian":
            protos, ids = self.store.matrix()
            pick = self.rng.integers(len(ids), size=len(labels))
            noise = self.rng.normal(0.0, self.cfg.gaussian_radius, size=(len(labels), protos.shape[1]))
            return (protos[pick] + noise).astype(feats.dtype), ids[pick]
        pb = generate_pseudo_batch(self.store, feats, labels, t, self.schedule.num_incremental, self.rng)
        return pb.features.astype(feats.dtype), pb.labels

    def evaluate(self, t: int) -> tuple[list[int], list[int]]:
        """Correct / total counts on the test split of every task 0..t."""
        correct, total = [], []
        for j in range(t + 1):
            idx = np.flatnonzero(self._test_task == j)
            preds = self.predict(self.test_set.pixels(idx))
            correct.append(int((preds == self._test_cols[idx]).sum()))
            total.append(len(idx))
        return correct, total

    def predict(self, images: np.ndarray, batch: int = 256) -> np.ndarray:
        dtype = self.model.embed["cls"].dtype
        out = []
        with no_grad():
            for s in range(0, len(images), batch):
                out.append(np.argmax(self.model(images[s : s + batch].astype(dtype))[1].data, axis=1))
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)

    # orchestration ----------------------------------------------------
    def run(self, checkpoint_dir=None, stop_after: int | None = None) -> dict:
        with precision(self.cfg.precision):
            while self.next_task < self.num_tasks:
                t = self.next_task
                self.train_task(t)
                if checkpoint_dir is not None:
                    self.save(Path(checkpoint_dir) / f"task{t}.ckpt")
                if stop_after is not None and t >= stop_after:
                    break
        return self.report()

    def report(self) -> dict:
        rows = self.matrix.rows()
        overall = self.matrix.overall_series()
        complete = self.matrix.completed == self.num_tasks
        params = self.model.named_params()
        return {
            "method": self.method,
            "kernel_backend": BACKEND,
            "precision": self.cfg.precision,
            "config": self.cfg.to_dict(),
            "schedule": self.schedule.to_dict(),
            "tasks_completed": self.matrix.completed,
            "accuracy_matrix": rows,
            "correct": self.matrix.correct,
            "total": self.matrix.total,
            "overall_accuracy": overall,
            "average_incremental_accuracy": average_incremental_accuracy(overall) if overall else None,
            "average_forgetting": average_forgetting(rows) if complete else None,
            **{k: list(v) for k, v in self.history.items()},
            "ledger": {"accesses": self.ledger.accesses, "violations": list(self.ledger.violations)},
            "parameter_digest": digest(params[k].data for k in sorted(params)),
            "deviations": self.deviations(),
        }

    def deviations(self) -> list[str]:
        cfg = self.cfg
        out = list(DESIGN_DEFAULTS)
        out += [
            f"pcl temperature tau={cfg.tau}",
            f"pcl features L2-normalised: {cfg.pcl_normalize}",
            f"pcl positives by {'ground-truth' if cfg.positive_mode == 'label' else 'predicted'} labels",
            f"pcl reduction over anchors: {cfg.pcl_reduction}",
            f"pcl during base task: {cfg.pcl_base}",
            f"pseudo-feature mode: {cfg.pseudo_mode}",
            f"optimizer lr base={cfg.lr_base} incremental={cfg.lr_incremental} heads={cfg.lr_head} wd={cfg.weight_decay}",
            f"epochs base={cfg.epochs_base} incremental={cfg.epochs_incremental}, batch={cfg.batch_size}",
            f"seed={cfg.seed}, precision={cfg.precision}",
        ]
        if self.method == "finetune":
            out.append("baseline: no freeze, no expansion, no prototypes, no PCL/KD; plain BCE fine-tuning")
        return out

    # persistence ------------------------------------------------------
    def state(self) -> tuple[dict, dict[str, np.ndarray]]:
        arrays = {f"model.{k}": v for k, v in self.model.state_arrays().items()}
        protos = []
        for p in self.store.items():
            arrays[f"proto.{p.class_id}"] = p.vector
            protos.append({"class_id": p.class_id, "task": p.task_of_origin})
        meta = {
            "method": self.method,
            "config": self.cfg.to_dict(),
            "schedule": self.schedule.to_dict(),
            "vit": self.vit_config.to_dict(),
            "head_widths": self.model.head_widths,
            "next_task": self.next_task,
            "prototypes": protos,
            "rng": self.rng.bit_generator.state,
            "matrix": self.matrix.to_dict(),
            "history": self.history,
            "ledger": {"accesses": self.ledger.accesses, "violations": self.ledger.violations},
            "has_old_model": self.old_model is not None,
        }
        return meta, arrays

    def save(self, path) -> None:
        meta, arrays = self.state()
        save_checkpoint(path, meta, arrays)

    @classmethod
    def from_checkpoint(cls, path, train: Dataset, test: Dataset) -> "ContinualTrainer":
        from .config import config_from_mapping

        meta, arrays = load_checkpoint(path)
        cfg = config_from_mapping(meta["config"])
        tr = cls(cfg, train, test, meta["method"])
        if tr.schedule.to_dict() != meta["schedule"]:
            raise ValueError("checkpoint schedule does not match the dataset")
        tr.restore(meta, arrays)
        return tr

    def restore(self, meta: dict, arrays: dict[str, np.ndarray]) -> None:
        model_arrays = {k[len("model."):]: v for k, v in arrays.items() if k.startswith("model.")}
        self.model.load_arrays(model_arrays, meta["head_widths"])
        self.store = PrototypeStore()
        self._proto_digest = {}
        for p in meta["prototypes"]:
            vec = arrays[f"proto.{p['class_id']}"]
            self.store.add(p["class_id"], vec, p["task"])
            self._proto_digest[p["class_id"]] = digest([vec])
        self.rng.bit_generator.state = meta["rng"]
        self.matrix = AccuracyMatrix.from_dict(meta["matrix"])
        self.history = {k: list(v) for k, v in meta["history"].items()}
        self.ledger.accesses = meta["ledger"]["accesses"]
        self.ledger.violations = list(meta["ledger"]["violations"])
        self.next_task = meta["next_task"]
        if meta["has_old_model"]:
            self.old_model = self.model.copy()
            for p in self.old_model.named_params().values():
                p.requires_grad = False


def model_from_checkpoint(path) -> tuple[IncrementalViT, dict]:
    """Rebuild just the model (for evaluation / verification tools)."""
    meta, arrays = load_checkpoint(path)
    vit = ViTConfig(**meta["vit"])
    with precision(meta["config"]["precision"]):
        model = IncrementalViT(vit, np.random.default_rng(0))
    model_arrays = {k[len("model."):]: v for k, v in arrays.items() if k.startswith("model.")}
    model.load_arrays(model_arrays, meta["head_widths"])
    return model, meta


def default_datasets(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    from .data import generate_synthetic, load_dataset

    if cfg.train_path or cfg.test_path:
        if not (cfg.train_path and cfg.test_path):
            raise ValueError("train_path and test_path must be given together")
        return load_dataset(cfg.train_path), load_dataset(cfg.test_path)
    return generate_synthetic(
        num_classes=cfg.synthetic_classes,
        train_per_class=cfg.synthetic_train_per_class,
        test_per_class=cfg.synthetic_test_per_class,
        size=cfg.synthetic_size,
        channels=cfg.synthetic_channels,
        seed=cfg.synthetic_seed,
    )


def run_experiment(cfg: RunConfig, train: Dataset | None = None, test: Dataset | None = None,
                   write: bool = True) -> dict[str, dict]:
    """Run the configured method (and the fine-tuning baseline when requested)."""
    from .report import write_run

    if train is None or test is None:
        train, test = default_datasets(cfg)
    methods = [cfg.method]
    if cfg.run_baseline and cfg.method != "finetune":
        methods.append("finetune")
    reports = {}
    for m in methods:
        start = time.perf_counter()
        trainer = ContinualTrainer(cfg, train, test, m)
        out = Path(cfg.output_dir) / m
        rep = trainer.run(checkpoint_dir=out / "checkpoints" if write else None)
        rep["runtime_seconds"] = time.perf_counter() - start
        if write:
            write_run(out, rep)
        reports[m] = rep
    return reports
