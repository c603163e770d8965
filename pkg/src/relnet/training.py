"""Joint training and evaluation.

Training pools all tasks into one shuffled sample stream (uniform over the
pool), draws a fresh random position offset per sample each epoch, and
takes plain Adam steps on the cross-entropy-plus-L2 loss. Validation runs
at a fixed position offset of 0 so that metrics are deterministic; the
whole pipeline is bitwise reproducible per seed on one machine.

The L2 penalty enters through the loss graph (a coupled weight-decay term
over exactly the regularized weight matrices), so the optimizer itself is
textbook Adam with bias correction.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

import relnet.autodiff as ad
from relnet.autodiff import Graph, ParameterStore
from relnet.containers import Dataset, save_checkpoint
from relnet.model import ModelConfig, batch_logits, init_model_params

TASK_COLUMNS = 20  # fixed CSV layout: acc_task1..acc_task20


class NumericError(RuntimeError):
    """Training hit a non-finite value; message names the parameter."""


@dataclass
class TrainConfig:
    """Optimizer, schedule and architecture dimensions in one record.

    Defaults are the published full-scale settings: Adam at a fixed 5e-5
    with batches of 32, an L2 penalty of 2e-5 for the zero-layer network
    and 1e-4 once relation layers are stacked, embedding 256, a 32-unit
    peephole LSTM, 40 position slots over a 20-sentence context, and MLPs
    g=(256,256,256,256), h=(256,256,256), f=(256,512,answers).
    """

    layers: int = 0
    learning_rate: float = 5e-5
    batch_size: int = 32
    l2_penalty: float | None = None      # None: 2e-5 when layers=0, 1e-4 otherwise
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_steps: int = 4_000_000
    eval_interval: int = 1000
    seed: int = 0
    embed_dim: int = 256
    lstm_units: int = 32
    pos_size: int = 40
    context_size: int = 20
    g_widths: tuple[int, ...] = (256, 256, 256, 256)
    h_widths: tuple[int, ...] = (256, 256, 256)
    f_hidden: tuple[int, ...] = (256, 512)
    eval_batch: int = 64
    include_self_pairs: bool = True
    share_relation_weights: bool = False
    share_question_encoder: bool = False

    @property
    def penalty(self) -> float:
        if self.l2_penalty is not None:
            return self.l2_penalty
        return 2e-5 if self.layers == 0 else 1e-4

    def validate(self) -> None:
        for name in ("learning_rate", "beta1", "beta2", "eps"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.l2_penalty is not None and self.l2_penalty < 0:
            raise ValueError("l2_penalty must be non-negative")
        if self.batch_size < 1 or self.eval_batch < 1:
            raise ValueError("batch sizes must be at least 1")
        if self.max_steps < 1 or self.eval_interval < 1:
            raise ValueError("max_steps and eval_interval must be at least 1")
        if self.layers < 0:
            raise ValueError("layer count must be non-negative")

    def model_config(self, vocab_size: int, n_classes: int) -> ModelConfig:
        return ModelConfig(
            vocab_size=vocab_size, n_classes=n_classes, layers=self.layers,
            embed_dim=self.embed_dim, lstm_units=self.lstm_units,
            pos_size=self.pos_size, context_size=self.context_size,
            g_widths=tuple(self.g_widths), h_widths=tuple(self.h_widths),
            f_hidden=tuple(self.f_hidden),
            include_self_pairs=self.include_self_pairs,
            share_relation_weights=self.share_relation_weights,
            share_question_encoder=self.share_question_encoder)


# ---------------------------------------------------------------------------
# optimizer


def adam_step(store: ParameterStore, config: TrainConfig, t: int) -> None:
    """One Adam update with bias correction from the accumulated gradients.

    Aborts with the parameter name on any non-finite gradient. The update
    uses lr * m_hat / (sqrt(v_hat) + eps).
    """
    if t < 1:
        raise ValueError(f"step index must be >= 1, got {t}")
    b1, b2 = config.beta1, config.beta2
    for name, p in store.items():
        g = p.grad
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in parameter {name!r} at step {t}")
        m = p.state.setdefault("m", np.zeros(g.shape))
        v = p.state.setdefault("v", np.zeros(g.shape))
        m += (1.0 - b1) * (g - m)
        v += (1.0 - b2) * (g * g - v)
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        store.set_value(
            name,
            p.value.data - config.learning_rate * m_hat / (np.sqrt(v_hat) + config.eps))


# ---------------------------------------------------------------------------
# loss


def compute_loss(graph: Graph, store: ParameterStore, model_cfg: ModelConfig,
                 penalty: float, batch: list, offsets: list[int]):
    """Mean cross-entropy plus penalty * sum of squared regularized weights.

    Returns (loss, logits); labels come from the encoded samples.
    """
    labels = [s.label for s in batch]
    if any(l < 0 or l >= model_cfg.n_classes for l in labels):
        bad = next(l for l in labels if l < 0 or l >= model_cfg.n_classes)
        raise ValueError(f"label {bad} outside the {model_cfg.n_classes}-way answer vocabulary")
    logits, _ = batch_logits(graph, store, model_cfg, batch, offsets)
    loss = ad.softmax_cross_entropy(logits, labels)
    if penalty > 0.0:
        reg = None
        for name in store.regularized_names():
            term = ad.sum_squares(graph.parameter(store, name))
            reg = term if reg is None else ad.add(reg, term)
        if reg is not None:
            loss = ad.add(loss, ad.scale(reg, penalty))
    return loss, logits


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    split: str
    per_task: dict[int, tuple[int, int]]   # task -> (correct, total)
    overall_correct: int
    overall_total: int

    def task_accuracy(self, task: int) -> float:
        correct, total = self.per_task[task]
        return correct / total

    @property
    def overall_accuracy(self) -> float:
        return self.overall_correct / self.overall_total

    @property
    def succeeded(self) -> int:
        return sum(1 for t in self.per_task if self.task_accuracy(t) > 0.95)

    @property
    def mean_error(self) -> float:
        accs = [self.task_accuracy(t) for t in self.per_task]
        return 100.0 * (1.0 - sum(accs) / len(accs))

    def to_text(self) -> str:
        lines = [f"{'task':>6}  {'accuracy %':>10}  {'samples':>8}"]
        for task in sorted(self.per_task):
            correct, total = self.per_task[task]
            lines.append(f"{task:>6}  {100.0 * correct / total:>10.2f}  {total:>8}")
        lines.append(f"tasks succeeded (>95%): {self.succeeded}/{len(self.per_task)}")
        lines.append(f"mean error: {self.mean_error:.3f}%")
        return "\n".join(lines) + "\n"

    def to_json(self) -> dict:
        return {
            "split": self.split,
            "per_task": {str(t): {"correct": c, "total": n,
                                  "accuracy": c / n}
                         for t, (c, n) in sorted(self.per_task.items())},
            "overall_accuracy": self.overall_accuracy,
            "succeeded": self.succeeded,
            "mean_error": self.mean_error,
        }


def predictions(store: ParameterStore, model_cfg: ModelConfig, samples: list,
                batch_size: int = 64, offset: int = 0) -> np.ndarray:
    """Argmax class ids for ``samples`` at a fixed position offset."""
    out = np.empty(len(samples), dtype=np.int64)
    for lo in range(0, len(samples), batch_size):
        batch = samples[lo:lo + batch_size]
        graph = Graph()
        logits, _ = batch_logits(graph, store, model_cfg, batch, [offset] * len(batch))
        out[lo:lo + len(batch)] = np.argmax(logits.data, axis=1)
    return out


def evaluate(store: ParameterStore, model_cfg: ModelConfig, dataset: Dataset,
             split: str, batch_size: int = 64) -> EvalReport:
    """Per-task accuracy at position offset 0 (deterministic)."""
    samples = dataset.split(split)
    if not samples:
        raise ValueError(f"split {split!r} is empty")
    preds = predictions(store, model_cfg, samples, batch_size=batch_size)
    per_task: dict[int, list[int]] = {}
    for s, pred in zip(samples, preds):
        stats = per_task.setdefault(s.task, [0, 0])
        stats[0] += int(pred == s.label)
        stats[1] += 1
    return EvalReport(
        split=split,
        per_task={t: (c, n) for t, (c, n) in sorted(per_task.items())},
        overall_correct=int(sum(c for c, _ in per_task.values())),
        overall_total=len(samples))


# ---------------------------------------------------------------------------
# metrics records and CSV


@dataclass
class MetricsRecord:
    step: int
    loss: float
    overall_accuracy: float
    task_accuracy: dict[int, float]
    wall_time: float


def metrics_header() -> str:
    cols = ["step", "loss", "acc_overall"]
    cols += [f"acc_task{t}" for t in range(1, TASK_COLUMNS + 1)]
    return ",".join(cols)


def metrics_row(rec: MetricsRecord) -> str:
    cells = [str(rec.step), repr(rec.loss), repr(rec.overall_accuracy)]
    for t in range(1, TASK_COLUMNS + 1):
        cells.append(repr(rec.task_accuracy[t]) if t in rec.task_accuracy else "")
    return ",".join(cells)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    store: ParameterStore
    model_cfg: ModelConfig
    records: list[MetricsRecord]
    csv_path: Path
    best_path: Path
    last_path: Path
    best_accuracy: float
    best_step: int


def train(config: TrainConfig, dataset: Dataset, out_dir,
          log=None, valid_split: str = "valid") -> TrainResult:
    """Run the training loop; writes metrics.csv, best.ckpt and last.ckpt.

    The best-validation checkpoint is kept; two runs with the same config
    and dataset produce byte-identical CSVs and checkpoints.
    """
    config.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_samples = dataset.split("train")
    if not train_samples:
        raise ValueError("training split is empty")
    if config.context_size != dataset.context_size:
        raise ValueError(
            f"config context_size {config.context_size} != dataset "
            f"context_size {dataset.context_size}")

    model_cfg = config.model_config(dataset.vocab.size, dataset.vocab.n_answers)
    seeds = np.random.SeedSequence(config.seed).spawn(3)
    store = ParameterStore()
    init_model_params(store, model_cfg, np.random.default_rng(seeds[0]))
    shuffle_rng = np.random.default_rng(seeds[1])
    offset_rng = np.random.default_rng(seeds[2])
    max_offset = config.pos_size - config.context_size

    csv_path = out / "metrics.csv"
    best_path = out / "best.ckpt"
    last_path = out / "last.ckpt"
    extra = {"train_config": _config_dict(config), "vocab_hash": dataset.vocab.content_hash()}

    records: list[MetricsRecord] = []
    best_acc, best_step = -1.0, 0
    start = time.perf_counter()
    t = 0
    n = len(train_samples)

    with open(csv_path, "w") as csv:
        csv.write(metrics_header() + "\n")
        while t < config.max_steps:
            order = shuffle_rng.permutation(n)
            epoch_offsets = offset_rng.integers(0, max_offset + 1, size=n)
            for lo in range(0, n, config.batch_size):
                idx = order[lo:lo + config.batch_size]
                batch = [train_samples[i] for i in idx]
                offsets = [int(epoch_offsets[i]) for i in idx]
                t += 1
                graph = Graph()
                loss, _ = compute_loss(graph, store, model_cfg, config.penalty,
                                       batch, offsets)
                store.zero_grads()
                graph.backward(loss)
                adam_step(store, config, t)

                if t % config.eval_interval == 0 or t == config.max_steps:
                    report = evaluate(store, model_cfg, dataset, valid_split,
                                      batch_size=config.eval_batch)
                    rec = MetricsRecord(
                        step=t, loss=loss.tensor.item(),
                        overall_accuracy=report.overall_accuracy,
                        task_accuracy={task: report.task_accuracy(task)
                                       for task in report.per_task},
                        wall_time=time.perf_counter() - start)
                    records.append(rec)
                    csv.write(metrics_row(rec) + "\n")
                    if log is not None:
                        log(f"step {t}: loss {rec.loss:.4f} "
                            f"valid acc {rec.overall_accuracy:.4f}")
                    if report.overall_accuracy > best_acc:
                        best_acc, best_step = report.overall_accuracy, t
                        save_checkpoint(best_path, store, t, extra)
                if t >= config.max_steps:
                    break

    save_checkpoint(last_path, store, t, extra)
    if not best_path.exists():  # no eval point was reached
        save_checkpoint(best_path, store, t, extra)
    return TrainResult(store=store, model_cfg=model_cfg, records=records,
                       csv_path=csv_path, best_path=best_path, last_path=last_path,
                       best_accuracy=best_acc, best_step=best_step)


def _config_dict(config: TrainConfig) -> dict:
    d = asdict(config)
    for key, value in d.items():
        if isinstance(value, tuple):
            d[key] = list(value)
    return d
