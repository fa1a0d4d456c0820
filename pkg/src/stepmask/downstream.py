"""Fine-tuning and evaluation of the pre-trained model on the six benchmark
task kinds.

Prediction routing per kind:
  step_cls       main head on the single clip's hidden state
  short_term     main head on an appended mask-token position
  long_term      five forecast heads (labels + NULL) on the CLS hidden state
  proc_rec       task head on CLS
  mistake_step   scalar mistake head on every clip position, argmax position
  mistake_order  two-way order head on CLS

linear_probe trains only the kind's head; finetune also trains the
transformer (input projection, blocks, mask/cls tokens, positional), never
the other kinds' heads. Frozen arrays stay bit-identical: the optimizer
skips them entirely, weight decay included.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .benchmarks import LONG_TERM_SLOTS, BenchmarkInstance, BenchmarkSet
from .corpus import Corpus, project_to_feature_dim
from .errors import ConfigError, DivergenceError, InvalidInput
from .model import (
    ModelConfig,
    TransformerParams,
    backward as model_backward,
    clone_params,
    forward,
    get_array,
    log_softmax,
    named_arrays,
    softmax_logits,
    zeros_like_params,
)
from .training import (
    EpochStats,
    OptimizerConfig,
    TrainReport,
    init_optimizer,
    optimizer_step,
)
from .weaklabel import TextEmbedder, embed_text

KIND_HEADS: dict[str, tuple[str, ...]] = {
    "step_cls": ("head_w", "head_b"),
    "short_term": ("head_w", "head_b"),
    "proc_rec": ("task_head_w", "task_head_b"),
    "mistake_order": ("order_head_w", "order_head_b"),
    "mistake_step": ("mistake_head_w", "mistake_head_b"),
    "long_term": tuple(
        f"forecast.{i}.{wb}" for i in range(LONG_TERM_SLOTS) for wb in ("w", "b")
    ),
}
ALL_HEAD_NAMES = frozenset(name for names in KIND_HEADS.values() for name in names)


@dataclass
class FinetuneConfig:
    task_kind: str
    mode: str = "finetune"  # "linear_probe" | "finetune"
    use_task_label: bool = False
    lr: float = 0.005
    epochs: int = 50
    schedule: list[tuple[int, float]] = field(default_factory=lambda: [(30, 0.1), (40, 0.1)])
    seed: int = 0
    optimizer: str = "sgd_momentum"
    momentum: float = 0.9
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.task_kind not in KIND_HEADS:
            raise ConfigError(f"unknown task kind {self.task_kind!r}")
        if self.mode not in ("linear_probe", "finetune"):
            raise ConfigError(f"unknown mode {self.mode!r}")


@dataclass
class EvalReport:
    task_kind: str
    split: str
    accuracy: float
    correct: int
    total: int
    config_digest: str = ""
    per_class: dict[int, float] | None = None

    def to_dict(self) -> dict:
        d = {
            "task": self.task_kind,
            "split": self.split,
            "accuracy": self.accuracy,
            "correct": self.correct,
            "total": self.total,
            "config_digest": self.config_digest,
        }
        if self.per_class is not None:
            d["per_class"] = {str(k): v for k, v in self.per_class.items()}
        return d


def embed_task_label(task_name: str, embedder: TextEmbedder, d_in: int) -> np.ndarray:
    """Conditioning token: the task name's sentence embedding sized to the
    clip-feature dimension so it can join the input token list."""
    return project_to_feature_dim(embed_text(embedder, task_name), d_in)


def attach_task_embeddings(bset: BenchmarkSet, corpus: Corpus, embedder: TextEmbedder, d_in: int):
    cache: dict[int, np.ndarray] = {}
    for inst in bset.instances:
        if inst.task_id not in cache:
            name = corpus.task_names[inst.task_id]
            cache[inst.task_id] = embed_task_label(name, embedder, d_in)
        inst.task_name_embedding = cache[inst.task_id]


def trainable_names(params: TransformerParams, cfg: FinetuneConfig) -> set[str]:
    names = set(KIND_HEADS[cfg.task_kind])
    if cfg.mode == "finetune":
        names.update(
            name for name, _ in named_arrays(params) if name not in ALL_HEAD_NAMES
        )
    return names


def _instance_forward(params, mcfg: ModelConfig, inst: BenchmarkInstance, task_token):
    if inst.kind == "short_term":
        feats = np.vstack([inst.clips, np.zeros((1, mcfg.d_in))])
        return forward(params, mcfg, feats, mask_set=(inst.K,), task_token=task_token)
    if inst.kind in ("long_term", "proc_rec", "mistake_order"):
        return forward(params, mcfg, inst.clips, prepend_cls=True, task_token=task_token)
    return forward(params, mcfg, inst.clips, task_token=task_token)


def _task_token(inst: BenchmarkInstance, use_task_label: bool):
    if not use_task_label:
        return None
    if inst.task_name_embedding is None:
        raise InvalidInput(
            f"instance from video {inst.video_id} has no task embedding attached"
        )
    return inst.task_name_embedding


def predict(
    params: TransformerParams,
    mcfg: ModelConfig,
    inst: BenchmarkInstance,
    use_task_label: bool = False,
):
    """Task-specific prediction for one instance; ties resolve to the lowest
    index via argmax."""
    trace = _instance_forward(params, mcfg, inst, _task_token(inst, use_task_label))
    kind = inst.kind
    if kind == "step_cls":
        return int(np.argmax(trace.clip_logits[0]))
    if kind == "short_term":
        return int(np.argmax(trace.clip_logits[inst.K]))
    if kind == "proc_rec":
        h0 = trace.hidden[0]
        return int(np.argmax(h0 @ params.task_head_w + params.task_head_b))
    if kind == "mistake_order":
        h0 = trace.hidden[0]
        return bool(np.argmax(h0 @ params.order_head_w + params.order_head_b) == 1)
    if kind == "mistake_step":
        scores = (trace.clip_hidden @ params.mistake_head_w)[:, 0] + params.mistake_head_b[0]
        return int(np.argmax(scores))
    if kind == "long_term":
        h0 = trace.hidden[0]
        slots = []
        for w, b in zip(params.forecast_w, params.forecast_b):
            c = int(np.argmax(h0 @ w + b))
            slots.append(None if c == mcfg.s else c)
        return tuple(slots)
    raise InvalidInput(f"unknown instance kind {kind!r}")


def _count_correct(inst: BenchmarkInstance, prediction) -> tuple[int, int]:
    """(correct, total); long_term counts non-NULL slots individually."""
    if inst.kind == "long_term":
        correct = sum(
            1 for want, got in zip(inst.target, prediction)
            if want is not None and got == want
        )
        total = sum(1 for want in inst.target if want is not None)
        return correct, total
    return int(prediction == inst.target), 1


def evaluate(
    params: TransformerParams,
    mcfg: ModelConfig,
    dataset: BenchmarkSet,
    *,
    use_task_label: bool = False,
    config_digest: str = "",
    per_class: bool = False,
) -> EvalReport:
    """Accuracy over a benchmark set; NULL forecast slots never enter the
    denominator. Pure counting, so instance order cannot change the result."""
    if not dataset.instances:
        raise InvalidInput("empty dataset")
    correct = 0
    total = 0
    class_counts: dict[int, list[int]] = {}
    for inst in dataset.instances:
        pred = predict(params, mcfg, inst, use_task_label=use_task_label)
        c, t = _count_correct(inst, pred)
        correct += c
        total += t
        if per_class and isinstance(inst.target, (int, np.integer)):
            slot = class_counts.setdefault(int(inst.target), [0, 0])
            slot[0] += c
            slot[1] += t
    return EvalReport(
        task_kind=dataset.kind,
        split=dataset.source_split,
        accuracy=correct / total,
        correct=correct,
        total=total,
        config_digest=config_digest,
        per_class={k: c / t for k, (c, t) in sorted(class_counts.items())} if per_class else None,
    )


def _instance_loss_grads(
    params: TransformerParams,
    mcfg: ModelConfig,
    inst: BenchmarkInstance,
    cfg: FinetuneConfig,
    grads: TransformerParams,
):
    """Forward, cross-entropy on the kind head, gradients into `grads`.

    linear_probe touches only the head arrays; finetune also backpropagates
    into the transformer. Returns (loss, correct, total).
    """
    trace = _instance_forward(params, mcfg, inst, _task_token(inst, cfg.use_task_label))
    full = cfg.mode == "finetune"
    kind = inst.kind

    if kind in ("step_cls", "short_term"):
        row = trace.offset + (0 if kind == "step_cls" else inst.K)
        target = int(inst.target)
        loss = -log_softmax(trace.logits[row])[target]
        p = softmax_logits(trace.logits[row])
        d_row = p.copy()
        d_row[target] -= 1.0
        grads.head_w += np.outer(trace.hidden[row], d_row)
        grads.head_b += d_row
        if full:
            d_hidden = np.zeros((trace.T, mcfg.d))
            d_hidden[row] = d_row @ params.head_w.T
            model_backward(params, mcfg, trace, d_hidden=d_hidden, grads=grads)
        pred = int(np.argmax(trace.logits[row]))
        return loss, int(pred == target), 1

    if kind == "proc_rec":
        if not 0 <= int(inst.target) < mcfg.num_tasks:
            raise ConfigError(
                f"task head covers {mcfg.num_tasks} tasks, target {inst.target}"
            )
        h0 = trace.hidden[0]
        z = h0 @ params.task_head_w + params.task_head_b
        target = int(inst.target)
        loss = -log_softmax(z)[target]
        p = softmax_logits(z)
        d = p.copy()
        d[target] -= 1.0
        grads.task_head_w += np.outer(h0, d)
        grads.task_head_b += d
        if full:
            d_hidden = np.zeros((trace.T, mcfg.d))
            d_hidden[0] = d @ params.task_head_w.T
            model_backward(params, mcfg, trace, d_hidden=d_hidden, grads=grads)
        return loss, int(np.argmax(z) == target), 1

    if kind == "mistake_order":
        h0 = trace.hidden[0]
        z = h0 @ params.order_head_w + params.order_head_b
        target = int(bool(inst.target))
        loss = -log_softmax(z)[target]
        p = softmax_logits(z)
        d = p.copy()
        d[target] -= 1.0
        grads.order_head_w += np.outer(h0, d)
        grads.order_head_b += d
        if full:
            d_hidden = np.zeros((trace.T, mcfg.d))
            d_hidden[0] = d @ params.order_head_w.T
            model_backward(params, mcfg, trace, d_hidden=d_hidden, grads=grads)
        return loss, int(np.argmax(z) == target), 1

    if kind == "mistake_step":
        ch = trace.clip_hidden
        scores = (ch @ params.mistake_head_w)[:, 0] + params.mistake_head_b[0]
        j = int(inst.target)
        loss = -log_softmax(scores)[j]
        p = softmax_logits(scores)
        d_s = p.copy()
        d_s[j] -= 1.0
        grads.mistake_head_w += ch.T @ d_s[:, None]
        grads.mistake_head_b += np.array([d_s.sum()])
        if full:
            d_hidden = np.zeros((trace.T, mcfg.d))
            d_hidden[trace.offset :] = np.outer(d_s, params.mistake_head_w[:, 0])
            model_backward(params, mcfg, trace, d_hidden=d_hidden, grads=grads)
        return loss, int(np.argmax(scores) == j), 1

    # long_term: every slot trains (padded slots target the NULL class);
    # accuracy counts non-NULL slots only.
    h0 = trace.hidden[0]
    d_h0 = np.zeros(mcfg.d)
    loss = 0.0
    correct = 0
    total = 0
    for slot, want in enumerate(inst.target):
        w = params.forecast_w[slot]
        b = params.forecast_b[slot]
        z = h0 @ w + b
        target = mcfg.s if want is None else int(want)
        loss -= log_softmax(z)[target]
        p = softmax_logits(z)
        d = p.copy()
        d[target] -= 1.0
        grads.forecast_w[slot] += np.outer(h0, d)
        grads.forecast_b[slot] += d
        d_h0 += d @ w.T
        if want is not None:
            total += 1
            correct += int(np.argmax(z) == target)
    if full:
        d_hidden = np.zeros((trace.T, mcfg.d))
        d_hidden[0] = d_h0
        model_backward(params, mcfg, trace, d_hidden=d_hidden, grads=grads)
    return loss, correct, total


def finetune(
    pretrained: TransformerParams,
    mcfg: ModelConfig,
    cfg: FinetuneConfig,
    dataset: BenchmarkSet,
    *,
    config_digest: str = "",
) -> tuple[TransformerParams, TrainReport]:
    """Cross-entropy training of the kind head (and, in finetune mode, the
    transformer) on a benchmark set, deterministic in cfg.seed."""
    if not dataset.instances:
        raise InvalidInput("empty dataset")
    if dataset.kind != cfg.task_kind:
        raise InvalidInput(
            f"dataset kind {dataset.kind!r} does not match config {cfg.task_kind!r}"
        )
    start = time.perf_counter()
    params = clone_params(pretrained)
    trainable = trainable_names(params, cfg)
    opt = OptimizerConfig(
        kind=cfg.optimizer, lr=cfg.lr, momentum=cfg.momentum,
        weight_decay=cfg.weight_decay, schedule=list(cfg.schedule),
    )
    state = init_optimizer(opt, params)
    grads = zeros_like_params(params)
    touched = trainable if cfg.mode == "linear_probe" else {n for n, _ in named_arrays(params)}
    history: list[EpochStats] = []
    last_good = clone_params(params)
    for epoch in range(cfg.epochs):
        rng = np.random.default_rng([cfg.seed, 19, epoch])
        order = rng.permutation(len(dataset.instances))
        losses = []
        correct = 0
        total = 0
        for ii in order:
            inst = dataset.instances[ii]
            for name in touched:
                get_array(grads, name).fill(0.0)
            try:
                loss, c, t = _instance_loss_grads(params, mcfg, inst, cfg, grads)
            except FloatingPointError as exc:
                report = TrainReport(history, time.perf_counter() - start, config_digest, cfg.seed)
                raise DivergenceError(
                    f"epoch {epoch}: {exc}", params=last_good, report=report
                ) from exc
            if not np.isfinite(loss):
                report = TrainReport(history, time.perf_counter() - start, config_digest, cfg.seed)
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch}", params=last_good, report=report
                )
            losses.append(loss)
            correct += c
            total += t
            optimizer_step(state, params, grads, epoch, trainable=trainable)
        history.append(
            EpochStats(
                epoch=epoch,
                loss=float(np.mean(losses)),
                masked_accuracy=correct / total if total else 0.0,
                lr=opt.lr_at(epoch),
            )
        )
        last_good = clone_params(params)
    report = TrainReport(history, time.perf_counter() - start, config_digest, cfg.seed)
    return params, report
