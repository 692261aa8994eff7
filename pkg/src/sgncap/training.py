"""Maximum-likelihood training and the finite-difference gradient harness.

The loss is the mean negative log-likelihood per non-pad target token,
computed over a whole minibatch. Examples are evaluated sequentially in a
fixed order and their gradients folded with a per-tape seed of -1/M, so a
run is reproducible bit-for-bit from its seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .attention import AnnotationSet
from .data import PAD_ID, SceneRecord, Vocabulary, preprocess
from .model import ModelConfig, ModelParams, forward_sequence, save_checkpoint, teacher_io
from .numerics import ContractError, NonFiniteError, Tape, Tensor, backward


class TrainingDiverged(RuntimeError):
    """Raised when a batch produces a non-finite loss."""


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    batch_size: int = 16
    epochs: int = 10
    optimizer: str = "sgd"
    grad_clip_norm: float = 5.0
    seed: int = 0
    dropout_rate: float | None = None  # None: use the model config's rate
    max_steps: int | None = None
    target_loss: float | None = None
    captions_per_record: int | None = None  # None: train on every caption

    def validate(self) -> "TrainConfig":
        if self.learning_rate < 0:
            raise ContractError("learning_rate must be >= 0")
        if self.batch_size < 1 or self.epochs < 1:
            raise ContractError("batch_size and epochs must be >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise ContractError(f"optimizer must be sgd or adam, got {self.optimizer!r}")
        return self


@dataclass
class TrainResult:
    loss_log: list = field(default_factory=list)  # (epoch, step, loss) per batch
    epoch_losses: list = field(default_factory=list)
    steps: int = 0

    def log_lines(self) -> list:
        return [f"epoch {e} step {s} loss {v:.6f}" for e, s, v in self.loss_log]


def nll_loss(logits: list, targets: list, pad_id: int = PAD_ID) -> Tensor:
    """Mean negative log-likelihood per non-pad target token, differentiable."""
    if len(logits) != len(targets):
        raise ContractError(f"{len(logits)} logit vectors for {len(targets)} targets")
    terms = [nm.pick(nm.log_softmax(lg), tid)
             for lg, tid in zip(logits, targets) if tid != pad_id]
    if not terms:
        raise ContractError("all targets are padding")
    total = terms[0]
    for t in terms[1:]:
        total = nm.add(total, t)
    return nm.scale(total, -1.0 / len(terms))


@dataclass
class Example:
    """A pre-encoded training pair: image features plus one caption."""

    annotations: AnnotationSet
    attrs: Tensor
    caption_ids: list


def encode_examples(records: list, vocab: Vocabulary,
                    captions_per_record: int | None = None) -> list:
    """Expand scene records into per-caption training examples."""
    out = []
    for rec in records:
        ann = AnnotationSet(Tensor(rec.annotations))
        attrs = Tensor(rec.attributes)
        caps = rec.captions
        if captions_per_record is not None:
            caps = caps[:captions_per_record]
        for cap in caps:
            ids = vocab.encode(preprocess(cap))
            if ids:
                out.append(Example(ann, attrs, ids))
    return out


def _global_grad_norm(tensors) -> float:
    total = 0.0
    for t in tensors:
        if t.grad is not None:
            total += float(np.sum(t.grad * t.grad))
    return float(np.sqrt(total))


class _Sgd:
    def __init__(self, lr):
        self.lr = lr

    def step(self, tensors):
        for t in tensors:
            if t.grad is not None:
                t.data -= self.lr * t.grad


class _Adam:
    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, tensors):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for i, t in enumerate(tensors):
            if t.grad is None:
                continue
            m = self.m.setdefault(i, np.zeros_like(t.data))
            v = self.v.setdefault(i, np.zeros_like(t.data))
            m[...] = b1 * m + (1 - b1) * t.grad
            v[...] = b2 * v + (1 - b2) * t.grad * t.grad
            m_hat = m / (1 - b1 ** self.t)
            v_hat = v / (1 - b2 ** self.t)
            t.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def mean_dataset_nll(examples: list, params: ModelParams, config: ModelConfig) -> float:
    """Dropout-free mean token NLL over a list of examples."""
    total, count = 0.0, 0
    for ex in examples:
        logits = forward_sequence(ex.annotations, ex.attrs, ex.caption_ids, params, config)
        _, targets = teacher_io(ex.caption_ids)
        for lg, tid in zip(logits, targets):
            v = lg.data
            total -= float(v[tid] - v.max() - np.log(np.exp(v - v.max()).sum()))
            count += 1
    return total / count


def train(examples: list, params: ModelParams, config: ModelConfig,
          train_config: TrainConfig, checkpoint_dir=None,
          log_fn=None) -> TrainResult:
    """Minibatch maximum-likelihood training, reproducible from the seed.

    ``examples`` come from ``encode_examples``. Every epoch shuffles with the
    seeded generator, pads each batch to its longest target sequence, runs
    one forward/backward per example, clips the global gradient norm, and
    applies the optimizer. Emits one (epoch, step, loss) entry per batch and
    a checkpoint per epoch when ``checkpoint_dir`` is given.
    """
    train_config.validate()
    if not examples:
        raise ContractError("train needs a nonempty dataset")
    rate = (config.dropout_rate if train_config.dropout_rate is None
            else train_config.dropout_rate)
    run_config = ModelConfig(**{**config.__dict__, "dropout_rate": rate}).validate()
    rng = np.random.default_rng(train_config.seed)
    tensors = params.tensors()
    opt = (_Adam(train_config.learning_rate) if train_config.optimizer == "adam"
           else _Sgd(train_config.learning_rate))
    result = TrainResult()
    step = 0
    for epoch in range(train_config.epochs):
        order = rng.permutation(len(examples))
        epoch_total, epoch_tokens = 0.0, 0
        for start in range(0, len(order), train_config.batch_size):
            batch = [examples[i] for i in order[start:start + train_config.batch_size]]
            pad_to = max(len(ex.caption_ids) + 1 for ex in batch)
            passes = []
            try:
                for ex in batch:
                    _, targets = teacher_io(ex.caption_ids, pad_to)
                    with Tape() as tape:
                        logits = forward_sequence(
                            ex.annotations, ex.attrs, ex.caption_ids, params,
                            run_config, training=rate > 0.0, rng=rng, pad_to=pad_to)
                        terms = [nm.pick(nm.log_softmax(lg), tid)
                                 for lg, tid in zip(logits, targets) if tid != PAD_ID]
                        total = terms[0]
                        for t in terms[1:]:
                            total = nm.add(total, t)
                    passes.append((total, len(terms), tape))
            except NonFiniteError as err:
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch} step {step} "
                    f"(batch starting at shuffled index {start})") from err
            n_tokens = sum(n for _, n, _ in passes)
            loss_value = -sum(t.item() for t, _, _ in passes) / n_tokens
            if not np.isfinite(loss_value):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch} step {step} "
                    f"(batch starting at shuffled index {start})")
            params.zero_grad()
            for total, _, tape in passes:
                backward(total, tape, seed=-1.0 / n_tokens)
            if train_config.grad_clip_norm and train_config.grad_clip_norm > 0:
                norm = _global_grad_norm(tensors)
                if norm > train_config.grad_clip_norm:
                    factor = train_config.grad_clip_norm / norm
                    for t in tensors:
                        if t.grad is not None:
                            t.grad *= factor
            opt.step(tensors)
            result.loss_log.append((epoch, step, loss_value))
            if log_fn is not None:
                log_fn(f"epoch {epoch} step {step} loss {loss_value:.6f}")
            epoch_total += loss_value * n_tokens
            epoch_tokens += n_tokens
            step += 1
            result.steps = step
            if train_config.max_steps is not None and step >= train_config.max_steps:
                break
        result.epoch_losses.append(epoch_total / max(epoch_tokens, 1))
        if checkpoint_dir is not None:
            save_checkpoint(params, config, checkpoint_dir / "model.ckpt")
        if train_config.max_steps is not None and step >= train_config.max_steps:
            break
        if train_config.target_loss is not None:
            if mean_dataset_nll(examples, params, config) < train_config.target_loss:
                break
    return result


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    per_block: dict  # name -> (max_rel_err, entries_checked)

    @property
    def max_rel_err(self) -> float:
        return max(v for v, _ in self.per_block.values())

    def passed(self, tol: float = 1e-5) -> bool:
        return self.max_rel_err < tol


def grad_check(params: ModelParams, config: ModelConfig, example: Example,
               epsilon: float = 1e-5, samples_per_block: int = 200,
               seed: int = 0) -> GradCheckReport:
    """Compare backward gradients of the mean-NLL loss against central
    finite differences, sampling up to ``samples_per_block`` entries per
    parameter block.

    Relative error per entry is |analytic - numeric| divided by
    max(|analytic|, |numeric|, 1e-3); the floor keeps near-zero gradients
    from amplifying finite-difference roundoff. Dropout is always off here.
    """
    check_config = ModelConfig(**{**config.__dict__, "dropout_rate": 0.0}).validate()
    _, targets = teacher_io(example.caption_ids)

    def loss_value() -> float:
        logits = forward_sequence(example.annotations, example.attrs,
                                  example.caption_ids, params, check_config)
        return nll_loss(logits, targets).item()

    params.zero_grad()
    with Tape() as tape:
        logits = forward_sequence(example.annotations, example.attrs,
                                  example.caption_ids, params, check_config)
        loss = nll_loss(logits, targets)
    backward(loss, tape)

    rng = np.random.default_rng(seed)
    report = {}
    for name, t in params.blocks().items():
        flat = t.data.reshape(-1)
        grad = np.zeros_like(flat) if t.grad is None else t.grad.reshape(-1)
        if flat.size > samples_per_block:
            idx = rng.choice(flat.size, samples_per_block, replace=False)
        else:
            idx = np.arange(flat.size)
        worst = 0.0
        for j in idx:
            old = flat[j]
            flat[j] = old + epsilon
            up = loss_value()
            flat[j] = old - epsilon
            down = loss_value()
            flat[j] = old
            numeric = (up - down) / (2.0 * epsilon)
            rel = abs(grad[j] - numeric) / max(abs(grad[j]), abs(numeric), 1e-3)
            worst = max(worst, rel)
        report[name] = (worst, len(idx))
    return GradCheckReport(report)
