"""Training schedules, evaluation metrics, and model persistence.

Training runs in two stages. First the color-naming branch is
pretrained alone on saliency-masked negative log-likelihood (the only
place that loss is used). Then the branches are trained alternately on
the image-level cross entropy of the aggregated score: the attention
branch first, with the color branch frozen, then the roles swap, until
the relative change of the phase-mean loss drops below the tolerance or
the phase budget runs out. Frozen parameters (and their batchnorm
statistics) are bit-identical across the other branch's phase; the
frozen branch's outputs are precomputed once per phase since they
cannot change.

Log epochs are numbered monotonically across pretraining and every
phase. The learning-rate schedule ``base * 10**-(e // decay_epochs)``
runs on one counter spanning all alternation phases (pretraining, a
separate stage, has its own counter).

Ablation switches: ``no-attention`` trains the color branch alone with
unit attention for the same epoch budget, ``no-prior`` builds the
attention branch without the spatial prior, and ``no-alternation``
trains both branches jointly with nothing frozen.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from chroma.checkpoint import read_checkpoint, write_checkpoint
from chroma.config import ConfigError, RunConfig, parse_kv_text
from chroma.data import EvalSample, WeakSample, resize_bilinear
from chroma.modulation import AttentionMap, ImageScore, aggregate_scores, modulate
from chroma.networks import (
    CnNet,
    ColorNameMap,
    VaNet,
    cn_forward,
    full_forward,
    masked_nll_loss,
)
from chroma.saliency import binarize, compute_saliency
from chroma.tensor import OptimizerState, Tensor, cross_entropy, no_grad, sgd_step
from chroma.vocab import get_vocabulary

__all__ = [
    "TrainConfig",
    "EpochRecord",
    "TrainLog",
    "DivergenceError",
    "lr_at_epoch",
    "pretrain_cn",
    "alternating_train",
    "pixel_accuracy",
    "image_accuracy",
    "attention_localization",
    "LocalizationStats",
    "evaluate_model",
    "build_networks",
    "save_model",
    "load_model",
]

TRAIN_DTYPE = np.float32


class DivergenceError(RuntimeError):
    """Loss went non-finite; the networks hold the last good state."""

    def __init__(self, message: str, log: "TrainLog"):
        super().__init__(message)
        self.log = log


@dataclass
class TrainConfig:
    """Optimization hyperparameters (paper values as defaults)."""

    learning_rate: float = 0.01
    lr_decay_epochs: int = 20
    momentum: float = 0.9
    cn_batch_size: int = 32
    va_batch_size: int = 6
    pretrain_epochs: int = 10
    phase_epochs: int = 5
    max_phases: int = 10
    convergence_tol: float = 1e-3
    seed: int = 0
    ablation: str = "none"

    @classmethod
    def from_run_config(cls, cfg: RunConfig) -> "TrainConfig":
        return cls(learning_rate=cfg.learning_rate,
                   lr_decay_epochs=cfg.lr_decay_epochs,
                   momentum=cfg.momentum,
                   cn_batch_size=cfg.cn_batch_size,
                   va_batch_size=cfg.va_batch_size,
                   pretrain_epochs=cfg.pretrain_epochs,
                   phase_epochs=cfg.phase_epochs,
                   max_phases=cfg.max_phases,
                   convergence_tol=cfg.convergence_tol,
                   seed=cfg.seed,
                   ablation=cfg.ablation)

    def validate_against(self, n_train: int) -> None:
        if n_train < 1:
            raise ConfigError("training split is empty")
        if self.cn_batch_size > n_train or self.va_batch_size > n_train:
            raise ConfigError(f"batch size exceeds dataset size {n_train}")


@dataclass
class EpochRecord:
    epoch: int
    phase: str  # PRETRAIN | VA | CN | JOINT
    mean_loss: float
    val_image_accuracy: float
    learning_rate: float = 0.0
    wall_time: float = field(compare=False, default=0.0)


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)

    def add(self, **kw) -> None:
        self.records.append(EpochRecord(**kw))

    def phases_seen(self) -> list[str]:
        out = []
        for r in self.records:
            if not out or out[-1] != r.phase:
                out.append(r.phase)
        return out

    def as_table(self) -> str:
        lines = [f"{'epoch':>5}  {'phase':<8}  {'loss':>12}  {'val_acc':>8}  "
                 f"{'lr':>8}  {'seconds':>8}"]
        for r in self.records:
            lines.append(f"{r.epoch:>5}  {r.phase:<8}  {r.mean_loss:>12.6f}  "
                         f"{r.val_image_accuracy:>8.4f}  {r.learning_rate:>8.5f}  "
                         f"{r.wall_time:>8.2f}")
        return "\n".join(lines) + "\n"

    def as_kv(self) -> str:
        lines = []
        for r in self.records:
            prefix = f"epoch.{r.epoch}"
            lines.append(f"{prefix}.phase = {r.phase}")
            lines.append(f"{prefix}.loss = {r.mean_loss!r}")
            lines.append(f"{prefix}.val_accuracy = {r.val_image_accuracy!r}")
            lines.append(f"{prefix}.learning_rate = {r.learning_rate!r}")
            lines.append(f"{prefix}.wall_time = {r.wall_time:.3f}")
        return "\n".join(lines) + "\n"


def lr_at_epoch(base_lr: float, epoch: int, decay_epochs: int = 20) -> float:
    return base_lr * 10.0 ** (-(epoch // decay_epochs))


def _epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed,
                                                       spawn_key=(epoch,)))
    return rng.permutation(n)


def _batches(order: np.ndarray, size: int):
    for start in range(0, len(order), size):
        yield order[start:start + size]


def _prepare_images(samples: list[WeakSample], resolution: int) -> list[np.ndarray]:
    out = []
    for s in samples:
        img = s.image
        if img.shape[:2] != (resolution, resolution):
            img = np.clip(resize_bilinear(img, resolution, resolution), 0.0, 1.0)
        out.append(img.astype(TRAIN_DTYPE))
    return out


def _snapshot(nets) -> list[dict]:
    snaps = []
    for net in nets:
        snaps.append({
            "params": {k: p.data.copy() for k, p in net.parameters().items()},
            "stats": {k: s.copy() for k, s in net.stats().items()},
        })
    return snaps


def _restore(nets, snaps) -> None:
    for net, snap in zip(nets, snaps):
        for k, p in net.parameters().items():
            p.data[...] = snap["params"][k]
        for k, s in net.stats().items():
            s.mean[...] = snap["stats"][k].mean
            s.var[...] = snap["stats"][k].var


def _unit_attention(resolution: int) -> AttentionMap:
    return AttentionMap(Tensor(np.ones((resolution, resolution),
                                       dtype=TRAIN_DTYPE)))


def _validation_accuracy(cn: CnNet, va: VaNet | None, images, labels,
                         ablation: str) -> float:
    if not images:
        return 0.0
    correct = 0
    with no_grad():
        for img, label in zip(images, labels):
            y = cn_forward(cn, img)
            if ablation == "no-attention" or va is None:
                score = aggregate_scores(y.values)
            else:
                a = AttentionMap(va.forward(img))
                score = aggregate_scores(modulate(y.values, a))
            correct += score.argmax() == label
    return correct / len(images)


# ---------------------------------------------------------------------------
# pretraining


def pretrain_cn(cn: CnNet, train_samples: list[WeakSample], config: TrainConfig,
                mask_fn=None, val_samples: list[WeakSample] = (),
                resolution: int | None = None, log: TrainLog | None = None,
                start_epoch: int = 0) -> tuple[TrainLog, int]:
    """Saliency-masked pretraining of the color-naming branch.

    Returns the log and the next global epoch index. Raises
    :class:`DivergenceError` (after restoring the last finite epoch's
    state) if the loss goes non-finite.
    """
    config.validate_against(len(train_samples))
    log = log if log is not None else TrainLog()
    resolution = resolution or train_samples[0].image.shape[0]
    images = _prepare_images(train_samples, resolution)
    labels = [s.label for s in train_samples]
    val_images = _prepare_images(list(val_samples), resolution)
    val_labels = [s.label for s in val_samples]
    if mask_fn is None:
        mask_fn = lambda img: binarize(compute_saliency(img))
    masks = [mask_fn(img) for img in images]

    params = cn.parameters()
    cn.set_trainable(True)
    opt = OptimizerState(learning_rate=config.learning_rate,
                         momentum=config.momentum)
    epoch = start_epoch
    for _ in range(config.pretrain_epochs):
        t0 = time.perf_counter()
        opt.learning_rate = lr_at_epoch(config.learning_rate,
                                        epoch - start_epoch,
                                        config.lr_decay_epochs)
        good = _snapshot([cn])
        order = _epoch_order(config.seed, epoch, len(images))
        batch_losses = []
        try:
            for batch in _batches(order, config.cn_batch_size):
                cn.zero_grads()
                batch_loss = 0.0
                for idx in batch:
                    y = cn_forward(cn, images[idx], train=True)
                    loss = masked_nll_loss(y, masks[idx], labels[idx])
                    loss.backward(seed=1.0 / len(batch))
                    batch_loss += loss.item() / len(batch)
                sgd_step(params, {k: p.grad for k, p in params.items()}, opt)
                batch_losses.append(batch_loss)
        except FloatingPointError as exc:
            _restore([cn], good)
            raise DivergenceError(f"pretraining diverged at epoch {epoch}: {exc}",
                                  log) from exc
        mean_loss = float(np.mean(batch_losses))
        if not np.isfinite(mean_loss):
            _restore([cn], good)
            raise DivergenceError(f"pretraining diverged at epoch {epoch}", log)
        val_acc = _validation_accuracy(cn, None, val_images, val_labels,
                                       "no-attention")
        log.add(epoch=epoch, phase="PRETRAIN", mean_loss=mean_loss,
                val_image_accuracy=val_acc, learning_rate=opt.learning_rate,
                wall_time=time.perf_counter() - t0)
        epoch += 1
    return log, epoch


# ---------------------------------------------------------------------------
# alternating end-to-end training


def _cache_forward(net, images) -> list[Tensor]:
    """Eval-mode outputs of a frozen branch, as reusable constant tensors."""
    with no_grad():
        return [Tensor(net.forward(img).data) for img in images]


def alternating_train(cn: CnNet, va: VaNet, train_samples: list[WeakSample],
                      config: TrainConfig, val_samples: list[WeakSample] = (),
                      resolution: int | None = None,
                      log: TrainLog | None = None, start_epoch: int = 0,
                      start_phase: int = 0,
                      prev_phase_loss: float = float("nan"),
                      on_phase_end=None) -> tuple[TrainLog, int]:
    """Alternate VA and CN phases on the image-level cross entropy.

    Stops when the relative change between consecutive phase-mean
    losses falls below ``convergence_tol`` or after ``max_phases``
    phases. Returns the log and the next global epoch index.
    """
    config.validate_against(len(train_samples))
    log = log if log is not None else TrainLog()
    resolution = resolution or train_samples[0].image.shape[0]
    images = _prepare_images(train_samples, resolution)
    labels = [s.label for s in train_samples]
    val_images = _prepare_images(list(val_samples), resolution)
    val_labels = [s.label for s in val_samples]
    unit = _unit_attention(resolution)

    # the lr counter spans the alternation phases; log epochs stay
    # globally monotone across pretraining and phases
    alternation_start = start_epoch - start_phase * config.phase_epochs
    epoch = start_epoch
    max_phases = config.max_phases
    if config.ablation == "no-alternation":
        # a joint epoch updates both branches, costing one CN plus one
        # VA epoch; halving the phase budget keeps total compute equal
        max_phases = (config.max_phases + 1) // 2
    for phase_idx in range(start_phase, max_phases):
        if config.ablation == "no-attention":
            phase = "CN"
        elif config.ablation == "no-alternation":
            phase = "JOINT"
        else:
            phase = "VA" if phase_idx % 2 == 0 else "CN"

        if phase == "VA":
            trainable, frozen = [va], [cn]
            batch_size = config.va_batch_size
            cached = _cache_forward(cn, images)
        elif phase == "CN":
            trainable, frozen = [cn], ([] if config.ablation == "no-attention"
                                       else [va])
            batch_size = config.cn_batch_size
            cached = (None if config.ablation == "no-attention"
                      else _cache_forward(va, images))
        else:  # JOINT
            trainable, frozen = [cn, va], []
            batch_size = config.va_batch_size
            cached = None
        for net in frozen:
            net.set_trainable(False)
        for net in trainable:
            net.set_trainable(True)
        params = {}
        for net in trainable:
            prefix = "cn." if net is cn else "va."
            params.update({prefix + k: p for k, p in net.parameters().items()})
        opt = OptimizerState(learning_rate=config.learning_rate,
                             momentum=config.momentum)

        epoch_losses = []
        for _ in range(config.phase_epochs):
            t0 = time.perf_counter()
            opt.learning_rate = lr_at_epoch(config.learning_rate,
                                            epoch - alternation_start,
                                            config.lr_decay_epochs)
            good = _snapshot([cn, va])
            order = _epoch_order(config.seed, epoch, len(images))
            batch_losses = []
            try:
                for batch in _batches(order, batch_size):
                    for net in trainable:
                        net.zero_grads()
                    batch_loss = 0.0
                    for idx in batch:
                        if phase == "VA":
                            y_values = cached[idx]
                            a = AttentionMap(va.forward(images[idx], train=True))
                        elif phase == "CN":
                            y_values = cn.forward(images[idx], train=True)
                            a = (unit if cached is None
                                 else AttentionMap(cached[idx]))
                        else:
                            y_values = cn.forward(images[idx], train=True)
                            a = AttentionMap(va.forward(images[idx], train=True))
                        score = aggregate_scores(modulate(y_values, a))
                        loss = cross_entropy(score.y_hat, labels[idx])
                        loss.backward(seed=1.0 / len(batch))
                        batch_loss += loss.item() / len(batch)
                    sgd_step(params, {k: p.grad for k, p in params.items()}, opt)
                    batch_losses.append(batch_loss)
            except FloatingPointError as exc:
                _restore([cn, va], good)
                raise DivergenceError(
                    f"{phase} phase diverged at epoch {epoch}: {exc}", log) from exc
            mean_loss = float(np.mean(batch_losses))
            if not np.isfinite(mean_loss):
                _restore([cn, va], good)
                raise DivergenceError(f"{phase} phase diverged at epoch {epoch}",
                                      log)
            val_acc = _validation_accuracy(cn, va, val_images, val_labels,
                                           config.ablation)
            log.add(epoch=epoch, phase=phase, mean_loss=mean_loss,
                    val_image_accuracy=val_acc, learning_rate=opt.learning_rate,
                    wall_time=time.perf_counter() - t0)
            epoch += 1
            epoch_losses.append(mean_loss)

        phase_loss = float(np.mean(epoch_losses))
        if on_phase_end is not None:
            on_phase_end(phase_idx, phase, phase_loss, epoch)
        if np.isfinite(prev_phase_loss):
            rel = abs(phase_loss - prev_phase_loss) / max(abs(prev_phase_loss),
                                                          1e-12)
            if rel < config.convergence_tol:
                break
        prev_phase_loss = phase_loss
    for net in (cn, va):
        net.set_trainable(True)
    return log, epoch


# ---------------------------------------------------------------------------
# metrics


def pixel_accuracy(y_map: ColorNameMap, mask: np.ndarray,
                   gt_labels: np.ndarray) -> float:
    """Fraction of masked pixels whose argmax class matches the ground
    truth. Accepts only a ColorNameMap: pixel-wise evaluation uses the
    color-naming branch alone, never aggregated scores."""
    if not isinstance(y_map, ColorNameMap):
        raise TypeError("pixel_accuracy expects a ColorNameMap")
    sel = np.asarray(mask) > 0
    if not sel.any():
        raise ValueError("pixel_accuracy: mask is empty")
    pred = y_map.argmax_map()
    gt = np.broadcast_to(np.asarray(gt_labels), pred.shape)
    return float((pred[sel] == gt[sel]).mean())


def image_accuracy(predictions: list[ImageScore], labels) -> float:
    """Fraction of images whose aggregated score matches the label."""
    labels = list(labels)
    if not predictions:
        raise ValueError("image_accuracy: no predictions")
    if len(predictions) != len(labels):
        raise ValueError(f"image_accuracy: {len(predictions)} predictions vs "
                         f"{len(labels)} labels")
    hits = sum(p.argmax() == l for p, l in zip(predictions, labels))
    return hits / len(labels)


@dataclass
class LocalizationStats:
    inside_mean: float
    outside_mean: float
    iou_at_mean_threshold: float


def attention_localization(attention: AttentionMap,
                           gt_mask: np.ndarray) -> LocalizationStats:
    """How well the attention map concentrates on the object mask."""
    mask = np.asarray(gt_mask) > 0
    if not mask.any() or mask.all():
        raise ValueError("attention_localization: mask must be non-empty and "
                         "not cover the whole image")
    a = attention.values.data.astype(np.float64)
    inside = float(a[mask].mean())
    outside = float(a[~mask].mean())
    spread = a.max() - a.min()
    if spread > 0:
        binary = binarize((a - a.min()) / spread, method="mean").astype(bool)
    else:
        binary = np.zeros_like(mask)
    union = (binary | mask).sum()
    iou = float((binary & mask).sum() / union) if union else 0.0
    return LocalizationStats(inside_mean=inside, outside_mean=outside,
                             iou_at_mean_threshold=iou)


def evaluate_model(cn: CnNet, va: VaNet | None, samples: list[WeakSample],
                   resolution: int, ablation: str = "none") -> dict:
    """Metrics over a test split.

    Image-wise accuracy runs the full model at its training resolution.
    When samples carry masks, pixel-wise accuracy runs the color branch
    alone at native image size, and attention localization is reported
    against the ground-truth masks.
    """
    if not samples:
        raise ValueError("evaluate_model: empty sample list")
    labels = [s.label for s in samples]
    images = _prepare_images(samples, resolution)
    scores: list[ImageScore] = []
    loc_stats: list[LocalizationStats] = []
    pixel_accs: list[float] = []
    with no_grad():
        for sample, img in zip(samples, images):
            y = cn_forward(cn, img)
            if ablation == "no-attention" or va is None:
                scores.append(aggregate_scores(y.values))
                attention = None
            else:
                attention = AttentionMap(va.forward(img))
                scores.append(aggregate_scores(modulate(y.values, attention)))
            if isinstance(sample, EvalSample):
                native = cn_forward(cn, sample.image.astype(TRAIN_DTYPE))
                pixel_accs.append(pixel_accuracy(native, sample.mask,
                                                 np.full(sample.mask.shape,
                                                         sample.label)))
                if attention is not None:
                    mask = sample.mask
                    if mask.shape != attention.shape:
                        mask = (resize_bilinear(mask.astype(np.float64),
                                                *attention.shape) > 0.5
                                ).astype(np.uint8)
                    if mask.any() and not mask.all():
                        loc_stats.append(attention_localization(attention, mask))
    metrics = {"image_accuracy": image_accuracy(scores, labels),
               "n_images": len(samples)}
    if pixel_accs:
        metrics["pixel_accuracy"] = float(np.mean(pixel_accs))
    if loc_stats:
        ratios = [s.inside_mean / s.outside_mean if s.outside_mean > 0
                  else float("inf") for s in loc_stats]
        metrics["attention_inside_mean"] = float(np.mean(
            [s.inside_mean for s in loc_stats]))
        metrics["attention_outside_mean"] = float(np.mean(
            [s.outside_mean for s in loc_stats]))
        metrics["attention_ratio_ge_2_fraction"] = float(np.mean(
            [r >= 2.0 for r in ratios]))
        metrics["attention_mean_iou"] = float(np.mean(
            [s.iou_at_mean_threshold for s in loc_stats]))
    return metrics


# ---------------------------------------------------------------------------
# model persistence


def build_networks(cfg: RunConfig, num_classes: int,
                   dtype=TRAIN_DTYPE) -> tuple[CnNet, VaNet]:
    cn = CnNet(num_classes=num_classes, width=cfg.cn_width, dtype=dtype,
               seed=cfg.seed)
    va = VaNet(resolution=cfg.resolution, stages=cfg.va_stages,
               channels=cfg.va_channel_list(), fc_width=cfg.va_fc_width,
               bottleneck_channels=cfg.va_bottleneck_channels,
               dec_channels=cfg.va_dec_channel_list(),
               use_prior=cfg.ablation != "no-prior", dtype=dtype,
               seed=cfg.seed + 1)
    return cn, va


def _model_records(cn: CnNet, va: VaNet) -> dict[str, np.ndarray]:
    records: dict[str, np.ndarray] = {}
    for prefix, net in (("cn", cn), ("va", va)):
        for k, p in net.parameters().items():
            records[f"{prefix}.{k}"] = p.data
        for k, s in net.stats().items():
            records[f"{prefix}.stat.{k}.mean"] = s.mean
            records[f"{prefix}.stat.{k}.var"] = s.var
    return records


def save_model(path, cn: CnNet, va: VaNet, cfg: RunConfig,
               opt_state: OptimizerState | None = None,
               counters: dict | None = None) -> None:
    """Write a checkpoint: vocabulary header, config text, parameters,
    batchnorm statistics, and optimizer state.

    The output directory is a run-local knob, not part of the model's
    identity, so it is dropped from the embedded config: training the
    same config into two directories yields byte-identical checkpoints.
    """
    config_text = "".join(line + "\n"
                          for line in cfg.to_text().splitlines()
                          if not line.startswith("out_dir"))
    for key, value in (counters or {}).items():
        config_text += f"resume.{key} = {value}\n"
    optimizer: dict[str, np.ndarray] = {}
    if opt_state is not None:
        optimizer["optimizer/learning_rate"] = np.asarray(
            [opt_state.learning_rate])
        optimizer["optimizer/momentum"] = np.asarray([opt_state.momentum])
        for name, v in opt_state.velocities.items():
            optimizer[f"velocity/{name}"] = v
    write_checkpoint(path, cfg.vocab().names, config_text,
                     _model_records(cn, va), optimizer)


def load_model(path) -> tuple[CnNet, VaNet, RunConfig, dict]:
    """Rebuild networks from a checkpoint; returns (cn, va, config,
    resume counters)."""
    ckpt = read_checkpoint(path)
    counters: dict[str, str] = {}
    config_lines = []
    for line in ckpt.config_text.splitlines():
        stripped = line.split("#", 1)[0].strip()
        if stripped.startswith("resume."):
            key, value = stripped.split("=", 1)
            counters[key.strip()[len("resume."):]] = value.strip()
        else:
            config_lines.append(line)
    cfg = RunConfig.from_text("\n".join(config_lines))
    vocab = cfg.vocab()
    if tuple(ckpt.vocabulary) != vocab.names:
        raise ConfigError(f"checkpoint vocabulary {ckpt.vocabulary} does not "
                          f"match config vocabulary {vocab.names}")
    cn, va = build_networks(cfg, len(vocab))
    for prefix, net in (("cn", cn), ("va", va)):
        for k, p in net.parameters().items():
            rec = ckpt.params.get(f"{prefix}.{k}")
            if rec is None:
                raise ConfigError(f"checkpoint is missing parameter "
                                  f"{prefix}.{k}")
            if rec.shape != p.data.shape:
                raise ConfigError(f"checkpoint parameter {prefix}.{k} has shape "
                                  f"{rec.shape}, expected {p.data.shape}")
            p.data[...] = rec.astype(p.data.dtype)
        for k, s in net.stats().items():
            mean = ckpt.params.get(f"{prefix}.stat.{k}.mean")
            var = ckpt.params.get(f"{prefix}.stat.{k}.var")
            if mean is None or var is None:
                raise ConfigError(f"checkpoint is missing statistics for "
                                  f"{prefix}.{k}")
            s.mean[...] = mean.astype(s.mean.dtype)
            s.var[...] = var.astype(s.var.dtype)
    return cn, va, cfg, counters
