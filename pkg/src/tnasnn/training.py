"""Losses, Adam, the learning-rate schedule and the N-network co-training loop."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import snn
from .errors import ConfigurationError, ContractError, TrainingDiverged
from .tensor import Tape, Tensor, backward, log_softmax, no_grad, precision

logger = logging.getLogger(__name__)

MODES = ("baseline", "tna", "kd", "kd_ce")
MATCH_TARGETS = ("per_timestep_sum", "summed_logits")


@dataclass
class TnaLossConfig:
    alpha_match: float = 1e-3
    mode: str = "tna"
    n_networks: int = 2
    match_target: str = "per_timestep_sum"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.match_target not in MATCH_TARGETS:
            raise ConfigurationError(f"match_target must be one of {MATCH_TARGETS}")
        if self.alpha_match < 0:
            raise ConfigurationError(f"alpha_match must be >= 0, got {self.alpha_match}")
        if self.n_networks < 1:
            raise ConfigurationError("n_networks must be >= 1")
        if self.mode == "baseline" and self.n_networks != 1:
            raise ConfigurationError("mode=baseline trains exactly one network (n_networks=1)")
        if self.mode in ("kd", "kd_ce") and self.n_networks != 1:
            raise ConfigurationError(f"mode={self.mode} trains a single student (n_networks=1)")


def _check_labels(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ContractError(f"labels must lie in [0, {num_classes}), got range "
                            f"[{labels.min()}, {labels.max()}]")
    return labels


def ce_loss(per_timestep_logits: list[Tensor], labels) -> Tensor:
    """Batch-mean softmax cross-entropy of the step-summed output potentials."""
    logits = snn.summed_logits(per_timestep_logits)
    n, c = logits.shape
    labels = _check_labels(labels, c)
    onehot = np.zeros((n, c), dtype=logits.dtype)
    onehot[np.arange(n), labels] = 1.0
    return (log_softmax(logits, axis=1) * Tensor(onehot)).sum() * (-1.0 / n)


def match_mse(a: list[Tensor], b: list[Tensor], target: str = "per_timestep_sum") -> Tensor:
    if len(a) != len(b):
        raise ContractError(f"networks emitted {len(a)} and {len(b)} timesteps")
    if target == "summed_logits":
        diff = snn.summed_logits(a) - snn.summed_logits(b)
        return (diff * diff).mean()
    total = None
    for xa, xb in zip(a, b):
        if xa.shape != xb.shape:
            raise ContractError(f"logit shapes differ: {xa.shape} vs {xb.shape}")
        diff = xa - xb
        term = (diff * diff).mean()
        total = term if total is None else total + term
    return total


def tna_loss(outputs: list[list[Tensor]], labels, cfg: TnaLossConfig) -> tuple[Tensor, dict]:
    """Sum of per-network cross-entropies plus the weighted logit-matching term.

    ``outputs[0]`` is the base network; every further network is matched
    against the base. Returns the total and a dict with the individual
    ``ce`` values, the raw ``match`` value and ``match_weighted``.
    """
    if cfg.mode == "tna" and len(outputs) < 2:
        raise ConfigurationError("mode=tna needs at least two networks")
    if len(outputs) != cfg.n_networks:
        raise ConfigurationError(f"expected {cfg.n_networks} networks, got {len(outputs)}")
    ces = [ce_loss(out, labels) for out in outputs]
    total = ces[0]
    for ce in ces[1:]:
        total = total + ce
    parts = {"ce": [c.item() for c in ces], "match": 0.0, "match_weighted": 0.0}
    if len(outputs) > 1:
        match = None
        for aux in outputs[1:]:
            term = match_mse(outputs[0], aux, cfg.match_target)
            match = term if match is None else match + term
        total = total + match * cfg.alpha_match
        parts["match"] = match.item()
        parts["match_weighted"] = cfg.alpha_match * match.item()
    return total, parts


def kd_loss(student_outputs: list[Tensor], teacher_outputs: list[Tensor], labels,
            cfg: TnaLossConfig) -> tuple[Tensor, dict]:
    """Distillation against a frozen teacher: pure matching, or matching plus CE."""
    if cfg.mode not in ("kd", "kd_ce"):
        raise ConfigurationError(f"kd_loss needs mode kd or kd_ce, got {cfg.mode!r}")
    if any(t.requires_grad for t in teacher_outputs):
        raise ContractError("teacher outputs must not carry gradient")
    match = match_mse(student_outputs, teacher_outputs, cfg.match_target)
    total = match * cfg.alpha_match
    parts = {"ce": [], "match": match.item(), "match_weighted": cfg.alpha_match * match.item()}
    if cfg.mode == "kd_ce":
        ce = ce_loss(student_outputs, labels)
        total = ce + total
        parts["ce"] = [ce.item()]
    else:
        # the label-free objective still reports the student's CE for monitoring
        with no_grad():
            parts["ce"] = [ce_loss(student_outputs, labels).item()]
    return total, parts


@dataclass
class OptimizerState:
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)
    step_count: int = 0
    lr: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    epsilon: float = 1e-8


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: OptimizerState) -> OptimizerState:
    """One bias-corrected Adam update, applied in place to ``params``.

    ``grads`` maps parameter names to gradient arrays; a missing entry counts
    as a zero gradient.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient for parameter {name!r} at step {state.step_count + 1}")
    b1, b2 = state.betas
    state.step_count += 1
    k = state.step_count
    corr1 = 1.0 - b1 ** k
    corr2 = 1.0 - b2 ** k
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        elif g.shape != p.shape:
            raise ContractError(f"gradient shape {g.shape} does not match parameter {name} {p.shape}")
        m = state.first_moment.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        else:
            v = state.second_moment[name]
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.first_moment[name] = m
        state.second_moment[name] = v
        step = state.lr * (m / corr1) / (np.sqrt(v / corr2) + state.epsilon)
        p.data = (p.data - step).astype(p.dtype, copy=False)
    return state


def lr_schedule(epoch: int, initial_lr: float, gamma: float) -> float:
    if epoch < 0:
        raise ContractError(f"epoch must be >= 0, got {epoch}")
    return initial_lr * gamma ** epoch


# ---------------------------------------------------------------------------
# co-training loop


def metrics_columns(n_networks: int) -> list[str]:
    twins = ["ce_twin"] + [f"ce_twin{k}" for k in range(2, n_networks)]
    return (["epoch", "lr", "loss_total", "ce_base"] + twins +
            ["match_loss", "acc_train_base", "acc_val_base", "acc_val_twin",
             "ternary_active", "wall_seconds"])


def _fmt(value) -> str:
    if value is None or value == "":
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class TrainResult:
    spec: snn.NetworkSpec
    networks: list[dict[str, Tensor]]
    compression: object | None
    metrics: list[dict]
    out_dir: Path | None
    best_acc_val: float


def evaluate(spec: snn.NetworkSpec, params, handle, batch_size: int = 256,
             trace: snn.ForwardTrace | None = None) -> tuple[float, np.ndarray]:
    """Top-1 accuracy and predictions of one network on a dataset split (no dropout)."""
    from .data import iterate_batches

    preds = []
    with no_grad():
        for x, _ in iterate_batches(handle, batch_size):
            logits = snn.summed_logits(snn.forward_timesteps(spec, params, x, trace=trace))
            preds.append(np.argmax(logits.data, axis=1))
    preds = np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)
    acc = float(np.mean(preds == handle.labels)) if len(preds) else 0.0
    return acc, preds


def _inference_params(params, compression):
    if compression is None or not compression.active:
        return params
    return compression.deployed_params(params)


def train(cfg, data, val=None, out_dir=None) -> TrainResult:
    """Train the base network (and its co-trained twins) described by ``cfg``.

    ``data`` is the training split; when ``val`` is omitted a seeded
    ``cfg.val_fraction`` carve-out of ``data`` serves as validation. With an
    ``out_dir`` the loop writes ``metrics.csv`` (one row per finished epoch),
    ``final.ckpt`` after every epoch and ``best.ckpt`` on each new best base
    validation accuracy. Only the base network is exported.
    """
    from . import checkpoint as ckpt
    from . import ternary
    from .data import AugmentConfig, iterate_batches, split_validation

    cfg.validate()
    with precision(np.float32):
        if val is None:
            data, val = split_validation(data, cfg.val_fraction, cfg.seed_data)
        spec = snn.parse_architecture(
            cfg.arch, data.sample_shape, data.class_count, timesteps=cfg.timesteps,
            dropout_p=cfg.dropout_p,
            lif=snn.LifParams(cfg.lif_alpha, cfg.lif_theta, cfg.surrogate_width))
        loss_cfg = TnaLossConfig(cfg.resolved_alpha(), cfg.mode, cfg.resolved_n_networks(), cfg.match_target)
        n_net = loss_cfg.n_networks
        seeds = [cfg.seed_base] + [cfg.seed_twin + k for k in range(n_net - 1)]
        networks = [snn.kaiming_init(spec, s) for s in seeds]
        optims = [OptimizerState(lr=cfg.initial_lr) for _ in networks]

        teacher = None
        if cfg.mode in ("kd", "kd_ce"):
            if not cfg.teacher_checkpoint or not Path(cfg.teacher_checkpoint).is_file():
                raise ConfigurationError(f"mode={cfg.mode} needs an existing teacher_checkpoint, "
                                         f"got {cfg.teacher_checkpoint!r}")
            t_spec, teacher = ckpt.load_network(cfg.teacher_checkpoint)
            if t_spec.param_shapes() != spec.param_shapes():
                raise ConfigurationError("teacher checkpoint architecture differs from the student")
            for p in teacher.values():
                p.requires_grad = False

        policy = ternary.TernaryPolicy(cfg.ternary_delta, cfg.ternary_start_epoch,
                                       mode=cfg.ternary_mode) if cfg.ternary else None
        compression = None

        aug = AugmentConfig.for_dataset(data) if cfg.augment else None
        data_rng = np.random.default_rng(cfg.seed_data)
        # dropout streams follow each network's init seed: equal seeds give a truly degenerate twin
        drop_rngs = [np.random.default_rng([cfg.seed_data, 7919, s]) for s in seeds]

        out = Path(out_dir) if out_dir is not None else None
        columns = metrics_columns(max(n_net, 2))
        metrics: list[dict] = []
        best = -1.0
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            with open(out / "metrics.csv", "w", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow(columns)
            timing = open(out / "timing.csv", "w", newline="")
            timing.write("epoch,wall_seconds\n")
        try:
            for epoch in range(cfg.epochs):
                started = time.perf_counter()
                lr = lr_schedule(epoch, cfg.initial_lr, cfg.gamma)
                for st in optims:
                    st.lr = lr
                if policy is not None and compression is None and epoch >= policy.start_epoch:
                    if n_net > 1:
                        compression = ternary.tna_ternary_handoff(spec, networks[0], networks[1:], policy,
                                                                  cfg.mode, epoch)
                    else:
                        compression = ternary.activate_compression(spec, networks[0], policy, epoch)
                    logger.info("epoch %d: base network compressed (%s)", epoch + 1, policy.mode)

                sums = {"loss": 0.0, "ce": [0.0] * max(n_net, 1), "match": 0.0, "correct": 0, "seen": 0}
                for x, y in iterate_batches(data, cfg.batch_size, rng=data_rng, augment=aug):
                    with Tape():
                        live = [networks[0] if compression is None else compression.forward_params(networks[0])]
                        live += networks[1:]
                        outputs = [snn.forward_timesteps(spec, p, x, rng=r, train=True)
                                   for p, r in zip(live, drop_rngs)]
                        if teacher is not None:
                            with no_grad():
                                t_out = snn.forward_timesteps(spec, teacher, x)
                            total, parts = kd_loss(outputs[0], t_out, y, loss_cfg)
                        else:
                            total, parts = tna_loss(outputs, y, loss_cfg)
                        loss_value = total.item()
                        if not math.isfinite(loss_value):
                            raise TrainingDiverged(f"loss became {loss_value} in epoch {epoch + 1}")
                        grads = backward(total)
                    for params, st in zip(networks, optims):
                        adam_step(params, {k: grads[p].data for k, p in params.items() if p in grads}, st)
                    if compression is not None:
                        compression.refresh()
                    n = len(y)
                    sums["loss"] += loss_value * n
                    for k, c in enumerate(parts["ce"]):
                        sums["ce"][k] += c * n
                    sums["match"] += parts["match"] * n
                    pred = np.argmax(snn.summed_logits(outputs[0]).data, axis=1)
                    sums["correct"] += int(np.sum(pred == y))
                    sums["seen"] += n

                seen = max(sums["seen"], 1)
                acc_val = evaluate(spec, _inference_params(networks[0], compression), val, cfg.batch_size)[0]
                acc_twin = evaluate(spec, networks[1], val, cfg.batch_size)[0] if n_net > 1 else None
                elapsed = time.perf_counter() - started
                row = {
                    "epoch": epoch + 1,
                    "lr": lr,
                    "loss_total": sums["loss"] / seen,
                    "ce_base": sums["ce"][0] / seen,
                    "ce_twin": sums["ce"][1] / seen if n_net > 1 else None,
                    "match_loss": sums["match"] / seen if (n_net > 1 or teacher is not None) else None,
                    "acc_train_base": sums["correct"] / seen,
                    "acc_val_base": acc_val,
                    "acc_val_twin": acc_twin,
                    "ternary_active": int(compression is not None and compression.active),
                    "wall_seconds": elapsed if cfg.record_wall_time else None,
                }
                for k in range(2, n_net):
                    row[f"ce_twin{k}"] = sums["ce"][k] / seen
                metrics.append(row)
                logger.info("epoch %d lr %.5g loss %.4f acc_train %.4f acc_val %.4f", epoch + 1, lr,
                            row["loss_total"], row["acc_train_base"], acc_val)
                if out is not None:
                    with open(out / "metrics.csv", "a", newline="") as fh:
                        csv.writer(fh, lineterminator="\n").writerow([_fmt(row.get(c)) for c in columns])
                    timing.write(f"{epoch + 1},{elapsed!r}\n")
                    exported = ckpt.export_network(spec, networks[0], compression, cfg, epoch + 1)
                    ckpt.save_checkpoint(exported, out / "final.ckpt")
                    if acc_val > best:
                        ckpt.save_checkpoint(exported, out / "best.ckpt")
                best = max(best, acc_val)
        finally:
            if out is not None:
                timing.close()
    return TrainResult(spec, networks, compression, metrics, out, best)
