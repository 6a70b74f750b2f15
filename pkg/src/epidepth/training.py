"""Losses, Adam, and the deterministic training loop.

Training is intentionally free of hidden randomness: samples are visited in a
fixed cyclic order, the only rng is the parameter-init seed, and two runs with
the same config produce bit-identical parameters.  A non-finite loss or
gradient aborts the run with the last finite parameter state written out, so
a diverged job never clobbers a usable checkpoint.
"""

import csv
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Variable
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ComputationError
from .network import (build_attention_grids, checkpoint_buffers,
                      depth_net_forward, init_parameters, trainable_parameters)


# ------------------------------------------------------------------ losses ---

def _masked_mean(term, mask):
    count = int(mask.sum())
    if count == 0:
        raise ValueError("loss mask selects no pixels")
    weighted = ad.mul(term, Variable(mask.astype(np.float64)))
    return ad.mul(ad.sum_all(weighted), 1.0 / count)


def _as_mask(mask, shape):
    if mask is None:
        return np.ones(shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != tuple(shape):
        raise ValueError("mask shape must match prediction shape")
    return mask


def l1_loss(pred, target, mask=None):
    """Mean absolute depth error over the mask."""
    target = np.asarray(target, dtype=np.float64)
    mask = _as_mask(mask, pred.shape)
    return _masked_mean(ad.absolute(ad.sub(pred, Variable(target))), mask)


def confidence_loss(pred, confidence, target, mask=None):
    """:math:`|d - d^*| / s + log s` averaged over the mask.

    With unit confidence this equals the plain L1 loss; smaller values of
    ``confidence`` sharpen the penalty, so the optimum is the expected error.
    """
    target = np.asarray(target, dtype=np.float64)
    mask = _as_mask(mask, pred.shape)
    err = ad.absolute(ad.sub(pred, Variable(target)))
    return _masked_mean(ad.add(ad.div(err, confidence), ad.log(confidence)), mask)


# -------------------------------------------------------------------- adam ---

@dataclass
class AdamState:
    first: dict = field(default_factory=dict)
    second: dict = field(default_factory=dict)
    step: int = 0


def global_grad_norm(variables):
    total = 0.0
    for var in variables:
        if var.grad is not None:
            total += float(np.sum(var.grad * var.grad))
    return float(np.sqrt(total))


def clip_gradients(variables, max_norm):
    """Scale all gradients so their joint norm is at most ``max_norm``."""
    norm = global_grad_norm(variables)
    if norm > max_norm > 0.0:
        scale = max_norm / norm
        for var in variables:
            if var.grad is not None:
                var.grad *= scale
    return norm


def adam_step(named_params, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update; parameters with no gradient are left
    untouched (their moments do not advance either)."""
    state.step += 1
    t = state.step
    for name, var in named_params.items():
        if var.grad is None:
            continue
        g = var.grad
        if not np.all(np.isfinite(g)):
            raise ComputationError(f"non-finite gradient for {name} at step {t}")
        m = state.first.setdefault(name, np.zeros_like(var.data))
        v = state.second.setdefault(name, np.zeros_like(var.data))
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        var.data -= lr * m_hat / (np.sqrt(v_hat) + eps)


# ----------------------------------------------------------------- samples ---

@dataclass
class TrainSample:
    image: np.ndarray
    ref_images: list
    poses: list                # source frame of this sample -> each reference
    intrinsics: object
    gt_depth: np.ndarray
    mask: np.ndarray = None


def samples_from_scene(scene, source_views=(0,)):
    """One sample per requested source view, referencing all other views."""
    samples = []
    for s in source_views:
        inv = scene.poses[s].inverse()
        refs, poses = [], []
        for u in range(len(scene.images)):
            if u == s:
                continue
            refs.append(scene.images[u])
            poses.append(scene.poses[u].compose(inv))
        samples.append(TrainSample(scene.images[s], refs, poses,
                                   scene.intrinsics, scene.depths[s]))
    return samples


# ------------------------------------------------------------------- train ---

@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    steps: int = 100
    decay_steps: tuple = ()    # lr divides by 10 entering each listed step
    grad_clip: float = 0.0     # 0 disables clipping
    loss: str = "l1"           # "l1" or "confidence"
    seed: int = 0

    def __post_init__(self):
        if self.loss not in ("l1", "confidence"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.steps < 1:
            raise ValueError("steps must be positive")
        object.__setattr__(self, "decay_steps", tuple(self.decay_steps))


@dataclass
class TrainResult:
    params: dict
    history: list
    state: AdamState


def _abort(message, snapshot, checkpoint_path):
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, snapshot)
        message += f"; last finite parameters saved to {checkpoint_path}"
    raise ComputationError(message)


def train(samples, net_config, train_config, params=None, checkpoint_path=None):
    """Cyclic full-batch training over ``samples``; returns TrainResult."""
    if not samples:
        raise ValueError("no training samples")
    if train_config.loss == "confidence" and not net_config.confidence_head:
        raise ValueError("confidence loss needs a confidence head")
    if params is None:
        params = init_parameters(net_config, np.random.default_rng(train_config.seed))
    named = trainable_parameters(params)
    grids = [build_attention_grids(net_config, s.intrinsics, s.poses)
             if net_config.attention_layers else None for s in samples]

    state = AdamState()
    history = []
    snapshot = {k: v.data.copy() for k, v in checkpoint_buffers(params).items()}
    for step in range(1, train_config.steps + 1):
        lr = train_config.learning_rate / (
            10.0 ** sum(1 for d in train_config.decay_steps if step >= d))
        idx = (step - 1) % len(samples)
        sample = samples[idx]
        for var in named.values():
            var.grad = None
        with Tape() as tape:
            pred = depth_net_forward(sample.image, sample.ref_images,
                                     sample.intrinsics, sample.poses,
                                     net_config, params, grids=grids[idx])
            if train_config.loss == "confidence":
                loss = confidence_loss(pred.depth_full, pred.confidence,
                                       sample.gt_depth, sample.mask)
            else:
                loss = l1_loss(pred.depth_full, sample.gt_depth, sample.mask)
            if not np.isfinite(loss.data):
                _abort(f"non-finite loss at step {step}", snapshot, checkpoint_path)
            tape.backward(loss)
        grad_norm = global_grad_norm(named.values())
        if not np.isfinite(grad_norm):
            _abort(f"non-finite gradients at step {step}", snapshot, checkpoint_path)
        if train_config.grad_clip > 0.0:
            clip_gradients(named.values(), train_config.grad_clip)
        adam_step(named, state, lr)
        for name, var in named.items():
            snapshot[name] = var.data.copy()
        history.append({"step": step, "loss": float(loss.data), "lr": lr,
                        "grad_norm": grad_norm})
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, checkpoint_buffers(params))
    return TrainResult(params, history, state)


def save_history_csv(path, history):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss", "lr", "grad_norm"])
        for row in history:
            writer.writerow([row["step"], f"{row['loss']:.17g}",
                             f"{row['lr']:.17g}", f"{row['grad_norm']:.17g}"])


def load_parameters_into(params, path):
    """Copy a checkpoint into an existing parameter dict, name by name."""
    loaded = load_checkpoint(path)
    buffers = checkpoint_buffers(params)
    missing = sorted(set(buffers) - set(loaded))
    surplus = sorted(set(loaded) - set(buffers))
    if missing or surplus:
        raise ValueError(f"checkpoint mismatch: missing {missing}, surplus {surplus}")
    for name, var in buffers.items():
        if loaded[name].shape != var.data.shape:
            raise ValueError(f"shape mismatch for {name}: "
                             f"{loaded[name].shape} vs {var.data.shape}")
        var.data[...] = loaded[name]


def predict_scene_depths(scene, net_config, params):
    """Run the network once per view (each view as source) without a tape."""
    results = []
    for sample in samples_from_scene(scene, range(len(scene.images))):
        pred = depth_net_forward(sample.image, sample.ref_images,
                                 sample.intrinsics, sample.poses,
                                 net_config, params)
        conf = pred.confidence.data if pred.confidence is not None else None
        results.append((pred.depth_full.data, conf))
    return results
