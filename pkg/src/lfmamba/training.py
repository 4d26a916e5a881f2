"""Optimization recipe: L1 loss, bias-corrected Adam, step-decayed learning
rate, light-field-consistent augmentation, co-registered patch extraction.

Augmentations must act jointly on spatial and angular axes: a horizontal
flip reverses both the pixel columns and the view columns, a rotation
rotates every view and the view grid itself.  Spatial-only transforms
would corrupt the disparity structure the scans rely on.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np

from . import ops
from .autograd import GradientTable, Parameter, Tensor, backward, grad_table
from .data import SceneRecord, luma_views
from .layouts import Layout, LightFieldTensor
from .model import L2FMamba, save_checkpoint


@dataclass
class TrainConfig:
    lr0: float = 2.5e-4
    epochs: int = 10
    step_epochs: int = 30     # halving interval of the scheduler
    gamma: float = 0.5
    batch_size: int = 1
    patch: int = 64           # HR patch side
    stride: int = 32          # HR patch stride
    seed: int = 0
    max_steps: int = 0        # 0 = no cap
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr0 < 0 or not (0 < self.gamma <= 1):
            raise ValueError("need lr0 >= 0 and 0 < gamma <= 1")
        if min(self.epochs, self.step_epochs, self.batch_size, self.patch, self.stride) < 1:
            raise ValueError("epochs, step_epochs, batch_size, patch, stride must be >= 1")


def parse_kv_config(path, cls):
    """Plain ``key = value`` text file -> config dataclass."""
    fields = {f: t for f, t in cls.__dataclass_fields__.items()}
    kwargs = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in fields:
                raise ValueError(f"{path}:{lineno}: unknown key {key!r} for {cls.__name__}")
            typ = type(getattr(cls, key, fields[key].default))
            kwargs[key] = typ(float(val)) if typ in (int, float) else typ(val)
    return cls(**kwargs)


def l1_loss(pred: Tensor, target) -> Tensor:
    target = target.data if isinstance(target, Tensor) else np.asarray(target)
    if pred.data.shape != tuple(target.shape):
        raise ValueError(f"extent mismatch: {pred.data.shape} vs {target.shape}")
    return ops.mean_all(ops.absolute(ops.sub(pred, Tensor(target))))


def steplr(epoch: int, cfg: TrainConfig) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return cfg.lr0 * cfg.gamma ** (epoch // cfg.step_epochs)


class AdamState:
    def __init__(self, params: dict[str, Parameter], beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.step = 0
        self.beta1, self.beta2, self.eps = beta1, beta2, eps


def adam_step(params: dict[str, Parameter], grads: GradientTable, state: AdamState, lr: float) -> None:
    """Standard bias-corrected Adam update, in place."""
    state.step += 1
    b1, b2, eps = state.beta1, state.beta2, state.eps
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape mismatch for {name}")
        if not np.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient in {name}")
        m = state.m[name]
        v = state.v[name]
        m += (1.0 - b1) * (g - m)
        v += (1.0 - b2) * (g * g - v)
        p.data = p.data - (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.data.dtype)


AUGMENT_OPS = ("hflip", "vflip", "rot90")


def augment(lf: LightFieldTensor, op: str) -> LightFieldTensor:
    """Light-field-consistent flip/rotation (joint spatial-angular)."""
    if lf.layout is not Layout.SAI_STACK:
        raise ValueError("augment expects the SAI stack layout")
    grid = lf.data.reshape(lf.u, lf.v, lf.c, lf.h, lf.w)
    if op == "hflip":
        grid = grid[:, ::-1, :, :, ::-1]
        u, v, h, w = lf.u, lf.v, lf.h, lf.w
    elif op == "vflip":
        grid = grid[::-1, :, :, ::-1, :]
        u, v, h, w = lf.u, lf.v, lf.h, lf.w
    elif op == "rot90":
        grid = np.rot90(np.rot90(grid, k=1, axes=(3, 4)), k=1, axes=(0, 1))
        u, v, h, w = lf.v, lf.u, lf.w, lf.h
    else:
        raise ValueError(f"unknown augmentation {op!r}")
    data = np.ascontiguousarray(grid.reshape(u * v, lf.c, h, w))
    return LightFieldTensor(u, v, lf.c, h, w, Layout.SAI_STACK, data)


def extract_patches(scene: SceneRecord, hr_side: int, stride: int) -> list[tuple[LightFieldTensor, LightFieldTensor]]:
    """Co-registered (LR, HR) patch pairs across all views.

    HR positions advance by ``stride``; the matching LR window sits at the
    same view positions divided by the scale, so both must be multiples of
    the scale.
    """
    if scene.views_lr is None or scene.scale is None:
        raise ValueError("scene has no LR views; run make_lr first")
    a = scene.scale
    if hr_side % a or stride % a:
        raise ValueError(f"hr_side and stride must be multiples of the scale {a}")
    hr = scene.views_hr
    lr = scene.views_lr
    hr_luma = luma_views(hr)
    if hr_side > hr.h or hr_side > hr.w:
        raise ValueError(f"patch {hr_side} larger than image {hr.h}x{hr.w}")
    pairs = []
    for y0 in range(0, hr.h - hr_side + 1, stride):
        for x0 in range(0, hr.w - hr_side + 1, stride):
            hp = hr_luma[:, :, y0 : y0 + hr_side, x0 : x0 + hr_side]
            lp = lr.data[:, :, y0 // a : (y0 + hr_side) // a, x0 // a : (x0 + hr_side) // a]
            pairs.append(
                (
                    LightFieldTensor(lr.u, lr.v, 1, hr_side // a, hr_side // a, Layout.SAI_STACK, np.ascontiguousarray(lp)),
                    LightFieldTensor(hr.u, hr.v, 1, hr_side, hr_side, Layout.SAI_STACK, np.ascontiguousarray(hp)),
                )
            )
    return pairs


def train_loop(model: L2FMamba, scenes: list[SceneRecord], cfg: TrainConfig, out_dir=None):
    """Deterministic toy-scale training; returns (model, trace rows).

    Trace rows are (step, epoch, lr, loss); the best-loss checkpoint is
    written to ``out_dir``/best.ckpt when an output directory is given.
    """
    rng = np.random.default_rng(cfg.seed)
    params = dict(model.named_parameters())
    state = AdamState(params, cfg.beta1, cfg.beta2, cfg.eps)
    pairs = []
    for scene in scenes:
        pairs.extend(extract_patches(scene, cfg.patch, cfg.stride))
    if not pairs:
        raise ValueError("no training patches")
    trace = []
    best = np.inf
    step = 0
    done = False
    for epoch in range(cfg.epochs):
        lr = steplr(epoch, cfg)
        order = rng.permutation(len(pairs))
        for b0 in range(0, len(order), cfg.batch_size):
            batch = order[b0 : b0 + cfg.batch_size]
            batch_loss = 0.0
            grads: dict[str, np.ndarray] = {}
            for idx in batch:
                lr_patch, hr_patch = pairs[idx]
                # one light-field-consistent augmentation with prob 1/2
                if rng.random() < 0.5:
                    op = AUGMENT_OPS[int(rng.integers(0, len(AUGMENT_OPS)))]
                    lr_patch = augment(lr_patch, op)
                    hr_patch = augment(hr_patch, op)
                model.zero_grad()
                pred = model.forward_tensor(lr_patch.data, lr_patch.h, lr_patch.w)
                loss = l1_loss(pred, hr_patch.data)
                if not np.isfinite(loss.data):
                    raise FloatingPointError(f"non-finite loss at step {step}")
                backward(loss)
                batch_loss += float(loss.data)
                for name, g in grad_table(params.items()).items():
                    grads[name] = grads.get(name, 0.0) + g
            n = len(batch)
            grads = {k: g / n for k, g in grads.items()}
            batch_loss /= n
            adam_step(params, grads, state, lr)
            trace.append((step, epoch, lr, batch_loss))
            if batch_loss < best:
                best = batch_loss
                if out_dir is not None:
                    save_checkpoint(model, os.path.join(out_dir, "best.ckpt"))
            step += 1
            if cfg.max_steps and step >= cfg.max_steps:
                done = True
                break
        if done:
            break
    if out_dir is not None:
        write_trace(os.path.join(out_dir, "loss.csv"), trace)
    return model, trace


def write_trace(path, trace) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["step", "epoch", "lr", "loss"])
        for row in trace:
            wr.writerow([row[0], row[1], f"{row[2]:.10g}", f"{row[3]:.10g}"])
