"""Shared helpers for the test suite."""

from __future__ import annotations

import numpy as np
import torch

from lipsynth.toyface import ToySpeakerSpec


def tiny_spec(identity_id: int = 0, hue: float = 0.08, gain: float = 0.9,
              rest: float = 0.0, width: float = 0.62) -> ToySpeakerSpec:
    return ToySpeakerSpec(
        identity_id=identity_id,
        face_hue=hue,
        face_width_frac=width,
        mouth_gain=gain,
        mouth_rest_open=rest,
    )


def random_frames(rng: np.random.Generator, t: int, size: int) -> np.ndarray:
    return rng.random((t, size, size, 3), dtype=np.float32)


def brute_force_umask(size: int) -> np.ndarray:
    """Independent loop-based oracle for the lower-face mask."""
    values = np.zeros((size, size), dtype=np.uint8)
    for y in range(size):
        for x in range(size):
            inside = ((x - size / 2) / (0.42 * size)) ** 2 \
                + ((y - size / 2) / (0.48 * size)) ** 2 <= 1.0
            if inside and y > size / 2:
                values[y, x] = 1
    return values


def dark_pixels(frame: np.ndarray, threshold: float = 0.3) -> np.ndarray:
    """Boolean map of pixels darker than ``threshold`` in channel mean."""
    return np.asarray(frame).mean(axis=2) < threshold


# -- independent metric oracles (explicit per-window/per-pixel loops) -----

def oracle_psnr(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    total = 0.0
    for x, y in zip(a, b):
        total += (x - y) ** 2
    mse = total / len(a)
    if mse < 1e-10:
        return 100.0
    return min(10.0 * np.log10(1.0 / mse), 100.0)


def oracle_ssim(a: np.ndarray, b: np.ndarray) -> float:
    def gray(img):
        img = np.asarray(img, dtype=np.float64)
        return img.mean(axis=2) if img.ndim == 3 else img

    x, y = gray(a), gray(b)
    g = np.array([np.exp(-((i - 5) ** 2) / (2 * 1.5 ** 2)) for i in range(11)])
    w = np.outer(g, g)
    w /= w.sum()
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    h, wd = x.shape
    values = []
    for i in range(h - 10):
        for j in range(wd - 10):
            px = x[i:i + 11, j:j + 11]
            py = y[i:i + 11, j:j + 11]
            mx = float((w * px).sum())
            my = float((w * py).sum())
            vx = max(float((w * px * px).sum()) - mx * mx, 0.0)
            vy = max(float((w * py * py).sum()) - my * my, 0.0)
            cxy = float((w * px * py).sum()) - mx * my
            values.append(((2 * mx * my + c1) * (2 * cxy + c2))
                          / ((mx * mx + my * my + c1) * (vx + vy + c2)))
    return float(np.mean(values))


def oracle_lmd(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 2)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 2)
    dists = []
    for (x1, y1), (x2, y2) in zip(a, b):
        dists.append(((x1 - x2) ** 2 + (y1 - y2) ** 2) ** 0.5)
    return float(np.mean(dists))


# -- finite-difference gradient checking (float64 models only) ------------

def relative_error(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-12)


def numeric_grad(loss_fn, param: torch.Tensor, index: int,
                 eps: float = 1e-6) -> float:
    """Central difference of ``loss_fn`` w.r.t. one parameter coordinate."""
    flat = param.data.view(-1)
    original = flat[index].item()
    try:
        flat[index] = original + eps
        with torch.no_grad():
            upper = float(loss_fn())
        flat[index] = original - eps
        with torch.no_grad():
            lower = float(loss_fn())
    finally:
        flat[index] = original
    return (upper - lower) / (2.0 * eps)


def check_gradients(loss_fn, named_params: dict[str, torch.Tensor],
                    coords_per_param: int = 2, eps: float = 1e-6,
                    tolerance: float = 1e-4, seed: int = 0) -> list[tuple[str, float]]:
    """Compare autograd gradients with central differences.

    Returns (name, relative_error) for every checked coordinate and asserts
    each error is under ``tolerance``.  Models must be float64: float32
    cancellation would swamp the comparison.
    """
    for name, param in named_params.items():
        assert param.dtype == torch.float64, f"{name} is not float64"
        if param.grad is not None:
            param.grad = None
    loss = loss_fn()
    loss.backward()
    rng = np.random.default_rng(seed)
    report = []
    for name, param in named_params.items():
        assert param.grad is not None, f"no gradient reached {name}"
        count = min(coords_per_param, param.numel())
        for index in rng.choice(param.numel(), size=count, replace=False):
            analytic = param.grad.view(-1)[int(index)].item()
            numeric = numeric_grad(loss_fn, param, int(index), eps=eps)
            error = relative_error(analytic, numeric)
            report.append((f"{name}[{int(index)}]", error))
            assert error < tolerance, (
                f"{name}[{int(index)}]: analytic {analytic:.8e} vs "
                f"numeric {numeric:.8e} (rel err {error:.2e})")
    return report
