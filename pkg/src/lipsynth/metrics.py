"""Image-, landmark-, and sync-level evaluation metrics.

Conventions are fixed so that ground truth scores are exact: comparing a
frame with itself yields SSIM 1.0, PSNR 100.0 (the cap), and LMD 0.0.

PSNR uses peak 1.0 and is capped at 100 dB (MSE below 1e-10).  SSIM follows
the classic single-scale recipe: channel-mean grayscale, 11x11 Gaussian
window with sigma 1.5, C1 = 0.01^2, C2 = 0.03^2, valid windows only.  LMD is
the mean Euclidean distance between corresponding landmarks in absolute
pixels.  Identity distance is a cosine distance in the feature space of a
small frozen random-convolution embedder; it is a stand-in for a trained
face recognizer, so only relative comparisons are meaningful.

Mouth statistics are estimated from rendered pixels: the largest connected
dark component inside the lower-face mask is taken as the mouth, its
vertical pixel extent (max row minus min row) normalized by the maximal
mouth height 0.24*S.  A fully closed toy mouth renders as a one-pixel line
and therefore scores exactly 0.
"""

from __future__ import annotations

import functools

import numpy as np
import scipy.ndimage
import scipy.signal
import scipy.stats
import torch
from torch import nn

from .errors import ValidationError
from .toyface import MOUTH_MAX_SEMI_Y, UMask, build_umask

PSNR_CAP_DB = 100.0
PSNR_MSE_FLOOR = 1e-10
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
MOUTH_DARK_THRESHOLD = 0.3


def _check_image_pair(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValidationError(f"image shapes differ: {a.shape} vs {b.shape}")
    for name, arr in (("first", a), ("second", b)):
        if not np.all(np.isfinite(arr)):
            raise ValidationError(f"{name} image contains non-finite values")
        if arr.min() < -1e-6 or arr.max() > 1.0 + 1e-6:
            raise ValidationError(f"{name} image values must lie in [0, 1]")
    return a, b


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB against peak 1.0, capped at 100."""
    a, b = _check_image_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse < PSNR_MSE_FLOOR:
        return PSNR_CAP_DB
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP_DB)


@functools.lru_cache(maxsize=2)
def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    offsets = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(offsets ** 2) / (2.0 * sigma ** 2))
    kernel = np.outer(g, g)
    return kernel / kernel.sum()


def _to_gray(img: np.ndarray) -> np.ndarray:
    if img.ndim == 3:
        return img.mean(axis=2)
    if img.ndim == 2:
        return img
    raise ValidationError(f"expected [H, W] or [H, W, 3] image, got shape {img.shape}")


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean structural similarity over valid 11x11 Gaussian windows."""
    a, b = _check_image_pair(a, b)
    x, y = _to_gray(a), _to_gray(b)
    if min(x.shape) < SSIM_WINDOW:
        raise ValidationError(
            f"image {x.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    kernel = _gaussian_window()

    def smooth(img):
        return scipy.signal.convolve2d(img, kernel, mode="valid")

    mu_x = smooth(x)
    mu_y = smooth(y)
    var_x = np.maximum(smooth(x * x) - mu_x ** 2, 0.0)
    var_y = np.maximum(smooth(y * y) - mu_y ** 2, 0.0)
    cov = smooth(x * y) - mu_x * mu_y
    num = (2.0 * mu_x * mu_y + SSIM_C1) * (2.0 * cov + SSIM_C2)
    den = (mu_x ** 2 + mu_y ** 2 + SSIM_C1) * (var_x + var_y + SSIM_C2)
    return float(np.mean(num / den))


def lmd(predicted: np.ndarray, reference: np.ndarray) -> float:
    """Mean Euclidean landmark distance in absolute pixels.

    Accepts [K, 2] or [T, K, 2]; the landmark count and leading shape must
    match between the two arguments.
    """
    predicted = np.asarray(predicted, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if predicted.shape != reference.shape:
        raise ValidationError(
            f"landmark shapes differ: {predicted.shape} vs {reference.shape}")
    if predicted.ndim not in (2, 3) or predicted.shape[-1] != 2:
        raise ValidationError(
            f"landmarks must be [K, 2] or [T, K, 2], got {predicted.shape}")
    return float(np.mean(np.linalg.norm(predicted - reference, axis=-1)))


# -- mouth statistics ----------------------------------------------------

def _mouth_component(frame: np.ndarray, mask: UMask) -> np.ndarray | None:
    frame = np.asarray(frame)
    if frame.ndim != 3 or frame.shape[:2] != (mask.size, mask.size):
        raise ValidationError(
            f"frame shape {frame.shape} does not match mask size {mask.size}")
    dark = (frame.mean(axis=2) < MOUTH_DARK_THRESHOLD) & mask.values.astype(bool)
    if not dark.any():
        return None
    labels, count = scipy.ndimage.label(dark)
    sizes = scipy.ndimage.sum_labels(dark, labels, index=np.arange(1, count + 1))
    return labels == (int(np.argmax(sizes)) + 1)


def mouth_opening(frame: np.ndarray, mask: UMask | None = None) -> float:
    """Estimated mouth opening in [0, 1] from rendered pixels.

    Vertical extent (bottom row minus top row) of the largest dark component
    inside the mask, normalized by the maximal mouth height 0.24*S.  No dark
    pixels means no detectable mouth and scores 0.
    """
    frame = np.asarray(frame)
    size = frame.shape[0]
    mask = mask or build_umask(size)
    component = _mouth_component(frame, mask)
    if component is None:
        return 0.0
    rows = np.nonzero(component)[0]
    extent = float(rows.max() - rows.min())
    return float(np.clip(extent / (2.0 * MOUTH_MAX_SEMI_Y * size), 0.0, 1.0))


def estimate_mouth_landmarks(frame: np.ndarray, mask: UMask | None = None) -> np.ndarray:
    """Landmarks [left, right, top, bottom] as (x, y) from rendered pixels.

    Extreme pixels of the detected mouth component; ties are averaged.  With
    no detectable mouth, all four collapse to the nominal mouth center, so
    downstream LMD degrades smoothly instead of failing.
    """
    frame = np.asarray(frame)
    size = frame.shape[0]
    mask = mask or build_umask(size)
    component = _mouth_component(frame, mask)
    if component is None:
        cx, cy = size / 2.0, float(round(0.72 * size))
        return np.array([[cx, cy]] * 4, dtype=np.float32)
    rows, cols = np.nonzero(component)
    left_x, right_x = cols.min(), cols.max()
    top_y, bot_y = rows.min(), rows.max()
    return np.array([
        [left_x, rows[cols == left_x].mean()],
        [right_x, rows[cols == right_x].mean()],
        [cols[rows == top_y].mean(), top_y],
        [cols[rows == bot_y].mean(), bot_y],
    ], dtype=np.float32)


def estimated_lmd(frames: np.ndarray, reference_landmarks: np.ndarray,
                  mask: UMask | None = None) -> float:
    """LMD between pixel-estimated landmarks of ``frames`` and references."""
    frames = np.asarray(frames)
    if frames.ndim != 4:
        raise ValidationError(f"frames must be [T, S, S, 3], got {frames.shape}")
    estimated = np.stack([estimate_mouth_landmarks(f, mask) for f in frames])
    return lmd(estimated, reference_landmarks)


def pearson(a: np.ndarray, b: np.ndarray) -> float:
    """Pearson correlation; 0.0 when either side is constant."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValidationError(
            f"correlation needs two equal-length 1-D arrays, got {a.shape} and {b.shape}")
    if len(a) < 2 or a.std() == 0.0 or b.std() == 0.0:
        return 0.0
    return float(np.corrcoef(a, b)[0, 1])


def mouth_corr(frames: np.ndarray, audio_env: np.ndarray,
               mask: UMask | None = None) -> float:
    """Correlation between per-frame estimated mouth opening and audio level."""
    frames = np.asarray(frames)
    if frames.ndim != 4:
        raise ValidationError(f"frames must be [T, S, S, 3], got {frames.shape}")
    if len(audio_env) != frames.shape[0]:
        raise ValidationError(
            f"audio envelope has {len(audio_env)} entries for {frames.shape[0]} frames")
    openings = np.array([mouth_opening(f, mask) for f in frames])
    return pearson(openings, np.asarray(audio_env, dtype=np.float64))


# -- identity distance ---------------------------------------------------

class IdentityEmbedder:
    """Frozen random-convolution image embedder.

    A surrogate for a pretrained face recognizer: untrained but fixed
    filters still map color and shape differences to embedding distance, and
    identical inputs always land at distance zero.  Only comparisons made
    with the same embedder instance are meaningful.
    """

    def __init__(self, dim: int = 64, seed: int = 77):
        torch.manual_seed(seed)
        self.net = nn.Sequential(
            nn.Conv2d(3, 16, 3, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(16, 32, 3, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.Conv2d(32, dim, 3, stride=2, padding=1), nn.LeakyReLU(0.2),
            nn.AdaptiveAvgPool2d(1),
        )
        self.net.eval()
        for param in self.net.parameters():
            param.requires_grad_(False)
        self.dim = dim

    def __call__(self, frame: np.ndarray) -> np.ndarray:
        frame = np.asarray(frame, dtype=np.float32)
        if frame.ndim != 3 or frame.shape[2] != 3:
            raise ValidationError(f"expected [S, S, 3] frame, got {frame.shape}")
        with torch.no_grad():
            x = torch.from_numpy(frame).permute(2, 0, 1).unsqueeze(0)
            out = self.net(x)
        return out.reshape(-1).numpy().astype(np.float64)


@functools.lru_cache(maxsize=1)
def default_identity_embedder() -> IdentityEmbedder:
    return IdentityEmbedder()


def identity_distance(frame_a: np.ndarray, frame_b: np.ndarray,
                      embedder: IdentityEmbedder | None = None) -> float:
    """Cosine similarity of frame embeddings, in [-1, 1]; equal frames
    give 1.  Higher means the embedder considers the faces more alike."""
    embedder = embedder or default_identity_embedder()
    ea, eb = embedder(frame_a), embedder(frame_b)
    na, nb = np.linalg.norm(ea), np.linalg.norm(eb)
    if na < 1e-12 or nb < 1e-12:
        raise ValidationError("identity embedding collapsed to zero norm")
    return float(np.dot(ea, eb) / (na * nb))


# -- ranking -------------------------------------------------------------

def roc_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Area under the ROC curve via rank statistics (ties averaged)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValidationError("scores and labels must be equal-length 1-D arrays")
    n_pos = int(labels.sum())
    n_neg = int(len(labels) - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise ValidationError("AUC needs both positive and negative examples")
    ranks = scipy.stats.rankdata(scores)
    rank_sum = float(ranks[labels].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)
