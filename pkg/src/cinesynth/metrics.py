"""Key-frame quality metrics: embedding consistency, text-image alignment,
and a no-reference quality score following BRISQUE (Mittal, Moorthy, Bovik,
"No-Reference Image Quality Assessment in the Spatial Domain", IEEE TIP 2012).

Feature layout, per scale (full size, then one 2x box downsample):
  [ggd_shape, ggd_variance] for the MSCN map, then
  [shape, mean, left_var, right_var] for each of the H, V, D1, D2
  neighboring-product orientations. 18 per scale, 36 total.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from .backends import EmbeddingRequest
from .errors import (
    ContractViolation,
    DegenerateDistribution,
    DegenerateEmbedding,
    ImageTooSmall,
    InsufficientFrames,
    ParseFailed,
)
from .kernels import blur7, box2

VAR_FLOOR = 1e-6
MSCN_C = 1.0
N_FEATURES = 36

# BT.601 luma weights
_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float64)


# ---------------------------------------------------------------------------
# cosine metrics


def _as_vector(e) -> np.ndarray:
    values = getattr(e, "values", e)
    return np.asarray(values, dtype=np.float64)


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise DegenerateEmbedding("cosine undefined for a zero vector")
    return float(np.dot(a, b) / (na * nb))


def consistency(embeddings) -> float:
    """Mean cosine similarity between adjacent frame embeddings."""
    vecs = [_as_vector(e) for e in embeddings]
    if len(vecs) < 2:
        raise InsufficientFrames("consistency needs at least two embeddings")
    sims = [_cosine(vecs[i], vecs[i + 1]) for i in range(len(vecs) - 1)]
    return float(np.mean(sims))


def alignment(pairs) -> float:
    """Mean cosine similarity between caption and frame embeddings."""
    pairs = list(pairs)
    if not pairs:
        raise InsufficientFrames("alignment needs at least one pair")
    sims = [_cosine(_as_vector(t), _as_vector(v)) for t, v in pairs]
    return float(np.mean(sims))


# ---------------------------------------------------------------------------
# MSCN and distribution fits


def to_grayscale(image: np.ndarray) -> np.ndarray:
    """Luma plane as float64; accepts HxW, HxWx3, or HxWx4 arrays."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 2:
        return arr
    if arr.ndim == 3 and arr.shape[2] in (3, 4):
        return arr[:, :, 0] * _LUMA[0] + arr[:, :, 1] * _LUMA[1] + arr[:, :, 2] * _LUMA[2]
    raise ContractViolation(f"expected a 2-d or 3-channel image, got shape {arr.shape}")


def mscn(image: np.ndarray) -> np.ndarray:
    """Local mean-subtracted, contrast-normalized map of a [0,255] image."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2 or min(img.shape) < 16:
        raise ImageTooSmall(f"mscn needs a 2-d image of at least 16x16, got {img.shape}")
    if img.max() == img.min():
        return np.zeros_like(img)
    mu = blur7(img)
    var = blur7(img * img) - mu * mu
    sigma = np.sqrt(np.maximum(var, VAR_FLOOR))
    return (img - mu) / (sigma + MSCN_C)


def _rho_tables():
    global _ALPHA_GRID, _RHO_GRID
    if _ALPHA_GRID is None:
        alphas = np.arange(0.2, 10.0 + 1e-9, 0.001)
        rhos = np.exp(
            2.0 * gammaln(2.0 / alphas) - gammaln(1.0 / alphas) - gammaln(3.0 / alphas)
        )
        _ALPHA_GRID, _RHO_GRID = alphas, rhos
    return _ALPHA_GRID, _RHO_GRID


_ALPHA_GRID = None
_RHO_GRID = None


def _alpha_from_rho(rho: float) -> float:
    alphas, rhos = _rho_tables()
    return float(np.interp(rho, rhos, alphas))


def fit_ggd(samples) -> tuple:
    """Moment-matched generalized Gaussian (shape, variance)."""
    x = np.asarray(samples, dtype=np.float64).ravel()
    if x.size < 100:
        raise DegenerateDistribution(f"need at least 100 samples, got {x.size}")
    m2 = float(np.mean(x * x))
    if m2 == 0.0 or np.ptp(x) == 0.0:
        raise DegenerateDistribution("samples have zero variance")
    e_abs = float(np.mean(np.abs(x)))
    alpha = _alpha_from_rho(e_abs * e_abs / m2)
    return alpha, m2


def fit_aggd(samples) -> tuple:
    """Moment-matched asymmetric GGD (shape, mean, left var, right var)."""
    x = np.asarray(samples, dtype=np.float64).ravel()
    left = x[x < 0.0]
    right = x[x > 0.0]
    if left.size == 0 or right.size == 0:
        raise DegenerateDistribution("one side of the distribution is empty")
    return _aggd_moments(x, left, right)


def _aggd_moments(x, left, right) -> tuple:
    s_l2 = float(np.mean(left * left)) if left.size else 0.0
    s_r2 = float(np.mean(right * right)) if right.size else 0.0
    s_l2 = max(s_l2, VAR_FLOOR)
    s_r2 = max(s_r2, VAR_FLOOR)
    sigma_l = np.sqrt(s_l2)
    sigma_r = np.sqrt(s_r2)
    gamma_hat = sigma_l / sigma_r
    m2 = max(float(np.mean(x * x)), VAR_FLOOR)
    e_abs = float(np.mean(np.abs(x)))
    r_hat = e_abs * e_abs / m2
    r_norm = (
        r_hat
        * (gamma_hat**3 + 1.0)
        * (gamma_hat + 1.0)
        / (gamma_hat**2 + 1.0) ** 2
    )
    alpha = _alpha_from_rho(r_norm)
    mean_scale = np.exp(gammaln(2.0 / alpha) - gammaln(1.0 / alpha)) * np.sqrt(
        np.exp(gammaln(1.0 / alpha) - gammaln(3.0 / alpha))
    )
    eta = float((sigma_r - sigma_l) * mean_scale)
    return alpha, eta, s_l2, s_r2


def _ggd_floor(x: np.ndarray) -> tuple:
    m2 = max(float(np.mean(x * x)), VAR_FLOOR)
    e_abs = float(np.mean(np.abs(x)))
    return _alpha_from_rho(e_abs * e_abs / m2), m2


def _orientation_products(m: np.ndarray) -> tuple:
    horizontal = m[:, :-1] * m[:, 1:]
    vertical = m[:-1, :] * m[1:, :]
    diag_main = m[:-1, :-1] * m[1:, 1:]
    diag_anti = m[:-1, 1:] * m[1:, :-1]
    return horizontal, vertical, diag_main, diag_anti


# ---------------------------------------------------------------------------
# features and scoring


@dataclass
class BrisqueFeatures:
    values: np.ndarray  # shape (36,)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (N_FEATURES,):
            raise ContractViolation(
                f"expected {N_FEATURES} features, got shape {self.values.shape}"
            )


def brisque_features(image: np.ndarray) -> BrisqueFeatures:
    img = to_grayscale(image)
    if min(img.shape) < 32:
        raise ImageTooSmall(
            f"feature extraction needs at least 32x32, got {img.shape}"
        )
    feats = []
    for scale in range(2):
        m = mscn(img)
        feats.extend(_ggd_floor(m.ravel()))
        for prod in _orientation_products(m):
            p = prod.ravel()
            left = p[p < 0.0]
            right = p[p > 0.0]
            feats.extend(_aggd_moments(p, left, right))
        if scale == 0:
            img = box2(img)
    return BrisqueFeatures(np.array(feats, dtype=np.float64))


@dataclass
class SvrModel:
    support_vectors: np.ndarray  # (n, 36)
    coefs: np.ndarray  # (n,)
    gamma: float
    bias: float
    ranges: np.ndarray  # (36, 2) min, max per feature

    def __post_init__(self):
        self.support_vectors = np.asarray(self.support_vectors, dtype=np.float64)
        self.coefs = np.asarray(self.coefs, dtype=np.float64)
        self.ranges = np.asarray(self.ranges, dtype=np.float64)
        if self.support_vectors.size == 0:
            self.support_vectors = self.support_vectors.reshape(0, N_FEATURES)
        if self.support_vectors.ndim != 2 or self.support_vectors.shape[1] != N_FEATURES:
            raise ContractViolation(
                f"support vectors must be (n, {N_FEATURES}), got "
                f"{self.support_vectors.shape}"
            )
        if self.coefs.shape != (self.support_vectors.shape[0],):
            raise ContractViolation("one dual coefficient per support vector required")
        if self.ranges.shape != (N_FEATURES, 2):
            raise ContractViolation(f"ranges must be ({N_FEATURES}, 2)")
        if not np.all(self.ranges[:, 0] < self.ranges[:, 1]):
            raise ContractViolation("every feature range needs min < max")


def brisque_score(features, model: SvrModel) -> float:
    """RBF-SVR quality score on range-normalized features, clamped to [0,100]."""
    x = np.asarray(getattr(features, "values", features), dtype=np.float64)
    if x.shape != (N_FEATURES,):
        raise ContractViolation(
            f"expected {N_FEATURES} features, got shape {x.shape}"
        )
    if not np.all(np.isfinite(x)):
        raise ContractViolation("features contain non-finite values")
    lo, hi = model.ranges[:, 0], model.ranges[:, 1]
    xn = -1.0 + 2.0 * (x - lo) / (hi - lo)
    if model.support_vectors.shape[0]:
        d2 = np.sum((model.support_vectors - xn) ** 2, axis=1)
        raw = float(np.dot(model.coefs, np.exp(-model.gamma * d2)) + model.bias)
    else:
        raw = float(model.bias)
    return min(100.0, max(0.0, raw))


def load_svr_model(model_path, ranges_path=None) -> SvrModel:
    """Line-oriented model file: `gamma g`, `bias b`, then 36 floats + coef
    per support vector; ranges file holds 36 `min max` lines."""
    from pathlib import Path

    model_path = Path(model_path)
    ranges_path = Path(ranges_path) if ranges_path else model_path.with_name(
        model_path.name + ".ranges"
    )
    gamma = bias = None
    vectors, coefs = [], []
    for ln, line in enumerate(model_path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            if line.startswith("gamma "):
                gamma = float(line.split()[1])
            elif line.startswith("bias "):
                bias = float(line.split()[1])
            else:
                parts = [float(p) for p in line.split()]
                if len(parts) != N_FEATURES + 1:
                    raise ValueError(f"{len(parts)} fields")
                vectors.append(parts[:N_FEATURES])
                coefs.append(parts[N_FEATURES])
        except ValueError as e:
            raise ParseFailed(f"{model_path.name} line {ln}: {e}")
    if gamma is None or bias is None:
        raise ContractViolation(f"{model_path.name} must declare gamma and bias")

    ranges = []
    for ln, line in enumerate(ranges_path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        try:
            lo, hi = (float(p) for p in line.split())
        except ValueError as e:
            raise ParseFailed(f"{ranges_path.name} line {ln}: {e}")
        ranges.append((lo, hi))
    if len(ranges) != N_FEATURES:
        raise ContractViolation(
            f"{ranges_path.name} must hold {N_FEATURES} ranges, got {len(ranges)}"
        )
    return SvrModel(
        support_vectors=np.array(vectors, dtype=np.float64).reshape(-1, N_FEATURES),
        coefs=np.array(coefs, dtype=np.float64),
        gamma=gamma,
        bias=bias,
        ranges=np.array(ranges, dtype=np.float64),
    )


def save_svr_model(model: SvrModel, model_path, ranges_path=None) -> None:
    from pathlib import Path

    model_path = Path(model_path)
    ranges_path = Path(ranges_path) if ranges_path else model_path.with_name(
        model_path.name + ".ranges"
    )
    lines = [f"gamma {float(model.gamma)!r}", f"bias {float(model.bias)!r}"]
    for sv, coef in zip(model.support_vectors, model.coefs):
        lines.append(" ".join(repr(float(v)) for v in sv) + f" {float(coef)!r}")
    model_path.write_text("\n".join(lines) + "\n")
    ranges_path.write_text(
        "\n".join(f"{float(lo)!r} {float(hi)!r}" for lo, hi in model.ranges) + "\n"
    )


# ---------------------------------------------------------------------------
# per-movie report


@dataclass
class MetricReport:
    movie_id: str
    consistency: float | None
    alignment: float | None
    brisque_mean: float
    brisque_per_frame: list

    def to_dict(self) -> dict:
        return {
            "movie_id": self.movie_id,
            "consistency": self.consistency,
            "alignment": self.alignment,
            "brisque_mean": self.brisque_mean,
            "brisque_per_frame": list(self.brisque_per_frame),
        }


def evaluate_frames(movie_id: str, frame_paths, captions, embedder,
                    svr_model: SvrModel) -> MetricReport:
    """Full metric sweep over one movie's rendered key frames."""
    from PIL import Image

    frame_paths = list(frame_paths)
    captions = list(captions)
    if not frame_paths:
        raise InsufficientFrames("no frames to evaluate")
    if len(captions) != len(frame_paths):
        raise ContractViolation(
            f"{len(frame_paths)} frames but {len(captions)} captions"
        )

    image_vecs, scores = [], []
    for path in frame_paths:
        data = path.read_bytes()
        image_vecs.append(
            embedder.embed(EmbeddingRequest(modality="image", payload=data))
        )
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
        scores.append(brisque_score(brisque_features(arr), svr_model))

    text_vecs = [
        embedder.embed(EmbeddingRequest(modality="text", payload=c)) for c in captions
    ]
    align = alignment(zip(text_vecs, image_vecs))
    consist = consistency(image_vecs) if len(image_vecs) >= 2 else None
    return MetricReport(
        movie_id=movie_id,
        consistency=consist,
        alignment=align,
        brisque_mean=float(np.mean(scores)),
        brisque_per_frame=scores,
    )
