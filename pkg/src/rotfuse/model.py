"""Rotation-constrained cross-view fusion network and its ablation variants.

All computations are batched: observations are ``(N, O)``, rotations
``(N, 3, 3)`` and rotatable features ``(N, 3, D)``. A rotatable feature is
the extractor/fuser output of width ``3 * D`` reshaped row-major to
``(3, D)``, so its columns are the ``D`` three-dimensional vectors that the
relative rotation acts on.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .geometry import UNIT_TOL, NotUnit
from .nncore import MlpSpec, ShapeMismatch, init_params, mlp_backward, mlp_forward

VARIANTS = ("proposed", "concat", "mlp_encoding", "no_rotation", "no_backbone_features")

# arccos' derivative is evaluated with its argument clamped this far from +-1
ACOS_GRAD_MARGIN = 1e-7


class DegenerateOutput(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    obs_dim: int = 32
    D: int = 16
    B: int = 32
    blocks: int = 3
    alpha: float = 0.5
    variant: str = "proposed"
    sequential_block_update: bool = True
    backbone_hidden: int = 64
    hidden: int | None = None  # extractor / fuser / gaze-head hidden width; None -> 3*D

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.blocks < 1 or self.D < 1 or self.B < 1 or self.obs_dim < 1:
            raise ValueError("blocks, D, B and obs_dim must be >= 1")
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError("alpha must be in (0, 1]")

    @property
    def hidden_width(self) -> int:
        return self.hidden or 3 * self.D

    def to_dict(self) -> dict:
        return asdict(self)


def block_weights(alpha: float, blocks: int) -> list[float]:
    """Loss coefficients ``alpha**(l - i)`` for blocks ``i = 1..l``."""
    return [alpha ** (blocks - i) for i in range(1, blocks + 1)]


def _specs(cfg: ModelConfig) -> dict[str, MlpSpec]:
    d3, h = 3 * cfg.D, cfg.hidden_width
    specs = {"backbone": MlpSpec((cfg.obs_dim, cfg.backbone_hidden, cfg.B))}
    if cfg.variant == "concat":
        specs["concat_head"] = MlpSpec((2 * cfg.B, h, h, 3))
        return specs
    specs["extractor"] = MlpSpec((cfg.B, h, d3))
    ctx = d3 if cfg.variant == "no_backbone_features" else cfg.B
    extra = 9 if cfg.variant == "mlp_encoding" else 0
    for i in range(1, cfg.blocks + 1):
        specs[f"fuser{i}"] = MlpSpec((d3 + extra + ctx, h, h, d3))
        specs[f"head{i}"] = MlpSpec((d3 + cfg.B, h, 3))
    return specs


def _normalize(u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n = np.linalg.norm(u, axis=-1, keepdims=True)
    if np.any(n < 1e-12):
        raise DegenerateOutput("gaze head produced a (near) zero vector")
    return u / n, n


def _normalize_backward(g: np.ndarray, n: np.ndarray, dg: np.ndarray) -> np.ndarray:
    return (dg - g * np.sum(g * dg, axis=-1, keepdims=True)) / n


def _as_batch(x, width: int | None = None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if width is not None and x.shape[-1] != width:
        raise ShapeMismatch(f"expected width {width}, got {x.shape[-1]}")
    return x


def _cat(parts: list[np.ndarray]) -> np.ndarray:
    """Concatenate along the last axis, broadcasting leading axes."""
    lead = np.broadcast_shapes(*(p.shape[:-1] for p in parts))
    return np.concatenate([np.broadcast_to(p, lead + p.shape[-1:]) for p in parts], axis=-1)


def _flat(F: np.ndarray) -> np.ndarray:
    return F.reshape(F.shape[:-2] + (F.shape[-2] * F.shape[-1],))


def _as_rotations(r, n: int) -> np.ndarray:
    r = np.asarray(r, dtype=np.float64)
    if r.shape == (3, 3):
        r = np.broadcast_to(r, (n, 3, 3))
    if r.shape != (n, 3, 3):
        raise ShapeMismatch(f"rotations must be (3, 3) or ({n}, 3, 3), got {r.shape}")
    return r


@dataclass
class Trace:
    """Everything a forward pass produced, plus the caches backward needs."""

    variant: str
    R: np.ndarray
    f_tgt: np.ndarray
    f_ref: np.ndarray
    F_tgt: list[np.ndarray] = field(default_factory=list)  # stages 0..l
    F_ref: list[np.ndarray] = field(default_factory=list)
    g_tgt: list[np.ndarray] = field(default_factory=list)  # blocks 1..l
    g_ref: list[np.ndarray] = field(default_factory=list)
    caches: dict = field(default_factory=dict)

    @property
    def final(self) -> np.ndarray:
        return self.g_tgt[-1]


class FusionNet:
    """Parameters plus forward/backward for one :class:`ModelConfig`.

    Target and reference views run through the very same parameter arrays;
    blocks own separate fuser and gaze-head parameters.
    """

    def __init__(self, config: ModelConfig, params: dict | None = None, seed: int = 0):
        self.config = config
        self.specs = _specs(config)
        if params is None:
            rng = np.random.default_rng(seed)
            params = {}
            for name, spec in self.specs.items():
                params.update(init_params(spec, rng, prefix=name))
        else:
            expected = set()
            for name, spec in self.specs.items():
                for k in range(spec.n_layers):
                    expected |= {f"{name}.W{k}", f"{name}.b{k}"}
            if set(params) != expected:
                raise ShapeMismatch("parameter set does not match model config")
        self.params = params

    def _mlp(self, name: str, x: np.ndarray):
        return mlp_forward(self.specs[name], self.params, x, prefix=name)

    # single-stage operations; each returns (output, cache)

    def extract_backbone(self, obs):
        return self._mlp("backbone", _as_batch(obs, self.config.obs_dim))

    def extract_rotatable(self, f):
        out, cache = self._mlp("extractor", _as_batch(f, self.config.B))
        return out.reshape(out.shape[:-1] + (3, self.config.D)), cache

    def fuse(self, block: int, rotated, context, rotation=None):
        """Fuser of ``block`` over ``[flatten(rotated), (flatten(rotation)), context]``."""
        rotated = np.asarray(rotated, dtype=np.float64)
        if rotated.ndim == 2:
            rotated = rotated[None]
        parts = [_flat(rotated)]
        if self.config.variant == "mlp_encoding":
            parts.append(_as_rotations(rotation, rotated.shape[-3]).reshape(-1, 9))
        parts.append(_as_batch(context))
        out, cache = self._mlp(f"fuser{block}", _cat(parts))
        return out.reshape(out.shape[:-1] + (3, self.config.D)), cache

    def estimate_gaze(self, block: int, F, f):
        F = np.asarray(F, dtype=np.float64)
        if F.ndim == 2:
            F = F[None]
        u, cache = self._mlp(f"head{block}", _cat([_flat(F), _as_batch(f, self.config.B)]))
        g, n = _normalize(u)
        return g, (cache, g, n)

    # full passes

    def forward(self, obs_tgt, obs_ref, R=None) -> Trace:
        cfg = self.config
        x_t = _as_batch(obs_tgt, cfg.obs_dim)
        x_r = _as_batch(obs_ref, cfg.obs_dim)
        n = x_t.shape[0]
        if cfg.variant in ("no_rotation", "concat") or R is None:
            if R is None and cfg.variant not in ("no_rotation", "concat"):
                raise ValueError(f"variant {cfg.variant} needs a rotation")
            R = np.broadcast_to(np.eye(3), (n, 3, 3))
        R = _as_rotations(R, n)
        f_t, cb_t = self.extract_backbone(x_t)
        f_r, cb_r = self.extract_backbone(x_r)
        tr = Trace(cfg.variant, R, f_t, f_r)
        tr.caches["backbone"] = (cb_t, cb_r)
        if cfg.variant == "concat":
            u, ch = self._mlp("concat_head", _cat([f_t, f_r]))
            g, nrm = _normalize(u)
            tr.g_tgt.append(g)
            tr.caches["concat_head"] = (ch, g, nrm)
            return tr

        F_t, ce_t = self.extract_rotatable(f_t)
        F_r, ce_r = self.extract_rotatable(f_r)
        tr.caches["extractor"] = (ce_t, ce_r)
        tr.F_tgt.append(F_t)
        tr.F_ref.append(F_r)
        if cfg.variant == "no_backbone_features":
            ctx_t, ctx_r = _flat(F_t), _flat(F_r)
        else:
            ctx_t, ctx_r = f_t, f_r
        rotate = cfg.variant != "mlp_encoding"
        Rt = np.swapaxes(R, 1, 2)
        for i in range(1, cfg.blocks + 1):
            prev_t, prev_r = tr.F_tgt[-1], tr.F_ref[-1]
            rot_r = R @ prev_r if rotate else prev_r
            new_t, cf_t = self.fuse(i, rot_r, ctx_t, R)
            src = new_t if cfg.sequential_block_update else prev_t
            rot_t = Rt @ src if rotate else src
            new_r, cf_r = self.fuse(i, rot_t, ctx_r, Rt)
            g_t, ch_t = self.estimate_gaze(i, new_t, f_t)
            g_r, ch_r = self.estimate_gaze(i, new_r, f_r)
            tr.F_tgt.append(new_t)
            tr.F_ref.append(new_r)
            tr.g_tgt.append(g_t)
            tr.g_ref.append(g_r)
            tr.caches[i] = (cf_t, cf_r, ch_t, ch_r)
        return tr

    def backward(self, tr: Trace, dg_tgt: list, dg_ref: list | None = None):
        """Gradients of a loss given its derivative w.r.t. every emitted gaze.

        Returns ``(param_grads, df_tgt, df_ref)`` where the last two are the
        gradients reaching the backbone features.
        """
        cfg = self.config
        grads: dict = {}
        n = tr.f_tgt.shape[0]
        df_t = np.zeros_like(tr.f_tgt)
        df_r = np.zeros_like(tr.f_ref)
        d3 = 3 * cfg.D
        if cfg.variant == "concat":
            ch, g, nrm = tr.caches["concat_head"]
            du = _normalize_backward(g, nrm, dg_tgt[0])
            _, dx = mlp_backward(ch, du, grads)
            df_t += dx[:, : cfg.B]
            df_r += dx[:, cfg.B :]
        else:
            dg_ref = dg_ref or [None] * cfg.blocks
            dF_t = [np.zeros((n, 3, cfg.D)) for _ in range(cfg.blocks + 1)]
            dF_r = [np.zeros((n, 3, cfg.D)) for _ in range(cfg.blocks + 1)]
            dctx_t = np.zeros((n, cfg.B if cfg.variant != "no_backbone_features" else d3))
            dctx_r = np.zeros_like(dctx_t)
            rotate = cfg.variant != "mlp_encoding"
            R = tr.R
            Rt = np.swapaxes(R, 1, 2)
            off = d3 + (9 if cfg.variant == "mlp_encoding" else 0)
            for i in range(cfg.blocks, 0, -1):
                cf_t, cf_r, ch_t, ch_r = tr.caches[i]
                for (hc, g, nrm), dg, dF, df in (
                    (ch_t, dg_tgt[i - 1], dF_t, df_t),
                    (ch_r, dg_ref[i - 1], dF_r, df_r),
                ):
                    if dg is None:
                        dg = np.zeros_like(g)
                    _, dx = mlp_backward(hc, _normalize_backward(g, nrm, dg), grads)
                    dF[i] += dx[:, :d3].reshape(n, 3, cfg.D)
                    df += dx[:, d3:]
                # reference fuser consumed rotate(R^T, src)
                _, dx = mlp_backward(cf_r, dF_r[i].reshape(n, d3), grads)
                d_rot = dx[:, :d3].reshape(n, 3, cfg.D)
                dctx_r += dx[:, off:]
                d_src = R @ d_rot if rotate else d_rot
                dF_t[i if cfg.sequential_block_update else i - 1] += d_src
                # target fuser consumed rotate(R, F_ref[i-1])
                _, dx = mlp_backward(cf_t, dF_t[i].reshape(n, d3), grads)
                d_rot = dx[:, :d3].reshape(n, 3, cfg.D)
                dctx_t += dx[:, off:]
                dF_r[i - 1] += Rt @ d_rot if rotate else d_rot
            if cfg.variant == "no_backbone_features":
                dF_t[0] += dctx_t.reshape(n, 3, cfg.D)
                dF_r[0] += dctx_r.reshape(n, 3, cfg.D)
            else:
                df_t += dctx_t
                df_r += dctx_r
            ce_t, ce_r = tr.caches["extractor"]
            _, dx = mlp_backward(ce_t, dF_t[0].reshape(n, d3), grads)
            df_t += dx
            _, dx = mlp_backward(ce_r, dF_r[0].reshape(n, d3), grads)
            df_r += dx
        cb_t, cb_r = tr.caches["backbone"]
        mlp_backward(cb_t, df_t, grads)
        mlp_backward(cb_r, df_r, grads)
        return grads, df_t, df_r

    def predict(self, obs_tgt, obs_ref, R=None) -> np.ndarray:
        return self.forward(obs_tgt, obs_ref, R).final

    def loss_and_grads(self, obs_tgt, obs_ref, R, gt_tgt, gt_ref):
        tr = self.forward(obs_tgt, obs_ref, R)
        res = total_loss(tr, gt_tgt, gt_ref, self.config.alpha)
        grads, _, _ = self.backward(tr, res.dg_tgt, res.dg_ref)
        return res, grads


@dataclass
class LossResult:
    total: float
    per_block: list[float]  # unweighted batch-mean angular loss (radians) per block
    weights: list[float]
    dg_tgt: list[np.ndarray]
    dg_ref: list[np.ndarray] | None


def _acos_terms(g: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    dot = np.sum(g * gt, axis=-1)
    value = np.arccos(np.clip(dot, -1.0, 1.0))
    safe = np.clip(dot, -1.0 + ACOS_GRAD_MARGIN, 1.0 - ACOS_GRAD_MARGIN)
    return value, -1.0 / np.sqrt(1.0 - safe * safe)


def _check_unit(g: np.ndarray, name: str) -> None:
    if np.any(np.abs(np.linalg.norm(g, axis=-1) - 1.0) > UNIT_TOL):
        raise NotUnit(f"{name} must be unit vectors")


def per_sample_loss(tr: Trace, gt_tgt, gt_ref, alpha: float) -> np.ndarray:
    """Weighted angular loss for every sample (broadcasts over leading axes)."""
    gt_t = _as_batch(gt_tgt, 3)
    gt_r = _as_batch(gt_ref, 3)
    out = 0.0
    for i, w in enumerate(block_weights(alpha, len(tr.g_tgt))):
        term = _acos_terms(tr.g_tgt[i], gt_t)[0]
        if tr.g_ref:
            term = term + _acos_terms(tr.g_ref[i], gt_r)[0]
        out = out + w * term
    return out


def total_loss(tr: Trace, gt_tgt, gt_ref, alpha: float) -> LossResult:
    """Block-decayed sum of angular losses, averaged over the batch.

    Per sample: ``sum_i alpha**(l-i) * (acos(g_tgt_i . gt_tgt) + acos(g_ref_i . gt_ref))``.
    The concat variant emits only a target gaze, so only that term exists.
    """
    gt_t = _as_batch(gt_tgt, 3)
    gt_r = _as_batch(gt_ref, 3)
    _check_unit(gt_t, "gt_tgt")
    _check_unit(gt_r, "gt_ref")
    n = gt_t.shape[0]
    weights = block_weights(alpha, len(tr.g_tgt))
    total = 0.0
    per_block, dg_t, dg_r = [], [], []
    for i, w in enumerate(weights):
        v_t, dv_t = _acos_terms(tr.g_tgt[i], gt_t)
        dg_t.append((w / n) * dv_t[:, None] * gt_t)
        block = v_t.mean()
        if tr.g_ref:
            v_r, dv_r = _acos_terms(tr.g_ref[i], gt_r)
            dg_r.append((w / n) * dv_r[:, None] * gt_r)
            block += v_r.mean()
        per_block.append(float(block))
        total += w * block
    return LossResult(float(total), per_block, weights, dg_t, dg_r if tr.g_ref else None)


def sample_block_losses(g_tgt, g_ref, gt_tgt, gt_ref) -> list[float]:
    """Per-block angular losses for a single sample (lists of unit 3-vectors)."""
    out = []
    for a, b in zip(g_tgt, g_ref):
        out.append(float(np.arccos(np.clip(np.dot(a, gt_tgt), -1, 1)) + np.arccos(np.clip(np.dot(b, gt_ref), -1, 1))))
    return out


def weighted_total(block_losses: list[float], alpha: float) -> float:
    return float(sum(w * v for w, v in zip(block_weights(alpha, len(block_losses)), block_losses)))


# standalone entry points for the ablation variants


def forward_concat(net: FusionNet, obs_tgt, obs_ref) -> np.ndarray:
    if net.config.variant != "concat":
        raise ValueError("forward_concat needs a concat model")
    return net.forward(obs_tgt, obs_ref).final


def forward_mlp_encoding(net: FusionNet, obs_tgt, obs_ref, R) -> Trace:
    if net.config.variant != "mlp_encoding":
        raise ValueError("forward_mlp_encoding needs an mlp_encoding model")
    return net.forward(obs_tgt, obs_ref, R)


def forward_no_rotation(net: FusionNet, obs_tgt, obs_ref) -> Trace:
    if net.config.variant != "no_rotation":
        raise ValueError("forward_no_rotation needs a no_rotation model")
    return net.forward(obs_tgt, obs_ref)
