"""Desk-scale models with hand-written gradients, optimizers and training loops.

Large backbones are replaced by small tanh encoders over synthetic feature
vectors; each recipe wires the heads and losses of one challenge solution:

* ``plain`` - one encoder, 2-way softmax head, cross-entropy.
* ``ctel`` - plus a domain head behind gradient reversal (train band vs dev band).
* ``hexianhua`` - cross-entropy plus 0.5 * focal on the bona fide probability.
* ``opdai`` - two encoders, three sigmoid heads (fused, branch A, branch B), focal losses.
* ``chenyifan`` - five branch encoders plus a fused head, BCE losses.
* ``ionetworks`` - pixel-map head with BCE plus sub-center angular margin loss.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import losses as L
from .dataset import ProtocolManifest, SampleRecord, build_protocol3, max_upsample
from .metrics import evaluate_split
from .preprocess import mixup, label_smoothing, tta_flip_average
from .strategies import (
    DfqState,
    LrSchedule,
    PtsState,
    dfq_init,
    dfq_logits,
    dfq_update,
    early_stop,
    ema_update,
    lr_at,
    pts_init,
    pts_step,
)

log = logging.getLogger(__name__)

RECIPES = ("plain", "ctel", "hexianhua", "opdai", "chenyifan", "ionetworks")
RECIPE_WEIGHTS = {"plain": {"cls": 1.0}, **L.COMPOSITE_WEIGHTS}
PATCH_BRANCHES = ("ori", "face", "eyes", "nose", "chin")
PUBLISHED_STAGE2_LOSS_THRESHOLD = 1e-4


class ConfigError(ValueError):
    """Inconsistent training configuration."""


# --------------------------------------------------------------------------
# Configuration


@dataclass
class OptimizerConfig:
    kind: str = "adamw"
    lr: float = 0.01
    momentum: float = 0.9
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0


@dataclass
class PtsConfig:
    initial_rate: float = 0.3
    decay: float = 0.9


@dataclass
class DfqConfig:
    capacity: int = 64
    alpha: float = 0.5
    scale: float = 16.0


@dataclass
class StrategyConfig:
    pts: PtsConfig | None = None
    dfq: DfqConfig | None = None
    ema_decay: float | None = None
    balance: bool = False
    early_stopping_patience: int | None = None
    mixup_alpha: float | None = None
    label_smoothing: float = 0.0
    tta: bool = False


@dataclass
class LossConfig:
    focal_gamma: float = L.DEFAULT_FOCAL_GAMMA
    grl_lambda: float = 1.0
    n_subcenters: int = L.DEFAULT_SUBCENTERS
    subcenter_scale: float = L.DEFAULT_SUBCENTER_SCALE
    map_size: int = 16


@dataclass
class TwoStageConfig:
    stage1_epochs: int = 10
    stage1_batch_size: int = 512
    stage2_batch_size: int = 200
    stage2_max_epochs: int = 200
    loss_threshold: float = 1e-3


@dataclass
class TrainConfig:
    recipe: str = "plain"
    hidden: int = 32
    epochs: int = 50
    batch_size: int = 32
    seed: int = 0
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    schedule: LrSchedule | None = None
    strategy: StrategyConfig = field(default_factory=StrategyConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    two_stage: TwoStageConfig = field(default_factory=TwoStageConfig)

    def validate(self) -> None:
        if self.recipe not in RECIPES:
            raise ConfigError(f"unknown recipe {self.recipe!r}; choose from {RECIPES}")
        if self.optimizer.kind not in ("sgd_momentum", "adamw"):
            raise ConfigError(f"unknown optimizer {self.optimizer.kind!r}")
        if self.epochs < 1 or self.batch_size < 1 or self.hidden < 0:
            raise ConfigError("epochs and batch_size must be >= 1, hidden >= 0")
        if self.recipe in ("opdai", "chenyifan") and self.hidden == 0:
            raise ConfigError(f"recipe {self.recipe!r} needs per-branch encoders (hidden > 0)")
        s = self.strategy
        if (s.mixup_alpha is not None or s.label_smoothing) and self.recipe != "plain":
            raise ConfigError("mixup and label smoothing are only wired into the plain recipe")
        if s.mixup_alpha is not None and s.mixup_alpha <= 0:
            raise ConfigError("mixup_alpha must be positive")
        if not (0 <= s.label_smoothing < 1):
            raise ConfigError("label_smoothing must be in [0, 1)")
        if s.ema_decay is not None and not (0 <= s.ema_decay < 1):
            raise ConfigError("ema_decay must be in [0, 1)")
        if s.pts is not None and not (0 < s.pts.initial_rate <= 1 and 0 < s.pts.decay <= 1):
            raise ConfigError("PTS initial_rate and decay must be in (0, 1]")
        if self.loss.grl_lambda < 0:
            raise ConfigError("grl_lambda must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schedule"] = None if self.schedule is None else self.schedule.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown TrainConfig keys: {sorted(unknown)}")
        try:
            opt = dict(d.pop("optimizer", {}) or {})
            if "betas" in opt:
                opt["betas"] = tuple(opt["betas"])
            strat = dict(d.pop("strategy", {}) or {})
            if strat.get("pts") is not None:
                strat["pts"] = PtsConfig(**strat["pts"])
            if strat.get("dfq") is not None:
                strat["dfq"] = DfqConfig(**strat["dfq"])
            sched = d.pop("schedule", None)
            cfg = cls(
                optimizer=OptimizerConfig(**opt),
                schedule=None if sched is None else LrSchedule.from_dict(sched),
                strategy=StrategyConfig(**strat),
                loss=LossConfig(**(d.pop("loss", {}) or {})),
                two_stage=TwoStageConfig(**(d.pop("two_stage", {}) or {})),
                **d,
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def published_config(recipe: str, **overrides) -> TrainConfig:
    """Optimizer and schedule settings as reported for each solution.

    These are full-scale values; desk-scale tests use faster settings.
    """
    if recipe == "ctel":
        cfg = TrainConfig(recipe, epochs=100, optimizer=OptimizerConfig("sgd_momentum", 0.01, momentum=0.9),
                          schedule=LrSchedule("cosine_warmup", lr0=0.01, total_epochs=100, warmup_epochs=1))
    elif recipe == "hexianhua":
        cfg = TrainConfig(recipe, strategy=StrategyConfig(ema_decay=0.999, balance=True, tta=True))
    elif recipe == "opdai":
        cfg = TrainConfig(recipe, optimizer=OptimizerConfig("adamw"), strategy=StrategyConfig(tta=True),
                          two_stage=TwoStageConfig(loss_threshold=PUBLISHED_STAGE2_LOSS_THRESHOLD))
    elif recipe == "chenyifan":
        cfg = TrainConfig(recipe, optimizer=OptimizerConfig("adamw", 1e-4),
                          schedule=LrSchedule("cosine_annealing", lr0=1e-4, total_epochs=100,
                                              cycle_epochs=25, cycle_decay=0.5),
                          strategy=StrategyConfig())
    elif recipe == "ionetworks":
        cfg = TrainConfig(recipe, optimizer=OptimizerConfig("adamw", 1e-4, weight_decay=5e-4),
                          schedule=LrSchedule("step_decay", lr0=1e-4, step_epochs=20, step_gamma=0.8),
                          strategy=StrategyConfig(early_stopping_patience=50))
    elif recipe == "plain":
        # cross-entropy, AdamW + cosine annealing to 0 over 100 epochs
        cfg = TrainConfig(recipe, epochs=100, optimizer=OptimizerConfig("adamw", 0.01, weight_decay=1e-2),
                          schedule=LrSchedule("cosine_annealing", lr0=0.01, total_epochs=100, min_lr=0.0))
    else:
        raise ConfigError(f"unknown recipe {recipe!r}")
    for k, v in overrides.items():
        setattr(cfg, k, v)
    cfg.validate()
    return cfg


# --------------------------------------------------------------------------
# Model


@dataclass
class TinyModel:
    recipe: str
    input_dim: int
    hidden: int
    params: dict[str, np.ndarray]
    ema: dict[str, np.ndarray] | None = None
    frozen: set[str] = field(default_factory=set)

    def encoder_names(self) -> list[str]:
        return sorted({k.split(".")[0] for k in self.params if k.startswith("enc")})

    def eval_params(self) -> dict[str, np.ndarray]:
        return self.ema if self.ema is not None else self.params

    def copy(self) -> "TinyModel":
        return TinyModel(self.recipe, self.input_dim, self.hidden,
                         {k: v.copy() for k, v in self.params.items()},
                         None if self.ema is None else {k: v.copy() for k, v in self.ema.items()},
                         set(self.frozen))

    def to_dict(self) -> dict:
        return {
            "recipe": self.recipe,
            "input_dim": self.input_dim,
            "hidden": self.hidden,
            "params": {k: v.tolist() for k, v in sorted(self.params.items())},
            "ema": None if self.ema is None else {k: v.tolist() for k, v in sorted(self.ema.items())},
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "TinyModel":
        return cls(d["recipe"], int(d["input_dim"]), int(d["hidden"]),
                   {k: np.asarray(v, dtype=float) for k, v in d["params"].items()},
                   None if d.get("ema") is None else {k: np.asarray(v, dtype=float) for k, v in d["ema"].items()})

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path: str | Path) -> "TinyModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _dense_init(rng: np.random.Generator, n_in: int, n_out: int, zero: bool = False):
    if zero:
        return np.zeros((n_in, n_out)), np.zeros(n_out)
    return rng.standard_normal((n_in, n_out)) / math.sqrt(n_in), np.zeros(n_out)


def init_model(recipe: str, input_dim: int, hidden: int = 32, seed: int = 0,
               loss_cfg: LossConfig | None = None, zero_heads: bool = False) -> TinyModel:
    """Seeded parameters; encoders start as random projections, heads at zero if ``zero_heads``."""
    if recipe not in RECIPES:
        raise ConfigError(f"unknown recipe {recipe!r}")
    loss_cfg = loss_cfg or LossConfig()
    rng = np.random.default_rng(seed)
    p: dict[str, np.ndarray] = {}

    def enc(name):
        if hidden > 0:
            p[f"{name}.W"], p[f"{name}.b"] = _dense_init(rng, input_dim, hidden)
        return hidden if hidden > 0 else input_dim

    def head(name, n_in, n_out):
        p[f"{name}.W"], p[f"{name}.b"] = _dense_init(rng, n_in, n_out, zero=zero_heads)

    if recipe in ("plain", "ctel", "hexianhua"):
        h = enc("enc")
        head("cls", h, 2)
        if recipe == "ctel":
            # domain head starts at chance: adversarial loss begins at ln 2
            p["dom.W"], p["dom.b"] = _dense_init(rng, h, 2, zero=True)
    elif recipe == "opdai":
        ha, hb = enc("enc_a"), enc("enc_b")
        head("mlp1", ha + hb, 1)
        head("mlp2", ha, 1)
        head("mlp3", hb, 1)
    elif recipe == "chenyifan":
        dims = [enc(f"enc_{b}") for b in PATCH_BRANCHES]
        for b, d in zip(PATCH_BRANCHES, dims):
            head(f"head_{b}", d, 1)
        head("head_concat", sum(dims), 1)
    elif recipe == "ionetworks":
        h = enc("enc")
        head("map", h, loss_cfg.map_size)
        p["subcenters"] = L.SubCenterBank.random(2, loss_cfg.n_subcenters, h, rng).centers
    return TinyModel(recipe, input_dim, hidden, p)


# --------------------------------------------------------------------------
# Forward / backward


def _encode(p, name, x):
    if f"{name}.W" not in p:
        return x
    return np.tanh(x @ p[f"{name}.W"] + p[f"{name}.b"])


def _encode_back(p, name, x, h, dh, g):
    if f"{name}.W" not in p:
        return
    da = dh * (1 - h * h)
    g[f"{name}.W"] += x.T @ da
    g[f"{name}.b"] += da.sum(axis=0)


def _dense(p, name, h):
    return h @ p[f"{name}.W"] + p[f"{name}.b"]


def _dense_back(p, name, h, dz, g):
    g[f"{name}.W"] += h.T @ dz
    g[f"{name}.b"] += dz.sum(axis=0)
    return dz @ p[f"{name}.W"].T


def _class_targets(batch, n):
    t = batch.get("target")
    return np.asarray(batch["y"], dtype=int) if t is None else np.asarray(t, dtype=float).reshape(n, 2)


def _max_cos(h, centers):
    """Per-row best cosine to the raw ``centers`` (K, d); returns cos, argmax, |h|, unit h, |c|, unit c."""
    hn = np.linalg.norm(h, axis=1, keepdims=True)
    if (hn == 0).any():
        raise ValueError("zero feature in angular head")
    hu = h / hn
    cn = np.linalg.norm(centers, axis=1, keepdims=True)
    cu = centers / cn
    cos_all = hu @ cu.T
    k = cos_all.argmax(axis=1)
    return cos_all[np.arange(len(h)), k], k, hn, hu, cn, cu


def _forward(model: TinyModel, batch: Mapping, params=None, lcfg: LossConfig | None = None,
             grads: dict | None = None, grl_lambda: float = 1.0):
    """Loss parts for the recipe; when ``grads`` is given, accumulate weighted gradients into it."""
    p = model.params if params is None else params
    lcfg = lcfg or LossConfig()
    x = np.asarray(batch["x"], dtype=float)
    y = np.asarray(batch["y"], dtype=int)
    n = len(x)
    if n == 0:
        raise ValueError("empty batch")
    if x.shape[1] != model.input_dim:
        raise ValueError(f"feature dimension {x.shape[1]} does not match model input {model.input_dim}")
    w = RECIPE_WEIGHTS[model.recipe]
    parts: dict[str, L.LossResult] = {}
    back = grads is not None
    r = model.recipe

    if r in ("plain", "ctel", "hexianhua"):
        h = _encode(p, "enc", x)
        z = _dense(p, "cls", h)
        ce = L.cross_entropy(z, _class_targets(batch, n))
        parts["cls"] = ce
        dz = w["cls"] * ce.grad
        if r == "hexianhua":
            prob = L.softmax(z)[:, 1]
            fo = L.focal(prob, y, lcfg.focal_gamma)
            parts["focal"] = fo
            dp = w["focal"] * fo.grad * prob * (1 - prob)
            dz = dz + np.stack([-dp, dp], axis=1)
        if back:
            dh = _dense_back(p, "cls", h, dz, grads)
            _encode_back(p, "enc", x, h, dh, grads)
        if r == "ctel":
            xd = np.asarray(batch["domain_x"], dtype=float)
            yd = np.asarray(batch["domain_y"], dtype=int)
            if not ((yd == 0).any() and (yd == 1).any()):
                raise ValueError("adversarial step needs both quality domains in the batch")
            hd = _encode(p, "enc", xd)
            grl = L.GradientReversal(grl_lambda)
            zd = _dense(p, "dom", grl.forward(hd))
            adv = L.cross_entropy(zd, yd)
            parts["adv"] = adv
            if back:
                dhd = _dense_back(p, "dom", hd, w["adv"] * adv.grad, grads)
                _encode_back(p, "enc", xd, hd, grl.backward(dhd), grads)

    elif r == "opdai":
        ha, hb = _encode(p, "enc_a", x), _encode(p, "enc_b", x)
        hc = np.concatenate([ha, hb], axis=1)
        heads = {"focal1": ("mlp1", hc), "focal2": ("mlp2", ha), "focal3": ("mlp3", hb)}
        dhs = {}
        for term, (name, hin) in heads.items():
            prob = L.sigmoid(_dense(p, name, hin)[:, 0])
            fo = L.focal(prob, y, lcfg.focal_gamma)
            parts[term] = fo
            if back:
                dz = (w[term] * fo.grad * prob * (1 - prob))[:, None]
                dhs[term] = _dense_back(p, name, hin, dz, grads)
        if back:
            da = dhs["focal2"] + dhs["focal1"][:, : ha.shape[1]]
            db = dhs["focal3"] + dhs["focal1"][:, ha.shape[1]:]
            _encode_back(p, "enc_a", x, ha, da, grads)
            _encode_back(p, "enc_b", x, hb, db, grads)

    elif r == "chenyifan":
        hs = {b: _encode(p, f"enc_{b}", x) for b in PATCH_BRANCHES}
        hc = np.concatenate([hs[b] for b in PATCH_BRANCHES], axis=1)
        dh = {b: np.zeros_like(hs[b]) for b in PATCH_BRANCHES}
        for term, name, hin in [(b, f"head_{b}", hs[b]) for b in PATCH_BRANCHES] + [("concat", "head_concat", hc)]:
            prob = L.sigmoid(_dense(p, name, hin)[:, 0])
            loss = L.bce(prob, y)
            parts[term] = loss
            if back:
                dz = (w[term] * loss.grad * prob * (1 - prob))[:, None]
                dhin = _dense_back(p, name, hin, dz, grads)
                if term == "concat":
                    offset = 0
                    for b in PATCH_BRANCHES:
                        d = hs[b].shape[1]
                        dh[b] += dhin[:, offset: offset + d]
                        offset += d
                else:
                    dh[term] += dhin
        if back:
            for b in PATCH_BRANCHES:
                _encode_back(p, f"enc_{b}", x, hs[b], dh[b], grads)

    elif r == "ionetworks":
        h = _encode(p, "enc", x)
        m = L.sigmoid(_dense(p, "map", h))
        target_map = np.broadcast_to(y[:, None].astype(float), m.shape)
        pix = L.bce(m, target_map)
        parts["bce"] = pix
        centers = p["subcenters"][1]
        cos, k, hn, hu, cn, cu = _max_cos(h, centers)
        cos_c = np.clip(cos, -1.0, 1.0)
        theta = np.arccos(cos_c)
        ang = L.angular_margin_loss(theta, y)
        parts["ang"] = ang
        if back:
            dm = w["bce"] * pix.grad * m * (1 - m)
            dh = _dense_back(p, "map", h, dm, grads)
            inside = np.abs(cos) < 1.0
            dcos = w["ang"] * ang.grad * np.where(inside, -1.0 / np.sqrt(np.maximum(1 - cos_c**2, 1e-300)), 0.0)
            ck = cu[k]
            dh += dcos[:, None] * (ck - cos[:, None] * hu) / hn
            dc = dcos[:, None] * (hu - cos[:, None] * ck) / cn[k]
            np.add.at(grads["subcenters"][1], k, dc)
            _encode_back(p, "enc", x, h, dh, grads)
    return parts


def loss_value(model: TinyModel, batch: Mapping, params=None, terms: Sequence[str] | None = None,
               lcfg: LossConfig | None = None) -> float:
    """Weighted sum of the selected loss terms (all by default), without gradients."""
    parts = _forward(model, batch, params, lcfg)
    w = RECIPE_WEIGHTS[model.recipe]
    return float(sum(w[k] * parts[k].value for k in (terms or w)))


def forward_backward(model: TinyModel, batch: Mapping, lcfg: LossConfig | None = None,
                     grl_lambda: float | None = None):
    """Total recipe loss and analytic gradients for every parameter.

    ``batch`` holds ``x`` (n, d) and ``y`` (n,); ``target`` optionally
    replaces ``y`` with soft 2-way targets for the cross-entropy head. The
    ``ctel`` recipe also needs ``domain_x`` and ``domain_y`` (0 = train band,
    1 = dev band). Returns ``(loss, grads)`` where ``loss`` carries its parts.
    """
    lcfg = lcfg or LossConfig()
    lam = lcfg.grl_lambda if grl_lambda is None else grl_lambda
    grads = {k: np.zeros_like(v) for k, v in model.params.items()}
    parts = _forward(model, batch, None, lcfg, grads, lam)
    total = L.weighted_sum(RECIPE_WEIGHTS[model.recipe], parts)
    return total, grads


def predict(model: TinyModel, x, tta: bool = False, weights=(0.5, 0.5), params=None) -> np.ndarray:
    """Bona fide probability per row; with ``tta`` averages in the mirrored feature vector."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    p = model.eval_params() if params is None else params
    scores = _scores(model.recipe, p, x)
    if tta:
        scores = tta_flip_average(scores, _scores(model.recipe, p, mirror_features(x)), weights)
    return np.asarray(scores, dtype=float)


def mirror_features(x: np.ndarray) -> np.ndarray:
    """Feature-level stand-in for a horizontal image flip."""
    return np.asarray(x)[..., ::-1]


def _scores(recipe, p, x):
    if recipe in ("plain", "ctel", "hexianhua"):
        return L.softmax(_dense(p, "cls", _encode(p, "enc", x)))[:, 1]
    if recipe == "opdai":
        hc = np.concatenate([_encode(p, "enc_a", x), _encode(p, "enc_b", x)], axis=1)
        return L.sigmoid(_dense(p, "mlp1", hc)[:, 0])
    if recipe == "chenyifan":
        hc = np.concatenate([_encode(p, f"enc_{b}", x) for b in PATCH_BRANCHES], axis=1)
        return L.sigmoid(_dense(p, "head_concat", hc)[:, 0])
    return L.sigmoid(_dense(p, "map", _encode(p, "enc", x))).mean(axis=1)


def features(model: TinyModel, x) -> np.ndarray:
    """Output of the first encoder, used for the feature queue."""
    p = model.eval_params()
    name = model.encoder_names()[0] if model.encoder_names() else "enc"
    return _encode(p, name, np.atleast_2d(np.asarray(x, dtype=float)))


# --------------------------------------------------------------------------
# Optimizers


@dataclass
class OptimizerState:
    kind: str
    lr: float
    momentum: float = 0.9
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    buffers: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def from_config(cls, cfg: OptimizerConfig) -> "OptimizerState":
        return cls(cfg.kind, cfg.lr, cfg.momentum, tuple(cfg.betas), cfg.eps, cfg.weight_decay)


def _check_aligned(params, grads):
    if set(params) != set(grads):
        raise ValueError("parameter and gradient names differ")
    for k in params:
        if np.shape(params[k]) != np.shape(grads[k]):
            raise ValueError(f"shape mismatch for {k}: {np.shape(params[k])} vs {np.shape(grads[k])}")


def sgd_momentum_step(state: OptimizerState, params, grads, frozen=frozenset(), lr=None):
    """``v <- m v + g``; ``p <- p - lr v``. Frozen parameters are returned untouched."""
    _check_aligned(params, grads)
    lr = state.lr if lr is None else lr
    vel = state.buffers.setdefault("velocity", {})
    out = {}
    for k, p in params.items():
        if k in frozen:
            out[k] = p
            continue
        v = state.momentum * vel.get(k, np.zeros_like(p)) + grads[k]
        vel[k] = v
        out[k] = p - lr * v
    state.t += 1
    return out


def adamw_step(state: OptimizerState, params, grads, frozen=frozenset(), lr=None):
    """Adam with bias correction and decoupled weight decay ``p <- p (1 - lr wd)``."""
    _check_aligned(params, grads)
    lr = state.lr if lr is None else lr
    b1, b2 = state.betas
    if not (0 < b1 < 1 and 0 < b2 < 1):
        raise ValueError("betas must be in (0, 1)")
    m_buf = state.buffers.setdefault("m", {})
    v_buf = state.buffers.setdefault("v", {})
    state.t += 1
    t = state.t
    out = {}
    for k, p in params.items():
        if k in frozen:
            out[k] = p
            continue
        g = grads[k]
        m = b1 * m_buf.get(k, np.zeros_like(p)) + (1 - b1) * g
        v = b2 * v_buf.get(k, np.zeros_like(p)) + (1 - b2) * g * g
        m_buf[k], v_buf[k] = m, v
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        out[k] = p * (1 - lr * state.weight_decay) - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return out


def optimizer_step(state: OptimizerState, params, grads, frozen=frozenset(), lr=None):
    if state.kind == "sgd_momentum":
        return sgd_momentum_step(state, params, grads, frozen, lr)
    return adamw_step(state, params, grads, frozen, lr)


# --------------------------------------------------------------------------
# Training


@dataclass
class SplitData:
    ids: list[str]
    x: np.ndarray
    y: np.ndarray

    def __len__(self):
        return len(self.ids)


def split_data(records: Sequence[SampleRecord], manifest: ProtocolManifest | None = None) -> dict[str, SplitData]:
    manifest = manifest or build_protocol3(records)
    by_id = {r.sample_id: r for r in records}
    out = {}
    for split in ("train", "dev", "test"):
        ids = list(manifest.ids(split))
        missing = [i for i in ids if i not in by_id or by_id[i].feature is None]
        if missing:
            raise ConfigError(f"{split}: {len(missing)} ids without a feature vector, e.g. {missing[:3]}")
        dim = len(records[0].feature) if records else 0
        x = np.array([by_id[i].feature for i in ids], dtype=float).reshape(len(ids), dim)
        y = np.array([by_id[i].label.as_int for i in ids], dtype=int)
        out[split] = SplitData(ids, x, y)
    return out


class _Runner:
    """One training run: owns the model, optimizer and strategy state."""

    def __init__(self, config: TrainConfig, data: dict[str, SplitData]):
        config.validate()
        self.cfg = config
        self.data = data
        tr = data["train"]
        for split in ("train", "dev"):
            ys = data[split].y
            if not ((ys == 0).any() and (ys == 1).any()):
                raise ConfigError(f"{split} split must contain both classes")
        self.rng = np.random.default_rng(config.seed)
        self.model = init_model(config.recipe, tr.x.shape[1], config.hidden, config.seed, config.loss)
        self.opt = OptimizerState.from_config(config.optimizer)
        self.index = {sid: i for i, sid in enumerate(tr.ids)}
        s = config.strategy
        self.pts: PtsState | None = None
        if s.pts is not None:
            self.pts = pts_init(dict(zip(tr.ids, tr.y.tolist())), s.pts.initial_rate, config.seed, s.pts.decay)
        self.dfq: DfqState | None = None
        if s.dfq is not None:
            neg = features(self.model, tr.x[tr.y == 0])
            self.dfq = dfq_init(neg.mean(axis=0), s.dfq.capacity, s.dfq.alpha, s.dfq.scale)
        if s.ema_decay is not None:
            self.model.ema = {k: v.copy() for k, v in self.model.params.items()}
        self.history: list[dict] = []
        self._dev_cursor = 0

    def lr(self, epoch: int) -> float:
        return self.cfg.optimizer.lr if self.cfg.schedule is None else lr_at(self.cfg.schedule, epoch)

    def _active_indices(self) -> np.ndarray:
        tr = self.data["train"]
        ids = sorted(self.pts.train_ids, key=self.index.__getitem__) if self.pts else list(tr.ids)
        if self.cfg.strategy.balance:
            labelled = [(i, int(tr.y[self.index[i]])) for i in ids]
            ids = [i for i, _ in max_upsample(labelled, int(self.rng.integers(2**31)))]
        return np.array([self.index[i] for i in ids], dtype=int)

    def _batch(self, idx: np.ndarray) -> dict:
        tr = self.data["train"]
        b = {"x": tr.x[idx], "y": tr.y[idx]}
        s = self.cfg.strategy
        if self.cfg.recipe == "plain" and (s.mixup_alpha is not None or s.label_smoothing):
            t = np.eye(2)[b["y"]]
            if s.label_smoothing:
                t = label_smoothing(t, s.label_smoothing)
            if s.mixup_alpha is not None:
                perm = self.rng.permutation(len(idx))
                b["x"], t = mixup(b["x"], t, b["x"][perm], t[perm], s.mixup_alpha, self.rng)
            b["target"] = t
        if self.cfg.recipe == "ctel":
            dev = self.data["dev"]
            pick = (self._dev_cursor + np.arange(len(idx))) % len(dev)
            self._dev_cursor = int((self._dev_cursor + len(idx)) % len(dev))
            b["domain_x"] = np.concatenate([b["x"], dev.x[pick]])
            b["domain_y"] = np.concatenate([np.zeros(len(idx), int), np.ones(len(idx), int)])
        return b

    def _step(self, batch: dict, lr: float, frozen) -> L.LossResult:
        loss, grads = forward_backward(self.model, batch, self.cfg.loss)
        m = self.model
        m.params = optimizer_step(self.opt, m.params, grads, frozen | m.frozen, lr)
        if "subcenters" in m.params and "subcenters" not in frozen:
            c = m.params["subcenters"]
            m.params["subcenters"] = c / np.linalg.norm(c, axis=-1, keepdims=True)
        if m.ema is not None:
            m.ema = ema_update(m.ema, m.params, self.cfg.strategy.ema_decay)
        if self.dfq is not None:
            neg = batch["x"][np.asarray(batch["y"]) == 0]
            for f in _encode(m.params, m.encoder_names()[0] if m.encoder_names() else "enc", neg):
                log0, _ = dfq_logits(f, self.dfq)
                dfq_update(self.dfq, f, log0)
        return loss

    def run_epoch(self, epoch: int, batch_size: int, frozen=frozenset()) -> dict:
        active = self._active_indices()
        order = active[self.rng.permutation(len(active))]
        lr = self.lr(epoch)
        totals: dict[str, float] = {}
        n_batches = 0
        loss_sum = 0.0
        for start in range(0, len(order), batch_size):
            loss = self._step(self._batch(order[start: start + batch_size]), lr, frozen)
            loss_sum += loss.value
            for k, part in loss.parts.items():
                totals[k] = totals.get(k, 0.0) + part.value
            n_batches += 1
        rec = {
            "epoch": epoch,
            "lr": lr,
            "loss": loss_sum / n_batches,
            "components": {k: v / n_batches for k, v in sorted(totals.items())},
            "n_train": int(len(active)),
            "batch_size": batch_size,
        }
        rec.update(self.dev_metrics())
        if self.pts is not None:
            rec["pts_rate"] = self.pts.rate
            rec["pts_train"] = len(self.pts.train_ids)
            rec["pts_pending"] = len(self.pts.pending_ids)
            if self.pts.pending_ids:
                tr = self.data["train"]
                pend = sorted(self.pts.pending_ids, key=self.index.__getitem__)
                sc = predict(self.model, tr.x[[self.index[i] for i in pend]])
                self.pts = pts_step(self.pts, dict(zip(pend, sc.tolist())))
            else:
                self.pts = PtsState(self.pts.train_ids, self.pts.pending_ids, self.pts.labels,
                                    self.pts.rate * self.pts.decay, self.pts.decay, self.pts.step + 1)
        if self.dfq is not None:
            rec["dfq_queue"] = len(self.dfq.queue)
        self.history.append(rec)
        log.debug("epoch %d loss %.6f dev_auc %.4f", epoch, rec["loss"], rec["dev_auc"])
        return rec

    def dev_metrics(self) -> dict:
        dev = self.data["dev"]
        scores = predict(self.model, dev.x, tta=self.cfg.strategy.tta)
        rep = evaluate_split(dict(zip(dev.ids, scores.tolist())), dict(zip(dev.ids, dev.y.tolist())))
        return {
            "dev_loss": L.bce(scores, dev.y).value,
            "dev_auc": rep.auc,
            "dev_eer": rep.eer,
            "dev_acer": rep.acer,
            "dev_threshold": rep.threshold,
        }


def train(config: TrainConfig, records: Sequence[SampleRecord],
          manifest: ProtocolManifest | None = None) -> tuple[TinyModel, list[dict]]:
    """Run ``config.epochs`` epochs and return the model with its per-epoch history.

    History rows carry the learning rate, mean training loss and its parts,
    dev-set AUC/EER/ACER, and PTS/DFQ state when those strategies are on.
    """
    runner = _Runner(config, split_data(records, manifest))
    patience = config.strategy.early_stopping_patience
    for epoch in range(config.epochs):
        runner.run_epoch(epoch, config.batch_size)
        if patience and early_stop([h["dev_loss"] for h in runner.history], patience):
            runner.history[-1]["early_stopped"] = True
            break
    return runner.model, runner.history


def two_stage_train(config: TrainConfig, records: Sequence[SampleRecord],
                    manifest: ProtocolManifest | None = None) -> tuple[TinyModel, list[dict]]:
    """Head-only pre-training with frozen encoders, then whole-network fine-tuning.

    Stage 2 stops once the epoch's mean total loss drops below
    ``two_stage.loss_threshold`` or after ``stage2_max_epochs``.
    """
    ts = config.two_stage
    runner = _Runner(config, split_data(records, manifest))
    encoders = {k for k in runner.model.params if k.startswith("enc")}
    epoch = 0
    for _ in range(ts.stage1_epochs):
        rec = runner.run_epoch(epoch, ts.stage1_batch_size, frozen=frozenset(encoders))
        rec["stage"] = 1
        epoch += 1
    for _ in range(ts.stage2_max_epochs):
        rec = runner.run_epoch(epoch, ts.stage2_batch_size)
        rec["stage"] = 2
        epoch += 1
        if rec["loss"] < ts.loss_threshold:
            rec["threshold_met"] = True
            break
    return runner.model, runner.history


def history_to_jsonl(history: Sequence[dict]) -> str:
    return "".join(json.dumps(h, sort_keys=True) + "\n" for h in history)


def score_split(model: TinyModel, data: SplitData, tta: bool = False) -> dict[str, float]:
    return dict(zip(data.ids, predict(model, data.x, tta=tta).tolist()))
