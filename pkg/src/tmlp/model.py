"""Tabular network with a tree-frequency feature gate and prunable blocks.

The model tokenizes each feature into a d-vector, scales feature tokens by
per-sample frequencies taken from a boosted-tree ensemble, passes the token
stack through one or more gated-MLP blocks, and predicts from the leading
summary token. Structured sparsity over the block widths is learned with
hard-concrete gates driven by a Lagrangian controller, and the trained gates
are baked into a smaller sliced network on export.

Shapes use B for batch, T = 1 + F for tokens (summary token first), d for the
token width and d' for the block channel width. W1 is (d, 2d'), W2 (d', d),
and W3 (T, T) mixes across tokens within each channel. The in-block
normalization of the U half runs over the token axis with per-channel
parameters, which makes channel slicing commute with the forward pass.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

from . import nn
from .data import Dataset, FeatureSchema, Preprocessor, destandardize_y, feature_matrix
from .errors import (
    BadProbability,
    FeatureCountMismatch,
    IndexOutOfVocabulary,
    LabelOutOfRange,
    ShapeMismatch,
    UnknownTask,
)
from .gbdt import GbdtConfig, GbdtModel, fit_gbdt
from .metrics import rmse
from .routing import (
    FrequencyCache,
    RoutingMatrices,
    batch_frequency,
    compile_model,
    normalize_frequency,
)

# Hard-concrete distribution constants: temperature and stretch interval.
HC_BETA = 2.0 / 3.0
HC_GAMMA = -0.1
HC_ZETA = 1.1

# Fixed stream ids; ensemble branches shift these by a per-branch offset.
STREAM_INIT = 1
STREAM_SHUFFLE = 2
STREAM_FEATURE_GATE = 3
STREAM_HIDDEN_GATE = 4
STREAM_DROPOUT = 5

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class TrainConfig:
    """Network and optimization settings. Defaults are the fixed recipe."""

    d: int = 1024
    d_prime: int = 676
    n_blocks: int | None = None  # resolved per task: 3 for multiclass, else 1
    target_sparsity: float = 0.33
    residual_dropout: float = 0.1
    learning_rate: float = 1e-4
    batch_size: int = 256
    max_epochs: int = 500
    patience: int = 16
    seed: int = 0
    gate_enabled: bool = True
    sparsity_enabled: bool = True
    gate_learning_rate: float = 3e-2
    multiplier_learning_rate: float = 5e-2
    admission_band: float = 0.02
    weight_decay: float = 1e-5
    gbdt: GbdtConfig = field(default_factory=GbdtConfig)

    def resolved_blocks(self, task: str) -> int:
        if self.n_blocks is not None:
            return int(self.n_blocks)
        return 3 if task == "multiclass" else 1

    def to_dict(self) -> dict:
        return {
            "d": self.d,
            "d_prime": self.d_prime,
            "n_blocks": self.n_blocks,
            "target_sparsity": self.target_sparsity,
            "residual_dropout": self.residual_dropout,
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "max_epochs": self.max_epochs,
            "patience": self.patience,
            "seed": self.seed,
            "gate_enabled": self.gate_enabled,
            "sparsity_enabled": self.sparsity_enabled,
            "gate_learning_rate": self.gate_learning_rate,
            "multiplier_learning_rate": self.multiplier_learning_rate,
            "admission_band": self.admission_band,
            "weight_decay": self.weight_decay,
            "gbdt": self.gbdt.to_dict(),
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainConfig":
        known = {f.name for f in cls.__dataclass_fields__.values()}  # type: ignore[attr-defined]
        kwargs = {k: v for k, v in obj.items() if k in known and k != "gbdt"}
        if "gbdt" in obj:
            kwargs["gbdt"] = GbdtConfig.from_dict(obj["gbdt"])
        return cls(**kwargs)


@dataclass
class TokenizerParams:
    w_num: np.ndarray  # (F1, d)
    b_num: np.ndarray  # (F1, d)
    embeddings: list[np.ndarray]  # per categorical feature: (card_j, d)
    cls: np.ndarray  # (d,)


@dataclass
class BlockParams:
    ln1_gain: np.ndarray  # (d,)
    ln1_bias: np.ndarray  # (d,)
    w1: np.ndarray  # (d_h, 2 d_c); d_h == d and d_c == d' unless sliced
    sgu_gain: np.ndarray  # (d_c,)
    sgu_bias: np.ndarray  # (d_c,)
    w3: np.ndarray  # (T, T)
    b3: np.ndarray  # (T,)
    w2: np.ndarray  # (d_c, d)


@dataclass
class HeadParams:
    ln_gain: np.ndarray  # (d,)
    ln_bias: np.ndarray  # (d,)
    w: np.ndarray  # (d, out)
    b: np.ndarray  # (out,)


@dataclass
class GateParams:
    log_alpha_h: np.ndarray  # (d,)
    log_alpha_in: np.ndarray  # (d',)
    lam1: float = 0.0
    lam2: float = 0.0


@dataclass
class TmlpParams:
    tokenizer: TokenizerParams
    blocks: list[BlockParams]
    head: HeadParams
    gates: GateParams | None
    # Set on sliced exports: token channels gathered after each block's first
    # normalization, and the kept channel ids (bookkeeping for reports).
    hidden_idx: np.ndarray | None = None
    channel_idx: np.ndarray | None = None

    @property
    def d(self) -> int:
        return len(self.tokenizer.cls)

    @property
    def n_tokens(self) -> int:
        return len(self.blocks[0].b3)

    @property
    def dtype(self):
        return self.tokenizer.cls.dtype


def init_params(
    f1: int,
    cardinalities: tuple[int, ...],
    n_tokens: int,
    n_blocks: int,
    out_dim: int,
    cfg: TrainConfig,
    rng: nn.RngStream,
    dtype=np.float32,
) -> TmlpParams:
    """Draws fresh parameters. The draw order is part of the seed contract."""
    d, dp = cfg.d, cfg.d_prime

    def unif(limit, shape):
        return ((rng.uniform(size=shape) * 2.0 - 1.0) * limit).astype(dtype)

    lim_tok = 1.0 / math.sqrt(d)
    tok = TokenizerParams(
        w_num=unif(lim_tok, (f1, d)),
        b_num=unif(lim_tok, (f1, d)),
        embeddings=[unif(lim_tok, (card, d)) for card in cardinalities],
        cls=unif(lim_tok, (d,)),
    )
    blocks = []
    lim_w1 = math.sqrt(6.0 / (d + 2 * dp))
    lim_w2 = math.sqrt(6.0 / (dp + d))
    for _ in range(n_blocks):
        blocks.append(
            BlockParams(
                ln1_gain=np.ones(d, dtype=dtype),
                ln1_bias=np.zeros(d, dtype=dtype),
                w1=unif(lim_w1, (d, 2 * dp)),
                sgu_gain=np.ones(dp, dtype=dtype),
                sgu_bias=np.zeros(dp, dtype=dtype),
                w3=rng.normal(0.0, 1e-2, size=(n_tokens, n_tokens)).astype(dtype),
                b3=np.ones(n_tokens, dtype=dtype),
                w2=unif(lim_w2, (dp, d)),
            )
        )
    head = HeadParams(
        ln_gain=np.ones(d, dtype=dtype),
        ln_bias=np.zeros(d, dtype=dtype),
        w=unif(math.sqrt(6.0 / (d + out_dim)), (d, out_dim)),
        b=np.zeros(out_dim, dtype=dtype),
    )
    gates = None
    if cfg.sparsity_enabled:
        gates = GateParams(
            log_alpha_h=rng.normal(2.0, 0.1, size=d).astype(dtype),
            log_alpha_in=rng.normal(2.0, 0.1, size=dp).astype(dtype),
        )
    return TmlpParams(tokenizer=tok, blocks=blocks, head=head, gates=gates)


def model_param_dict(params: TmlpParams) -> dict[str, np.ndarray]:
    """Named trainable arrays, excluding the sparsity gate parameters."""
    out: dict[str, np.ndarray] = {
        "tok.w_num": params.tokenizer.w_num,
        "tok.b_num": params.tokenizer.b_num,
        "tok.cls": params.tokenizer.cls,
    }
    for j, emb in enumerate(params.tokenizer.embeddings):
        out[f"tok.emb{j}"] = emb
    for i, blk in enumerate(params.blocks):
        out[f"blk{i}.ln1_gain"] = blk.ln1_gain
        out[f"blk{i}.ln1_bias"] = blk.ln1_bias
        out[f"blk{i}.w1"] = blk.w1
        out[f"blk{i}.sgu_gain"] = blk.sgu_gain
        out[f"blk{i}.sgu_bias"] = blk.sgu_bias
        out[f"blk{i}.w3"] = blk.w3
        out[f"blk{i}.b3"] = blk.b3
        out[f"blk{i}.w2"] = blk.w2
    out["head.ln_gain"] = params.head.ln_gain
    out["head.ln_bias"] = params.head.ln_bias
    out["head.w"] = params.head.w
    out["head.b"] = params.head.b
    return out


def gate_param_dict(gates: GateParams) -> dict[str, np.ndarray]:
    return {"log_alpha_h": gates.log_alpha_h, "log_alpha_in": gates.log_alpha_in}


def copy_params(params: TmlpParams) -> TmlpParams:
    out = copy.deepcopy(params)
    return out


# ---------------------------------------------------------------------------
# tokenizer and feature gate


def tokenize(x_num: np.ndarray, x_cat: np.ndarray, tok: TokenizerParams) -> np.ndarray:
    """Stacks [summary, numerical tokens, categorical tokens] to (B, T, d)."""
    dtype = tok.cls.dtype
    b = x_num.shape[0] if x_num.ndim == 2 else x_cat.shape[0]
    d = len(tok.cls)
    f1 = tok.w_num.shape[0]
    if x_num.shape[1] != f1:
        raise FeatureCountMismatch(f"expected {f1} numerical features, got {x_num.shape[1]}")
    if x_cat.shape[1] != len(tok.embeddings):
        raise FeatureCountMismatch(
            f"expected {len(tok.embeddings)} categorical features, got {x_cat.shape[1]}"
        )
    out = np.empty((b, 1 + f1 + len(tok.embeddings), d), dtype=dtype)
    out[:, 0, :] = tok.cls
    if f1:
        xn = np.ascontiguousarray(x_num, dtype=dtype)
        nt = out[:, 1 : 1 + f1, :]
        np.multiply(xn[:, :, None], tok.w_num[None, :, :], out=nt)
        nt += tok.b_num[None, :, :]
    for j, emb in enumerate(tok.embeddings):
        codes = x_cat[:, j]
        if codes.size and (codes.min() < 0 or codes.max() >= emb.shape[0]):
            raise IndexOutOfVocabulary(
                f"categorical feature {j}: code outside [0, {emb.shape[0]})"
            )
        out[:, 1 + f1 + j, :] = emb[codes]
    return out


def tokenize_bwd(
    d_e: np.ndarray, x_num: np.ndarray, x_cat: np.ndarray, tok: TokenizerParams
) -> dict[str, np.ndarray]:
    dtype = tok.cls.dtype
    f1 = tok.w_num.shape[0]
    grads: dict[str, np.ndarray] = {"tok.cls": d_e[:, 0, :].sum(axis=0)}
    d_num = d_e[:, 1 : 1 + f1, :]
    if f1:
        xn = np.ascontiguousarray(x_num, dtype=dtype)
        grads["tok.w_num"] = np.einsum("bj,bjd->jd", xn, d_num)
        grads["tok.b_num"] = d_num.sum(axis=0)
    else:
        grads["tok.w_num"] = np.zeros_like(tok.w_num)
        grads["tok.b_num"] = np.zeros_like(tok.b_num)
    for j, emb in enumerate(tok.embeddings):
        g = np.zeros_like(emb)
        np.add.at(g, x_cat[:, j], d_e[:, 1 + f1 + j, :])
        grads[f"tok.emb{j}"] = g
    return grads


def apply_gate(
    e_features: np.ndarray,
    alpha_hat_row: np.ndarray,
    mode: str,
    rng: nn.RngStream | None = None,
) -> np.ndarray:
    """Scales one sample's feature rows (F, d) by its frequencies.

    Training samples a keep/drop coin per feature from alpha_hat; inference
    multiplies by the probabilities themselves. The summary token is handled
    by the caller and never passes through here.
    """
    alpha = np.asarray(alpha_hat_row, dtype=np.float64)
    if ((alpha < 0.0) | (alpha > 1.0)).any():
        raise BadProbability("feature frequencies outside [0, 1]")
    if alpha.shape != (e_features.shape[0],):
        raise ShapeMismatch(f"gate {alpha.shape} vs rows {e_features.shape}")
    if mode == "train":
        keep = rng.bernoulli(alpha)
        return e_features * keep[:, None].astype(e_features.dtype)
    return e_features * alpha[:, None].astype(e_features.dtype)


def _gate_matrix(alpha_hat: np.ndarray, mode: str, rng: nn.RngStream | None, dtype) -> np.ndarray:
    if mode == "train":
        return rng.bernoulli(alpha_hat).astype(dtype)
    return alpha_hat.astype(dtype)


# ---------------------------------------------------------------------------
# hard-concrete gates and the sparsity objective


def hard_concrete(
    log_alpha: np.ndarray,
    beta: float = HC_BETA,
    gamma: float = HC_GAMMA,
    zeta: float = HC_ZETA,
    mode: str = "infer",
    rng: nn.RngStream | None = None,
):
    """Stretched-sigmoid relaxation of binary gates.

    Returns (z, expected_open) where expected_open is the probability that a
    sampled gate lands strictly above zero.
    """
    la = np.asarray(log_alpha, dtype=np.float64)
    expected = nn.sigmoid(la - beta * math.log(-gamma / zeta))
    if mode == "train":
        u = np.clip(rng.uniform(size=la.shape), 1e-12, 1.0 - 1e-12)
        s = nn.sigmoid((np.log(u) - np.log1p(-u) + la) / beta)
    else:
        s = nn.sigmoid(la)
    z = np.clip(s * (zeta - gamma) + gamma, 0.0, 1.0)
    return z, expected


def _gate_draw(log_alpha: np.ndarray, mode: str, rng: nn.RngStream | None, dtype):
    """One gate vector and its derivative w.r.t. log_alpha.

    mode "sample" draws the stochastic relaxation; "soft" is the deterministic
    inference value. The derivative is zeroed where the clamp is active.
    """
    la = np.asarray(log_alpha, dtype=np.float64)
    if mode == "sample":
        u = np.clip(rng.uniform(size=la.shape), 1e-12, 1.0 - 1e-12)
        s = nn.sigmoid((np.log(u) - np.log1p(-u) + la) / HC_BETA)
        slope = (HC_ZETA - HC_GAMMA) * s * (1.0 - s) / HC_BETA
    elif mode == "soft":
        s = nn.sigmoid(la)
        slope = (HC_ZETA - HC_GAMMA) * s * (1.0 - s)
    else:
        raise ValueError(f"unknown gate mode {mode!r}")
    pre = s * (HC_ZETA - HC_GAMMA) + HC_GAMMA
    interior = (pre > 0.0) & (pre < 1.0)
    z = np.clip(pre, 0.0, 1.0)
    return z.astype(dtype), (slope * interior).astype(dtype)


def expected_open(log_alpha: np.ndarray) -> np.ndarray:
    la = np.asarray(log_alpha, dtype=np.float64)
    return nn.sigmoid(la - HC_BETA * math.log(-HC_GAMMA / HC_ZETA))


def expected_sparsity(gates: GateParams, d: int, d_prime: int) -> float:
    """Expected fraction of W1/W2 weights kept by the current gates."""
    eh = float(expected_open(gates.log_alpha_h).sum())
    ei = float(expected_open(gates.log_alpha_in).sum())
    return (eh * 2 * d_prime + ei * d) / (d * 2 * d_prime + d_prime * d)


def lagrangian_penalty(s_hat: float, target: float, lam1: float, lam2: float) -> float:
    gap = s_hat - target
    return lam1 * gap + lam2 * gap * gap


def sparsity_penalty_grads(
    gates: GateParams, d: int, d_prime: int, target: float
) -> tuple[np.ndarray, np.ndarray, float]:
    """Penalty gradient w.r.t. both log_alpha vectors, plus current s_hat."""
    la_h = np.asarray(gates.log_alpha_h, dtype=np.float64)
    la_in = np.asarray(gates.log_alpha_in, dtype=np.float64)
    shift = HC_BETA * math.log(-HC_GAMMA / HC_ZETA)
    eh = nn.sigmoid(la_h - shift)
    ei = nn.sigmoid(la_in - shift)
    denom = float(d * 2 * d_prime + d_prime * d)
    s_hat = (eh.sum() * 2 * d_prime + ei.sum() * d) / denom
    common = gates.lam1 + 2.0 * gates.lam2 * (s_hat - target)
    d_h = common * (2 * d_prime / denom) * eh * (1.0 - eh)
    d_in = common * (d / denom) * ei * (1.0 - ei)
    return d_h, d_in, float(s_hat)


# per-multiplier ascent rates, relative to the configured base rate. The
# quadratic coefficient supplies the steering force: it ramps while retention
# is far from target and its pull fades linearly as the gap closes, so it
# cannot drive retention through the target. The linear coefficient only
# trims residual bias; a large rate here would integrate the whole approach
# and keep pushing long after the target is reached.
_LAM1_RATE = 0.02


def multiplier_ascent(gates: GateParams, s_hat: float, target: float, lr: float) -> None:
    """One gradient-ascent step on the penalty's multipliers."""
    gap = s_hat - target
    gates.lam1 += lr * _LAM1_RATE * gap
    gates.lam2 += lr * gap * gap


def kept_indices(log_alpha: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k largest gate parameters, ascending; ties keep the
    lowest index."""
    order = np.argsort(-np.asarray(log_alpha, dtype=np.float64), kind="stable")
    return np.sort(order[:k]).astype(np.int64)


def _topk_mask(log_alpha: np.ndarray, k: int, dtype) -> np.ndarray:
    mask = np.zeros(len(log_alpha), dtype=dtype)
    mask[kept_indices(log_alpha, k)] = 1.0
    return mask


def eval_masks(params: TmlpParams, cfg: TrainConfig):
    """Deterministic binary gate vectors used by evaluation and prediction.

    These are exactly the masks the structural export bakes in, so the
    validation metric tracks the deliverable. Sliced or gate-free models get
    (None, None).
    """
    if params.gates is None:
        return None, None
    d = params.d
    dp = len(params.gates.log_alpha_in)
    k_h = int(round(cfg.target_sparsity * d))
    k_in = int(round(cfg.target_sparsity * dp))
    dtype = params.dtype
    return (
        _topk_mask(params.gates.log_alpha_h, k_h, dtype),
        _topk_mask(params.gates.log_alpha_in, k_in, dtype),
    )


def kept_index_sets(params: TmlpParams, cfg: TrainConfig):
    """Top-k gather indices for both gated sides plus W1's paired columns."""
    dp = len(params.gates.log_alpha_in)
    k_h = int(round(cfg.target_sparsity * params.d))
    k_in = int(round(cfg.target_sparsity * dp))
    idx_h = kept_indices(params.gates.log_alpha_h, k_h)
    idx_in = kept_indices(params.gates.log_alpha_in, k_in)
    col_idx = np.concatenate([idx_in, dp + idx_in])
    return idx_h, idx_in, col_idx


def _sliced_block_views(params: TmlpParams, cfg: TrainConfig):
    """Narrowed per-block weights for fast deterministic evaluation.

    Gathers the kept rows/columns and shares everything untouched; the
    result is read-only and numerically the structural export's network.
    """
    idx_h, idx_in, col_idx = kept_index_sets(params, cfg)
    blocks = [
        BlockParams(
            ln1_gain=blk.ln1_gain, ln1_bias=blk.ln1_bias,
            w1=np.ascontiguousarray(blk.w1[np.ix_(idx_h, col_idx)]),
            sgu_gain=blk.sgu_gain[idx_in], sgu_bias=blk.sgu_bias[idx_in],
            w3=blk.w3, b3=blk.b3,
            w2=np.ascontiguousarray(blk.w2[idx_in]),
        )
        for blk in params.blocks
    ]
    return blocks, idx_h


# ---------------------------------------------------------------------------
# block forward/backward


def _mm(x3: np.ndarray, w: np.ndarray) -> np.ndarray:
    b, t, k = x3.shape
    return nn.matmul(x3.reshape(b * t, k), w).reshape(b, t, w.shape[1])


def _block_forward(
    e_in: np.ndarray,
    blk: BlockParams,
    z_h: np.ndarray | None,
    z_in: np.ndarray | None,
    hidden_idx: np.ndarray | None,
    drop_mask: np.ndarray | None,
    tape: dict | None,
) -> np.ndarray:
    dc = blk.w2.shape[0]
    a, ln1_cache = nn.layernorm(e_in, blk.ln1_gain, blk.ln1_bias)
    ah = a if hidden_idx is None else np.ascontiguousarray(a[:, :, hidden_idx])
    ag = ah if z_h is None else ah * z_h
    hpre = _mm(ag, blk.w1)
    cdf = hpre * _INV_SQRT2
    erf(cdf, out=cdf)
    cdf += 1.0
    cdf *= 0.5
    x = hpre * cdf
    u = x[:, :, :dc]
    v = x[:, :, dc:]
    uln, ln2_cache = nn.layernorm(u, blk.sgu_gain, blk.sgu_bias, axis=1, param_axis=2)
    m = np.tensordot(blk.w3, uln, axes=([1], [1])).transpose(1, 0, 2)
    m += blk.b3[None, :, None]
    s = m * v
    sg = s if z_in is None else s * z_in
    o = _mm(sg, blk.w2)
    if drop_mask is not None:
        o *= drop_mask
    out = e_in + o
    if tape is not None:
        tape.update(
            ln1=ln1_cache, ah=ah, ag=ag, hpre=hpre, cdf=cdf, v=v, uln=uln,
            ln2=ln2_cache, m=m, s=s, sg=sg, drop=drop_mask,
        )
    return out


def _block_backward(
    d_out: np.ndarray,
    tape: dict,
    blk: BlockParams,
    z_h: np.ndarray | None,
    z_in: np.ndarray | None,
    hidden_idx: np.ndarray | None,
    grads: dict[str, np.ndarray],
    prefix: str,
    dz_h_acc: np.ndarray | None,
    dz_in_acc: np.ndarray | None,
) -> np.ndarray:
    dc = blk.w2.shape[0]
    d_o = d_out if tape["drop"] is None else d_out * tape["drop"]
    s = tape["s"]
    d_sg, d_w2 = nn.matmul_bwd(d_o, tape["sg"], blk.w2)
    grads[prefix + "w2"] = d_w2
    if z_in is None:
        d_s = d_sg
    else:
        dz_in_acc += np.einsum("btc,btc->c", d_sg, s)
        d_s = d_sg * z_in
    d_m = d_s * tape["v"]
    d_v = d_s * tape["m"]
    uln = tape["uln"]
    grads[prefix + "w3"] = np.tensordot(d_m, uln, axes=([0, 2], [0, 2]))
    grads[prefix + "b3"] = d_m.sum(axis=(0, 2))
    d_uln = np.tensordot(blk.w3, d_m, axes=([0], [1])).transpose(1, 0, 2)
    d_u, d_g2, d_b2 = nn.layernorm_bwd(d_uln, tape["ln2"], blk.sgu_gain, axis=1, param_axis=2)
    grads[prefix + "sgu_gain"] = d_g2
    grads[prefix + "sgu_bias"] = d_b2
    d_x = np.concatenate([d_u, d_v], axis=2)
    hpre = tape["hpre"]
    q = hpre * hpre
    q *= -0.5
    np.exp(q, out=q)
    q *= _INV_SQRT_2PI
    q *= hpre
    q += tape["cdf"]
    q *= d_x
    d_hpre = q
    ah = tape["ah"]
    d_ag, d_w1 = nn.matmul_bwd(d_hpre, tape["ag"], blk.w1)
    grads[prefix + "w1"] = d_w1
    if z_h is None:
        d_ah = d_ag
    else:
        dz_h_acc += np.einsum("btd,btd->d", d_ag, ah)
        d_ah = d_ag * z_h
    if hidden_idx is None:
        d_a = d_ah
    else:
        d_a = np.zeros(d_out.shape, dtype=d_out.dtype)
        d_a[:, :, hidden_idx] = d_ah
    d_in, d_g1, d_b1 = nn.layernorm_bwd(d_a, tape["ln1"], blk.ln1_gain)
    grads[prefix + "ln1_gain"] = d_g1
    grads[prefix + "ln1_bias"] = d_b1
    return d_out + d_in


def sgu_block(
    e_in: np.ndarray,
    blk: BlockParams,
    z_h: np.ndarray | None = None,
    z_in: np.ndarray | None = None,
    dropout: float = 0.0,
    rng: nn.RngStream | None = None,
    training: bool = False,
) -> np.ndarray:
    """Single-sample block application on a (T, d) token stack."""
    drop = None
    if training and dropout > 0.0:
        keep = 1.0 - dropout
        drop = rng.bernoulli(keep, size=(1,) + e_in.shape).astype(e_in.dtype) / keep
    return _block_forward(e_in[None], blk, z_h, z_in, None, drop, None)[0]


# ---------------------------------------------------------------------------
# head and loss


def head_and_loss(e_cls: np.ndarray, head: HeadParams, y: np.ndarray, task: str):
    """Prediction and mean loss from the summary token batch (B, d).

    Classification returns (probabilities, cross entropy); regression returns
    (values in standardized units, mean squared error).
    """
    hln, _ = nn.layernorm(e_cls, head.ln_gain, head.ln_bias)
    hr = nn.relu(hln)
    logits = nn.matmul(hr, head.w) + head.b
    if task == "regression":
        pred = logits[:, 0]
        return pred, nn.mse(pred, y.astype(pred.dtype))
    out = head.w.shape[1]
    y = np.asarray(y)
    if y.size and (y.min() < 0 or y.max() >= out):
        raise LabelOutOfRange(f"labels outside [0, {out})")
    loss, probs = nn.softmax_xent(logits, y)
    return probs, loss


# ---------------------------------------------------------------------------
# full forward/backward


@dataclass
class RngSet:
    """Per-purpose generators for one training run."""

    shuffle: nn.RngStream
    feature_gate: nn.RngStream
    hidden_gate: nn.RngStream
    dropout: nn.RngStream

    @classmethod
    def create(cls, seed: int, offset: int = 0) -> "RngSet":
        return cls(
            shuffle=nn.RngStream(seed, STREAM_SHUFFLE + offset),
            feature_gate=nn.RngStream(seed, STREAM_FEATURE_GATE + offset),
            hidden_gate=nn.RngStream(seed, STREAM_HIDDEN_GATE + offset),
            dropout=nn.RngStream(seed, STREAM_DROPOUT + offset),
        )


def loss_and_grads(
    params: TmlpParams,
    cfg: TrainConfig,
    task: str,
    x_num: np.ndarray,
    x_cat: np.ndarray,
    y: np.ndarray,
    alpha_hat: np.ndarray | None,
    mode: str = "train",
    rngs: RngSet | None = None,
    slice_closed: bool = True,
):
    """One forward/backward pass over a batch.

    mode "train" samples the feature coins, the hard-concrete gates, and the
    dropout masks; mode "fd" is fully deterministic (soft gates, probability
    scaling, no dropout) so losses admit finite-difference probing.

    Channels whose gate value clamped to exactly zero touch neither the loss
    nor any gradient (the clamp also zeroes dz/dlog_alpha), so the block math
    runs on the open channels only and the dropped gradient rows/columns are
    scattered back as the exact zeros they are. slice_closed=False forces the
    full-width computation; results agree up to summation order.

    Returns (total_loss, data_loss, grads, gate_grads, s_hat).
    """
    if task not in ("binclass", "multiclass", "regression"):
        raise UnknownTask(f"unknown task {task!r}")
    if mode not in ("train", "fd"):
        raise ValueError(f"unknown mode {mode!r}")
    dtype = params.dtype
    tok = params.tokenizer

    e0 = tokenize(x_num, x_cat, tok)
    g = None
    e = e0
    if alpha_hat is not None:
        g = _gate_matrix(alpha_hat, "train" if mode == "train" else "infer",
                         rngs.feature_gate if mode == "train" else None, dtype)
        e[:, 1:, :] *= g[:, :, None]

    z_h = z_in = dzh = dzin = None
    if params.gates is not None:
        gate_mode = "sample" if mode == "train" else "soft"
        rng_hc = rngs.hidden_gate if mode == "train" else None
        z_h, dzh = _gate_draw(params.gates.log_alpha_h, gate_mode, rng_hc, dtype)
        z_in, dzin = _gate_draw(params.gates.log_alpha_in, gate_mode, rng_hc, dtype)

    run_blocks = params.blocks
    run_zh, run_zin, run_hidden = z_h, z_in, params.hidden_idx
    act_h = act_in = col_act = None
    if z_h is not None and slice_closed:
        open_h = np.flatnonzero(z_h)
        open_in = np.flatnonzero(z_in)
        dp = len(z_in)
        if len(open_h) < len(z_h) or len(open_in) < dp:
            act_h, act_in = open_h, open_in
            col_act = np.concatenate([act_in, dp + act_in])
            run_blocks = [
                BlockParams(
                    ln1_gain=blk.ln1_gain, ln1_bias=blk.ln1_bias,
                    w1=np.ascontiguousarray(blk.w1[np.ix_(act_h, col_act)]),
                    sgu_gain=blk.sgu_gain[act_in], sgu_bias=blk.sgu_bias[act_in],
                    w3=blk.w3, b3=blk.b3,
                    w2=np.ascontiguousarray(blk.w2[act_in]),
                )
                for blk in params.blocks
            ]
            run_zh = np.ascontiguousarray(z_h[act_h])
            run_zin = np.ascontiguousarray(z_in[act_in])
            run_hidden = act_h

    keep = 1.0 - cfg.residual_dropout
    tapes = []
    cur = e
    for blk in run_blocks:
        drop = None
        if mode == "train" and cfg.residual_dropout > 0.0:
            u = rngs.dropout.uniform(size=cur.shape)
            drop = (u < keep).astype(dtype)
            drop *= np.asarray(1.0 / keep, dtype=dtype)
        tape: dict = {}
        cur = _block_forward(cur, blk, run_zh, run_zin, run_hidden, drop, tape)
        tapes.append(tape)

    e_cls = cur[:, 0, :]
    hln, head_cache = nn.layernorm(e_cls, params.head.ln_gain, params.head.ln_bias)
    hr = nn.relu(hln)
    logits = nn.matmul(hr, params.head.w) + params.head.b

    if task == "regression":
        pred = logits[:, 0]
        yv = y.astype(dtype)
        data_loss = nn.mse(pred, yv)
        d_logits = nn.mse_bwd(pred, yv)[:, None]
    else:
        out = params.head.w.shape[1]
        yl = np.asarray(y)
        if yl.size and (yl.min() < 0 or yl.max() >= out):
            raise LabelOutOfRange(f"labels outside [0, {out})")
        data_loss, probs = nn.softmax_xent(logits, yl)
        d_logits = nn.softmax_xent_bwd(probs, yl).astype(dtype)

    s_hat = None
    total = data_loss
    if params.gates is not None and cfg.sparsity_enabled:
        pen_h, pen_in, s_hat = sparsity_penalty_grads(
            params.gates, params.d, len(params.gates.log_alpha_in), cfg.target_sparsity
        )
        total = data_loss + lagrangian_penalty(
            s_hat, cfg.target_sparsity, params.gates.lam1, params.gates.lam2
        )

    grads: dict[str, np.ndarray] = {}
    d_hr, d_w = nn.matmul_bwd(d_logits, hr, params.head.w)
    grads["head.w"] = d_w
    grads["head.b"] = d_logits.sum(axis=0)
    d_hln = nn.relu_bwd(d_hr, hln)
    d_cls, d_hg, d_hb = nn.layernorm_bwd(d_hln, head_cache, params.head.ln_gain)
    grads["head.ln_gain"] = d_hg
    grads["head.ln_bias"] = d_hb

    d_e = np.zeros_like(cur)
    d_e[:, 0, :] = d_cls
    dz_h_acc = np.zeros_like(run_zh) if z_h is not None else None
    dz_in_acc = np.zeros_like(run_zin) if z_in is not None else None
    for i in range(len(run_blocks) - 1, -1, -1):
        d_e = _block_backward(
            d_e, tapes[i], run_blocks[i], run_zh, run_zin, run_hidden,
            grads, f"blk{i}.", dz_h_acc, dz_in_acc,
        )

    if act_h is not None:
        for i, blk in enumerate(params.blocks):
            pre = f"blk{i}."
            w1 = np.zeros_like(blk.w1)
            w1[np.ix_(act_h, col_act)] = grads[pre + "w1"]
            grads[pre + "w1"] = w1
            w2 = np.zeros_like(blk.w2)
            w2[act_in] = grads[pre + "w2"]
            grads[pre + "w2"] = w2
            sg = np.zeros_like(blk.sgu_gain)
            sg[act_in] = grads[pre + "sgu_gain"]
            grads[pre + "sgu_gain"] = sg
            sb = np.zeros_like(blk.sgu_bias)
            sb[act_in] = grads[pre + "sgu_bias"]
            grads[pre + "sgu_bias"] = sb
        full_h = np.zeros_like(z_h)
        full_h[act_h] = dz_h_acc
        dz_h_acc = full_h
        full_in = np.zeros_like(z_in)
        full_in[act_in] = dz_in_acc
        dz_in_acc = full_in

    if g is not None:
        d_e[:, 1:, :] *= g[:, :, None]
    grads.update(tokenize_bwd(d_e, x_num, x_cat, tok))

    gate_grads = None
    if params.gates is not None and cfg.sparsity_enabled:
        gate_grads = {
            "log_alpha_h": dz_h_acc * dzh + pen_h.astype(dtype),
            "log_alpha_in": dz_in_acc * dzin + pen_in.astype(dtype),
        }
    return float(total), float(data_loss), grads, gate_grads, s_hat


def predict_arrays(
    params: TmlpParams,
    cfg: TrainConfig,
    task: str,
    x_num: np.ndarray,
    x_cat: np.ndarray,
    alpha_hat: np.ndarray | None,
    chunk: int = 4096,
    structural: bool = True,
) -> np.ndarray:
    """Deterministic forward pass.

    Classification returns probabilities (N, C); regression returns values in
    standardized units (N,). Gate-carrying models run their kept top-k
    channels, matching the sliced export: structural=True gathers them into
    narrow weights up front, structural=False multiplies the binary masks
    into the full-width network instead (same selection, full-size compute).
    """
    if params.gates is not None and structural:
        blocks, hidden_idx = _sliced_block_views(params, cfg)
        z_h = z_in = None
    else:
        blocks = params.blocks
        hidden_idx = params.hidden_idx
        z_h, z_in = eval_masks(params, cfg)
    n = x_num.shape[0]
    outs = []
    for lo in range(0, n, chunk):
        hi = min(n, lo + chunk)
        e = tokenize(x_num[lo:hi], x_cat[lo:hi], params.tokenizer)
        if alpha_hat is not None:
            a = alpha_hat[lo:hi].astype(params.dtype)
            if ((a < 0.0) | (a > 1.0)).any():
                raise BadProbability("feature frequencies outside [0, 1]")
            e[:, 1:, :] *= a[:, :, None]
        for blk in blocks:
            e = _block_forward(e, blk, z_h, z_in, hidden_idx, None, None)
        hln, _ = nn.layernorm(e[:, 0, :], params.head.ln_gain, params.head.ln_bias)
        logits = nn.matmul(nn.relu(hln), params.head.w) + params.head.b
        if task == "regression":
            outs.append(logits[:, 0])
        else:
            outs.append(nn.softmax(logits))
    return np.concatenate(outs, axis=0)


# ---------------------------------------------------------------------------
# trained-model container


@dataclass
class TmlpModel:
    """A trained network plus everything needed to run it on raw rows."""

    schema: FeatureSchema
    prep: Preprocessor
    config: TrainConfig
    task: str
    params: TmlpParams
    gbdt: GbdtModel | None
    pruned: bool = False
    routing: RoutingMatrices | None = None

    def ensure_routing(self) -> RoutingMatrices | None:
        if self.gbdt is not None and self.routing is None:
            self.routing = compile_model(self.gbdt)
        return self.routing

    def frequencies(
        self,
        ds: Dataset,
        cache: FrequencyCache | None = None,
        name: str | None = None,
    ) -> np.ndarray | None:
        """Per-sample normalized split frequencies, or None when gate-free."""
        if self.gbdt is None:
            return None
        rm = self.ensure_routing()
        x = feature_matrix(ds)
        if cache is not None and name is not None:
            return cache.get_or_build(name, x, rm)
        return normalize_frequency(batch_frequency(rm, x), self.gbdt.n_trees)

    def predict_dataset(
        self,
        ds: Dataset,
        cache: FrequencyCache | None = None,
        name: str | None = None,
    ) -> np.ndarray:
        """Probabilities for classification; original-unit values otherwise."""
        alpha = self.frequencies(ds, cache, name)
        out = predict_arrays(
            self.params, self.config, self.task, ds.x_num, ds.x_cat, alpha
        )
        if self.task == "regression":
            return destandardize_y(self.prep, out.astype(np.float64))
        return out

    def predict_labels(self, probs: np.ndarray) -> np.ndarray:
        idx = probs.argmax(axis=1)
        return np.asarray(self.prep.label_classes, dtype=object)[idx]


def dataset_metric(model: TmlpModel, ds: Dataset, alpha: np.ndarray | None) -> float:
    """Early-stopping metric: accuracy, or negated original-unit RMSE."""
    out = predict_arrays(model.params, model.config, model.task, ds.x_num, ds.x_cat, alpha)
    if model.task == "regression":
        pred = destandardize_y(model.prep, out.astype(np.float64))
        truth = destandardize_y(model.prep, ds.y.astype(np.float64))
        return -rmse(truth, pred)
    return float(np.mean(out.argmax(axis=1) == ds.y))


# ---------------------------------------------------------------------------
# training


@dataclass
class GateArtifacts:
    """Shared feature-gate state: trees, their routing form, and the cache."""

    gbdt: GbdtModel
    routing: RoutingMatrices
    cache: FrequencyCache


def build_gate_artifacts(train_ds: Dataset, cfg: TrainConfig) -> GateArtifacts:
    booster = fit_gbdt(train_ds, None, cfg.gbdt)
    routing = compile_model(booster)
    return GateArtifacts(gbdt=booster, routing=routing, cache=FrequencyCache())


@dataclass
class TrainResult:
    model: TmlpModel
    history: list[dict]
    best_epoch: int | None
    best_metric: float | None
    epochs_run: int


def out_dim_for(task: str, prep: Preprocessor) -> int:
    if task == "regression":
        return 1
    if task in ("binclass", "multiclass"):
        return prep.n_classes
    raise UnknownTask(f"unknown task {task!r}")


def train(
    train_ds: Dataset,
    valid_ds: Dataset,
    gate: GateArtifacts | None,
    cfg: TrainConfig,
    prep: Preprocessor,
    init: TmlpParams | None = None,
    stream_offset: int = 0,
    learning_rate: float | None = None,
) -> TrainResult:
    """Minibatch training with early stopping on the validation metric.

    The returned model carries the best validation snapshot. When sparsity is
    on, a snapshot is only admitted while the expected retention sits within
    the admission band around the target, so the kept weights always export
    at the requested width; the patience counter starts at the first
    admission. `learning_rate` overrides the config value (branch training).
    """
    task = train_ds.task
    lr = cfg.learning_rate if learning_rate is None else learning_rate
    n_blocks = cfg.resolved_blocks(task)
    out_dim = out_dim_for(task, prep)

    if init is None:
        rng_init = nn.RngStream(cfg.seed, STREAM_INIT)
        params = init_params(
            train_ds.schema.f1, prep.cardinalities(),
            1 + train_ds.n_features, n_blocks, out_dim, cfg, rng_init,
        )
    else:
        params = copy_params(init)
    rngs = RngSet.create(cfg.seed, stream_offset)

    alpha_train = alpha_valid = None
    if gate is not None:
        alpha_train = gate.cache.get_or_build("train", feature_matrix(train_ds), gate.routing)
        alpha_valid = gate.cache.get_or_build("valid", feature_matrix(valid_ds), gate.routing)

    opt_model = nn.AdamW(lr, weight_decay=cfg.weight_decay)
    opt_gate = None
    if params.gates is not None and cfg.sparsity_enabled:
        opt_gate = nn.AdamW(cfg.gate_learning_rate, weight_decay=0.0)

    model = TmlpModel(
        schema=train_ds.schema, prep=prep, config=cfg, task=task,
        params=params, gbdt=gate.gbdt if gate is not None else None,
        routing=gate.routing if gate is not None else None,
    )
    pdict = model_param_dict(params)
    gdict = gate_param_dict(params.gates) if opt_gate is not None else None

    n = train_ds.n
    best_snapshot = None
    best_metric = None
    best_epoch = None
    since_best = 0
    history: list[dict] = []
    epochs_run = 0

    n_batches = (n + cfg.batch_size - 1) // cfg.batch_size
    # two validation checks per epoch: patience counts evaluations, and the
    # halved interval shortens the tail of training past the best snapshot
    eval_marks = {n_batches - 1: 1.0}
    if n_batches >= 2:
        eval_marks[n_batches // 2 - 1] = 0.5
    stop = False
    for epoch in range(cfg.max_epochs):
        epochs_run = epoch + 1
        perm = rngs.shuffle.permutation(n)
        losses = []
        for bi, lo in enumerate(range(0, n, cfg.batch_size)):
            idx = perm[lo : lo + cfg.batch_size]
            total, _, grads, gate_grads, s_hat = loss_and_grads(
                params, cfg, task,
                train_ds.x_num[idx], train_ds.x_cat[idx], train_ds.y[idx],
                None if alpha_train is None else alpha_train[idx],
                mode="train", rngs=rngs,
            )
            opt_model.step(pdict, grads)
            if gate_grads is not None:
                # near the sparsity target the gates anneal to a crawl, so
                # retention parks inside the admission window while the
                # network keeps fitting under quasi-static masks
                gap = abs(s_hat - cfg.target_sparsity)
                opt_gate.learning_rate = cfg.gate_learning_rate * min(
                    1.0, max(0.1, gap / (2.0 * cfg.admission_band))
                )
                opt_gate.step(gdict, gate_grads)
                multiplier_ascent(
                    params.gates, s_hat, cfg.target_sparsity,
                    cfg.multiplier_learning_rate,
                )
            losses.append(total)

            mark = eval_marks.get(bi)
            if mark is None:
                continue
            metric = dataset_metric(model, valid_ds, alpha_valid)
            if params.gates is not None and cfg.sparsity_enabled:
                s_now = expected_sparsity(
                    params.gates, params.d, len(params.gates.log_alpha_in)
                )
                admissible = abs(s_now - cfg.target_sparsity) <= cfg.admission_band
            else:
                s_now = None
                admissible = True
            history.append(
                {"epoch": epoch + mark, "train_loss": float(np.mean(losses)),
                 "valid_metric": metric, "s_hat": s_now}
            )
            if admissible and (best_metric is None or metric > best_metric):
                best_snapshot = copy_params(params)
                best_metric = metric
                best_epoch = epoch + mark
                since_best = 0
            elif best_snapshot is not None:
                since_best += 1
                if since_best >= cfg.patience:
                    stop = True
                    break
        if stop:
            break

    if best_snapshot is not None:
        model.params = best_snapshot
    return TrainResult(
        model=model, history=history, best_epoch=best_epoch,
        best_metric=best_metric, epochs_run=epochs_run,
    )


# ---------------------------------------------------------------------------
# structural export


def retained_ratio(cfg: TrainConfig, k_h: int, k_in: int) -> float:
    d, dp = cfg.d, cfg.d_prime
    return (k_h * 2 * dp + k_in * d) / float(d * 2 * dp + dp * d)


def export_pruned(model: TmlpModel) -> TmlpModel:
    """Bakes the binary gate masks into a sliced copy of the network.

    Keeps the top-k gate parameters per side (k = round(target * width)),
    drops the corresponding W1 rows/column pairs and W2 rows, and records the
    gather indices for the narrowed first projection. Gate-free or already
    sliced models are returned unchanged. The slicing is self-checked against
    the mask-multiplied original on synthetic rows.
    """
    if model.params.gates is None or model.pruned:
        return model
    cfg = model.config
    params = model.params
    idx_h, idx_in, col_idx = kept_index_sets(params, cfg)

    new_blocks = []
    for blk in params.blocks:
        new_blocks.append(
            BlockParams(
                ln1_gain=blk.ln1_gain.copy(),
                ln1_bias=blk.ln1_bias.copy(),
                w1=np.ascontiguousarray(blk.w1[np.ix_(idx_h, col_idx)]),
                sgu_gain=np.ascontiguousarray(blk.sgu_gain[idx_in]),
                sgu_bias=np.ascontiguousarray(blk.sgu_bias[idx_in]),
                w3=blk.w3.copy(),
                b3=blk.b3.copy(),
                w2=np.ascontiguousarray(blk.w2[idx_in]),
            )
        )
    new_params = TmlpParams(
        tokenizer=copy.deepcopy(params.tokenizer),
        blocks=new_blocks,
        head=copy.deepcopy(params.head),
        gates=None,
        hidden_idx=idx_h,
        channel_idx=idx_in,
    )
    sliced = TmlpModel(
        schema=model.schema, prep=model.prep, config=cfg, task=model.task,
        params=new_params, gbdt=model.gbdt, pruned=True, routing=model.routing,
    )

    probe = nn.RngStream(0, 99)
    f1 = model.schema.f1
    x_num = probe.normal(size=(8, f1)) if f1 else np.zeros((8, 0))
    x_cat = np.zeros((8, model.schema.f2), dtype=np.int64)
    full = predict_arrays(params, cfg, model.task, x_num, x_cat, None, structural=False)
    cut = predict_arrays(new_params, cfg, model.task, x_num, x_cat, None)
    if not np.allclose(full, cut, atol=1e-5):
        raise ShapeMismatch("sliced export diverged from the masked network")
    return sliced


# ---------------------------------------------------------------------------
# one-call pipeline


def fit_tmlp(
    train_ds: Dataset,
    valid_ds: Dataset,
    cfg: TrainConfig,
    prep: Preprocessor,
) -> tuple[TmlpModel, TrainResult, GateArtifacts | None]:
    """Trains the gate trees (when enabled), the network, and exports.

    Returns the deliverable model (sliced when sparsity is on), the training
    result holding the unsliced best snapshot, and the gate artifacts.
    """
    gate = build_gate_artifacts(train_ds, cfg) if cfg.gate_enabled else None
    result = train(train_ds, valid_ds, gate, cfg, prep)
    deliverable = export_pruned(result.model)
    return deliverable, result, gate
