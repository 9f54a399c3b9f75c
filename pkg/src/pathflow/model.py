"""Encoder-decoder attention surrogate that predicts equilibrium path flows.

The encoder reads one row per ordered OD pair (graph, demand and path
features); the decoder refines a per-OD share vector and a sigmoid head
emits normalized path-flow shares.  There is no positional encoding and no
attention masking: OD rows form a set and the whole model is
permutation-equivariant over rows.

Decoder input policy: the decoder needs a row-distinct input to tell OD
pairs apart in its single non-autoregressive pass (a constant input makes
every output row identical through cross-attention).  The default feeds a
free-flow cost softmin share prior at both training and inference;
``teacher`` (ground-truth shares) and ``zeros`` are available as options.
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass, field, asdict, replace

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, PathflowError

CHECKPOINT_MAGIC = b"PFCKPT01"

#: "warm" feeds the warm-start shares (default); "encoder" derives the
#: decoder input from each row's own encoder output via a learned projection;
#: "heuristic" feeds free-flow softmin shares; "teacher" feeds the normalized
#: ground truth (training only); "zeros" is degenerate (every decoder row is
#: identical, so cross-attention returns the same mix for all rows) and is
#: kept only for ablation.
DECODER_INPUT_MODES = ("warm", "encoder", "heuristic", "teacher", "zeros")


@dataclass(frozen=True)
class ModelConfig:
    """Hyperparameters; the defaults follow the reference training setup.

    ``embed=True`` runs residual streams at width ``dim`` with an input
    embedding and an output head (per-head projection width ``dim//heads``).
    ``embed=False`` is the literal narrow layout where the encoder stream is
    the raw feature width and the decoder stream is ``k*n``; it exists for
    structural tests but starves the model of per-row state, so wide streams
    are the default.
    """

    heads: int = 8
    dim: int = 128
    encoder_layers: int = 8
    decoder_layers: int = 1
    dropout: float = 0.1
    batch: int = 64
    epochs: int = 100
    lr: float = 1e-3
    ffn_hidden: int = 0            # 0 = default 4 * dim
    lambda_od: float = 0.1
    lambda_kkt: float = 0.0
    embed: bool = True
    train_decoder_input: str = "warm"
    eval_decoder_input: str = "warm"
    heuristic_beta: float = 4.0
    final_norm: str = "double"   # "bypass" skips the trailing LayerNorm pair
    warmup_frac: float = 0.05    # linear LR warmup over this fraction of steps
    anchor_warm: bool = True     # head predicts a correction on the warm logits
    loss_mode: str = "mse"       # "relative" divides residuals by (target+0.05)
    seed: int = 0

    def __post_init__(self):
        for name in ("heads", "dim", "encoder_layers", "decoder_layers",
                     "batch", "epochs"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if not (0.0 <= self.dropout < 1.0):
            raise ConfigError("dropout must be in [0, 1)")
        for name in ("train_decoder_input", "eval_decoder_input"):
            if getattr(self, name) not in DECODER_INPUT_MODES:
                raise ConfigError(
                    f"{name} must be one of {DECODER_INPUT_MODES}"
                )
        if self.final_norm not in ("bypass", "double"):
            raise ConfigError("final_norm must be 'bypass' or 'double'")
        if self.loss_mode not in ("mse", "relative"):
            raise ConfigError("loss_mode must be 'mse' or 'relative'")

    @property
    def hidden(self) -> int:
        return self.ffn_hidden if self.ffn_hidden > 0 else 4 * self.dim


@dataclass(frozen=True)
class ModelDims:
    """Feature signature a checkpoint is bound to."""

    n_nodes: int
    a: int   # encoder feature width
    k: int
    n: int

    @property
    def out_width(self) -> int:
        return self.k * self.n

    @property
    def rows(self) -> int:
        return self.n_nodes * self.n_nodes


def heuristic_decoder_input(path_costs: np.ndarray, n_classes: int,
                            beta: float = 4.0) -> np.ndarray:
    """Free-flow softmin share prior, tiled per class: (R, k) costs -> (R, k*n).

    Real slots carry strictly positive costs; padded slots are 0 and get a
    zero share.  Cheaper paths receive larger shares; rows with no path are
    all-zero.
    """
    costs = np.asarray(path_costs, dtype=np.float64)
    mask = costs > 0
    cmin = np.where(mask, costs, np.inf).min(axis=1, keepdims=True)
    with np.errstate(invalid="ignore"):
        ratio = np.where(mask, costs / cmin, np.inf)
    w = np.where(mask, np.exp(-beta * (ratio - 1.0)), 0.0)
    total = w.sum(axis=1, keepdims=True)
    shares = np.divide(w, total, out=np.zeros_like(w), where=total > 0)
    return np.tile(shares, (1, n_classes))


# ---------------------------------------------------------------------------
# parameters and forward pass
# ---------------------------------------------------------------------------

def _glorot(rng, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class FlowTransformer:
    """Model parameters plus the forward pass; one instance per checkpoint."""

    def __init__(self, cfg: ModelConfig, dims: ModelDims, params=None):
        self.cfg = cfg
        self.dims = dims
        if cfg.embed:
            self.enc_width = cfg.dim
            self.dec_width = cfg.dim
            self.head_dim = max(cfg.dim // cfg.heads, 1)
        else:
            self.enc_width = dims.a
            self.dec_width = dims.out_width
            self.head_dim = cfg.dim
        if params is not None:
            self.params = params
        else:
            self.params = {}
            rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0x9E11)))
            self._init_params(rng)

    def _param(self, name, array):
        self.params[name] = T.Tensor(array, requires_grad=True)

    def _ln_pair(self, name, width):
        self._param(f"{name}.g", np.ones(width))
        self._param(f"{name}.b", np.zeros(width))

    def _attn_block(self, name, q_width, kv_width, out_width, rng):
        d, h = self.head_dim, self.cfg.heads
        for i in range(h):
            self._param(f"{name}.h{i}.wq", _glorot(rng, q_width, d))
            self._param(f"{name}.h{i}.wk", _glorot(rng, kv_width, d))
            self._param(f"{name}.h{i}.wv", _glorot(rng, kv_width, d))
        self._param(f"{name}.wo", _glorot(rng, d * h, out_width))

    def _init_params(self, rng):
        ew, dw = self.enc_width, self.dec_width
        hidden = self.cfg.hidden
        if self.cfg.embed:
            self._param("embed.enc", _glorot(rng, self.dims.a, ew))
            self._param("embed.dec", _glorot(rng, self.dims.out_width, dw))
            self._param("head.w", _glorot(rng, dw, self.dims.out_width))
        self._param("bridge.w", _glorot(rng, ew, dw))
        for i in range(self.cfg.encoder_layers):
            p = f"enc{i}"
            self._attn_block(f"{p}.attn", ew, ew, ew, rng)
            self._ln_pair(f"{p}.ln1a", ew)
            self._ln_pair(f"{p}.ln1b", ew)
            self._param(f"{p}.ffn.w2", _glorot(rng, ew, hidden))
            self._param(f"{p}.ffn.w1", _glorot(rng, hidden, ew))
            self._ln_pair(f"{p}.ln2a", ew)
            self._ln_pair(f"{p}.ln2b", ew)
        for i in range(self.cfg.decoder_layers):
            p = f"dec{i}"
            self._attn_block(f"{p}.self", dw, dw, dw, rng)
            self._ln_pair(f"{p}.ln1", dw)
            self._attn_block(f"{p}.cross", dw, ew, dw, rng)
            self._ln_pair(f"{p}.ln2a", dw)
            self._ln_pair(f"{p}.ln2b", dw)
            self._param(f"{p}.ffn.w4", _glorot(rng, dw, hidden))
            self._param(f"{p}.ffn.w3", _glorot(rng, hidden, dw))
            self._ln_pair(f"{p}.ln3a", dw)
            self._ln_pair(f"{p}.ln3b", dw)

    # -- building blocks ----------------------------------------------------

    def single_head_attention(self, xq: T.Tensor, xkv: T.Tensor, name: str,
                              head: int) -> T.Tensor:
        """softmax(Q K^T / sqrt(d)) V with learned projections, no masking.

        When the stream is narrower than the head projection (literal
        layout), the algebraically identical low-rank arrangement
        ``softmax(Xq (Wq Wk^T / sqrt(d)) Xkv^T) (A Xkv) Wv`` runs the R x R
        products over the stream width instead of the head width.
        """
        wq = self.params[f"{name}.h{head}.wq"]
        wk = self.params[f"{name}.h{head}.wk"]
        wv = self.params[f"{name}.h{head}.wv"]
        inv_sqrt_d = 1.0 / np.sqrt(self.head_dim)
        if self.head_dim > xq.data.shape[1]:
            mix = T.scale(T.matmul(wq, T.transpose(wk)), inv_sqrt_d)
            scores = T.matmul(T.matmul(xq, mix), T.transpose(xkv))
            weights = T.softmax_lastdim(scores)
            return T.matmul(T.matmul(weights, xkv), wv)
        q = T.scale(T.matmul(xq, wq), inv_sqrt_d)
        k = T.matmul(xkv, wk)
        v = T.matmul(xkv, wv)
        scores = T.matmul(q, T.transpose(k))
        weights = T.softmax_lastdim(scores)
        return T.matmul(weights, v)

    def multi_head(self, xq: T.Tensor, xkv: T.Tensor, name: str) -> T.Tensor:
        heads = [self.single_head_attention(xq, xkv, name, i)
                 for i in range(self.cfg.heads)]
        return T.matmul(T.concat_last_dim(heads), self.params[f"{name}.wo"])

    def _ln(self, x, name):
        return T.layernorm(x, self.params[f"{name}.g"], self.params[f"{name}.b"])

    def encoder_layer(self, x: T.Tensor, i: int, training: bool, rng) -> T.Tensor:
        p = f"enc{i}"
        g = T.dropout(self.multi_head(x, x, f"{p}.attn"), self.cfg.dropout,
                      training, rng)
        e1 = self._ln(self._ln(T.add(x, g), f"{p}.ln1a"), f"{p}.ln1b")
        f = T.matmul(T.relu(T.matmul(e1, self.params[f"{p}.ffn.w2"])),
                     self.params[f"{p}.ffn.w1"])
        f = T.dropout(f, self.cfg.dropout, training, rng)
        return self._ln(self._ln(T.add(e1, f), f"{p}.ln2a"), f"{p}.ln2b")

    def decoder_layer(self, f_in: T.Tensor, enc_out: T.Tensor, i: int,
                      training: bool, rng, is_output_layer: bool = False) -> T.Tensor:
        """Self-attention, cross-attention to the encoder, FFN, each with
        residuals and layer normalization.

        When this layer feeds the sigmoid head directly, the default
        ``final_norm="bypass"`` skips the trailing normalization pair: a
        row-standardized output pins every row's logit mean and variance,
        which provably restricts the reachable share patterns to a
        two-parameter family and cannot fit general per-OD splits.
        ``final_norm="double"`` keeps the literal trailing pair.
        """
        if f_in.data.shape[0] != enc_out.data.shape[0]:
            raise ContractError(
                f"decoder rows {f_in.data.shape[0]} != encoder rows "
                f"{enc_out.data.shape[0]}"
            )
        p = f"dec{i}"
        g1 = T.dropout(self.multi_head(f_in, f_in, f"{p}.self"),
                       self.cfg.dropout, training, rng)
        d1 = self._ln(T.add(f_in, g1), f"{p}.ln1")
        g2 = T.dropout(self.multi_head(d1, enc_out, f"{p}.cross"),
                       self.cfg.dropout, training, rng)
        d2 = self._ln(self._ln(T.add(d1, g2), f"{p}.ln2a"), f"{p}.ln2b")
        f = T.matmul(T.relu(T.matmul(d2, self.params[f"{p}.ffn.w4"])),
                     self.params[f"{p}.ffn.w3"])
        f = T.dropout(f, self.cfg.dropout, training, rng)
        out = T.add(d2, f)
        if is_output_layer and self.cfg.final_norm == "bypass":
            return out
        return self._ln(self._ln(out, f"{p}.ln3a"), f"{p}.ln3b")

    def forward(self, input_rows: np.ndarray, decoder_in: np.ndarray | None,
                training: bool = False, rng=None,
                anchor: np.ndarray | None = None) -> T.Tensor:
        """Full pass to sigmoid shares; input (R, a), decoder_in (R, k*n).

        When ``decoder_in`` is None the decoder reads each row's own encoder
        output through the learned bridge projection ("encoder" input mode).
        ``anchor`` shifts the pre-sigmoid logits by ``logit(anchor)`` so the
        network learns a correction on top of the warm-start shares instead
        of re-deriving them.
        """
        if input_rows.shape[1] != self.dims.a:
            raise ContractError(
                f"input width {input_rows.shape[1]} != a={self.dims.a}"
            )
        if decoder_in is not None and decoder_in.shape != (
                input_rows.shape[0], self.dims.out_width):
            raise ContractError(
                f"decoder input shape {decoder_in.shape} != "
                f"({input_rows.shape[0]}, {self.dims.out_width})"
            )
        x = T.Tensor(input_rows)
        if self.cfg.embed:
            x = T.matmul(x, self.params["embed.enc"])
        for i in range(self.cfg.encoder_layers):
            x = self.encoder_layer(x, i, training, rng)
        if decoder_in is None:
            d = T.matmul(x, self.params["bridge.w"])
        elif self.cfg.embed:
            d = T.matmul(T.Tensor(decoder_in), self.params["embed.dec"])
        else:
            d = T.Tensor(decoder_in)
        for i in range(self.cfg.decoder_layers):
            d = self.decoder_layer(d, x, i, training, rng,
                                   is_output_layer=(i == self.cfg.decoder_layers - 1))
        if self.cfg.embed:
            d = T.matmul(d, self.params["head.w"])
        if anchor is not None:
            shifted = np.clip(anchor, 1e-6, 1.0 - 1e-6)
            d = T.add_const(d, np.log(shifted) - np.log1p(-shifted))
        return T.sigmoid(d)

    def anchor_for(self, sample) -> np.ndarray | None:
        return sample.warm if self.cfg.anchor_warm else None

    def predict_rows(self, input_rows: np.ndarray,
                     decoder_in: np.ndarray | None,
                     anchor: np.ndarray | None = None) -> np.ndarray:
        with T.no_grad():
            return self.forward(input_rows, decoder_in, training=False,
                                anchor=anchor).data

    def copy_params(self) -> dict:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_param_arrays(self, arrays: dict):
        for k, p in self.params.items():
            p.data[...] = arrays[k]


def decoder_input_for(mode: str, cfg: ModelConfig, sample,
                      n_classes: int,
                      with_target: bool = False) -> np.ndarray | None:
    """Materialize the decoder input for a mode; None selects the learned
    encoder bridge inside the forward pass.  ``sample`` needs ``path_costs``
    and ``warm`` arrays (``target`` too for teacher mode)."""
    if mode == "encoder":
        return None
    if mode == "warm":
        return sample.warm
    if mode == "teacher":
        if not with_target or getattr(sample, "target", None) is None:
            raise ContractError("teacher decoder input requires targets")
        return sample.target
    if mode == "zeros":
        k = sample.path_costs.shape[1]
        return np.zeros((sample.path_costs.shape[0], k * n_classes))
    return heuristic_decoder_input(sample.path_costs, n_classes,
                                   cfg.heuristic_beta)


# ---------------------------------------------------------------------------
# checkpoint serialization
# ---------------------------------------------------------------------------

def save_checkpoint_bytes(model: FlowTransformer, manifest_hash: str,
                          extra: dict | None = None) -> bytes:
    names = sorted(model.params)
    header = {
        "schema": "pathflow.checkpoint.v1",
        "config": asdict(model.cfg),
        "dims": asdict(model.dims),
        "manifest_hash": manifest_hash,
        "tensors": [
            {"name": n, "shape": list(model.params[n].data.shape)} for n in names
        ],
    }
    if extra:
        header["extra"] = extra
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    out = [CHECKPOINT_MAGIC, struct.pack("<I", len(blob)), blob]
    for n in names:
        out.append(np.ascontiguousarray(model.params[n].data, dtype="<f8").tobytes())
    return b"".join(out)


def save_checkpoint(model: FlowTransformer, path, manifest_hash: str,
                    extra: dict | None = None):
    with open(path, "wb") as fh:
        fh.write(save_checkpoint_bytes(model, manifest_hash, extra))


def load_checkpoint(source) -> tuple[FlowTransformer, str, dict]:
    """Read a checkpoint from bytes or a path; returns (model, manifest_hash, extra)."""
    if isinstance(source, (bytes, bytearray)):
        raw = bytes(source)
    else:
        with open(source, "rb") as fh:
            raw = fh.read()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise ContractError("not a pathflow checkpoint (bad magic)")
    (hlen,) = struct.unpack("<I", raw[8:12])
    header = json.loads(raw[12:12 + hlen].decode())
    cfg = ModelConfig(**header["config"])
    dims = ModelDims(**header["dims"])
    params = {}
    offset = 12 + hlen
    for spec in header["tensors"]:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape)
        offset += count * 8
        params[spec["name"]] = T.Tensor(arr.copy(), requires_grad=True)
    model = FlowTransformer(cfg, dims, params=params)
    return model, header["manifest_hash"], header.get("extra", {})


# ---------------------------------------------------------------------------
# one-shot inference
# ---------------------------------------------------------------------------

def checkpoint_extra(dataset) -> dict:
    """Inference-time pipeline settings bundled into a checkpoint."""
    m = dataset.manifest
    return {
        "normalization": m.stats.to_json(),
        "target_mode": m.target_mode,
        "global_max_flow": m.global_max_flow,
        "warm_start_iters": m.scenario.get("warm_start_iters", 150),
        "warm_start_gap": m.scenario.get("warm_start_gap", 1e-4),
    }


def predict(model: FlowTransformer, extra: dict, network, demand, path_sets,
            renormalize: bool = False):
    """One-shot path-flow prediction: (flows (N^2, n, k), seconds).

    Builds the normalized input (including the warm-start features), runs the
    eval forward pass, denormalizes with the checkpoint's pipeline settings
    and zeroes padded slots.  Wall time covers the whole pipeline.
    """
    from .datagen import (NormStats, denormalize_prediction, raw_input_tensor,
                          warm_start)

    dims = model.dims
    if (network.n_nodes != dims.n_nodes or path_sets.k != dims.k
            or network.n_classes != dims.n or demand.n_classes != dims.n):
        raise ContractError(
            f"checkpoint signature (N={dims.n_nodes}, k={dims.k}, n={dims.n}) "
            f"does not match the scenario (N={network.n_nodes}, "
            f"k={path_sets.k}, n={network.n_classes})"
        )
    packed = path_sets.packed()
    demanded = demand.demand.sum(axis=1) > 0
    if np.any(demanded & ~packed.slot_mask.any(axis=1)):
        raise ContractError("a demanded OD pair has no feasible path")

    stats = NormStats.from_json(extra["normalization"])
    t0 = time.perf_counter()
    warm_costs, warm_shares = warm_start(network, demand, path_sets,
                                         int(extra["warm_start_iters"]),
                                         float(extra["warm_start_gap"]))
    rows = stats.apply(raw_input_tensor(network, demand, path_sets, warm_costs))
    mode = model.cfg.eval_decoder_input
    if mode == "warm":
        dec_in = warm_shares
    elif mode == "encoder":
        dec_in = None
    elif mode == "zeros":
        dec_in = np.zeros((rows.shape[0], dims.out_width))
    else:
        dec_in = heuristic_decoder_input(packed.freeflow_cost, dims.n,
                                         model.cfg.heuristic_beta)
    anchor = warm_shares if model.cfg.anchor_warm else None
    pred = model.predict_rows(rows, dec_in, anchor=anchor)
    flows = denormalize_prediction(
        pred, demand, packed.slot_mask, mode=extra["target_mode"],
        global_max=extra.get("global_max_flow"), renormalize=renormalize)
    return flows, time.perf_counter() - t0


def predict_from_checkpoint(source, network, demand, path_sets,
                            renormalize: bool = False):
    model, _, extra = load_checkpoint(source)
    return predict(model, extra, network, demand, path_sets, renormalize)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: FlowTransformer
    best_params: dict
    best_epoch: int
    best_val: float
    history: list  # rows: epoch, train_loss, val_loss, eps_od, phi_kkt, seconds

    def best_model(self) -> FlowTransformer:
        m = FlowTransformer(self.model.cfg, self.model.dims)
        m.load_param_arrays(self.best_params)
        return m


class TrainingDiverged(PathflowError):
    pass


def _class_sum_matrix(k: int, n: int) -> np.ndarray:
    s = np.zeros((k * n, n))
    for z in range(n):
        s[z * k:(z + 1) * k, z] = 1.0
    return s


def _od_penalty(pred: T.Tensor, demand: np.ndarray, sum_matrix: np.ndarray,
                n_demanded_rows: int, n_classes: int) -> T.Tensor:
    """Differentiable OD-conservation error, relative to mean OD demand.

    The raw residual is in vehicles; dividing by the sample's mean demanded
    demand makes the penalty dimensionless and commensurate with the MSE term.
    """
    sums = T.matmul(pred, T.constant(sum_matrix))        # (R, n)
    dev = T.add_const(sums, -1.0)
    weighted = T.mul_const(dev, demand)                  # x * (sum - 1)
    total = T.sum_all(T.absolute(weighted))
    demanded = demand[demand.sum(axis=1) > 0]
    mean_demand = float(demanded.mean()) if demanded.size else 1.0
    return T.scale(total, 1.0 / (max(n_demanded_rows * n_classes, 1)
                                 * max(mean_demand, 1e-9)))


def _kkt_penalty(pred: T.Tensor, sample, incidence: np.ndarray, t0, cap, mult,
                 n_demanded_rows: int) -> T.Tensor:
    """Differentiable complementarity residual of denormalized predictions."""
    R, w = pred.data.shape
    k = sample.path_costs.shape[1]
    n = w // k
    demand_rep = np.repeat(sample.demand, k, axis=1).reshape(R, w)
    flows = T.mul_const(pred, demand_rep)                # (R, k*n)
    flat = T.reshape(flows, (1, R * w))
    volume = T.matmul(flat, T.constant(incidence))       # (1, L)
    ratio = T.mul_const(volume, 1.0 / cap)
    factor = T.add_const(T.scale(T.power(ratio, 4.0), 0.15), 1.0)
    link_cost = T.mul_const(factor, t0)                  # (1, L)
    c_flat = T.matmul(link_cost, T.constant(incidence.T))  # (1, R*w)
    mult_rep = np.tile(np.repeat(mult, k), R)[None, :]
    c_class = T.mul_const(c_flat, mult_rep)
    c_rows = T.reshape(c_class, (R * n, k))
    pad = ~np.tile(sample.path_costs > 0, (1, n)).reshape(R * n, k)
    c_masked = T.add_const(c_rows, pad * 1e12)
    u = T.scale(T.max_lastdim(T.scale(c_masked, -1.0)), -1.0)
    excess = T.relu(T.sub(c_rows, u))
    excess = T.mul_const(excess, ~pad)
    f_rows = T.reshape(flows, (R * n, k))
    total = T.sum_all(T.mul(f_rows, excess))
    return T.scale(total, 1.0 / max(n_demanded_rows * n, 1))


def train_model(dataset, cfg: ModelConfig, history_path=None,
                progress=None) -> TrainResult:
    """Adam on MSE plus optional conservation penalties; keeps best-val params.

    ``dataset`` is a :class:`pathflow.datagen.Dataset`; shuffling, dropout and
    initialization all derive from ``cfg.seed``, so runs are reproducible.
    """
    dims = ModelDims(n_nodes=dataset.manifest.n_nodes, a=dataset.manifest.a,
                     k=dataset.manifest.k, n=dataset.manifest.n)
    model = FlowTransformer(cfg, dims)
    train_samples = dataset.load_split("train")
    val_samples = dataset.load_split("val")
    if not train_samples:
        raise ContractError("training split is empty")

    sum_matrix = _class_sum_matrix(dims.k, dims.n)
    incidence = dataset.incidence_matrix() if cfg.lambda_kkt > 0 else None
    optimizer = T.Adam(model.params, lr=cfg.lr)
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0x7EA1)))
    shuffle_rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0x5AFF)))

    history = []
    best_val = np.inf
    best_epoch = -1
    best_params = model.copy_params()

    steps_per_epoch = int(np.ceil(len(train_samples) / cfg.batch))
    total_steps = max(cfg.epochs * steps_per_epoch, 1)
    warmup_steps = max(int(cfg.warmup_frac * total_steps), 1)
    step_index = 0

    for epoch in range(cfg.epochs):
        t0_epoch = time.perf_counter()
        order = shuffle_rng.permutation(len(train_samples))
        train_loss = 0.0
        for start in range(0, len(order), cfg.batch):
            step_index += 1
            optimizer.lr = cfg.lr * min(step_index / warmup_steps, 1.0)
            batch = order[start:start + cfg.batch]
            optimizer.zero_grad()
            for idx in batch:
                sample = train_samples[idx]
                dec_in = decoder_input_for(cfg.train_decoder_input, cfg,
                                           sample, dims.n, with_target=True)
                pred = model.forward(sample.input, dec_in, training=True, rng=rng,
                                     anchor=model.anchor_for(sample))
                if cfg.loss_mode == "relative":
                    # squared error weighted toward small shares; optimizes
                    # the relative-error metric the evaluation reports
                    w = 1.0 / (sample.target + 0.05)
                    loss = T.mse_loss(T.mul_const(pred, w), sample.target * w)
                else:
                    loss = T.mse_loss(pred, sample.target)
                if cfg.lambda_od > 0:
                    pen = _od_penalty(pred, sample.demand, sum_matrix,
                                      sample.n_demanded_rows, dims.n)
                    loss = T.add(loss, T.scale(pen, cfg.lambda_od))
                if cfg.lambda_kkt > 0:
                    pen = _kkt_penalty(pred, sample, incidence,
                                       dataset.freeflow_time, dataset.capacity,
                                       dataset.class_multipliers,
                                       sample.n_demanded_rows)
                    loss = T.add(loss, T.scale(pen, cfg.lambda_kkt))
                value = float(loss.data)
                if not np.isfinite(value):
                    T.clear_tape()
                    raise TrainingDiverged(
                        f"loss became {value} at epoch {epoch}, sample {idx}"
                    )
                train_loss += value
                T.backward(loss, seed=1.0 / len(batch))
            optimizer.step()
        train_loss /= len(order)

        val_mse, eps_od, phi = _evaluate_split(model, cfg, val_samples, dataset)
        if val_mse < best_val:
            best_val = val_mse
            best_epoch = epoch
            best_params = model.copy_params()
        seconds = time.perf_counter() - t0_epoch
        history.append((epoch, train_loss, val_mse, eps_od, phi, seconds))
        if progress:
            progress(epoch, train_loss, val_mse)

    if history_path is not None:
        with open(history_path, "w") as fh:
            fh.write("epoch,train_loss,val_loss,eps_od,phi_kkt,seconds\n")
            for row in history:
                fh.write(",".join(repr(v) for v in row) + "\n")
    return TrainResult(model=model, best_params=best_params,
                       best_epoch=best_epoch, best_val=best_val, history=history)


def _evaluate_split(model, cfg, samples, dataset):
    """Eval-mode MSE, OD-conservation error and KKT residual over a split."""
    if not samples:
        return np.nan, np.nan, np.nan
    mse = 0.0
    eps = 0.0
    phi = 0.0
    for sample in samples:
        dec_in = decoder_input_for(cfg.eval_decoder_input, cfg,
                                   sample, model.dims.n)
        pred = model.predict_rows(sample.input, dec_in,
                                  anchor=model.anchor_for(sample))
        mse += float(np.mean((pred - sample.target) ** 2))
        flows = dataset.denormalize(pred, sample)
        eps += dataset.od_residual(flows, sample)
        phi += dataset.kkt_residual_np(flows, sample)
    m = len(samples)
    return mse / m, eps / m, phi / m
