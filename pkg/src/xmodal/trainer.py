"""Mini-batch training under the combined objective, with Adam and checkpoints.

All backbones and the shared encoder are updated jointly in a single stage.
Batch order is keyed by (seed, epoch), so resuming from a checkpoint
reproduces the uninterrupted run bit-exactly.
"""

import json
import os
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import batch_iter, stack_features
from .errors import CheckpointError, ContractError, TrainingDivergedError
from .losses import LossWeights, combined_loss, schedule_weight
from .model import ModelConfig, ModelParams

CHECKPOINT_MAGIC = b"XMSSL1"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    learning_rate: float = 1e-3
    tau: float = 0.2
    alpha0: float = 1e-4
    beta0: float = 1e-4
    adam_b1: float = 0.9
    adam_b2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    checkpoint_every: int = 0    # 0 = final checkpoint only
    fixed_alpha: float = None    # set to pin alpha for the whole run (e.g. ablations)
    fixed_beta: float = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ContractError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ContractError("batch_size must be >= 2")
        if self.learning_rate < 0:
            raise ContractError("learning_rate must be >= 0")
        for name, w0 in (("alpha0", self.alpha0), ("beta0", self.beta0)):
            if not 0 < w0 <= 1:
                raise ContractError(f"{name} must be in (0, 1]")

    def to_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_mapping(cls, values):
        casts = {"epochs": int, "batch_size": int, "learning_rate": float,
                 "tau": float, "alpha0": float, "beta0": float, "adam_b1": float,
                 "adam_b2": float, "adam_eps": float, "seed": int,
                 "checkpoint_every": int,
                 "fixed_alpha": lambda s: None if s in (None, "", "none") else float(s),
                 "fixed_beta": lambda s: None if s in (None, "", "none") else float(s)}
        kwargs = {}
        for key, value in values.items():
            if key not in casts:
                raise ContractError(f"unknown config key {key!r}")
            kwargs[key] = casts[key](value) if isinstance(value, str) else value
        return cls(**kwargs)


class AdamState:
    """First/second moment accumulators per named parameter, plus step count."""

    def __init__(self, params: ModelParams):
        self.step = 0
        self.m = {name: np.zeros_like(t.data) for name, t in params.named_tensors()}
        self.v = {name: np.zeros_like(t.data) for name, t in params.named_tensors()}


@dataclass
class EpochStats:
    epoch: int
    mim: float
    mde: float
    msp: float
    total: float
    alpha: float
    beta: float
    val_total: float
    seconds: float


@dataclass
class TrainReport:
    epochs: list = field(default_factory=list)

    def to_csv(self, path, include_timing=False):
        """One row per epoch. Timing is off by default so reruns are byte-identical."""
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("epoch,mim,mde,msp,total,alpha,beta,val_total,seconds\n")
            for e in self.epochs:
                seconds = f"{e.seconds:.3f}" if include_timing else ""
                fh.write(f"{e.epoch},{e.mim:.17g},{e.mde:.17g},{e.msp:.17g},"
                         f"{e.total:.17g},{e.alpha:.17g},{e.beta:.17g},"
                         f"{e.val_total:.17g},{seconds}\n")


def adam_step(params: ModelParams, grads, state: AdamState,
              lr, b1=0.9, b2=0.999, eps=1e-8):
    """Bias-corrected Adam update applied in place to the owned parameters."""
    state.step += 1
    t = state.step
    for name, tensor in params.named_tensors():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != tensor.data.shape:
            raise ContractError(f"adam_step: gradient shape mismatch for {name}")
        state.m[name] = b1 * state.m[name] + (1 - b1) * g
        state.v[name] = b2 * state.v[name] + (1 - b2) * g * g
        m_hat = state.m[name] / (1 - b1 ** t)
        v_hat = state.v[name] / (1 - b2 ** t)
        tensor.data = tensor.data - lr * m_hat / (np.sqrt(v_hat) + eps)
    return params, state


def _batch_loss(params, batch, weights, include_positive=False):
    """Forward both modalities of one pair and evaluate the combined loss.

    With more than two modalities the loss is averaged over all unordered
    pairs; the default configuration has exactly one pair.
    """
    from .model import forward_backbone, forward_encoder

    n = params.config.num_modalities
    ys = [forward_backbone(params, m, stack_features(batch, m)) for m in range(n)]
    zs = [forward_encoder(params, y) for y in ys]
    breakdowns = []
    for j in range(n):
        for k in range(j + 1, n):
            breakdowns.append(combined_loss(zs[j], zs[k], ys[j], ys[k], weights,
                                            include_positive_in_denominator=include_positive))
    if len(breakdowns) == 1:
        return breakdowns[0]
    total = breakdowns[0].total_node
    for b in breakdowns[1:]:
        total = T.add(total, b.total_node)
    total = T.scale(total, 1.0 / len(breakdowns))
    mean = lambda key: sum(getattr(b, key) for b in breakdowns) / len(breakdowns)
    from .losses import LossBreakdown
    return LossBreakdown(mim=mean("mim"), mde=mean("mde"), msp=mean("msp"),
                         total=total.item(), alpha=weights.alpha, beta=weights.beta,
                         total_node=total)


def _param_grads(params, loss_node):
    leaf = T.backward(loss_node)
    return {name: leaf.get(t.node_id) for name, t in params.named_tensors()}


def _validation_loss(params, ds_val, train_config):
    """Mean batch loss on the validation set at alpha = beta = 1.

    Fixed weights keep the number comparable across epochs; batch order is a
    fixed permutation of the validation set (epoch key 0).
    """
    weights = LossWeights(alpha=1.0, beta=1.0, tau=train_config.tau)
    totals, count = 0.0, 0
    for batch in batch_iter(ds_val, train_config.batch_size, train_config.seed, 0):
        breakdown = _batch_loss(params, batch, weights)
        totals += breakdown.total
        count += 1
    return totals / count if count else float("nan")


def train(ds_train, ds_val, model_config: ModelConfig, train_config: TrainConfig,
          out_dir=None, resume_from=None):
    """Full training run; returns the final parameters and the per-epoch report."""
    from .model import init_params

    if ds_train.num_modalities != model_config.num_modalities:
        raise ContractError("dataset and model disagree on modality count")
    if ds_train.input_dim != model_config.input_dim:
        raise ContractError("dataset and model disagree on input dimension")

    start_epoch = 0
    if resume_from is not None:
        params, adam_state, completed, ckpt_config = load_checkpoint(resume_from)
        if ckpt_config.to_dict() != model_config.to_dict():
            raise CheckpointError("checkpoint model config differs from requested config")
        start_epoch = completed + 1
    else:
        params = init_params(model_config)
        adam_state = AdamState(params)

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
    report = TrainReport()
    cfg = train_config
    for epoch in range(start_epoch, cfg.epochs):
        t0 = time.perf_counter()
        alpha = cfg.fixed_alpha if cfg.fixed_alpha is not None else \
            schedule_weight(epoch, cfg.epochs, cfg.alpha0)
        beta = cfg.fixed_beta if cfg.fixed_beta is not None else \
            schedule_weight(epoch, cfg.epochs, cfg.beta0)
        weights = LossWeights(alpha=alpha, beta=beta, tau=cfg.tau)
        sums = np.zeros(4)
        count = 0
        for bi, batch in enumerate(batch_iter(ds_train, cfg.batch_size, cfg.seed, epoch)):
            breakdown = _batch_loss(params, batch, weights)
            if not np.isfinite(breakdown.total):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, batch {bi}: {breakdown.total}")
            if cfg.learning_rate > 0:
                grads = _param_grads(params, breakdown.total_node)
                adam_step(params, grads, adam_state, cfg.learning_rate,
                          cfg.adam_b1, cfg.adam_b2, cfg.adam_eps)
            sums += (breakdown.mim, breakdown.mde, breakdown.msp, breakdown.total)
            count += 1
        if count == 0:
            raise ContractError("training set yields no batches at this batch size")
        means = sums / count
        val_total = _validation_loss(params, ds_val, cfg) if ds_val is not None else float("nan")
        report.epochs.append(EpochStats(
            epoch=epoch, mim=means[0], mde=means[1], msp=means[2], total=means[3],
            alpha=alpha, beta=beta, val_total=val_total,
            seconds=time.perf_counter() - t0))
        if out_dir is not None:
            periodic = cfg.checkpoint_every > 0 and (epoch + 1) % cfg.checkpoint_every == 0
            if periodic or epoch == cfg.epochs - 1:
                save_checkpoint(params, adam_state, epoch,
                                os.path.join(out_dir, f"checkpoint_epoch{epoch}.ckpt"))
    return params, report


# ---------------------------------------------------------------------------
# checkpoint format: magic, version, json header (config + tensor manifest),
# then raw little-endian float64 payloads in manifest order
# ---------------------------------------------------------------------------

def save_checkpoint(params: ModelParams, adam_state: AdamState, epoch, path):
    names = [name for name, _ in params.named_tensors()]
    tensors = dict(params.named_tensors())
    manifest = []
    payloads = []
    for kind, table in (("param", tensors), ("adam_m", adam_state.m),
                        ("adam_v", adam_state.v)):
        for name in names:
            arr = table[name].data if kind == "param" else table[name]
            manifest.append({"name": name, "kind": kind, "shape": list(arr.shape)})
            payloads.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    header = json.dumps({"model_config": params.config.to_dict(), "epoch": int(epoch),
                         "adam_step": int(adam_state.step), "tensors": manifest},
                        sort_keys=True).encode("utf-8")
    path = os.fspath(path)
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        for blob in payloads:
            fh.write(blob)
    os.replace(tmp, path)


def load_checkpoint(path):
    """Returns (params, adam_state, completed_epoch, model_config).

    The whole file is validated before any state is constructed, so a
    truncated checkpoint never yields partial state.
    """
    from .model import init_params

    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(CHECKPOINT_MAGIC) + 8 or not blob.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    off = len(CHECKPOINT_MAGIC)
    version, header_len = struct.unpack_from("<II", blob, off)
    off += 8
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    if len(blob) < off + header_len:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(blob[off:off + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from None
    off += header_len
    config = ModelConfig.from_dict(header["model_config"])
    arrays = []
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        nbytes = count * 8
        if len(blob) < off + nbytes:
            raise CheckpointError(f"{path}: truncated tensor data at {entry['name']}")
        arrays.append(np.frombuffer(blob, dtype="<f8", count=count, offset=off)
                      .reshape(entry["shape"]).astype(np.float64))
        off += nbytes
    if off != len(blob):
        raise CheckpointError(f"{path}: trailing bytes")

    params = init_params(config)
    expected = {name for name, _ in params.named_tensors()}
    tensors = dict(params.named_tensors())
    adam_state = AdamState(params)
    adam_state.step = int(header["adam_step"])
    for entry, arr in zip(header["tensors"], arrays):
        name, kind = entry["name"], entry["kind"]
        if name not in expected:
            raise CheckpointError(f"{path}: unknown tensor {name}")
        if kind == "param":
            if tensors[name].data.shape != arr.shape:
                raise CheckpointError(f"{path}: shape mismatch for {name}")
            tensors[name].data = arr
        elif kind == "adam_m":
            adam_state.m[name] = arr
        elif kind == "adam_v":
            adam_state.v[name] = arr
        else:
            raise CheckpointError(f"{path}: unknown tensor kind {kind}")
    return params, adam_state, int(header["epoch"]), config
