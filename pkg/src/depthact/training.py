"""Loss, optimizer, train/eval loops, metrics, and checkpointing."""

from __future__ import annotations

import dataclasses
import json
import struct
import time
from dataclasses import dataclass

import numpy as np

from . import synthvid
from . import tensor as tt
from .errors import ContractError, FormatError, NumericError
from .fusion import mean_fuse
from .model import ActionModel, ModelConfig
from .tensor import Tensor

CKPT_MAGIC = b"DEARCKPT"
CKPT_VERSION = 1


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def onehot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, num_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def cross_entropy(y: np.ndarray, probs: Tensor) -> Tensor:
    """Mean over the batch of -sum_c y_c log(p_c). Probabilities are clamped
    at 1e-12 before the log."""
    y = np.asarray(y, dtype=np.float64)
    if y.shape != probs.shape:
        raise ContractError(f"cross_entropy: label shape {y.shape} != prob shape {probs.shape}")
    if not (np.isin(y, (0.0, 1.0)).all() and (y.sum(axis=-1) == 1.0).all()):
        raise ContractError("cross_entropy: label rows must be one-hot")
    b = y.shape[0]
    logp = tt.log(tt.clamp_min(probs, 1e-12))
    return tt.mul(tt.sum_(tt.mul(Tensor(y), logp)), -1.0 / b)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class AdamW:
    """Decoupled weight decay Adam. Only ever sees trainable tensors."""

    def __init__(self, params: dict, lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        if lr <= 0:
            raise ContractError(f"lr must be positive, got {lr}")
        if not (0.0 <= betas[0] < 1.0 and 0.0 <= betas[1] < 1.0):
            raise ContractError(f"betas must lie in [0, 1), got {betas}")
        self.params = params
        self.lr = lr
        self.betas = tuple(betas)
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        for name, p in self.params.items():
            if p.grad is not None and not np.isfinite(p.grad).all():
                raise NumericError(f"non-finite gradient for {name}; step aborted")
        b1, b2 = self.betas
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - b1**t
        bc2 = 1.0 - b2**t
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else 0.0
            self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            self.v[name] = b2 * self.v[name] + (1.0 - b2) * (g * g)
            mhat = self.m[name] / bc1
            vhat = self.v[name] / bc2
            p.data = p.data - lr * (mhat / (np.sqrt(vhat) + self.eps) + self.weight_decay * p.data)

    def state_dict(self) -> dict:
        return {"step": self.step_count, "m": self.m, "v": self.v}

    def load_state_dict(self, state: dict) -> None:
        self.step_count = int(state["step"])
        for name in self.params:
            if name not in state["m"]:
                raise FormatError(f"optimizer state missing moments for {name}")
            self.m[name] = np.array(state["m"][name])
            self.v[name] = np.array(state["v"][name])


# ---------------------------------------------------------------------------
# data plumbing
# ---------------------------------------------------------------------------

class ClipProvider:
    """Regenerates clips from (class, seed) records, applies frame sampling
    and the depth-estimation proxy, and caches results in memory."""

    def __init__(self, gen_cfg: synthvid.GenConfig, frames: int, stride: int,
                 depth_mode: str | None = None, cache: bool = True):
        self.gen_cfg = gen_cfg
        self.frames = frames
        self.stride = stride
        self.depth_mode = depth_mode or gen_cfg.depth_mode
        self._cache = {} if cache else None

    def get(self, record):
        key = (record[0], record[1], self.depth_mode)
        if self._cache is not None and key in self._cache:
            return self._cache[key]
        class_id, seed = record
        clip = synthvid.generate_clip(class_id, seed, self.gen_cfg)
        clip = synthvid.sample_frames(clip, self.frames, self.stride)
        depth = synthvid.estimate_depth(clip, self.depth_mode,
                                        levels=self.gen_cfg.depth_levels,
                                        sigma=self.gen_cfg.depth_noise)
        item = (clip.frames, depth, clip.label)
        if self._cache is not None:
            self._cache[key] = item
        return item

    def batch(self, records):
        items = [self.get(r) for r in records]
        frames = np.stack([it[0] for it in items])
        depth = np.stack([it[1] for it in items])
        labels = np.array([it[2] for it in items], dtype=np.int64)
        return frames, depth, labels


# ---------------------------------------------------------------------------
# train / eval
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    lr: float = 3e-4
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 10
    batch_size: int = 16
    eval_batch_size: int = 26
    seed: int = 0
    fuse_space: str = "logit"
    aux_loss_weight: float = 0.0
    lr_schedule: str = "constant"

    def __post_init__(self):
        if self.lr <= 0:
            raise ContractError(f"lr must be positive, got {self.lr}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ContractError(f"betas must lie in [0, 1), got ({self.beta1}, {self.beta2})")
        if self.fuse_space not in ("logit", "prob"):
            raise ContractError(f"fuse_space must be 'logit' or 'prob', got {self.fuse_space!r}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ContractError(f"lr_schedule must be 'constant' or 'cosine', got {self.lr_schedule!r}")


@dataclass
class MetricsRecord:
    epoch: int
    train_loss: float
    top1: float
    per_class: list
    seconds: float


def batch_loss(model: ActionModel, out: dict, labels: np.ndarray, cfg: TrainConfig) -> Tensor:
    y = onehot(labels, model.cfg.num_classes)
    if cfg.fuse_space == "prob":
        pa = tt.softmax(out["logits_a"])
        probs = pa if out["logits_b"] is None else mean_fuse(pa, tt.softmax(out["logits_b"]))
    else:
        probs = tt.softmax(out["fused"])
    loss = cross_entropy(y, probs)
    if cfg.aux_loss_weight > 0.0 and out["logits_b"] is not None:
        aux = tt.add(cross_entropy(y, tt.softmax(out["logits_a"])),
                     cross_entropy(y, tt.softmax(out["logits_b"])))
        loss = tt.add(loss, tt.mul(aux, cfg.aux_loss_weight))
    return loss


def _epoch_lr(cfg: TrainConfig, epoch: int) -> float:
    if cfg.lr_schedule == "cosine":
        return cfg.lr * 0.5 * (1.0 + np.cos(np.pi * epoch / max(cfg.epochs, 1)))
    return cfg.lr


def batch_forward(model: ActionModel, provider: ClipProvider, records,
                  acts_cache: dict | None = None) -> dict:
    """Forward one record batch, reusing cached frozen-path activations.
    The cache key is the clip record plus depth mode; it is valid for any
    model sharing the same backbone."""
    needs_depth = model.cfg.mode != "rgb_only"
    if acts_cache is None:
        frames, depth, _ = provider.batch(records)
        rgb_acts, dep_acts = model.compute_acts(frames, depth if needs_depth else None)
        return model.forward_from_acts(rgb_acts, dep_acts)
    missing = [r for r in records
               if (r, provider.depth_mode) not in acts_cache
               or (needs_depth and acts_cache[(r, provider.depth_mode)][1] is None)]
    if missing:
        frames, depth, _ = provider.batch(missing)
        rgb_acts, dep_acts = model.compute_acts(frames, depth if needs_depth else None)
        for i, r in enumerate(missing):
            acts_cache[(r, provider.depth_mode)] = (
                [a[i] for a in rgb_acts],
                [a[i] for a in dep_acts] if dep_acts is not None else None)
    entries = [acts_cache[(r, provider.depth_mode)] for r in records]
    n_acts = len(entries[0][0])
    rgb_acts = [np.stack([e[0][j] for e in entries]) for j in range(n_acts)]
    dep_acts = [np.stack([e[1][j] for e in entries]) for j in range(n_acts)] if needs_depth else None
    return model.forward_from_acts(rgb_acts, dep_acts)


def fused_predictions(model: ActionModel, provider: ClipProvider, records, batch_size: int,
                      acts_cache: dict | None = None):
    preds = np.empty(len(records), dtype=np.int64)
    labels = np.empty(len(records), dtype=np.int64)
    for lo in range(0, len(records), batch_size):
        chunk = records[lo:lo + batch_size]
        out = batch_forward(model, provider, chunk, acts_cache)
        preds[lo:lo + len(chunk)] = out["fused"].data.argmax(axis=-1)
        labels[lo:lo + len(chunk)] = [r[0] for r in chunk]
    return preds, labels


def evaluate(model: ActionModel, provider: ClipProvider, records, cfg: TrainConfig,
             epoch: int = -1, acts_cache: dict | None = None) -> MetricsRecord:
    """Top-1 and per-class accuracy over a record list. Invariant to record
    ordering (the metric is a set statistic)."""
    start = time.perf_counter()
    preds, labels = fused_predictions(model, provider, records, cfg.eval_batch_size, acts_cache)
    top1 = float((preds == labels).mean()) if len(records) else 0.0
    per_class = []
    for c in range(model.cfg.num_classes):
        mask = labels == c
        per_class.append(float((preds[mask] == c).mean()) if mask.any() else 0.0)
    return MetricsRecord(epoch=epoch, train_loss=float("nan"), top1=top1,
                         per_class=per_class, seconds=time.perf_counter() - start)


def train(model: ActionModel, provider: ClipProvider, train_records, val_records,
          cfg: TrainConfig, optimizer: AdamW | None = None, start_epoch: int = 0,
          log=None, acts_cache: dict | None = None):
    """Seeded-shuffle epoch loop. Deterministic given (records, configs,
    seed); resumable at epoch granularity via checkpoints."""
    if not train_records:
        raise ContractError("train: empty dataset")
    if optimizer is None:
        optimizer = AdamW(model.trainable_params(), lr=cfg.lr,
                          betas=(cfg.beta1, cfg.beta2), eps=cfg.eps,
                          weight_decay=cfg.weight_decay)
    if acts_cache is None:
        acts_cache = {}
    metrics = []
    for epoch in range(start_epoch, cfg.epochs):
        t0 = time.perf_counter()
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 5000 + epoch]))
        order = rng.permutation(len(train_records))
        losses = []
        lr = _epoch_lr(cfg, epoch)
        for lo in range(0, len(order), cfg.batch_size):
            chunk = [train_records[i] for i in order[lo:lo + cfg.batch_size]]
            labels = np.array([r[0] for r in chunk], dtype=np.int64)
            out = batch_forward(model, provider, chunk, acts_cache)
            loss = batch_loss(model, out, labels, cfg)
            if not np.isfinite(loss.data):
                raise NumericError(f"non-finite training loss at epoch {epoch}")
            optimizer.zero_grad()
            tt.backward(loss)
            optimizer.step(lr=lr)
            losses.append(float(loss.data))
        rec = evaluate(model, provider, val_records, cfg, epoch=epoch, acts_cache=acts_cache) \
            if val_records else \
            MetricsRecord(epoch=epoch, train_loss=0.0, top1=0.0,
                          per_class=[0.0] * model.cfg.num_classes, seconds=0.0)
        rec.train_loss = float(np.mean(losses))
        rec.seconds = time.perf_counter() - t0
        metrics.append(rec)
        if log is not None:
            log(f"epoch {epoch}: loss {rec.train_loss:.4f} val_top1 {rec.top1:.4f} "
                f"({rec.seconds:.1f}s)")
    return metrics, optimizer


def per_class_delta(metrics_fused: MetricsRecord, metrics_rgb_only: MetricsRecord):
    """Per-class accuracy gain of the fused model over the RGB baseline,
    sorted by delta, largest gain first."""
    a, b = metrics_fused.per_class, metrics_rgb_only.per_class
    if len(a) != len(b):
        raise ContractError(f"per_class_delta: class count mismatch {len(a)} vs {len(b)}")
    rows = [{"class_id": c, "acc_rgb_only": b[c], "acc_fused": a[c], "delta": a[c] - b[c]}
            for c in range(len(a))]
    return sorted(rows, key=lambda r: (-r["delta"], r["class_id"]))


# ---------------------------------------------------------------------------
# checkpointing
# ---------------------------------------------------------------------------

_REC_HEAD = struct.Struct("<HBB")

_KIND_F64 = 0
_KIND_BYTES = 1


def _pack_record(out, name: str, kind: int, payload, dims) -> None:
    nb = name.encode("utf-8")
    out.append(struct.pack("<H", len(nb)))
    out.append(nb)
    out.append(struct.pack("<BB", kind, len(dims)))
    out.append(struct.pack(f"<{len(dims)}I", *dims) if dims else b"")
    out.append(payload)


def _ckpt_records(model: ActionModel, optimizer: AdamW | None, meta: dict):
    yield "meta", _KIND_BYTES, json.dumps(meta, sort_keys=True).encode("utf-8")
    for name, p in model.named_params().items():
        yield f"param/{name}", _KIND_F64, p.data
    if optimizer is not None:
        yield "opt/meta", _KIND_BYTES, json.dumps({"step": optimizer.step_count}).encode("utf-8")
        for name in model.trainable_params():
            yield f"opt/m/{name}", _KIND_F64, optimizer.m[name]
            yield f"opt/v/{name}", _KIND_F64, optimizer.v[name]


def save_checkpoint(path, model: ActionModel, optimizer: AdamW | None = None,
                    train_cfg: TrainConfig | None = None, next_epoch: int = 0,
                    extra: dict | None = None) -> None:
    meta = {
        "model_config": dataclasses.asdict(model.cfg),
        "model_seed": model.seed,
        "train_config": dataclasses.asdict(train_cfg) if train_cfg else None,
        "next_epoch": int(next_epoch),
        # the training loop derives its RNG statelessly from (seed, epoch),
        # so this pair is the full RNG state
        "rng": {"seed": train_cfg.seed if train_cfg else None, "next_epoch": int(next_epoch)},
    }
    if extra:
        meta.update(extra)
    chunks = []
    records = list(_ckpt_records(model, optimizer, meta))
    chunks.append(struct.pack("<8sII", CKPT_MAGIC, CKPT_VERSION, len(records)))
    for name, kind, payload in records:
        if kind == _KIND_F64:
            # note: ascontiguousarray would promote 0-d scalars to shape (1,)
            arr = np.asarray(payload, dtype="<f8", order="C")
            _pack_record(chunks, name, kind, arr.tobytes(), arr.shape)
        else:
            _pack_record(chunks, name, kind, payload, (len(payload),))
    with open(path, "wb") as f:
        f.write(b"".join(chunks))


def read_checkpoint(path) -> dict:
    with open(path, "rb") as f:
        blob = f.read()
    head = struct.Struct("<8sII")
    if len(blob) < head.size:
        raise FormatError(f"{path}: truncated checkpoint")
    magic, version, count = head.unpack_from(blob, 0)
    if magic != CKPT_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    off = head.size
    records = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        kind, rank = struct.unpack_from("<BB", blob, off)
        off += 2
        dims = struct.unpack_from(f"<{rank}I", blob, off)
        off += 4 * rank
        if kind == _KIND_F64:
            n = int(np.prod(dims)) if dims else 1
            records[name] = np.frombuffer(blob[off:off + 8 * n], dtype="<f8").reshape(dims).copy()
            off += 8 * n
        elif kind == _KIND_BYTES:
            n = dims[0]
            records[name] = blob[off:off + n]
            off += n
        else:
            raise FormatError(f"{path}: unknown record kind {kind} for {name!r}")
    return records


def load_checkpoint(path, expected_model_cfg: ModelConfig | None = None):
    """Rebuild (model, meta, records). Verifies config compatibility field
    by field when an expected config is supplied."""
    records = read_checkpoint(path)
    if "meta" not in records:
        raise FormatError(f"{path}: missing meta record")
    meta = json.loads(records["meta"].decode("utf-8"))
    cfg = ModelConfig(**meta["model_config"])
    if expected_model_cfg is not None:
        for fld in dataclasses.fields(ModelConfig):
            got = getattr(cfg, fld.name)
            want = getattr(expected_model_cfg, fld.name)
            if got != want:
                raise FormatError(f"checkpoint config mismatch on {fld.name!r}: {got} != {want}")
    model = ActionModel(cfg, seed=meta["model_seed"])
    for name, p in model.named_params().items():
        key = f"param/{name}"
        if key not in records:
            raise FormatError(f"checkpoint missing tensor {name!r}")
        arr = records[key]
        if arr.shape != p.data.shape:
            raise FormatError(f"checkpoint shape mismatch for {name!r}: {arr.shape} != {p.data.shape}")
        p.data = arr
    return model, meta, records


def restore_optimizer(model: ActionModel, records: dict, train_cfg: TrainConfig) -> AdamW:
    opt = AdamW(model.trainable_params(), lr=train_cfg.lr,
                betas=(train_cfg.beta1, train_cfg.beta2), eps=train_cfg.eps,
                weight_decay=train_cfg.weight_decay)
    if "opt/meta" in records:
        opt.step_count = int(json.loads(records["opt/meta"].decode("utf-8"))["step"])
        for name in model.trainable_params():
            opt.m[name] = records[f"opt/m/{name}"]
            opt.v[name] = records[f"opt/v/{name}"]
    return opt
