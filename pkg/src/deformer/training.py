"""Adam with a one-shot plateau drop, early stopping, and binary checkpoints."""
import dataclasses
import json
import logging
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from deformer import numerics as nx
from deformer.model import DEformer, HeadConfig, ModelConfig, shuffle_orderings
from deformer.transformer import TransformerConfig

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"DEFORMCK"
CHECKPOINT_VERSION = 1
LOG_HEADER = "epoch,train_nll,val_nll,lr,seconds"

# labels for per-purpose random streams derived from one master seed
STREAM_DATA, STREAM_ORDERING, STREAM_INIT, STREAM_DROPOUT, STREAM_SAMPLING = 1, 2, 3, 4, 5


class NumericalError(RuntimeError):
    pass


def stream(seed, label, *extra):
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(label, *extra)))


# ----------------------------------------------------------------------------
# optimizer
# ----------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-9
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state):
    """One bias-corrected Adam update, in place on ``params`` (name -> array)."""
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient in parameter {name!r}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, theta in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(theta)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(theta)
            state.v[name] = np.zeros_like(theta)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        theta -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


def clip_grad_norm(grads, max_norm):
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values() if g is not None))
    if total > max_norm:
        s = max_norm / (total + 1e-12)
        for g in grads.values():
            if g is not None:
                g *= s
    return total


# ----------------------------------------------------------------------------
# schedule
# ----------------------------------------------------------------------------

@dataclass
class PlateauSchedule:
    """Drop the learning rate once after ``patience`` epochs without a strictly lower validation loss."""

    patience: int = 5
    factor: float = 0.1
    stop_patience: int = None
    best: float = math.inf
    epochs_since_best: int = 0
    reduced: bool = False

    def __post_init__(self):
        if self.stop_patience is None:
            self.stop_patience = 3 * self.patience

    def update(self, val_loss):
        """Record one epoch's validation loss; returns True if the lr should drop now."""
        if val_loss < self.best:
            self.best = val_loss
            self.epochs_since_best = 0
            return False
        self.epochs_since_best += 1
        if not self.reduced and self.epochs_since_best >= self.patience:
            self.reduced = True
            return True
        return False

    @property
    def should_stop(self):
        return self.epochs_since_best >= self.stop_patience


# ----------------------------------------------------------------------------
# checkpoints
# ----------------------------------------------------------------------------

@dataclass
class Checkpoint:
    metadata: dict
    arrays: dict
    version: int = CHECKPOINT_VERSION

    def to_bytes(self):
        meta = "".join(f"{k}:{_meta_str(v)}\n" for k, v in sorted(self.metadata.items())).encode("utf-8")
        dtype = np.dtype(self.metadata.get("dtype", "float64")).newbyteorder("<")
        out = [CHECKPOINT_MAGIC, struct.pack("<IQ", self.version, len(meta)), meta]
        for name, arr in self.arrays.items():
            key = name.encode("utf-8")
            arr = np.asarray(arr)
            out.append(struct.pack("<I", len(key)) + key + struct.pack("<I", arr.ndim))
            out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            out.append(np.ascontiguousarray(arr, dtype=dtype).tobytes())
        return b"".join(out)

    @classmethod
    def from_bytes(cls, buf):
        if buf[:8] != CHECKPOINT_MAGIC:
            raise ValueError("not a checkpoint: bad magic")
        version, meta_len = struct.unpack_from("<IQ", buf, 8)
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        pos = 20
        meta_text = buf[pos:pos + meta_len].decode("utf-8")
        pos += meta_len
        metadata = {}
        for line in meta_text.splitlines():
            k, _, v = line.partition(":")
            metadata[k] = v
        dtype = np.dtype(metadata.get("dtype", "float64")).newbyteorder("<")
        arrays = {}
        while pos < len(buf):
            (n,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}Q", buf, pos)
            pos += 8 * rank
            count = math.prod(dims)
            arr = np.frombuffer(buf, dtype=dtype, count=count, offset=pos).reshape(dims)
            arrays[name] = arr.astype(dtype.newbyteorder("="))
            pos += count * dtype.itemsize
        return cls(metadata, arrays, version)

    def save(self, path):
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path):
        return cls.from_bytes(Path(path).read_bytes())


def _meta_str(v):
    if isinstance(v, str):
        if "\n" in v:
            raise ValueError("metadata values must be single-line")
        return v
    return json.dumps(v, sort_keys=True)


def model_config_to_meta(cfg):
    meta = {
        "model.num_features": cfg.num_features,
        "model.identity": cfg.identity,
        "model.image_shape": list(cfg.image_shape),
        "model.embedding_dim": cfg.embedding_dim,
        "model.mlp_hidden": list(cfg.mlp_hidden),
        "model.precision": cfg.precision,
    }
    for f in dataclasses.fields(HeadConfig):
        meta[f"model.head.{f.name}"] = getattr(cfg.head, f.name)
    for f in dataclasses.fields(TransformerConfig):
        meta[f"model.transformer.{f.name}"] = getattr(cfg.transformer, f.name)
    return {k: json.dumps(v) for k, v in meta.items()}


def model_config_from_meta(meta):
    g = lambda k: json.loads(meta[k])  # noqa: E731
    head = HeadConfig(**{f.name: g(f"model.head.{f.name}") for f in dataclasses.fields(HeadConfig)})
    tcfg = TransformerConfig(**{f.name: g(f"model.transformer.{f.name}") for f in dataclasses.fields(TransformerConfig)})
    return ModelConfig(
        num_features=g("model.num_features"),
        identity=g("model.identity"),
        image_shape=tuple(g("model.image_shape")),
        embedding_dim=g("model.embedding_dim"),
        mlp_hidden=tuple(g("model.mlp_hidden")),
        head=head,
        transformer=tcfg,
        precision=g("model.precision"),
    )


def make_checkpoint(model, adam=None, schedule=None, rngs=None, epoch=0, extra=None):
    meta = model_config_to_meta(model.config)
    meta["dtype"] = str(model.dtype)
    meta["epoch"] = str(epoch)
    # copies: the optimizer updates parameters and moments in place
    arrays = {f"param/{k}": v.copy() for k, v in model.state_arrays().items()}
    if adam is not None:
        for k in ("lr", "beta1", "beta2", "eps"):
            meta[f"adam.{k}"] = repr(float(getattr(adam, k)))
        meta["adam.t"] = str(adam.t)
        for k in model.params:
            if k in adam.m:
                arrays[f"adam.m/{k}"] = adam.m[k].copy()
                arrays[f"adam.v/{k}"] = adam.v[k].copy()
    if schedule is not None:
        for f in dataclasses.fields(PlateauSchedule):
            meta[f"schedule.{f.name}"] = _meta_str(getattr(schedule, f.name) if f.name != "best"
                                                   else repr(float(schedule.best)))
    for name, rng in (rngs or {}).items():
        meta[f"rng.{name}"] = json.dumps(rng.bit_generator.state, sort_keys=True)
    for k, v in (extra or {}).items():
        meta[k] = _meta_str(v)
    return Checkpoint(meta, arrays)


def model_from_checkpoint(ckpt):
    model = DEformer(model_config_from_meta(ckpt.metadata), seed=0)
    model.load_state_arrays({k[len("param/"):]: v for k, v in ckpt.arrays.items() if k.startswith("param/")})
    return model


def adam_from_checkpoint(ckpt):
    meta = ckpt.metadata
    state = AdamState(lr=float(meta["adam.lr"]), beta1=float(meta["adam.beta1"]), beta2=float(meta["adam.beta2"]),
                      eps=float(meta["adam.eps"]), t=int(meta["adam.t"]))
    for k, v in ckpt.arrays.items():
        if k.startswith("adam.m/"):
            state.m[k[len("adam.m/"):]] = v.copy()
        elif k.startswith("adam.v/"):
            state.v[k[len("adam.v/"):]] = v.copy()
    return state


def schedule_from_checkpoint(ckpt):
    meta = ckpt.metadata
    return PlateauSchedule(
        patience=int(meta["schedule.patience"]), factor=float(meta["schedule.factor"]),
        stop_patience=int(meta["schedule.stop_patience"]), best=float(meta["schedule.best"]),
        epochs_since_best=int(meta["schedule.epochs_since_best"]), reduced=json.loads(meta["schedule.reduced"]),
    )


def rng_from_checkpoint(ckpt, name):
    rng = np.random.default_rng()
    rng.bit_generator.state = json.loads(ckpt.metadata[f"rng.{name}"])
    return rng


# ----------------------------------------------------------------------------
# training loop
# ----------------------------------------------------------------------------

@dataclass
class TrainConfig:
    batch_size: int = 128
    max_epochs: int = 100
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-9
    patience: int = 5
    lr_factor: float = 0.1
    stop_patience: int = None
    clip_norm: float = None
    seed: int = 0
    steps_per_epoch: int = None
    time_limit: float = None
    eval_batch_size: int = 256
    output_dir: str = None


@dataclass
class TrainResult:
    history: list
    best_checkpoint: Checkpoint
    last_checkpoint: Checkpoint
    stopped_early: bool = False


def validation_orderings(n, d, seed):
    """One fixed ordering per validation sample."""
    return shuffle_orderings(n, d, stream(seed, STREAM_ORDERING, 1))


def mean_nll(model, x, orderings, batch_size=256):
    total = []
    with nx.no_grad():
        for i in range(0, len(x), batch_size):
            total.append(model.nll_of(x[i:i + batch_size], orderings[i:i + batch_size]).data)
    return float(math.fsum(np.concatenate(total))) / len(x) if total else math.nan


def train(model, train_x, val_x, config, resume=None):
    """Order-shuffled maximum-likelihood training with plateau schedule and early stopping."""
    train_x = np.asarray(train_x)
    val_x = np.asarray(val_x)
    d = model.config.num_features
    if train_x.ndim != 2 or train_x.shape[1] != d:
        raise ValueError(f"training data must be N x {d}, got {train_x.shape}")
    out_dir = Path(config.output_dir) if config.output_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)

    if resume is not None:
        model.load_state_arrays({k[6:]: v for k, v in resume.arrays.items() if k.startswith("param/")})
        adam = adam_from_checkpoint(resume)
        schedule = schedule_from_checkpoint(resume)
        rngs = {n: rng_from_checkpoint(resume, n) for n in ("data", "ordering", "dropout")}
        start_epoch = int(resume.metadata["epoch"])
        history = json.loads(resume.metadata.get("history", "[]"))
    else:
        adam = AdamState(lr=config.lr, beta1=config.beta1, beta2=config.beta2, eps=config.eps)
        schedule = PlateauSchedule(config.patience, config.lr_factor, config.stop_patience)
        rngs = {"data": stream(config.seed, STREAM_DATA), "ordering": stream(config.seed, STREAM_ORDERING),
                "dropout": stream(config.seed, STREAM_DROPOUT)}
        start_epoch = 0
        history = []

    val_orders = validation_orderings(len(val_x), d, config.seed)
    training = model.config.transformer.dropout_p > 0
    params = model.params
    best = None
    last = None
    stopped = False
    started = time.monotonic()
    log_path = out_dir / "train_log.csv" if out_dir else None
    if log_path and (resume is None or not log_path.exists()):
        log_path.write_text(LOG_HEADER + "\n")

    for epoch in range(start_epoch + 1, config.max_epochs + 1):
        t0 = time.monotonic()
        perm = rngs["data"].permutation(len(train_x))
        if config.steps_per_epoch:
            perm = perm[:config.steps_per_epoch * config.batch_size]
        losses = []
        seen = 0
        for b, i in enumerate(range(0, len(perm), config.batch_size)):
            batch = train_x[perm[i:i + config.batch_size]]
            orders = shuffle_orderings(len(batch), d, rngs["ordering"])
            nll = model.nll_of(batch, orders, training=training, rng=rngs["dropout"])
            loss = nx.scale(nx.sum(nll), 1.0 / len(batch))
            if not np.isfinite(loss.item()):
                nx.clear_tape()
                raise NumericalError(f"non-finite loss at epoch {epoch}, batch {b}")
            for p in params.values():
                p.grad = None
            nx.backward(loss)
            grads = {k: p.grad for k, p in params.items()}
            if config.clip_norm:
                clip_grad_norm(grads, config.clip_norm)
            adam_step({k: p.data for k, p in params.items()}, grads, adam)
            losses.append(float(nll.data.sum()))
            seen += len(batch)
            if config.time_limit and time.monotonic() - started > config.time_limit:
                break
        train_nll = math.fsum(losses) / max(1, seen)
        val_nll = mean_nll(model, val_x, val_orders, config.eval_batch_size)
        if not math.isfinite(val_nll):
            raise NumericalError(f"non-finite validation loss at epoch {epoch}")
        improved = val_nll < schedule.best
        if schedule.update(val_nll):
            adam.lr *= schedule.factor
            log.info("epoch %d: learning rate reduced to %g", epoch, adam.lr)
        seconds = time.monotonic() - t0
        row = {"epoch": epoch, "train_nll": train_nll, "val_nll": val_nll, "lr": adam.lr, "seconds": seconds}
        history.append(row)
        log.info("epoch %d train %.5f val %.5f lr %g (%.1fs)", epoch, train_nll, val_nll, adam.lr, seconds)
        if log_path:
            with open(log_path, "a") as fh:
                fh.write(f"{epoch},{train_nll!r},{val_nll!r},{adam.lr!r},{seconds:.3f}\n")
        last = make_checkpoint(model, adam, schedule, rngs, epoch,
                               extra={"history": [{k: v for k, v in h.items() if k != "seconds"} for h in history]})
        if improved:
            best = last
            if out_dir:
                best.save(out_dir / "best.ckpt")
        if out_dir:
            last.save(out_dir / "last.ckpt")
        if schedule.should_stop:
            stopped = True
            break
        if config.time_limit and time.monotonic() - started > config.time_limit:
            break
    return TrainResult(history, best or last, last, stopped)


def restore_best(model, result):
    ckpt = result.best_checkpoint
    model.load_state_arrays({k[6:]: v for k, v in ckpt.arrays.items() if k.startswith("param/")})
    return model
