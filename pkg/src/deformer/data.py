"""Dataset ingestion: IDX images, CSV tables, binarization, synthetic joints."""
import csv
import gzip
import io
import itertools
import math
import struct
from dataclasses import dataclass, field

import numpy as np

IDX_U8_3D = 0x00000803
IDX_U8_1D = 0x00000801
_IDX_RANK = {IDX_U8_1D: 1, IDX_U8_3D: 3}


class DataError(ValueError):
    pass


# ----------------------------------------------------------------------------
# IDX
# ----------------------------------------------------------------------------

def parse_idx(buf):
    """Decode an unsigned-byte IDX file (1-D labels or 3-D images)."""
    buf = bytes(buf)
    if len(buf) < 4:
        raise DataError("truncated: header shorter than the magic number")
    (magic,) = struct.unpack(">I", buf[:4])
    if magic not in _IDX_RANK:
        raise DataError(f"unsupported magic 0x{magic:08x}")
    rank = _IDX_RANK[magic]
    header = 4 + 4 * rank
    if len(buf) < header:
        raise DataError("truncated: incomplete dimension header")
    dims = struct.unpack(f">{rank}I", buf[4:header])
    count = math.prod(dims)
    payload = len(buf) - header
    if payload < count:
        raise DataError(f"truncated: declared {count} items, found {payload}")
    if payload > count:
        raise DataError(f"trailing bytes: {payload - count} beyond the declared {count} items")
    return np.frombuffer(buf, dtype=np.uint8, offset=header).reshape(dims).copy()


def write_idx(array):
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise DataError(f"IDX writer handles uint8 only, got {array.dtype}")
    magic = {1: IDX_U8_1D, 3: IDX_U8_3D}.get(array.ndim)
    if magic is None:
        raise DataError(f"IDX writer handles rank 1 or 3, got rank {array.ndim}")
    return struct.pack(f">I{array.ndim}I", magic, *array.shape) + array.tobytes()


def read_idx(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if str(path).endswith(".gz"):
        raw = gzip.decompress(raw)
    return parse_idx(raw)


# ----------------------------------------------------------------------------
# images
# ----------------------------------------------------------------------------

def binarize(image, mode="threshold", threshold=128, seed=None, rng=None):
    """Map u8 grayscale to {0, 1}.

    ``threshold``: pixel >= t becomes 1. ``stochastic``: pixel becomes 1
    with probability value / 255.
    """
    image = np.asarray(image)
    if mode == "threshold":
        if not 0 <= threshold <= 255:
            raise ValueError(f"threshold must lie in [0, 255], got {threshold}")
        return (image >= threshold).astype(np.uint8)
    if mode == "stochastic":
        rng = rng if rng is not None else np.random.default_rng(seed)
        return (rng.random(image.shape) * 255.0 < image).astype(np.uint8)
    raise ValueError(f"unknown binarization mode {mode!r}")


@dataclass
class ImageDataset:
    train: np.ndarray        # N x H x W, values in {0, 1}
    validation: np.ndarray
    test: np.ndarray

    @property
    def image_shape(self):
        return self.train.shape[1:]

    def flat(self, split):
        a = getattr(self, split)
        return a.reshape(len(a), -1)


def split_validation(images, size=1200, seed=None):
    """Hold out ``size`` images; the last ones by file order unless seeded."""
    n = len(images)
    if not 0 <= size < n:
        raise DataError(f"validation size {size} incompatible with {n} training images")
    if seed is None:
        return images[:n - size], images[n - size:]
    idx = np.random.default_rng(seed).permutation(n)
    return images[np.sort(idx[size:])], images[np.sort(idx[:size])]


def load_binarized_images(train_path, test_path, mode="threshold", threshold=128, seed=0,
                          validation_size=1200, split_seed=None):
    rng = np.random.default_rng(seed)
    train = binarize(read_idx(train_path), mode, threshold, rng=rng)
    test = binarize(read_idx(test_path), mode, threshold, rng=rng)
    if train.ndim != 3 or test.ndim != 3:
        raise DataError("image IDX files must be 3-D")
    train, val = split_validation(train, validation_size, split_seed)
    return ImageDataset(train, val, test)


def write_pgm(path, image, maxval=255):
    """Write a binary (P5) PGM; {0,1} images are scaled to {0, maxval}."""
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError("PGM images must be 2-D")
    if image.max(initial=0) <= 1:
        image = image * maxval
    data = np.clip(image, 0, maxval).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{data.shape[1]} {data.shape[0]}\n{maxval}\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5":
        raise DataError("not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval > 255:
        raise DataError("16-bit PGM not supported")
    return np.frombuffer(parts[4][:w * h], dtype=np.uint8).reshape(h, w)


# ----------------------------------------------------------------------------
# tables
# ----------------------------------------------------------------------------

@dataclass
class TabularDataset:
    train: np.ndarray
    validation: np.ndarray
    test: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    columns: list = field(default_factory=list)

    @property
    def num_features(self):
        return self.train.shape[1]

    def inverse_transform(self, rows):
        return np.asarray(rows) * self.std + self.mean


def read_csv(path_or_text, text=False):
    """Comma-separated, header row, '.' decimals; anything else is rejected."""
    handle = io.StringIO(path_or_text) if text else open(path_or_text, newline="")
    with handle:
        reader = csv.reader(handle, delimiter=",", strict=True)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError("empty CSV: header row required") from None
        if any(_is_number(h) for h in header):
            raise DataError("CSV header row required (first row is numeric)")
        rows = []
        for r, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"row {r}: expected {len(header)} cells, found {len(row)}")
            vals = []
            for c, cell in enumerate(row):
                try:
                    v = float(cell)
                except ValueError:
                    raise DataError(f"row {r}, column {c + 1} ({header[c]!r}): non-numeric cell {cell!r}") from None
                if not math.isfinite(v):
                    raise DataError(f"row {r}, column {c + 1} ({header[c]!r}): non-finite cell {cell!r}")
                vals.append(v)
            rows.append(vals)
    return header, np.array(rows, dtype=np.float64).reshape(-1, len(header))


def _is_number(s):
    try:
        float(s)
        return True
    except ValueError:
        return False


def split_sizes(n, test_fraction=0.1, validation_fraction=0.1):
    """(train, validation, test) sizes: test is the last 10%, validation the last 10% of the rest."""
    n_test = int(test_fraction * n)
    n_val = int(validation_fraction * (n - n_test))
    return n - n_test - n_val, n_val, n_test


# column 3 (global intensity) and column 1 (reactive power) are dropped;
# noise is added per remaining column: active power, voltage, 3 sub-meterings, time
POWER_DROP = (3, 1)
POWER_NOISE = (0.001, 0.01, 1.0, 1.0, 1.0, 0.0)


def preprocess_tabular(raw, columns=None, drop_columns=(), noise_scales=None, seed=42, shuffle=True,
                       test_fraction=0.1, validation_fraction=0.1):
    """Shuffle, drop columns, dequantize with uniform noise, split, standardize.

    Columns are standardized with the training split's mean and std.
    """
    data = np.array(raw, dtype=np.float64)
    if data.ndim != 2:
        raise DataError("tabular data must be 2-D")
    columns = list(columns) if columns is not None else [f"x{i}" for i in range(data.shape[1])]
    rng = np.random.RandomState(seed)
    if shuffle:
        rng.shuffle(data)
    for c in drop_columns:
        data = np.delete(data, c, axis=1)
        del columns[c]
    if noise_scales is not None:
        noise_scales = np.asarray(noise_scales, dtype=np.float64)
        if noise_scales.shape != (data.shape[1],):
            raise DataError(f"{len(noise_scales)} noise scales for {data.shape[1]} columns")
        data = data + rng.rand(*data.shape) * noise_scales
    n_train, n_val, _ = split_sizes(len(data), test_fraction, validation_fraction)
    train = data[:n_train]
    val = data[n_train:n_train + n_val]
    test = data[n_train + n_val:]
    if len(train) == 0:
        raise DataError("empty training split")
    mean = train.mean(axis=0)
    std = train.std(axis=0)
    flat = np.flatnonzero(std <= 1e-12)
    if flat.size:
        raise DataError(f"zero variance in column {columns[flat[0]]!r}")
    norm = lambda a: (a - mean) / std  # noqa: E731
    return TabularDataset(norm(train), norm(val), norm(test), mean, std, columns)


def load_power(path, seed=42):
    columns, raw = read_csv(path)
    if raw.shape[1] != 8:
        raise DataError(f"POWER CSV must have 8 columns, found {raw.shape[1]}")
    return preprocess_tabular(raw, columns, POWER_DROP, POWER_NOISE, seed=seed)


# ----------------------------------------------------------------------------
# synthetic binary joints
# ----------------------------------------------------------------------------

class SyntheticJoint:
    """An explicit probability table over ``2**D`` binary configurations.

    Configuration index uses the first feature as the most significant bit,
    so lexicographic order of the bit strings is table order.
    """

    def __init__(self, table):
        table = np.asarray(table, dtype=np.float64)
        d = int(round(math.log2(len(table)))) if len(table) else 0
        if d < 1 or 2 ** d != len(table):
            raise ValueError(f"table length {len(table)} is not a power of two >= 2")
        if np.any(table < 0):
            raise ValueError("negative probability in table")
        if abs(table.sum() - 1.0) > 1e-12:
            raise ValueError(f"probabilities sum to {table.sum()!r}, not 1")
        self.table = table
        self.num_features = d

    @classmethod
    def random(cls, d, seed=0, concentration=1.0):
        t = np.random.default_rng(seed).dirichlet(np.full(2 ** d, concentration))
        return cls(t / math.fsum(t))

    @classmethod
    def uniform(cls, d):
        return cls(np.full(2 ** d, 1.0 / 2 ** d))

    @classmethod
    def from_function(cls, d, weight):
        w = np.array([weight(c) for c in configurations(d)], dtype=np.float64)
        return cls(w / math.fsum(w))

    def index(self, x):
        x = np.asarray(x, dtype=np.int64)
        return (x * (1 << np.arange(self.num_features - 1, -1, -1))).sum(axis=-1)

    def prob(self, x):
        return self.table[self.index(x)]

    def sample(self, n, rng):
        idx = rng.choice(len(self.table), size=n, p=self.table)
        return configurations(self.num_features)[idx]

    def entropy(self):
        p = self.table[self.table > 0]
        return float(-math.fsum(p * np.log(p)))

    def to_text(self):
        return "\n".join([str(self.num_features)] + [repr(float(p)) for p in self.table]) + "\n"

    @classmethod
    def from_text(cls, text):
        lines = [ln.strip() for ln in text.strip().splitlines() if ln.strip()]
        try:
            d = int(lines[0])
            table = [float(x) for x in lines[1:]]
        except (ValueError, IndexError):
            raise DataError("malformed synthetic joint file") from None
        if len(table) != 2 ** d:
            raise DataError(f"expected {2 ** d} probabilities for D={d}, found {len(table)}")
        return cls(table)


def configurations(d):
    """All ``2**d`` binary vectors in lexicographic order."""
    return np.array(list(itertools.product((0, 1), repeat=d)), dtype=np.int64)


def exact_nll_oracle(joint, sample):
    """-ln p(sample) in nats; impossible configurations give ``inf``."""
    sample = np.asarray(sample)
    if sample.shape[-1] != joint.num_features:
        raise ValueError(f"sample length {sample.shape[-1]} != D={joint.num_features}")
    p = joint.prob(sample)
    with np.errstate(divide="ignore"):
        return -np.log(p)


def is_impossible(joint, sample):
    return joint.prob(sample) == 0
