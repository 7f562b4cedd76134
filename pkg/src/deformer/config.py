"""Flat ``section.key = value`` run configuration with named default profiles."""
from dataclasses import dataclass

PROFILES = ("desk", "paper-mnist", "paper-power")


class ConfigError(ValueError):
    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key


def _int_tuple(text):
    text = text.strip().strip("()[]")
    return tuple(int(t) for t in text.split(",") if t.strip())


def _bool(text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass(frozen=True)
class Key:
    name: str
    parse: object
    desk: object
    mnist: object
    power: object
    source: str           # "paper" when the paper fixes the value, otherwise "desk"
    help: str
    choices: tuple = ()

    def default(self, profile):
        return {"desk": self.desk, "paper-mnist": self.mnist, "paper-power": self.power}[profile]


def _k(name, parse, desk, mnist=None, power=None, source="desk", help="", choices=()):
    mnist = desk if mnist is None else mnist
    power = mnist if power is None else power
    return Key(name, parse, desk, mnist, power, source, help, choices)


KEYS = [
    _k("run.seed", int, 0, help="master seed; streams data=1 ordering=2 init=3 dropout=4 sampling=5"),
    _k("run.output_dir", str, "runs/default", help="directory for every artifact"),

    _k("dataset.kind", str, "synthetic", "mnist", "tabular", choices=("synthetic", "mnist", "tabular"),
       help="synthetic binary joint, IDX images, or CSV table"),
    _k("dataset.train_path", str, "", help="IDX images or CSV rows used for training"),
    _k("dataset.test_path", str, "", help="IDX test images (mnist)"),
    _k("dataset.ood_path", str, "", help="IDX images scored as out-of-distribution"),
    _k("dataset.binarize", str, "threshold", choices=("threshold", "stochastic"), help="u8 -> {0,1} rule"),
    _k("dataset.threshold", int, 128, help="pixel >= threshold becomes 1"),
    _k("dataset.validation_size", int, 1200, source="paper", help="training images held out for validation"),
    _k("dataset.split_seed", int, -1, help="-1 holds out the last images by file order"),
    _k("dataset.tabular_preset", str, "power", choices=("power", "none"),
       help="power: drop columns 3,1 + dequantization noise; none: standardize only"),
    _k("dataset.synthetic_path", str, "", help="joint table file; empty draws a random joint"),
    _k("dataset.synthetic_features", int, 4, help="D of the random synthetic joint"),
    _k("dataset.synthetic_samples", int, 20000, help="training draws from the synthetic joint"),

    _k("model.head", str, "bernoulli", "bernoulli", "gmm", source="paper", choices=("bernoulli", "categorical", "gmm"),
       help="output distribution per feature"),
    _k("model.num_classes", int, 2, help="labels per feature for categorical heads"),
    _k("model.mixtures", int, 10, 150, 150, source="paper", help="mixture components J (output width 3J)"),
    _k("model.d_model", int, 64, 512, 512, source="paper", help="Transformer width"),
    _k("model.n_heads", int, 4, 8, 8, source="paper", help="attention heads"),
    _k("model.d_ff", int, 256, 2048, 2048, source="paper", help="feed-forward inner width"),
    _k("model.n_layers", int, 2, 6, 6, source="paper", help="encoder layers"),
    _k("model.dropout", float, 0.0, 0.0, 0.2, source="paper", help="dropout probability"),
    _k("model.mlp_hidden", _int_tuple, (64, 128), (128, 256), (128, 256), source="paper",
       help="first two MLP widths of g_z/g_u (third equals d_model)"),
    _k("model.embedding_dim", int, 20, source="paper", help="column identity embedding width"),
    _k("model.precision", str, "float32", choices=("float32", "float64"), help="float width for training"),

    _k("optimizer.lr", float, 1e-3, 1e-6, 1e-6, source="paper", help="initial Adam learning rate"),
    _k("optimizer.lr_factor", float, 0.1, source="paper", help="one-time plateau multiplier (1e-6 -> 1e-7)"),
    _k("optimizer.beta1", float, 0.9, source="paper", help="Adam beta1"),
    _k("optimizer.beta2", float, 0.999, source="paper", help="Adam beta2"),
    _k("optimizer.eps", float, 1e-9, source="paper", help="Adam epsilon"),
    _k("optimizer.batch_size", int, 128, 1, 128, source="paper", help="samples per step"),
    _k("optimizer.patience", int, 5, 5, 20, source="paper", help="non-improving epochs before the lr drop"),
    _k("optimizer.stop_patience", int, 15, 15, 60, help="non-improving epochs before early stopping"),
    _k("optimizer.max_epochs", int, 50, 50, 700, source="paper", help="epoch cap"),
    _k("optimizer.clip_norm", float, 0.0, help="global gradient-norm clip; 0 disables"),
    _k("optimizer.steps_per_epoch", int, 0, help="cap on steps per epoch; 0 uses the whole split"),
    _k("optimizer.time_limit", float, 0.0, help="wall-clock cap in seconds; 0 disables"),

    _k("eval.orderings", int, 10, source="paper", help="random orderings averaged per sample"),
    _k("eval.seed", int, 0, help="seed for evaluation orderings"),
    _k("eval.batch_size", int, 256, help="rows per evaluation forward pass"),
    _k("eval.max_samples", int, 0, help="evaluate only the first N test samples; 0 = all"),

    _k("generate.num_samples", int, 50, source="paper", help="samples to draw"),
    _k("generate.clamp", float, 10.0, help="clip continuous draws to +/- this many training stds"),

    _k("impute.num_images", int, 10, help="test samples to corrupt and fill"),
    _k("impute.num_missing", int, 100, source="paper", help="features removed per sample"),
    _k("impute.pattern", str, "random", choices=("random", "square", "rows", "columns"),
       help="shape of the removed region"),
    _k("impute.mode", str, "sample", choices=("sample", "argmax"), help="fill by sampling or argmax"),

    _k("ood.bins", int, 50, help="histogram bins for the score summary"),
]

KEY_INDEX = {k.name: k for k in KEYS}


def defaults(profile="desk"):
    if profile not in PROFILES:
        raise ConfigError("profile", f"unknown profile {profile!r}; expected one of {PROFILES}")
    return {k.name: k.default(profile) for k in KEYS}


def parse_value(key, text):
    spec = KEY_INDEX.get(key)
    if spec is None:
        raise ConfigError(key, "unknown configuration key")
    try:
        value = spec.parse(text.strip()) if spec.parse is not str else text.strip()
    except (ValueError, TypeError):
        raise ConfigError(key, f"cannot parse {text.strip()!r} as {getattr(spec.parse, '__name__', 'value')}") from None
    if spec.choices and value not in spec.choices:
        raise ConfigError(key, f"{value!r} not in {spec.choices}")
    return value


def parse_text(text):
    """Parse ``key = value`` lines; ``[section]`` headers prefix bare keys; ``#`` starts a comment."""
    out = {}
    section = ""
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", f"expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if section and "." not in key:
            key = f"{section}.{key}"
        if key == "profile":
            out[key] = value
            continue
        out[key] = parse_value(key, value)
    return out


def format_value(v):
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def dump(config, profile):
    lines = [f"profile = {profile}"]
    lines += [f"{k} = {format_value(config[k])}" for k in sorted(config)]
    return "\n".join(lines) + "\n"


def resolve(profile="desk", file_text=None, overrides=()):
    """Profile defaults, then the config file, then ``key=value`` overrides."""
    file_values = parse_text(file_text) if file_text else {}
    profile = file_values.pop("profile", profile)
    config = defaults(profile)
    config.update(file_values)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(item, "override must look like key=value")
        key, value = item.split("=", 1)
        config[key.strip()] = parse_value(key.strip(), value)
    return profile, config


def help_text():
    rows = ["configuration keys (desk | paper-mnist | paper-power defaults, provenance):"]
    for k in KEYS:
        vals = " | ".join(format_value(k.default(p)) or '""' for p in PROFILES)
        tag = "paper-default" if k.source == "paper" else "desk-default"
        rows.append(f"  {k.name:<28} {vals:<40} [{tag}] {k.help}")
    return "\n".join(rows)
