"""Command-line entry point: train, eval, generate, impute, ood, selftest."""
import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from deformer import config as cfgmod
from deformer import data as datamod
from deformer import numerics as nx
from deformer.inference import evaluate, generate, impute_batch, ood_score, write_summary_csv
from deformer.model import DEformer, HeadConfig, ModelConfig
from deformer.training import (STREAM_DATA, STREAM_INIT, STREAM_SAMPLING, Checkpoint, NumericalError, TrainConfig,
                               model_from_checkpoint, stream, train)
from deformer.transformer import TransformerConfig

log = logging.getLogger("deformer")

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_SELFTEST = 0, 1, 2, 3, 4, 5
COMMANDS = ("train", "eval", "generate", "impute", "ood", "selftest")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser():
    p = _Parser(prog="deformer", description="Order-agnostic distribution estimating Transformer.",
                epilog=cfgmod.help_text(), formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="flat 'section.key = value' file")
    p.add_argument("--profile", default="desk", choices=cfgmod.PROFILES, help="default profile")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one configuration key (repeatable)")
    p.add_argument("--checkpoint", help="checkpoint to load (default: <output_dir>/best.ckpt)")
    p.add_argument("-q", "--quiet", action="store_true")
    return p


# ----------------------------------------------------------------------------
# data and model from config
# ----------------------------------------------------------------------------

class Data:
    def __init__(self, train, validation, test, image_shape=None, extra=None):
        self.train, self.validation, self.test = train, validation, test
        self.image_shape = image_shape
        self.extra = extra or {}


def load_data(c):
    kind = c["dataset.kind"]
    seed = c["run.seed"]
    if kind == "mnist":
        if not c["dataset.train_path"] or not c["dataset.test_path"]:
            raise datamod.DataError("mnist needs dataset.train_path and dataset.test_path")
        split_seed = None if c["dataset.split_seed"] < 0 else c["dataset.split_seed"]
        ds = datamod.load_binarized_images(c["dataset.train_path"], c["dataset.test_path"], c["dataset.binarize"],
                                           c["dataset.threshold"], seed, c["dataset.validation_size"], split_seed)
        return Data(ds.flat("train"), ds.flat("validation"), ds.flat("test"), tuple(ds.image_shape))
    if kind == "tabular":
        if not c["dataset.train_path"]:
            raise datamod.DataError("tabular needs dataset.train_path")
        if c["dataset.tabular_preset"] == "power":
            ds = datamod.load_power(c["dataset.train_path"], seed=42 + seed)
        else:
            cols, raw = datamod.read_csv(c["dataset.train_path"])
            ds = datamod.preprocess_tabular(raw, cols, seed=42 + seed)
        return Data(ds.train, ds.validation, ds.test, extra={"tabular": ds})
    if c["dataset.synthetic_path"]:
        joint = datamod.SyntheticJoint.from_text(Path(c["dataset.synthetic_path"]).read_text())
    else:
        joint = datamod.SyntheticJoint.random(c["dataset.synthetic_features"], seed=seed)
    rng = stream(seed, STREAM_DATA, 9)
    n = c["dataset.synthetic_samples"]
    return Data(joint.sample(n, rng), joint.sample(max(1, n // 10), rng), joint.sample(max(1, n // 10), rng),
                extra={"joint": joint})


def model_config(c, data):
    d = data.train.shape[1]
    head = HeadConfig(c["model.head"], c["model.num_classes"], c["model.mixtures"])
    tcfg = TransformerConfig(c["model.d_model"], c["model.n_heads"], c["model.d_ff"], c["model.n_layers"],
                             c["model.dropout"])
    if data.image_shape:
        return ModelConfig(d, "pixel", data.image_shape, c["model.embedding_dim"], c["model.mlp_hidden"], head, tcfg,
                           c["model.precision"])
    return ModelConfig(d, "column", (0, 0), c["model.embedding_dim"], c["model.mlp_hidden"], head, tcfg,
                       c["model.precision"])


def train_config(c):
    return TrainConfig(
        batch_size=c["optimizer.batch_size"], max_epochs=c["optimizer.max_epochs"], lr=c["optimizer.lr"],
        beta1=c["optimizer.beta1"], beta2=c["optimizer.beta2"], eps=c["optimizer.eps"],
        patience=c["optimizer.patience"], lr_factor=c["optimizer.lr_factor"],
        stop_patience=c["optimizer.stop_patience"], clip_norm=c["optimizer.clip_norm"] or None,
        seed=c["run.seed"], steps_per_epoch=c["optimizer.steps_per_epoch"] or None,
        time_limit=c["optimizer.time_limit"] or None, eval_batch_size=c["eval.batch_size"],
        output_dir=c["run.output_dir"])


def _load_model(args, c):
    path = Path(args.checkpoint) if args.checkpoint else Path(c["run.output_dir"]) / "best.ckpt"
    if not path.exists():
        raise datamod.DataError(f"checkpoint not found: {path}")
    return model_from_checkpoint(Checkpoint.load(path))


def _eval_slice(c, x):
    n = c["eval.max_samples"]
    return x[:n] if n else x


# ----------------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------------

def cmd_train(args, c, out):
    data = load_data(c)
    mcfg = model_config(c, data)
    model = DEformer(mcfg, rng=stream(c["run.seed"], STREAM_INIT))
    log.info("model with %d parameters, %d features", model.num_parameters(), mcfg.num_features)
    result = train(model, data.train, data.validation, train_config(c))
    log.info("finished after %d epochs; best validation NLL %.4f", len(result.history),
             min(h["val_nll"] for h in result.history))
    return EXIT_OK


def cmd_eval(args, c, out):
    data = load_data(c)
    model = _load_model(args, c)
    report = evaluate(model, _eval_slice(c, data.test), c["eval.orderings"], c["eval.seed"], c["eval.batch_size"])
    report.write_csv(out / "eval_report.csv")
    log.info("average NLL over %d orderings: %.4f nats (%d samples)", report.orderings, report.aggregate,
             len(report.mean_nll))
    print(f"{report.aggregate!r}")
    return EXIT_OK


def _image_shape(model):
    return tuple(model.config.image_shape) if model.config.identity == "pixel" else None


def cmd_generate(args, c, out):
    model = _load_model(args, c)
    rng = stream(c["run.seed"], STREAM_SAMPLING)
    gen = generate(model, c["generate.num_samples"], rng, clamp=c["generate.clamp"])
    report = evaluate(model, gen.samples, c["eval.orderings"], c["eval.seed"], c["eval.batch_size"])
    order = np.argsort(report.mean_nll, kind="stable")
    shape = _image_shape(model)
    with open(out / "generated_nll.csv", "w") as fh:
        fh.write("sample_id,mean_nll,std_nll\n")
        for rank, i in enumerate(order):
            fh.write(f"{rank},{float(report.mean_nll[i])!r},{float(report.std_nll[i])!r}\n")
            if shape:
                datamod.write_pgm(out / f"sample_{rank:04d}.pgm", gen.samples[i].reshape(shape))
    if not shape:
        np.savetxt(out / "generated.csv", gen.samples[order], delimiter=",",
                   fmt="%d" if model.config.head.discrete else "%.17g",
                   header=",".join(f"x{j}" for j in range(gen.samples.shape[1])), comments="")
    log.info("wrote %d samples sorted by average NLL", len(order))
    return EXIT_OK


def missing_pattern(shape, count, pattern, rng):
    """Boolean mask with ``count`` True cells laid out by ``pattern``."""
    h, w = shape
    mask = np.zeros((h, w), dtype=bool)
    if pattern == "random":
        mask.reshape(-1)[rng.choice(h * w, size=count, replace=False)] = True
    elif pattern == "square":
        side = int(np.ceil(np.sqrt(count)))
        r, col = rng.integers(0, h - side + 1), rng.integers(0, w - side + 1)
        block = np.zeros((side, side), dtype=bool)
        block.reshape(-1)[:count] = True
        mask[r:r + side, col:col + side] = block
    else:
        # a contiguous run in row-major (rows) or column-major (columns) order
        run = np.zeros(h * w, dtype=bool)
        start = rng.integers(0, h * w - count + 1)
        run[start:start + count] = True
        mask = run.reshape(h, w) if pattern == "rows" else run.reshape(w, h).T
    return mask


def cmd_impute(args, c, out):
    data = load_data(c)
    model = _load_model(args, c)
    rng = stream(c["run.seed"], STREAM_SAMPLING, 1)
    x = data.test[:c["impute.num_images"]]
    d = x.shape[1]
    shape = _image_shape(model) or (1, d)
    if c["impute.num_missing"] > d:
        raise cfgmod.ConfigError("impute.num_missing", f"exceeds the {d} features")
    masks = np.stack([missing_pattern(shape, c["impute.num_missing"], c["impute.pattern"], rng).reshape(-1)
                      for _ in range(len(x))])
    filled, orders = impute_batch(model, x, masks, rng, c["impute.mode"])
    with open(out / "imputation_orderings.csv", "w") as fh:
        fh.write("sample_id,ordering\n")
        for i, o in enumerate(orders):
            fh.write(f"{i},{' '.join(map(str, o))}\n")
    if _image_shape(model):
        for i in range(len(x)):
            datamod.write_pgm(out / f"truth_{i:04d}.pgm", x[i].reshape(shape))
            datamod.write_pgm(out / f"filled_{i:04d}.pgm", filled[i].reshape(shape))
            datamod.write_pgm(out / f"mask_{i:04d}.pgm", masks[i].reshape(shape).astype(np.uint8))
    else:
        np.savetxt(out / "imputed.csv", filled, delimiter=",", fmt="%d" if model.config.head.discrete else "%.17g")
        np.savetxt(out / "imputed_mask.csv", masks.astype(int), delimiter=",", fmt="%d")
    log.info("imputed %d samples (%d missing each)", len(x), c["impute.num_missing"])
    return EXIT_OK


def cmd_ood(args, c, out):
    data = load_data(c)
    model = _load_model(args, c)
    if not c["dataset.ood_path"]:
        raise datamod.DataError("ood needs dataset.ood_path")
    ood = datamod.read_idx(c["dataset.ood_path"])
    if ood.ndim == 3:
        ood = datamod.binarize(ood, c["dataset.binarize"], c["dataset.threshold"], rng=stream(c["run.seed"], 1, 7))
    ood = ood.reshape(len(ood), -1)
    res = ood_score(model, _eval_slice(c, data.test), _eval_slice(c, ood), c["eval.orderings"], c["eval.seed"],
                    c["ood.bins"], c["eval.batch_size"])
    write_summary_csv(out / "ood_in_summary.csv", res.in_summary, res.in_hist, res.bin_edges)
    write_summary_csv(out / "ood_out_summary.csv", res.out_summary, res.out_hist, res.bin_edges)
    res.in_dist.write_csv(out / "ood_in_nll.csv")
    res.out_dist.write_csv(out / "ood_out_nll.csv")
    log.info("mean NLL in-distribution %.3f, out-of-distribution %.3f", res.in_summary["mean"],
             res.out_summary["mean"])
    return EXIT_OK


def cmd_selftest(args, c, out):
    from deformer.selftest import run_all
    return EXIT_OK if run_all(print) else EXIT_SELFTEST


HANDLERS = {"train": cmd_train, "eval": cmd_eval, "generate": cmd_generate, "impute": cmd_impute, "ood": cmd_ood,
            "selftest": cmd_selftest}


def run(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        text = Path(args.config).read_text() if args.config else None
        profile, c = cfgmod.resolve(args.profile, text, args.overrides)
    except OSError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except cfgmod.ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(c["run.output_dir"])
    if args.command != "selftest":
        out.mkdir(parents=True, exist_ok=True)
        (out / "resolved_config").write_text(cfgmod.dump(c, profile))
    try:
        with nx.precision(c["model.precision"]):
            return HANDLERS[args.command](args, c, out)
    except cfgmod.ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (datamod.DataError, OSError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
