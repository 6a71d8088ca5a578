"""``hcsc`` command line: train / encode / reconstruct / classify / visualize / eval.

Settings come from built-in defaults, then an optional flat ``key = value``
config file (``--config``), then command-line flags, each overriding the
previous. Failures print one line ``error: <ErrorClass>: <message>`` to
stderr and exit nonzero.
"""
import argparse
from dataclasses import dataclass, fields
import logging
import os
import sys
import time

import numpy as np

from . import classifier as clf
from . import dataio, inference, learning
from .errors import ConfigError, HCSCError
from .inference import FistaSettings
from .model import LayerConfig, init_model, trainable_param_count

log = logging.getLogger("hcsc")

COMMANDS = ("train", "encode", "reconstruct", "classify", "visualize", "eval")
# pixels are scaled so that lam=1 keeps roughly 1 in 10 codes active on digits
DEFAULT_INPUT_SCALE = 32.0


@dataclass
class RunConfig:
    data_dir: str = os.environ.get("HCSC_DATA", "data/mnist")
    model: str = ""
    codes: str = ""
    out: str = "out"
    layers: int = 3
    tied: bool = True
    scale_channels: int = 1
    detail_channels: int = 32
    kernel: int = 5
    lam: float = 1.0
    gamma: float = 0.01
    sigma_eps: float = 0.0
    sigma_x: float = 1.0
    scale_trainable: bool = False
    input_scale: float = DEFAULT_INPUT_SCALE
    alpha: float = 0.01
    fista_iters: int = 40
    epochs: int = 5
    batch_size: int = 16
    dict_lr: float = 0.05
    shuffle: bool = True
    train_subset: int = 0
    test_subset: int = 0
    split: str = "test"
    clf_lr: float = 0.01
    clf_epochs: int = 30
    clf_batch_size: int = 128
    all_scales: bool = False
    what: str = "filters"
    bank: str = "B"
    layer: int = 1
    image_index: int = 0
    threads: int = 0
    seed: int = 0

    def validate(self):
        positive = ("layers", "scale_channels", "detail_channels", "kernel", "fista_iters",
                    "batch_size", "clf_epochs", "clf_batch_size", "layer")
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("epochs", "train_subset", "test_subset", "image_index", "threads"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        for name in ("lam", "gamma", "sigma_eps", "sigma_x"):
            if not getattr(self, name) >= 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        for name in ("alpha", "dict_lr", "input_scale", "clf_lr"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be > 0, got {getattr(self, name)}")
        if self.split not in ("train", "test"):
            raise ConfigError(f"split must be train or test, got {self.split!r}")
        if self.what not in ("filters", "codes"):
            raise ConfigError(f"what must be filters or codes, got {self.what!r}")
        if self.bank not in ("A", "B"):
            raise ConfigError(f"bank must be A or B, got {self.bank!r}")

    def layer_configs(self):
        cfg = LayerConfig(
            scale_channels=self.scale_channels, detail_channels=self.detail_channels,
            kernel_h=self.kernel, kernel_w=self.kernel, lam=self.lam, gamma=self.gamma,
            sigma_eps=self.sigma_eps, sigma_x=self.sigma_x,
            scale_filter_trainable=self.scale_trainable)
        return [LayerConfig(**cfg.to_dict()) for _ in range(self.layers)]

    def fista(self):
        return FistaSettings(step=self.alpha, iters=self.fista_iters)

    def n_threads(self):
        return self.threads or inference.default_threads()

    def model_path(self):
        return self.model or os.path.join(self.out, "model.hcsc")


FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}
DEFAULTS = RunConfig()

# flag name -> (config key, help)
FLAGS = {
    "--data-dir": ("data_dir", "directory holding the MNIST IDX files"),
    "--model": ("model", "model checkpoint path (default: <out>/model.hcsc)"),
    "--codes": ("codes", "codes container to reconstruct from instead of encoding"),
    "--out": ("out", "output directory"),
    "--layers": ("layers", "model depth L"),
    "--scale-channels": ("scale_channels", "channels of each scale signal x_l"),
    "--detail-channels": ("detail_channels", "channels of each detail signal u_l"),
    "--kernel": ("kernel", "square kernel size"),
    "--lambda": ("lam", "l1 weight on the detail codes"),
    "--gamma": ("gamma", "ridge weight on the scale codes"),
    "--sigma-eps": ("sigma_eps", "synthesis noise std"),
    "--sigma-x": ("sigma_x", "scale prior std"),
    "--input-scale": ("input_scale", "multiplier applied to [0,1] pixels before encoding"),
    "--alpha": ("alpha", "FISTA step size"),
    "--fista-iters": ("fista_iters", "FISTA iterations per layer"),
    "--epochs": ("epochs", "dictionary learning epochs"),
    "--batch-size": ("batch_size", "dictionary learning minibatch size"),
    "--dict-lr": ("dict_lr", "filter learning rate"),
    "--train-subset": ("train_subset", "use the first N training images (0 = all)"),
    "--test-subset": ("test_subset", "use the first N test images (0 = all)"),
    "--split": ("split", "dataset split for encode/reconstruct/visualize/eval"),
    "--clf-lr": ("clf_lr", "logistic regression learning rate"),
    "--clf-epochs": ("clf_epochs", "logistic regression epochs"),
    "--clf-batch-size": ("clf_batch_size", "logistic regression minibatch size"),
    "--what": ("what", "visualize: filters or codes"),
    "--bank": ("bank", "visualize: filter bank A or B"),
    "--layer": ("layer", "visualize: layer index (1-based)"),
    "--image-index": ("image_index", "visualize/reconstruct: image index in the split"),
    "--threads": ("threads", "worker threads for encoding (0 = available cores)"),
    "--seed": ("seed", "random seed"),
}
SWITCHES = {
    "tied": ("--tied", "--untied", "share one (A, B) pair across layers"),
    "scale_trainable": ("--scale-trainable", "--scale-fixed", "learn the scale filters"),
    "shuffle": ("--shuffle", "--no-shuffle", "shuffle training data every epoch"),
    "all_scales": ("--all-scales", "--last-scale", "classifier uses every x_l, not only x_L"),
}

COMMAND_HELP = {
    "train": "learn filters on the training split; writes model.hcsc and metrics.csv",
    "encode": "encode a split; writes codes.hcsc",
    "reconstruct": "reconstruct a split from its codes; writes PGMs, prints errors",
    "classify": "fit logistic regression on codes; prints a train/test accuracy table",
    "visualize": "write filter or code montages as PGM",
    "eval": "report reconstruction error and sparsity of a model on a split",
}


def _parse_value(key, text):
    kind = FIELD_TYPES[key]
    text = text.strip()
    if kind is bool or kind == "bool":
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {text!r}")
    try:
        if kind is int or kind == "int":
            return int(text)
        if kind is float or kind == "float":
            return float(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r}") from None
    return text


_ALIASES = {"lambda": "lam"}


def read_config_file(path):
    """Parse ``key = value`` lines; ``#`` starts a comment. Unknown keys are errors."""
    values = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            key = key.replace("-", "_")
            key = _ALIASES.get(key, key)
            if key not in FIELD_TYPES:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            values[key] = _parse_value(key, value)
    return values


def build_parser():
    parser = argparse.ArgumentParser(
        prog="hcsc", description="Hierarchical convolutional sparse coding on MNIST.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help=COMMAND_HELP[name], description=COMMAND_HELP[name])
        p.add_argument("--config", default=argparse.SUPPRESS,
                       help="flat key = value config file (flags override it)")
        for flag, (key, text) in FLAGS.items():
            p.add_argument(flag, dest=key, default=argparse.SUPPRESS, metavar=key.upper(),
                           type=lambda v, k=key: _parse_value(k, v),
                           help=f"{text} (default: {getattr(DEFAULTS, key)!r})")
        for key, (on, off, text) in SWITCHES.items():
            p.add_argument(on, dest=key, action="store_true", default=argparse.SUPPRESS,
                           help=f"{text} (default: {getattr(DEFAULTS, key)})")
            p.add_argument(off, dest=key, action="store_false", default=argparse.SUPPRESS,
                           help=argparse.SUPPRESS)
    return parser


def resolve_config(args):
    values = {}
    if "config" in args:
        values.update(read_config_file(args.config))
    values.update({k: v for k, v in vars(args).items() if k in FIELD_TYPES})
    cfg = RunConfig(**values)
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# commands

def _load_split(cfg, split):
    limit = cfg.train_subset if split == "train" else cfg.test_subset
    return dataio.load_mnist(cfg.data_dir, split, limit or None)


def _load_model(cfg):
    path = cfg.model_path()
    if not os.path.exists(path):
        raise FileNotFoundError(f"model checkpoint {path} not found (run `hcsc train` first)")
    return dataio.load_checkpoint(path)


def cmd_train(cfg):
    data = _load_split(cfg, "train")
    os.makedirs(cfg.out, exist_ok=True)
    model = init_model(cfg.layer_configs(), seed=cfg.seed, tied=cfg.tied,
                       input_scale=cfg.input_scale)
    settings = learning.TrainSettings(
        epochs=cfg.epochs, batch_size=cfg.batch_size, dict_lr=cfg.dict_lr,
        fista=cfg.fista(), seed=cfg.seed, shuffle=cfg.shuffle, threads=cfg.n_threads())
    kind = "" if model.depth == 1 else " tied" if model.tied else " untied"
    print(f"training {model.depth}-layer{kind} model on "
          f"{len(data)} images, {trainable_param_count(model)} trainable parameters")
    start = time.perf_counter()

    def report(epoch, model, history):
        if epoch:
            print(f"epoch {epoch}: recon_rel_err={history.epoch_recon[-1]:.4f} "
                  f"objective={','.join(f'{v:.4f}' for v in history.epoch_objective[-1])} "
                  f"elapsed={time.perf_counter() - start:.0f}s", flush=True)

    model, history = learning.train(model, data.images, settings, callbacks=[report])
    path = cfg.model_path()
    dataio.save_checkpoint(path, model)
    metrics = os.path.join(cfg.out, "metrics.csv")
    dataio.write_metrics(metrics, history.records)
    print(f"wrote {path} and {metrics}")
    return 0


def cmd_encode(cfg):
    model, _ = _load_model(cfg)
    data = _load_split(cfg, cfg.split)
    enc = inference.encode(model, data.images, cfg.fista(), threads=cfg.n_threads())
    os.makedirs(cfg.out, exist_ok=True)
    path = cfg.codes or os.path.join(cfg.out, "codes.hcsc")
    dataio.save_codes(path, enc, data.labels, extra={"split": cfg.split})
    for i, mse in enumerate(enc.layer_residual_mse, 1):
        print(f"layer {i}: residual_mse={float(np.mean(mse)):.6g} "
              f"u_nonzero={float(np.mean(inference.nonzero_fraction(enc.u[i - 1]))):.4f}")
    print(f"wrote {len(data)} encodings to {path}")
    return 0


def cmd_reconstruct(cfg):
    model, _ = _load_model(cfg)
    if cfg.codes:
        enc, _ = dataio.load_codes(cfg.codes)
        data = _load_split(cfg, cfg.split)
        if len(data) != len(enc.x[0]):
            raise ConfigError(f"{cfg.codes} holds {len(enc.x[0])} encodings, "
                              f"split has {len(data)} images")
    else:
        data = _load_split(cfg, cfg.split)
        enc = inference.encode(model, data.images, cfg.fista(), threads=cfg.n_threads())
    os.makedirs(cfg.out, exist_ok=True)
    for layer in range(1, model.depth + 1):
        recon = inference.reconstruct(model, enc, from_layer=layer)
        err = inference.relative_error(data.images, recon)
        print(f"from layer {layer}: mean relative error {float(np.mean(err)):.4f}")
    recon = inference.reconstruct(model, enc)
    k = min(cfg.image_index, len(data) - 1)
    show = slice(k, k + 16)
    path = os.path.join(cfg.out, "reconstruction.pgm")
    tiles = [t[0] for pair in zip(data.images[show], recon[show]) for t in pair]
    dataio.write_pgm(path, dataio.montage(tiles, cols=8))
    print(f"wrote {path} (original/reconstruction pairs)")
    return 0


def cmd_classify(cfg):
    model, _ = _load_model(cfg)
    train = _load_split(cfg, "train")
    test = _load_split(cfg, "test")
    fista, threads = cfg.fista(), cfg.n_threads()
    f_train = clf.encode_features(model, train.images, fista, threads, cfg.all_scales)
    f_test = clf.encode_features(model, test.images, fista, threads, cfg.all_scales)
    head = clf.fit(f_train, train.labels, lr=cfg.clf_lr, epochs=cfg.clf_epochs,
                   seed=cfg.seed, batch_size=cfg.clf_batch_size, classes=10)
    acc_train = clf.accuracy(head, f_train, train.labels)
    acc_test = clf.accuracy(head, f_test, test.labels)
    name = f"{model.depth} layer" + ("s (tied)" if model.tied and model.depth > 1 else
                                     "s" if model.depth > 1 else "")
    print(format_table(name, acc_train, acc_test, trainable_param_count(model),
                       len(train), len(test)))
    os.makedirs(cfg.out, exist_ok=True)
    path = os.path.join(cfg.out, "classifier.hcsc")
    dataio.save_checkpoint(path, model, head)
    print(f"wrote {path}")
    return 0


def format_table(name, acc_train, acc_test, params, n_train, n_test):
    rows = [
        ("Network model", f"Train Set (n={n_train})", f"Test Set (n={n_test})", "Parameters"),
        (name, f"{100 * acc_train:.2f}", f"{100 * acc_test:.2f}", f"{params:,}"),
    ]
    widths = [max(len(r[i]) for r in rows) for i in range(4)]
    line = "+" + "+".join("-" * (w + 2) for w in widths) + "+"
    out = [line]
    for row in rows:
        out.append("| " + " | ".join(c.ljust(w) for c, w in zip(row, widths)) + " |")
        out.append(line)
    return "\n".join(out)


def cmd_visualize(cfg):
    model, _ = _load_model(cfg)
    if not 1 <= cfg.layer <= model.depth:
        raise ConfigError(f"layer {cfg.layer} out of range 1..{model.depth}")
    os.makedirs(cfg.out, exist_ok=True)
    i = cfg.layer - 1
    if cfg.what == "filters":
        bank = (model.A if cfg.bank == "A" else model.B)[i]
        path = os.path.join(cfg.out, f"filters_{cfg.bank}{cfg.layer}.pgm")
        dataio.export_montage([bank], path)
        print(f"wrote {path} ({bank.shape[1]} atoms of {bank.shape[0]}x"
              f"{bank.shape[2]}x{bank.shape[3]})")
        return 0
    data = _load_split(cfg, cfg.split)
    if cfg.image_index >= len(data):
        raise ConfigError(f"image_index {cfg.image_index} out of range for {len(data)} images")
    enc = inference.encode(model, data.images[cfg.image_index], cfg.fista())
    x_path = os.path.join(cfg.out, f"codes_x{cfg.layer}.pgm")
    u_path = os.path.join(cfg.out, f"codes_u{cfg.layer}.pgm")
    dataio.export_montage([enc.x[i]], x_path)
    dataio.export_montage([enc.u[i]], u_path)
    print(f"wrote {x_path} and {u_path}; u{cfg.layer} nonzero fraction "
          f"{inference.nonzero_fraction(enc.u[i]):.4f}")
    return 0


def cmd_eval(cfg):
    model, _ = _load_model(cfg)
    data = _load_split(cfg, cfg.split)
    enc = inference.encode(model, data.images, cfg.fista(), threads=cfg.n_threads())
    err = inference.relative_error(data.images, inference.reconstruct(model, enc))
    print(f"images: {len(data)} ({cfg.split})")
    print(f"trainable parameters: {trainable_param_count(model)}")
    print(f"recon_rel_err: {float(np.mean(err)):.6f}")
    for i in range(model.depth):
        print(f"layer {i + 1}: residual_mse={float(np.mean(enc.layer_residual_mse[i])):.6g} "
              f"u_nonzero={float(np.mean(inference.nonzero_fraction(enc.u[i]))):.6f} "
              f"objective={float(np.mean(enc.objective_trace[i][-1])):.6g}")
    return 0


HANDLERS = {
    "train": cmd_train, "encode": cmd_encode, "reconstruct": cmd_reconstruct,
    "classify": cmd_classify, "visualize": cmd_visualize, "eval": cmd_eval,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return HANDLERS[args.command](cfg)
    except (HCSCError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
