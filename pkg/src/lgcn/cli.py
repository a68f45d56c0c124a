"""Command-line surface: train, probe-rotation, gen-cirrus, eval, gradcheck.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
Every artifact embeds the experiment's config hash and seed.
"""

import argparse
import csv
import json
import math
import os
import sys
import time

import numpy as np

from . import data as D
from . import models as M
from . import train as T
from .gradcheck import check_param_grads, FD_STEP
from . import layers as L

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class UsageError(ValueError):
    pass


class DataError(RuntimeError):
    pass


def data_root(override=None):
    return override or os.environ.get("LGCN_DATA_DIR", "data")


def load_mnist(root, split):
    """IDX pair for one split; names the files when they are missing."""
    imgs, labels = (os.path.join(root, n) for n in MNIST_FILES[split])
    missing = [p for p in (imgs, labels) if not os.path.exists(p)]
    if missing:
        raise DataError(
            f"MNIST {split} files not found: {missing}. Download the IDX "
            f"files into {root!r} (or set LGCN_DATA_DIR); expected names: "
            f"{MNIST_FILES[split]}")
    return D.load_idx(imgs, labels)


# ---------------------------------------------------------------------------
# experiment config
# ---------------------------------------------------------------------------

EXPERIMENT_KEYS = {"arch", "task", "model", "train", "data", "folds"}


def load_experiment(path):
    try:
        with open(path) as f:
            cfg = json.load(f)
    except FileNotFoundError:
        raise DataError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise UsageError(f"{path}: not valid JSON: {e}")
    extra = set(cfg) - EXPERIMENT_KEYS
    if extra:
        raise UsageError(
            f"{path}: unknown config keys {sorted(extra)}; "
            f"allowed: {sorted(EXPERIMENT_KEYS)}")
    arch = cfg.get("arch", "classifier")
    if arch not in ("classifier", "segnet"):
        raise UsageError(f"arch must be 'classifier' or 'segnet', got {arch!r}")
    cfg.setdefault("task", "classification" if arch == "classifier" else
                   "segmentation")
    if cfg["task"] not in T.TASKS:
        raise UsageError(f"task must be one of {T.TASKS}, got {cfg['task']!r}")
    cfg.setdefault("model", {})
    cfg.setdefault("train", {})
    cfg.setdefault("data", {})
    return cfg


def build_model(cfg, seed=None):
    mdict = dict(cfg["model"])
    if seed is not None:
        mdict["seed"] = seed
    try:
        if cfg["arch"] == "classifier":
            return M.Classifier(M.ClassifierConfig.from_dict(mdict))
        mdict.setdefault("task", cfg["task"])
        return M.SegNet(M.SegNetConfig.from_dict(mdict))
    except (M.BuildError, ValueError) as e:
        raise UsageError(str(e))


def load_training_data(cfg, seed):
    """(X, y) arrays for the configured dataset."""
    dcfg = dict(cfg["data"])
    kind = dcfg.pop("kind", "rotated-mnist")
    root = data_root(dcfg.pop("root", None))
    limit = dcfg.pop("limit", None)
    if dcfg:
        raise UsageError(f"unknown data config keys {sorted(dcfg)}")
    if kind in ("mnist", "rotated-mnist"):
        X, y = load_mnist(root, "train")
        if limit:
            X, y = X[:limit], y[:limit]
        if kind == "rotated-mnist":
            rng = np.random.default_rng(seed)
            X, y, _ = D.rotated_dataset(X, y, rng)
        return X.astype(np.float32), y
    if kind == "cirrus":
        mpath = os.path.join(root, "manifest.json")
        if not os.path.exists(mpath):
            raise DataError(
                f"no cirrus dataset at {root!r} (missing manifest.json); "
                f"generate one first: lgcn gen-cirrus --out {root}")
        samples, split, _ = D.load_cirrus_dataset(root)
        idx = split["train"] + split["val"]
        if limit:
            idx = idx[:limit]
        X = np.stack([samples[i].image for i in idx])
        if cfg["task"] == "denoising":
            y = np.stack([samples[i].denoise_target for i in idx])
        else:
            y = np.stack([samples[i].mask for i in idx]).astype(np.float64)
        return X, y
    raise UsageError(f"unknown data kind {kind!r}; "
                     f"expected mnist, rotated-mnist, or cirrus")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_train(args):
    cfg = load_experiment(args.config)
    seed = args.seed if args.seed is not None else cfg["train"].get("seed", 0)
    cfg["train"]["seed"] = seed
    exp_hash = M.config_hash(cfg)
    build_model(cfg, seed=seed)  # validate model config before touching data
    os.makedirs(args.out, exist_ok=True)

    X, y = load_training_data(cfg, seed)
    folds = cfg.get("folds")
    tdict = dict(cfg["train"])
    t0 = time.perf_counter()

    def one_run(tr_idx, va_idx, out_dir):
        os.makedirs(out_dir, exist_ok=True)
        model = build_model(cfg, seed=seed)
        tc = T.TrainConfig(**tdict,
                           log_path=os.path.join(out_dir, "metrics.jsonl"),
                           checkpoint_path=os.path.join(out_dir, "best.ckpt"))
        res = T.fit(model, (X[tr_idx], y[tr_idx]), (X[va_idx], y[va_idx]),
                    cfg["task"], tc)
        return res

    results = []
    if folds:
        for i, (tr, va) in enumerate(T.kfold_indices(X.shape[0], folds, seed)):
            results.append(one_run(tr, va, os.path.join(args.out, f"fold{i}")))
    else:
        n_val = max(1, X.shape[0] // 10)
        perm = np.random.default_rng(seed).permutation(X.shape[0])
        results.append(one_run(perm[n_val:], perm[:n_val], args.out))

    finite = [r.best_metric for r in results if math.isfinite(r.best_metric)]
    manifest = {
        "config_hash": exp_hash,
        "seed": seed,
        "wall_time": time.perf_counter() - t0,
        "folds": folds or 1,
        "best_metrics": [r.best_metric for r in results],
        "mean_best_metric": float(np.mean(finite)) if finite else None,
        "diverged": any(r.diverged for r in results),
        "config": cfg,
    }
    with open(os.path.join(args.out, "run.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True, default=str)
    print(f"trained {len(results)} run(s); "
          f"mean best metric {manifest['mean_best_metric']}")
    return EXIT_NUMERIC if manifest["diverged"] else EXIT_OK


def cmd_probe_rotation(args):
    if args.step_degrees <= 0 or 360 % args.step_degrees != 0:
        raise UsageError(f"--step-degrees must divide 360, got {args.step_degrees}")
    model, manifest = M.load_checkpoint(args.checkpoint)
    if not isinstance(model, M.Classifier):
        raise UsageError("probe-rotation needs a classifier checkpoint")
    X, y = load_mnist(data_root(args.data), "test")
    rng = np.random.default_rng(args.seed)
    idx = rng.choice(X.shape[0], size=min(args.n_samples, X.shape[0]),
                     replace=False)
    X, y = X[idx].astype(np.float32), y[idx]

    rows = []
    for deg in range(0, 361, args.step_degrees):
        ang = math.radians(deg)
        Xr = np.stack([D.rotate_sample(x, ang) for x in X]).astype(np.float32)
        logits, ratios = [], []
        for s in range(0, Xr.shape[0], 256):
            out, ratio = model.forward_probe(Xr[s:s + 256])
            logits.append(out)
            ratios.append(ratio)
        acc = T.accuracy(np.concatenate(logits), y)
        rows.append((deg, acc, float(np.mean(ratios))))
        print(f"angle {deg:3d}  accuracy {acc:.4f}  magnitude_ratio {rows[-1][2]:.4f}")

    with open(args.out, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["angle", "accuracy", "magnitude_ratio"])
        w.writerows(rows)
    print(f"wrote {len(rows)} rows to {args.out} "
          f"(checkpoint {manifest['config_hash']})")
    return EXIT_OK


def cmd_gen_cirrus(args):
    if os.path.isdir(args.out) and os.listdir(args.out) and not args.force:
        raise DataError(
            f"output directory {args.out!r} is not empty; pass --force to "
            f"overwrite")
    try:
        cfg = D.CirrusConfig(variant=args.variant, seed=args.seed,
                             size=args.size, n_samples=args.n_samples,
                             split=tuple(args.split))
    except ValueError as e:
        raise UsageError(str(e))
    manifest = D.save_cirrus_dataset(args.out, cfg)
    print(f"generated {len(manifest['samples'])} samples "
          f"({cfg.variant}, seed {cfg.seed}) in {args.out}")
    return EXIT_OK


def cmd_eval(args):
    model, manifest = M.load_checkpoint(args.checkpoint)
    stored = manifest["config_hash"]
    recomputed = M.config_hash(manifest["config"])
    warning = (None if stored == recomputed else
               f"config hash mismatch: stored {stored}, recomputed {recomputed}")

    task = args.task
    if task == "classification":
        if not isinstance(model, M.Classifier):
            raise UsageError("classification eval needs a classifier checkpoint")
        X, y = load_mnist(data_root(args.data), "test")
        if args.n_samples:
            X, y = X[:args.n_samples], y[:args.n_samples]
        metric = T.evaluate(model, X.astype(np.float32), y, task)
        name = "accuracy"
    elif task in ("segmentation", "denoising"):
        if not isinstance(model, M.SegNet):
            raise UsageError(f"{task} eval needs a segnet checkpoint")
        root = data_root(args.data)
        if not os.path.exists(os.path.join(root, "manifest.json")):
            raise DataError(f"no cirrus dataset at {root!r}; "
                            f"generate one first: lgcn gen-cirrus --out {root}")
        samples, split, _ = D.load_cirrus_dataset(root)
        idx = split["test"][:args.n_samples] if args.n_samples else split["test"]
        X = np.stack([samples[i].image for i in idx])
        y = (np.stack([samples[i].denoise_target for i in idx])
             if task == "denoising" else
             np.stack([samples[i].mask for i in idx]).astype(np.float64))
        metric = T.evaluate(model, X, y, task, batch_size=8)
        name = "iou" if task == "segmentation" else "psnr"
    else:
        raise UsageError(f"unknown task {task!r}")

    out = {
        "config_hash": stored,
        "seed": manifest["config"].get("seed"),
        "task": task,
        "metric": name,
        "value": metric if math.isfinite(metric) else "inf",
        "n": int(X.shape[0] if task == "classification" else len(y)),
    }
    if warning:
        out["warning"] = warning
    text = json.dumps(out, indent=2, sort_keys=True)
    if args.out:
        with open(args.out, "w") as f:
            f.write(text + "\n")
    print(text)
    return EXIT_OK


GRADCHECK_TOL = 1e-4


def _gradcheck_suite(seed):
    """(name, layer stack, input shape, complex?) cases covering every
    learnable parameter class at double precision."""
    rng = np.random.default_rng(seed)
    thetas = rng.uniform(0.0, np.pi, 3)
    lambdas = rng.uniform(2.5, 5.0, 3)
    cases = []
    cases.append(("gabor-conv", [L.GaborConv(2, 3, 5, thetas, lambdas,
                                             rng=np.random.default_rng(1))],
                  (2, 2, 9, 9), True))
    cases.append(("gabor-conv-learned-sigma",
                  [L.GaborConv(1, 2, 5, thetas, lambdas,
                               sigma=rng.uniform(0.5, 1.5, 3), learn_sigma=True,
                               rng=np.random.default_rng(2))],
                  (2, 1, 9, 9), True))
    cases.append(("cyclic-gabor-conv",
                  [L.GaborConv(1, 2, 3, thetas, lambdas,
                               rng=np.random.default_rng(3)),
                   L.CyclicGaborConv(2, 2, 3, thetas, lambdas,
                                     rng=np.random.default_rng(4))],
                  (2, 1, 8, 8), True))
    cases.append(("crelu", [L.PlainConv(2, 3, 3, rng=np.random.default_rng(5)),
                            L.CRelu(3)], (2, 2, 8, 8), True))
    cases.append(("complex-batchnorm",
                  [L.PlainConv(2, 3, 3, rng=np.random.default_rng(6)),
                   L.ComplexBatchNorm(3)], (3, 2, 7, 7), True))
    cases.append(("arcsinh", [L.ArcsinhScale()], (2, 3, 6, 6), False))
    return cases


# parameter names -> report classes
_PARAM_CLASS = {"A": "Omega.re", "B": "Omega.im", "theta": "theta",
                "lambda": "lambda", "sigma": "sigma", "crelu_bias": "bias",
                "b": "bias", "W": "weight", "arcsinh_a": "arcsinh",
                "arcsinh_b": "arcsinh", "gamma_rr": "bn", "gamma_ii": "bn",
                "gamma_ri": "bn", "beta_re": "bias", "beta_im": "bias",
                "gamma": "bn", "beta": "bias"}


def cmd_gradcheck(args):
    from .ctensor import ComplexTensor

    rng = np.random.default_rng(args.seed)
    worst = {}
    for name, stack, shape, is_complex in _gradcheck_suite(args.seed):
        x = rng.standard_normal(shape)
        if is_complex:
            x = ComplexTensor(x, rng.standard_normal(shape))
        errs = check_param_grads(stack, x, rng, n_entries=8)
        for key, err in errs.items():
            pname = key.split(".", 1)[1]
            cls = _PARAM_CLASS.get(pname, pname)
            worst[cls] = max(worst.get(cls, 0.0), err)
    failed = False
    print(f"finite-difference step {FD_STEP:g}, tolerance {args.tolerance:g}")
    for cls in sorted(worst):
        status = "ok" if worst[cls] < args.tolerance else "FAIL"
        failed |= status == "FAIL"
        print(f"  {cls:12s} max relative error {worst[cls]:.3e}  {status}")
    return EXIT_NUMERIC if failed else EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # argparse defaults to exit code 2; the CLI reserves 1 for usage
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        sys.exit(EXIT_USAGE)


def make_parser():
    p = _Parser(prog="lgcn", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a JSON config")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--out", required=True)
    t.set_defaults(fn=cmd_train)

    r = sub.add_parser("probe-rotation",
                       help="accuracy + first-layer magnitude vs. rotation")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--step-degrees", type=int, default=10)
    r.add_argument("--n-samples", type=int, default=1000)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--data", default=None)
    r.add_argument("--out", required=True)
    r.set_defaults(fn=cmd_probe_rotation)

    g = sub.add_parser("gen-cirrus", help="generate a synthesized-cirrus dataset")
    g.add_argument("--variant", default="fixed-orientation",
                   choices=D.CIRRUS_VARIANTS)
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--size", type=int, default=128)
    g.add_argument("--n-samples", type=int, default=300)
    g.add_argument("--split", type=int, nargs=3, default=[160, 40, 100])
    g.add_argument("--force", action="store_true")
    g.set_defaults(fn=cmd_gen_cirrus)

    e = sub.add_parser("eval", help="evaluate a checkpoint, emit a JSON summary")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--task", required=True, choices=T.TASKS)
    e.add_argument("--data", default=None)
    e.add_argument("--n-samples", type=int, default=None)
    e.add_argument("--out", default=None)
    e.set_defaults(fn=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--tolerance", type=float, default=GRADCHECK_TOL)
    c.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv=None):
    args = make_parser().parse_args(argv)
    try:
        return args.fn(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, D.IdxFormatError, D.CirrusError, M.CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except T.DivergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
