"""Command-line entry point: ``dgmix {prepare,train,eval,gradcheck,sweep}``.

Exit status is 0 on success, 1 for invalid input or configuration and 2
for failures at run time.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import data as D
from . import layers as L
from . import model as M
from .config import dump_config, load_config
from .evaluate import (
    ResultTable,
    accuracy,
    episode_assignment,
    export_results,
    train_and_score,
    write_sweep_csv,
)
from .exceptions import (
    CheckpointError,
    ConfigError,
    DataError,
    DGMixError,
    IngestionError,
    ValidationError,
)
from .gradcheck import grad_check_detail
from .tensorio import load_tensors, save_tensors
from .train import load_checkpoint, save_checkpoint, train

logger = logging.getLogger("dgmix")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
DEFAULT_ALPHAS = "0,0.25,0.5,0.75,1"
GRADCHECK_TOL = 1e-4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _overrides(pairs):
    out = {}
    for item in pairs or ():
        if "=" not in item:
            raise ConfigError(item, "overrides must look like KEY=VALUE")
        k, v = item.split("=", 1)
        out[k.strip()] = v
    return out


def _write_snapshot(cfg, name="resolved_config.txt"):
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / name).write_text(dump_config(cfg))


def _sha256(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# -------------------------------------------------------------------- prepare

def _load_raw(cfg):
    if cfg.corpus == "bundled":
        return D.bundled_digits()
    images, labels = cfg.corpus_paths()
    if cfg.mirror_url and not (images.exists() and labels.exists()):
        names = {images.name: D.STANDARD_FILES.get(images.name), labels.name: D.STANDARD_FILES.get(labels.name)}
        if None in names.values():
            raise ConfigError("mirror_url", "fetching needs the standard corpus file names")
        D.fetch_corpus(cfg.mirror_url, cfg.data_root, names)
    return D.load_idx(images, labels)


def domain_file(prepared, angle):
    return Path(prepared) / f"domain_{angle}.dgt"


def cmd_prepare(cfg):
    raw = _load_raw(cfg)
    base = D.sample_per_class(raw, cfg.n_per_class, cfg.train.data_seed)
    domains = D.build_domains(base, cfg.angles)
    out = cfg.prepared_path
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "seed": cfg.train.data_seed,
        "n_per_class": cfg.n_per_class,
        "angles": list(cfg.angles),
        "corpus": cfg.corpus,
        "domains": [],
    }
    for dom in domains:
        path = domain_file(out, dom.angle)
        save_tensors(path, {
            "images": dom.images,
            "labels": dom.labels,
            "angle": np.asarray(float(dom.angle)),
            "domain_label": np.asarray(float(dom.domain_label)),
        })
        manifest["domains"].append({
            "angle": dom.angle,
            "domain_label": dom.domain_label,
            "count": len(dom),
            "file": path.name,
            "sha256": _sha256(path),
        })
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    _write_snapshot(cfg, "resolved_config_prepare.txt")
    print(f"prepared {len(domains)} domains x {len(base)} samples in {out}")
    return manifest


def load_prepared(cfg):
    out = cfg.prepared_path
    mpath = out / "manifest.json"
    if not mpath.is_file():
        raise DataError(f"no prepared data at {out}; run 'dgmix prepare' first")
    manifest = json.loads(mpath.read_text())
    domains = []
    for entry in manifest["domains"]:
        path = out / entry["file"]
        if _sha256(path) != entry["sha256"]:
            raise DataError(f"{path}: content digest does not match manifest")
        _, t = load_tensors(path)
        angle = entry["angle"]
        domains.append(D.RotatedDomainSet(entry["domain_label"], angle, t["images"], t["labels"].astype(np.int64)))
    missing = [a for a in cfg.angles if a not in {d.angle for d in domains}]
    if missing:
        raise DataError(f"prepared data lacks angles {missing}")
    return [d for d in domains if d.angle in cfg.angles]


# ---------------------------------------------------------------------- train

def checkpoint_path(cfg, target):
    return Path(cfg.output_dir) / f"model_t{target}.ckpt"


def cmd_train(cfg):
    domains = load_prepared(cfg)
    _write_snapshot(cfg)
    for target in cfg.targets():
        ep = D.make_episode(domains, target)
        result = train(cfg.train, ep)
        ckpt = checkpoint_path(cfg, target)
        save_checkpoint(ckpt, result.params, result.state, cfg.train, result.iteration)
        result.log.to_csv(Path(cfg.output_dir) / f"trainlog_t{target}.csv")
        print(f"target {target}: {result.iteration} iterations -> {ckpt}")


# ----------------------------------------------------------------------- eval

def cmd_eval(cfg, checkpoint=None):
    domains = load_prepared(cfg)
    targets = cfg.targets()
    if checkpoint is not None and len(targets) != 1:
        raise ConfigError("target_angle", "--checkpoint needs a single target angle")
    accs, matrices = [], {}
    for target in targets:
        ckpt = load_checkpoint(checkpoint or checkpoint_path(cfg, target))
        ep = D.make_episode(domains, target)
        alpha = ckpt.config.alpha
        accs.append(accuracy(ckpt.params, ep.target, alpha))
        matrices[f"assign_t{target}"] = episode_assignment(ckpt.params, ep, alpha)
        print(f"target {target}: accuracy {accs[-1]:.4f}")
    table = ResultTable(targets, accs)
    if len(targets) > 1:
        print(f"mean accuracy {table.mean:.4f}")
    meta = {
        "config_digest": cfg.train.digest().hex(),
        "seeds": {"data": cfg.train.data_seed, "init": cfg.train.init_seed, "switch": cfg.train.switch_seed},
        "alpha": cfg.train.alpha,
    }
    _write_snapshot(cfg, "resolved_config_eval.txt")
    return export_results({"accuracy": table}, matrices, Path(cfg.output_dir) / "results", meta)


# ------------------------------------------------------------------ gradcheck

def micro_problem(cfg, seed=None):
    """B=2, N=3, C=4 model with reduced widths for finite-difference checks."""
    seed = cfg.train.init_seed if seed is None else seed
    arch = M.Architecture(
        n_domains=3, n_classes=4, conv1=2, conv2=3, fc1=8,
        head_scope=cfg.train.head_scope, branch_convs=cfg.train.branch_convs,
    )
    params = M.init_params(arch, seed, branch_init="glorot")
    rng = np.random.default_rng(seed)
    images = rng.random((2, 1, 28, 28))
    y = L.onehot(rng.integers(0, 4, size=2), 4)
    d = M.indicator_weights(rng.integers(1, 4, size=2), 3)
    # one sample in each switch mode, so both mixing paths are exercised
    switch = np.array([0.0, 1.0])
    return params, images, y, d, switch


def run_gradcheck(cfg, seed=None, eps=1e-5):
    params, images, y, d, switch = micro_problem(cfg, seed)
    lam = cfg.train.lam if cfg.train.lam > 0 else 0.5

    def fun():
        parts, grads, _ = M.loss_and_grads(params, images, y, d, lam, switch)
        return parts.total, grads

    return grad_check_detail(fun, params.arrays, eps, pattern=lambda: M.activation_pattern(params, images))


def cmd_gradcheck(cfg, seeds=(0, 1, 2)):
    worst = 0.0
    lines = []
    for s in seeds:
        report = run_gradcheck(cfg, seed=cfg.train.init_seed + s)
        worst = max(worst, report.max_error)
        for name, err in report.items():
            lines.append(f"seed={cfg.train.init_seed + s} {name} max_rel_err={err:.3e} "
                         f"checked={report.checked[name]} skipped_kinks={report.skipped[name]}")
    ok = worst < GRADCHECK_TOL
    lines.append(f"max_rel_err={worst:.3e} {'<' if ok else '>='} {GRADCHECK_TOL:g}: {'PASS' if ok else 'FAIL'}")
    text = "\n".join(lines) + "\n"
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "gradcheck.txt").write_text(text)
    print(text, end="")
    return ok, worst


# ---------------------------------------------------------------------- sweep

def parse_alphas(text):
    try:
        alphas = [float(a) for a in text.split(",") if a.strip()]
    except ValueError:
        raise ConfigError("alphas", f"cannot parse {text!r}") from None
    if not alphas or any(not 0.0 <= a <= 1.0 for a in alphas):
        raise ConfigError("alphas", f"values must lie in [0, 1], got {text!r}")
    return alphas


def cmd_sweep(cfg, alphas):
    domains = load_prepared(cfg)
    episodes = [D.make_episode(domains, t) for t in cfg.targets()]
    sweep = {}
    for a in alphas:
        tc = replace(cfg.train, alpha=a)
        accs = [train_and_score(tc, ep)[1] for ep in episodes]
        sweep[a] = ResultTable([ep.target.angle for ep in episodes], accs)
        print(f"alpha {a:g}: " + " ".join(f"{t}:{x:.4f}" for t, x in zip(sweep[a].angles, accs)))
    _write_snapshot(cfg, "resolved_config_sweep.txt")
    path = Path(cfg.output_dir) / "sweep.csv"
    write_sweep_csv(sweep, path)
    return sweep


# ----------------------------------------------------------------------- main

def build_parser():
    common = _Parser(add_help=False)
    common.add_argument("--config", "-c", help="flat key = value config file")
    common.add_argument("--set", "-s", action="append", metavar="KEY=VALUE", help="override a config key")
    common.add_argument("--verbose", "-v", action="store_true")

    parser = _Parser(prog="dgmix", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("prepare", parents=[common], help="build rotated domains from the digit corpus")
    sub.add_parser("train", parents=[common], help="train on a leave-one-domain-out episode")
    ev = sub.add_parser("eval", parents=[common], help="target accuracy and assignment matrices")
    ev.add_argument("--checkpoint", help="checkpoint file (default: <output_dir>/model_t<angle>.ckpt)")
    sub.add_parser("gradcheck", parents=[common], help="finite-difference check of the micro-model")
    sw = sub.add_parser("sweep", parents=[common], help="alpha sensitivity table")
    sw.add_argument("--alphas", default=DEFAULT_ALPHAS)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, _overrides(args.set))
        if args.command == "prepare":
            cmd_prepare(cfg)
        elif args.command == "train":
            cmd_train(cfg)
        elif args.command == "eval":
            cmd_eval(cfg, args.checkpoint)
        elif args.command == "gradcheck":
            ok, _ = cmd_gradcheck(cfg)
            if not ok:
                return EXIT_RUNTIME
        elif args.command == "sweep":
            cmd_sweep(cfg, parse_alphas(args.alphas))
    except (ValidationError, IngestionError, DataError) as exc:
        print(f"dgmix: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (CheckpointError, DGMixError, OSError, FloatingPointError) as exc:
        print(f"dgmix: runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
