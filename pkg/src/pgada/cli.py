"""Command-line front end: ``pgada {gen-data,train,eval,verify,ablate}``.

Configuration is a flat JSON object. Every key can also be given as a
``--key value`` flag; flags beat the file, the file beats the defaults.
Unknown keys and out-of-range values are rejected before any work starts.

Exit codes: 0 success, 2 usage / config / I-O, 3 numeric failure,
4 a verification property failed.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
from dataclasses import asdict, dataclass, fields
from typing import Any, Callable

import numpy as np

from pgada.core import DomainError, NumericError, RngStream, ShapeError, UsageError
from pgada.diffnet import ModelStack
from pgada.episodes import AffineShift, EvalConfig, ShiftSpec, CLASSIFIERS, NORMALIZATIONS
from pgada.experiments import (
    ABLATION_GEOMETRY,
    ABLATION_TRAIN,
    VARIANTS,
    AblationSetup,
    DEFAULT_LEMMA_CASES,
    Geometry,
    TrainConfig,
    evaluate_episodes,
    lemma1_checks,
    make_episode,
    make_pool,
    reports_to_csv,
    run_ablation_suite,
    theorem1_checks,
    train_pgada,
    verify_lemma1,
    verify_theorem1,
)
from pgada.transport import sinkhorn

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_VERIFY = 0, 2, 3, 4

POOL_FILE = "pool.csv"
EPISODE_FILE = "episodes.json"
CHECKPOINT_FILE = "checkpoint.json"
CURVE_FILE = "curve.csv"
EPISODE_SET_FORMAT = "pgada-episode-set"


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_USAGE):
        super().__init__(message)
        self.code = code


def _say(tag: str, msg: str) -> None:
    print(f"[{tag}] {msg}", file=sys.stderr)


# -- config schema ---------------------------------------------------------------

def _pos(v):
    return v > 0


def _nonneg(v):
    return v >= 0


def _prob(v):
    return 0 < v < 1


@dataclass(frozen=True)
class Key:
    type: Callable
    check: Callable[[Any], bool] | None = None
    doc: str = ""
    nullable: bool = False


def _floats(v):
    if isinstance(v, str):
        v = [s for s in v.split(",") if s]
    return [float(s) for s in v]


def _ints(v):
    if isinstance(v, str):
        v = [s for s in v.split(",") if s]
    return [int(s) for s in v]


def _bool(v):
    if isinstance(v, bool):
        return v
    if isinstance(v, str) and v.lower() in ("true", "1", "yes"):
        return True
    if isinstance(v, str) and v.lower() in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


SCHEMA: dict[str, Key] = {
    # training
    "eta": Key(float, _pos, "SGD step size"),
    "batch": Key(int, lambda v: v >= 2, "minibatch size"),
    "epochs": Key(int, lambda v: v >= 1, "training epochs"),
    "lambda1": Key(float, _nonneg, "weight of the adversarial loss"),
    "lambda2": Key(float, _nonneg, "weight of the contrastive loss"),
    "epsilon": Key(float, _pos, "radius of the perturbation ball"),
    "rho": Key(float, _nonneg, "generator noise scale"),
    "tau": Key(float, _pos, "contrastive temperature"),
    "aug_sigma": Key(float, _nonneg, "jitter for contrastive views"),
    "hidden": Key(int, lambda v: v >= 1, "hidden width of the embedding net"),
    "embed_dim": Key(int, lambda v: v >= 1, "embedding dimension"),
    "seed": Key(int, _nonneg, "master seed"),
    "variant": Key(str, lambda v: v in VARIANTS, "ablation variant"),
    # evaluation
    "classifier": Key(str, lambda v: v in CLASSIFIERS, "proto or matching"),
    "use_ot": Key(_bool, None, "align support onto query with transport"),
    "beta": Key(float, _prob, "transport cost weight in (0, 1)"),
    "normalization": Key(str, lambda v: v in NORMALIZATIONS, "feature normalisation"),
    "tol": Key(float, _pos, "Sinkhorn marginal tolerance"),
    "max_iter": Key(int, lambda v: v >= 1, "Sinkhorn iteration cap"),
    "episodes": Key(int, lambda v: v >= 1, "number of evaluation episodes"),
    # geometry
    "n_way": Key(int, lambda v: v >= 2, "classes per episode"),
    "k_shot": Key(int, lambda v: v >= 1, "support rows per class"),
    "q_target": Key(int, lambda v: v >= 1, "query rows per class"),
    "p": Key(int, lambda v: v >= 1, "input dimension"),
    "class_sep": Key(float, _pos, "radius of the class-mean sphere"),
    "spread": Key(float, _nonneg, "within-class std"),
    "signal_dim": Key(int, lambda v: v >= 1, "coordinates carrying class means", nullable=True),
    "fragile_dim": Key(int, _nonneg, "trailing low-variance coordinates"),
    "fragile_sep": Key(float, _pos, "class-mean radius in fragile coordinates"),
    "fragile_spread": Key(float, _nonneg, "within-class std in fragile coordinates"),
    "pool_classes": Key(int, lambda v: v >= 2, "base classes in the training pool"),
    "pool_per_class": Key(int, lambda v: v >= 1, "rows per base class"),
    # shift
    "support_noise": Key(float, _nonneg, "support noise std"),
    "query_noise": Key(float, _nonneg, "query noise std"),
    "support_scale": Key(float, _pos, "support scale factor"),
    "query_scale": Key(float, _pos, "query scale factor"),
    "support_offset": Key(float, None, "support offset"),
    "query_offset": Key(float, None, "query offset"),
    "support_rotation": Key(float, None, "support rotation angle (radians)"),
    "query_rotation": Key(float, None, "query rotation angle (radians)"),
    # verification
    "sigmas": Key(_floats, lambda v: len(v) >= 2 and all(s >= 0 for s in v), "theorem noise grid"),
    "dims": Key(_ints, lambda v: len(v) >= 1 and all(d >= 1 for d in v), "theorem input dims"),
    "verify_episodes": Key(int, lambda v: v >= 100, "episodes per theorem cell"),
    "lemma_samples": Key(int, lambda v: v >= 1000, "samples per lemma estimate"),
    "lemma_beta": Key(float, _prob, "transport weight for the lemma estimates"),
    "variants": Key(lambda v: v.split(",") if isinstance(v, str) else list(v),
                    lambda v: len(v) >= 1 and all(x in VARIANTS for x in v), "ablation variants"),
}

TRAIN_KEYS = [f.name for f in fields(TrainConfig)]
EVAL_KEYS = [f.name for f in fields(EvalConfig)]
GEOMETRY_KEYS = [f.name for f in fields(Geometry)]


def _defaults(command: str) -> dict:
    ablate = command == "ablate"
    train = ABLATION_TRAIN if ablate else TrainConfig()
    geom = ABLATION_GEOMETRY if ablate else Geometry()
    shift = AblationSetup().shift if ablate else ShiftSpec()
    setup = AblationSetup()
    out = {**asdict(train), **asdict(EvalConfig()), **asdict(geom)}
    out.update(support_noise=shift.support_noise, query_noise=shift.query_noise,
               support_scale=shift.support_transform.scale,
               query_scale=shift.query_transform.scale,
               support_offset=shift.support_transform.offset,
               query_offset=shift.query_transform.offset,
               support_rotation=shift.support_transform.rotation,
               query_rotation=shift.query_transform.rotation)
    out.update(variant="full", episodes=500, pool_classes=setup.pool_classes,
               pool_per_class=setup.pool_per_class, sigmas=[0.0, 0.2, 0.4], dims=[4, 16],
               verify_episodes=500, lemma_samples=4000, lemma_beta=0.99,
               variants=["full", "no_ot", "fixed_g", "no_noise", "no_kl", "no_ssl"])
    return out


def _coerce(key: str, value, where: str):
    spec = SCHEMA.get(key)
    if spec is None:
        raise CliError(f"{where}: unknown config key {key!r}")
    if value is None:
        if spec.nullable:
            return None
        raise CliError(f"{where}: {key} may not be null")
    try:
        if spec.type in (int, float) and isinstance(value, bool):
            raise ValueError("booleans are not numbers")
        if spec.type is int and isinstance(value, float) and not value.is_integer():
            raise ValueError("expected an integer")
        v = spec.type(value)
    except (TypeError, ValueError) as exc:
        raise CliError(f"{where}: bad value for {key}: {exc}") from None
    if isinstance(v, float) and not math.isfinite(v):
        raise CliError(f"{where}: {key} must be finite")
    if spec.check is not None and not spec.check(v):
        raise CliError(f"{where}: {key}={value!r} is out of range ({spec.doc})")
    return v


def load_config_file(path: str) -> dict:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise CliError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise CliError(f"{path}:1:1: config must be a JSON object")
    return {k: _coerce(k, v, path) for k, v in doc.items()}


def resolve_config(command: str, path: str | None, overrides: dict) -> dict:
    """Defaults, then the file, then command-line overrides."""
    cfg = _defaults(command)
    if path:
        cfg.update(load_config_file(path))
    for k, v in overrides.items():
        cfg[k] = _coerce(k, v, f"--{k.replace('_', '-')}")
    return cfg


def train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(**{k: cfg[k] for k in TRAIN_KEYS})


def eval_config(cfg: dict) -> EvalConfig:
    return EvalConfig(**{k: cfg[k] for k in EVAL_KEYS})


def geometry(cfg: dict) -> Geometry:
    return Geometry(**{k: cfg[k] for k in GEOMETRY_KEYS})


def shift_spec(cfg: dict) -> ShiftSpec:
    def side(s):
        return AffineShift(scale=cfg[f"{s}_scale"], offset=cfg[f"{s}_offset"],
                           rotation=cfg[f"{s}_rotation"])

    return ShiftSpec(cfg["support_noise"], cfg["query_noise"], side("support"), side("query"))


# -- file helpers ----------------------------------------------------------------

def _fmt(v: float) -> str:
    return f"{v:.10g}"


def _write(path: str, text: str) -> None:
    try:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    except OSError as exc:
        raise CliError(f"cannot write {path}: {exc.strerror}") from None


def _out_dir(path: str) -> str:
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise CliError(f"cannot create output directory {path}: {exc.strerror}") from None
    if not os.access(path, os.W_OK):
        raise CliError(f"output directory {path} is not writable")
    return path


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def write_pool(path: str, x: np.ndarray, y: np.ndarray) -> None:
    header = ["label"] + [f"x{j}" for j in range(x.shape[1])]
    _write(path, _csv(header, ([int(lab)] + [_fmt(v) for v in row] for lab, row in zip(y, x))))


def read_pool(path: str) -> tuple[np.ndarray, np.ndarray]:
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise CliError(f"cannot read pool {path}: {exc.strerror}") from None
    if len(rows) < 2 or not rows[0] or rows[0][0] != "label":
        raise CliError(f"{path}: not a pool file")
    try:
        y = np.array([int(r[0]) for r in rows[1:]], dtype=np.int64)
        x = np.array([[float(v) for v in r[1:]] for r in rows[1:]], dtype=np.float64)
    except ValueError as exc:
        raise CliError(f"{path}: malformed row: {exc}") from None
    return x, y


def write_episode_set(path: str, cfg: dict, count: int) -> None:
    geom, shift = geometry(cfg), shift_spec(cfg)
    doc = {"format": EPISODE_SET_FORMAT, "seed": cfg["seed"], "geometry": asdict(geom),
           "shift": shift.to_dict(),
           "episodes": [{"index": i, "stream": 0x10000 + i} for i in range(count)]}
    _write(path, json.dumps(doc, indent=1, sort_keys=True) + "\n")


def read_episode_set(path: str) -> dict:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise CliError(f"cannot read episode set {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise CliError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    if not isinstance(doc, dict) or doc.get("format") != EPISODE_SET_FORMAT:
        raise CliError(f"{path}: not an episode-set file")
    return doc


def _load_checkpoint(path: str) -> ModelStack:
    try:
        return ModelStack.load(path)
    except OSError as exc:
        raise CliError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise CliError(f"{path}: malformed checkpoint: {exc}") from None


# -- subcommands -----------------------------------------------------------------

def cmd_gen_data(cfg: dict, out: str) -> int:
    out = _out_dir(out)
    x, y = make_pool(cfg["pool_classes"], cfg["pool_per_class"], geometry(cfg), cfg["seed"])
    if x.shape[0] < cfg["batch"]:
        _say("warn", f"pool has {x.shape[0]} rows, fewer than one batch of {cfg['batch']}")
    write_pool(os.path.join(out, POOL_FILE), x, y)
    write_episode_set(os.path.join(out, EPISODE_FILE), cfg, cfg["episodes"])
    _say("info", f"wrote {x.shape[0]} pool rows and {cfg['episodes']} episode specs to {out}")
    return EXIT_OK


CURVE_HEADER = ["epoch", "L_ori", "L_adv", "L_self", "variant"]


def _curve_csv(model: ModelStack) -> str:
    variant = model.meta.get("variant", "")
    rows = [[h["epoch"], _fmt(h["ori"]), _fmt(h["adv"]), _fmt(h["self"]), variant]
            for h in model.meta.get("history", [])]
    return _csv(CURVE_HEADER, rows)


def cmd_train(cfg: dict, out: str, pool: str | None, resume: str | None) -> int:
    out = _out_dir(out)
    x, y = read_pool(pool or os.path.join(out, POOL_FILE))
    tc = train_config(cfg)
    model, start = None, 0
    if resume:
        model = _load_checkpoint(resume)
        start = int(model.meta.get("epochs_done", 0))
        prior = model.meta.get("variant", cfg["variant"])
        if prior != cfg["variant"]:
            raise CliError(f"checkpoint was trained as {prior!r}, not {cfg['variant']!r}")
        if model.phi[0].W.shape[0] != x.shape[1]:
            raise CliError(f"checkpoint expects {model.phi[0].W.shape[0]} inputs, pool has {x.shape[1]}")
        if start >= tc.epochs:
            _say("warn", f"checkpoint already has {start} epochs; nothing to do")
    remaining = max(tc.epochs - start, 0)
    try:
        model = train_pgada(x, y, tc, cfg["variant"], model=model, start_epoch=start,
                            epochs=remaining)
    except NumericError as exc:
        raise CliError(f"training diverged: {exc}", EXIT_NUMERIC) from None
    model.meta["train"] = asdict(tc)
    ckpt = os.path.join(out, CHECKPOINT_FILE)
    try:
        model.save(ckpt)
    except OSError as exc:
        raise CliError(f"cannot write {ckpt}: {exc.strerror}") from None
    _write(os.path.join(out, CURVE_FILE), _curve_csv(model))
    hist = model.meta["history"]
    if hist:
        _say("info", f"{cfg['variant']}: combined loss {hist[0]['combined']:.4f} -> "
                     f"{hist[-1]['combined']:.4f} over {len(hist)} epochs")
    return EXIT_OK


def _dump_plans(model, episodes, ecfg: EvalConfig, out: str) -> None:
    from pgada.episodes import _embed, normalize_features  # shared preprocessing
    from pgada.core import pairwise_sq_dist

    plan_dir = _out_dir(os.path.join(out, "plans"))
    for i, ep in enumerate(episodes):
        s, q = _embed(model, ep.support_x), _embed(model, ep.query_x)
        s, q = normalize_features(s, q, ecfg.normalization)
        tp = sinkhorn(pairwise_sq_dist(s, q), beta=ecfg.beta, tol=ecfg.tol, max_iter=ecfg.max_iter)
        tp.to_csv(os.path.join(plan_dir, f"plan_{i:05d}.csv"))


def cmd_eval(cfg: dict, out: str, checkpoint: str, episode_file: str | None, jobs: int,
             dump_plans: bool) -> int:
    out = _out_dir(out)
    model = _load_checkpoint(checkpoint)
    doc = read_episode_set(episode_file or os.path.join(out, EPISODE_FILE))
    try:
        geom = Geometry(**doc["geometry"])
        shift = ShiftSpec.from_dict(doc["shift"])
        seed = int(doc["seed"])
        specs = doc["episodes"]
    except (KeyError, TypeError, ValueError) as exc:
        raise CliError(f"malformed episode set: {exc}") from None
    specs = specs[:cfg["episodes"]]
    if model.phi[0].W.shape[0] != geom.p:
        raise CliError(f"checkpoint expects {model.phi[0].W.shape[0]} inputs, "
                       f"episodes have {geom.p}")
    ecfg = eval_config(cfg)
    eps = [make_episode(geom, shift, seed, int(s["index"])) for s in specs]
    echo = {"variant": model.meta.get("variant", "full"), "seed": seed, "checkpoint_train":
            model.meta.get("train", {}), "geometry": asdict(geom), "shift": shift.to_dict()}
    try:
        report = evaluate_episodes(model, eps, ecfg, jobs=jobs, config_echo=echo)
    except FloatingPointError as exc:
        raise CliError(f"evaluation failed: {exc}", EXIT_NUMERIC) from None
    _write(os.path.join(out, "report.json"), report.to_json())
    _write(os.path.join(out, "report.csv"), reports_to_csv([report]))
    if dump_plans:
        _dump_plans(model, eps, ecfg, out)
    print(report.summary())
    return EXIT_OK


def _checks_exit(checks) -> int:
    ok = True
    for name, passed in checks:
        print(f"{'PASS' if passed else 'FAIL'} {name}")
        ok &= bool(passed)
    return EXIT_OK if ok else EXIT_VERIFY


def cmd_verify(kind: str, cfg: dict, out: str) -> int:
    out = _out_dir(out)
    if kind == "theorem1":
        rows = verify_theorem1(cfg["sigmas"], cfg["dims"], cfg["verify_episodes"],
                               cfg["beta"], RngStream(cfg["seed"]))
        header = ["sigma", "dim", "error", "stderr", "predicted"]
        _write(os.path.join(out, "theorem1.csv"),
               _csv(header, ([_fmt(r[k]) if isinstance(r[k], float) else r[k] for k in header]
                             for r in rows)))
        return _checks_exit(theorem1_checks(rows))
    rows = verify_lemma1(DEFAULT_LEMMA_CASES, cfg["lemma_samples"], cfg["lemma_beta"],
                         RngStream(cfg["seed"]))
    header = list(rows[0].keys())
    _write(os.path.join(out, "lemma1.csv"),
           _csv(header, ([_fmt(v) if isinstance(v, float) else v for v in r.values()] for r in rows)))
    return _checks_exit(lemma1_checks(rows))


def cmd_ablate(cfg: dict, out: str, jobs: int) -> int:
    out = _out_dir(out)
    setup = AblationSetup(train_config(cfg), geometry(cfg), shift_spec(cfg),
                          cfg["pool_classes"], cfg["pool_per_class"])
    try:
        reports = run_ablation_suite(cfg["variants"], eval_config(cfg), cfg["episodes"],
                                     cfg["seed"], setup, jobs=jobs)
    except NumericError as exc:
        raise CliError(f"training diverged: {exc}", EXIT_NUMERIC) from None
    doc = {"payload": [r.payload() for r in reports],
           "metadata": {"wall_clock_seconds": [r.wall_clock for r in reports]}}
    _write(os.path.join(out, "ablation.json"), json.dumps(doc, indent=1, sort_keys=True) + "\n")
    _write(os.path.join(out, "ablation.csv"), reports_to_csv(reports))
    for v, r in zip(cfg["variants"], reports):
        print(f"{v:16s} {r.summary()}")
    return EXIT_OK


# -- argument parsing ------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        _say("error", message)
        raise SystemExit(EXIT_USAGE)


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("config overrides")
    for key, spec in SCHEMA.items():
        if key in ("use_ot", "episodes"):
            continue
        g.add_argument(f"--{key.replace('_', '-')}", dest=f"cfg_{key}", default=argparse.SUPPRESS,
                       metavar=key.upper(), help=spec.doc)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pgada", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="flat JSON config file")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--episodes", dest="cfg_episodes", default=argparse.SUPPRESS,
                       help="number of episodes")
        _add_config_flags(p)
        return p

    common("gen-data", "write a training pool and an episode-set file")
    p = common("train", "train a model on a pool file")
    p.add_argument("--pool", help="pool CSV (default OUT/pool.csv)")
    p.add_argument("--resume", help="checkpoint to continue training from")
    p.add_argument("--ablation", dest="cfg_variant", default=argparse.SUPPRESS, choices=VARIANTS,
                   help="train as an ablation variant")
    p = common("eval", "score a checkpoint on an episode set")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--episode-file", help="episode set (default OUT/episodes.json)")
    p.add_argument("--no-ot", dest="cfg_use_ot", action="store_const", const=False,
                   default=argparse.SUPPRESS, help="skip transport alignment")
    p.add_argument("--jobs", type=int, default=1, help="worker threads")
    p.add_argument("--dump-plans", action="store_true", help="write each transport plan as CSV")
    p = common("verify", "check the noise-scaling and smoothing properties")
    p.add_argument("kind", choices=("theorem1", "lemma1"))
    p = common("ablate", "train and score every ablation variant")
    p.add_argument("--jobs", type=int, default=1, help="worker threads")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_")}
    jobs = getattr(args, "jobs", 1)
    try:
        if jobs < 1:
            raise CliError("--jobs must be at least 1")
        cfg = resolve_config(args.command, args.config, overrides)
        if args.command == "gen-data":
            return cmd_gen_data(cfg, args.out)
        if args.command == "train":
            return cmd_train(cfg, args.out, args.pool, args.resume)
        if args.command == "eval":
            return cmd_eval(cfg, args.out, args.checkpoint, args.episode_file, jobs,
                            args.dump_plans)
        if args.command == "verify":
            return cmd_verify(args.kind, cfg, args.out)
        return cmd_ablate(cfg, args.out, jobs)
    except CliError as exc:
        _say("error", str(exc))
        return exc.code
    except NumericError as exc:
        _say("error", f"numeric failure: {exc}")
        return EXIT_NUMERIC
    except (DomainError, ShapeError, UsageError) as exc:
        _say("error", str(exc))
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
