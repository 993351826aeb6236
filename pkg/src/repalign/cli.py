"""Command-line entry point: ``repalign <command> ...``.

Exit codes: 0 success, 1 invalid input or config, 2 numerical failure
(including a verification threshold that was not met).
"""

from __future__ import annotations

import argparse
import sys
from concurrent.futures import ThreadPoolExecutor
from importlib import resources
from pathlib import Path

import numpy as np

from . import color as colorlib
from .core import AlignmentError, FeatureMatrix, NumericalError, ValidationError, clamp_outliers, l2_normalize_rows
from .fileio import (
    Report,
    check_section,
    jsonable,
    read_corpus,
    read_layers,
    read_toml,
    svg_scatter,
    write_text,
)
from .learners import TrainConfig, kernel_recovery_error, train
from .metrics import (
    METRICS,
    SYMMETRIC_METRICS,
    best_layer_alignment,
    cknna,
    compute_metric,
    mutual_knn,
)
from .world import DiscreteWorld, check_proposition, exact_cooccurrence, pmi_kernel, sticky_world

ALIGN_SCHEMA = {
    "metric": "mutual_knn",
    "k": 10,
    "batch_size": 1024,
    "similarity": "inner_product",
    "l2_normalize": True,
    "clamp_percentile": 95.0,
    "variance_kept": 0.99,
    "estimator": "biased",
}
WORLD_SCHEMA = {
    "generator": "explicit",
    "transition": None,
    "initial": None,
    "horizon": 8,
    "window": 2,
    "include_same_time": False,
    "N": 8,
    "seed": 0,
}
TRAIN_SCHEMA = {
    "d": 0,
    "p_pos": 0.5,
    "num_negatives": 4,
    "temperature": 1.0,
    "learning_rate": 1.0,
    "steps": 20_000,
    "tol": 1e-7,
}
VERIFY_SCHEMA = {"max_abs": 0.05, "min_pearson": 0.99}
COLOR_SCHEMA = {
    "bins_per_channel": 8,
    "num_pairs": 300_000,
    "radius": 4,
    "distance": "euclidean",
    "restarts": 100,
    "pseudocount": 0.01,
    "shuffles": 20,
    "synthetic_images": 64,
    "synthetic_size": 32,
}
SECTIONS = {"align": ALIGN_SCHEMA, "world": WORLD_SCHEMA, "train": TRAIN_SCHEMA,
            "verify": VERIFY_SCHEMA, "color": COLOR_SCHEMA}
BUNDLED_WORLDS = ("alternator", "uniform", "sticky")


def load_config(path) -> dict:
    raw = read_toml(path) if path else {}
    out = {}
    for name in raw:
        if name not in SECTIONS:
            raise ValidationError(f"unknown config section [{name}]; allowed: {', '.join(SECTIONS)}")
        if not isinstance(raw[name], dict):
            raise ValidationError(f"config entry {name!r} must be a [table]")
    for name, schema in SECTIONS.items():
        out[name] = check_section(name, raw.get(name, {}), schema)
    return out


def bundled_config(name: str) -> Path:
    return Path(str(resources.files("repalign") / "configs" / f"{name}.toml"))


def build_world(cfg: dict) -> DiscreteWorld:
    gen = cfg["generator"]
    if gen == "sticky":
        return sticky_world(cfg["N"], cfg["seed"], horizon=cfg["horizon"], window=cfg["window"])
    if gen != "explicit":
        raise ValidationError(f"[world].generator must be 'explicit' or 'sticky', got {gen!r}")
    if cfg["transition"] is None:
        raise ValidationError("[world].transition is required for an explicit world")
    kw = dict(include_same_time=cfg["include_same_time"])
    if cfg["initial"] is None:
        return DiscreteWorld.stationary_start(cfg["transition"], cfg["horizon"], cfg["window"], **kw)
    return DiscreteWorld(cfg["transition"], cfg["initial"], cfg["horizon"], cfg["window"], **kw)


# ------------------------------------------------------------------ commands


def preprocess(F: FeatureMatrix, cfg: dict) -> FeatureMatrix:
    if cfg["clamp_percentile"] < 100:
        F = clamp_outliers(F, cfg["clamp_percentile"])
    if cfg["l2_normalize"]:
        F = l2_normalize_rows(F)
    return F


def batches(n: int, cfg: dict, seed: int) -> list[np.ndarray]:
    """Seeded shuffle then fixed-size chunks; a final chunk too small for k neighbours is dropped."""
    order = np.random.default_rng(seed).permutation(n)
    size = cfg["batch_size"]
    if size < 2:
        raise ValidationError("batch_size must be >= 2")
    chunks = [order[i : i + size] for i in range(0, n, size)]
    need = cfg["k"] + 1
    kept = [c for c in chunks if len(c) >= need]
    if not kept:
        raise ValidationError(f"no batch has at least k+1={need} samples (n={n}, batch_size={size})")
    return kept


def metric_params(cfg: dict) -> dict:
    return {k: cfg[k] for k in ("k", "similarity", "variance_kept", "estimator")}


def batch_scores(layers_a, layers_b, cfg, seed, threads):
    n = layers_a[0].n
    for L in list(layers_a) + list(layers_b):
        if L.n != n:
            raise ValidationError(f"sample counts differ ({L.n} vs {n}); files must list the same samples")
    layers_a = [preprocess(L, cfg) for L in layers_a]
    layers_b = [preprocess(L, cfg) for L in layers_b]
    params = metric_params(cfg)
    if cfg["metric"] not in METRICS:
        raise ValidationError(f"unknown metric {cfg['metric']!r}; choose from {sorted(METRICS)}")

    def one(idx):
        A = [FeatureMatrix(L.data[idx]) for L in layers_a]
        B = [FeatureMatrix(L.data[idx]) for L in layers_b]
        if len(A) == 1 and len(B) == 1:
            return compute_metric(cfg["metric"], A[0], B[0], **params).value
        return best_layer_alignment(A, B, cfg["metric"], **params).score.value

    chunks = batches(n, cfg, seed)
    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            values = list(ex.map(one, chunks))
    else:
        values = [one(c) for c in chunks]
    return chunks, values


def cmd_align(args, cfg) -> Report:
    c = cfg["align"]
    chunks, values = batch_scores(read_layers(args.file_a), read_layers(args.file_b), c, args.seed, args.threads)
    v = np.array(values)
    meta = {
        "metric": c["metric"],
        "params": metric_params(c),
        "mean": float(v.mean()),
        "sd": float(v.std()),
        "num_batches": len(values),
        "seed": args.seed,
    }
    rows = [[i, len(ch), float(val)] for i, (ch, val) in enumerate(zip(chunks, values))]
    print(f"{c['metric']}: mean {meta['mean']:.6f} sd {meta['sd']:.6f} over {len(values)} batch(es)")
    return Report("align", meta, ["batch", "size", "value"], rows)


def _label(arg: str) -> tuple[str, str]:
    if "=" in arg:
        name, path = arg.split("=", 1)
        return name, path
    return Path(arg).stem, arg


def cmd_pairwise(args, cfg) -> Report:
    c = cfg["align"]
    if len(args.files) < 2:
        raise ValidationError("pairwise needs at least two feature files")
    models = [_label(s) for s in args.files]
    names = [m for m, _ in models]
    if len(set(names)) != len(names):
        raise ValidationError(f"model labels must be unique, got {names}")
    layers = [read_layers(p) for _, p in models]
    symmetric = c["metric"] in SYMMETRIC_METRICS
    cells, errors = {}, {}
    for i in range(len(models)):
        for j in range(len(models)):
            if symmetric and j < i:
                continue
            try:
                _, values = batch_scores(layers[i], layers[j], c, args.seed, args.threads)
                v = np.array(values)
                cells[i, j] = (float(v.mean()), float(v.std()))
            except AlignmentError as exc:
                errors[f"{names[i]}|{names[j]}"] = str(exc)
                cells[i, j] = (None, None)
            if symmetric:
                cells[j, i] = cells[i, j]
    if all(m is None for m, _ in cells.values()):
        raise NumericalError(f"every pair failed: {next(iter(errors.values()))}")
    rows = [[names[i], names[j], *cells[i, j]] for i in range(len(names)) for j in range(len(names))]
    meta = {"metric": c["metric"], "params": metric_params(c), "models": names, "errors": errors, "seed": args.seed}
    print(f"{c['metric']}: {len(names)} models, {len(errors)} failed pair(s)")
    return Report("pairwise", meta, ["model_a", "model_b", "mean", "sd"], rows)


def parse_k_list(text: str) -> list[int]:
    try:
        ks = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise ValidationError(f"--k must be a comma-separated list of integers, got {text!r}") from None
    if not ks:
        raise ValidationError("--k is empty")
    return ks


def cmd_knn_sweep(args, cfg) -> Report:
    c = cfg["align"]
    F = preprocess(read_layers(args.file_a)[0], c)
    G = preprocess(read_layers(args.file_b)[0], c)
    if F.n != G.n:
        raise ValidationError(f"sample counts differ ({F.n} vs {G.n})")
    ks = parse_k_list(args.k) if args.k else [k for k in (1, 2, 5, 10, 20, 50, 100) if k < F.n] + [F.n - 1]
    ks = list(dict.fromkeys(ks))
    rows = []
    for k in ks:
        rows.append([k, cknna(F, G, k, c["similarity"]).value, mutual_knn(F, G, k, c["similarity"]).value])
    print(f"knn sweep over {len(ks)} value(s) of k, n={F.n}")
    return Report("knn_sweep", {"n": F.n, "similarity": c["similarity"]}, ["k", "cknna", "mutual_knn"], rows)


class StageError(Exception):
    def __init__(self, stage, exc):
        super().__init__(f"stage {stage!r} failed: {exc}")
        self.stage, self.exc = stage, exc


def _stage(name, fn, *a, **kw):
    try:
        return fn(*a, **kw)
    except AlignmentError as exc:
        raise StageError(name, exc) from exc


def run_verify(world_cfg: dict, train_cfg: dict, thresholds: dict, seed: int) -> Report:
    W = _stage("world", build_world, world_cfg)
    C = _stage("cooccurrence", exact_cooccurrence, W)
    K = _stage("pmi", pmi_kernel, C)
    if not K.full_support:
        raise StageError("pmi", ValidationError("PMI kernel has zero-probability pairs; no finite target to recover"))
    try:
        prop = jsonable(check_proposition(K).to_dict())
    except ValidationError as exc:
        # outside the proposition's scope; still a valid world to train on
        prop = {"applicable": False, "reason": str(exc)}
    except AlignmentError as exc:
        raise StageError("proposition", exc) from exc
    d = train_cfg["d"] or W.N
    rows, passed = [], True
    for objective in ("binary_nce", "infonce"):
        cfg = TrainConfig(
            objective=objective, p_pos=train_cfg["p_pos"], num_negatives=train_cfg["num_negatives"],
            temperature=train_cfg["temperature"], learning_rate=train_cfg["learning_rate"],
            steps=train_cfg["steps"], tol=train_cfg["tol"], seed=seed,
        )
        E, rep = _stage(f"train:{objective}", train, C, d, cfg)
        rec = kernel_recovery_error(E, K)
        ok = rec.centered_max_abs < thresholds["max_abs"]
        if np.isfinite(rec.offdiag_pearson):
            ok = ok and rec.offdiag_pearson > thresholds["min_pearson"]
        passed = passed and ok
        rows.append([objective, rec.centered_max_abs, rec.centered_rms, jsonable(rec.offdiag_pearson),
                     rec.fitted_scale, rep.final_loss, rep.grad_check, rep.steps_taken, rep.stop_reason, ok])
    meta = {
        "N": W.N,
        "d": d,
        "proposition": prop,
        "pmi": jsonable(K.data),
        "thresholds": thresholds,
        "passed": passed,
        "failed_stage": None if passed else "thresholds",
        "seed": seed,
    }
    cols = ["learner", "centered_max_abs", "centered_rms", "offdiag_pearson", "fitted_scale", "final_loss",
            "grad_check", "steps", "stop_reason", "passed"]
    return Report("verify", meta, cols, rows)


def cmd_verify(args, cfg) -> Report:
    target = args.world
    path = bundled_config(target) if target in BUNDLED_WORLDS else Path(target)
    wcfg = load_config(path)
    # run-level --config can override training and thresholds
    train_cfg = cfg["train"] if args.config else wcfg["train"]
    thresholds = cfg["verify"] if args.config else wcfg["verify"]
    try:
        report = run_verify(wcfg["world"], train_cfg, thresholds, args.seed)
    except StageError as err:
        report = Report("verify", {"passed": False, "failed_stage": err.stage, "error": str(err.exc)}, [], [])
        args._exit = 1 if isinstance(err.exc, ValidationError) else 2
        print(f"verify: {err}", file=sys.stderr)
        return report
    status = "PASS" if report.meta["passed"] else "FAIL"
    for row in report.rows:
        print(f"{row[0]}: centered_max_abs {row[1]:.3e} pearson {row[3]} -> {'ok' if row[-1] else 'miss'}")
    print(f"verify {target}: {status}")
    if not report.meta["passed"]:
        args._exit = 2
    return report


def cmd_color(args, cfg) -> Report:
    c = cfg["color"]
    if args.corpus:
        images = read_corpus(args.corpus)
        source = str(args.corpus)
    else:
        images = colorlib.gradient_corpus(c["synthetic_images"], c["synthetic_size"], args.seed)
        source = "synthetic"
    Q = colorlib.ColorQuantizer(c["bins_per_channel"])
    S = colorlib.PixelPairSample(c["num_pairs"], c["radius"], args.seed, c["distance"])
    try:
        res = colorlib.color_pipeline(images, Q, S, c["restarts"], args.seed, c["pseudocount"], c["shuffles"],
                                      workers=args.threads)
    except ValidationError as exc:
        raise ValidationError(f"{exc} (try a lower bins_per_channel)") from None
    out = Path(args.out_dir)
    rows = np.hstack([res.centers, res.aligned, res.lab])
    header = "bin_center_r,bin_center_g,bin_center_b,x,y,z,L,a,b\n"
    body = "".join(",".join(format(v, ".17g") for v in r) + "\n" for r in rows)
    write_text(out / "color_embedding.csv", header + body)
    svg = svg_scatter(res.aligned[:, 1:3], res.centers, title="aligned embedding (a*, b* plane)")
    write_text(out / "color_embedding.svg", svg)
    meta = jsonable(res.report())
    meta["source"] = source
    meta["num_images"] = len(images)
    shuffled = meta.pop("shuffled_spearman")
    print(f"color: {res.table.N} bins, spearman {res.spearman:.4f}, shuffled p95 {meta['shuffled_p95']:.4f}")
    return Report("color", meta, ["shuffle", "spearman"], [[i, v] for i, v in enumerate(shuffled)])


# ---------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    def global_flags(parser, suppress):
        # subcommands repeat the flags without defaults so they do not mask values given earlier
        d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
        parser.add_argument("--seed", type=int, default=d(0))
        parser.add_argument("--threads", type=int, default=d(1))
        parser.add_argument("--config", default=d(None), help="TOML file with [align], [train], [verify], [color] tables")
        parser.add_argument("--out-dir", default=d("."))
        parser.add_argument("--format", choices=("csv", "json"), default=d("json"))
        return parser

    common = global_flags(argparse.ArgumentParser(add_help=False), suppress=True)
    p = global_flags(argparse.ArgumentParser(prog="repalign", description="Representation alignment toolkit"), False)
    sub = p.add_subparsers(dest="command", required=True)
    a = sub.add_parser("align", parents=[common], help="score two feature files")
    a.add_argument("file_a")
    a.add_argument("file_b")
    a.add_argument("--metric", choices=sorted(METRICS))
    a.add_argument("--k", type=int)
    a.add_argument("--batch-size", type=int)
    pw = sub.add_parser("pairwise", parents=[common], help="score every pair of labelled files")
    pw.add_argument("files", nargs="+", help="PATH or LABEL=PATH; .layers manifests list one layer file per line")
    pw.add_argument("--metric", choices=sorted(METRICS))
    pw.add_argument("--k", type=int)
    pw.add_argument("--batch-size", type=int)
    ks = sub.add_parser("knn-sweep", parents=[common], help="CKNNA and mutual k-NN over several k")
    ks.add_argument("file_a")
    ks.add_argument("file_b")
    ks.add_argument("--k", help="comma-separated k values (default 1,2,5,10,20,50,100 and n-1)")
    v = sub.add_parser("verify", parents=[common], help="check that contrastive learners recover the PMI kernel")
    v.add_argument("world", help=f"bundled world ({', '.join(BUNDLED_WORLDS)}) or a TOML file with a [world] table")
    c = sub.add_parser("color", parents=[common], help="colour cooccurrence embedding vs CIELAB")
    c.add_argument("corpus", nargs="?", help="PNG file/dir or CIFAR-10 .bin; omit for a synthetic gradient corpus")
    c.add_argument("--bins", type=int)
    c.add_argument("--restarts", type=int)
    c.add_argument("--chebyshev", action="store_true", help="use a square neighbourhood instead of a disc")
    return p


COMMANDS = {"align": cmd_align, "pairwise": cmd_pairwise, "knn-sweep": cmd_knn_sweep,
            "verify": cmd_verify, "color": cmd_color}


def apply_overrides(args, cfg):
    al = cfg["align"]
    for flag, key in (("metric", "metric"), ("k", "k"), ("batch_size", "batch_size")):
        val = getattr(args, flag, None)
        if val is not None and not (flag == "k" and args.command == "knn-sweep"):
            al[key] = val
    co = cfg["color"]
    if getattr(args, "bins", None) is not None:
        co["bins_per_channel"] = args.bins
    if getattr(args, "restarts", None) is not None:
        co["restarts"] = args.restarts
    if getattr(args, "chebyshev", False):
        co["distance"] = "chebyshev"
    if args.threads < 1:
        raise ValidationError("--threads must be >= 1")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    args._exit = 0
    try:
        cfg = load_config(args.config)
        apply_overrides(args, cfg)
        report = COMMANDS[args.command](args, cfg)
        name = args.command.replace("-", "_")
        write_text(Path(args.out_dir) / f"{name}.{args.format}", report.render(args.format))
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return args._exit


if __name__ == "__main__":
    sys.exit(main())
