"""Command-line entry point: generate, train, evaluate, cluster.

Exit codes: 0 success, 1 runtime failure, 2 usage or validation error.
Settings may come from a flat ``key = value`` config file; every key has a
mirroring ``--flag`` which takes precedence.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys
from collections import Counter
from pathlib import Path

from . import clustering as C
from . import data as D
from . import evaluation as E
from . import models as M
from . import training as T

log = logging.getLogger("condlstm")


class CliUsageError(Exception):
    pass


USAGE_ERRORS = (
    CliUsageError,
    D.CorpusError,
    D.UsageError,
    M.ConfigError,
    M.CheckpointError,
    M.InputError,
    C.UsageError,
    C.DegenerateError,
    E.UsageError,
)


def parse_range(text: str) -> list[int]:
    text = text.strip()
    for sep in ("..", ":"):
        if sep in text:
            lo, hi = text.split(sep)
            return list(range(int(lo), int(hi) + 1))
    return [int(t) for t in text.split(",") if t.strip()]


def parse_floats(text: str) -> list[float]:
    return [float(t) for t in text.replace(" ", ",").split(",") if t.strip()]


def read_config_file(path) -> dict[str, str]:
    out = {}
    p = Path(path)
    if not p.is_file():
        raise CliUsageError(f"config file {path} does not exist")
    for lineno, line in enumerate(p.read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliUsageError(f"{path}:{lineno}: expected 'key = value'")
        k, v = line.split("=", 1)
        out[k.strip().replace("-", "_")] = v.strip()
    return out


def _coerce(value: str, default):
    if isinstance(default, bool):
        return value.lower() in ("1", "true", "yes", "on")
    if isinstance(default, tuple):
        return tuple(int(v) for v in value.split(",") if v.strip())
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    return value


TRAIN_KEYS = {f.name: f.default for f in dataclasses.fields(T.TrainConfig)}
ARCH_KEYS = {f.name: f.default for f in dataclasses.fields(M.ArchConfig)}
EXTRA_TRAIN_KEYS = {"split_seed": 0}


def _settings(args, keys: dict) -> dict:
    raw = read_config_file(args.config) if getattr(args, "config", None) else {}
    unknown = set(raw) - set(keys) - {"data", "variant", "out_checkpoint"}
    if unknown:
        raise CliUsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
    for k in keys:
        flag = getattr(args, k, None)
        if flag is not None:
            raw[k] = flag
    out = {}
    for k, v in raw.items():
        if k in keys:
            try:
                out[k] = _coerce(str(v), keys[k])
            except ValueError:
                raise CliUsageError(f"bad value {v!r} for {k}") from None
    return out


def _require_file(path, what: str) -> Path:
    if path is None:
        raise CliUsageError(f"--{what} is required")
    p = Path(path)
    if not p.is_file():
        raise CliUsageError(f"{what} file {path} does not exist")
    return p


# ---------------------------------------------------------------- commands


def cmd_generate(args) -> int:
    mix = parse_floats(args.mix) if args.mix else list(D.DEFAULT_MIX)
    if len(mix) != 4 or abs(sum(mix) - 1.0) > 1e-6 or min(mix) < 0:
        raise CliUsageError(f"--mix needs four non-negative weights summing to 1, got {mix}")
    if args.planted:
        if args.mix:
            raise CliUsageError("--mix does not apply to --planted corpora")
        if args.n < 4:
            raise CliUsageError("--planted needs --n of at least 4")
        corpus = D.planted_cluster_corpus(args.n // 4, args.seed)
        names = [f"planted_{k}" for k in range(len(D.PLANTED_CASE_PROTOTYPES))]
    else:
        corpus = D.generate_synthetic(args.n, args.seed, mix)
        names = list(D.CLUSTER_NAMES)
    D.write_corpus(corpus, args.out)
    counts = Counter(c.planted_cluster for c in corpus)
    for k, name in enumerate(names):
        print(f"{name}: {counts.get(k, 0)} cases ({100.0 * counts.get(k, 0) / len(corpus):.1f}%)")
    return 0


def cmd_train(args) -> int:
    settings = _settings(args, {**TRAIN_KEYS, **ARCH_KEYS, **EXTRA_TRAIN_KEYS})
    cfg_file = read_config_file(args.config) if args.config else {}
    data_path = args.data or cfg_file.get("data")
    variant = args.variant or cfg_file.get("variant")
    out = args.out_checkpoint or cfg_file.get("out_checkpoint")
    if variant not in M.VARIANT_NAMES:
        raise CliUsageError(f"unknown variant {variant!r}; valid: {', '.join(M.VARIANT_NAMES)}")
    _require_file(data_path, "data")
    if out is None:
        raise CliUsageError("--out-checkpoint is required")
    if not Path(out).resolve().parent.is_dir():
        raise CliUsageError(f"output directory for {out} does not exist")

    arch = M.ArchConfig(**{k: v for k, v in settings.items() if k in ARCH_KEYS})
    train_cfg = T.TrainConfig(**{k: v for k, v in settings.items() if k in TRAIN_KEYS})
    split_seed = settings.get("split_seed", 0)
    corpus = D.load_corpus(data_path)
    splits = D.split_cases(corpus, seed=split_seed)
    model = T.prepare_model(variant, splits.train, arch, train_cfg.seed)
    model, hist = T.train(model, splits, train_cfg)
    meta = {"split_seed": split_seed, "ratios": [0.8, 0.1, 0.1], "best_epoch": hist.best_epoch}
    M.save_checkpoint(model, out, meta)
    hist_path = args.history or str(Path(out).with_suffix(".history.csv"))
    Path(hist_path).write_text(hist.to_csv())
    log.info("wrote %s (best epoch %d, val MAE %.2f) and %s", out, hist.best_epoch, hist.best_val_mae, hist_path)
    return 0


def cmd_evaluate(args) -> int:
    data_path = _require_file(args.data, "data")
    if not args.checkpoints:
        raise CliUsageError("at least one --checkpoints path is required")
    ckpts = [_require_file(p, "checkpoint") for p in args.checkpoints]
    confidences = args.confidence or list(E.DEFAULT_CONFIDENCES)
    gammas = parse_floats(args.gamma_grid) if args.gamma_grid else list(E.DEFAULT_GAMMAS)
    if any(not 0 < c < 1 for c in confidences) or any(not 0 < g < 1 for g in gammas):
        raise CliUsageError("confidences and gammas must lie in (0, 1)")
    corpus = D.load_corpus(data_path)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    mae_curves = {}
    tags: Counter = Counter()
    for path in ckpts:
        model, meta = M.load_checkpoint(path)
        tag = path.stem
        tags[tag] += 1
        if tags[tag] > 1:
            tag = f"{tag}-{tags[tag]}"
        split_seed = int(meta.get("split_seed", args.seed))
        ratios = tuple(meta.get("ratios", (0.8, 0.1, 0.1)))
        splits = D.split_cases(corpus, ratios, split_seed)
        eval_cases = corpus if args.split == "all" else splits.test
        history_cases = corpus if args.split == "all" else splits.train
        preds = M.predict_days(model, eval_cases)
        plog = E.PredictionLog.from_matrix(eval_cases, preds)
        mae_curves[tag] = E.mae_by_day(plog)
        curves = [E.timeliness_epsilon(plog, c) for c in confidences]
        rows = E.saved_days_report(plog, history_cases, gammas, confidences)
        sub = out_dir / tag
        sub.mkdir(exist_ok=True)
        E.write_timeliness_csv(sub / "timeliness.csv", curves)
        E.write_saved_days_csv(sub / "saved_days.csv", rows)
        capped = [r for r in rows if r.natural_capped]
        if capped:
            log.info("%s: natural wait hits the %d-day horizon in %d cell(s)", tag, D.HORIZON, len(capped))
    E.write_mae_csv(out_dir / "mae_by_day.csv", mae_curves)
    log.info("wrote evaluation tables for %d model(s) to %s", len(mae_curves), out_dir)
    return 0


def cmd_cluster(args) -> int:
    data_path = _require_file(args.data, "data")
    k_range = parse_range(args.k_range)
    K_range = parse_range(args.K_range)
    corpus = D.load_corpus(data_path)
    if len(corpus) < max(max(k_range), max(K_range)) + 1:
        raise CliUsageError(f"corpus of {len(corpus)} cases is too small for the requested ranges")
    res = C.cluster_cases(corpus, k_range, K_range, seed=args.seed, zscore=args.zscore)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    with open(out_dir / "cluster_centers.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["feature", "cluster", "day", "value"])
        for j, centers in enumerate(res.feature_centers):
            for k, center in enumerate(centers):
                for d, v in enumerate(center, start=1):
                    w.writerow([D.SERIES_FEATURES[j], k, d, repr(float(v))])
    with open(out_dir / "assignments.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["case_id", *[f"L{j + 1}" for j in range(D.N_SERIES)], "case_cluster"])
        for cid, labels, cc in zip(res.case_ids, res.feature_labels, res.case_labels):
            w.writerow([cid, *labels.tolist(), int(cc)])
    profile = C.profile_clusters(res.case_labels, corpus, res.K)
    with open(out_dir / "profile.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(profile[0]))
        w.writeheader()
        w.writerows(profile)
    with open(out_dir / "elbow.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["K", "cost"])
        for K, cost in sorted(res.elbow_costs.items()):
            w.writerow([K, cost])
    print(f"feature k: {dict(zip(D.SERIES_FEATURES, res.feature_k))}; case clusters K={res.K}")
    return 0


# ---------------------------------------------------------------- parser


def _add_dataclass_flags(p: argparse.ArgumentParser, keys: dict) -> None:
    for k in keys:
        p.add_argument("--" + k.replace("_", "-"), dest=k, default=None, metavar="VALUE")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="condlstm", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic corpus")
    g.add_argument("--n", type=int, default=2000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--mix", default=None, help="four comma-separated cluster weights")
    g.add_argument("--planted", action="store_true", help="four clearly separated clusters (n // 4 cases each)")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train one model variant")
    t.add_argument("--data")
    t.add_argument("--variant", help=", ".join(M.VARIANT_NAMES))
    t.add_argument("--config")
    t.add_argument("--out-checkpoint", dest="out_checkpoint")
    t.add_argument("--history", default=None)
    _add_dataclass_flags(t, {**TRAIN_KEYS, **ARCH_KEYS, **EXTRA_TRAIN_KEYS})
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="daily MAE, timeliness and saved-days tables")
    e.add_argument("--data")
    e.add_argument("--checkpoints", nargs="+")
    e.add_argument("--confidence", nargs="+", type=float, default=None)
    e.add_argument("--gamma-grid", dest="gamma_grid", default=None)
    e.add_argument("--out-dir", dest="out_dir", required=True)
    e.add_argument("--split", choices=("test", "all"), default="test")
    e.add_argument("--seed", type=int, default=0, help="split seed for checkpoints that do not record one")
    e.set_defaults(func=cmd_evaluate)

    c = sub.add_parser("cluster", help="two-step temporal clustering")
    c.add_argument("--data")
    c.add_argument("--k-range", dest="k_range", default="2..8")
    c.add_argument("--K-range", dest="K_range", default="2..8")
    c.add_argument("--out-dir", dest="out_dir", required=True)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--zscore", action="store_true")
    c.set_defaults(func=cmd_cluster)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    if args.command == "train" and not args.verbose:
        logging.getLogger("condlstm.training").setLevel(logging.INFO)
    try:
        return args.func(args)
    except USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
