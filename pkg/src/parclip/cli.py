"""Command-line entry point: ``parclip <subcommand> [options]``.

Every invocation writes one run directory ``<out>/<subcommand>-<unixtime>-<seed>``
and prints its path on stdout. Exit status: 0 on success, 2 for a config
error (the message names the offending field), 1 for a pipeline failure
(the message names the stage).
"""

from __future__ import annotations

import argparse
import contextlib
import copy
import csv
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .config import ConfigError, RunConfig, apply_override, from_dict
from .evaluate import evaluate_model, projection_for
from .model import checkpoint_hash, load_checkpoint, save_checkpoint
from .numerics import Rng
from .synthdata import Corpus, build_corpus, load_corpus, poison_corpus, save_corpus
from .train import DivergenceError, corpus_vocab, pretrain, train_clean, train_poison

logger = logging.getLogger("parclip")

DIAG_FIELDS = ("step", "L_clip", "L_pert", "S_phi", "S_psi", "lr")
SUBCOMMANDS = ("make-data", "poison", "clean", "eval", "sweep-tau", "sweep-rate", "export-proj")


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"pipeline failure in stage '{stage}': {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


@contextlib.contextmanager
def stage(name: str):
    logger.info("stage %s", name)
    try:
        yield
    except (ConfigError, StageError):
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc


# --- configuration -------------------------------------------------------------

def _merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _read_json(path, what: str) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(what, f"cannot read {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(what, f"{path} is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(what, f"{path} must hold a JSON object")
    return data


def build_config(args, base: dict | None = None, mode: str | None = None) -> tuple[RunConfig, dict]:
    """Layer checkpoint config < ``--config`` file < ``--set`` overrides < ``--seed``."""
    raw = copy.deepcopy(base or {})
    if args.config:
        raw = _merge(raw, _read_json(args.config, "--config"))
    for item in args.set or ():
        apply_override(raw, item)
    if args.seed is not None:
        raw["seed"] = args.seed
    if mode is not None:
        raw["mode"] = mode
    return from_dict(raw), raw


def _checkpoint_config(path) -> dict:
    meta_path = Path(str(path) + ".json")
    if not Path(path).exists():
        raise ConfigError("checkpoint", f"{path} does not exist")
    if not meta_path.exists():
        return {}
    return dict(_read_json(meta_path, "checkpoint").get("config", {}))


# --- run directories -------------------------------------------------------------

def make_run_dir(out: str | Path, subcommand: str, seed: int) -> Path:
    root = Path(out)
    name = f"{subcommand}-{int(time.time())}-{seed}"
    path = root / name
    n = 1
    while path.exists():
        path = root / f"{name}-{n}"
        n += 1
    path.mkdir(parents=True)
    return path


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def write_diagnostics(path: Path, rows: list[dict]) -> None:
    extra = sorted({k for r in rows for k in r} - set(DIAG_FIELDS))
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(DIAG_FIELDS) + extra, restval="")
        writer.writeheader()
        for r in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def read_diagnostics(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (float(v) if v != "" else None) for k, v in row.items()} for row in csv.DictReader(fh)]


def write_csv(path: Path, rows: list[dict]) -> None:
    if not rows:
        path.write_text("")
        return
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)


# --- pipeline pieces ---------------------------------------------------------------

def get_corpus(cfg: RunConfig) -> Corpus:
    d = cfg.data
    if d.corpus_dir:
        corpus = load_corpus(d.corpus_dir)
        missing = {"train", "clean", "eval"} - set(corpus.splits)
        if missing:
            raise ConfigError("data.corpus_dir", f"corpus lacks split(s) {sorted(missing)}")
        return corpus
    sizes = {"train": d.n_train, "clean": d.n_clean, "eval": d.n_eval}
    return build_corpus(sizes, Rng(d.seed), size=d.image_size)


def measure(params, vocab, cfg: RunConfig, corpus: Corpus) -> dict:
    m = evaluate_model(params, vocab, corpus.split("eval"), cfg.poison.trigger.spec(), cfg.poison.target_label,
                       k=cfg.eval.k, seed=cfg.eval.seed)
    return m.to_dict()


def finish_run(run: Path, cfg: RunConfig, params, vocab, kind: str, history=None, extra_meta=None) -> str:
    meta = {"kind": kind, "seed": cfg.seed, "config": cfg.to_dict(), **(extra_meta or {})}
    digest = save_checkpoint(params, run / "checkpoint.bin", vocab, meta)
    if history is not None:
        write_diagnostics(run / "diagnostics.csv", history)
    return digest


def _train_stage(name: str, run: Path, cfg: RunConfig, vocab, fn):
    with stage(name):
        try:
            return fn()
        except DivergenceError as exc:
            if exc.last_params is not None:
                save_checkpoint(exc.last_params, run / "checkpoint.bin", vocab,
                                {"kind": name, "diverged": True, "config": cfg.to_dict()})
            raise


def _default_cache(cfg: RunConfig, out: Path) -> None:
    if cfg.pretrain.cache_dir is None:
        cfg.pretrain.cache_dir = str(out / "cache")


def run_poison(cfg: RunConfig, run: Path, corpus: Corpus | None = None) -> dict:
    with stage("data"):
        corpus = corpus or get_corpus(cfg)
        vocab = corpus_vocab(corpus, cfg.model.max_len)
    with stage("pretrain"):
        base = pretrain(corpus, vocab, cfg)
        before = measure(base, vocab, cfg, corpus)
        write_json(run / "pretrain_metrics.json", before)
    result = _train_stage("poison", run, cfg, vocab, lambda: train_poison(cfg, corpus, base, vocab))
    with stage("eval"):
        digest = finish_run(run, cfg, result.params, vocab, "poison", result.diagnostics)
        train = corpus.split("train")
        poisoned, _ = poison_corpus(train, cfg.poison.to_poison_config())
        write_json(run / "poison_manifest.json", {
            "indices": result.poisoned_indices,
            "records": [{"index": i, "caption": poisoned[i].caption, "trigger_meta": poisoned[i].trigger_meta}
                        for i in result.poisoned_indices],
        })
        metrics = {**measure(result.params, vocab, cfg, corpus), "seed": cfg.seed, "checkpoint_hash": digest}
        write_json(run / "metrics.json", metrics)
    return metrics


def run_clean(cfg: RunConfig, run: Path, checkpoint, corpus: Corpus | None = None) -> dict:
    with stage("load"):
        poisoned, vocab, _ = load_checkpoint(checkpoint)
        if vocab is None:
            raise ValueError(f"{checkpoint}: sidecar carries no vocabulary")
    with stage("data"):
        corpus = corpus or get_corpus(cfg)
    result = _train_stage(cfg.mode, run, cfg, vocab, lambda: train_clean(cfg, poisoned, corpus, vocab))
    with stage("eval"):
        digest = finish_run(run, cfg, result.params, vocab, cfg.mode, result.diagnostics,
                            {"source_checkpoint": checkpoint_hash(checkpoint)})
        metrics = {**measure(result.params, vocab, cfg, corpus), "seed": cfg.seed, "checkpoint_hash": digest}
        write_json(run / "metrics.json", metrics)
    return metrics


def run_eval(cfg: RunConfig, run: Path | None, checkpoint, corpus: Corpus | None = None) -> dict:
    with stage("load"):
        params, vocab, _ = load_checkpoint(checkpoint)
        if vocab is None:
            raise ValueError(f"{checkpoint}: sidecar carries no vocabulary")
    with stage("data"):
        corpus = corpus or get_corpus(cfg)
    with stage("eval"):
        metrics = {**measure(params, vocab, cfg, corpus), "seed": cfg.seed,
                   "checkpoint_hash": checkpoint_hash(checkpoint)}
        if run is not None:
            write_json(run / "metrics.json", metrics)
    return metrics


def _clean_child(raw: dict, checkpoint: str, run: str, threads: int) -> dict:
    """One sweep child in a worker process; the corpus is re-read from disk."""
    with threadpool_limits(threads):
        cfg = from_dict(raw)
        return run_clean(cfg, Path(run), checkpoint)


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("PAR_THREADS", "1")))
    except ValueError:
        raise ConfigError("PAR_THREADS", f"must be a positive integer, got {os.environ['PAR_THREADS']!r}") from None


def sweep_clean(cfg_raw: dict, checkpoint, sweep_dir: Path, jobs: list[tuple[str, dict]], corpus: Corpus) -> list[dict]:
    """Run ``clean_par`` children (name, override dict) and return their metrics in job order."""
    workers = _workers()
    runs = []
    for name, extra in jobs:
        raw = _merge(cfg_raw, extra)
        raw["mode"] = "clean_par"
        child = sweep_dir / name
        child.mkdir()
        runs.append((raw, child))
    if workers == 1:
        out = []
        for raw, child in runs:
            cfg = from_dict(raw)
            write_json(child / "config.json", cfg.to_dict())
            out.append(run_clean(cfg, child, checkpoint, corpus))
        return out
    corpus_dir = sweep_dir / "corpus"
    if not corpus_dir.exists():
        save_corpus(corpus, corpus_dir)
    for raw, child in runs:
        raw.setdefault("data", {})["corpus_dir"] = str(corpus_dir)
        write_json(child / "config.json", from_dict(raw).to_dict())
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(_clean_child, raw, str(checkpoint), str(child), 1) for raw, child in runs]
        return [f.result() for f in futures]


# --- subcommands -------------------------------------------------------------------

def cmd_make_data(args) -> Path:
    cfg, _ = build_config(args)
    run = make_run_dir(args.out, "make-data", cfg.seed)
    write_json(run / "config.json", cfg.to_dict())
    with stage("data"):
        d = cfg.data
        corpus = build_corpus({"train": d.n_train, "clean": d.n_clean, "eval": d.n_eval}, Rng(d.seed), size=d.image_size)
        if args.poisoned:
            lo, hi = corpus.splits["train"]
            poisoned, idx = poison_corpus(corpus.split("train"), cfg.poison.to_poison_config())
            corpus.samples[lo:hi] = poisoned
            write_json(run / "poison_manifest.json", {"indices": [lo + i for i in idx]})
        save_corpus(corpus, run / "corpus")
    return run


def cmd_poison(args) -> Path:
    cfg, _ = build_config(args, mode="poison")
    run = make_run_dir(args.out, "poison", cfg.seed)
    _default_cache(cfg, Path(args.out))
    write_json(run / "config.json", cfg.to_dict())
    run_poison(cfg, run)
    return run


def _resolve_checkpoint(args, raw_cfg: dict | None = None) -> str:
    ck = getattr(args, "checkpoint", None)
    if ck is None and raw_cfg:
        ck = raw_cfg.get("clean", {}).get("poisoned_checkpoint")
    if ck is None:
        raise ConfigError("clean.poisoned_checkpoint", "no checkpoint given (use --checkpoint or --set)")
    return str(ck)


def _peek_raw(args) -> dict:
    raw = _read_json(args.config, "--config") if args.config else {}
    for item in args.set or ():
        apply_override(raw, item)
    return raw


def cmd_clean(args) -> Path:
    peek = _peek_raw(args)
    ck = _resolve_checkpoint(args, peek)
    base = _checkpoint_config(ck)
    mode = "clean_baseline" if args.baseline or peek.get("mode") == "clean_baseline" else "clean_par"
    cfg, _ = build_config(args, base, mode=mode)
    cfg.clean.poisoned_checkpoint = ck
    run = make_run_dir(args.out, "clean", cfg.seed)
    write_json(run / "config.json", cfg.to_dict())
    run_clean(cfg, run, ck)
    return run


def cmd_eval(args) -> Path:
    ck = _resolve_checkpoint(args)
    cfg, _ = build_config(args, _checkpoint_config(ck))
    run = make_run_dir(args.out, "eval", cfg.seed)
    write_json(run / "config.json", cfg.to_dict())
    run_eval(cfg, run, ck)
    return run


def cmd_export_proj(args) -> Path:
    ck = _resolve_checkpoint(args)
    cfg, _ = build_config(args, _checkpoint_config(ck))
    run = make_run_dir(args.out, "export-proj", cfg.seed)
    write_json(run / "config.json", cfg.to_dict())
    with stage("load"):
        params, _, _ = load_checkpoint(ck)
    with stage("data"):
        corpus = get_corpus(cfg)
    with stage("export"):
        proj = projection_for(params, corpus.split("eval"), cfg.poison.trigger.spec(), cfg.poison.target_label,
                              cfg.eval.n_projection, cfg.eval.seed)
        proj.to_csv(run / "projection.csv")
        write_json(run / "projection.json", {"separation": proj.separation, "n": int(len(proj.xy)),
                                             "checkpoint_hash": checkpoint_hash(ck)})
    return run


def _poisoned_for_sweep(args, cfg: RunConfig, raw: dict, sweep: Path, corpus: Corpus) -> str:
    ck = getattr(args, "checkpoint", None) or cfg.clean.poisoned_checkpoint
    if ck:
        return str(ck)
    child = sweep / "poison"
    child.mkdir()
    pcfg = from_dict(_merge(raw, {"mode": "poison"}))
    _default_cache(pcfg, Path(args.out))
    write_json(child / "config.json", pcfg.to_dict())
    run_poison(pcfg, child, corpus)
    return str(child / "checkpoint.bin")


def cmd_sweep_tau(args) -> Path:
    base = {}
    peek = _peek_raw(args)
    ck = getattr(args, "checkpoint", None) or peek.get("clean", {}).get("poisoned_checkpoint")
    if ck:
        base = _checkpoint_config(ck)
        base.pop("mode", None)
    cfg, raw = build_config(args, base, mode="clean_par")
    sweep = make_run_dir(args.out, "sweep-tau", cfg.seed)
    write_json(sweep / "config.json", cfg.to_dict())
    with stage("data"):
        corpus = get_corpus(cfg)
    ck = _poisoned_for_sweep(args, cfg, raw, sweep, corpus)
    jobs = [(f"clean_par-tau{tau:g}-seed{seed}", {"seed": seed, "clean": {"tau": tau}})
            for seed in cfg.sweep.seeds for tau in cfg.sweep.taus]
    results = sweep_clean(raw, ck, sweep, jobs, corpus)
    rows = []
    for (_, extra), m in zip(jobs, results):
        rows.append({"tau": extra["clean"]["tau"], "seed": extra["seed"], "clean_acc": m["clean_acc"], "asr": m["asr"],
                     "retrieval_p_at_k": m["retrieval_p_at_k"], "retrieval_asr": m["retrieval_asr"]})
    write_csv(sweep / "sweep_tau_runs.csv", rows)
    write_csv(sweep / "sweep_tau.csv", average_by(rows, "tau", ("clean_acc", "asr", "retrieval_p_at_k", "retrieval_asr")))
    return sweep


def average_by(rows: list[dict], key: str, fields: tuple[str, ...]) -> list[dict]:
    """Seed-average ``fields`` per distinct ``key`` value, keeping first-seen key order."""
    keys = list(dict.fromkeys(r[key] for r in rows))
    out = []
    for k in keys:
        group = [r for r in rows if r[key] == k]
        out.append({key: k, **{f: float(np.mean([r[f] for r in group])) for f in fields}, "n_seeds": len(group)})
    return out


def cmd_sweep_rate(args) -> Path:
    cfg, raw = build_config(args, mode="poison")
    sweep = make_run_dir(args.out, "sweep-rate", cfg.seed)
    write_json(sweep / "config.json", cfg.to_dict())
    with stage("data"):
        corpus = get_corpus(cfg)
    rows = []
    for rate in cfg.sweep.rates:
        child = sweep / f"poison-rate{rate:g}"
        child.mkdir()
        pcfg = from_dict(_merge(raw, {"mode": "poison", "poison": {"rate": rate}}))
        _default_cache(pcfg, Path(args.out))
        write_json(child / "config.json", pcfg.to_dict())
        poisoned = run_poison(pcfg, child, corpus)
        craw = _merge(raw, {"poison": {"rate": rate}})
        cleaned = sweep_clean(craw, child / "checkpoint.bin", sweep, [(f"clean_par-rate{rate:g}", {})], corpus)[0]
        rows.append({"rate": rate, "asr_poisoned": poisoned["asr"], "asr_cleaned": cleaned["asr"],
                     "clean_acc_poisoned": poisoned["clean_acc"], "clean_acc_cleaned": cleaned["clean_acc"]})
    write_csv(sweep / "sweep_rate.csv", rows)
    return sweep


COMMANDS = {
    "make-data": cmd_make_data,
    "poison": cmd_poison,
    "clean": cmd_clean,
    "eval": cmd_eval,
    "sweep-tau": cmd_sweep_tau,
    "sweep-rate": cmd_sweep_rate,
    "export-proj": cmd_export_proj,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config field, e.g. clean.tau=1.5 (repeatable)")
    common.add_argument("--out", default="runs", help="parent directory for run directories (default: runs)")
    common.add_argument("--seed", type=int, help="run seed (overrides the config's top-level seed)")
    common.add_argument("--quiet", action="store_true", help="only log warnings and errors")

    parser = argparse.ArgumentParser(prog="parclip", description="Backdoor poisoning and cleaning of a desk-scale dual encoder.")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("make-data", parents=[common], help="render the synthetic corpus to PPM + manifest")
    p.add_argument("--poisoned", action="store_true", help="apply the poison section to the train split")
    sub.add_parser("poison", parents=[common], help="pre-train, then fine-tune on poisoned data")
    p = sub.add_parser("clean", parents=[common], help="clean a poisoned checkpoint (PAR by default)")
    p.add_argument("--checkpoint", help="poisoned checkpoint.bin")
    p.add_argument("--baseline", action="store_true", help="use the augmentation-based baseline cleaner")
    for name, text in (("eval", "evaluate a checkpoint"), ("export-proj", "export a 2-D projection of eval embeddings")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--checkpoint", required=True)
    p = sub.add_parser("sweep-tau", parents=[common], help="clean one poisoned checkpoint across a tau grid")
    p.add_argument("--checkpoint", help="poisoned checkpoint (poisons first when omitted)")
    sub.add_parser("sweep-rate", parents=[common], help="poison and clean across poisoning rates")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        threads = _workers()
        with threadpool_limits(threads):
            run = COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except StageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"pipeline failure in stage 'setup': {exc}", file=sys.stderr)
        return 1
    print(run)
    return 0


if __name__ == "__main__":
    sys.exit(main())
