"""Command-line front end: fixtures, calibration, pruning, evaluation, ablation grids.

Exit codes: 0 success, 2 config/input error, 3 compatibility/fingerprint
error, 4 I/O or file-format error.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels
from .calibration import CalibrationRun, export_stats_csv, run_calibration
from .checkpoint import load_checkpoint, model_fingerprint, save_checkpoint
from .corpus import GENERATOR_KINDS, Corpus, generate
from .errors import CompatibilityError, ConfigError, FormatError, MoneError
from .evaluation import PERPLEXITY_NOTE, emit_report, evaluate_pruned, prune_set_overlap, reference
from .model import ModelConfig, init_model
from .pruning import REPLACEMENT_MODES, PruningPlan, apply_plan, build_plan, param_counts
from .redundancy import ScoreMethod, export_scores_csv

log = logging.getLogger("mone")

EXIT_OK, EXIT_CONFIG, EXIT_COMPAT, EXIT_IO = 0, 2, 3, 4


# ---------------------------------------------------------------------------
# run config
# ---------------------------------------------------------------------------

@dataclass
class CorpusConfig:
    n_sequences: int = 1000
    seq_len: int = 128
    seed: int = 1
    kind: str = "markov"
    source_seeds: list = None
    n_eval: int = 32

    def __post_init__(self):
        if self.source_seeds is None:
            self.source_seeds = [self.seed]
        for name in ("n_sequences", "seq_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"corpus.{name} must be >= 1", field=f"corpus.{name}")
        if self.kind not in GENERATOR_KINDS:
            raise ConfigError(f"corpus.kind must be one of {GENERATOR_KINDS}", field="corpus.kind")
        if not self.source_seeds:
            raise ConfigError("corpus.source_seeds must not be empty", field="corpus.source_seeds")
        if self.n_eval < 1:
            raise ConfigError("corpus.n_eval must be >= 1", field="corpus.n_eval")


@dataclass
class PruningConfig:
    methods: list = field(default_factory=lambda: ["mone", "var_only", "freq_only", "random"])
    ratios: list = field(default_factory=lambda: [0.25, 0.5])
    modes: list = field(default_factory=lambda: ["novice", "drop"])
    freq_normalization: str = "activations"

    def __post_init__(self):
        self.methods = [ScoreMethod.parse(m).value for m in self.methods]
        for r in self.ratios:
            if not isinstance(r, (int, float)) or not 0.0 <= r <= 1.0:
                raise ConfigError(f"pruning ratio {r!r} outside [0, 1]", field="pruning.ratios")
        for m in self.modes:
            if m not in REPLACEMENT_MODES:
                raise ConfigError(f"replacement mode {m!r} not in {REPLACEMENT_MODES}", field="pruning.modes")
        if not (self.methods and self.ratios and self.modes):
            raise ConfigError("pruning methods, ratios and modes must be non-empty", field="pruning")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    sample_sizes: list = field(default_factory=lambda: [100])
    pruning: PruningConfig = field(default_factory=PruningConfig)
    output_dir: str = "runs"
    seed: int = 0

    def __post_init__(self):
        for n in self.sample_sizes:
            if not isinstance(n, int) or n < 1:
                raise ConfigError(f"calibration sample size {n!r} must be >= 1", field="calibration.sample_sizes")
        if max(self.sample_sizes) + self.corpus.n_eval > self.corpus.n_sequences:
            raise ConfigError(
                "corpus.n_sequences must cover the largest calibration sample plus corpus.n_eval",
                field="corpus.n_sequences",
            )

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        try:
            model = ModelConfig.from_dict(data.pop("model", {}))
            corpus = CorpusConfig(**data.pop("corpus", {}))
            calib = data.pop("calibration", {})
            pruning = PruningConfig(**data.pop("pruning", {}))
        except TypeError as exc:
            raise ConfigError(f"invalid run config: {exc}") from exc
        sizes = calib.get("sample_sizes", [100])
        extra = set(data) - {"output_dir", "seed"}
        if extra:
            raise ConfigError(f"unknown run config field(s): {sorted(extra)}", field=sorted(extra)[0])
        return cls(model, corpus, list(sizes), pruning, data.get("output_dir", "runs"), int(data.get("seed", 0)))

    def to_dict(self):
        return {
            "model": self.model.to_dict(),
            "corpus": vars(self.corpus),
            "calibration": {"sample_sizes": self.sample_sizes},
            "pruning": vars(self.pruning),
            "output_dir": self.output_dir,
            "seed": self.seed,
        }


def _read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except OSError as exc:
        raise FormatError(f"cannot read {path}: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc


def _model_config(args):
    data = {}
    if getattr(args, "config", None):
        raw = _read_json(args.config)
        data = dict(raw.get("model", raw))
    for name in ("vocab_size", "d_model", "n_layers", "n_experts", "top_k", "d_expert", "seed"):
        value = getattr(args, name, None)
        if value is not None:
            data[name] = value
    if getattr(args, "renormalize_gates", False):
        data["renormalize_gates"] = True
    return ModelConfig.from_dict(data)


def _out(args, path):
    p = Path(path)
    if getattr(args, "out_dir", None) and not p.is_absolute():
        p = Path(args.out_dir) / p
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _in(args, path):
    p = Path(path)
    if getattr(args, "out_dir", None) and not p.is_absolute() and not p.exists():
        p = Path(args.out_dir) / p
    return p


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_model(args):
    cfg = _model_config(args)
    model = init_model(cfg)
    out = _out(args, args.out)
    fp = save_checkpoint(model, out)
    counts = param_counts(model)
    print(f"wrote {out} fingerprint={fp[:16]}")
    print(f"total_params={counts['total_params']} expert_params={counts['expert_params']}")
    return EXIT_OK


def cmd_gen_data(args):
    data = {}
    if args.config:
        raw = _read_json(args.config)
        data = dict(raw.get("corpus", {}))
        vocab = raw.get("model", {}).get("vocab_size")
    else:
        vocab = None
    vocab = args.vocab_size or vocab or ModelConfig().vocab_size
    n = args.n_sequences if args.n_sequences is not None else data.get("n_sequences", 1000)
    length = args.seq_len if args.seq_len is not None else data.get("seq_len", 128)
    seed = args.seed if args.seed is not None else data.get("seed", 1)
    kind = args.kind or data.get("kind", "markov")
    if n < 1:
        raise ConfigError("n_sequences must be at least 1", field="n_sequences")
    corpus = generate(kind, vocab, n, length, seed)
    out = _out(args, args.out)
    fp = corpus.save(out)
    print(f"wrote {out} sequences={len(corpus)} tokens={corpus.n_tokens} fingerprint={fp[:16]}")
    return EXIT_OK


def cmd_calibrate(args):
    model = load_checkpoint(_in(args, args.model))
    corpus = Corpus.load(_in(args, args.corpus))
    n = args.n_samples if args.n_samples is not None else len(corpus)
    subset = corpus.head(n)
    run = run_calibration(model, subset)
    run.meta = {"n_samples": n, "source_corpus_fingerprint": corpus.fingerprint()}
    out = _out(args, args.out)
    fp = run.save(out)
    if args.stats_csv:
        export_stats_csv(run, _out(args, args.stats_csv))
    print(f"wrote {out} total_tokens={run.total_tokens} fingerprint={fp[:16]}")
    return EXIT_OK


def cmd_prune(args):
    model = load_checkpoint(_in(args, args.model))
    calib = CalibrationRun.load(_in(args, args.calib))
    fp = model_fingerprint(model)
    if calib.model_fingerprint != fp:
        raise CompatibilityError(
            f"calibration was computed on model {calib.model_fingerprint[:12]}, not {fp[:12]}"
        )
    plan = build_plan(calib, args.method, args.ratio, args.mode, seed=args.seed if args.seed is not None else 0,
                      freq_normalization=args.freq_normalization)
    pruned = apply_plan(model, plan, renormalize_dropped=args.renormalize_dropped)
    out = _out(args, args.out)
    save_checkpoint(pruned, out)
    plan_out = _out(args, args.plan_out or str(Path(args.out).with_suffix(".plan.json")))
    plan.save(plan_out)
    if args.scores_csv:
        export_scores_csv([lp.scores for lp in plan.layers], _out(args, args.scores_csv))
    before, after = param_counts(model), param_counts(pruned)
    for li, lp in enumerate(plan.layers):
        print(f"layer {li}: pruned {len(lp.prune_set)} experts {list(lp.prune_set)}")
    print(f"expert_params {before['expert_params']} -> {after['expert_params']} "
          f"(+{after['novice_params']} novice); total_params {before['total_params']} -> {after['total_params']}")
    print(f"wrote {out} and {plan_out}")
    return EXIT_OK


def cmd_eval(args):
    original = load_checkpoint(_in(args, args.original))
    pruned = load_checkpoint(_in(args, args.pruned))
    corpus = Corpus.load(_in(args, args.corpus))
    if args.n_eval is not None:
        corpus = corpus.head(args.n_eval)
    fp_orig, fp_pruned = model_fingerprint(original), model_fingerprint(pruned)
    for name in ("vocab_size", "d_model", "n_layers", "n_experts", "top_k", "d_expert"):
        if getattr(original.config, name) != getattr(pruned.config, name):
            raise CompatibilityError(f"checkpoints differ in {name}")
    parent = pruned.lineage.get("parent_model")
    if fp_orig != fp_pruned and parent != fp_orig:
        raise CompatibilityError("pruned checkpoint was not derived from the given original")
    if original.is_pruned:
        raise CompatibilityError("original checkpoint is itself pruned")
    ref = reference(original, corpus)
    res = evaluate_pruned(ref, pruned)
    doc = {
        "kind": "eval",
        "config": original.config.to_dict(),
        "fingerprints": {"original": fp_orig, "pruned": fp_pruned, "corpus": corpus.fingerprint()},
        "metric_note": PERPLEXITY_NOTE,
        **res,
    }
    out = _out(args, args.out)
    emit_report(doc, out)
    d = res["discrepancy"]
    print(f"logit_mean_l2={d['logit_mean_l2']:.6g} ppl {d['perplexity_original']:.4f} -> {d['perplexity_pruned']:.4f}")
    print(f"wrote {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# ablation grid
# ---------------------------------------------------------------------------

SUMMARY_METRICS = ("logit_mean_l2", "layer_mean_l2", "perplexity_pruned", "perplexity_delta",
                   "flops_per_token", "memory_bytes", "activated_params_per_token")


def _cell_metrics(res):
    d, c = res["discrepancy"], res["cost"]["after"]
    return {
        "logit_mean_l2": d["logit_mean_l2"],
        "layer_mean_l2": float(np.mean([layer["mean_l2"] for layer in d["layers"]])),
        "perplexity_pruned": d["perplexity_pruned"],
        "perplexity_delta": d["perplexity_pruned"] - d["perplexity_original"],
        "flops_per_token": c["flops_per_token"],
        "memory_bytes": c["memory_bytes"],
        "activated_params_per_token": c["activated_params_per_token"],
    }


def _ratio_tag(r):
    return f"{r:g}".replace(".", "p")


def _write_corpus(path, cfg, seed):
    corpus = generate(cfg.corpus.kind, cfg.model.vocab_size, cfg.corpus.n_sequences, cfg.corpus.seq_len, seed)
    data = corpus.to_bytes()
    if not path.exists() or path.read_bytes() != data:
        path.write_bytes(data)
    return corpus


def _load_or_calibrate(path, model, model_fp, subset):
    sub_fp = subset.fingerprint()
    if path.exists():
        try:
            run = CalibrationRun.load(path)
            if run.model_fingerprint == model_fp and run.corpus_fingerprint == sub_fp:
                return run, True
        except FormatError:
            pass
    run = run_calibration(model, subset)
    run.meta = {"n_samples": len(subset)}
    run.save(path)
    return run, False


def run_ablation(cfg: RunConfig, out_dir: Path) -> dict:
    """Run every (source, sample size, method, ratio, mode) cell and summarize.

    Cells whose report already exists with matching input fingerprints are
    reused. Returns the summary document.
    """
    out_dir.mkdir(parents=True, exist_ok=True)
    model = init_model(cfg.model)
    model_path = out_dir / "model.mone"
    model_fp = model_fingerprint(model)
    if not model_path.exists() or model_fingerprint(load_checkpoint(model_path)) != model_fp:
        save_checkpoint(model, model_path)

    corpora = {}
    for s in cfg.corpus.source_seeds:
        corpora[s] = _write_corpus(out_dir / f"corpus_src{s}.monc", cfg, s)
    primary = corpora[cfg.corpus.source_seeds[0]]
    n_seq = cfg.corpus.n_sequences
    eval_corpus = primary.slice(n_seq - cfg.corpus.n_eval, n_seq)
    eval_fp = eval_corpus.fingerprint()
    ref = None

    cells, plans, computed, skipped = [], {}, 0, 0
    for s, n in itertools.product(cfg.corpus.source_seeds, cfg.sample_sizes):
        group = out_dir / "cells" / f"src{s}_n{n}"
        group.mkdir(parents=True, exist_ok=True)
        calib, _ = _load_or_calibrate(group / "calibration.mons", model, model_fp, corpora[s].head(n))
        calib_fp = calib.fingerprint()
        export_stats_csv(calib, group / "expert_stats.csv")
        for method, ratio, mode in itertools.product(cfg.pruning.methods, cfg.pruning.ratios, cfg.pruning.modes):
            cell_dir = group / f"{method}_r{_ratio_tag(ratio)}_{mode}"
            cell = {"source_seed": s, "sample_size": n, "method": method, "ratio": ratio, "mode": mode,
                    "dir": cell_dir.relative_to(out_dir).as_posix()}
            fps = {"model": model_fp, "calibration": calib_fp, "eval_corpus": eval_fp,
                   "cell": json.dumps([method, ratio, mode, cfg.seed, cfg.pruning.freq_normalization])}
            report_path = cell_dir / "report.json"
            try:
                if report_path.exists():
                    prev = json.loads(report_path.read_text())
                    if prev.get("fingerprints") == fps:
                        plans[(s, n, method, ratio, mode)] = PruningPlan.load(cell_dir / "plan.json")
                        cell.update(status="ok", metrics=_cell_metrics(prev))
                        cells.append(cell)
                        skipped += 1
                        continue
                plan = build_plan(calib, method, ratio, mode, seed=cfg.seed,
                                  freq_normalization=cfg.pruning.freq_normalization)
                pruned = apply_plan(model, plan)
                if ref is None:
                    ref = reference(model, eval_corpus)
                res = evaluate_pruned(ref, pruned)
                cell_dir.mkdir(parents=True, exist_ok=True)
                plan.save(cell_dir / "plan.json")
                emit_report({"kind": "ablation_cell", "config": cell_config(cell), "fingerprints": fps,
                             "metric_note": PERPLEXITY_NOTE, **res}, report_path)
                plans[(s, n, method, ratio, mode)] = plan
                cell.update(status="ok", metrics=_cell_metrics(res))
                computed += 1
            except Exception as exc:  # a failed cell must not stop the grid
                log.warning("cell %s failed: %s", cell["dir"], exc)
                cell.update(status="error", error=f"{type(exc).__name__}: {exc}")
            cells.append(cell)

    _attach_mone_diffs(cells)
    summary = {
        "kind": "ablation_summary",
        "config": cfg.to_dict(),
        "fingerprints": {"model": model_fp, "eval_corpus": eval_fp,
                         **{f"corpus_src{s}": c.fingerprint() for s, c in corpora.items()}},
        "metric_note": PERPLEXITY_NOTE,
        "cells": cells,
        "overlap": _overlaps(cfg, plans),
        "perplexity_delta_spread": _ppl_spread(cells),
    }
    emit_report(summary, out_dir / "summary.json")
    _write_summary_csv(cells, out_dir / "summary.csv")
    summary["_computed"], summary["_skipped"] = computed, skipped
    return summary


def cell_config(cell):
    return {k: cell[k] for k in ("source_seed", "sample_size", "method", "ratio", "mode")}


def _attach_mone_diffs(cells):
    base = {(c["source_seed"], c["sample_size"], c["ratio"], c["mode"]): c
            for c in cells if c["method"] == "mone" and c["status"] == "ok"}
    for c in cells:
        ref = base.get((c["source_seed"], c["sample_size"], c["ratio"], c["mode"]))
        if c["status"] == "ok" and ref is not None:
            c["diff_to_mone"] = {k: c["metrics"][k] - ref["metrics"][k] for k in SUMMARY_METRICS}


def _overlaps(cfg, plans):
    """Method-vs-method overlap per grid group, and MoNE overlap across calibration draws."""
    between_methods = []
    for s, n, ratio in itertools.product(cfg.corpus.source_seeds, cfg.sample_sizes, cfg.pruning.ratios):
        methods = cfg.pruning.methods
        mat = [[None] * len(methods) for _ in methods]
        for i, a in enumerate(methods):
            for j, b in enumerate(methods):
                # prune sets do not depend on the replacement mode
                pa = plans.get((s, n, a, ratio, cfg.pruning.modes[0]))
                pb = plans.get((s, n, b, ratio, cfg.pruning.modes[0]))
                if pa is not None and pb is not None:
                    mat[i][j] = prune_set_overlap(pa, pb)["mean"]
        between_methods.append({"source_seed": s, "sample_size": n, "ratio": ratio, "methods": methods,
                                "matrix": mat})
    across = []
    draws = list(itertools.product(cfg.corpus.source_seeds, cfg.sample_sizes))
    for method in cfg.pruning.methods:
        for ratio in cfg.pruning.ratios:
            mat = [[None] * len(draws) for _ in draws]
            for i, (sa, na) in enumerate(draws):
                for j, (sb, nb) in enumerate(draws):
                    pa = plans.get((sa, na, method, ratio, cfg.pruning.modes[0]))
                    pb = plans.get((sb, nb, method, ratio, cfg.pruning.modes[0]))
                    if pa is not None and pb is not None:
                        mat[i][j] = prune_set_overlap(pa, pb)["mean"]
            across.append({"method": method, "ratio": ratio,
                           "draws": [{"source_seed": s, "sample_size": n} for s, n in draws], "matrix": mat})
    return {"between_methods": between_methods, "across_calibration": across}


def _ppl_spread(cells):
    groups = {}
    for c in cells:
        if c["status"] == "ok":
            groups.setdefault((c["method"], c["ratio"], c["mode"]), []).append(c["metrics"]["perplexity_delta"])
    return [{"method": m, "ratio": r, "mode": mode, "n": len(v), "mean": float(np.mean(v)),
             "std": float(np.std(v, ddof=1)) if len(v) > 1 else 0.0}
            for (m, r, mode), v in sorted(groups.items())]


def _write_summary_csv(cells, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["source_seed", "sample_size", "method", "ratio", "mode", "status"]
                   + list(SUMMARY_METRICS) + [f"diff_{k}" for k in SUMMARY_METRICS])
        for c in cells:
            m = c.get("metrics", {})
            dm = c.get("diff_to_mone", {})
            w.writerow([c["source_seed"], c["sample_size"], c["method"], repr(c["ratio"]), c["mode"], c["status"]]
                       + [repr(m[k]) if k in m else "" for k in SUMMARY_METRICS]
                       + [repr(dm[k]) if k in dm else "" for k in SUMMARY_METRICS])


def cmd_ablate(args):
    raw = _read_json(args.config)
    cfg = RunConfig.from_dict(raw)
    if args.seed is not None:
        cfg.seed = args.seed
    out_dir = Path(args.out_dir) if args.out_dir else Path(cfg.output_dir)
    summary = run_ablation(cfg, out_dir)
    cells = summary["cells"]
    n_ok = sum(c["status"] == "ok" for c in cells)
    print(f"cells: {len(cells)} ok={n_ok} computed={summary['_computed']} skipped={summary['_skipped']}")
    print(f"wrote {out_dir / 'summary.json'} and {out_dir / 'summary.csv'}")
    if n_ok == 0:
        return EXIT_CONFIG
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="mone", description="Expert pruning with novice replacement for toy MoE LMs.")
    p.add_argument("--out-dir", help="base directory for relative paths")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-model", help="write a seeded model checkpoint")
    g.add_argument("--config", help="JSON model config (or run config with a 'model' section)")
    for name in ("vocab_size", "d_model", "n_layers", "n_experts", "top_k", "d_expert", "seed"):
        g.add_argument("--" + name.replace("_", "-"), dest=name, type=int)
    g.add_argument("--renormalize-gates", action="store_true")
    g.add_argument("--out", default="model.mone")
    g.set_defaults(func=cmd_gen_model)

    d = sub.add_parser("gen-data", help="write a synthetic Markov corpus")
    d.add_argument("--config")
    d.add_argument("--vocab-size", type=int)
    d.add_argument("--n-sequences", type=int)
    d.add_argument("--seq-len", type=int)
    d.add_argument("--seed", type=int, help="source seed")
    d.add_argument("--kind", choices=GENERATOR_KINDS)
    d.add_argument("--out", default="corpus.monc")
    d.set_defaults(func=cmd_gen_data)

    c = sub.add_parser("calibrate", help="accumulate expert statistics on the first n sequences")
    c.add_argument("--model", required=True)
    c.add_argument("--corpus", required=True)
    c.add_argument("--n-samples", type=int)
    c.add_argument("--out", default="calibration.mons")
    c.add_argument("--stats-csv", help="also write per-expert frequency/spread CSV")
    c.set_defaults(func=cmd_calibrate)

    r = sub.add_parser("prune", help="build a plan and write the pruned checkpoint")
    r.add_argument("--model", required=True)
    r.add_argument("--calib", required=True)
    r.add_argument("--method", default="mone", choices=[m.value for m in ScoreMethod])
    r.add_argument("--ratio", type=float, default=0.25)
    r.add_argument("--mode", default="novice", choices=REPLACEMENT_MODES)
    r.add_argument("--seed", type=int, help="seed for the random method")
    r.add_argument("--freq-normalization", default="activations", choices=("activations", "total_tokens"))
    r.add_argument("--renormalize-dropped", action="store_true")
    r.add_argument("--out", default="pruned.mone")
    r.add_argument("--plan-out")
    r.add_argument("--scores-csv")
    r.set_defaults(func=cmd_prune)

    e = sub.add_parser("eval", help="compare a pruned checkpoint against its original")
    e.add_argument("--original", required=True)
    e.add_argument("--pruned", required=True)
    e.add_argument("--corpus", required=True)
    e.add_argument("--n-eval", type=int, help="evaluate on the first n sequences only")
    e.add_argument("--out", default="report.json")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="run a methods x ratios x modes x calibration grid")
    a.add_argument("--config", required=True)
    a.add_argument("--seed", type=int, help="override the global seed")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    log.info("kernel backend: %s", _kernels.backend())
    try:
        return args.func(args)
    except MoneError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
