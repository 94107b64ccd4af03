"""Command-line driver. Every stage reads and writes artifacts under ``<output_dir>/<name>/``."""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import autograd as ag
from .config import ConfigError, PipelineConfig, load_config
from .editor import EditAudit
from .evaluation import EvalReport, SyntheticSpec, generate_synthetic_tkg, planted_queries
from .graph import (
    LoadError,
    LoadOptions,
    ParseError,
    TemporalQuery,
    load_graph,
    load_graph_dir,
    load_graph_json,
    save_graph_json,
)
from .llm import BackendError, ConsistencyError, Gateway, TransportError
from .paths import CandidateSet, ReasoningPath
from .pipeline import Pipeline, QueryPaths, sample_queries

logger = logging.getLogger("tkgpath")

EXIT_OK, EXIT_USAGE, EXIT_DEPENDENCY, EXIT_NUMERIC = 0, 1, 2, 3


class DependencyError(RuntimeError):
    pass


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- run directory helpers ---------------------------------------------------------


class RunDir:
    def __init__(self, config: PipelineConfig):
        self.config = config
        self.root = config.run_dir
        for sub in ("graph", "checkpoints", "paths", "edits", "reports", "cache"):
            (self.root / sub).mkdir(parents=True, exist_ok=True)

    def __truediv__(self, other) -> Path:
        return self.root / other

    def require(self, rel: str, command: str) -> Path:
        path = self.root / rel
        if not path.exists():
            raise DependencyError(f"missing {path}; run `tkgpath {command}` first")
        return path

    @property
    def manifest_path(self) -> Path:
        return self.root / "manifest.json"

    def manifest(self) -> dict:
        if self.manifest_path.exists():
            return json.loads(self.manifest_path.read_text(encoding="utf-8"))
        return {}

    def record(self, command: str, key: str, outputs: list[Path]) -> None:
        m = self.manifest()
        m[command] = {
            "key": key,
            "outputs": {str(p.relative_to(self.root)): _file_hash(p) for p in outputs if p.exists()},
        }
        _atomic_write(self.manifest_path, json.dumps(m, sort_keys=True, indent=1))

    def up_to_date(self, command: str, key: str) -> bool:
        entry = self.manifest().get(command)
        if not entry or entry.get("key") != key:
            return False
        for rel, digest in entry.get("outputs", {}).items():
            p = self.root / rel
            if not p.exists() or _file_hash(p) != digest:
                return False
        return True

    @contextmanager
    def lock(self):
        path = self.root / ".lock"
        try:
            fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise DependencyError(f"run directory {self.root} is locked by another command ({path})") from None
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        try:
            yield
        finally:
            path.unlink(missing_ok=True)


def _file_hash(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    tmp.replace(path)


def _write_jsonl(path: Path, rows) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    tmp.replace(path)


def _read_jsonl(path: Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _query_json(q: TemporalQuery) -> dict:
    return {"s": q.subject, "r": q.relation, "t": q.time, "gold": q.gold}


def _query_from(d: dict) -> TemporalQuery:
    return TemporalQuery(d["s"], d["r"], d["t"], d.get("gold"))


def _qp_json(qp: QueryPaths) -> dict:
    row = {
        "query": _query_json(qp.query),
        "candidates": [[e, s] for e, s in qp.candidates],
        "empty": qp.empty,
        "paths": [p.to_json() for p in qp.paths],
    }
    if qp.audit is not None:
        row["edited"] = [p.to_json() for p in qp.edited]
        row["audit"] = qp.audit.to_json()
    return row


def _qp_from(row: dict) -> QueryPaths:
    cands = CandidateSet([int(e) for e, _ in row["candidates"]], [float(s) for _, s in row["candidates"]])
    qp = QueryPaths(_query_from(row["query"]), cands, [ReasoningPath.from_json(p) for p in row["paths"]],
                    bool(row.get("empty", False)))
    if "edited" in row:
        qp.edited = [ReasoningPath.from_json(p) for p in row["edited"]]
        a = row["audit"]
        qp.audit = EditAudit(qp.query, a["mode"], qp.paths, [], a["operations"], a["raw_text"],
                             a["prompt_tokens"], a["completion_tokens"], a["attempts"], a["fallback"])
    return qp


# -- pipeline reconstruction ------------------------------------------------------------


def _graph(run: RunDir):
    return load_graph_json(run.require("graph/graph.json", "ingest` or `tkgpath synth"))


def _gateway(cfg: PipelineConfig, run: RunDir, graph) -> Gateway:
    from .editor import rule_responder

    gw_cfg = cfg.gateway
    if gw_cfg.cache_dir is None:
        gw_cfg.cache_dir = str(run / "cache")
    rules = rule_responder(graph) if gw_cfg.backend == "offline" else None
    return Gateway(gw_cfg, edit_rules=rules)


def _meta_path(ckpt: Path) -> Path:
    return ckpt.with_name(ckpt.stem + ".meta.json")


def _apply_meta(cfg: PipelineConfig, ckpt: Path) -> None:
    meta = _meta_path(ckpt)
    if meta.exists():
        for k, v in json.loads(meta.read_text(encoding="utf-8")).items():
            setattr(cfg.model, k, v)


def _pipeline(cfg: PipelineConfig, run: RunDir, stage1: bool = True, stage3: bool = False) -> Pipeline:
    graph = _graph(run)
    pipe = Pipeline(cfg, graph, _gateway(cfg, run, graph))
    raw = ag.load_params(run.require("checkpoints/embeddings.json", "init-embeddings"))
    if stage1:
        _apply_meta(cfg, run.require("checkpoints/stage1.json", "train-gnn"))
    if stage3:
        _apply_meta(cfg, run.require("checkpoints/stage3.json", "train-aggregator"))
    pipe.set_embeddings(raw["raw.entities"], raw["raw.relations"])
    pipe.build_models()
    if stage1:
        pipe.load_parameters(ag.load_params(run / "checkpoints/stage1.json"), pipe.stage1_parameters())
    if stage3:
        pipe.load_parameters(ag.load_params(run / "checkpoints/stage3.json"), pipe.stage3_parameters())
    return pipe


def _synth_spec(cfg: PipelineConfig) -> SyntheticSpec:
    s = cfg.synth
    return SyntheticSpec(
        n_entities=s.n_entities, n_relations=s.n_relations, horizon=s.horizon,
        instances_per_step=s.instances_per_step, background_per_step=s.background_per_step,
        noise_ratio=s.noise_ratio, n_regions=s.n_regions, seed=cfg.seed,
    )


def _train_queries(pipe: Pipeline, run: RunDir) -> list[TemporalQuery]:
    if pipe.config.train.directions == "planted":
        return planted_queries(pipe.graph, _synth_spec(pipe.config), "train")
    return pipe.train_queries()


def _eval_queries(pipe: Pipeline, run: RunDir) -> list[TemporalQuery]:
    e = pipe.config.eval
    if e.planted_only:
        qs = planted_queries(pipe.graph, _synth_spec(pipe.config), e.split)
    else:
        qs = pipe.graph.queries(e.split, e.directions)
    return sample_queries(qs, e.max_queries, np.random.default_rng(pipe.config.seed + 1))


# -- commands ----------------------------------------------------------------------------


def cmd_ingest(cfg: PipelineConfig, run: RunDir, args) -> list[Path]:
    d = cfg.data
    opts = LoadOptions(time_format=d.time_format, ids=d.ids, allow_empty_split=d.allow_empty_split)
    if d.directory:
        graph = load_graph_dir(d.directory, opts)
    elif d.train and d.valid and d.test:
        graph = load_graph(d.train, d.valid, d.test, opts)
    else:
        raise UsageError("ingest needs [data] directory or train/valid/test paths (or --data-dir)")
    out = run / "graph/graph.json"
    save_graph_json(graph, out)
    stats = run / "reports/ingest.json"
    _atomic_write(stats, json.dumps(graph.stats(), sort_keys=True, indent=1))
    print(json.dumps(graph.stats(), sort_keys=True))
    return [out, stats]


def cmd_synth(cfg: PipelineConfig, run: RunDir, args) -> list[Path]:
    spec = _synth_spec(cfg)
    graph = generate_synthetic_tkg(spec)
    out = run / "graph/graph.json"
    save_graph_json(graph, out)
    stats = dict(graph.stats(), planted_test=len(planted_queries(graph, spec, "test")))
    rep = run / "reports/ingest.json"
    _atomic_write(rep, json.dumps(stats, sort_keys=True, indent=1))
    print(json.dumps(stats, sort_keys=True))
    return [out, rep]


def cmd_init_embeddings(cfg: PipelineConfig, run: RunDir, args) -> list[Path]:
    graph = _graph(run)
    pipe = Pipeline(cfg, graph, _gateway(cfg, run, graph))
    table = pipe.init_embeddings(allow_fallback=args.allow_fallback)
    out = run / "checkpoints/embeddings.json"
    ag.save_params(out, {"raw.entities": pipe.embeddings.raw_entities, "raw.relations": pipe.embeddings.raw_relations})
    desc = run / "reports/descriptions.jsonl"
    table.to_jsonl(desc, graph)
    u = pipe.gateway.usage
    print(f"embedded {graph.n_entities} entities and {graph.n_relations} relations "
          f"(dim {pipe.embeddings.d_w}; {u.requests} requests, {u.cache_hits} cache hits)")
    return [out, desc]


def cmd_train_gnn(cfg: PipelineConfig, run: RunDir, args) -> list[Path]:
    pipe = _pipeline(cfg, run, stage1=False)
    queries = _train_queries(pipe, run)
    losses = pipe.train_gnn(queries)
    if not all(np.isfinite(losses)):
        raise ag.NumericError(f"non-finite training loss {losses}")
    out = run / "checkpoints/stage1.json"
    ag.save_params(out, pipe.stage1_parameters())
    meta = {"init_mode": cfg.model.init_mode, "aggregate": cfg.model.aggregate}
    _atomic_write(_meta_path(out), json.dumps(meta, sort_keys=True))
    rep = run / "reports/gnn_training.json"
    _atomic_write(rep, json.dumps({"queries": len(queries), "epoch_loss": losses}, sort_keys=True, indent=1))
    if args.dump_subgraphs:
        from .gnn import dump_subgraphs

        d = Path(args.dump_subgraphs)
        d.mkdir(parents=True, exist_ok=True)
        subs = [pipe.gnn.expand_subgraph(q, pipe.graph) for q in _eval_queries(pipe, run)]
        dump_subgraphs(subs, d / "subgraphs.jsonl")
    print("epoch losses: " + ", ".join(f"{x:.4f}" for x in losses))
    return [out, _meta_path(out), rep]


def cmd_extract_paths(cfg: PipelineConfig, run: RunDir, args) -> list[Path]:
    pipe = _pipeline(cfg, run)
    train = pipe.extract(_train_queries(pipe, run))
    evalq = pipe.extract(_eval_queries(pipe, run))
    n_bad = 0
    ratio = args.corrupt if args.corrupt is not None else cfg.eval.corrupt_ratio
    if ratio:
        evalq, n_bad = pipe.corrupt(evalq, ratio)
    a, b = run / "paths/train.jsonl", run / "paths/eval.jsonl"
    _write_jsonl(a, (_qp_json(qp) for qp in train))
    _write_jsonl(b, (_qp_json(qp) for qp in evalq))
    n_paths = sum(len(qp.paths) for qp in evalq)
    print(f"extracted {sum(len(q.paths) for q in train)} training and {n_paths} evaluation paths"
          + (f"; corrupted {n_bad} steps" if ratio else ""))
    return [a, b]


def cmd_edit_paths(cfg: PipelineConfig, run: RunDir, args) -> list[Path]:
    pipe = _pipeline(cfg, run, stage1=False)
    outs = []
    for split in ("train", "eval"):
        rows = [_qp_from(r) for r in _read_jsonl(run.require(f"paths/{split}.jsonl", "extract-paths"))]
        edited = pipe.edit(rows, cfg.editor.mode, cfg.editor.raw_times)
        out = run / f"edits/{split}.jsonl"
        _write_jsonl(out, (_qp_json(qp) for qp in edited))
        outs.append(out)
        kept = sum(len(qp.edited) for qp in edited)
        total = sum(len(qp.paths) for qp in edited)
        print(f"{split}: {kept} of {total} paths survive editing ({cfg.editor.mode})")
    return outs


def cmd_train_aggregator(cfg: PipelineConfig, run: RunDir, args) -> list[Path]:
    pipe = _pipeline(cfg, run)
    rows = [_qp_from(r) for r in _read_jsonl(run.require("edits/train.jsonl", "edit-paths"))]
    losses = pipe.train_aggregator(rows)
    if not all(np.isfinite(losses)):
        raise ag.NumericError(f"non-finite aggregator loss {losses}")
    out = run / "checkpoints/stage3.json"
    ag.save_params(out, pipe.stage3_parameters())
    meta = {
        "finetune_embeddings": cfg.model.finetune_embeddings,
        "separate_time_encoders": cfg.model.separate_time_encoders,
        "heads": cfg.model.heads,
        "transformer_layers": cfg.model.transformer_layers,
    }
    _atomic_write(_meta_path(out), json.dumps(meta, sort_keys=True))
    rep = run / "reports/aggregator_training.json"
    _atomic_write(rep, json.dumps({"epoch_loss": losses}, sort_keys=True, indent=1))
    print("epoch losses: " + ", ".join(f"{x:.4f}" for x in losses))
    return [out, _meta_path(out), rep]


def cmd_predict(cfg: PipelineConfig, run: RunDir, args) -> list[Path]:
    pipe = _pipeline(cfg, run, stage3=True)
    rows = [_qp_from(r) for r in _read_jsonl(run.require("edits/eval.jsonl", "edit-paths"))]
    preds = pipe.predict(rows)
    out = run / "reports/predictions.jsonl"
    _write_jsonl(
        out,
        (p.to_json() if p is not None else {"query": _query_json(qp.query), "ranked": []} for qp, p in zip(rows, preds)),
    )
    print(f"predicted {len(preds)} queries")
    return [out]


def _report_from_predictions(pipe: Pipeline, run: RunDir, name: str) -> EvalReport:
    preds = _read_jsonl(run.require("reports/predictions.jsonl", "predict"))
    rows = [_qp_from(r) for r in _read_jsonl(run.require("edits/eval.jsonl", "edit-paths"))]
    from .evaluation import evaluate_predictions

    score_maps = [{int(x["entity"]): float(x["score"]) for x in p["ranked"]} for p in preds]
    report = evaluate_predictions(name, score_maps, [qp.query for qp in rows], pipe.graph)
    audits = [qp.audit for qp in rows if qp.audit is not None]
    report.tokens = {"prompt": sum(a.prompt_tokens for a in audits), "completion": sum(a.completion_tokens for a in audits)}
    report.extra = {"empty_subgraphs": sum(qp.empty for qp in rows), "fallbacks": sum(a.fallback for a in audits)}
    return report


def cmd_evaluate(cfg: PipelineConfig, run: RunDir, args) -> list[Path]:
    graph = _graph(run)
    pipe = Pipeline(cfg, graph)
    report = _report_from_predictions(pipe, run, f"editor={cfg.editor.mode}")
    metrics = args.metrics or cfg.eval.metrics
    a, b = run / "reports/eval.json", run / "reports/eval.txt"
    _atomic_write(a, report.dumps(metrics))
    _atomic_write(b, report.table(metrics) + "\n")
    print(report.table(metrics))
    return [a, b]


def run_ablation(pipe: Pipeline, rows: list[QueryPaths]) -> EvalReport:
    """Six cells: editor {off, rules, llm} x prompt times {anonymized, raw}."""
    cells = {}
    for mode in ("off", "rules", "llm"):
        for raw in (False, True):
            name = f"editor={mode},times={'raw' if raw else 'anonymized'}"
            edited = pipe.edit(rows, mode, raw)
            cells[name] = pipe.evaluate(name, edited, pipe.predict(edited))
    base = cells["editor=rules,times=anonymized"]
    summary = EvalReport("ablation", base.ranks_raw, base.ranks_filtered, base.queries, base.tokens)
    summary.ablations = cells
    return summary


def cmd_ablate(cfg: PipelineConfig, run: RunDir, args) -> list[Path]:
    pipe = _pipeline(cfg, run, stage3=True)
    rows = [_qp_from(r) for r in _read_jsonl(run.require("paths/eval.jsonl", "extract-paths"))]
    report = run_ablation(pipe, rows)
    metrics = args.metrics or cfg.eval.metrics
    a, b = run / "reports/ablation.json", run / "reports/ablation.txt"
    _atomic_write(a, report.dumps(metrics))
    _atomic_write(b, report.table(metrics) + "\n")
    print(report.table(metrics))
    return [a, b]


def cmd_gradcheck(args) -> int:
    from .gradcheck import TOLERANCE, run_gradchecks

    start = time.perf_counter()
    results = run_gradchecks(range(args.seeds), args.case or None)
    if not results:
        raise UsageError(f"no gradient check named {args.case}")
    for r in results:
        flag = "ok" if r.ok else "FAIL"
        print(f"{r.name:<32} max rel err {r.max_rel_error:.3e}  checked {r.checked:<6} skipped {r.skipped:<6} {flag}")
    print(f"{len(results)} checks, tolerance {TOLERANCE:g}, {time.perf_counter() - start:.1f}s")
    return EXIT_OK if all(r.ok for r in results) else EXIT_NUMERIC


COMMANDS = {
    "ingest": cmd_ingest,
    "synth": cmd_synth,
    "init-embeddings": cmd_init_embeddings,
    "train-gnn": cmd_train_gnn,
    "extract-paths": cmd_extract_paths,
    "edit-paths": cmd_edit_paths,
    "train-aggregator": cmd_train_aggregator,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
}

# files (relative to the run directory) whose content decides whether a command must rerun
INPUTS = {
    "ingest": [],
    "synth": [],
    "init-embeddings": ["graph/graph.json"],
    "train-gnn": ["graph/graph.json", "checkpoints/embeddings.json"],
    "extract-paths": ["checkpoints/stage1.json"],
    "edit-paths": ["paths/train.jsonl", "paths/eval.jsonl"],
    "train-aggregator": ["edits/train.jsonl", "checkpoints/stage1.json"],
    "predict": ["edits/eval.jsonl", "checkpoints/stage3.json"],
    "evaluate": ["reports/predictions.jsonl", "edits/eval.jsonl"],
    "ablate": ["paths/eval.jsonl", "checkpoints/stage3.json"],
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tkgpath", description="Temporal knowledge graph forecasting with editable reasoning paths.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="TOML or JSON config file")
        sp.add_argument("--name", help="run name (overrides config)")
        sp.add_argument("--output-dir", help="parent of run directories (overrides config)")
        sp.add_argument("--seed", type=int, help="global seed (overrides config)")
        sp.add_argument("--force", action="store_true", help="rerun even if outputs are up to date")
        sp.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
        return sp

    sp = common(sub.add_parser("ingest", help="load train/valid/test quadruple files"))
    sp.add_argument("--data-dir", help="directory with train.txt, valid.txt, test.txt")
    sp.add_argument("--time-format", choices=("iso-date", "index"))
    sp.add_argument("--ids", action="store_true", help="columns are integer ids, not labels")
    sp.add_argument("--allow-empty-split", action="store_true")

    sp = common(sub.add_parser("synth", help="generate a planted-rule synthetic graph"))
    sp.add_argument("--entities", type=int)
    sp.add_argument("--noise", type=float)
    sp.add_argument("--horizon", type=int)

    sp = common(sub.add_parser("init-embeddings", help="describe entities/relations and embed the descriptions"))
    sp.add_argument("--backend", choices=("offline", "remote"))
    sp.add_argument("--allow-fallback", action="store_true", help="use the offline backend if the remote one fails")

    sp = common(sub.add_parser("train-gnn", help="train the temporal GNN (stage I)"))
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--init-mode", choices=("query", "self"))
    sp.add_argument("--aggregate", choices=("mean", "sum"))
    sp.add_argument("--strict-loss", action="store_true", help="fail when a gold entity is unreachable")
    sp.add_argument("--dump-subgraphs", metavar="DIR", help="write per-query subgraphs as JSON lines")

    sp = common(sub.add_parser("extract-paths", help="top-K candidates and backtracked paths (stage II, part 1)"))
    sp.add_argument("--corrupt", type=float, metavar="RATIO", help="corrupt this share of evaluation path steps")

    sp = common(sub.add_parser("edit-paths", help="constrained path editing (stage II, part 2)"))
    sp.add_argument("--editor", choices=("off", "rules", "llm"))
    sp.add_argument("--raw-times", action="store_true", help="calendar dates instead of T<index> in prompts")
    sp.add_argument("--strict-parse", action="store_true", help="fail instead of falling back on bad replies")

    sp = common(sub.add_parser("train-aggregator", help="train the path transformer (stage III)"))
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--finetune-embeddings", action="store_true")
    sp.add_argument("--separate-time-encoders", action="store_true")

    common(sub.add_parser("predict", help="score candidates of the evaluation queries"))

    for name, text in (("evaluate", "Hits@k report for the predictions"), ("ablate", "editor x time-format matrix")):
        sp = common(sub.add_parser(name, help=text))
        sp.add_argument("--metrics", choices=("raw", "filtered", "both"))

    sp = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op and stage")
    sp.add_argument("--seeds", type=int, default=10)
    sp.add_argument("--case", action="append", help="restrict to a named check (repeatable)")
    sp.add_argument("-v", "--verbose", action="store_true")
    return p


def _apply_overrides(cfg: PipelineConfig, args) -> None:
    pairs = [
        ("name", cfg, "name"), ("output_dir", cfg, "output_dir"), ("seed", cfg, "seed"),
        ("data_dir", cfg.data, "directory"), ("time_format", cfg.data, "time_format"),
        ("entities", cfg.synth, "n_entities"), ("noise", cfg.synth, "noise_ratio"), ("horizon", cfg.synth, "horizon"),
        ("backend", cfg.gateway, "backend"), ("init_mode", cfg.model, "init_mode"),
        ("aggregate", cfg.model, "aggregate"), ("editor", cfg.editor, "mode"),
    ]
    for attr, target, field_name in pairs:
        value = getattr(args, attr, None)
        if value is not None:
            setattr(target, field_name, value)
    for attr, target, field_name in (
        ("ids", cfg.data, "ids"), ("allow_empty_split", cfg.data, "allow_empty_split"),
        ("strict_loss", cfg.model, "strict_loss"), ("raw_times", cfg.editor, "raw_times"),
        ("strict_parse", cfg.editor, "strict_parse"), ("finetune_embeddings", cfg.model, "finetune_embeddings"),
        ("separate_time_encoders", cfg.model, "separate_time_encoders"),
    ):
        if getattr(args, attr, False):
            setattr(target, field_name, True)
    epochs = getattr(args, "epochs", None)
    if epochs is not None:
        if args.command == "train-gnn":
            cfg.train.gnn_epochs = epochs
        else:
            cfg.train.aggregator_epochs = epochs


def _command_key(command: str, cfg: PipelineConfig, run: RunDir, args) -> str:
    h = hashlib.sha256()
    h.update(command.encode())
    h.update(cfg.digest().encode())
    extra = {k: v for k, v in sorted(vars(args).items()) if k not in ("force", "verbose", "config")}
    h.update(json.dumps(extra, sort_keys=True, default=str).encode())
    for rel in INPUTS[command]:
        p = run / rel
        h.update(rel.encode() + (_file_hash(p).encode() if p.exists() else b"-"))
    return h.hexdigest()


def main(argv: list[str] | None = None) -> int:
    os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        if args.command == "gradcheck":
            return cmd_gradcheck(args)
        cfg = load_config(args.config)
        _apply_overrides(cfg, args)
        run = RunDir(cfg)
        with run.lock():
            key = _command_key(args.command, cfg, run, args)
            if not args.force and run.up_to_date(args.command, key):
                print(f"{args.command}: up to date")
                return EXIT_OK
            outputs = COMMANDS[args.command](cfg, run, args)
            run.record(args.command, key, outputs)
        return EXIT_OK
    except (ConfigError, UsageError, ParseError, LoadError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DependencyError, TransportError, BackendError, ConsistencyError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except (ag.NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
