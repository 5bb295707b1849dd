"""``canoe`` command line: ingest, synthesize, rollout, score, train-toy, eval, report.

Every verb reads one JSON run config (``--config``). With the mock backend
each command is a pure function of its inputs, the config and the seeds.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from collections import Counter
from pathlib import Path
from typing import Any, Sequence

from . import __version__, grpo, plotting
from .config import ConfigError, RunConfig
from .evaluation import (
    ContextLookupChecker,
    EvalRecord,
    LLMFactChecker,
    aggregate,
    evaluate,
    overconfidence_report,
    read_records,
    read_tasks,
    write_records,
)
from .grpo import GrpoConfig
from .kg_store import CapacityError, TripleParseError, load_triples
from .mock import lookup_client, policy_client, synthesis_client
from .model_client import API_KEY_ENV, BASE_URL_ENV, ClientError, MockClient, OpenAICompatibleClient
from .rewards import reward_rows, score_group
from .rollout import RolloutGroup, rollout_group
from .synthesizer import LLMCounterfactualSource, TaskType, mix_dataset, prompt_digests, read_dataset, write_dataset
from .toy import STATS_COLUMNS, GradientCheckError, ToyEnv, steps_to_fraction, train

log = logging.getLogger("canoe")

EXIT_OK = 0
EXIT_INPUT = 1
EXIT_GRADIENT = 3
EXIT_BACKEND = 4


class CommandError(RuntimeError):
    def __init__(self, message: str, code: int = EXIT_INPUT):
        super().__init__(message)
        self.code = code


# --------------------------------------------------------------------------- helpers


def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _require(path: Path, what: str) -> Path:
    if not path.is_file():
        raise CommandError(f"{what} not found: {path}")
    return path


def _prepare(path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _write_json(path: Path, data: Any) -> None:
    _prepare(path).write_text(json.dumps(data, indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")


def _write_jsonl(path: Path, rows: Sequence[dict]) -> None:
    with open(_prepare(path), "w", encoding="utf-8", newline="\n") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True, ensure_ascii=False) + "\n")


def _read_jsonl(path: Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _write_csv(path: Path, columns: Sequence[str], rows: Sequence[dict]) -> None:
    with open(_prepare(path), "w", encoding="utf-8", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)


def _sidecar(path: Path, suffix: str) -> Path:
    return path.with_name(f"{path.stem}.{suffix}{path.suffix}")


def _rel(path: Path, base: Path) -> str:
    return os.path.relpath(path, base).replace(os.sep, "/")


def make_client(cfg: RunConfig, role: str, **mock_kwargs):
    """Backend for ``role`` in {synthesis, policy, reference, proxy}."""
    c = cfg.client
    if c.backend == "openai":
        base_url = c.base_url or os.environ.get(BASE_URL_ENV)
        if not base_url:
            raise CommandError(f"backend 'openai' needs client.base_url or ${BASE_URL_ENV}")
        return OpenAICompatibleClient(base_url, os.environ.get(API_KEY_ENV), c.model, timeout=c.timeout,
                                      max_retries=c.max_retries, max_in_flight=c.max_in_flight)
    if role == "synthesis":
        return synthesis_client(mock_kwargs.get("entity_pool", ()), seed=c.mock_seed, max_in_flight=c.max_in_flight)
    if role == "policy":
        return policy_client(seed=c.mock_seed, format_error_rate=c.format_error_rate, max_in_flight=c.max_in_flight)
    if role == "reference":
        return MockClient(seed=c.mock_seed + 1, label="reference", max_in_flight=c.max_in_flight)
    if role == "proxy":
        return lookup_client(mock_kwargs["answers"], seed=c.mock_seed, max_in_flight=c.max_in_flight)
    raise ValueError(f"unknown client role {role!r}")


# --------------------------------------------------------------------------- verbs


def cmd_ingest(cfg: RunConfig, args) -> int:
    path = Path(args.triples) if args.triples else cfg.path("triples")
    _require(path, "triples file")
    store = load_triples(path)
    summary = store.summary()
    summary["rejected_self_loops"] = store.rejected_self_loops
    print(f"ingested {path.name}: {summary['entity_count']} entities, {summary['relation_count']} relations, "
          f"{summary['triple_count']} triples ({summary['rejected_self_loops']} self-loops rejected)")
    if args.summary:
        _write_json(Path(args.summary), summary)
    return EXIT_OK


def _synthesis_manifest(cfg: RunConfig, triples: Path, dataset: Path, manifest: Path, gen, stats) -> dict:
    return {
        "tool_version": __version__,
        "config": cfg.to_dict(),
        "config_dir": _rel(cfg.base_dir, manifest.parent),
        "seeds": {"synthesis": cfg.seeds["synthesis"]},
        "triples": {"path": _rel(triples, manifest.parent), "sha256": _sha256_file(triples)},
        "dataset": {"path": _rel(dataset, manifest.parent), "sha256": _sha256_file(dataset)},
        "prompt_digests": prompt_digests(),
        "client": gen.identity(),
        "stats": stats.as_dict(),
    }


def cmd_synthesize(cfg: RunConfig, args) -> int:
    if args.from_manifest:
        mpath = _require(Path(args.from_manifest), "manifest")
        manifest = json.loads(mpath.read_text(encoding="utf-8"))
        cfg = RunConfig.from_dict(manifest["config"], base_dir=(mpath.parent / manifest["config_dir"]))
        triples = (mpath.parent / manifest["triples"]["path"]).resolve()
        _require(triples, "triples file")
        if _sha256_file(triples) != manifest["triples"]["sha256"]:
            raise CommandError(f"triples file {triples} does not match the manifest digest")
        if manifest["prompt_digests"] != prompt_digests():
            raise CommandError("packaged prompt templates differ from the manifest digests")
    else:
        triples = _require(cfg.path("triples"), "triples file")
    dataset = Path(args.out) if args.out else cfg.path("dataset")
    store = load_triples(triples)
    gen = make_client(cfg, "synthesis", entity_pool=[e.label for e in store.entities.values()])
    cf_source = LLMCounterfactualSource(gen, seed=cfg.seeds["synthesis"], config=cfg.synthesis)
    try:
        samples, stats = mix_dataset(cfg.recipe, store, gen, cf_source, cfg.seeds["synthesis"], cfg.synthesis)
    except CapacityError as exc:
        raise CommandError(f"synthesis failed: {exc}") from exc
    write_dataset(samples, _prepare(dataset))
    manifest_path = _sidecar(dataset, "manifest").with_suffix(".json")
    _write_json(manifest_path, _synthesis_manifest(cfg, triples, dataset, manifest_path, gen, stats))
    counts = ", ".join(f"{k}={v}" for k, v in stats.counts.items())
    print(f"wrote {len(samples)} samples to {dataset.name} ({counts}); rejected: {stats.rejected or 'none'}")
    return EXIT_OK


def _dataset_samples(cfg: RunConfig):
    return read_dataset(_require(cfg.path("dataset"), "dataset"))


def cmd_rollout(cfg: RunConfig, args) -> int:
    samples = _dataset_samples(cfg)
    limit = args.limit if args.limit is not None else cfg.rollout.limit
    # the dataset is already shuffled, so a prefix mixes task types
    samples = samples[:limit] if limit else samples
    gen = make_client(cfg, "policy")
    ref = make_client(cfg, "reference")
    G = cfg.grpo.group_size
    rows, incomplete = [], []
    for s in samples:
        group = rollout_group(gen, s, G=G, temperature=cfg.client.rollout_temperature, seed=cfg.seeds["rollout"],
                              ref=ref, max_tokens=cfg.client.max_tokens, workers=cfg.rollout.workers)
        if group.incomplete:
            incomplete.append({"sample_id": s.id, "errors": group.errors})
            continue
        rows.extend(group.log_rows())
    out = Path(args.out) if args.out else cfg.path("rollouts")
    _write_jsonl(out, rows)
    _write_jsonl(_sidecar(out, "incomplete"), incomplete)
    print(f"wrote {len(rows)} rollouts for {len(samples) - len(incomplete)} samples (G={G}) to {out.name}; "
          f"{len(incomplete)} incomplete groups")
    return EXIT_OK


def _groups_from_rows(rows: Sequence[dict]) -> list[RolloutGroup]:
    by_id: dict[str, list[dict]] = {}
    for r in rows:
        by_id.setdefault(r["sample_id"], []).append(r)
    return [RolloutGroup.from_rows(by_id[k]) for k in by_id]


def cmd_score(cfg: RunConfig, args) -> int:
    samples = {s.id: s for s in _dataset_samples(cfg)}
    src = Path(args.rollouts) if args.rollouts else cfg.path("rollouts")
    groups = _groups_from_rows(_read_jsonl(_require(src, "rollout log")))
    missing = [g.sample_id for g in groups if g.sample_id not in samples]
    if missing:
        raise CommandError(f"rollout log references {len(missing)} samples missing from the dataset, e.g. {missing[0]}")
    proxy = make_client(cfg, "proxy", answers={s.question: s.answer for s in samples.values()})
    rows, unscored = [], []
    for g in groups:
        s = samples[g.sample_id]
        score_group(g, s.question, s.answer, proxy, plain_prompt=cfg.rewards.proxy_plain_prompt)
        if g.incomplete:
            unscored.append({"sample_id": g.sample_id, "errors": g.errors})
            continue
        advantages = grpo.group_advantages([rb.r_final for rb in g.rewards], cfg.grpo.std_floor)
        for row, a in zip(reward_rows(g), advantages):
            rows.append({**row, "task": s.task.value, "advantage": float(a)})
    out = Path(args.out) if args.out else cfg.path("rewards")
    _write_jsonl(out, rows)
    _write_jsonl(_sidecar(out, "unscored"), unscored)
    hist = Counter(r["r_final"] for r in rows)
    print("r_final histogram: " + " ".join(f"{v}:{hist.get(v, 0)}" for v in range(4)))
    print(f"scored {len(rows)} rollouts to {out.name}; {len(unscored)} groups unscored"
          + (": " + ", ".join(u["sample_id"] for u in unscored) if unscored else ""))
    return EXIT_OK


def _toy_env(cfg: RunConfig) -> ToyEnv:
    if cfg.toy.env == "bandit":
        return ToyEnv.bandit()
    samples = sorted(_dataset_samples(cfg), key=lambda s: s.id)[: cfg.toy.n_states]
    if len(samples) < 2:
        raise CommandError("toy env 'dataset' needs at least two dataset samples")
    return ToyEnv.from_items(samples)


def cmd_train_toy(cfg: RunConfig, args) -> int:
    env = _toy_env(cfg)
    beta = args.beta if args.beta is not None else cfg.toy.beta
    gcfg = cfg.grpo if beta is None else GrpoConfig(**{**cfg.grpo.__dict__, "beta": beta})
    steps = args.steps if args.steps is not None else cfg.toy.steps
    out_dir = Path(args.out_dir) if args.out_dir else cfg.path("train_dir")
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        result = train(env, gcfg, steps, seed=cfg.seeds["training"], inner_epochs=cfg.toy.inner_epochs,
                       learning_rate=cfg.toy.learning_rate, grad_check_every=cfg.toy.grad_check_every)
    except GradientCheckError as exc:
        raise CommandError(f"aborted: {exc}", EXIT_GRADIENT) from exc
    _write_csv(out_dir / "stats.csv", STATS_COLUMNS, [{k: repr(v) if isinstance(v, float) else v for k, v in row.items()}
                                                     for row in result.stats])
    (out_dir / "policy.json").write_text(result.policy.to_json() + "\n", encoding="utf-8")
    _write_jsonl(out_dir / "grad_checks.jsonl", result.grad_checks)
    last = result.stats[-1]
    fmt_step = steps_to_fraction(result.stats, "mean_r_format")
    acc_step = steps_to_fraction(result.stats, "mean_r_acc")
    worst = max((c["max_relative_error"] for c in result.grad_checks), default=0.0)
    print(f"final mean r_final {last['mean_reward']:.4f} after {steps} steps (beta={gcfg.beta}); "
          f"mean KL {last['mean_kl']:.4f}; 95% format at step {fmt_step}, accuracy at step {acc_step}; "
          f"{len(result.grad_checks)} gradient checks, max relative error {worst:.2e}")
    return EXIT_OK


def _unfaithful(r: EvalRecord) -> bool:
    return any(r.metrics.get(m) == 0 for m in ("em", "mc", "faith"))


def cmd_eval(cfg: RunConfig, args) -> int:
    tasks_path = Path(args.tasks) if args.tasks else cfg.path("eval_tasks")
    try:
        tasks = read_tasks(_require(tasks_path, "task file"))
    except ValueError as exc:
        raise CommandError(str(exc)) from exc
    gen = make_client(cfg, "policy")
    checker = LLMFactChecker(gen) if cfg.client.backend == "openai" else ContextLookupChecker()
    judge = gen if (args.judge and cfg.client.backend == "openai") else None
    temperature = args.temperature if args.temperature is not None else cfg.client.eval_temperature
    run = evaluate(tasks, gen, checker, judge, temperature=temperature, seed=cfg.seeds["evaluation"],
                   max_tokens=cfg.client.max_tokens, workers=cfg.rollout.workers)
    out = Path(args.out) if args.out else cfg.path("eval_records")
    write_records(run.records, _prepare(out))
    _write_jsonl(_sidecar(out, "unscored"), [{"id": i, "error": e} for i, e in run.unscored])
    print(f"evaluated {len(run.records)} tasks at temperature {temperature}; {len(run.unscored)} unscored"
          + (": " + ", ".join(i for i, _ in run.unscored) if run.unscored else ""))
    if args.overconfidence_k:
        flagged = [r for r in run.records if _unfaithful(r)]
        rep = overconfidence_report(gen, flagged, args.overconfidence_k,
                                    datasets=sorted({t.dataset for t in tasks}))
        report_dir = cfg.path("reports")
        _write_csv(report_dir / "overconfidence.csv", ["dataset", "sample_id", "perplexity"],
                   [{**row, "perplexity": repr(row["perplexity"])} for row in rep.rows()])
        per_ds = {}
        for r, p in rep.selected:
            per_ds.setdefault(r.dataset, []).append(p)
        if per_ds:
            plotting.perplexity_bars({k: sum(v) / len(v) for k, v in per_ds.items()}, _prepare(report_dir / "perplexity.png"))
        mean = rep.mean_perplexity
        print(f"overconfidence: {len(rep.selected)} unfaithful responses selected, mean perplexity "
              f"{'n/a' if mean is None else f'{mean:.3f}'}; shortfalls: {rep.shortfalls or 'none'}")
    return EXIT_OK


def _reward_summary(rows: Sequence[dict]) -> list[dict]:
    groups: dict[str, list[dict]] = {}
    for r in rows:
        groups.setdefault(r.get("task", "all"), []).append(r)
    out = []
    for name in [t.value for t in TaskType if t.value in groups] + sorted(set(groups) - {t.value for t in TaskType}):
        g = groups[name]
        out.append({"task": name, "n": len(g),
                    **{k: f"{sum(r[k] for r in g) / len(g):.4f}" for k in ("r_acc", "r_proxy", "r_format", "r_final")}})
    return out


def cmd_report(cfg: RunConfig, args) -> int:
    eval_path = Path(args.eval_records) if args.eval_records else cfg.path("eval_records")
    rewards_path = Path(args.rewards) if args.rewards else cfg.path("rewards")
    stats_path = Path(args.stats) if args.stats else cfg.path("train_dir") / "stats.csv"
    records = read_records(eval_path) if eval_path.is_file() else []
    reward_rows_ = _read_jsonl(rewards_path) if rewards_path.is_file() else []
    if not records and not reward_rows_:
        raise CommandError("no scored records")
    out_dir = Path(args.out_dir) if args.out_dir else cfg.path("reports")
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    if records:
        rep = aggregate(records)
        (out_dir / "report.csv").write_text(rep.to_csv(), encoding="utf-8")
        (out_dir / "report.txt").write_text(rep.to_table(), encoding="utf-8")
        plotting.dataset_bars(rep.rows, out_dir / "datasets.png")
        written += ["report.csv", "report.txt", "datasets.png"]
        sys.stdout.write(rep.to_table())
    if reward_rows_:
        summary = _reward_summary(reward_rows_)
        _write_csv(out_dir / "rewards_summary.csv", ["task", "n", "r_acc", "r_proxy", "r_format", "r_final"], summary)
        hist = Counter(int(r["r_final"]) for r in reward_rows_)
        _write_csv(out_dir / "reward_histogram.csv", ["r_final", "count"],
                   [{"r_final": v, "count": hist.get(v, 0)} for v in range(4)])
        plotting.reward_histogram(hist, out_dir / "reward_histogram.png")
        written += ["rewards_summary.csv", "reward_histogram.csv", "reward_histogram.png"]
        for row in summary:
            print(f"{row['task']:<18} n={row['n']:<5} r_acc={row['r_acc']} r_proxy={row['r_proxy']} "
                  f"r_format={row['r_format']} r_final={row['r_final']}")
    if stats_path.is_file():
        with open(stats_path, encoding="utf-8") as fh:
            stats = [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]
        if stats:
            plotting.training_curves(stats, out_dir / "training_curves.png")
            written.append("training_curves.png")
    print(f"wrote {', '.join(written)} to {out_dir}")
    return EXIT_OK


def cmd_init(cfg_path: Path, scale: int) -> int:
    if cfg_path.exists():
        raise CommandError(f"refusing to overwrite {cfg_path}")
    cfg = RunConfig(seeds={k: 0 for k in ("synthesis", "rollout", "training", "evaluation")})
    data = cfg.to_dict()
    if scale > 1:
        data["recipe"] = {k: v // scale for k, v in data["recipe"].items()}
    _write_json(cfg_path, data)
    print(f"wrote default config to {cfg_path}")
    return EXIT_OK


# --------------------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="canoe", description="Context-faithfulness RL pipeline (desk scale).")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = ap.add_subparsers(dest="verb", required=True)

    def verb(name: str, help_: str, needs_config: bool = True):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", "-c", required=needs_config, help="run config JSON")
        return p

    p = sub.add_parser("init", help="write a default run config")
    p.add_argument("path")
    p.add_argument("--scale", type=int, default=1, help="divide the recipe counts by this factor")

    p = verb("ingest", "load and validate a triple TSV", needs_config=False)
    p.add_argument("triples", nargs="?", help="TSV path (defaults to paths.triples)")
    p.add_argument("--summary", help="also write the summary JSON here")

    p = verb("synthesize", "build the QA dataset")
    p.add_argument("--out")
    p.add_argument("--from-manifest", help="re-run the synthesis recorded in a manifest")

    p = verb("rollout", "sample G responses per dataset sample")
    p.add_argument("--limit", type=int)
    p.add_argument("--out")

    p = verb("score", "compute rewards and advantages for a rollout log")
    p.add_argument("--rollouts")
    p.add_argument("--out")

    p = verb("train-toy", "run GRPO on the toy softmax policy")
    p.add_argument("--steps", type=int)
    p.add_argument("--beta", type=float)
    p.add_argument("--out-dir")

    p = verb("eval", "generate and score responses on a task file")
    p.add_argument("--tasks")
    p.add_argument("--temperature", type=float, help="sampling temperature (default 0.7 via config)")
    p.add_argument("--judge", action="store_true", help="also collect 1-5 quality ratings (HTTP backend only)")
    p.add_argument("--overconfidence-k", type=int, default=0, help="per-dataset top-k perplexity selection")
    p.add_argument("--out")

    p = verb("report", "aggregate scored records into CSV, tables and figures")
    p.add_argument("--eval-records")
    p.add_argument("--rewards")
    p.add_argument("--stats")
    p.add_argument("--out-dir")
    return ap


COMMANDS = {
    "ingest": cmd_ingest,
    "synthesize": cmd_synthesize,
    "rollout": cmd_rollout,
    "score": cmd_score,
    "train-toy": cmd_train_toy,
    "eval": cmd_eval,
    "report": cmd_report,
}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        if args.verb == "init":
            return cmd_init(Path(args.path), args.scale)
        if args.config:
            cfg = RunConfig.load(args.config)
        elif args.verb == "ingest" and args.triples:
            cfg = RunConfig(seeds={k: 0 for k in ("synthesis", "rollout", "training", "evaluation")})
        else:
            raise CommandError("--config is required")
        return COMMANDS[args.verb](cfg, args)
    except CommandError as exc:
        print(f"canoe {args.verb}: error: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigError, TripleParseError, CapacityError) as exc:
        print(f"canoe {args.verb}: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ClientError as exc:
        print(f"canoe {args.verb}: backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND


if __name__ == "__main__":
    sys.exit(main())
