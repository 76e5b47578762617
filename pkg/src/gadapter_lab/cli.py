"""Command-line harness for the fine-tuning laboratory.

Subcommands (all driven by one JSON config document):

    gendata    synthesize a structure-labeled dataset (JSON-lines)
    split      slice a dataset into train/val/test files
    pretrain   masked-node pretraining of the shared backbone
    finetune   run every (method spec x seed); results.csv + delta ckpts
    ablate     insertion-point and component sweep of the structure block
    diagnose   feature-shift histograms and JS divergence vs full fine-tune
    profile    latency / checkpoint-size / trainable-ratio table
    report     aggregate results over seeds; summary.csv + summary.svg

Usage: `gadapter-lab <subcommand> --config <path> [--out <dir>] [--jobs N]
[--seed-offset K]`. Exit code 0 on success; contract violations print a
reason to stderr and exit 1. GADAPTER_LOG=debug|info|warning sets log
verbosity.

Determinism contract: every CSV artifact embeds the config digest and is
byte-identical across re-runs of the same config. Wall-clock measurements
are inherently unrepeatable, so they live in sidecar files (timings.csv,
profile_timings.csv) that are excluded from the byte-identical guarantee
exactly like the SVG plots; the deterministic CSVs are the source of
truth. A --seed-offset changes the digest (it changes the experiment), so
offset runs belong in their own --out directory.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

from .config import ExperimentConfig, load_config
from .data import GraphDataset, gen_data, read_jsonl, split, write_jsonl
from .diagnostics import (
    build_histogram,
    extract_features,
    js_divergence,
    load_checkpoint,
    profile,
    save_checkpoint,
    shared_edges,
)
from .errors import CheckpointError, ConfigError, DataError
from .model import Model, pretrain_masked_nodes
from .peft import PeftSpec, instrument, trainable_ratio
from .reports import SUMMARY_FIELDS, read_csv, summarize, svg_bars, svg_overlay, write_csv
from .training import evaluate, fit, metric_is_higher_better

log = logging.getLogger("gadapter_lab.cli")

RESULT_FIELDS = ["method", "structure", "insertion", "r", "gamma", "seed", "metric", "best_epoch"]

# The structure-block sweep: its default placement plus the five
# alternatives, then one component removed at a time.
ABLATE_VARIANTS = (
    ("baseline", {}),
    ("pre_mha", {"insertion": "pre_mha"}),
    ("post_mha", {"insertion": "post_mha"}),
    ("pre_ffn", {"insertion": "pre_ffn"}),
    ("post_ffn", {"insertion": "post_ffn"}),
    ("mha_and_ffn", {"insertion": "mha_and_ffn"}),
    ("no_S", {"no_S": True}),
    ("no_pre_ln", {"no_pre_ln": True}),
    ("no_post_ln", {"no_post_ln": True}),
    ("no_ln", {"no_pre_ln": True, "no_post_ln": True}),
    ("no_act", {"no_act": True}),
    ("no_breg", {"no_breg": True}),
)


# ---------------------------------------------------------------------------
# Shared plumbing.


def _manifest_path(cfg: ExperimentConfig) -> Path:
    return cfg.out / "manifest.json"


def _load_manifest(cfg: ExperimentConfig) -> dict:
    path = _manifest_path(cfg)
    if not path.exists():
        return {"config_digest": cfg.digest, "artifacts": []}
    manifest = json.loads(path.read_text())
    stored = manifest.get("config_digest", "?")
    if stored != cfg.digest:
        raise ConfigError(
            f"output directory {cfg.out} holds artifacts from config digest {stored[:12]}..., "
            f"but the current config digest is {cfg.digest[:12]}...; use a fresh --out"
        )
    return manifest


def _note_artifacts(cfg: ExperimentConfig, *artifacts, **extra) -> None:
    manifest = _load_manifest(cfg)
    manifest.update(extra)
    names = set(manifest["artifacts"])
    names.update(str(a) for a in artifacts)
    manifest["artifacts"] = sorted(names)
    cfg.out.mkdir(parents=True, exist_ok=True)
    _manifest_path(cfg).write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")


def _dataset(cfg: ExperimentConfig, path, model_cfg, s_peft_kind: str | None) -> GraphDataset:
    s = cfg.structure
    return GraphDataset(
        read_jsonl(path),
        model_cfg,
        s_bias_kind=s["s_bias"] if model_cfg.use_structure_bias else None,
        s_peft_kind=s_peft_kind,
        alpha=s["alpha"],
        beta=s["beta"],
        unreachable=s["unreachable"],
    )


def _check_head_fits_task(model_cfg, dataset) -> None:
    want = "regression" if dataset.task == "reg" else "binary_classification"
    if model_cfg.head_type != want:
        raise ConfigError(f"model head_type {model_cfg.head_type!r} does not fit task {dataset.task!r} (need {want!r})")


def _pretrain_digest(cfg: ExperimentConfig) -> str:
    return cfg.section_digest("model", "pretrain", "data", "structure")


def _require_backbone(cfg: ExperimentConfig) -> Path:
    path = cfg.out / "backbone.ckpt"
    if not path.exists():
        raise ConfigError(f"no pretrained backbone at {path}; run the pretrain subcommand first")
    manifest = _load_manifest(cfg)
    if manifest.get("pretrain_digest") != _pretrain_digest(cfg):
        raise ConfigError(
            "config digest mismatch: backbone.ckpt was pretrained under a different model/pretrain/data configuration"
        )
    return path


def _slug(prefix: str, spec: PeftSpec, seed: int) -> str:
    parts = [prefix, spec.method]
    if spec.uses_structure:
        parts.append(spec.structure)
    if spec.resolved_insertion:
        parts.append(spec.resolved_insertion)
    if spec.method not in ("full", "bitfit"):
        parts.append(f"r{spec.r}")
    parts.extend(f for f in ("no_S", "no_pre_ln", "no_post_ln", "no_act", "no_breg") if getattr(spec, f))
    parts.append(f"seed{seed}")
    return "-".join(parts)


def _spec_columns(spec: PeftSpec) -> dict:
    return {
        "method": spec.method,
        "structure": spec.structure if spec.uses_structure else "none",
        "insertion": spec.resolved_insertion or "none",
        "r": "-" if spec.method in ("full", "bitfit") else spec.r,
    }


def _best_epoch(history: list[dict], metric: str) -> int:
    higher = metric_is_higher_better(metric)
    best, best_epoch = None, -1
    for row in history:
        value = row["eval_metric"]
        if best is None or (value > best if higher else value < best):
            best, best_epoch = value, row["epoch"]
    return best_epoch


def _rebuild_from_checkpoints(cfg: ExperimentConfig, delta_path: Path) -> Model:
    model = Model(replace(cfg.model_config, head_type="masked_node"))
    load_checkpoint((cfg.out / "backbone.ckpt").read_bytes(), model)
    load_checkpoint(delta_path.read_bytes(), model)
    return model


def _run_one(payload: dict) -> dict:
    """One (spec, seed) fine-tuning run. Top-level so worker pools can pickle it."""
    cfg = ExperimentConfig(payload["config"])
    spec = PeftSpec(**payload["spec"])
    seed = payload["seed"]
    log.info("run %s starting", payload["slug"])

    # The pretrained backbone is shared; the run seed moves the trainable
    # initialization (task head + method parameters) and the batch order.
    base_cfg = replace(cfg.model_config, head_type="masked_node", seed=cfg.model_config.seed + seed)
    model = Model(base_cfg)
    load_checkpoint((cfg.out / "backbone.ckpt").read_bytes(), model)
    model.reset_head(cfg.model_config.head_type)
    mask = instrument(model, spec)

    s_peft = spec.structure if spec.uses_structure else None
    train_ds = _dataset(cfg, cfg.data["train"], model.config, s_peft)
    val_ds = _dataset(cfg, cfg.data["val"], model.config, s_peft)
    test_ds = _dataset(cfg, cfg.data["test"], model.config, s_peft)
    _check_head_fits_task(model.config, train_ds)

    mu = 0.0 if spec.no_breg else cfg.train_config.mu
    train_cfg = replace(cfg.train_config, seed=seed, mu=mu)
    started = time.perf_counter()
    state = fit(model, mask, train_ds, val_ds, train_cfg)
    wall = time.perf_counter() - started
    test_metric = evaluate(model, test_ds, train_cfg.eval_metric)

    run_dir = cfg.out / "runs" / payload["slug"]
    write_csv(run_dir / "history.csv", ["epoch", "train_loss", "eval_metric"], state.history, cfg.digest)
    (run_dir / "delta.ckpt").write_bytes(save_checkpoint(model, mask=mask, kind="delta"))
    row = {
        **_spec_columns(spec),
        "gamma": trainable_ratio(model),
        "seed": seed,
        "metric": test_metric,
        "best_epoch": _best_epoch(state.history, train_cfg.eval_metric),
    }
    log.info("run %s done: metric=%.4f", payload["slug"], test_metric)
    return {"slug": payload["slug"], "row": row, "wall_seconds": wall}


def _run_matrix(cfg: ExperimentConfig, specs_with_slugs: list[tuple[PeftSpec, str, int]], jobs: int) -> list[dict]:
    payloads = [
        {"config": cfg.payload, "spec": dataclasses.asdict(spec), "seed": seed, "slug": slug}
        for spec, slug, seed in specs_with_slugs
    ]
    if jobs <= 1:
        return [_run_one(p) for p in payloads]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_one, payloads))


# ---------------------------------------------------------------------------
# Subcommands.


def cmd_gendata(cfg: ExperimentConfig, jobs: int = 1) -> None:
    cfg.require("gendata")
    g = cfg.gendata
    for key in ("kind", "count", "path"):
        if key not in g:
            raise ConfigError(f"gendata section needs {key!r}")
    graphs = gen_data(
        g["kind"],
        g["count"],
        n_range=tuple(g.get("n_range", (6, 16))),
        seed=g.get("seed", 0),
        vocab=g.get("vocab", 16),
        diameter_threshold=g.get("diameter_threshold", 3),
    )
    write_jsonl(graphs, g["path"])
    _note_artifacts(cfg, g["path"])
    log.info("wrote %d graphs to %s", len(graphs), g["path"])


def cmd_split(cfg: ExperimentConfig, jobs: int = 1) -> None:
    cfg.require("split", "data")
    s = cfg.split
    if "source" not in s:
        raise ConfigError("split section needs 'source'")
    graphs = read_jsonl(s["source"])
    parts = split(graphs, ratios=tuple(s.get("ratios", (0.8, 0.1, 0.1))), seed=s.get("seed", 0))
    for name, part in zip(("train", "val", "test"), parts):
        write_jsonl(part, cfg.data[name])
        log.info("wrote %d graphs to %s", len(part), cfg.data[name])
    _note_artifacts(cfg, *(cfg.data[n] for n in ("train", "val", "test")))


def cmd_pretrain(cfg: ExperimentConfig, jobs: int = 1) -> None:
    cfg.require("model", "pretrain", "data")
    _load_manifest(cfg)  # digest consistency before any work
    model_cfg = replace(cfg.model_config, head_type="masked_node")
    dataset = _dataset(cfg, cfg.data["train"], model_cfg, None)
    model = Model(model_cfg)
    _, history = pretrain_masked_nodes(model, dataset, cfg.pretrain_config)
    (cfg.out / "backbone.ckpt").parent.mkdir(parents=True, exist_ok=True)
    (cfg.out / "backbone.ckpt").write_bytes(save_checkpoint(model, kind="full"))
    write_csv(cfg.out / "pretrain_history.csv", ["epoch", "train_loss"], history, cfg.digest)
    _note_artifacts(cfg, "backbone.ckpt", "pretrain_history.csv", pretrain_digest=_pretrain_digest(cfg))
    log.info("pretrained %d epochs; backbone at %s", len(history), cfg.out / "backbone.ckpt")


def cmd_finetune(cfg: ExperimentConfig, jobs: int = 1) -> None:
    cfg.require("model", "train", "peft", "seeds", "data")
    _require_backbone(cfg)
    matrix = [
        (spec, _slug(f"s{idx:02d}", spec, seed), seed)
        for idx, spec in enumerate(cfg.peft_specs)
        for seed in cfg.seeds
    ]
    outcomes = _run_matrix(cfg, matrix, jobs)
    write_csv(cfg.out / "results.csv", RESULT_FIELDS, [o["row"] for o in outcomes], cfg.digest)
    timing_rows = [{"run": o["slug"], "wall_seconds": o["wall_seconds"]} for o in outcomes]
    write_csv(cfg.out / "timings.csv", ["run", "wall_seconds"], timing_rows, cfg.digest)
    _note_artifacts(cfg, "results.csv", "timings.csv", *(f"runs/{o['slug']}" for o in outcomes))
    log.info("finetune matrix complete: %d runs", len(outcomes))


def cmd_ablate(cfg: ExperimentConfig, jobs: int = 1) -> None:
    cfg.require("model", "train", "seeds", "data")
    _require_backbone(cfg)
    base = cfg.ablate or {}
    matrix, variants = [], []
    for variant, overrides in ABLATE_VARIANTS:
        spec = PeftSpec(method="gadapter", r=base.get("r", 4), structure=base.get("structure", "S1"), **overrides)
        for seed in cfg.seeds:
            matrix.append((spec, f"ablate-{variant}-seed{seed}", seed))
            variants.append(variant)
    outcomes = _run_matrix(cfg, matrix, jobs)
    rows = [{"variant": v, **o["row"]} for v, o in zip(variants, outcomes)]
    write_csv(cfg.out / "ablate.csv", ["variant", *RESULT_FIELDS], rows, cfg.digest)
    timing_rows = [{"run": o["slug"], "wall_seconds": o["wall_seconds"]} for o in outcomes]
    write_csv(cfg.out / "ablate_timings.csv", ["run", "wall_seconds"], timing_rows, cfg.digest)
    _note_artifacts(cfg, "ablate.csv", "ablate_timings.csv", *(f"runs/{o['slug']}" for o in outcomes))
    log.info("ablation sweep complete: %d runs", len(outcomes))


def _diagnose_labels(cfg: ExperimentConfig) -> list[tuple[str, PeftSpec, str]]:
    """(label, spec, finetune slug for the first seed) per configured method."""
    seed = cfg.seeds[0]
    out = []
    for idx, spec in enumerate(cfg.peft_specs):
        label = _slug(f"s{idx:02d}", spec, seed).rsplit("-seed", 1)[0]
        out.append((label, spec, _slug(f"s{idx:02d}", spec, seed)))
    return out


def cmd_diagnose(cfg: ExperimentConfig, jobs: int = 1) -> None:
    cfg.require("model", "train", "peft", "seeds", "data")
    _require_backbone(cfg)
    entries = _diagnose_labels(cfg)
    full_label = next((label for label, spec, _ in entries if spec.method == "full"), None)
    if full_label is None:
        raise ConfigError("diagnose needs a 'full' method spec to compare against")

    features = {}
    for label, spec, slug in entries:
        delta_path = cfg.out / "runs" / slug / "delta.ckpt"
        if not delta_path.exists():
            raise ConfigError(f"missing fine-tuned checkpoint {delta_path}; run finetune first")
        model = _rebuild_from_checkpoints(cfg, delta_path)
        s_peft = spec.structure if spec.uses_structure else None
        test_ds = _dataset(cfg, cfg.data["test"], model.config, s_peft)
        features[label] = extract_features(model, test_ds)

    bins, eps = cfg.report["bins"], cfg.report["eps"]
    pooled = [s for label in features for s in features[label]]
    edges = shared_edges(pooled, pooled, bins=bins)
    hists = {label: build_histogram(samples, bins=bins, eps=eps, edges=edges) for label, samples in features.items()}

    js_rows, hist_rows, series = [], [], []
    for label, spec, _ in entries:
        js_rows.append(
            {"label": label, **_spec_columns(spec), "js_vs_full": js_divergence(hists[label], hists[full_label])}
        )
        series.append((label, list(hists[label].probs)))
        for b in range(bins):
            hist_rows.append(
                {
                    "method": label,
                    "bin": b,
                    "lo": float(edges[b]),
                    "hi": float(edges[b + 1]),
                    "prob": float(hists[label].probs[b]),
                }
            )
    write_csv(cfg.out / "js_divergence.csv", ["label", *RESULT_FIELDS[:4], "js_vs_full"], js_rows, cfg.digest)
    write_csv(cfg.out / "histograms.csv", ["method", "bin", "lo", "hi", "prob"], hist_rows, cfg.digest)
    svg_overlay(cfg.out / "overlay.svg", "Pooled feature distributions", edges, series, cfg.digest)
    _note_artifacts(cfg, "js_divergence.csv", "histograms.csv", "overlay.svg")
    log.info("diagnose complete over %d methods", len(entries))


def cmd_profile(cfg: ExperimentConfig, jobs: int = 1) -> None:
    cfg.require("model", "peft", "seeds", "data")
    _require_backbone(cfg)
    rows, timing_rows = [], []
    for label, spec, slug in _diagnose_labels(cfg):
        delta_path = cfg.out / "runs" / slug / "delta.ckpt"
        if not delta_path.exists():
            raise ConfigError(f"missing fine-tuned checkpoint {delta_path}; run finetune first")
        model = _rebuild_from_checkpoints(cfg, delta_path)
        s_peft = spec.structure if spec.uses_structure else None
        test_ds = _dataset(cfg, cfg.data["test"], model.config, s_peft)
        measured = profile(model, test_ds, passes=cfg.report["profile_passes"])
        rows.append(
            {
                "label": label,
                **_spec_columns(spec),
                "gamma": measured["gamma"],
                "checkpoint_bytes_full": measured["checkpoint_bytes_full"],
                "checkpoint_bytes_delta": measured["checkpoint_bytes_delta"],
            }
        )
        timing_rows.append({"run": label, "ms_per_sample": measured["ms_per_sample"]})
    fields = ["label", *RESULT_FIELDS[:4], "gamma", "checkpoint_bytes_full", "checkpoint_bytes_delta"]
    write_csv(cfg.out / "profile.csv", fields, rows, cfg.digest)
    write_csv(cfg.out / "profile_timings.csv", ["run", "ms_per_sample"], timing_rows, cfg.digest)
    _note_artifacts(cfg, "profile.csv", "profile_timings.csv")
    log.info("profiled %d methods", len(rows))


def cmd_report(cfg: ExperimentConfig, jobs: int = 1) -> None:
    cfg.require("train")
    results_path = cfg.out / "results.csv"
    if not results_path.exists():
        raise ConfigError(f"no results at {results_path}; run finetune first")
    _load_manifest(cfg)
    metric_name = cfg.train_config.eval_metric
    _, _, rows = read_csv(results_path)
    summary = summarize(rows, metric_name)
    write_csv(cfg.out / "summary.csv", SUMMARY_FIELDS, summary, cfg.digest)
    labels = ["/".join(str(row[k]) for k in ("method", "structure", "insertion", "r")) for row in summary]
    svg_bars(cfg.out / "summary.svg", f"Mean test {metric_name} over seeds", labels,
             [row["mean_metric"] for row in summary], cfg.digest)
    artifacts = ["summary.csv", "summary.svg"]

    ablate_path = cfg.out / "ablate.csv"
    if ablate_path.exists():
        _, _, ab_rows = read_csv(ablate_path)
        grouped: dict[str, list[float]] = {}
        for row in ab_rows:
            grouped.setdefault(row["variant"], []).append(float(row["metric"]))
        sign = 1.0 if metric_is_higher_better(metric_name) else -1.0
        base_mean = sum(grouped["baseline"]) / len(grouped["baseline"]) if "baseline" in grouped else None
        ab_summary = []
        for variant, values in grouped.items():
            mean = sum(values) / len(values)
            gap = "-" if base_mean is None else sign * (mean - base_mean)
            std = 0.0
            if len(values) > 1:
                std = (sum((v - mean) ** 2 for v in values) / (len(values) - 1)) ** 0.5
            ab_summary.append(
                {"variant": variant, "n_seeds": len(values), "mean_metric": mean, "std_metric": std,
                 "gap_vs_baseline": gap}
            )
        write_csv(cfg.out / "ablate_summary.csv",
                  ["variant", "n_seeds", "mean_metric", "std_metric", "gap_vs_baseline"], ab_summary, cfg.digest)
        artifacts.append("ablate_summary.csv")
    _note_artifacts(cfg, *artifacts)
    log.info("report written to %s", cfg.out / "summary.csv")


COMMANDS = {
    "gendata": cmd_gendata,
    "split": cmd_split,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "ablate": cmd_ablate,
    "diagnose": cmd_diagnose,
    "profile": cmd_profile,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="gadapter-lab",
        description="Desk-scale laboratory for structure-aware parameter-efficient fine-tuning.",
    )
    parser.add_argument("subcommand", choices=list(COMMANDS))
    parser.add_argument("--config", required=True, help="experiment JSON document")
    parser.add_argument("--out", default=None, help="override the config's output directory")
    parser.add_argument("--jobs", type=int, default=1, help="parallel worker processes for run matrices")
    parser.add_argument("--seed-offset", type=int, default=0, help="shift every configured seed by K")
    args = parser.parse_args(argv)

    level = os.environ.get("GADAPTER_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")

    try:
        cfg = load_config(args.config, out_override=args.out, seed_offset=args.seed_offset)
        COMMANDS[args.subcommand](cfg, jobs=args.jobs)
        return 0
    except (ConfigError, DataError, CheckpointError, FileNotFoundError, FloatingPointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
