"""Command-line entry point: ``eegcond <subcommand> --config run.yaml``.

Every subcommand reads and validates the whole configuration first, echoes
the resolved configuration into the output directory, and stamps each JSON,
CSV and SVG artifact with the configuration hash.

Exit codes: 0 success, 1 runtime failure, 2 configuration or validation
failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .analysis import cluster_report, collect_embeddings, run_tsne, tsne_csv
from .config import ConfigError, RunConfig, echo_config, load_config, parse_bool
from .dataset import (Dataset, DatasetError, SplitSpec, generate_synthetic, load_dataset,
                      save_dataset, split_subjects)
from .models import BACKBONES, load_checkpoint, save_checkpoint
from .plots import bar_svg, scatter_svg
from .preprocess import preprocess_pipeline
from .training import ablation_table, evaluate, split_sets, train, variant_name

log = logging.getLogger("eegcond")

SUBCOMMANDS = ("synth", "preprocess", "train", "eval", "ablate", "embed", "report")


class UsageError(ValueError):
    """Request that cannot be satisfied with the given inputs (exit 2)."""


def _dump_json(path: Path, payload: dict, config_hash: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    body = {"config_hash": config_hash, **payload}
    path.write_text(json.dumps(body, indent=2, sort_keys=True, allow_nan=False) + "\n")


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _raw_dir(cfg: RunConfig) -> Path:
    return cfg.output / "raw"


def _pre_dir(cfg: RunConfig) -> Path:
    return cfg.output / "preprocessed"


def _model_dir(cfg: RunConfig, backbone: str, use_ids: bool) -> Path:
    return cfg.output / "models" / variant_name(backbone, use_ids)


def _load_stage(path: Path, stage: str) -> Dataset:
    ds = load_dataset(path)
    if ds.stage != stage:
        raise UsageError(f"stage mismatch: {path} holds a {ds.stage} dataset, "
                         f"expected {stage}")
    return ds


def _preprocessed(cfg: RunConfig) -> Dataset:
    if (_pre_dir(cfg) / "manifest.json").exists():
        return _load_stage(_pre_dir(cfg), "preprocessed")
    if cfg.dataset["path"]:
        return _load_stage(Path(cfg.dataset["path"]), "preprocessed")
    raise UsageError(f"no preprocessed dataset under {_pre_dir(cfg)}; run preprocess first")


def _split(cfg: RunConfig, ds: Dataset) -> SplitSpec:
    return split_subjects(ds, cfg.dataset["n_unseen"], cfg.seed,
                          cfg.dataset["within_test_fraction"])


def _eval_sets(cfg: RunConfig, ds: Dataset, split: SplitSpec):
    sets = split_sets(ds, split)
    for name in ("train", "within", "unseen"):
        if len(sets[name]) == 0:
            raise UsageError(f"empty split: {name}")
    return sets


def _dominance_groups(rep) -> dict:
    return {g: {s: d["accuracy"] for s, d in by.items()} for g, by in rep.per_dominance.items()}


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(cfg: RunConfig) -> int:
    ds = generate_synthetic(cfg.synthetic)
    save_dataset(ds, _raw_dir(cfg))
    n_events = sum(len(r.events) for r in ds.recordings.values())
    print(f"synth: {len(ds.subjects)} subjects, {ds.n_channels} channels, "
          f"{n_events} events -> {_raw_dir(cfg)}")
    return 0


def cmd_preprocess(cfg: RunConfig) -> int:
    src = Path(cfg.dataset["path"]) if cfg.dataset["path"] else _raw_dir(cfg)
    raw = _load_stage(src, "raw")
    pre = preprocess_pipeline(raw, cfg.preprocess)
    save_dataset(pre, _pre_dir(cfg))
    n_events = sum(len(r.events) for r in raw.recordings.values())
    shape = pre.epochs[0].data.shape if pre.epochs else (pre.n_channels, 0)
    summary = {"n_events": n_events, "n_epochs": len(pre.epochs),
               "n_excluded": n_events - len(pre.epochs),
               "epoch_shape": list(shape),
               "n_degenerate": sum(e.degenerate for e in pre.epochs)}
    _dump_json(_pre_dir(cfg) / "summary.json", summary, cfg.hash())
    print(f"preprocess: {len(pre.epochs)} epochs of {shape[0]}x{shape[1]} "
          f"({summary['n_excluded']} events excluded at recording boundaries)")
    return 0


def _train_one(cfg: RunConfig, ds: Dataset, backbone: str, use_ids: bool, out: Path,
               split: SplitSpec, sets) -> dict:
    h = cfg.hash()
    spec = cfg.model_spec(ds.n_channels, sets["train"].x.shape[-1], backbone, use_ids)
    model, hist = train(spec, sets["train"], cfg.train)
    save_checkpoint(out / "checkpoint.npz", model, step=hist.steps, seed=cfg.seed,
                    extra={"config_hash": h, "split": split.to_dict()})
    _write(out / "history.csv", hist.to_csv(h))
    _dump_json(out / "split.json", split.to_dict(), h)
    rep = evaluate(model, {"within": sets["within"], "unseen": sets["unseen"]}, ds.profiles)
    _dump_json(out / "eval.json", rep.to_dict(), h)
    _write(out / "eval.csv", rep.to_csv(h))
    print(f"train: {variant_name(backbone, use_ids)} stopped after {hist.n_epochs} epochs "
          f"(best {hist.best_epoch}); within {rep.per_split['within']['accuracy']:.4f}, "
          f"unseen {rep.per_split['unseen']['accuracy']:.4f}")
    return {"model": model, "history": hist, "report": rep}


def cmd_train(cfg: RunConfig) -> int:
    ds = _preprocessed(cfg)
    split = _split(cfg, ds)
    sets = _eval_sets(cfg, ds, split)
    backbone, use_ids = cfg.model["backbone"], cfg.model["use_ids"]
    _train_one(cfg, ds, backbone, use_ids, _model_dir(cfg, backbone, use_ids), split, sets)
    return 0


def _load_trained(cfg: RunConfig, backbone: str, use_ids: bool):
    ckpt = _model_dir(cfg, backbone, use_ids) / "checkpoint.npz"
    if not ckpt.exists():
        raise UsageError(f"no checkpoint at {ckpt}; run train first")
    return load_checkpoint(ckpt)


def cmd_eval(cfg: RunConfig) -> int:
    ds = _preprocessed(cfg)
    backbone, use_ids = cfg.model["backbone"], cfg.model["use_ids"]
    model, meta = _load_trained(cfg, backbone, use_ids)
    split = SplitSpec.from_dict(meta["extra"]["split"])
    sets = _eval_sets(cfg, ds, split)
    rep = evaluate(model, {"within": sets["within"], "unseen": sets["unseen"]}, ds.profiles)
    h = cfg.hash()
    out = _model_dir(cfg, backbone, use_ids)
    _dump_json(out / "eval.json", rep.to_dict(), h)
    _write(out / "eval.csv", rep.to_csv(h))
    _write(out / "dominance.svg", bar_svg(_dominance_groups(rep),
                                          f"{variant_name(backbone, use_ids)} by dominance",
                                          desc=f"config_hash {h}"))
    print(f"eval: {variant_name(backbone, use_ids)} overall {rep.accuracy:.4f} "
          f"within {rep.per_split['within']['accuracy']:.4f} "
          f"unseen {rep.per_split['unseen']['accuracy']:.4f}")
    return 0


def cmd_ablate(cfg: RunConfig) -> int:
    ds = _preprocessed(cfg)
    split = _split(cfg, ds)
    _eval_sets(cfg, ds, split)
    kwargs = {k: v for k, v in cfg.model.items()
              if k not in ("backbones", "backbone", "use_ids", "n_channels", "n_times")}
    res = ablation_table(ds, cfg.model["backbones"], cfg.train, split=split, model_kwargs=kwargs)
    h = cfg.hash()
    root = cfg.output / "ablation"
    for name, model in res.models.items():
        save_checkpoint(root / name / "checkpoint.npz", model, step=res.histories[name].steps,
                        seed=cfg.seed, extra={"config_hash": h, "split": split.to_dict()})
        _write(root / name / "history.csv", res.histories[name].to_csv(h))
        _dump_json(root / name / "eval.json", res.reports[name].to_dict(), h)
        _write(root / name / "eval.csv", res.reports[name].to_csv(h))
    _dump_json(root / "table.json", {"rows": res.rows, "deltas": res.deltas,
                                     "split": split.to_dict()}, h)
    _write(root / "table.csv", res.to_csv(h))
    grid = {}
    for r in res.rows:
        for s in ("within", "unseen"):
            grid.setdefault(f"{r['backbone']} {s}", {})[
                "+IDs" if r["use_ids"] else "baseline"] = r[s]
    _write(root / "ablation.svg", bar_svg(grid, "Accuracy with and without profile inputs",
                                          desc=f"config_hash {h}"))
    dom = {}
    for b in cfg.model["backbones"]:
        rep = res.reports[variant_name(b, True)]
        for g, by in _dominance_groups(rep).items():
            for s, v in by.items():
                dom.setdefault(f"{b} {s}", {})[g] = v
    _write(root / "dominance.svg", bar_svg(dom, "+IDs accuracy by dominance group",
                                           desc=f"config_hash {h}"))
    for r in res.rows:
        print(f"ablate: {variant_name(r['backbone'], r['use_ids'])} within {r['within']:.4f} "
              f"unseen {r['unseen']:.4f}")
    return 0


def cmd_embed(cfg: RunConfig) -> int:
    backbone, use_ids = cfg.model["backbone"], cfg.model["use_ids"]
    if not use_ids:
        raise UsageError("embed needs a model trained with profile inputs (use_ids: true)")
    ds = _preprocessed(cfg)
    model, meta = _load_trained(cfg, backbone, True)
    split = SplitSpec.from_dict(meta["extra"]["split"])
    E = collect_embeddings(model, ds.profiles, split.unseen_ids)
    try:
        res = run_tsne(E.rows, cfg.tsne)
    except ValueError as err:
        raise UsageError(f"t-SNE: {err}") from err
    rep = cluster_report(E, cfg.min_size)
    h = cfg.hash()
    root = cfg.output / "embed"
    _write(root / "tsne.csv", tsne_csv(E, res.embedding, h))
    _dump_json(root / "clusters.json", {**rep.to_dict(), "kl_initial": res.kl_initial,
                                        "kl_final": res.kl_final}, h)
    labels = [f"{s}" for s in E.row_ids]
    groups = ["".join(str(int(b)) for b in c) for c in E.codes]
    _write(root / "tsne.svg", scatter_svg(res.embedding, labels, groups, list(E.unseen),
                                          desc=f"config_hash {h}"))
    print(f"embed: {rep.n_observed} observed profile combinations of {rep.n_possible}, "
          f"{rep.n_prominent} prominent; KL {res.kl_initial:.4f} -> {res.kl_final:.4f}")
    return 0


def _fmt(v) -> str:
    return "n/a" if v is None else f"{100 * v:.2f}"


def cmd_report(cfg: RunConfig) -> int:
    root = cfg.output
    lines = ["# Run report", "", f"Configuration hash: `{cfg.hash()}`", ""]

    summary = root / "preprocessed" / "summary.json"
    if summary.exists():
        s = json.loads(summary.read_text())
        lines += ["## Data", "",
                  f"{s['n_epochs']} epochs of shape {s['epoch_shape'][0]} x "
                  f"{s['epoch_shape'][1]}; {s['n_excluded']} events excluded at recording "
                  f"boundaries.", ""]

    table = root / "ablation" / "table.json"
    if table.exists():
        t = json.loads(table.read_text())
        lines += ["## Accuracy (%) with and without profile inputs", "",
                  "| Model | Within-subjects | Unseen-subjects |", "|---|---|---|"]
        for r in t["rows"]:
            name = r["backbone"] + (" +IDs" if r["use_ids"] else "")
            lines.append(f"| {name} | {_fmt(r['within'])} | {_fmt(r['unseen'])} |")
        lines += ["", "| Backbone | Δ within | Δ unseen |", "|---|---|---|"]
        for b, d in t["deltas"].items():
            lines.append(f"| {b} | {_fmt(d['within'])} | {_fmt(d['unseen'])} |")
        lines.append("")
        if (root / "ablation" / "ablation.svg").exists():
            lines += ["![ablation](ablation/ablation.svg)", ""]

    dom_rows = []
    for ev in sorted((root / "ablation").glob("*_ids/eval.json")) + \
            sorted((root / "models").glob("*_ids/eval.json")):
        rep = json.loads(ev.read_text())
        for g, by in sorted(rep["per_dominance"].items()):
            dom_rows.append(f"| {ev.parent.relative_to(root)} | {g} | "
                            f"{_fmt(by.get('within', {}).get('accuracy'))} | "
                            f"{_fmt(by.get('unseen', {}).get('accuracy'))} |")
    if dom_rows:
        lines += ["## Accuracy (%) by sensory dominance, +IDs models", "",
                  "| Model | Group | Within-subjects | Unseen-subjects |",
                  "|---|---|---|---|", *dom_rows, ""]
        if (root / "ablation" / "dominance.svg").exists():
            lines += ["![dominance](ablation/dominance.svg)", ""]

    clusters = root / "embed" / "clusters.json"
    if clusters.exists():
        c = json.loads(clusters.read_text())
        lines += ["## Subject embeddings", "",
                  f"{c['n_observed']} of {c['n_possible']} profile combinations observed, "
                  f"{c['n_prominent']} shared by at least two subjects. "
                  f"KL divergence {c['kl_initial']:.4f} -> {c['kl_final']:.4f}.", ""]
        for sid, code in sorted(c["unseen_nearest"].items()):
            lines.append(f"- unseen {sid}: nearest training combination {code}")
        lines.append("")
        if (root / "embed" / "tsne.svg").exists():
            lines += ["![t-SNE](embed/tsne.svg)", ""]

    if len(lines) == 4:
        lines += ["No artifacts found; run the pipeline subcommands first.", ""]
    _write(root / "report.md", "\n".join(lines))
    print(f"report: {root / 'report.md'}")
    return 0


COMMANDS = {"synth": cmd_synth, "preprocess": cmd_preprocess, "train": cmd_train,
            "eval": cmd_eval, "ablate": cmd_ablate, "embed": cmd_embed, "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="eegcond", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, type=Path, help="YAML run configuration")
        p.add_argument("--seed", type=int, help="global seed")
        p.add_argument("--out", type=Path, help="output directory")
        p.add_argument("--backbone", choices=BACKBONES)
        p.add_argument("--use-ids", dest="use_ids", type=parse_bool, metavar="BOOL")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, flags={"seed": args.seed, "out": args.out,
                                              "backbone": args.backbone,
                                              "use_ids": args.use_ids})
        echo_config(cfg, cfg.output)
        return COMMANDS[args.command](cfg)
    except (ConfigError, DatasetError, UsageError) as err:
        print(f"error: {err}", file=sys.stderr)
        for p in getattr(err, "problems", [])[:20]:
            if str(p) not in str(err):
                print(f"  {p}", file=sys.stderr)
        return 2
    except Exception as err:  # noqa: BLE001 - reported as a runtime failure
        log.debug("runtime failure", exc_info=True)
        print(f"runtime error: {type(err).__name__}: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
