"""Command-line entry point.

Configuration is a flat ``key=value`` text file with dotted section
prefixes (``data.seed=1``); command-line ``key=value`` overrides win over
file values.  Unknown keys are rejected.  Every command writes its outputs
under a fresh run directory together with the fully resolved config.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import attribution, harness, synthdata
from .model import FusionModel, ModelConfig, load_checkpoint, save_checkpoint
from .harness import EXPERT_LABEL_INDEX
from .interaction import SetFunctionProbe, build_universe, score_pair
from .training import TrainConfig, TrainLog, train

DEFAULTS: dict[str, object] = {
    "run.root": "runs",
    "run.workers": 0,                # 0 = auto; execution is sequential today
    # data generation
    "data.seed": 5,
    "data.n_train": 8000,
    "data.n_val": 1000,
    "data.n_test": 1000,
    "data.t_a": 16,
    "data.t_b": 16,
    "data.vocab_a": 64,
    "data.vocab_b": 64,
    "data.noise_rate": 0.05,
    # model / training
    "model.d": 32,
    "model.d_raw": 48,
    "model.layers": 2,
    "model.heads": 4,
    "model.mlp_ratio": 2,
    "model.flavor": "moe",
    "model.seed": 0,
    "train.lr": 1e-3,
    "train.batch_size": 64,
    "train.epochs": 15,
    "train.lambda_int": 0.5,
    "train.tau": 1.0,
    "train.seed": 0,
    "train.early_stop_acc": 0.95,
    "train.dataset_dir": "",
    # shared inputs for analysis commands
    "analysis.checkpoint": "",
    "analysis.dataset_dir": "",
    # attribution export
    "attr.method": "grad_attnroll",
    "attr.expert": "",
    "attr.ig_steps": 64,
    "attr.max_samples": 16,
    # faithfulness sweep
    "faith.methods": "random,attnroll,ig,grad_attnroll",
    "faith.ks": "5,10,15,20,25,30",
    "faith.seeds": "0,1,2",
    "faith.metric": "micro_f1",
    "faith.max_samples": 128,
    "faith.ig_steps": 32,
    # bin alignment
    "bins.mc_samples": 4,
    "bins.qs": "5,10,20",
    "bins.seed": 0,
    "bins.max_samples": 32,
    # pair masking
    "pairs.expert": "synergy",
    "pairs.budget": 0.05,
    "pairs.seeds": "0,1,2,3,4",
    "pairs.mc_samples": 8,
    "pairs.pool_fraction": 0.10,
    "pairs.max_samples": 64,
    "pairs.metric": "micro_f1",
    # raw interaction report
    "interact.expert": "synergy",
    "interact.rho": 0.3,
    "interact.mc_samples": 64,
    "interact.max_samples": 8,
    "interact.seed": 0,
    "interact.scope": "universe",
}

COMMANDS = ("gen-data", "train", "attribute", "faithfulness", "bins",
            "pair-mask", "interactions", "report")


class ConfigError(ValueError):
    pass


def _coerce(key: str, raw: str):
    default = DEFAULTS[key]
    if isinstance(default, bool):
        return raw.lower() in ("1", "true", "yes")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def load_config(path: str | None, overrides: list[str]) -> dict:
    cfg = dict(DEFAULTS)
    pairs: list[tuple[str, str]] = []
    if path:
        with open(path, "r", encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}:{line_no}: expected key=value")
                k, v = line.split("=", 1)
                pairs.append((k.strip(), v.strip()))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        pairs.append((k.strip(), v.strip()))
    for k, v in pairs:
        if k not in DEFAULTS:
            raise ConfigError(f"unknown config key {k!r}")
        cfg[k] = _coerce(k, v)
    return cfg


def _int_list(raw: str) -> list[int]:
    return [int(x) for x in str(raw).split(",") if x.strip() != ""]


def make_run_dir(cfg: dict, command: str, seed: int) -> Path:
    root = os.environ.get("FUSIONLENS_RUN_ROOT", str(cfg["run.root"]))
    stamp = time.strftime("%Y%m%d-%H%M%S")
    base = Path(root) / f"{command}-{stamp}-seed{seed}"
    run_dir = base
    suffix = 1
    while run_dir.exists():
        run_dir = Path(f"{base}-{suffix}")
        suffix += 1
    run_dir.mkdir(parents=True)
    with open(run_dir / "config_resolved.txt", "w", encoding="utf-8") as fh:
        for k in sorted(cfg):
            fh.write(f"{k}={cfg[k]}\n")
    return run_dir


def _load_dataset(dataset_dir: str, split: str) -> list[synthdata.Sample]:
    path = Path(dataset_dir) / f"{split}.jsonl"
    if not path.exists():
        raise FileNotFoundError(f"dataset split not found: {path}")
    return synthdata.read_dataset(path)


def _build_model_from_cfg(cfg: dict) -> FusionModel:
    return FusionModel(ModelConfig(
        d=cfg["model.d"], d_raw=cfg["model.d_raw"], layers=cfg["model.layers"],
        heads=cfg["model.heads"], mlp_ratio=cfg["model.mlp_ratio"],
        tau=cfg["train.tau"], flavor=cfg["model.flavor"], seed=cfg["model.seed"],
        vocab_a=cfg["data.vocab_a"], vocab_b=cfg["data.vocab_b"],
    ))


def _load_model(cfg: dict) -> FusionModel:
    path = cfg["analysis.checkpoint"]
    if not path:
        raise ConfigError("analysis.checkpoint is required for this command")
    return load_checkpoint(path)


def cmd_gen_data(cfg: dict, run_dir: Path) -> None:
    for i, (split, n) in enumerate([("train", cfg["data.n_train"]),
                                    ("val", cfg["data.n_val"]),
                                    ("test", cfg["data.n_test"])]):
        spec = synthdata.GenSpec(
            seed=cfg["data.seed"] * 3 + i, n_samples=n,
            t_a=cfg["data.t_a"], t_b=cfg["data.t_b"],
            vocab_a=cfg["data.vocab_a"], vocab_b=cfg["data.vocab_b"],
            noise_rate=cfg["data.noise_rate"],
        )
        synthdata.write_dataset(synthdata.generate(spec), run_dir / f"{split}.jsonl")
    print(f"wrote dataset splits to {run_dir}")


def cmd_train(cfg: dict, run_dir: Path) -> None:
    dataset_dir = cfg["train.dataset_dir"] or cfg["analysis.dataset_dir"]
    if not dataset_dir:
        raise ConfigError("train.dataset_dir is required")
    model = _build_model_from_cfg(cfg)
    train_seq = model.encode_samples(_load_dataset(dataset_dir, "train"))
    val_seq = model.encode_samples(_load_dataset(dataset_dir, "val"))
    tcfg = TrainConfig(lr=cfg["train.lr"], batch_size=cfg["train.batch_size"],
                       epochs=cfg["train.epochs"],
                       lambda_int=cfg["train.lambda_int"],
                       tau=cfg["train.tau"], seed=cfg["train.seed"],
                       early_stop_acc=(cfg["train.early_stop_acc"] or None))
    model, log = train(model, train_seq, val_seq, tcfg)
    log.write(run_dir / "train_log.jsonl")
    save_checkpoint(model, run_dir / "checkpoint.bin")
    test_seq = model.encode_samples(_load_dataset(dataset_dir, "test"))
    logits = model.predict(test_seq)
    preds = (logits > 0).astype(np.float64)
    summary = {
        "per_label_accuracy": [round(float(a), 6) for a in
                               harness.per_label_accuracy(preds, test_seq.labels)],
        "micro_f1": round(harness.micro_f1(preds, test_seq.labels), 6),
        "macro_f1": round(harness.macro_f1(preds, test_seq.labels), 6),
    }
    with open(run_dir / "test_metrics.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    print(f"trained checkpoint and metrics in {run_dir}: {summary}")


def cmd_attribute(cfg: dict, run_dir: Path) -> None:
    model = _load_model(cfg)
    samples = _load_dataset(cfg["analysis.dataset_dir"], "test")
    seq = model.encode_samples(samples[: cfg["attr.max_samples"]])
    expert = cfg["attr.expert"] or None
    rng = np.random.default_rng(0)
    with open(run_dir / "attribution_maps.jsonl", "w", encoding="utf-8") as fh:
        for i in range(seq.features.shape[0]):
            sample = harness._single(seq, i)
            amap = attribution.attribute(
                model, sample, cfg["attr.method"], sample.labels, expert=expert,
                rng=rng, ig_steps=cfg["attr.ig_steps"])
            for m in (0, 1):
                pos = [int(p) for p in np.flatnonzero(amap.segments == m)]
                fh.write(json.dumps({
                    "sample": i, "expert": amap.expert or "mixture",
                    "method": amap.method, "modality": m,
                    "positions": pos,
                    "scores": [round(float(amap.normalized[p]), 6) for p in pos],
                }) + "\n")
    print(f"wrote attribution maps to {run_dir}")


def cmd_faithfulness(cfg: dict, run_dir: Path) -> None:
    model = _load_model(cfg)
    samples = _load_dataset(cfg["analysis.dataset_dir"], "test")
    seq = model.encode_samples(samples[: cfg["faith.max_samples"]])
    curves = []
    summary = {}
    for method in str(cfg["faith.methods"]).split(","):
        method = method.strip()
        curve = harness.faithfulness_sweep(
            model, seq, method, seeds=_int_list(cfg["faith.seeds"]),
            ks=_int_list(cfg["faith.ks"]), metric=cfg["faith.metric"],
            ig_steps=cfg["faith.ig_steps"])
        curves.append(curve)
        summary[method] = round(curve.summary, 6)
    harness.write_drop_curve_csv(curves, run_dir / "drop_curves.csv")
    with open(run_dir / "summary.json", "w", encoding="utf-8") as fh:
        json.dump({"m_base": round(curves[0].m_base, 6),
                   "mean_drop": summary}, fh, indent=2, sort_keys=True)
    print(f"faithfulness summary: {summary}")


def cmd_bins(cfg: dict, run_dir: Path) -> None:
    model = _load_model(cfg)
    samples = _load_dataset(cfg["analysis.dataset_dir"], "test")
    seq = model.encode_samples(samples)
    reports = [
        harness.bin_alignment(model, expert, seq,
                              mc_samples=cfg["bins.mc_samples"],
                              qs=_int_list(cfg["bins.qs"]),
                              seed=cfg["bins.seed"],
                              max_samples=cfg["bins.max_samples"])
        for expert in ("synergy", "redundancy")
    ]
    harness.write_bin_report_csv(reports, run_dir / "bin_alignment.csv")
    for r in reports:
        print(f"{r.expert} ({r.metric_key}): "
              + ", ".join(f"{b}={v}" for b, v in
                          ((b, {q: round(x, 6) for q, x in by_q.items()})
                           for b, by_q in r.bins.items())))


def cmd_pair_mask(cfg: dict, run_dir: Path) -> None:
    model = _load_model(cfg)
    samples = _load_dataset(cfg["analysis.dataset_dir"], "test")
    seq = model.encode_samples(samples)
    expert = cfg["pairs.expert"]
    ranked_rule = harness.EXPERT_METRIC.get(expert, "sii")
    rows = []
    for rule in ("random", ranked_rule):
        rep = harness.pair_masking(
            model, expert, seq, rule, budget=cfg["pairs.budget"],
            seeds=_int_list(cfg["pairs.seeds"]),
            metric=cfg["pairs.metric"], mc_samples=cfg["pairs.mc_samples"],
            pool_fraction=cfg["pairs.pool_fraction"],
            max_samples=cfg["pairs.max_samples"])
        rows.append(rep)
    with open(run_dir / "pair_masking.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["expert", "rule", "budget", "metric",
                    "m_before", "m_after", "drop"])
        for rep in rows:
            w.writerow([rep.expert, rep.rule, rep.budget, rep.metric,
                        f"{rep.m_before:.6f}", f"{rep.m_after:.6f}",
                        f"{rep.drop:.6f}"])
    for rep in rows:
        print(f"{rep.expert}/{rep.rule}: {rep.m_before:.4f} -> "
              f"{rep.m_after:.4f} (drop {rep.drop:.4f})")


def cmd_interactions(cfg: dict, run_dir: Path) -> None:
    model = _load_model(cfg)
    samples = _load_dataset(cfg["analysis.dataset_dir"], "test")
    seq = model.encode_samples(samples[: cfg["interact.max_samples"]])
    expert = cfg["interact.expert"]
    label_index = EXPERT_LABEL_INDEX[expert]
    with open(run_dir / "interactions.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["sample", "expert", "u_modality", "u_pos", "v_modality",
                    "v_pos", "sii", "base_mean", "span_mean", "r_red",
                    "n_samples", "seed"])
        for i in range(seq.features.shape[0]):
            sample = harness._single(seq, i)
            amap = attribution.attribute(model, sample, "grad_attnroll",
                                         sample.labels, expert=expert,
                                         label_index=label_index)
            universe = build_universe(amap, cfg["interact.rho"], expert)
            probe = SetFunctionProbe(model, sample, expert, sample.labels,
                                     label_index, universe,
                                     scope=cfg["interact.scope"])
            for iu, iv in universe.cross_modal_pairs():
                pi = score_pair(probe, iu, iv, cfg["interact.mc_samples"],
                                seed=cfg["interact.seed"])
                w.writerow([i, pi.expert, pi.u[0], pi.u[1], pi.v[0], pi.v[1],
                            f"{pi.sii:.6f}", f"{pi.base_mean:.6f}",
                            f"{pi.span_mean:.6f}", f"{pi.r_red:.6f}",
                            pi.n_samples, pi.seed])
    print(f"wrote pair interaction report to {run_dir}")


def cmd_report(cfg: dict, run_dir: Path) -> None:
    root = Path(os.environ.get("FUSIONLENS_RUN_ROOT", str(cfg["run.root"])))
    lines = ["# collated run summary", ""]
    for sub in sorted(root.iterdir()) if root.exists() else []:
        if not sub.is_dir() or sub == run_dir:
            continue
        for name in ("summary.json", "test_metrics.json"):
            p = sub / name
            if p.exists():
                lines.append(f"## {sub.name}/{name}")
                lines.append(p.read_text().strip())
                lines.append("")
        for name in ("drop_curves.csv", "bin_alignment.csv", "pair_masking.csv",
                     "interactions.csv"):
            p = sub / name
            if p.exists():
                lines.append(f"## {sub.name}/{name}")
                lines.append(p.read_text().strip())
                lines.append("")
    out = run_dir / "report.md"
    out.write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"collated report at {out}")


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "attribute": cmd_attribute,
    "faithfulness": cmd_faithfulness,
    "bins": cmd_bins,
    "pair-mask": cmd_pair_mask,
    "interactions": cmd_interactions,
    "report": cmd_report,
}

SEED_KEY = {
    "gen-data": "data.seed", "train": "train.seed", "attribute": "model.seed",
    "faithfulness": "model.seed", "bins": "bins.seed", "pair-mask": "model.seed",
    "interactions": "interact.seed", "report": "model.seed",
}


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="fusionlens",
        description="Interaction-aware multimodal fusion and pair-interaction probes",
    )
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="flat key=value config file")
    parser.add_argument("overrides", nargs="*", metavar="key=value",
                        help="config overrides (win over the file)")
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, args.overrides)
        run_dir = make_run_dir(cfg, args.command, cfg[SEED_KEY[args.command]])
        HANDLERS[args.command](cfg, run_dir)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
