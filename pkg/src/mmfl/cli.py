"""Command-line entry point: ``mmfl {gen-data,train,grid,ablate,analyze}``."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import os
import sys
from pathlib import Path

from .analysis import estimate_bound, export_embeddings, write_bound_csv
from .config import config_keys, dump_config, load_config, stats_list
from .dataset import generate_synthetic, load_dataset, save_dataset
from .errors import ConfigError, MMFLError
from .federation import (evaluate_model, load_checkpoint, load_state, make_model, prepare_federated_data,
                         run_federation)
from .masking import MissingStats
from .seeding import derive_seed

log = logging.getLogger("mmfl")

COMMANDS = {
    "gen-data": "write a synthetic dataset directory",
    "train": "run one federated experiment; prints accuracy=<float> last",
    "grid": "accuracy over train stats x test stats, written to grid.csv",
    "ablate": "final accuracy of each method, stats pair and seed, written to ablation.csv",
    "analyze": "deviation/bound estimates and embedding export for trained runs",
}

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


def output_dir(args, cfg) -> Path:
    """--out beats MMFL_OUTPUT_DIR beats the config's output_dir."""
    return Path(args.out or os.environ.get("MMFL_OUTPUT_DIR") or cfg.output_dir)


def build_dataset(cfg):
    d = cfg.data
    if d.path:
        if not Path(d.path).is_dir():
            raise ConfigError(f"dataset directory {d.path!r} does not exist", key="data.path")
        return load_dataset(d.path)
    return generate_synthetic(d.n_samples, d.n_modalities, d.feature_len, d.n_classes, d.class_separation,
                              seed=cfg.seed, latent_dim=d.latent_dim)


def federated_data(cfg, dataset, train_stats: MissingStats):
    return prepare_federated_data(dataset, cfg.federation.n_clients, train_stats, cfg.seed,
                                  cfg.data.test_fraction, cfg.data.partition, cfg.data.alpha)


def eval_seed(seed: int) -> int:
    return derive_seed(seed, "eval-mask", 0)


def _train(cfg, dataset, train_stats, test_stats, out_dir):
    data = federated_data(cfg, dataset, train_stats)
    res = run_federation(cfg.federation, data, cfg.seed, train_stats, test_stats, out_dir)
    acc = res.final_accuracy
    if acc is None:
        acc = res.federation.evaluate(test_stats, eval_seed(cfg.seed))
    return res, data, acc


def _write_csv(path, header, rows):
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _tag(stats: MissingStats) -> str:
    return f"train_{stats.p_m:g}_{stats.p_s:g}"


def cmd_gen_data(cfg, out: Path):
    save_dataset(build_dataset(cfg), out)
    print(f"dataset written to {out}")


def cmd_train(cfg, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.yaml")
    _, _, acc = _train(cfg, build_dataset(cfg), cfg.missing.train, cfg.missing.test, out)
    print(f"accuracy={acc!r}")


def model_from_run(run_dir: Path):
    """Rebuild the global model of a finished ``train`` run directory; returns (config, model, data)."""
    cfg_path, ckpt = run_dir / "config.yaml", run_dir / "final"
    for p in (cfg_path, ckpt / "params.pt"):
        if not p.is_file():
            raise ConfigError(f"checkpoint file {str(p)!r} not found", key="analysis.checkpoints")
    cfg = load_config(cfg_path)
    data = federated_data(cfg, build_dataset(cfg), cfg.missing.train)
    return cfg, _load_model(cfg, data, ckpt), data


def _load_model(cfg, data, ckpt: Path):
    if not (ckpt / "params.pt").is_file():
        raise ConfigError(f"checkpoint file {str(ckpt / 'params.pt')!r} not found", key="grid.checkpoint_root")
    model = make_model(cfg.federation, data.feature_lens, data.n_classes, derive_seed(cfg.seed, "init"))
    return load_state(model, load_checkpoint(ckpt), cfg.federation.tau, derive_seed(cfg.seed, "pad-eval"))


def cmd_grid(cfg, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.yaml")
    train_list = stats_list(cfg.grid.train_stats, "grid.train_stats")
    test_list = stats_list(cfg.grid.test_stats, "grid.test_stats")
    if not cfg.grid.train_inline and not cfg.grid.checkpoint_root:
        raise ConfigError("grid.checkpoint_root is required when grid.train_inline is false",
                          key="grid.checkpoint_root")
    dataset = build_dataset(cfg)
    rows = []
    for tr in train_list:
        if tr.excluded:
            rows.extend([tr.p_m, tr.p_s, te.p_m, te.p_s, "", "excluded"] for te in test_list)
            continue
        if cfg.grid.train_inline:
            res, data, _ = _train(cfg, dataset, tr, cfg.missing.test, out / _tag(tr))
            model = res.federation.global_model()
        else:
            data = federated_data(cfg, dataset, tr)
            model = _load_model(cfg, data, Path(cfg.grid.checkpoint_root) / _tag(tr) / "final")
        for te in test_list:
            if te.excluded:
                rows.append([tr.p_m, tr.p_s, te.p_m, te.p_s, "", "excluded"])
                continue
            acc = evaluate_model(model, data.test, te, eval_seed(cfg.seed))
            rows.append([tr.p_m, tr.p_s, te.p_m, te.p_s, repr(acc), "ok"])
            log.info("grid %s -> %s accuracy %.4f", tr, te, acc)
    _write_csv(out / "grid.csv", ["train_pm", "train_ps", "test_pm", "test_ps", "accuracy", "status"],
               [[repr(float(r[0])), repr(float(r[1])), repr(float(r[2])), repr(float(r[3]))] + r[4:] for r in rows])
    print(f"grid written to {out / 'grid.csv'}")


def cmd_ablate(cfg, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "config.yaml")
    rows = []
    for st in stats_list(cfg.ablation.stats, "ablation.stats"):
        if st.excluded:
            raise ConfigError("ablation.stats may not contain the excluded pair [1.0, 1.0]", key="ablation.stats")
        for seed in cfg.ablation.seeds:
            run_cfg = dataclasses.replace(cfg, seed=int(seed))
            dataset = build_dataset(run_cfg)
            for method in cfg.ablation.methods:
                run_cfg.federation = dataclasses.replace(cfg.federation, method=method)
                _, _, acc = _train(run_cfg, dataset, st, st, None)
                rows.append([method, repr(st.p_m), repr(st.p_s), int(seed), repr(acc)])
                log.info("ablation %s %s seed %d accuracy %.4f", method, st, seed, acc)
    _write_csv(out / "ablation.csv", ["method", "pm", "ps", "seed", "accuracy"], rows)
    print(f"ablation written to {out / 'ablation.csv'}")


def cmd_analyze(cfg, out: Path):
    a = cfg.analysis
    runs = [Path(p) for p in a.checkpoints] or [out]
    for run in runs:
        for p in (run / "config.yaml", run / "final" / "params.pt"):
            if not p.is_file():
                raise ConfigError(f"checkpoint file {str(p)!r} not found", key="analysis.checkpoints")
    out.mkdir(parents=True, exist_ok=True)
    bound_rows = []
    for i, run in enumerate(runs):
        run_cfg, model, data = model_from_run(run)
        test = data.test
        if a.max_instances and test.n_samples > a.max_instances:
            test = test.subset(range(a.max_instances))
        lam = run_cfg.federation.resolved_lambda(run_cfg.missing.train_pm)
        for s in a.missing_sizes:
            if not 0 <= int(s) < test.n_modalities:
                raise ConfigError(f"analysis.missing_sizes entry {s} outside [0, {test.n_modalities - 1}]",
                                  key="analysis.missing_sizes")
            est = estimate_bound(model, test, int(s), a.n_patterns, cfg.seed, a.lipschitz_pairs, a.lipschitz_radius)
            log.info("run %s |S|=%d deviation %.5f gamma norms %s beta norms %s", run, s, est.mean_deviation,
                     est.gamma_norm_range, est.beta_norm_range)
            bound_rows.append((lam, est))
        name = "embeddings.csv" if i == 0 else f"embeddings_{i}.csv"
        export_embeddings(model, test, [tuple(p) for p in a.embedding_patterns], out / name, seed=cfg.seed)
    write_bound_csv(bound_rows, out / "bound.csv")
    print(f"analysis written to {out}")


HANDLERS = {"gen-data": cmd_gen_data, "train": cmd_train, "grid": cmd_grid, "ablate": cmd_ablate,
            "analyze": cmd_analyze}


def build_parser() -> argparse.ArgumentParser:
    keys = "\n".join(f"  {k}" for k in config_keys())
    cmds = "\n".join(f"  {k:<9} {v}" for k, v in COMMANDS.items())
    epilog = (f"commands:\n{cmds}\n\nconfig keys (YAML sections or --set key=value):\n{keys}\n\n"
              "MMFL_OUTPUT_DIR overrides output_dir; --out overrides both.\n"
              "exit codes: 0 success, 2 config/validation error, 1 runtime error")
    parser = argparse.ArgumentParser(prog="mmfl", description="Multimodal federated learning with missing modalities.",
                                     epilog=epilog, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", metavar="command", required=True)
    for name, help_text in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text, epilog=epilog,
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.add_argument("--config", help="YAML config file")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted override, repeatable (e.g. federation.rounds=10)")
        p.add_argument("--out", help="output directory")
        p.add_argument("--workers", type=int, help="max concurrent client trainings")
        p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        overrides = list(args.overrides)
        if args.workers is not None:
            overrides.append(f"federation.workers={args.workers}")
        cfg = load_config(args.config, overrides)
        out = output_dir(args, cfg)
        cfg.output_dir = str(out)
        HANDLERS[args.command](cfg, out)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except MMFLError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - report and exit nonzero
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
