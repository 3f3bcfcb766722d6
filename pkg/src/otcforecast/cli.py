"""Command-line pipeline: gen -> cluster -> train -> eval / compare / stats.

Every command reads one config file, writes its artifacts under the
configured output directory next to an echo of the resolved config, and is
byte-reproducible from (config, seed).  Exit codes: 0 success, 1 usage or
config error, 2 missing prerequisite artifact, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from . import market
from .clustering import (
    compute_dealer_features,
    kmeans_cluster,
    load_assignment,
    order_clusters,
    save_assignment,
)
from .config import RunConfig, parse_config, write_resolved
from .errors import (
    ConfigurationError,
    ContractError,
    MissingArtifactError,
    NumericError,
    ShapeMismatchError,
)
from .harness import (
    evaluate,
    layer_signal_stats,
    train,
    training_units,
    unit_test_samples,
    write_layer_stats,
    write_reports,
    _aggregate_cluster_rows,
)
from .models import MODEL_KINDS, TRANSFORMER_KINDS, build_model, load_checkpoint, save_checkpoint
from .seeding import derive_seed

COMMANDS = ("gen", "cluster", "train", "eval", "compare", "stats")
CLUSTER_COLUMNS = ("least", "less", "more", "most")

RECORDS_FILE = "records.csv"
VOCAB_FILE = "vocab.csv"
HISTORIES_FILE = "histories.bin"
CLUSTERS_FILE = "clusters.csv"
REPORT_FILE = "report.csv"
COMPARE_FILE = "compare_f1.csv"
COMPARE_REPORT_FILE = "compare_report.csv"
STATS_FILE = "layer_stats.csv"
RESOLVED_CONFIG_FILE = "config.resolved.ini"


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit 1 on usage errors instead of argparse's 2
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _require(path: Path, producer: str) -> Path:
    if not path.exists():
        raise MissingArtifactError(
            f"missing artifact {path} (produce it with `otcforecast {producer}`)"
        )
    return path


def _checkpoint_path(out: Path, tag: str) -> Path:
    return out / f"checkpoint_{tag}.ckpt"


def _load_histories(out: Path):
    histories, days, vocab_size = market.load_histories(_require(out / HISTORIES_FILE, "gen"))
    return histories, days, vocab_size


def _split_samples(cfg: RunConfig, histories, days):
    samples = [
        s
        for h in histories
        for s in market.windowize(h, cfg.t_in, cfg.t_out, cfg.stride)
    ]
    return market.split_train_test(samples, days, cfg.train_fraction)


def _labels(out: Path) -> dict[str, int]:
    return load_assignment(_require(out / CLUSTERS_FILE, "cluster"))


def cmd_gen(cfg: RunConfig, out: Path) -> None:
    spec = cfg.market_spec()
    records = market.generate_synthetic_market(spec)
    market.save_records(out / RECORDS_FILE, records)
    filtered, _, _ = market.apply_trade_filters(
        records, cfg.top_dealers, cfg.top_bonds, cfg.drop_top_bonds
    )
    vocab = market.build_vocabulary(filtered)
    with open(out / VOCAB_FILE, "w", newline="") as fh:
        writer = csv.writer(fh)
        for bond in vocab.bonds:
            writer.writerow([bond, vocab.index[bond]])
    histories = market.build_histories(filtered, vocab, spec.days)
    market.save_histories(out / HISTORIES_FILE, histories, spec.days, vocab.size)
    print(f"wrote {out / RECORDS_FILE} ({len(records)} records)")
    print(f"wrote {out / HISTORIES_FILE} ({len(histories)} dealers, {vocab.size} bonds)")


def cmd_cluster(cfg: RunConfig, out: Path) -> None:
    histories, days, _ = _load_histories(out)
    boundary = market.split_boundary(days, cfg.train_fraction)
    features = compute_dealer_features(histories, boundary)
    assignment = kmeans_cluster(features, k=4, seed=derive_seed(cfg.seed, "cluster"))
    assignment = order_clusters(assignment, features)
    save_assignment(out / CLUSTERS_FILE, assignment)
    print(f"wrote {out / CLUSTERS_FILE} ({len(assignment.labels)} dealers, k=4)")


def _train_units(cfg: RunConfig, out: Path, kind: str, persist: bool):
    """Train one model per unit of the configured granularity."""
    histories, days, vocab_size = _load_histories(out)
    train_samples, test_samples = _split_samples(cfg, histories, days)
    labels = _labels(out) if cfg.granularity != "single" else {}
    units = training_units(cfg.granularity, train_samples, labels)
    trained = {}
    for tag, unit_train in units:
        model = build_model(cfg.model_config(vocab_size, kind=kind))
        _, losses = train(model, unit_train, cfg.train_spec())
        trained[tag] = model
        if persist:
            save_checkpoint(_checkpoint_path(out, tag), model.params)
            with open(out / f"loss_{tag}.csv", "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["epoch", "loss"])
                for epoch, loss in enumerate(losses):
                    writer.writerow([epoch, repr(loss)])
            print(f"wrote {_checkpoint_path(out, tag)}")
    return trained, test_samples


def cmd_train(cfg: RunConfig, out: Path) -> None:
    _train_units(cfg, out, cfg.kind, persist=True)


def _evaluate_units(cfg, models: dict[str, object], test_samples, labels, kind: str):
    counts = {}
    for tag, model in models.items():
        unit_test = unit_test_samples(tag, test_samples, labels)
        if not unit_test:
            continue
        report = evaluate(
            model, unit_test, cfg.threshold, mode=cfg.eval_mode,
            cluster_of=labels, granularity=cfg.granularity, cluster_tag=tag,
        )
        for label, sub in (report.per_cluster or {}).items():
            counts.setdefault(label, np.zeros(4, dtype=np.int64))
            counts[label] += np.array([sub.tp, sub.fp, sub.fn, sub.tn], dtype=np.int64)
    return _aggregate_cluster_rows(kind, cfg.granularity, counts)


def _load_units(cfg: RunConfig, out: Path):
    histories, days, vocab_size = _load_histories(out)
    train_samples, test_samples = _split_samples(cfg, histories, days)
    labels = _labels(out)
    units = training_units(cfg.granularity, train_samples, labels)
    models = {}
    for tag, _ in units:
        path = _require(_checkpoint_path(out, tag), "train")
        model = build_model(cfg.model_config(vocab_size))
        model.params.load_state(load_checkpoint(path))
        models[tag] = model
    return models, test_samples, labels


def cmd_eval(cfg: RunConfig, out: Path) -> None:
    models, test_samples, labels = _load_units(cfg, out)
    rows = _evaluate_units(cfg, models, test_samples, labels, cfg.kind)
    write_reports(out / REPORT_FILE, rows)
    print(f"wrote {out / REPORT_FILE}")


def cmd_compare(cfg: RunConfig, out: Path) -> None:
    """Train every model kind and tabulate per-cluster F1 plus a pooled avg."""
    all_rows = []
    grid = []
    for kind in MODEL_KINDS:
        models, test_samples = _train_units(cfg, out, kind, persist=False)
        labels = _labels(out)
        rows = _evaluate_units(cfg, models, test_samples, labels, kind)
        all_rows.extend(rows)
        by_cluster = {row.cluster: row.f1 for row in rows}
        grid.append(
            [kind]
            + [
                repr(by_cluster[str(label)]) if str(label) in by_cluster else ""
                for label in range(len(CLUSTER_COLUMNS))
            ]
            + [repr(by_cluster["all"]) if "all" in by_cluster else ""]
        )
    with open(out / COMPARE_FILE, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model", *CLUSTER_COLUMNS, "avg"])
        writer.writerows(grid)
    write_reports(out / COMPARE_REPORT_FILE, all_rows)
    print(f"wrote {out / COMPARE_FILE}")
    print(f"wrote {out / COMPARE_REPORT_FILE}")


def cmd_stats(cfg: RunConfig, out: Path) -> None:
    if cfg.kind not in TRANSFORMER_KINDS:
        raise ConfigurationError(
            f"stats needs a transformer kind, got {cfg.kind} "
            f"(one of {', '.join(TRANSFORMER_KINDS)})"
        )
    histories, days, vocab_size = _load_histories(out)
    train_samples, _ = _split_samples(cfg, histories, days)
    labels = _labels(out) if cfg.granularity != "single" else {}
    units = training_units(cfg.granularity, train_samples, labels)
    stats_list = []
    for tag, unit_train in units:
        path = _require(_checkpoint_path(out, tag), "train")
        model = build_model(cfg.model_config(vocab_size))
        model.params.load_state(load_checkpoint(path))
        probe = unit_train[: cfg.probe_samples]
        stats_list.append(layer_signal_stats(model, probe, tag=tag))
    write_layer_stats(out / STATS_FILE, stats_list)
    print(f"wrote {out / STATS_FILE}")


_DISPATCH = {
    "gen": cmd_gen,
    "cluster": cmd_cluster,
    "train": cmd_train,
    "eval": cmd_eval,
    "compare": cmd_compare,
    "stats": cmd_stats,
}


def main(argv: list[str] | None = None) -> int:
    parser = _Parser(
        prog="otcforecast",
        description="Synthetic OTC dealer-behavior prediction pipeline",
    )
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument(
        "-c", "--config", default=None,
        help="config file (key = value with sections); omitted means all defaults",
    )
    args = parser.parse_args(argv)
    try:
        cfg = parse_config(args.config)
        out = Path(cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_resolved(cfg, out / RESOLVED_CONFIG_FILE)
        _DISPATCH[args.command](cfg, out)
    except (ConfigurationError, ContractError, ShapeMismatchError) as exc:
        print(f"otcforecast: config error: {exc}", file=sys.stderr)
        return 1
    except MissingArtifactError as exc:
        print(f"otcforecast: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"otcforecast: numeric failure: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":  # pragma: no cover
    raise SystemExit(main())
