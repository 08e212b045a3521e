"""Command-line interface: build-graph, prepare, embed, train, evaluate, synth.

Configuration merges three layers with increasing precedence: built-in
defaults, a key=value config file (--config), and command-line flags. The
effective configuration is echoed into the run directory so a run can be
reproduced from its artifacts alone.

Exit codes: 0 success, 1 I/O or transport failure, 2 validation/contract
violation, 3 offline cache miss.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass
from datetime import timedelta

import numpy as np

from .data import (
    EmbeddingTable,
    Normalizer,
    aggregate_demand,
    filter_complete,
    load_dataset,
    load_embedding_table,
    make_windows,
    parse_timestamp,
    pool_embeddings,
    read_trips_csv,
    save_dataset,
    save_embedding_table,
)
from .embeddings import (
    EmbedConfig,
    embed_texts,
    flush_cache,
    load_cache,
    load_poi_embeddings,
    save_poi_embeddings,
)
from .errors import (
    CacheLoadError,
    NumericError,
    OfflineMissError,
    TransportError,
    ValidationError,
)
from .graph import (
    WEIGHT_MODES,
    build_adjacency,
    load_graph,
    load_regions,
    save_graph,
)
from .model import ArchConfig, load_checkpoint, save_checkpoint
from .synth import PROCESSES, synth_generate
from .train import (
    OPTIMIZERS,
    TrainConfig,
    evaluate,
    metrics,
    persistence_baseline,
    predict,
    train_loop,
)

logger = logging.getLogger(__name__)

DEFAULTS: dict = {
    # architecture
    "input_steps": 12,
    "horizon": 3,
    "kernel_t": 3,
    "block1": (1, 16, 64),
    "block2": (64, 16, 64),
    "embed_channels": 16,
    "embed_dim": "auto",  # resolved from the embedding table; or a fixed int
    "use_llm_block": "auto",  # auto -> fuse embeddings whenever they are available
    # training (epochs=1000 reproduces the long-run literature setting)
    "epochs": 100,
    "batch_size": 50,
    "learning_rate": 1e-3,
    "optimizer": "adam",
    "early_stop_patience": 20,
    "seed": 0,
    "grad_clip_norm": 5.0,
    # graph construction
    "cutoff_km": 160.0,
    "weight_mode": "gaussian",
    "sigma_km": 10.0,
    # data pipeline
    "bin_hours": 1.0,
    "split": (0.6, 0.2, 0.2),
    "normalizer": "zscore_per_node",
}


def _parse_scalar(text: str):
    s = text.strip()
    low = s.lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("none", "null"):
        return None
    if "," in s:
        return tuple(_parse_scalar(part) for part in s.split(","))
    for cast in (int, float):
        try:
            return cast(s)
        except ValueError:
            pass
    return s


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if v is None:
        return "none"
    if isinstance(v, (tuple, list)):
        return ",".join(_format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def load_config_file(path: str) -> dict:
    """Parse a key=value config file; keys must be known, '#' starts a comment."""
    values = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValidationError(f"{path}:{lineno}: expected key=value, got {raw.strip()!r}")
            key, _, val = line.partition("=")
            key = key.strip()
            if key not in DEFAULTS:
                raise ValidationError(f"{path}:{lineno}: unknown config key {key!r}")
            values[key] = _parse_scalar(val)
    return values


@dataclass
class RunConfig:
    """Defaults, overlaid by a config file, overlaid by CLI flags."""

    values: dict

    @classmethod
    def build(cls, config_path: str | None, cli_overrides: dict) -> "RunConfig":
        values = dict(DEFAULTS)
        if config_path:
            values.update(load_config_file(config_path))
        for key, val in cli_overrides.items():
            if val is not None:
                if key not in DEFAULTS:
                    raise ValidationError(f"unknown config key {key!r}")
                values[key] = val
        return cls(values=values)

    def __getitem__(self, key: str):
        return self.values[key]

    def echo(self, path: str, resolved: dict | None = None) -> None:
        merged = dict(self.values)
        merged.update(resolved or {})
        with open(path, "w") as fh:
            for key in sorted(merged):
                fh.write(f"{key}={_format_value(merged[key])}\n")


def _read_text(path: str) -> str:
    with open(path) as fh:
        return fh.read()


def _read_poi_jsonl(path: str) -> list[dict]:
    """POI records, one JSON object per line: {id, lat, lon, text}."""
    pois = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                rec = {
                    "id": str(obj["id"]),
                    "lat": float(obj["lat"]),
                    "lon": float(obj["lon"]),
                    "text": obj["text"],
                }
                if not isinstance(rec["text"], str) or not rec["text"]:
                    raise ValueError("text must be a non-empty string")
            except (ValueError, KeyError, TypeError) as exc:
                raise ValidationError(f"{path}:{lineno}: bad POI record: {exc}") from exc
            pois.append(rec)
    if not pois:
        raise ValidationError(f"{path}: no POI records found")
    return pois


# ---------------------------------------------------------------------------
# subcommands

def cmd_build_graph(args: argparse.Namespace) -> int:
    cfg = RunConfig.build(args.config, {
        "cutoff_km": args.cutoff_km,
        "weight_mode": args.weight_mode,
        "sigma_km": args.sigma_km,
    })
    regions = load_regions(_read_text(args.regions))
    graph = build_adjacency(
        regions,
        cutoff_km=cfg["cutoff_km"],
        weight_mode=cfg["weight_mode"],
        sigma_km=cfg["sigma_km"],
    )
    save_graph(args.out, graph)
    n_edges = int(np.count_nonzero(graph.adjacency) // 2)
    print(f"graph: {graph.n} regions, {n_edges} edges "
          f"({cfg['weight_mode']}, cutoff {cfg['cutoff_km']} km) -> {args.out}")
    return 0


def cmd_prepare(args: argparse.Namespace) -> int:
    cfg = RunConfig.build(args.config, {"bin_hours": args.bin_hours})
    trips = read_trips_csv(args.trips)
    regions = load_regions(_read_text(args.regions))
    t_start = parse_timestamp(args.start)
    t_end = parse_timestamp(args.end)
    demand, report = aggregate_demand(
        trips, regions, t_start, t_end, bin=timedelta(hours=cfg["bin_hours"])
    )
    table = None
    if args.poi_embeddings:
        _, lats, lons, vectors, _ = load_poi_embeddings(args.poi_embeddings)
        table = pool_embeddings(list(zip(lats, lons, vectors)), regions)
    n_before = len(regions)
    demand, table, kept = filter_complete(demand, table, regions)
    save_dataset(args.out, demand, table)
    print(f"trips: {report.counted} counted, {report.out_of_span} out of span, "
          f"{report.unassigned} unassigned, {report.skipped} malformed")
    print(f"regions: kept {len(kept)} of {n_before} "
          f"(dropped {n_before - len(kept)} without demand"
          + (" or embedding coverage" if table is not None else "") + ")")
    print(f"dataset: {demand.T} x {demand.n} -> {args.out}")
    return 0


def cmd_embed(args: argparse.Namespace) -> int:
    pois = _read_poi_jsonl(args.poi)
    if not args.offline and not args.endpoint:
        raise ValidationError("--endpoint is required unless running --offline")
    cache = load_cache(args.cache)
    econf = EmbedConfig(
        endpoint_url=args.endpoint or "",
        model_name=args.model,
        api_key_env=args.api_key_env,
        batch_size=args.batch_size,
        timeout_s=args.timeout_s,
        max_retries=args.max_retries,
        parallel_requests=args.parallel,
        expect_dim=args.expect_dim,
        offline=args.offline,
    )
    texts = [p["text"] for p in pois]
    hits = sum(1 for t in texts if cache.get(args.model, t) is not None)
    vectors = embed_texts(texts, econf, cache)
    flush_cache(cache, args.cache)
    save_poi_embeddings(
        args.out,
        ids=[p["id"] for p in pois],
        lats=np.array([p["lat"] for p in pois]),
        lons=np.array([p["lon"] for p in pois]),
        vectors=np.stack(vectors),
        model_name=args.model,
    )
    print(f"embedded {len(pois)} POIs ({hits} cache hits, dim {vectors[0].shape[0]}) -> {args.out}")
    return 0


def _resolve_use_llm(setting, table: EmbeddingTable | None) -> bool:
    if setting in ("auto", None):
        return table is not None
    if isinstance(setting, str):
        setting = setting.lower() == "true"
    if setting and table is None:
        raise ValidationError("use_llm_block is enabled but no embeddings are available")
    return bool(setting)


DEFAULT_EMBED_DIM = 1536


def _resolve_embed_dim(setting, table: EmbeddingTable | None, use_llm: bool) -> int:
    if not use_llm:
        return DEFAULT_EMBED_DIM if setting in ("auto", None) else int(setting)
    assert table is not None
    if setting in ("auto", None):
        return table.dim
    if int(setting) != table.dim:
        raise ValidationError(
            f"config embed_dim={setting} but the embedding table has dimension {table.dim}"
        )
    return int(setting)


def _arch_from_config(cfg: RunConfig, table: EmbeddingTable | None) -> ArchConfig:
    use_llm = _resolve_use_llm(cfg["use_llm_block"], table)
    embed_dim = _resolve_embed_dim(cfg["embed_dim"], table, use_llm)
    return ArchConfig(
        input_steps=int(cfg["input_steps"]),
        horizon=int(cfg["horizon"]),
        kernel_t=int(cfg["kernel_t"]),
        block1=tuple(cfg["block1"]),
        block2=tuple(cfg["block2"]),
        embed_channels=int(cfg["embed_channels"]),
        embed_dim=embed_dim,
        use_llm_block=use_llm,
    )


def cmd_train(args: argparse.Namespace) -> int:
    overrides = {
        "epochs": args.epochs,
        "batch_size": args.batch_size,
        "learning_rate": args.learning_rate,
        "optimizer": args.optimizer,
        "early_stop_patience": args.patience,
        "grad_clip_norm": args.grad_clip_norm,
        "input_steps": args.input_steps,
        "horizon": args.horizon,
        "kernel_t": args.kernel_t,
        "block1": None if args.block1 is None else _parse_scalar(args.block1),
        "block2": None if args.block2 is None else _parse_scalar(args.block2),
        "embed_channels": args.embed_channels,
        "embed_dim": None if args.embed_dim is None else _parse_scalar(args.embed_dim),
        "use_llm_block": args.use_llm_block,
        "split": None if args.split is None else _parse_scalar(args.split),
        "normalizer": args.normalizer,
        "seed": args.seed,
    }
    cfg = RunConfig.build(args.config, overrides)
    demand, table = load_dataset(args.dataset)
    graph = load_graph(args.graph)
    if args.embeddings:
        table = load_embedding_table(args.embeddings).subset(demand.region_order)
    arch = _arch_from_config(cfg, table)
    graph_sub = graph.subset(demand.region_order)
    windows = make_windows(demand, arch.input_steps, arch.horizon, tuple(cfg["split"]))
    norm = Normalizer.fit(demand.values[:windows.train_row_end], cfg["normalizer"])
    ds = windows.transformed(norm.apply)
    tcfg = TrainConfig(
        epochs=int(cfg["epochs"]),
        batch_size=int(cfg["batch_size"]),
        learning_rate=float(cfg["learning_rate"]),
        optimizer=cfg["optimizer"],
        early_stop_patience=int(cfg["early_stop_patience"]),
        seed=int(cfg["seed"]),
        grad_clip_norm=None if cfg["grad_clip_norm"] is None else float(cfg["grad_clip_norm"]),
    )
    kind = "STGCN-L" if arch.use_llm_block else "STGCN"
    print(f"training {kind}: {demand.n} regions, "
          f"{windows.bounds[0]}/{windows.bounds[1] - windows.bounds[0]}/"
          f"{windows.n_windows - windows.bounds[1]} train/val/test windows")
    emb_vectors = table.vectors if arch.use_llm_block else None
    params, history = train_loop(ds, graph_sub, emb_vectors, arch, tcfg)
    run_dir = args.run_dir or "run"
    os.makedirs(run_dir, exist_ok=True)
    history.to_csv(os.path.join(run_dir, "history.csv"))
    save_checkpoint(
        os.path.join(run_dir, "checkpoint.bkc"),
        params,
        arch,
        seed=tcfg.seed,
        meta={
            "normalizer_mode": norm.mode,
            "region_ids": demand.region_order,
            "split": list(cfg["split"]),
        },
        extra_arrays=[("norm.mean", norm.mean), ("norm.std", norm.std)],
    )
    cfg.echo(
        os.path.join(run_dir, "config_used.cfg"),
        resolved={"use_llm_block": arch.use_llm_block, "embed_dim": arch.embed_dim},
    )
    best = history.best_epoch()
    print(f"best epoch {best.epoch}/{len(history)}: "
          f"val_mse={best.val_mse:.6f} val_mae={best.val_mae:.6f}")
    print(f"run artifacts -> {run_dir}/checkpoint.bkc, history.csv, config_used.cfg")
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    params, arch, _, meta, extras = load_checkpoint(args.checkpoint)
    demand, table = load_dataset(args.dataset)
    graph = load_graph(args.graph)
    ckpt_ids = [str(r) for r in meta.get("region_ids", [])]
    if not ckpt_ids:
        raise ValidationError(f"{args.checkpoint}: checkpoint carries no region ids")
    index = {rid: i for i, rid in enumerate(demand.region_order)}
    missing = [rid for rid in ckpt_ids if rid not in index]
    if missing:
        raise ValidationError(f"dataset is missing regions the model was trained on: {missing[:5]}")
    sel = np.array([index[rid] for rid in ckpt_ids], dtype=np.intp)
    values = demand.values[:, sel]
    if args.embeddings:
        table = load_embedding_table(args.embeddings)
    emb_vectors = None
    if arch.use_llm_block:
        if table is None:
            raise ValidationError("checkpoint uses the fusion block but no embeddings were given")
        emb_vectors = table.subset(ckpt_ids).vectors
    graph_sub = graph.subset(ckpt_ids)
    if "norm.mean" not in extras or "norm.std" not in extras:
        raise ValidationError(f"{args.checkpoint}: checkpoint carries no normalizer")
    norm = Normalizer(mode=str(meta["normalizer_mode"]), mean=extras["norm.mean"], std=extras["norm.std"])
    split_ratios = tuple(float(x) for x in meta["split"])
    windows = make_windows(values, arch.input_steps, arch.horizon, split_ratios)
    ds = windows.transformed(norm.apply)
    x, y = ds.split_arrays(args.split)
    if x.shape[0] == 0:
        raise ValidationError(f"the {args.split} split has no windows")
    result = evaluate(params, x, y, graph_sub, emb_vectors, arch)
    result["split"] = args.split
    pred = predict(params, x, graph_sub, emb_vectors, arch)
    naive = persistence_baseline(x, arch.horizon)
    if args.denormalize:
        denorm = metrics(norm.invert(pred), norm.invert(y))
        result["denorm_mse"] = denorm["mse"]
        result["denorm_mae"] = denorm["mae"]
    out_dir = args.out_dir or args.run_dir or "."
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "metrics.json"), "w") as fh:
        json.dump(result, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(out_dir, "per_node.csv"), "w") as fh:
        fh.write("region_id,mse,mae,persistence_mse,persistence_mae\n")
        for v, rid in enumerate(ckpt_ids):
            m = metrics(pred[:, :, v], y[:, :, v])
            b = metrics(naive[:, :, v], y[:, :, v])
            fh.write(f"{rid},{m['mse']!r},{m['mae']!r},{b['mse']!r},{b['mae']!r}\n")
    if args.history:
        with open(args.history, "rb") as src, \
                open(os.path.join(out_dir, "per_epoch.csv"), "wb") as dst:
            dst.write(src.read())
    print(f"{args.split}: mse={result['mse']:.6f} mae={result['mae']:.6f} | "
          f"persistence mse={result['persistence_mse']:.6f} mae={result['persistence_mae']:.6f}")
    print(f"evaluation artifacts -> {out_dir}/metrics.json, per_node.csv")
    return 0


def cmd_synth(args: argparse.Namespace) -> int:
    seed = args.seed if args.seed is not None else 0
    graph, demand, table = synth_generate(
        args.nodes,
        args.steps,
        seed=seed,
        process=args.process,
        embedding_signal=args.embedding_signal,
        d_embed=args.d_embed,
    )
    prefix = args.out_prefix
    parent = os.path.dirname(prefix)
    if parent:
        os.makedirs(parent, exist_ok=True)
    save_graph(prefix + ".graph.bkc", graph)
    save_dataset(prefix + ".dataset.bkc", demand, table)
    save_embedding_table(prefix + ".embeddings.bkc", table)
    print(f"synth ({args.process}, seed {seed}): {demand.T} x {demand.n} demand, "
          f"embeddings dim {table.dim}")
    print(f"wrote {prefix}.dataset.bkc, {prefix}.graph.bkc, {prefix}.embeddings.bkc")
    return 0


# ---------------------------------------------------------------------------
# parser and entry point

def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="bikecast",
        description="Graph-convolutional bike-demand forecasting pipeline.",
    )
    p.add_argument("--config", help="key=value config file (CLI flags take precedence)")
    p.add_argument("--seed", type=int, default=None, help="random seed (default 0)")
    p.add_argument("--run-dir", default=None, help="directory for run artifacts")
    p.add_argument("--offline", action="store_true", help="never touch the network")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("build-graph", help="regions GeoJSON -> adjacency file")
    g.add_argument("--regions", required=True, help="GeoJSON FeatureCollection of polygons")
    g.add_argument("--out", required=True)
    g.add_argument("--cutoff-km", type=float, default=None)
    g.add_argument("--weight-mode", choices=WEIGHT_MODES, default=None)
    g.add_argument("--sigma-km", type=float, default=None)
    g.set_defaults(handler=cmd_build_graph)

    pr = sub.add_parser("prepare", help="trips + regions (+ POI embeddings) -> dataset file")
    pr.add_argument("--trips", required=True, help="CSV of trip starts")
    pr.add_argument("--regions", required=True)
    pr.add_argument("--start", required=True, help="span start, RFC 3339")
    pr.add_argument("--end", required=True, help="span end (exclusive), RFC 3339")
    pr.add_argument("--bin-hours", type=float, default=None)
    mode = pr.add_mutually_exclusive_group(required=True)
    mode.add_argument("--poi-embeddings", help="per-POI vectors from `bikecast embed`")
    mode.add_argument("--no-embeddings", action="store_true", help="demand-only dataset")
    pr.add_argument("--out", required=True)
    pr.set_defaults(handler=cmd_prepare)

    em = sub.add_parser("embed", help="POI texts -> per-POI vectors via the embedding service")
    em.add_argument("--poi", required=True, help="JSONL of {id, lat, lon, text}")
    em.add_argument("--cache", required=True, help="JSONL response cache (read and updated)")
    em.add_argument("--out", required=True)
    em.add_argument("--endpoint", default=None, help="service URL (required unless --offline)")
    em.add_argument("--model", required=True, help="embedding model name")
    em.add_argument("--api-key-env", default="EMBED_API_KEY")
    em.add_argument("--batch-size", type=int, default=64)
    em.add_argument("--timeout-s", type=float, default=10.0)
    em.add_argument("--max-retries", type=int, default=3)
    em.add_argument("--parallel", type=int, default=4)
    em.add_argument("--expect-dim", type=int, default=1536)
    em.set_defaults(handler=cmd_embed)

    tr = sub.add_parser("train", help="dataset + graph -> checkpoint + history")
    tr.add_argument("--dataset", required=True)
    tr.add_argument("--graph", required=True)
    tr.add_argument("--embeddings", default=None, help="region-level table overriding the dataset's")
    tr.add_argument("--epochs", type=int, default=None)
    tr.add_argument("--batch-size", type=int, default=None)
    tr.add_argument("--learning-rate", type=float, default=None)
    tr.add_argument("--optimizer", choices=OPTIMIZERS, default=None)
    tr.add_argument("--patience", type=int, default=None)
    tr.add_argument("--grad-clip-norm", type=float, default=None)
    tr.add_argument("--input-steps", type=int, default=None)
    tr.add_argument("--horizon", type=int, default=None)
    tr.add_argument("--kernel-t", type=int, default=None)
    tr.add_argument("--block1", default=None, help="e.g. 1,16,64")
    tr.add_argument("--block2", default=None)
    tr.add_argument("--embed-channels", type=int, default=None)
    tr.add_argument("--embed-dim", default=None, help="'auto' or an integer")
    tr.add_argument("--use-llm-block", choices=("auto", "true", "false"), default=None)
    tr.add_argument("--split", default=None, help="e.g. 0.6,0.2,0.2")
    tr.add_argument("--normalizer", choices=Normalizer.MODES, default=None)
    tr.set_defaults(handler=cmd_train)

    ev = sub.add_parser("evaluate", help="checkpoint + dataset + graph -> metrics")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--dataset", required=True)
    ev.add_argument("--graph", required=True)
    ev.add_argument("--embeddings", default=None)
    ev.add_argument("--split", choices=("train", "val", "test"), default="test")
    ev.add_argument("--denormalize", action="store_true",
                    help="also report metrics in raw demand units")
    ev.add_argument("--history", default=None, help="history.csv to copy as per_epoch.csv")
    ev.add_argument("--out-dir", default=None)
    ev.set_defaults(handler=cmd_evaluate)

    sy = sub.add_parser("synth", help="generate a synthetic dataset + graph + embeddings")
    sy.add_argument("--nodes", type=int, required=True)
    sy.add_argument("--steps", type=int, required=True)
    sy.add_argument("--process", choices=PROCESSES, default="diffusion")
    sy.add_argument("--embedding-signal", action="store_true")
    sy.add_argument("--d-embed", type=int, default=32)
    sy.add_argument("--out-prefix", required=True)
    sy.set_defaults(handler=cmd_synth)
    return p


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.handler(args)
    except OfflineMissError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (ValidationError, NumericError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (TransportError, CacheLoadError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
