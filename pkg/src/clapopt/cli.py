"""Command-line entry point.

One executable exposes the whole pipeline: scenario generation,
partitioning, both training stages, baselines, every evaluation, the
prompt registry, and the invariant selfcheck. Every command echoes its
RunConfig into the output directory and writes files atomically, so a
rerun with identical config and seeds reproduces every byte.
"""

from __future__ import annotations

import argparse
import glob
import os
import sys

import numpy as np

from . import evaluation, partition, registry, synth, train
from .config import RunConfig, apply_override, read_config, write_config
from .data import (RoadblockDataset, dusk_shift, identity_shift, rain_shift,
                   read_dataset, write_dataset)
from .planner import init_frozen_weights, weights_checksum
from .registry import (PromptStore, RegistryClient, RegistryRecord,
                       payload_to_record, record_to_payload, serve)
from .selfcheck import format_results, run_selfcheck
from .textio import atomic_write_text


class UsageError(Exception):
    """Bad invocation; reported to stderr with exit code 2."""


# -- config plumbing -----------------------------------------------------------

_FLAG_PATHS = (
    ("tau", "train.tau"),
    ("lambda1", "train.lambda1"),
    ("lambda2", "train.lambda2"),
    ("k", "train.k"),
    ("delta", "delta"),
    ("prompt_len_a", "train.m"),
    ("prompt_len_b", "train.n"),
)


def _load_config(args) -> RunConfig:
    config = read_config(args.config) if args.config else RunConfig()
    for item in args.overrides:
        key, sep, raw = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        try:
            config = apply_override(config, key, raw)
        except KeyError as e:
            raise UsageError(str(e)) from None
    for flag, path in _FLAG_PATHS:
        value = getattr(args, flag, None)
        if value is not None:
            config = apply_override(config, path, str(value))
    if getattr(args, "seed", None) is not None:
        config = apply_override(config, "dataset_seed", str(args.seed))
    return config


def _out_path(args, name: str) -> str:
    return os.path.join(args.out, name)


def _echo_config(args, config: RunConfig) -> None:
    write_config(config, _out_path(args, "config.txt"))


def _datasets(args, config: RunConfig) -> list[RoadblockDataset]:
    """Datasets named by --data, else every *.dataset.txt under --out."""
    paths = getattr(args, "data", None)
    if not paths:
        paths = sorted(glob.glob(_out_path(args, "*.dataset.txt")))
    if not paths:
        raise UsageError("no datasets: run synth first or pass --data")
    out = []
    for p in paths:
        ds = read_dataset(p)
        if ds.frames[0].visual_features.size != config.planner.feature_dim:
            raise UsageError(f"{p}: feature_dim does not match planner config")
        out.append(ds)
    return out


def _oracle(args):
    name = getattr(args, "oracle", "generator")
    if name == "generator":
        return partition.GeneratorOracle()
    if name == "null":
        return partition.NullOracle()
    raise UsageError(f"unknown oracle {name!r}")


def _partitioned(ds: RoadblockDataset, weights, oracle, config: RunConfig):
    result = partition.partition_roadblock(ds, weights, oracle,
                                           config.delta, config.radius)
    return partition.labeled_dataset(ds, result), result


def _load_partitioned(args, ds: RoadblockDataset) -> RoadblockDataset:
    """Apply a partition file's labels when one exists for the roadblock."""
    path = getattr(args, "partition", None) or _out_path(args, f"{ds.roadblock_id}.partition.txt")
    if getattr(args, "partition", None) is None and not os.path.exists(path):
        return ds  # fall back to the labels already in the dataset file
    result = partition.read_partition(path)
    if result.roadblock_id != ds.roadblock_id:
        raise UsageError(f"{path}: partition is for {result.roadblock_id}, "
                         f"dataset is {ds.roadblock_id}")
    return partition.labeled_dataset(ds, result)


def _prompt_record(path: str) -> RegistryRecord:
    with open(path, "rb") as fh:
        return payload_to_record(fh.read())


def _write_prompts(args, config: RunConfig, weights, roadblock_id: str,
                   prompt_a, prompt_b, name: str) -> str:
    d_model = weights.config.d_model
    if prompt_b is None:
        prompt_b = np.zeros((0, d_model))
    record = RegistryRecord(roadblock_id, prompt_a, prompt_b,
                            config.train.extract_layer, d_model,
                            weights_checksum(weights))
    path = _out_path(args, name)
    atomic_write_text(path, record_to_payload(record).decode("ascii"))
    return path


def _check_backbone(record: RegistryRecord, weights) -> None:
    if record.backbone_checksum != weights_checksum(weights):
        raise UsageError("prompt file was trained against a different backbone "
                         "(checksum mismatch); regenerate it or fix the config")


# -- commands ------------------------------------------------------------------

def cmd_synth(args) -> int:
    config = _load_config(args)
    _echo_config(args, config)
    suite = synth.generate_suite(config.dataset_seed, config.n_roadblocks, config.spec)
    for ds in suite:
        path = _out_path(args, f"{ds.roadblock_id}.dataset.txt")
        write_dataset(ds, path)
        print(f"{ds.roadblock_id}: {len(ds.train_frames)} train / "
              f"{len(ds.test_frames)} test frames -> {path}")
    return 0


def cmd_partition(args) -> int:
    config = _load_config(args)
    _echo_config(args, config)
    weights = init_frozen_weights(config.planner)
    oracle = _oracle(args)
    for ds in _datasets(args, config):
        _, result = _partitioned(ds, weights, oracle, config)
        path = _out_path(args, f"{ds.roadblock_id}.partition.txt")
        partition.write_partition(result, path)
        n_hard = len(result.challenging_ids)
        print(f"{ds.roadblock_id}: {n_hard} challenging / "
              f"{len(result.labels) - n_hard} normal, "
              f"{len(result.clusters)} clusters -> {path}")
    return 0


def cmd_stage1(args) -> int:
    config = _load_config(args)
    _echo_config(args, config)
    weights = init_frozen_weights(config.planner)
    for ds in _datasets(args, config):
        labeled = _load_partitioned(args, ds)
        prompt_a, report = train.train_stage1(weights, labeled.train_frames, config.train)
        train.write_report(report, _out_path(args, f"{ds.roadblock_id}.stage1.txt"))
        path = _write_prompts(args, config, weights, ds.roadblock_id,
                              prompt_a, None, f"{ds.roadblock_id}.prompt_a.txt")
        print(f"{ds.roadblock_id}: P_A {prompt_a.shape[0]}x{prompt_a.shape[1]} -> {path}")
    return 0


def cmd_stage2(args) -> int:
    config = _load_config(args)
    _echo_config(args, config)
    weights = init_frozen_weights(config.planner)
    for ds in _datasets(args, config):
        labeled = _load_partitioned(args, ds)
        pa_path = args.prompt_a or _out_path(args, f"{ds.roadblock_id}.prompt_a.txt")
        record = _prompt_record(pa_path)
        _check_backbone(record, weights)
        direction = train.discover_direction(weights, record.prompt_a,
                                             labeled.train_frames, config.train.k,
                                             config.train.extract_layer)
        train.write_direction(direction,
                              _out_path(args, f"{ds.roadblock_id}.direction.txt"))
        prompt_b, report = train.train_stage2(weights, record.prompt_a, direction,
                                              labeled.train_frames, config.train)
        train.write_report(report, _out_path(args, f"{ds.roadblock_id}.stage2.txt"))
        path = _write_prompts(args, config, weights, ds.roadblock_id,
                              record.prompt_a, prompt_b,
                              f"{ds.roadblock_id}.prompt.txt")
        print(f"{ds.roadblock_id}: prompt pair -> {path}")
    return 0


def cmd_clap(args) -> int:
    """Both stages end to end: synth, partition, train, evaluate."""
    config = _load_config(args)
    _echo_config(args, config)
    weights = init_frozen_weights(config.planner)
    oracle = _oracle(args)
    rows = []
    for ds in synth.generate_suite(config.dataset_seed, config.n_roadblocks, config.spec):
        write_dataset(ds, _out_path(args, f"{ds.roadblock_id}.dataset.txt"))
        labeled, result = _partitioned(ds, weights, oracle, config)
        partition.write_partition(result, _out_path(args, f"{ds.roadblock_id}.partition.txt"))

        res = train.train_clap(weights, labeled.train_frames, config.train)
        train.write_report(res.stage1_report, _out_path(args, f"{ds.roadblock_id}.stage1.txt"))
        train.write_report(res.stage2_report, _out_path(args, f"{ds.roadblock_id}.stage2.txt"))
        train.write_direction(res.direction, _out_path(args, f"{ds.roadblock_id}.direction.txt"))
        _write_prompts(args, config, weights, ds.roadblock_id,
                       res.prompt_pair.prompt_a, res.prompt_pair.prompt_b,
                       f"{ds.roadblock_id}.prompt.txt")

        frozen = evaluation.evaluate(weights, None, None, labeled.test_frames)
        clap = evaluation.evaluate(weights, res.prompt_pair.prompt_a,
                                   res.prompt_pair.prompt_b, labeled.test_frames)
        evaluation.write_eval_report("frozen", frozen,
                                     _out_path(args, f"{ds.roadblock_id}.eval.frozen.txt"))
        evaluation.write_eval_report("clap", clap,
                                     _out_path(args, f"{ds.roadblock_id}.eval.clap.txt"))
        rows.append((f"{ds.roadblock_id} frozen", frozen))
        rows.append((f"{ds.roadblock_id} clap", clap))

    table = evaluation.summary_table(rows)
    atomic_write_text(_out_path(args, "summary.txt"), table)
    print(table, end="")
    return 0


def cmd_baseline_prompt(args) -> int:
    config = _load_config(args)
    _echo_config(args, config)
    weights = init_frozen_weights(config.planner)
    for ds in _datasets(args, config):
        labeled = _load_partitioned(args, ds)
        prompt, report = train.train_unconstrained(weights, labeled.train_frames,
                                                   config.train)
        train.write_report(report, _out_path(args, f"{ds.roadblock_id}.baseline.txt"))
        _write_prompts(args, config, weights, ds.roadblock_id, prompt, None,
                       f"{ds.roadblock_id}.prompt_uncon.txt")
        rep = evaluation.evaluate(weights, prompt, None, labeled.test_frames)
        evaluation.write_eval_report("unconstrained", rep,
                                     _out_path(args, f"{ds.roadblock_id}.eval.uncon.txt"))
        print(evaluation.summary_table([(f"{ds.roadblock_id} uncon", rep)]), end="")
    return 0


def cmd_baseline_notice(args) -> int:
    """Explicit-notice baseline: hint tokens appended, no training at all."""
    config = _load_config(args)
    _echo_config(args, config)
    weights = init_frozen_weights(config.planner)
    for ds in _datasets(args, config):
        labeled = _load_partitioned(args, ds)
        noticed = [train.explicit_notice(f, config.notice_tokens)
                   for f in labeled.test_frames]
        rep = evaluation.evaluate(weights, None, None, noticed,
                                  baseline_frames=labeled.test_frames)
        evaluation.write_eval_report("notice", rep,
                                     _out_path(args, f"{ds.roadblock_id}.eval.notice.txt"))
        print(evaluation.summary_table([(f"{ds.roadblock_id} notice", rep)]), end="")
    return 0


def cmd_eval(args) -> int:
    config = _load_config(args)
    _echo_config(args, config)
    weights = init_frozen_weights(config.planner)
    for ds in _datasets(args, config):
        labeled = _load_partitioned(args, ds)
        pa, pb, name = None, None, "frozen"
        if args.prompt:
            record = _prompt_record(args.prompt)
            _check_backbone(record, weights)
            pa = record.prompt_a
            pb = record.prompt_b if record.prompt_b.shape[0] else None
            name = "prompted"
        rep = evaluation.evaluate(weights, pa, pb, labeled.test_frames)
        evaluation.write_eval_report(name, rep,
                                     _out_path(args, f"{ds.roadblock_id}.eval.{name}.txt"))
        print(evaluation.summary_table([(f"{ds.roadblock_id} {name}", rep)]), end="")
    return 0


def cmd_ablate(args) -> int:
    config = _load_config(args)
    _echo_config(args, config)
    weights = init_frozen_weights(config.planner)
    for ds in _datasets(args, config):
        labeled = _load_partitioned(args, ds)
        reports = evaluation.ablation_suite(weights, labeled, config.train)
        rows = []
        for name in ("frozen", "full", "no_dir", "random_dir"):
            evaluation.write_eval_report(
                name, reports[name],
                _out_path(args, f"{ds.roadblock_id}.eval.{name}.txt"))
            rows.append((f"{ds.roadblock_id} {name}", reports[name]))
        print(evaluation.summary_table(rows), end="")
    return 0


def cmd_compare_scope(args) -> int:
    config = _load_config(args)
    _echo_config(args, config)
    weights = init_frozen_weights(config.planner)
    labeled = [_load_partitioned(args, ds) for ds in _datasets(args, config)]
    report = evaluation.compare_scope(weights, labeled, config.train)
    evaluation.write_scope_report(report, _out_path(args, "scope.txt"))
    print(f"merged:        hard {report.merged_hard:.3f}  normal {report.merged_normal:.3f}")
    print(f"per-roadblock: hard {report.per_roadblock_hard:.3f}  "
          f"normal {report.per_roadblock_normal:.3f}")
    return 0


_SHIFTS = {"identity": identity_shift, "rain": rain_shift, "dusk": dusk_shift}


def cmd_shift_eval(args) -> int:
    config = _load_config(args)
    _echo_config(args, config)
    weights = init_frozen_weights(config.planner)
    feature_dim = config.planner.feature_dim
    for ds in _datasets(args, config):
        labeled = _load_partitioned(args, ds)
        pa, pb = None, None
        if args.prompt:
            record = _prompt_record(args.prompt)
            _check_backbone(record, weights)
            pa = record.prompt_a
            pb = record.prompt_b if record.prompt_b.shape[0] else None
        rows = []
        for name in args.conditions:
            if name not in _SHIFTS:
                raise UsageError(f"unknown condition {name!r}; "
                                 f"choose from {sorted(_SHIFTS)}")
            shift = _SHIFTS[name](feature_dim)
            rep = evaluation.evaluate(weights, pa, pb, labeled.test_frames,
                                      shift=shift, shift_seed=config.shift_seed)
            evaluation.write_eval_report(
                name, rep, _out_path(args, f"{ds.roadblock_id}.eval.shift.{name}.txt"))
            rows.append((f"{ds.roadblock_id} {name}", rep))
        print(evaluation.summary_table(rows), end="")
    return 0


def cmd_project(args) -> int:
    config = _load_config(args)
    _echo_config(args, config)
    weights = init_frozen_weights(config.planner)
    for ds in _datasets(args, config):
        labeled = _load_partitioned(args, ds)
        pa, pb = None, None
        if args.prompt:
            record = _prompt_record(args.prompt)
            _check_backbone(record, weights)
            pa = record.prompt_a
            pb = record.prompt_b if record.prompt_b.shape[0] else None
        rows = evaluation.latent_projection(weights, pa, pb, labeled.frames,
                                            config.train.extract_layer)
        path = _out_path(args, f"{ds.roadblock_id}.projection.txt")
        evaluation.write_projection(rows, path)
        print(f"{ds.roadblock_id}: {len(rows)} points -> {path}")
    return 0


# -- registry ------------------------------------------------------------------

def _store(args) -> PromptStore:
    root = args.store or os.environ.get("CLAP_REGISTRY_DIR")
    if not root:
        raise UsageError("no registry: pass --store or set CLAP_REGISTRY_DIR")
    return PromptStore(root)


def _endpoint(args) -> tuple[str, int] | None:
    if not args.endpoint:
        return None
    host, sep, port = args.endpoint.rpartition(":")
    if not sep or not port.isdigit():
        raise UsageError(f"--endpoint expects HOST:PORT, got {args.endpoint!r}")
    return host, int(port)


def cmd_registry(args) -> int:
    if args.registry_command == "serve":
        server = serve(_store(args), args.host, args.port, background=False)
        host, port = server.endpoint
        print(f"registry serving on {host}:{port}", flush=True)
        try:
            server.serve_forever()
        except KeyboardInterrupt:
            pass
        finally:
            server.server_close()
        return 0

    if args.registry_command == "put":
        with open(args.prompt_file, "rb") as fh:
            payload = fh.read()
        record = payload_to_record(payload)  # reject malformed files up front
        endpoint = _endpoint(args)
        if endpoint:
            with RegistryClient(*endpoint) as client:
                version = client.put(payload)
        else:
            version = _store(args).put_payload(record.roadblock_id, payload)
        print(f"{record.roadblock_id} v{version}")
        return 0

    if args.registry_command == "get":
        endpoint = _endpoint(args)
        if endpoint:
            with RegistryClient(*endpoint) as client:
                payload = client.get_payload(args.id, args.version)
        else:
            payload, _ = _store(args).get_payload(args.id, args.version)
        if args.out_file:
            atomic_write_text(args.out_file, payload.decode("ascii"))
            print(f"{args.id} -> {args.out_file}")
        else:
            sys.stdout.write(payload.decode("ascii"))
        return 0

    raise UsageError(f"unknown registry command {args.registry_command!r}")


def cmd_selfcheck(args) -> int:
    results = run_selfcheck(verbose=args.verbose)
    print(format_results(results), end="")
    return 0 if all(r.passed for r in results) else 1


# -- parser --------------------------------------------------------------------

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="run-config file (clap-config v1)")
    p.add_argument("--set", action="append", dest="overrides", default=[],
                   metavar="KEY=VALUE", help="override one config field, "
                   "e.g. --set train.stage2_epochs=20")
    p.add_argument("--seed", type=int, help="dataset seed")
    p.add_argument("--out", default=".", help="output directory")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--tau", type=float, help="SupCon temperature")
    p.add_argument("--lambda1", type=float, help="direction loss weight")
    p.add_argument("--lambda2", type=float, help="regularization loss weight")
    p.add_argument("--k", type=int, help="number of latent directions")
    p.add_argument("--prompt-len-a", dest="prompt_len_a", type=int, help="P_A rows")
    p.add_argument("--prompt-len-b", dest="prompt_len_b", type=int, help="P_B rows")


def _add_data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", nargs="+",
                   help="dataset file(s); default: *.dataset.txt under --out")
    p.add_argument("--partition", help="partition file overriding dataset labels")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="clapopt",
        description="contrastive latent-space prompt optimization "
                    "against a frozen toy planner")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic roadblock suite")
    _add_common(p)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("partition", help="split frames into challenging/normal")
    _add_common(p)
    p.add_argument("--data", nargs="+", help="dataset file(s)")
    p.add_argument("--delta", type=float, help="validation margin")
    p.add_argument("--oracle", default="generator", choices=("generator", "null"))
    p.set_defaults(fn=cmd_partition)

    p = sub.add_parser("stage1", help="train P_A with the contrastive loss")
    _add_common(p)
    _add_train_flags(p)
    _add_data_flags(p)
    p.set_defaults(fn=cmd_stage1)

    p = sub.add_parser("stage2", help="discover directions and train P_B")
    _add_common(p)
    _add_train_flags(p)
    _add_data_flags(p)
    p.add_argument("--prompt-a", dest="prompt_a", help="P_A prompt file from stage1")
    p.set_defaults(fn=cmd_stage2)

    p = sub.add_parser("clap", help="full pipeline: synth, partition, both stages, eval")
    _add_common(p)
    _add_train_flags(p)
    p.add_argument("--delta", type=float, help="validation margin")
    p.add_argument("--oracle", default="generator", choices=("generator", "null"))
    p.set_defaults(fn=cmd_clap)

    p = sub.add_parser("baseline-prompt", help="unconstrained soft-prompt baseline")
    _add_common(p)
    _add_train_flags(p)
    _add_data_flags(p)
    p.set_defaults(fn=cmd_baseline_prompt)

    p = sub.add_parser("baseline-notice", help="explicit hazard-notice baseline")
    _add_common(p)
    _add_data_flags(p)
    p.set_defaults(fn=cmd_baseline_notice)

    p = sub.add_parser("eval", help="ADE report for a prompt file (or frozen)")
    _add_common(p)
    _add_data_flags(p)
    p.add_argument("--prompt", help="prompt pair file; omit for the frozen baseline")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="frozen / full / no-dir / random-dir table")
    _add_common(p)
    _add_train_flags(p)
    _add_data_flags(p)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("compare-scope", help="merged vs per-roadblock prompts")
    _add_common(p)
    _add_train_flags(p)
    _add_data_flags(p)
    p.set_defaults(fn=cmd_compare_scope)

    p = sub.add_parser("shift-eval", help="evaluate under condition shifts")
    _add_common(p)
    _add_data_flags(p)
    p.add_argument("--prompt", help="prompt pair file; omit for the frozen baseline")
    p.add_argument("--conditions", nargs="+", default=["identity", "rain", "dusk"])
    p.set_defaults(fn=cmd_shift_eval)

    p = sub.add_parser("project", help="2-D latent projection for plotting")
    _add_common(p)
    _add_data_flags(p)
    p.add_argument("--prompt", help="prompt pair file; omit for the frozen baseline")
    p.set_defaults(fn=cmd_project)

    p = sub.add_parser("registry", help="prompt store: serve, put, get")
    rsub = p.add_subparsers(dest="registry_command", required=True)
    rp = rsub.add_parser("serve", help="serve the store over the wire protocol")
    rp.add_argument("--store", help="store root (default: $CLAP_REGISTRY_DIR)")
    rp.add_argument("--host", default="127.0.0.1")
    rp.add_argument("--port", type=int, default=0, help="0 picks a free port")
    rp.set_defaults(fn=cmd_registry)
    rp = rsub.add_parser("put", help="upload a prompt file")
    rp.add_argument("prompt_file")
    rp.add_argument("--store", help="store root (default: $CLAP_REGISTRY_DIR)")
    rp.add_argument("--endpoint", help="HOST:PORT of a running registry")
    rp.set_defaults(fn=cmd_registry)
    rp = rsub.add_parser("get", help="fetch a prompt payload")
    rp.add_argument("id")
    rp.add_argument("--version", type=int)
    rp.add_argument("--store", help="store root (default: $CLAP_REGISTRY_DIR)")
    rp.add_argument("--endpoint", help="HOST:PORT of a running registry")
    rp.add_argument("--out-file", dest="out_file", help="write payload here "
                    "instead of stdout")
    rp.set_defaults(fn=cmd_registry)

    p = sub.add_parser("selfcheck", help="gradient and oracle invariant suite")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(fn=cmd_selfcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError, registry.NotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
