"""Experiment runner: JSON configs in, verified runs and CSV records out.

Exit codes: 0 success, 2 config error, 3 correctness-oracle failure,
4 internal simulation invariant violation.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import sys
import time
from dataclasses import dataclass, field, fields as dc_fields
from typing import Dict, List, Optional, Sequence, Tuple

from . import analysis, baselines
from .allgather import AllgatherConfig, allgather, verify_allgather
from .broadcast import BroadcastConfig, CollectiveResult, broadcast, chunk_count
from .fabric import Fabric, FaultModel, SimInvariantError
from .topology import Topology, build_clos
from .transport import ImmediateLayout

ALGORITHMS = (
    "mc_broadcast",
    "mc_allgather",
    "ring_allgather",
    "linear_allgather",
    "binary_tree_bcast",
    "knomial_bcast",
)

BROADCAST_ALGORITHMS = ("mc_broadcast", "binary_tree_bcast", "knomial_bcast")

# Version of the fixed RunRecord column set below; bump on any change.
SCHEMA_VERSION = 1

CSV_COLUMNS = [
    "experiment_id", "algorithm", "P", "N", "mtu", "S", "M", "transport",
    "drop_prob", "seed", "iteration", "total_link_bytes", "fastpath_bytes",
    "recovery_bytes", "control_bytes", "per_rank_send_bytes",
    "per_rank_recv_bytes", "rnr_drops", "fabric_drops",
    "max_concurrent_roots", "sim_time", "verified", "wall_clock_s",
]


class ConfigError(ValueError):
    """Invalid experiment configuration (exit code 2)."""


class OracleError(RuntimeError):
    """A correctness oracle failed on a finished run (exit code 3)."""


@dataclass
class ExperimentConfig:
    """One experiment: a topology, an algorithm and its knobs."""

    algorithm: str
    participants: int
    buffer_bytes: int
    leaf_switches: int = 4
    nodes_per_leaf: int = 4
    core_switches: int = 2
    link_bandwidth: float = 25e9
    hop_latency: float = 1e-6
    experiment_id: str = "exp"
    mtu: int = 4096
    subgroups: int = 1
    chains: int = 1
    transport: str = "UD"
    drop_prob: float = 0.0
    reorder_prob: float = 0.0
    reorder_max_displacement: int = 8
    alpha: Optional[float] = None
    seed: int = 0
    iterations: int = 1
    header_bytes: int = 0
    rnr_barrier: bool = True
    leaf_setup_time: Optional[float] = None
    knomial_k: int = 4
    root: int = 0
    queue_depth: int = 8192
    uc_chunk_bytes: int = 16384
    psn_bits: int = 24
    collective_id_bits: int = 8

    def validate(self) -> None:
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {self.algorithm!r}; pick one of {ALGORITHMS}")
        if min(self.leaf_switches, self.nodes_per_leaf, self.core_switches) < 1:
            raise ConfigError("topology counts must all be >= 1")
        if self.link_bandwidth <= 0 or self.hop_latency < 0:
            raise ConfigError("link_bandwidth must be > 0 and hop_latency >= 0")
        cluster = self.leaf_switches * self.nodes_per_leaf
        if not 1 <= self.participants <= cluster:
            raise ConfigError(
                f"participants ({self.participants}) must be in [1, {cluster}] "
                f"for this topology")
        if self.buffer_bytes < 1:
            raise ConfigError("buffer_bytes must be >= 1")
        if self.mtu < 1:
            raise ConfigError("mtu must be >= 1")
        if self.transport not in ("UD", "UC"):
            raise ConfigError(f"transport must be UD or UC, not {self.transport!r}")
        if self.transport == "UC" and self.uc_chunk_bytes < 1:
            raise ConfigError("uc_chunk_bytes must be >= 1")
        chunk = self.mtu if self.transport == "UD" else self.uc_chunk_bytes
        chunks = chunk_count(self.buffer_bytes, chunk)
        if not 1 <= self.subgroups <= chunks:
            raise ConfigError(
                f"subgroups ({self.subgroups}) must be in [1, {chunks}] "
                f"(one chunk minimum per subgroup)")
        if self.algorithm == "mc_allgather":
            if self.chains < 1 or self.participants % self.chains != 0:
                raise ConfigError(
                    f"chains ({self.chains}) must divide participants ({self.participants})")
            if self.participants - 1 > (1 << self.collective_id_bits) - 1:
                raise ConfigError(
                    f"{self.participants} sources do not fit in "
                    f"{self.collective_id_bits} collective-id bits")
        if self.algorithm == "ring_allgather" and self.participants < 2:
            raise ConfigError("ring_allgather needs at least 2 participants")
        if not 0.0 <= self.drop_prob <= 1.0 or not 0.0 <= self.reorder_prob <= 1.0:
            raise ConfigError("drop_prob and reorder_prob must be in [0, 1]")
        if self.reorder_max_displacement < 1:
            raise ConfigError("reorder_max_displacement must be >= 1")
        if self.alpha is not None and self.alpha < 0:
            raise ConfigError("alpha must be >= 0")
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if self.header_bytes < 0:
            raise ConfigError("header_bytes must be >= 0")
        if self.knomial_k < 2:
            raise ConfigError("knomial_k must be >= 2")
        if not 0 <= self.root < self.participants:
            raise ConfigError(f"root ({self.root}) must be in [0, {self.participants})")
        if self.queue_depth < 1:
            raise ConfigError("queue_depth must be >= 1")
        if self.psn_bits + self.collective_id_bits != 32 or self.psn_bits < 1:
            raise ConfigError("psn_bits + collective_id_bits must equal 32")
        if chunks - 1 > (1 << self.psn_bits) - 1:
            raise ConfigError(
                f"buffer of {chunks} chunks exceeds the {self.psn_bits}-bit PSN space")

    @classmethod
    def from_json_dict(cls, doc: dict) -> "ExperimentConfig":
        doc = dict(doc)
        topo = doc.pop("topology", {})
        if not isinstance(topo, dict):
            raise ConfigError("'topology' must be an object")
        merged = dict(topo)
        merged.update(doc)
        known = {f.name for f in dc_fields(cls)}
        unknown = set(merged) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        missing = [k for k in ("algorithm", "participants", "buffer_bytes") if k not in merged]
        if missing:
            raise ConfigError(f"missing required config keys: {missing}")
        try:
            cfg = cls(**merged)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None
        cfg.validate()
        return cfg

    @classmethod
    def from_json_file(cls, path: str) -> "ExperimentConfig":
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
        return cls.from_json_dict(doc)

    def replaced(self, **overrides) -> "ExperimentConfig":
        doc = {f.name: getattr(self, f.name) for f in dc_fields(self)}
        doc.update(overrides)
        cfg = ExperimentConfig(**doc)
        cfg.validate()
        return cfg

    def immediate_layout(self) -> ImmediateLayout:
        return ImmediateLayout(self.psn_bits, self.collective_id_bits)

    def build_topology(self) -> Topology:
        return build_clos(self.leaf_switches, self.nodes_per_leaf, self.core_switches,
                          self.link_bandwidth, self.hop_latency)

    def fault_model(self) -> FaultModel:
        return FaultModel(self.drop_prob, self.reorder_prob, self.reorder_max_displacement)


@dataclass
class RunRecord:
    """One (config, iteration) outcome; the CSV row schema is versioned."""

    experiment_id: str
    algorithm: str
    P: int
    N: int
    mtu: int
    S: int
    M: int
    transport: str
    drop_prob: float
    seed: int
    iteration: int
    total_link_bytes: int
    fastpath_bytes: int
    recovery_bytes: int
    control_bytes: int
    per_rank_send_bytes: int
    per_rank_recv_bytes: int
    rnr_drops: int
    fabric_drops: int
    max_concurrent_roots: int
    sim_time: float
    verified: bool
    wall_clock_s: float
    payload_link_bytes: int = 0  # not part of the CSV schema; used by compare

    def csv_row(self) -> List[str]:
        vals = []
        for col in CSV_COLUMNS:
            v = getattr(self, col)
            if isinstance(v, float):
                vals.append(repr(v))
            elif isinstance(v, bool):
                vals.append(str(v))
            else:
                vals.append(str(v))
        return vals


def write_records_csv(path: str, records: Sequence[RunRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for rec in records:
            w.writerow(rec.csv_row())


def _verify(config: ExperimentConfig, result: CollectiveResult) -> Tuple[bool, str]:
    if config.algorithm in BROADCAST_ALGORITHMS:
        root_buf = result.send_buffers[config.root]
        for rank in sorted(result.recv_buffers):
            if rank == config.root:
                continue
            if result.buffer_for(rank) != root_buf:
                return False, f"rank {rank} buffer differs from root's"
        return True, ""
    ok, where = verify_allgather(result)
    if not ok:
        rank, source, off = where
        return False, f"rank {rank} mismatch in source {source} block at offset {off}"
    return True, ""


def _dispatch(config: ExperimentConfig, fabric: Fabric) -> CollectiveResult:
    ranks = list(range(config.participants))
    if config.algorithm == "mc_broadcast":
        bc = BroadcastConfig(
            root=config.root, participants=ranks, buffer_bytes=config.buffer_bytes,
            mtu=config.mtu, subgroups=config.subgroups, alpha=config.alpha,
            transport=config.transport, uc_chunk_bytes=config.uc_chunk_bytes,
            immediate=config.immediate_layout(), rnr_barrier=config.rnr_barrier,
            leaf_setup_time=config.leaf_setup_time, queue_depth=config.queue_depth)
        return broadcast(bc, fabric)
    if config.algorithm == "mc_allgather":
        ag = AllgatherConfig(
            participants=ranks, buffer_bytes=config.buffer_bytes, mtu=config.mtu,
            subgroups=config.subgroups, concurrent_roots=config.chains,
            alpha=config.alpha, transport=config.transport,
            uc_chunk_bytes=config.uc_chunk_bytes, immediate=config.immediate_layout(),
            rnr_barrier=config.rnr_barrier, leaf_setup_time=config.leaf_setup_time,
            queue_depth=config.queue_depth)
        return allgather(ag, fabric)
    if config.algorithm == "ring_allgather":
        return baselines.ring_allgather(ranks, config.buffer_bytes, fabric)
    if config.algorithm == "linear_allgather":
        return baselines.linear_allgather(ranks, config.buffer_bytes, fabric)
    if config.algorithm == "binary_tree_bcast":
        return baselines.binary_tree_bcast(config.root, ranks, config.buffer_bytes, fabric)
    if config.algorithm == "knomial_bcast":
        return baselines.knomial_bcast(config.root, ranks, config.buffer_bytes, fabric,
                                       k=config.knomial_k)
    raise ConfigError(f"unknown algorithm {config.algorithm!r}")


def run_experiment(config: ExperimentConfig, seed: Optional[int] = None,
                   trace: Optional[list] = None) -> List[RunRecord]:
    """Execute all iterations of one config; every run is oracle-checked.

    Iteration i runs with seed base_seed + i so repeated iterations explore
    distinct fault patterns while staying reproducible.
    """
    config.validate()
    base_seed = config.seed if seed is None else seed
    records = []
    failures = []
    for it in range(config.iterations):
        run_seed = base_seed + it
        iter_trace = [] if trace is not None else None
        t0 = time.perf_counter()
        topology = config.build_topology()
        fabric = Fabric(topology, config.fault_model(), seed=run_seed, mtu=config.mtu,
                        header_bytes=config.header_bytes, trace=iter_trace)
        result = _dispatch(config, fabric)
        ok, why = _verify(config, result)
        wall = time.perf_counter() - t0
        if trace is not None:
            for rec in iter_trace:
                rec = dict(rec)
                rec["iteration"] = it
                trace.append(rec)
        s = result.stats
        records.append(RunRecord(
            experiment_id=config.experiment_id,
            algorithm=config.algorithm,
            P=config.participants,
            N=config.buffer_bytes,
            mtu=config.mtu,
            S=config.subgroups,
            M=config.chains if config.algorithm == "mc_allgather" else 0,
            transport=config.transport,
            drop_prob=config.drop_prob,
            seed=run_seed,
            iteration=it,
            total_link_bytes=s.total_link_bytes,
            fastpath_bytes=s.fastpath_bytes,
            recovery_bytes=s.recovery_bytes,
            control_bytes=s.control_bytes,
            per_rank_send_bytes=max(s.per_rank_send_bytes.values(), default=0),
            per_rank_recv_bytes=max(s.per_rank_recv_bytes.values(), default=0),
            rnr_drops=s.rnr_drops,
            fabric_drops=s.fabric_drops,
            max_concurrent_roots=s.max_concurrent_roots,
            sim_time=s.sim_time,
            verified=ok,
            wall_clock_s=wall,
            payload_link_bytes=s.payload_link_bytes,
        ))
        if not ok:
            failures.append(f"iteration {it} (seed {run_seed}): {why}")
    if failures:
        raise OracleError(
            f"{config.algorithm} failed the correctness oracle: " + "; ".join(failures))
    return records


@dataclass
class CompareReport:
    """Traffic comparison of two configs (single run each)."""

    record_a: RunRecord
    record_b: RunRecord
    payload_ratio_b_over_a: float
    total_ratio_b_over_a: float

    def lines(self) -> List[str]:
        a, b = self.record_a, self.record_b
        return [
            f"A: {a.algorithm} P={a.P} N={a.N} payload_link_bytes={a.payload_link_bytes} "
            f"total_link_bytes={a.total_link_bytes} per_rank_send={a.per_rank_send_bytes} "
            f"per_rank_recv={a.per_rank_recv_bytes} recovery={a.recovery_bytes}",
            f"B: {b.algorithm} P={b.P} N={b.N} payload_link_bytes={b.payload_link_bytes} "
            f"total_link_bytes={b.total_link_bytes} per_rank_send={b.per_rank_send_bytes} "
            f"per_rank_recv={b.per_rank_recv_bytes} recovery={b.recovery_bytes}",
            f"payload_ratio (B/A): {self.payload_ratio_b_over_a!r}",
            f"total_ratio   (B/A): {self.total_ratio_b_over_a!r}",
        ]


def compare(config_a: ExperimentConfig, config_b: ExperimentConfig,
            seed: Optional[int] = None) -> CompareReport:
    rec_a = run_experiment(config_a.replaced(iterations=1), seed=seed)[0]
    rec_b = run_experiment(config_b.replaced(iterations=1), seed=seed)[0]
    return CompareReport(
        rec_a, rec_b,
        payload_ratio_b_over_a=rec_b.payload_link_bytes / rec_a.payload_link_bytes,
        total_ratio_b_over_a=rec_b.total_link_bytes / rec_a.total_link_bytes,
    )


def parse_vary(specs: Sequence[str]) -> Dict[str, List[object]]:
    """Parse repeated --vary key=v1,v2,... flags."""
    out: Dict[str, List[object]] = {}
    for spec in specs:
        if "=" not in spec:
            raise ConfigError(f"--vary expects key=v1,v2,... not {spec!r}")
        key, _, vals = spec.partition("=")
        parsed: List[object] = []
        for v in vals.split(","):
            v = v.strip()
            if v.lower() in ("true", "false"):
                parsed.append(v.lower() == "true")
                continue
            try:
                parsed.append(int(v))
            except ValueError:
                try:
                    parsed.append(float(v))
                except ValueError:
                    parsed.append(v)
        if not parsed:
            raise ConfigError(f"--vary {key} has no values")
        out[key] = parsed
    return out


def sweep(template: ExperimentConfig, vary: Dict[str, Sequence[object]]) -> List[RunRecord]:
    """Run the cartesian product of the varied parameters over the template."""
    keys = sorted(vary)
    records: List[RunRecord] = []
    for combo in itertools.product(*(vary[k] for k in keys)):
        overrides = dict(zip(keys, combo))
        cfg = template.replaced(**overrides)
        records.extend(run_experiment(cfg))
    return records


def write_trace(path: str, trace: Sequence[dict]) -> None:
    with open(path, "w") as fh:
        for rec in trace:
            fh.write(json.dumps(rec, sort_keys=True))
            fh.write("\n")


def _cmd_run(args: argparse.Namespace) -> int:
    config = ExperimentConfig.from_json_file(args.config)
    trace = [] if args.trace else None
    records = run_experiment(config, seed=args.seed, trace=trace)
    if args.out:
        write_records_csv(args.out, records)
    if args.trace:
        write_trace(args.trace, trace)
    if not args.quiet:
        for rec in records:
            print(",".join(rec.csv_row()))
    return 0


def _cmd_compare(args: argparse.Namespace) -> int:
    config_a = ExperimentConfig.from_json_file(args.config_a)
    config_b = ExperimentConfig.from_json_file(args.config_b)
    report = compare(config_a, config_b, seed=args.seed)
    if args.out:
        write_records_csv(args.out, [report.record_a, report.record_b])
    if not args.quiet:
        for line in report.lines():
            print(line)
    return 0


def _cmd_sweep(args: argparse.Namespace) -> int:
    template = ExperimentConfig.from_json_file(args.config)
    vary = parse_vary(args.vary or [])
    if not vary:
        raise ConfigError("sweep needs at least one --vary key=v1,v2,...")
    records = sweep(template, vary)
    if args.out:
        write_records_csv(args.out, records)
    if not args.quiet:
        print(f"{len(records)} runs, all verified")
    return 0


def _cmd_model(args: argparse.Namespace) -> int:
    table = analysis.model_table(
        participants=args.participants, buffer_bytes=args.buffer_bytes,
        leaf_switches=args.leaf_switches, psn_bits=args.psn_bits,
        mtu=args.mtu, queue_depth=args.queue_depth)
    if args.csv:
        w = csv.writer(sys.stdout)
        w.writerow(table.keys())
        w.writerow(table.values())
    else:
        width = max(len(k) for k in table)
        for k, v in table.items():
            print(f"{k:<{width}}  {v}")
    return 0


def _cmd_validate(args: argparse.Namespace) -> int:
    config = ExperimentConfig.from_json_file(args.config)
    if not args.quiet:
        print(f"config ok: {config.algorithm} P={config.participants} "
              f"N={config.buffer_bytes}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mcastcoll",
        description="Multicast collective protocol simulator and traffic models")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one experiment config")
    p_run.add_argument("--config", required=True, help="JSON experiment config")
    p_run.add_argument("--seed", type=int, default=None, help="override the config seed")
    p_run.add_argument("--out", default=None, help="write RunRecords CSV here")
    p_run.add_argument("--trace", default=None, help="write a JSONL event trace here")
    p_run.add_argument("--quiet", action="store_true")
    p_run.set_defaults(fn=_cmd_run)

    p_cmp = sub.add_parser("compare", help="run two configs and report traffic ratios")
    p_cmp.add_argument("config_a", help="JSON config A (e.g. mc_allgather)")
    p_cmp.add_argument("config_b", help="JSON config B (e.g. ring_allgather)")
    p_cmp.add_argument("--seed", type=int, default=None)
    p_cmp.add_argument("--out", default=None)
    p_cmp.add_argument("--quiet", action="store_true")
    p_cmp.set_defaults(fn=_cmd_compare)

    p_sweep = sub.add_parser("sweep", help="cartesian sweep over a template config")
    p_sweep.add_argument("--config", required=True)
    p_sweep.add_argument("--vary", action="append",
                         help="key=v1,v2,... (repeatable)")
    p_sweep.add_argument("--out", required=True)
    p_sweep.add_argument("--quiet", action="store_true")
    p_sweep.set_defaults(fn=_cmd_sweep)

    p_model = sub.add_parser("model", help="print the analytic cost model table")
    p_model.add_argument("--participants", type=int, required=True)
    p_model.add_argument("--buffer-bytes", type=int, dest="buffer_bytes", required=True)
    p_model.add_argument("--leaf-switches", type=int, dest="leaf_switches", default=4)
    p_model.add_argument("--psn-bits", type=int, dest="psn_bits", default=24)
    p_model.add_argument("--mtu", type=int, default=4096)
    p_model.add_argument("--queue-depth", type=int, dest="queue_depth", default=8192)
    p_model.add_argument("--csv", action="store_true")
    p_model.set_defaults(fn=_cmd_model)

    p_val = sub.add_parser("validate-config", help="validate a config and exit")
    p_val.add_argument("--config", required=True)
    p_val.add_argument("--quiet", action="store_true")
    p_val.set_defaults(fn=_cmd_validate)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except OracleError as exc:
        print(f"oracle failure: {exc}", file=sys.stderr)
        return 3
    except SimInvariantError as exc:
        print(f"internal invariant violation: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
