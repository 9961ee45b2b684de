"""Run configs, table reproduction, parameter-budget sweeps and run artifacts."""

from __future__ import annotations

import csv
import io
import json
import logging
import statistics
from dataclasses import dataclass, field, replace
from fractions import Fraction
from importlib import resources
from pathlib import Path
from typing import Iterable, Optional, Sequence

from .checkpoint import save_checkpoint
from .core import TrainConfig, TrainHistory, evaluate, init_model, train
from .data import Dataset
from .errors import ConfigError
from .pipeline.runner import ChannelModel
from .split_ee import ExitPolicy, SplitPlan, attach_exit, head_features, split_model, train_exit
from .topology import (
    NeuronalConfig,
    count_parameters,
    enumerate_degree_pairs,
    network_density,
    validate_config,
)

log = logging.getLogger(__name__)

KINDS = ("deep", "shallow", "sparse")


@dataclass(frozen=True)
class SplitSettings:
    s: Optional[int] = None
    branch_hidden_widths: tuple[int, ...] = ()
    tau: float = 0.9


@dataclass(frozen=True)
class RunConfig:
    kind: str
    layer_sizes: tuple[int, ...]
    out_degrees: tuple[int, ...]
    train: TrainConfig = field(default_factory=TrainConfig)
    split: Optional[SplitSettings] = None
    channel: Optional[ChannelModel] = None
    output_dir: str = "runs/default"
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"kind must be one of {KINDS}, got {self.kind!r}")
        sizes = tuple(self.layer_sizes)
        degrees = tuple(self.out_degrees) if self.out_degrees else ()
        if self.kind in ("deep", "shallow"):
            full = sizes[1:]
            if degrees and degrees != full:
                raise ConfigError(f"{self.kind} networks are fully connected; out_degrees must be {list(full)}")
            degrees = full
            hidden = len(sizes) - 2
            if self.kind == "shallow" and hidden != 1:
                raise ConfigError("a shallow network has exactly one hidden layer")
            if self.kind == "deep" and hidden < 2:
                raise ConfigError("a deep network has at least two hidden layers")
        elif not degrees:
            raise ConfigError("sparse runs need out_degrees")
        object.__setattr__(self, "layer_sizes", sizes)
        object.__setattr__(self, "out_degrees", degrees)
        validate_config(self.network)

    @property
    def network(self) -> NeuronalConfig:
        return NeuronalConfig(self.layer_sizes, self.out_degrees)


def _ints(value: str) -> tuple[int, ...]:
    value = value.strip()
    if not value:
        return ()
    try:
        return tuple(int(v) for v in value.replace(" ", ",").split(",") if v)
    except ValueError:
        raise ConfigError(f"expected a comma-separated integer list, got {value!r}") from None


def _bool(value: str) -> bool:
    v = value.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {value!r}")


_TRAIN_KEYS = {"epochs": int, "learning_rate": float, "batch_size": int, "seed": int, "shuffle_each_epoch": _bool}
_CHANNEL_KEYS = {"bandwidth_bytes_per_s": float, "rtt_s": float, "mode": str}


def parse_run_config(text: str) -> RunConfig:
    """Parse the flat ``key = value`` format (``#`` starts a comment).

    Top-level keys are RunConfig fields; nested fields use dotted keys such as
    ``train.epochs``, ``split.tau`` or ``channel.rtt_s``.  Lists are
    comma-separated.
    """
    top: dict = {}
    train_kw: dict = {}
    split_kw: dict = {}
    channel_kw: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = key.strip(), value.strip()
        try:
            if key in ("kind", "output_dir"):
                top[key] = value
            elif key in ("layer_sizes", "out_degrees"):
                top[key] = _ints(value)
            elif key == "seed":
                top[key] = int(value)
            elif key.startswith("train.") and key[6:] in _TRAIN_KEYS:
                train_kw[key[6:]] = _TRAIN_KEYS[key[6:]](value)
            elif key.startswith("channel.") and key[8:] in _CHANNEL_KEYS:
                channel_kw[key[8:]] = _CHANNEL_KEYS[key[8:]](value)
            elif key == "split.s":
                split_kw["s"] = int(value) if value else None
            elif key == "split.branch_hidden_widths":
                split_kw["branch_hidden_widths"] = _ints(value)
            elif key == "split.tau":
                split_kw["tau"] = float(value)
            else:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"line {lineno}: bad value for {key}: {value!r}") from None
    for required in ("kind", "layer_sizes"):
        if required not in top:
            raise ConfigError(f"missing required key {required!r}")
    seed = top.get("seed", 0)
    train_kw.setdefault("seed", seed)
    return RunConfig(
        kind=top["kind"],
        layer_sizes=top["layer_sizes"],
        out_degrees=top.get("out_degrees", ()),
        train=TrainConfig(**train_kw),
        split=SplitSettings(**split_kw) if split_kw else None,
        channel=ChannelModel(**channel_kw) if channel_kw else None,
        output_dir=top.get("output_dir", "runs/default"),
        seed=seed,
    )


def format_run_config(cfg: RunConfig) -> str:
    lines = [
        f"kind = {cfg.kind}",
        f"layer_sizes = {','.join(map(str, cfg.layer_sizes))}",
        f"out_degrees = {','.join(map(str, cfg.out_degrees))}",
        f"seed = {cfg.seed}",
        f"output_dir = {cfg.output_dir}",
        f"train.epochs = {cfg.train.epochs}",
        f"train.learning_rate = {cfg.train.learning_rate!r}",
        f"train.batch_size = {cfg.train.batch_size}",
        f"train.seed = {cfg.train.seed}",
        f"train.shuffle_each_epoch = {str(cfg.train.shuffle_each_epoch).lower()}",
    ]
    if cfg.split is not None:
        lines += [
            f"split.s = {'' if cfg.split.s is None else cfg.split.s}",
            f"split.branch_hidden_widths = {','.join(map(str, cfg.split.branch_hidden_widths))}",
            f"split.tau = {cfg.split.tau!r}",
        ]
    if cfg.channel is not None:
        lines += [
            f"channel.bandwidth_bytes_per_s = {cfg.channel.bandwidth_bytes_per_s!r}",
            f"channel.rtt_s = {cfg.channel.rtt_s!r}",
            f"channel.mode = {cfg.channel.mode}",
        ]
    return "\n".join(lines) + "\n"


def network_summary(config: NeuronalConfig) -> dict:
    rho = network_density(validate_config(config))
    return {
        "layer_sizes": list(config.layer_sizes),
        "out_degrees": list(config.out_degrees),
        "params": count_parameters(config),
        "rho_net": f"{rho.numerator}/{rho.denominator}",
        "rho_net_float": round(float(rho), 6),
    }


@dataclass
class RunResult:
    summary: dict
    history: TrainHistory


def execute_run(cfg: RunConfig, train_set: Dataset, test_set: Dataset, out_dir=None) -> RunResult:
    """Train one configuration and write checkpoint, history CSV and summary JSON."""
    out = Path(out_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    model = init_model(cfg.network, cfg.seed)
    history = train(model, train_set, test_set, cfg.train)
    summary = {"kind": cfg.kind, **network_summary(cfg.network)}
    summary["accuracy"] = round(evaluate(model, test_set), 6)
    summary.update(seed=cfg.seed, epochs=cfg.train.epochs, learning_rate=cfg.train.learning_rate,
                   batch_size=cfg.train.batch_size)

    plan = policy = branch = None
    if cfg.split is not None:
        plan = SplitPlan.for_config(cfg.network, cfg.split.s)
        policy = ExitPolicy(cfg.split.tau)
        head, _ = split_model(model, plan.split_junction)
        branch = attach_exit(head, cfg.split.branch_hidden_widths, cfg.seed + 1, cfg.layer_sizes[-1])
        train_exit(head, branch, train_set, cfg.train)
        summary["split"] = {
            "s": plan.split_junction,
            "split_width": plan.split_width,
            "tau": policy.threshold,
            "branch_params": branch.n_parameters(),
            "branch_accuracy": round(evaluate(branch.net, head_features(head, test_set)), 6),
        }
    save_checkpoint(out / "model.spmlp", model, plan, policy, branch)
    (out / "history.csv").write_text(history.to_csv())
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    log.info("%s %s: accuracy %.4f (%d params, %.1fs)", cfg.kind, cfg.network, summary["accuracy"],
             summary["params"], history.seconds)
    return RunResult(summary, history)


# ---------------------------------------------------------------------------
# published tables


@dataclass(frozen=True)
class TableRow:
    table: str
    row: int
    kind: str
    layer_sizes: tuple[int, ...]
    out_degrees: tuple[int, ...]
    accuracy: float
    params: int

    @property
    def group(self) -> int:
        return (self.row - 1) // 3

    @property
    def network(self) -> NeuronalConfig:
        return NeuronalConfig(self.layer_sizes, self.out_degrees)


def published_table(which: str) -> list[TableRow]:
    if which not in ("head", "tail"):
        raise ConfigError(f"table must be 'head' or 'tail', got {which!r}")
    text = resources.files(__package__).joinpath("published_tables.csv").read_text()
    rows = []
    for rec in csv.DictReader(io.StringIO(text)):
        if rec["table"] != which:
            continue
        rows.append(TableRow(
            rec["table"], int(rec["row"]), rec["kind"],
            _ints(rec["layer_sizes"]), _ints(rec["out_degrees"]),
            float(rec["accuracy"]), int(rec["params"]),
        ))
    return rows


def parameter_check(rows: Sequence[TableRow]) -> list[dict]:
    """Compare computed parameter counts with the transcribed cells.

    A mismatch is labelled ``swapped`` when the computed value of a row equals
    the printed value of another row in the same budget group and vice versa.
    """
    computed = {r.row: count_parameters(r.network) for r in rows}
    out = []
    for r in rows:
        status = "exact" if computed[r.row] == r.params else "mismatch"
        if status == "mismatch":
            for other in rows:
                if (other.row != r.row and other.group == r.group
                        and computed[r.row] == other.params and computed[other.row] == r.params):
                    status = f"swapped-with-row-{other.row}"
        out.append({"row": r.row, "params": computed[r.row], "published_params": r.params, "status": status})
    return out


TABLE_COLUMNS = [
    "table", "row", "kind", "layer_sizes", "out_degrees", "params", "published_params", "params_match",
    "params_note", "rho_net", "accuracy", "published_accuracy", "accuracy_deviation",
]


def reproduce_table(
    which: str,
    train_set: Optional[Dataset],
    test_set: Optional[Dataset],
    out_dir,
    train_cfg: TrainConfig = TrainConfig(),
    seed: int = 0,
    do_train: bool = True,
) -> list[dict]:
    """Rebuild Table ``which`` row by row; each row trains in its own directory."""
    rows = published_table(which)
    checks = {c["row"]: c for c in parameter_check(rows)}
    out = Path(out_dir)
    records = []
    for r in rows:
        chk = checks[r.row]
        rho = network_density(validate_config(r.network))
        rec = {
            "table": which, "row": r.row, "kind": r.kind,
            "layer_sizes": " ".join(map(str, r.layer_sizes)),
            "out_degrees": " ".join(map(str, r.out_degrees)),
            "params": chk["params"], "published_params": r.params,
            "params_match": int(chk["status"] == "exact"),
            "params_note": "" if chk["status"] == "exact" else chk["status"],
            "rho_net": f"{float(rho):.6f}",
            "accuracy": "", "published_accuracy": f"{r.accuracy:.2f}", "accuracy_deviation": "",
        }
        if do_train:
            cfg = RunConfig(r.kind, r.layer_sizes, r.out_degrees, replace(train_cfg, seed=seed),
                            output_dir=str(out / f"{which}-row{r.row:02d}-{r.kind}"), seed=seed)
            result = execute_run(cfg, train_set, test_set)
            acc = 100 * result.summary["accuracy"]
            rec["accuracy"] = f"{acc:.2f}"
            rec["accuracy_deviation"] = f"{acc - r.accuracy:+.2f}"
        records.append(rec)
    return records


def records_to_csv(records: Iterable[dict], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
    writer.writeheader()
    for rec in records:
        writer.writerow(rec)
    return buf.getvalue()


def csv_to_records(text: str) -> list[dict]:
    return list(csv.DictReader(io.StringIO(text)))


# ---------------------------------------------------------------------------
# parameter budgets


def config_for_budget(kind: str, budget: int, sparse_width: int = 40, output: int = 10,
                      inputs: int = 800) -> NeuronalConfig:
    """Configuration of ``kind`` whose parameter count is closest to ``budget``.

    shallow: ``[in, h, out]``; deep: ``[in, h, h, out]``; sparse: two hidden
    layers of ``sparse_width`` with a full last junction, choosing the first
    two out-degrees.  Sparse ties go to the most even pair of junction
    densities, then to the sparser first junction.
    """
    if budget < 1:
        raise ConfigError("budget must be positive")
    if kind == "shallow":
        best = min(range(1, budget + 1), key=lambda h: (abs(count_parameters(NeuronalConfig.dense((inputs, h, output))) - budget), h))
        return NeuronalConfig.dense((inputs, best, output))
    if kind == "deep":
        def deep(h):
            return NeuronalConfig.dense((inputs, h, h, output))
        best = min(range(1, budget + 1), key=lambda h: (abs(count_parameters(deep(h)) - budget), h))
        return deep(best)
    if kind == "sparse":
        w = sparse_width
        candidates = []
        for d1, _ in enumerate_degree_pairs(inputs, w):
            for d2, _ in enumerate_degree_pairs(w, w):
                cfg = NeuronalConfig((inputs, w, w, output), (d1, d2, output))
                gap = abs(count_parameters(cfg) - budget)
                balance = abs(Fraction(d1, w) - Fraction(d2, w))
                candidates.append((gap, balance, d1, cfg))
        return min(candidates, key=lambda c: c[:3])[3]
    raise ConfigError(f"unknown kind {kind!r}")


SWEEP_COLUMNS = ["kind", "budget", "layer_sizes", "out_degrees", "params", "rho_net", "accuracy_median", "accuracies", "seeds"]


def sweep(
    budgets: Sequence[int],
    train_set: Dataset,
    test_set: Dataset,
    out_dir,
    seeds: Sequence[int] = (0,),
    train_cfg: TrainConfig = TrainConfig(),
    sparse_width: int = 40,
    kinds: Sequence[str] = KINDS,
) -> list[dict]:
    """Accuracy versus parameter count for each kind at each budget."""
    out = Path(out_dir)
    records = []
    for kind in kinds:
        for budget in budgets:
            net = config_for_budget(kind, budget, sparse_width)
            accs = []
            for seed in seeds:
                cfg = RunConfig(kind, net.layer_sizes, net.out_degrees, replace(train_cfg, seed=seed),
                                output_dir=str(out / f"{kind}-{budget}-seed{seed}"), seed=seed)
                accs.append(100 * execute_run(cfg, train_set, test_set).summary["accuracy"])
            summary = network_summary(net)
            records.append({
                "kind": kind, "budget": budget,
                "layer_sizes": " ".join(map(str, net.layer_sizes)),
                "out_degrees": " ".join(map(str, net.out_degrees)),
                "params": summary["params"], "rho_net": f"{summary['rho_net_float']:.6f}",
                "accuracy_median": f"{statistics.median(accs):.2f}",
                "accuracies": " ".join(f"{a:.2f}" for a in accs),
                "seeds": " ".join(map(str, seeds)),
            })
    records.sort(key=lambda r: (r["params"], KINDS.index(r["kind"])))
    return records
