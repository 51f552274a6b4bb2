"""Experiment orchestration: config files, sweeps, CSV results and plots."""
from __future__ import annotations

import ast
import configparser
import csv
import io
import itertools
import logging
import math
import time
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

from .backbone import SplitModel, pretrain
from .channel import ErasureChannelCfg
from .errors import CollabError, ConfigError, SchemaError
from .pipeline import MODES, PipelineCfg, evaluate, train_comm
from .scenario import Dataset, ScenarioCfg, gen_dataset

__all__ = [
    "CSV_HEADER",
    "GRID_KEYS",
    "BackboneCfg",
    "SweepSpec",
    "ExperimentConfig",
    "resolve_config",
    "load_config",
    "Experiment",
    "run_sweep",
    "read_results",
    "emit_plot",
    "PLOT_KINDS",
]

log = logging.getLogger(__name__)

CSV_HEADER = ("split,data_per,query_per,rho,mode,seed,accuracy,avg_connections,"
              "query_tbs,feature_tbs,wall_time_s").split(",")
GRID_KEYS = ("split", "data_per", "query_per", "rho", "mode")
SHIPPED = ("defaults.cfg", "fig2.cfg", "fig3.cfg", "fig4.cfg")


@dataclass(frozen=True)
class BackboneCfg:
    epochs: int = 6
    lr: float = 1e-3
    batch_size: int = 128
    floor: float = 0.95


@dataclass(frozen=True)
class SweepSpec:
    name: str = "sweep"
    grid: dict = field(default_factory=dict)
    seeds: tuple = (0,)
    rounds: int = 2000
    plot: str | None = None
    record_wall_time: bool = False

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("sweep needs at least one seed")
        for k, v in self.grid.items():
            if k not in GRID_KEYS:
                raise ConfigError(f"unknown sweep axis {k!r}")
            if not v:
                raise ConfigError(f"sweep axis {k!r} is empty")
        if self.rounds < 1:
            raise ConfigError("sweep rounds must be >= 1")

    def cells(self, base: PipelineCfg) -> list[dict]:
        """Grid cells in deterministic order; missing axes take the base value."""
        defaults = {
            "split": [base.split], "data_per": [base.data_channel.per],
            "query_per": [base.query_channel.per], "rho": [base.rho], "mode": [base.mode],
        }
        axes = [list(self.grid.get(k, defaults[k])) for k in GRID_KEYS]
        return [dict(zip(GRID_KEYS, combo)) for combo in itertools.product(*axes)]


@dataclass(frozen=True)
class ExperimentConfig:
    scenario: ScenarioCfg
    backbone: BackboneCfg
    pipeline: PipelineCfg
    eval_rounds: int
    sweep: SweepSpec
    source: str = "<defaults>"


def resolve_config(path) -> Path | None:
    """A real path, or the name of a shipped config; None if neither exists."""
    p = Path(path)
    if p.is_file():
        return p
    if p.name in SHIPPED and (p.parent == Path(".") or not p.parent.exists()):
        ref = resources.files("collabinfer") / "configs" / p.name
        with resources.as_file(ref) as real:
            return Path(real)
    return None


def _value(raw: str):
    raw = raw.strip()
    if raw.lower() in ("true", "false"):
        return raw.lower() == "true"
    try:
        return ast.literal_eval(raw)
    except (ValueError, SyntaxError):
        if raw.startswith("["):
            # bare words inside a list, e.g. [semantic, local]
            return [_value(x) for x in raw[1:-1].split(",") if x.strip()]
        return raw


def _section(cp, name) -> dict:
    return {k: _value(v) for k, v in cp.items(name)} if cp.has_section(name) else {}


def _take(d: dict, allowed, where: str) -> dict:
    extra = set(d) - set(allowed)
    if extra:
        raise ConfigError(f"unknown key(s) in [{where}]: {', '.join(sorted(extra))}")
    return d


def load_config(path=None, seed: int | None = None) -> ExperimentConfig:
    """Shipped defaults overlaid with ``path``; ``seed`` overrides the master seed."""
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    default = resolve_config("defaults.cfg")
    cp.read(default, encoding="utf-8")
    source = "<defaults>"
    if path is not None:
        real = resolve_config(path)
        if real is None:
            raise ConfigError(f"config file not found: {path}")
        try:
            cp.read(real, encoding="utf-8")
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}".replace("\n", " ")) from exc
        source = str(path)
    known = {"scenario", "backbone", "channel", "training", "eval", "sweep"}
    unknown = set(cp.sections()) - known
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(sorted(unknown))}")

    scn = _take(_section(cp, "scenario"), ScenarioCfg.__dataclass_fields__, "scenario")
    if seed is not None:
        scn["seed"] = seed
    scenario = ScenarioCfg(**scn)
    backbone = BackboneCfg(**_take(_section(cp, "backbone"),
                                   BackboneCfg.__dataclass_fields__, "backbone"))
    ch = _take(_section(cp, "channel"), ("tbs", "fill", "data_per", "query_per"), "channel")
    tbs, fill = ch.get("tbs", 40), float(ch.get("fill", 0.0))
    tr = _take(_section(cp, "training"), PipelineCfg.__dataclass_fields__, "training")
    if "hidden" in tr:
        tr["hidden"] = tuple(tr["hidden"])
    pipeline = PipelineCfg(
        data_channel=ErasureChannelCfg(tbs, float(ch.get("data_per", 0.1)), fill),
        query_channel=ErasureChannelCfg(tbs, float(ch.get("query_per", 0.0)), fill),
        **tr,
    )
    ev = _take(_section(cp, "eval"), ("rounds",), "eval")
    sw = _take(_section(cp, "sweep"),
               (*GRID_KEYS, "name", "seeds", "rounds", "plot", "record_wall_time"), "sweep")
    grid = {}
    for k in GRID_KEYS:
        if k in sw:
            v = sw.pop(k)
            grid[k] = list(v) if isinstance(v, (list, tuple)) else [v]
    if "mode" in grid:
        for m in grid["mode"]:
            if m not in MODES:
                raise ConfigError(f"unknown mode {m!r} in [sweep]")
    seeds = sw.pop("seeds", [0])
    sweep = SweepSpec(grid=grid, seeds=tuple(seeds if isinstance(seeds, (list, tuple)) else [seeds]),
                      **sw)
    return ExperimentConfig(scenario, backbone, pipeline, int(ev.get("rounds", 2000)), sweep,
                            source)


def run_seed(master: int, seed: int) -> int:
    """Per-row seed derived from the master seed and the row's seed label."""
    a, b = np.random.SeedSequence([master, seed]).generate_state(2, dtype=np.uint32)
    return int(a) << 32 | int(b)


class Experiment:
    """Dataset, frozen backbone and a cache of trained comm modules."""

    def __init__(self, config: ExperimentConfig, backbone: SplitModel | None = None):
        self.config = config
        self.dataset: Dataset = gen_dataset(config.scenario)
        self._backbone = backbone
        self._comm_cache: dict = {}
        self.histories: dict = {}  # same keys as the comm cache, per-epoch training loss

    @property
    def master_seed(self) -> int:
        return self.config.scenario.seed

    @property
    def backbone(self) -> SplitModel:
        if self._backbone is None:
            bc = self.config.backbone
            ds = self.dataset
            model = SplitModel.build(n_classes=self.config.scenario.n_classes,
                                     widths=(self.config.scenario.n_pixels, 512, 256, 128, 64),
                                     seed=self.master_seed)
            self._backbone = pretrain(model, ds.X_train, ds.y_train, epochs=bc.epochs,
                                      lr=bc.lr, batch_size=bc.batch_size,
                                      seed=self.master_seed, X_val=ds.X_val, y_val=ds.y_val,
                                      floor=bc.floor)
        return self._backbone

    def cell_cfg(self, cell: dict) -> PipelineCfg:
        base = self.config.pipeline
        return replace(
            base, split=int(cell["split"]), rho=float(cell["rho"]), mode=cell["mode"],
            data_channel=replace(base.data_channel, per=float(cell["data_per"])),
            query_channel=replace(base.query_channel, per=float(cell["query_per"])),
        )

    def comm_for(self, cfg: PipelineCfg, seed: int):
        """Train (or reuse) comm modules for the effective channel configuration.

        Training always runs unpruned; the threshold is applied at inference only.
        Training with a threshold above 1/N would prune every link of the initial
        near-uniform matrix and leave no gradient.
        """
        eff = replace(cfg.effective(), rho=0.0)
        if not eff.trainable:
            return None
        key = (replace(eff, mode="semantic"), seed)
        if key not in self._comm_cache:
            ds = self.dataset
            comm, hist = train_comm(self.backbone, eff, self.config.scenario, ds.X_train,
                                    ds.y_train, seed=seed)
            self._comm_cache[key] = comm
            self.histories[key] = hist
        return self._comm_cache[key]

    def run_cell(self, cell: dict, seed: int, rounds: int) -> dict:
        cfg = self.cell_cfg(cell)
        rs = run_seed(self.master_seed, seed)
        comm = self.comm_for(cfg, rs)
        ds = self.dataset
        m = evaluate(self.backbone, comm, cfg, self.config.scenario, ds.X_test, ds.y_test,
                     rounds, seed=rs)
        return m.summary()


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def run_sweep(config: ExperimentConfig, out_path, experiment: Experiment | None = None) -> Path:
    """Run every (cell, seed) and write one CSV row each, in grid order."""
    spec = config.sweep
    exp = experiment or Experiment(config)
    out_path = Path(out_path)
    try:
        out_path.parent.mkdir(parents=True, exist_ok=True)
        out_path.touch()
    except OSError as exc:
        raise CollabError(f"cannot write {out_path}: {exc}") from exc
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for cell in spec.cells(config.pipeline):
        for seed in spec.seeds:
            t0 = time.perf_counter()
            try:
                res = exp.run_cell(cell, seed, spec.rounds)
            except CollabError as exc:
                log.error("cell %s seed %s failed: %s", cell, seed, exc)
                res = {k: math.nan for k in ("accuracy", "avg_connections", "query_tbs",
                                             "feature_tbs")}
            wall = time.perf_counter() - t0 if spec.record_wall_time else 0.0
            log.info("cell %s seed %s -> %s", cell, seed, res)
            writer.writerow([
                int(cell["split"]), float(cell["data_per"]), float(cell["query_per"]),
                float(cell["rho"]), cell["mode"], seed,
                *(_fmt(float(res[k])) for k in ("accuracy", "avg_connections", "query_tbs",
                                                "feature_tbs")),
                _fmt(round(wall, 3)),
            ])
    out_path.write_text(buf.getvalue(), encoding="utf-8")
    return out_path


def read_results(path) -> list[dict]:
    text = Path(path).read_text(encoding="utf-8")
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise SchemaError(f"{path}: empty file")
    header = rows[0]
    if header != CSV_HEADER:
        bad = next((h for h, want in itertools.zip_longest(header, CSV_HEADER) if h != want),
                   None)
        raise SchemaError(f"{path}: unexpected column {bad!r}")
    if len(rows) == 1:
        raise SchemaError(f"{path}: no result rows")
    out = []
    for line, row in enumerate(rows[1:], start=2):
        if len(row) != len(CSV_HEADER):
            raise SchemaError(f"{path}:{line}: expected {len(CSV_HEADER)} fields")
        rec = dict(zip(CSV_HEADER, row))
        try:
            for k in CSV_HEADER:
                if k == "mode":
                    continue
                rec[k] = int(rec[k]) if k in ("split", "seed") else float(rec[k])
        except ValueError as exc:
            raise SchemaError(f"{path}:{line}: column {k!r}: {exc}") from exc
        out.append(rec)
    return out


# kind -> list of (x column, y column, series columns, file suffix)
PLOT_KINDS = {
    "split": [("split", "accuracy", ("mode", "data_per"), "accuracy")],
    "per": [("data_per", "accuracy", ("mode", "query_per"), "accuracy")],
    "rho": [("rho", "avg_connections", ("mode", "data_per"), "connections"),
            ("rho", "accuracy", ("mode", "data_per"), "accuracy")],
}

_LABELS = {
    "split": "splitting point", "data_per": "data PER", "query_per": "query PER",
    "rho": "pruning threshold", "accuracy": "accuracy",
    "avg_connections": "avg. sidelink connections per device",
}


def emit_plot(csv_path, kind: str, out_dir=None) -> list[Path]:
    """Render line charts (mean over seeds) as self-contained SVG files."""
    if kind not in PLOT_KINDS:
        raise ConfigError(f"plot kind must be one of {sorted(PLOT_KINDS)}, got {kind!r}")
    rows = [r for r in read_results(csv_path) if not math.isnan(r["accuracy"])]
    if not rows:
        raise SchemaError(f"{csv_path}: no successful rows to plot")
    import matplotlib

    matplotlib.use("Agg")
    matplotlib.rcParams["svg.hashsalt"] = "collabinfer"  # stable element ids
    import matplotlib.pyplot as plt

    csv_path = Path(csv_path)
    out_dir = Path(out_dir) if out_dir else csv_path.parent
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for x, y, series, suffix in PLOT_KINDS[kind]:
        groups: dict = {}
        for r in rows:
            groups.setdefault(tuple(r[s] for s in series), {}).setdefault(r[x], []).append(r[y])
        fig, ax = plt.subplots(figsize=(5.5, 3.8))
        for key in sorted(groups, key=str):
            pts = sorted(groups[key].items())
            xs = [p[0] for p in pts]
            ys = [float(np.mean(p[1])) for p in pts]
            label = ", ".join(f"{s}={v}" for s, v in zip(series, key))
            ax.plot(xs, ys, marker="o", label=label)
        ax.set_xlabel(_LABELS.get(x, x))
        ax.set_ylabel(_LABELS.get(y, y))
        if x == "rho" and any(v > 0 for v in groups[next(iter(groups))]):
            ax.set_xscale("symlog", linthresh=1e-3)
        ax.grid(True, alpha=0.3)
        ax.legend(fontsize=7)
        fig.tight_layout()
        path = out_dir / f"{csv_path.stem}_{suffix}.svg"
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
        written.append(path)
    return written
