"""Command line entry point.

Every subcommand reads an optional TOML config (``--config``), applies flag
overrides on top (flags > file > built-in defaults), writes its artifacts under
``--out`` and finishes with a ``manifest.json`` listing the merged config, its
hash, the seeds and the sha256 of every input and output file.

Exit codes: 0 ok, 1 usage, 2 config, 3 runtime, 4 physics failure.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from . import __version__
from .agent import EpisodeConfig, EpisodeInputs, FaultInjector, PolicyTransportError, ActionParseError
from .agent import ScriptedPolicy, make_policy, run_episode
from .critic import DIV_TOL_SIMULATED, ConstraintSpec, validate_trajectory
from .fields import FlowState, GridSpec, ScalarField, enstrophy, load_field, save_field
from .knowledge import HashingEmbedder, KnowledgeStore, PARTITIONS, RemoteEmbedder, default_store
from .metrics import evaluate_rollout
from .probe import Intervention, InterventionError, counterfactual_rollout
from .projector import (CLASS_TEXTS, ProjectorParams, extract_topology, patch_embed, render_descriptors,
                        save_params, synthetic_descriptor_set, train_projector)
from .report import (AnalysisReport, extremal_stats, narrative_sections, render_report, rules_from_sidecar,
                     stats_from_sidecar, trigger_alerts, trigger_from_stats)
from .simulator import (CFLError, SimulationDiverged, SimulatorConfig, deterministic_rollout, ensemble_rollout,
                        ensemble_spread, gaussian_vortex, load_trajectory, member_seed, random_vorticity,
                        save_trajectory, taylor_green, taylor_green_exact, trajectory_enstrophy)
from .weather import derive_weather_channels

logger = logging.getLogger("flowagent")

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_RUNTIME, EXIT_PHYSICS = 0, 1, 2, 3, 4

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "grid": {"height": 64, "width": 64},
    "init": {"kind": "random", "rms": 1.0, "k_peak": 4.0, "amplitude": 1.0, "sigma": 0.5, "path": ""},
    "simulator": {
        "nu": 1e-3, "dt": 1e-2, "steps_per_output": 20, "n_outputs": 3, "dealias": True,
        "forcing": "none", "forcing_amplitude": 0.1, "forcing_wavenumber": 4,
        "truncation": 0,  # 0 picks the default (half the grid)
    },
    "ensemble": {"K": 8, "lambda": 0.03},
    "episode": {"delta": 0.02, "delta_decay": 1.0, "max_steps": 12, "max_rollbacks": 3, "history_budget": 600},
    "knowledge": {"corpus": "", "embedder": "hashing", "dim": 256},
    "projector": {"N": 4, "d_v": 32, "patch": 8, "dim": 64, "steps": 200, "lr": 1e-2, "tau_c": 0.07,
                  "n_per_class": 6, "size": 32},
}


class ConfigError(ValueError):
    pass


class PhysicsFailure(RuntimeError):
    pass


class UsageError(Exception):
    pass


# -- config ------------------------------------------------------------------


def load_toml(path: Path, seen: tuple[Path, ...] = ()) -> tuple[dict, list[Path]]:
    """Parse ``path``, resolving ``include = [...]`` (relative to the including file) first."""
    path = path.resolve()
    if path in seen:
        raise ConfigError(f"include cycle through {path}")
    try:
        data = tomllib.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    includes = data.pop("include", [])
    if isinstance(includes, str):
        includes = [includes]
    merged: dict = {}
    files = []
    for inc in includes:
        sub, sub_files = load_toml(path.parent / inc, seen + (path,))
        merged = deep_merge(merged, sub)
        files += sub_files
    files.append(path)
    return deep_merge(merged, data), files


def deep_merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _coerce(value, default, where: str):
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false", "1", "0"):
            return value.lower() in ("true", "1")
        raise ConfigError(f"{where}: expected a boolean, got {value!r}")
    try:
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        if isinstance(default, float):
            return float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{where}: expected a {type(default).__name__}, got {value!r}") from None
    return str(value)


def validate_config(cfg: dict, defaults: dict = DEFAULTS, prefix: str = "") -> dict:
    """Reject unknown keys and coerce values to the type of their default."""
    out = {}
    for k, v in cfg.items():
        where = f"{prefix}{k}"
        if k not in defaults:
            raise ConfigError(f"unknown config key {where!r}")
        d = defaults[k]
        if isinstance(d, dict):
            if not isinstance(v, dict):
                raise ConfigError(f"{where} must be a table")
            out[k] = validate_config(v, d, where + ".")
        else:
            out[k] = _coerce(v, d, where)
    return out


def parse_set(items: Sequence[str]) -> dict:
    over: dict = {}
    for item in items:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        try:
            value = tomllib.loads(f"v = {raw}")["v"]
        except tomllib.TOMLDecodeError:
            value = raw
        node = over
        parts = key.strip().split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return over


# flag dest -> config path
FLAG_KEYS = {
    "seed": ("seed",),
    "grid": ("grid", "height"),
    "init": ("init", "kind"),
    "nu": ("simulator", "nu"),
    "dt": ("simulator", "dt"),
    "steps": ("simulator", "steps_per_output"),
    "n_outputs": ("simulator", "n_outputs"),
    "forcing": ("simulator", "forcing"),
    "K": ("ensemble", "K"),
    "lam": ("ensemble", "lambda"),
    "max_rollbacks": ("episode", "max_rollbacks"),
    "max_steps": ("episode", "max_steps"),
    "delta": ("episode", "delta"),
}


def build_config(args: argparse.Namespace) -> tuple[dict, list[Path]]:
    cfg = copy.deepcopy(DEFAULTS)
    files: list[Path] = []
    if args.config:
        file_cfg, files = load_toml(Path(args.config))
        cfg = deep_merge(cfg, validate_config(file_cfg))
    cfg = deep_merge(cfg, validate_config(parse_set(args.set or [])))
    flags: dict = {}
    for dest, path in FLAG_KEYS.items():
        value = getattr(args, dest, None)
        if value is None:
            continue
        node = flags
        for p in path[:-1]:
            node = node.setdefault(p, {})
        node[path[-1]] = value
        if dest == "grid":
            flags["grid"]["width"] = value
    cfg = deep_merge(cfg, validate_config(flags))
    return cfg, files


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def sim_config(cfg: dict) -> SimulatorConfig:
    s = dict(cfg["simulator"])
    s["truncation"] = s["truncation"] or None
    try:
        return SimulatorConfig(seed=cfg["seed"], **s)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def grid_from(cfg: dict) -> GridSpec:
    try:
        return GridSpec(cfg["grid"]["height"], cfg["grid"]["width"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def initial_state(cfg: dict) -> FlowState:
    grid = grid_from(cfg)
    init = cfg["init"]
    kind = init["kind"]
    if kind == "taylor_green":
        return taylor_green(grid, init["amplitude"])
    if kind == "random":
        return random_vorticity(grid, cfg["seed"], init["k_peak"], init["rms"])
    if kind == "vortex":
        w = gaussian_vortex(grid, init["amplitude"], init["sigma"])
        return FlowState.from_vorticity(ScalarField(grid, w, "vorticity", "1"))
    if kind == "file":
        if not init["path"]:
            raise ConfigError("init.kind = 'file' needs init.path")
        try:
            f = load_field(init["path"])
        except FileNotFoundError as exc:
            raise ConfigError(f"initial field not found: {exc.filename}") from None
        return FlowState.from_vorticity(f.replace(variable="vorticity"))
    raise ConfigError(f"unknown init.kind {kind!r}; expected taylor_green, random, vortex or file")


def make_embedder(cfg: dict):
    k = cfg["knowledge"]
    if k["embedder"] == "hashing":
        return HashingEmbedder(k["dim"], seed=cfg["seed"])
    if k["embedder"].startswith("remote"):
        url = k["embedder"].partition(":")[2] or None
        return RemoteEmbedder(k["dim"], url)
    raise ConfigError(f"unknown knowledge.embedder {k['embedder']!r}")


def make_store(cfg: dict, embedder) -> KnowledgeStore:
    return default_store(embedder, cfg["knowledge"]["corpus"] or None)


# -- artifacts ---------------------------------------------------------------


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def write_json(path: Path, data) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(data, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    return path


def write_manifest(out: Path, command: str, cfg: dict, seeds: dict, inputs: Sequence[Path]) -> Path:
    outputs = {}
    for p in sorted(out.rglob("*")):
        if p.is_file() and p.name != "manifest.json":
            outputs[p.relative_to(out).as_posix()] = sha256_file(p)
    manifest = {
        "command": command,
        "version": __version__,
        "config": cfg,
        "config_sha256": config_hash(cfg),
        "seeds": seeds,
        "inputs": {str(p): sha256_file(Path(p)) for p in inputs},
        "outputs": outputs,
    }
    return write_json(out / "manifest.json", manifest)


def _plot_fields(out: Path, named: dict[str, np.ndarray]) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    for name, values in named.items():
        fig, ax = plt.subplots(figsize=(4, 4))
        im = ax.imshow(values, origin="lower", cmap="RdBu_r")
        fig.colorbar(im, ax=ax, shrink=0.8)
        ax.set_title(name)
        fig.savefig(out / f"{name}.png", dpi=100, metadata={"Software": None})
        plt.close(fig)


# -- subcommands -------------------------------------------------------------


def cmd_simulate(args, cfg, out: Path) -> tuple[int, dict]:
    sc = sim_config(cfg)
    x0 = initial_state(cfg)
    states = [x0] + deterministic_rollout(x0, sc)
    save_trajectory(states, out / "trajectory")
    summary = {"times": [s.t for s in states], "enstrophy": trajectory_enstrophy(states)}
    verdict = validate_trajectory(states, ConstraintSpec(div_tol=DIV_TOL_SIMULATED,
                                                         enstrophy_monotone=sc.forcing == "none"))
    summary["critic"] = verdict.to_dict()
    if cfg["init"]["kind"] == "taylor_green":
        errs = [float(np.sqrt(np.mean((s["vorticity"].values
                                       - taylor_green_exact(s.grid, sc.nu, s.t, cfg["init"]["amplitude"])) ** 2)))
                for s in states]
        summary["taylor_green_rmse"] = errs
    write_json(out / "summary.json", summary)
    if args.plots:
        _plot_fields(out, {"vorticity_final": states[-1]["vorticity"].values})
    print(f"simulated {len(states) - 1} outputs; final enstrophy {summary['enstrophy'][-1]:.4f}; "
          f"critic {'passed' if verdict.passed else 'FAILED'}")
    return (EXIT_OK if verdict.passed else EXIT_PHYSICS), {"base": cfg["seed"]}


def _member_seeds(cfg: dict) -> list[int]:
    return [member_seed(cfg["seed"], k) for k in range(cfg["ensemble"]["K"])]


def cmd_ensemble(args, cfg, out: Path) -> tuple[int, dict]:
    sc = sim_config(cfg)
    x0 = initial_state(cfg)
    e = ensemble_rollout(x0, cfg["ensemble"]["K"], cfg["ensemble"]["lambda"], sc.steps_per_output, sc,
                         sc.n_outputs, workers=args.workers)
    mean = e.mean_trajectory()
    save_trajectory(mean, out / "mean")
    spread = ensemble_spread(e, "vorticity")
    (out / "spread").mkdir(exist_ok=True)
    for j, s in enumerate(spread):
        save_field(s, out / "spread" / f"vorticity_spread_{j:04d}")
    summary = {
        "K": e.K, "lambda": e.lam, "times": list(e.times),
        "spread_mean": [float(np.mean(s.values)) for s in spread],
        "spread_max": [float(np.max(s.values)) for s in spread],
        "mean_enstrophy": [enstrophy(s["vorticity"]) for s in mean],
    }
    write_json(out / "summary.json", summary)
    if args.plots:
        _plot_fields(out, {"ensemble_mean_final": mean[-1]["vorticity"].values, "spread_final": spread[-1].values})
    print(f"ensemble K={e.K} lambda={e.lam:.4f}: final mean spread {summary['spread_mean'][-1]:.4f}")
    return EXIT_OK, {"base": cfg["seed"], "members": [str(s) for s in e.seeds]}


def _parse_intervention(spec: str) -> Intervention:
    try:
        if spec.lstrip().startswith("{") or spec.endswith(".json"):
            return Intervention.from_json(spec)
        return Intervention.from_flag(spec)
    except (InterventionError, ValueError, json.JSONDecodeError) as exc:
        raise ConfigError(f"bad intervention {spec!r}: {exc}") from None


def cmd_probe(args, cfg, out: Path) -> tuple[int, dict]:
    sc = sim_config(cfg)
    x0 = initial_state(cfg)
    iv = _parse_intervention(args.intervention)
    try:
        res = counterfactual_rollout(x0, iv, cfg["ensemble"]["K"], cfg["ensemble"]["lambda"], sc.steps_per_output,
                                     sc, sc.n_outputs, workers=args.workers)
    except InterventionError as exc:
        raise ConfigError(str(exc)) from None
    write_json(out / "counterfactual.json", res.to_dict() | {"member_seeds": [str(s) for s in res.factual.seeds]})
    (out / "delta").mkdir(exist_ok=True)
    for j, d in enumerate(res.delta):
        save_field(d, out / "delta" / f"vorticity_delta_{j:04d}")
    print(f"causal sensitivity S = {res.sensitivity:.4f}")
    return EXIT_OK, {"base": cfg["seed"], "members": [str(s) for s in res.factual.seeds]}


def cmd_retrieve(args, cfg, out: Path) -> tuple[int, dict]:
    emb = make_embedder(cfg)
    store = make_store(cfg, emb)
    parts = None if not args.partition or "all" in args.partition else args.partition
    for p in parts or []:
        if p not in PARTITIONS:
            raise ConfigError(f"unknown partition {p!r}; expected one of {PARTITIONS}")
    res = store.search(args.query, emb, args.k, parts)
    write_json(out / "retrieval.json", {"query": args.query, "partitions": parts or "all",
                                        "hits": [{"id": cid, "score": s} for cid, s in res.hits]})
    for cid, s in res.hits:
        print(f"{s:.4f}  {cid}")
    return EXIT_OK, {"base": cfg["seed"]}


def _fault(spec: str | None) -> FaultInjector | None:
    if not spec:
        return None
    kind, _, n = spec.partition(":")
    try:
        return FaultInjector(kind, int(n) if n else 1)
    except ValueError as exc:
        raise ConfigError(f"bad --inject-fault {spec!r}: {exc}") from None


def episode_config(cfg: dict) -> EpisodeConfig:
    try:
        return EpisodeConfig(constraints=ConstraintSpec(div_tol=DIV_TOL_SIMULATED), **cfg["episode"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def cmd_agent_run(args, cfg, out: Path) -> tuple[int, dict]:
    sc = sim_config(cfg)
    x0 = initial_state(cfg)
    emb = make_embedder(cfg)
    store = make_store(cfg, emb)
    try:
        policy = make_policy(args.policy)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    inputs = EpisodeInputs(x0, sc, store, emb, derive_weather_channels, _fault(args.inject_fault))
    ecfg = episode_config(cfg)
    provenance = {"config_sha256": config_hash(cfg), "seed": cfg["seed"]}
    result = run_episode(inputs, ecfg, policy, episode_id=f"seed-{cfg['seed']}", provenance=provenance)
    out.mkdir(parents=True, exist_ok=True)
    (out / "trace.json").write_text(result.trace.to_json(), encoding="utf-8")
    if result.report is not None:
        md, sidecar = render_report(result.report)
        (out / "report.md").write_text(md, encoding="utf-8")
        write_json(out / "report.json", sidecar)
    print(f"episode {result.status}: {len(result.trace.active)} active steps, "
          f"{len(result.trace.rollbacks)} rollbacks")
    if result.status == "failed":
        print(f"error: {result.trace.error}", file=sys.stderr)
        return EXIT_PHYSICS, {"base": cfg["seed"]}
    return EXIT_OK, {"base": cfg["seed"], "members": [str(s) for s in _member_seeds(cfg)]}


def _report_from_sidecar(sidecar: dict) -> AnalysisReport:
    stats = stats_from_sidecar(sidecar)
    rules = rules_from_sidecar(sidecar)
    alerts = trigger_from_stats(stats, rules)
    recorded = sorted((a["chunk_id"], a["variable"]) for a in sidecar["alerts"])
    recomputed = sorted((a.chunk_id, a.variable) for a in alerts)
    if recorded != recomputed:
        raise PhysicsFailure(f"alert re-check mismatch: sidecar lists {recorded}, thresholds give {recomputed}")
    sec = sidecar["sections"]
    return AnalysisReport(sec["executive_summary"], stats, sec["spatial_pattern_analysis"], sec["insights_conclusion"],
                          alerts, sidecar["provenance"], rules, sidecar["findings"], sidecar["descriptors"],
                          sidecar["title"])


def cmd_report(args, cfg, out: Path) -> tuple[int, dict]:
    if bool(args.sidecar) == bool(args.trajectory):
        raise UsageError("report needs exactly one of --sidecar or --trajectory")
    if args.sidecar:
        try:
            sidecar = json.loads(Path(args.sidecar).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read sidecar: {exc}") from None
        report = _report_from_sidecar(sidecar)
    else:
        try:
            states = load_trajectory(args.trajectory)
        except (OSError, KeyError, ValueError) as exc:
            raise ConfigError(f"cannot read trajectory: {exc}") from None
        final = derive_weather_channels(states[-1])
        emb = make_embedder(cfg)
        store = make_store(cfg, emb)
        stats = extremal_stats([final])
        descriptors = extract_topology(final)
        structures = render_descriptors(descriptors, per_kind=3)
        rules = store.rules()
        summary, insights = narrative_sections(ScriptedPolicy.named("golden"), stats, structures, [])
        report = AnalysisReport(summary, stats, structures, insights, trigger_alerts([final], rules),
                                {"config_sha256": config_hash(cfg), "source": "trajectory"}, rules, {},
                                [d.to_dict() for d in descriptors])
    md, sidecar_out = render_report(report)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.md").write_text(md, encoding="utf-8")
    write_json(out / "report.json", sidecar_out)
    print(f"report written with {len(report.alerts)} alert(s)")
    return EXIT_OK, {"base": cfg["seed"]}


def cmd_evaluate(args, cfg, out: Path) -> tuple[int, dict]:
    try:
        pred = load_trajectory(args.pred)
        ref = load_trajectory(args.ref)
    except (OSError, KeyError, ValueError) as exc:
        raise ConfigError(f"cannot read trajectory: {exc}") from None
    try:
        rep = evaluate_rollout([s[args.channel] for s in pred], [s[args.channel] for s in ref], args.data_range)
    except KeyError as exc:
        raise ConfigError(f"channel {exc} missing from trajectory") from None
    rep.write(out)
    print(f"rmse {rep.rmse:.4f}  ssim {rep.ssim:.4f}  psnr {'inf' if rep.psnr_infinite else f'{rep.psnr:.4f}'}")
    return EXIT_OK, {"base": cfg["seed"]}


def cmd_train_projector(args, cfg, out: Path) -> tuple[int, dict]:
    p = cfg["projector"]
    seed = cfg["seed"]
    fields, labels = synthetic_descriptor_set(p["n_per_class"], p["size"], seed)
    encs = [patch_embed(f, p["patch"], p["d_v"], seed) for f in fields]
    emb = HashingEmbedder(p["dim"], seed=seed)
    T = np.stack([emb.embed(t) for t in CLASS_TEXTS.values()])
    params = ProjectorParams.init(p["N"], p["dim"], p["d_v"], seed)
    params.tau_c = p["tau_c"]
    res = train_projector(params, encs, labels, T, p["steps"], p["lr"])
    out.mkdir(parents=True, exist_ok=True)
    save_params(res.params, out / "projector", p["patch"], seed)
    write_json(out / "losses.json", {"losses": res.losses, "initial": res.losses[0], "final": res.losses[-1]})
    print(f"alignment loss {res.losses[0]:.4f} -> {res.losses[-1]:.4f}")
    return EXIT_OK, {"base": seed}


COMMANDS = {
    "simulate": (cmd_simulate, "deterministic rollout of one initial condition"),
    "ensemble": (cmd_ensemble, "perturbed ensemble forecast with spread fields"),
    "probe": (cmd_probe, "paired-seed counterfactual and causal sensitivity"),
    "retrieve": (cmd_retrieve, "top-k knowledge retrieval"),
    "agent-run": (cmd_agent_run, "run one critic-gated reasoning episode"),
    "report": (cmd_report, "render a report from a sidecar or trajectory"),
    "evaluate": (cmd_evaluate, "RMSE/SSIM/PSNR of a predicted trajectory against a reference"),
    "train-projector": (cmd_train_projector, "train the cross-attention projector on synthetic descriptors"),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="flowagent", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"flowagent {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")

    common = _Parser(add_help=False)
    common.add_argument("--config", help="TOML config file (supports include = [...])")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config value")
    common.add_argument("--seed", type=int, help="base seed for every random choice")
    common.add_argument("--out", help="run directory (default runs/<command>)")
    common.add_argument("--plots", action="store_true", help="also write PNG figures (needs matplotlib)")

    simflags = _Parser(add_help=False)
    simflags.add_argument("--grid", type=int, help="square grid size")
    simflags.add_argument("--init", choices=("taylor_green", "random", "vortex", "file"))
    simflags.add_argument("--nu", type=float)
    simflags.add_argument("--dt", type=float)
    simflags.add_argument("--steps", type=int, help="solver steps per output")
    simflags.add_argument("--n-outputs", type=int)
    simflags.add_argument("--forcing", choices=("none", "kolmogorov", "vortex_source"))
    simflags.add_argument("--workers", type=int, default=1, help="threads for ensemble members")

    ens = _Parser(add_help=False)
    ens.add_argument("-K", "--members", dest="K", type=int)
    ens.add_argument("--lambda", dest="lam", type=float, help="latent perturbation scale")

    for name, (_, help_text) in COMMANDS.items():
        parents = [common]
        if name in ("simulate", "ensemble", "probe", "agent-run"):
            parents.append(simflags)
        if name in ("ensemble", "probe", "agent-run"):
            parents.append(ens)
        p = sub.add_parser(name, parents=parents, help=help_text, description=help_text)
        if name == "probe":
            p.add_argument("--intervention", required=True,
                           help="channel:op[:value[:r0,r1,c0,c1]] or a JSON object/file")
        elif name == "retrieve":
            p.add_argument("query")
            p.add_argument("-k", type=int, default=3)
            p.add_argument("--partition", action="append", help="phy, prot, hist or all (repeatable)")
        elif name == "agent-run":
            p.add_argument("--policy", default="scripted:golden", help="scripted:<name>, remote or remote:<url>")
            p.add_argument("--inject-fault", metavar="divergence[:N]", help="corrupt the first N simulations")
            p.add_argument("--max-rollbacks", type=int)
            p.add_argument("--max-steps", type=int)
            p.add_argument("--delta", type=float)
        elif name == "report":
            p.add_argument("--sidecar", help="report.json written by agent-run or report")
            p.add_argument("--trajectory", help="trajectory directory; the last step is reported")
        elif name == "evaluate":
            p.add_argument("--pred", required=True)
            p.add_argument("--ref", required=True)
            p.add_argument("--channel", default="vorticity")
            p.add_argument("--data-range", type=float)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    func = COMMANDS[args.command][0]
    out = Path(args.out or f"runs/{args.command}")
    try:
        cfg, files = build_config(args)
        out.mkdir(parents=True, exist_ok=True)
        code, seeds = func(args, cfg, out)
        inputs = list(files)
        for attr in ("sidecar", "trajectory", "pred", "ref"):
            if getattr(args, attr, None):
                p = Path(getattr(args, attr))
                inputs += sorted(q for q in p.rglob("*") if q.is_file()) if p.is_dir() else [p]
        if cfg["init"]["path"] and cfg["init"]["kind"] == "file":
            stem = Path(cfg["init"]["path"])
            inputs += [stem.with_suffix(".f64"), stem.with_suffix(".json")]
        write_manifest(out, args.command, cfg, seeds, inputs)
        return code
    except UsageError as exc:
        print(f"flowagent: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, CFLError) as exc:
        print(f"flowagent: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SimulationDiverged, PhysicsFailure) as exc:
        print(f"flowagent: physics failure: {exc}", file=sys.stderr)
        return EXIT_PHYSICS
    except (PolicyTransportError, ActionParseError, OSError, RuntimeError, ValueError) as exc:
        print(f"flowagent: runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    raise SystemExit(main())
