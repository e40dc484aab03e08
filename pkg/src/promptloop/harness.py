"""Experiment runner and command-line front end.

Experiments are paired by construction: every arm replays the same scenario
suite with the same episode seeds, so the base detector's draws are
byte-identical across arms and score deltas isolate the correction loop.
Reports carry means and standard deviations over seeds plus the raw episode
logs needed to rebuild any table offline.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .adapter import (
    AdapterConfig,
    AdapterParams,
    TrainConfig,
    VisualPrompt,
    eval_alignment,
    load_checkpoint,
    save_checkpoint,
    train_adapter,
)
from .detectors import NoiseParams, detect, policy_from_dict
from .engine import EngineConfig, EpisodeLog, run_episode
from .feedback import FeedbackConfig
from .geometry import GridSpec, project_to_grid
from .metrics import evaluate, recall_vs_offset
from .promptbuffer import BufferConfig
from .scenesim import (
    Frame,
    Scenario,
    ScenarioConfig,
    ScenarioInfeasibleError,
    SpawnSpec,
    crop_descriptor,
    generate_scenario,
    render_frame,
)
from .seeding import rng_for, stable_seed

PROTOCOLS = ("paired", "first_frame_prompt")
METRIC_KEYS = ("mAP", "recall", "mATE", "mASE", "mAOE", "eds")


@dataclass(frozen=True)
class ArmSpec:
    policy: dict = field(default_factory=lambda: {"kind": "none"})
    feedback: dict | None = None  # FeedbackConfig kwargs; None = no feedback

    def feedback_config(self) -> FeedbackConfig | None:
        return None if self.feedback is None else FeedbackConfig(**self.feedback)


@dataclass(frozen=True)
class ExperimentSpec:
    name: str
    arms: dict[str, ArmSpec]
    scenario: dict = field(default_factory=dict)  # ScenarioConfig overrides
    n_scenarios: int = 50
    seeds: tuple[int, ...] = (0, 1, 2)
    buffer: dict = field(default_factory=dict)
    engine: dict = field(default_factory=dict)
    protocol: str = "paired"
    distant_range: float = 30.0
    tag_subsets: dict | None = None
    checkpoint: str | None = None

    def __post_init__(self):
        if not self.name:
            raise ValueError("experiment name required")
        if not self.arms:
            raise ValueError("at least one arm required")
        if self.protocol not in PROTOCOLS:
            raise ValueError(f"unknown protocol {self.protocol!r}")
        if self.n_scenarios < 1 or not self.seeds:
            raise ValueError("need at least one scenario and one seed")

    def engine_config(self) -> EngineConfig:
        kw = dict(self.engine)
        noise = kw.pop("noise", None)
        if noise is not None:
            kw["detector_noise"] = NoiseParams(**noise)
        return EngineConfig(**kw)

    def buffer_config(self) -> BufferConfig:
        return BufferConfig(**self.buffer)

    def scenario_config(self, seed: int) -> ScenarioConfig:
        return ScenarioConfig(seed=seed, **_scenario_kwargs(self.scenario))

    def to_dict(self) -> dict:
        doc = dataclasses.asdict(self)
        doc["seeds"] = list(self.seeds)
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentSpec":
        doc = dict(doc)
        doc["arms"] = {name: ArmSpec(**arm) for name, arm in doc["arms"].items()}
        doc["seeds"] = tuple(doc.get("seeds", (0, 1, 2)))
        return cls(**doc)


def load_spec(path: str) -> ExperimentSpec:
    with open(path) as f:
        return ExperimentSpec.from_dict(json.load(f))


def _scenario_kwargs(doc: dict) -> dict:
    """ScenarioConfig kwargs from a JSON-shaped dict (lists -> tuples)."""
    kw = dict(doc)
    if "grid" in kw:
        kw["grid"] = GridSpec(**kw["grid"])
    if kw.get("style_shift") is not None:
        kw["style_shift"] = tuple(kw["style_shift"])
    if "class_tags" in kw:
        kw["class_tags"] = tuple(kw["class_tags"])
    if kw.get("spawn_script") is not None:
        script = []
        for s in kw["spawn_script"]:
            s = dict(s)
            s["start_xy"] = tuple(s["start_xy"])
            s["velocity_xy"] = tuple(s.get("velocity_xy", (0.0, 0.0)))
            if s.get("size") is not None:
                s["size"] = tuple(s["size"])
            script.append(SpawnSpec(**s))
        kw["spawn_script"] = tuple(script)
    return kw


# ----------------------------------------------------------- scenario suites


def scenario_suite(spec: ExperimentSpec, seed: int) -> list[Scenario]:
    """The evaluation scenarios for one experiment seed (shared by arms)."""
    out = []
    for i in range(spec.n_scenarios):
        for salt in range(20):  # rare: dense configs can come out infeasible
            try:
                cfg = spec.scenario_config(stable_seed(seed, "scenario", i, salt))
                out.append(generate_scenario(cfg))
                break
            except ScenarioInfeasibleError:
                continue
        else:
            raise ScenarioInfeasibleError(
                f"could not generate scenario {i} for seed {seed}"
            )
    return out


def first_frame_prompts(scenario: Scenario) -> list[VisualPrompt]:
    """One prompt per entity visible in frame 0, cropped from frame 0.

    Prompt ids equal entity ids so offset curves can look targets up.
    """
    frame = render_frame(scenario, 0)
    prompts = []
    for t in frame.truths:
        if not t.visible:
            continue
        box2 = project_to_grid(t.box, frame.ego, scenario.config.grid)
        if box2 is None:
            continue
        prompts.append(VisualPrompt(prompt_id=t.entity_id,
                                    descriptor=crop_descriptor(frame, box2)))
    return prompts


def base_stream_hash(scenario: Scenario, policy_doc: dict, seed: int,
                     engine: EngineConfig, truths_provider=None) -> str:
    """Digest of the pre-feedback detector stream for pairing checks.

    Arms sharing (scenario, policy, episode seed, noise) must agree on this
    digest no matter what feedback does, because prompts never perturb the
    base detector. Detection only reads truths, the frame index and the
    style epsilon, so a cached-truths provider lets us skip the appearance
    render entirely.
    """
    h = hashlib.sha256()
    policy = policy_from_dict(policy_doc)
    empty = np.empty((0, 0, 0))
    for t in range(scenario.config.n_frames):
        if truths_provider is None:
            frame = render_frame(scenario, t)
        else:
            frame = Frame(index=t, ego=scenario.ego_poses[t],
                          truths=truths_provider(scenario, t),
                          appearance=empty, latent=empty,
                          style=scenario.style_for(t))
        for d in detect(frame, policy, seed, engine.detector_noise):
            h.update(repr((d.box.center, d.box.size, d.box.yaw,
                           d.confidence, d.class_tag)).encode())
    return h.hexdigest()


# -------------------------------------------------------------- episode pool


def _episode_task(task):
    """Worker-pool entry: one (scenario, arm) episode."""
    (scenario, policy_doc, params, ep_seed, feedback_kw, spec_doc,
     preload, freeze) = task
    spec = ExperimentSpec.from_dict(spec_doc)
    return run_episode(
        scenario, policy_from_dict(policy_doc), params, seed=ep_seed,
        feedback_config=(None if feedback_kw is None
                         else FeedbackConfig(**feedback_kw)),
        buffer_config=spec.buffer_config(),
        engine_config=spec.engine_config(),
        preload_prompts=preload, freeze_buffer=freeze,
    )


def episode_seed(seed: int, index: int) -> int:
    return int(rng_for(seed, "episode", index).integers(0, 2**31 - 1))


def _run_arm(scenarios: list[Scenario], arm: ArmSpec, params: AdapterParams,
             spec: ExperimentSpec, seed: int, jobs: int,
             preloads: list[list[VisualPrompt]] | None) -> list[EpisodeLog]:
    freeze = spec.protocol == "first_frame_prompt"
    feedback_kw = None if freeze else arm.feedback
    tasks = [
        (sc, arm.policy, params, episode_seed(seed, i), feedback_kw,
         spec.to_dict(), preloads[i] if preloads else None, freeze)
        for i, sc in enumerate(scenarios)
    ]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_episode_task, tasks))
    return [_episode_task(t) for t in tasks]


# --------------------------------------------------------------- experiments


def _aggregate(per_seed: dict[int, dict]) -> dict:
    """mean/std/per-seed for every (subset, metric) over seeds."""
    out: dict = {}
    names = sorted({s for rep in per_seed.values() for s in rep})
    for subset in names:
        metrics = {}
        for key in METRIC_KEYS:
            vals = [getattr(rep[subset], key) for rep in per_seed.values()
                    if subset in rep]
            metrics[key] = {"mean": float(np.mean(vals)),
                            "std": float(np.std(vals)),
                            "per_seed": [float(v) for v in vals]}
        out[subset] = metrics
    return out


def _delta_rows(arm_stats: dict[str, dict]) -> dict | None:
    """ttc-minus-baseline style delta when the spec has exactly two arms."""
    if len(arm_stats) != 2:
        return None
    (first, a), (second, b) = list(arm_stats.items())
    out = {}
    for subset in sorted(set(a) & set(b)):
        out[subset] = {
            key: b[subset][key]["mean"] - a[subset][key]["mean"]
            for key in METRIC_KEYS
        }
    return {"arms": f"{second}-{first}", "subsets": out}


def _params_digest(params: AdapterParams) -> str:
    h = hashlib.sha256()
    for name in sorted(params.nets):
        for layer in params.nets[name].layers:
            h.update(layer.weights.tobytes())
            h.update(layer.biases.tobytes())
    h.update(params.object_queries.tobytes())
    h.update(params.object_anchors.tobytes())
    return h.hexdigest()


def run_experiment(spec: ExperimentSpec, out_dir: str,
                   params: AdapterParams | None = None, jobs: int = 1,
                   save_logs: bool = True) -> dict:
    """Run every arm over every seed; write report, tables, traces, logs.

    The checkpoint is read-only: its digest is asserted unchanged after the
    run. Returns the report dict (also saved as report.json).
    """
    if params is None:
        if not spec.checkpoint:
            raise ValueError("spec has no checkpoint and none was passed")
        if not os.path.exists(spec.checkpoint):
            raise FileNotFoundError(spec.checkpoint)
        params = load_checkpoint(spec.checkpoint)
    digest_before = _params_digest(params)

    run_dir = os.path.join(out_dir, spec.name)
    os.makedirs(run_dir, exist_ok=True)
    os.makedirs(os.path.join(run_dir, "traces"), exist_ok=True)
    if save_logs:
        os.makedirs(os.path.join(run_dir, "logs"), exist_ok=True)

    arm_reports: dict[str, dict[int, dict]] = {a: {} for a in spec.arms}
    traces: dict[str, list[list[float]]] = {a: [] for a in spec.arms}
    offset_curves: dict[str, dict[int, float]] = {}
    pair_hashes: dict[str, dict] = {}

    for seed in spec.seeds:
        scenarios = scenario_suite(spec, seed)
        truth_cache = {
            id(sc): [render_frame(sc, t).truths
                     for t in range(sc.config.n_frames)]
            for sc in scenarios
        }
        provider = lambda sc, t: truth_cache[id(sc)][t]  # noqa: E731

        preloads = None
        if spec.protocol == "first_frame_prompt":
            preloads = [first_frame_prompts(sc) for sc in scenarios]

        seed_hashes: dict[str, list[str]] = {}
        by_policy: dict[str, list[str]] = {}
        for arm_name, arm in spec.arms.items():
            logs = _run_arm(scenarios, arm, params, spec, seed, jobs, preloads)
            runs = list(zip(logs, scenarios))
            arm_reports[arm_name][seed] = evaluate(
                runs, distant_range=spec.distant_range,
                tag_subsets=spec.tag_subsets, truths_provider=provider,
            )
            traces[arm_name].append(
                [float(np.mean([log.buffer_trace()[t] for log in logs]))
                 for t in range(min(log.n_frames for log in logs))]
            )
            if spec.protocol == "first_frame_prompt":
                curve = recall_vs_offset(runs, truths_provider=provider)
                acc = offset_curves.setdefault(arm_name, {})
                for off, val in curve.items():
                    acc[off] = acc.get(off, 0.0) + val / len(spec.seeds)
            policy_key = json.dumps(arm.policy, sort_keys=True)
            if policy_key not in by_policy:
                by_policy[policy_key] = [
                    base_stream_hash(sc, arm.policy, episode_seed(seed, i),
                                     spec.engine_config(),
                                     truths_provider=provider)
                    for i, sc in enumerate(scenarios)
                ]
            seed_hashes[arm_name] = by_policy[policy_key]
            if save_logs:
                for i, log in enumerate(logs):
                    log.save(os.path.join(
                        run_dir, "logs", f"s{seed}-i{i:03d}-{arm_name}.json"))
        pair_hashes[str(seed)] = seed_hashes

    arm_stats = {a: _aggregate(per_seed) for a, per_seed in arm_reports.items()}
    report = {
        "spec": spec.to_dict(),
        "arms": arm_stats,
        "delta": _delta_rows(arm_stats),
        "pair_hashes": pair_hashes,
        "checkpoint_digest": digest_before,
    }
    if offset_curves:
        report["offset_recall"] = {
            a: {str(k): v for k, v in sorted(c.items())}
            for a, c in offset_curves.items()
        }

    assert _params_digest(params) == digest_before, "checkpoint was mutated"

    with open(os.path.join(run_dir, "report.json"), "w") as f:
        json.dump(report, f, indent=1, sort_keys=True)
    _write_table(report, os.path.join(run_dir, "table.csv"))
    for arm_name, rows in traces.items():
        mean_trace = np.mean(np.array(rows, dtype=float), axis=0)
        _write_series(os.path.join(run_dir, "traces", f"{arm_name}.txt"),
                      enumerate(mean_trace))
    if offset_curves:
        os.makedirs(os.path.join(run_dir, "curves"), exist_ok=True)
    for arm_name, curve in offset_curves.items():
        _write_series(
            os.path.join(run_dir, "curves", f"offset_recall-{arm_name}.txt"),
            sorted(curve.items()))
    return report


def _write_series(path: str, pairs) -> None:
    with open(path, "w") as f:
        for x, y in pairs:
            f.write(f"{x} {y:.6f}\n")


def _write_table(report: dict, path: str) -> None:
    """One row per arm x subset, plus delta rows for two-arm specs."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["arm", "subset"]
                   + [f"{k}_{s}" for k in METRIC_KEYS for s in ("mean", "std")])
        for arm, subsets in report["arms"].items():
            for subset, metrics in subsets.items():
                w.writerow([arm, subset] + [
                    f"{metrics[k][s]:.6f}"
                    for k in METRIC_KEYS for s in ("mean", "std")
                ])
        delta = report.get("delta")
        if delta:
            for subset, metrics in delta["subsets"].items():
                row = [f"delta({delta['arms']})", subset]
                for k in METRIC_KEYS:
                    row += [f"{metrics[k]:.6f}", ""]
                w.writerow(row)


def format_table(report: dict) -> str:
    """Human-readable rendering of the report's headline numbers."""
    lines = []
    header = f"{'arm':<16} {'subset':<14} {'mAP':>8} {'recall':>8} {'EDS':>8}"
    lines.append(header)
    lines.append("-" * len(header))
    for arm, subsets in report["arms"].items():
        for subset, m in subsets.items():
            lines.append(
                f"{arm:<16} {subset:<14} "
                f"{m['mAP']['mean']:>8.4f} {m['recall']['mean']:>8.4f} "
                f"{m['eds']['mean']:>8.4f}"
            )
    delta = report.get("delta")
    if delta:
        for subset, m in delta["subsets"].items():
            lines.append(
                f"{'Δ ' + delta['arms']:<16} {subset:<14} "
                f"{m['mAP']:>+8.4f} {m['recall']:>+8.4f} {m['eds']:>+8.4f}"
            )
    return "\n".join(lines)


# ------------------------------------------------------------------ training


@dataclass(frozen=True)
class TrainSpec:
    adapter: dict = field(default_factory=dict)  # AdapterConfig overrides
    train: dict = field(default_factory=dict)  # TrainConfig overrides
    scenario: dict = field(default_factory=dict)  # training-scenario template
    n_scenarios: int = 12
    n_eval_scenarios: int = 4
    n_eval_samples: int = 200
    seed: int = 0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainSpec":
        return cls(**doc)


def _train_scenarios(tspec: TrainSpec, tag: str, n: int) -> list[Scenario]:
    kw = _scenario_kwargs(tspec.scenario)
    out = []
    for i in range(n):
        for salt in range(20):
            try:
                cfg = ScenarioConfig(
                    seed=stable_seed(tspec.seed, tag, i, salt), **kw)
                out.append(generate_scenario(cfg))
                break
            except ScenarioInfeasibleError:
                continue
        else:
            raise ScenarioInfeasibleError(f"{tag} scenario {i} infeasible")
    return out


def train(tspec: TrainSpec, out_dir: str) -> tuple[AdapterParams, dict]:
    """Train an adapter, score held-out alignment, write all artifacts.

    Writes checkpoint.json (+ manifest sidecar), curve.txt (step/loss) and
    eval.json (held-out hit rates). Returns (params, summary).
    """
    os.makedirs(out_dir, exist_ok=True)
    scen = _train_scenarios(tspec, "train", tspec.n_scenarios)
    held_out = _train_scenarios(tspec, "eval", tspec.n_eval_scenarios)
    acfg = AdapterConfig(**tspec.adapter)
    tcfg = TrainConfig(seed=tspec.seed, **tspec.train)
    params, curve = train_adapter(scen, acfg, tcfg)
    rates = eval_alignment(params, held_out, tspec.n_eval_samples,
                           seed=stable_seed(tspec.seed, "heldout"))

    ckpt_path = os.path.join(out_dir, "checkpoint.json")
    save_checkpoint(params, ckpt_path)
    _write_series(os.path.join(out_dir, "curve.txt"),
                  [(row["step"], row["loss"]) for row in curve])
    summary = {
        "spec": tspec.to_dict(),
        "checkpoint": ckpt_path,
        "digest": _params_digest(params),
        "final_loss": curve[-1]["loss"] if curve else None,
        "alignment": rates,
    }
    with open(os.path.join(out_dir, "eval.json"), "w") as f:
        json.dump(summary, f, indent=1, sort_keys=True)
    return params, summary


# -------------------------------------------------------------------- sweeps

EVAL_SWEEP_PREFIXES = ("feedback.", "buffer.", "engine.")
TRAIN_SWEEP_PREFIXES = ("adapter.", "train.")


def _spec_with(spec: ExperimentSpec, parameter: str, value) -> ExperimentSpec:
    group, key = parameter.split(".", 1)
    doc = spec.to_dict()
    doc["name"] = f"{spec.name}-{group}_{key}-{value}"
    if group == "feedback":
        for arm in doc["arms"].values():
            if arm["feedback"] is not None:
                arm["feedback"] = {**arm["feedback"], key: value}
    else:
        doc[group] = {**doc[group], key: value}
    return ExperimentSpec.from_dict(doc)


def sweep(spec: ExperimentSpec, parameter: str, values, out_dir: str,
          params: AdapterParams | None = None, jobs: int = 1,
          train_spec: TrainSpec | None = None,
          save_logs: bool = False) -> dict:
    """One report per value plus a combined comparison table.

    feedback./buffer./engine. parameters re-run evaluation on the same
    checkpoint; adapter./train. parameters retrain per value (these change
    the model itself, so a fixed checkpoint cannot represent them).
    """
    if parameter.startswith(EVAL_SWEEP_PREFIXES):
        retrain = False
    elif parameter.startswith(TRAIN_SWEEP_PREFIXES):
        retrain = True
        if train_spec is None:
            raise ValueError(f"sweeping {parameter} requires a train spec")
    else:
        raise ValueError(f"unknown sweep parameter {parameter!r}")

    combined = {"parameter": parameter, "values": list(values), "runs": {}}
    for value in values:
        if retrain:
            group, key = parameter.split(".", 1)
            tdoc = train_spec.to_dict()
            tdoc[group] = {**tdoc[group], key: value}
            sub_out = os.path.join(out_dir, f"train-{parameter}-{value}")
            run_params, _ = train(TrainSpec.from_dict(tdoc), sub_out)
            value_spec = dataclasses.replace(
                spec, name=f"{spec.name}-{parameter.replace('.', '_')}-{value}")
        else:
            run_params = params
            value_spec = _spec_with(spec, parameter, value)
        report = run_experiment(value_spec, out_dir, params=run_params,
                                jobs=jobs, save_logs=save_logs)
        combined["runs"][str(value)] = report

    path = os.path.join(out_dir, f"sweep-{parameter.replace('.', '_')}")
    os.makedirs(path, exist_ok=True)
    with open(os.path.join(path, "sweep.json"), "w") as f:
        json.dump(combined, f, indent=1, sort_keys=True)
    arms = list(spec.arms)
    for arm in arms:
        series = []
        for value in values:
            stats = combined["runs"][str(value)]["arms"][arm]["overall"]
            series.append((value, stats["mAP"]["mean"]))
        _write_series(os.path.join(path, f"map-{arm}.txt"), series)
    with open(os.path.join(path, "table.csv"), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["value", "arm", "subset", "mAP", "recall", "eds"])
        for value in values:
            for arm, subsets in combined["runs"][str(value)]["arms"].items():
                for subset, m in subsets.items():
                    w.writerow([value, arm, subset,
                                f"{m['mAP']['mean']:.6f}",
                                f"{m['recall']['mean']:.6f}",
                                f"{m['eds']['mean']:.6f}"])
    return combined


# ----------------------------------------------------------------------- CLI


def _cmd_train(args) -> int:
    if args.config:
        with open(args.config) as f:
            tspec = TrainSpec.from_dict(json.load(f))
    else:
        tspec = TrainSpec()
    if args.seed is not None:
        tspec = dataclasses.replace(tspec, seed=args.seed)
    _, summary = train(tspec, args.out_dir)
    print(json.dumps({"digest": summary["digest"],
                      "final_loss": summary["final_loss"],
                      "alignment": summary["alignment"]}, indent=1))
    return 0


def _load_run_params(args, spec: ExperimentSpec):
    path = args.checkpoint or spec.checkpoint
    if not path:
        raise SystemExit("no checkpoint given (flag or spec)")
    return load_checkpoint(path)


def _cmd_run(args) -> int:
    spec = load_spec(args.spec)
    if args.seed is not None:
        spec = dataclasses.replace(spec, seeds=(args.seed,))
    report = run_experiment(spec, args.out_dir,
                            params=_load_run_params(args, spec),
                            jobs=args.jobs)
    print(format_table(report))
    return 0


def _cmd_sweep(args) -> int:
    spec = load_spec(args.spec)
    values = [json.loads(v) for v in args.values.split(",")]
    tspec = None
    if args.train_spec:
        with open(args.train_spec) as f:
            tspec = TrainSpec.from_dict(json.load(f))
    params = None
    if not args.parameter.startswith(TRAIN_SWEEP_PREFIXES):
        params = _load_run_params(args, spec)
    sweep(spec, args.parameter, values, args.out_dir, params=params,
          jobs=args.jobs, train_spec=tspec)
    print(f"sweep over {args.parameter} written to {args.out_dir}")
    return 0


def _cmd_trace_buffer(args) -> int:
    log = EpisodeLog.load(args.log)
    pairs = list(enumerate(log.buffer_trace()))
    if args.out:
        _write_series(args.out, pairs)
    else:
        for x, y in pairs:
            print(x, y)
    return 0


def _cmd_report(args) -> int:
    with open(os.path.join(args.dir, "report.json")) as f:
        report = json.load(f)
    _write_table(report, os.path.join(args.dir, "table.csv"))
    print(format_table(report))
    return 0


def _cmd_serve(args) -> int:
    from . import service

    return service.serve_main(args)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="promptloop",
        description="train, run and inspect correction-loop experiments",
    )
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train an adapter checkpoint")
    t.add_argument("--config", help="train spec JSON")
    t.add_argument("--out-dir", required=True)
    t.add_argument("--seed", type=int, default=None)
    t.set_defaults(fn=_cmd_train)

    r = sub.add_parser("run", help="run an experiment spec")
    r.add_argument("--spec", required=True)
    r.add_argument("--checkpoint")
    r.add_argument("--out-dir", required=True)
    r.add_argument("--seed", type=int, default=None)
    r.add_argument("--jobs", type=int, default=1)
    r.set_defaults(fn=_cmd_run)

    s = sub.add_parser("sweep", help="sweep one parameter over values")
    s.add_argument("--spec", required=True)
    s.add_argument("--parameter", required=True)
    s.add_argument("--values", required=True,
                   help="comma-separated JSON scalars, e.g. 0,2,4")
    s.add_argument("--checkpoint")
    s.add_argument("--train-spec")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(fn=_cmd_sweep)

    tb = sub.add_parser("trace-buffer", help="buffer-size series from a log")
    tb.add_argument("--log", required=True)
    tb.add_argument("--out")
    tb.set_defaults(fn=_cmd_trace_buffer)

    rep = sub.add_parser("report", help="re-render tables from a run dir")
    rep.add_argument("--dir", required=True)
    rep.set_defaults(fn=_cmd_report)

    srv = sub.add_parser("serve", help="start the streaming service")
    srv.add_argument("--checkpoint", required=True)
    srv.add_argument("--host", default="127.0.0.1")
    srv.add_argument("--port", type=int, default=8787)
    srv.set_defaults(fn=_cmd_serve)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
