"""Command-line entry point.

Every subcommand takes ``--config <yaml>`` and ``--out <dir>``. Failures exit
nonzero after printing one JSON line on stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import experiments as ex
from . import rmab
from .config import ConfigError, ScenarioConfig, load_scenario, resolved_yaml
from .persistence import CheckpointError, export_metrics, load_checkpoint, read_metrics, save_checkpoint
from .simulator import (
    BanditScenario,
    LinearEnvSpec,
    MetricsTable,
    RmabEnvSpec,
    RmabScenario,
    make_policy,
    make_survival_cohort,
    replicate,
)
from .survival import fit_discrete_hazard, fit_kaplan_meier, predict_survival, read_survival_csv, risk_rank
from .traits import Column, ContextSchema, DynamicTrait, StaticTrait, TraitStore, build_context, parse_timestamp, read_events

COMMAND_KINDS = {
    "simulate": ("bandit-sim", "rmab-sim"),
    "fit-survival": ("survival-fit",),
    "decide": ("decide",),
    "allocate": ("allocate",),
    "experiment": ("experiment",),
}


class CliError(RuntimeError):
    def __init__(self, code: str, message: str, exit_code: int = 1):
        super().__init__(message)
        self.code = code
        self.exit_code = exit_code


def _write(out: Path, name: str, text: str) -> Path:
    path = out / name
    path.write_text(text)
    return path


# ---------------------------------------------------------------------------
# simulate


def bandit_scenario(cfg: ScenarioConfig) -> BanditScenario:
    sec = cfg.bandit
    spec = LinearEnvSpec(np.array(sec.theta), sec.noise_sd, sec.context, sec.horizon, cfg.seed)
    policies = {}
    for p in sec.policies:
        params = p.model_dump(exclude={"label"})
        label = p.label or p.type
        if label in policies:
            raise CliError("config", f"duplicate policy label: {label}", 2)
        policies[label] = params
    return BanditScenario(cfg.name, spec, policies, sec.record_every)


def rmab_spec(cfg: ScenarioConfig) -> RmabEnvSpec:
    sec = cfg.rmab
    mdps, groups = [], []
    for tpl in sec.templates:
        mdp = rmab.TwoStateMdp.from_probs(tpl.passive, tpl.active, tpl.rewards, sec.discount)
        mdps.extend([mdp] * tpl.count)
        groups.extend([tpl.group] * tpl.count)
    n = len(mdps)
    if sec.initial_state == "alternate":
        states = [i % 2 for i in range(n)]
    elif sec.initial_state == "good":
        states = [1] * n
    elif sec.initial_state == "bad":
        states = [0] * n
    else:
        states = np.random.default_rng(cfg.seed).integers(0, 2, n).tolist()
    return RmabEnvSpec(mdps, sec.budget, sec.horizon, states, groups, cfg.seed)


def rmab_scenario(cfg: ScenarioConfig) -> RmabScenario:
    sec = cfg.rmab
    return RmabScenario(cfg.name, rmab_spec(cfg), list(sec.allocators), sec.equity, sec.record_every)


def cmd_simulate(cfg: ScenarioConfig, out: Path) -> MetricsTable:
    scenario = bandit_scenario(cfg) if cfg.kind == "bandit-sim" else rmab_scenario(cfg)
    table = replicate(scenario, cfg.replications, cfg.seed, cfg.name)
    export_metrics(table, out / "metrics.csv")
    return table


# ---------------------------------------------------------------------------
# fit-survival


def cmd_fit_survival(cfg: ScenarioConfig, out: Path) -> MetricsTable:
    sec = cfg.survival
    if sec.data is not None:
        records = read_survival_csv(sec.data, sec.max_followup, sec.censored_value)
    else:
        syn = sec.synthetic
        records = make_survival_cohort(syn.n, syn.beta, syn.gamma, syn.censoring_rate, cfg.seed, sec.period)
    curve = fit_kaplan_meier(records)
    model = fit_discrete_hazard(records, sec.period, sec.l2, sec.max_iter, sec.tol)
    horizon = sec.horizon or model.n_periods
    if horizon > model.n_periods:
        raise CliError("config", f"survival.horizon {horizon} exceeds model periods {model.n_periods}", 2)

    with open(out / "kaplan_meier.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time", "at_risk", "events", "survival"])
        for row in zip(curve.times, curve.at_risk, curve.events, curve.survival):
            w.writerow([repr(float(row[0])), int(row[1]), int(row[2]), repr(float(row[3]))])

    cohort = [(r.subject_id or f"row{i}", r.x) for i, r in enumerate(records)]
    ranking = risk_rank(model, cohort, horizon)
    lookup = dict(cohort)
    with open(out / "risk_rank.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rank", "subject_id", "survival_at_horizon"])
        for i, sid in enumerate(ranking, start=1):
            w.writerow([i, sid, repr(float(predict_survival(model, lookup[sid], horizon)[-1]))])
    save_checkpoint(model, out / "hazard_model.ckpt")

    table = MetricsTable()
    for j, v in enumerate(model.beta):
        table.add(cfg.name, 0, "aggregate", f"beta/{j}", v)
    for j, v in enumerate(model.gamma):
        table.add(cfg.name, 0, "aggregate", f"gamma/{j + 1}", v)
    table.add(cfg.name, 0, "aggregate", "final_loss", model.final_loss)
    table.add(cfg.name, 0, "aggregate", "grad_norm", model.grad_norm)
    table.add(cfg.name, 0, "aggregate", "iterations", model.iterations)
    table.add(cfg.name, 0, "aggregate", "n_records", len(records))
    table.add(cfg.name, 0, "aggregate", "n_events", sum(1 for r in records if r.c == 0))
    export_metrics(table, out / "metrics.csv")
    return table


# ---------------------------------------------------------------------------
# experiment


def _design(cfg: ScenarioConfig) -> ex.ExperimentDesign:
    d = cfg.experiment.design
    tp = d.treatment_prob
    return ex.ExperimentDesign(
        unit=d.unit,
        mechanism=d.mechanism,
        arms=tuple(d.arms),
        probabilities=None if d.probabilities is None else tuple(d.probabilities),
        treatment_prob=tuple(tp) if isinstance(tp, list) else tp,
        seed=cfg.seed,
    )


def cmd_experiment(cfg: ScenarioConfig, out: Path) -> MetricsTable:
    sec = cfg.experiment
    if sec.log is not None:
        rows = [(rec, r) for rec, r in ex.read_log(sec.log) if r is not None]
    else:
        design = _design(cfg)
        env_rng, assign_rng = (np.random.default_rng(s) for s in np.random.SeedSequence(cfg.seed).spawn(2))
        rows = []
        for t in range(sec.n_points):
            for u in range(sec.n_units):
                unit = f"u{u:04d}"
                if design.mechanism == "micro":
                    rec = ex.mrt_randomize(design, unit, t, assign_rng)
                else:
                    cluster = f"c{u % sec.n_clusters:03d}" if design.unit == "cluster" else None
                    rec = ex.assign(design, unit, cluster, assign_rng, decision_point=t)
                treated = 1.0 if rec.arm == 1 else 0.0
                reward = sec.baseline + sec.effect * treated + sec.noise_sd * env_rng.standard_normal()
                rows.append((rec, float(reward)))
        ex.write_log(out / "experiment_log.jsonl", rows)
    table = MetricsTable()
    for name in sec.estimators:
        est = ex.estimate_effect(rows, name)
        table.add(cfg.name, 0, "aggregate", f"{name}/estimate", est.estimate)
        table.add(cfg.name, 0, "aggregate", f"{name}/std_error", est.std_error)
        table.add(cfg.name, 0, "aggregate", f"{name}/n", est.n)
    export_metrics(table, out / "metrics.csv")
    return table


# ---------------------------------------------------------------------------
# decide


def cmd_decide(cfg: ScenarioConfig, out: Path) -> MetricsTable:
    sec = cfg.decide
    store = TraitStore(
        [DynamicTrait(t.name, t.kind, t.aggregator, t.window_days, t.field) for t in sec.dynamic_traits],
        [StaticTrait(t.name, t.kind, t.field) for t in sec.static_traits],
    )
    for event in read_events(sec.events):
        store.add(event)
    schema = ContextSchema(tuple(Column(c.trait, c.mean, c.scale, c.indicator) for c in sec.columns))
    now = parse_timestamp(sec.now)

    spec = LinearEnvSpec(np.zeros((sec.n_arms, schema.dim)))
    if sec.checkpoint is not None:
        policy = load_checkpoint(sec.checkpoint)
        if getattr(policy, "n_arms", sec.n_arms) != sec.n_arms or getattr(policy, "dim", schema.dim) != schema.dim:
            raise CliError("checkpoint", "checkpoint policy does not match n_arms or schema dimension")
    else:
        params = sec.policy.model_dump(exclude={"label", "type"})
        policy = make_policy(sec.policy.type, spec, params, seed=cfg.seed)
    rng = np.random.default_rng(cfg.seed)

    if sec.feedback is not None:
        with open(sec.feedback) as fh:
            for lineno, text in enumerate(fh, start=1):
                if not text.strip():
                    continue
                fb = json.loads(text)
                try:
                    x = build_context(store, str(fb["subject_id"]), schema, now)
                    policy.update(x, int(fb["arm"]), float(fb["reward"]))
                except (KeyError, ValueError) as exc:
                    raise CliError("feedback", f"line {lineno}: {exc}") from None

    table = MetricsTable()
    counts = np.zeros(sec.n_arms, dtype=int)
    with open(out / "decisions.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id", "arm", "propensity"] + schema.names)
        design = ex.ExperimentDesign(mechanism="adaptive", arms=tuple(f"arm{k}" for k in range(sec.n_arms)))
        for sid in store.subjects:
            x = build_context(store, sid, schema, now)
            try:
                rec = ex.adaptive_assign(design, policy, x, rng, sid, 0, sec.propensity_samples)
                arm, prop = rec.arm, rec.propensity
            except TypeError:
                arm, prop = policy.select(x, rng), float("nan")
            counts[arm] += 1
            w.writerow([sid, arm, repr(float(prop))] + [repr(float(v)) for v in x])
    save_checkpoint(policy, out / "policy.ckpt")
    for k, c in enumerate(counts):
        table.add(cfg.name, 0, "aggregate", f"arm_count/{k}", c)
    export_metrics(table, out / "metrics.csv")
    return table


# ---------------------------------------------------------------------------
# allocate


def read_cohort(path, discount: float = 0.9) -> list[rmab.RmabArm]:
    """Cohort CSV: ``id,group,state,passive_from_0,passive_from_1,active_from_0,active_from_1``.

    Transition columns hold ``P(s'=1 | s)``; the literal ``learn`` in all four
    marks an arm whose dynamics are unknown and start from a uniform prior.
    """
    cols = ["id", "group", "state", "passive_from_0", "passive_from_1", "active_from_0", "active_from_1"]
    arms = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or list(reader.fieldnames) != cols:
            raise ValueError(f"cohort file must have header {','.join(cols)}")
        for lineno, row in enumerate(reader, start=2):
            probs = [row[c].strip() for c in cols[3:]]
            try:
                state = int(row["state"])
                if all(p == "learn" for p in probs):
                    dyn = rmab.DynamicsBelief(discount=discount)
                else:
                    p = [float(v) for v in probs]
                    dyn = rmab.TwoStateMdp.from_probs(p[:2], p[2:], discount=discount)
                arms.append(rmab.RmabArm(row["id"], state, dyn, row["group"]))
            except ValueError as exc:
                raise ValueError(f"line {lineno}: {exc}") from None
    return arms


def cmd_allocate(cfg: ScenarioConfig, out: Path) -> MetricsTable:
    sec = cfg.allocate
    arms = read_cohort(sec.cohort, sec.discount)
    rng = np.random.default_rng(cfg.seed)
    if sec.equity is None:
        alloc = rmab.allocate(arms, sec.budget, rng, sec.round)
    else:
        alloc = rmab.equitable_allocate(arms, sec.budget, sec.equity, rng, sec.round)
    (out / "allocation.json").write_text(json.dumps(alloc.to_record(), sort_keys=True, indent=2) + "\n")
    table = MetricsTable()
    table.add(cfg.name, 0, "aggregate", "acted", len(alloc.acted))
    for g in sorted(alloc.group_counts):
        table.add(cfg.name, 0, "aggregate", f"group_count/{g}", alloc.group_counts[g])
        table.add(cfg.name, 0, "aggregate", f"group_mean_index/{g}", alloc.group_mean_index[g])
    export_metrics(table, out / "metrics.csv")
    return table


# ---------------------------------------------------------------------------
# report


def cmd_report(cfg: ScenarioConfig, out: Path) -> MetricsTable:
    path = out / "metrics.csv"
    if not path.exists():
        raise CliError("report", f"no metrics file at {path}; run the scenario first")
    full = read_metrics(path)
    summary = MetricsTable([r for r in full.rows if r[2] == "aggregate" and r[1] in ("mean", "sd")])
    if not summary.rows:
        summary = MetricsTable([r for r in full.rows if r[2] == "aggregate"])
    export_metrics(summary, out / "report.csv")
    for scenario, rep, _, metric, value in summary.rows:
        print(f"{scenario}\t{rep}\t{metric}\t{value:.6g}")
    return summary


COMMANDS = {
    "simulate": cmd_simulate,
    "fit-survival": cmd_fit_survival,
    "decide": cmd_decide,
    "allocate": cmd_allocate,
    "experiment": cmd_experiment,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="adaptint", description="Adaptive intervention engine and simulator")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, type=Path)
        p.add_argument("--out", required=True, type=Path)
    return parser


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_scenario(args.config)
        allowed = COMMAND_KINDS.get(args.command)
        if allowed is not None and cfg.kind not in allowed:
            raise CliError("config", f"command '{args.command}' cannot run a '{cfg.kind}' config", 2)
        args.out.mkdir(parents=True, exist_ok=True)
        if args.command != "report":
            _write(args.out, "resolved_config.yaml", resolved_yaml(cfg))
        COMMANDS[args.command](cfg, args.out)
    except ConfigError as exc:
        _fail("config", str(exc), 2, key=exc.key)
        return 2
    except CliError as exc:
        _fail(exc.code, str(exc), exc.exit_code)
        return exc.exit_code
    except CheckpointError as exc:
        _fail("checkpoint", str(exc), 1)
        return 1
    except (ValueError, KeyError, OSError, ArithmeticError) as exc:
        _fail(type(exc).__name__, str(exc), 1)
        return 1
    return 0


def _fail(code: str, message: str, exit_code: int, key: str | None = None) -> None:
    payload = {"error": code, "message": " ".join(message.split()), "exit_code": exit_code}
    if key:
        payload["key"] = key
    print(json.dumps(payload, sort_keys=True), file=sys.stderr)


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
